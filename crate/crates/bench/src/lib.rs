//! Criterion benchmarks for the hot kernels of the `rankmixer` crate; see `benches/`.
