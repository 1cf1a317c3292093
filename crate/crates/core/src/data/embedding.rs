use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hash::{fnv1a, hash_index};
use super::schema::{FeatureSpec, Schema};
use super::synth::Sample;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Initial embedding values are drawn from `uniform(-INIT_SCALE, INIT_SCALE)`.
pub const INIT_SCALE: f64 = 0.05;

/// `vocab_size x embed_dim` table plus a same-shaped Adagrad accumulator.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    feature: String,
    vocab: usize,
    dim: usize,
    weights: Vec<f64>,
    accum: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(spec: &FeatureSpec, seed: u64) -> Self {
        let vocab = spec.vocab_size as usize;
        let dim = spec.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.bytes()));
        let weights = (0..vocab * dim).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect();
        EmbeddingTable { feature: spec.name.clone(), vocab, dim, weights, accum: vec![0.0; vocab * dim] }
    }

    /// Table with given weights and a fresh accumulator.
    pub fn from_weights(feature: &str, vocab: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != vocab * dim || vocab == 0 || dim == 0 {
            return Err(Error::shape(format!("{} weights for a {vocab}x{dim} table", weights.len())));
        }
        Ok(EmbeddingTable { feature: feature.to_string(), vocab, dim, accum: vec![0.0; weights.len()], weights })
    }

    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    /// Row weights and their accumulator, for an optimizer update.
    pub fn row_and_accum_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let r = i * self.dim..(i + 1) * self.dim;
        (&mut self.weights[r.clone()], &mut self.accum[r])
    }

    pub fn accum_row(&self, i: usize) -> &[f64] {
        &self.accum[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    tables: Vec<EmbeddingTable>,
}

impl EmbeddingSet {
    pub fn new(schema: &Schema, seed: u64) -> Self {
        EmbeddingSet { tables: schema.features().map(|f| EmbeddingTable::new(f, seed)).collect() }
    }

    pub fn from_tables(tables: Vec<EmbeddingTable>) -> Self {
        EmbeddingSet { tables }
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn table(&self, feature: &str) -> Option<&EmbeddingTable> {
        self.tables.iter().find(|t| t.feature == feature)
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable] {
        &mut self.tables
    }

    /// Table position for each schema feature, in schema order.
    fn resolve(&self, schema: &Schema) -> Result<Vec<usize>> {
        schema
            .features()
            .map(|f| {
                let pos = self
                    .tables
                    .iter()
                    .position(|t| t.feature == f.name)
                    .ok_or_else(|| Error::Config(format!("no embedding table for feature '{}'", f.name)))?;
                let t = &self.tables[pos];
                if t.dim != f.embed_dim || t.vocab as u64 != f.vocab_size {
                    return Err(Error::Config(format!(
                        "embedding table '{}' is {}x{} but schema says {}x{}",
                        f.name, t.vocab, t.dim, f.vocab_size, f.embed_dim
                    )));
                }
                Ok(pos)
            })
            .collect()
    }
}

/// Result of [`lookup_and_concat`]: the `[batch, width]` leaf on the tape and
/// the rows it was gathered from.
#[derive(Clone, Debug)]
pub struct Lookup {
    pub var: Var,
    batch: usize,
    tables: Vec<usize>,
    dims: Vec<usize>,
    rows: Vec<usize>,
}

/// Per-table sparse gradient: row index -> gradient row. Ordered maps keep
/// update order deterministic.
#[derive(Clone, Debug, Default)]
pub struct SparseGrads {
    pub tables: Vec<(usize, BTreeMap<usize, Vec<f64>>)>,
}

impl SparseGrads {
    pub fn sum_squares(&self) -> f64 {
        self.tables.iter().flat_map(|(_, m)| m.values()).flat_map(|r| r.iter()).map(|g| g * g).sum()
    }

    pub fn scale(&mut self, c: f64) {
        for (_, m) in &mut self.tables {
            for r in m.values_mut() {
                r.iter_mut().for_each(|g| *g *= c);
            }
        }
    }

    pub fn touched_rows(&self, table: usize) -> impl Iterator<Item = usize> + '_ {
        self.tables.iter().filter(move |(t, _)| *t == table).flat_map(|(_, m)| m.keys().copied())
    }
}

impl Lookup {
    /// Scatters the gradient of the gathered leaf back to table rows,
    /// summing duplicates.
    pub fn sparse_grads(&self, g: &Graph) -> SparseGrads {
        let grad = g.grad_tensor(self.var);
        let width: usize = self.dims.iter().sum();
        let nf = self.tables.len();
        let mut maps: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); nf];
        for b in 0..self.batch {
            let mut off = 0;
            for f in 0..nf {
                let d = self.dims[f];
                let src = &grad.data()[b * width + off..b * width + off + d];
                let acc = maps[f].entry(self.rows[b * nf + f]).or_insert_with(|| vec![0.0; d]);
                acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                off += d;
            }
        }
        SparseGrads { tables: self.tables.iter().copied().zip(maps).collect() }
    }
}

/// Gathers each sample's embedding rows in schema order and concatenates them
/// into a `[batch, total_width]` leaf.
pub fn lookup_and_concat(g: &mut Graph, batch: &[Sample], set: &EmbeddingSet, schema: &Schema) -> Result<Lookup> {
    let tables = set.resolve(schema)?;
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let dims: Vec<usize> = tables.iter().map(|&t| set.tables[t].dim).collect();
    let width: usize = dims.iter().sum();
    let names: Vec<&str> = schema.features().map(|f| f.name.as_str()).collect();
    let mut data = Vec::with_capacity(batch.len() * width);
    let mut rows = Vec::with_capacity(batch.len() * tables.len());
    for s in batch {
        if s.values.len() != tables.len() {
            return Err(Error::Schema(format!(
                "sample has {} values but schema has {} features",
                s.values.len(),
                tables.len()
            )));
        }
        for (f, &t) in tables.iter().enumerate() {
            let table = &set.tables[t];
            let row = hash_index(names[f], s.values[f], table.vocab as u64) as usize;
            rows.push(row);
            data.extend_from_slice(table.row(row));
        }
    }
    let var = g.leaf(Tensor::new(vec![batch.len(), width], data)?);
    Ok(Lookup { var, batch: batch.len(), tables, dims, rows })
}
