//! Synthetic multi-field recommendation data and hashed embedding tables.

mod embedding;
mod hash;
mod records;
mod schema;
mod synth;

pub use embedding::{lookup_and_concat, EmbeddingSet, EmbeddingTable, Lookup, SparseGrads, INIT_SCALE};
pub use hash::{fnv1a, hash_index, FNV_OFFSET_BASIS, FNV_PRIME};
pub use records::{read_samples, write_samples};
pub use schema::{FeatureGroupSpec, FeatureSpec, Schema, Side, USER_ID_FEATURE};
pub use synth::{
    generate_dataset, DataConfig, Dataset, GroundTruth, InteractionSpec, MainTerm, PairTerm, Sample, SyntheticBatch,
    SyntheticGenerator,
};
