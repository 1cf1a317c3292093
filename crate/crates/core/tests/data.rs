mod common;

use std::collections::HashMap;

use common::*;
use rand::Rng;
use rankmixer::autodiff::Graph;
use rankmixer::data::{
    generate_dataset, hash_index, lookup_and_concat, read_samples, write_samples, DataConfig, EmbeddingSet,
    EmbeddingTable, FeatureGroupSpec, FeatureSpec, Sample, Schema, Side,
};
use rankmixer::train::bayes_auc;
use rankmixer::Error;

fn three_feature_schema() -> Schema {
    let f = |n: &str, v: u64, d: usize| FeatureSpec { name: n.into(), vocab_size: v, embed_dim: d };
    Schema {
        groups: vec![
            FeatureGroupSpec { name: "u".into(), side: Side::User, features: vec![f("user_id", 50, 4)] },
            FeatureGroupSpec { name: "i".into(), side: Side::Item, features: vec![f("item", 30, 8), f("ctx", 10, 4)] },
        ],
    }
}

fn sample(user: u64, values: Vec<u64>) -> Sample {
    Sample { user_id: user, values, finish: 1, skip: 0 }
}

#[test]
fn collisions_follow_birthday_bound() {
    let (n, vocab) = (10_000usize, 1_000_000u64);
    let mut r = rng(1);
    let mut buckets: HashMap<u64, usize> = HashMap::new();
    for _ in 0..n {
        *buckets.entry(hash_index("item_id", r.random::<u64>(), vocab)).or_default() += 1;
    }
    let colliding: usize = buckets.values().filter(|&&c| c > 1).sum();
    let p = 1.0 - (1.0 - 1.0 / vocab as f64).powi(n as i32 - 1);
    let expected = n as f64 * p;
    // colliding items arrive in pairs; pair count is ~Poisson(expected / 2)
    let sigma = 2.0 * (expected / 2.0).sqrt();
    assert!(((colliding as f64) - expected).abs() <= 3.0 * sigma, "{colliding} vs {expected} +- {sigma}");
}

#[test]
fn bayes_auc_reproduces_across_seeds() {
    let schema = Schema::default();
    let auc_for = |seed| {
        let ds = generate_dataset(&schema, &DataConfig { n_samples: 100_000, seed, ..Default::default() }).unwrap();
        bayes_auc(&ds.truth, &ds.samples, "finish").unwrap()
    };
    let (a, b) = (auc_for(11), auc_for(12));
    assert!((a - b).abs() <= 0.01, "{a} vs {b}");
    assert!(a > 0.6 && b > 0.6);
}

#[test]
fn truth_beats_label_independent_scores() {
    let schema = Schema::default();
    for seed in 0..3 {
        let ds = generate_dataset(&schema, &DataConfig { n_samples: 20_000, seed, ..Default::default() }).unwrap();
        let skip = bayes_auc(&ds.truth, &ds.samples, "skip").unwrap();
        let finish = bayes_auc(&ds.truth, &ds.samples, "finish").unwrap();
        assert!(finish > 0.6 && skip > 0.6, "{finish} {skip}");
    }
}

#[test]
fn lookup_width_and_determinism() {
    let schema = three_feature_schema();
    let set = EmbeddingSet::new(&schema, 4);
    let batch = vec![sample(3, vec![3, 17, 2]), sample(3, vec![3, 17, 2]), sample(9, vec![9, 1, 5])];
    let mut g = Graph::new();
    let lk = lookup_and_concat(&mut g, &batch, &set, &schema).unwrap();
    let v = g.value(lk.var);
    assert_eq!(v.shape(), &[3, 16]);
    assert_eq!(v.row(0), v.row(1));
    assert_ne!(v.row(0), v.row(2));
}

#[test]
fn missing_table_is_config_error() {
    let schema = three_feature_schema();
    let full = EmbeddingSet::new(&schema, 4);
    let partial = EmbeddingSet::from_tables(full.tables()[..2].to_vec());
    let mut g = Graph::new();
    let err = lookup_and_concat(&mut g, &[sample(1, vec![1, 2, 3])], &partial, &schema).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

fn lookup_loss(set: &EmbeddingSet, schema: &Schema, batch: &[Sample]) -> (f64, rankmixer::data::SparseGrads) {
    let mut g = Graph::new();
    let lk = lookup_and_concat(&mut g, batch, set, schema).unwrap();
    let h = g.gelu(lk.var);
    let loss = weighted_sum(&mut g, h, 77).unwrap();
    g.backward(loss).unwrap();
    (g.value(loss).data()[0], lk.sparse_grads(&g))
}

#[test]
fn embedding_row_gradient_matches_finite_differences() {
    let schema = three_feature_schema();
    let set = EmbeddingSet::new(&schema, 5);
    let batch = vec![sample(3, vec![3, 17, 2]), sample(4, vec![4, 17, 6]), sample(3, vec![3, 11, 2])];
    let (_, grads) = lookup_loss(&set, &schema, &batch);
    let h = 1e-5;
    for (table, rows) in &grads.tables {
        for (&row, analytic) in rows {
            for (k, &a) in analytic.iter().enumerate() {
                let bump = |delta: f64| {
                    let mut tables = set.tables().to_vec();
                    let t = &tables[*table];
                    let mut w = t.weights().to_vec();
                    w[row * t.dim() + k] += delta;
                    tables[*table] = EmbeddingTable::from_weights(t.feature(), t.vocab(), t.dim(), w).unwrap();
                    lookup_loss(&EmbeddingSet::from_tables(tables), &schema, &batch).0
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-5, "table {table} row {row}[{k}]: {a} vs {numeric}");
            }
        }
    }
    // the shared item row 17 appears twice and collects both contributions
    let item_rows: Vec<usize> = grads.touched_rows(1).collect();
    assert_eq!(item_rows.len(), 2);
}

#[test]
fn samples_round_trip_through_ndjson() {
    let schema = Schema::default();
    let ds = generate_dataset(&schema, &DataConfig { n_samples: 50, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.ndjson");
    write_samples(&path, &ds.samples).unwrap();
    assert_eq!(read_samples(&path).unwrap(), ds.samples);
    std::fs::write(&path, "{\"user_id\":1,\"values\":[1],\"finish\":3,\"skip\":0}\n").unwrap();
    assert!(read_samples(&path).is_err());
}

#[test]
fn split_holds_out_the_tail() {
    let schema = Schema::default();
    let ds = generate_dataset(&schema, &DataConfig { n_samples: 1000, ..Default::default() }).unwrap();
    let (train, eval) = ds.split(0.1);
    assert_eq!(train.len(), 900);
    assert_eq!(eval, &ds.samples[900..]);
}
