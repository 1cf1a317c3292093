//! Synthetic multi-field samples with planted pairwise interactions.
//!
//! Each (feature, raw value) carries a hidden code of `r` bits in {-1, +1}
//! derived by hashing; every bit is standardized to zero mean and unit
//! variance under the feature's marginal law. With `z` the standardized code,
//! the finish logit is
//! `bias + sum_pairs w / sqrt(r) * <z_a, z_b> + sum_main w * z_0 + user_effect`.
//! The skip logit shares `task_correlation` of the pairwise part and draws
//! the rest from an independent code on the same pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use super::hash::fnv1a;
use super::schema::{Schema, Side, USER_ID_FEATURE};
use crate::autodiff::sigmoid_scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairTerm {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainTerm {
    pub feature: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionSpec {
    pub bias: f64,
    pub pairs: Vec<PairTerm>,
    pub main_effects: Vec<MainTerm>,
    pub user_effect_std: f64,
    /// Share of the finish pairwise term reused by the skip logit.
    pub task_correlation: f64,
    /// Exponent of the Zipf law raw values are drawn from.
    pub zipf_exponent: f64,
    /// Width `r` of the hidden code behind every (feature, value).
    pub latent_bits: usize,
}

fn pair(a: &str, b: &str, weight: f64) -> PairTerm {
    PairTerm { a: a.into(), b: b.into(), weight }
}

fn main_term(feature: &str, weight: f64) -> MainTerm {
    MainTerm { feature: feature.into(), weight }
}

impl Default for InteractionSpec {
    fn default() -> Self {
        InteractionSpec {
            bias: 0.0,
            pairs: vec![
                pair("user_pref_topic", "item_category", 1.0),
                pair("user_region", "author_id", 0.8),
                pair("user_activity", "time_bucket", 0.8),
                pair("user_age", "user_category_hist", 0.6),
            ],
            main_effects: vec![main_term("item_category", 0.4), main_term("author_id", 0.3)],
            user_effect_std: 0.5,
            task_correlation: 0.5,
            zipf_exponent: 1.4,
            latent_bits: 1,
        }
    }
}

impl InteractionSpec {
    /// Every term has zero weight and there is no user effect.
    pub fn null() -> Self {
        InteractionSpec { pairs: vec![], main_effects: vec![], user_effect_std: 0.0, ..Default::default() }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let mut errors = Vec::new();
        let names = self
            .pairs
            .iter()
            .flat_map(|p| [p.a.as_str(), p.b.as_str()])
            .chain(self.main_effects.iter().map(|m| m.feature.as_str()));
        for n in names {
            if schema.index_of(n).is_none() {
                errors.push(format!("interaction references unknown feature '{n}'"));
            }
        }
        if self.user_effect_std < 0.0 || !self.user_effect_std.is_finite() {
            errors.push("user_effect_std must be a finite non-negative number".into());
        }
        if !(0.0..=1.0).contains(&self.task_correlation) {
            errors.push("task_correlation must lie in [0, 1]".into());
        }
        if self.latent_bits == 0 || self.latent_bits > 64 {
            errors.push("latent_bits must lie in [1, 64]".into());
        }
        if !(self.zipf_exponent > 0.0) {
            errors.push("zipf_exponent must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(errors.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_users: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub interactions: InteractionSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_users: 2_000, n_samples: 200_000, seed: 7, interactions: InteractionSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: u64,
    /// Raw categorical values in schema feature order.
    pub values: Vec<u64>,
    pub finish: u8,
    pub skip: u8,
}

pub type SyntheticBatch = Vec<Sample>;

const FINISH_SALT: u8 = 1;
const SKIP_SALT: u8 = 2;

/// splitmix64 finalizer: FNV alone leaves nearby keys correlated.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn latent_bit(seed: u64, salt: u8, feature: &str, bit: usize, value: u64) -> f64 {
    let h = fnv1a(
        seed.to_le_bytes()
            .into_iter()
            .chain([salt, bit as u8])
            .chain(feature.bytes())
            .chain([0xff])
            .chain(value.to_le_bytes()),
    );
    if mix64(h) >> 63 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Marginal law of a feature's raw values.
enum Marginal {
    Zipf { vocab: u64, exponent: f64 },
    Uniform { n: u64 },
}

impl Marginal {
    /// Expected latent bit under this law.
    fn mean(&self, seed: u64, salt: u8, feature: &str, bit: usize) -> f64 {
        match *self {
            Marginal::Zipf { vocab, exponent } => {
                let (mut num, mut den) = (0.0, 0.0);
                for v in 0..vocab {
                    let p = ((v + 1) as f64).powf(-exponent);
                    num += p * latent_bit(seed, salt, feature, bit, v);
                    den += p;
                }
                num / den
            }
            Marginal::Uniform { n } => {
                (0..n).map(|v| latent_bit(seed, salt, feature, bit, v)).sum::<f64>() / n as f64
            }
        }
    }
}

/// Parameters of the planted model; scores samples with the true logits.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    seed: u64,
    spec: InteractionSpec,
    pairs: Vec<(usize, usize, f64)>,
    mains: Vec<(usize, f64)>,
    feature_names: Vec<String>,
    user_effects: Vec<f64>,
    /// `(mean, 1/std)` of every latent bit, indexed `[salt - 1][feature][bit]`.
    moments: Vec<Vec<Vec<(f64, f64)>>>,
}

impl GroundTruth {
    /// Bit `bit` of the latent code of `feature = value` under `salt`,
    /// centred and scaled to unit variance under the feature's marginal law.
    fn latent(&self, salt: u8, feature: usize, bit: usize, value: u64) -> f64 {
        let (m, inv) = self.moments[usize::from(salt - 1)][feature][bit];
        (latent_bit(self.seed, salt, &self.feature_names[feature], bit, value) - m) * inv
    }

    fn pairwise(&self, salt: u8, values: &[u64]) -> f64 {
        let r = self.spec.latent_bits;
        let norm = (r as f64).sqrt().recip();
        self.pairs
            .iter()
            .map(|&(a, b, w)| {
                let dot: f64 = (0..r).map(|k| self.latent(salt, a, k, values[a]) * self.latent(salt, b, k, values[b])).sum();
                w * norm * dot
            })
            .sum()
    }

    fn main(&self, salt: u8, values: &[u64]) -> f64 {
        self.mains.iter().map(|&(f, w)| w * self.latent(salt, f, 0, values[f])).sum()
    }

    /// Standardized latent bit of the finish task; pair terms are
    /// `w / sqrt(r) * sum_k latent(a, k) * latent(b, k)`.
    pub fn latent_code(&self, feature: usize, bit: usize, value: u64) -> f64 {
        self.latent(FINISH_SALT, feature, bit, value)
    }

    pub fn user_effect(&self, user_id: u64) -> f64 {
        self.user_effects[user_id as usize]
    }

    pub fn finish_logit(&self, s: &Sample) -> f64 {
        self.spec.bias + self.pairwise(FINISH_SALT, &s.values) + self.main(FINISH_SALT, &s.values) + self.user_effect(s.user_id)
    }

    pub fn skip_logit(&self, s: &Sample) -> f64 {
        let rho = self.spec.task_correlation;
        self.spec.bias
            + rho * self.pairwise(FINISH_SALT, &s.values)
            + (1.0 - rho) * self.pairwise(SKIP_SALT, &s.values)
            + self.main(SKIP_SALT, &s.values)
            + self.user_effect(s.user_id)
    }

    pub fn spec(&self) -> &InteractionSpec {
        &self.spec
    }
}

/// Streams samples; a pure function of (schema, config).
pub struct SyntheticGenerator {
    truth: GroundTruth,
    profiles: Vec<Vec<u64>>,
    samplers: Vec<Option<Zipf<f64>>>,
    user_feature: Option<usize>,
    n_users: usize,
    rng: ChaCha8Rng,
}

impl SyntheticGenerator {
    pub fn new(schema: &Schema, config: &DataConfig) -> Result<Self> {
        schema.validate()?;
        if config.n_users == 0 {
            return Err(Error::Schema("n_users must be >= 1".into()));
        }
        let spec = &config.interactions;
        spec.validate(schema)?;
        let idx = |n: &str| schema.index_of(n).expect("validated");
        let pairs: Vec<(usize, usize, f64)> = spec.pairs.iter().map(|p| (idx(&p.a), idx(&p.b), p.weight)).collect();
        let mains: Vec<(usize, f64)> = spec.main_effects.iter().map(|m| (idx(&m.feature), m.weight)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let user_effects = if spec.user_effect_std > 0.0 {
            let normal = Normal::new(0.0, spec.user_effect_std).map_err(|e| Error::Schema(e.to_string()))?;
            (0..config.n_users).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; config.n_users]
        };

        let samplers: Vec<Option<Zipf<f64>>> = schema
            .features()
            .map(|f| {
                (f.name != USER_ID_FEATURE).then(|| {
                    Zipf::new(f.vocab_size as f64, spec.zipf_exponent).expect("vocab >= 2 and exponent > 0")
                })
            })
            .collect();
        let sides: Vec<Side> = schema.features_with_side().map(|(_, s)| s).collect();
        let feature_names: Vec<String> = schema.features().map(|f| f.name.clone()).collect();

        let involved: Vec<bool> = (0..feature_names.len())
            .map(|f| pairs.iter().any(|&(a, b, _)| a == f || b == f) || mains.iter().any(|&(m, _)| m == f))
            .collect();
        let moments = [FINISH_SALT, SKIP_SALT]
            .iter()
            .map(|&salt| {
                schema
                    .features()
                    .enumerate()
                    .map(|(f, spec_f)| {
                        if !involved[f] {
                            return vec![];
                        }
                        let law = if spec_f.name == USER_ID_FEATURE {
                            Marginal::Uniform { n: config.n_users as u64 }
                        } else {
                            Marginal::Zipf { vocab: spec_f.vocab_size, exponent: spec.zipf_exponent }
                        };
                        (0..spec.latent_bits)
                            .map(|k| {
                                let m = law.mean(config.seed, salt, &spec_f.name, k);
                                (m, (1.0 - m * m).max(1e-12).sqrt().recip())
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        // user-side features are fixed per user
        let profiles = (0..config.n_users)
            .map(|_| {
                samplers
                    .iter()
                    .zip(&sides)
                    .map(|(z, side)| match (z, side) {
                        (Some(z), Side::User) => z.sample(&mut rng) as u64 - 1,
                        _ => 0,
                    })
                    .collect()
            })
            .collect();

        let truth = GroundTruth {
            seed: config.seed,
            spec: spec.clone(),
            pairs,
            mains,
            feature_names,
            user_effects,
            moments,
        };
        let samplers = samplers
            .into_iter()
            .zip(&sides)
            .map(|(z, side)| if *side == Side::User { None } else { z })
            .collect();
        Ok(SyntheticGenerator {
            truth,
            profiles,
            samplers,
            user_feature: schema.index_of(USER_ID_FEATURE),
            n_users: config.n_users,
            rng,
        })
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn next_sample(&mut self) -> Sample {
        let user = self.rng.random_range(0..self.n_users);
        let profile = &self.profiles[user];
        let mut values = Vec::with_capacity(self.samplers.len());
        for (i, sampler) in self.samplers.iter().enumerate() {
            let v = match sampler {
                Some(z) => z.sample(&mut self.rng) as u64 - 1,
                None if Some(i) == self.user_feature => user as u64,
                None => profile[i],
            };
            values.push(v);
        }
        let mut s = Sample { user_id: user as u64, values, finish: 0, skip: 0 };
        let pf = sigmoid_scalar(self.truth.finish_logit(&s));
        let ps = sigmoid_scalar(self.truth.skip_logit(&s));
        s.finish = u8::from(self.rng.random::<f64>() < pf);
        s.skip = u8::from(self.rng.random::<f64>() < ps);
        s
    }

    pub fn next_batch(&mut self, n: usize) -> SyntheticBatch {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

impl Iterator for SyntheticGenerator {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        Some(self.next_sample())
    }
}

/// A fully materialized draw together with the parameters that produced it.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub truth: GroundTruth,
}

impl Dataset {
    /// Train / held-out split: the last `eval_fraction` of the stream is held out.
    pub fn split(&self, eval_fraction: f64) -> (&[Sample], &[Sample]) {
        let n_eval = ((self.samples.len() as f64) * eval_fraction).round() as usize;
        self.samples.split_at(self.samples.len() - n_eval.min(self.samples.len()))
    }
}

pub fn generate_dataset(schema: &Schema, config: &DataConfig) -> Result<Dataset> {
    let mut g = SyntheticGenerator::new(schema, config)?;
    let samples = g.next_batch(config.n_samples);
    Ok(Dataset { samples, truth: g.truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, spec: InteractionSpec, n: usize) -> Dataset {
        let cfg = DataConfig { n_users: 50, n_samples: n, seed, interactions: spec };
        generate_dataset(&Schema::default(), &cfg).unwrap()
    }

    #[test]
    fn generation_is_pure() {
        let a = small(3, InteractionSpec::default(), 500);
        let b = small(3, InteractionSpec::default(), 500);
        assert_eq!(a.samples, b.samples);
        let c = small(4, InteractionSpec::default(), 500);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn null_model_positive_rate_is_half() {
        let n = 20_000;
        let d = small(11, InteractionSpec::null(), n);
        let rate = d.samples.iter().map(|s| f64::from(s.finish)).sum::<f64>() / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn saturated_pair_forces_positive_labels() {
        let spec = InteractionSpec {
            pairs: vec![pair("user_pref_topic", "item_category", 20.0)],
            ..InteractionSpec::null()
        };
        let d = small(5, spec, 5_000);
        let hit: Vec<&Sample> = d.samples.iter().filter(|s| d.truth.finish_logit(s) > 6.0).collect();
        assert!(hit.len() > 1000, "{}", hit.len());
        let pos = hit.iter().filter(|s| s.finish == 1).count() as f64 / hit.len() as f64;
        assert!(pos > 0.99, "{pos}");
    }

    #[test]
    fn latent_codes_are_standardized_under_zipf() {
        let d = small(2, InteractionSpec::default(), 10);
        let schema = Schema::default();
        let f = schema.index_of("item_category").unwrap();
        let s = InteractionSpec::default().zipf_exponent;
        for bit in 0..InteractionSpec::default().latent_bits {
            let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for v in 0..1000u64 {
                let p = ((v + 1) as f64).powf(-s);
                let z = d.truth.latent_code(f, bit, v);
                w += p;
                m1 += p * z;
                m2 += p * z * z;
            }
            assert!((m1 / w).abs() < 1e-9, "bit {bit}: mean {}", m1 / w);
            assert!((m2 / w - 1.0).abs() < 1e-9, "bit {bit}: var {}", m2 / w);
        }
    }

    #[test]
    fn unknown_interaction_feature_is_schema_error() {
        let spec = InteractionSpec { pairs: vec![pair("nope", "item_id", 1.0)], ..Default::default() };
        let cfg = DataConfig { interactions: spec, ..Default::default() };
        assert!(matches!(generate_dataset(&Schema::default(), &cfg), Err(Error::Schema(_))));
    }

    #[test]
    fn user_features_are_constant_per_user() {
        let d = small(1, InteractionSpec::default(), 2_000);
        let schema = Schema::default();
        let age = schema.index_of("user_age").unwrap();
        let uid = schema.index_of(USER_ID_FEATURE).unwrap();
        let mut seen = std::collections::HashMap::new();
        for s in &d.samples {
            assert_eq!(s.values[uid], s.user_id);
            let prev = seen.entry(s.user_id).or_insert(s.values[age]);
            assert_eq!(*prev, s.values[age]);
        }
    }
}
