use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature whose raw value is the sample's user id.
pub const USER_ID_FEATURE: &str = "user_id";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    User,
    Item,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub vocab_size: u64,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGroupSpec {
    pub name: String,
    pub side: Side,
    pub features: Vec<FeatureSpec>,
}

/// Ordered feature groups. Feature order (groups in order, features in order
/// within a group) fixes the layout of the concatenated embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub groups: Vec<FeatureGroupSpec>,
}

fn feature(name: &str, vocab_size: u64, embed_dim: usize) -> FeatureSpec {
    FeatureSpec { name: name.to_string(), vocab_size, embed_dim }
}

impl Default for Schema {
    /// Twelve features in four groups, total embedding width 160.
    fn default() -> Self {
        Schema {
            groups: vec![
                FeatureGroupSpec {
                    name: "user".into(),
                    side: Side::User,
                    features: vec![
                        feature(USER_ID_FEATURE, 100_000, 16),
                        feature("user_age", 1_000, 8),
                        feature("user_region", 1_000, 8),
                    ],
                },
                FeatureGroupSpec {
                    name: "item".into(),
                    side: Side::Item,
                    features: vec![
                        feature("item_id", 100_000, 32),
                        feature("author_id", 10_000, 16),
                        feature("item_category", 1_000, 16),
                    ],
                },
                FeatureGroupSpec {
                    name: "user_stats".into(),
                    side: Side::User,
                    features: vec![
                        feature("user_activity", 1_000, 8),
                        feature("user_pref_topic", 1_000, 16),
                        feature("user_device", 1_000, 8),
                    ],
                },
                FeatureGroupSpec {
                    name: "cross".into(),
                    side: Side::Cross,
                    features: vec![
                        feature("user_author_affinity", 10_000, 16),
                        feature("time_bucket", 1_000, 8),
                        feature("user_category_hist", 1_000, 8),
                    ],
                },
            ],
        }
    }
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for g in &self.groups {
            if g.features.is_empty() {
                errors.push(format!("group '{}' has no features", g.name));
            }
            for f in &g.features {
                if !seen.insert(f.name.as_str()) {
                    errors.push(format!("duplicate feature name '{}'", f.name));
                }
                if f.vocab_size < 2 {
                    errors.push(format!("feature '{}': vocab_size must be >= 2", f.name));
                }
                if f.embed_dim < 1 {
                    errors.push(format!("feature '{}': embed_dim must be >= 1", f.name));
                }
            }
        }
        if seen.is_empty() {
            errors.push("schema has no features".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(errors.join("; ")))
        }
    }

    pub fn features(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.groups.iter().flat_map(|g| g.features.iter())
    }

    /// Features paired with the side of their group.
    pub fn features_with_side(&self) -> impl Iterator<Item = (&FeatureSpec, Side)> {
        self.groups.iter().flat_map(|g| g.features.iter().map(move |f| (f, g.side)))
    }

    pub fn num_features(&self) -> usize {
        self.features().count()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features().position(|f| f.name == name)
    }

    /// Width of the concatenated embedding vector.
    pub fn total_width(&self) -> usize {
        self.features().map(|f| f.embed_dim).sum()
    }

    /// Start column of each feature inside the concatenated vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.features()
            .scan(0, |acc, f| {
                let o = *acc;
                *acc += f.embed_dim;
                Some(o)
            })
            .collect()
    }
}
