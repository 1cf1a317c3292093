//! Experiment configuration files (TOML).
//!
//! Sections: `[[schema]]` feature groups, `[data]`, `[model]`, optional
//! `[moe]`, `[train]`, `[output]`, `[cost]`. Every section and key is
//! optional and defaults to the library defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::data::{DataConfig, Schema};
use crate::error::{Error, Result};
use crate::model::RankMixerConfig;
use crate::moe::MoEConfig;
use crate::train::TrainConfig;

pub const OUTPUT_FORMATS: [&str; 2] = ["csv", "text"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Any of `csv`, `text`.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into(), formats: vec!["csv".into()] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: RankMixerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub schema: Schema,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses without semantic validation. Syntax and type errors carry a
    /// line and column.
    pub fn from_toml_unchecked(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("line {line}, column {col}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })
    }

    /// Parses and validates, reporting every semantic error at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c = Self::from_toml_unchecked(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.schema.validate() {
            errs.push(format!("schema: {e}"));
        }
        if let Err(e) = self.data.interactions.validate(&self.schema) {
            errs.push(format!("data.interactions: {e}"));
        }
        if self.data.n_users == 0 {
            errs.push("data.n_users must be >= 1".into());
        }
        if self.data.n_samples < 2 {
            errs.push("data.n_samples must be >= 2".into());
        }
        errs.extend(self.model.violations());
        if let Some(m) = &self.moe {
            errs.extend(m.violations(self.model.hidden()));
            if self.model.toggles.shared_ffn {
                errs.push("moe cannot be combined with the shared-ffn toggle".into());
            }
        }
        errs.extend(self.train.violations());
        for f in &self.output.formats {
            if !OUTPUT_FORMATS.contains(&f.as_str()) {
                errs.push(format!("output.formats: unknown format '{f}' (expected csv or text)"));
            }
        }
        if self.output.dir.is_empty() {
            errs.push("output.dir must not be empty".into());
        }
        errs.extend(self.cost.violations());
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
