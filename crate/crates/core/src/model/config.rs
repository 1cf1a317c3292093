use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingVariant {
    /// Parameter-free multi-head token mixing.
    #[default]
    TokenMixing,
    /// One `T*D -> T*D` two-layer map over all tokens concatenated.
    AllConcatMlp,
    /// The full flattened input, projected to `D`, is fed to every token's FFN.
    AllShare,
}

impl std::str::FromStr for RoutingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-mixing" | "TokenMixing" => Ok(RoutingVariant::TokenMixing),
            "all-concat-mlp" | "AllConcatMLP" | "AllConcatMlp" => Ok(RoutingVariant::AllConcatMlp),
            "all-share" | "AllShare" => Ok(RoutingVariant::AllShare),
            other => Err(Error::Config(format!("unknown routing variant '{other}'"))),
        }
    }
}

/// Component toggles for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub no_mixing: bool,
    pub no_residual: bool,
    pub no_ln: bool,
    pub shared_ffn: bool,
}

impl Toggles {
    pub const NAMES: [&'static str; 4] = ["no-mixing", "no-residual", "no-ln", "shared-ffn"];

    pub fn with(mut self, name: &str) -> Result<Self> {
        match name {
            "no-mixing" => self.no_mixing = true,
            "no-residual" => self.no_residual = true,
            "no-ln" => self.no_ln = true,
            "shared-ffn" => self.shared_ffn = true,
            other => return Err(Error::Config(format!("unknown toggle '{other}'"))),
        }
        Ok(self)
    }

    pub fn any(&self) -> bool {
        self.no_mixing || self.no_residual || self.no_ln || self.shared_ffn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankMixerConfig {
    /// Token count `T`.
    pub tokens: usize,
    /// Model width `D`.
    pub dim: usize,
    /// Number of stacked blocks `L`.
    pub layers: usize,
    /// Head count `H`; defaults to `T`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// FFN expansion ratio `k`; hidden width is `k * D`.
    pub ffn_ratio: usize,
    pub routing: RoutingVariant,
    pub tasks: Vec<String>,
    pub toggles: Toggles,
    pub ln_eps: f64,
}

impl Default for RankMixerConfig {
    fn default() -> Self {
        RankMixerConfig {
            tokens: 8,
            dim: 64,
            layers: 2,
            heads: None,
            ffn_ratio: 2,
            routing: RoutingVariant::TokenMixing,
            tasks: vec!["finish".into(), "skip".into()],
            toggles: Toggles::default(),
            ln_eps: 1e-5,
        }
    }
}

pub const HEADS_EQUAL_TOKENS_RULE: &str =
    "token mixing requires H = T so the mixed tokens keep the token count for the residual connection";

impl RankMixerConfig {
    pub fn new(tokens: usize, dim: usize, layers: usize, ffn_ratio: usize) -> Self {
        RankMixerConfig { tokens, dim, layers, ffn_ratio, ..Default::default() }
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(self.tokens)
    }

    pub fn hidden(&self) -> usize {
        self.ffn_ratio * self.dim
    }

    /// All violated constraints, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("tokens", self.tokens), ("dim", self.dim), ("layers", self.layers), ("ffn_ratio", self.ffn_ratio)] {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        let h = self.heads();
        if h == 0 {
            errs.push("model.heads must be positive".into());
        } else if self.dim % h != 0 {
            errs.push(format!("model.heads: D not divisible by H (D={}, H={h})", self.dim));
        }
        if self.routing == RoutingVariant::TokenMixing && !self.toggles.no_mixing && h != self.tokens {
            errs.push(format!("model.heads: {HEADS_EQUAL_TOKENS_RULE} (H={h}, T={})", self.tokens));
        }
        if self.tasks.is_empty() {
            errs.push("model.tasks must name at least one task".into());
        }
        if !(self.ln_eps > 0.0) {
            errs.push("model.ln_eps must be positive".into());
        }
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indivisible_width_is_reported() {
        let c = RankMixerConfig { dim: 65, heads: Some(8), tokens: 8, ..Default::default() };
        let v = c.violations();
        assert!(v.iter().any(|e| e.contains("D not divisible by H")), "{v:?}");
    }

    #[test]
    fn token_mixing_needs_heads_equal_tokens() {
        let c = RankMixerConfig { heads: Some(4), ..Default::default() };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("H = T"), "{err}");
        let ok = RankMixerConfig { heads: Some(4), routing: RoutingVariant::AllShare, ..Default::default() };
        ok.validate().unwrap();
    }

    #[test]
    fn parse_variants_and_toggles() {
        assert_eq!("all-share".parse::<RoutingVariant>().unwrap(), RoutingVariant::AllShare);
        assert!("self-attention".parse::<RoutingVariant>().is_err());
        let t = Toggles::default().with("no-ln").unwrap();
        assert!(t.no_ln && !t.no_mixing);
        assert!(Toggles::default().with("dropout").is_err());
    }
}
