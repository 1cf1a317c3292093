//! Parameter, FLOP and latency accounting.
//!
//! Conventions: FLOPs count 2 per multiply-accumulate, so the FFN core costs
//! 2 forward FLOPs per parameter per sample. Batch figures use a batch of 512.
//! Half precision is modelled only as a 2x multiplier on hardware peak.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Mode, RankMixer, RankMixerConfig};
use crate::moe::MoEConfig;

pub const REPORT_BATCH: usize = 512;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_dims(k: f64, layers: usize, tokens: usize, dim: usize) -> Result<()> {
    check_positive("k", k)?;
    for (n, v) in [("L", layers), ("T", tokens), ("D", dim)] {
        if v == 0 {
            return Err(Error::Domain(format!("{n} must be positive")));
        }
    }
    Ok(())
}

/// `2 k L T D^2`.
pub fn dense_param_estimate(k: f64, layers: usize, tokens: usize, dim: usize) -> Result<f64> {
    check_dims(k, layers, tokens, dim)?;
    Ok(2.0 * k * layers as f64 * tokens as f64 * (dim as f64).powi(2))
}

/// `4 k L T D^2` forward FLOPs per sample.
pub fn dense_flops_estimate(k: f64, layers: usize, tokens: usize, dim: usize) -> Result<f64> {
    check_dims(k, layers, tokens, dim)?;
    Ok(4.0 * k * layers as f64 * tokens as f64 * (dim as f64).powi(2))
}

/// Exact FFN parameter count `L T (2 k D^2 + k D + D)` for integer `k`.
pub fn ffn_param_closed_form(k: usize, layers: usize, tokens: usize, dim: usize) -> usize {
    layers * tokens * (2 * k * dim * dim + k * dim + dim)
}

/// `total * s` for a sparsity ratio `s` in `(0, 1]`.
pub fn sparse_effective(total: f64, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Domain(format!("sparsity ratio {s} outside (0, 1]")));
    }
    Ok(total * s)
}

/// `params * flops_per_param / (mfu * hw_peak_flops)`, in milliseconds when
/// `hw_peak_flops` is in FLOP/s.
pub fn latency_estimate(params: f64, flops_per_param: f64, mfu: f64, hw_peak_flops: f64) -> Result<f64> {
    check_positive("params", params)?;
    check_positive("flops_per_param", flops_per_param)?;
    check_positive("mfu", mfu)?;
    check_positive("hw_peak_flops", hw_peak_flops)?;
    Ok(params * flops_per_param / (mfu * hw_peak_flops) * 1e3)
}

/// Hardware peak (FLOP/s) that makes [`latency_estimate`] return `latency_ms`.
pub fn solve_hw_peak(params: f64, flops_per_param: f64, mfu: f64, latency_ms: f64) -> Result<f64> {
    check_positive("latency_ms", latency_ms)?;
    check_positive("params", params)?;
    check_positive("flops_per_param", flops_per_param)?;
    check_positive("mfu", mfu)?;
    Ok(params * flops_per_param / (mfu * latency_ms / 1e3))
}

/// Achieved over peak throughput. Ratios above one are reported as
/// measurement errors rather than clamped.
pub fn mfu_estimate(model_flops_per_s: f64, hw_peak_flops: f64) -> Result<f64> {
    check_positive("model_flops_per_s", model_flops_per_s)?;
    check_positive("hw_peak_flops", hw_peak_flops)?;
    let r = model_flops_per_s / hw_peak_flops;
    if r > 1.0 {
        return Err(Error::Measurement(format!(
            "achieved {model_flops_per_s:e} FLOP/s exceeds hardware peak {hw_peak_flops:e}"
        )));
    }
    Ok(r)
}

/// Factors entering the latency decomposition for one deployment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyFactors {
    pub params: f64,
    pub flops_per_param: f64,
    pub mfu: f64,
    pub hw_peak_flops: f64,
}

impl LatencyFactors {
    pub fn latency_ms(&self) -> Result<f64> {
        latency_estimate(self.params, self.flops_per_param, self.mfu, self.hw_peak_flops)
    }
}

/// Predicted `latency(new) / latency(base)`.
pub fn latency_ratio(base: &LatencyFactors, new: &LatencyFactors) -> Result<f64> {
    Ok(new.latency_ms()? / base.latency_ms()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Peak FLOP/s at fp32.
    pub peak_flops: f64,
    /// Assumed model FLOPs utilization.
    pub mfu: f64,
    /// Half-precision inference doubles the peak.
    pub fp16: bool,
    /// Active over total parameters; 1 for dense models.
    pub sparsity: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig { peak_flops: 1.0e14, mfu: 0.4457, fp16: true, sparsity: 1.0 }
    }
}

impl CostConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            errs.push("cost.peak_flops must be positive".into());
        }
        if !(self.mfu > 0.0 && self.mfu <= 1.0) {
            errs.push("cost.mfu must lie in (0, 1]".into());
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            errs.push("cost.sparsity must lie in (0, 1]".into());
        }
        errs
    }

    pub fn effective_peak(&self) -> f64 {
        if self.fp16 {
            2.0 * self.peak_flops
        } else {
            self.peak_flops
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// Every dense parameter of the constructed layout.
    pub param_count: usize,
    /// FFN (or expert bank) parameters of the constructed layout.
    pub ffn_param_count: usize,
    /// `2 k L T D^2`.
    pub param_estimate: f64,
    /// `4 k L T D^2` per sample.
    pub flops_per_sample: f64,
    pub flops_per_batch: f64,
    /// Forward multiply-accumulate FLOPs per sample across the whole layout.
    pub total_flops_per_sample: f64,
    pub flops_per_param: f64,
    pub sparsity: f64,
    pub effective_params: f64,
    pub mfu: f64,
    pub hw_peak_flops: f64,
    /// Estimated latency for one batch of 512.
    pub latency_ms: f64,
}

/// Analytic forward MAC-FLOPs per sample of the layout `RankMixer::new` builds.
pub fn layout_flops_per_sample(config: &RankMixerConfig, moe: Option<&MoEConfig>, input_width: usize, sparsity: f64) -> f64 {
    let (t, d, kd) = (config.tokens as f64, config.dim as f64, config.hidden() as f64);
    let slice = input_width.div_ceil(config.tokens) as f64;
    let mut f = 2.0 * t * slice * d;
    for _ in 0..config.layers {
        if !config.toggles.no_mixing {
            f += match config.routing {
                crate::model::RoutingVariant::TokenMixing => 0.0,
                crate::model::RoutingVariant::AllConcatMlp => 2.0 * 2.0 * (t * d).powi(2),
                crate::model::RoutingVariant::AllShare => 2.0 * t * d * d,
            };
        }
        f += match moe {
            None => 4.0 * t * d * kd,
            Some(m) => {
                let ne = m.experts as f64;
                // inference router, then active experts' two matmuls and gated biases
                2.0 * t * d * ne + sparsity * (4.0 * t * d * kd + 2.0 * t * ne * d)
            }
        };
    }
    f + 2.0 * d * config.tasks.len() as f64
}

impl CostReport {
    pub fn build(
        config: &RankMixerConfig,
        moe: Option<&MoEConfig>,
        input_width: usize,
        hw: &CostConfig,
    ) -> Result<Self> {
        let sparsity = hw.sparsity;
        let manifest = RankMixer::manifest(config, moe, input_width)?;
        let param_count = manifest.total();
        let ffn_param_count =
            manifest.total_matching(|n| [".ffn.", ".moe.w", ".moe.b"].iter().any(|p| n.contains(p)));
        let k = config.ffn_ratio as f64;
        let param_estimate = dense_param_estimate(k, config.layers, config.tokens, config.dim)?;
        let flops_per_sample = 2.0 * param_estimate;
        let total_flops_per_sample = layout_flops_per_sample(config, moe, input_width, sparsity);
        let effective_params = sparse_effective(param_count as f64, sparsity)?;
        let flops_per_param = total_flops_per_sample / effective_params;
        let hw_peak_flops = hw.effective_peak();
        let latency_ms = latency_estimate(
            effective_params,
            flops_per_param * REPORT_BATCH as f64,
            hw.mfu,
            hw_peak_flops,
        )?;
        Ok(CostReport {
            param_count,
            ffn_param_count,
            param_estimate,
            flops_per_sample,
            flops_per_batch: flops_per_sample * REPORT_BATCH as f64,
            total_flops_per_sample,
            flops_per_param,
            sparsity,
            effective_params,
            mfu: hw.mfu,
            hw_peak_flops,
            latency_ms,
        })
    }

    fn rows(&self) -> Vec<(&'static str, String, &'static str)> {
        vec![
            ("param_count", self.param_count.to_string(), "params"),
            ("ffn_param_count", self.ffn_param_count.to_string(), "params"),
            ("param_estimate", format!("{:.0}", self.param_estimate), "params (2kLTD^2)"),
            ("flops_per_sample", format!("{:.0}", self.flops_per_sample), "FLOPs (4kLTD^2)"),
            ("flops_per_batch", format!("{:.0}", self.flops_per_batch), "FLOPs / batch of 512"),
            ("total_flops_per_sample", format!("{:.0}", self.total_flops_per_sample), "FLOPs (whole layout)"),
            ("total_flops_per_batch", format!("{:.0}", self.total_flops_per_sample * REPORT_BATCH as f64), "FLOPs / batch of 512"),
            ("flops_per_param", crate::train::fmt_float(self.flops_per_param), "FLOPs / active param / sample"),
            ("sparsity", crate::train::fmt_float(self.sparsity), "active / total"),
            ("effective_params", format!("{:.0}", self.effective_params), "params"),
            ("mfu", crate::train::fmt_float(self.mfu), "ratio"),
            ("hw_peak_flops", format!("{:e}", self.hw_peak_flops), "FLOP/s"),
            ("latency_ms", crate::train::fmt_float(self.latency_ms), "ms / batch of 512"),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,value,unit\n");
        for (k, v, u) in self.rows() {
            let _ = writeln!(s, "{k},{v},{u}");
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.rows();
        let kw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        for (k, v, u) in rows {
            writeln!(f, "{k:<kw$}  {v:>vw$}  {u}")?;
        }
        Ok(())
    }
}

/// Runs one forward pass on a constructed model (batch 1, random embeddings)
/// and returns the matmul FLOPs the tape executed.
pub fn measured_forward_flops(model: &RankMixer, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model.tokenizer_config().input_width;
    let emb = Tensor::new(vec![1, w], (0..w).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let e = g.constant(emb);
    model.forward(&mut g, &p, e, Mode::Infer)?;
    Ok(g.matmul_flops())
}
