//! Sparse mixture-of-experts replacement for the per-token FFN.
//!
//! Each token owns `N_e` experts (two-layer GELU FFNs of hidden width
//! `k*D/N_e`) and two affine routers. Gates are `relu(router(s))`. Training
//! with DTSI evaluates every expert and weights expert `j` by
//! `(g_train[j] + g_infer[j]) / 2`; the sparsity penalty `sum_j g_infer[j]`
//! touches only the inference router. Inference uses `g_infer` and evaluates
//! only experts with a strictly positive gate.
//!
//! Parameter layout per layer (token-major slabs):
//! `w1 [T, D, kD]`, `b1 [T, kD]`, `w2 [T, kD, D]`, `b2 [T, N_e, D]`,
//! `router_{train,infer}_w [T, D, N_e]`, `router_{train,infer}_b [T, N_e]`.
//! Expert `j` owns hidden columns `[j*h, (j+1)*h)` of `w1`/`b1` and the same
//! rows of `w2`, where `h = kD / N_e`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gelu_scalar, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    /// Experts per token `N_e`.
    pub experts: usize,
    /// Initial sparsity-penalty coefficient.
    pub lambda: f64,
    /// Target fraction of active (token, expert) pairs; `None` keeps `lambda` fixed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_active_ratio: Option<f64>,
    /// Dense-training / sparse-inference with two routers. When off, a single
    /// router (the inference router) is trained sparsely.
    pub dtsi: bool,
    /// Training steps between adaptive-lambda updates.
    pub lambda_window: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig { experts: 4, lambda: 1e-3, target_active_ratio: Some(0.25), dtsi: true, lambda_window: 20 }
    }
}

impl MoEConfig {
    pub fn violations(&self, hidden: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.experts == 0 {
            errs.push("moe.experts must be >= 1".into());
        } else if hidden % self.experts != 0 {
            errs.push(format!("moe.experts: FFN hidden width {hidden} not divisible by {} experts", self.experts));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            errs.push("moe.lambda must be finite and >= 0".into());
        }
        if let Some(r) = self.target_active_ratio {
            if !(r > 0.0 && r <= 1.0) {
                errs.push("moe.target_active_ratio must lie in (0, 1]".into());
            }
            if self.lambda == 0.0 {
                errs.push("moe.lambda must be > 0 when a target ratio is set".into());
            }
        }
        if self.lambda_window == 0 {
            errs.push("moe.lambda_window must be >= 1".into());
        }
        errs
    }
}

/// `max(0, x)` elementwise.
pub fn relu_route(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&v| v.max(0.0)).collect()
}

/// Fraction of gates that are strictly positive.
pub fn active_ratio(gates: &[f64]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates.iter().filter(|&&g| g > 0.0).count() as f64 / gates.len() as f64
}

/// One token's expert bank and routers, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeToken {
    pub dim: usize,
    pub experts: usize,
    /// Hidden width of one expert.
    pub expert_hidden: usize,
    /// `[D, N_e * h]`
    pub w1: Vec<f64>,
    /// `[N_e * h]`
    pub b1: Vec<f64>,
    /// `[N_e * h, D]`
    pub w2: Vec<f64>,
    /// `[N_e, D]`
    pub b2: Vec<f64>,
    /// `[D, N_e]`
    pub router_train_w: Vec<f64>,
    pub router_train_b: Vec<f64>,
    pub router_infer_w: Vec<f64>,
    pub router_infer_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub v: Vec<f64>,
    pub gates: Vec<f64>,
    pub active_experts: usize,
}

fn affine(s: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = b.to_vec();
    for (i, &si) in s.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += si * wij;
        }
    }
    out
}

impl MoeToken {
    fn hidden(&self) -> usize {
        self.experts * self.expert_hidden
    }

    pub fn train_router(&self, s: &[f64]) -> Vec<f64> {
        affine(s, &self.router_train_w, &self.router_train_b)
    }

    pub fn infer_router(&self, s: &[f64]) -> Vec<f64> {
        affine(s, &self.router_infer_w, &self.router_infer_b)
    }

    /// `e_j(s) = W2_j gelu(W1_j s + b1_j) + b2_j`.
    pub fn expert(&self, j: usize, s: &[f64]) -> Vec<f64> {
        let (d, h, kd) = (self.dim, self.expert_hidden, self.hidden());
        let mut hid = self.b1[j * h..(j + 1) * h].to_vec();
        for (i, &si) in s.iter().enumerate() {
            let row = &self.w1[i * kd + j * h..i * kd + (j + 1) * h];
            hid.iter_mut().zip(row).for_each(|(a, w)| *a += si * w);
        }
        let mut out = self.b2[j * d..(j + 1) * d].to_vec();
        for (r, a) in hid.iter().enumerate() {
            let act = gelu_scalar(*a);
            let row = &self.w2[(j * h + r) * d..(j * h + r + 1) * d];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += act * w);
        }
        out
    }

    /// Gate-weighted sum over all experts.
    pub fn dense_with_gates(&self, s: &[f64], gates: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (j, &g) in gates.iter().enumerate() {
            let e = self.expert(j, s);
            v.iter_mut().zip(&e).for_each(|(a, b)| *a += g * b);
        }
        v
    }

    /// Training forward: returns `(v, sum_j g_infer[j])`. With `dtsi` the
    /// gates are the mean of both routers' gates, otherwise `g_infer`.
    pub fn forward_train(&self, s: &[f64], dtsi: bool) -> (Vec<f64>, f64) {
        let gi = relu_route(&self.infer_router(s));
        let gates = if dtsi {
            let gt = relu_route(&self.train_router(s));
            gt.iter().zip(&gi).map(|(a, b)| 0.5 * (a + b)).collect()
        } else {
            gi.clone()
        };
        (self.dense_with_gates(s, &gates), gi.iter().sum())
    }

    /// Sparse inference: only experts with `g_infer > 0` are evaluated.
    pub fn forward_infer(&self, s: &[f64]) -> InferOutput {
        let gates = relu_route(&self.infer_router(s));
        let mut v = vec![0.0; self.dim];
        let mut active = 0;
        for (j, &g) in gates.iter().enumerate() {
            if g > 0.0 {
                active += 1;
                let e = self.expert(j, s);
                v.iter_mut().zip(&e).for_each(|(a, b)| *a += g * b);
            }
        }
        InferOutput { v, gates, active_experts: active }
    }
}

/// Graph-side variables of one MoE layer.
#[derive(Clone, Copy, Debug)]
pub struct MoeLayerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub router_train_w: Var,
    pub router_train_b: Var,
    pub router_infer_w: Var,
    pub router_infer_b: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Both routers, mean of their gates.
    Dtsi,
    /// Inference router only (vanilla sparse training and inference).
    InferOnly,
}

pub struct MoeLayerOutput {
    pub v: Var,
    /// `[B, T, N_e]` inference-router gates.
    pub infer_gates: Var,
}

fn route(g: &mut Graph, s: Var, w: Var, b: Var) -> Result<Var> {
    let pre = g.token_matmul(s, w)?;
    let pre = g.add_token_bias(pre, b)?;
    Ok(g.relu(pre))
}

/// Batched MoE forward over `[B, T, D]`.
pub fn moe_layer(g: &mut Graph, s: Var, p: &MoeLayerVars, experts: usize, mode: GateMode) -> Result<MoeLayerOutput> {
    let hidden = g.shape(p.w1)[2];
    if experts == 0 || hidden % experts != 0 {
        return Err(Error::shape(format!("hidden width {hidden} not divisible into {experts} experts")));
    }
    let gi = route(g, s, p.router_infer_w, p.router_infer_b)?;
    let gates = match mode {
        GateMode::InferOnly => gi,
        GateMode::Dtsi => {
            let gt = route(g, s, p.router_train_w, p.router_train_b)?;
            let sum = g.add(gt, gi)?;
            g.scale(sum, 0.5)
        }
    };
    let h = g.token_matmul(s, p.w1)?;
    let h = g.add_token_bias(h, p.b1)?;
    let a = g.gelu(h);
    let expanded = g.repeat_last(gates, hidden / experts)?;
    let weighted = g.mul(a, expanded)?;
    let y = g.token_matmul(weighted, p.w2)?;
    let bias = g.token_matmul(gates, p.b2)?;
    let v = g.add(y, bias)?;
    Ok(MoeLayerOutput { v, infer_gates: gi })
}

/// Multiplicative feedback on the penalty coefficient: after each window,
/// `lambda <- lambda * measured / target`, clipped to `[lambda/2, 2*lambda]`.
#[derive(Clone, Debug)]
pub struct AdaptiveLambda {
    lambda: f64,
    target: f64,
    window: usize,
    steps: usize,
    active: f64,
    total: f64,
}

impl AdaptiveLambda {
    pub fn new(lambda: f64, target: f64, window: usize) -> Self {
        AdaptiveLambda { lambda, target, window: window.max(1), steps: 0, active: 0.0, total: 0.0 }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Records one step's gates; returns the new coefficient when a window closes.
    pub fn observe(&mut self, active: usize, total: usize) -> Option<f64> {
        self.active += active as f64;
        self.total += total as f64;
        self.steps += 1;
        if self.steps < self.window {
            return None;
        }
        let measured = if self.total > 0.0 { self.active / self.total } else { 0.0 };
        let proposed = self.lambda * measured / self.target;
        self.lambda = proposed.clamp(self.lambda / 2.0, self.lambda * 2.0);
        self.steps = 0;
        self.active = 0.0;
        self.total = 0.0;
        Some(self.lambda)
    }
}

/// Activation counts per (layer, token, expert).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUtilization {
    pub layers: usize,
    pub tokens: usize,
    pub experts: usize,
    counts: Vec<u64>,
    samples: u64,
}

impl ExpertUtilization {
    pub fn new(layers: usize, tokens: usize, experts: usize) -> Self {
        ExpertUtilization { layers, tokens, experts, counts: vec![0; layers * tokens * experts], samples: 0 }
    }

    /// Adds a layer's `[B, T, N_e]` gates.
    pub fn record(&mut self, layer: usize, gates: &[f64]) {
        let span = self.tokens * self.experts;
        for sample in gates.chunks_exact(span) {
            for (i, &g) in sample.iter().enumerate() {
                if g > 0.0 {
                    self.counts[layer * span + i] += 1;
                }
            }
        }
        if layer == 0 {
            self.samples += (gates.len() / span) as u64;
        }
    }

    pub fn frequency(&self, layer: usize, token: usize, expert: usize) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        self.counts[(layer * self.tokens + token) * self.experts + expert] as f64 / self.samples as f64
    }

    pub fn frequencies(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.layers).flat_map(move |l| {
            (0..self.tokens)
                .flat_map(move |t| (0..self.experts).map(move |e| (l, t, e, self.frequency(l, t, e))))
        })
    }

    pub fn mean_active_ratio(&self) -> f64 {
        let n = (self.layers * self.tokens * self.experts) as f64;
        self.frequencies().map(|(.., f)| f).sum::<f64>() / n
    }

    /// Fraction of experts activated on fewer than `threshold` of the tokens they see.
    pub fn dying_fraction(&self, threshold: f64) -> f64 {
        let n = (self.layers * self.tokens * self.experts) as f64;
        self.frequencies().filter(|&(.., f)| f < threshold).count() as f64 / n
    }

    /// CSV with header `layer,token_id,expert_id,activation_frequency`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,token_id,expert_id,activation_frequency\n");
        for (l, t, e, f) in self.frequencies() {
            let _ = writeln!(s, "{l},{t},{e},{}", crate::train::fmt_float(f));
        }
        s
    }
}
