use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`]. The wrapped index is the node id;
/// inputs always carry smaller ids than the nodes that consume them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    TokenMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddTokenBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Saves the derivative at the input when gradients are needed.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    TokenMix { x: Var, heads: usize },
    MeanTokens(Var),
    Sum(Var),
    Mean(Var),
    RepeatLast { x: Var, times: usize },
    BroadcastTokens { x: Var, tokens: usize },
    Reshape(Var),
    PadLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::TokenMatMul(..) => "token_matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::AddTokenBias(..) => "add_token_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Concat(_) => "concat_last",
            Op::Slice { .. } => "slice_last",
            Op::TokenMix { .. } => "token_mix",
            Op::MeanTokens(_) => "mean_tokens",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RepeatLast { .. } => "repeat_last",
            Op::BroadcastTokens { .. } => "broadcast_tokens",
            Op::Reshape(_) => "reshape",
            Op::PadLast(_) => "pad_last",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Every op appends one node holding its forward value and
/// whatever it needs for the backward pass; [`Graph::backward`] replays the
/// nodes in reverse id order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    matmul_flops: u64,
    /// Backward multiplier applied to the GELU derivative. Only test code
    /// changes it, to check that gradient checks catch a broken backward.
    gelu_backward_scale: f64,
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Value and derivative of GELU at `x`.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn token_mix_index(t: usize, col: usize, width: usize, heads: usize) -> (usize, usize) {
    // input (t, h*c + j) -> output (h, t*c + j)
    let c = width / heads;
    let h = col / c;
    let j = col % c;
    (h, t * c + j)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), matmul_flops: 0, gelu_backward_scale: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate FLOPs executed by matmul-type ops so far, counted
    /// as 2 per multiply-accumulate.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    #[doc(hidden)]
    pub fn corrupt_gelu_backward(&mut self, scale: f64) {
        self.gelu_backward_scale = scale;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when `v` was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Id and op name of the first node whose value or gradient is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            let bad_value = !n.value.all_finite();
            let bad_grad = n.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
            (bad_value || bad_grad).then(|| (i, n.op.name()))
        })
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::row_major(0, k),
            self.value(b).data(),
            Layout::row_major(0, n),
            0.0,
            &mut out,
            Layout::row_major(0, n),
        );
        self.matmul_flops += 2 * (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Per-token matmul: `[B, T, I] x [T, I, O] -> [B, T, O]`, token `t` uses
    /// weight slab `t`.
    pub fn token_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || sx[2] != sw[1] {
            return Err(Error::shape(format!("token_matmul of {sx:?} and {sw:?}")));
        }
        let (b, t, i, o) = (sx[0], sx[1], sx[2], sw[2]);
        let mut out = vec![0.0; b * t * o];
        for tok in 0..t {
            gemm(
                b,
                i,
                o,
                self.value(x).data(),
                Layout::strided_rows(tok * i, t * i),
                self.value(w).data(),
                Layout::row_major(tok * i * o, o),
                0.0,
                &mut out,
                Layout::strided_rows(tok * o, t * o),
            );
        }
        self.matmul_flops += 2 * (b * t * i * o) as u64;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, t, o], out)?, Op::TokenMatMul(x, w), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |e| e * c, Op::Scale(x, c))
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).len() != n {
            return Err(Error::shape(format!("add_bias of {:?} and {:?}", self.shape(x), self.shape(bias))));
        }
        let bv = self.value(bias).data().to_vec();
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(r, b)| *r += b);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), rg))
    }

    /// Adds a per-token bias `[T, N]` to `[B, T, N]`.
    pub fn add_token_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || self.value(bias).len() != sx[1] * sx[2] {
            return Err(Error::shape(format!("add_token_bias of {sx:?} and {:?}", self.shape(bias))));
        }
        let span = sx[1] * sx[2];
        let bv = self.value(bias).data().to_vec();
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for block in data.chunks_exact_mut(span) {
            block.iter_mut().zip(&bv).for_each(|(r, b)| *r += b);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddTokenBias(x, bias), rg))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(&[x]);
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let (data, deriv) = if rg {
            v.data().iter().map(|&e| gelu_with_grad(e)).unzip()
        } else {
            (v.data().iter().map(|&e| gelu_scalar(e)).collect(), Vec::new())
        };
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu(x, deriv), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
        }
        let v = self.value(x);
        let d = v.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "layer_norm over {:?} with gain {:?} and bias {:?}",
                v.shape(),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = v.rows();
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Mean binary cross-entropy of `logits` against `labels` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::shape(format!("{} logits but {} labels", z.len(), labels.len())));
        }
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, labels: labels.to_vec() }, rg))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!("concat of {:?} and {s:?}", self.shape(first))));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let w = v.last_dim();
        if len == 0 || start + len > w {
            return Err(Error::shape(format!("slice [{start}, {}) of last axis {w}", start + len)));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }, rg))
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_last(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let w = self.value(x).last_dim();
        if sizes.iter().sum::<usize>() != w {
            return Err(Error::shape(format!("split sizes {sizes:?} do not cover last axis {w}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_last(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Multi-head token mixing on `[B, T, D]`: output token `h` is the
    /// concatenation over `t` of the contiguous head-`h` chunk of token `t`.
    /// Result shape is `[B, H, T*D/H]`.
    pub fn token_mix(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape(format!("token_mix of {s:?} with {heads} heads")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let out_w = t * d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            let base = bi * t * d;
            for ti in 0..t {
                for col in 0..d {
                    let (h, oc) = token_mix_index(ti, col, d, heads);
                    out[base + h * out_w + oc] = src[base + ti * d + col];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, heads, out_w], out)?, Op::TokenMix { x, heads }, rg))
    }

    /// Mean over the token axis: `[B, T, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape(format!("mean_tokens of {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * d..(bi + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MeanTokens(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Repeats each last-axis element `times` times in place:
    /// `[a, b] -> [a, a, b, b]` for `times = 2`.
    pub fn repeat_last(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_last with zero repeats"));
        }
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().flat_map(|&e| std::iter::repeat_n(e, times)).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty") *= times;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::RepeatLast { x, times }, rg))
    }

    /// `[B, W] -> [B, T, W]` with every token a copy of the row.
    pub fn broadcast_tokens(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || tokens == 0 {
            return Err(Error::shape(format!("broadcast_tokens of {s:?} to {tokens} tokens")));
        }
        let (b, w) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(b * tokens * w);
        for r in 0..b {
            for _ in 0..tokens {
                out.extend_from_slice(v.row(r));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, tokens, w], out)?, Op::BroadcastTokens { x, tokens }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Zero-pads the last axis on the right up to `width`.
    pub fn pad_last(&mut self, x: Var, width: usize) -> Result<Var> {
        let v = self.value(x);
        let w = v.last_dim();
        if width < w {
            return Err(Error::shape(format!("cannot pad last axis {w} down to {width}")));
        }
        let mut out = Vec::with_capacity(v.rows() * width);
        for r in 0..v.rows() {
            out.extend_from_slice(v.row(r));
            out.extend(std::iter::repeat_n(0.0, width - w));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("non-empty") = width;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::PadLast(x), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of `loss` with respect to every reachable node.
    /// Gradients from any previous backward pass are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let gelu_scale = self.gelu_backward_scale;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else { continue };
            backprop(&node.op, g, &node.value, before, gelu_scale);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, g: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => node.grad = Some(g.to_vec()),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(op: &Op, g: &[f64], out: &Tensor, nodes: &mut [Node], gelu_scale: f64) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if wants(nodes, *a) {
                // dA = dC * B^T
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, Layout::row_major(0, n), nodes[b.0].value.data(), Layout::transposed(0, n), 0.0, &mut ga, Layout::row_major(0, k));
                accumulate(nodes, *a, &ga);
            }
            if wants(nodes, *b) {
                // dB = A^T * dC
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, nodes[a.0].value.data(), Layout::transposed(0, k), g, Layout::row_major(0, n), 0.0, &mut gb, Layout::row_major(0, n));
                accumulate(nodes, *b, &gb);
            }
        }
        Op::TokenMatMul(x, w) => {
            let s = nodes[x.0].value.shape();
            let (b, t, i) = (s[0], s[1], s[2]);
            let o = nodes[w.0].value.shape()[2];
            if wants(nodes, *x) {
                let mut gx = vec![0.0; b * t * i];
                for tok in 0..t {
                    gemm(
                        b,
                        o,
                        i,
                        g,
                        Layout::strided_rows(tok * o, t * o),
                        nodes[w.0].value.data(),
                        Layout::transposed(tok * i * o, o),
                        0.0,
                        &mut gx,
                        Layout::strided_rows(tok * i, t * i),
                    );
                }
                accumulate(nodes, *x, &gx);
            }
            if wants(nodes, *w) {
                let mut gw = vec![0.0; t * i * o];
                for tok in 0..t {
                    gemm(
                        i,
                        b,
                        o,
                        nodes[x.0].value.data(),
                        Layout { offset: tok * i, row_stride: 1, col_stride: t * i },
                        g,
                        Layout::strided_rows(tok * o, t * o),
                        0.0,
                        &mut gw,
                        Layout::row_major(tok * i * o, o),
                    );
                }
                accumulate(nodes, *w, &gw);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, *x, g);
            if wants(nodes, *bias) {
                let n = nodes[bias.0].value.len();
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, *bias, &gb);
            }
        }
        Op::AddTokenBias(x, bias) => {
            accumulate(nodes, *x, g);
            if wants(nodes, *bias) {
                let n = nodes[bias.0].value.len();
                let mut gb = vec![0.0; n];
                for block in g.chunks_exact(n) {
                    gb.iter_mut().zip(block).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, *bias, &gb);
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let ga: Vec<f64> = g.iter().zip(nodes[b.0].value.data()).map(|(g, v)| g * v).collect();
                accumulate(nodes, *a, &ga);
            }
            if wants(nodes, *b) {
                let gb: Vec<f64> = g.iter().zip(nodes[a.0].value.data()).map(|(g, v)| g * v).collect();
                accumulate(nodes, *b, &gb);
            }
        }
        Op::Scale(x, c) => {
            let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, *x, &gx);
        }
        Op::Gelu(x, deriv) => {
            let gx: Vec<f64> = g.iter().zip(deriv).map(|(g, &d)| g * d * gelu_scale).collect();
            accumulate(nodes, *x, &gx);
        }
        Op::Relu(x) => {
            let gx: Vec<f64> =
                g.iter().zip(nodes[x.0].value.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, *x, &gx);
        }
        Op::Sigmoid(x) => {
            let gx: Vec<f64> = g.iter().zip(out.data()).map(|(g, &s)| g * s * (1.0 - s)).collect();
            accumulate(nodes, *x, &gx);
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = nodes[gain.0].value.len();
            let gamma = nodes[gain.0].value.data().to_vec();
            if wants(nodes, *gain) {
                let mut gg = vec![0.0; d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
                accumulate(nodes, *gain, &gg);
            }
            if wants(nodes, *bias) {
                let mut gb = vec![0.0; d];
                for gr in g.chunks_exact(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, *bias, &gb);
            }
            if wants(nodes, *x) {
                let mut gx = vec![0.0; g.len()];
                let inv_d = 1.0 / d as f64;
                for (r, (gr, xr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                accumulate(nodes, *x, &gx);
            }
        }
        Op::BceWithLogits { logits, labels } => {
            let n = labels.len() as f64;
            let gx: Vec<f64> = nodes[logits.0]
                .value
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| g[0] * (sigmoid_scalar(z) - y) / n)
                .collect();
            accumulate(nodes, *logits, &gx);
        }
        Op::Concat(parts) => {
            let total = out.last_dim();
            let rows = out.rows();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.last_dim();
                if wants(nodes, *p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, *p, &gp);
                }
                offset += w;
            }
        }
        Op::Slice { x, start } => {
            let w = nodes[x.0].value.last_dim();
            let len = out.last_dim();
            let mut gx = vec![0.0; nodes[x.0].value.len()];
            for (r, gr) in g.chunks_exact(len).enumerate() {
                gx[r * w + start..r * w + start + len].copy_from_slice(gr);
            }
            accumulate(nodes, *x, &gx);
        }
        Op::TokenMix { x, heads } => {
            let s = nodes[x.0].value.shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            let out_w = t * d / heads;
            let mut gx = vec![0.0; b * t * d];
            for bi in 0..b {
                let base = bi * t * d;
                for ti in 0..t {
                    for col in 0..d {
                        let (h, oc) = token_mix_index(ti, col, d, *heads);
                        gx[base + ti * d + col] = g[base + h * out_w + oc];
                    }
                }
            }
            accumulate(nodes, *x, &gx);
        }
        Op::MeanTokens(x) => {
            let s = nodes[x.0].value.shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            let inv = 1.0 / t as f64;
            let mut gx = vec![0.0; b * t * d];
            for bi in 0..b {
                for ti in 0..t {
                    for j in 0..d {
                        gx[(bi * t + ti) * d + j] = g[bi * d + j] * inv;
                    }
                }
            }
            accumulate(nodes, *x, &gx);
        }
        Op::Sum(x) => {
            let gx = vec![g[0]; nodes[x.0].value.len()];
            accumulate(nodes, *x, &gx);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            let gx = vec![g[0] / n as f64; n];
            accumulate(nodes, *x, &gx);
        }
        Op::RepeatLast { x, times } => {
            let gx: Vec<f64> = g.chunks_exact(*times).map(|c| c.iter().sum()).collect();
            accumulate(nodes, *x, &gx);
        }
        Op::BroadcastTokens { x, tokens } => {
            let w = nodes[x.0].value.last_dim();
            let b = nodes[x.0].value.rows();
            let mut gx = vec![0.0; b * w];
            for bi in 0..b {
                for ti in 0..*tokens {
                    let src = &g[(bi * tokens + ti) * w..(bi * tokens + ti + 1) * w];
                    gx[bi * w..(bi + 1) * w].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                }
            }
            accumulate(nodes, *x, &gx);
        }
        Op::Reshape(x) => accumulate(nodes, *x, g),
        Op::PadLast(x) => {
            let w = nodes[x.0].value.last_dim();
            let width = out.last_dim();
            let gx: Vec<f64> = g.chunks_exact(width).flat_map(|r| r[..w].iter().copied()).collect();
            accumulate(nodes, *x, &gx);
        }
    }
}
