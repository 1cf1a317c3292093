use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Per-token FFN over `[B, T, D]`: token `t` goes through its own
/// `W2[t] gelu(W1[t] s + b1[t]) + b2[t]`.
pub fn per_token_ffn(g: &mut Graph, s: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.token_matmul(s, w1)?;
    let h = g.add_token_bias(h, b1)?;
    let a = g.gelu(h);
    let y = g.token_matmul(a, w2)?;
    g.add_token_bias(y, b2)
}

/// One FFN shared by every token: weights `[D, kD]`, `[kD]`, `[kD, D]`, `[D]`.
pub fn shared_ffn(g: &mut Graph, s: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("shared_ffn expects [B, T, D], got {shape:?}")));
    }
    let flat = g.reshape(s, &[shape[0] * shape[1], shape[2]])?;
    let h = g.matmul(flat, w1)?;
    let h = g.add_bias(h, b1)?;
    let a = g.gelu(h);
    let y = g.matmul(a, w2)?;
    let y = g.add_bias(y, b2)?;
    g.reshape(y, &shape)
}

/// Dense map on all tokens concatenated: `[B, T, D] -> [B, T*D] -> two affine
/// layers -> [B, T, D]`.
pub fn concat_mlp(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let h = g.matmul(flat, w1)?;
    let h = g.add_bias(h, b1)?;
    let y = g.matmul(h, w2)?;
    let y = g.add_bias(y, b2)?;
    g.reshape(y, &shape)
}

/// Flattens `[B, T, D]`, projects to `D` with one shared map, and gives every
/// token that same vector.
pub fn all_share(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    let p = g.matmul(flat, w)?;
    let p = g.add_bias(p, b)?;
    g.broadcast_tokens(p, shape[1])
}
