//! Slices the concatenated embedding vector into `T` chunks of width `d` and
//! projects each chunk to `D` with its own affine map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub tokens: usize,
    /// Width `d` of each input slice.
    pub slice_width: usize,
    pub dim: usize,
    /// Concatenated embedding width before padding.
    pub input_width: usize,
}

impl TokenizerConfig {
    /// Smallest `d` with `T * d >= input_width`; the remainder is zero padding
    /// appended at the end.
    pub fn for_input(input_width: usize, tokens: usize, dim: usize) -> Result<Self> {
        if tokens == 0 || dim == 0 || input_width == 0 {
            return Err(Error::shape(format!(
                "tokenizer needs positive sizes (input {input_width}, T {tokens}, D {dim})"
            )));
        }
        Ok(TokenizerConfig { tokens, slice_width: input_width.div_ceil(tokens), dim, input_width })
    }

    pub fn padded_width(&self) -> usize {
        self.tokens * self.slice_width
    }

    pub fn padding(&self) -> usize {
        self.padded_width() - self.input_width
    }

    pub fn param_count(&self) -> usize {
        self.tokens * (self.slice_width * self.dim + self.dim)
    }

    /// Projection weights `[T, d, D]` uniform in `±1/sqrt(d)` and zero biases `[T, D]`.
    pub fn init<R: Rng>(&self, rng: &mut R) -> (Tensor, Tensor) {
        let bound = 1.0 / (self.slice_width as f64).sqrt();
        let n = self.tokens * self.slice_width * self.dim;
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        (
            Tensor::new(vec![self.tokens, self.slice_width, self.dim], w).expect("sized"),
            Tensor::zeros(&[self.tokens, self.dim]),
        )
    }
}

/// `[B, W] -> [B, T, D]`; token `i` is `slice_i * W_proj[i] + b_proj[i]`.
pub fn tokenize(g: &mut Graph, e_input: Var, w: Var, b: Var, cfg: &TokenizerConfig) -> Result<Var> {
    let s = g.shape(e_input);
    if s.len() != 2 {
        return Err(Error::shape(format!("tokenize expects [batch, width], got {s:?}")));
    }
    let (batch, width) = (s[0], s[1]);
    let padded = cfg.padded_width();
    if width > padded || padded - width >= cfg.slice_width {
        return Err(Error::shape(format!(
            "input width {width} does not fit {} tokens of width {} (padded {padded})",
            cfg.tokens, cfg.slice_width
        )));
    }
    let x = if width < padded { g.pad_last(e_input, padded)? } else { e_input };
    let x = g.reshape(x, &[batch, cfg.tokens, cfg.slice_width])?;
    let y = g.token_matmul(x, w)?;
    g.add_token_bias(y, b)
}
