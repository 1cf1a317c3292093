//! Head splitting and multi-head token mixing on a single sample.
//!
//! Layout contract: head `h` of a `D`-wide token is the contiguous slice
//! `[h*D/H, (h+1)*D/H)`. Mixed token `h` is the concatenation over tokens
//! `t = 0..T` of head `h` of token `t`. With `H = T` this is a transpose of the
//! `T x H` grid of chunks, hence a permutation of coordinates and an
//! involution.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn split_heads(x: &[f64], heads: usize) -> Result<Vec<&[f64]>> {
    if heads == 0 || x.is_empty() || x.len() % heads != 0 {
        return Err(Error::shape(format!("cannot split width {} into {heads} heads", x.len())));
    }
    Ok(x.chunks_exact(x.len() / heads).collect())
}

/// `[T, D] -> [H, T*D/H]`.
pub fn token_mixing(x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape(format!("token_mixing expects [T, D], got {:?}", x.shape())));
    }
    let tokens = x.shape()[0];
    let per_token: Vec<Vec<&[f64]>> = (0..tokens).map(|t| split_heads(x.row(t), heads)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(x.len());
    for h in 0..heads {
        for chunks in &per_token {
            out.extend_from_slice(chunks[h]);
        }
    }
    Tensor::new(vec![heads, x.len() / heads], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_contiguous() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(split_heads(&x, 2).unwrap(), vec![&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        assert_eq!(split_heads(&x, 1).unwrap(), vec![&x[..]]);
        assert_eq!(split_heads(&x, 4).unwrap().len(), 4);
        assert!(matches!(split_heads(&x, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_example() {
        let x = Tensor::matrix(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        let s = token_mixing(&x, 2).unwrap();
        assert_eq!(s, Tensor::matrix(&[vec![1.0, 2.0, 5.0, 6.0], vec![3.0, 4.0, 7.0, 8.0]]).unwrap());
        assert_eq!(token_mixing(&s, 2).unwrap(), x);
    }

    #[test]
    fn single_token_single_head_is_identity() {
        let x = Tensor::matrix(&[vec![0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(token_mixing(&x, 1).unwrap(), x);
    }

    #[test]
    fn fewer_heads_changes_shape() {
        let x = Tensor::new(vec![4, 6], (0..24).map(f64::from).collect()).unwrap();
        let s = token_mixing(&x, 2).unwrap();
        assert_eq!(s.shape(), &[2, 12]);
        assert_eq!(s.row(1)[..3], [3.0, 4.0, 5.0]);
    }
}
