use crate::error::{Error, Result};

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

fn check_len(what: &str, a: usize, b: usize, c: usize) -> Result<()> {
    if a == b && b == c {
        Ok(())
    } else {
        Err(Error::shape(format!("{what}: param {a}, grad {b}, state {c} lengths differ")))
    }
}

/// Uncentered RMSProp: `v = rho v + (1 - rho) g^2; p -= lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step(param: &mut [f64], grad: &[f64], v: &mut [f64], lr: f64, rho: f64, eps: f64) -> Result<()> {
    check_len("rmsprop", param.len(), grad.len(), v.len())?;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// Adagrad on one embedding row: `acc += g^2; p -= lr g / sqrt(acc + eps)`.
pub fn adagrad_step(row: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, eps: f64) -> Result<()> {
    check_len("adagrad", row.len(), grad.len(), acc.len())?;
    if let Some(a) = acc.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Corruption(format!("adagrad accumulator holds {a}")));
    }
    for ((p, &g), a) in row.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (*a + eps).sqrt();
    }
    Ok(())
}

/// RMSProp second moments for every dense parameter. Embedding accumulators
/// live beside the embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub second_moments: Vec<Vec<f64>>,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_sizes: impl IntoIterator<Item = usize>, lr_dense: f64, lr_sparse: f64) -> Self {
        OptimizerState {
            second_moments: param_sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            lr_dense,
            lr_sparse,
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_zero_grad_only_decays() {
        let mut p = vec![1.5, -2.0];
        let mut v = vec![0.4, 1.0];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut v, 0.01, 0.9, 1e-8).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert!((v[0] - 0.36).abs() < 1e-15 && (v[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        rmsprop_step(&mut p, &[1.0], &mut v, 0.01, 0.9, 1e-8).unwrap();
        let expected = 0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((p[0] + expected).abs() < 1e-15);
        assert!((p[0].abs() - 0.03162).abs() < 1e-5);
    }

    #[test]
    fn rmsprop_is_deterministic() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut v = vec![0.0; 3];
            for _ in 0..5 {
                rmsprop_step(&mut p, &[0.2, -0.1, 0.05], &mut v, 0.01, 0.9, 1e-8).unwrap();
            }
            (p, v)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rmsprop_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(matches!(rmsprop_step(&mut p, &[1.0], &mut v, 0.01, 0.9, 1e-8), Err(Error::Shape(_))));
    }

    #[test]
    fn adagrad_first_step() {
        let mut p = vec![0.0];
        let mut a = vec![0.0];
        adagrad_step(&mut p, &[1.0], &mut a, 0.01, 1e-8).unwrap();
        assert!((p[0] + 0.01 / (1.0f64 + 1e-8).sqrt()).abs() < 1e-16);
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn adagrad_zero_grad_no_change() {
        let mut p = vec![0.25, -1.0];
        let mut a = vec![2.0, 0.5];
        adagrad_step(&mut p, &[0.0, 0.0], &mut a, 0.1, 1e-8).unwrap();
        assert_eq!(p, vec![0.25, -1.0]);
        assert_eq!(a, vec![2.0, 0.5]);
    }

    #[test]
    fn adagrad_negative_accumulator_is_corruption() {
        let mut p = vec![0.0];
        let mut a = vec![-1e-3];
        assert!(matches!(adagrad_step(&mut p, &[1.0], &mut a, 0.1, 1e-8), Err(Error::Corruption(_))));
    }
}
