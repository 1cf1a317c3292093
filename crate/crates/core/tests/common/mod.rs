//! Independent oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankmixer::autodiff::{grad_check_multi, GradCheckReport, Graph, Tensor, Var};
use rankmixer::model::{Bound, Mode, RankMixer, RankMixerConfig};
use rankmixer::moe::{MoEConfig, MoeToken};
use rankmixer::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Like [`random_tensor`] but keeps every entry at least `gap` away from 0,
/// so kinked ops are probed away from their kink.
pub fn random_away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// erf by its Maclaurin series, summed until terms vanish; accurate to
/// roughly 1e-15 for |x| <= 3.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Turns any tensor-valued output into a scalar with fixed random weights,
/// so every output coordinate gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(seed);
    let w = g.constant(random_tensor(&mut r, &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One entry per differentiable op: name, input shapes, scalarised function.
/// Inputs are drawn with [`random_away_from_zero`].
pub fn op_catalog() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        })),
        ("token_matmul", vec![vec![2, 3, 4], vec![3, 4, 2]], Box::new(|g, v| {
            let y = g.token_matmul(v[0], v[1])?;
            weighted_sum(g, y, 2)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 3)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 4)
        })),
        ("scale", vec![vec![5]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, 5)
        })),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y, 6)
        })),
        ("add_token_bias", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|g, v| {
            let y = g.add_token_bias(v[0], v[1])?;
            weighted_sum(g, y, 7)
        })),
        ("gelu", vec![vec![2, 5]], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 8)
        })),
        ("relu", vec![vec![2, 5]], Box::new(|g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 9)
        })),
        ("sigmoid", vec![vec![2, 5]], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 10)
        })),
        ("layer_norm", vec![vec![2, 8], vec![8], vec![8]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 11)
        })),
        ("bce_with_logits", vec![vec![6, 1]], Box::new(move |g, v| g.bce_with_logits(v[0], &labels))),
        ("concat_last", vec![vec![2, 3], vec![2, 2]], Box::new(|g, v| {
            let y = g.concat_last(&[v[0], v[1]])?;
            weighted_sum(g, y, 12)
        })),
        ("slice_last", vec![vec![2, 6]], Box::new(|g, v| {
            let y = g.slice_last(v[0], 1, 3)?;
            weighted_sum(g, y, 13)
        })),
        ("split_last", vec![vec![2, 5]], Box::new(|g, v| {
            let parts = g.split_last(v[0], &[2, 3])?;
            let a = weighted_sum(g, parts[0], 14)?;
            let b = weighted_sum(g, parts[1], 15)?;
            g.add(a, b)
        })),
        ("token_mix", vec![vec![2, 4, 8]], Box::new(|g, v| {
            let y = g.token_mix(v[0], 4)?;
            weighted_sum(g, y, 16)
        })),
        ("mean_tokens", vec![vec![2, 3, 4]], Box::new(|g, v| {
            let y = g.mean_tokens(v[0])?;
            weighted_sum(g, y, 17)
        })),
        ("sum", vec![vec![3, 2]], Box::new(|g, v| {
            let w = weighted_sum(g, v[0], 18)?;
            let s = g.sum(v[0]);
            let y = g.mul(w, s)?;
            Ok(y)
        })),
        ("mean", vec![vec![3, 2]], Box::new(|g, v| {
            let w = weighted_sum(g, v[0], 19)?;
            let s = g.mean(v[0]);
            g.mul(w, s)
        })),
        ("repeat_last", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.repeat_last(v[0], 3)?;
            weighted_sum(g, y, 20)
        })),
        ("broadcast_tokens", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.broadcast_tokens(v[0], 4)?;
            weighted_sum(g, y, 21)
        })),
        ("reshape", vec![vec![2, 6]], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 3, 2])?;
            weighted_sum(g, y, 22)
        })),
        ("pad_last", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.pad_last(v[0], 5)?;
            weighted_sum(g, y, 23)
        })),
    ]
}

/// Every pos/neg pair counted directly; ties count one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Mean of per-user pairwise AUCs over users with both classes, and how many
/// users qualified.
pub fn per_user_auc(scores: &[f64], labels: &[u8], users: &[u64]) -> Option<(f64, usize)> {
    let mut per_user: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..scores.len() {
        let e = per_user.entry(users[i]).or_default();
        e.0.push(scores[i]);
        e.1.push(labels[i]);
    }
    let aucs: Vec<f64> = per_user.values().filter_map(|(s, l)| pairwise_auc(s, l)).collect();
    (!aucs.is_empty()).then(|| (aucs.iter().sum::<f64>() / aucs.len() as f64, aucs.len()))
}

/// Random scores and labels with both classes present; `tied` draws scores
/// from five levels.
pub fn random_auc_instance(r: &mut impl Rng, tied: bool) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(2..120);
    let scores = (0..n)
        .map(|_| if tied { f64::from(r.random_range(0..5u8)) } else { r.random_range(-3.0..3.0) })
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

/// Full-model loss as a function of every parameter plus the input embeddings.
pub fn model_loss(model: &RankMixer, g: &mut Graph, v: &[Var], labels: &[Vec<f64>], mode: Mode) -> Result<Var> {
    let n = model.params().len();
    let bound = Bound::from_vars(v[..n].to_vec());
    let fwd = model.forward(g, &bound, v[n], mode)?;
    let loss = model.task_loss(g, fwd.logits, labels)?;
    match fwd.reg {
        Some(r) => {
            let p = g.scale(r, 0.3);
            g.add(loss, p)
        }
        None => Ok(loss),
    }
}

/// Finite-difference check of the full model (width-7 input, batch 3) with
/// every parameter perturbed away from its init.
pub fn model_grad_check(config: &RankMixerConfig, moe: Option<MoEConfig>, seed: u64) -> GradCheckReport {
    let width = 7;
    let model = RankMixer::new(config.clone(), moe, width, seed).unwrap();
    let mut r = rng(seed);
    let mut inputs: Vec<Tensor> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    // perturb so LN gains, biases and routers are away from their symmetric init
    for t in inputs.iter_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    inputs.push(random_tensor(&mut r, &[3, width], 1.0));
    let labels = vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
    grad_check_multi(|g, v| model_loss(&model, g, v, &labels, Mode::Train), &inputs, 1e-5, 1e-4).unwrap()
}

/// Random MoE token; `bias_shift` moves every inference-router bias.
pub fn random_token(r: &mut ChaCha8Rng, dim: usize, experts: usize, h: usize, bias_shift: f64) -> MoeToken {
    let mut v = |n: usize, s: f64| (0..n).map(|_| r.random_range(-s..s)).collect::<Vec<f64>>();
    let kd = experts * h;
    let w1 = v(dim * kd, 0.5);
    let b1 = v(kd, 0.5);
    let w2 = v(kd * dim, 0.5);
    let b2 = v(experts * dim, 0.5);
    let rtw = v(dim * experts, 0.5);
    let rtb = v(experts, 0.5);
    let riw = v(dim * experts, 0.5);
    let rib: Vec<f64> = v(experts, 0.5).into_iter().map(|b| b + bias_shift).collect();
    MoeToken {
        dim,
        experts,
        expert_hidden: h,
        w1,
        b1,
        w2,
        b2,
        router_train_w: rtw,
        router_train_b: rtb,
        router_infer_w: riw,
        router_infer_b: rib,
    }
}
