mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rankmixer::autodiff::{Graph, Tensor};
use rankmixer::model::{checkpoint, token_mixing, FfnParams, Mode, RankMixer, RankMixerConfig, RoutingVariant, Toggles};
use rankmixer::moe::{moe_layer, relu_route, GateMode, MoEConfig, MoeLayerVars};
use rankmixer::Error;

fn check_model(config: RankMixerConfig, moe: Option<MoEConfig>, seed: u64) {
    let rep = model_grad_check(&config, moe, seed);
    assert!(rep.passed, "{config:?}: {rep}");
}

fn tiny() -> RankMixerConfig {
    RankMixerConfig::new(2, 4, 1, 2)
}

#[test]
fn block_gradients_token_mixing() {
    for seed in 0..5 {
        check_model(tiny(), None, seed);
    }
}

#[test]
fn block_gradients_routing_variants_and_toggles() {
    let mut configs = vec![
        RankMixerConfig { routing: RoutingVariant::AllConcatMlp, ..tiny() },
        RankMixerConfig { routing: RoutingVariant::AllShare, ..tiny() },
        RankMixerConfig { layers: 2, ..tiny() },
    ];
    for name in Toggles::NAMES {
        configs.push(RankMixerConfig { toggles: Toggles::default().with(name).unwrap(), ..tiny() });
    }
    for c in configs {
        check_model(c, None, 1);
    }
}

#[test]
fn block_gradients_with_moe() {
    let moe = MoEConfig { experts: 2, ..Default::default() };
    check_model(tiny(), Some(moe.clone()), 2);
    check_model(tiny(), Some(MoEConfig { dtsi: false, ..moe }), 3);
}

#[test]
fn ffn_parameter_count_closed_form() {
    let mut r = rng(9);
    for _ in 0..20 {
        let t = r.random_range(1..6);
        let d = t * r.random_range(1..5);
        let l = r.random_range(1..4);
        let k = r.random_range(1..4);
        let m = RankMixer::new(RankMixerConfig::new(t, d, l, k), None, 10, 0).unwrap();
        assert_eq!(m.ffn_param_count(), l * t * (2 * k * d * d + k * d + d));
    }
}

#[test]
fn manifest_matches_allocation() {
    for moe in [None, Some(MoEConfig::default())] {
        let c = RankMixerConfig::default();
        let m = RankMixer::new(c.clone(), moe.clone(), 160, 4).unwrap();
        let man = RankMixer::manifest(&c, moe.as_ref(), 160).unwrap();
        assert_eq!(man.total(), m.total_param_count());
        assert_eq!(man.entries.len(), m.params().len());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let c = RankMixerConfig { dim: 65, heads: Some(8), ..Default::default() };
    let err = RankMixer::new(c, None, 160, 0).unwrap_err().to_string();
    assert!(err.contains("D not divisible by H"), "{err}");
    let c = RankMixerConfig { toggles: Toggles { shared_ffn: true, ..Default::default() }, ..Default::default() };
    assert!(matches!(RankMixer::new(c, Some(MoEConfig::default()), 160, 0), Err(Error::Config(_))));
}

#[test]
fn no_mixing_output_is_additive_across_tokens() {
    // without mixing, each token's path sees only its own slice of the input
    let c = RankMixerConfig { toggles: Toggles::default().with("no-mixing").unwrap(), ..RankMixerConfig::new(2, 4, 2, 2) };
    let m = RankMixer::new(c, None, 8, 5).unwrap();
    let eval = |x: Vec<f64>| {
        let mut g = Graph::new();
        let p = m.params().bind_frozen(&mut g);
        let e = g.constant(Tensor::new(vec![1, 8], x).unwrap());
        let f = m.forward(&mut g, &p, e, Mode::Infer).unwrap();
        g.value(f.logits).data()[0]
    };
    let a = [0.3, -0.2, 0.5, 0.1];
    let b = [0.9, 0.4, -0.7, 0.2];
    let a2 = [-0.6, 0.8, 0.0, 0.3];
    let b2 = [0.1, -0.5, 0.6, -0.9];
    let cat = |x: &[f64], y: &[f64]| [x, y].concat();
    let lhs = eval(cat(&a, &b)) + eval(cat(&a2, &b2));
    let rhs = eval(cat(&a, &b2)) + eval(cat(&a2, &b));
    assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
}

#[test]
fn checkpoint_round_trip() {
    let schema = rankmixer::Schema::default();
    for moe in [None, Some(MoEConfig::default())] {
        let m = RankMixer::new(RankMixerConfig::default(), moe, schema.total_width(), 8).unwrap();
        let emb = rankmixer::EmbeddingSet::new(&schema, 3);
        let mut buf = Vec::new();
        checkpoint::write(&mut buf, &m, Some(&emb)).unwrap();
        let (m2, emb2) = checkpoint::read(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        checkpoint::write(&mut buf2, &m2, emb2.as_ref()).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(m2.config(), m.config());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(checkpoint::read(trailing.as_slice()).is_err());
        assert!(checkpoint::read(&buf[..buf.len() - 1]).is_err());
    }
}

#[test]
fn sparse_inference_equals_masked_dense() {
    let mut r = rng(17);
    for _ in 0..100 {
        let tok = random_token(&mut r, 6, 4, 3, 0.0);
        let s: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = tok.forward_infer(&s);
        let gates = relu_route(&tok.infer_router(&s));
        let dense = tok.dense_with_gates(&s, &gates);
        for (a, b) in out.v.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(out.active_experts, gates.iter().filter(|&&g| g > 0.0).count());
    }
}

#[test]
fn all_positive_gates_are_bit_exact() {
    let mut r = rng(18);
    for _ in 0..20 {
        let tok = random_token(&mut r, 5, 3, 2, 10.0);
        let s: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = tok.forward_infer(&s);
        assert_eq!(out.active_experts, 3);
        let dense = tok.dense_with_gates(&s, &out.gates);
        assert_eq!(out.v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), dense.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn graph_moe_matches_per_token_sparse_inference() {
    let c = RankMixerConfig::new(2, 4, 1, 2);
    let moe = MoEConfig { experts: 2, ..Default::default() };
    let mut m = RankMixer::new(c, Some(moe), 8, 6).unwrap();
    // spread routers so some gates are zero
    let mut r = rng(6);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).contains("router") {
            for x in m.params_mut().get_mut(id).data_mut() {
                *x = r.random_range(-1.0..1.0);
            }
        }
    }
    let FfnParams::Moe(mp) = m.blocks()[0].ffn else { panic!("moe block expected") };
    let s = random_tensor(&mut r, &[25, 2, 4], 1.0);
    let mut g = Graph::new();
    let p = m.params().bind_frozen(&mut g);
    let sv = g.constant(s.clone());
    let vars = MoeLayerVars {
        w1: p.var(mp.w1),
        b1: p.var(mp.b1),
        w2: p.var(mp.w2),
        b2: p.var(mp.b2),
        router_train_w: p.var(mp.router_train_w),
        router_train_b: p.var(mp.router_train_b),
        router_infer_w: p.var(mp.router_infer_w),
        router_infer_b: p.var(mp.router_infer_b),
    };
    let out = moe_layer(&mut g, sv, &vars, 2, GateMode::InferOnly).unwrap();
    let v = g.value(out.v).data();
    let gates = g.value(out.infer_gates).data();
    let mut zeros = 0;
    for b in 0..25 {
        for t in 0..2 {
            let tok = m.moe_token(0, t).unwrap();
            let row = (b * 2 + t) * 4;
            let sparse = tok.forward_infer(&s.data()[row..row + 4]);
            zeros += 2 - sparse.active_experts;
            for (a, e) in v[row..row + 4].iter().zip(&sparse.v) {
                assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
            }
            for (a, e) in gates[(b * 2 + t) * 2..(b * 2 + t + 1) * 2].iter().zip(&sparse.gates) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }
    assert!(zeros > 0, "spread routers should switch some experts off");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn mixing_is_norm_preserving_involution(t in 1usize..9, per_head in 1usize..6, seed in any::<u64>()) {
        let d = t * per_head;
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[t, d], 1.0);
        let y = token_mixing(&x, t).unwrap();
        prop_assert_eq!(y.shape(), &[t, d]);
        let z = token_mixing(&y, t).unwrap();
        prop_assert_eq!(z.data(), x.data());
        prop_assert!((y.l2_norm() - x.l2_norm()).abs() <= 1e-12 * (1.0 + x.l2_norm()));
    }

    #[test]
    fn graph_mixing_matches_reference(b in 1usize..3, t in 1usize..5, per_head in 1usize..4, seed in any::<u64>()) {
        let d = t * per_head;
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[b, t, d], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.token_mix(xv, t).unwrap();
        for s in 0..b {
            let one = Tensor::new(vec![t, d], x.data()[s * t * d..(s + 1) * t * d].to_vec()).unwrap();
            let reference = token_mixing(&one, t).unwrap();
            prop_assert_eq!(&g.value(y).data()[s * t * d..(s + 1) * t * d], reference.data());
        }
    }
}
