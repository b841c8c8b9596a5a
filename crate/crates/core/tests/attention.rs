mod common;

use common::{check_inputs, random_tensor, rng};
use dmn_core::attention::{attend, map_features, query_key, view_key};
use dmn_core::filter::observe_loglik;
use dmn_core::geometry::PlanarPose;
use dmn_core::mapnet::{build, build_map, encode_context, ContextObservation, Map};
use dmn_core::model::{init_parameters, jitter_biases, AttentionNorm, ModelConfig, Variant};
use dmn_core::tensor::{Graph, ParameterStore, Tensor, Var};
use rand::Rng;

fn setup(variant: Variant, n: usize, seed: u64) -> (ModelConfig, ParameterStore, Vec<ContextObservation>, Tensor) {
    let cfg = ModelConfig { variant, ..ModelConfig::default() };
    let mut params = init_parameters(&cfg, seed).unwrap();
    jitter_biases(&mut params, seed, 0.05);
    let mut r = rng(seed);
    let contexts = (0..n)
        .map(|_| ContextObservation {
            image: random_tensor(&[8, 32, 3], 1.0, 0.0, &mut r),
            pose: PlanarPose::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-3.0..3.0)),
        })
        .collect();
    (cfg, params, contexts, random_tensor(&[8, 32, 3], 1.0, 0.0, &mut r))
}

fn pose_node(g: &mut Graph, p: &PlanarPose) -> Var {
    g.constant(Tensor::vector(p.to_array().to_vec())).unwrap()
}

/// Readout features and weights for one candidate.
fn readout(cfg: &ModelConfig, params: &ParameterStore, ctx: &[ContextObservation], q: &Tensor, cand: &PlanarPose) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let map = build_map(&mut g, params, cfg, ctx).unwrap();
    let qv = g.constant(q.clone()).unwrap();
    let c = pose_node(&mut g, cand);
    let r = attend(&mut g, params, cfg, &map, qv, c).unwrap();
    (g.value(r.features).data().to_vec(), g.value(r.weights).data().to_vec())
}

fn loglik(cfg: &ModelConfig, params: &ParameterStore, ctx: &[ContextObservation], q: &Tensor, cand: &PlanarPose) -> f64 {
    let mut g = Graph::new();
    let map = build(&mut g, params, cfg, ctx).unwrap();
    let qv = g.constant(q.clone()).unwrap();
    let c = pose_node(&mut g, cand);
    let l = observe_loglik(&mut g, params, cfg, &map, qv, c).unwrap();
    g.scalar_value(l)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn shapes_at_default_scale() {
    let (cfg, params, ctx, q) = setup(Variant::dmn(), 4, 1);
    let mut g = Graph::new();
    let img = g.constant(ctx[0].image.clone()).unwrap();
    let v = encode_context(&mut g, &params, &cfg, img).unwrap();
    assert_eq!(g.value(v).shape(), [2, 8, 16]);
    let qv = g.constant(q).unwrap();
    let k = query_key(&mut g, &params, &cfg, qv).unwrap();
    assert_eq!(g.value(k).shape(), [2, 8, 8]);
    let map = build_map(&mut g, &params, &cfg, &ctx).unwrap();
    assert_eq!(map.len(), 4);
    let c = pose_node(&mut g, &PlanarPose::new(0.1, 0.2, 0.3));
    let r = attend(&mut g, &params, &cfg, &map, qv, c).unwrap();
    assert_eq!(g.value(r.features).shape(), [2, 8, 16 + 8]);
    let w: f64 = g.value(r.weights).data().iter().sum();
    assert!((w - 1.0).abs() < 1e-9);
    assert!(g.value(r.weights).data().iter().all(|x| *x >= 0.0));
}

#[test]
fn shape_mismatch_and_empty_map_are_errors() {
    let (cfg, params, ctx, _) = setup(Variant::dmn(), 1, 2);
    let mut g = Graph::new();
    let bad = g.constant(Tensor::zeros(&[8, 30, 3])).unwrap();
    assert!(encode_context(&mut g, &params, &cfg, bad).is_err());
    assert!(query_key(&mut g, &params, &cfg, bad).is_err());
    assert!(build_map(&mut g, &params, &cfg, &[]).is_err());
    let map = build_map(&mut g, &params, &cfg, &ctx).unwrap();
    let c = pose_node(&mut g, &PlanarPose::origin());
    let empty = dmn_core::mapnet::ViewEmbeddingMap { entries: vec![] };
    let good = g.constant(ctx[0].image.clone()).unwrap();
    assert!(attend(&mut g, &params, &cfg, &empty, good, c).is_err());
    assert!(attend(&mut g, &params, &cfg, &map, good, c).is_ok());
}

#[test]
fn single_entry_gets_all_weight_and_duplicates_split_evenly() {
    let (cfg, params, ctx, q) = setup(Variant::dmn(), 1, 3);
    let cand = PlanarPose::new(0.3, -0.2, 1.0);
    let (one, w1) = readout(&cfg, &params, &ctx, &q, &cand);
    assert_eq!(w1, vec![1.0]);
    let twice = vec![ctx[0].clone(), ctx[0].clone()];
    let (two, w2) = readout(&cfg, &params, &twice, &q, &cand);
    assert_eq!(w2, vec![0.5, 0.5]);
    assert!(max_diff(&one, &two) < 1e-12);
}

#[test]
fn readout_is_permutation_invariant() {
    for variant in [Variant::dmn(), "no-attention".parse().unwrap()] {
        let (cfg, params, ctx, q) = setup(variant, 5, 4);
        let cand = PlanarPose::new(-0.4, 0.1, -2.0);
        let (a, wa) = readout(&cfg, &params, &ctx, &q, &cand);
        let perm = [3, 0, 4, 1, 2];
        let shuffled: Vec<_> = perm.iter().map(|&i| ctx[i].clone()).collect();
        let (b, wb) = readout(&cfg, &params, &shuffled, &q, &cand);
        assert!(max_diff(&a, &b) < 1e-12);
        for (j, &i) in perm.iter().enumerate() {
            assert!((wb[j] - wa[i]).abs() < 1e-12);
        }
        let la = loglik(&cfg, &params, &ctx, &q, &cand);
        let lb = loglik(&cfg, &params, &shuffled, &q, &cand);
        assert!((la - lb).abs() < 1e-12);
    }
}

#[test]
fn build_map_preserves_order() {
    let (cfg, params, ctx, _) = setup(Variant::dmn(), 3, 5);
    let mut g = Graph::new();
    let map = build_map(&mut g, &params, &cfg, &ctx).unwrap();
    for (e, c) in map.entries.iter().zip(&ctx) {
        assert_eq!(e.viewpoint, c.pose);
        let img = g.constant(c.image.clone()).unwrap();
        let v = encode_context(&mut g, &params, &cfg, img).unwrap();
        assert_eq!(g.value(v), g.value(e.embedding));
    }
}

/// Rigid motion of the candidate and every viewpoint together.
fn moved(p: &PlanarPose) -> PlanarPose {
    PlanarPose::new(0.3, -0.7, 2.1).compose_pose(p)
}

#[test]
fn readout_is_invariant_to_common_rigid_motion() {
    let (cfg, params, ctx, q) = setup(Variant::dmn(), 4, 6);
    let cand = PlanarPose::new(0.2, 0.5, -0.6);
    let (a, wa) = readout(&cfg, &params, &ctx, &q, &cand);
    let shifted: Vec<_> = ctx.iter().map(|c| ContextObservation { pose: moved(&c.pose), ..c.clone() }).collect();
    let (b, wb) = readout(&cfg, &params, &shifted, &q, &moved(&cand));
    assert!(max_diff(&a, &b) < 1e-9, "{}", max_diff(&a, &b));
    assert!(max_diff(&wa, &wb) < 1e-9);
    let la = loglik(&cfg, &params, &ctx, &q, &cand);
    let lb = loglik(&cfg, &params, &shifted, &q, &moved(&cand));
    assert!((la - lb).abs() < 1e-9);
}

#[test]
fn absolute_viewpoints_break_rigid_invariance() {
    for name in ["no-egocentric", "no-both"] {
        let (cfg, params, ctx, q) = setup(name.parse().unwrap(), 4, 7);
        let cand = PlanarPose::new(0.2, 0.5, -0.6);
        let shifted: Vec<_> = ctx.iter().map(|c| ContextObservation { pose: moved(&c.pose), ..c.clone() }).collect();
        let la = loglik(&cfg, &params, &ctx, &q, &cand);
        let lb = loglik(&cfg, &params, &shifted, &q, &moved(&cand));
        assert!((la - lb).abs() > 1e-6, "{name}: {la} vs {lb}");
    }
}

#[test]
fn readout_is_a_convex_combination() {
    let (cfg, params, ctx, q) = setup(Variant::dmn(), 4, 8);
    let cand = PlanarPose::new(-0.1, 0.9, 0.4);
    let (out, _) = readout(&cfg, &params, &ctx, &q, &cand);
    // per-entry features rebuilt by hand
    let mut g = Graph::new();
    let mut per: Vec<Vec<f64>> = Vec::new();
    for c in &ctx {
        let img = g.constant(c.image.clone()).unwrap();
        let v = encode_context(&mut g, &params, &cfg, img).unwrap();
        let f = map_features(&mut g, &params, v).unwrap();
        let rel = c.pose.egocentric(&cand);
        let rel4 = g.constant(Tensor::vector(rel.encode4().to_vec())).unwrap();
        let k = view_key(&mut g, &params, &cfg, v, rel4).unwrap();
        let cat = g.concat(&[f, k]).unwrap();
        per.push(g.value(cat).data().to_vec());
    }
    for (j, y) in out.iter().enumerate() {
        let lo = per.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
        let hi = per.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
        assert!(*y >= lo - 1e-12 && *y <= hi + 1e-12);
    }
}

#[test]
fn attention_weights_follow_scaled_dot_products() {
    let (cfg, params, ctx, q) = setup(Variant::dmn(), 3, 9);
    let cand = PlanarPose::new(0.0, 0.0, 0.7);
    let mut g = Graph::new();
    let qv = g.constant(q.clone()).unwrap();
    let qk = query_key(&mut g, &params, &cfg, qv).unwrap();
    let qk = g.value(qk).data().to_vec();
    let logits: Vec<f64> = ctx
        .iter()
        .map(|c| {
            let img = g.constant(c.image.clone()).unwrap();
            let v = encode_context(&mut g, &params, &cfg, img).unwrap();
            let rel4 = g.constant(Tensor::vector(c.pose.egocentric(&cand).encode4().to_vec())).unwrap();
            let k = view_key(&mut g, &params, &cfg, v, rel4).unwrap();
            g.value(k).data().iter().zip(&qk).map(|(a, b)| a * b).sum::<f64>() / (qk.len() as f64).sqrt()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let (_, w) = readout(&cfg, &params, &ctx, &q, &cand);
    for (wi, li) in w.iter().zip(&logits) {
        assert!((wi - (li - m).exp() / z).abs() < 1e-12);
    }
    let raw = ModelConfig { attention_norm: AttentionNorm::Raw, ..cfg };
    let (_, wr) = readout(&raw, &params, &ctx, &q, &cand);
    for (wi, li) in wr.iter().zip(&logits) {
        assert!((wi - li * (qk.len() as f64).sqrt()).abs() < 1e-9 * li.abs().max(1.0));
    }
    let uniform: ModelConfig = ModelConfig { variant: "no-attention".parse().unwrap(), ..cfg };
    let (_, wu) = readout(&uniform, &params, &ctx, &q, &cand);
    assert!(wu.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
}

/// One conv over the channel concatenation, with the full kernel assembled here.
#[test]
fn split_first_layer_equals_concatenated_conv() {
    let (cfg, params, ctx, _) = setup(Variant::dmn(), 1, 10);
    let rel = PlanarPose::new(0.4, -0.3, 1.3);
    let mut g = Graph::new();
    let img = g.constant(ctx[0].image.clone()).unwrap();
    let v = encode_context(&mut g, &params, &cfg, img).unwrap();
    let rel4 = g.constant(Tensor::vector(rel.encode4().to_vec())).unwrap();
    let key = view_key(&mut g, &params, &cfg, v, rel4).unwrap();

    let wf = params.get("cnn2.0.w_feat").unwrap();
    let wp = params.get("cnn2.0.w_pose").unwrap();
    let (k, cf, cp, co) = (wf.shape()[0], wf.shape()[2], wp.shape()[2], wf.shape()[3]);
    let mut full = vec![0.0; k * k * (cf + cp) * co];
    for a in 0..k {
        for b in 0..k {
            for ci in 0..cf + cp {
                for o in 0..co {
                    let val = if ci < cf { wf.data()[((a * k + b) * cf + ci) * co + o] } else { wp.data()[((a * k + b) * cp + ci - cf) * co + o] };
                    full[((a * k + b) * (cf + cp) + ci) * co + o] = val;
                }
            }
        }
    }
    let emb = cfg.embedding();
    let tiled = g.tile(rel4, emb.h, emb.w).unwrap();
    let cat = g.concat(&[v, tiled]).unwrap();
    let kf = g.constant(Tensor::new(&[k, k, cf + cp, co], full).unwrap()).unwrap();
    let b0 = g.param(&params, "cnn2.0.b").unwrap();
    let h = g.conv2d(cat, kf, Some(b0), 1).unwrap();
    let h = g.relu(h).unwrap();
    let w1 = g.param(&params, "cnn2.1.w").unwrap();
    let b1 = g.param(&params, "cnn2.1.b").unwrap();
    let manual = g.conv2d(h, w1, Some(b1), 1).unwrap();
    assert!(max_diff(g.value(key).data(), g.value(manual).data()) < 1e-12);
}

#[test]
fn zero_parameters_give_zero_keys_and_loglik() {
    let (cfg, mut params, ctx, q) = setup(Variant::dmn(), 2, 11);
    params.map_values(|_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let mut g = Graph::new();
    let qv = g.constant(q.clone()).unwrap();
    let k = query_key(&mut g, &params, &cfg, qv).unwrap();
    assert!(g.value(k).data().iter().all(|v| *v == 0.0));
    let img = g.constant(ctx[0].image.clone()).unwrap();
    let v = encode_context(&mut g, &params, &cfg, img).unwrap();
    assert!(g.value(v).data().iter().all(|v| *v == 0.0));
    let rel4 = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
    let vk = view_key(&mut g, &params, &cfg, v, rel4).unwrap();
    assert!(g.value(vk).data().iter().all(|v| *v == 0.0));
    assert_eq!(loglik(&cfg, &params, &ctx, &q, &PlanarPose::new(0.2, 0.1, 0.0)), 0.0);
}

#[test]
fn observation_is_deterministic_and_works_for_any_context_count() {
    for n in [1, 2, 4, 8] {
        let (cfg, params, ctx, q) = setup(Variant::dmn(), n, 12);
        let c = PlanarPose::new(0.1, 0.1, 0.1);
        let a = loglik(&cfg, &params, &ctx, &q, &c);
        assert!(a.is_finite());
        assert_eq!(a, loglik(&cfg, &params, &ctx, &q, &c));
    }
}

const SMALL: f64 = 0.125;

fn small(variant: Variant, n: usize, seed: u64) -> (ModelConfig, ParameterStore, Vec<ContextObservation>, Tensor) {
    let (cfg, _, ctx, q) = setup(variant, n, seed);
    let cfg = ModelConfig { channel_scale: SMALL, ..cfg };
    let mut params = init_parameters(&cfg, seed).unwrap();
    jitter_biases(&mut params, seed, 0.05);
    (cfg, params, ctx, q)
}

#[test]
fn context_encoder_gradient_wrt_image() {
    let (cfg, params, ctx, _) = small(Variant::dmn(), 1, 13);
    let err = check_inputs(&[ctx[0].image.clone()], 1e-6, |g, v| {
        let e = encode_context(g, &params, &cfg, v[0])?;
        g.sum(e)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn view_key_gradient_wrt_relative_pose() {
    let (cfg, params, ctx, _) = small(Variant::dmn(), 1, 14);
    let mut g = Graph::new();
    let img = g.constant(ctx[0].image.clone()).unwrap();
    let v = encode_context(&mut g, &params, &cfg, img).unwrap();
    let vt = g.value(v).clone();
    let mut r = rng(14);
    let w = random_tensor(&[2, 8, cfg.key_channels()], 1.0, 0.0, &mut r);
    let err = check_inputs(&[Tensor::vector(vec![0.3, -0.2, 0.7]), w], 1e-6, |g, x| {
        let origin = g.constant(Tensor::zeros(&[3]))?;
        let rel4 = g.egocentric_encode(x[0], origin)?;
        let v = g.constant(vt.clone())?;
        let k = view_key(g, &params, &cfg, v, rel4)?;
        g.dot(k, x[1])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn loglik_gradient_wrt_candidate_pose() {
    for variant in [Variant::dmn(), "no-egocentric".parse().unwrap(), "latent-image-pf".parse().unwrap(), "latent-vector-pf".parse().unwrap()] {
        let (cfg, params, ctx, q) = small(variant, 3, 15);
        let err = check_inputs(&[Tensor::vector(vec![0.2, -0.4, 0.9])], 1e-6, |g, x| {
            let map = build(g, &params, &cfg, &ctx)?;
            let qv = g.constant(q.clone())?;
            observe_loglik(g, &params, &cfg, &map, qv, x[0])
        });
        assert!(err < 1e-4, "{variant}: {err}");
    }
}

#[test]
fn regression_variant_has_no_likelihood() {
    let (cfg, params, ctx, q) = small("regression".parse().unwrap(), 2, 16);
    let mut g = Graph::new();
    let map = build(&mut g, &params, &cfg, &ctx).unwrap();
    let qv = g.constant(q).unwrap();
    let c = pose_node(&mut g, &PlanarPose::origin());
    assert!(observe_loglik(&mut g, &params, &cfg, &map, qv, c).is_err());
    assert!(matches!(map, Map::View(_)));
}
