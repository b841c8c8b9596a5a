mod common;

use std::f64::consts::PI;

use common::{random_tensor, rng};
use dmn_core::filter::{
    estimate, init_belief, initial_mean, measurement_update, regress_step, prepare_observation, resample, transition,
    write_particle_table, InitialBeliefSpec, ParticleBelief, TransitionNoise,
};
use dmn_core::geometry::{wrap_angle, Egomotion, EnvironmentExtent, PlanarPose};
use dmn_core::mapnet::{build, ContextObservation};
use dmn_core::model::{init_parameters, ModelConfig, Variant};
use dmn_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Particles on every node of a 5×5×4 pose grid.
fn grid() -> Vec<PlanarPose> {
    let mut out = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..4 {
                out.push(PlanarPose::new(-0.8 + 0.4 * i as f64, -0.8 + 0.4 * j as f64, -PI / 2.0 + k as f64 * PI / 2.0));
            }
        }
    }
    out
}

/// Discrete Bayes in probability space: prior times each likelihood table, then normalize.
fn bayes(prior: &[f64], tables: &[Vec<f64>]) -> Vec<f64> {
    let mut p = prior.to_vec();
    for t in tables {
        for (pi, l) in p.iter_mut().zip(t) {
            *pi *= l;
        }
    }
    let z: f64 = p.iter().sum();
    p.iter().map(|v| v / z).collect()
}

fn table(seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..100).map(|_| r.random_range(0.01..3.0)).collect()
}

#[test]
fn grid_filter_matches_exhaustive_bayes() {
    let e = EnvironmentExtent::default();
    let particles = grid();
    assert_eq!(particles.len(), 100);
    let mut r = rng(1);
    let raw: Vec<f64> = (0..100).map(|_| r.random_range(0.1..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let prior: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let b0 = ParticleBelief { particles: particles.clone(), log_weights: prior.iter().map(|p| p.ln()).collect() };
    let (t1, t2) = (table(2), table(3));
    let ll = |t: &[f64]| t.iter().map(|v| v.ln()).collect::<Vec<_>>();

    let b1 = measurement_update(&b0, &ll(&t1)).unwrap();
    let want1 = bayes(&prior, std::slice::from_ref(&t1));
    for (w, o) in b1.weights().iter().zip(&want1) {
        assert!((w - o).abs() < 1e-9);
    }
    // identity transition between the two updates
    let moved = transition(&b1, &Egomotion::zero(), &TransitionNoise::zero(), 9, &e).unwrap();
    assert_eq!(moved, b1);
    let b2 = measurement_update(&moved, &ll(&t2)).unwrap();
    let want2 = bayes(&prior, &[t1.clone(), t2.clone()]);
    for (w, o) in b2.weights().iter().zip(&want2) {
        assert!((w - o).abs() < 1e-9);
    }
    // and one-shot on the product table
    let product: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a * b).collect();
    let once = measurement_update(&b0, &ll(&product)).unwrap();
    for (a, b) in once.weights().iter().zip(b2.weights()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn two_particle_bayes_arithmetic() {
    let b = ParticleBelief::uniform(vec![PlanarPose::origin(), PlanarPose::new(0.5, 0.0, 0.0)]).unwrap();
    let post = measurement_update(&b, &[3f64.ln(), 0.0]).unwrap();
    let w = post.weights();
    assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    assert!(measurement_update(&b, &[1.0]).is_err());
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[test]
fn tracking_belief_spread_matches_defaults() {
    let e = EnvironmentExtent::default();
    let anchor = PlanarPose::new(0.1, -0.2, 0.3);
    let b = init_belief(&InitialBeliefSpec::tracking(), 5, 100_000, &e, &anchor).unwrap();
    let m: Vec<PlanarPose> = b.particles.iter().map(|p| p.denormalize(&e)).collect();
    let sx = std_dev(&m.iter().map(|p| p.x).collect::<Vec<_>>());
    let sy = std_dev(&m.iter().map(|p| p.y).collect::<Vec<_>>());
    // yaw deviations taken around the belief mean, so wrapping does not inflate them
    let mean = initial_mean(&InitialBeliefSpec::tracking(), 5, &anchor, &e).unwrap();
    let syaw = std_dev(&b.particles.iter().map(|p| wrap_angle(p.yaw - mean.yaw)).collect::<Vec<_>>());
    assert!((sx - 6.0).abs() < 0.6 && (sy - 6.0).abs() < 0.6, "{sx} {sy}");
    assert!((syaw - 30f64.to_radians()).abs() < 0.1 * 30f64.to_radians(), "{syaw}");

    // the mean offset is drawn from the same Gaussian
    let offsets: Vec<PlanarPose> = (0..20_000)
        .map(|s| initial_mean(&InitialBeliefSpec::tracking(), s, &anchor, &e).unwrap())
        .collect();
    let ox = std_dev(&offsets.iter().map(|p| (p.x - anchor.x) * e.half_width).collect::<Vec<_>>());
    let oyaw = std_dev(&offsets.iter().map(|p| wrap_angle(p.yaw - anchor.yaw)).collect::<Vec<_>>());
    assert!((ox - 6.0).abs() < 0.6, "{ox}");
    assert!((oyaw - 30f64.to_radians()).abs() < 0.1 * 30f64.to_radians(), "{oyaw}");
}

#[test]
fn uniform_belief_covers_the_extent() {
    let e = EnvironmentExtent::default();
    let b = init_belief(&InitialBeliefSpec::UniformGlobal, 8, 100_000, &e, &PlanarPose::origin()).unwrap();
    let xs: Vec<f64> = b.particles.iter().map(|p| p.x).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean.abs() < 0.02);
    assert!(xs.iter().cloned().fold(f64::INFINITY, f64::min) < -0.95);
    assert!(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 0.95);
    assert!(b.particles.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && p.yaw > -PI && p.yaw <= PI));
    assert!(b.log_weights.iter().all(|l| *l == -(100_000f64).ln()));
}

#[test]
fn belief_sampling_is_seeded() {
    let e = EnvironmentExtent::default();
    for spec in [InitialBeliefSpec::UniformGlobal, InitialBeliefSpec::tracking()] {
        let a = init_belief(&spec, 3, 50, &e, &PlanarPose::origin()).unwrap();
        assert_eq!(a, init_belief(&spec, 3, 50, &e, &PlanarPose::origin()).unwrap());
        assert_ne!(a, init_belief(&spec, 4, 50, &e, &PlanarPose::origin()).unwrap());
    }
    let bad = InitialBeliefSpec::GaussianTracking { sigma_x_m: 0.0, sigma_y_m: 1.0, sigma_yaw: 1.0 };
    assert!(init_belief(&bad, 0, 4, &e, &PlanarPose::origin()).is_err());
}

#[test]
fn transition_moves_in_the_particle_frame() {
    let e = EnvironmentExtent::default();
    let b = ParticleBelief::uniform(vec![PlanarPose::new(0.0, 0.0, 0.0), PlanarPose::new(0.5, -0.5, 0.0)]).unwrap();
    // one meter forward
    let d = Egomotion { dx: 1.0, dy: 0.0, dyaw: 0.0 }.normalize(&e);
    let out = transition(&b, &d, &TransitionNoise::zero(), 0, &e).unwrap();
    for (a, o) in b.particles.iter().zip(&out.particles) {
        assert!((o.denormalize(&e).x - a.denormalize(&e).x - 1.0).abs() < 1e-12);
        assert_eq!(o.y, a.y);
    }
    assert_eq!(out.log_weights, b.log_weights);
    let noisy = transition(&b, &d, &TransitionNoise::default(), 0, &e).unwrap();
    assert_eq!(noisy.log_weights, b.log_weights);
    assert_ne!(noisy.particles, out.particles);
}

#[test]
fn transition_noise_has_the_configured_spread() {
    let e = EnvironmentExtent::default();
    let b = ParticleBelief::uniform(vec![PlanarPose::origin(); 50_000]).unwrap();
    let out = transition(&b, &Egomotion::zero(), &TransitionNoise::default(), 2, &e).unwrap();
    let sx = std_dev(&out.particles.iter().map(|p| p.x * e.half_width).collect::<Vec<_>>());
    let syaw = std_dev(&out.particles.iter().map(|p| p.yaw).collect::<Vec<_>>());
    assert!((sx - 0.2).abs() < 0.01, "{sx}");
    assert!((syaw - 2f64.to_radians()).abs() < 0.05 * 2f64.to_radians(), "{syaw}");
}

#[test]
fn resampling_follows_the_weights() {
    let particles = vec![PlanarPose::new(0.0, 0.0, 0.0), PlanarPose::new(0.5, 0.0, 0.0)];
    let b = ParticleBelief { particles: particles.clone(), log_weights: vec![0.9f64.ln(), 0.1f64.ln()] };
    let big = ParticleBelief { particles: particles.iter().cycle().take(20_000).copied().collect(), log_weights: b.log_weights.iter().cycle().take(20_000).map(|l| l - 10_000f64.ln()).collect() };
    let out = resample(&big, 1).unwrap();
    let share = out.particles.iter().filter(|p| p.x == 0.0).count() as f64 / out.len() as f64;
    assert!((share - 0.9).abs() < 0.01, "{share}");
    assert!(out.log_weights.iter().all(|l| *l == -(20_000f64).ln()));
}

#[test]
fn estimate_examples() {
    let p = PlanarPose::new(0.3, -0.1, 1.0);
    assert_eq!(estimate(&ParticleBelief::uniform(vec![p]).unwrap()).unwrap(), p);
    let m = estimate(&ParticleBelief::uniform(vec![PlanarPose::new(0.0, 0.0, 0.5), PlanarPose::new(2.0, 0.0, 0.5)]).unwrap()).unwrap();
    assert!((m.x - 1.0).abs() < 1e-15 && m.y == 0.0 && (m.yaw - 0.5).abs() < 1e-15);
    // yaw averaged on the circle, not arithmetically
    let seam = estimate(&ParticleBelief::uniform(vec![PlanarPose::new(0.0, 0.0, PI - 0.1), PlanarPose::new(0.0, 0.0, -PI + 0.1)]).unwrap()).unwrap();
    assert!((seam.yaw.abs() - PI).abs() < 1e-12);
}

#[test]
fn particle_table_lists_every_particle_in_meters() {
    let e = EnvironmentExtent::default();
    let b = ParticleBelief::uniform(vec![PlanarPose::new(0.5, -0.25, 0.1), PlanarPose::new(0.0, 0.0, 0.0)]).unwrap();
    let mut s = String::new();
    write_particle_table(&mut s, 3, &b, &e);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "# step 3 particles 2");
    assert_eq!(lines[1], "x,y,yaw,weight");
    assert_eq!(lines[2], "10,-5,0.1,0.5");
    assert_eq!(lines.len(), 4);
}

#[test]
fn regression_with_zero_parameters_returns_the_candidate() {
    let cfg = ModelConfig { channel_scale: 0.125, variant: "regression".parse().unwrap(), ..ModelConfig::default() };
    let mut params = init_parameters(&cfg, 1).unwrap();
    params.map_values(|_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let mut r = rng(1);
    let ctx = vec![ContextObservation { image: random_tensor(&[8, 32, 3], 1.0, 0.0, &mut r), pose: PlanarPose::new(0.1, 0.2, 0.3) }];
    let mut g = Graph::new();
    let map = build(&mut g, &params, &cfg, &ctx).unwrap();
    let q = g.constant(random_tensor(&[8, 32, 3], 1.0, 0.0, &mut r)).unwrap();
    let prep = prepare_observation(&mut g, &params, &cfg, &map, q).unwrap();
    let prev = g.constant(Tensor::vector(vec![0.2, -0.1, 0.4])).unwrap();
    let delta = g.constant(Tensor::vector(vec![0.05, 0.0, 0.1])).unwrap();
    let out = regress_step(&mut g, &params, &cfg, &prep, prev, delta).unwrap();
    let want = PlanarPose::new(0.2, -0.1, 0.4).compose(&Egomotion { dx: 0.05, dy: 0.0, dyaw: 0.1 });
    let o = g.value(out).data();
    assert!((o[0] - want.x).abs() < 1e-15 && (o[1] - want.y).abs() < 1e-15 && (o[2] - want.yaw).abs() < 1e-15);
    let dmn = ModelConfig { variant: Variant::dmn(), ..cfg };
    assert!(regress_step(&mut g, &params, &dmn, &prep, prev, delta).is_err());
}

type BeliefCase = (Vec<(f64, f64, f64, f64)>, Vec<f64>, f64);

fn belief_strategy() -> impl Strategy<Value = BeliefCase> {
    (1usize..40).prop_flat_map(|k| {
        (
            proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -PI..PI, -5.0..5.0f64), k),
            proptest::collection::vec(-30.0..30.0f64, k),
            -1e3..1e3f64,
        )
    })
}

fn belief_from(rows: &[(f64, f64, f64, f64)]) -> ParticleBelief {
    let particles = rows.iter().map(|r| PlanarPose::new(r.0, r.1, r.2)).collect();
    let raw = ParticleBelief { particles, log_weights: rows.iter().map(|r| r.3).collect() };
    measurement_update(&raw, &vec![0.0; rows.len()]).unwrap()
}

proptest! {
    #[test]
    fn updates_stay_normalized((rows, l, _c) in belief_strategy()) {
        let b = belief_from(&rows);
        let s: f64 = b.weights().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        let post = measurement_update(&b, &l).unwrap();
        let s: f64 = post.weights().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_likelihood_shift_cancels((rows, l, c) in belief_strategy()) {
        let b = belief_from(&rows);
        let a = measurement_update(&b, &l).unwrap();
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let s = measurement_update(&b, &shifted).unwrap();
        for (x, y) in a.weights().iter().zip(s.weights()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_ignores_particle_order((rows, _l, _c) in belief_strategy(), rot in 0usize..40) {
        let b = belief_from(&rows);
        let mut idx: Vec<usize> = (0..b.len()).collect();
        idx.rotate_left(rot % b.len());
        idx.reverse();
        let p = ParticleBelief {
            particles: idx.iter().map(|&i| b.particles[i]).collect(),
            log_weights: idx.iter().map(|&i| b.log_weights[i]).collect(),
        };
        prop_assert_eq!(estimate(&b).unwrap(), estimate(&p).unwrap());
    }
}
