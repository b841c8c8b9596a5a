//! Differentiable particle filter and the learned observation model.
//!
//! Beliefs hold poses in normalized units. Measurement updates and estimates
//! are always built from graph ops; the value-level helpers run the same ops
//! on a scratch graph, so training and evaluation agree bit for bit.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attend_prepared, prepare, query_key, PreparedAttention};
use crate::error::{Error, Result};
use crate::geometry::{Egomotion, EnvironmentExtent, PlanarPose};
use crate::mapnet::Map;
use crate::model::{apply_stack, ModelConfig, CNN5, CNN6};
use crate::rng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// Weighted pose hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBelief {
    pub particles: Vec<PlanarPose>,
    pub log_weights: Vec<f64>,
}

impl ParticleBelief {
    /// Equal weights over `particles`.
    pub fn uniform(particles: Vec<PlanarPose>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Invalid("a belief needs at least one particle".into()));
        }
        let lw = -(particles.len() as f64).ln();
        let log_weights = vec![lw; particles.len()];
        Ok(ParticleBelief { particles, log_weights })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialBeliefSpec {
    /// x, y uniform over the extent, yaw uniform.
    UniformGlobal,
    /// Gaussian around the first query pose shifted by an offset drawn from the same Gaussian.
    GaussianTracking { sigma_x_m: f64, sigma_y_m: f64, sigma_yaw: f64 },
}

impl InitialBeliefSpec {
    pub fn tracking() -> Self {
        InitialBeliefSpec::GaussianTracking { sigma_x_m: 6.0, sigma_y_m: 6.0, sigma_yaw: 30f64.to_radians() }
    }
}

/// Transition noise in meters and radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionNoise {
    pub sigma_x_m: f64,
    pub sigma_y_m: f64,
    pub sigma_yaw: f64,
}

impl Default for TransitionNoise {
    fn default() -> Self {
        TransitionNoise { sigma_x_m: 0.2, sigma_y_m: 0.2, sigma_yaw: 2f64.to_radians() }
    }
}

impl TransitionNoise {
    pub fn zero() -> Self {
        TransitionNoise { sigma_x_m: 0.0, sigma_y_m: 0.0, sigma_yaw: 0.0 }
    }
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|_| Error::Invalid(format!("bad standard deviation {sigma}")))
}

fn gaussian_offset<R: Rng>(r: &mut R, sx: f64, sy: f64, syaw: f64) -> Result<[f64; 3]> {
    Ok([normal(sx)?.sample(r), normal(sy)?.sample(r), normal(syaw)?.sample(r)])
}

fn check_sigmas(sx: f64, sy: f64, syaw: f64) -> Result<()> {
    if !(sx > 0.0 && sy > 0.0 && syaw > 0.0) {
        return Err(Error::Invalid("tracking belief needs positive standard deviations".into()));
    }
    Ok(())
}

/// Mean of the initial belief: the origin for global localization, the
/// offset anchor for tracking. Draws the same offset as [`init_belief`].
pub fn initial_mean(spec: &InitialBeliefSpec, seed: u64, anchor: &PlanarPose, extent: &EnvironmentExtent) -> Result<PlanarPose> {
    match *spec {
        InitialBeliefSpec::UniformGlobal => Ok(PlanarPose::origin()),
        InitialBeliefSpec::GaussianTracking { sigma_x_m, sigma_y_m, sigma_yaw } => {
            check_sigmas(sigma_x_m, sigma_y_m, sigma_yaw)?;
            let hw = extent.half_width;
            let mut r = rng::stream(seed, rng::BELIEF);
            let o = gaussian_offset(&mut r, sigma_x_m / hw, sigma_y_m / hw, sigma_yaw)?;
            Ok(PlanarPose::new(anchor.x + o[0], anchor.y + o[1], anchor.yaw + o[2]))
        }
    }
}

/// Samples `k` particles. `anchor` is the first true query pose (normalized);
/// only the tracking belief uses it.
pub fn init_belief(
    spec: &InitialBeliefSpec,
    seed: u64,
    k: usize,
    extent: &EnvironmentExtent,
    anchor: &PlanarPose,
) -> Result<ParticleBelief> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    let mut r = rng::stream(seed, rng::BELIEF);
    let particles = match *spec {
        InitialBeliefSpec::UniformGlobal => (0..k)
            .map(|_| {
                let x = r.random_range(-1.0..=1.0);
                let y = r.random_range(-1.0..=1.0);
                // (−π, π]
                let yaw = PI - r.random_range(0.0..2.0 * PI);
                PlanarPose { x, y, yaw }
            })
            .collect(),
        InitialBeliefSpec::GaussianTracking { sigma_x_m, sigma_y_m, sigma_yaw } => {
            check_sigmas(sigma_x_m, sigma_y_m, sigma_yaw)?;
            let hw = extent.half_width;
            let (sx, sy) = (sigma_x_m / hw, sigma_y_m / hw);
            let o = gaussian_offset(&mut r, sx, sy, sigma_yaw)?;
            let mean = PlanarPose::new(anchor.x + o[0], anchor.y + o[1], anchor.yaw + o[2]);
            (0..k)
                .map(|_| {
                    let d = gaussian_offset(&mut r, sx, sy, sigma_yaw)?;
                    Ok(PlanarPose::new(mean.x + d[0], mean.y + d[1], mean.yaw + d[2]))
                })
                .collect::<Result<_>>()?
        }
    };
    ParticleBelief::uniform(particles)
}

/// Moves every particle by `delta` (normalized units) and adds Gaussian noise.
/// Weights are untouched.
pub fn transition(
    belief: &ParticleBelief,
    delta: &Egomotion,
    noise: &TransitionNoise,
    seed: u64,
    extent: &EnvironmentExtent,
) -> Result<ParticleBelief> {
    let hw = extent.half_width;
    let noisy = noise.sigma_x_m > 0.0 || noise.sigma_y_m > 0.0 || noise.sigma_yaw > 0.0;
    let mut r = rng::stream(seed, rng::TRANSITION);
    let (nx, ny, nyaw) = (
        normal(noise.sigma_x_m / hw.max(f64::MIN_POSITIVE))?,
        normal(noise.sigma_y_m / hw.max(f64::MIN_POSITIVE))?,
        normal(noise.sigma_yaw)?,
    );
    let particles = belief
        .particles
        .iter()
        .map(|p| {
            let moved = p.compose(delta);
            if noisy {
                PlanarPose::new(moved.x + nx.sample(&mut r), moved.y + ny.sample(&mut r), moved.yaw + nyaw.sample(&mut r))
            } else {
                moved
            }
        })
        .collect();
    Ok(ParticleBelief { particles, log_weights: belief.log_weights.clone() })
}

/// Multinomial resampling to equal weights. Not differentiated.
pub fn resample(belief: &ParticleBelief, seed: u64) -> Result<ParticleBelief> {
    let w = belief.weights();
    let dist = rand::distr::weighted::WeightedIndex::new(&w).map_err(|e| Error::Invalid(format!("resample: {e}")))?;
    let mut r = rng::stream(seed, rng::RESAMPLE);
    let particles = (0..belief.len()).map(|_| belief.particles[dist.sample(&mut r)]).collect();
    ParticleBelief::uniform(particles)
}

/// `log w + l − logsumexp(log w + l)`, on the tape.
pub fn measurement_update_tape(g: &mut Graph, prior_log_weights: Var, loglik: Var) -> Result<Var> {
    let s = g.add(prior_log_weights, loglik)?;
    let eta = g.logsumexp(s)?;
    let neg = g.scale(eta, -1.0)?;
    g.shift(s, neg)
}

/// Value-level measurement update with the tape's arithmetic.
pub fn measurement_update(belief: &ParticleBelief, loglik: &[f64]) -> Result<ParticleBelief> {
    if loglik.len() != belief.len() {
        return Err(Error::shape("measurement_update", format!("{} likelihoods for {} particles", loglik.len(), belief.len())));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(belief.log_weights.clone()))?;
    let l = g.constant(Tensor::vector(loglik.to_vec()))?;
    let out = measurement_update_tape(&mut g, p, l)?;
    Ok(ParticleBelief { particles: belief.particles.clone(), log_weights: g.value(out).data().to_vec() })
}

/// Particle coordinates as three `[K]` nodes.
pub fn particle_vars(g: &mut Graph, particles: &[PlanarPose]) -> Result<[Var; 3]> {
    let col = |i: usize| Tensor::vector(particles.iter().map(|p| p.to_array()[i]).collect());
    Ok([g.constant(col(0))?, g.constant(col(1))?, g.constant(col(2))?])
}

/// Resultant length below which the weighted yaw is treated as undefined.
const DEGENERATE_RESULTANT: f64 = 1e-12;

/// Weighted-mean pose `[3]`. Yaw is the direction of the weighted resultant of
/// unit heading vectors; when that resultant vanishes, the highest-weight particle's yaw.
///
/// Sums run over the particles in a canonical order, so the result does not
/// depend on how the particles are listed, bit for bit.
pub fn estimate_tape(g: &mut Graph, log_weights: Var, coords: [Var; 3]) -> Result<Var> {
    let key = |i: usize, g: &Graph| [g.value(coords[0]).data()[i], g.value(coords[1]).data()[i], g.value(coords[2]).data()[i], g.value(log_weights).data()[i]];
    let n = g.value(log_weights).len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(a, g), key(b, g));
        ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let log_weights = g.gather(log_weights, &order)?;
    let coords = [g.gather(coords[0], &order)?, g.gather(coords[1], &order)?, g.gather(coords[2], &order)?];
    let w = g.exp(log_weights)?;
    let x = g.dot(w, coords[0])?;
    let y = g.dot(w, coords[1])?;
    let s = g.sin(coords[2])?;
    let c = g.cos(coords[2])?;
    let ss = g.dot(w, s)?;
    let cc = g.dot(w, c)?;
    let yaw = if g.scalar_value(ss).hypot(g.scalar_value(cc)) < DEGENERATE_RESULTANT {
        let lw = g.value(log_weights).data();
        // first maximum in canonical order, so ties break the same way for any listing
        let best = lw.iter().enumerate().fold(0, |b, (i, v)| if *v > lw[b] { i } else { b });
        g.select(coords[2], best)?
    } else {
        g.atan2(ss, cc)?
    };
    g.stack(&[x, y, yaw])
}

pub fn estimate(belief: &ParticleBelief) -> Result<PlanarPose> {
    let mut g = Graph::new();
    let lw = g.constant(Tensor::vector(belief.log_weights.clone()))?;
    let coords = particle_vars(&mut g, &belief.particles)?;
    let e = estimate_tape(&mut g, lw, coords)?;
    let v = g.value(e).data();
    Ok(PlanarPose { x: v[0], y: v[1], yaw: v[2] })
}

/// Per-query state of the observation model: everything that does not depend
/// on the candidate pose.
#[derive(Clone, Debug)]
pub struct PreparedObservation {
    attention: Option<PreparedAttention>,
    /// CNN6 first-layer contribution of the query features (and of the map,
    /// when the map does not depend on the candidate), bias included.
    shared: Var,
    origin: Var,
}

fn cnn5(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let share = cfg.share_cnn4_cnn5;
    apply_stack(g, params, "cnn5", &CNN5, 0, image, |i| (share && i >= 4).then(|| format!("cnn4.{}", i - 4)))
}

fn conv6(g: &mut Graph, params: &ParameterStore, name: &str, x: Var, bias: bool) -> Result<Var> {
    let w = g.param(params, name)?;
    let b = if bias { Some(g.param(params, "cnn6.0.b")?) } else { None };
    g.conv2d(x, w, b, CNN6[0].stride)
}

/// Prepares the observation model for one query image over one map.
pub fn prepare_observation(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, map: &Map, query_image: Var) -> Result<PreparedObservation> {
    let expected = [cfg.image.height, cfg.image.width, 3];
    if g.value(query_image).shape() != expected {
        return Err(Error::shape("observe", format!("query {:?}, config expects {expected:?}", g.value(query_image).shape())));
    }
    let emb = cfg.embedding();
    let q = cnn5(g, params, cfg, query_image)?;
    let mut shared = conv6(g, params, "cnn6.0.w_query", q, true)?;
    let origin = g.constant(Tensor::zeros(&[3]))?;
    let mut attention = None;
    match map {
        Map::View(m) => {
            if m.entries.iter().any(|e| g.value(e.embedding).shape() != [emb.h, emb.w, emb.d]) {
                return Err(Error::shape("observe", "map embeddings do not match the configured extents"));
            }
            let qk = query_key(g, params, cfg, query_image)?;
            let prep = prepare(g, params, m, qk)?;
            if !cfg.variant.egocentric {
                let r = attend_prepared(g, params, cfg, &prep, origin)?;
                let part = conv6(g, params, "cnn6.0.w_map", r.features, false)?;
                shared = g.add(shared, part)?;
            }
            attention = Some(prep);
        }
        Map::Image(m) => {
            let part = conv6(g, params, "cnn6.0.w_map", m.features, false)?;
            shared = g.add(shared, part)?;
        }
        Map::Vector(m) => {
            let tiled = g.tile(m.features, emb.h, emb.w)?;
            let part = conv6(g, params, "cnn6.0.w_map", tiled, false)?;
            shared = g.add(shared, part)?;
        }
    }
    Ok(PreparedObservation { attention, shared, origin })
}

/// Head output for one candidate `[3]` pose node: the unnormalized
/// log-likelihood `[1]`, or the `[3]` pose offset for regression variants.
///
/// CNN6's first kernel is stored split by input block (map readout, query
/// features, candidate pose); the sum of the parts equals a single conv over
/// their channel concatenation.
pub fn observe_prepared(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, prep: &PreparedObservation, candidate: Var) -> Result<Var> {
    let emb = cfg.embedding();
    let part = match (&prep.attention, cfg.variant.egocentric) {
        (Some(att), true) => {
            let r = attend_prepared(g, params, cfg, att, candidate)?;
            conv6(g, params, "cnn6.0.w_map", r.features, false)?
        }
        _ => {
            let enc = g.egocentric_encode(candidate, prep.origin)?;
            let tiled = g.tile(enc, emb.h, emb.w)?;
            conv6(g, params, "cnn6.0.w_pose", tiled, false)?
        }
    };
    let z = g.add(prep.shared, part)?;
    let z = g.relu(z)?;
    let z = apply_stack(g, params, "cnn6", &CNN6, 1, z, |_| None)?;
    let flat = g.flatten(z)?;
    let w0 = g.param(params, "fc1.0.w")?;
    let b0 = g.param(params, "fc1.0.b")?;
    let h = g.dense(flat, w0, Some(b0))?;
    let h = g.relu(h)?;
    let w1 = g.param(params, "fc1.1.w")?;
    let b1 = g.param(params, "fc1.1.b")?;
    let out = g.dense(h, w1, Some(b1))?;
    if cfg.final_relu && !cfg.variant.is_regression() {
        g.relu(out)
    } else {
        Ok(out)
    }
}

/// Unnormalized log-likelihood of the query image at `candidate`.
pub fn observe_loglik(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    map: &Map,
    query_image: Var,
    candidate: Var,
) -> Result<Var> {
    if cfg.variant.is_regression() {
        return Err(Error::Config("regression variants have no likelihood head".into()));
    }
    let prep = prepare_observation(g, params, cfg, map, query_image)?;
    observe_prepared(g, params, cfg, &prep, candidate)
}

/// Log-likelihoods of every particle as one `[K]` node.
pub fn loglik_tape(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, prep: &PreparedObservation, particles: &[PlanarPose]) -> Result<Var> {
    let mut ls = Vec::with_capacity(particles.len());
    for p in particles {
        let c = g.constant(Tensor::vector(p.to_array().to_vec()))?;
        ls.push(observe_prepared(g, params, cfg, prep, c)?);
    }
    g.stack(&ls)
}

/// Log-likelihood values only. Each particle's subgraph is dropped once its
/// value is read, so memory stays flat in K.
pub fn loglik_values(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, prep: &PreparedObservation, particles: &[PlanarPose]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(particles.len());
    for p in particles {
        let mark = g.mark();
        let c = g.constant(Tensor::vector(p.to_array().to_vec()))?;
        let l = observe_prepared(g, params, cfg, prep, c)?;
        out.push(g.scalar_value(l));
        g.truncate(mark);
    }
    Ok(out)
}

/// Regression head step: `compose(candidate, offset)` with `candidate = compose(prev, delta)`.
pub fn regress_step(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    prep: &PreparedObservation,
    prev_estimate: Var,
    delta: Var,
) -> Result<Var> {
    if !cfg.variant.is_regression() {
        return Err(Error::Config("regress_step needs a regression variant".into()));
    }
    let candidate = g.compose(prev_estimate, delta)?;
    let offset = observe_prepared(g, params, cfg, prep, candidate)?;
    g.compose(candidate, offset)
}

/// One text table per step: `x,y,yaw,weight` rows with positions in meters.
pub fn write_particle_table(out: &mut String, step: usize, belief: &ParticleBelief, extent: &EnvironmentExtent) {
    let _ = writeln!(out, "# step {step} particles {}", belief.len());
    let _ = writeln!(out, "x,y,yaw,weight");
    for (p, lw) in belief.particles.iter().zip(&belief.log_weights) {
        let m = p.denormalize(extent);
        let _ = writeln!(out, "{},{},{},{}", m.x, m.y, m.yaw, lw.exp());
    }
}
