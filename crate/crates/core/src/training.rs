//! Localization loss, Adam, the one-step training loop, the learning-rate grid
//! and classification transfer.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::envgen::{Episode, EpisodeSource};
use crate::error::{Error, Result};
use crate::filter::{
    estimate_tape, init_belief, initial_mean, loglik_tape, measurement_update_tape, particle_vars, prepare_observation,
    regress_step, InitialBeliefSpec,
};
use crate::geometry::PlanarPose;
use crate::mapnet::{self, ContextObservation};
use crate::model::{init_parameters, map_encoder_prefixes, ModelConfig};
use crate::rng;
use crate::tensor::{Gradients, Graph, ParameterStore, Tensor, Var};

/// Seed-block tags. Training, validation and evaluation episodes come from
/// disjoint derived seed sets.
pub const TRAIN_BLOCK: u64 = 0x7472_6169;
pub const VALIDATION_BLOCK: u64 = 0x7661_6c69;
pub const EVAL_BLOCK: u64 = 0x6576_616c;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the squared yaw error.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5 }
    }
}

/// `(x−x*)² + (y−y*)² + α·wrap(ψ−ψ*)²` for `[3]` pose nodes in normalized units.
pub fn localization_loss_tape(g: &mut Graph, est: Var, truth: Var, cfg: &LossConfig) -> Result<Var> {
    let raw = g.sub(est, truth)?;
    let wrapped = g.wrap_angle(raw)?;
    let pos_mask = g.constant(Tensor::vector(vec![1.0, 1.0, 0.0]))?;
    let yaw_mask = g.constant(Tensor::vector(vec![0.0, 0.0, cfg.alpha.sqrt()]))?;
    let p = g.mul(raw, pos_mask)?;
    let y = g.mul(wrapped, yaw_mask)?;
    let e = g.add(p, y)?;
    g.dot(e, e)
}

pub fn localization_loss(est: &PlanarPose, truth: &PlanarPose, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(Tensor::vector(est.to_array().to_vec()))?;
    let t = g.constant(Tensor::vector(truth.to_array().to_vec()))?;
    let l = localization_loss_tape(&mut g, e, t, cfg)?;
    Ok(g.scalar_value(l))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, `θ ← θ − lr·wd·θ` before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState { config, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }
}

/// One Adam step with bias correction over every trainable parameter.
pub fn adam_step(params: &mut ParameterStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for (name, _) in grads.params() {
        if !params.contains(name) {
            return Err(Error::UnknownParam(name.to_string()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
    let names: Vec<String> = params.names().filter(|n| params.is_trainable(n)).map(str::to_string).collect();
    for name in names {
        let g = grads.param(&name).ok_or_else(|| Error::UnknownParam(format!("no gradient for `{name}`")))?;
        let theta = params.get_mut(&name).expect("listed above");
        if g.shape() != theta.shape() {
            return Err(Error::shape("adam_step", format!("`{name}` gradient {:?} vs {:?}", g.shape(), theta.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *p -= c.lr * c.weight_decay * *p;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Everything a training run needs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub source: EpisodeSource,
    pub contexts: usize,
    pub particles: usize,
    pub batch: usize,
    pub max_iters: usize,
    pub val_period: usize,
    pub val_episodes: usize,
    /// Iterations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub belief: InitialBeliefSpec,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, source: EpisodeSource) -> Self {
        TrainConfig {
            model,
            source,
            contexts: 4,
            particles: 32,
            batch: 8,
            max_iters: 20_000,
            val_period: 500,
            val_episodes: 64,
            patience: 5_000,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            belief: InitialBeliefSpec::tracking(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.contexts == 0 || self.particles == 0 || self.batch == 0 || self.val_period == 0 || self.val_episodes == 0 {
            return Err(Error::Config("contexts, particles, batch, val_period and val_episodes must be positive".into()));
        }
        if self.loss.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.source.episode.contexts < self.contexts {
            return Err(Error::Config(format!(
                "episodes carry {} contexts, training wants {}",
                self.source.episode.contexts, self.contexts
            )));
        }
        Ok(())
    }
}

pub fn train_episode_seed(seed: u64, iter: usize, slot: usize) -> u64 {
    rng::derive_seed(seed, &[TRAIN_BLOCK, iter as u64, slot as u64])
}

pub fn validation_episode_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, &[VALIDATION_BLOCK, j as u64])
}

/// Seed of the initial belief for an episode; shared by training and evaluation.
pub fn belief_seed(episode_seed: u64) -> u64 {
    rng::derive_seed(episode_seed, &[rng::BELIEF])
}

pub fn context_observations(ep: &Episode, count: usize) -> Result<Vec<ContextObservation>> {
    if count == 0 || count > ep.contexts.len() {
        return Err(Error::Invalid(format!("episode {} has {} contexts, {count} requested", ep.seed, ep.contexts.len())));
    }
    let extent = ep.environment.extent;
    Ok(ep.contexts[..count].iter().map(|o| ContextObservation::from_observation(o, &extent)).collect())
}

/// Forward pass of the first query of an episode: map, initial belief, one
/// measurement update (or one regression step), estimate. Returns the `[3]`
/// estimate node.
pub fn one_step_estimate(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    ep: &Episode,
    contexts: usize,
    particles: usize,
    belief: &InitialBeliefSpec,
) -> Result<Var> {
    let extent = ep.environment.extent;
    let ctx = context_observations(ep, contexts)?;
    let map = mapnet::build(g, params, cfg, &ctx)?;
    let q = &ep.queries[0];
    let truth = q.pose.normalize(&extent);
    let qimg = g.constant(q.image.to_tensor())?;
    let prep = prepare_observation(g, params, cfg, &map, qimg)?;
    let bseed = belief_seed(ep.seed);
    if cfg.variant.is_regression() {
        let mean = initial_mean(belief, bseed, &truth, &extent)?;
        let prev = g.constant(Tensor::vector(mean.to_array().to_vec()))?;
        let zero = g.constant(Tensor::zeros(&[3]))?;
        regress_step(g, params, cfg, &prep, prev, zero)
    } else {
        let b = init_belief(belief, bseed, particles, &extent, &truth)?;
        let l = loglik_tape(g, params, cfg, &prep, &b.particles)?;
        let prior = g.constant(Tensor::vector(b.log_weights.clone()))?;
        let post = measurement_update_tape(g, prior, l)?;
        let coords = particle_vars(g, &b.particles)?;
        estimate_tape(g, post, coords)
    }
}

/// Loss node of the one-step task on one episode.
pub fn episode_loss(g: &mut Graph, params: &ParameterStore, cfg: &TrainConfig, ep: &Episode) -> Result<Var> {
    let est = one_step_estimate(g, params, &cfg.model, ep, cfg.contexts, cfg.particles, &cfg.belief)?;
    let truth = ep.queries[0].pose.normalize(&ep.environment.extent);
    let t = g.constant(Tensor::vector(truth.to_array().to_vec()))?;
    localization_loss_tape(g, est, t, &cfg.loss)
}

fn loss_and_grads(params: &ParameterStore, cfg: &TrainConfig, ep: &Episode) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let l = episode_loss(&mut g, params, cfg, ep)?;
    let grads = g.backward(l, params)?;
    Ok((g.scalar_value(l), grads))
}

fn loss_only(params: &ParameterStore, cfg: &TrainConfig, ep: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let l = episode_loss(&mut g, params, cfg, ep)?;
    Ok(g.scalar_value(l))
}

/// Mean validation loss over the fixed held-out episodes.
pub fn validation_loss(params: &ParameterStore, cfg: &TrainConfig, episodes: &[Episode]) -> Result<f64> {
    let losses = episodes.par_iter().map(|ep| loss_only(params, cfg, ep)).collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss.
    pub params: ParameterStore,
    pub best_val_loss: f64,
    pub best_iter: usize,
    pub iterations: usize,
    pub curves: Vec<CurveRow>,
}

pub fn render_curves(rows: &[CurveRow]) -> String {
    let mut s = String::from("iter,train_loss,val_loss\n");
    for r in rows {
        let v = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.iter, r.train_loss, v);
    }
    s
}

fn diverged(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { iter, loss: f64::NAN },
        other => other,
    }
}

/// Draws episodes, skipping seeds whose world or trajectory cannot be generated.
pub fn episode_for(source: &EpisodeSource, seed: u64) -> Result<Episode> {
    let mut s = seed;
    for _ in 0..8 {
        match source.episode(s) {
            Err(Error::Generation(_)) => s = rng::derive_seed(s, &[1]),
            other => return other,
        }
    }
    source.episode(s)
}

/// Trains from `init`, or from fresh parameters when `init` is `None`.
/// Each iteration averages the one-step loss over a batch of fresh episodes;
/// gradients are summed in batch order, so thread count does not change results.
pub fn train_from(cfg: &TrainConfig, init: Option<ParameterStore>, mut progress: impl FnMut(&CurveRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => init_parameters(&cfg.model, cfg.seed)?,
    };
    let val_eps = (0..cfg.val_episodes)
        .map(|j| episode_for(&cfg.source, validation_episode_seed(cfg.seed, j)))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptimizerState::new(cfg.adam);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut curves = Vec::new();
    let mut window = (0.0, 0usize);
    let mut iterations = 0;
    for iter in 1..=cfg.max_iters {
        let seeds: Vec<u64> = (0..cfg.batch).map(|b| train_episode_seed(cfg.seed, iter, b)).collect();
        let results = seeds
            .par_iter()
            .map(|&s| {
                let ep = episode_for(&cfg.source, s)?;
                loss_and_grads(&params, cfg, &ep)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(iter, e))?;
        let mut grads = Gradients::zeros_like(&params);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.accumulate(g)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, loss });
        }
        grads.scale(1.0 / cfg.batch as f64);
        adam_step(&mut params, &grads, &mut opt)?;
        iterations = iter;
        window.0 += loss;
        window.1 += 1;
        if iter % cfg.val_period == 0 || iter == cfg.max_iters {
            let val = validation_loss(&params, cfg, &val_eps).map_err(|e| diverged(iter, e))?;
            let row = CurveRow { iter, train_loss: window.0 / window.1 as f64, val_loss: Some(val) };
            progress(&row);
            curves.push(row);
            window = (0.0, 0);
            if val < best.0 {
                best = (val, iter, params.clone());
            } else if iter - best.1 > cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { params: best.2, best_val_loss: best.0, best_iter: best.1, iterations, curves })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(cfg, None, |_| {})
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub lr: f64,
    pub seed: u64,
    pub best_val_loss: f64,
    pub iterations: usize,
}

/// Trains one model per learning rate and keeps the lowest validation loss.
/// The first rate uses the configured seed; later rates use derived seeds.
pub fn lr_grid(cfg: &TrainConfig, rates: &[f64]) -> Result<(TrainOutcome, Vec<GridRow>)> {
    if rates.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(rates.len());
    let mut best: Option<(usize, TrainOutcome)> = None;
    for (i, &lr) in rates.iter().enumerate() {
        let seed = if i == 0 { cfg.seed } else { rng::derive_seed(cfg.seed, &[i as u64]) };
        let c = TrainConfig { seed, adam: AdamConfig { lr, ..cfg.adam }, ..cfg.clone() };
        let out = train(&c)?;
        rows.push(GridRow { lr, seed, best_val_loss: out.best_val_loss, iterations: out.iterations });
        if best.as_ref().is_none_or(|(_, b)| out.best_val_loss < b.best_val_loss) {
            best = Some((i, out));
        }
    }
    Ok((best.expect("nonempty grid").1, rows))
}

pub fn render_grid(rows: &[GridRow]) -> String {
    let mut s = String::from("lr,seed,best_val_loss,iterations\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.lr, r.seed, r.best_val_loss, r.iterations);
    }
    s
}

/// One classification trial: the contexts of `N_c` different worlds, a query
/// from one of them, particles pinned at the context poses.
#[derive(Clone, Debug)]
pub struct ClassificationTrial {
    pub contexts: Vec<ContextObservation>,
    pub query: Tensor,
    pub label: usize,
}

pub fn classification_trial(source: &EpisodeSource, seed: u64, classes: usize) -> Result<ClassificationTrial> {
    if classes < 2 {
        return Err(Error::Config("classification needs at least two environments".into()));
    }
    let mut r = rng::stream(seed, rng::CLASSIFY);
    let label = rand::Rng::random_range(&mut r, 0..classes);
    let mut contexts = Vec::with_capacity(classes);
    let mut query = None;
    for c in 0..classes {
        let ep = episode_for(source, rng::derive_seed(seed, &[rng::CLASSIFY, c as u64]))?;
        let extent = ep.environment.extent;
        contexts.push(ContextObservation::from_observation(&ep.contexts[0], &extent));
        if c == label {
            query = Some(ep.queries[0].image.to_tensor());
        }
    }
    Ok(ClassificationTrial { contexts, query: query.expect("label in range"), label })
}

/// Per-class logits: the log-likelihood of the query at each context pose.
pub fn classification_logits(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, trial: &ClassificationTrial) -> Result<Var> {
    let map = mapnet::build(g, params, cfg, &trial.contexts)?;
    let q = g.constant(trial.query.clone())?;
    let prep = prepare_observation(g, params, cfg, &map, q)?;
    let poses: Vec<PlanarPose> = trial.contexts.iter().map(|c| c.pose).collect();
    loglik_tape(g, params, cfg, &prep, &poses)
}

/// `logsumexp(logits) − logits[label]`.
pub fn cross_entropy_tape(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let z = g.logsumexp(logits)?;
    let t = g.select(logits, label)?;
    g.sub(z, t)
}

#[derive(Clone, Copy, Debug)]
pub struct ClassificationConfig {
    pub classes: usize,
    pub iters: usize,
    pub batch: usize,
    pub eval_trials: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub adam: AdamConfig,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        ClassificationConfig { classes: 4, iters: 500, batch: 8, eval_trials: 200, seed: 0, eval_seed: 1, adam: AdamConfig::default() }
    }
}

pub fn classification_accuracy(params: &ParameterStore, model: &ModelConfig, source: &EpisodeSource, cc: &ClassificationConfig) -> Result<f64> {
    let correct = (0..cc.eval_trials)
        .into_par_iter()
        .map(|j| {
            let trial = classification_trial(source, rng::derive_seed(cc.eval_seed, &[EVAL_BLOCK, j as u64]), cc.classes)?;
            let mut g = Graph::new();
            let l = classification_logits(&mut g, params, model, &trial)?;
            let v = g.value(l).data();
            let pick = v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            Ok((pick == trial.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / cc.eval_trials.max(1) as f64)
}

/// Fine-tunes a localization model for environment classification. With
/// `freeze_map` the map encoder is held fixed and only the rest trains.
pub fn train_classification(
    model: &ModelConfig,
    source: &EpisodeSource,
    pretrained: &ParameterStore,
    freeze_map: bool,
    cc: &ClassificationConfig,
) -> Result<(ParameterStore, f64)> {
    if model.variant.is_regression() {
        return Err(Error::Config("classification needs a likelihood head".into()));
    }
    if cc.classes < 2 {
        return Err(Error::Config("classification needs at least two environments".into()));
    }
    let mut params = pretrained.clone();
    for prefix in map_encoder_prefixes(model) {
        params.set_trainable_prefix(prefix, !freeze_map);
    }
    let mut opt = OptimizerState::new(cc.adam);
    for iter in 1..=cc.iters {
        let results = (0..cc.batch)
            .into_par_iter()
            .map(|b| {
                let trial = classification_trial(source, rng::derive_seed(cc.seed, &[TRAIN_BLOCK, iter as u64, b as u64]), cc.classes)?;
                let mut g = Graph::new();
                let l = classification_logits(&mut g, &params, model, &trial)?;
                let ce = cross_entropy_tape(&mut g, l, trial.label)?;
                Ok((g.scalar_value(ce), g.backward(ce, &params)?))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(iter, e))?;
        let mut grads = Gradients::zeros_like(&params);
        for (_, g) in &results {
            grads.accumulate(g)?;
        }
        grads.scale(1.0 / cc.batch as f64);
        adam_step(&mut params, &grads, &mut opt)?;
    }
    for prefix in map_encoder_prefixes(model) {
        params.set_trainable_prefix(prefix, true);
    }
    let acc = classification_accuracy(&params, model, source, cc)?;
    Ok((params, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn loss_examples() {
        let c = LossConfig::default();
        let p = PlanarPose::new(0.2, -0.3, 1.0);
        assert_eq!(localization_loss(&p, &p, &c).unwrap(), 0.0);
        let a = PlanarPose { x: 1.0, y: 0.0, yaw: PI / 2.0 };
        let l = localization_loss(&a, &PlanarPose::origin(), &c).unwrap();
        assert!((l - (1.0 + 0.5 * (PI / 2.0).powi(2))).abs() < 1e-12);
        let w = PlanarPose { x: 0.0, y: 0.0, yaw: 2.0 * PI - 0.1 };
        let l = localization_loss(&w, &PlanarPose::origin(), &c).unwrap();
        assert!((l - 0.5 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = ParameterStore::new();
        p.insert("a", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let mut g = Graph::new();
        let v = g.param(&p, "a").unwrap();
        let c = g.constant(Tensor::vector(vec![3.0, -0.2, 1e-3])).unwrap();
        let s = g.dot(v, c).unwrap();
        let grads = g.backward(s, &p).unwrap();
        let before = p.get("a").unwrap().clone();
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut p, &grads, &mut st).unwrap();
        let after = p.get("a").unwrap();
        for ((b, a), gi) in before.data().iter().zip(after.data()).zip([3.0, -0.2, 1e-3f64]) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!(((a - b) - expect).abs() < 1e-15);
            assert_eq!((a - b).signum(), -gi.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParameterStore::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let grads = Gradients::zeros_like(&p);
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut p, &grads, &mut st).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::filled(&[5], 0.7)).unwrap();
        let ce = cross_entropy_tape(&mut g, l, 2).unwrap();
        assert!((g.scalar_value(ce) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn curves_have_header() {
        let s = render_curves(&[CurveRow { iter: 1, train_loss: 0.5, val_loss: None }]);
        assert_eq!(s, "iter,train_loss,val_loss\n1,0.5,\n");
    }
}
