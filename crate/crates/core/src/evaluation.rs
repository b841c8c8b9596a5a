//! Metrics, evaluation settings, reference baselines and experiment sweeps.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::envgen::{render, Episode, EpisodeSource, Observation};
use crate::error::{Error, Result};
use crate::filter::{
    estimate, init_belief, initial_mean, loglik_values, measurement_update, prepare_observation, regress_step, resample,
    transition, write_particle_table, InitialBeliefSpec, ParticleBelief, TransitionNoise,
};
use crate::geometry::{EnvironmentExtent, PlanarPose};
use crate::mapnet::{self, ContextObservation};
use crate::model::{check_parameters, ModelConfig};
use crate::rng;
use crate::tensor::{Graph, ParameterStore, Tensor};
use crate::training::{belief_seed, episode_for, EVAL_BLOCK};

/// Success threshold in meters: an error under it covers 15.7% of a 40 m square.
pub const SUCCESS_THRESHOLD_M: f64 = 8.94;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    OneStepGlobal,
    SeqGlobal,
    Tracking,
}

impl EvalMode {
    pub fn default_steps(&self) -> usize {
        match self {
            EvalMode::OneStepGlobal => 1,
            EvalMode::SeqGlobal | EvalMode::Tracking => 5,
        }
    }

    pub fn default_particles(&self) -> usize {
        match self {
            EvalMode::Tracking => 256,
            _ => 2048,
        }
    }

    pub fn belief(&self) -> InitialBeliefSpec {
        match self {
            EvalMode::Tracking => InitialBeliefSpec::tracking(),
            _ => InitialBeliefSpec::UniformGlobal,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::OneStepGlobal => "one-step-global",
            EvalMode::SeqGlobal => "seq-global",
            EvalMode::Tracking => "tracking",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-step-global" => Ok(EvalMode::OneStepGlobal),
            "seq-global" | "sequential-global" => Ok(EvalMode::SeqGlobal),
            "tracking" => Ok(EvalMode::Tracking),
            other => Err(Error::Config(format!("unknown mode `{other}` (one-step-global|seq-global|tracking)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSetting {
    pub mode: EvalMode,
    pub particles: usize,
    pub steps: usize,
    pub episodes: usize,
    pub contexts: usize,
    pub seed: u64,
    pub noise: TransitionNoise,
    /// Multinomial resampling after every update.
    pub resample: bool,
}

impl EvalSetting {
    pub fn new(mode: EvalMode) -> Self {
        EvalSetting {
            mode,
            particles: mode.default_particles(),
            steps: mode.default_steps(),
            episodes: 500,
            contexts: 4,
            seed: 1_000_003,
            noise: TransitionNoise::default(),
            resample: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.steps == 0 || self.episodes == 0 || self.contexts == 0 {
            return Err(Error::Config("particles, steps, episodes and contexts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_config(&self) -> Vec<(String, String)> {
        [
            ("mode", self.mode.to_string()),
            ("particles", self.particles.to_string()),
            ("steps", self.steps.to_string()),
            ("episodes", self.episodes.to_string()),
            ("contexts", self.contexts.to_string()),
            ("eval_seed", self.seed.to_string()),
            ("noise_xy_m", self.noise.sigma_x_m.to_string()),
            ("noise_yaw", self.noise.sigma_yaw.to_string()),
            ("resample", self.resample.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn eval_episode_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, &[EVAL_BLOCK, j as u64])
}

/// Planar error in meters between two normalized poses.
pub fn rmse_xy(est: &PlanarPose, truth: &PlanarPose, extent: &EnvironmentExtent) -> f64 {
    est.denormalize(extent).distance_xy(&truth.denormalize(extent))
}

/// Root of the mean squared error over episodes.
pub fn aggregate_rmse(errors_m: &[f64]) -> Result<f64> {
    if errors_m.is_empty() {
        return Err(Error::Invalid("RMSE over an empty episode set".into()));
    }
    Ok((errors_m.iter().map(|e| e * e).sum::<f64>() / errors_m.len() as f64).sqrt())
}

/// Fraction of episodes with error strictly under `threshold_m`.
pub fn success_rate(errors_m: &[f64], threshold_m: f64) -> Result<f64> {
    if errors_m.is_empty() {
        return Err(Error::Invalid("success rate over an empty episode set".into()));
    }
    Ok(errors_m.iter().filter(|e| **e < threshold_m).count() as f64 / errors_m.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode_seed: u64,
    /// 1-based step.
    pub t: usize,
    pub rmse_m: f64,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepAggregate {
    pub t: usize,
    pub episodes: usize,
    pub rmse_m: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub mode: EvalMode,
    pub config: Vec<(String, String)>,
    /// Sorted by episode seed, then step.
    pub records: Vec<EpisodeRecord>,
}

pub const REPORT_HEADER: &str = "episode_seed,variant,mode,t,rmse_m,success";
pub const AGGREGATE_HEADER: &str = "t,episodes,rmse_m,success_rate";

impl MetricsReport {
    pub fn new(variant: impl Into<String>, mode: EvalMode, config: Vec<(String, String)>, mut records: Vec<EpisodeRecord>) -> Self {
        records.sort_by_key(|r| (r.episode_seed, r.t));
        MetricsReport { variant: variant.into(), mode, config, records }
    }

    pub fn errors_at(&self, t: usize) -> Vec<f64> {
        self.records.iter().filter(|r| r.t == t).map(|r| r.rmse_m).collect()
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.records.iter().map(|r| r.t).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    pub fn aggregate(&self) -> Result<Vec<StepAggregate>> {
        self.steps()
            .into_iter()
            .map(|t| {
                let e = self.errors_at(t);
                Ok(StepAggregate { t, episodes: e.len(), rmse_m: aggregate_rmse(&e)?, success_rate: success_rate(&e, SUCCESS_THRESHOLD_M)? })
            })
            .collect()
    }

    pub fn at(&self, t: usize) -> Result<StepAggregate> {
        self.aggregate()?
            .into_iter()
            .find(|a| a.t == t)
            .ok_or_else(|| Error::Invalid(format!("report has no step {t}")))
    }

    pub fn render(&self) -> Result<String> {
        let mut s = String::from("# dmn metrics report v1\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "{REPORT_HEADER}");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.episode_seed, self.variant, self.mode, r.t, r.rmse_m, r.success as u8);
        }
        let _ = writeln!(s, "\n[aggregate]\n{AGGREGATE_HEADER}");
        for a in self.aggregate()? {
            let _ = writeln!(s, "{},{},{},{}", a.t, a.episodes, a.rmse_m, a.success_rate);
        }
        Ok(s)
    }

    /// Parses a rendered report and checks its aggregate block against the records.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("report: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("# dmn metrics report v1") {
            return Err(bad("missing header line".into()));
        }
        let mut config = Vec::new();
        let mut records = Vec::new();
        let mut variant = None;
        let mut mode = None;
        let mut stated = Vec::new();
        let mut section = 0;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
                config.push((k.to_string(), v.to_string()));
                continue;
            }
            match (section, line) {
                (0, REPORT_HEADER) => section = 1,
                (1, "[aggregate]") => section = 2,
                (2, AGGREGATE_HEADER) => section = 3,
                (1, row) => {
                    let f: Vec<&str> = row.split(',').collect();
                    if f.len() != 6 {
                        return Err(bad(format!("record `{row}`")));
                    }
                    variant.get_or_insert_with(|| f[1].to_string());
                    if mode.is_none() {
                        mode = Some(f[2].parse::<EvalMode>()?);
                    }
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("number `{s}`")));
                    records.push(EpisodeRecord {
                        episode_seed: f[0].parse().map_err(|_| bad(format!("seed `{}`", f[0])))?,
                        t: f[3].parse().map_err(|_| bad(format!("step `{}`", f[3])))?,
                        rmse_m: num(f[4])?,
                        success: f[5] == "1",
                    });
                }
                (3, row) => {
                    let f: Vec<f64> = row.split(',').map(|x| x.parse::<f64>().map_err(|_| bad(format!("aggregate `{row}`")))).collect::<Result<_>>()?;
                    if f.len() != 4 {
                        return Err(bad(format!("aggregate `{row}`")));
                    }
                    stated.push(f);
                }
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        let report = MetricsReport::new(variant.ok_or_else(|| bad("no records".into()))?, mode.expect("set with variant"), config, records);
        let agg = report.aggregate()?;
        if agg.len() != stated.len() {
            return Err(bad("aggregate block does not match records".into()));
        }
        for (a, s) in agg.iter().zip(&stated) {
            if a.t as f64 != s[0] || a.episodes as f64 != s[1] || (a.rmse_m - s[2]).abs() > 1e-12 || (a.success_rate - s[3]).abs() > 1e-12 {
                return Err(bad(format!("aggregate for t={} disagrees with records", a.t)));
            }
        }
        Ok(report)
    }
}

/// Step-by-step estimates for one episode, plus optional particle tables.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub estimates: Vec<PlanarPose>,
    pub particle_dump: Option<String>,
}

/// Filters (or regresses) through the first `setting.steps` queries of `ep`
/// using the given contexts.
pub fn rollout(
    params: &ParameterStore,
    cfg: &ModelConfig,
    ep: &Episode,
    contexts: &[ContextObservation],
    setting: &EvalSetting,
    dump: bool,
) -> Result<Rollout> {
    if ep.queries.len() < setting.steps {
        return Err(Error::Invalid(format!("episode {} has {} queries, {} steps requested", ep.seed, ep.queries.len(), setting.steps)));
    }
    let extent = ep.environment.extent;
    let spec = setting.mode.belief();
    let truth0 = ep.queries[0].pose.normalize(&extent);
    let bseed = belief_seed(ep.seed);
    let mut g = Graph::new();
    let map = mapnet::build(&mut g, params, cfg, contexts)?;
    let base = g.mark();
    let mut out = Rollout { estimates: Vec::with_capacity(setting.steps), particle_dump: dump.then(String::new) };
    let mut belief: Option<ParticleBelief> = None;
    for t in 0..setting.steps {
        g.truncate(base);
        let q = g.constant(ep.queries[t].image.to_tensor())?;
        let prep = prepare_observation(&mut g, params, cfg, &map, q)?;
        let delta = if t == 0 { None } else { Some(ep.egomotions[t - 1].normalize(&extent)) };
        let est = if cfg.variant.is_regression() {
            let prev = match out.estimates.last() {
                None => initial_mean(&spec, bseed, &truth0, &extent)?,
                Some(p) => *p,
            };
            let pv = g.constant(Tensor::vector(prev.to_array().to_vec()))?;
            let d = g.constant(Tensor::vector(delta.map(|d| d.to_array().to_vec()).unwrap_or(vec![0.0; 3])))?;
            let e = regress_step(&mut g, params, cfg, &prep, pv, d)?;
            let v = g.value(e).data();
            PlanarPose { x: v[0], y: v[1], yaw: v[2] }
        } else {
            let prior = match (belief.take(), delta) {
                (None, _) => init_belief(&spec, bseed, setting.particles, &extent, &truth0)?,
                (Some(b), Some(d)) => transition(&b, &d, &setting.noise, rng::derive_seed(ep.seed, &[rng::TRANSITION, t as u64]), &extent)?,
                (Some(b), None) => b,
            };
            let l = loglik_values(&mut g, params, cfg, &prep, &prior.particles)?;
            let post = measurement_update(&prior, &l)?;
            let e = estimate(&post)?;
            if let Some(d) = out.particle_dump.as_mut() {
                write_particle_table(d, t + 1, &post, &extent);
            }
            belief = Some(if setting.resample { resample(&post, rng::derive_seed(ep.seed, &[rng::RESAMPLE, t as u64]))? } else { post });
            e
        };
        out.estimates.push(est);
    }
    Ok(out)
}

fn records_for(ep: &Episode, estimates: &[PlanarPose]) -> Vec<EpisodeRecord> {
    let extent = ep.environment.extent;
    estimates
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let err = rmse_xy(e, &ep.queries[t].pose.normalize(&extent), &extent);
            EpisodeRecord { episode_seed: ep.seed, t: t + 1, rmse_m: err, success: err < SUCCESS_THRESHOLD_M }
        })
        .collect()
}

fn eval_episodes(source: &EpisodeSource, setting: &EvalSetting) -> Result<Vec<Episode>> {
    if source.episode.queries < setting.steps || source.episode.contexts < setting.contexts {
        return Err(Error::Config(format!(
            "episodes carry {} contexts and {} queries; the setting needs {} and {}",
            source.episode.contexts, source.episode.queries, setting.contexts, setting.steps
        )));
    }
    (0..setting.episodes).into_par_iter().map(|j| episode_for(source, eval_episode_seed(setting.seed, j))).collect()
}

/// Evaluates a parameter set. Episodes run independently; the report is sorted by seed.
pub fn run_eval(params: &ParameterStore, cfg: &ModelConfig, source: &EpisodeSource, setting: &EvalSetting) -> Result<MetricsReport> {
    Ok(run_eval_with_dump(params, cfg, source, setting, false)?.0)
}

/// As [`run_eval`], also returning the particle tables of every episode when `dump` is set.
pub fn run_eval_with_dump(
    params: &ParameterStore,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    setting: &EvalSetting,
    dump: bool,
) -> Result<(MetricsReport, String)> {
    setting.validate()?;
    check_parameters(cfg, params)?;
    let episodes = eval_episodes(source, setting)?;
    let results = episodes
        .par_iter()
        .map(|ep| {
            let ctx = crate::training::context_observations(ep, setting.contexts)?;
            let r = rollout(params, cfg, ep, &ctx, setting, dump)?;
            Ok((records_for(ep, &r.estimates), r.particle_dump))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dumps = String::new();
    let mut records = Vec::new();
    for (ep, (rec, d)) in episodes.iter().zip(results) {
        records.extend(rec);
        if let Some(d) = d {
            let _ = writeln!(dumps, "## episode {}", ep.seed);
            dumps.push_str(&d);
        }
    }
    let mut config = setting.to_config();
    config.push(("variant".into(), cfg.variant.to_string()));
    Ok((MetricsReport::new(cfg.variant.to_string(), setting.mode, config, records), dumps))
}

/// The context pose nearest (in x–y) to each true query pose.
pub fn closest_context_estimates(ep: &Episode, contexts: usize, steps: usize) -> Result<Vec<PlanarPose>> {
    let ctx = &ep.contexts[..contexts.min(ep.contexts.len())];
    if ctx.is_empty() {
        return Err(Error::Invalid("closest-context baseline needs a context".into()));
    }
    let extent = ep.environment.extent;
    Ok(ep.queries[..steps]
        .iter()
        .map(|q| {
            let best = ctx
                .iter()
                .min_by(|a, b| a.pose.distance_xy(&q.pose).total_cmp(&b.pose.distance_xy(&q.pose)))
                .expect("nonempty");
            best.pose.normalize(&extent)
        })
        .collect())
}

/// Mean of the initial belief, moved by the egomotion only.
pub fn uninformed_estimates(ep: &Episode, setting: &EvalSetting) -> Result<Vec<PlanarPose>> {
    let extent = ep.environment.extent;
    let truth0 = ep.queries[0].pose.normalize(&extent);
    let mut est = vec![initial_mean(&setting.mode.belief(), belief_seed(ep.seed), &truth0, &extent)?];
    for t in 1..setting.steps {
        let d = ep.egomotions[t - 1].normalize(&extent);
        let next = est[t - 1].compose(&d);
        est.push(next);
    }
    Ok(est)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    ClosestContext,
    Uninformed,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::ClosestContext => "closest-context",
            Baseline::Uninformed => "uninformed",
        }
    }
}

pub fn run_baseline(kind: Baseline, source: &EpisodeSource, setting: &EvalSetting) -> Result<MetricsReport> {
    setting.validate()?;
    let episodes = eval_episodes(source, setting)?;
    let mut records = Vec::new();
    for ep in &episodes {
        let est = match kind {
            Baseline::ClosestContext => closest_context_estimates(ep, setting.contexts, setting.steps)?,
            Baseline::Uninformed => uninformed_estimates(ep, setting)?,
        };
        records.extend(records_for(ep, &est));
    }
    let mut config = setting.to_config();
    config.push(("variant".into(), kind.name().into()));
    Ok(MetricsReport::new(kind.name(), setting.mode, config, records))
}

/// Minimum normalized distance between a distractor and every original context.
pub const DISTRACTOR_MIN_DISTANCE: f64 = 0.8;

/// Renders `count` extra contexts in the same world, each at least
/// [`DISTRACTOR_MIN_DISTANCE`] normalized units from every original context.
pub fn far_distractors(ep: &Episode, originals: usize, count: usize) -> Result<Vec<Observation>> {
    let env = &ep.environment;
    let hw = env.extent.half_width;
    let orig = &ep.contexts[..originals];
    let mut r = rng::stream(rng::derive_seed(ep.seed, &[0xd157]), rng::EPISODE);
    let mut out = Vec::with_capacity(count);
    for _ in 0..20_000 {
        if out.len() == count {
            break;
        }
        let p = env.sample_free_pose(&mut r)?;
        if orig.iter().all(|c| c.pose.distance_xy(&p) / hw >= DISTRACTOR_MIN_DISTANCE) {
            let yaw = p.yaw + r.random_range(-0.1..0.1);
            let p = PlanarPose::new(p.x, p.y, yaw);
            out.push(Observation { image: render(env, &p, ep.contexts[0].image.spec())?, pose: p });
        }
    }
    if out.len() < count {
        return Err(Error::Generation(format!("episode {}: no far region for distractors", ep.seed)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LargeEnvRow {
    pub variant: String,
    pub condition: &'static str,
    pub contexts: usize,
    pub rmse_m: f64,
    pub success_rate: f64,
}

/// Tracking with the original contexts versus the originals plus far
/// distractors, for each `(label, params, config)` model.
pub fn large_environment_eval(
    models: &[(&str, &ParameterStore, &ModelConfig)],
    source: &EpisodeSource,
    setting: &EvalSetting,
    distractors: usize,
) -> Result<Vec<LargeEnvRow>> {
    setting.validate()?;
    // episodes whose world has no far region are replaced deterministically
    let mut episodes = Vec::with_capacity(setting.episodes);
    let mut j = 0;
    while episodes.len() < setting.episodes {
        let ep = episode_for(source, eval_episode_seed(setting.seed, j))?;
        j += 1;
        if j > setting.episodes * 20 {
            return Err(Error::Generation("too few episodes admit far distractors".into()));
        }
        match far_distractors(&ep, setting.contexts, distractors) {
            Ok(d) => episodes.push((ep, d)),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut rows = Vec::new();
    for (label, params, cfg) in models {
        check_parameters(cfg, params)?;
        for (condition, extra) in [("original", false), ("distractors", true)] {
            let errs = episodes
                .par_iter()
                .map(|(ep, far)| {
                    let extent = ep.environment.extent;
                    let mut ctx = crate::training::context_observations(ep, setting.contexts)?;
                    if extra {
                        ctx.extend(far.iter().map(|o| ContextObservation::from_observation(o, &extent)));
                    }
                    let r = rollout(params, cfg, ep, &ctx, setting, false)?;
                    Ok(records_for(ep, &r.estimates).last().expect("steps > 0").rmse_m)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(LargeEnvRow {
                variant: label.to_string(),
                condition,
                contexts: setting.contexts + if extra { distractors } else { 0 },
                rmse_m: aggregate_rmse(&errs)?,
                success_rate: success_rate(&errs, SUCCESS_THRESHOLD_M)?,
            });
        }
    }
    Ok(rows)
}

pub fn render_large_env(rows: &[LargeEnvRow]) -> String {
    let mut s = String::from("variant,condition,contexts,rmse_m,success_rate\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.condition, r.contexts, r.rmse_m, r.success_rate);
    }
    s
}

/// One row of a sweep curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub t: usize,
    pub rmse_m: f64,
    pub success_rate: f64,
}

pub fn render_curve(x_name: &str, points: &[CurvePoint]) -> String {
    let mut s = format!("{x_name},t,rmse_m,success_rate\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.x, p.t, p.rmse_m, p.success_rate);
    }
    s
}

fn final_point(x: f64, report: &MetricsReport) -> Result<CurvePoint> {
    let t = *report.steps().last().ok_or_else(|| Error::Invalid("empty report".into()))?;
    let a = report.at(t)?;
    Ok(CurvePoint { x, t, rmse_m: a.rmse_m, success_rate: a.success_rate })
}

/// Evaluates one checkpoint with each context count.
pub fn sweep_context_count(params: &ParameterStore, cfg: &ModelConfig, source: &EpisodeSource, setting: &EvalSetting, counts: &[usize]) -> Result<Vec<CurvePoint>> {
    counts
        .iter()
        .map(|&n| final_point(n as f64, &run_eval(params, cfg, source, &EvalSetting { contexts: n, ..*setting })?))
        .collect()
}

/// Evaluates one checkpoint with each particle count.
pub fn sweep_particle_count(params: &ParameterStore, cfg: &ModelConfig, source: &EpisodeSource, setting: &EvalSetting, counts: &[usize]) -> Result<Vec<CurvePoint>> {
    counts
        .iter()
        .map(|&k| final_point(k as f64, &run_eval(params, cfg, source, &EvalSetting { particles: k, ..*setting })?))
        .collect()
}

/// Success and RMSE at every step of one long rollout.
pub fn sweep_time_curve(params: &ParameterStore, cfg: &ModelConfig, source: &EpisodeSource, setting: &EvalSetting) -> Result<Vec<CurvePoint>> {
    let report = run_eval(params, cfg, source, setting)?;
    Ok(report
        .aggregate()?
        .into_iter()
        .map(|a| CurvePoint { x: a.t as f64, t: a.t, rmse_m: a.rmse_m, success_rate: a.success_rate })
        .collect())
}
