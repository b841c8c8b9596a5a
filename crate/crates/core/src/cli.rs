//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use crate::envgen::{
    decode_dataset, write_dataset, Dataset, DatasetHeader, EpisodeConfig, EpisodeSource, ImageSpec, Style, Trajectory,
    WorldConfig, DATA_MAGIC,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    large_environment_eval, render_curve, render_large_env, run_baseline, run_eval, run_eval_with_dump, sweep_context_count,
    sweep_particle_count, sweep_time_curve, Baseline, CurvePoint, EvalMode, EvalSetting, MetricsReport,
};
use crate::filter::{InitialBeliefSpec, TransitionNoise};
use crate::geometry::EnvironmentExtent;
use crate::gradcheck::{gradcheck, passed, render_rows, GradcheckConfig};
use crate::model::{check_parameters, AttentionNorm, ModelConfig, Variant};
use crate::rng;
use crate::tensor::{decode_checkpoint, write_checkpoint, AdjointFault, ParameterStore, CKPT_MAGIC};
use crate::training::{lr_grid, render_curves, render_grid, train_classification, train_from, AdamConfig, ClassificationConfig, LossConfig, TrainConfig};
use crate::{parse_key_values, render_key_values};

const DEFAULTS: &[(&str, &str)] = &[
    ("image_h", "8"),
    ("image_w", "32"),
    ("channel_scale", "0.25"),
    ("variant", "dmn-pf"),
    ("attention_norm", "softmax"),
    ("share_cnn4_cnn5", "false"),
    ("final_relu", "false"),
    ("latent_len", "0"),
    ("contexts", "4"),
    ("queries", "5"),
    ("particles", "32"),
    ("batch", "8"),
    ("max_iters", "20000"),
    ("val_period", "500"),
    ("val_episodes", "64"),
    ("patience", "5000"),
    ("seed", "0"),
    ("alpha", "0.5"),
    ("lr", "0.001"),
    ("weight_decay", "0"),
    ("tracking_sigma_xy_m", "6"),
    ("tracking_sigma_yaw_deg", "30"),
    ("extent_m", "20"),
    ("grid_cells", "8"),
    ("landmarks", "5"),
    ("style", "mazes"),
    ("trajectory", "walk"),
    ("max_step_m", "3"),
    ("dataset", ""),
    ("eval_mode", "seq-global"),
    ("eval_particles", "0"),
    ("eval_steps", "0"),
    ("eval_episodes", "500"),
    ("eval_contexts", "0"),
    ("eval_seed", "1000003"),
    ("noise_xy_m", "0.2"),
    ("noise_yaw_deg", "2"),
    ("resample", "false"),
];

/// Flat `key=value` run configuration. Unknown keys are rejected; every value
/// is echoed into output headers.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RunConfig::from_pairs(&parse_key_values(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_text(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides.
    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn render(&self) -> String {
        render_key_values(&self.pairs())
    }

    /// Typed value of `key`.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key).parse().map_err(|_| Error::Config(format!("bad value `{}` for `{key}`", self.get(key))))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
        }
    }

    pub fn extent(&self) -> Result<EnvironmentExtent> {
        EnvironmentExtent::new(self.parse("extent_m")?).ok_or_else(|| Error::Config("extent_m must be positive".into()))
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            image: ImageSpec { height: self.parse("image_h")?, width: self.parse("image_w")? },
            channel_scale: self.parse("channel_scale")?,
            variant: self.get("variant").parse::<Variant>()?,
            attention_norm: self.get("attention_norm").parse::<AttentionNorm>()?,
            share_cnn4_cnn5: self.flag("share_cnn4_cnn5")?,
            final_relu: self.flag("final_relu")?,
            latent_vector_len: self.parse("latent_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn world(&self) -> Result<WorldConfig> {
        Ok(WorldConfig { grid_cells: self.parse("grid_cells")?, landmarks: self.parse("landmarks")?, extent: self.extent()? })
    }

    pub fn style(&self) -> Result<Style> {
        self.get("style").parse()
    }

    pub fn episode_config(&self, contexts: usize, queries: usize) -> Result<EpisodeConfig> {
        Ok(EpisodeConfig {
            contexts,
            queries,
            max_step: self.parse("max_step_m")?,
            trajectory: self.get("trajectory").parse::<Trajectory>()?,
            image: ImageSpec { height: self.parse("image_h")?, width: self.parse("image_w")? },
        })
    }

    pub fn train_source(&self) -> Result<EpisodeSource> {
        let mut src = EpisodeSource::procedural(self.world()?, self.style()?, self.episode_config(self.parse("contexts")?, self.parse("queries")?)?);
        let path = self.get("dataset");
        if !path.is_empty() {
            let data = crate::envgen::read_dataset(path)?;
            if data.header.contexts < self.parse::<usize>("contexts")? {
                return Err(Error::Config(format!("dataset {path} has {} contexts per episode", data.header.contexts)));
            }
            src.episode.contexts = data.header.contexts;
            src.episode.queries = data.header.queries;
            src.dataset = Some(Arc::new(data));
        }
        Ok(src)
    }

    /// Evaluation episodes always carry at least 8 contexts and 10 queries so
    /// context-count and time sweeps see the same worlds and trajectories.
    pub fn eval_source(&self, setting: &EvalSetting) -> Result<EpisodeSource> {
        let contexts = setting.contexts.max(self.parse("contexts")?).max(8);
        let queries = setting.steps.max(self.parse("queries")?).max(10);
        Ok(EpisodeSource::procedural(self.world()?, self.style()?, self.episode_config(contexts, queries)?))
    }

    pub fn belief(&self) -> Result<InitialBeliefSpec> {
        let xy: f64 = self.parse("tracking_sigma_xy_m")?;
        let yaw: f64 = self.parse("tracking_sigma_yaw_deg")?;
        Ok(InitialBeliefSpec::GaussianTracking { sigma_x_m: xy, sigma_y_m: xy, sigma_yaw: yaw.to_radians() })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            contexts: self.parse("contexts")?,
            particles: self.parse("particles")?,
            batch: self.parse("batch")?,
            max_iters: self.parse("max_iters")?,
            val_period: self.parse("val_period")?,
            val_episodes: self.parse("val_episodes")?,
            patience: self.parse("patience")?,
            seed: self.parse("seed")?,
            loss: LossConfig { alpha: self.parse("alpha")? },
            adam: AdamConfig { lr: self.parse("lr")?, weight_decay: self.parse("weight_decay")?, ..AdamConfig::default() },
            belief: self.belief()?,
            ..TrainConfig::new(self.model()?, self.train_source()?)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_setting(&self) -> Result<EvalSetting> {
        let mode: EvalMode = self.get("eval_mode").parse()?;
        let mut s = EvalSetting::new(mode);
        let k: usize = self.parse("eval_particles")?;
        if k > 0 {
            s.particles = k;
        }
        let t: usize = self.parse("eval_steps")?;
        if t > 0 {
            s.steps = t;
        }
        let n: usize = self.parse("eval_contexts")?;
        s.contexts = if n > 0 { n } else { self.parse("contexts")? };
        s.episodes = self.parse("eval_episodes")?;
        s.seed = self.parse("eval_seed")?;
        let xy: f64 = self.parse("noise_xy_m")?;
        let yaw: f64 = self.parse("noise_yaw_deg")?;
        s.noise = TransitionNoise { sigma_x_m: xy, sigma_y_m: xy, sigma_yaw: yaw.to_radians() };
        s.resample = self.flag("resample")?;
        Ok(s)
    }
}

#[derive(Parser, Debug)]
#[command(name = "dmn", version, about = "Differentiable mapping network: train and evaluate map-based particle-filter localization")]
pub struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, `key=value` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply(&self.set)?;
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an episode dataset file
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        style: Option<Style>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint and training curves
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        curves: PathBuf,
        /// Train from a fixed dataset file instead of fresh worlds
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated learning rates; keeps the best by validation loss
        #[arg(long, value_delimiter = ',')]
        lr_grid: Vec<f64>,
    },
    /// Evaluate a checkpoint (or a reference baseline) and write a metrics report
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        contexts: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        particle_dump: Option<PathBuf>,
        /// closest-context or uninformed; no checkpoint needed
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the full training loss
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Entries per parameter tensor (0 = all)
        #[arg(long, default_value_t = 24)]
        samples: usize,
        /// Corrupt one primitive's adjoint, `op:factor` (negative control)
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Run an experiment sweep and write curve files
    Sweep {
        #[arg(long)]
        kind: SweepKind,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint the sweep evaluates (view-embedding model for large-env)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Latent-image checkpoint for large-env
        #[arg(long)]
        ckpt_latent: Option<PathBuf>,
        /// Sweep points (counts or dataset sizes), comma-separated
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Classification iterations
        #[arg(long, default_value_t = 500)]
        iters: usize,
    },
    /// Validate file headers against their formats
    Check { files: Vec<PathBuf> },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    DataEfficiency,
    ContextCount,
    TimeCurve,
    ParticleCount,
    Classification,
    LargeEnv,
}

/// Loads a checkpoint and rebuilds its run configuration.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ModelConfig, ParameterStore)> {
    let ckpt = decode_checkpoint(&fs::read(path)?)?;
    let run = RunConfig::from_pairs(&ckpt.config).map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
    let model = run.model()?;
    check_parameters(&model, &ckpt.params)?;
    Ok((run, model, ckpt.params))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn with_echo(config: &[(String, String)], body: &str) -> String {
    let mut s: String = config.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
    s.push_str(body);
    s
}

fn cmd_gen(seed: u64, count: usize, style: Option<Style>, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let mut run = cfg.load()?;
    if let Some(s) = style {
        run.set("style", &s.to_string())?;
    }
    let source = EpisodeSource::procedural(run.world()?, run.style()?, run.episode_config(run.parse("contexts")?, run.parse("queries")?)?);
    let episodes = (0..count)
        .map(|j| crate::training::episode_for(&source, rng::derive_seed(seed, &[j as u64])))
        .collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader {
        image: source.episode.image,
        contexts: source.episode.contexts,
        queries: source.episode.queries,
        extent: run.extent()?,
        style: run.style()?,
    };
    write_dataset(&Dataset { header, episodes }, out)?;
    eprintln!("wrote {count} episodes to {}", out.display());
    Ok(())
}

/// Checkpoint echo: the run config with the resolved latent length.
pub fn checkpoint_config(run: &RunConfig, model: &ModelConfig) -> Result<Vec<(String, String)>> {
    let mut run = run.clone();
    run.set("latent_len", &model.latent_len().to_string())?;
    Ok(run.pairs())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(cfg: &ConfigArgs, variant: Option<Variant>, out_ckpt: &Path, curves: &Path, dataset: Option<&Path>, grid: &[f64]) -> Result<()> {
    let mut run = cfg.load()?;
    if let Some(v) = variant {
        run.set("variant", v.name())?;
    }
    if let Some(d) = dataset {
        run.set("dataset", &d.display().to_string())?;
    }
    let tc = run.train_config()?;
    let echo = checkpoint_config(&run, &tc.model)?;
    eprintln!("training {} ({} parameters)", tc.model.variant, crate::model::init_parameters(&tc.model, 0)?.count());
    let outcome = if grid.is_empty() {
        train_from(&tc, None, |r| {
            eprintln!("iter {} train {:.5} val {:.5}", r.iter, r.train_loss, r.val_loss.unwrap_or(f64::NAN));
        })?
    } else {
        let (best, rows) = lr_grid(&tc, grid)?;
        let grid_path = curves.with_extension("grid.csv");
        write(&grid_path, &with_echo(&echo, &render_grid(&rows)))?;
        eprintln!("learning-rate report in {}", grid_path.display());
        best
    };
    write_checkpoint(out_ckpt, &echo, &outcome.params)?;
    write(curves, &with_echo(&echo, &render_curves(&outcome.curves)))?;
    eprintln!("best validation loss {:.5} at iteration {}", outcome.best_val_loss, outcome.best_iter);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: Option<&Path>,
    mode: Option<EvalMode>,
    particles: Option<usize>,
    episodes: Option<usize>,
    contexts: Option<usize>,
    steps: Option<usize>,
    report: &Path,
    dump: Option<&Path>,
    baseline: Option<&str>,
    cfg: &ConfigArgs,
) -> Result<()> {
    let (mut run, loaded) = match ckpt {
        Some(p) => {
            let (mut run, model, params) = load_checkpoint(p)?;
            run.apply(&cfg.set)?;
            (run, Some((model, params)))
        }
        None => (cfg.load()?, None),
    };
    if let Some(m) = mode {
        run.set("eval_mode", &m.to_string())?;
    }
    for (key, v) in [("eval_particles", particles), ("eval_episodes", episodes), ("eval_contexts", contexts), ("eval_steps", steps)] {
        if let Some(v) = v {
            run.set(key, &v.to_string())?;
        }
    }
    let setting = run.eval_setting()?;
    let source = run.eval_source(&setting)?;
    let (metrics, dumps) = match (baseline, loaded) {
        (Some(b), _) => {
            let kind = match b {
                "closest-context" => Baseline::ClosestContext,
                "uninformed" => Baseline::Uninformed,
                other => return Err(Error::Config(format!("unknown baseline `{other}`"))),
            };
            (run_baseline(kind, &source, &setting)?, String::new())
        }
        (None, Some((model, params))) => run_eval_with_dump(&params, &model, &source, &setting, dump.is_some())?,
        (None, None) => return Err(Error::Config("eval needs --ckpt or --baseline".into())),
    };
    let mut metrics = metrics;
    let mut echo = run.pairs();
    echo.retain(|(k, _)| !metrics.config.iter().any(|(m, _)| m == k));
    metrics.config.extend(echo);
    write(report, &metrics.render()?)?;
    if let Some(d) = dump {
        write(d, &dumps)?;
    }
    for a in metrics.aggregate()? {
        eprintln!("t={} rmse {:.3} m success {:.3}", a.t, a.rmse_m, a.success_rate);
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &ConfigArgs, samples: usize, fault: Option<&str>) -> Result<bool> {
    let mut run = RunConfig::default();
    // tiny defaults; a config file or overrides can change them
    run.set("channel_scale", "0.125")?;
    run.set("contexts", "2")?;
    run.set("particles", "3")?;
    run.set("seed", "11")?;
    if let Some(p) = &cfg.config {
        for (k, v) in parse_key_values(&fs::read_to_string(p)?)? {
            run.set(&k, &v)?;
        }
    }
    run.apply(&cfg.set)?;
    let gc = GradcheckConfig {
        model: run.model()?,
        contexts: run.parse("contexts")?,
        particles: run.parse("particles")?,
        samples_per_param: samples,
        tolerance: 1e-4,
        seed: run.parse("seed")?,
        fault: fault.map(AdjointFault::parse).transpose()?,
    };
    let start = std::time::Instant::now();
    let rows = gradcheck(&gc)?;
    print!("{}", render_rows(&rows, gc.tolerance));
    let ok = passed(&rows, gc.tolerance);
    println!("# {} in {:.1}s", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    Ok(ok)
}

fn eval_checkpoint(ckpt: Option<&Path>, cfg: &ConfigArgs) -> Result<(RunConfig, ModelConfig, ParameterStore)> {
    let p = ckpt.ok_or_else(|| Error::Config("this sweep needs --ckpt".into()))?;
    let (mut run, model, params) = load_checkpoint(p)?;
    if let Some(c) = &cfg.config {
        for (k, v) in parse_key_values(&fs::read_to_string(c)?)? {
            if k.starts_with("eval_") || k.starts_with("noise_") || k == "resample" {
                run.set(&k, &v)?;
            }
        }
    }
    run.apply(&cfg.set)?;
    Ok((run, model, params))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(kind: SweepKind, cfg: &ConfigArgs, out_dir: &Path, ckpt: Option<&Path>, ckpt_latent: Option<&Path>, values: &[usize], iters: usize) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let pick = |default: &[usize]| if values.is_empty() { default.to_vec() } else { values.to_vec() };
    match kind {
        SweepKind::ParticleCount | SweepKind::ContextCount | SweepKind::TimeCurve => {
            let (mut run, model, params) = eval_checkpoint(ckpt, cfg)?;
            if kind == SweepKind::TimeCurve && run.get("eval_steps") == "0" {
                run.set("eval_steps", "10")?;
            }
            let setting = run.eval_setting()?;
            let (name, x, points): (&str, &str, Vec<CurvePoint>) = match kind {
                SweepKind::ParticleCount => {
                    let ks = pick(&[16, 64, 256, 2048]);
                    let src = run.eval_source(&setting)?;
                    ("particle-count.csv", "particles", sweep_particle_count(&params, &model, &src, &setting, &ks)?)
                }
                SweepKind::ContextCount => {
                    let ns = pick(&[1, 2, 4, 8]);
                    let max = *ns.iter().max().unwrap_or(&8);
                    let src = run.eval_source(&EvalSetting { contexts: max, ..setting })?;
                    ("context-count.csv", "contexts", sweep_context_count(&params, &model, &src, &setting, &ns)?)
                }
                _ => {
                    let src = run.eval_source(&setting)?;
                    ("time-curve.csv", "step", sweep_time_curve(&params, &model, &src, &setting)?)
                }
            };
            write(&out_dir.join(name), &with_echo(&run.pairs(), &render_curve(x, &points)))?;
        }
        SweepKind::DataEfficiency => {
            let run = cfg.load()?;
            let sizes = pick(&[100, 1000, 10000]);
            let setting = run.eval_setting()?;
            let mut body = String::from("dataset_size,t,rmse_m,success_rate\n");
            for &n in &sizes {
                let tc = run.train_config()?;
                let episodes = (0..n)
                    .map(|j| crate::training::episode_for(&tc.source, rng::derive_seed(tc.seed, &[0xda7a, j as u64])))
                    .collect::<Result<Vec<_>>>()?;
                let header = DatasetHeader {
                    image: tc.source.episode.image,
                    contexts: tc.source.episode.contexts,
                    queries: tc.source.episode.queries,
                    extent: run.extent()?,
                    style: run.style()?,
                };
                let src = EpisodeSource { dataset: Some(Arc::new(Dataset { header, episodes })), ..tc.source.clone() };
                let out = train_from(&TrainConfig { source: src, ..tc.clone() }, None, |_| {})?;
                let report = run_eval(&out.params, &tc.model, &run.eval_source(&setting)?, &setting)?;
                let a = report.at(setting.steps)?;
                body.push_str(&format!("{n},{},{},{}\n", a.t, a.rmse_m, a.success_rate));
            }
            write(&out_dir.join("data-efficiency.csv"), &with_echo(&run.pairs(), &body))?;
        }
        SweepKind::Classification => {
            let (run, model, params) = eval_checkpoint(ckpt, cfg)?;
            let source = run.train_source()?;
            let cc = ClassificationConfig { iters, seed: run.parse("seed")?, eval_seed: run.parse("eval_seed")?, ..ClassificationConfig::default() };
            let mut body = String::from("map,accuracy\n");
            for (label, freeze) in [("frozen", true), ("finetuned", false)] {
                let (_, acc) = train_classification(&model, &source, &params, freeze, &cc)?;
                body.push_str(&format!("{label},{acc}\n"));
                eprintln!("{label}: accuracy {acc:.3}");
            }
            write(&out_dir.join("classification.csv"), &with_echo(&run.pairs(), &body))?;
        }
        SweepKind::LargeEnv => {
            let (mut run, model, params) = eval_checkpoint(ckpt, cfg)?;
            let (_, lmodel, lparams) = eval_checkpoint(Some(ckpt_latent.ok_or_else(|| Error::Config("large-env needs --ckpt-latent".into()))?), cfg)?;
            run.set("eval_mode", "tracking")?;
            let setting = run.eval_setting()?;
            let src = run.eval_source(&setting)?;
            let rows = large_environment_eval(
                &[(model.variant.name(), &params, &model), (lmodel.variant.name(), &lparams, &lmodel)],
                &src,
                &setting,
                4,
            )?;
            write(&out_dir.join("large-env.csv"), &with_echo(&run.pairs(), &render_large_env(&rows)))?;
        }
    }
    Ok(())
}

/// Checks the header of each file: checkpoints and datasets by magic and a
/// full decode, reports by re-parsing, CSV files by their header line.
fn cmd_check(files: &[PathBuf]) -> Result<bool> {
    let mut ok = true;
    for f in files {
        let bytes = fs::read(f)?;
        let verdict: Result<String> = if bytes.starts_with(CKPT_MAGIC) {
            decode_checkpoint(&bytes).and_then(|c| {
                let run = RunConfig::from_pairs(&c.config)?;
                check_parameters(&run.model()?, &c.params)?;
                Ok(format!("checkpoint, {} tensors, {} config keys", c.params.len(), c.config.len()))
            })
        } else if bytes.starts_with(DATA_MAGIC) {
            decode_dataset(&bytes).map(|d| format!("dataset, {} episodes", d.episodes.len()))
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format("not UTF-8".into()));
            text.and_then(|t| {
                if t.starts_with("# dmn metrics report") {
                    return MetricsReport::parse(&t).map(|r| format!("report, {} records", r.records.len()));
                }
                let header = t.lines().find(|l| !l.starts_with('#')).unwrap_or("");
                let known = [
                    "iter,train_loss,val_loss",
                    "lr,seed,best_val_loss,iterations",
                    "map,accuracy",
                    "variant,condition,contexts,rmse_m,success_rate",
                    "dataset_size,t,rmse_m,success_rate",
                ];
                let curve = header.ends_with(",t,rmse_m,success_rate");
                if !(known.contains(&header) || curve) {
                    return Err(Error::Format(format!("unrecognized header `{header}`")));
                }
                let cols = header.split(',').count();
                let echo = t.lines().take_while(|l| l.starts_with("# ")).map(|l| l[2..].to_string()).collect::<Vec<_>>().join("\n");
                RunConfig::from_text(&echo)?;
                for l in t.lines().filter(|l| !l.starts_with('#')).skip(1) {
                    if l.split(',').count() != cols {
                        return Err(Error::Format(format!("row `{l}` has the wrong column count")));
                    }
                }
                Ok(format!("table `{header}`"))
            })
        };
        match verdict {
            Ok(what) => println!("{}: ok ({what})", f.display()),
            Err(e) => {
                ok = false;
                println!("{}: FAIL ({e})", f.display());
            }
        }
    }
    Ok(ok)
}

/// Runs a parsed command. `Ok(false)` means a check ran and failed.
pub fn run(cli: Cli) -> Result<bool> {
    if cli.threads > 0 {
        // a second call in one process is harmless; the first pool stays
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::Gen { seed, count, style, out, cfg } => cmd_gen(seed, count, style, &out, &cfg).map(|_| true),
        Command::Train { cfg, variant, out_ckpt, curves, dataset, lr_grid } => {
            cmd_train(&cfg, variant, &out_ckpt, &curves, dataset.as_deref(), &lr_grid).map(|_| true)
        }
        Command::Eval { ckpt, mode, particles, episodes, contexts, steps, report, particle_dump, baseline, cfg } => cmd_eval(
            ckpt.as_deref(),
            mode,
            particles,
            episodes,
            contexts,
            steps,
            &report,
            particle_dump.as_deref(),
            baseline.as_deref(),
            &cfg,
        )
        .map(|_| true),
        Command::Gradcheck { cfg, samples, inject_fault } => cmd_gradcheck(&cfg, samples, inject_fault.as_deref()),
        Command::Sweep { kind, cfg, out_dir, ckpt, ckpt_latent, values, iters } => {
            cmd_sweep(kind, &cfg, &out_dir, ckpt.as_deref(), ckpt_latent.as_deref(), &values, iters).map(|_| true)
        }
        Command::Check { files } => cmd_check(&files),
    }
}

/// Process entry: parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Error::Config(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
