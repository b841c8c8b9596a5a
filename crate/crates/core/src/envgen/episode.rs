use std::fmt;
use std::str::FromStr;

use std::sync::Arc;

use super::{generate, render, Dataset, Environment, ImageSpec, RenderedImage, Style, WorldConfig};
use crate::error::{Error, Result};
use crate::geometry::{Egomotion, PlanarPose};
use crate::rng;

/// How query poses are connected into a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    /// Bounded random walk through free space.
    Walk,
    /// Independently sampled poses in random order; egomotion is the exact relative transform.
    Shuffle,
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trajectory::Walk => "walk",
            Trajectory::Shuffle => "shuffle",
        })
    }
}

impl FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(Trajectory::Walk),
            "shuffle" => Ok(Trajectory::Shuffle),
            other => Err(Error::Config(format!("unknown trajectory `{other}` (walk|shuffle)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub contexts: usize,
    pub queries: usize,
    /// Longest random-walk step, meters.
    pub max_step: f64,
    pub trajectory: Trajectory,
    pub image: ImageSpec,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { contexts: 4, queries: 5, max_step: 3.0, trajectory: Trajectory::Walk, image: ImageSpec::default() }
    }
}

/// Image with the pose it was taken from, in world meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: RenderedImage,
    pub pose: PlanarPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub environment: Environment,
    pub contexts: Vec<Observation>,
    pub queries: Vec<Observation>,
    /// `queries[t + 1].pose == queries[t].pose.compose(&egomotions[t])`, exactly.
    pub egomotions: Vec<Egomotion>,
}

impl Episode {
    pub fn query_poses(&self) -> Vec<PlanarPose> {
        self.queries.iter().map(|q| q.pose).collect()
    }
}

const TRAJECTORY_ATTEMPTS: usize = 64;

fn walk(env: &Environment, cfg: &EpisodeConfig, r: &mut impl rand::Rng) -> Result<(Vec<PlanarPose>, Vec<Egomotion>)> {
    'attempt: for _ in 0..TRAJECTORY_ATTEMPTS {
        let mut poses = vec![env.sample_free_pose(r)?];
        let mut motions = Vec::with_capacity(cfg.queries.saturating_sub(1));
        for _ in 1..cfg.queries {
            let Some((m, next)) = env.sample_step(poses.last().unwrap(), cfg.max_step, r) else {
                continue 'attempt;
            };
            motions.push(m);
            poses.push(next);
        }
        return Ok((poses, motions));
    }
    Err(Error::Generation(format!("no free random walk in world {} after {TRAJECTORY_ATTEMPTS} attempts", env.seed)))
}

fn shuffled(env: &Environment, cfg: &EpisodeConfig, r: &mut impl rand::Rng) -> Result<(Vec<PlanarPose>, Vec<Egomotion>)> {
    let mut poses = vec![env.sample_free_pose(r)?];
    let mut motions = Vec::with_capacity(cfg.queries.saturating_sub(1));
    for _ in 1..cfg.queries {
        let target = env.sample_free_pose(r)?;
        let prev = *poses.last().unwrap();
        let m = prev.motion_to(&target);
        // store the composed pose so the egomotion relation holds bit-exactly
        poses.push(prev.compose(&m));
        motions.push(m);
    }
    Ok((poses, motions))
}

/// Samples `contexts` uniform free poses and a `queries`-long trajectory, and renders them.
pub fn sample_episode(env: &Environment, seed: u64, cfg: &EpisodeConfig) -> Result<Episode> {
    if cfg.contexts == 0 || cfg.queries == 0 {
        return Err(Error::Invalid("an episode needs at least one context and one query".into()));
    }
    // separate streams: asking for more contexts leaves the first ones and the trajectory unchanged
    let mut r = rng::stream(seed, rng::EPISODE);
    let context_poses = (0..cfg.contexts).map(|_| env.sample_free_pose(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut r = rng::stream(seed, rng::TRAJECTORY);
    let (query_poses, egomotions) = match cfg.trajectory {
        Trajectory::Walk => walk(env, cfg, &mut r)?,
        Trajectory::Shuffle => shuffled(env, cfg, &mut r)?,
    };
    let observe = |pose: PlanarPose| -> Result<Observation> { Ok(Observation { image: render(env, &pose, cfg.image)?, pose }) };
    Ok(Episode {
        seed,
        environment: env.clone(),
        contexts: context_poses.into_iter().map(observe).collect::<Result<_>>()?,
        queries: query_poses.into_iter().map(observe).collect::<Result<_>>()?,
        egomotions,
    })
}

/// Where episodes come from: fresh procedural worlds keyed by seed, or a fixed dataset.
#[derive(Clone, Debug)]
pub struct EpisodeSource {
    pub world: WorldConfig,
    pub style: Style,
    pub episode: EpisodeConfig,
    pub dataset: Option<Arc<Dataset>>,
}

impl EpisodeSource {
    pub fn procedural(world: WorldConfig, style: Style, episode: EpisodeConfig) -> Self {
        EpisodeSource { world, style, episode, dataset: None }
    }

    /// Episode for `seed`. Procedural sources build the world from a seed derived
    /// from `seed`; dataset sources pick an episode by hashing `seed`.
    pub fn episode(&self, seed: u64) -> Result<Episode> {
        if let Some(data) = &self.dataset {
            if data.episodes.is_empty() {
                return Err(Error::Invalid("dataset has no episodes".into()));
            }
            let i = (rng::derive_seed(seed, &[0]) % data.episodes.len() as u64) as usize;
            return Ok(data.episodes[i].clone());
        }
        let env = generate(rng::derive_seed(seed, &[rng::ENVIRONMENT]), self.style, &self.world)?;
        sample_episode(&env, seed, &self.episode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_exact_egomotion() {
        let env = generate(4, Style::Mazes, &WorldConfig::default()).unwrap();
        for trajectory in [Trajectory::Walk, Trajectory::Shuffle] {
            let cfg = EpisodeConfig { trajectory, ..EpisodeConfig::default() };
            let ep = sample_episode(&env, 77, &cfg).unwrap();
            assert_eq!((ep.contexts.len(), ep.queries.len(), ep.egomotions.len()), (4, 5, 4));
            for t in 0..4 {
                assert_eq!(ep.queries[t + 1].pose, ep.queries[t].pose.compose(&ep.egomotions[t]));
                let m = ep.queries[t].pose.motion_to(&ep.queries[t + 1].pose);
                assert!((m.dx - ep.egomotions[t].dx).abs() < 1e-12);
                assert!((m.dy - ep.egomotions[t].dy).abs() < 1e-12);
                assert!((m.dyaw - ep.egomotions[t].dyaw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn walk_steps_are_bounded() {
        let env = generate(8, Style::Rooms, &WorldConfig::default()).unwrap();
        let cfg = EpisodeConfig { queries: 10, ..EpisodeConfig::default() };
        let ep = sample_episode(&env, 3, &cfg).unwrap();
        for m in &ep.egomotions {
            assert!(m.dx.hypot(m.dy) <= cfg.max_step + 1e-12);
        }
    }

    #[test]
    fn more_contexts_extend_the_episode() {
        let env = generate(5, Style::Mazes, &WorldConfig::default()).unwrap();
        let a = sample_episode(&env, 9, &EpisodeConfig::default()).unwrap();
        let b = sample_episode(&env, 9, &EpisodeConfig { contexts: 8, ..EpisodeConfig::default() }).unwrap();
        assert_eq!(&b.contexts[..4], &a.contexts[..]);
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn rejects_empty_counts() {
        let env = generate(8, Style::Rooms, &WorldConfig::default()).unwrap();
        let cfg = EpisodeConfig { contexts: 0, ..EpisodeConfig::default() };
        assert!(sample_episode(&env, 1, &cfg).is_err());
    }
}
