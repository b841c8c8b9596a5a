//! Procedural colored-wall worlds, ray-cast panoramic observations, and
//! episode sampling.
//!
//! A world is an `n×n` grid spanning the square extent. Border cells are always
//! walls. `Rooms` has no interior walls, `Mazes` scatters interior wall cells and
//! regenerates until the free cells are 4-connected. Cylindrical landmarks of
//! distinct colors are placed in free cells.

mod dataset;
mod episode;
mod render;

pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, DATA_MAGIC, DATA_VERSION};
pub use episode::{sample_episode, Episode, EpisodeConfig, EpisodeSource, Observation, Trajectory};
pub use render::{render, ImageSpec, RenderedImage};

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{EnvironmentExtent, Egomotion, PlanarPose};
use crate::rng;

const MAX_ATTEMPTS: u64 = 64;
const MAZE_WALL_PROB: f64 = 0.3;
/// Minimum clearance of a pose from walls and landmarks, meters.
pub const POSE_CLEARANCE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Rooms,
    Mazes,
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Rooms => "rooms",
            Style::Mazes => "mazes",
        })
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rooms" => Ok(Style::Rooms),
            "mazes" => Ok(Style::Mazes),
            other => Err(Error::Config(format!("unknown style `{other}` (rooms|mazes)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub wall: bool,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    pub grid_cells: usize,
    pub landmarks: usize,
    pub extent: EnvironmentExtent,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { grid_cells: 8, landmarks: 5, extent: EnvironmentExtent::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub seed: u64,
    pub style: Style,
    pub extent: EnvironmentExtent,
    /// Grid side length in cells.
    pub n: usize,
    /// Row-major, `cells[row * n + col]`; column runs along +x, row along +y.
    pub cells: Vec<Cell>,
    pub landmarks: Vec<Landmark>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, saturated: bool) -> [f64; 3] {
    // hue wheel with random saturation/value
    let h: f64 = rng.random_range(0.0..6.0);
    let s: f64 = if saturated { rng.random_range(0.8..1.0) } else { rng.random_range(0.3..0.9) };
    let v: f64 = if saturated { rng.random_range(0.85..1.0) } else { rng.random_range(0.35..0.9) };
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Generates a world. Deterministic in `(seed, style, config)`.
pub fn generate(seed: u64, style: Style, config: &WorldConfig) -> Result<Environment> {
    let n = config.grid_cells;
    if n < 3 {
        return Err(Error::Config(format!("grid_cells must be at least 3, got {n}")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::stream(rng::derive_seed(seed, &[attempt]), rng::ENVIRONMENT);
        let mut cells = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let border = row == 0 || col == 0 || row == n - 1 || col == n - 1;
                let wall = border || (style == Style::Mazes && r.random_bool(MAZE_WALL_PROB));
                cells.push(Cell { wall, color: random_color(&mut r, false) });
            }
        }
        let mut env = Environment { seed, style, extent: config.extent, n, cells, landmarks: Vec::new() };
        if env.free_fraction() < 0.3 || !env.free_cells_connected() {
            continue;
        }
        if env.place_landmarks(config.landmarks, &mut r) {
            return Ok(env);
        }
    }
    Err(Error::Generation(format!("no valid {style} world for seed {seed} after {MAX_ATTEMPTS} attempts")))
}

impl Environment {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent.half_width / self.n as f64
    }

    pub fn cell(&self, col: usize, row: usize) -> &Cell {
        &self.cells[row * self.n + col]
    }

    pub fn is_wall(&self, col: usize, row: usize) -> bool {
        self.cell(col, row).wall
    }

    /// Grid cell containing a world point, `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cs = self.cell_size();
        let fx = (x + self.extent.half_width) / cs;
        let fy = (y + self.extent.half_width) / cs;
        if fx < 0.0 || fy < 0.0 || fx >= self.n as f64 || fy >= self.n as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        let cs = self.cell_size();
        (-self.extent.half_width + (col as f64 + 0.5) * cs, -self.extent.half_width + (row as f64 + 0.5) * cs)
    }

    pub fn free_fraction(&self) -> f64 {
        self.cells.iter().filter(|c| !c.wall).count() as f64 / self.cells.len() as f64
    }

    pub fn free_cell_list(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|row| (0..self.n).map(move |col| (col, row)))
            .filter(|&(c, r)| !self.is_wall(c, r))
            .collect()
    }

    /// 4-connectivity of all free cells (breadth-first flood fill).
    pub fn free_cells_connected(&self) -> bool {
        let free = self.free_cell_list();
        let Some(&start) = free.first() else { return false };
        let mut seen = vec![false; self.n * self.n];
        let mut queue = VecDeque::from([start]);
        seen[start.1 * self.n + start.0] = true;
        let mut count = 1;
        while let Some((c, r)) = queue.pop_front() {
            let neighbours = [(c.wrapping_sub(1), r), (c + 1, r), (c, r.wrapping_sub(1)), (c, r + 1)];
            for (nc, nr) in neighbours {
                if nc < self.n && nr < self.n && !self.is_wall(nc, nr) && !seen[nr * self.n + nc] {
                    seen[nr * self.n + nc] = true;
                    count += 1;
                    queue.push_back((nc, nr));
                }
            }
        }
        count == free.len()
    }

    fn place_landmarks<R: Rng + ?Sized>(&mut self, count: usize, r: &mut R) -> bool {
        let free = self.free_cell_list();
        let cs = self.cell_size();
        let radius = 0.1 * cs;
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..100 {
                let (col, row) = free[r.random_range(0..free.len())];
                let (cx, cy) = self.cell_center(col, row);
                let x = cx + r.random_range(-0.25..0.25) * cs;
                let y = cy + r.random_range(-0.25..0.25) * cs;
                let apart = self.landmarks.iter().all(|l| (l.x - x).hypot(l.y - y) > 4.0 * radius);
                if apart {
                    self.landmarks.push(Landmark { x, y, radius, color: random_color(r, true) });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return false;
            }
        }
        true
    }

    /// Distance from a point to the nearest wall cell (0 inside a wall or outside the grid).
    pub fn wall_clearance(&self, x: f64, y: f64) -> f64 {
        let Some((col, row)) = self.cell_of(x, y) else { return 0.0 };
        if self.is_wall(col, row) {
            return 0.0;
        }
        let cs = self.cell_size();
        let hw = self.extent.half_width;
        let mut best = f64::INFINITY;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (c, r) = (col as i64 + dc, row as i64 + dr);
                if c < 0 || r < 0 || c >= self.n as i64 || r >= self.n as i64 || !self.is_wall(c as usize, r as usize) {
                    continue;
                }
                let (x0, y0) = (-hw + c as f64 * cs, -hw + r as f64 * cs);
                let dx = (x0 - x).max(0.0).max(x - (x0 + cs));
                let dy = (y0 - y).max(0.0).max(y - (y0 + cs));
                best = best.min(dx.hypot(dy));
            }
        }
        best
    }

    /// A pose location is free when it clears walls and landmarks by [`POSE_CLEARANCE`].
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        self.wall_clearance(x, y) >= POSE_CLEARANCE
            && self.landmarks.iter().all(|l| (l.x - x).hypot(l.y - y) >= l.radius + POSE_CLEARANCE)
    }

    /// Straight-line motion stays in free space (sampled every 5 cm).
    pub fn segment_is_free(&self, a: &PlanarPose, b: &PlanarPose) -> bool {
        let d = a.distance_xy(b);
        let steps = (d / 0.05).ceil().max(1.0) as usize;
        (0..=steps).all(|i| {
            let t = i as f64 / steps as f64;
            self.is_free(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
        })
    }

    pub fn sample_free_pose<R: Rng + ?Sized>(&self, r: &mut R) -> Result<PlanarPose> {
        let hw = self.extent.half_width;
        for _ in 0..10_000 {
            let x = r.random_range(-hw..hw);
            let y = r.random_range(-hw..hw);
            let yaw = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            if self.is_free(x, y) {
                return Ok(PlanarPose::new(x, y, yaw));
            }
        }
        Err(Error::Generation(format!("could not sample a free pose in world {}", self.seed)))
    }

    /// Random-walk step of at most `max_step` meters that keeps the straight path free.
    pub(crate) fn sample_step<R: Rng + ?Sized>(&self, from: &PlanarPose, max_step: f64, r: &mut R) -> Option<(Egomotion, PlanarPose)> {
        for _ in 0..200 {
            let dist = max_step * r.random::<f64>().sqrt();
            let heading: f64 = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let m = Egomotion {
                dx: dist * heading.cos(),
                dy: dist * heading.sin(),
                dyaw: r.random_range(-std::f64::consts::FRAC_PI_3..std::f64::consts::FRAC_PI_3),
            };
            let next = from.compose(&m);
            if self.is_free(next.x, next.y) && self.segment_is_free(from, &next) {
                return Some((m, next));
            }
        }
        None
    }
}
