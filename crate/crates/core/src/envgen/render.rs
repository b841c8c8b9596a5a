use std::f64::consts::PI;

use super::Environment;
use crate::error::{Error, Result};
use crate::geometry::PlanarPose;
use crate::tensor::Tensor;

const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const FLOOR: [f64; 3] = [0.3, 0.27, 0.22];
/// Wall height in meters; a wall this far away fills the whole column.
const WALL_SCALE: f64 = 2.0;
const FOG: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec { height: 8, width: 32 }
    }
}

/// `height × width × 3` RGB panorama with values in [0, 1]. Column `c` looks
/// along bearing `yaw + 2π·c/width` (counter-clockwise).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RenderedImage {
    pub fn spec(&self) -> ImageSpec {
        ImageSpec { height: self.height, width: self.width }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("image extents")
    }
}

struct Hit {
    distance: f64,
    color: [f64; 3],
}

/// Grid traversal (DDA) to the first wall cell along a unit direction.
fn cast_walls(env: &Environment, x: f64, y: f64, dx: f64, dy: f64) -> Option<Hit> {
    let cs = env.cell_size();
    let hw = env.extent.half_width;
    let (gx, gy) = ((x + hw) / cs, (y + hw) / cs);
    let (mut col, mut row) = (gx.floor() as i64, gy.floor() as i64);
    let step_c: i64 = if dx < 0.0 { -1 } else { 1 };
    let step_r: i64 = if dy < 0.0 { -1 } else { 1 };
    let delta_c = if dx == 0.0 { f64::INFINITY } else { (cs / dx).abs() };
    let delta_r = if dy == 0.0 { f64::INFINITY } else { (cs / dy).abs() };
    let mut t_c = if dx == 0.0 {
        f64::INFINITY
    } else if dx > 0.0 {
        ((col + 1) as f64 - gx) * delta_c
    } else {
        (gx - col as f64) * delta_c
    };
    let mut t_r = if dy == 0.0 {
        f64::INFINITY
    } else if dy > 0.0 {
        ((row + 1) as f64 - gy) * delta_r
    } else {
        (gy - row as f64) * delta_r
    };
    let n = env.n as i64;
    for _ in 0..(4 * n) {
        let (t, y_face) = if t_c < t_r {
            col += step_c;
            let t = t_c;
            t_c += delta_c;
            (t, false)
        } else {
            row += step_r;
            let t = t_r;
            t_r += delta_r;
            (t, true)
        };
        if col < 0 || row < 0 || col >= n || row >= n {
            return None;
        }
        let cell = env.cell(col as usize, row as usize);
        if cell.wall {
            let shade = if y_face { 0.8 } else { 1.0 };
            return Some(Hit { distance: t, color: cell.color.map(|c| c * shade) });
        }
    }
    None
}

/// Nearest positive intersection with any landmark cylinder; from inside a
/// cylinder the far wall is returned.
fn cast_landmarks(env: &Environment, x: f64, y: f64, dx: f64, dy: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for l in &env.landmarks {
        let (ox, oy) = (x - l.x, y - l.y);
        let b = ox * dx + oy * dy;
        let c = ox * ox + oy * oy - l.radius * l.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
        if t > 0.0 && best.as_ref().is_none_or(|h| t < h.distance) {
            best = Some(Hit { distance: t, color: l.color });
        }
    }
    best
}

/// Ray-cast panorama from `pose` (world meters). Values are rounded to f32
/// precision so stored datasets reproduce them exactly.
pub fn render(env: &Environment, pose: &PlanarPose, spec: ImageSpec) -> Result<RenderedImage> {
    if env.wall_clearance(pose.x, pose.y) <= 0.0 {
        return Err(Error::Invalid(format!("pose ({:.3}, {:.3}) is inside a wall", pose.x, pose.y)));
    }
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![0.0; h * w * 3];
    let half = h as f64 / 2.0;
    for col in 0..w {
        let bearing = pose.yaw + 2.0 * PI * col as f64 / w as f64;
        let (dy, dx) = bearing.sin_cos();
        let wall = cast_walls(env, pose.x, pose.y, dx, dy);
        let mark = cast_landmarks(env, pose.x, pose.y, dx, dy);
        let hit = match (wall, mark) {
            (Some(a), Some(b)) => Some(if b.distance < a.distance { b } else { a }),
            (a, b) => a.or(b),
        };
        let (height, color) = match hit {
            Some(hit) => {
                let fog = 1.0 / (1.0 + FOG * hit.distance);
                let rows = (h as f64 * WALL_SCALE / hit.distance.max(1e-9)).min(h as f64);
                (rows, hit.color.map(|c| c * fog))
            }
            None => (0.0, [0.0; 3]),
        };
        let (top, bottom) = (half - height / 2.0, half + height / 2.0);
        for row in 0..h {
            let (r0, r1) = (row as f64, row as f64 + 1.0);
            let cover = (r1.min(bottom) - r0.max(top)).clamp(0.0, 1.0);
            let bg = if (row as f64 + 0.5) < half { SKY } else { FLOOR };
            let o = (row * w + col) * 3;
            for ch in 0..3 {
                let v = (cover * color[ch] + (1.0 - cover) * bg[ch]).clamp(0.0, 1.0);
                data[o + ch] = v as f32 as f64;
            }
        }
    }
    Ok(RenderedImage { height: h, width: w, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{generate, Landmark, Style, WorldConfig};

    fn room() -> Environment {
        generate(11, Style::Rooms, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn enclosing_cylinder_gives_identical_columns() {
        let mut env = room();
        env.landmarks = vec![Landmark { x: 0.3, y: -0.2, radius: 3.0, color: [0.2, 0.6, 0.4] }];
        let img = render(&env, &PlanarPose::new(0.3, -0.2, 0.4), ImageSpec::default()).unwrap();
        for col in 1..img.width {
            for row in 0..img.height {
                assert_eq!(img.pixel(row, col), img.pixel(row, 0));
            }
        }
    }

    #[test]
    fn full_turn_renders_the_same() {
        let env = room();
        let p = env.sample_free_pose(&mut crate::rng::stream(1, 0)).unwrap();
        let a = render(&env, &p, ImageSpec::default()).unwrap();
        let b = render(&env, &PlanarPose { yaw: p.yaw + 2.0 * PI, ..p }, ImageSpec::default()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bounded_and_rejects_walls() {
        let env = generate(5, Style::Mazes, &WorldConfig::default()).unwrap();
        let mut r = crate::rng::stream(2, 0);
        for _ in 0..20 {
            let p = env.sample_free_pose(&mut r).unwrap();
            let img = render(&env, &p, ImageSpec::default()).unwrap();
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(render(&env, &PlanarPose::new(-19.0, -19.0, 0.0), ImageSpec::default()).is_err());
    }
}
