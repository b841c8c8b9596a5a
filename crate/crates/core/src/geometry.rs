//! Planar pose algebra: encodings, egocentric frames and the particle transition geometry.

use std::f64::consts::PI;

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = PI - (PI - a).rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Position and heading in the plane. `yaw` is kept in (−π, π].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Relative motion expressed in the previous pose's local frame
/// (forward `dx`, left `dy`, turn `dyaw`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Egomotion {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

/// Square world `[-half_width, half_width]²`, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvironmentExtent {
    pub half_width: f64,
}

impl Default for EnvironmentExtent {
    fn default() -> Self {
        EnvironmentExtent { half_width: 20.0 }
    }
}

impl EnvironmentExtent {
    pub fn new(half_width: f64) -> Option<Self> {
        (half_width > 0.0 && half_width.is_finite()).then_some(EnvironmentExtent { half_width })
    }
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        PlanarPose { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn origin() -> Self {
        PlanarPose { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// `(x, y, sin yaw, cos yaw)`.
    pub fn encode4(&self) -> [f64; 4] {
        let (s, c) = self.yaw.sin_cos();
        [self.x, self.y, s, c]
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.yaw]
    }

    /// This pose expressed in `origin`'s frame.
    pub fn egocentric(&self, origin: &PlanarPose) -> PlanarPose {
        let (s, c) = origin.yaw.sin_cos();
        let (dx, dy) = (self.x - origin.x, self.y - origin.y);
        PlanarPose {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            yaw: wrap_angle(self.yaw - origin.yaw),
        }
    }

    /// Applies a local-frame motion.
    pub fn compose(&self, motion: &Egomotion) -> PlanarPose {
        let (s, c) = self.yaw.sin_cos();
        PlanarPose {
            x: self.x + c * motion.dx - s * motion.dy,
            y: self.y + s * motion.dx + c * motion.dy,
            yaw: wrap_angle(self.yaw + motion.dyaw),
        }
    }

    /// Places a pose given relative to this one (`other` in this frame) back in the world.
    pub fn compose_pose(&self, other: &PlanarPose) -> PlanarPose {
        self.compose(&Egomotion { dx: other.x, dy: other.y, dyaw: other.yaw })
    }

    /// The motion that takes `self` to `target`.
    pub fn motion_to(&self, target: &PlanarPose) -> Egomotion {
        let rel = target.egocentric(self);
        Egomotion { dx: rel.x, dy: rel.y, dyaw: rel.yaw }
    }

    pub fn normalize(&self, extent: &EnvironmentExtent) -> PlanarPose {
        PlanarPose { x: self.x / extent.half_width, y: self.y / extent.half_width, yaw: self.yaw }
    }

    pub fn denormalize(&self, extent: &EnvironmentExtent) -> PlanarPose {
        PlanarPose { x: self.x * extent.half_width, y: self.y * extent.half_width, yaw: self.yaw }
    }

    pub fn distance_xy(&self, other: &PlanarPose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl Egomotion {
    pub fn zero() -> Self {
        Egomotion { dx: 0.0, dy: 0.0, dyaw: 0.0 }
    }

    /// Motion that undoes `self`: `p.compose(m).compose(m.inverse()) == p`.
    pub fn inverse(&self) -> Egomotion {
        let (s, c) = self.dyaw.sin_cos();
        Egomotion {
            dx: -(c * self.dx + s * self.dy),
            dy: -(-s * self.dx + c * self.dy),
            dyaw: -self.dyaw,
        }
    }

    /// Translation rescaled into model units; the turn is unchanged.
    pub fn normalize(&self, extent: &EnvironmentExtent) -> Egomotion {
        Egomotion { dx: self.dx / extent.half_width, dy: self.dy / extent.half_width, dyaw: self.dyaw }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dyaw]
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dyaw.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &PlanarPose, b: &PlanarPose, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && wrap_angle(a.yaw - b.yaw).abs() < tol
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(2.0 * PI - 0.1) + 0.1).abs() < 1e-12);
        assert!(wrap_angle(-1e-18) <= PI && wrap_angle(-1e-18) > -PI);
    }

    #[test]
    fn encode4_examples() {
        assert_eq!(PlanarPose::new(0.0, 0.0, 0.0).encode4(), [0.0, 0.0, 0.0, 1.0]);
        let e = PlanarPose::new(1.0, 2.0, FRAC_PI_2).encode4();
        assert_eq!(&e[..2], &[1.0, 2.0]);
        assert!((e[2] - 1.0).abs() < 1e-15 && e[3].abs() < 1e-15);
        let e = PlanarPose::new(-3.0, 4.0, PI).encode4();
        assert!(e[2].abs() < 1e-15 && (e[3] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn egocentric_examples() {
        let s = PlanarPose::new(1.5, -2.0, 0.7);
        let r = s.egocentric(&s);
        assert_eq!((r.x, r.y, r.yaw), (0.0, 0.0, 0.0));

        let r = PlanarPose::new(1.0, 0.0, 0.0).egocentric(&PlanarPose::new(0.0, 0.0, FRAC_PI_2));
        assert!(close(&r, &PlanarPose { x: 0.0, y: -1.0, yaw: -FRAC_PI_2 }, 1e-15));
    }

    #[test]
    fn compose_examples() {
        let p = PlanarPose::new(1.0, 1.0, FRAC_PI_2).compose(&Egomotion { dx: 1.0, dy: 0.0, dyaw: 0.0 });
        assert!(close(&p, &PlanarPose::new(1.0, 2.0, FRAC_PI_2), 1e-15));
        let b = PlanarPose::new(-4.0, 3.0, -2.5);
        assert_eq!(b.compose(&Egomotion::zero()), b);
    }

    #[test]
    fn normalize_examples() {
        let e = EnvironmentExtent::default();
        let p = PlanarPose::new(20.0, -20.0, 0.3).normalize(&e);
        assert_eq!((p.x, p.y, p.yaw), (1.0, -1.0, 0.3));
        let o = PlanarPose::new(0.0, 0.0, -1.1);
        assert_eq!(o.normalize(&e), o);
        assert!(EnvironmentExtent::new(0.0).is_none());
    }

    fn pose() -> impl Strategy<Value = PlanarPose> {
        (-30.0..30.0f64, -30.0..30.0f64, -10.0..10.0f64).prop_map(|(x, y, a)| PlanarPose::new(x, y, a))
    }

    fn motion() -> impl Strategy<Value = Egomotion> {
        (-5.0..5.0f64, -5.0..5.0f64, -4.0..4.0f64).prop_map(|(dx, dy, dyaw)| Egomotion { dx, dy, dyaw })
    }

    proptest! {
        #[test]
        fn compose_inverts_egocentric(t in pose(), o in pose()) {
            let back = o.compose_pose(&t.egocentric(&o));
            prop_assert!(close(&back, &t, 1e-9));
        }

        #[test]
        fn egocentric_rigid_invariance(t in pose(), o in pose(), g in pose()) {
            let a = t.egocentric(&o);
            let b = g.compose_pose(&t).egocentric(&g.compose_pose(&o));
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn yaws_stay_wrapped(t in pose(), o in pose(), m in motion()) {
            for p in [t.egocentric(&o), t.compose(&m), t, o.compose_pose(&t)] {
                prop_assert!(p.yaw > -PI && p.yaw <= PI);
            }
        }

        #[test]
        fn encode4_on_unit_circle(p in pose()) {
            let e = p.encode4();
            prop_assert!((e[2] * e[2] + e[3] * e[3] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalize_round_trip(p in pose(), hw in 0.5..100.0f64) {
            let e = EnvironmentExtent::new(hw).unwrap();
            let back = p.normalize(&e).denormalize(&e);
            prop_assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12 && back.yaw == p.yaw);
        }

        #[test]
        fn inverse_chain_returns_home(start in pose(), ms in proptest::collection::vec(motion(), 50)) {
            let mut p = start;
            for m in &ms {
                p = p.compose(m);
            }
            for m in ms.iter().rev() {
                p = p.compose(&m.inverse());
            }
            prop_assert!(close(&p, &start, 1e-9));
        }
    }
}
