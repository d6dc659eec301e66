use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::DynamicsError;

/// Oval track: two straights joined by two left-hand semicircular turns.
///
/// Path progress `s` starts at the beginning of the first straight, which
/// runs along +X from the origin. Lateral error `e` is positive to the left
/// of the centerline (towards the turn centers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackGeometry {
    pub straight_length: f64,
    pub turn_radius: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalPose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Straight1,
    Turn1,
    Straight2,
    Turn2,
}

impl Default for TrackGeometry {
    fn default() -> Self {
        Self {
            straight_length: 20.0,
            turn_radius: 12.0,
            half_width: 3.0,
        }
    }
}

impl TrackGeometry {
    pub fn new(
        straight_length: f64,
        turn_radius: f64,
        half_width: f64,
    ) -> Result<Self, DynamicsError> {
        let t = Self {
            straight_length,
            turn_radius,
            half_width,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.straight_length) && ok(self.turn_radius) && ok(self.half_width)) {
            return Err(DynamicsError::InvalidParameter(
                "track lengths must be finite and positive".into(),
            ));
        }
        if self.half_width >= self.turn_radius {
            return Err(DynamicsError::InvalidParameter(
                "track half width must be smaller than the turn radius".into(),
            ));
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        2.0 * self.straight_length + 2.0 * PI * self.turn_radius
    }

    pub fn wrap(&self, s: f64) -> f64 {
        s.rem_euclid(self.total_length())
    }

    fn locate(&self, s: f64) -> (Segment, f64) {
        let s = self.wrap(s);
        let l = self.straight_length;
        let arc = PI * self.turn_radius;
        if s < l {
            (Segment::Straight1, s)
        } else if s < l + arc {
            (Segment::Turn1, s - l)
        } else if s < 2.0 * l + arc {
            (Segment::Straight2, s - l - arc)
        } else {
            (Segment::Turn2, s - 2.0 * l - arc)
        }
    }

    /// Reference curvature at progress `s` (1/m).
    pub fn kappa_ref(&self, s: f64) -> f64 {
        match self.locate(s).0 {
            Segment::Straight1 | Segment::Straight2 => 0.0,
            Segment::Turn1 | Segment::Turn2 => 1.0 / self.turn_radius,
        }
    }

    /// Progress at which the first turn begins.
    pub fn first_turn_entry(&self) -> f64 {
        self.straight_length
    }

    /// Centerline pose at `s`.
    pub fn centerline(&self, s: f64) -> GlobalPose {
        let (seg, local) = self.locate(s);
        let l = self.straight_length;
        let r = self.turn_radius;
        match seg {
            Segment::Straight1 => GlobalPose {
                x: local,
                y: 0.0,
                psi: 0.0,
            },
            Segment::Turn1 => {
                let th = local / r;
                GlobalPose {
                    x: l + r * th.sin(),
                    y: r - r * th.cos(),
                    psi: th,
                }
            }
            Segment::Straight2 => GlobalPose {
                x: l - local,
                y: 2.0 * r,
                psi: PI,
            },
            Segment::Turn2 => {
                let th = local / r;
                GlobalPose {
                    x: -r * th.sin(),
                    y: r + r * th.cos(),
                    psi: PI + th,
                }
            }
        }
    }
}

/// Global pose of a point offset `e` from the centerline at progress `s`,
/// with heading `heading_err` relative to the path tangent.
pub fn frenet_to_global(track: &TrackGeometry, s: f64, e: f64, heading_err: f64) -> GlobalPose {
    let c = track.centerline(s);
    GlobalPose {
        x: c.x - e * c.psi.sin(),
        y: c.y + e * c.psi.cos(),
        psi: wrap_angle(c.psi + heading_err),
    }
}

/// Inverse of [`frenet_to_global`]: returns `(s, e, heading_err)` using the
/// nearest segment. Ambiguous only near the turn centers.
pub fn global_to_frenet(track: &TrackGeometry, pose: &GlobalPose) -> (f64, f64, f64) {
    let l = track.straight_length;
    let r = track.turn_radius;
    let arc = PI * r;
    let mut best: Option<(f64, f64, f64)> = None;
    let mut consider = |s: f64, e: f64, psi_c: f64| {
        if best.is_none_or(|b| e.abs() < b.1.abs()) {
            best = Some((track.wrap(s), e, wrap_angle(pose.psi - psi_c)));
        }
    };
    // straight 1: y = 0, x in [0, l)
    if pose.x >= 0.0 && pose.x < l {
        consider(pose.x, pose.y, 0.0);
    }
    // straight 2: y = 2r, heading -X, x in (0, l]
    if pose.x > 0.0 && pose.x <= l {
        consider(l + arc + (l - pose.x), 2.0 * r - pose.y, PI);
    }
    // turn 1: center (l, r), x >= l
    if pose.x >= l {
        let (dx, dy) = (pose.x - l, pose.y - r);
        let th = dx.atan2(-dy);
        let th = if th < 0.0 { th + 2.0 * PI } else { th };
        if th <= PI {
            consider(l + r * th, r - (dx * dx + dy * dy).sqrt(), th);
        }
    }
    // turn 2: center (0, r), x <= 0
    if pose.x <= 0.0 {
        let (dx, dy) = (pose.x, pose.y - r);
        let th = (-dx).atan2(dy);
        let th = if th < 0.0 { th + 2.0 * PI } else { th };
        if th <= PI {
            consider(
                2.0 * l + arc + r * th,
                r - (dx * dx + dy * dy).sqrt(),
                PI + th,
            );
        }
    }
    best.unwrap_or((0.0, pose.y, pose.psi))
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn total_length_and_curvature() {
        let t = TrackGeometry::default();
        assert!((t.total_length() - (40.0 + 24.0 * PI)).abs() < 1e-12);
        assert_eq!(t.kappa_ref(5.0), 0.0);
        assert_eq!(t.kappa_ref(25.0), 1.0 / 12.0);
        assert_eq!(t.kappa_ref(25.0 + t.total_length()), 1.0 / 12.0);
        assert_eq!(t.kappa_ref(-1.0), 1.0 / 12.0);
    }

    #[test]
    fn start_pose_and_lateral_offset() {
        let t = TrackGeometry::default();
        let p = frenet_to_global(&t, 0.0, 0.0, 0.0);
        assert_eq!((p.x, p.y, p.psi), (0.0, 0.0, 0.0));
        let p = frenet_to_global(&t, 0.0, 3.0, 0.0);
        assert!((p.x).abs() < 1e-15 && (p.y - 3.0).abs() < 1e-15);
    }

    #[test]
    fn centerline_is_continuous() {
        let t = TrackGeometry::default();
        let n = 5000;
        let ds = t.total_length() / n as f64;
        for i in 0..=n {
            let a = t.centerline(i as f64 * ds);
            let b = t.centerline(i as f64 * ds + ds);
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            assert!(d <= ds + 1e-9, "gap {d} at {i}");
        }
    }

    #[test]
    fn frenet_roundtrip() {
        let t = TrackGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let s = rng.random_range(0.0..t.total_length());
            let e = rng.random_range(-3.0..3.0);
            let h = rng.random_range(-1.0..1.0);
            let p = frenet_to_global(&t, s, e, h);
            let (s2, e2, h2) = global_to_frenet(&t, &p);
            let q = frenet_to_global(&t, s2, e2, h2);
            let err = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
            assert!(err <= 1e-9, "pose error {err}");
            let ds = (s2 - s).abs().min(t.total_length() - (s2 - s).abs());
            assert!(
                ds <= 1e-9 && (e2 - e).abs() <= 1e-9,
                "s {s} vs {s2}, e {e} vs {e2}"
            );
            assert!((wrap_angle(h2 - h)).abs() <= 1e-9);
        }
    }
}
