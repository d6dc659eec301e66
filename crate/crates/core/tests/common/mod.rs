//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use pmpsafe::dynamics::{kinematic_corridor_model, CorridorModel, TrackGeometry};
use pmpsafe::hj_grid::{Axis, GridSpec};

pub const SPEED: f64 = 10.0;
pub const CURVATURE_BOUND: f64 = 1.0 / 12.0;
pub const HORIZON: f64 = 1.0;

pub fn corridor() -> CorridorModel {
    kinematic_corridor_model(SPEED, CURVATURE_BOUND, &TrackGeometry::default()).unwrap()
}

pub fn corridor_grid(n: usize) -> GridSpec {
    GridSpec::new(vec![
        Axis::new(-4.0, 4.0, n).unwrap(),
        Axis::new(-1.3, 1.3, n).unwrap(),
    ])
    .unwrap()
}

/// Exhaustive search over piecewise-constant curvature commands for the
/// straight corridor: `levels` evenly spaced values per interval,
/// `intervals` intervals over `horizon`. Each interval is rolled out in
/// closed form and its peak `|e|` found exactly, so the oracle shares no
/// numerics with the grid solver.
pub struct CorridorOracle {
    pub speed: f64,
    pub ubar: f64,
    pub half_width: f64,
    pub levels: usize,
    pub intervals: usize,
    pub horizon: f64,
}

impl CorridorOracle {
    pub fn new(horizon: f64) -> Self {
        Self {
            speed: SPEED,
            ubar: CURVATURE_BOUND,
            half_width: 3.0,
            levels: 9,
            intervals: 8,
            horizon,
        }
    }

    pub fn is_safe(&self, x0: &[f64]) -> bool {
        if x0[0].abs() > self.half_width {
            return false;
        }
        self.search(x0[0], x0[1], 0)
    }

    /// State after holding `u` for `t`, and the largest `|e|` on the way.
    fn roll(&self, e0: f64, phi0: f64, u: f64, t: f64) -> (f64, f64, f64) {
        let v = self.speed;
        let at = |s: f64| {
            if u == 0.0 {
                e0 + v * s * phi0.sin()
            } else {
                e0 - ((phi0 + v * u * s).cos() - phi0.cos()) / u
            }
        };
        let e1 = at(t);
        let mut peak = e0.abs().max(e1.abs());
        if u != 0.0 {
            // ė vanishes where the heading crosses a multiple of π
            for k in -1..=1 {
                let s = (k as f64 * std::f64::consts::PI - phi0) / (v * u);
                if s > 0.0 && s < t {
                    peak = peak.max(at(s).abs());
                }
            }
        }
        (e1, phi0 + v * u * t, peak)
    }

    /// True when even turning hardest away from the nearer edge cannot keep
    /// `|e|` within the corridor for the remaining time.
    fn doomed(&self, e: f64, phi: f64, remaining: f64) -> bool {
        // mirror so the threatened edge is at +half_width
        let (e, phi) = if e >= 0.0 { (e, phi) } else { (-e, -phi) };
        if phi <= 0.0 || phi > std::f64::consts::FRAC_PI_2 {
            return false;
        }
        let t = (phi / (self.speed * self.ubar)).min(remaining);
        let (_, _, peak) = self.roll(e, phi, -self.ubar, t);
        peak > self.half_width + 1e-12
    }

    fn search(&self, e: f64, phi: f64, depth: usize) -> bool {
        if depth == self.intervals {
            return true;
        }
        let dt = self.horizon / self.intervals as f64;
        if self.doomed(e, phi, self.horizon - depth as f64 * dt) {
            return false;
        }
        let toward = if e > 0.0 { -1.0 } else { 1.0 };
        let mut inputs: Vec<f64> = (0..self.levels)
            .map(|i| -self.ubar + 2.0 * self.ubar * i as f64 / (self.levels - 1) as f64)
            .collect();
        // steering against the lateral error first resolves safe states on
        // the first branch
        inputs.sort_by(|a, b| (toward * b).total_cmp(&(toward * a)));
        inputs.into_iter().any(|u| {
            let (e1, phi1, peak) = self.roll(e, phi, u, dt);
            peak <= self.half_width && self.search(e1, phi1, depth + 1)
        })
    }
}

/// Nodes whose sign agrees with every node within `band` cells (Chebyshev
/// distance) in a 2D field.
pub fn outside_band(spec: &GridSpec, field: &[f64], band: usize) -> Vec<usize> {
    let (n0, n1) = (spec.axes[0].count, spec.axes[1].count);
    let mut out = Vec::new();
    for i in 0..n0 {
        for j in 0..n1 {
            let k = i * n1 + j;
            let s = field[k] >= 0.0;
            let clean = (i.saturating_sub(band)..=(i + band).min(n0 - 1)).all(|a| {
                (j.saturating_sub(band)..=(j + band).min(n1 - 1))
                    .all(|b| (field[a * n1 + b] >= 0.0) == s)
            });
            if clean {
                out.push(k);
            }
        }
    }
    out
}

/// Minimizer of `‖u − u_d‖²` over `{aᵀu ≥ b} ∩ box` for one or two inputs by
/// dense search. With two inputs one coordinate is swept at spacing `step`
/// and the other minimized exactly over its feasible interval; both sweep
/// orders are tried. `None` when no swept point is feasible.
pub fn brute_force_filter(p: &pmpsafe::filter::FilterProblem, step: f64) -> Option<Vec<f64>> {
    let m = p.u_d.len();
    assert!(m == 1 || m == 2, "brute force handles one or two inputs");
    let cost = |u: &[f64]| -> f64 { u.iter().zip(&p.u_d).map(|(a, b)| (a - b).powi(2)).sum() };
    let feasible = |u: &[f64]| u.iter().zip(&p.a).map(|(x, y)| x * y).sum::<f64>() >= p.b;
    let sweep = |i: usize| -> Vec<f64> {
        let n = ((p.upper[i] - p.lower[i]) / step).ceil() as usize;
        (0..=n)
            .map(|k| (p.lower[i] + k as f64 * step).min(p.upper[i]))
            .collect()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut offer = |u: Vec<f64>| {
        if feasible(&u) {
            let c = cost(&u);
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, u));
            }
        }
    };
    if m == 1 {
        for v in sweep(0) {
            offer(vec![v]);
        }
    } else {
        for (i, j) in [(0usize, 1usize), (1, 0)] {
            for v in sweep(i) {
                // feasible interval of the other input given u_i = v
                let rest = p.b - p.a[i] * v;
                let (mut lo, mut hi) = (p.lower[j], p.upper[j]);
                if p.a[j] > 0.0 {
                    lo = lo.max(rest / p.a[j]);
                } else if p.a[j] < 0.0 {
                    hi = hi.min(rest / p.a[j]);
                } else if rest > 0.0 {
                    continue;
                }
                if lo > hi {
                    continue;
                }
                let mut u = vec![0.0; 2];
                u[i] = v;
                u[j] = p.u_d[j].clamp(lo, hi);
                // rounding in the interval bound may leave u a hair short
                if !feasible(&u) {
                    u[j] = if p.a[j] > 0.0 {
                        lo.next_up()
                    } else {
                        hi.next_down()
                    };
                }
                offer(u);
            }
        }
    }
    best.map(|(_, u)| u)
}
