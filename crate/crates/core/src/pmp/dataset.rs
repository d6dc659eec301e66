use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extremal::{integrate_extremal_backward_with, Extremal, ExtremalOptions};
use super::terminal::{solve_terminal_conditions, TerminalOptions};
use super::PmpError;
use crate::dynamics::{ControlAffine, StateBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleSource {
    Interior,
    PmpBoundary,
    UniformBoundary,
    /// Uniform in the shell `|h(x)| ≤ noise` around the boundary.
    BoundaryPerturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: Vec<f64>,
    pub tau: f64,
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub entries: Vec<Sample>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn count(&self, source: SampleSource) -> usize {
        self.entries.iter().filter(|s| s.source == source).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRatios {
    pub interior: f64,
    pub pmp: f64,
    pub uniform: f64,
    pub perturbed: f64,
}

impl MixRatios {
    pub fn pmp_augmented() -> Self {
        Self {
            interior: 0.4,
            pmp: 0.6,
            uniform: 0.0,
            perturbed: 0.0,
        }
    }

    pub fn uniform_only() -> Self {
        Self {
            interior: 0.4,
            pmp: 0.0,
            uniform: 0.6,
            perturbed: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PmpError> {
        let parts = [self.interior, self.pmp, self.uniform, self.perturbed];
        if parts.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(PmpError::Config("mix ratios must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PmpError::Config(format!("mix ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Entry counts `[interior, pmp, uniform, perturbed]`; boundary counts
    /// are floored and the remainder goes to the interior.
    pub fn counts(&self, total: usize) -> [usize; 4] {
        let floor = |r: f64| ((total as f64) * r + 1e-9).floor() as usize;
        let pmp = floor(self.pmp);
        let uniform = floor(self.uniform);
        let perturbed = floor(self.perturbed);
        [
            total.saturating_sub(pmp + uniform + perturbed),
            pmp,
            uniform,
            perturbed,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmpSamplingOptions {
    pub terminal: TerminalOptions,
    pub extremal: ExtremalOptions,
    /// Stop searching once this many distinct extremals exist.
    pub target_extremals: usize,
    /// Fewer than this after `max_attempts` terminal solves is an error.
    pub min_extremals: usize,
    pub max_attempts: usize,
    /// Roots closer than this are duplicates; 0 keeps every converged solve.
    pub dedupe_tol: f64,
    pub stamp: PmpStamp,
}

/// Time-to-go attached to a state taken from an extremal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmpStamp {
    /// The node's own time-to-go: the state reaches the boundary exactly then.
    Node,
    /// Uniform between the node's time-to-go and the window end. A state
    /// that barely stays safe for `s` seconds and can then keep riding the
    /// boundary is on the tube boundary for every longer horizon too.
    NodeOrLater,
}

impl Default for PmpSamplingOptions {
    fn default() -> Self {
        Self {
            terminal: TerminalOptions::default(),
            extremal: ExtremalOptions::default(),
            target_extremals: 16,
            min_extremals: 1,
            max_attempts: 200,
            dedupe_tol: 1e-6,
            stamp: PmpStamp::NodeOrLater,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub mix: MixRatios,
    /// Half-width of the uniform perturbation of boundary samples, in units
    /// of the constrained coordinate.
    pub noise: f64,
    pub horizon: f64,
    /// Time-to-go range for samples that do not carry their own.
    pub tau_window: (f64, f64),
    /// Box for interior samples; the system's sampling region if `None`.
    pub interior_region: Option<StateBox>,
    pub seed: u64,
    pub pmp: PmpSamplingOptions,
}

impl DatasetConfig {
    pub fn new(count: usize, mix: MixRatios, horizon: f64, seed: u64) -> Self {
        Self {
            count,
            mix,
            noise: 0.1,
            horizon,
            tau_window: (0.0, horizon),
            interior_region: None,
            seed,
            pmp: PmpSamplingOptions::default(),
        }
    }

    fn validate(&self, system: &dyn ControlAffine) -> Result<(), PmpError> {
        self.mix.validate()?;
        if self.count == 0 {
            return Err(PmpError::Config("sample count must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.horizon >= 0.0) {
            return Err(PmpError::Config("noise and horizon must be >= 0".into()));
        }
        let (lo, hi) = self.tau_window;
        if !(0.0 <= lo && lo <= hi && hi <= self.horizon + 1e-12) {
            return Err(PmpError::Config(format!(
                "tau window ({lo}, {hi}) outside [0, {}]",
                self.horizon
            )));
        }
        if (self.mix.uniform > 0.0 || self.mix.perturbed > 0.0)
            && system.safety_corridor().is_none()
        {
            return Err(PmpError::Config(
                "uniform boundary sampling needs an analytic corridor constraint".into(),
            ));
        }
        Ok(())
    }
}

/// Solve for touch points from random starts and integrate an extremal
/// from each distinct one.
pub fn boundary_extremals<R: Rng + ?Sized>(
    system: &dyn ControlAffine,
    opts: &PmpSamplingOptions,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<Extremal>, PmpError> {
    let region = system.sampling_region().clone();
    let mut roots: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..opts.max_attempts {
        if out.len() >= opts.target_extremals {
            break;
        }
        let x0 = region.sample(rng);
        let report = match solve_terminal_conditions(system, &x0, &opts.terminal) {
            Ok(r) if r.converged => r,
            _ => continue,
        };
        let x_t = DVector::from_vec(report.x_t);
        if opts.dedupe_tol > 0.0 && roots.iter().any(|r| (r - &x_t).norm() < opts.dedupe_tol) {
            continue;
        }
        let p_t = DVector::from_vec(report.p_t);
        // a diverging or out-of-domain extremal is discarded like a failed solve
        if let Ok(ext) =
            integrate_extremal_backward_with(system, &x_t, &p_t, horizon, &opts.extremal)
        {
            roots.push(x_t);
            out.push(ext);
        }
    }
    if out.len() < opts.min_extremals {
        return Err(PmpError::InsufficientBoundaryPoints {
            found: out.len(),
            needed: opts.min_extremals,
        });
    }
    Ok(out)
}

/// Draw a deterministic training batch.
pub fn generate_dataset(
    system: &dyn ControlAffine,
    cfg: &DatasetConfig,
) -> Result<SampleBatch, PmpError> {
    cfg.validate(system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extremals = if cfg.mix.counts(cfg.count)[1] > 0 {
        boundary_extremals(system, &cfg.pmp, cfg.horizon, &mut rng)?
    } else {
        Vec::new()
    };
    assemble(system, cfg, &extremals, &mut rng)
}

/// Like [`generate_dataset`] but drawing PMP samples from precomputed
/// extremals.
pub fn generate_dataset_from(
    system: &dyn ControlAffine,
    cfg: &DatasetConfig,
    extremals: &[Extremal],
) -> Result<SampleBatch, PmpError> {
    cfg.validate(system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    assemble(system, cfg, extremals, &mut rng)
}

fn assemble(
    system: &dyn ControlAffine,
    cfg: &DatasetConfig,
    extremals: &[Extremal],
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch, PmpError> {
    let [n_int, n_pmp, n_uni, n_pert] = cfg.mix.counts(cfg.count);
    if n_pmp > 0 && extremals.is_empty() {
        return Err(PmpError::InsufficientBoundaryPoints {
            found: 0,
            needed: 1,
        });
    }
    let (lo, hi) = cfg.tau_window;
    let window_tau = |rng: &mut ChaCha8Rng| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let mut entries = Vec::with_capacity(cfg.count);

    let interior = cfg
        .interior_region
        .clone()
        .unwrap_or_else(|| system.sampling_region().clone());
    let cap = 1000 * n_int.max(1);
    let mut tries = 0;
    while entries.len() < n_int {
        tries += 1;
        if tries > cap {
            return Err(PmpError::Config(
                "interior region barely intersects the safe set".into(),
            ));
        }
        let x = interior.sample(rng);
        if system.constraint(&x) >= 0.0 {
            entries.push(Sample {
                state: x.as_slice().to_vec(),
                tau: window_tau(rng),
                source: SampleSource::Interior,
            });
        }
    }

    for _ in 0..n_pmp {
        let ext = &extremals[rng.random_range(0..extremals.len())];
        let in_window: Vec<usize> = (0..ext.len())
            .filter(|&k| ext.times[k] >= lo && ext.times[k] <= hi)
            .collect();
        // nodes are stored latest-last, so the touch point is the fallback
        let k = if in_window.is_empty() {
            ext.len() - 1
        } else {
            in_window[rng.random_range(0..in_window.len())]
        };
        let mut x = DVector::from_row_slice(&ext.states[k]);
        let grad = system.constraint_gradient(&x);
        let gn = grad.norm();
        if cfg.noise > 0.0 && gn > 0.0 {
            x += grad * (rng.random_range(-cfg.noise..=cfg.noise) / gn);
        }
        let s = ext.times[k];
        let tau = match cfg.pmp.stamp {
            PmpStamp::NodeOrLater if hi > s => rng.random_range(s..=hi),
            _ => s,
        };
        entries.push(Sample {
            state: x.as_slice().to_vec(),
            tau,
            source: SampleSource::PmpBoundary,
        });
    }

    if n_uni + n_pert > 0 {
        let corridor = system
            .safety_corridor()
            .ok_or_else(|| PmpError::Config("no corridor constraint".into()))?;
        let region = system.sampling_region();
        for (n, source) in [
            (n_uni, SampleSource::UniformBoundary),
            (n_pert, SampleSource::BoundaryPerturbed),
        ] {
            for _ in 0..n {
                let mut x = region.sample(rng);
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let offset = if cfg.noise > 0.0 {
                    rng.random_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                x[corridor.axis] = side * (corridor.half_width + offset);
                entries.push(Sample {
                    state: x.as_slice().to_vec(),
                    tau: window_tau(rng),
                    source,
                });
            }
        }
    }

    Ok(SampleBatch {
        entries,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{kinematic_corridor_model, CorridorModel, TrackGeometry};

    fn corridor() -> CorridorModel {
        kinematic_corridor_model(10.0, 1.0 / 12.0, &TrackGeometry::default()).unwrap()
    }

    #[test]
    fn forty_sixty_mix_is_exact() {
        let cfg = DatasetConfig::new(1000, MixRatios::pmp_augmented(), 1.0, 3);
        let batch = generate_dataset(&corridor(), &cfg).unwrap();
        assert_eq!(batch.entries.len(), 1000);
        assert_eq!(batch.count(SampleSource::Interior), 400);
        assert_eq!(batch.count(SampleSource::PmpBoundary), 600);
    }

    #[test]
    fn rounding_favours_the_interior() {
        let mix = MixRatios {
            interior: 0.35,
            pmp: 0.0,
            uniform: 0.335,
            perturbed: 0.315,
        };
        assert_eq!(mix.counts(7), [3, 0, 2, 2]);
        assert_eq!(mix.counts(1000), [350, 0, 335, 315]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DatasetConfig::new(300, MixRatios::pmp_augmented(), 1.0, 11);
        let a = generate_dataset(&corridor(), &cfg).unwrap();
        let b = generate_dataset(&corridor(), &cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_dataset(&corridor(), &DatasetConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn interior_entries_are_safe() {
        let cfg = DatasetConfig::new(500, MixRatios::uniform_only(), 1.0, 1);
        let sys = corridor();
        let batch = generate_dataset(&sys, &cfg).unwrap();
        for s in batch
            .entries
            .iter()
            .filter(|s| s.source == SampleSource::Interior)
        {
            assert!(sys.constraint(&DVector::from_row_slice(&s.state)) >= 0.0);
            assert!((0.0..=1.0).contains(&s.tau));
        }
    }

    #[test]
    fn perturbed_boundary_straddles_the_edge() {
        let sys = corridor();
        for mix in [MixRatios::pmp_augmented(), MixRatios::uniform_only()] {
            let cfg = DatasetConfig::new(2000, mix, 1.0, 5);
            let batch = generate_dataset(&sys, &cfg).unwrap();
            let boundary: Vec<_> = batch
                .entries
                .iter()
                .filter(|s| s.source != SampleSource::Interior)
                .collect();
            let unsafe_frac = boundary
                .iter()
                .filter(|s| sys.constraint(&DVector::from_row_slice(&s.state)) < 0.0)
                .count() as f64
                / boundary.len() as f64;
            assert!(unsafe_frac > 0.0 && unsafe_frac < 1.0, "{unsafe_frac}");
        }
    }

    #[test]
    fn uniform_boundary_samples_lie_within_the_noise_band() {
        let sys = corridor();
        let mix = MixRatios {
            interior: 0.0,
            pmp: 0.0,
            uniform: 0.5,
            perturbed: 0.5,
        };
        let batch = generate_dataset(&sys, &DatasetConfig::new(400, mix, 1.0, 2)).unwrap();
        for s in &batch.entries {
            assert!(sys.constraint(&DVector::from_row_slice(&s.state)).abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn corridor_has_two_distinct_touch_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ext =
            boundary_extremals(&corridor(), &PmpSamplingOptions::default(), 0.5, &mut rng).unwrap();
        assert_eq!(ext.len(), 2);
        let mut sides: Vec<f64> = ext.iter().map(|e| e.states.last().unwrap()[0]).collect();
        sides.sort_by(f64::total_cmp);
        assert!((sides[0] + 3.0).abs() < 1e-8 && (sides[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn pmp_times_respect_the_window() {
        let mut cfg = DatasetConfig::new(400, MixRatios::pmp_augmented(), 1.0, 4);
        cfg.tau_window = (0.0, 0.25);
        let batch = generate_dataset(&corridor(), &cfg).unwrap();
        assert!(batch.entries.iter().all(|s| s.tau <= 0.25 + 1e-12));
    }

    #[test]
    fn failed_solves_surface_as_insufficient_points() {
        let mut opts = PmpSamplingOptions::default();
        opts.terminal.max_iterations = 0;
        opts.max_attempts = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            boundary_extremals(&corridor(), &opts, 1.0, &mut rng),
            Err(PmpError::InsufficientBoundaryPoints {
                found: 0,
                needed: 1
            })
        ));
    }

    #[test]
    fn bad_ratios_rejected() {
        let mix = MixRatios {
            interior: 0.5,
            pmp: 0.6,
            uniform: 0.0,
            perturbed: 0.0,
        };
        let cfg = DatasetConfig::new(10, mix, 1.0, 0);
        assert!(matches!(
            generate_dataset(&corridor(), &cfg),
            Err(PmpError::Config(_))
        ));
    }
}
