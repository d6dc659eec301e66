//! Closed-loop failure rates, safe-set IOU against the grid solution, and
//! multi-seed strategy comparisons.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{integrate_hold, ControlAffine, ControlSet, DynamicsError, StateBox};
use crate::filter::{filter_step, FilterError, FilterOptions};
use crate::hj_grid::GridValueFunction;
use crate::value_net::{train, NetError, SamplingStrategy, TrainConfig};
use crate::value_source::{ValueError, ValueSource};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no start with V >= {margin} found in {attempts} draws")]
    DegenerateSafeSet { attempts: usize, margin: f64 },
    #[error("both safe sets are empty; IOU is undefined")]
    EmptyUnion,
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Driver model producing the desired input each tick.
pub trait NominalPolicy: Send {
    /// Start a new rollout; policies with randomness reseed here.
    fn reset(&mut self, seed: u64);
    fn command(&mut self, t: f64, x: &[f64]) -> Vec<f64>;
}

/// Steers hard toward a target lateral offset that jumps to a new random
/// value every `switch_period` seconds, with every other input channel
/// held at its upper bound (full throttle).
#[derive(Debug, Clone)]
pub struct AggressiveRacer {
    pub lateral_axis: usize,
    pub heading_axis: usize,
    pub steer_channel: usize,
    pub k_lateral: f64,
    pub k_heading: f64,
    /// Targets are uniform in `±target_spread`.
    pub target_spread: f64,
    pub switch_period: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    target: f64,
    next_switch: f64,
    rng: ChaCha8Rng,
}

impl AggressiveRacer {
    pub fn new(
        set: &ControlSet,
        lateral_axis: usize,
        heading_axis: usize,
    ) -> Result<Self, EvalError> {
        let ControlSet::Box {
            center,
            half_widths,
        } = set
        else {
            return Err(EvalError::Config(
                "nominal policy needs a box input set".into(),
            ));
        };
        Ok(Self {
            lateral_axis,
            heading_axis,
            steer_channel: 0,
            k_lateral: 0.1,
            k_heading: 0.5,
            target_spread: 4.5,
            switch_period: 0.5,
            lower: center.iter().zip(half_widths).map(|(c, h)| c - h).collect(),
            upper: center.iter().zip(half_widths).map(|(c, h)| c + h).collect(),
            target: 0.0,
            next_switch: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// The corridor model's layout: `[e, Δφ]`, one curvature input.
    pub fn for_corridor(system: &dyn ControlAffine) -> Result<Self, EvalError> {
        Self::new(system.control_set(), 0, 1)
    }
}

impl NominalPolicy for AggressiveRacer {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.next_switch = 0.0;
    }

    fn command(&mut self, t: f64, x: &[f64]) -> Vec<f64> {
        if t >= self.next_switch {
            self.target = self
                .rng
                .random_range(-self.target_spread..=self.target_spread);
            self.next_switch = t + self.switch_period;
        }
        let mut u = self.upper.clone();
        let j = self.steer_channel;
        let steer = self.k_lateral * (self.target - x[self.lateral_axis])
            - self.k_heading * x[self.heading_axis];
        u[j] = steer.clamp(self.lower[j], self.upper[j]);
        u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutOptions {
    pub n_rollouts: usize,
    pub horizon: f64,
    pub tick: f64,
    pub substeps: usize,
    /// Time-to-go queried by the filter; the source's horizon if `None`.
    pub query_tau: Option<f64>,
    /// Starts need `V(x, query_tau) >= start_margin`.
    pub start_margin: f64,
    pub filter: FilterOptions,
    pub filter_enabled: bool,
    /// Draws per requested rollout before giving up on finding starts.
    pub max_draws_per_start: usize,
    pub seed: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            n_rollouts: 500,
            horizon: 1.0,
            tick: 0.01,
            substeps: 4,
            query_tau: None,
            start_margin: 0.0,
            filter: FilterOptions::default(),
            filter_enabled: true,
            max_draws_per_start: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub rate: f64,
    pub failures: usize,
    pub rollouts: usize,
    pub starts: Vec<Vec<f64>>,
    /// Per rollout: whether `h < 0` was seen.
    pub failed: Vec<bool>,
    /// Rollouts whose state left the value source's domain; the filter
    /// passes the request through from then on.
    pub left_domain: usize,
    pub interventions: usize,
    pub filter_times: Vec<f64>,
}

/// Uniform draws from the sampling box with `V(x, tau) >= margin`.
pub fn sample_safe_starts(
    source: &dyn ValueSource,
    system: &dyn ControlAffine,
    count: usize,
    tau: f64,
    margin: f64,
    max_draws_per_start: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let region = system.sampling_region();
    let cap = max_draws_per_start.saturating_mul(count.max(1));
    let mut out = Vec::with_capacity(count);
    for _ in 0..cap {
        if out.len() == count {
            break;
        }
        let x = region.sample(rng);
        let x = x.as_slice();
        match source.value(x, tau) {
            Ok(v) if v >= margin => out.push(x.to_vec()),
            Ok(_) | Err(ValueError::Extrapolation { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if out.len() < count {
        return Err(EvalError::DegenerateSafeSet {
            attempts: cap,
            margin,
        });
    }
    Ok(out)
}

/// Fraction of filtered rollouts from learned-safe starts that ever reach
/// `h < 0`. Deterministic for a given seed.
pub fn failure_rate(
    source: &dyn ValueSource,
    system: &dyn ControlAffine,
    policy: &mut dyn NominalPolicy,
    opts: &RolloutOptions,
) -> Result<FailureStats, EvalError> {
    if opts.n_rollouts == 0 || !(opts.tick > 0.0) || opts.substeps == 0 {
        return Err(EvalError::Config(
            "need rollouts, a positive tick and substeps".into(),
        ));
    }
    let tau = opts.query_tau.unwrap_or_else(|| source.horizon());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts = sample_safe_starts(
        source,
        system,
        opts.n_rollouts,
        tau,
        opts.start_margin,
        opts.max_draws_per_start,
        &mut rng,
    )?;
    let ticks = (opts.horizon / opts.tick).round() as usize;
    let mut failed = Vec::with_capacity(starts.len());
    let mut left_domain = 0;
    let mut interventions = 0;
    let mut filter_times = Vec::new();
    for (k, x0) in starts.iter().enumerate() {
        policy.reset(opts.seed.wrapping_mul(31).wrapping_add(k as u64));
        let mut x = DVector::from_row_slice(x0);
        let mut fail = system.constraint(&x) < 0.0;
        let mut outside = false;
        for i in 0..ticks {
            let t = i as f64 * opts.tick;
            let u_d = policy.command(t, x.as_slice());
            let u = if opts.filter_enabled && !outside {
                match filter_step(source, system, x.as_slice(), tau, &u_d, &opts.filter) {
                    Ok(r) => {
                        interventions += r.intervened as usize;
                        filter_times.push(r.wall_time);
                        r.u_out
                    }
                    Err(FilterError::Value(ValueError::Extrapolation { .. })) => {
                        outside = true;
                        left_domain += 1;
                        u_d
                    }
                    Err(e) => return Err(e.into()),
                }
            } else {
                u_d
            };
            x = integrate_hold(system, &x, &DVector::from_vec(u), opts.tick, opts.substeps)?;
            if system.constraint(&x) < 0.0 {
                fail = true;
            }
        }
        failed.push(fail);
    }
    let failures = failed.iter().filter(|f| **f).count();
    Ok(FailureStats {
        rate: failures as f64 / starts.len() as f64,
        failures,
        rollouts: starts.len(),
        starts,
        failed,
        left_domain,
        interventions,
        filter_times,
    })
}

/// Intersection over union of `{V >= 0}` sets on the oracle's grid nodes.
pub fn iou(
    source: &dyn ValueSource,
    oracle: &GridValueFunction,
    tau: f64,
) -> Result<f64, EvalError> {
    iou_within(source, oracle, tau, &oracle.spec.bounds())
}

/// [`iou`] restricted to the oracle nodes inside `region`, typically the
/// box a learned model was trained on.
pub fn iou_within(
    source: &dyn ValueSource,
    oracle: &GridValueFunction,
    tau: f64,
    region: &StateBox,
) -> Result<f64, EvalError> {
    let field = oracle.field_at(tau)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (k, &v_ref) in field.iter().enumerate() {
        let x = oracle.spec.node(k);
        if !region.contains(&x) {
            continue;
        }
        let a = source.value(&x, tau)? >= 0.0;
        let b = v_ref >= 0.0;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Err(EvalError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean and unbiased standard deviation; the deviation is NaN below two
/// values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Nearest-rank quantile of unsorted samples.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q.clamp(0.0, 1.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

/// One row of a sweep: a strategy at a training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub train: TrainConfig,
}

impl SweepCell {
    pub fn new(strategy: SamplingStrategy, budget_label: &str, mut train: TrainConfig) -> Self {
        train.strategy = strategy;
        Self {
            label: format!("{}/{budget_label}", strategy.label()),
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `None` when training diverged; the seed is then left out of the means.
    pub failure_rate: Option<f64>,
    pub iou: Option<f64>,
    pub final_residual: Option<f64>,
    pub error: Option<String>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub strategy: SamplingStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub horizon: f64,
    pub seeds: Vec<SeedOutcome>,
    pub failure_mean: f64,
    pub failure_sd: f64,
    pub iou_mean: f64,
    pub iou_sd: f64,
    /// Filter wall-time quantiles (p50, p90, p99) over every filtered tick.
    pub wall_time_quantiles: [f64; 3],
    pub config_hash: String,
    /// At least one seed diverged and was excluded.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Settings shared by every cell of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub seeds: Vec<u64>,
    pub rollouts: RolloutOptions,
    /// Time-to-go at which IOU is taken; the oracle's horizon if `None`.
    pub iou_tau: Option<f64>,
    /// Worker threads; 0 picks the machine's parallelism.
    pub workers: usize,
}

fn config_hash(cfg: &TrainConfig, opts: &RolloutOptions) -> String {
    let text = serde_json::to_string(&(cfg, opts)).expect("configs serialize");
    let h = text.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    });
    format!("{h:016x}")
}

fn run_cell(
    system: &dyn ControlAffine,
    oracle: &GridValueFunction,
    cell: &SweepCell,
    seed: u64,
    opts: &CompareOptions,
) -> (SeedOutcome, Vec<f64>) {
    let started = Instant::now();
    let mut cfg = cell.train.clone();
    cfg.seed = seed;
    let outcome = |fr, iou, res, err: Option<String>| SeedOutcome {
        seed,
        failure_rate: fr,
        iou,
        final_residual: res,
        error: err,
        train_seconds: started.elapsed().as_secs_f64(),
    };
    let (net, report) = match train(system, &cfg) {
        Ok(r) => r,
        Err(e) => return (outcome(None, None, None, Some(e.to_string())), Vec::new()),
    };
    let tau = opts.iou_tau.unwrap_or_else(|| oracle.horizon());
    let evaluated = (|| -> Result<(f64, f64, Vec<f64>), EvalError> {
        let mut policy = AggressiveRacer::for_corridor(system)?;
        let mut ro = opts.rollouts.clone();
        ro.seed = ro.seed.wrapping_add(seed);
        let stats = failure_rate(&net, system, &mut policy, &ro)?;
        Ok((
            stats.rate,
            iou_within(&net, oracle, tau, system.sampling_region())?,
            stats.filter_times,
        ))
    })();
    match evaluated {
        Ok((fr, i, times)) => (
            outcome(Some(fr), Some(i), Some(report.final_eval_residual), None),
            times,
        ),
        Err(e) => (
            outcome(
                None,
                None,
                Some(report.final_eval_residual),
                Some(e.to_string()),
            ),
            Vec::new(),
        ),
    }
}

/// Train every (cell, seed) pair, evaluate failure rate and IOU, and
/// aggregate per cell. Results do not depend on the worker count.
pub fn compare_strategies(
    system: &dyn ControlAffine,
    oracle: &GridValueFunction,
    cells: &[SweepCell],
    opts: &CompareOptions,
) -> Result<EvalReport, EvalError> {
    if opts.seeds.len() < 2 {
        return Err(EvalError::Config(
            "comparisons need at least two seeds".into(),
        ));
    }
    if cells.is_empty() {
        return Err(EvalError::Config("no sweep cells".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| opts.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let workers = if opts.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.workers
    }
    .min(jobs.len());

    let results: BTreeMap<(usize, u64), (SeedOutcome, Vec<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|&(c, s)| ((c, s), run_cell(system, oracle, &cells[c], s, opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut seeds = Vec::new();
            let mut times = Vec::new();
            for &s in &opts.seeds {
                let (o, t) = &results[&(c, s)];
                seeds.push(o.clone());
                times.extend_from_slice(t);
            }
            let fr: Vec<f64> = seeds.iter().filter_map(|o| o.failure_rate).collect();
            let ious: Vec<f64> = seeds.iter().filter_map(|o| o.iou).collect();
            let (failure_mean, failure_sd) = mean_sd(&fr);
            let (iou_mean, iou_sd) = mean_sd(&ious);
            EvalRow {
                label: cell.label.clone(),
                strategy: cell.train.strategy,
                epochs: cell.train.epochs.total(),
                batch_size: cell.train.batch_size,
                horizon: cell.train.horizon,
                excluded: seeds.iter().any(|o| o.error.is_some()),
                seeds,
                failure_mean,
                failure_sd,
                iou_mean,
                iou_sd,
                wall_time_quantiles: [
                    quantile(&times, 0.5),
                    quantile(&times, 0.9),
                    quantile(&times, 0.99),
                ],
                config_hash: config_hash(&cell.train, &opts.rollouts),
            }
        })
        .collect();
    Ok(EvalReport { rows })
}

impl EvalReport {
    /// One line per (row, seed) plus the row aggregates.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "label",
            "strategy",
            "epochs",
            "seed",
            "failure_rate",
            "iou",
            "failure_mean",
            "failure_sd",
            "iou_mean",
            "iou_sd",
            "config_hash",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            for s in &r.seeds {
                out.write_record([
                    r.label.clone(),
                    r.strategy.label().to_string(),
                    r.epochs.to_string(),
                    s.seed.to_string(),
                    opt(s.failure_rate),
                    opt(s.iou),
                    r.failure_mean.to_string(),
                    r.failure_sd.to_string(),
                    r.iou_mean.to_string(),
                    r.iou_sd.to_string(),
                    r.config_hash.clone(),
                    s.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value_source::ConstantValue;

    #[test]
    fn unbiased_deviation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_sd(&[1.0]).1.is_nan());
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 50.0);
        assert_eq!(quantile(&v, 0.99), 99.0);
        assert_eq!(quantile(&v, 1.0), 100.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
    }

    #[test]
    fn negative_everywhere_is_degenerate() {
        let sys = crate::dynamics::kinematic_corridor_model(
            10.0,
            1.0 / 12.0,
            &crate::dynamics::TrackGeometry::default(),
        )
        .unwrap();
        let v = ConstantValue {
            value: -1.0,
            dim: 2,
            horizon: 1.0,
        };
        let mut policy = AggressiveRacer::for_corridor(&sys).unwrap();
        let opts = RolloutOptions {
            n_rollouts: 5,
            max_draws_per_start: 10,
            ..RolloutOptions::default()
        };
        assert!(matches!(
            failure_rate(&v, &sys, &mut policy, &opts),
            Err(EvalError::DegenerateSafeSet { attempts: 50, .. })
        ));
    }

    #[test]
    fn racer_targets_switch_and_saturate() {
        let set = ControlSet::symmetric_box(vec![0.1]).unwrap();
        let mut p = AggressiveRacer::new(&set, 0, 1).unwrap();
        p.reset(3);
        let u0 = p.command(0.0, &[0.0, 0.0]);
        assert!(u0[0].abs() <= 0.1);
        let first = p.target;
        p.command(0.25, &[0.0, 0.0]);
        assert_eq!(p.target, first);
        p.command(0.5, &[0.0, 0.0]);
        assert_ne!(p.target, first);
        // far off target, the command saturates
        assert_eq!(p.command(0.6, &[-50.0, 0.0]), vec![0.1]);
    }
}
