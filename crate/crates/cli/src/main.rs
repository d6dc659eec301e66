use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use pmpsafe::dynamics::params::{TrackConfig, VehicleConfig};
use pmpsafe::dynamics::{integrate_hold, ControlAffine, CorridorModel, TrackGeometry};
use pmpsafe::eval::{
    compare_strategies, failure_rate, iou, AggressiveRacer, CompareOptions, RolloutOptions,
    SweepCell,
};
use pmpsafe::filter::{filter_step, FilterOptions};
use pmpsafe::hj_grid::{
    read_grid, solve_cbvf_with, write_grid, write_level_set_csv, zero_level_set, Axis, CbvfOptions,
    GridSpec, GridValueFunction,
};
use pmpsafe::sim::server::{serve, spawn_session};
use pmpsafe::sim::{replay_log, IdlePolicy, PlantSpec, Session, SessionConfig};
use pmpsafe::value_net::{
    load_model, save_model, EpochSchedule, ModelFile, Provenance, SamplingStrategy, TrainConfig,
};
use pmpsafe::value_source::ValueSource;

#[derive(Parser)]
#[command(
    name = "pmpsafe",
    version,
    about = "Learned safety value functions and filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the corridor value function on a grid.
    SolveGrid(SolveGridArgs),
    /// Train value networks, one per seed.
    Train(TrainArgs),
    /// Run a scripted request trace through the filter and print CSV.
    FilterDemo(FilterDemoArgs),
    /// Failure rate of filtered rollouts under an aggressive driver.
    EvalFailure(EvalFailureArgs),
    /// Safe-set IOU of a model against a grid solution.
    EvalIou(EvalIouArgs),
    /// Train and evaluate both sampling strategies over seeds and budgets.
    Sweep(SweepArgs),
    /// Run a real-time session behind a WebSocket / line-TCP port.
    Serve(ServeArgs),
    /// Re-simulate a session log without the filter.
    Replay(ReplayArgs),
}

#[derive(Args, Clone)]
struct CorridorArgs {
    /// Forward speed (m/s).
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    /// Largest path curvature the driver can command (1/m).
    #[arg(long, default_value_t = 1.0 / 12.0)]
    curvature_bound: f64,
    /// Track description (JSON); the bundled oval if omitted.
    #[arg(long)]
    track: Option<PathBuf>,
    /// Model the first turn instead of a straight.
    #[arg(long)]
    on_turn: bool,
}

impl CorridorArgs {
    fn track(&self) -> Result<TrackGeometry> {
        match &self.track {
            Some(p) => Ok(TrackConfig::load(p)
                .with_context(|| format!("reading track {}", p.display()))?
                .track),
            None => Ok(TrackGeometry::default()),
        }
    }

    fn model(&self) -> Result<CorridorModel> {
        let track = self.track()?;
        let kappa = if self.on_turn {
            1.0 / track.turn_radius
        } else {
            0.0
        };
        Ok(CorridorModel::new(
            self.speed,
            self.curvature_bound,
            kappa,
            track.half_width,
        )?)
    }
}

#[derive(Args)]
struct SolveGridArgs {
    #[command(flatten)]
    corridor: CorridorArgs,
    /// Nodes per axis.
    #[arg(long, default_value_t = 201)]
    nodes: usize,
    /// Lateral-error half range (m).
    #[arg(long, default_value_t = 4.0)]
    e_range: f64,
    /// Heading-error half range (rad).
    #[arg(long, default_value_t = 1.3)]
    phi_range: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    cfl: f64,
    #[arg(long, default_value_t = 0.02)]
    slice_dt: f64,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the zero level set at the horizon as CSV.
    #[arg(long)]
    level_set: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Uniform,
    Pmp,
}

impl From<StrategyArg> for SamplingStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => SamplingStrategy::UniformOnly,
            StrategyArg::Pmp => SamplingStrategy::PmpAugmented,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corridor: CorridorArgs,
    #[arg(long, value_enum, default_value = "pmp")]
    strategy: StrategyArg,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Training configuration (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the total epoch count, keeping the schedule's proportions.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Trained model (JSON) or grid solution (binary).
    #[arg(long)]
    model: PathBuf,
    /// Time-to-go the filter queries; the source's horizon if omitted.
    #[arg(long)]
    tau: Option<f64>,
    /// Leave the time derivative out of the constraint.
    #[arg(long)]
    no_time_term: bool,
}

impl SourceArgs {
    fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            gamma: source_gamma(&self.model).unwrap_or(0.0),
            time_term: !self.no_time_term,
            ..FilterOptions::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Trace {
    /// Full left curvature the whole time.
    HardLeft,
    /// Full-scale square wave with a 1 s period.
    Slalom,
    /// Straight ahead.
    Zero,
}

#[derive(Args)]
struct FilterDemoArgs {
    #[command(flatten)]
    corridor: CorridorArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value = "hard-left")]
    trace: Trace,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.02)]
    tick: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0")]
    x0: Vec<f64>,
    /// CSV destination; stdout if omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long, default_value_t = 500)]
    rollouts: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.01)]
    tick: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RolloutArgs {
    fn options(&self, filter: FilterOptions, query_tau: Option<f64>) -> RolloutOptions {
        RolloutOptions {
            n_rollouts: self.rollouts,
            horizon: self.horizon,
            tick: self.tick,
            seed: self.seed,
            query_tau,
            filter,
            ..RolloutOptions::default()
        }
    }
}

#[derive(Args)]
struct EvalFailureArgs {
    #[command(flatten)]
    corridor: CorridorArgs,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    rollouts: RolloutArgs,
    /// Roll out the driver unfiltered from the same starts.
    #[arg(long)]
    no_filter: bool,
    /// Write the full statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct EvalIouArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// Time-to-go to compare at; the grid's horizon if omitted.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    corridor: CorridorArgs,
    /// Reference grid solution for IOU.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    seeds: Vec<u64>,
    /// Training budgets as total epoch counts.
    #[arg(long, value_delimiter = ',', default_value = "5000")]
    budgets: Vec<usize>,
    /// Base training configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    rollouts: RolloutArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "sweep.csv")]
    csv: PathBuf,
    #[arg(long, default_value = "sweep.json")]
    json: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum IdleArg {
    Hold,
    Zero,
}

#[derive(Args)]
struct ServeArgs {
    /// Trained model (JSON) or grid solution (binary).
    #[arg(long)]
    model: PathBuf,
    /// Track description (JSON); the bundled oval if omitted.
    #[arg(long)]
    track: Option<PathBuf>,
    #[arg(long, default_value_t = 9000)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Simulate the full vehicle from this parameter file instead of the
    /// corridor model.
    #[arg(long)]
    vehicle: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    #[arg(long, default_value_t = 1.0 / 12.0)]
    curvature_bound: f64,
    #[arg(long, default_value_t = 2.7)]
    wheelbase: f64,
    #[arg(long)]
    on_turn: bool,
    #[arg(long, default_value_t = 50.0)]
    tick_rate: f64,
    #[arg(long, value_enum, default_value = "hold")]
    idle: IdleArg,
    /// Start with the filter off.
    #[arg(long)]
    no_filter: bool,
    /// JSON-lines session log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Telemetry frames buffered per client before the oldest is dropped.
    #[arg(long, default_value_t = 256)]
    queue: usize,
    /// Stop after this many seconds.
    #[arg(long)]
    run_for: Option<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    /// Counterfactual trajectory as CSV; stdout if omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::SolveGrid(a) => solve_grid(a),
        Cmd::Train(a) => train_models(a),
        Cmd::FilterDemo(a) => filter_demo(a),
        Cmd::EvalFailure(a) => eval_failure(a),
        Cmd::EvalIou(a) => eval_iou(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Serve(a) => run_server(a),
        Cmd::Replay(a) => replay(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_grid(path: &Path) -> Result<GridValueFunction> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_grid(BufReader::new(f))?)
}

fn load_net_file(path: &Path) -> Result<ModelFile> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(load_model(BufReader::new(f))?)
}

fn is_json(path: &Path) -> Result<bool> {
    let mut first = [0u8; 1];
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let n = f.read(&mut first)?;
    Ok(n == 1 && first[0] == b'{')
}

/// A model file or a grid solution, whichever `path` holds.
fn load_source(path: &Path) -> Result<Arc<dyn ValueSource>> {
    if is_json(path)? {
        Ok(Arc::new(load_net_file(path)?.to_net()?))
    } else {
        Ok(Arc::new(load_grid(path)?))
    }
}

fn source_gamma(path: &Path) -> Option<f64> {
    if is_json(path).ok()? {
        load_net_file(path).ok().map(|m| m.gamma)
    } else {
        load_grid(path).ok().map(|g| g.gamma)
    }
}

fn read_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

/// `base` stretched or shrunk to `total` epochs.
fn scale_schedule(base: EpochSchedule, total: usize) -> EpochSchedule {
    let k = total as f64 / base.total().max(1) as f64;
    let pretrain = (base.pretrain as f64 * k).round() as usize;
    let curriculum = (base.curriculum as f64 * k).round() as usize;
    EpochSchedule {
        pretrain,
        curriculum,
        finetune: total.saturating_sub(pretrain + curriculum),
    }
}

fn solve_grid(a: SolveGridArgs) -> Result<()> {
    let model = a.corridor.model()?;
    let spec = GridSpec::new(vec![
        Axis::new(-a.e_range, a.e_range, a.nodes)?,
        Axis::new(-a.phi_range, a.phi_range, a.nodes)?,
    ])?;
    let started = Instant::now();
    let vf = solve_cbvf_with(
        &model,
        &spec,
        &CbvfOptions {
            gamma: a.gamma,
            horizon: a.horizon,
            cfl: a.cfl,
            slice_dt: a.slice_dt,
        },
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    write_grid(&vf, BufWriter::new(File::create(&a.out)?))?;
    if let Some(p) = &a.level_set {
        let ls = zero_level_set(&vf, vf.horizon())?;
        write_level_set_csv(&ls, BufWriter::new(File::create(p)?))?;
    }
    let safe = vf
        .slices
        .last()
        .map_or(0, |s| s.iter().filter(|v| **v >= 0.0).count());
    eprintln!(
        "solved {}x{} grid to tau={} in {elapsed:.2}s; {safe} of {} nodes safe; wrote {}",
        a.nodes,
        a.nodes,
        vf.horizon(),
        spec.len(),
        a.out.display()
    );
    Ok(())
}

fn train_models(a: TrainArgs) -> Result<()> {
    let model = a.corridor.model()?;
    let mut cfg = read_train_config(a.config.as_deref())?;
    cfg.strategy = a.strategy.into();
    if let Some(total) = a.epochs {
        cfg.epochs = scale_schedule(cfg.epochs, total);
    }
    std::fs::create_dir_all(&a.out_dir)?;
    for &seed in &a.seeds {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let (net, report) = pmpsafe::value_net::train(&model, &cfg)
            .with_context(|| format!("training seed {seed}"))?;
        let file = ModelFile::from_net(
            &net,
            cfg.gamma,
            seed,
            Provenance {
                system: model.name(),
                strategy: cfg.strategy.label().to_string(),
                epochs: cfg.epochs.total(),
                batch_size: cfg.batch_size,
                checksum: String::new(),
            },
        );
        let path = a
            .out_dir
            .join(format!("model-{}-seed{seed}.json", cfg.strategy.label()));
        save_model(&file, BufWriter::new(File::create(&path)?))?;
        println!(
            "seed {seed}: residual {:.4} -> {:.4} ({:.1}x) in {:.1}s, {} extremals; wrote {}",
            report.initial_eval_residual,
            report.final_eval_residual,
            report.initial_eval_residual / report.final_eval_residual,
            report.wall_time,
            report.extremals,
            path.display()
        );
    }
    Ok(())
}

fn scripted(trace: Trace, t: f64, ubar: f64) -> f64 {
    match trace {
        Trace::HardLeft => ubar,
        Trace::Slalom => {
            if (t % 1.0) < 0.5 {
                ubar
            } else {
                -ubar
            }
        }
        Trace::Zero => 0.0,
    }
}

fn filter_demo(a: FilterDemoArgs) -> Result<()> {
    let model = a.corridor.model()?;
    let source = load_source(&a.source.model)?;
    let opts = a.source.filter_options();
    let tau = a.source.tau.unwrap_or_else(|| source.horizon());
    if a.x0.len() != model.state_dim() {
        bail!("--x0 needs {} components", model.state_dim());
    }
    let mut out = csv::Writer::from_writer(output(a.out.as_deref())?);
    out.write_record(["t", "e", "dphi", "u_d", "u_out", "V", "intervened"])?;
    let mut x = DVector::from_row_slice(&a.x0);
    let steps = (a.duration / a.tick).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * a.tick;
        let u_d = vec![scripted(a.trace, t, model.curvature_bound)];
        let r = filter_step(source.as_ref(), &model, x.as_slice(), tau, &u_d, &opts)?;
        out.write_record([
            format!("{t}"),
            format!("{}", x[0]),
            format!("{}", x[1]),
            format!("{}", u_d[0]),
            format!("{}", r.u_out[0]),
            format!("{}", r.value),
            format!("{}", r.intervened as u8),
        ])?;
        if k < steps {
            x = integrate_hold(&model, &x, &DVector::from_vec(r.u_out), a.tick, 4)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn eval_failure(a: EvalFailureArgs) -> Result<()> {
    let model = a.corridor.model()?;
    let source = load_source(&a.source.model)?;
    let mut opts = a.rollouts.options(a.source.filter_options(), a.source.tau);
    opts.filter_enabled = !a.no_filter;
    let mut policy = AggressiveRacer::for_corridor(&model)?;
    let stats = failure_rate(source.as_ref(), &model, &mut policy, &opts)?;
    println!(
        "failure rate {:.4} ({} of {}); {} interventions; {} rollouts left the model domain",
        stats.rate, stats.failures, stats.rollouts, stats.interventions, stats.left_domain
    );
    if let Some(p) = &a.json {
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &stats)?;
    }
    Ok(())
}

fn eval_iou(a: EvalIouArgs) -> Result<()> {
    let source = load_source(&a.model)?;
    let grid = load_grid(&a.grid)?;
    let tau = a.tau.unwrap_or_else(|| grid.horizon());
    println!("iou {:.4} at tau={tau}", iou(source.as_ref(), &grid, tau)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let model = a.corridor.model()?;
    let grid = load_grid(&a.grid)?;
    let base = read_train_config(a.config.as_deref())?;
    let mut cells = Vec::new();
    for &budget in &a.budgets {
        for strategy in [
            SamplingStrategy::UniformOnly,
            SamplingStrategy::PmpAugmented,
        ] {
            let mut cfg = base.clone();
            cfg.epochs = scale_schedule(base.epochs, budget);
            cells.push(SweepCell::new(strategy, &format!("{budget}"), cfg));
        }
    }
    let opts = CompareOptions {
        seeds: a.seeds.clone(),
        rollouts: a.rollouts.options(
            FilterOptions {
                gamma: base.gamma,
                ..FilterOptions::default()
            },
            None,
        ),
        iou_tau: None,
        workers: a.workers,
    };
    let report = compare_strategies(&model, &grid, &cells, &opts)?;
    report.write_csv(BufWriter::new(File::create(&a.csv)?))?;
    report.write_json(BufWriter::new(File::create(&a.json)?))?;
    for row in &report.rows {
        println!(
            "{:<16} failure {:.3} ± {:.3}  iou {:.3} ± {:.3}{}",
            row.label,
            row.failure_mean,
            row.failure_sd,
            row.iou_mean,
            row.iou_sd,
            if row.excluded {
                "  (some seeds excluded)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn run_server(a: ServeArgs) -> Result<()> {
    let source = load_source(&a.model)?;
    let track = match &a.track {
        Some(p) => {
            TrackConfig::load(p)
                .with_context(|| format!("reading track {}", p.display()))?
                .track
        }
        None => TrackGeometry::default(),
    };
    let spec = match &a.vehicle {
        Some(p) => {
            let mut config = VehicleConfig::load(p)
                .with_context(|| format!("reading vehicle {}", p.display()))?;
            config.track = track;
            PlantSpec::Vehicle { config }
        }
        None => PlantSpec::Corridor {
            speed: a.speed,
            curvature_bound: a.curvature_bound,
            track,
            on_turn: a.on_turn,
            wheelbase: a.wheelbase,
        },
    };
    let gamma = source_gamma(&a.model).unwrap_or(0.0);
    let cfg = SessionConfig {
        tick_rate: a.tick_rate,
        filter_enabled: !a.no_filter,
        idle: match a.idle {
            IdleArg::Hold => IdlePolicy::HoldLast,
            IdleArg::Zero => IdlePolicy::Zero,
        },
        filter: FilterOptions {
            gamma,
            ..FilterOptions::default()
        },
        ..SessionConfig::default()
    };
    let mut session = Session::new(1, spec, source, cfg)?;
    if let Some(p) = &a.log {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        session = session.with_log_sink(Box::new(BufWriter::new(f)))?;
    }
    let listener = TcpListener::bind((a.host.as_str(), a.port))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let handle = spawn_session(session);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| -> Result<()> {
        if let Some(secs) = a.run_for {
            let stop = &stop;
            scope.spawn(move || {
                std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
                stop.store(true, std::sync::atomic::Ordering::Relaxed);
            });
        }
        serve(listener, &handle, &stop, a.queue)?;
        Ok(())
    })?;
    let (session, stats) = handle.stop();
    eprintln!(
        "stopped after {} ticks, {} missed, {} violations",
        stats.ticks,
        stats.missed,
        session.violations()
    );
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let f = File::open(&a.log).with_context(|| format!("opening {}", a.log.display()))?;
    let r = replay_log(BufReader::new(f))?;
    let mut out = csv::Writer::from_writer(output(a.out.as_deref())?);
    let n = r.counterfactual.first().map_or(0, |p| p.x.len());
    let m = r.counterfactual.first().map_or(0, |p| p.u.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("h".into());
    out.write_record(&header)?;
    for p in &r.counterfactual {
        let mut rec = vec![p.t.to_string()];
        rec.extend(p.x.iter().map(f64::to_string));
        rec.extend(p.u.iter().map(f64::to_string));
        rec.push(p.h.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    let exit = r.counterfactual.iter().find(|p| p.h < 0.0);
    eprintln!(
        "{} ticks replayed; unfiltered run {}{}",
        r.counterfactual.len(),
        match exit {
            Some(p) => format!("leaves the track at t={:.2}", p.t),
            None => "stays on the track".to_string(),
        },
        r.halted
            .as_deref()
            .map(|h| format!("; stopped early: {h}"))
            .unwrap_or_default()
    );
    Ok(())
}
