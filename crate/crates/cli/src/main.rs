//! Command-line front end: simulation, dataset generation, training,
//! verification, the certified runtime, benchmarking and plot data.
//!
//! Exit codes: 0 success, 2 configuration error, 3 verification failure,
//! 4 solver failure, 1 anything else (I/O, malformed weights).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pdmhe::approximator::dataset::{gen_dataset, solve_samples};
use pdmhe::approximator::{fit_pair, Surrogate, TargetKind};
use pdmhe::certify::{
    calibrate, min_sample_size, verify_dual, verify_primal, Calibration, CertBudget, DualEstimator, ExactDual,
    ExactPrimal, PrimalEstimator, VerificationReport, ZeroDual, ZeroPrimal,
};
use pdmhe::config::{Config, Scenario};
use pdmhe::experiment::{
    monte_carlo, plot_rows, run_pd, run_seed, seeds, summarize, write_bench_csv, write_plot_csv, EstimatorKind,
    LearnedPair,
};
use pdmhe::model::simulate_trajectory;
use pdmhe::Error;

#[derive(Parser)]
#[command(name = "pdmhe", version, about = "Primal-dual learned moving horizon estimation")]
struct Cli {
    /// JSON configuration; the built-in two-state example when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte-Carlo runs and sample generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Progress and diagnostics on stderr.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    /// Trained networks from the weights directory.
    Learned,
    /// The exact solvers wrapped as estimators.
    Exact,
    /// Constant zero outputs.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Primal,
    Dual,
}

#[derive(clap::Args, Clone)]
struct EstimatorArgs {
    #[arg(long, value_enum, default_value_t = Which::Learned)]
    estimator: Which,
    /// Directory holding primal.json, dual.json and calibration.json
    /// (defaults to the output directory).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write one state and one measurement CSV per run.
    Simulate {
        /// Number of runs (defaults to the configured count).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Draw and solve instances and write their feature/target table.
    GenDataset {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Number of instances (defaults to the configured training size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train both networks, then calibrate their suboptimality levels.
    Train,
    /// Verify both estimators on fresh samples; exit 3 when either fails.
    Verify {
        #[command(flatten)]
        est: EstimatorArgs,
        /// Primal suboptimality level (defaults to calibration.json, then the config).
        #[arg(long)]
        delta_p: Option<f64>,
        /// Dual suboptimality level (defaults to calibration.json, then the config).
        #[arg(long)]
        delta_d: Option<f64>,
    },
    /// Run the certified estimator on one simulated trajectory.
    Run {
        #[command(flatten)]
        est: EstimatorArgs,
        /// Acceptance threshold; accepts `inf`.
        #[arg(long)]
        delta: Option<f64>,
        /// Monte-Carlo run whose trajectory is used.
        #[arg(long, default_value_t = 0)]
        run_index: usize,
    },
    /// ARMSE, median step time and backup fraction for KF, MHE and PD-MHE.
    Bench {
        #[command(flatten)]
        est: EstimatorArgs,
        /// Acceptance threshold; accepts `inf`.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Per-step RMSE mean and 95% band per estimator.
    PlotData {
        #[command(flatten)]
        est: EstimatorArgs,
        /// Acceptance threshold; accepts `inf`.
        #[arg(long)]
        delta: Option<f64>,
    },
}

enum Failure {
    Lib(Error),
    Verification(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(Error::Json(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 2,
            Failure::Verification(_) => 3,
            Failure::Lib(
                Error::Infeasible(_)
                | Error::MaxIterations { .. }
                | Error::SingularInnovation(_)
                | Error::NotSpd(_)
                | Error::Diverged(_)
                | Error::AcceptanceTooLow(_),
            ) => 4,
            Failure::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Verification(msg) => write!(f, "verification failed: {msg}"),
            Failure::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Shared state of every command.
struct Ctx {
    cfg: Config,
    scenario: Scenario,
    seed: u64,
    hash: String,
    out: PathBuf,
    debug: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Outcome<Self> {
        let mut cfg = match &cli.config {
            Some(path) => Config::load(path)?,
            None => Config::example(),
        };
        if let Some(seed) = cli.seed {
            cfg.experiment.seed = seed;
        }
        let scenario = cfg.scenario()?;
        fs::create_dir_all(&cli.out)?;
        Ok(Self {
            seed: cfg.experiment.seed,
            hash: cfg.hash(),
            scenario,
            cfg,
            out: cli.out.clone(),
            debug: cli.debug,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.debug {
            eprintln!("[pdmhe] {}", msg.as_ref());
        }
    }

    /// Opens `name` in the output directory and writes the provenance comment.
    fn csv(&self, name: &str) -> Outcome<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(self.out.join(name))?);
        writeln!(w, "# config_hash={} seed={}", self.hash, self.seed)?;
        Ok(w)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Outcome<()> {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            config_hash: &'a str,
            seed: u64,
            #[serde(flatten)]
            body: &'a T,
        }
        let text = serde_json::to_string_pretty(&Tagged { config_hash: &self.hash, seed: self.seed, body: value })?;
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn weights_dir(&self, est: &EstimatorArgs) -> PathBuf {
        est.weights.clone().unwrap_or_else(|| self.out.clone())
    }

    fn calibration(&self, est: &EstimatorArgs) -> Outcome<Option<Calibration>> {
        let path = self.weights_dir(est).join("calibration.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    /// `(Δ_p, Δ_d)`: explicit flags, then a calibration file, then the config.
    fn levels(&self, est: &EstimatorArgs, delta_p: Option<f64>, delta_d: Option<f64>) -> Outcome<(f64, f64)> {
        let cal = self.calibration(est)?;
        let c = &self.cfg.certify;
        let p = delta_p.or(cal.as_ref().map(|c| c.delta_p)).unwrap_or(c.delta_p);
        let d = delta_d.or(cal.as_ref().map(|c| c.delta_d)).unwrap_or(c.delta_d);
        Ok((p, d))
    }

    fn budget(&self, delta_p: f64, delta_d: f64) -> Outcome<CertBudget> {
        let c = &self.cfg.certify;
        Ok(CertBudget::split(c.eps, c.beta, c.primal_share, delta_p, delta_d, c.delta_gap)?)
    }
}

enum Estimators {
    Learned(Surrogate, Surrogate),
    Exact,
    Zero,
}

impl Estimators {
    fn load(ctx: &Ctx, est: &EstimatorArgs) -> Outcome<Self> {
        Ok(match est.estimator {
            Which::Exact => Estimators::Exact,
            Which::Zero => Estimators::Zero,
            Which::Learned => {
                let dir = ctx.weights_dir(est);
                let primal = Surrogate::load(&dir.join("primal.json"))?;
                let dual = Surrogate::load(&dir.join("dual.json"))?;
                if primal.kind != TargetKind::Primal || dual.kind != TargetKind::Dual {
                    return Err(Failure::Lib(Error::BadWeights("primal.json / dual.json hold the wrong kinds".into())));
                }
                Estimators::Learned(primal, dual)
            }
        })
    }

    fn primal(&self) -> &dyn PrimalEstimator {
        match self {
            Estimators::Learned(p, _) => p,
            Estimators::Exact => &ExactPrimal,
            Estimators::Zero => &ZeroPrimal,
        }
    }

    fn dual(&self) -> &dyn DualEstimator {
        match self {
            Estimators::Learned(_, d) => d,
            Estimators::Exact => &ExactDual,
            Estimators::Zero => &ZeroDual,
        }
    }
}

fn online_delta(ctx: &Ctx, est: &EstimatorArgs, delta: Option<f64>) -> Outcome<f64> {
    if let Some(d) = delta {
        if d.is_nan() || d < 0.0 {
            return Err(Failure::Usage(format!("--delta must be nonnegative, got {d}")));
        }
        return Ok(d);
    }
    let (p, d) = ctx.levels(est, None, None)?;
    Ok(ctx.budget(p, d)?.delta())
}

fn simulate(ctx: &Ctx, runs: Option<usize>) -> Outcome<()> {
    let sc = &ctx.scenario;
    let runs = runs.unwrap_or(ctx.cfg.experiment.runs);
    let dir = ctx.out.join("trajectories");
    fs::create_dir_all(&dir)?;
    for k in 0..runs {
        let seed = run_seed(&ctx.cfg.experiment, k);
        let traj = simulate_trajectory(&sc.model, &sc.noise, &sc.x0, sc.steps, seed)?;
        let name = |part: &str| format!("trajectories/run_{k:04}_{part}.csv");
        let mut w = ctx.csv(&name("states"))?;
        let xs: Vec<String> = (0..sc.model.n()).map(|i| format!("x_{i}")).collect();
        writeln!(w, "t,{}", xs.join(","))?;
        for (t, x) in traj.states.iter().enumerate() {
            writeln!(w, "{t},{}", join(x.iter()))?;
        }
        let mut w = ctx.csv(&name("measurements"))?;
        let ys: Vec<String> = (0..sc.model.m()).map(|j| format!("y_{j}")).collect();
        let xis: Vec<String> = (0..sc.model.n()).map(|i| format!("xi_{i}")).collect();
        let zs: Vec<String> = (0..sc.model.m()).map(|j| format!("zeta_{j}")).collect();
        writeln!(w, "t,{},{},{}", ys.join(","), xis.join(","), zs.join(","))?;
        for t in 0..traj.measurements.len() {
            writeln!(
                w,
                "{t},{},{},{}",
                join(traj.measurements[t].iter()),
                join(traj.process_noise[t].iter()),
                join(traj.measurement_noise[t].iter())
            )?;
        }
    }
    ctx.log(format!("wrote {runs} trajectories to {}", dir.display()));
    Ok(())
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

fn gen(ctx: &Ctx, kind: Kind, count: Option<usize>) -> Outcome<()> {
    let kind = match kind {
        Kind::Primal => TargetKind::Primal,
        Kind::Dual => TargetKind::Dual,
    };
    let count = count.unwrap_or(ctx.cfg.train.samples);
    let data = gen_dataset(&ctx.scenario, count, ctx.seed.wrapping_add(seeds::TRAIN), kind)?;
    data.write_csv(ctx.csv(&format!("dataset_{kind}.csv"))?)?;
    ctx.log(format!("wrote {} {kind} rows", data.len()));
    Ok(())
}

fn train(ctx: &Ctx) -> Outcome<()> {
    let tc = &ctx.cfg.train;
    tc.validate()?;
    ctx.log(format!("solving {} training instances", tc.samples));
    let samples = solve_samples(&ctx.scenario, tc.samples, ctx.seed.wrapping_add(seeds::TRAIN), true)?;
    ctx.log("training");
    let pair = fit_pair(&samples, tc)?;
    pair.primal.save(&ctx.out.join("primal.json"))?;
    pair.dual.save(&ctx.out.join("dual.json"))?;
    pair.primal_report.write_csv(ctx.csv("primal_curve.csv")?)?;
    pair.dual_report.write_csv(ctx.csv("dual_curve.csv")?)?;
    let c = &ctx.cfg.certify;
    ctx.log(format!("calibrating on {} instances", c.calibration_samples));
    let cal_samples = solve_samples(
        &ctx.scenario,
        c.calibration_samples,
        ctx.seed.wrapping_add(seeds::CALIBRATE),
        true,
    )?;
    let cal = calibrate(&pair.primal, &pair.dual, &cal_samples, c.margin)?;
    ctx.json("calibration.json", &cal)?;
    println!(
        "trained: validation loss primal {:.4e} dual {:.4e}; calibrated Δ_p = {:.4} Δ_d = {:.4}",
        pair.primal_report.validation_loss.last().copied().unwrap_or(f64::NAN),
        pair.dual_report.validation_loss.last().copied().unwrap_or(f64::NAN),
        cal.delta_p,
        cal.delta_d
    );
    Ok(())
}

fn write_report(ctx: &Ctx, name: &str, report: &VerificationReport) -> Outcome<()> {
    ctx.json(&format!("{name}.json"), report)?;
    report.write_csv(ctx.csv(&format!("{name}.csv"))?)?;
    Ok(())
}

fn verify(ctx: &Ctx, est: &EstimatorArgs, delta_p: Option<f64>, delta_d: Option<f64>) -> Outcome<()> {
    let (dp, dd) = ctx.levels(est, delta_p, delta_d)?;
    let budget = ctx.budget(dp, dd)?;
    let estimators = Estimators::load(ctx, est)?;
    let count = budget.primal_samples()?.max(budget.dual_samples()?);
    ctx.log(format!(
        "verifying on {count} instances (N_p = {}, N_d = {})",
        min_sample_size(budget.eps_p, budget.beta_p)?,
        min_sample_size(budget.eps_d, budget.beta_d)?
    ));
    let samples = solve_samples(&ctx.scenario, count, ctx.seed.wrapping_add(seeds::VERIFY), true)?;
    let primal = verify_primal(estimators.primal(), &budget, &samples)?;
    let dual = verify_dual(estimators.dual(), &budget, &samples)?;
    write_report(ctx, "verify_primal", &primal)?;
    write_report(ctx, "verify_dual", &dual)?;
    for r in [&primal, &dual] {
        println!(
            "{} {}: {} ({} of {} samples above Δ = {:.4e})",
            r.kind,
            r.estimator,
            if r.passed { "PASS" } else { "FAIL" },
            r.failures,
            r.samples,
            r.level
        );
    }
    if primal.passed && dual.passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} primal and {} dual failures", primal.failures, dual.failures)))
    }
}

fn run(ctx: &Ctx, est: &EstimatorArgs, delta: Option<f64>, run_index: usize) -> Outcome<()> {
    let sc = &ctx.scenario;
    let delta = online_delta(ctx, est, delta)?;
    let estimators = Estimators::load(ctx, est)?;
    let seed = run_seed(&ctx.cfg.experiment, run_index);
    let traj = simulate_trajectory(&sc.model, &sc.noise, &sc.x0, sc.steps, seed)?;
    let pair = LearnedPair { primal: estimators.primal(), dual: estimators.dual(), delta };
    let trace = run_pd(sc, &traj, pair)?;
    let mut w = ctx.csv("run.csv")?;
    let n = sc.model.n();
    let est_cols: Vec<String> = (0..n).map(|i| format!("xhat_{i}")).collect();
    let true_cols: Vec<String> = (0..n).map(|i| format!("x_{i}")).collect();
    writeln!(w, "t,{},{},provenance,gap,accept,elapsed_us", est_cols.join(","), true_cols.join(","))?;
    for t in 0..trace.estimates.len() {
        let (gap, accept) = match &trace.gaps[t] {
            Some(g) => (format!("{:e}", g.gap), g.accept.to_string()),
            None => (String::new(), String::new()),
        };
        let elapsed = if t == 0 { 0.0 } else { trace.step_times[t - 1].as_secs_f64() * 1e6 };
        writeln!(
            w,
            "{t},{},{},{},{gap},{accept},{elapsed:.3}",
            join(trace.estimates[t].iter()),
            join(traj.states[t].iter()),
            trace.provenance[t]
        )?;
    }
    let (rejected, checked) = trace.rejections();
    println!("run {run_index} (seed {seed}): Δ = {delta:.4e}, {rejected} of {checked} checked steps fell back");
    Ok(())
}

fn all_estimators<'a>(ctx: &Ctx, est: &EstimatorArgs, delta: Option<f64>, holder: &'a Option<Estimators>) -> Outcome<Option<LearnedPair<'a>>> {
    let Some(e) = holder else {
        return Ok(None);
    };
    Ok(Some(LearnedPair { primal: e.primal(), dual: e.dual(), delta: online_delta(ctx, est, delta)? }))
}

fn bench(ctx: &Ctx, est: &EstimatorArgs, delta: Option<f64>) -> Outcome<()> {
    let holder = Some(Estimators::load(ctx, est)?);
    let pair = all_estimators(ctx, est, delta, &holder)?;
    let kinds = [EstimatorKind::Kf, EstimatorKind::Mhe, EstimatorKind::PdMhe];
    ctx.log(format!("{} Monte-Carlo runs", ctx.cfg.experiment.runs));
    let results = monte_carlo(&ctx.scenario, &ctx.cfg.experiment, &kinds, pair)?;
    let rows = summarize(&results, ctx.cfg.experiment.armse_from);
    write_bench_csv(&rows, ctx.csv("bench.csv")?)?;
    println!("{:<8} {:>10} {:>16} {:>16}", "", "ARMSE", "median step µs", "backup fraction");
    for r in &rows {
        println!("{:<8} {:>10.4} {:>16.2} {:>16.4}", r.estimator, r.armse, r.median_step_us, r.backup_fraction);
    }
    Ok(())
}

fn plot_data(ctx: &Ctx, est: &EstimatorArgs, delta: Option<f64>) -> Outcome<()> {
    // PD-MHE is included only when its estimators can be loaded
    let holder = match Estimators::load(ctx, est) {
        Ok(e) => Some(e),
        Err(Failure::Lib(Error::Io(_))) if est.estimator == Which::Learned => {
            ctx.log("no trained weights found; plotting KF and MHE only");
            None
        }
        Err(e) => return Err(e),
    };
    let pair = all_estimators(ctx, est, delta, &holder)?;
    let kinds = [EstimatorKind::Kf, EstimatorKind::Mhe, EstimatorKind::PdMhe];
    let results = monte_carlo(&ctx.scenario, &ctx.cfg.experiment, &kinds, pair)?;
    write_plot_csv(&plot_rows(&results), ctx.csv("plot.csv")?)?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx::new(cli)?;
    ctx.log(format!("config hash {} seed {}", ctx.hash, ctx.seed));
    match &cli.command {
        Command::Simulate { runs } => simulate(&ctx, *runs),
        Command::GenDataset { kind, count } => gen(&ctx, *kind, *count),
        Command::Train => train(&ctx),
        Command::Verify { est, delta_p, delta_d } => verify(&ctx, est, *delta_p, *delta_d),
        Command::Run { est, delta, run_index } => run(&ctx, est, *delta, *run_index),
        Command::Bench { est, delta } => bench(&ctx, est, *delta),
        Command::PlotData { est, delta } => plot_data(&ctx, est, *delta),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
