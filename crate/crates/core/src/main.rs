use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use moe_scaling::allocation::{self, AllocationResult, SearchConfig};
use moe_scaling::fit::{self, FitConfig, TrainingRun};
use moe_scaling::inference::{CostModel, GeometryFit, HardwareConfig, LatencyProfile};
use moe_scaling::io::{read_json_file, read_runs_file, write_csv, write_json};
use moe_scaling::synth::{self, AffineLatency, AffineProfileModel, ProfileGrid, SynthSpec};
use moe_scaling::{ArchitectureConvention, Error, ErrorKind, ScalingLawParams};

const CONFIG_ENV: &str = "MOESCALE_CONFIG";

/// Fit MoE scaling laws, price inference and allocate training budgets.
#[derive(Debug, Parser)]
#[command(name = "moescale", version)]
struct Cli {
    /// JSON file supplying defaults for any flag; flags on the command line win.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Write output here instead of stdout.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// More logging on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit law constants to a runs CSV (n_dense,d_tokens,experts,val_loss).
    Fit(FitArgs),
    /// Predict loss for one configuration or a CSV of n_dense,d_tokens,experts rows.
    Predict(PredictArgs),
    /// Recommend a single allocation.
    ///
    /// Columns: budget_flops, n_dense, d_tokens, experts, predicted_loss,
    /// training_flops, overtrain_ratio, cost_per_token, best_gpus, batch,
    /// batch_floor, extrapolated.
    Allocate(AllocateArgs),
    /// Loss-optimal rows plus loss-vs-cost curves for every budget and expert count.
    ///
    /// Columns: budget_flops, experts, kind (optimal|curve), point, n_dense,
    /// d_tokens, predicted_loss, training_flops, overtrain_ratio,
    /// cost_per_token, best_gpus, batch, batch_floor, extrapolated, status.
    Sweep(SweepArgs),
    /// Cost per token for each GPU count, followed by the cheapest row.
    ///
    /// Columns: row (gpu|min), gpus, status, batch, batch_floor, throughput,
    /// cost_per_token, prompt_latency_s, decode_latency_s, extrapolated.
    Cost(CostArgs),
    /// Write synthetic runs, profiles or reference constants.
    Synth(SynthArgs),
    /// Compare closed forms against brute-force oracles.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Fit the dense law to the single-expert rows only.
    #[arg(long)]
    dense: bool,
    /// Write fitted constants here as JSON.
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[arg(long)]
    max_starts: Option<usize>,
    /// Start from every grid point.
    #[arg(long)]
    full_grid: bool,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, requires_all = ["d", "e"], conflicts_with = "batch")]
    n: Option<f64>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    e: Option<f64>,
    /// CSV with columns n_dense,d_tokens,experts.
    #[arg(long)]
    batch: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Serving {
    #[arg(long)]
    hardware: Option<PathBuf>,
    /// Latency profile JSON; the reference affine profile when absent.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Coefficient of h·l = mu·N^(2/3).
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    max_gpus: Option<u32>,
    #[arg(long)]
    cost_per_gpu_second: Option<f64>,
    #[arg(long)]
    prompt_len: Option<f64>,
    #[arg(long)]
    output_len: Option<f64>,
}

#[derive(Debug, Args)]
struct Search {
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    n_min: Option<f64>,
    #[arg(long)]
    n_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Optimal,
    BoundLoss,
    BoundCost,
}

#[derive(Debug, Args)]
struct AllocateArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    serving: Serving,
    #[command(flatten)]
    search: Search,
    #[arg(long)]
    budget: f64,
    #[arg(long, value_enum, default_value = "optimal")]
    mode: Mode,
    #[arg(long, default_value_t = 4.0)]
    e_base: f64,
    /// Defaults to --e-base.
    #[arg(long)]
    e_prime: Option<f64>,
    /// Explicit loss bound for bound-loss, replacing the e-base optimum.
    #[arg(long)]
    loss_bound: Option<f64>,
    /// Explicit cost-per-token bound for bound-cost, replacing the e-base optimum.
    #[arg(long)]
    cost_bound: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    serving: Serving,
    #[command(flatten)]
    search: Search,
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<f64>,
    /// Expert counts; the configured candidates when absent.
    #[arg(long, value_delimiter = ',')]
    experts: Vec<u32>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[command(flatten)]
    serving: Serving,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Runs,
    Profile,
    Params,
    Hardware,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    /// Ground-truth constants; the reference constants when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    Throughput,
    Dense,
    All,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    check: Check,
    #[arg(long)]
    seed: Option<u64>,
    /// Random draws per check.
    #[arg(long, default_value_t = 20)]
    draws: usize,
}

/// Defaults read from the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    params: Option<PathBuf>,
    runs: Option<PathBuf>,
    profile: Option<PathBuf>,
    hardware: Option<PathBuf>,
    output: Option<PathBuf>,
    format: Option<Format>,
    verbosity: Option<u8>,
    seed: Option<u64>,
    mu: Option<f64>,
    max_starts: Option<usize>,
    holdout: Option<f64>,
    rel_tol: Option<f64>,
    n_min: Option<f64>,
    n_max: Option<f64>,
    expert_candidates: Option<Vec<u32>>,
}

struct Ctx {
    file: CliConfig,
    format: Format,
    output: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, Error> {
        flag.clone()
            .or_else(|| file.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("no {what} given (flag or config file)")))
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.file.seed).unwrap_or(0)
    }

    fn writer(&self) -> Result<Box<dyn Write>, Error> {
        Ok(match &self.output {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn emit<T: Serialize>(&self, rows: &[T]) -> Result<(), Error> {
        let mut w = self.writer()?;
        match self.format {
            Format::Csv => write_csv(&mut w, rows)?,
            Format::Json => write_json(&mut w, rows)?,
        }
        w.flush()?;
        Ok(())
    }

    fn params(&self, flag: &Option<PathBuf>) -> Result<ScalingLawParams, Error> {
        let p: ScalingLawParams = read_json_file(&self.path(flag, &self.file.params, "params file")?)?;
        p.validate()?;
        Ok(p)
    }

    fn hardware(&self, s: &Serving) -> Result<HardwareConfig, Error> {
        let mut hw = match s.hardware.as_ref().or(self.file.hardware.as_ref()) {
            Some(p) => read_json_file(p)?,
            None => HardwareConfig::default(),
        };
        if let Some(v) = s.max_gpus {
            hw.max_gpus = v;
        }
        if let Some(v) = s.cost_per_gpu_second {
            hw.cost_per_gpu_second = v;
        }
        if let Some(v) = s.prompt_len {
            hw.prompt_len = v;
        }
        if let Some(v) = s.output_len {
            hw.output_len = v;
        }
        hw.validate()?;
        Ok(hw)
    }

    fn profile(&self, s: &Serving) -> Result<LatencyProfile, Error> {
        match s.profile.as_ref().or(self.file.profile.as_ref()) {
            Some(p) => read_json_file(p),
            None => {
                log::info!("no latency profile given; using the reference affine profile");
                synth::synth_profile(&AffineProfileModel::reference(), &ProfileGrid::default())
            }
        }
    }

    fn geometry(&self, s: &Serving) -> GeometryFit {
        s.mu.or(self.file.mu).map(|mu| GeometryFit { mu }).unwrap_or_default()
    }

    fn search(&self, s: &Search) -> SearchConfig {
        let d = SearchConfig::default();
        SearchConfig {
            rel_tol: s.rel_tol.or(self.file.rel_tol).unwrap_or(d.rel_tol),
            n_min: s.n_min.or(self.file.n_min).unwrap_or(d.n_min),
            n_max: s.n_max.or(self.file.n_max).unwrap_or(d.n_max),
            expert_candidates: self.file.expert_candidates.clone().unwrap_or(d.expert_candidates),
        }
    }
}

struct Serve {
    hw: HardwareConfig,
    geom: GeometryFit,
    profile: LatencyProfile,
    arch: ArchitectureConvention,
}

impl Serve {
    fn load(ctx: &Ctx, s: &Serving) -> Result<Self, Error> {
        Ok(Self {
            hw: ctx.hardware(s)?,
            geom: ctx.geometry(s),
            profile: ctx.profile(s)?,
            arch: ArchitectureConvention::default(),
        })
    }

    fn model(&self) -> Result<CostModel<'_>, Error> {
        CostModel::new(&self.hw, &self.geom, &self.profile, &self.arch)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 1,
                ErrorKind::Infeasible => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let file: CliConfig = match &cli.config {
        Some(p) => read_json_file(p)?,
        None => CliConfig::default(),
    };
    let verbosity = if cli.verbose > 0 { cli.verbose } else { file.verbosity.unwrap_or(0) };
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();

    let default_format = match cli.command {
        Command::Fit(_) => Format::Json,
        _ => Format::Csv,
    };
    let ctx = Ctx {
        format: cli.format.or(file.format).unwrap_or(default_format),
        output: cli.output.clone().or_else(|| file.output.clone()),
        file,
    };
    match cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Allocate(a) => cmd_allocate(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Cost(a) => cmd_cost(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, a),
    }
}

#[derive(Serialize)]
struct StartRow {
    index: usize,
    final_objective: f64,
    converged: bool,
    refined: bool,
    out_of_domain: bool,
    iterations: usize,
}

fn cmd_fit(ctx: &Ctx, a: FitArgs) -> Result<(), Error> {
    let runs = read_runs_file(&ctx.path(&a.runs, &ctx.file.runs, "runs CSV")?)?;
    let config = FitConfig {
        max_starts: a.max_starts.or(ctx.file.max_starts).unwrap_or(FitConfig::default().max_starts),
        full_grid: a.full_grid,
        holdout_fraction: a.holdout.or(ctx.file.holdout).unwrap_or(FitConfig::default().holdout_fraction),
        rng_seed: ctx.seed(a.seed),
        ..FitConfig::default()
    };
    macro_rules! finish {
        ($report:expr) => {{
            let report = $report;
            log::info!("rmsle {:e}, holdout {:?}", report.rmsle, report.holdout_rmsle);
            if let Some(p) = &a.params_out {
                write_json(BufWriter::new(File::create(p)?), &report.best_params)?;
            }
            match ctx.format {
                Format::Json => {
                    let mut w = ctx.writer()?;
                    write_json(&mut w, &report)?;
                    w.flush()?;
                }
                Format::Csv => {
                    let rows: Vec<StartRow> = report
                        .starts
                        .iter()
                        .map(|s| StartRow {
                            index: s.index,
                            final_objective: s.final_objective,
                            converged: s.converged,
                            refined: s.refined,
                            out_of_domain: s.out_of_domain,
                            iterations: s.iterations,
                        })
                        .collect();
                    ctx.emit(&rows)?;
                }
            }
        }};
    }
    if a.dense {
        let dense: Vec<TrainingRun> = runs.into_iter().filter(|r| r.experts == 1.0).collect();
        if dense.is_empty() {
            return Err(Error::NoRuns);
        }
        finish!(fit::fit_dense(&dense, &config)?);
    } else {
        finish!(fit::fit_moe(&runs, &config)?);
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Query {
    n_dense: f64,
    d_tokens: f64,
    experts: f64,
}

#[derive(Serialize)]
struct Prediction {
    n_dense: f64,
    d_tokens: f64,
    experts: f64,
    loss: f64,
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Result<(), Error> {
    let params = ctx.params(&a.params)?;
    let queries: Vec<Query> = match (&a.batch, a.n) {
        (Some(path), _) => {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            rdr.deserialize()
                .enumerate()
                .map(|(i, q)| q.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1))))
                .collect::<Result<_, _>>()?
        }
        (None, Some(n)) => vec![Query {
            n_dense: n,
            d_tokens: a.d.unwrap_or(f64::NAN),
            experts: a.e.unwrap_or(f64::NAN),
        }],
        (None, None) => return Err(Error::InvalidArgument("give --n/--d/--e or --batch".into())),
    };
    let rows = queries
        .into_iter()
        .map(|q| {
            Ok(Prediction {
                loss: params.predict_loss(q.n_dense, q.d_tokens, q.experts)?,
                n_dense: q.n_dense,
                d_tokens: q.d_tokens,
                experts: q.experts,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    ctx.emit(&rows)
}

fn cmd_allocate(ctx: &Ctx, a: AllocateArgs) -> Result<(), Error> {
    let params = ctx.params(&a.params)?;
    let serve = Serve::load(ctx, &a.serving)?;
    let cost = serve.model()?;
    let search = ctx.search(&a.search);
    let e_prime = a.e_prime.unwrap_or(a.e_base);
    let result: AllocationResult = match a.mode {
        Mode::Optimal => allocation::loss_optimal_allocation(a.budget, e_prime, &params, &cost, &search)?,
        Mode::BoundLoss => match a.loss_bound {
            Some(b) => allocation::min_cost_for_loss_bound(a.budget, e_prime, b, &params, &cost, &search)?,
            None => allocation::min_cost_for_bounded_loss(a.budget, a.e_base, e_prime, &params, &cost, &search)?,
        },
        Mode::BoundCost => match a.cost_bound {
            Some(b) => allocation::min_loss_for_cost_bound(a.budget, e_prime, b, &params, &cost, &search)?,
            None => allocation::min_loss_for_bounded_cost(a.budget, a.e_base, e_prime, &params, &cost, &search)?,
        },
    };
    if result.extrapolated {
        log::warn!("latency was extrapolated beyond the profile");
    }
    ctx.emit(&[result])
}

fn cmd_sweep(ctx: &Ctx, a: SweepArgs) -> Result<(), Error> {
    let params = ctx.params(&a.params)?;
    let serve = Serve::load(ctx, &a.serving)?;
    let cost = serve.model()?;
    let search = ctx.search(&a.search);
    search.validate()?;
    let experts = if a.experts.is_empty() {
        search.expert_candidates.clone()
    } else {
        a.experts
    };
    if let Some(b) = a.budgets.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {b}")));
    }
    if experts.contains(&0) {
        return Err(Error::InvalidArgument("expert counts must be >= 1".into()));
    }
    let rows = allocation::frontier_sweep(&a.budgets, &experts, &params, &cost, &search);
    let flagged = rows.iter().filter(|r| r.status != "ok").count();
    if flagged > 0 {
        log::warn!("{flagged} sweep row(s) flagged");
    }
    ctx.emit(&rows)
}

#[derive(Serialize)]
struct CostRow {
    row: &'static str,
    gpus: u32,
    status: String,
    batch: Option<f64>,
    batch_floor: Option<f64>,
    throughput: Option<f64>,
    cost_per_token: Option<f64>,
    prompt_latency_s: Option<f64>,
    decode_latency_s: Option<f64>,
    extrapolated: bool,
}

fn cmd_cost(ctx: &Ctx, a: CostArgs) -> Result<(), Error> {
    let serve = Serve::load(ctx, &a.serving)?;
    let model = serve.model()?;
    let row = |kind, g, r: &Result<moe_scaling::inference::ServingPoint, Error>| match r {
        Ok(p) => CostRow {
            row: kind,
            gpus: g,
            status: "ok".into(),
            batch: Some(p.batch),
            batch_floor: Some(p.batch.floor()),
            throughput: Some(p.throughput),
            cost_per_token: Some(p.cost_per_token),
            prompt_latency_s: Some(p.prompt_latency_s),
            decode_latency_s: Some(p.decode_latency_s),
            extrapolated: p.extrapolated,
        },
        Err(e) => CostRow {
            row: kind,
            gpus: g,
            status: format!("infeasible: {e}"),
            batch: None,
            batch_floor: None,
            throughput: None,
            cost_per_token: None,
            prompt_latency_s: None,
            decode_latency_s: None,
            extrapolated: false,
        },
    };
    let mut rows: Vec<CostRow> = model
        .cost_table(a.n, a.e)
        .iter()
        .map(|(g, r)| row("gpu", *g, r))
        .collect();
    let best = model.min_cost_over_gpus(a.n, a.e)?;
    rows.push(row("min", best.gpus, &Ok(best)));
    ctx.emit(&rows)
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<(), Error> {
    let truth = match a.params.as_ref().or(ctx.file.params.as_ref()) {
        Some(p) => read_json_file(p)?,
        None => synth::reference_params(),
    };
    let mut w = ctx.writer()?;
    match a.kind {
        SynthKind::Runs => {
            let spec = SynthSpec {
                ground_truth: truth,
                noise_sigma: a.sigma,
                rng_seed: ctx.seed(a.seed),
                ..SynthSpec::default()
            };
            let runs = synth::synth_runs(&spec)?;
            match ctx.format {
                Format::Csv => write_csv(&mut w, &runs)?,
                Format::Json => write_json(&mut w, &runs)?,
            }
        }
        SynthKind::Profile => {
            let p = synth::synth_profile(&AffineProfileModel::reference(), &ProfileGrid::default())?;
            write_json(&mut w, &p)?;
        }
        SynthKind::Params => write_json(&mut w, &truth)?,
        SynthKind::Hardware => write_json(&mut w, &HardwareConfig::default())?,
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct VerifyRow {
    check: &'static str,
    case: usize,
    reference: f64,
    oracle: f64,
    rel_error: f64,
    tolerance: f64,
    pass: bool,
}

fn cmd_verify(ctx: &Ctx, a: VerifyArgs) -> Result<(), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(a.seed));
    let mut rows = Vec::new();
    let mut push = |check, case, reference: f64, oracle: f64, tolerance| {
        let rel_error = ((reference - oracle) / oracle).abs();
        rows.push(VerifyRow {
            check,
            case,
            reference,
            oracle,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
        });
    };
    if matches!(a.check, Check::Throughput | Check::All) {
        let hw = HardwareConfig::default();
        let geom = GeometryFit::reference();
        let arch = ArchitectureConvention::default();
        for case in 0..a.draws {
            let model = AffineProfileModel {
                prompt: random_affine(&mut rng),
                decode: random_affine(&mut rng),
            };
            let profile = synth::synth_profile(&model, &ProfileGrid::default())?;
            let cost = CostModel::new(&hw, &geom, &profile, &arch)?;
            let n = 10f64.powf(rng.random_range(8.0..9.7));
            let e = [1.0, 4.0, 8.0, 16.0, 32.0][rng.random_range(0..5)];
            let g = rng.random_range(1..=hw.max_gpus);
            match synth::throughput_pair(&cost, n, e, g, 20 * hw.output_len as u64) {
                Ok((analytic, sim)) => push("throughput", case, analytic, sim.throughput, 0.01),
                Err(e) if e.kind() == ErrorKind::Infeasible => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if matches!(a.check, Check::Dense | Check::All) {
        for case in 0..a.draws {
            let p = moe_scaling::DenseLawParams {
                l0: rng.random_range(1.0..2.0),
                coef_n: rng.random_range(100.0..1000.0),
                coef_d: rng.random_range(100.0..1000.0),
                alpha: rng.random_range(0.2..0.5),
                beta: rng.random_range(0.2..0.5),
            };
            let budget = 10f64.powf(rng.random_range(18.0..24.0));
            let (n, _) = allocation::dense_optimal(budget, &p)?;
            let (on, _) = synth::dense_lagrange_oracle(budget, &p)?;
            push("dense_optimal", case, n, on, 1e-3);
        }
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    let rows_len = rows.len();
    ctx.emit(&rows)?;
    if failed > 0 {
        return Err(Error::VerificationFailed { failed, total: rows_len });
    }
    Ok(())
}

fn random_affine(rng: &mut ChaCha8Rng) -> AffineLatency {
    AffineLatency {
        c0: 10f64.powf(rng.random_range(-4.0..-1.0)),
        c1: 10f64.powf(rng.random_range(-6.0..-2.0)),
        c2: 10f64.powf(rng.random_range(-14.0..-11.0)),
    }
}
