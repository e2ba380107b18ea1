//! Command-line front end: stratify feature files, build reordered schedule
//! plans, score plans against reference discrepancies, and run the Monte
//! Carlo sweeps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vrsched::discrepancy::{reference_coral, reference_mmd, DiscrepancyReport};
use vrsched::kernel::{gram, KernelSpec};
use vrsched::schedule::{
    draw_tuples, greedy_reorder, plan_estimates, LossKind, ReplacementMode, SchedulePlan,
};
use vrsched::seed::derive_seed;
use vrsched::simulate::{
    run_m_sweep, run_nmin_sweep, run_variance_sweep, write_nmin_csv, write_sidecar,
    write_variance_csv, Assigner, DataSource, Sampler, SimulationConfig, VarianceCurve,
};
use vrsched::stratify::{kernel_kmeans, IterationOptions, Stratification};
use vrsched::types::Domain;

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "vrsched",
    about = "Variance-reduced minibatch scheduling for domain-discrepancy losses",
    version
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Size the simulation defaults like the original studies instead of
    /// the quicker desk-scale runs.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a feature file into size-constrained strata.
    Stratify(StratifyArgs),
    /// Draw per-stratum index blocks and greedily reorder them into a plan.
    Schedule(ScheduleArgs),
    /// Score a plan's minibatch estimates against the full-data reference.
    Estimate(EstimateArgs),
    /// Run the sampler variance sweeps or the assignment study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KernelChoice {
    Linear,
    RbfMixture,
    CoralMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossChoice {
    Mmd,
    Coral,
}

impl From<LossChoice> for LossKind {
    fn from(value: LossChoice) -> Self {
        match value {
            LossChoice::Mmd => LossKind::Mmd,
            LossChoice::Coral => LossKind::Coral,
        }
    }
}

#[derive(Args)]
struct KernelArgs {
    /// Kernel family for grams and MMD estimates.
    #[arg(long, value_enum, default_value_t = KernelChoice::RbfMixture)]
    kernel: KernelChoice,
    /// RBF mixture bandwidths, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    gammas: Option<Vec<f64>>,
}

fn kernel_spec(kernel: KernelChoice, gammas: &Option<Vec<f64>>) -> Result<KernelSpec, CliError> {
    let spec = match (kernel, gammas) {
        (KernelChoice::Linear, None) => KernelSpec::Linear,
        (KernelChoice::RbfMixture, None) => KernelSpec::rbf_mixture_default(),
        (KernelChoice::RbfMixture, Some(g)) => KernelSpec::RbfMixture { gammas: g.clone() },
        (KernelChoice::CoralMap, None) => KernelSpec::CoralMap,
        (_, Some(_)) => {
            return Err(CliError::Validation(
                "--gammas only applies to --kernel rbf-mixture".into(),
            ))
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl KernelArgs {
    fn to_spec(&self) -> Result<KernelSpec, CliError> {
        kernel_spec(self.kernel, &self.gammas)
    }
}

#[derive(Args)]
struct StratifyArgs {
    /// Feature file, CSV or binary.
    #[arg(long)]
    features: PathBuf,
    /// Number of strata.
    #[arg(long)]
    k: usize,
    /// Minimum stratum size.
    #[arg(long, default_value_t = 1)]
    n_min: usize,
    /// Refinement pass limit.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Output stratification file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Source-domain feature file.
    #[arg(long)]
    source: PathBuf,
    /// Target-domain feature file.
    #[arg(long)]
    target: PathBuf,
    /// Source stratification file from `stratify`.
    #[arg(long)]
    source_strat: PathBuf,
    /// Target stratification file from `stratify`.
    #[arg(long)]
    target_strat: PathBuf,
    /// Minibatches per scheduling block.
    #[arg(long)]
    m: usize,
    /// Discrepancy the reordering minimizes the per-batch error of.
    #[arg(long, value_enum, default_value_t = LossChoice::Mmd)]
    loss: LossChoice,
    /// Recycle shuffles when strata are smaller than M.
    #[arg(long)]
    shuffle_cycle: bool,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Output plan file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Source-domain feature file.
    #[arg(long)]
    source: PathBuf,
    /// Target-domain feature file.
    #[arg(long)]
    target: PathBuf,
    /// Plan file from `schedule`.
    #[arg(long)]
    plan: PathBuf,
    /// Cross-check that the plan optimizes this loss.
    #[arg(long, value_enum)]
    loss: Option<LossChoice>,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Output report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Figure {
    /// Estimator variance vs stratum count for all three samplers.
    #[value(name = "3a")]
    VarianceVsK,
    /// Estimator variance vs block size for the ordered sampler.
    #[value(name = "3b")]
    VarianceVsM,
    /// Assignment objective vs minimum stratum size.
    #[value(name = "2")]
    NminStudy,
}

#[derive(Args)]
struct SimulateArgs {
    /// Which study to run.
    #[arg(long, value_enum)]
    figure: Option<Figure>,
    /// Run one variance sweep from a JSON simulation config instead.
    #[arg(long, conflicts_with = "figure")]
    config: Option<PathBuf>,
    /// Basename for the CSV and JSON outputs.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    n_s: Option<usize>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
    /// Minibatches per scheduling block.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Stratum counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    k_values: Option<Vec<usize>>,
    /// Block sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    m_values: Option<Vec<usize>>,
    /// Minimum sizes to sweep in the assignment study, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    n_min_values: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = LossChoice::Mmd)]
    loss: LossChoice,
    /// Kernel family (the studies default to linear).
    #[arg(long, value_enum, default_value_t = KernelChoice::Linear)]
    kernel: KernelChoice,
    /// RBF mixture bandwidths, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    gammas: Option<Vec<f64>>,
    /// Recycle shuffles when strata are smaller than M.
    #[arg(long)]
    shuffle_cycle: bool,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<vrsched::Error> for CliError {
    fn from(e: vrsched::Error) -> Self {
        match e {
            vrsched::Error::Io(_) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Stratify(args) => cmd_stratify(&cli, args),
        Command::Schedule(args) => cmd_schedule(&cli, args),
        Command::Estimate(args) => cmd_estimate(&cli, args),
        Command::Simulate(args) => cmd_simulate(&cli, args),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("could not size thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if threads.is_some() {
        eprintln!("note: built without the parallel feature; --threads has no effect");
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("cannot parse {}: {e}", path.display())))
}

fn check_schema(version: u32, path: &Path) -> Result<(), CliError> {
    if version != SCHEMA_VERSION {
        return Err(CliError::Validation(format!(
            "{} has schema version {version}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StratFile {
    schema_version: u32,
    stratification: Stratification,
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    schema_version: u32,
    kernel: KernelSpec,
    reference: f64,
    comparisons: u64,
    plan: SchedulePlan,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema_version: u32,
    loss: LossKind,
    kernel: KernelSpec,
    report: DiscrepancyReport,
}

fn cmd_stratify(cli: &Cli, args: &StratifyArgs) -> Result<(), CliError> {
    let spec = args.kernel.to_spec()?;
    let features = vrsched::io::read_features(&args.features, Domain::Source)?;
    let g = gram(&spec, &features, &features)?;
    let opts = IterationOptions {
        max_iters: args.max_iters,
        seed: cli.seed,
        ..IterationOptions::default()
    };
    let outcome = kernel_kmeans(&g, args.k, args.n_min, &opts)?;
    let objective = outcome.objective_trace.last().copied().unwrap_or(f64::NAN);
    write_json(
        &args.out,
        &StratFile {
            schema_version: SCHEMA_VERSION,
            stratification: outcome.stratification,
            objective_trace: outcome.objective_trace,
            iterations: outcome.iterations,
            converged: outcome.converged,
        },
    )?;
    println!(
        "wrote {} (objective {objective}, {} passes, converged: {})",
        args.out.display(),
        outcome.iterations,
        outcome.converged
    );
    Ok(())
}

fn load_strat(path: &Path) -> Result<Stratification, CliError> {
    let file: StratFile = read_json(path)?;
    check_schema(file.schema_version, path)?;
    Ok(file.stratification)
}

fn cmd_schedule(cli: &Cli, args: &ScheduleArgs) -> Result<(), CliError> {
    let spec = args.kernel.to_spec()?;
    let source = vrsched::io::read_features(&args.source, Domain::Source)?;
    let target = vrsched::io::read_features(&args.target, Domain::Target)?;
    let strat_s = load_strat(&args.source_strat)?;
    let strat_t = load_strat(&args.target_strat)?;
    for (name, strat, fs) in [
        ("source", &strat_s, &source),
        ("target", &strat_t, &target),
    ] {
        if strat.n() != fs.len() {
            return Err(CliError::Validation(format!(
                "{name} stratification covers {} rows but the feature file has {}",
                strat.n(),
                fs.len()
            )));
        }
    }
    let mode = if args.shuffle_cycle {
        ReplacementMode::ShuffleCycle
    } else {
        ReplacementMode::WithoutReplacement
    };
    let draw_s = draw_tuples(&strat_s, args.m, mode, derive_seed(cli.seed, &[1]))?;
    let draw_t = draw_tuples(&strat_t, args.m, mode, derive_seed(cli.seed, &[2]))?;
    let result = greedy_reorder(
        &draw_s,
        &draw_t,
        &source,
        &target,
        &spec,
        args.loss.into(),
        derive_seed(cli.seed, &[3]),
    )?;
    let initial = result.plan.initial_objective().unwrap_or(f64::NAN);
    let final_obj = result.plan.final_objective().unwrap_or(f64::NAN);
    write_json(
        &args.out,
        &PlanFile {
            schema_version: SCHEMA_VERSION,
            kernel: spec,
            reference: result.reference,
            comparisons: result.comparisons,
            plan: result.plan,
        },
    )?;
    println!(
        "wrote {} (objective {initial} -> {final_obj}, {} comparisons)",
        args.out.display(),
        result.comparisons
    );
    Ok(())
}

fn cmd_estimate(_cli: &Cli, args: &EstimateArgs) -> Result<(), CliError> {
    let spec = args.kernel.to_spec()?;
    let source = vrsched::io::read_features(&args.source, Domain::Source)?;
    let target = vrsched::io::read_features(&args.target, Domain::Target)?;
    let plan_file: PlanFile = read_json(&args.plan)?;
    check_schema(plan_file.schema_version, &args.plan)?;
    let plan = plan_file.plan;
    if let Some(loss) = args.loss {
        if LossKind::from(loss) != plan.loss_kind() {
            return Err(CliError::Validation(format!(
                "plan optimizes {} but --loss asked for {}",
                plan.loss_kind(),
                LossKind::from(loss)
            )));
        }
    }
    let reference = match plan.loss_kind() {
        LossKind::Mmd => reference_mmd(&spec, &source, &target)?,
        LossKind::Coral => reference_coral(&source, &target)?,
    };
    let estimates = plan_estimates(&plan, &source, &target, &spec)?;
    let report = DiscrepancyReport::new(reference, estimates);
    let mse = report.mean_squared_error;
    write_json(
        &args.out,
        &ReportFile {
            schema_version: SCHEMA_VERSION,
            loss: plan.loss_kind(),
            kernel: spec,
            report,
        },
    )?;
    println!("wrote {} (reference {reference}, mse {mse})", args.out.display());
    Ok(())
}

struct FigureDefaults {
    n: usize,
    k_values: Vec<usize>,
    m: usize,
    n_min: usize,
    replicates: usize,
}

fn figure_defaults(figure: Figure, full_scale: bool) -> FigureDefaults {
    match (figure, full_scale) {
        (Figure::VarianceVsK, false) => FigureDefaults {
            n: 1000,
            k_values: vec![2, 5, 10],
            m: 100,
            n_min: 100,
            replicates: 200,
        },
        (Figure::VarianceVsK, true) => FigureDefaults {
            n: 4000,
            k_values: vec![2, 5, 10, 20, 40],
            m: 100,
            n_min: 100,
            replicates: 200,
        },
        (Figure::VarianceVsM, false) => FigureDefaults {
            n: 2000,
            k_values: vec![20],
            m: 100,
            n_min: 100,
            replicates: 100,
        },
        (Figure::VarianceVsM, true) => FigureDefaults {
            n: 4000,
            k_values: vec![20],
            m: 100,
            n_min: 100,
            replicates: 100,
        },
        (Figure::NminStudy, _) => FigureDefaults {
            n: 200,
            k_values: vec![5],
            m: 1,
            n_min: 1,
            replicates: 100,
        },
    }
}

fn build_config(
    cli: &Cli,
    args: &SimulateArgs,
    defaults: &FigureDefaults,
    sampler: Sampler,
) -> Result<SimulationConfig, CliError> {
    let cfg = SimulationConfig {
        n_s: args.n_s.unwrap_or(defaults.n),
        n_t: args.n_t.unwrap_or(defaults.n),
        d: 2,
        distribution: DataSource::StandardNormal2d,
        sampler,
        loss_kind: args.loss.into(),
        kernel: kernel_spec(args.kernel, &args.gammas)?,
        k_values: args.k_values.clone().unwrap_or(defaults.k_values.clone()),
        m: args.m.unwrap_or(defaults.m),
        n_min: args.n_min.unwrap_or(defaults.n_min),
        replacement: if args.shuffle_cycle {
            ReplacementMode::ShuffleCycle
        } else {
            ReplacementMode::WithoutReplacement
        },
        replicates: args.replicates.unwrap_or(defaults.replicates),
        seed: cli.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    config: &'a SimulationConfig,
    samplers: Vec<String>,
}

#[derive(Serialize)]
struct NminMeta<'a> {
    n: usize,
    k: usize,
    replicates: usize,
    seed: u64,
    assigners: Vec<String>,
    n_min_values: &'a [usize],
}

fn curve_summary(curve: &VarianceCurve) -> String {
    let failed = curve.points.iter().filter(|p| p.error.is_some()).count();
    format!(
        "{}: {} points ({} infeasible)",
        curve.sampler,
        curve.points.len(),
        failed
    )
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), CliError> {
    if let Some(config_path) = &args.config {
        let cfg: SimulationConfig = read_json(config_path)?;
        let prefix = args
            .out_prefix
            .clone()
            .unwrap_or_else(|| PathBuf::from("sweep"));
        let curve = run_variance_sweep(&cfg)?;
        write_variance_csv(with_ext(&prefix, "csv"), std::slice::from_ref(&curve))?;
        write_sidecar(
            with_ext(&prefix, "json"),
            &SweepMeta {
                config: &cfg,
                samplers: vec![cfg.sampler.to_string()],
            },
        )?;
        println!("{}", curve_summary(&curve));
        println!("wrote {} and {}", show(&prefix, "csv"), show(&prefix, "json"));
        return Ok(());
    }

    let figure = args.figure.ok_or_else(|| {
        CliError::Validation("pass --figure 3a|3b|2 or --config <file>".into())
    })?;
    let defaults = figure_defaults(figure, cli.full_scale);
    match figure {
        Figure::VarianceVsK => {
            let prefix = args
                .out_prefix
                .clone()
                .unwrap_or_else(|| PathBuf::from("fig3a"));
            let mut curves = Vec::new();
            for sampler in [Sampler::Uniform, Sampler::Stratified, Sampler::Ordered] {
                let cfg = build_config(cli, args, &defaults, sampler)?;
                let curve = run_variance_sweep(&cfg)?;
                println!("{}", curve_summary(&curve));
                curves.push(curve);
            }
            write_variance_csv(with_ext(&prefix, "csv"), &curves)?;
            let base = build_config(cli, args, &defaults, Sampler::Ordered)?;
            write_sidecar(
                with_ext(&prefix, "json"),
                &SweepMeta {
                    config: &base,
                    samplers: curves.iter().map(|c| c.sampler.to_string()).collect(),
                },
            )?;
            println!("wrote {} and {}", show(&prefix, "csv"), show(&prefix, "json"));
        }
        Figure::VarianceVsM => {
            let prefix = args
                .out_prefix
                .clone()
                .unwrap_or_else(|| PathBuf::from("fig3b"));
            let cfg = build_config(cli, args, &defaults, Sampler::Ordered)?;
            let m_values = args
                .m_values
                .clone()
                .unwrap_or_else(|| vec![2, 5, 10, 25, 50, 75, 100]);
            let curve = run_m_sweep(&cfg, &m_values)?;
            println!("{}", curve_summary(&curve));
            write_variance_csv(with_ext(&prefix, "csv"), std::slice::from_ref(&curve))?;
            write_sidecar(
                with_ext(&prefix, "json"),
                &SweepMeta {
                    config: &cfg,
                    samplers: vec![curve.sampler.to_string()],
                },
            )?;
            println!("wrote {} and {}", show(&prefix, "csv"), show(&prefix, "json"));
        }
        Figure::NminStudy => {
            let prefix = args
                .out_prefix
                .clone()
                .unwrap_or_else(|| PathBuf::from("fig2"));
            let n = args.n_s.unwrap_or(defaults.n);
            let k = args
                .k_values
                .clone()
                .map(|ks| ks[0])
                .unwrap_or(defaults.k_values[0]);
            let n_min_values = args
                .n_min_values
                .clone()
                .unwrap_or_else(|| vec![1, 5, 10, 20, 30, 40]);
            let replicates = args.replicates.unwrap_or(defaults.replicates);
            let assigners = [Assigner::GreedyWeighted, Assigner::UnweightedLp];
            let table = run_nmin_sweep(n, k, &n_min_values, &assigners, replicates, cli.seed)?;
            write_nmin_csv(with_ext(&prefix, "csv"), &table)?;
            write_sidecar(
                with_ext(&prefix, "json"),
                &NminMeta {
                    n,
                    k,
                    replicates,
                    seed: cli.seed,
                    assigners: assigners.iter().map(|a| a.to_string()).collect(),
                    n_min_values: &n_min_values,
                },
            )?;
            println!(
                "{} rows ({} infeasible)",
                table.rows.len(),
                table.rows.iter().filter(|r| r.error.is_some()).count()
            );
            println!("wrote {} and {}", show(&prefix, "csv"), show(&prefix, "json"));
        }
    }
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut path = prefix.to_path_buf();
    path.set_extension(ext);
    path
}

fn show(prefix: &Path, ext: &str) -> String {
    with_ext(prefix, ext).display().to_string()
}
