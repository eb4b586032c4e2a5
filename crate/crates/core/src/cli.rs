//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::artifact::{read_json, write_atomic, write_json};
use crate::experiment::{
    dataset_path, generate_dataset, model_path, results_dir, run_bound_experiment, run_drift_experiment,
    run_energy_experiment, run_sweep, derived_seed, PURPOSE_BOUND, train_variant, write_summary, Dataset, ExperimentConfig,
};
use crate::gp_integrator::{estimate_lipschitz, StateBox, UncertaintyBound, DEFAULT_BETA, REGION_INFLATION};
use crate::selfcheck;
use crate::systems::{Parameterization, SystemKind};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_DATASET: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_INPUT: i32 = 7;
pub const EXIT_VALIDATION: i32 = 8;

#[derive(Debug, Parser)]
#[command(name = "sympgp", version, about = "Variational integrators with Gaussian process residual models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SYMPGP_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    system: Option<SystemKind>,
    /// Comma-separated parameterizations.
    #[arg(long, global = true, value_delimiter = ',')]
    param: Option<Vec<Parameterization>>,
    /// Comma-separated training-set sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[arg(short, long, global = true, action = clap::ArgAction::Count, conflicts_with = "verbose")]
    quiet: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate ground truth and write training and test data.
    GenData,
    /// Fit models for every size and repetition from existing data.
    Train,
    /// Train and evaluate the multi-step sweep, writing summary CSVs.
    Eval,
    /// Pendulum energy error of explicit Euler, the nominal and the learned integrator.
    Energy,
    /// Double pendulum constraint drift of explicit Euler and the learned integrator.
    Drift,
    /// Monte Carlo check of the one-step uncertainty bound.
    Bound,
    /// Quick self-checks; writes small energy and drift fixtures.
    Validate,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::MissingDataset(_) => EXIT_MISSING_DATASET,
        Error::Cholesky { .. }
        | Error::Fit { .. }
        | Error::NoConvergence { .. }
        | Error::Singular(_)
        | Error::Training { .. }
        | Error::Dataset { .. }
        | Error::Estimation { .. } => EXIT_NUMERICAL,
        Error::Io { .. } => EXIT_IO,
        Error::Input(_) | Error::Shape { .. } => EXIT_INPUT,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let verbosity = 1 + cli.global.verbose as i32 - cli.global.quiet as i32;
    let result = load_config(&cli.global).and_then(|config| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let ctx = Context {
            config,
            out: cli.global.out.clone(),
            verbosity,
        };
        pool.install(|| dispatch(&cli.command, &ctx))
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut config = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::for_system(g.system.unwrap_or(SystemKind::Pendulum)),
    };
    if let Some(s) = g.system {
        config.system = s;
    }
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(p) = &g.param {
        config.parameterizations = p.clone();
    }
    if let Some(s) = &g.sizes {
        config.sizes = s.clone();
    }
    if let Some(r) = g.restarts {
        config.restarts = r;
    }
    if g.jobs == Some(0) {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    config.validate()?;
    Ok(config)
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
    verbosity: i32,
}

impl Context {
    fn info(&self, msg: &str) {
        if self.verbosity >= 1 {
            eprintln!("{msg}");
        }
    }

    fn debug(&self, msg: &str) {
        if self.verbosity >= 2 {
            eprintln!("{msg}");
        }
    }
}

fn dispatch(command: &Command, ctx: &Context) -> Result<i32> {
    match command {
        Command::GenData => gen_data(ctx),
        Command::Train => train(ctx),
        Command::Eval => eval(ctx),
        Command::Energy => energy(ctx),
        Command::Drift => drift(ctx),
        Command::Bound => bound(ctx),
        Command::Validate => return validate(ctx),
    }?;
    Ok(EXIT_OK)
}

fn gen_data(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    for &p in &c.parameterizations {
        let ds = generate_dataset(c, p)?;
        let path = dataset_path(&ctx.out, c.system, p);
        write_json(&path, &ds)?;
        ctx.info(&format!("wrote {} ({} training pairs)", path.display(), ds.train.len()));
    }
    Ok(())
}

fn load_dataset(ctx: &Context, p: Parameterization) -> Result<Dataset> {
    let path = dataset_path(&ctx.out, ctx.config.system, p);
    if !path.exists() {
        return Err(Error::MissingDataset(path));
    }
    read_json(&path)
}

/// True when `ds` was generated from settings equal to the current config.
fn matches_config(ds: &Dataset, c: &ExperimentConfig) -> bool {
    ds.seed == c.seed
        && ds.ground_truth.kind == c.system
        && ds.coarse_dt == c.coarse_dt
        && ds.noise_std == c.noise_std
        && ds.test_joint_positions.len() == c.test_trajectories
        && ds.test_joint_positions.first().is_none_or(|t| t.len() == c.n_positions())
        && ds.train.len() == c.train_trajectories * c.n_positions().saturating_sub(2)
}

/// Existing data when it matches the config, otherwise freshly generated and written.
fn dataset_or_generate(ctx: &Context, p: Parameterization) -> Result<Dataset> {
    match load_dataset(ctx, p) {
        Ok(ds) if matches_config(&ds, &ctx.config) => return Ok(ds),
        Ok(_) => ctx.info(&format!("dataset for {p} does not match the configuration, regenerating")),
        Err(Error::MissingDataset(_)) => {}
        Err(e) => return Err(e),
    }
    let ds = generate_dataset(&ctx.config, p)?;
    write_json(&dataset_path(&ctx.out, ctx.config.system, p), &ds)?;
    Ok(ds)
}

fn train(ctx: &Context) -> Result<()> {
    use rayon::prelude::*;
    let c = &ctx.config;
    let datasets = c
        .parameterizations
        .iter()
        .map(|&p| load_dataset(ctx, p))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&Dataset, usize, usize)> = datasets
        .iter()
        .flat_map(|ds| c.sizes.iter().flat_map(move |&n| (0..c.repetitions).map(move |r| (ds, n, r))))
        .collect();
    jobs.par_iter()
        .map(|&(ds, n, r)| {
            let model = train_variant(c, ds, n, r)?;
            let region = StateBox::around(model.gp.inputs(), REGION_INFLATION)?;
            let seed = derived_seed(c.seed, PURPOSE_BOUND, n as u64, r as u64);
            let lip = estimate_lipschitz(&model, &region, c.bound.lipschitz_samples, seed)?;
            let bound = UncertaintyBound::new(lip.value, DEFAULT_BETA, c.bound.delta)?;
            let path = model_path(&ctx.out, c.system, ds.parameterization(), n, r);
            write_json(&path, &model.to_bundle(Some(bound)))?;
            ctx.debug(&format!("wrote {}", path.display()));
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    ctx.info(&format!("trained {} models", jobs.len()));
    Ok(())
}

fn eval(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    let datasets = c
        .parameterizations
        .iter()
        .map(|&p| dataset_or_generate(ctx, p))
        .collect::<Result<Vec<_>>>()?;
    let progress = |j: usize, total: usize, what: &str| ctx.debug(&format!("[{}/{total}] {what}", j + 1));
    let summary = run_sweep(c, &datasets, &progress)?;
    let dir = results_dir(&ctx.out, c.system);
    write_summary(&dir, &summary)?;
    for row in &summary.rows {
        ctx.info(&format!("{:>4} {:<8} median {:e}", row.n_samples, row.variant, row.median_mse));
    }
    ctx.info(&format!("wrote {}", dir.join("summary.csv").display()));
    Ok(())
}

fn energy(ctx: &Context) -> Result<()> {
    let series = run_energy_experiment(&ctx.config)?;
    let path = results_dir(&ctx.out, SystemKind::Pendulum).join("energy.csv");
    write_atomic(&path, series.to_csv().as_bytes())?;
    for (name, values) in &series.columns {
        ctx.info(&format!("{name}: max energy error {:e}", max_of(values)));
    }
    Ok(())
}

fn drift(ctx: &Context) -> Result<()> {
    let series = run_drift_experiment(&ctx.config)?;
    let path = results_dir(&ctx.out, SystemKind::DoublePendulum).join("drift.csv");
    write_atomic(&path, series.to_csv().as_bytes())?;
    for (name, values) in &series.columns {
        ctx.info(&format!("{name}: max constraint violation {:e}", max_of(values)));
    }
    Ok(())
}

fn bound(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    for &p in &c.parameterizations {
        let ds = dataset_or_generate(ctx, p)?;
        let report = run_bound_experiment(c, &ds)?;
        let path = results_dir(&ctx.out, c.system).join(p.name()).join("bound.json");
        write_json(&path, &report)?;
        println!(
            "{} {}: L = {:.4}, beta = {}, violation rate {:.4} (default beta {:.4})",
            c.system, p, report.lipschitz, report.beta, report.test_violation_rate, report.default_beta_violation_rate
        );
    }
    Ok(())
}

fn validate(ctx: &Context) -> Result<i32> {
    let failures = selfcheck::run_and_report(|o| match &o.result {
        Ok(()) => println!("PASS {}", o.name),
        Err(why) => println!("FAIL {}: {why}", o.name),
    })?;
    let fixture = ExperimentConfig {
        restarts: 2,
        rollout_duration: 1.0,
        drift_size: 20,
        ..ExperimentConfig::default()
    };
    let dir = ctx.out.join("validate");
    write_atomic(&dir.join("energy.csv"), run_energy_experiment(&fixture)?.to_csv().as_bytes())?;
    write_atomic(&dir.join("drift.csv"), run_drift_experiment(&fixture)?.to_csv().as_bytes())?;
    ctx.info(&format!("wrote fixtures to {}", dir.display()));
    if failures > 0 {
        eprintln!("error: {failures} self-checks failed");
        return Ok(EXIT_VALIDATION);
    }
    Ok(EXIT_OK)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().cloned().fold(0.0, f64::max)
}
