//! Dataset generation, training sweeps and the evaluation protocol.
//!
//! Ground truth is simulated once per trajectory in joint coordinates with
//! symplectic Euler at the fine step, then read off at the coarse step and
//! mapped into each parameterization. Velocities are coarse forward
//! differences, so `x_k + v_k Δt` is exactly the next recorded position.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::gp::{FitOptions, TrainingSet};
use crate::gp_integrator::{
    calibrate_beta, estimate_lipschitz, required_betas, step_gp_constrained, violation_rate, GpviModel,
    LipschitzEstimate, MeanModel, StateBox, DEFAULT_BETA, REGION_INFLATION,
};
use crate::integrator::{explicit_euler_step, step_nominal, symplectic_euler_step, SolverConfig};
use crate::systems::{MechSystem, Parameterization, State, SystemConfig, SystemKind};
use crate::{Error, Result};

const PURPOSE_PERTURB: u64 = 1;
const PURPOSE_TRAIN_INIT: u64 = 2;
const PURPOSE_TEST_INIT: u64 = 3;
const PURPOSE_NOISE: u64 = 4;
const PURPOSE_SUBSAMPLE: u64 = 5;
const PURPOSE_FIT: u64 = 6;
const PURPOSE_ENERGY: u64 = 7;
const PURPOSE_DRIFT: u64 = 8;
pub const PURPOSE_BOUND: u64 = 9;

/// Independent stream of the master seed for one purpose and index pair.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | ((a & 0xffff_ffff) << 24) | (b & 0xff_ffff));
    rng
}

pub fn derived_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    stream(seed, purpose, a, b).random()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSettings {
    pub n_samples: usize,
    pub lipschitz_samples: usize,
    pub validation_states: usize,
    pub test_states: usize,
    pub draws: usize,
    pub delta: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings {
            n_samples: 64,
            lipschitz_samples: 200,
            validation_states: 100,
            test_states: 500,
            draws: 10_000,
            delta: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub parameterizations: Vec<Parameterization>,
    /// Prior mean of the trained variants; the system's default when absent.
    pub mean: Option<MeanModel>,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub duration: f64,
    pub fine_dt: f64,
    pub coarse_dt: f64,
    pub noise_std: f64,
    /// Draw mass factors and friction for the ground truth.
    pub perturb: bool,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub horizon: usize,
    pub window_stride: usize,
    pub restarts: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub energy_sizes: Vec<usize>,
    pub drift_size: usize,
    pub rollout_duration: f64,
    pub bound: BoundSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: SystemKind::Pendulum,
            parameterizations: Parameterization::ALL.to_vec(),
            mean: None,
            train_trajectories: 100,
            test_trajectories: 100,
            duration: 2.0,
            fine_dt: 1e-4,
            coarse_dt: 1e-2,
            noise_std: 1e-3,
            perturb: true,
            sizes: vec![8, 16, 32, 64, 128, 256, 512],
            repetitions: 10,
            horizon: 20,
            window_stride: 20,
            restarts: 20,
            seed: 0,
            solver: SolverConfig::default(),
            energy_sizes: vec![10, 20],
            drift_size: 50,
            rollout_duration: 10.0,
            bound: BoundSettings::default(),
        }
    }
}

/// Pendulum and cartpole start from the nominal model; the double pendulum
/// and the fourbar only get a constant mean.
pub fn default_mean(kind: SystemKind) -> MeanModel {
    match kind {
        SystemKind::Pendulum | SystemKind::Cartpole => MeanModel::Nominal,
        SystemKind::DoublePendulum | SystemKind::Fourbar => MeanModel::Constant,
    }
}

impl ExperimentConfig {
    pub fn for_system(system: SystemKind) -> Self {
        ExperimentConfig {
            system,
            ..Default::default()
        }
    }

    pub fn mean_model(&self) -> MeanModel {
        self.mean.unwrap_or_else(|| default_mean(self.system))
    }

    /// Fine steps per coarse step.
    pub fn step_ratio(&self) -> Result<usize> {
        let r = self.coarse_dt / self.fine_dt;
        let k = r.round();
        if !(self.fine_dt > 0.0 && self.coarse_dt > 0.0) || k < 1.0 || (r - k).abs() > 1e-9 * k {
            return Err(Error::Config(format!(
                "coarse dt {} is not a positive integer multiple of fine dt {}",
                self.coarse_dt, self.fine_dt
            )));
        }
        Ok(k as usize)
    }

    /// Recorded positions per trajectory, including both endpoints.
    pub fn n_positions(&self) -> usize {
        (self.duration / self.coarse_dt).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.step_ratio()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.parameterizations.is_empty() {
            return bad("no parameterizations selected");
        }
        if self.train_trajectories == 0 || self.test_trajectories == 0 {
            return bad("need at least one training and one test trajectory");
        }
        if !(self.duration > 0.0) || self.n_positions() < 3 {
            return bad("duration must cover at least two coarse steps");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be non-empty and positive");
        }
        if self.restarts == 0 || self.repetitions == 0 {
            return bad("restarts and repetitions must be at least 1");
        }
        if self.horizon == 0 || self.window_stride == 0 {
            return bad("horizon and window_stride must be at least 1");
        }
        if self.horizon + 1 > self.n_positions() - 1 {
            return bad("horizon longer than a trajectory");
        }
        if !(self.rollout_duration > 0.0) {
            return bad("rollout_duration must be positive");
        }
        Ok(())
    }
}

/// One parameterization's data: noisy training pairs and noiseless test
/// trajectories, both from the same ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub ground_truth: SystemConfig,
    pub coarse_dt: f64,
    pub noise_std: f64,
    /// Pairs `(z_k, v_{k+1})`, trajectory by trajectory.
    pub train: TrainingSet,
    /// Coarse joint positions of each test trajectory.
    pub test_joint_positions: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn parameterization(&self) -> Parameterization {
        self.ground_truth.parameterization
    }

    pub fn truth(&self) -> Result<MechSystem> {
        self.ground_truth.build()
    }

    /// Noiseless test states in `param`.
    pub fn test_states(&self, param: Parameterization) -> Result<Vec<Vec<State>>> {
        let sys = self.truth()?.with_parameterization(param);
        Ok(self
            .test_joint_positions
            .iter()
            .map(|q| states_from_joint(&sys, q, self.coarse_dt))
            .collect())
    }
}

pub fn dataset_path(out: &Path, kind: SystemKind, param: Parameterization) -> PathBuf {
    out.join("data").join(kind.name()).join(param.name()).join("dataset.json")
}

pub fn model_path(out: &Path, kind: SystemKind, param: Parameterization, n: usize, rep: usize) -> PathBuf {
    out.join("models")
        .join(kind.name())
        .join(param.name())
        .join(format!("n{n}_r{rep}"))
        .join("model.json")
}

pub fn results_dir(out: &Path, kind: SystemKind) -> PathBuf {
    out.join("results").join(kind.name())
}

/// The perturbed ground truth in joint coordinates.
pub fn ground_truth(config: &ExperimentConfig) -> MechSystem {
    let nominal = MechSystem::nominal(config.system, Parameterization::Minimal);
    if config.perturb {
        nominal.perturb(&mut stream(config.seed, PURPOSE_PERTURB, 0, 0))
    } else {
        nominal
    }
}

/// Coarse joint positions of a fine-step symplectic Euler run from `start`.
pub fn simulate_joint(truth: &MechSystem, start: &State, fine_dt: f64, ratio: usize, n_positions: usize) -> Result<Vec<Vec<f64>>> {
    let mut s = start.clone();
    let mut out = Vec::with_capacity(n_positions);
    out.push(s.x.clone());
    for _ in 1..n_positions {
        for _ in 0..ratio {
            s = symplectic_euler_step(truth, &s, fine_dt)?;
        }
        if !s.is_finite() {
            return Err(Error::Input("ground-truth simulation diverged".into()));
        }
        out.push(s.x.clone());
    }
    Ok(out)
}

/// States `(x_k, (x_{k+1} − x_k)/Δt)` for all but the last position.
pub fn states_from_joint(system: &MechSystem, joint_positions: &[Vec<f64>], dt: f64) -> Vec<State> {
    let zeros = vec![0.0; system.n_joints()];
    let xs: Vec<Vec<f64>> = joint_positions.iter().map(|q| system.from_joint(q, &zeros).x).collect();
    xs.windows(2)
        .map(|w| State::new(w[0].clone(), w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) / dt).collect()))
        .collect()
}

fn simulate_set(config: &ExperimentConfig, truth: &MechSystem, purpose: u64, count: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let ratio = config.step_ratio()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let start = truth.random_initial_state(&mut stream(config.seed, purpose, i as u64, 0));
            simulate_joint(truth, &start, config.fine_dt, ratio, config.n_positions()).map_err(|e| Error::Dataset {
                trajectory: i,
                source: Box::new(e),
            })
        })
        .collect()
}

fn training_pairs(
    config: &ExperimentConfig,
    system: &MechSystem,
    param_index: usize,
    trajectories: &[Vec<Vec<f64>>],
) -> Result<TrainingSet> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, q) in trajectories.iter().enumerate() {
        let states = states_from_joint(system, q, config.coarse_dt);
        let mut rng = stream(config.seed, PURPOSE_NOISE, i as u64, param_index as u64);
        let mut noisy = |v: f64| v + config.noise_std * rng.sample::<f64, _>(StandardNormal);
        for pair in states.windows(2) {
            inputs.push(pair[0].z().into_iter().map(&mut noisy).collect());
            targets.push(pair[1].v.iter().map(|&v| noisy(v)).collect());
        }
    }
    TrainingSet::new(inputs, targets)
}

/// Datasets for every configured parameterization, sharing one ground truth
/// and one set of simulated trajectories.
pub fn generate_datasets(config: &ExperimentConfig) -> Result<Vec<Dataset>> {
    config.validate()?;
    let truth = ground_truth(config);
    let train = simulate_set(config, &truth, PURPOSE_TRAIN_INIT, config.train_trajectories)?;
    let test = simulate_set(config, &truth, PURPOSE_TEST_INIT, config.test_trajectories)?;
    config
        .parameterizations
        .iter()
        .map(|&param| {
            let system = truth.with_parameterization(param);
            let param_index = Parameterization::ALL.iter().position(|&p| p == param).unwrap();
            Ok(Dataset {
                seed: config.seed,
                ground_truth: SystemConfig::from_system(&system),
                coarse_dt: config.coarse_dt,
                noise_std: config.noise_std,
                train: training_pairs(config, &system, param_index, &train)?,
                test_joint_positions: test.clone(),
            })
        })
        .collect()
}

pub fn generate_dataset(config: &ExperimentConfig, param: Parameterization) -> Result<Dataset> {
    let single = ExperimentConfig {
        parameterizations: vec![param],
        ..config.clone()
    };
    Ok(generate_datasets(&single)?.remove(0))
}

/// `n` rows drawn uniformly without replacement, kept in source order.
pub fn subsample_training(full: &TrainingSet, n: usize, seed: u64) -> Result<TrainingSet> {
    if n == 0 || n > full.len() {
        return Err(Error::Input(format!("cannot draw {n} samples from {} rows", full.len())));
    }
    let mut rows = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), full.len(), n).into_vec();
    rows.sort_unstable();
    TrainingSet::new(
        rows.iter().map(|&i| full.inputs[i].clone()).collect(),
        rows.iter().map(|&i| full.targets[i].clone()).collect(),
    )
}

pub fn subsample_seed(config: &ExperimentConfig, n: usize, rep: usize) -> u64 {
    derived_seed(config.seed, PURPOSE_SUBSAMPLE, n as u64, rep as u64)
}

pub fn fit_seed(config: &ExperimentConfig, n: usize, rep: usize) -> u64 {
    derived_seed(config.seed, PURPOSE_FIT, n as u64, rep as u64)
}

/// Trains the integrator for one `(parameterization, size, repetition)` job.
pub fn train_variant(config: &ExperimentConfig, dataset: &Dataset, n: usize, rep: usize) -> Result<GpviModel> {
    let data = subsample_training(&dataset.train, n, subsample_seed(config, n, rep))?;
    let nominal = dataset.truth()?.nominal_twin();
    GpviModel::train(
        &nominal,
        config.mean_model(),
        &data,
        dataset.coarse_dt,
        &FitOptions::new(config.restarts, fit_seed(config, n, rep)),
        config.solver,
    )
}

/// Segment errors of one model over all test windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentErrors {
    /// Mean squared reference-position error at the last window step.
    pub final_mse: Vec<f64>,
    /// The same error averaged over all window steps.
    pub stepwise_mse: Vec<f64>,
    /// `(trajectory, start index)` of windows whose rollout failed.
    pub excluded: Vec<(usize, usize)>,
}

impl SegmentErrors {
    pub fn failures(&self) -> usize {
        self.excluded.len()
    }

    pub fn extend(&mut self, other: SegmentErrors) {
        self.final_mse.extend(other.final_mse);
        self.stepwise_mse.extend(other.stepwise_mse);
        self.excluded.extend(other.excluded);
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Rolls `step` over every `horizon`-step window starting at `0, stride,
/// 2 stride, …` of each trajectory, always from the noiseless state.
pub fn evaluate_multistep<F>(
    system: &MechSystem,
    trajectories: &[Vec<State>],
    horizon: usize,
    stride: usize,
    step: F,
) -> SegmentErrors
where
    F: Fn(&State) -> Result<State> + Sync,
{
    let windows: Vec<(usize, usize)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(t, states)| {
            (0..states.len().saturating_sub(horizon))
                .step_by(stride)
                .map(move |s| (t, s))
        })
        .collect();
    let outcomes: Vec<Option<(f64, f64)>> = windows
        .par_iter()
        .map(|&(t, start)| {
            let truth = &trajectories[t];
            let mut s = truth[start].clone();
            let mut total = 0.0;
            let mut last = 0.0;
            for k in 1..=horizon {
                s = step(&s).ok().filter(State::is_finite)?;
                last = mse(
                    &system.to_reference_positions(&s),
                    &system.to_reference_positions(&truth[start + k]),
                );
                total += last;
            }
            Some((last, total / horizon as f64))
        })
        .collect();
    let mut out = SegmentErrors::default();
    for (w, o) in windows.into_iter().zip(outcomes) {
        match o {
            Some((f, a)) if f.is_finite() => {
                out.final_mse.push(f);
                out.stepwise_mse.push(a);
            }
            _ => out.excluded.push(w),
        }
    }
    out
}

/// Linear-interpolation percentile, `q ∈ [0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// 0 for the nominal-only baseline.
    pub n_samples: usize,
    pub variant: String,
    pub median_mse: f64,
    pub p10: f64,
    pub p90: f64,
    pub failures: usize,
}

impl SummaryRow {
    pub fn from_errors(n_samples: usize, variant: &str, values: &[f64], failures: usize) -> Self {
        SummaryRow {
            n_samples,
            variant: variant.to_string(),
            median_mse: percentile(values, 50.0),
            p10: percentile(values, 10.0),
            p90: percentile(values, 90.0),
            failures,
        }
    }
}

pub const NOMINAL_VARIANT: &str = "nominal";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvaluationSummary {
    /// Final-step errors.
    pub rows: Vec<SummaryRow>,
    /// Errors averaged over the window.
    pub stepwise_rows: Vec<SummaryRow>,
}

impl EvaluationSummary {
    pub fn row(&self, variant: &str, n_samples: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant && r.n_samples == n_samples)
    }

    pub fn median(&self, variant: &str, n_samples: usize) -> Option<f64> {
        self.row(variant, n_samples).map(|r| r.median_mse)
    }

    pub fn nominal_median(&self) -> Option<f64> {
        self.median(NOMINAL_VARIANT, 0)
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("n_samples,variant,median_mse,p10,p90,failures\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{}\n",
            r.n_samples, r.variant, r.median_mse, r.p10, r.p90, r.failures
        ));
    }
    s
}

pub fn write_summary(dir: &Path, summary: &EvaluationSummary) -> Result<()> {
    write_atomic(&dir.join("summary.csv"), summary_csv(&summary.rows).as_bytes())?;
    write_atomic(&dir.join("summary_stepwise.csv"), summary_csv(&summary.stepwise_rows).as_bytes())
}

/// Nominal variational integrator (unperturbed twin, joint coordinates) on the test windows.
pub fn evaluate_nominal(config: &ExperimentConfig, dataset: &Dataset) -> Result<SegmentErrors> {
    let system = dataset.truth()?.nominal_twin().with_parameterization(Parameterization::Minimal);
    let tests = dataset.test_states(Parameterization::Minimal)?;
    let solver = config.solver;
    let dt = dataset.coarse_dt;
    Ok(evaluate_multistep(&system, &tests, config.horizon, config.window_stride, |s| {
        step_nominal(&system, s, dt, &solver).map(|r| r.next_state)
    }))
}

pub fn evaluate_model(config: &ExperimentConfig, dataset: &Dataset, model: &GpviModel) -> Result<SegmentErrors> {
    let tests = dataset.test_states(dataset.parameterization())?;
    Ok(evaluate_multistep(&model.system, &tests, config.horizon, config.window_stride, |s| {
        model.step(s).map(|r| r.next_state)
    }))
}

/// Progress callback: `(job index, job count, description)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize, &str) + Sync);

/// Trains and evaluates every `(parameterization, size, repetition)` job.
/// Repetitions of a size are pooled before taking percentiles. Results are
/// reduced in job order, so they do not depend on the thread count.
pub fn run_sweep(config: &ExperimentConfig, datasets: &[Dataset], progress: Progress<'_>) -> Result<EvaluationSummary> {
    config.validate()?;
    let first = datasets.first().ok_or_else(|| Error::Input("no datasets".into()))?;
    let jobs: Vec<(usize, usize, usize)> = (0..datasets.len())
        .flat_map(|d| {
            config
                .sizes
                .iter()
                .flat_map(move |&n| (0..config.repetitions).map(move |r| (d, n, r)))
        })
        .collect();
    let total = jobs.len();
    let results: Vec<Result<SegmentErrors>> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(d, n, r))| {
            let ds = &datasets[d];
            progress(j, total, &format!("{} n={n} rep={r}", ds.parameterization()));
            let model = train_variant(config, ds, n, r)?;
            evaluate_model(config, ds, &model)
        })
        .collect();

    let nominal = evaluate_nominal(config, first)?;
    let mut summary = EvaluationSummary::default();
    summary.rows.push(SummaryRow::from_errors(0, NOMINAL_VARIANT, &nominal.final_mse, nominal.failures()));
    summary
        .stepwise_rows
        .push(SummaryRow::from_errors(0, NOMINAL_VARIANT, &nominal.stepwise_mse, nominal.failures()));
    let mut results = results.into_iter();
    for ds in datasets {
        let variant = ds.parameterization().name();
        for &n in &config.sizes {
            let mut pooled = SegmentErrors::default();
            for _ in 0..config.repetitions {
                pooled.extend(results.next().expect("one result per job")?);
            }
            summary
                .rows
                .push(SummaryRow::from_errors(n, variant, &pooled.final_mse, pooled.failures()));
            summary
                .stepwise_rows
                .push(SummaryRow::from_errors(n, variant, &pooled.stepwise_mse, pooled.failures()));
        }
    }
    Ok(summary)
}

/// `|E(t) − E(0)|` series, one column per integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub dt: f64,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl TimeSeries {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for (name, _) in &self.columns {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        let len = self.columns.iter().map(|(_, v)| v.len()).min().unwrap_or(0);
        for k in 0..len {
            s.push_str(&format!("{}", (k as f64 * self.dt * 1e6).round() / 1e6));
            for (_, v) in &self.columns {
                s.push_str(&format!(",{:e}", v[k]));
            }
            s.push('\n');
        }
        s
    }
}

/// One noiseless coarse trajectory of the conservative nominal system,
/// returned as `(z_k, v_{k+1})` pairs in `param` plus the first state.
fn single_trajectory(config: &ExperimentConfig, kind: SystemKind, param: Parameterization, purpose: u64) -> Result<(TrainingSet, State)> {
    let truth = MechSystem::nominal(kind, Parameterization::Minimal);
    let start = truth.random_initial_state(&mut stream(config.seed, purpose, 0, 0));
    let q = simulate_joint(&truth, &start, config.fine_dt, config.step_ratio()?, config.n_positions())
        .map_err(|e| Error::Dataset {
            trajectory: 0,
            source: Box::new(e),
        })?;
    let states = states_from_joint(&truth.with_parameterization(param), &q, config.coarse_dt);
    let inputs = states[..states.len() - 1].iter().map(State::z).collect();
    let targets = states[1..].iter().map(|s| s.v.clone()).collect();
    Ok((TrainingSet::new(inputs, targets)?, states[0].clone()))
}

fn train_single(config: &ExperimentConfig, kind: SystemKind, data: &TrainingSet, n: usize, purpose: u64) -> Result<GpviModel> {
    let data = subsample_training(data, n.min(data.len()), derived_seed(config.seed, purpose, n as u64, 1))?;
    GpviModel::train(
        &MechSystem::nominal(kind, Parameterization::Maximal),
        MeanModel::Constant,
        &data,
        config.coarse_dt,
        &FitOptions::new(config.restarts, derived_seed(config.seed, purpose, n as u64, 2)),
        config.solver,
    )
}

fn rollout_steps(config: &ExperimentConfig) -> usize {
    (config.rollout_duration / config.coarse_dt).round() as usize
}

/// Energy error of the nominal variational integrator and explicit Euler on
/// the conservative pendulum, and of constant-mean GP integrators trained
/// in maximal coordinates on one trajectory with `energy_sizes` samples.
pub fn run_energy_experiment(config: &ExperimentConfig) -> Result<TimeSeries> {
    config.validate()?;
    let steps = rollout_steps(config);
    let kind = SystemKind::Pendulum;
    let (data, start) = single_trajectory(config, kind, Parameterization::Maximal, PURPOSE_ENERGY)?;
    let maximal = MechSystem::nominal(kind, Parameterization::Maximal);
    let minimal = maximal.with_parameterization(Parameterization::Minimal);
    let (q, qdot) = maximal.joint_state(&start.x, &start.v);
    let joint_start = State::new(q, qdot);

    let energy_errors = |system: &MechSystem, states: &[State]| -> Vec<f64> {
        let e0 = system.energy(&states[0]);
        states.iter().map(|s| (system.energy(s) - e0).abs()).collect()
    };
    let mut columns = Vec::new();

    let mut ee = vec![joint_start.clone()];
    let mut vi = vec![joint_start];
    for _ in 0..steps {
        ee.push(explicit_euler_step(&minimal, ee.last().unwrap(), config.coarse_dt)?);
        vi.push(step_nominal(&minimal, vi.last().unwrap(), config.coarse_dt, &config.solver)?.next_state);
    }
    columns.push(("explicit_euler".to_string(), energy_errors(&minimal, &ee)));
    columns.push(("nominal_vi".to_string(), energy_errors(&minimal, &vi)));

    for &n in &config.energy_sizes {
        let model = train_single(config, kind, &data, n, PURPOSE_ENERGY)?;
        let mut states = vec![start.clone()];
        for _ in 0..steps {
            states.push(step_gp_constrained(&model, states.last().unwrap())?.next_state);
        }
        columns.push((format!("gp_n{n}"), energy_errors(&maximal, &states)));
    }
    Ok(TimeSeries {
        dt: config.coarse_dt,
        columns,
    })
}

/// `‖g(x)‖∞` along explicit Euler and the trained constrained GP integrator
/// on the double pendulum in maximal coordinates.
pub fn run_drift_experiment(config: &ExperimentConfig) -> Result<TimeSeries> {
    config.validate()?;
    let steps = rollout_steps(config);
    let kind = SystemKind::DoublePendulum;
    let (data, start) = single_trajectory(config, kind, Parameterization::Maximal, PURPOSE_DRIFT)?;
    let system = MechSystem::nominal(kind, Parameterization::Maximal);
    let model = train_single(config, kind, &data, config.drift_size, PURPOSE_DRIFT)?;

    let mut ee = vec![start.clone()];
    let mut gp = vec![start];
    for _ in 0..steps {
        ee.push(explicit_euler_step(&system, ee.last().unwrap(), config.coarse_dt)?);
        gp.push(step_gp_constrained(&model, gp.last().unwrap())?.next_state);
    }
    let drift = |states: &[State]| states.iter().map(|s| system.constraint_norm(&s.x)).collect();
    Ok(TimeSeries {
        dt: config.coarse_dt,
        columns: vec![
            ("explicit_euler".to_string(), drift(&ee)),
            (format!("gp_n{}", data.len().min(config.drift_size)), drift(&gp)),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub system: SystemKind,
    pub parameterization: Parameterization,
    pub n_samples: usize,
    pub lipschitz: f64,
    pub lipschitz_samples: usize,
    pub lipschitz_skipped: usize,
    pub delta: f64,
    /// Calibrated on the validation states.
    pub beta: f64,
    pub gamma: f64,
    pub validation_states: usize,
    pub test_states: usize,
    pub draws: usize,
    pub test_violation_rate: f64,
    pub default_beta_violation_rate: f64,
}

/// Trains at `bound.n_samples`, estimates the projection's Lipschitz
/// constant, calibrates `β` on validation states and measures the violation
/// rate on disjoint test states. States come from the test trajectories.
pub fn run_bound_experiment(config: &ExperimentConfig, dataset: &Dataset) -> Result<BoundReport> {
    let b = &config.bound;
    let model = train_variant(config, dataset, b.n_samples, 0)?;
    let region = StateBox::around(model.gp.inputs(), REGION_INFLATION)?;
    let LipschitzEstimate { value, samples, skipped } =
        estimate_lipschitz(&model, &region, b.lipschitz_samples, derived_seed(config.seed, PURPOSE_BOUND, 0, 0))?;

    let pool: Vec<State> = dataset
        .test_states(dataset.parameterization())?
        .into_iter()
        .flatten()
        .collect();
    let wanted = b.validation_states + b.test_states;
    if pool.len() < wanted {
        return Err(Error::Input(format!("need {wanted} test states, dataset has {}", pool.len())));
    }
    let picks = index::sample(&mut stream(config.seed, PURPOSE_BOUND, 1, 0), pool.len(), wanted).into_vec();
    let (val_idx, test_idx) = picks.split_at(b.validation_states);
    let val: Vec<State> = val_idx.iter().map(|&i| pool[i].clone()).collect();
    let test: Vec<State> = test_idx.iter().map(|&i| pool[i].clone()).collect();

    let val_q = required_betas(&model, &val, value, b.draws, derived_seed(config.seed, PURPOSE_BOUND, 2, 0))?;
    let beta = calibrate_beta(&val_q, b.delta)?;
    let test_q = required_betas(&model, &test, value, b.draws, derived_seed(config.seed, PURPOSE_BOUND, 3, 0))?;
    Ok(BoundReport {
        system: config.system,
        parameterization: dataset.parameterization(),
        n_samples: b.n_samples,
        lipschitz: value,
        lipschitz_samples: samples,
        lipschitz_skipped: skipped,
        delta: b.delta,
        beta,
        gamma: value * value * beta,
        validation_states: val.len(),
        test_states: test.len(),
        draws: b.draws,
        test_violation_rate: violation_rate(&test_q, beta),
        default_beta_violation_rate: violation_rate(&test_q, DEFAULT_BETA),
    })
}
