//! Variational integrators whose next velocity is corrected by a GP trained
//! on the residual between observed and nominal one-step velocities.
//!
//! Unconstrained systems take `x' = x + v Δt`, the nominal velocity `v̄`
//! from `d₀ = 0`, and `v' = v̄ + k(z,Z)α`. Constrained systems solve the
//! nominal constrained step for `v̄`, apply the same correction to get `v_u`
//! and project `v_u` back onto the discrete constraint manifold.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gp::{FitOptions, GpModel, PriorMean, TrainingSet};
use crate::integrator::{solve_velocity, SolverConfig, StepResult};
use crate::projection::{make_consistent, project_velocity};
use crate::systems::{ConstraintSet, MechSystem, State, SystemConfig};
use crate::{Error, Result};

pub const LIPSCHITZ_SAFETY: f64 = 1.1;
pub const DEFAULT_BETA: f64 = 4.0;
/// Relative inflation of the training-input box used for Lipschitz sampling.
pub const REGION_INFLATION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanModel {
    /// Prior mean is the nominal variational step.
    Nominal,
    /// No dynamics model: per-dimension mean of the training targets.
    Constant,
}

#[derive(Clone, Debug)]
pub struct GpviModel {
    /// Nominal dynamics and the (exactly known) constraints.
    pub system: MechSystem,
    pub mean: MeanModel,
    pub gp: GpModel,
    pub dt: f64,
    pub solver: SolverConfig,
}

/// GP velocity prediction before projection.
#[derive(Clone, Debug)]
pub struct VelocityPrediction {
    pub next_position: Vec<f64>,
    /// Nominal velocity `v̄` (the constant mean without a dynamics model).
    pub nominal: Vec<f64>,
    /// Posterior mean `v_u`.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub nominal_iterations: usize,
}

fn check_data(system: &MechSystem, data: &TrainingSet) -> Result<()> {
    data.validate()?;
    let n = system.dim_x();
    if data.input_dim() != 2 * n {
        return Err(Error::Shape {
            expected: 2 * n,
            got: data.input_dim(),
        });
    }
    if data.output_dim() != n {
        return Err(Error::Shape {
            expected: n,
            got: data.output_dim(),
        });
    }
    Ok(())
}

/// `v̄(z)` for every training input, by the nominal step. Noisy inputs of a
/// constrained system are first moved onto the manifold; the nominal step
/// from an infeasible state mostly reports the constraint violation, which
/// would swamp the residual the GP is meant to learn.
pub fn nominal_targets(system: &MechSystem, data: &TrainingSet, dt: f64, solver: &SolverConfig) -> Result<Vec<Vec<f64>>> {
    data.inputs
        .iter()
        .enumerate()
        .map(|(row, z)| {
            make_consistent(system, &State::from_z(z), dt, solver)
                .and_then(|s| solve_velocity(system, &s.x, &s.v, dt, solver))
                .map(|s| s.next_state.v)
                .map_err(|e| Error::Training {
                    row,
                    source: Box::new(e),
                })
        })
        .collect()
}

impl GpviModel {
    /// Fits the residual GP. With [`MeanModel::Nominal`] the targets are
    /// `y − v̄(z)`; with [`MeanModel::Constant`] they are `y` minus the
    /// target means.
    pub fn train(
        system: &MechSystem,
        mean: MeanModel,
        data: &TrainingSet,
        dt: f64,
        options: &FitOptions,
        solver: SolverConfig,
    ) -> Result<Self> {
        check_data(system, data)?;
        let (residuals, prior) = match mean {
            MeanModel::Nominal => {
                let nominal = nominal_targets(system, data, dt, &solver)?;
                let r = data
                    .targets
                    .iter()
                    .zip(&nominal)
                    .map(|(y, v)| y.iter().zip(v).map(|(a, b)| a - b).collect())
                    .collect();
                (r, PriorMean::External)
            }
            MeanModel::Constant => {
                let prior = PriorMean::constant_from(data);
                let PriorMean::Constant(c) = &prior else { unreachable!() };
                let r = data
                    .targets
                    .iter()
                    .map(|y| y.iter().zip(c).map(|(a, b)| a - b).collect())
                    .collect();
                (r, prior)
            }
        };
        let gp = GpModel::fit(&TrainingSet::new(data.inputs.clone(), residuals)?, prior, options)?;
        Ok(GpviModel {
            system: system.clone(),
            mean,
            gp,
            dt,
            solver,
        })
    }

    /// Wraps an already conditioned GP, e.g. one with no data.
    pub fn from_parts(system: &MechSystem, mean: MeanModel, gp: GpModel, dt: f64, solver: SolverConfig) -> Result<Self> {
        let n = system.dim_x();
        if gp.input_dim() != 2 * n || gp.output_dim() != n {
            return Err(Error::Shape {
                expected: n,
                got: gp.output_dim(),
            });
        }
        let consistent = matches!(
            (mean, gp.prior()),
            (MeanModel::Nominal, PriorMean::External) | (MeanModel::Constant, PriorMean::Constant(_) | PriorMean::Zero)
        );
        if !consistent {
            return Err(Error::Config(format!("GP prior {:?} does not match mean model {mean:?}", gp.prior())));
        }
        Ok(GpviModel {
            system: system.clone(),
            mean,
            gp,
            dt,
            solver,
        })
    }

    pub fn predict(&self, state: &State) -> Result<VelocityPrediction> {
        let mut p = self.predict_mean(state)?;
        p.variance = self.gp.posterior_variance(&state.z())?;
        Ok(p)
    }

    /// [`Self::predict`] without the variance (left empty), for rollouts.
    pub fn predict_mean(&self, state: &State) -> Result<VelocityPrediction> {
        let n = self.system.dim_x();
        if state.x.len() != n || state.v.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: state.x.len(),
            });
        }
        let z = state.z();
        let (next_position, nominal, iterations) = match self.mean {
            MeanModel::Nominal => {
                let step = solve_velocity(&self.system, &state.x, &state.v, self.dt, &self.solver)?;
                (step.next_state.x, step.next_state.v, step.solver_iterations)
            }
            MeanModel::Constant => {
                let x1 = state.x.iter().zip(&state.v).map(|(x, v)| x + v * self.dt).collect();
                let c = self.gp.prior().intrinsic(n).expect("constant mean model");
                (x1, c, 0)
            }
        };
        let mean = self.gp.posterior_mean_with_prior(&z, &nominal)?;
        Ok(VelocityPrediction {
            next_position,
            nominal,
            mean,
            variance: Vec::new(),
            nominal_iterations: iterations,
        })
    }

    /// Dispatches on whether the system has constraints.
    pub fn step(&self, state: &State) -> Result<StepResult> {
        if self.system.is_constrained() {
            step_gp_constrained(self, state)
        } else {
            step_gp_unconstrained(self, state)
        }
    }

    /// `steps + 1` states starting with `state`.
    pub fn rollout(&self, state: &State, steps: usize) -> Result<Vec<State>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(state.clone());
        for _ in 0..steps {
            let next = self.step(out.last().unwrap())?.next_state;
            out.push(next);
        }
        Ok(out)
    }

    pub fn to_bundle(&self, bound: Option<UncertaintyBound>) -> ModelBundle {
        ModelBundle {
            system: SystemConfig::from_system(&self.system),
            mean: self.mean,
            dt: self.dt,
            solver: self.solver,
            bound,
            gp: self.gp.clone(),
        }
    }
}

pub fn step_gp_unconstrained(model: &GpviModel, state: &State) -> Result<StepResult> {
    if model.system.is_constrained() {
        return Err(Error::Config(format!(
            "{} in {} coordinates has constraints",
            model.system.kind, model.system.parameterization
        )));
    }
    let p = model.predict_mean(state)?;
    Ok(StepResult {
        next_state: State::new(p.next_position, p.mean),
        multipliers: Vec::new(),
        solver_iterations: p.nominal_iterations,
        residual_norm: 0.0,
        damped: false,
    })
}

/// Nominal constrained solve, GP correction, then projection. `damped`
/// reports that the projection needed shortened Newton steps, the symptom
/// of a prediction near several feasible velocities.
pub fn step_gp_constrained(model: &GpviModel, state: &State) -> Result<StepResult> {
    if !model.system.is_constrained() {
        return Err(Error::Config(format!(
            "{} in {} coordinates has no constraints",
            model.system.kind, model.system.parameterization
        )));
    }
    let p = model.predict_mean(state)?;
    let proj = project_velocity(&p.mean, &p.next_position, &model.system, model.dt, &model.solver)?;
    let ahead: Vec<f64> = p
        .next_position
        .iter()
        .zip(&proj.velocity)
        .map(|(x, v)| x + v * model.dt)
        .collect();
    let residual_norm = model.system.constraint_norm(&ahead);
    Ok(StepResult {
        next_state: State::new(p.next_position, proj.velocity),
        multipliers: proj.multipliers,
        solver_iterations: p.nominal_iterations + proj.iterations,
        residual_norm,
        damped: proj.damped,
    })
}

/// Axis-aligned box over augmented states `z = [x, v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    /// Bounding box of `inputs`, widened by `inflation` of its width per dimension.
    pub fn around(inputs: &[Vec<f64>], inflation: f64) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| Error::Input("empty input set".into()))?;
        let mut lower = first.clone();
        let mut upper = first.clone();
        for z in inputs {
            for (k, v) in z.iter().enumerate() {
                lower[k] = lower[k].min(*v);
                upper[k] = upper[k].max(*v);
            }
        }
        for k in 0..lower.len() {
            let pad = 0.5 * inflation * (upper[k] - lower[k]);
            lower[k] -= pad;
            upper[k] += pad;
        }
        Ok(StateBox { lower, upper })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest sampled Jacobian 2-norm times the safety factor.
    pub value: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Central-difference Jacobian of `v_u ↦ project(v_u)` at one point.
pub fn projection_jacobian<C: ConstraintSet + ?Sized>(
    constraints: &C,
    next_position: &[f64],
    v_u: &[f64],
    dt: f64,
    solver: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let n = v_u.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * v_u[j].abs().max(1.0);
        let mut plus = v_u.to_vec();
        let mut minus = v_u.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let p = project_velocity(&plus, next_position, constraints, dt, solver)?.velocity;
        let m = project_velocity(&minus, next_position, constraints, dt, solver)?.velocity;
        for i in 0..n {
            jac[(i, j)] = (p[i] - m[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Safety-scaled maximum Jacobian norm over the given `(x_{k+1}, v_u)` points.
/// Points where the projection fails are skipped and counted.
pub fn projection_lipschitz<C, I>(constraints: &C, points: I, dt: f64, solver: &SolverConfig) -> Result<LipschitzEstimate>
where
    C: ConstraintSet + ?Sized,
    I: IntoIterator<Item = (Vec<f64>, Vec<f64>)>,
{
    let mut best = 0.0f64;
    let (mut samples, mut skipped) = (0, 0);
    for (x1, v_u) in points {
        samples += 1;
        match projection_jacobian(constraints, &x1, &v_u, dt, solver) {
            Ok(jac) => best = best.max(jac.singular_values().max()),
            Err(_) => skipped += 1,
        }
    }
    if samples == 0 || skipped == samples {
        return Err(Error::Estimation { samples });
    }
    Ok(LipschitzEstimate {
        value: LIPSCHITZ_SAFETY * best,
        samples,
        skipped,
    })
}

/// Lipschitz constant of the projection around the model's predictions.
/// Sample `i` draws from its own stream, so more samples never lower the
/// estimate for a fixed seed.
pub fn estimate_lipschitz(model: &GpviModel, region: &StateBox, samples: usize, seed: u64) -> Result<LipschitzEstimate> {
    if samples < 2 {
        return Err(Error::Input(format!("need at least 2 Lipschitz samples, got {samples}")));
    }
    if !model.system.is_constrained() {
        // The projection is the identity.
        return Ok(LipschitzEstimate {
            value: LIPSCHITZ_SAFETY,
            samples,
            skipped: 0,
        });
    }
    let mut failed_setup = 0;
    let mut points = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z = region.sample(&mut rng);
        let setup = make_consistent(&model.system, &State::from_z(&z), model.dt, &model.solver)
            .and_then(|s| model.predict_mean(&s));
        match setup {
            Ok(p) => points.push((p.next_position, p.mean)),
            Err(_) => failed_setup += 1,
        }
    }
    let mut est = projection_lipschitz(&model.system, points, model.dt, &model.solver)
        .map_err(|_| Error::Estimation { samples })?;
    est.samples += failed_setup;
    est.skipped += failed_setup;
    Ok(est)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBound {
    pub lipschitz: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl UncertaintyBound {
    pub fn new(lipschitz: f64, beta: f64, delta: f64) -> Result<Self> {
        if !(lipschitz >= 0.0 && beta > 0.0 && delta > 0.0 && delta < 1.0) {
            return Err(Error::Input(format!("invalid bound parameters L={lipschitz} β={beta} δ={delta}")));
        }
        Ok(UncertaintyBound {
            lipschitz,
            beta,
            gamma: lipschitz * lipschitz * beta,
            delta,
        })
    }
}

/// Bound on every velocity component, `√γ ‖σ_u(z)‖∞`.
pub fn prediction_bound(model: &GpviModel, z: &[f64], bound: &UncertaintyBound) -> Result<Vec<f64>> {
    let variance = model.gp.posterior_variance(z)?;
    let worst = variance.iter().cloned().fold(0.0, f64::max);
    Ok(vec![(bound.gamma * worst).sqrt(); variance.len()])
}

/// Monte Carlo check of the bound in the max norm: for each state, draws
/// `v_u` from the posterior marginal at `z`, projects it, and records
/// `‖v(v_u) − v(v̄_u)‖∞² / (L² ‖σ_u‖∞²)`. Every velocity component is held to
/// the same scale because the projection mixes components. A draw violates
/// the bound for `β` exactly when its value is `≥ β`. Failed projections
/// count as `+∞`.
pub fn required_betas(model: &GpviModel, states: &[State], lipschitz: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.len() * draws);
    let constrained = model.system.is_constrained();
    for (i, state) in states.iter().enumerate() {
        let p = model.predict(state)?;
        let sigma: Vec<f64> = p.variance.iter().map(|v| v.sqrt()).collect();
        let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
        let scale = lipschitz * lipschitz * sigma_max * sigma_max;
        let center = if constrained {
            project_velocity(&p.mean, &p.next_position, &model.system, model.dt, &model.solver)?.velocity
        } else {
            p.mean.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for _ in 0..draws {
            let v_u: Vec<f64> = p
                .mean
                .iter()
                .zip(&sigma)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let projected = if constrained {
                project_velocity(&v_u, &p.next_position, &model.system, model.dt, &model.solver).map(|q| q.velocity)
            } else {
                Ok(v_u)
            };
            let q = match projected {
                Ok(v) => {
                    let d2 = v.iter().zip(&center).fold(0.0f64, |m, (a, b)| m.max((a - b).powi(2)));
                    if scale > 0.0 {
                        d2 / scale
                    } else if d2 == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
                Err(_) => f64::INFINITY,
            };
            out.push(q);
        }
    }
    Ok(out)
}

pub fn violation_rate(required: &[f64], beta: f64) -> f64 {
    if required.is_empty() {
        return 0.0;
    }
    required.iter().filter(|&&q| q >= beta).count() as f64 / required.len() as f64
}

/// Smallest `β = 2^(k/2)`, `k ∈ [−40, 40]`, whose violation rate on the
/// validation values is at most `δ`. The grid contains the default `β = 4`.
pub fn calibrate_beta(required: &[f64], delta: f64) -> Result<f64> {
    (-40..=40)
        .map(|k| 2f64.powf(k as f64 / 2.0))
        .find(|&b| violation_rate(required, b) <= delta)
        .ok_or_else(|| Error::Input(format!("no β up to 2^20 meets δ = {delta}")))
}

/// JSON bundle of a trained integrator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub system: SystemConfig,
    pub mean: MeanModel,
    pub dt: f64,
    pub solver: SolverConfig,
    #[serde(default)]
    pub bound: Option<UncertaintyBound>,
    pub gp: GpModel,
}

impl ModelBundle {
    pub fn into_model(self) -> Result<(GpviModel, Option<UncertaintyBound>)> {
        let system = self.system.build()?;
        let model = GpviModel::from_parts(&system, self.mean, self.gp, self.dt, self.solver)?;
        Ok((model, self.bound))
    }
}

/// One-step velocity RMSE of `step` against recorded targets.
pub fn one_step_rmse(data: &TrainingSet, mut step: impl FnMut(&State) -> Result<Vec<f64>>) -> Result<f64> {
    let n = data.output_dim();
    let mut sum = 0.0;
    for (z, y) in data.inputs.iter().zip(&data.targets) {
        let v = step(&State::from_z(z))?;
        sum += v.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sum / (data.len() * n) as f64).sqrt())
}
