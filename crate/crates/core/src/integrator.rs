//! First-order variational integrator and the Euler baselines.
//!
//! The discrete action over the stencil `x_k, x_{k+1}, x_{k+2}` is
//! `S_d = Σ L(x_i, v_i) Δt` with `v_i = (x_{i+1} − x_i)/Δt`. Stationarity in
//! the middle point gives the discrete Euler–Lagrange residual
//!
//! ```text
//! d0 = p(x_{k+1}, v_{k+1}) − p(x_k, v_k) − Δt (∂T/∂x − ∇V + f)(x_{k+1}, v_{k+1})
//! ```
//!
//! with `p = M(x) v`. Constrained steps solve `d0 − G(x_{k+1})ᵀλ = 0` together
//! with `g(x_{k+1} + v_{k+1} Δt) = 0`. The multiplier absorbs one factor of
//! `Δt`: `λ` is the constraint impulse over the step, i.e. `Δt` times the
//! constraint force.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::linalg::{solve_dense, solve_saddle};
use crate::systems::{MechSystem, State};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bound on the infinity norm of the (scaled) residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-10,
            max_iterations: 50,
            backtrack: 0.5,
            max_halvings: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub next_state: State,
    pub multipliers: Vec<f64>,
    pub solver_iterations: usize,
    pub residual_norm: f64,
    /// True when some Newton iteration needed a shortened step.
    pub damped: bool,
}

pub fn discrete_velocity(x_k: &[f64], x_k1: &[f64], dt: f64) -> Vec<f64> {
    x_k.iter().zip(x_k1).map(|(a, b)| (b - a) / dt).collect()
}

/// Discrete Euler–Lagrange residual at the middle stencil point `x_k1`, with
/// `x_k = x_k1 − v_k Δt` and `x_{k+2} = x_k1 + v_k1 Δt`.
pub fn d0_residual(system: &MechSystem, x_k1: &[f64], v_k: &[f64], v_k1: &[f64], dt: f64) -> DVector<f64> {
    let x_k: Vec<f64> = x_k1.iter().zip(v_k).map(|(x, v)| x - v * dt).collect();
    let prev = system.terms(&x_k, v_k);
    let next = system.terms(x_k1, v_k1);
    &next.momentum - &prev.momentum - (&next.dtdx - &next.grad_potential + &next.friction) * dt
}

/// Second-order model of the kinetic terms at a fixed position. Every
/// velocity-dependent quantity in `d0` is polynomial in `v` once gradients
/// and Hessians of the kinematic outputs are known, so Newton iterations on
/// `v_{k+1}` need no further differentiation.
struct FrozenPosition {
    mass: DMatrix<f64>,
    grad_potential: DVector<f64>,
    /// `(weight, gradient, Hessian)` of every kinetic output row.
    rows: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
    /// `(coefficient, joint-rate gradient)` of every joint with friction.
    friction: Vec<(f64, DVector<f64>)>,
}

impl FrozenPosition {
    fn new(system: &MechSystem, x: &[f64]) -> Self {
        let jet = system.full_jet(x);
        let n = x.len();
        let mut rows = Vec::with_capacity(3 * system.n_bodies());
        let mut mass = DMatrix::zeros(n, n);
        let mut grad_potential = DVector::zeros(n);
        for row in 0..3 * system.n_bodies() {
            let b = row / 3;
            let w = if row % 3 == 2 { system.body_inertia(b) } else { system.body_mass(b) };
            let gr = jet.grad.row(row).transpose();
            mass.ger(w, &gr, &gr, 1.0);
            if row % 3 == 1 {
                grad_potential.axpy(system.body_mass(b) * system.params.gravity, &gr, 1.0);
            }
            rows.push((w, gr, jet.hess[row].clone()));
        }
        let friction = system
            .joint_friction()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(j, &c)| (c, jet.grad.row(system.joint_row(j)).transpose()))
            .collect();
        FrozenPosition {
            mass,
            grad_potential,
            rows,
            friction,
        }
    }

    /// `p(v) − Δt (∂T/∂x(v) − ∇V + f(v))`.
    fn forward(&self, v: &DVector<f64>, dt: f64) -> DVector<f64> {
        let mut out = &self.mass * v + &self.grad_potential * dt;
        for (w, gr, h) in &self.rows {
            out -= (h * v) * (dt * w * gr.dot(v));
        }
        for (c, gr) in &self.friction {
            out += gr * (dt * c * gr.dot(v));
        }
        out
    }

    fn jacobian(&self, v: &DVector<f64>, dt: f64) -> DMatrix<f64> {
        let mut jac = self.mass.clone();
        for (w, gr, h) in &self.rows {
            let hv = h * v;
            jac.ger(-dt * w, &hv, gr, 1.0);
            jac -= h * (dt * w * gr.dot(v));
        }
        for (c, gr) in &self.friction {
            jac.ger(dt * c, gr, gr, 1.0);
        }
        jac
    }
}

/// Residual and Jacobian of a Newton system in unknown `u`.
pub(crate) trait NewtonProblem {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Last resort for a singular Newton matrix; returns false if the
    /// problem has no regularization to offer.
    fn regularize(&self, _jac: &mut DMatrix<f64>) -> bool {
        false
    }
}

pub(crate) struct NewtonOutcome {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub damped: bool,
}

pub(crate) fn newton(problem: &impl NewtonProblem, init: DVector<f64>, config: &SolverConfig, what: &str) -> Result<NewtonOutcome> {
    let mut u = init;
    let mut r = problem.residual(&u)?;
    let mut norm = r.amax();
    let mut history = vec![norm];
    let mut damped = false;
    for it in 0..config.max_iterations {
        if norm <= config.tolerance {
            return Ok(NewtonOutcome {
                solution: u,
                iterations: it,
                residual_norm: norm,
                damped,
            });
        }
        let jac = problem.jacobian(&u)?;
        let delta = match solve_dense(&jac, &(-&r), what) {
            Ok(d) => d,
            Err(e) => {
                let mut reg = jac;
                if !problem.regularize(&mut reg) {
                    return Err(e);
                }
                solve_dense(&reg, &(-&r), what)?
            }
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        for halving in 0..=config.max_halvings {
            let trial = &u + &delta * alpha;
            if let Ok(rt) = problem.residual(&trial) {
                let nt = rt.amax();
                if nt.is_finite() && (nt < norm || nt <= config.tolerance) {
                    damped |= halving > 0;
                    accepted = Some((trial, rt, nt));
                    break;
                }
            }
            alpha *= config.backtrack;
        }
        match accepted {
            Some((trial, rt, nt)) => {
                u = trial;
                r = rt;
                norm = nt;
                history.push(norm);
            }
            None => break,
        }
    }
    if norm <= config.tolerance {
        return Ok(NewtonOutcome {
            solution: u,
            iterations: history.len() - 1,
            residual_norm: norm,
            damped,
        });
    }
    Err(Error::NoConvergence {
        iterations: history.len() - 1,
        history,
    })
}

struct Unconstrained {
    frozen: FrozenPosition,
    momentum_prev: DVector<f64>,
    dt: f64,
}

impl NewtonProblem for Unconstrained {
    fn residual(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.frozen.forward(v, self.dt) - &self.momentum_prev)
    }

    fn jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.frozen.jacobian(v, self.dt))
    }
}

/// Unknowns `[v_{k+1}; λ]`; the constraint block is scaled by `1/Δt` so both
/// blocks carry velocity-like magnitudes.
struct Constrained<'a> {
    system: &'a MechSystem,
    frozen: FrozenPosition,
    momentum_prev: DVector<f64>,
    x1: Vec<f64>,
    jac_g1: DMatrix<f64>,
    dt: f64,
}

impl Constrained<'_> {
    fn next_position(&self, v: &[f64]) -> Vec<f64> {
        self.x1.iter().zip(v).map(|(x, v)| x + v * self.dt).collect()
    }
}

impl NewtonProblem for Constrained<'_> {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.x1.len();
        let v = u.rows(0, n).into_owned();
        let lambda = u.rows(n, u.len() - n);
        let mut r = DVector::zeros(u.len());
        let dyn_part = self.frozen.forward(&v, self.dt) - &self.momentum_prev - self.jac_g1.transpose() * lambda;
        r.rows_mut(0, n).copy_from(&dyn_part);
        let g2 = self.system.constraint_residual(&self.next_position(v.as_slice())) / self.dt;
        r.rows_mut(n, g2.len()).copy_from(&g2);
        Ok(r)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.x1.len();
        let c = u.len() - n;
        let v = u.rows(0, n).into_owned();
        let mut jac = DMatrix::zeros(n + c, n + c);
        jac.view_mut((0, 0), (n, n)).copy_from(&self.frozen.jacobian(&v, self.dt));
        jac.view_mut((0, n), (n, c)).copy_from(&(-self.jac_g1.transpose()));
        let g2 = self.system.constraint_jacobian(&self.next_position(v.as_slice()));
        jac.view_mut((n, 0), (c, n)).copy_from(&g2);
        Ok(jac)
    }
}

fn check_state(system: &MechSystem, state: &State) -> Result<()> {
    let n = system.dim_x();
    for len in [state.x.len(), state.v.len()] {
        if len != n {
            return Err(Error::Shape { expected: n, got: len });
        }
    }
    if !state.is_finite() {
        return Err(Error::Input("state has non-finite entries".into()));
    }
    Ok(())
}

/// Nominal velocity solve at a known next position, shared with the GP
/// integrator: `x_{k+1} = x_k + v_k Δt`, then `(v_{k+1}, λ)` by damped Newton from `v_k`.
pub(crate) fn solve_velocity(
    system: &MechSystem,
    x_k: &[f64],
    v_k: &[f64],
    dt: f64,
    config: &SolverConfig,
) -> Result<StepResult> {
    let x1: Vec<f64> = x_k.iter().zip(v_k).map(|(x, v)| x + v * dt).collect();
    let momentum_prev = system.terms(x_k, v_k).momentum;
    let frozen = FrozenPosition::new(system, &x1);
    let v0 = DVector::from_column_slice(v_k);
    let (solution, outcome_iters, norm, damped) = if system.is_constrained() {
        let problem = Constrained {
            system,
            frozen,
            momentum_prev,
            jac_g1: system.constraint_jacobian(&x1),
            x1: x1.clone(),
            dt,
        };
        let mut init = DVector::zeros(x1.len() + system.n_constraints());
        init.rows_mut(0, x1.len()).copy_from(&v0);
        let out = newton(&problem, init, config, "constrained step")?;
        (out.solution, out.iterations, out.residual_norm, out.damped)
    } else {
        let problem = Unconstrained {
            frozen,
            momentum_prev,
            dt,
        };
        let out = newton(&problem, v0, config, "unconstrained step")?;
        (out.solution, out.iterations, out.residual_norm, out.damped)
    };
    let n = x1.len();
    let v1 = solution.rows(0, n).iter().copied().collect::<Vec<_>>();
    let multipliers = solution.rows(n, solution.len() - n).iter().copied().collect();
    Ok(StepResult {
        next_state: State::new(x1, v1),
        multipliers,
        solver_iterations: outcome_iters,
        residual_norm: norm,
        damped,
    })
}

/// One step of the variational integrator on a system without constraints.
pub fn step_nominal_unconstrained(
    system: &MechSystem,
    state: &State,
    dt: f64,
    config: &SolverConfig,
) -> Result<StepResult> {
    check_state(system, state)?;
    if system.is_constrained() {
        return Err(Error::Config(format!(
            "{} in {} coordinates has constraints",
            system.kind, system.parameterization
        )));
    }
    solve_velocity(system, &state.x, &state.v, dt, config)
}

/// One step of the constrained variational integrator; the returned velocity
/// keeps `x_{k+1} + v_{k+1} Δt` on the constraint manifold.
pub fn step_nominal_constrained(
    system: &MechSystem,
    state: &State,
    dt: f64,
    config: &SolverConfig,
) -> Result<StepResult> {
    check_state(system, state)?;
    if !system.is_constrained() {
        return Err(Error::Config(format!(
            "{} in {} coordinates has no constraints",
            system.kind, system.parameterization
        )));
    }
    solve_velocity(system, &state.x, &state.v, dt, config)
}

/// Dispatches to the constrained or unconstrained variational step.
pub fn step_nominal(system: &MechSystem, state: &State, dt: f64, config: &SolverConfig) -> Result<StepResult> {
    check_state(system, state)?;
    solve_velocity(system, &state.x, &state.v, dt, config)
}

/// Acceleration and constraint forces from `M a = −∇V + f − bias + Gᵀλ`,
/// `G a = −Ġ v`.
pub fn acceleration(system: &MechSystem, x: &[f64], v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    let t = system.terms(x, v);
    let rhs = -&t.grad_potential + &t.friction - &t.bias;
    solve_saddle(&t.mass, &t.jac_g, &rhs, &(-&t.gdot_v), "acceleration")
}

pub fn explicit_euler_step(system: &MechSystem, state: &State, dt: f64) -> Result<State> {
    check_state(system, state)?;
    let (a, _) = acceleration(system, &state.x, &state.v)?;
    let x = state.x.iter().zip(&state.v).map(|(x, v)| x + v * dt).collect();
    let v = state.v.iter().zip(a.iter()).map(|(v, a)| v + a * dt).collect();
    Ok(State::new(x, v))
}

/// Symplectic Euler in momentum form, velocity first, then position:
///
/// ```text
/// p_{k+1} = p_k + Δt (∂T/∂x(x_k, w) − ∇V(x_k) + f(x_k, w)) + G(x_k)ᵀλ,  w = M(x_k)⁻¹ p_{k+1}
/// x_{k+1} = x_k + Δt w,  g(x_{k+1}) = 0
/// ```
///
/// The momentum update is implicit in `w` whenever `M` depends on `x`, which
/// is what keeps the scheme symplectic for non-separable Lagrangians. On
/// constrained systems the new velocity `M(x_{k+1})⁻¹ p_{k+1}` is then
/// projected onto the tangent space in the mass metric; a mass-metric
/// position projection only kicks in if the Newton solve left `‖g‖∞ > 1e−10`.
pub fn symplectic_euler_step(system: &MechSystem, state: &State, dt: f64) -> Result<State> {
    check_state(system, state)?;
    let config = SolverConfig {
        tolerance: 1e-11,
        ..SolverConfig::default()
    };
    let t = system.terms(&state.x, &state.v);
    let n = state.x.len();
    let c = system.n_constraints();
    let problem = MomentumStep {
        system,
        frozen: FrozenPosition::new(system, &state.x),
        momentum: t.momentum,
        x: state.x.clone(),
        jac_g: t.jac_g,
        dt,
    };
    let mut init = DVector::zeros(n + c);
    init.rows_mut(0, n).copy_from_slice(&state.v);
    let sol = newton(&problem, init, &config, "symplectic euler step")?.solution;
    let w = sol.rows(0, n).into_owned();
    // The constraint impulse is already part of M(x_k) w.
    let p_next = &problem.frozen.mass * &w;
    let x = problem.advance(w.as_slice());
    let x = if c > 0 && system.constraint_norm(&x) > 1e-10 {
        project_position_mass(system, x)?
    } else {
        x
    };
    let v: Vec<f64> = solve_dense(&system.mass_matrix(&x), &p_next, "symplectic euler velocity")?
        .iter()
        .copied()
        .collect();
    let v = if c > 0 { project_velocity_mass(system, &x, v)? } else { v };
    Ok(State::new(x, v))
}

/// Unknowns `[w; λ]` of the implicit momentum update. The position
/// constraint row is left unscaled: at fine steps `g/Δt` would push the
/// roundoff floor above the solver tolerance.
struct MomentumStep<'a> {
    system: &'a MechSystem,
    frozen: FrozenPosition,
    momentum: DVector<f64>,
    x: Vec<f64>,
    jac_g: DMatrix<f64>,
    dt: f64,
}

impl MomentumStep<'_> {
    fn advance(&self, w: &[f64]) -> Vec<f64> {
        self.x.iter().zip(w).map(|(x, w)| x + w * self.dt).collect()
    }
}

impl NewtonProblem for MomentumStep<'_> {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.x.len();
        let c = u.len() - n;
        let w = u.rows(0, n).into_owned();
        let mut r = DVector::zeros(n + c);
        let top = self.frozen.forward(&w, self.dt) - &self.momentum - self.jac_g.transpose() * u.rows(n, c);
        r.rows_mut(0, n).copy_from(&top);
        if c > 0 {
            let g = self.system.constraint_residual(&self.advance(w.as_slice()));
            r.rows_mut(n, c).copy_from(&g);
        }
        Ok(r)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.x.len();
        let c = u.len() - n;
        let w = u.rows(0, n).into_owned();
        let mut jac = DMatrix::zeros(n + c, n + c);
        jac.view_mut((0, 0), (n, n)).copy_from(&self.frozen.jacobian(&w, self.dt));
        if c > 0 {
            jac.view_mut((0, n), (n, c)).copy_from(&(-self.jac_g.transpose()));
            let g = self.system.constraint_jacobian(&self.advance(w.as_slice())) * self.dt;
            jac.view_mut((n, 0), (c, n)).copy_from(&g);
        }
        Ok(jac)
    }
}

/// Post-step position correction `x ← x − M⁻¹Gᵀ(GM⁻¹Gᵀ)⁻¹ g` until `‖g‖∞ ≤ 1e−12`.
pub fn project_position_mass(system: &MechSystem, mut x: Vec<f64>) -> Result<Vec<f64>> {
    for _ in 0..20 {
        let g = system.constraint_residual(&x);
        if g.amax() <= 1e-12 {
            return Ok(x);
        }
        let t = system.terms(&x, &vec![0.0; x.len()]);
        let (dx, _) = solve_saddle(&t.mass, &t.jac_g, &DVector::zeros(x.len()), &(-g), "position projection")?;
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi += d;
        }
    }
    let norm = system.constraint_norm(&x);
    if norm <= 1e-10 {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: 20,
            history: vec![norm],
        })
    }
}

/// Removes the velocity component violating `G v = 0` in the mass metric.
pub fn project_velocity_mass(system: &MechSystem, x: &[f64], v: Vec<f64>) -> Result<Vec<f64>> {
    let t = system.terms(x, &vec![0.0; x.len()]);
    let vv = DVector::from_vec(v);
    let gv = &t.jac_g * &vv;
    let (dv, _) = solve_saddle(&t.mass, &t.jac_g, &DVector::zeros(x.len()), &(-gv), "velocity projection")?;
    Ok((vv + dv).iter().copied().collect())
}

/// Writes `t, x_0.., v_0.., energy, constraint_norm`, one row per state.
pub fn write_trajectory_csv(path: &Path, system: &MechSystem, dt: f64, states: &[State]) -> Result<()> {
    let n = system.dim_x();
    let mut out = String::from("t");
    for i in 0..n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 0..n {
        out.push_str(&format!(",v_{i}"));
    }
    out.push_str(",energy,constraint_norm\n");
    for (k, s) in states.iter().enumerate() {
        out.push_str(&format!("{}", k as f64 * dt));
        for a in s.x.iter().chain(&s.v) {
            out.push_str(&format!(",{a:e}"));
        }
        let g = if system.is_constrained() { system.constraint_norm(&s.x) } else { 0.0 };
        out.push_str(&format!(",{:e},{:e}\n", system.energy(s), g));
    }
    write_atomic(path, out.as_bytes())
}
