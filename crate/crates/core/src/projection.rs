//! Projection of a predicted velocity onto the discrete constraint manifold:
//!
//! ```text
//! v = argmin ½‖v − v_u‖²  subject to  g(x + v Δt) = 0
//! ```
//!
//! solved by Newton on the KKT conditions `v − v_u − Ĝᵀμ = 0`, `g = 0`, with
//! `Ĝ = Δt G(x + v Δt)` the constraint Jacobian with respect to `v`. The
//! iteration starts at `(v_u, 0)`, so near a fold of the manifold it returns
//! the local minimizer in the basin of `v_u`; such calls are flagged through
//! [`Projection::damped`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrator::{newton, NewtonProblem, SolverConfig};
use crate::linalg::solve_dense;
use crate::systems::{ConstraintSet, MechSystem, State};

/// Added to the multiplier block when the KKT matrix is numerically singular.
const KKT_REGULARIZATION: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Projection {
    pub velocity: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub damped: bool,
}

/// Affine constraints `A x + b = 0`.
#[derive(Clone, Debug)]
pub struct AffineConstraints {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ConstraintSet for AffineConstraints {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn count(&self) -> usize {
        self.a.nrows()
    }

    fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) + &self.b
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }

    fn curvature(&self, x: &[f64], _mu: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

struct Kkt<'a, C: ?Sized> {
    constraints: &'a C,
    x: &'a [f64],
    v_u: DVector<f64>,
    dt: f64,
}

impl<C: ConstraintSet + ?Sized> Kkt<'_, C> {
    fn split(&self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>, Vec<f64>) {
        let n = self.x.len();
        let v = u.rows(0, n).into_owned();
        let mu = u.rows(n, u.len() - n).into_owned();
        let y = self.x.iter().zip(v.iter()).map(|(x, v)| x + v * self.dt).collect();
        (v, mu, y)
    }
}

impl<C: ConstraintSet + ?Sized> NewtonProblem for Kkt<'_, C> {
    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.x.len();
        let (v, mu, y) = self.split(u);
        let jac = self.constraints.jacobian(&y);
        let mut r = DVector::zeros(u.len());
        r.rows_mut(0, n)
            .copy_from(&(&v - &self.v_u - jac.transpose() * &mu * self.dt));
        let g = self.constraints.residual(&y) / self.dt;
        r.rows_mut(n, g.len()).copy_from(&g);
        Ok(r)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.x.len();
        let c = u.len() - n;
        let (_, mu, y) = self.split(u);
        let (curv, g) = self.constraints.curvature_and_jacobian(&y, mu.as_slice());
        let mut k = DMatrix::zeros(n + c, n + c);
        let top_left = DMatrix::identity(n, n) - curv * (self.dt * self.dt);
        k.view_mut((0, 0), (n, n)).copy_from(&top_left);
        k.view_mut((0, n), (n, c)).copy_from(&(-g.transpose() * self.dt));
        k.view_mut((n, 0), (c, n)).copy_from(&g);
        Ok(k)
    }

    fn regularize(&self, jac: &mut DMatrix<f64>) -> bool {
        let n = self.x.len();
        for i in n..jac.nrows() {
            jac[(i, i)] -= KKT_REGULARIZATION;
        }
        true
    }
}

/// Closest velocity to `v_u` keeping `x + v Δt` on the constraint manifold.
/// Identity when there are no constraints.
pub fn project_velocity<C: ConstraintSet + ?Sized>(
    v_u: &[f64],
    x: &[f64],
    constraints: &C,
    dt: f64,
    config: &SolverConfig,
) -> Result<Projection> {
    let n = constraints.dim();
    for len in [v_u.len(), x.len()] {
        if len != n {
            return Err(Error::Shape { expected: n, got: len });
        }
    }
    if constraints.count() == 0 {
        return Ok(Projection {
            velocity: v_u.to_vec(),
            multipliers: Vec::new(),
            iterations: 0,
            damped: false,
        });
    }
    let problem = Kkt {
        constraints,
        x,
        v_u: DVector::from_column_slice(v_u),
        dt,
    };
    let mut init = DVector::zeros(n + constraints.count());
    init.rows_mut(0, n).copy_from_slice(v_u);
    let out = newton(&problem, init, config, "velocity projection")?;
    Ok(Projection {
        velocity: out.solution.rows(0, n).iter().copied().collect(),
        multipliers: out.solution.rows(n, out.solution.len() - n).iter().copied().collect(),
        iterations: out.iterations,
        damped: out.damped,
    })
}

/// Nearest point on `g = 0` by Gauss–Newton on the minimum-norm correction.
pub fn project_position<C: ConstraintSet + ?Sized>(constraints: &C, x: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    let mut y = DVector::from_column_slice(x);
    let mut history = Vec::new();
    for _ in 0..50 {
        let g = constraints.residual(y.as_slice());
        history.push(g.amax());
        if g.amax() <= tolerance {
            return Ok(y.iter().copied().collect());
        }
        let jac = constraints.jacobian(y.as_slice());
        let gram = &jac * jac.transpose();
        let step = solve_dense(&gram, &g, "position projection")?;
        y -= jac.transpose() * step;
    }
    Err(Error::NoConvergence {
        iterations: history.len(),
        history,
    })
}

/// Makes a state usable as the start of a discrete rollout: the position is
/// moved onto `g = 0` and the velocity projected so that `x + v Δt` is
/// feasible too.
pub fn make_consistent(system: &MechSystem, state: &State, dt: f64, config: &SolverConfig) -> Result<State> {
    if !system.is_constrained() {
        return Ok(state.clone());
    }
    let x = project_position(system, &state.x, 1e-13)?;
    let v = project_velocity(&state.v, &x, system, dt, config)?.velocity;
    Ok(State::new(x, v))
}
