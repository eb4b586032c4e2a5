//! Lagrangian quantities assembled from kinematic derivatives.
//!
//! Every body contributes `½ m |ṗ|² + ½ J φ̇²` to the kinetic energy and
//! `m g p_y` to the potential, so mass matrix, momentum, `∂T/∂x`, gravity
//! and the velocity-product bias all follow from the gradient and Hessian
//! of the flat kinematic outputs.

use nalgebra::{DMatrix, DVector};
use num_dual::{Dual64, HyperDual64};

use super::{MechSystem, Parameterization};

/// Values, gradients and Hessian-vector products of all kinematic outputs
/// at `(x, v)`. Row `o` of `hv` holds `(∇²o · v)ᵀ`.
pub(crate) struct Jet {
    pub value: Vec<f64>,
    pub grad: DMatrix<f64>,
    pub hv: DMatrix<f64>,
}

/// Gradients and full Hessians of all kinematic outputs at `x`.
pub(crate) struct FullJet {
    pub grad: DMatrix<f64>,
    pub hess: Vec<DMatrix<f64>>,
}

/// Quantities of the equations of motion at a single `(x, v)`.
#[derive(Clone, Debug)]
pub struct Terms {
    pub mass: DMatrix<f64>,
    pub momentum: DVector<f64>,
    pub kinetic: f64,
    pub potential: f64,
    /// `∂T/∂x` at fixed `v`.
    pub dtdx: DVector<f64>,
    pub grad_potential: DVector<f64>,
    /// `Σ w J_rᵀ (vᵀ ∇²r v)`: the velocity-product part of the inertial force.
    pub bias: DVector<f64>,
    pub friction: DVector<f64>,
    pub g: DVector<f64>,
    pub jac_g: DMatrix<f64>,
    /// `vᵀ ∇²g_i v` per constraint (the `Ġ v` term).
    pub gdot_v: DVector<f64>,
}

impl MechSystem {
    pub(crate) fn n_outputs(&self) -> usize {
        3 * self.n_bodies() + self.n_joints() + self.n_constraints()
    }

    pub(crate) fn joint_row(&self, j: usize) -> usize {
        3 * self.n_bodies() + j
    }

    pub(crate) fn constraint_row(&self, c: usize) -> usize {
        3 * self.n_bodies() + self.n_joints() + c
    }

    /// Kinetic weight of each body output row: mass on the two COM rows, rotational inertia on the angle row.
    fn body_row_weight(&self, row: usize) -> f64 {
        let b = row / 3;
        if row % 3 == 2 {
            self.body_inertia(b)
        } else {
            self.body_mass(b)
        }
    }

    pub(crate) fn outputs_f64(&self, x: &[f64]) -> Vec<f64> {
        self.kinematics(x).flatten()
    }

    fn hyper_pass(&self, x: &[f64], d1: impl Fn(usize) -> f64, d2: impl Fn(usize) -> f64) -> Vec<HyperDual64> {
        let xs: Vec<HyperDual64> = x
            .iter()
            .enumerate()
            .map(|(k, &xk)| HyperDual64::new(xk, d1(k), d2(k), 0.0))
            .collect();
        self.kinematics(&xs).flatten()
    }

    pub(crate) fn jet(&self, x: &[f64], v: &[f64]) -> Jet {
        let n = x.len();
        let n_out = self.n_outputs();
        let mut grad = DMatrix::zeros(n_out, n);
        let mut hv = DMatrix::zeros(n_out, n);
        let mut value = vec![0.0; n_out];
        for i in 0..n {
            let out = self.hyper_pass(x, |k| if k == i { 1.0 } else { 0.0 }, |k| v[k]);
            for (o, d) in out.iter().enumerate() {
                value[o] = d.re;
                grad[(o, i)] = d.eps1;
                hv[(o, i)] = d.eps1eps2;
            }
        }
        if n == 0 {
            value = self.outputs_f64(x);
        }
        Jet { value, grad, hv }
    }

    pub(crate) fn full_jet(&self, x: &[f64]) -> FullJet {
        let n = x.len();
        let n_out = self.n_outputs();
        let mut grad = DMatrix::zeros(n_out, n);
        let mut hess = vec![DMatrix::zeros(n, n); n_out];
        for i in 0..n {
            for j in i..n {
                let out = self.hyper_pass(
                    x,
                    |k| if k == i { 1.0 } else { 0.0 },
                    |k| if k == j { 1.0 } else { 0.0 },
                );
                for (o, d) in out.iter().enumerate() {
                    if i == j {
                        grad[(o, i)] = d.eps1;
                    }
                    hess[o][(i, j)] = d.eps1eps2;
                    hess[o][(j, i)] = d.eps1eps2;
                }
            }
        }
        FullJet { grad, hess }
    }

    /// Coordinates that can enter the constraints nonlinearly. Maximal
    /// coordinates pin points `p + R(φ) r`, which are linear in `p`, so only
    /// the body angles carry curvature.
    fn curvature_coords(&self) -> Vec<usize> {
        match self.parameterization {
            Parameterization::Maximal => (0..self.n_bodies()).map(|b| 3 * b + 2).collect(),
            _ => (0..self.dim_x()).collect(),
        }
    }

    /// `Σ_c μ_c ∇²g_c(x)` together with `G(x)`.
    pub(crate) fn constraint_curvature(&self, x: &[f64], mu: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut curv = DMatrix::zeros(n, n);
        let coords = self.curvature_coords();
        // One hyper-dual pass per Hessian entry, contracting the constraint rows with μ.
        for (a, &i) in coords.iter().enumerate() {
            for &j in &coords[a..] {
                let out = self.hyper_pass(
                    x,
                    |k| if k == i { 1.0 } else { 0.0 },
                    |k| if k == j { 1.0 } else { 0.0 },
                );
                let h: f64 = mu
                    .iter()
                    .enumerate()
                    .map(|(c, m)| m * out[self.constraint_row(c)].eps1eps2)
                    .sum();
                curv[(i, j)] = h;
                curv[(j, i)] = h;
            }
        }
        (curv, self.constraint_jacobian(x))
    }

    pub(crate) fn terms_from_jet(&self, jet: &Jet, v: &[f64]) -> Terms {
        let n = v.len();
        let v = DVector::from_column_slice(v);
        let mut mass = DMatrix::zeros(n, n);
        let mut momentum = DVector::zeros(n);
        let mut dtdx = DVector::zeros(n);
        let mut bias = DVector::zeros(n);
        let mut grad_potential = DVector::zeros(n);
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        let gravity = self.params.gravity;

        for row in 0..3 * self.n_bodies() {
            let w = self.body_row_weight(row);
            let gr = jet.grad.row(row).transpose();
            let hvr = jet.hv.row(row).transpose();
            let rate = gr.dot(&v);
            mass.ger(w, &gr, &gr, 1.0);
            momentum.axpy(w * rate, &gr, 1.0);
            dtdx.axpy(w * rate, &hvr, 1.0);
            bias.axpy(w * hvr.dot(&v), &gr, 1.0);
            kinetic += 0.5 * w * rate * rate;
            if row % 3 == 1 {
                let m = self.body_mass(row / 3);
                potential += m * gravity * jet.value[row];
                grad_potential.axpy(m * gravity, &gr, 1.0);
            }
        }

        let mut friction = DVector::zeros(n);
        for (j, &c) in self.joint_friction().iter().enumerate() {
            if c != 0.0 {
                let gr = jet.grad.row(self.joint_row(j)).transpose();
                friction.axpy(-c * gr.dot(&v), &gr, 1.0);
            }
        }

        let m = self.n_constraints();
        let mut g = DVector::zeros(m);
        let mut jac_g = DMatrix::zeros(m, n);
        let mut gdot_v = DVector::zeros(m);
        for c in 0..m {
            let row = self.constraint_row(c);
            g[c] = jet.value[row];
            jac_g.set_row(c, &jet.grad.row(row));
            gdot_v[c] = jet.hv.row(row).transpose().dot(&v);
        }

        Terms {
            mass,
            momentum,
            kinetic,
            potential,
            dtdx,
            grad_potential,
            bias,
            friction,
            g,
            jac_g,
            gdot_v,
        }
    }

    /// All equation-of-motion terms at `(x, v)`.
    pub fn terms(&self, x: &[f64], v: &[f64]) -> Terms {
        let jet = self.jet(x, v);
        self.terms_from_jet(&jet, v)
    }

    pub fn mass_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let zero = vec![0.0; x.len()];
        self.terms(x, &zero).mass
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        let out = self.outputs_f64(x);
        (0..self.n_bodies())
            .map(|b| self.body_mass(b) * self.params.gravity * out[3 * b + 1])
            .sum()
    }

    /// Lagrangian `T − V` at `(x, v)`.
    pub fn lagrangian(&self, x: &[f64], v: &[f64]) -> f64 {
        let xs: Vec<HyperDual64> = x
            .iter()
            .zip(v)
            .map(|(&xk, &vk)| HyperDual64::new(xk, vk, 0.0, 0.0))
            .collect();
        let kin = self.kinematics(&xs);
        let mut lagrangian = 0.0;
        for (b, link) in kin.bodies.iter().enumerate() {
            let m = self.body_mass(b);
            let inertia = self.body_inertia(b);
            let (vx, vy, w) = (link.com[0].eps1, link.com[1].eps1, link.rot.angle.eps1);
            lagrangian += 0.5 * m * (vx * vx + vy * vy) + 0.5 * inertia * w * w;
            lagrangian -= m * self.params.gravity * link.com[1].re;
        }
        lagrangian
    }

    /// Constraint residual `g(x)`.
    pub fn constraint_residual(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.kinematics(x).constraints)
    }

    /// Constraint Jacobian `G = ∂g/∂x`.
    pub fn constraint_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_constraints(), x.len());
        for i in 0..x.len() {
            let xs: Vec<Dual64> = x
                .iter()
                .enumerate()
                .map(|(k, &xk)| Dual64::new(xk, if k == i { 1.0 } else { 0.0 }))
                .collect();
            for (c, g) in self.kinematics(&xs).constraints.iter().enumerate() {
                jac[(c, i)] = g.eps;
            }
        }
        jac
    }

    /// Generalized viscous joint force at `(x, v)`; zero for nominal models.
    pub fn friction_force(&self, x: &[f64], v: &[f64]) -> DVector<f64> {
        self.terms(x, v).friction
    }

    /// Joint coordinates and joint rates (Jacobian-mapped) of a state.
    pub fn joint_state(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<HyperDual64> = x
            .iter()
            .zip(v)
            .map(|(&xk, &vk)| HyperDual64::new(xk, vk, 0.0, 0.0))
            .collect();
        let kin = self.kinematics(&xs);
        (
            kin.joints.iter().map(|j| j.re).collect(),
            kin.joints.iter().map(|j| j.eps1).collect(),
        )
    }
}
