//! Benchmark mechanisms (pendulum, cartpole, double pendulum, fourbar) in
//! minimal, sin/cos and planar maximal coordinates.
//!
//! All three parameterizations share one forward-kinematics routine, so the
//! physical configuration, energy and reference points agree between them by
//! construction. Angles are measured from the downward vertical and the
//! potential datum sits at the height of the ground pivot.

mod dynamics;
mod kinematics;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dynamics::Terms;
pub use kinematics::{angle_of, KinOut, Link, Rot, Scalar};

/// Horizontal distance between the two ground pivots of the fourbar.
///
/// With coincident pivots and unit links the hanging equilibrium is the fully
/// stretched configuration, where the loop-closure Jacobian loses rank.
pub const FOURBAR_PIVOT_SPACING: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    Cartpole,
    DoublePendulum,
    Fourbar,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::Pendulum,
        SystemKind::Cartpole,
        SystemKind::DoublePendulum,
        SystemKind::Fourbar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Cartpole => "cartpole",
            SystemKind::DoublePendulum => "double_pendulum",
            SystemKind::Fourbar => "fourbar",
        }
    }

    pub fn n_bodies(self) -> usize {
        match self {
            SystemKind::Pendulum => 1,
            SystemKind::Cartpole | SystemKind::DoublePendulum => 2,
            SystemKind::Fourbar => 4,
        }
    }

    pub fn n_joints(self) -> usize {
        self.n_bodies()
    }

    /// Upper ends of the uniform friction ranges, one per independent draw.
    /// The fourbar shares one draw between its second and third joints.
    fn friction_ranges(self) -> &'static [f64] {
        match self {
            SystemKind::Pendulum => &[1.0],
            SystemKind::Cartpole => &[0.5, 1.0],
            SystemKind::DoublePendulum => &[2.0, 0.5],
            SystemKind::Fourbar => &[2.0, 0.5],
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown system '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Minimal,
    #[serde(rename = "sincos")]
    SinCos,
    Maximal,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [
        Parameterization::Minimal,
        Parameterization::SinCos,
        Parameterization::Maximal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Parameterization::Minimal => "minimal",
            Parameterization::SinCos => "sincos",
            Parameterization::Maximal => "maximal",
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Parameterization::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameterization '{s}'")))
    }
}

/// Physical parameters, one entry per body (the cartpole's cart is body 0)
/// and one friction coefficient per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub link_masses: Vec<f64>,
    pub link_lengths: Vec<f64>,
    pub link_inertias: Vec<f64>,
    pub gravity: f64,
    pub friction_coeffs: Vec<f64>,
    pub mass_perturbation: Vec<f64>,
}

impl SystemParams {
    /// Unit masses and lengths, slender-rod inertias `m l² / 12`, no friction.
    pub fn nominal(kind: SystemKind) -> Self {
        let n = kind.n_bodies();
        SystemParams {
            link_masses: vec![1.0; n],
            link_lengths: vec![1.0; n],
            link_inertias: vec![1.0 / 12.0; n],
            gravity: 9.81,
            friction_coeffs: vec![0.0; kind.n_joints()],
            mass_perturbation: vec![1.0; n],
        }
    }

    fn validate(&self, kind: SystemKind) -> Result<()> {
        let n = kind.n_bodies();
        let per_body = [
            ("link_masses", &self.link_masses),
            ("link_lengths", &self.link_lengths),
            ("link_inertias", &self.link_inertias),
            ("mass_perturbation", &self.mass_perturbation),
        ];
        for (name, values) in per_body {
            if values.len() != n {
                return Err(Error::Config(format!(
                    "{kind}: {name} needs {n} entries, got {}",
                    values.len()
                )));
            }
            if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{kind}: {name} must be positive")));
            }
        }
        if self.friction_coeffs.len() != kind.n_joints() {
            return Err(Error::Config(format!(
                "{kind}: friction_coeffs needs {} entries, got {}",
                kind.n_joints(),
                self.friction_coeffs.len()
            )));
        }
        if self.friction_coeffs.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("{kind}: friction_coeffs must be nonnegative")));
        }
        if !self.gravity.is_finite() {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }
}

/// Position/velocity pair in the coordinates of some [`MechSystem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl State {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Self {
        State { x, v }
    }

    /// Augmented state `[x; v]`.
    pub fn z(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.extend_from_slice(&self.v);
        z
    }

    pub fn from_z(z: &[f64]) -> Self {
        let n = z.len() / 2;
        State {
            x: z[..n].to_vec(),
            v: z[n..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|a| a.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechSystem {
    pub kind: SystemKind,
    pub parameterization: Parameterization,
    pub params: SystemParams,
}

/// Builds a system, validating the parameter vectors against the body and joint counts.
pub fn build_system(
    kind: SystemKind,
    parameterization: Parameterization,
    params: SystemParams,
) -> Result<MechSystem> {
    params.validate(kind)?;
    Ok(MechSystem {
        kind,
        parameterization,
        params,
    })
}

impl MechSystem {
    pub fn nominal(kind: SystemKind, parameterization: Parameterization) -> Self {
        MechSystem {
            kind,
            parameterization,
            params: SystemParams::nominal(kind),
        }
    }

    /// The same physical system in another parameterization.
    pub fn with_parameterization(&self, parameterization: Parameterization) -> Self {
        MechSystem {
            parameterization,
            ..self.clone()
        }
    }

    /// The same geometry with unit perturbation factors and no friction.
    pub fn nominal_twin(&self) -> Self {
        MechSystem {
            params: SystemParams {
                friction_coeffs: vec![0.0; self.n_joints()],
                mass_perturbation: vec![1.0; self.n_bodies()],
                ..self.params.clone()
            },
            ..self.clone()
        }
    }

    pub fn n_bodies(&self) -> usize {
        self.kind.n_bodies()
    }

    pub fn n_joints(&self) -> usize {
        self.kind.n_joints()
    }

    pub fn dim_x(&self) -> usize {
        let angles = match self.kind {
            SystemKind::Cartpole => 1,
            k => k.n_joints(),
        };
        let cart = usize::from(self.kind == SystemKind::Cartpole);
        match self.parameterization {
            Parameterization::Minimal => cart + angles,
            Parameterization::SinCos => cart + 2 * angles,
            Parameterization::Maximal => 3 * self.n_bodies(),
        }
    }

    pub fn n_constraints(&self) -> usize {
        let closure = if self.kind == SystemKind::Fourbar { 2 } else { 0 };
        match self.parameterization {
            Parameterization::Minimal => closure,
            Parameterization::SinCos => {
                closure
                    + match self.kind {
                        SystemKind::Cartpole => 1,
                        k => k.n_joints(),
                    }
            }
            Parameterization::Maximal => match self.kind {
                SystemKind::Pendulum => 2,
                SystemKind::Cartpole | SystemKind::DoublePendulum => 4,
                SystemKind::Fourbar => 10,
            },
        }
    }

    pub fn is_constrained(&self) -> bool {
        self.n_constraints() > 0
    }

    /// Whether `M(x)` is independent of `x` in this parameterization.
    pub fn has_constant_mass(&self) -> bool {
        self.parameterization == Parameterization::Maximal
            || self.kind == SystemKind::Pendulum && self.parameterization == Parameterization::Minimal
    }

    pub fn body_mass(&self, b: usize) -> f64 {
        self.params.link_masses[b] * self.params.mass_perturbation[b]
    }

    pub fn body_inertia(&self, b: usize) -> f64 {
        self.params.link_inertias[b] * self.params.mass_perturbation[b]
    }

    pub fn joint_friction(&self) -> Vec<f64> {
        self.params.friction_coeffs.clone()
    }

    pub fn kinetic_energy(&self, state: &State) -> f64 {
        let xs: Vec<Dual64> = state
            .x
            .iter()
            .zip(&state.v)
            .map(|(&x, &v)| Dual64::new(x, v))
            .collect();
        self.kinematics(&xs)
            .bodies
            .iter()
            .enumerate()
            .map(|(b, link)| {
                let (vx, vy, w) = (link.com[0].eps, link.com[1].eps, link.rot.angle.eps);
                0.5 * self.body_mass(b) * (vx * vx + vy * vy) + 0.5 * self.body_inertia(b) * w * w
            })
            .sum()
    }

    /// Total mechanical energy `½ vᵀ M(x) v + V(x)`.
    pub fn energy(&self, state: &State) -> f64 {
        self.kinetic_energy(state) + self.potential(&state.x)
    }

    pub fn constraint_norm(&self, x: &[f64]) -> f64 {
        self.constraint_residual(x).amax()
    }

    /// Distal end of every link (the cart contributes its centre), flattened as `[x, y]` pairs.
    pub fn to_reference_positions(&self, state: &State) -> Vec<f64> {
        self.reference_points(&state.x)
    }

    pub fn reference_points(&self, x: &[f64]) -> Vec<f64> {
        self.kinematics(x)
            .bodies
            .iter()
            .flat_map(|b| b.distal())
            .collect()
    }

    /// Maps joint coordinates and rates (cart position first for the
    /// cartpole, fourbar joints satisfying the loop closure) into this
    /// parameterization.
    pub fn from_joint(&self, q: &[f64], qdot: &[f64]) -> State {
        match self.parameterization {
            Parameterization::Minimal => State::new(q.to_vec(), qdot.to_vec()),
            Parameterization::SinCos => {
                let mut x = Vec::with_capacity(self.dim_x());
                let mut v = Vec::with_capacity(self.dim_x());
                let skip = usize::from(self.kind == SystemKind::Cartpole);
                if skip == 1 {
                    x.push(q[0]);
                    v.push(qdot[0]);
                }
                for (&a, &w) in q[skip..].iter().zip(&qdot[skip..]) {
                    let (s, c) = a.sin_cos();
                    x.extend([s, c]);
                    v.extend([c * w, -s * w]);
                }
                State::new(x, v)
            }
            Parameterization::Maximal => {
                let minimal = self.with_parameterization(Parameterization::Minimal);
                let qs: Vec<Dual64> = q.iter().zip(qdot).map(|(&a, &w)| Dual64::new(a, w)).collect();
                let mut x = Vec::with_capacity(self.dim_x());
                let mut v = Vec::with_capacity(self.dim_x());
                for link in minimal.kinematics(&qs).bodies {
                    x.extend([link.com[0].re, link.com[1].re, link.rot.angle.re]);
                    v.extend([link.com[0].eps, link.com[1].eps, link.rot.angle.eps]);
                }
                State::new(x, v)
            }
        }
    }

    /// Random joint state mapped into this parameterization. Angles are
    /// uniform on `[−π, π]`, rates, cart position and cart velocity on
    /// `[−1, 1]`. The fourbar samples its two grounded links and closes the
    /// loop on a fixed assembly branch.
    pub fn random_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let (q, qdot) = self.random_joint_state(rng);
        self.from_joint(&q, &qdot)
    }

    fn random_joint_state<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        use std::f64::consts::PI;
        match self.kind {
            SystemKind::Fourbar => loop {
                let phi1 = rng.random_range(-PI..=PI);
                let phi3 = rng.random_range(-PI..=PI);
                let w1 = rng.random_range(-1.0..=1.0);
                let w3 = rng.random_range(-1.0..=1.0);
                if let Some(joint) = self.close_fourbar(phi1, phi3, w1, w3) {
                    return joint;
                }
            },
            kind => {
                let n = kind.n_joints();
                let mut q = Vec::with_capacity(n);
                let mut qdot = Vec::with_capacity(n);
                for j in 0..n {
                    let range = if kind == SystemKind::Cartpole && j == 0 { 1.0 } else { PI };
                    q.push(rng.random_range(-range..=range));
                }
                for _ in 0..n {
                    qdot.push(rng.random_range(-1.0..=1.0));
                }
                (q, qdot)
            }
        }
    }

    /// Closes the fourbar loop for given grounded-link angles and rates.
    /// Returns `None` near the stretched (singular) configurations.
    pub fn close_fourbar(&self, phi1: f64, phi3: f64, w1: f64, w3: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let len = &self.params.link_lengths;
        let dir = |phi: f64| [phi.sin(), -phi.cos()];
        let d1 = dir(phi1);
        let d3 = dir(phi3);
        let a = [len[0] * d1[0], len[0] * d1[1]];
        let b = [FOURBAR_PIVOT_SPACING + len[2] * d3[0], len[2] * d3[1]];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let dist = ab[0].hypot(ab[1]);
        if dist > 0.95 * (len[1] + len[3]) || dist < 1e-3 {
            return None;
        }
        // Circle intersection on the branch with cross(B − A, P − A) < 0.
        let along = (len[1] * len[1] - len[3] * len[3] + dist * dist) / (2.0 * dist);
        let h2 = len[1] * len[1] - along * along;
        if h2 <= 0.0 {
            return None;
        }
        let h = h2.sqrt();
        let e = [ab[0] / dist, ab[1] / dist];
        let p = [a[0] + along * e[0] + h * e[1], a[1] + along * e[1] - h * e[0]];
        let reach1 = p[0].hypot(p[1]);
        let reach2 = (p[0] - FOURBAR_PIVOT_SPACING).hypot(p[1]);
        if reach1 > 0.975 * (len[0] + len[1]) || reach2 > 0.975 * (len[2] + len[3]) {
            return None;
        }
        let abs_angle = |from: [f64; 2]| (p[0] - from[0]).atan2(-(p[1] - from[1]));
        let phi2 = abs_angle(a);
        let phi4 = abs_angle(b);
        let q = vec![phi1, phi2 - phi1, phi3, phi4 - phi3];

        // Closure velocities: solve for the two dependent joint rates.
        let minimal = self.with_parameterization(Parameterization::Minimal);
        let jac = minimal.constraint_jacobian(&q);
        let dep = nalgebra::Matrix2::new(jac[(0, 1)], jac[(0, 3)], jac[(1, 1)], jac[(1, 3)]);
        let rhs = -nalgebra::Vector2::new(
            jac[(0, 0)] * w1 + jac[(0, 2)] * w3,
            jac[(1, 0)] * w1 + jac[(1, 2)] * w3,
        );
        let sol = dep.lu().solve(&rhs)?;
        Some((q, vec![w1, sol[0], w3, sol[1]]))
    }

    /// Applies explicit perturbation draws: multiplicative mass/inertia factors and joint friction.
    pub fn apply_perturbation(&self, draws: &PerturbationDraws) -> Result<MechSystem> {
        let mut params = self.params.clone();
        params.mass_perturbation = draws.mass_factors.clone();
        params.friction_coeffs = draws.friction.clone();
        build_system(self.kind, self.parameterization, params)
    }

    /// Perturbed ground-truth variant of a nominal system.
    pub fn perturb<R: Rng + ?Sized>(&self, rng: &mut R) -> MechSystem {
        let draws = PerturbationDraws::sample(self.kind, rng);
        self.apply_perturbation(&draws)
            .expect("sampled perturbation draws are valid by construction")
    }

    pub fn grad_potential(&self, x: &[f64]) -> DVector<f64> {
        let zero = vec![0.0; x.len()];
        self.terms(x, &zero).grad_potential
    }
}

/// Holonomic constraints `g(x) = 0` with Jacobian and curvature, as used by
/// the velocity projection.
pub trait ConstraintSet {
    fn dim(&self) -> usize;
    fn count(&self) -> usize;
    fn residual(&self, x: &[f64]) -> DVector<f64>;
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    /// `Σ_c μ_c ∇²g_c(x)`.
    fn curvature(&self, x: &[f64], mu: &[f64]) -> DMatrix<f64>;

    /// Curvature and Jacobian together, for sets that get both from one pass.
    fn curvature_and_jacobian(&self, x: &[f64], mu: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.curvature(x, mu), self.jacobian(x))
    }
}

impl ConstraintSet for MechSystem {
    fn dim(&self) -> usize {
        self.dim_x()
    }

    fn count(&self) -> usize {
        self.n_constraints()
    }

    fn residual(&self, x: &[f64]) -> DVector<f64> {
        self.constraint_residual(x)
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.constraint_jacobian(x)
    }

    fn curvature(&self, x: &[f64], mu: &[f64]) -> DMatrix<f64> {
        self.constraint_curvature(x, mu).0
    }

    fn curvature_and_jacobian(&self, x: &[f64], mu: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        self.constraint_curvature(x, mu)
    }
}

/// Perturbation factors and friction coefficients of a ground-truth system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDraws {
    pub mass_factors: Vec<f64>,
    pub friction: Vec<f64>,
}

impl PerturbationDraws {
    /// Number of unit-interval samples consumed by [`Self::from_unit_samples`].
    pub fn n_samples(kind: SystemKind) -> usize {
        kind.n_bodies() + kind.friction_ranges().len()
    }

    /// Maps samples in `[0, 1]` to draws: mass factors on `[0.9, 1.1]`, then
    /// the friction draws on their per-joint ranges.
    pub fn from_unit_samples(kind: SystemKind, u: &[f64]) -> Result<Self> {
        if u.len() != Self::n_samples(kind) {
            return Err(Error::Shape {
                expected: Self::n_samples(kind),
                got: u.len(),
            });
        }
        if u.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::Input("unit samples must lie in [0, 1]".into()));
        }
        let (mass, fric) = u.split_at(kind.n_bodies());
        let mass_factors = mass.iter().map(|&s| 0.9 + 0.2 * s).collect();
        let c: Vec<f64> = fric
            .iter()
            .zip(kind.friction_ranges())
            .map(|(&s, &hi)| s * hi)
            .collect();
        let friction = match kind {
            SystemKind::Fourbar => vec![c[0], c[1], c[1], 0.0],
            _ => c,
        };
        Ok(PerturbationDraws {
            mass_factors,
            friction,
        })
    }

    pub fn sample<R: Rng + ?Sized>(kind: SystemKind, rng: &mut R) -> Self {
        let u: Vec<f64> = (0..Self::n_samples(kind)).map(|_| rng.random::<f64>()).collect();
        Self::from_unit_samples(kind, &u).expect("uniform samples lie in [0, 1)")
    }
}

/// JSON system description; the optional draws pin a perturbed variant exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub parameterization: Parameterization,
    #[serde(default)]
    pub params: Option<SystemParams>,
    #[serde(default)]
    pub perturbation: Option<PerturbationDraws>,
}

impl SystemConfig {
    pub fn build(&self) -> Result<MechSystem> {
        let params = self
            .params
            .clone()
            .unwrap_or_else(|| SystemParams::nominal(self.kind));
        let system = build_system(self.kind, self.parameterization, params)?;
        match &self.perturbation {
            Some(draws) => system.apply_perturbation(draws),
            None => Ok(system),
        }
    }

    pub fn from_system(system: &MechSystem) -> Self {
        SystemConfig {
            kind: system.kind,
            parameterization: system.parameterization,
            params: Some(system.params.clone()),
            perturbation: None,
        }
    }
}
