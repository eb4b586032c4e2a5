//! Quick oracle and invariant checks behind `sympgp validate`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gp::{kernel_eval, GpModel, KernelParams, PriorMean, TrainingSet};
use crate::gp_integrator::{GpviModel, MeanModel};
use crate::integrator::{d0_residual, discrete_velocity, step_nominal, symplectic_euler_step, SolverConfig};
use crate::projection::{make_consistent, project_velocity};
use crate::systems::{MechSystem, Parameterization, State, SystemKind};
use crate::Result;

const DT: f64 = 0.01;

pub struct CheckOutcome {
    pub name: &'static str,
    /// `Err` carries the reason for a failed check.
    pub result: std::result::Result<(), String>,
}

type Check = fn() -> std::result::Result<(), String>;

pub fn run_all() -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 6] = [
        ("gp posterior matches dense inverse", gp_dense_oracle),
        ("d0 matches discrete action gradient", d0_gradient),
        ("projection is feasible and idempotent", projection_feasible),
        ("gp step without data is the nominal step", empty_gp_step),
        ("gp trained on nominal data reproduces it", nominal_equivalence),
        ("ground truth conserves energy", ground_truth_energy),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckOutcome { name, result: f() })
        .collect()
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * scale.max(f64::MIN_POSITIVE)
}

fn gp_dense_oracle() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=4);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let params = KernelParams::new(
            rng.random_range(0.5..2.0),
            (0..d).map(|_| rng.random_range(0.5..2.0)).collect(),
            rng.random_range(1e-3..1e-1),
        )
        .map_err(fail)?;
        let gp = GpModel::with_params(
            &TrainingSet::new(inputs.clone(), targets.clone()).map_err(fail)?,
            vec![params.clone()],
            PriorMean::Zero,
        )
        .map_err(fail)?;
        let noise = params.noise_variance + gp.jitter(0);
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel_eval(&inputs[i], &inputs[j], &params).unwrap() + if i == j { noise } else { 0.0 }
        });
        let kinv = k.try_inverse().ok_or("oracle matrix singular")?;
        let y = DVector::from_fn(n, |i, _| targets[i][0]);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kz = DVector::from_fn(n, |i, _| kernel_eval(&z, &inputs[i], &params).unwrap());
        let mean = kz.dot(&(&kinv * &y));
        let var = params.signal_variance - kz.dot(&(&kinv * &kz));
        let got_mean = gp.posterior_mean(&z).map_err(fail)?[0];
        let got_var = gp.posterior_variance(&z).map_err(fail)?[0];
        if !rel_close(got_mean, mean, mean.abs().max(1e-3), 1e-9) || !rel_close(got_var, var.max(0.0), params.signal_variance, 1e-9) {
            return Err(format!("mean {got_mean} vs {mean}, variance {got_var} vs {var}"));
        }
    }
    Ok(())
}

fn d0_gradient() -> std::result::Result<(), String> {
    let action = |sys: &MechSystem, x0: &[f64], x1: &[f64], x2: &[f64]| {
        (sys.lagrangian(x0, &discrete_velocity(x0, x1, DT)) + sys.lagrangian(x1, &discrete_velocity(x1, x2, DT))) * DT
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in SystemKind::ALL {
        for p in Parameterization::ALL {
            let sys = MechSystem::nominal(kind, p);
            for _ in 0..5 {
                let s = sys.random_initial_state(&mut rng);
                let x0: Vec<f64> = s.x.iter().zip(&s.v).map(|(x, v)| x - v * DT).collect();
                let x2: Vec<f64> = s.x.iter().zip(&s.v).map(|(x, v)| x + v * DT).collect();
                let d0 = d0_residual(&sys, &s.x, &s.v, &s.v, DT);
                let h = 1e-6;
                let scale = d0.amax().max(1e-3);
                for j in 0..s.x.len() {
                    let (mut xp, mut xm) = (s.x.clone(), s.x.clone());
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = -(action(&sys, &x0, &xp, &x2) - action(&sys, &x0, &xm, &x2)) / (2.0 * h);
                    if !rel_close(d0[j], fd, scale, 1e-6) {
                        return Err(format!("{kind} {p}: component {j} {} vs {fd}", d0[j]));
                    }
                }
            }
        }
    }
    Ok(())
}

fn projection_feasible() -> std::result::Result<(), String> {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in SystemKind::ALL {
        let sys = MechSystem::nominal(kind, Parameterization::Maximal);
        for _ in 0..5 {
            let s = make_consistent(&sys, &sys.random_initial_state(&mut rng), DT, &cfg).map_err(fail)?;
            let v_u: Vec<f64> = s.v.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let once = project_velocity(&v_u, &s.x, &sys, DT, &cfg).map_err(fail)?.velocity;
            let twice = project_velocity(&once, &s.x, &sys, DT, &cfg).map_err(fail)?.velocity;
            let ahead: Vec<f64> = s.x.iter().zip(&once).map(|(x, v)| x + v * DT).collect();
            let moved = once.iter().zip(&twice).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if sys.constraint_norm(&ahead) > cfg.tolerance * DT || moved > 1e-10 {
                return Err(format!("{kind}: residual {:e}, idempotence gap {moved:e}", sys.constraint_norm(&ahead)));
            }
        }
    }
    Ok(())
}

fn empty_gp_step() -> std::result::Result<(), String> {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in SystemKind::ALL {
        for p in Parameterization::ALL {
            let sys = MechSystem::nominal(kind, p);
            let n = sys.dim_x();
            let params = vec![KernelParams::new(1.0, vec![1.0; 2 * n], 1e-6).map_err(fail)?; n];
            let gp = GpModel::prior_only(2 * n, params, PriorMean::External).map_err(fail)?;
            let model = GpviModel::from_parts(&sys, MeanModel::Nominal, gp, DT, cfg).map_err(fail)?;
            let s = make_consistent(&sys, &sys.random_initial_state(&mut rng), DT, &cfg).map_err(fail)?;
            let a = model.step(&s).map_err(fail)?.next_state;
            let b = step_nominal(&sys, &s, DT, &cfg).map_err(fail)?.next_state;
            let gap = a.v.iter().zip(&b.v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if gap > 1e-12 {
                return Err(format!("{kind} {p}: gap {gap:e}"));
            }
        }
    }
    Ok(())
}

fn nominal_equivalence() -> std::result::Result<(), String> {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in SystemKind::ALL {
        let sys = MechSystem::nominal(kind, Parameterization::Maximal);
        let mut s = make_consistent(&sys, &sys.random_initial_state(&mut rng), DT, &cfg).map_err(fail)?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..8 {
            let next = step_nominal(&sys, &s, DT, &cfg).map_err(fail)?.next_state;
            inputs.push(s.z());
            targets.push(next.v.clone());
            s = next;
        }
        let data = TrainingSet::new(inputs, targets).map_err(fail)?;
        let model = GpviModel::train(&sys, MeanModel::Nominal, &data, DT, &crate::gp::FitOptions::new(2, 0), cfg)
            .map_err(fail)?;
        for z in &data.inputs {
            let state = State::from_z(z);
            let a = model.step(&state).map_err(fail)?.next_state;
            let b = step_nominal(&sys, &state, DT, &cfg).map_err(fail)?.next_state;
            let gap = a.v.iter().zip(&b.v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if gap > 1e-8 {
                return Err(format!("{kind}: gap {gap:e}"));
            }
        }
    }
    Ok(())
}

/// Drift of `H − ½Δt H_p·H_q`, which symplectic Euler conserves to O(Δt²);
/// the raw energy oscillates at O(Δt).
fn ground_truth_energy() -> std::result::Result<(), String> {
    let dt = 1e-4;
    let modified = |sys: &MechSystem, s: &State| {
        let t = sys.terms(&s.x, &s.v);
        let h_q = &t.grad_potential - &t.dtdx;
        sys.energy(s) - 0.5 * dt * DVector::from_column_slice(&s.v).dot(&h_q)
    };
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    let mut s = State::new(vec![1.0], vec![0.0]);
    let e0 = modified(&sys, &s);
    let mut worst = 0.0f64;
    for _ in 0..20_000 {
        s = symplectic_euler_step(&sys, &s, dt).map_err(fail)?;
        worst = worst.max((modified(&sys, &s) - e0).abs());
    }
    if worst > 1e-4 {
        return Err(format!("energy drift {worst:e} J"));
    }
    Ok(())
}

/// Number of failed checks; each outcome is reported through `report`.
pub fn run_and_report(mut report: impl FnMut(&CheckOutcome)) -> Result<usize> {
    let outcomes = run_all();
    outcomes.iter().for_each(&mut report);
    Ok(outcomes.iter().filter(|o| o.result.is_err()).count())
}
