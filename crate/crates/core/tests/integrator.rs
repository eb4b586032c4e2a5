use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sympgp::integrator::{
    d0_residual, discrete_velocity, explicit_euler_step, step_nominal, step_nominal_constrained,
    step_nominal_unconstrained, write_trajectory_csv, SolverConfig,
};
use sympgp::projection::make_consistent;
use sympgp::systems::{MechSystem, Parameterization, State, SystemKind};

const DT: f64 = 0.01;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `S_d` over the stencil `x0, x1, x2`, evaluated through the Lagrangian only.
fn discrete_action(sys: &MechSystem, x0: &[f64], x1: &[f64], x2: &[f64], dt: f64) -> f64 {
    let v0 = discrete_velocity(x0, x1, dt);
    let v1 = discrete_velocity(x1, x2, dt);
    (sys.lagrangian(x0, &v0) + sys.lagrangian(x1, &v1)) * dt
}

#[test]
fn d0_matches_finite_difference_of_discrete_action() {
    for kind in SystemKind::ALL {
        for p in Parameterization::ALL {
            let sys = MechSystem::nominal(kind, p);
            let mut r = rng(31);
            for _ in 0..100 {
                let s = sys.random_initial_state(&mut r);
                let x1 = s.x.clone();
                let v0: Vec<f64> = s.v.iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
                let v1: Vec<f64> = s.v.iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
                let x0: Vec<f64> = x1.iter().zip(&v0).map(|(x, v)| x - v * DT).collect();
                let x2: Vec<f64> = x1.iter().zip(&v1).map(|(x, v)| x + v * DT).collect();
                let d0 = d0_residual(&sys, &x1, &v0, &v1, DT);
                let h = 1e-6;
                let mut fd = vec![0.0; x1.len()];
                for j in 0..x1.len() {
                    let mut xp = x1.clone();
                    let mut xm = x1.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    fd[j] = -(discrete_action(&sys, &x0, &xp, &x2, DT) - discrete_action(&sys, &x0, &xm, &x2, DT))
                        / (2.0 * h);
                }
                let scale = fd.iter().chain(d0.iter()).fold(0.0f64, |m, a| m.max(a.abs())).max(1e-3);
                for (a, b) in d0.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * scale, "{kind} {p}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn d0_closed_forms() {
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    assert_eq!(d0_residual(&sys, &[0.0], &[0.0], &[0.0], DT)[0], 0.0);

    // Zero gravity in maximal coordinates: constant diagonal M, no potential.
    let mut free = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Maximal);
    free.params.gravity = 0.0;
    let d0 = d0_residual(&free, &[0.1, -0.2, 0.3], &[1.0, 2.0, 3.0], &[1.5, 1.0, 2.0], DT);
    let expect = [0.5, -1.0, -1.0 / 12.0];
    for (a, b) in d0.iter().zip(expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn minimal_pendulum_step_matches_bisection() {
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    let step = step_nominal_unconstrained(&sys, &State::new(vec![FRAC_PI_2], vec![0.0]), DT, &SolverConfig::default())
        .unwrap();
    assert_eq!(step.next_state.x, vec![FRAC_PI_2]);
    let f = |v1: f64| d0_residual(&sys, &[FRAC_PI_2], &[0.0], &[v1], DT)[0];
    let (mut lo, mut hi) = (-10.0, 10.0);
    assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    assert!((step.next_state.v[0] - 0.5 * (lo + hi)).abs() < 1e-12);
}

#[test]
fn equilibrium_is_a_fixed_point() {
    let cfg = SolverConfig::default();
    let sys = MechSystem::nominal(SystemKind::DoublePendulum, Parameterization::Minimal);
    let s = State::new(vec![0.0, 0.0], vec![0.0, 0.0]);
    assert_eq!(step_nominal(&sys, &s, DT, &cfg).unwrap().next_state, s);

    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Maximal);
    let s = sys.from_joint(&[0.0], &[0.0]);
    let step = step_nominal_constrained(&sys, &s, DT, &cfg).unwrap();
    for (a, b) in step.next_state.x.iter().zip(&s.x).chain(step.next_state.v.iter().zip(&s.v)) {
        assert!((a - b).abs() < 1e-12);
    }
    // λ is the pin impulse over one step: Δt · m g straight up.
    assert!(step.multipliers[0].abs() < 1e-12);
    assert!((step.multipliers[1] - DT * 9.81).abs() < 1e-12);
}

#[test]
fn constrained_step_rejects_unconstrained_system() {
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    let s = State::new(vec![0.1], vec![0.0]);
    assert!(step_nominal_constrained(&sys, &s, DT, &SolverConfig::default()).is_err());
    let sys = sys.with_parameterization(Parameterization::Maximal);
    let s = sys.from_joint(&[0.1], &[0.0]);
    assert!(step_nominal_unconstrained(&sys, &s, DT, &SolverConfig::default()).is_err());
}

#[test]
fn maximal_and_minimal_pendulum_agree() {
    let cfg = SolverConfig::default();
    let minimal = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    let maximal = minimal.with_parameterization(Parameterization::Maximal);
    let mut a = State::new(vec![1.0], vec![0.5]);
    let mut b = maximal.from_joint(&a.x, &a.v);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        a = step_nominal(&minimal, &a, DT, &cfg).unwrap().next_state;
        b = step_nominal(&maximal, &b, DT, &cfg).unwrap().next_state;
        let ra = minimal.to_reference_positions(&a);
        let rb = maximal.to_reference_positions(&b);
        for (p, q) in ra.iter().zip(&rb) {
            worst = worst.max((p - q).abs());
        }
    }
    assert!(worst < 1e-3, "endpoint gap {worst}");
}

#[test]
fn constrained_steps_do_not_drift() {
    let cfg = SolverConfig::default();
    for kind in SystemKind::ALL {
        for p in [Parameterization::SinCos, Parameterization::Maximal] {
            let sys = MechSystem::nominal(kind, p);
            let s = sys.random_initial_state(&mut rng(5));
            let mut s = make_consistent(&sys, &s, DT, &cfg).unwrap();
            let steps = if kind == SystemKind::DoublePendulum { 1000 } else { 300 };
            for _ in 0..steps {
                let step = step_nominal(&sys, &s, DT, &cfg).unwrap();
                assert!(step.residual_norm <= cfg.tolerance);
                s = step.next_state;
                let ahead: Vec<f64> = s.x.iter().zip(&s.v).map(|(x, v)| x + v * DT).collect();
                assert!(sys.constraint_norm(&s.x) <= 1e-8, "{kind} {p}");
                assert!(sys.constraint_norm(&ahead) <= 1e-8, "{kind} {p}");
            }
        }
    }
}

#[test]
fn newton_converges_in_few_iterations() {
    let cfg = SolverConfig::default();
    for kind in SystemKind::ALL {
        for p in Parameterization::ALL {
            let sys = MechSystem::nominal(kind, p);
            let mut r = rng(77);
            for _ in 0..20 {
                let s = sys.random_initial_state(&mut r);
                let step = step_nominal(&sys, &s, DT, &cfg).unwrap();
                assert!(step.solver_iterations <= 6, "{kind} {p}: {}", step.solver_iterations);
                let x1 = &step.next_state.x;
                let d0 = d0_residual(&sys, x1, &s.v, &step.next_state.v, DT);
                if !sys.is_constrained() {
                    assert!(d0.amax() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn explicit_euler_free_motion_is_exact() {
    let mut free = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    free.params.gravity = 0.0;
    let s = explicit_euler_step(&free, &State::new(vec![0.2], vec![1.5]), 0.1).unwrap();
    assert!((s.x[0] - 0.35).abs() < 1e-15 && s.v[0] == 1.5);
}

/// Energy error of the nominal variational integrator stays in a band while
/// explicit Euler keeps gaining energy.
#[test]
fn energy_band_versus_explicit_euler() {
    let cfg = SolverConfig::default();
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Minimal);
    let s0 = State::new(vec![1.0], vec![0.0]);
    let e0 = sys.energy(&s0);
    let (mut vi, mut ee) = (s0.clone(), s0.clone());
    let mut vi_err = Vec::new();
    let mut ee_err = Vec::new();
    for _ in 0..1000 {
        vi = step_nominal(&sys, &vi, DT, &cfg).unwrap().next_state;
        ee = explicit_euler_step(&sys, &ee, DT).unwrap();
        vi_err.push((sys.energy(&vi) - e0).abs());
        ee_err.push((sys.energy(&ee) - e0).abs());
    }
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    assert!(max(&vi_err) <= 2.0 * max(&vi_err[..100]));
    assert!(ee_err[999] >= 5.0 * ee_err[99]);
}

#[test]
fn explicit_euler_drifts_off_constraints() {
    let sys = MechSystem::nominal(SystemKind::DoublePendulum, Parameterization::Maximal);
    let mut s = sys.random_initial_state(&mut rng(1));
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        s = explicit_euler_step(&sys, &s, DT).unwrap();
        worst = worst.max(sys.constraint_norm(&s.x));
    }
    assert!(worst >= 1e-4);
}

#[test]
fn trajectory_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    let sys = MechSystem::nominal(SystemKind::Pendulum, Parameterization::Maximal);
    let s = sys.from_joint(&[0.3], &[0.0]);
    write_trajectory_csv(&path, &sys, DT, &[s.clone(), s]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x_0,x_1,x_2,v_0,v_1,v_2,energy,constraint_norm");
    assert_eq!(lines.count(), 2);
}
