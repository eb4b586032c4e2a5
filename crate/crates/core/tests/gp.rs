use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sympgp::gp::{
    gram_matrix, kernel_eval, log_marginal_likelihood, log_marginal_likelihood_grad, FitOptions, GpModel,
    KernelParams, PriorMean, TrainingSet,
};
use sympgp::Error;

const LN_2PI: f64 = 1.8378770664093453;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kern(sf2: f64, ls: &[f64], sn2: f64) -> KernelParams {
    KernelParams::new(sf2, ls.to_vec(), sn2).unwrap()
}

fn random_rows(r: &mut ChaCha8Rng, n: usize, d: usize, half_width: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-half_width..half_width)).collect()).collect()
}

/// Dense oracle: explicit kernel loop, LU inverse, no Cholesky anywhere.
struct Dense {
    kinv: DMatrix<f64>,
    det: f64,
}

impl Dense {
    fn new(z: &[Vec<f64>], p: &KernelParams, jitter: f64) -> Self {
        let n = z.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| {
            let r2: f64 = (0..p.lengthscales.len()).map(|d| ((z[i][d] - z[j][d]) / p.lengthscales[d]).powi(2)).sum();
            p.signal_variance * (-0.5 * r2).exp()
        });
        for i in 0..n {
            k[(i, i)] += p.noise_variance + jitter;
        }
        let det = k.clone().lu().determinant();
        Dense {
            kinv: k.try_inverse().unwrap(),
            det,
        }
    }

    fn cross(z: &[Vec<f64>], q: &[f64], p: &KernelParams) -> DVector<f64> {
        DVector::from_iterator(
            z.len(),
            z.iter().map(|zi| {
                let r2: f64 = (0..q.len()).map(|d| ((q[d] - zi[d]) / p.lengthscales[d]).powi(2)).sum();
                p.signal_variance * (-0.5 * r2).exp()
            }),
        )
    }
}

#[test]
fn kernel_examples() {
    let p = kern(2.5, &[0.3, 4.0], 0.0);
    assert_eq!(kernel_eval(&[0.7, -1.0], &[0.7, -1.0], &p).unwrap(), 2.5);
    let unit = kern(1.0, &[1.0, 1.0], 0.0);
    assert!((kernel_eval(&[1.0, 0.0], &[0.0, 0.0], &unit).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
    let a = kernel_eval(&[0.1, 0.2], &[-0.4, 0.9], &p).unwrap();
    let b = kernel_eval(&[-0.4, 0.9], &[0.1, 0.2], &p).unwrap();
    assert_eq!(a, b);
    assert!(matches!(kernel_eval(&[1.0], &[0.0, 0.0], &unit), Err(Error::Shape { .. })));
}

#[test]
fn gram_matrix_examples() {
    let p = kern(1.3, &[0.5], 0.2);
    let k = gram_matrix(&[vec![0.4]], &p, 1e-3).unwrap();
    assert_eq!((k.nrows(), k[(0, 0)]), (1, 1.3 + (0.2 + 1e-3)));

    let dup = kern(1.0, &[1.0, 1.0], 0.0);
    let k = gram_matrix(&[vec![0.5, 0.5], vec![0.5, 0.5]], &dup, 0.0).unwrap();
    let det = k[(0, 0)] * k[(1, 1)] - k[(0, 1)] * k[(1, 0)];
    assert_eq!(det, 0.0);

    let z = random_rows(&mut rng(1), 3, 2, 1.0);
    let k = gram_matrix(&z, &p_two(), 0.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = kernel_eval(&z[i], &z[j], &p_two()).unwrap() + if i == j { 0.01 } else { 0.0 };
            assert!((k[(i, j)] - expect).abs() <= 1e-15);
        }
    }
    assert!(gram_matrix(&[vec![f64::NAN, 0.0]], &dup, 0.0).is_err());
}

fn p_two() -> KernelParams {
    kern(0.8, &[0.7, 1.9], 0.01)
}

#[test]
fn two_point_posterior_matches_dense_oracle() {
    let z = vec![vec![0.0, 0.5], vec![0.8, -0.3]];
    let y = vec![vec![0.4], vec![-1.1]];
    let p = kern(1.5, &[0.9, 1.4], 0.05);
    let data = TrainingSet::new(z.clone(), y).unwrap();
    let model = GpModel::with_params(&data, vec![p.clone()], PriorMean::Zero).unwrap();
    let oracle = Dense::new(&z, &p, model.jitter(0));
    let r = DVector::from_vec(vec![0.4, -1.1]);
    let q = [0.3, 0.1];
    let k = Dense::cross(&z, &q, &p);
    let mean = k.dot(&(&oracle.kinv * &r));
    let var = p.signal_variance - k.dot(&(&oracle.kinv * &k));
    assert!((model.posterior_mean(&q).unwrap()[0] - mean).abs() <= 1e-10);
    assert!((model.posterior_variance(&q).unwrap()[0] - var).abs() <= 1e-10);

    let lml = -0.5 * r.dot(&(&oracle.kinv * &r)) - 0.5 * oracle.det.ln() - LN_2PI;
    assert!((model.log_marginal_likelihood(0) - lml).abs() <= 1e-10);
    assert!((log_marginal_likelihood(&p, &z, &[0.4, -1.1]).unwrap() - lml).abs() <= 1e-10);
}

#[test]
fn single_point_likelihood_closed_form() {
    let p = kern(1.0, &[1.0], 0.0);
    let lml = log_marginal_likelihood(&p, &[vec![0.0]], &[0.0]).unwrap();
    assert!((lml + 0.9189385332046727).abs() < 1e-9);
}

#[test]
fn noise_doubling_on_pure_noise_data() {
    // Far-apart inputs with a tiny signal variance make K ≈ σn² I, so the
    // closed form is that of N independent Gaussians.
    let z: Vec<Vec<f64>> = (0..6).map(|i| vec![100.0 * i as f64]).collect();
    let r = [0.3, -0.1, 0.05, 0.2, -0.4, 0.12];
    let closed = |sn2: f64, sf2: f64, jitter: f64| {
        let s = sn2 + sf2 + jitter;
        let ss: f64 = r.iter().map(|v| v * v).sum();
        -0.5 * ss / s - 0.5 * 6.0 * s.ln() - 3.0 * LN_2PI
    };
    for sn2 in [0.01, 0.02] {
        let p = kern(1e-6, &[1.0], sn2);
        let jitter = 1e-10 * (1e-6 + sn2);
        let got = log_marginal_likelihood(&p, &z, &r).unwrap();
        assert!((got - closed(sn2, 1e-6, jitter)).abs() <= 1e-10, "{got}");
    }
    let change = log_marginal_likelihood(&kern(1e-6, &[1.0], 0.02), &z, &r).unwrap()
        - log_marginal_likelihood(&kern(1e-6, &[1.0], 0.01), &z, &r).unwrap();
    let expect = closed(0.02, 1e-6, 1e-10 * (0.02 + 1e-6)) - closed(0.01, 1e-6, 1e-10 * (0.01 + 1e-6));
    assert!((change - expect).abs() <= 1e-10);
}

#[test]
fn cholesky_posterior_matches_direct_inverse() {
    let mut r = rng(7);
    for _ in 0..20 {
        let n = r.random_range(2..=20);
        let d = r.random_range(1..=6);
        let z = random_rows(&mut r, n, d, 2.0);
        let y: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.3..3.0)).collect();
        let p = kern(r.random_range(0.1..3.0), &ls, r.random_range(1e-3..1e-1));
        let data = TrainingSet::new(z.clone(), y.clone()).unwrap();
        let model = GpModel::with_params(&data, vec![p.clone()], PriorMean::Zero).unwrap();
        let oracle = Dense::new(&z, &p, model.jitter(0));
        let rv = DVector::from_iterator(n, y.iter().map(|v| v[0]));
        for _ in 0..10 {
            let q: Vec<f64> = (0..d).map(|_| r.random_range(-2.5..2.5)).collect();
            let k = Dense::cross(&z, &q, &p);
            let mean = k.dot(&(&oracle.kinv * &rv));
            let var = p.signal_variance - k.dot(&(&oracle.kinv * &k));
            let m = model.posterior_mean(&q).unwrap()[0];
            let v = model.posterior_variance(&q).unwrap()[0];
            let mean_scale = k.iter().zip((&oracle.kinv * &rv).iter()).map(|(a, b)| (a * b).abs()).sum::<f64>();
            assert!((m - mean).abs() <= 1e-10 * mean_scale.max(mean.abs()));
            assert!((v - var.max(0.0)).abs() <= 1e-10 * p.signal_variance);
        }
    }
}

#[test]
fn empty_model_returns_prior() {
    let p = kern(2.0, &[1.0, 1.0], 0.1);
    let model = GpModel::prior_only(2, vec![p.clone(), p], PriorMean::Constant(vec![0.5, -0.5])).unwrap();
    assert_eq!(model.posterior_mean(&[0.3, 0.2]).unwrap(), vec![0.5, -0.5]);
    assert_eq!(model.posterior_variance(&[0.3, 0.2]).unwrap(), vec![2.0, 2.0]);
    assert_eq!(model.n_train(), 0);
}

#[test]
fn noiseless_model_interpolates() {
    let mut r = rng(11);
    let z = random_rows(&mut r, 8, 2, 3.0);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0].sin() + v[1], v[0] * v[1]]).collect();
    let data = TrainingSet::new(z.clone(), y.clone()).unwrap();
    let p = kern(1.0, &[0.8, 0.8], 0.0);
    let model = GpModel::with_params(&data, vec![p.clone(), p], PriorMean::Zero).unwrap();
    for (zi, yi) in z.iter().zip(&y) {
        let m = model.posterior_mean(zi).unwrap();
        let v = model.posterior_variance(zi).unwrap();
        for e in 0..2 {
            assert!((m[e] - yi[e]).abs() <= 1e-8);
            assert!(v[e] <= 1e-8);
        }
    }
}

#[test]
fn external_prior_is_added_by_caller() {
    let data = TrainingSet::new(vec![vec![0.0], vec![1.0]], vec![vec![0.1], vec![-0.2]]).unwrap();
    let model = GpModel::with_params(&data, vec![kern(1.0, &[1.0], 0.01)], PriorMean::External).unwrap();
    assert!(model.posterior_mean(&[0.5]).is_err());
    let r = model.residual_mean(&[0.5]).unwrap()[0];
    assert_eq!(model.posterior_mean_with_prior(&[0.5], &[3.0]).unwrap()[0], 3.0 + r);
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let z = random_rows(&mut r, 15, 3, 2.0);
    let y: Vec<f64> = z.iter().map(|v| v[0].sin() - 0.5 * v[1] * v[2]).collect();
    for _ in 0..10 {
        let ls: Vec<f64> = (0..3).map(|_| r.random_range(0.3..3.0)).collect();
        let p = kern(r.random_range(0.2..3.0), &ls, r.random_range(1e-3..1e-1));
        let (_, grad) = log_marginal_likelihood_grad(&p, &z, &y).unwrap();
        let theta = p.to_log();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (log_marginal_likelihood(&KernelParams::from_log(&tp), &z, &y).unwrap()
                - log_marginal_likelihood(&KernelParams::from_log(&tm), &z, &y).unwrap())
                / (2.0 * h);
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
            assert!((grad[i] - fd).abs() <= 1e-5 * scale, "component {i}: {} vs {fd}", grad[i]);
        }
    }
}

#[test]
fn variance_stays_within_prior_bounds() {
    let mut r = rng(13);
    let z = random_rows(&mut r, 30, 3, 1.0);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![v.iter().sum::<f64>().cos()]).collect();
    let data = TrainingSet::new(z, y).unwrap();
    let model = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(3, 1)).unwrap();
    let sf2 = model.kernel(0).signal_variance;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
        let v = model.posterior_variance(&q).unwrap()[0];
        assert!((0.0..=sf2).contains(&v));
    }
}

#[test]
fn conditioning_never_increases_variance() {
    let mut r = rng(17);
    let p = kern(1.2, &[0.7, 1.1], 1e-3);
    let z = random_rows(&mut r, 12, 2, 2.0);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0] - v[1]]).collect();
    let queries = random_rows(&mut r, 200, 2, 2.5);
    let mut previous: Option<Vec<f64>> = None;
    for n in 1..=12 {
        let data = TrainingSet::new(z[..n].to_vec(), y[..n].to_vec()).unwrap();
        let model = GpModel::with_params(&data, vec![p.clone()], PriorMean::Zero).unwrap();
        let vars: Vec<f64> = queries.iter().map(|q| model.posterior_variance(q).unwrap()[0]).collect();
        if let Some(prev) = &previous {
            for (a, b) in vars.iter().zip(prev) {
                assert!(*a <= b + 1e-9);
            }
        }
        previous = Some(vars);
    }
}

#[test]
fn fit_is_deterministic() {
    let mut r = rng(19);
    let z = random_rows(&mut r, 25, 2, 2.0);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0].sin(), v[1] * 0.1]).collect();
    let data = TrainingSet::new(z, y).unwrap();
    let a = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(1, 42)).unwrap();
    let b = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(1, 42)).unwrap();
    for e in 0..2 {
        assert_eq!(a.kernel(e), b.kernel(e));
    }
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn more_restarts_never_lower_the_likelihood() {
    let mut r = rng(23);
    let z = random_rows(&mut r, 40, 2, 3.0);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![(2.0 * v[0]).sin() * v[1]]).collect();
    let data = TrainingSet::new(z, y).unwrap();
    let one = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(1, 3)).unwrap();
    let ten = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(10, 3)).unwrap();
    assert!(ten.log_marginal_likelihood(0) >= one.log_marginal_likelihood(0));
}

#[test]
fn recovers_lengthscale_of_sampled_function() {
    let mut r = rng(29);
    let z: Vec<Vec<f64>> = (0..200).map(|_| vec![r.random_range(-8.0..8.0)]).collect();
    let truth = kern(1.0, &[1.0], 0.0);
    let k = Dense::new(&z, &truth, 1e-8);
    let mut chol_in = k.kinv.try_inverse().unwrap();
    chol_in = (&chol_in + chol_in.transpose()) * 0.5;
    let l = chol_in.cholesky().unwrap().l();
    let w = DVector::from_iterator(200, (0..200).map(|_| r.sample::<f64, _>(StandardNormal)));
    let f = l * w;
    let y: Vec<Vec<f64>> = f.iter().map(|v| vec![v + 1e-2 * r.sample::<f64, _>(StandardNormal)]).collect();
    let data = TrainingSet::new(z, y).unwrap();
    let model = GpModel::fit(&data, PriorMean::Zero, &FitOptions::new(20, 0)).unwrap();
    let ell = model.kernel(0).lengthscales[0];
    assert!((0.5..=2.0).contains(&ell), "recovered lengthscale {ell}");
}

#[test]
fn constant_prior_uses_target_means() {
    let data = TrainingSet::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 9.0]])
        .unwrap();
    assert_eq!(PriorMean::constant_from(&data), PriorMean::Constant(vec![2.0, 6.0]));
}

#[test]
fn json_round_trip_reproduces_predictions() {
    let mut r = rng(31);
    let z = random_rows(&mut r, 30, 3, 1.5);
    let y: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0] * v[1], v[2].cos()]).collect();
    let data = TrainingSet::new(z, y).unwrap();
    let model = GpModel::fit(&data, PriorMean::constant_from(&data), &FitOptions::new(2, 9)).unwrap();
    let back = GpModel::from_json(&model.to_json().unwrap()).unwrap();
    for _ in 0..100 {
        let q: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let (m0, m1) = (model.posterior_mean(&q).unwrap(), back.posterior_mean(&q).unwrap());
        let (v0, v1) = (model.posterior_variance(&q).unwrap(), back.posterior_variance(&q).unwrap());
        for e in 0..2 {
            assert!((m0[e] - m1[e]).abs() <= 1e-12 && (v0[e] - v1[e]).abs() <= 1e-12);
        }
    }
}

#[test]
fn fit_preconditions() {
    let one = TrainingSet::new(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
    assert!(GpModel::fit(&one, PriorMean::Zero, &FitOptions::new(1, 0)).is_err());
    let two = TrainingSet::new(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![0.0]]).unwrap();
    assert!(GpModel::fit(&two, PriorMean::Zero, &FitOptions::new(0, 0)).is_err());
    assert!(TrainingSet::new(vec![vec![0.0]], vec![vec![f64::INFINITY]]).is_err());
    assert!(TrainingSet::new(vec![vec![0.0], vec![1.0, 2.0]], vec![vec![1.0], vec![0.0]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_variance_is_bounded(seed in 0u64..100_000, n in 1usize..15, d in 1usize..4, sn2 in 0.0f64..0.1) {
        let mut r = rng(seed);
        let z = random_rows(&mut r, n, d, 2.0);
        let y: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.2..3.0)).collect();
        let p = kern(r.random_range(0.1..5.0), &ls, sn2);
        let model = GpModel::with_params(&TrainingSet::new(z, y).unwrap(), vec![p.clone()], PriorMean::Zero).unwrap();
        for _ in 0..20 {
            let q: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
            let v = model.posterior_variance(&q).unwrap()[0];
            prop_assert!(v >= 0.0 && v <= p.signal_variance);
        }
    }
}
