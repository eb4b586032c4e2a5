//! Exact GP regression with an ARD squared-exponential kernel, one scalar GP
//! per output dimension over a shared input set.

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::Solve;
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optim::{minimize_box, LbfgsConfig};
use crate::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

const INIT_LENGTHSCALE: (f64, f64) = (1e-2, 1e2);
const INIT_SIGNAL: (f64, f64) = (1e-4, 1e2);
const INIT_NOISE: (f64, f64) = (1e-8, 1e-1);

// Box for the optimizer, wider than the initial-guess ranges.
const BOUND_LENGTHSCALE: (f64, f64) = (1e-3, 1e4);
const BOUND_SIGNAL: (f64, f64) = (1e-10, 1e6);
const BOUND_NOISE: (f64, f64) = (1e-12, 1e1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let p = KernelParams {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && self.noise_variance >= 0.0
            && self.noise_variance.is_finite()
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid kernel parameters {self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[log ℓ_1 .. log ℓ_D, log σf², log σn²]`
    pub fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        KernelParams {
            lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }
}

pub fn kernel_eval(z1: &[f64], z2: &[f64], params: &KernelParams) -> Result<f64> {
    if z1.len() != params.dim() || z2.len() != params.dim() {
        let got = if z1.len() != params.dim() { z1.len() } else { z2.len() };
        return Err(Error::Shape {
            expected: params.dim(),
            got,
        });
    }
    Ok(kernel_unchecked(z1, z2, params))
}

fn kernel_unchecked(z1: &[f64], z2: &[f64], params: &KernelParams) -> f64 {
    let r2: f64 = z1
        .iter()
        .zip(z2)
        .zip(&params.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    params.signal_variance * (-0.5 * r2).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        let set = TrainingSet { inputs, targets };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Shape {
                expected: self.inputs.len(),
                got: self.targets.len(),
            });
        }
        let (d, e) = (self.inputs[0].len(), self.targets[0].len());
        for (i, (z, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if z.len() != d {
                return Err(Error::Shape { expected: d, got: z.len() });
            }
            if y.len() != e {
                return Err(Error::Shape { expected: e, got: y.len() });
            }
            if !z.iter().chain(y).all(|v| v.is_finite()) {
                return Err(Error::Input(format!("row {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn column(&self, e: usize) -> Vec<f64> {
        self.targets.iter().map(|y| y[e]).collect()
    }
}

/// `K(Z,Z) + (σn² + jitter) I`.
pub fn gram_matrix(inputs: &[Vec<f64>], params: &KernelParams, jitter: f64) -> Result<Mat<f64>> {
    if inputs.is_empty() {
        return Err(Error::Input("Gram matrix of an empty input set".into()));
    }
    for z in inputs {
        if z.len() != params.dim() {
            return Err(Error::Shape {
                expected: params.dim(),
                got: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite Gram input".into()));
        }
    }
    Ok(gram_unchecked(inputs, params, params.noise_variance + jitter))
}

fn gram_unchecked(inputs: &[Vec<f64>], params: &KernelParams, diag: f64) -> Mat<f64> {
    let n = inputs.len();
    let mut k = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance + diag;
        for j in 0..i {
            let v = kernel_unchecked(&inputs[i], &inputs[j], params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + σn² I` with escalating jitter. Returns the lower factor
/// and the jitter that made it succeed.
fn factorize(inputs: &[Vec<f64>], params: &KernelParams) -> Result<(faer::linalg::solvers::Llt<f64>, f64)> {
    let mean_diag = params.signal_variance + params.noise_variance;
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * mean_diag;
        // Rebuilt per attempt so the diagonal rounds exactly as in `factorize_fixed`.
        if let Ok(llt) = gram_unchecked(inputs, params, params.noise_variance + jitter).llt(Side::Lower) {
            return Ok((llt, jitter));
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::Cholesky { jitter });
        }
        rel *= 10.0;
    }
}

fn factorize_fixed(inputs: &[Vec<f64>], params: &KernelParams, jitter: f64) -> Result<faer::linalg::solvers::Llt<f64>> {
    gram_unchecked(inputs, params, params.noise_variance + jitter)
        .llt(Side::Lower)
        .map_err(|_| Error::Cholesky { jitter })
}

fn solve_column(llt: &faer::linalg::solvers::Llt<f64>, r: &[f64]) -> Vec<f64> {
    let mut rhs = Mat::<f64>::from_fn(r.len(), 1, |i, _| r[i]);
    llt.solve_in_place(rhs.as_mut());
    (0..r.len()).map(|i| rhs[(i, 0)]).collect()
}

fn log_det(llt: &faer::linalg::solvers::Llt<f64>) -> f64 {
    let l = llt.L();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

fn lml_from(llt: &faer::linalg::solvers::Llt<f64>, r: &[f64]) -> (f64, Vec<f64>) {
    let alpha = solve_column(llt, r);
    let fit: f64 = r.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let n = r.len() as f64;
    let lml = -0.5 * fit - 0.5 * log_det(llt) - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (lml, alpha)
}

/// Log marginal likelihood of the residual column `r`, with the jitter policy
/// applied to the Gram matrix.
pub fn log_marginal_likelihood(params: &KernelParams, inputs: &[Vec<f64>], r: &[f64]) -> Result<f64> {
    params.validate()?;
    if inputs.len() != r.len() {
        return Err(Error::Shape {
            expected: inputs.len(),
            got: r.len(),
        });
    }
    gram_matrix(inputs, params, 0.0)?;
    let (llt, _) = factorize(inputs, params)?;
    Ok(lml_from(&llt, r).0)
}

/// Log marginal likelihood and its gradient with respect to
/// [`KernelParams::to_log`]. Jitter is treated as a constant.
pub fn log_marginal_likelihood_grad(params: &KernelParams, inputs: &[Vec<f64>], r: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = r.len();
    let d = params.dim();
    // Off-diagonal kernel values, computed once and shared by the factorization and the trace.
    let scaled: Vec<Vec<f64>> = inputs
        .iter()
        .map(|z| z.iter().zip(&params.lengthscales).map(|(a, l)| a / l).collect())
        .collect();
    // Column-major strict lower triangle: entry (i, j), i > j, at j n + i.
    let mut kern = vec![0.0; n * n];
    for j in 0..n {
        for i in j + 1..n {
            let r2: f64 = scaled[i].iter().zip(&scaled[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            kern[j * n + i] = params.signal_variance * (-0.5 * r2).exp();
        }
    }
    let mean_diag = params.signal_variance + params.noise_variance;
    let mut rel = JITTER_START;
    let llt = loop {
        let jitter = rel * mean_diag;
        let diag = params.signal_variance + (params.noise_variance + jitter);
        let k = Mat::<f64>::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => kern[j * n + i],
            std::cmp::Ordering::Equal => diag,
            std::cmp::Ordering::Less => 0.0,
        });
        if let Ok(llt) = k.llt(Side::Lower) {
            break llt;
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::Cholesky { jitter });
        }
        rel *= 10.0;
    };
    let (lml, alpha) = lml_from(&llt, r);
    let kinv = llt.inverse();
    let mut grad = vec![0.0; d + 2];
    let mut diag_w = 0.0;
    for j in 0..n {
        diag_w += alpha[j] * alpha[j] - kinv[(j, j)];
        for i in j + 1..n {
            // Off-diagonal pairs appear twice in the trace.
            let wk = 2.0 * (alpha[i] * alpha[j] - kinv[(i, j)]) * kern[j * n + i];
            grad[d] += 0.5 * wk;
            for (k, (a, b)) in scaled[i].iter().zip(&scaled[j]).enumerate() {
                grad[k] += 0.5 * wk * (a - b) * (a - b);
            }
        }
    }
    grad[d] += 0.5 * diag_w * params.signal_variance;
    grad[d + 1] = 0.5 * diag_w * params.noise_variance;
    Ok((lml, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum PriorMean {
    Zero,
    /// Per-dimension constant, usually the target means.
    Constant(Vec<f64>),
    /// Supplied by the caller at each query, e.g. a nominal model.
    External,
}

impl PriorMean {
    pub fn constant_from(data: &TrainingSet) -> Self {
        let n = data.len() as f64;
        PriorMean::Constant((0..data.output_dim()).map(|e| data.column(e).iter().sum::<f64>() / n).collect())
    }

    /// Prior value at a point, for kinds that do not need the caller.
    pub fn intrinsic(&self, output_dim: usize) -> Option<Vec<f64>> {
        match self {
            PriorMean::Zero => Some(vec![0.0; output_dim]),
            PriorMean::Constant(c) => Some(c.clone()),
            PriorMean::External => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub optimizer: LbfgsConfig,
}

impl FitOptions {
    pub fn new(restarts: usize, seed: u64) -> Self {
        FitOptions {
            restarts,
            seed,
            optimizer: LbfgsConfig::default(),
        }
    }
}

/// Initial hyperparameters for one restart. Streams are keyed by
/// `(seed, dim, restart)` so the draw does not depend on scheduling.
pub fn initial_guess(input_dim: usize, seed: u64, dim: usize, restart: usize) -> KernelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((dim as u64) << 32) | restart as u64);
    let mut log_uniform = |(lo, hi): (f64, f64)| (rng.random_range(f64::ln(lo)..f64::ln(hi))).exp();
    let lengthscales = (0..input_dim).map(|_| log_uniform(INIT_LENGTHSCALE)).collect();
    let signal_variance = log_uniform(INIT_SIGNAL);
    let noise_variance = log_uniform(INIT_NOISE);
    KernelParams {
        signal_variance,
        lengthscales,
        noise_variance,
    }
}

fn optimize_restart(inputs: &[Vec<f64>], r: &[f64], init: &KernelParams, cfg: &LbfgsConfig) -> std::result::Result<(KernelParams, f64), String> {
    let d = init.dim();
    let mut lower = vec![BOUND_LENGTHSCALE.0.ln(); d];
    let mut upper = vec![BOUND_LENGTHSCALE.1.ln(); d];
    lower.extend([BOUND_SIGNAL.0.ln(), BOUND_NOISE.0.ln()]);
    upper.extend([BOUND_SIGNAL.1.ln(), BOUND_NOISE.1.ln()]);
    let objective = |theta: &[f64]| {
        let p = KernelParams::from_log(theta);
        log_marginal_likelihood_grad(&p, inputs, r)
            .ok()
            .map(|(l, g)| (-l, g.into_iter().map(|v| -v).collect()))
    };
    let m = minimize_box(objective, &init.to_log(), &lower, &upper, cfg)?;
    Ok((KernelParams::from_log(&m.x), -m.value))
}

#[derive(Clone, Debug)]
struct DimModel {
    params: KernelParams,
    jitter: f64,
    lml: f64,
    chol: Mat<f64>,
    alpha: Vec<f64>,
}

impl DimModel {
    fn build(inputs: &[Vec<f64>], r: &[f64], params: KernelParams, jitter: Option<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Ok(DimModel {
                params,
                jitter: jitter.unwrap_or(0.0),
                lml: 0.0,
                chol: Mat::zeros(0, 0),
                alpha: Vec::new(),
            });
        }
        let (llt, jitter) = match jitter {
            Some(j) => (factorize_fixed(inputs, &params, j)?, j),
            None => factorize(inputs, &params)?,
        };
        let (lml, alpha) = lml_from(&llt, r);
        Ok(DimModel {
            params,
            jitter,
            lml,
            chol: llt.L().to_owned(),
            alpha,
        })
    }
}

/// Fitted per-dimension GPs. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "GpModelDoc", try_from = "GpModelDoc")]
pub struct GpModel {
    dims: Vec<DimModel>,
    inputs: Vec<Vec<f64>>,
    residuals: Vec<Vec<f64>>,
    prior: PriorMean,
    seed: u64,
    input_dim: usize,
}

impl GpModel {
    /// Fits one GP per column of `data.targets`, treated as residuals
    /// against `prior`. Each dimension keeps the restart with the highest
    /// log marginal likelihood; ties go to the lowest restart index.
    pub fn fit(data: &TrainingSet, prior: PriorMean, options: &FitOptions) -> Result<Self> {
        data.validate()?;
        if data.len() < 2 {
            return Err(Error::Input(format!("need at least 2 training points, got {}", data.len())));
        }
        if options.restarts == 0 {
            return Err(Error::Input("restarts must be at least 1".into()));
        }
        let (n_dims, d) = (data.output_dim(), data.input_dim());
        let jobs: Vec<(usize, usize)> = (0..n_dims).flat_map(|e| (0..options.restarts).map(move |k| (e, k))).collect();
        let columns: Vec<Vec<f64>> = (0..n_dims).map(|e| data.column(e)).collect();
        let outcomes: Vec<std::result::Result<(KernelParams, f64), String>> = jobs
            .par_iter()
            .map(|&(e, k)| {
                let init = initial_guess(d, options.seed, e, k);
                optimize_restart(&data.inputs, &columns[e], &init, &options.optimizer)
            })
            .collect();

        let mut dims = Vec::with_capacity(n_dims);
        let mut failures = Vec::new();
        for e in 0..n_dims {
            let mut best: Option<(KernelParams, f64)> = None;
            for k in 0..options.restarts {
                match &outcomes[e * options.restarts + k] {
                    Ok((p, lml)) if lml.is_finite() => {
                        if best.as_ref().is_none_or(|(_, b)| lml > b) {
                            best = Some((p.clone(), *lml));
                        }
                    }
                    Ok(_) => failures.push(format!("dim {e} restart {k}: non-finite likelihood")),
                    Err(msg) => failures.push(format!("dim {e} restart {k}: {msg}")),
                }
            }
            let Some((params, _)) = best else {
                return Err(Error::Fit { failures });
            };
            dims.push(DimModel::build(&data.inputs, &columns[e], params, None)?);
        }
        Ok(GpModel {
            dims,
            inputs: data.inputs.clone(),
            residuals: data.targets.clone(),
            prior,
            seed: options.seed,
            input_dim: d,
        })
    }

    /// Conditions on `data` with fixed hyperparameters (no optimisation).
    pub fn with_params(data: &TrainingSet, params: Vec<KernelParams>, prior: PriorMean) -> Result<Self> {
        data.validate()?;
        if params.len() != data.output_dim() {
            return Err(Error::Shape {
                expected: data.output_dim(),
                got: params.len(),
            });
        }
        let dims = params
            .into_iter()
            .enumerate()
            .map(|(e, p)| {
                p.validate()?;
                if p.dim() != data.input_dim() {
                    return Err(Error::Shape {
                        expected: data.input_dim(),
                        got: p.dim(),
                    });
                }
                DimModel::build(&data.inputs, &data.column(e), p, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel {
            dims,
            inputs: data.inputs.clone(),
            residuals: data.targets.clone(),
            prior,
            seed: 0,
            input_dim: data.input_dim(),
        })
    }

    /// A model with no conditioning data: predictions are the prior.
    pub fn prior_only(input_dim: usize, params: Vec<KernelParams>, prior: PriorMean) -> Result<Self> {
        for p in &params {
            p.validate()?;
            if p.dim() != input_dim {
                return Err(Error::Shape {
                    expected: input_dim,
                    got: p.dim(),
                });
            }
        }
        Ok(GpModel {
            dims: params
                .into_iter()
                .map(|p| DimModel::build(&[], &[], p, Some(0.0)))
                .collect::<Result<_>>()?,
            inputs: Vec::new(),
            residuals: Vec::new(),
            prior,
            seed: 0,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    pub fn prior(&self) -> &PriorMean {
        &self.prior
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Targets the GP was conditioned on, after subtracting the prior mean.
    pub fn residual_targets(&self) -> &[Vec<f64>] {
        &self.residuals
    }

    pub fn kernel(&self, e: usize) -> &KernelParams {
        &self.dims[e].params
    }

    pub fn jitter(&self, e: usize) -> f64 {
        self.dims[e].jitter
    }

    pub fn log_marginal_likelihood(&self, e: usize) -> f64 {
        self.dims[e].lml
    }

    pub fn chol_factor(&self, e: usize) -> &Mat<f64> {
        &self.dims[e].chol
    }

    pub fn weights(&self, e: usize) -> &[f64] {
        &self.dims[e].alpha
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                got: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite query".into()));
        }
        Ok(())
    }

    fn cross(&self, e: usize, z: &[f64]) -> Vec<f64> {
        let p = &self.dims[e].params;
        self.inputs.iter().map(|zi| kernel_unchecked(z, zi, p)).collect()
    }

    /// `k(z,Z)·α` per dimension, the correction on top of the prior mean.
    pub fn residual_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_query(z)?;
        Ok((0..self.dims.len())
            .map(|e| {
                let k = self.cross(e, z);
                k.iter().zip(&self.dims[e].alpha).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    /// Posterior mean for zero or constant priors.
    pub fn posterior_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        let prior = self
            .prior
            .intrinsic(self.output_dim())
            .ok_or_else(|| Error::Input("external prior mean needs caller-supplied values".into()))?;
        self.posterior_mean_with_prior(z, &prior)
    }

    /// Posterior mean given the prior mean evaluated at `z` by the caller.
    pub fn posterior_mean_with_prior(&self, z: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
        if prior.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: prior.len(),
            });
        }
        let r = self.residual_mean(z)?;
        Ok(prior.iter().zip(r).map(|(a, b)| a + b).collect())
    }

    pub fn posterior_variance(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_query(z)?;
        Ok((0..self.dims.len())
            .map(|e| {
                let dim = &self.dims[e];
                let prior_var = dim.params.signal_variance;
                if self.inputs.is_empty() {
                    return prior_var;
                }
                let k = self.cross(e, z);
                let mut rhs = Mat::<f64>::from_fn(k.len(), 1, |i, _| k[i]);
                faer::linalg::triangular_solve::solve_lower_triangular_in_place(
                    dim.chol.as_ref(),
                    rhs.as_mut(),
                    faer::Par::Seq,
                );
                let explained: f64 = (0..k.len()).map(|i| rhs[(i, 0)] * rhs[(i, 0)]).sum();
                (prior_var - explained).clamp(0.0, prior_var)
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DimDoc {
    kernel: KernelParams,
    jitter: f64,
    log_marginal_likelihood: f64,
}

#[derive(Serialize, Deserialize)]
struct GpModelDoc {
    input_dim: usize,
    dims: Vec<DimDoc>,
    inputs: Vec<Vec<f64>>,
    residual_targets: Vec<Vec<f64>>,
    prior_mean: PriorMean,
    seed: u64,
}

impl From<GpModel> for GpModelDoc {
    fn from(m: GpModel) -> Self {
        GpModelDoc {
            input_dim: m.input_dim,
            dims: m
                .dims
                .into_iter()
                .map(|d| DimDoc {
                    kernel: d.params,
                    jitter: d.jitter,
                    log_marginal_likelihood: d.lml,
                })
                .collect(),
            inputs: m.inputs,
            residual_targets: m.residuals,
            prior_mean: m.prior,
            seed: m.seed,
        }
    }
}

impl TryFrom<GpModelDoc> for GpModel {
    type Error = Error;

    fn try_from(doc: GpModelDoc) -> Result<Self> {
        if doc.inputs.len() != doc.residual_targets.len() {
            return Err(Error::Shape {
                expected: doc.inputs.len(),
                got: doc.residual_targets.len(),
            });
        }
        let dims = doc
            .dims
            .into_iter()
            .enumerate()
            .map(|(e, d)| {
                d.kernel.validate()?;
                let r: Vec<f64> = doc.residual_targets.iter().map(|y| y[e]).collect();
                let mut m = DimModel::build(&doc.inputs, &r, d.kernel, Some(d.jitter))?;
                m.lml = if doc.inputs.is_empty() { d.log_marginal_likelihood } else { m.lml };
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel {
            dims,
            inputs: doc.inputs,
            residuals: doc.residual_targets,
            prior: doc.prior_mean,
            seed: doc.seed,
            input_dim: doc.input_dim,
        })
    }
}
