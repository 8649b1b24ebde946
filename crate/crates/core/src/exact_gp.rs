//! Exact zero-mean GP regression. Used directly for hyperparameter fitting
//! and as the reference the sparse model is checked against.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{
    factorize_gram, kernel_gram, kernel_matrix, row_major, sq_dist, Factorization, KernelSpec,
};

/// Posterior means (one column per target column) and latent variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub means: DMatrix<f64>,
    pub variances: DVector<f64>,
}

impl Prediction {
    /// Index of the largest mean column per row; ties go to the lowest index.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.means.nrows())
            .map(|i| {
                let row = self.means.row(i);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExactGpModel {
    train_inputs: DMatrix<f64>,
    train_targets: DMatrix<f64>,
    spec: KernelSpec,
    noisy_gram_factor: Factorization,
    solved_targets: DMatrix<f64>,
}

fn noisy_gram(x: &DMatrix<f64>, spec: &KernelSpec) -> DMatrix<f64> {
    let mut k = kernel_gram(x, spec);
    for i in 0..k.nrows() {
        k[(i, i)] += spec.noise_variance;
    }
    k
}

fn check_query(xq: &DMatrix<f64>, d: usize) -> Result<()> {
    if xq.ncols() != d {
        return Err(Error::input(format!(
            "queries have dimension {}, model expects {d}",
            xq.ncols()
        )));
    }
    Ok(())
}

/// Fits the exact posterior, sharing one factorization of K_nn + σ²I across
/// all target columns.
pub fn fit_exact(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<ExactGpModel> {
    spec.validate()?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::input("exact GP needs at least one training point"));
    }
    if targets.nrows() != x.nrows() {
        return Err(Error::input(format!(
            "{} target rows for {} training points",
            targets.nrows(),
            x.nrows()
        )));
    }
    let factor = factorize_gram(&noisy_gram(x, spec), spec.base_jitter())?;
    let solved = factor.solve(targets);
    Ok(ExactGpModel {
        train_inputs: x.clone(),
        train_targets: targets.clone(),
        spec: *spec,
        noisy_gram_factor: factor,
        solved_targets: solved,
    })
}

impl ExactGpModel {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn jitter_used(&self) -> f64 {
        self.noisy_gram_factor.jitter()
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub fn train_targets(&self) -> &DMatrix<f64> {
        &self.train_targets
    }

    /// Posterior mean and latent variance (observation noise excluded).
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<Prediction> {
        check_query(xq, self.train_inputs.ncols())?;
        let kqn = kernel_matrix(xq, &self.train_inputs, &self.spec)?;
        let means = &kqn * &self.solved_targets;
        let v = self.noisy_gram_factor.solve_lower(&kqn.transpose());
        let variances = DVector::from_fn(xq.nrows(), |i, _| {
            let reduction: f64 = v.column(i).norm_squared();
            (self.spec.signal_variance - reduction).max(0.0)
        });
        Ok(Prediction { means, variances })
    }

    /// Predictive distribution of a new noisy observation.
    pub fn predict_observed(&self, xq: &DMatrix<f64>) -> Result<Prediction> {
        let mut p = self.predict(xq)?;
        p.variances.add_scalar_mut(self.spec.noise_variance);
        Ok(p)
    }
}

fn single_column_log_marginal(factor: &Factorization, y: &DVector<f64>) -> f64 {
    let alpha = factor.solve_vec(y);
    let n = y.len() as f64;
    -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln()
}

/// log N(y | 0, K_nn + σ²I)
pub fn log_marginal(x: &DMatrix<f64>, y: &DVector<f64>, spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    if y.len() != x.nrows() {
        return Err(Error::input(format!(
            "{} targets for {} training points",
            y.len(),
            x.nrows()
        )));
    }
    let factor = factorize_gram(&noisy_gram(x, spec), spec.base_jitter())?;
    Ok(single_column_log_marginal(&factor, y))
}

/// Hyperparameters in log space: (log ℓ, log σ_f², log σ_noise²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogParams(pub [f64; 3]);

impl LogParams {
    pub fn from_spec(spec: &KernelSpec) -> Self {
        LogParams([
            spec.lengthscale.ln(),
            spec.signal_variance.ln(),
            spec.noise_variance.ln(),
        ])
    }

    pub fn to_spec(self) -> KernelSpec {
        KernelSpec {
            lengthscale: self.0[0].exp(),
            signal_variance: self.0[1].exp(),
            noise_variance: self.0[2].exp(),
        }
    }
}

/// Summed log marginal likelihood over the target columns and its gradient
/// with respect to the log-space hyperparameters.
pub fn log_marginal_with_grad(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<(f64, [f64; 3])> {
    spec.validate()?;
    if targets.nrows() != x.nrows() {
        return Err(Error::input("target rows do not match training points"));
    }
    let n = x.nrows();
    let cols = targets.ncols() as f64;
    let kf = kernel_gram(x, spec);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += spec.noise_variance;
    }
    let factor = factorize_gram(&k, spec.base_jitter())?;
    let alpha = factor.solve(targets);
    let value = -0.5 * targets.component_mul(&alpha).sum()
        - 0.5 * cols * factor.log_det()
        - 0.5 * cols * n as f64 * (2.0 * PI).ln();

    // dL/dθ = ½ tr((α αᵀ − C K⁻¹) ∂K/∂θ)
    let inv = factor.inverse();
    let w = &alpha * alpha.transpose() - inv * cols;
    let ell2 = spec.lengthscale * spec.lengthscale;
    let d = x.ncols();
    let rows = row_major(x);
    let mut g_ell = 0.0;
    let mut g_sf = 0.0;
    for j in 0..n {
        for i in 0..n {
            let kij = kf[(i, j)];
            let r2 = sq_dist(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]) / ell2;
            g_ell += w[(i, j)] * kij * r2;
            g_sf += w[(i, j)] * kij;
        }
    }
    let g_noise = spec.noise_variance * w.trace();
    Ok((value, [0.5 * g_ell, 0.5 * g_sf, 0.5 * g_noise]))
}

/// Lower/upper bounds (natural units) for each hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            lengthscale: (1e-3, 1e3),
            signal_variance: (1e-4, 1e4),
            noise_variance: (1e-6, 1e2),
        }
    }
}

impl ParamBounds {
    fn log_bounds(&self) -> [(f64, f64); 3] {
        [
            (self.lengthscale.0.ln(), self.lengthscale.1.ln()),
            (self.signal_variance.0.ln(), self.signal_variance.1.ln()),
            (self.noise_variance.0.ln(), self.noise_variance.1.ln()),
        ]
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("lengthscale", self.lengthscale),
            ("signal variance", self.signal_variance),
            ("noise variance", self.noise_variance),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::input(format!(
                    "{name} bounds must satisfy 0 < lo <= hi < inf, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Gradient ascent with backtracking line search in log-parameter space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Initial step length in log space along the normalized gradient.
    pub initial_step: f64,
    pub min_step: f64,
    pub grad_tol: f64,
    pub bounds: ParamBounds,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 200,
            initial_step: 0.5,
            min_step: 1e-10,
            grad_tol: 1e-8,
            bounds: ParamBounds::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub spec: KernelSpec,
    /// Objective after each accepted iteration, starting with the initial value.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn project(p: [f64; 3], bounds: &[(f64, f64); 3]) -> [f64; 3] {
    let mut out = p;
    for i in 0..3 {
        out[i] = out[i].clamp(bounds[i].0, bounds[i].1);
    }
    out
}

/// Projected gradient restricted to directions that stay inside the bounds.
fn free_gradient(p: &[f64; 3], g: &[f64; 3], bounds: &[(f64, f64); 3]) -> [f64; 3] {
    let mut out = *g;
    for i in 0..3 {
        let (lo, hi) = bounds[i];
        if (p[i] <= lo && g[i] < 0.0) || (p[i] >= hi && g[i] > 0.0) || lo == hi {
            out[i] = 0.0;
        }
    }
    out
}

fn norm3(g: &[f64; 3]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Maximizes the summed log marginal likelihood over the target columns.
pub fn optimize_hyperparams(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    init: &KernelSpec,
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    init.validate()?;
    config.bounds.validate()?;
    let bounds = config.bounds.log_bounds();
    let mut params = project(LogParams::from_spec(init).0, &bounds);
    let objective = |p: [f64; 3]| -> Option<(f64, [f64; 3])> {
        match log_marginal_with_grad(x, targets, &LogParams(p).to_spec()) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Some((v, g)),
            _ => None,
        }
    };
    let (mut value, mut grad) = objective(params).ok_or_else(|| {
        Error::input("log marginal likelihood is not finite at the initial hyperparameters")
    })?;
    let mut trace = vec![value];
    let mut step = config.initial_step;
    let mut converged = false;

    for _ in 0..config.max_iters {
        let g = free_gradient(&params, &grad, &bounds);
        let gnorm = norm3(&g);
        if gnorm < config.grad_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step >= config.min_step {
            let mut candidate = params;
            for i in 0..3 {
                candidate[i] += step * g[i] / gnorm;
            }
            let candidate = project(candidate, &bounds);
            if let Some((v, cg)) = objective(candidate) {
                if v > value {
                    params = candidate;
                    value = v;
                    grad = cg;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        trace.push(value);
        step = (step * 2.0).min(config.initial_step.max(1.0));
    }

    Ok(OptimizeResult {
        spec: LogParams(params).to_spec(),
        trace,
        converged,
    })
}
