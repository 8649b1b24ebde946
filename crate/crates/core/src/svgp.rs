//! Sparse variational GP with closed-form optimal variational parameters.
//!
//! With inducing inputs `Z` and `K_mm = L Lᵀ`, everything is computed in the
//! whitened basis `V = L⁻¹ K_mn`, `B = I + σ⁻² V Vᵀ`:
//!
//! * `Σ = (K_mm + σ⁻² K_mn K_nm)⁻¹ = L⁻ᵀ B⁻¹ L⁻¹`
//! * `μ = σ⁻² K_mm Σ K_mn y = σ⁻² L B⁻¹ V y`
//! * `A = K_mm Σ K_mm = L B⁻¹ Lᵀ`
//!
//! Predictions then only need `L⁻¹ μ` and `L⁻¹ A L⁻ᵀ = B⁻¹`, which stay well
//! conditioned even when `K_mm` is not.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exact_gp::Prediction;
use crate::kernels::{factorize_gram, kernel_gram, kernel_matrix, Factorization, KernelSpec};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMetadata {
    pub n_source: usize,
    pub jitter_used: f64,
    pub selection_method: String,
    pub seed: Option<u64>,
    /// Free-form entries carried through serialization (provenance, defaults).
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SvgpModel {
    inducing_inputs: DMatrix<f64>,
    inducing_labels: Vec<usize>,
    spec: KernelSpec,
    mu: DMatrix<f64>,
    a: DMatrix<f64>,
    kmm_factor: Factorization,
    whitened_mean: DMatrix<f64>,
    whitened_cov: DMatrix<f64>,
    pub metadata: ModelMetadata,
}

fn check_noise(spec: &KernelSpec) -> Result<()> {
    spec.validate()?;
    if spec.noise_variance <= 0.0 {
        return Err(Error::input(
            "sparse GP needs a strictly positive noise variance",
        ));
    }
    Ok(())
}

fn check_dims(x: &DMatrix<f64>, xm: &DMatrix<f64>) -> Result<()> {
    if xm.nrows() == 0 {
        return Err(Error::input("at least one inducing point is required"));
    }
    if x.ncols() != xm.ncols() {
        return Err(Error::input(format!(
            "training inputs have dimension {}, inducing inputs {}",
            x.ncols(),
            xm.ncols()
        )));
    }
    Ok(())
}

/// Shared whitened quantities for a training set and an inducing set.
struct Whitened {
    kmm: Factorization,
    v: DMatrix<f64>,
    b: Factorization,
}

fn whiten(x: &DMatrix<f64>, xm: &DMatrix<f64>, spec: &KernelSpec) -> Result<Whitened> {
    let kmm = factorize_gram(&kernel_gram(xm, spec), spec.base_jitter())?;
    let kmn = kernel_matrix(xm, x, spec)?;
    let v = kmm.solve_lower(&kmn);
    let m = xm.nrows();
    let mut b = &v * v.transpose() / spec.noise_variance;
    for i in 0..m {
        b[(i, i)] += 1.0;
    }
    let b = symmetrize(b);
    let b = factorize_gram(&b, 1e-12)?;
    Ok(Whitened { kmm, v, b })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Closed-form optimal variational parameters for the given inducing inputs.
pub fn fit_svgp(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    xm: &DMatrix<f64>,
    inducing_labels: &[usize],
    spec: &KernelSpec,
) -> Result<SvgpModel> {
    check_noise(spec)?;
    check_dims(x, xm)?;
    if targets.nrows() != x.nrows() {
        return Err(Error::input(format!(
            "{} target rows for {} training points",
            targets.nrows(),
            x.nrows()
        )));
    }
    if inducing_labels.len() != xm.nrows() {
        return Err(Error::input(format!(
            "{} inducing labels for {} inducing points",
            inducing_labels.len(),
            xm.nrows()
        )));
    }
    let w = whiten(x, xm, spec)?;
    let vy = &w.v * targets;
    let whitened_mean = w.b.solve(&vy) / spec.noise_variance;
    let whitened_cov = symmetrize(w.b.inverse());
    let l = w.kmm.lower();
    let mu = &l * &whitened_mean;
    let a = symmetrize(&l * &whitened_cov * l.transpose());
    let metadata = ModelMetadata {
        n_source: x.nrows(),
        jitter_used: w.kmm.jitter(),
        ..ModelMetadata::default()
    };
    Ok(SvgpModel {
        inducing_inputs: xm.clone(),
        inducing_labels: inducing_labels.to_vec(),
        spec: *spec,
        mu,
        a,
        kmm_factor: w.kmm,
        whitened_mean,
        whitened_cov,
        metadata,
    })
}

impl SvgpModel {
    /// Rebuilds a model from stored parameters, refactorizing K_mm.
    pub fn from_parts(
        inducing_inputs: DMatrix<f64>,
        inducing_labels: Vec<usize>,
        spec: KernelSpec,
        mu: DMatrix<f64>,
        a: DMatrix<f64>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        check_noise(&spec)?;
        let m = inducing_inputs.nrows();
        if m == 0 || inducing_inputs.ncols() == 0 {
            return Err(Error::input("model needs at least one inducing point"));
        }
        if inducing_labels.len() != m || mu.nrows() != m || a.shape() != (m, m) {
            return Err(Error::input("inconsistent model parameter shapes"));
        }
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-8 * scale {
            return Err(Error::input("variational covariance is not symmetric"));
        }
        let min_eig = SymmetricEigen::new(a.clone()).eigenvalues.min();
        if min_eig < -1e-8 * scale {
            return Err(Error::input(format!(
                "variational covariance has eigenvalue {min_eig}"
            )));
        }
        let kmm_factor = factorize_gram(&kernel_gram(&inducing_inputs, &spec), spec.base_jitter())?;
        let whitened_mean = kmm_factor.solve_lower(&mu);
        let whitened_cov =
            symmetrize(kmm_factor.solve_lower(&kmm_factor.solve_lower(&a).transpose()));
        Ok(SvgpModel {
            inducing_inputs,
            inducing_labels,
            spec,
            mu,
            a,
            kmm_factor,
            whitened_mean,
            whitened_cov,
            metadata,
        })
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.inducing_inputs
    }

    pub fn inducing_labels(&self) -> &[usize] {
        &self.inducing_labels
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Variational mean μ, one column per target column.
    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    /// Variational covariance A.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn kmm_jitter(&self) -> f64 {
        self.kmm_factor.jitter()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inducing_inputs.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.mu.ncols()
    }

    fn whitened_cross(&self, xq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xq.ncols() != self.dim() {
            return Err(Error::input(format!(
                "queries have dimension {}, model expects {}",
                xq.ncols(),
                self.dim()
            )));
        }
        let kmq = kernel_matrix(&self.inducing_inputs, xq, &self.spec)?;
        Ok(self.kmm_factor.solve_lower(&kmq))
    }

    /// Predictive mean and latent variance at each query row.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<Prediction> {
        let w = self.whitened_cross(xq)?;
        let means = w.transpose() * &self.whitened_mean;
        let sw = &self.whitened_cov * &w;
        let variances = DVector::from_fn(xq.nrows(), |i, _| {
            let nystrom = w.column(i).norm_squared();
            let propagated = w.column(i).dot(&sw.column(i));
            (self.spec.signal_variance - nystrom + propagated).max(0.0)
        });
        Ok(Prediction { means, variances })
    }

    /// Full posterior covariance k_q(X, X) over the rows of `x`.
    pub fn posterior_covariance(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let w = self.whitened_cross(x)?;
        let prior = kernel_gram(x, &self.spec);
        let cov = prior - w.transpose() * &w + w.transpose() * (&self.whitened_cov * &w);
        Ok(symmetrize(cov))
    }
}

/// Nyström approximation Q_nn = K_nm K_mm⁻¹ K_mn.
pub fn nystrom_matrix(
    xn: &DMatrix<f64>,
    xm: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_dims(xn, xm)?;
    let kmm = factorize_gram(&kernel_gram(xm, spec), spec.base_jitter())?;
    let v = kmm.solve_lower(&kernel_matrix(xm, xn, spec)?);
    Ok(symmetrize(v.transpose() * v))
}

/// Signed terms of the collapsed variational bound
/// `−n/2 log 2π − ½ yᵀ(Q+σ²I)⁻¹y − ½ log|Q+σ²I| − Tr(K−Q)/2σ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub constant: f64,
    pub data_fit: f64,
    pub complexity: f64,
    pub trace: f64,
}

/// Bound summed over target columns; the covariance terms are shared, so each
/// is counted once per column.
pub fn elbo_multi(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    xm: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<ElboBreakdown> {
    check_noise(spec)?;
    check_dims(x, xm)?;
    if targets.nrows() != x.nrows() {
        return Err(Error::input("target rows do not match training points"));
    }
    let n = x.nrows() as f64;
    let cols = targets.ncols() as f64;
    let s2 = spec.noise_variance;
    let w = whiten(x, xm, spec)?;
    let c = w.b.solve_lower(&(&w.v * targets));

    let constant = -0.5 * cols * n * (2.0 * PI).ln();
    let data_fit = -0.5 * (targets.norm_squared() / s2 - c.norm_squared() / (s2 * s2));
    let complexity = -0.5 * cols * (n * s2.ln() + w.b.log_det());
    let residual = n * spec.signal_variance - w.v.norm_squared();
    let trace = -0.5 * cols * residual / s2;
    let total = constant + data_fit + complexity + trace;
    if !total.is_finite() {
        return Err(Error::NonFinite("variational bound".into()));
    }
    Ok(ElboBreakdown {
        total,
        constant,
        data_fit,
        complexity,
        trace,
    })
}

pub fn elbo(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xm: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<ElboBreakdown> {
    elbo_multi(
        x,
        &DMatrix::from_column_slice(y.len(), 1, y.as_slice()),
        xm,
        spec,
    )
}
