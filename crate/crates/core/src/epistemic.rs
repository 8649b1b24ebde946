//! ε-neighborhood support over inducing points, plain or covariance-adjusted,
//! and the "I Know" gate built on it.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{kernel_gram, robust_factorize, row_major, sq_dist};
use crate::svgp::SvgpModel;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_MIN_SUPPORT: usize = 10;
pub const DEFAULT_CHUNK_SIZE: usize = 256;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoherenceMode {
    #[default]
    PredictedLabel,
    MajorityLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportMetric {
    #[default]
    Plain,
    CovarianceAdjusted,
}

impl fmt::Display for CoherenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoherenceMode::PredictedLabel => "predicted-label",
            CoherenceMode::MajorityLabel => "majority-label",
        })
    }
}

impl FromStr for CoherenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted-label" | "predicted" => Ok(CoherenceMode::PredictedLabel),
            "majority-label" | "majority" => Ok(CoherenceMode::MajorityLabel),
            _ => Err(Error::Config(format!("unknown coherence mode '{s}'"))),
        }
    }
}

impl fmt::Display for SupportMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupportMetric::Plain => "plain",
            SupportMetric::CovarianceAdjusted => "covariance-adjusted",
        })
    }
}

impl FromStr for SupportMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SupportMetric::Plain),
            "covariance-adjusted" | "cov" => Ok(SupportMetric::CovarianceAdjusted),
            _ => Err(Error::Config(format!("unknown support metric '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub min_support: usize,
    pub coherence_mode: CoherenceMode,
    pub metric: SupportMetric,
}

impl SupportConfig {
    pub fn new(epsilon: f64) -> Self {
        SupportConfig {
            epsilon,
            lambda: DEFAULT_LAMBDA,
            min_support: DEFAULT_MIN_SUPPORT,
            coherence_mode: CoherenceMode::default(),
            metric: SupportMetric::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.min_support == 0 {
            return Err(Error::Config("min_support must be at least 1".into()));
        }
        Ok(())
    }
}

/// Query-by-inducing matrices. The covariance fields are `None` for a plain evaluation.
#[derive(Debug, Clone)]
pub struct SupportEvaluation {
    pub d_rm: DMatrix<f64>,
    pub k_rm: Option<DMatrix<f64>>,
    pub p_rm: Option<DMatrix<f64>>,
    pub d_cov: Option<DMatrix<f64>>,
    pub lambda: f64,
    /// Rows per joint inversion; `None` when no covariance was computed.
    pub chunk_size: Option<usize>,
}

impl SupportEvaluation {
    pub fn plain(d_rm: DMatrix<f64>) -> Self {
        SupportEvaluation {
            d_rm,
            k_rm: None,
            p_rm: None,
            d_cov: None,
            lambda: 0.0,
            chunk_size: None,
        }
    }

    pub fn queries(&self) -> usize {
        self.d_rm.nrows()
    }

    pub fn metric(&self, metric: SupportMetric) -> Result<&DMatrix<f64>> {
        match metric {
            SupportMetric::Plain => Ok(&self.d_rm),
            SupportMetric::CovarianceAdjusted => self.d_cov.as_ref().ok_or_else(|| {
                Error::input("covariance-adjusted metric requested on a plain evaluation")
            }),
        }
    }
}

/// Euclidean distances, row `i` of `xr` against row `j` of `xm`.
pub fn pairwise_distance(xr: &DMatrix<f64>, xm: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if xr.ncols() != xm.ncols() {
        return Err(Error::input(format!(
            "query dimension {} does not match reference dimension {}",
            xr.ncols(),
            xm.ncols()
        )));
    }
    let d = xr.ncols();
    let a = row_major(xr);
    let b = row_major(xm);
    let mut out = DMatrix::zeros(xr.nrows(), xm.nrows());
    for (i, ra) in a.chunks_exact(d.max(1)).enumerate().take(xr.nrows()) {
        for (j, rb) in b.chunks_exact(d.max(1)).enumerate().take(xm.nrows()) {
            out[(i, j)] = sq_dist(ra, rb).sqrt();
        }
    }
    Ok(out)
}

/// Full evaluation for one block of queries; the whole block shares one
/// joint inverse, so results depend on which queries are scored together.
pub fn covariance_adjust(
    xr: &DMatrix<f64>,
    model: &SvgpModel,
    lambda: f64,
) -> Result<SupportEvaluation> {
    let r = xr.nrows();
    let m = model.num_inducing();
    if r == 0 {
        return Err(Error::input("no query rows"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    let xm = model.inducing_inputs();
    let d_rm = pairwise_distance(xr, xm)?;

    let kmm = kernel_gram(xm, model.spec());
    let a = kmm.min();
    let b = kmm.max();
    if !(b > a) {
        return Err(Error::DegenerateNormalization { value: a });
    }

    let mut x = DMatrix::zeros(r + m, xm.ncols());
    x.rows_mut(0, r).copy_from(xr);
    x.rows_mut(r, m).copy_from(xm);
    let joint = model.posterior_covariance(&x)?;
    let inv = robust_factorize(&joint, model.spec().base_jitter())?.inverse();
    let k_rm = inv.view((0, r), (r, m)).map(|v| (v - a) / (b - a));
    let p_rm = k_rm.map(|v| v.clamp(0.0, 1.0));
    let d_cov = &d_rm + &p_rm * lambda;
    Ok(SupportEvaluation {
        d_rm,
        k_rm: Some(k_rm),
        p_rm: Some(p_rm),
        d_cov: Some(d_cov),
        lambda,
        chunk_size: Some(r),
    })
}

/// `covariance_adjust` over consecutive blocks of at most `chunk_size` queries.
pub fn covariance_adjust_chunked(
    xr: &DMatrix<f64>,
    model: &SvgpModel,
    lambda: f64,
    chunk_size: usize,
) -> Result<SupportEvaluation> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let r = xr.nrows();
    if r == 0 {
        return Err(Error::input("no query rows"));
    }
    let m = model.num_inducing();
    let mut d_rm = DMatrix::zeros(r, m);
    let mut k_rm = DMatrix::zeros(r, m);
    let mut p_rm = DMatrix::zeros(r, m);
    let mut d_cov = DMatrix::zeros(r, m);
    let mut start = 0;
    while start < r {
        let len = chunk_size.min(r - start);
        let part = covariance_adjust(&xr.rows(start, len).into_owned(), model, lambda)?;
        d_rm.rows_mut(start, len).copy_from(&part.d_rm);
        k_rm.rows_mut(start, len)
            .copy_from(part.k_rm.as_ref().expect("filled"));
        p_rm.rows_mut(start, len)
            .copy_from(part.p_rm.as_ref().expect("filled"));
        d_cov
            .rows_mut(start, len)
            .copy_from(part.d_cov.as_ref().expect("filled"));
        start += len;
    }
    Ok(SupportEvaluation {
        d_rm,
        k_rm: Some(k_rm),
        p_rm: Some(p_rm),
        d_cov: Some(d_cov),
        lambda,
        chunk_size: Some(chunk_size),
    })
}

/// Reference indices with metric strictly below ε, ascending by metric, ties by index.
pub fn neighbors_below(row: impl Iterator<Item = f64>, epsilon: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = row.enumerate().filter(|&(_, v)| v < epsilon).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

pub fn support_counts(
    eval: &SupportEvaluation,
    config: &SupportConfig,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let metric = eval.metric(config.metric)?;
    let sets: Vec<Vec<usize>> = (0..metric.nrows())
        .map(|i| {
            neighbors_below(metric.row(i).iter().copied(), config.epsilon)
                .into_iter()
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok((sets.iter().map(Vec::len).collect(), sets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub index: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicVerdict {
    pub ik: bool,
    pub support_count: usize,
    pub coherent_count: usize,
    pub predicted_class: usize,
    pub class_uncertainty: Vec<f64>,
    /// Set when `class_uncertainty` is the uniform fallback.
    pub uncertainty_fallback: bool,
    /// Coherent neighbors, ascending by metric.
    pub exemplars: Vec<Exemplar>,
}

fn normalize_or_uniform(mass: Vec<f64>) -> (Vec<f64>, bool) {
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        (mass.into_iter().map(|v| v / total).collect(), false)
    } else {
        let c = mass.len();
        (vec![1.0 / c as f64; c], true)
    }
}

/// Class distribution from the `P_rm` row of query `q`, or uniform (flagged) when the row has no mass.
pub fn label_uncertainty(
    eval: &SupportEvaluation,
    inducing_labels: &[usize],
    q: usize,
    class_count: usize,
) -> Result<(Vec<f64>, bool)> {
    let p = eval
        .p_rm
        .as_ref()
        .ok_or_else(|| Error::input("label uncertainty needs a covariance-adjusted evaluation"))?;
    let mut mass = vec![0.0; class_count];
    for (j, &label) in inducing_labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::input(format!(
                "inducing label {label} out of range for {class_count} classes"
            )));
        }
        mass[label] += p[(q, j)];
    }
    Ok(normalize_or_uniform(mass))
}

/// Neighbor-label fractions, uniform (flagged) for an empty neighborhood.
pub fn neighbor_label_fractions(
    neighbors: &[(usize, f64)],
    labels: &[usize],
    class_count: usize,
) -> (Vec<f64>, bool) {
    let mut mass = vec![0.0; class_count];
    for &(j, _) in neighbors {
        mass[labels[j]] += 1.0;
    }
    normalize_or_uniform(mass)
}

/// Gate one query given its sorted neighbor list over some labeled reference set.
pub fn verdict_from_neighbors(
    neighbors: &[(usize, f64)],
    reference_labels: &[usize],
    predicted_class: usize,
    config: &SupportConfig,
    class_count: usize,
    class_uncertainty: (Vec<f64>, bool),
) -> EpistemicVerdict {
    let coherent_label = match config.coherence_mode {
        CoherenceMode::PredictedLabel => predicted_class,
        CoherenceMode::MajorityLabel => {
            let mut counts = vec![0usize; class_count];
            for &(j, _) in neighbors {
                counts[reference_labels[j]] += 1;
            }
            let mut best = 0;
            for (c, &k) in counts.iter().enumerate() {
                if k > counts[best] {
                    best = c;
                }
            }
            best
        }
    };
    let exemplars: Vec<Exemplar> = neighbors
        .iter()
        .filter(|&&(j, _)| reference_labels[j] == coherent_label)
        .map(|&(index, metric)| Exemplar { index, metric })
        .collect();
    let coherent_count = exemplars.len();
    EpistemicVerdict {
        ik: coherent_count >= config.min_support,
        support_count: neighbors.len(),
        coherent_count,
        predicted_class,
        class_uncertainty: class_uncertainty.0,
        uncertainty_fallback: class_uncertainty.1,
        exemplars,
    }
}

/// Verdict for query `q`. Class uncertainty comes from `P_rm` when present,
/// otherwise from the labels of the ε-neighbors.
pub fn ik_verdict(
    q: usize,
    eval: &SupportEvaluation,
    inducing_labels: &[usize],
    predicted_class: usize,
    config: &SupportConfig,
    class_count: usize,
) -> Result<EpistemicVerdict> {
    if predicted_class >= class_count {
        return Err(Error::input(format!(
            "predicted class {predicted_class} out of range for {class_count} classes"
        )));
    }
    if q >= eval.queries() {
        return Err(Error::input(format!(
            "query {q} out of range for {} queries",
            eval.queries()
        )));
    }
    if inducing_labels.len() != eval.d_rm.ncols()
        || inducing_labels.iter().any(|&l| l >= class_count)
    {
        return Err(Error::input("inducing labels do not match the evaluation"));
    }
    let metric = eval.metric(config.metric)?;
    let neighbors = neighbors_below(metric.row(q).iter().copied(), config.epsilon);
    let uncertainty = if eval.p_rm.is_some() {
        label_uncertainty(eval, inducing_labels, q, class_count)?
    } else {
        neighbor_label_fractions(&neighbors, inducing_labels, class_count)
    };
    Ok(verdict_from_neighbors(
        &neighbors,
        inducing_labels,
        predicted_class,
        config,
        class_count,
        uncertainty,
    ))
}

pub fn ik_verdicts(
    eval: &SupportEvaluation,
    inducing_labels: &[usize],
    predicted: &[usize],
    config: &SupportConfig,
    class_count: usize,
) -> Result<Vec<EpistemicVerdict>> {
    config.validate()?;
    if predicted.len() != eval.queries() {
        return Err(Error::input(format!(
            "{} predictions for {} queries",
            predicted.len(),
            eval.queries()
        )));
    }
    predicted
        .iter()
        .enumerate()
        .map(|(q, &p)| ik_verdict(q, eval, inducing_labels, p, config, class_count))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerdictCsvOptions {
    pub top_k: usize,
    pub uncertainty: bool,
    /// Emit the covariance block each query was scored in.
    pub chunk_size: Option<usize>,
}

impl Default for VerdictCsvOptions {
    fn default() -> Self {
        VerdictCsvOptions {
            top_k: DEFAULT_TOP_K,
            uncertainty: false,
            chunk_size: None,
        }
    }
}

pub fn write_verdicts<W: Write>(
    mut w: W,
    verdicts: &[EpistemicVerdict],
    class_count: usize,
    options: &VerdictCsvOptions,
) -> Result<()> {
    let mut header = vec![
        "query_id".to_string(),
        "ik".into(),
        "support_count".into(),
        "coherent_count".into(),
        "predicted_class".into(),
    ];
    for k in 0..options.top_k {
        header.push(format!("exemplar_{k}_index"));
        header.push(format!("exemplar_{k}_metric"));
    }
    if options.uncertainty {
        header.extend((0..class_count).map(|c| format!("p_class_{c}")));
        header.push("uncertainty_fallback".into());
    }
    if options.chunk_size.is_some() {
        header.push("chunk".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for (q, v) in verdicts.iter().enumerate() {
        let mut row = vec![
            q.to_string(),
            u8::from(v.ik).to_string(),
            v.support_count.to_string(),
            v.coherent_count.to_string(),
            v.predicted_class.to_string(),
        ];
        for k in 0..options.top_k {
            match v.exemplars.get(k) {
                Some(e) => {
                    row.push(e.index.to_string());
                    row.push(format!("{:.16e}", e.metric));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        if options.uncertainty {
            row.extend(v.class_uncertainty.iter().map(|p| format!("{:.16e}", p)));
            row.push(u8::from(v.uncertainty_fallback).to_string());
        }
        if let Some(chunk) = options.chunk_size {
            row.push((q / chunk.max(1)).to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::svgp::fit_svgp;
    use crate::testutil::{naive_inverse, naive_kernel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain(rows: &[&[f64]]) -> SupportEvaluation {
        let r = rows.len();
        let m = rows[0].len();
        SupportEvaluation::plain(DMatrix::from_fn(r, m, |i, j| rows[i][j]))
    }

    fn cfg(epsilon: f64, tau: usize) -> SupportConfig {
        SupportConfig {
            min_support: tau,
            ..SupportConfig::new(epsilon)
        }
    }

    fn random_model(seed: u64, n: usize, m: usize, d: usize) -> (SvgpModel, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y = DMatrix::from_fn(n, 3, |i, c| f64::from(u8::from(labels[i] == c)));
        let spec = KernelSpec::new(1.0, 1.0, 0.1).unwrap();
        let model = fit_svgp(&x, &y, &x.rows(0, m).into_owned(), &labels[..m], &spec).unwrap();
        (model, rng)
    }

    #[test]
    fn distance_examples() {
        let p = DMatrix::from_row_slice(1, 2, &[1.5, -2.0]);
        assert_eq!(pairwise_distance(&p, &p).unwrap()[(0, 0)], 0.0);
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(pairwise_distance(&a, &b).unwrap()[(0, 0)], 5.0);
        assert!(pairwise_distance(&a, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn distance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xr = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-3.0..3.0));
        let xm = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-3.0..3.0));
        let d = pairwise_distance(&xr, &xm).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (xr[(i, k)] - xm[(j, k)]) * (xr[(i, k)] - xm[(j, k)]);
                }
                assert!((d[(i, j)] - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    /// Build K from the posterior formula with explicit inverses, then invert, slice, normalize, clip.
    fn hand_oracle() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (ell, sf2, s2) = (1.0, 1.0, 0.1);
        let xm = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let xn = xm.clone();
        let xq = DMatrix::from_row_slice(1, 1, &[0.5]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let kmm = naive_kernel(&xm, &xm, ell, sf2);
        let kmn = naive_kernel(&xm, &xn, ell, sf2);
        let sigma = naive_inverse(&(&kmm + &kmn * kmn.transpose() / s2));
        let a_param = &kmm * &sigma * &kmm;
        let _mu = &kmm * &sigma * &kmn * &y / s2;
        let x = DMatrix::from_row_slice(3, 1, &[0.5, 0.0, 1.0]);
        let kxx = naive_kernel(&x, &x, ell, sf2);
        let kxm = naive_kernel(&x, &xm, ell, sf2);
        let kinv = naive_inverse(&kmm);
        let mut k = &kxx - &kxm * &kinv * kxm.transpose()
            + &kxm * &kinv * &a_param * &kinv * kxm.transpose();
        for i in 0..3 {
            k[(i, i)] += 1e-8 * sf2;
        }
        let inv = naive_inverse(&k);
        let (a, b) = (kmm.min(), kmm.max());
        let k_rm = DMatrix::from_fn(1, 2, |_, j| (inv[(0, 1 + j)] - a) / (b - a));
        let p_rm = k_rm.map(|v| v.clamp(0.0, 1.0));
        let dq = naive_kernel(&xq, &xq, ell, sf2);
        assert_eq!(dq[(0, 0)], 1.0);
        let d_rm = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let d_cov = d_rm + &p_rm * 0.7;
        (k_rm, p_rm, d_cov)
    }

    #[test]
    fn covariance_adjust_hand_instance() {
        let xm = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let spec = KernelSpec::new(1.0, 1.0, 0.1).unwrap();
        let model = fit_svgp(&xm, &y, &xm, &[0, 0], &spec).unwrap();
        let xq = DMatrix::from_row_slice(1, 1, &[0.5]);
        let eval = covariance_adjust(&xq, &model, 0.7).unwrap();
        let (k_rm, p_rm, d_cov) = hand_oracle();
        for j in 0..2 {
            assert!((eval.k_rm.as_ref().unwrap()[(0, j)] - k_rm[(0, j)]).abs() < 1e-8);
            assert!((eval.p_rm.as_ref().unwrap()[(0, j)] - p_rm[(0, j)]).abs() < 1e-8);
            assert!((eval.d_cov.as_ref().unwrap()[(0, j)] - d_cov[(0, j)]).abs() < 1e-8);
        }
    }

    #[test]
    fn lambda_zero_keeps_distances() {
        let (model, mut rng) = random_model(3, 30, 8, 2);
        let xr = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0));
        let eval = covariance_adjust(&xr, &model, 0.0).unwrap();
        assert_eq!(eval.d_cov.unwrap(), eval.d_rm);
    }

    #[test]
    fn single_inducing_point_is_degenerate() {
        let (model, _) = random_model(1, 10, 1, 2);
        let err = covariance_adjust(&DMatrix::zeros(2, 2), &model, 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateNormalization { .. }));
        assert!(err.is_numerical());
        assert!(err.to_string().contains("plain"));
    }

    #[test]
    fn chunking_matches_blockwise_calls() {
        let (model, mut rng) = random_model(8, 40, 6, 2);
        let xr = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-2.0..2.0));
        let all = covariance_adjust_chunked(&xr, &model, 1.0, 3).unwrap();
        let tail = covariance_adjust(&xr.rows(6, 1).into_owned(), &model, 1.0).unwrap();
        assert_eq!(
            all.d_cov.as_ref().unwrap().row(6),
            tail.d_cov.as_ref().unwrap().row(0)
        );
        assert_eq!(all.chunk_size, Some(3));
        assert!(covariance_adjust_chunked(&xr, &model, 1.0, 0).is_err());
    }

    #[test]
    fn counts_extremes_and_oracle() {
        let rows: [&[f64]; 3] = [
            &[0.5, 1.0, 1.5, 0.99],
            &[2.0, 3.0, 0.1, 0.2],
            &[1.0, 1.0, 1.0, 1.0],
        ];
        let eval = plain(&rows);
        let (counts, sets) = support_counts(&eval, &cfg(1.0, 1)).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let mut k = 0;
            for &v in row.iter() {
                if v < 1.0 {
                    k += 1;
                }
            }
            assert_eq!(counts[i], k);
        }
        assert_eq!(sets[0], vec![0, 3]);
        assert_eq!(sets[1], vec![2, 3]);
        assert_eq!(
            support_counts(&eval, &cfg(3.01, 1)).unwrap().0,
            vec![4, 4, 4]
        );
        assert_eq!(
            support_counts(&eval, &cfg(0.05, 1)).unwrap().0,
            vec![0, 0, 0]
        );
        let mut cov = cfg(1.0, 1);
        cov.metric = SupportMetric::CovarianceAdjusted;
        assert!(support_counts(&eval, &cov).is_err());
    }

    #[test]
    fn neighbor_ties_go_to_lowest_index() {
        let eval = plain(&[&[0.3, 0.1, 0.3, 0.1]]);
        assert_eq!(
            support_counts(&eval, &cfg(1.0, 1)).unwrap().1[0],
            vec![1, 3, 0, 2]
        );
    }

    #[test]
    fn verdict_examples() {
        let eval = plain(&[&[0.1, 2.0, 3.0]]);
        let v = ik_verdict(0, &eval, &[1, 0, 0], 1, &cfg(1.0, 1), 2).unwrap();
        assert!(v.ik);
        assert_eq!(
            v.exemplars,
            vec![Exemplar {
                index: 0,
                metric: 0.1
            }]
        );

        let v = ik_verdict(0, &eval, &[1, 0, 0], 1, &cfg(0.05, 1), 2).unwrap();
        assert!(!v.ik && v.support_count == 0 && v.uncertainty_fallback);
        assert_eq!(v.class_uncertainty, vec![0.5, 0.5]);

        let five = plain(&[&[0.1, 0.2, 0.3, 0.4, 0.5]]);
        let v = ik_verdict(0, &five, &[0, 0, 1, 0, 1], 0, &cfg(1.0, 3), 2).unwrap();
        assert_eq!((v.support_count, v.coherent_count, v.ik), (5, 3, true));

        let mut majority = cfg(1.0, 3);
        majority.coherence_mode = CoherenceMode::MajorityLabel;
        let v = ik_verdict(0, &five, &[0, 0, 1, 0, 1], 1, &majority, 2).unwrap();
        assert_eq!((v.coherent_count, v.ik), (3, true));
        let tied = ik_verdict(0, &five, &[1, 0, 1, 0, 2], 2, &majority, 3).unwrap();
        assert_eq!(
            tied.exemplars.iter().map(|e| e.index).collect::<Vec<_>>(),
            vec![1, 3]
        );

        assert!(ik_verdict(0, &eval, &[1, 0, 0], 2, &cfg(1.0, 1), 2).is_err());
    }

    #[test]
    fn label_uncertainty_examples() {
        let mut eval = plain(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        eval.p_rm = Some(DMatrix::from_row_slice(
            3,
            3,
            &[0.2, 0.6, 0.2, 0.0, 0.0, 0.0, 0.0, 0.9, 0.0],
        ));
        let (p, fb) = label_uncertainty(&eval, &[0, 1, 0], 0, 2).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15 && (p[1] - 0.6).abs() < 1e-15 && !fb);
        let (p, fb) = label_uncertainty(&eval, &[0, 1, 0], 1, 3).unwrap();
        assert_eq!((p, fb), (vec![1.0 / 3.0; 3], true));
        assert_eq!(
            label_uncertainty(&eval, &[0, 1, 0], 2, 2).unwrap().0,
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn verdict_csv_layout() {
        let eval = plain(&[&[0.1, 0.2], &[5.0, 5.0]]);
        let verdicts = ik_verdicts(&eval, &[0, 0], &[0, 1], &cfg(1.0, 2), 2).unwrap();
        let mut out = Vec::new();
        let opts = VerdictCsvOptions {
            top_k: 1,
            uncertainty: true,
            chunk_size: None,
        };
        write_verdicts(&mut out, &verdicts, 2, &opts).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "query_id,ik,support_count,coherent_count,predicted_class,exemplar_0_index,exemplar_0_metric,p_class_0,p_class_1,uncertainty_fallback"
        );
        assert!(lines[1].starts_with("0,1,2,2,0,0,1.0000000000000001e-1,"));
        assert!(lines[2].starts_with("1,0,0,0,1,,,"));
        assert!(lines[2].ends_with(",1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn covariance_properties(seed in 0u64..10_000, lambda in 0.0f64..3.0, eps in 0.1f64..3.0) {
            let (model, mut rng) = random_model(seed, 25, 6, 2);
            let xr = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-3.0..3.0));
            let eval = covariance_adjust(&xr, &model, lambda).unwrap();
            let p = eval.p_rm.as_ref().unwrap();
            let dc = eval.d_cov.as_ref().unwrap();
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(dc.iter().zip(eval.d_rm.iter()).all(|(c, d)| c >= d));

            let mut config = cfg(eps, 2);
            config.metric = SupportMetric::CovarianceAdjusted;
            let small = support_counts(&eval, &config).unwrap().0;
            let bigger = covariance_adjust(&xr, &model, lambda + 1.0).unwrap();
            let fewer = support_counts(&bigger, &config).unwrap().0;
            prop_assert!(fewer.iter().zip(&small).all(|(f, s)| f <= s));
            config.epsilon = eps * 1.5;
            let wider = support_counts(&eval, &config).unwrap().0;
            prop_assert!(wider.iter().zip(&small).all(|(w, s)| w >= s));

            for q in 0..4 {
                let (u, _) = label_uncertainty(&eval, model.inducing_labels(), q, 3).unwrap();
                prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let relabeled: Vec<usize> = model.inducing_labels().iter().map(|&l| (l + 1) % 3).collect();
                let (w, _) = label_uncertainty(&eval, &relabeled, q, 3).unwrap();
                for c in 0..3 {
                    prop_assert!((w[(c + 1) % 3] - u[c]).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn ik_monotone_in_tau(seed in 0u64..10_000, tau in 1usize..6, eps in 0.1f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eval = SupportEvaluation::plain(DMatrix::from_fn(6, 10, |_, _| rng.random_range(0.0..2.0)));
            let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
            let predicted: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            for mode in [CoherenceMode::PredictedLabel, CoherenceMode::MajorityLabel] {
                let mut config = cfg(eps, tau);
                config.coherence_mode = mode;
                let lo = ik_verdicts(&eval, &labels, &predicted, &config, 3).unwrap();
                config.min_support = tau + 1;
                let hi = ik_verdicts(&eval, &labels, &predicted, &config, 3).unwrap();
                for (a, b) in lo.iter().zip(&hi) {
                    prop_assert!(a.coherent_count <= a.support_count);
                    prop_assert_eq!(a.ik, a.coherent_count >= tau);
                    prop_assert!(a.ik || !b.ik);
                }
            }
        }
    }
}
