//! Paired experiments: the full-data ε-ball baseline against inducing-point
//! support, swept over ε and m, with CSV output.
//!
//! Hyperparameters are fitted once per dataset (on a subsample of the first
//! seed's training split) and reused for every grid cell. Predictions are
//! computed before timing; each timed pass covers distance computation,
//! support counting and gating for the whole validation split.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::baseline::{epsilon_ball_support, nearest_reference_labels};
use crate::data::{split, EmbeddingDataset};
use crate::epistemic::{
    covariance_adjust_chunked, ik_verdicts, pairwise_distance, CoherenceMode, EpistemicVerdict,
    SupportConfig, SupportEvaluation, SupportMetric, DEFAULT_CHUNK_SIZE, DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};
use crate::exact_gp::{optimize_hyperparams, OptimizerConfig};
use crate::inducing::{
    select_inducing, select_random, InducingSet, SelectionMethod, SelectionOptions,
};
use crate::kernels::KernelSpec;
use crate::svgp::{elbo_multi, fit_svgp, SvgpModel};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_HYPER_SUBSAMPLE: usize = 300;
pub const DEFAULT_BASELINE_CLASSIFIER_M: usize = 1024;

/// Seed offset for the reference model that labels baseline queries.
const BASELINE_CLASSIFIER_SALT: u64 = 0x5eed_ba5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Classifier {
    #[default]
    SvgpMean,
    NearestInducingLabel,
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classifier::SvgpMean => "one-vs-rest-svgp-mean",
            Classifier::NearestInducingLabel => "nearest-inducing-label",
        })
    }
}

impl FromStr for Classifier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-vs-rest-svgp-mean" | "svgp-mean" => Ok(Classifier::SvgpMean),
            "nearest-inducing-label" | "nearest" => Ok(Classifier::NearestInducingLabel),
            _ => Err(Error::Config(format!("unknown classifier '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    Sgp,
    CovSgp,
    RandomSubset,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Sgp => "sgp",
            Method::CovSgp => "cov-sgp",
            Method::RandomSubset => "random-subset",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "sgp" => Ok(Method::Sgp),
            "cov-sgp" => Ok(Method::CovSgp),
            "random-subset" => Ok(Method::RandomSubset),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

/// ε either given directly or as quantiles (over validation points) of each
/// method's distance to its τ-th nearest reference point.
#[derive(Debug, Clone, PartialEq)]
pub enum EpsilonGrid {
    Values(Vec<f64>),
    Quantiles(Vec<f64>),
}

impl EpsilonGrid {
    pub fn len(&self) -> usize {
        match self {
            EpsilonGrid::Values(v) | EpsilonGrid::Quantiles(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        match self {
            EpsilonGrid::Values(v) if v.iter().any(|&e| !(e > 0.0)) => {
                Err(Error::Config("epsilon values must be positive".into()))
            }
            EpsilonGrid::Quantiles(q) if q.iter().any(|&p| !(0.0..=1.0).contains(&p)) => {
                Err(Error::Config("epsilon quantiles must lie in [0, 1]".into()))
            }
            _ if self.is_empty() => Err(Error::Config("epsilon grid is empty".into())),
            _ => Ok(()),
        }
    }

    fn quantile_at(&self, k: usize) -> Option<f64> {
        match self {
            EpsilonGrid::Values(_) => None,
            EpsilonGrid::Quantiles(q) => Some(q[k]),
        }
    }

    /// Concrete ε values; `metric` is only evaluated for quantile grids.
    fn resolve(
        &self,
        tau: usize,
        metric: impl FnOnce() -> Result<DMatrix<f64>>,
    ) -> Result<Vec<f64>> {
        match self {
            EpsilonGrid::Values(v) => Ok(v.clone()),
            EpsilonGrid::Quantiles(q) => {
                let mut kth = kth_smallest_per_row(&metric()?, tau);
                kth.sort_by(f64::total_cmp);
                Ok(q.iter().map(|&p| quantile_sorted(&kth, p)).collect())
            }
        }
    }
}

/// τ-th smallest entry of each row (1-based); +∞ when a row is shorter than τ.
pub fn kth_smallest_per_row(m: &DMatrix<f64>, tau: usize) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| {
            let mut row: Vec<f64> = m.row(i).iter().copied().collect();
            if tau == 0 || tau > row.len() {
                return f64::INFINITY;
            }
            let (_, kth, _) = row.select_nth_unstable_by(tau - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Linear-interpolation quantile of ascending data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[hi] == sorted[lo] {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub m_values: Vec<usize>,
    pub epsilon: EpsilonGrid,
    pub lambda: f64,
    pub tau: usize,
    pub coherence_mode: CoherenceMode,
    pub seeds: Vec<u64>,
    pub classifier: Classifier,
    pub train_fraction: f64,
    /// Selection for the `sgp` and `cov-sgp` methods.
    pub selection: SelectionMethod,
    pub selection_options: SelectionOptions,
    pub chunk_size: usize,
    /// Inducing count of the model that labels baseline queries under the SVGP classifier.
    pub baseline_classifier_m: usize,
    /// Fixed kernel; fitted by marginal likelihood when `None`.
    pub spec: Option<KernelSpec>,
    pub hyper_subsample: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            m_values: vec![16, 64, 256],
            epsilon: EpsilonGrid::Quantiles(vec![0.25, 0.5, 0.75, 0.9]),
            lambda: DEFAULT_LAMBDA,
            tau: crate::epistemic::DEFAULT_MIN_SUPPORT,
            coherence_mode: CoherenceMode::PredictedLabel,
            seeds: vec![0],
            classifier: Classifier::SvgpMean,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            selection: SelectionMethod::GreedyElbo,
            selection_options: SelectionOptions::default(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            baseline_classifier_m: DEFAULT_BASELINE_CLASSIFIER_M,
            spec: None,
            hyper_subsample: DEFAULT_HYPER_SUBSAMPLE,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl HarnessConfig {
    fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(Error::Config(
                "m values must be non-empty and positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.chunk_size == 0 || self.baseline_classifier_m == 0 || self.hyper_subsample == 0 {
            return Err(Error::Config(
                "chunk size, baseline classifier m and hyperparameter subsample must be positive"
                    .into(),
            ));
        }
        self.epsilon.validate()?;
        self.support(1.0, SupportMetric::Plain).validate()
    }

    fn support(&self, epsilon: f64, metric: SupportMetric) -> SupportConfig {
        SupportConfig {
            epsilon,
            lambda: self.lambda,
            min_support: self.tau,
            coherence_mode: self.coherence_mode,
            metric,
        }
    }
}

/// Initial kernel for marginal-likelihood fitting: lengthscale at the median
/// pairwise distance, unit signal variance, noise 0.1.
fn initial_spec(x: &DMatrix<f64>) -> Result<KernelSpec> {
    let d = pairwise_distance(x, x)?;
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..d.nrows() {
        for j in (i + 1)..d.ncols() {
            dists.push(d[(i, j)]);
        }
    }
    dists.sort_by(f64::total_cmp);
    let ell = if dists.is_empty() {
        1.0
    } else {
        quantile_sorted(&dists, 0.5)
    };
    KernelSpec::new(if ell > 0.0 { ell } else { 1.0 }, 1.0, 0.1)
}

/// Kernel fitted on a seeded random subsample of `train` with one-vs-rest targets.
pub fn fit_kernel_spec(
    train: &EmbeddingDataset,
    subsample: usize,
    seed: u64,
    optimizer: &OptimizerConfig,
) -> Result<KernelSpec> {
    let idx = select_random(train.len(), subsample.min(train.len()), seed)?;
    let sub = train.subset(&idx)?;
    let init = initial_spec(sub.embeddings())?;
    Ok(optimize_hyperparams(sub.embeddings(), &sub.one_hot_targets(), &init, optimizer)?.spec)
}

fn resolve_spec(ds: &EmbeddingDataset, cfg: &HarnessConfig) -> Result<KernelSpec> {
    if let Some(spec) = cfg.spec {
        spec.validate()?;
        return Ok(spec);
    }
    let (train, _) = split(ds, cfg.train_fraction, cfg.seeds[0])?;
    fit_kernel_spec(&train, cfg.hyper_subsample, cfg.seeds[0], &cfg.optimizer)
        .map_err(|e| e.context("hyperparameter fit"))
}

pub fn fit_on(train: &EmbeddingDataset, set: &InducingSet, spec: &KernelSpec) -> Result<SvgpModel> {
    fit_svgp(
        train.embeddings(),
        &train.one_hot_targets(),
        &set.inputs,
        &set.labels,
        spec,
    )
}

pub fn classify(
    model: &SvgpModel,
    xq: &DMatrix<f64>,
    classifier: Classifier,
) -> Result<Vec<usize>> {
    match classifier {
        Classifier::SvgpMean => Ok(model.predict(xq)?.argmax_classes()),
        Classifier::NearestInducingLabel => {
            nearest_reference_labels(xq, model.inducing_inputs(), model.inducing_labels())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub method: Method,
    pub m: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub tau: usize,
    pub seed: u64,
    /// `None` when no query passes the gate.
    pub selective_accuracy: Option<f64>,
    pub coverage: f64,
    pub inference_seconds: f64,
    pub n_eval: usize,
}

pub const EXPERIMENT_HEADER: &str =
    "method,m,epsilon,lambda,tau,seed,selective_accuracy,coverage,inference_seconds,n_eval";

fn opt_field(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_experiment_csv<W: Write>(mut w: W, rows: &[ExperimentResult]) -> Result<()> {
    writeln!(w, "{EXPERIMENT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.m,
            r.epsilon,
            r.lambda,
            r.tau,
            r.seed,
            opt_field(r.selective_accuracy),
            r.coverage,
            r.inference_seconds,
            r.n_eval
        )?;
    }
    Ok(())
}

/// Coverage and accuracy over gate-passing queries.
pub fn gate_metrics(verdicts: &[EpistemicVerdict], truth: &[usize]) -> (f64, Option<f64>) {
    let passed: Vec<_> = verdicts.iter().zip(truth).filter(|(v, _)| v.ik).collect();
    let coverage = passed.len() as f64 / verdicts.len().max(1) as f64;
    let accuracy = (!passed.is_empty()).then(|| {
        passed
            .iter()
            .filter(|(v, &t)| v.predicted_class == t)
            .count() as f64
            / passed.len() as f64
    });
    (coverage, accuracy)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Overall (ungated) accuracy of the classifier behind one method's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierAccuracy {
    pub method: Method,
    pub m: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonOutput {
    pub spec: KernelSpec,
    pub rows: Vec<ExperimentResult>,
    pub classifier_accuracy: Vec<ClassifierAccuracy>,
}

type Scorer<'a> = Box<dyn Fn(&SupportConfig) -> Result<Vec<EpistemicVerdict>> + 'a>;

struct Cell<'a> {
    method: Method,
    m: usize,
    seed: u64,
    metric: SupportMetric,
    lambda: f64,
    predicted: &'a [usize],
    scorer: Scorer<'a>,
}

/// One untimed warm-up pass, then one timed pass per ε.
fn run_cell(
    cell: &Cell<'_>,
    epsilons: &[f64],
    cfg: &HarnessConfig,
    truth: &[usize],
) -> Result<Vec<ExperimentResult>> {
    let label = format!("method {} m={} seed={}", cell.method, cell.m, cell.seed);
    let inner = || -> Result<Vec<ExperimentResult>> {
        (cell.scorer)(&cfg.support(epsilons[0], cell.metric))?;
        let mut rows = Vec::with_capacity(epsilons.len());
        for &eps in epsilons {
            let support = cfg.support(eps, cell.metric);
            let start = Instant::now();
            let verdicts = (cell.scorer)(&support)?;
            let seconds = start.elapsed().as_secs_f64();
            debug_assert_eq!(verdicts.len(), cell.predicted.len());
            let (coverage, selective_accuracy) = gate_metrics(&verdicts, truth);
            rows.push(ExperimentResult {
                method: cell.method,
                m: cell.m,
                epsilon: eps,
                lambda: cell.lambda,
                tau: cfg.tau,
                seed: cell.seed,
                selective_accuracy,
                coverage,
                inference_seconds: seconds.max(f64::MIN_POSITIVE),
                n_eval: truth.len(),
            });
        }
        Ok(rows)
    };
    inner().map_err(|e| e.context(label))
}

fn plain_scorer<'a>(
    xv: &'a DMatrix<f64>,
    model: &'a SvgpModel,
    predicted: &'a [usize],
    classes: usize,
) -> Scorer<'a> {
    Box::new(move |support| {
        let eval = SupportEvaluation::plain(pairwise_distance(xv, model.inducing_inputs())?);
        ik_verdicts(&eval, model.inducing_labels(), predicted, support, classes)
    })
}

fn cov_scorer<'a>(
    xv: &'a DMatrix<f64>,
    model: &'a SvgpModel,
    predicted: &'a [usize],
    classes: usize,
    chunk: usize,
) -> Scorer<'a> {
    Box::new(move |support| {
        let eval = covariance_adjust_chunked(xv, model, support.lambda, chunk)?;
        ik_verdicts(&eval, model.inducing_labels(), predicted, support, classes)
    })
}

fn nested_selection(
    train: &EmbeddingDataset,
    spec: &KernelSpec,
    method: SelectionMethod,
    m_values: &[usize],
    seed: u64,
    options: &SelectionOptions,
) -> Result<Vec<InducingSet>> {
    let max_m = *m_values.iter().max().expect("validated");
    if method == SelectionMethod::Kmeans {
        return m_values
            .iter()
            .map(|&m| select_inducing(train, spec, m, method, seed, options))
            .collect();
    }
    let full = select_inducing(train, spec, max_m, method, seed, options)?;
    Ok(m_values.iter().map(|&m| full.prefix(m)).collect())
}

/// Baseline, SGP, Cov-SGP and Random Subset over the ε × m × seed grid.
///
/// Rows per seed: baseline over ε first, then for each m the sgp, cov-sgp
/// and random-subset rows, each over ε.
pub fn run_comparison(ds: &EmbeddingDataset, cfg: &HarnessConfig) -> Result<ComparisonOutput> {
    cfg.validate()?;
    let spec = resolve_spec(ds, cfg)?;
    let classes = ds.class_count();
    let mut rows = Vec::new();
    let mut classifier_accuracy = Vec::new();

    for &seed in &cfg.seeds {
        let (train, val) = split(ds, cfg.train_fraction, seed)
            .map_err(|e| e.context(format!("split seed={seed}")))?;
        if let Some(&m) = cfg.m_values.iter().find(|&&m| m > train.len()) {
            return Err(Error::Config(format!(
                "m={m} exceeds the {} training rows",
                train.len()
            )));
        }
        let xv = val.embeddings();
        let truth = val.labels();
        let n_train = train.len();

        let baseline_pred = match cfg.classifier {
            Classifier::SvgpMean => {
                let k = cfg.baseline_classifier_m.min(n_train);
                let set = select_inducing(
                    &train,
                    &spec,
                    k,
                    SelectionMethod::Random,
                    seed ^ BASELINE_CLASSIFIER_SALT,
                    &cfg.selection_options,
                )?;
                classify(&fit_on(&train, &set, &spec)?, xv, Classifier::SvgpMean)?
            }
            Classifier::NearestInducingLabel => {
                nearest_reference_labels(xv, train.embeddings(), train.labels())?
            }
        };
        classifier_accuracy.push(ClassifierAccuracy {
            method: Method::Baseline,
            m: n_train,
            seed,
            accuracy: accuracy(&baseline_pred, truth),
        });
        let eps = cfg
            .epsilon
            .resolve(cfg.tau, || pairwise_distance(xv, train.embeddings()))?;
        let cell = Cell {
            method: Method::Baseline,
            m: n_train,
            seed,
            metric: SupportMetric::Plain,
            lambda: 0.0,
            predicted: &baseline_pred,
            scorer: Box::new(|support| epsilon_ball_support(xv, &train, &baseline_pred, support)),
        };
        rows.extend(run_cell(&cell, &eps, cfg, truth)?);

        let ctx = |what: &str| format!("{what} selection seed={seed}");
        let sgp_sets = nested_selection(
            &train,
            &spec,
            cfg.selection,
            &cfg.m_values,
            seed,
            &cfg.selection_options,
        )
        .map_err(|e| e.context(ctx("sgp")))?;
        let random_sets = nested_selection(
            &train,
            &spec,
            SelectionMethod::Random,
            &cfg.m_values,
            seed,
            &cfg.selection_options,
        )
        .map_err(|e| e.context(ctx("random")))?;

        for ((&m, sgp_set), random_set) in cfg.m_values.iter().zip(&sgp_sets).zip(&random_sets) {
            let sgp_model = fit_on(&train, sgp_set, &spec)
                .map_err(|e| e.context(format!("sgp fit m={m} seed={seed}")))?;
            let sgp_pred = classify(&sgp_model, xv, cfg.classifier)?;
            let random_model = fit_on(&train, random_set, &spec)
                .map_err(|e| e.context(format!("random fit m={m} seed={seed}")))?;
            let random_pred = classify(&random_model, xv, cfg.classifier)?;
            for (method, pred) in [
                (Method::Sgp, &sgp_pred),
                (Method::CovSgp, &sgp_pred),
                (Method::RandomSubset, &random_pred),
            ] {
                classifier_accuracy.push(ClassifierAccuracy {
                    method,
                    m,
                    seed,
                    accuracy: accuracy(pred, truth),
                });
            }

            let eps = cfg.epsilon.resolve(cfg.tau, || {
                pairwise_distance(xv, sgp_model.inducing_inputs())
            })?;
            let cell = Cell {
                method: Method::Sgp,
                m,
                seed,
                metric: SupportMetric::Plain,
                lambda: 0.0,
                predicted: &sgp_pred,
                scorer: plain_scorer(xv, &sgp_model, &sgp_pred, classes),
            };
            rows.extend(run_cell(&cell, &eps, cfg, truth)?);

            let eps = cfg
                .epsilon
                .resolve(cfg.tau, || {
                    let eval =
                        covariance_adjust_chunked(xv, &sgp_model, cfg.lambda, cfg.chunk_size)?;
                    Ok(eval.d_cov.expect("covariance evaluation"))
                })
                .map_err(|e| e.context(format!("method cov-sgp m={m} seed={seed}")))?;
            let cell = Cell {
                method: Method::CovSgp,
                m,
                seed,
                metric: SupportMetric::CovarianceAdjusted,
                lambda: cfg.lambda,
                predicted: &sgp_pred,
                scorer: cov_scorer(xv, &sgp_model, &sgp_pred, classes, cfg.chunk_size),
            };
            rows.extend(run_cell(&cell, &eps, cfg, truth)?);

            let eps = cfg.epsilon.resolve(cfg.tau, || {
                pairwise_distance(xv, random_model.inducing_inputs())
            })?;
            let cell = Cell {
                method: Method::RandomSubset,
                m,
                seed,
                metric: SupportMetric::Plain,
                lambda: 0.0,
                predicted: &random_pred,
                scorer: plain_scorer(xv, &random_model, &random_pred, classes),
            };
            rows.extend(run_cell(&cell, &eps, cfg, truth)?);
        }
    }
    Ok(ComparisonOutput {
        spec,
        rows,
        classifier_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Run,
    Mean,
    Std,
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stat::Run => "run",
            Stat::Mean => "mean",
            Stat::Std => "std",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub selection: SelectionMethod,
    pub m: usize,
    /// `None` on summary rows.
    pub seed: Option<u64>,
    pub stat: Stat,
    pub elbo: f64,
    pub epsilon: f64,
    /// Set for quantile grids.
    pub epsilon_quantile: Option<f64>,
    pub lambda: f64,
    pub tau: usize,
    pub selective_accuracy: Option<f64>,
    pub coverage: f64,
    pub inference_seconds: f64,
    pub n_eval: usize,
}

pub const SWEEP_HEADER: &str = "selection,m,seed,stat,elbo,epsilon,epsilon_quantile,lambda,tau,selective_accuracy,coverage,inference_seconds,n_eval";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.selection,
            r.m,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.stat,
            r.elbo,
            r.epsilon,
            opt_field(r.epsilon_quantile),
            r.lambda,
            r.tau,
            opt_field(r.selective_accuracy),
            r.coverage,
            r.inference_seconds,
            r.n_eval
        )?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed rows for each m in the (increasing) schedule and ε in the grid,
/// followed by mean and standard-deviation rows over seeds. Summary
/// selective accuracy averages the seeds where it is defined.
pub fn sweep_inducing(
    ds: &EmbeddingDataset,
    cfg: &HarnessConfig,
    selection: SelectionMethod,
    metric: SupportMetric,
) -> Result<(KernelSpec, Vec<SweepRow>)> {
    cfg.validate()?;
    if cfg.m_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "m schedule must be strictly increasing".into(),
        ));
    }
    let spec = resolve_spec(ds, cfg)?;
    let classes = ds.class_count();
    let lambda = if metric == SupportMetric::CovarianceAdjusted {
        cfg.lambda
    } else {
        0.0
    };
    // runs[m index][seed index] -> rows over ε
    let mut runs: Vec<Vec<Vec<SweepRow>>> = vec![Vec::new(); cfg.m_values.len()];

    for &seed in &cfg.seeds {
        let (train, val) = split(ds, cfg.train_fraction, seed)
            .map_err(|e| e.context(format!("split seed={seed}")))?;
        if let Some(&m) = cfg.m_values.iter().find(|&&m| m > train.len()) {
            return Err(Error::Config(format!(
                "m={m} exceeds the {} training rows",
                train.len()
            )));
        }
        let xv = val.embeddings();
        let truth = val.labels();
        let y = train.one_hot_targets();
        let sets = nested_selection(
            &train,
            &spec,
            selection,
            &cfg.m_values,
            seed,
            &cfg.selection_options,
        )
        .map_err(|e| e.context(format!("{selection} selection seed={seed}")))?;
        for (k, (&m, set)) in cfg.m_values.iter().zip(&sets).enumerate() {
            let label = format!("{selection} m={m} seed={seed}");
            let model = fit_on(&train, set, &spec).map_err(|e| e.context(label.clone()))?;
            let elbo = elbo_multi(train.embeddings(), &y, &set.inputs, &spec)
                .map_err(|e| e.context(label.clone()))?
                .total;
            let pred = classify(&model, xv, cfg.classifier)?;
            let scorer = match metric {
                SupportMetric::Plain => plain_scorer(xv, &model, &pred, classes),
                SupportMetric::CovarianceAdjusted => {
                    cov_scorer(xv, &model, &pred, classes, cfg.chunk_size)
                }
            };
            let eps = cfg
                .epsilon
                .resolve(cfg.tau, || match metric {
                    SupportMetric::Plain => pairwise_distance(xv, model.inducing_inputs()),
                    SupportMetric::CovarianceAdjusted => {
                        let eval =
                            covariance_adjust_chunked(xv, &model, cfg.lambda, cfg.chunk_size)?;
                        Ok(eval.d_cov.expect("covariance evaluation"))
                    }
                })
                .map_err(|e| e.context(label.clone()))?;
            let cell = Cell {
                method: Method::Sgp,
                m,
                seed,
                metric,
                lambda,
                predicted: &pred,
                scorer,
            };
            let results =
                run_cell(&cell, &eps, cfg, truth).map_err(|e| e.context(label.clone()))?;
            runs[k].push(
                results
                    .into_iter()
                    .enumerate()
                    .map(|(e, r)| SweepRow {
                        selection,
                        m,
                        seed: Some(seed),
                        stat: Stat::Run,
                        elbo,
                        epsilon: r.epsilon,
                        epsilon_quantile: cfg.epsilon.quantile_at(e),
                        lambda,
                        tau: cfg.tau,
                        selective_accuracy: r.selective_accuracy,
                        coverage: r.coverage,
                        inference_seconds: r.inference_seconds,
                        n_eval: r.n_eval,
                    })
                    .collect(),
            );
        }
    }

    let mut out = Vec::new();
    for per_m in &runs {
        for seed_rows in per_m {
            out.extend(seed_rows.iter().cloned());
        }
        for e in 0..cfg.epsilon.len() {
            let cellrows: Vec<&SweepRow> = per_m.iter().map(|s| &s[e]).collect();
            let stat = |f: &dyn Fn(&SweepRow) -> f64| {
                mean_std(&cellrows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let acc: Vec<f64> = cellrows
                .iter()
                .filter_map(|r| r.selective_accuracy)
                .collect();
            let acc_stats = (!acc.is_empty()).then(|| mean_std(&acc));
            let elbo = stat(&|r| r.elbo);
            let eps = stat(&|r| r.epsilon);
            let cov = stat(&|r| r.coverage);
            let secs = stat(&|r| r.inference_seconds);
            let first = cellrows[0];
            for (which, pick) in [(Stat::Mean, 0usize), (Stat::Std, 1usize)] {
                let get = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
                out.push(SweepRow {
                    seed: None,
                    stat: which,
                    elbo: get(elbo),
                    epsilon: get(eps),
                    selective_accuracy: acc_stats.map(get),
                    coverage: get(cov),
                    inference_seconds: get(secs),
                    ..first.clone()
                });
            }
        }
    }
    Ok((spec, out))
}

/// Settings for fitting a standalone model file.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub m: usize,
    pub selection: SelectionMethod,
    pub seed: u64,
    pub train_fraction: f64,
    pub selection_options: SelectionOptions,
    pub spec: Option<KernelSpec>,
    pub hyper_subsample: usize,
    pub optimizer: OptimizerConfig,
}

/// Split, fit (or take) the kernel, select inducing points and fit the sparse
/// model on the training part. The model records the median distance from a
/// validation point to its nearest inducing point as `default_epsilon`.
pub fn fit_model(ds: &EmbeddingDataset, cfg: &FitConfig) -> Result<SvgpModel> {
    let (train, val) = split(ds, cfg.train_fraction, cfg.seed)?;
    if cfg.m == 0 || cfg.m > train.len() {
        return Err(Error::input(format!(
            "m={} must lie in 1..={} (training rows)",
            cfg.m,
            train.len()
        )));
    }
    let spec = match cfg.spec {
        Some(s) => {
            s.validate()?;
            s
        }
        None => fit_kernel_spec(&train, cfg.hyper_subsample, cfg.seed, &cfg.optimizer)?,
    };
    let set = select_inducing(
        &train,
        &spec,
        cfg.m,
        cfg.selection,
        cfg.seed,
        &cfg.selection_options,
    )?;
    let mut model = fit_on(&train, &set, &spec)?;
    let mut nearest = kth_smallest_per_row(&pairwise_distance(val.embeddings(), &set.inputs)?, 1);
    nearest.sort_by(f64::total_cmp);
    let md = &mut model.metadata;
    md.selection_method = cfg.selection.to_string();
    md.seed = Some(cfg.seed);
    md.extra.insert(
        "default_epsilon".into(),
        format!("{:?}", quantile_sorted(&nearest, 0.5)),
    );
    md.extra
        .insert("train_fraction".into(), format!("{:?}", cfg.train_fraction));
    md.extra
        .insert("class_count".into(), ds.class_count().to_string());
    if !ds.provenance.is_empty() {
        md.extra.insert("provenance".into(), ds.provenance.clone());
    }
    Ok(model)
}

/// ε stored by [`fit_model`], if any.
pub fn default_epsilon(model: &SvgpModel) -> Option<f64> {
    model.metadata.extra.get("default_epsilon")?.parse().ok()
}

/// Verdicts for `queries` against a fitted model. Predictions come from the
/// model's mean; with at least two inducing points the covariance metric is
/// always evaluated so class uncertainty can come from `P_rm`.
pub fn justify(
    model: &SvgpModel,
    queries: &DMatrix<f64>,
    config: &SupportConfig,
    chunk_size: usize,
) -> Result<(Vec<EpistemicVerdict>, SupportEvaluation)> {
    config.validate()?;
    if queries.ncols() != model.dim() {
        return Err(Error::input(format!(
            "queries have dimension {}, model expects {}",
            queries.ncols(),
            model.dim()
        )));
    }
    let predicted = model.predict(queries)?.argmax_classes();
    let eval = if model.num_inducing() >= 2 || config.metric == SupportMetric::CovarianceAdjusted {
        covariance_adjust_chunked(queries, model, config.lambda, chunk_size)?
    } else {
        SupportEvaluation::plain(pairwise_distance(queries, model.inducing_inputs())?)
    };
    let verdicts = ik_verdicts(
        &eval,
        model.inducing_labels(),
        &predicted,
        config,
        model.class_count(),
    )?;
    Ok((verdicts, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn blobs(per: usize, seed: u64) -> EmbeddingDataset {
        generate_synthetic(&SyntheticConfig {
            classes: 3,
            points_per_class: per,
            dim: 2,
            cluster_spread: 1.0,
            class_separation: 4.0,
            seed,
        })
        .unwrap()
    }

    fn small_cfg() -> HarnessConfig {
        HarnessConfig {
            m_values: vec![4, 8],
            epsilon: EpsilonGrid::Quantiles(vec![0.2, 0.5, 0.9]),
            seeds: vec![1, 2],
            tau: 1,
            spec: Some(KernelSpec::new(1.5, 1.0, 0.1).unwrap()),
            ..HarnessConfig::default()
        }
    }

    #[test]
    fn quantile_helpers() {
        let m = DMatrix::from_row_slice(2, 3, &[3.0, 1.0, 2.0, 0.5, 0.5, 9.0]);
        assert_eq!(kth_smallest_per_row(&m, 1), vec![1.0, 0.5]);
        assert_eq!(kth_smallest_per_row(&m, 3), vec![3.0, 9.0]);
        assert_eq!(kth_smallest_per_row(&m, 4), vec![f64::INFINITY; 2]);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 1.0), 2.0);
    }

    #[test]
    fn row_count_and_order() {
        let ds = blobs(30, 3);
        let out = run_comparison(&ds, &small_cfg()).unwrap();
        assert_eq!(out.rows.len(), 2 * (3 * 2 * 3) + 3 * 2);
        let n_train = split(&ds, 0.8, 1).unwrap().0.len();
        let methods: Vec<String> = out.rows[..12]
            .iter()
            .map(|r| format!("{}:{}", r.method, r.m))
            .collect();
        assert_eq!(
            methods[..3],
            [
                format!("baseline:{n_train}"),
                format!("baseline:{n_train}"),
                format!("baseline:{n_train}")
            ]
        );
        assert_eq!(methods[3..6], ["sgp:4", "sgp:4", "sgp:4"]);
        assert_eq!(methods[6..9], ["cov-sgp:4", "cov-sgp:4", "cov-sgp:4"]);
        assert_eq!(
            methods[9..12],
            ["random-subset:4", "random-subset:4", "random-subset:4"]
        );
        for r in &out.rows {
            assert!((0.0..=1.0).contains(&r.coverage));
            assert!(r.inference_seconds > 0.0);
            assert_eq!(r.selective_accuracy.is_none(), r.coverage == 0.0);
        }
    }

    #[test]
    fn huge_epsilon_covers_everything_with_tau_one() {
        let ds = blobs(20, 5);
        let cfg = HarnessConfig {
            epsilon: EpsilonGrid::Values(vec![1e6]),
            seeds: vec![0],
            m_values: vec![30],
            classifier: Classifier::NearestInducingLabel,
            ..small_cfg()
        };
        let out = run_comparison(&ds, &cfg).unwrap();
        for r in &out.rows {
            assert_eq!(r.coverage, 1.0, "{}", r.method);
        }
    }

    #[test]
    fn coverage_monotone_in_epsilon_and_tau() {
        let ds = blobs(30, 8);
        let mut cfg = small_cfg();
        cfg.epsilon = EpsilonGrid::Values(vec![0.3, 0.8, 2.0]);
        cfg.seeds = vec![4];
        let lo = run_comparison(&ds, &cfg).unwrap().rows;
        cfg.tau = 3;
        let hi = run_comparison(&ds, &cfg).unwrap().rows;
        for (a, b) in lo.iter().zip(&hi) {
            assert!(b.coverage <= a.coverage);
        }
        for w in lo.chunks(3) {
            assert!(w[0].coverage <= w[1].coverage && w[1].coverage <= w[2].coverage);
        }
    }

    #[test]
    fn oversized_m_is_reported() {
        let ds = blobs(5, 1);
        let mut cfg = small_cfg();
        cfg.m_values = vec![100];
        assert!(matches!(run_comparison(&ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cov_sgp_single_inducing_point_names_cell() {
        let ds = blobs(10, 1);
        let mut cfg = small_cfg();
        cfg.m_values = vec![1];
        let err = run_comparison(&ds, &cfg).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("cov-sgp m=1"), "{err}");
    }

    #[test]
    fn sweep_summary_rows() {
        let ds = blobs(30, 2);
        let cfg = HarnessConfig {
            m_values: vec![3, 6, 12],
            ..small_cfg()
        };
        let (_, rows) =
            sweep_inducing(&ds, &cfg, SelectionMethod::GreedyElbo, SupportMetric::Plain).unwrap();
        assert_eq!(rows.len(), 3 * (2 * 3 + 2 * 3));
        let runs: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.stat == Stat::Run && r.seed == Some(1))
            .collect();
        let elbos: Vec<f64> = runs.iter().step_by(3).map(|r| r.elbo).collect();
        assert!(elbos.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        let mean = rows.iter().find(|r| r.stat == Stat::Mean).unwrap();
        let both: Vec<f64> = rows
            .iter()
            .filter(|r| r.stat == Stat::Run && r.m == mean.m)
            .step_by(3)
            .map(|r| r.coverage)
            .collect();
        assert!((mean.coverage - (both[0] + both[1]) / 2.0).abs() < 1e-15);
        let bad = HarnessConfig {
            m_values: vec![6, 3],
            ..small_cfg()
        };
        assert!(sweep_inducing(&ds, &bad, SelectionMethod::Random, SupportMetric::Plain).is_err());
    }

    #[test]
    fn sweep_at_full_size_matches_baseline_counts() {
        let ds = blobs(15, 6);
        let (train, val) = split(&ds, 0.8, 0).unwrap();
        let cfg = HarnessConfig {
            m_values: vec![train.len()],
            epsilon: EpsilonGrid::Values(vec![0.5, 1.5]),
            seeds: vec![0],
            ..small_cfg()
        };
        let set = select_inducing(
            &train,
            &cfg.spec.unwrap(),
            train.len(),
            SelectionMethod::Random,
            0,
            &SelectionOptions::default(),
        )
        .unwrap();
        let model = fit_on(&train, &set, &cfg.spec.unwrap()).unwrap();
        let pred = classify(&model, val.embeddings(), Classifier::SvgpMean).unwrap();
        let (_, rows) =
            sweep_inducing(&ds, &cfg, SelectionMethod::Random, SupportMetric::Plain).unwrap();
        for (k, &eps) in [0.5, 1.5].iter().enumerate() {
            let support = cfg.support(eps, SupportMetric::Plain);
            let base = epsilon_ball_support(val.embeddings(), &train, &pred, &support).unwrap();
            assert_eq!(gate_metrics(&base, val.labels()).0, rows[k].coverage);
        }
    }

    #[test]
    fn fit_and_justify() {
        let ds = blobs(30, 9);
        let cfg = FitConfig {
            m: 10,
            selection: SelectionMethod::Kmeans,
            seed: 3,
            train_fraction: 0.8,
            selection_options: SelectionOptions::default(),
            spec: Some(KernelSpec::new(1.5, 1.0, 0.1).unwrap()),
            hyper_subsample: 50,
            optimizer: OptimizerConfig::default(),
        };
        let model = fit_model(&ds, &cfg).unwrap();
        assert!(default_epsilon(&model).unwrap() > 0.0);
        assert_eq!(model.metadata.selection_method, "kmeans");

        let mut q = DMatrix::zeros(2, 2);
        q.row_mut(0).copy_from(&model.inducing_inputs().row(0));
        q.row_mut(1).fill(1e3);
        let config = SupportConfig {
            min_support: 1,
            metric: SupportMetric::Plain,
            ..SupportConfig::new(0.5)
        };
        let (verdicts, _) = justify(&model, &q, &config, 256).unwrap();
        if verdicts[0].predicted_class == model.inducing_labels()[0] {
            assert!(verdicts[0].ik);
            assert_eq!(verdicts[0].exemplars[0].index, 0);
            assert_eq!(verdicts[0].exemplars[0].metric, 0.0);
        }
        assert!(!verdicts[1].ik && verdicts[1].exemplars.is_empty());
        let sums: f64 = verdicts[0].class_uncertainty.iter().sum();
        assert!((sums - 1.0).abs() < 1e-12);
        assert!(justify(&model, &DMatrix::zeros(1, 3), &config, 256).is_err());
    }

    #[test]
    fn experiment_csv_layout() {
        let rows = vec![ExperimentResult {
            method: Method::CovSgp,
            m: 64,
            epsilon: 0.5,
            lambda: 1.0,
            tau: 3,
            seed: 7,
            selective_accuracy: None,
            coverage: 0.0,
            inference_seconds: 0.25,
            n_eval: 10,
        }];
        let mut out = Vec::new();
        write_experiment_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{EXPERIMENT_HEADER}\ncov-sgp,64,0.5,1,3,7,,0,0.25,10\n")
        );
    }
}
