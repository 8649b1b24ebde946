use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epistemic_sgp::data::{
    generate_synthetic, load_dataset, save_dataset, DatasetFormat, SyntheticConfig,
};
use epistemic_sgp::epistemic::{
    write_verdicts, CoherenceMode, SupportConfig, SupportMetric, VerdictCsvOptions,
    DEFAULT_CHUNK_SIZE, DEFAULT_LAMBDA, DEFAULT_MIN_SUPPORT, DEFAULT_TOP_K,
};
use epistemic_sgp::exact_gp::OptimizerConfig;
use epistemic_sgp::harness::{
    default_epsilon, fit_model, justify, run_comparison, sweep_inducing, write_experiment_csv,
    write_sweep_csv, EpsilonGrid, FitConfig, HarnessConfig, DEFAULT_BASELINE_CLASSIFIER_M,
    DEFAULT_HYPER_SUBSAMPLE, DEFAULT_TRAIN_FRACTION,
};
use epistemic_sgp::inducing::{
    SelectionMethod, SelectionOptions, DEFAULT_CANDIDATE_POOL, DEFAULT_KMEANS_ITERS,
};
use epistemic_sgp::kernels::KernelSpec;
use epistemic_sgp::model_io::{load_model, save_model};
use epistemic_sgp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "esgp",
    version,
    about = "Sparse-GP support neighborhoods and \"I Know\" gating over embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob embedding dataset
    Synth(SynthArgs),
    /// Select inducing points and fit a sparse GP model file
    Fit(FitArgs),
    /// Gate queries against a model and list exemplar inducing points
    Justify(JustifyArgs),
    /// Baseline vs SGP vs Cov-SGP vs Random Subset over an ε × m × seed grid
    Compare(CompareArgs),
    /// Sweep the number of inducing points for one selection method
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    points_per_class: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    cluster_spread: f64,
    #[arg(long, default_value_t = 4.0)]
    class_separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output format (csv or embd); inferred from the extension when omitted
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Embedding dataset (CSV or EMBD binary)
    #[arg(long)]
    data: PathBuf,
    /// Force the input format instead of detecting it
    #[arg(long)]
    format: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

/// Kernel hyperparameters; fitted by marginal likelihood unless all three are given.
#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    signal_variance: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    /// Training rows used for the hyperparameter fit
    #[arg(long, default_value_t = DEFAULT_HYPER_SUBSAMPLE)]
    hyper_subsample: usize,
    #[arg(long, default_value_t = OptimizerConfig::default().max_iters)]
    hyper_iters: usize,
}

impl KernelArgs {
    fn spec(&self) -> Result<Option<KernelSpec>> {
        match (self.lengthscale, self.signal_variance, self.noise_variance) {
            (Some(l), Some(s), Some(n)) => Ok(Some(KernelSpec::new(l, s, n)?)),
            (None, None, None) => Ok(None),
            _ => Err(Error::Config(
                "give all of --lengthscale, --signal-variance and --noise-variance, or none".into(),
            )),
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            max_iters: self.hyper_iters,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Args)]
struct SelectionArgs {
    #[arg(long, default_value_t = DEFAULT_CANDIDATE_POOL)]
    candidate_pool: usize,
    #[arg(long, default_value_t = DEFAULT_KMEANS_ITERS)]
    kmeans_iters: usize,
}

impl SelectionArgs {
    fn options(&self) -> SelectionOptions {
        SelectionOptions {
            candidate_pool: self.candidate_pool,
            kmeans_iters: self.kmeans_iters,
        }
    }
}

#[derive(Args)]
struct SupportArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Minimum number of label-coherent neighbors (τ)
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    tau: usize,
    /// predicted-label or majority-label
    #[arg(long, default_value = "predicted-label")]
    coherence: String,
    /// Queries per joint covariance inversion
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    m: usize,
    /// random, kmeans or greedy-elbo
    #[arg(long, default_value = "greedy-elbo")]
    selection: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    select: SelectionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JustifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Query embeddings (labels are ignored)
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    format: Option<String>,
    /// Neighborhood radius; defaults to the value stored by `fit`
    #[arg(long)]
    epsilon: Option<f64>,
    /// plain or covariance-adjusted
    #[arg(long, default_value = "plain")]
    metric: String,
    #[command(flatten)]
    support: SupportArgs,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Accepted for interface symmetry; justification is deterministic
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Inducing counts, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 64, 256])]
    m: Vec<usize>,
    /// Absolute ε values, comma separated (overrides --epsilon-quantiles)
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// ε as quantiles of the τ-th nearest reference distance over validation points
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75, 0.9])]
    epsilon_quantiles: Vec<f64>,
    #[command(flatten)]
    support: SupportArgs,
    /// First seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at --seed
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    /// one-vs-rest-svgp-mean or nearest-inducing-label
    #[arg(long, default_value = "one-vs-rest-svgp-mean")]
    classifier: String,
    #[arg(long, default_value_t = DEFAULT_BASELINE_CLASSIFIER_M)]
    baseline_classifier_m: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    select: SelectionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Selection behind the sgp and cov-sgp methods
    #[arg(long, default_value = "greedy-elbo")]
    selection: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = "greedy-elbo")]
    selection: String,
    #[arg(long, default_value = "plain")]
    metric: String,
}

fn harness_config(g: &GridArgs, selection: SelectionMethod) -> Result<HarnessConfig> {
    if g.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    Ok(HarnessConfig {
        m_values: g.m.clone(),
        epsilon: if g.epsilon.is_empty() {
            EpsilonGrid::Quantiles(g.epsilon_quantiles.clone())
        } else {
            EpsilonGrid::Values(g.epsilon.clone())
        },
        lambda: g.support.lambda,
        tau: g.support.tau,
        coherence_mode: g.support.coherence.parse()?,
        seeds: (g.seed..g.seed + g.repeats).collect(),
        classifier: g.classifier.parse()?,
        train_fraction: g.data.train_fraction,
        selection,
        selection_options: g.select.options(),
        chunk_size: g.support.chunk_size,
        baseline_classifier_m: g.baseline_classifier_m,
        spec: g.kernel.spec()?,
        hyper_subsample: g.kernel.hyper_subsample,
        optimizer: g.kernel.optimizer(),
    })
}

fn parse_format(f: &Option<String>) -> Result<Option<DatasetFormat>> {
    f.as_deref().map(str::parse).transpose()
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn format_for(path: &Path, explicit: &Option<String>) -> Result<DatasetFormat> {
    if let Some(f) = parse_format(explicit)? {
        return Ok(f);
    }
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("embd") | Some("bin") => DatasetFormat::Embd,
        _ => DatasetFormat::Csv,
    })
}

fn describe(spec: &KernelSpec) -> String {
    format!(
        "lengthscale={} signal_variance={} noise_variance={}",
        spec.lengthscale, spec.signal_variance, spec.noise_variance
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let ds = generate_synthetic(&SyntheticConfig {
                classes: a.classes,
                points_per_class: a.points_per_class,
                dim: a.dim,
                cluster_spread: a.cluster_spread,
                class_separation: a.class_separation,
                seed: a.seed,
            })?;
            save_dataset(&ds, &a.out, format_for(&a.out, &a.format)?)?;
            eprintln!(
                "wrote {} rows ({} classes, d={}) to {}",
                ds.len(),
                ds.class_count(),
                ds.dim(),
                a.out.display()
            );
        }
        Command::Fit(a) => {
            let ds = load_dataset(&a.data.data, parse_format(&a.data.format)?)?;
            let model = fit_model(
                &ds,
                &FitConfig {
                    m: a.m,
                    selection: a.selection.parse()?,
                    seed: a.seed,
                    train_fraction: a.data.train_fraction,
                    selection_options: a.select.options(),
                    spec: a.kernel.spec()?,
                    hyper_subsample: a.kernel.hyper_subsample,
                    optimizer: a.kernel.optimizer(),
                },
            )?;
            save_model(&model, &a.out)?;
            eprintln!(
                "wrote model with m={} ({}) to {}; default epsilon {}",
                model.num_inducing(),
                describe(model.spec()),
                a.out.display(),
                default_epsilon(&model).unwrap_or(f64::NAN)
            );
        }
        Command::Justify(a) => {
            let model = load_model(&a.model)?;
            let queries = load_dataset(&a.queries, parse_format(&a.format)?)?;
            let epsilon = match a.epsilon.or_else(|| default_epsilon(&model)) {
                Some(e) => e,
                None => {
                    return Err(Error::Config(
                        "model has no stored epsilon; pass --epsilon".into(),
                    ))
                }
            };
            let metric: SupportMetric = a.metric.parse()?;
            let config = SupportConfig {
                epsilon,
                lambda: a.support.lambda,
                min_support: a.support.tau,
                coherence_mode: a.support.coherence.parse::<CoherenceMode>()?,
                metric,
            };
            let (verdicts, eval) =
                justify(&model, queries.embeddings(), &config, a.support.chunk_size)?;
            let options = VerdictCsvOptions {
                top_k: a.top_k,
                uncertainty: true,
                chunk_size: eval.chunk_size,
            };
            let mut w = output(&a.out)?;
            write_verdicts(&mut w, &verdicts, model.class_count(), &options)?;
            w.flush()?;
            let passed = verdicts.iter().filter(|v| v.ik).count();
            eprintln!(
                "{passed} of {} queries pass at epsilon={epsilon} ({metric})",
                verdicts.len()
            );
        }
        Command::Compare(a) => {
            let ds = load_dataset(&a.grid.data.data, parse_format(&a.grid.data.format)?)?;
            let cfg = harness_config(&a.grid, a.selection.parse()?)?;
            let out = run_comparison(&ds, &cfg)?;
            let mut w = output(&a.grid.out)?;
            write_experiment_csv(&mut w, &out.rows)?;
            w.flush()?;
            eprintln!("{} rows; kernel {}", out.rows.len(), describe(&out.spec));
        }
        Command::Sweep(a) => {
            let ds = load_dataset(&a.grid.data.data, parse_format(&a.grid.data.format)?)?;
            let selection: SelectionMethod = a.selection.parse()?;
            let cfg = harness_config(&a.grid, selection)?;
            let (spec, rows) = sweep_inducing(&ds, &cfg, selection, a.metric.parse()?)?;
            let mut w = output(&a.grid.out)?;
            write_sweep_csv(&mut w, &rows)?;
            w.flush()?;
            eprintln!("{} rows; kernel {}", rows.len(), describe(&spec));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
