use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use misconv::baselines::ImputationMode;
use misconv::em::{self, EmConfig, EmInit};
use misconv::layer::variants::RectifiedMean;
use misconv::layer::{read_kernels, write_kernels, KernelStack};
use misconv::mfa::{read_model, write_model, MaskedImage};
use misconv::pipeline::classifier::{train_linear_classifier, ClassifierConfig};
use misconv::pipeline::experiment::{metrics_csv, MetricRow};
use misconv::pipeline::features::{
    extract_features, mask_channel_kernels, read_features, write_features, ArmInputs, FeatureArm,
};
use misconv::pipeline::metrics::{
    classification_metrics, evaluate_imputation, zero_imputation_error,
};
use misconv::pipeline::threads::{configured_threads, with_threads};
use misconv::pipeline::{
    apply_mask, bench, load_idx_limit, run_experiment, BenchConfig, Dataset, ExperimentConfig,
    MaskSpec,
};
use misconv::rng::derive_seed;
use misconv::verify::{
    conditioning_suite, identity_suite, quadrature_suite, LayerVariant, CONDITIONING_TOL, MAX_Z,
    QUADRATURE_TOL, WEIGHT_TOL,
};

#[derive(Parser)]
#[command(
    name = "misconv",
    version,
    about = "Convolutions of images with missing pixels"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture of factor analyzers to complete images with EM.
    TrainMfa(TrainMfaArgs),
    /// Score conditional-mean imputation on masked images.
    EvalImputation(EvalImputationArgs),
    /// Compute first-layer features for one arm.
    ExtractFeatures(ExtractArgs),
    /// Train the linear head on a feature file and score a test feature file.
    Classify(ClassifyArgs),
    /// Time the plain convolution against the missing-data layer.
    Bench(BenchArgs),
    /// Run the randomized oracle suite; exits nonzero on any breach.
    Verify(VerifyArgs),
    /// Run a full experiment from a config file.
    RunExperiment(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    /// Use only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        load_idx_limit(&self.images, &self.labels, self.limit)
            .with_context(|| format!("loading {}", self.images.display()))
    }
}

#[derive(Args)]
struct MaskArgs {
    /// square, noise or none.
    #[arg(long, default_value = "square")]
    mask: String,
    /// Square area fraction or noise missing fraction (0.25 / 0.75 when omitted).
    #[arg(long)]
    mask_fraction: Option<f64>,
    #[arg(long, default_value_t = 1)]
    mask_seed: u64,
    /// Seed stream of the split: 0 for training images, 1 for test images.
    #[arg(long, default_value_t = 1)]
    split: u64,
}

impl MaskArgs {
    fn apply(&self, ds: &Dataset) -> Result<Vec<MaskedImage>> {
        let mut cfg = ExperimentConfig::default();
        cfg.set("mask", &self.mask)?;
        cfg.mask_fraction = self.mask_fraction;
        cfg.mask_seed = self.mask_seed;
        let spec: MaskSpec = cfg.mask_spec();
        Ok(ds
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| apply_mask(im, &spec, ds.shape, spec.example_seed(self.split, i)))
            .collect::<misconv::Result<Vec<_>>>()?)
    }
}

#[derive(Args)]
struct TrainMfaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    l: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    ll_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    d_floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// kmeans or random-subset.
    #[arg(long, default_value = "kmeans")]
    init: String,
    /// Output model file (MFA1).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration log-likelihood CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalImputationArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    model: PathBuf,
    /// Metrics CSV (arm,metric,value).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    mask: MaskArgs,
    /// misconv, zero, mask or mfa_mean.
    #[arg(long)]
    arm: String,
    /// Kernel file (KRN1); a random default stack is drawn from --kernel-seed otherwise.
    #[arg(long)]
    kernels: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    kernel_seed: u64,
    /// Save the kernel stack that was used.
    #[arg(long)]
    save_kernels: Option<PathBuf>,
    /// Model file (MFA1), required by the misconv and mfa_mean arms.
    #[arg(long)]
    model: Option<PathBuf>,
    /// mixture-mean or map-component.
    #[arg(long, default_value = "mixture-mean")]
    imputation_mode: String,
    /// Output feature file (FTR1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Training feature file (FTR1).
    #[arg(long)]
    train: PathBuf,
    /// Test feature file (FTR1).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = ClassifierConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = ClassifierConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ClassifierConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ClassifierConfig::default().l2)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Name used in the arm column of the output.
    #[arg(long, default_value = "features")]
    arm: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [28, 32, 64])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    batches: Vec<usize>,
    #[arg(long = "l", value_delimiter = ',', default_values_t = [4])]
    l_values: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timing CSV (input_size,batch,layer,median_s,iqr_s).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random layer configurations checked against Monte-Carlo.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    /// Monte-Carlo samples per configuration.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Random 1-D mixtures checked against quadrature.
    #[arg(long, default_value_t = 200)]
    mixtures: usize,
    /// Random models whose conditioning is checked against dense linear algebra.
    #[arg(long, default_value_t = 100)]
    conditioning_cases: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for one `coord,analytic,empirical,se,z` CSV per configuration.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train_size=500`; repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_mfa(a: &TrainMfaArgs) -> Result<()> {
    let ds = a.data.load()?;
    let cfg = EmConfig {
        k: a.k,
        l: a.l,
        max_iters: a.max_iters,
        ll_tol: a.ll_tol,
        d_floor: a.d_floor,
        seed: a.seed,
        init: a.init.parse::<EmInit>()?,
    };
    let data: Vec<&[f64]> = ds.images.iter().map(|im| im.pixels()).collect();
    let (model, report) = em::fit(&data, &cfg)?;
    write_model(&model, &a.out)?;
    if let Some(p) = &a.report {
        report.write_csv(p)?;
    }
    println!(
        "fitted k={} l={} on {} images: {} iterations, converged={}, final mean log-likelihood {:.4}",
        a.k,
        a.l,
        ds.len(),
        report.iterations_run,
        report.converged,
        report.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_imputation(a: &EvalImputationArgs) -> Result<()> {
    let ds = a.data.load()?;
    let masked = a.mask.apply(&ds)?;
    let model = read_model(&a.model)?;
    let truth: Vec<&[f64]> = ds.images.iter().map(|im| im.pixels()).collect();
    let m = evaluate_imputation(&model, &masked, &truth)?;
    let (zero_mse, zero_psnr) = zero_imputation_error(&masked, &truth)?;
    let row = |arm: &str, metric: &str, value| MetricRow {
        arm: arm.into(),
        metric: metric.into(),
        value,
    };
    let rows = vec![
        row("mfa_imputation", "mse", m.mse),
        row("mfa_imputation", "psnr", m.psnr),
        row("mfa_imputation", "nll", m.nll),
        row("zero_imputation", "mse", zero_mse),
        row("zero_imputation", "psnr", zero_psnr),
    ];
    print!("{}", metrics_csv(&rows));
    if let Some(p) = &a.out {
        write_text(p, &metrics_csv(&rows))?;
    }
    Ok(())
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let ds = a.data.load()?;
    let masked = a.mask.apply(&ds)?;
    let arm: FeatureArm = a.arm.parse()?;
    let kernels = match &a.kernels {
        Some(p) => read_kernels(p)?,
        None => KernelStack::default_random(ds.shape.channels, a.kernel_seed)?,
    };
    if let Some(p) = &a.save_kernels {
        write_kernels(&kernels, p)?;
    }
    let mask_kernels = mask_channel_kernels(&kernels, derive_seed(a.kernel_seed, 1))?;
    let model = a.model.as_ref().map(read_model).transpose()?;
    if arm.needs_model() && model.is_none() {
        bail!("arm {arm} needs --model");
    }
    let inputs = ArmInputs {
        kernels: &kernels,
        mask_kernels: Some(&mask_kernels),
        model: model.as_ref(),
        mode: a.imputation_mode.parse::<ImputationMode>()?,
    };
    let features = extract_features(arm, &masked, ds.shape, &inputs)?;
    write_features(&a.out, &features, &ds.labels)?;
    println!(
        "wrote {} x {} {arm} features to {}",
        features.num_images(),
        features.dim(),
        a.out.display()
    );
    Ok(())
}

fn classify(a: &ClassifyArgs) -> Result<()> {
    let (xtr, ytr) = read_features(&a.train)?;
    let (xte, yte) = read_features(&a.test)?;
    if xtr.dim() != xte.dim() {
        bail!("train and test features differ in dimension");
    }
    let ytr: Vec<usize> = ytr.iter().map(|&y| y as usize).collect();
    let yte: Vec<usize> = yte.iter().map(|&y| y as usize).collect();
    let classes = ytr.iter().chain(&yte).max().map_or(0, |m| m + 1);
    let cfg = ClassifierConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        l2: a.l2,
        seed: a.seed,
    };
    let (clf, report) = train_linear_classifier(&xtr, &ytr, classes, &cfg, Some((&xte, &yte)))?;
    let m = classification_metrics(&clf.predict(&xte), &yte, classes)?;
    let mut rows = vec![
        MetricRow {
            arm: a.arm.clone(),
            metric: "accuracy".into(),
            value: m.accuracy,
        },
        MetricRow {
            arm: a.arm.clone(),
            metric: "train_accuracy".into(),
            value: clf.accuracy(&xtr, &ytr),
        },
    ];
    for (c, v) in m.per_class_accuracy.iter().enumerate() {
        rows.push(MetricRow {
            arm: a.arm.clone(),
            metric: format!("accuracy_class_{c}"),
            value: *v,
        });
    }
    for (e, acc) in report.eval_accuracy.iter().enumerate() {
        log::info!(
            "epoch {e}: loss {:.5} test accuracy {acc:.4}",
            report.epoch_loss[e]
        );
    }
    print!("{}", metrics_csv(&rows));
    if let Some(p) = &a.out {
        write_text(p, &metrics_csv(&rows))?;
    }
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        sizes: a.sizes.clone(),
        batches: a.batches.clone(),
        l_values: a.l_values.clone(),
        k: a.k,
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
    };
    let rows = bench::bench_layer(&cfg)?;
    print!("{}", bench::timing_csv(&rows));
    for r in bench::latency_ratios(&rows) {
        println!(
            "# {}x{} batch {} {}: {:.2}x",
            r.input_size, r.input_size, r.batch, r.layer, r.ratio
        );
    }
    if let Some(p) = &a.out {
        bench::write_timing_csv(&rows, p)?;
    }
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let suite = identity_suite(a.cases, a.samples, a.seed, LayerVariant::EXACT)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, r) in suite.reports.iter().enumerate() {
            r.write_csv(dir.join(format!("case_{i:03}.csv")))?;
        }
    }
    let mut summary = String::new();
    for (i, r) in suite.reports.iter().enumerate() {
        let _ = writeln!(summary, "  case {i}: {}", r.summary());
    }
    log::info!("per-case results:\n{summary}");
    let quad = quadrature_suite(a.mixtures, a.seed, RectifiedMean::Exact)?;
    println!(
        "{} monte-carlo: {} cases x {} samples, max z {:.3} (limit {MAX_Z}), {} failing",
        if suite.passes() { "PASS" } else { "FAIL" },
        a.cases,
        a.samples,
        suite.max_z(),
        suite.failing_cases()
    );
    println!(
        "{} quadrature: {} mixtures, max |error| {:.3e} (limit {QUADRATURE_TOL:e})",
        if quad.passes() { "PASS" } else { "FAIL" },
        quad.cases,
        quad.max_abs_error
    );
    let cond = conditioning_suite(a.conditioning_cases, a.seed)?;
    println!(
        "{} conditioning: {} models, max moment error {:.3e} (limit {CONDITIONING_TOL:e}), \
         max weight error {:.3e} (limit {WEIGHT_TOL:e})",
        if cond.passes() { "PASS" } else { "FAIL" },
        cond.cases,
        cond.max_moment_error,
        cond.max_weight_error
    );
    Ok(suite.passes() && quad.passes() && cond.passes())
}

fn run(a: &RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    let outcome = run_experiment(&cfg)?;
    print!("{}", metrics_csv(&outcome.metrics));
    println!("# artifacts in {}", outcome.output_dir.display());
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<bool> {
    match cmd {
        Command::TrainMfa(a) => train_mfa(a)?,
        Command::EvalImputation(a) => eval_imputation(a)?,
        Command::ExtractFeatures(a) => extract(a)?,
        Command::Classify(a) => classify(a)?,
        Command::Bench(a) => run_bench(a)?,
        Command::Verify(a) => return verify(a),
        Command::RunExperiment(a) => run(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    let result = configured_threads()
        .map_err(anyhow::Error::from)
        .and_then(|threads| with_threads(threads, || dispatch(&cli.command)).map_err(Into::into))
        .and_then(|r| r);
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
