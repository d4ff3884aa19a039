//! `mgnetlab`: train, evaluate, count and verify constrained data-feature
//! models.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use mgnetlab::data::{load_named, DATASET_IDS};
use mgnetlab::train::evaluate;
use mgnetlab::verify::{run_suite, Suite};
use mgnetlab::{
    build_model, checkpoint, count_parameters, parse_model_spec, train_and_evaluate, BuildOptions, Dataset, Error, ModelGraph,
    ModelSpec, Precision, Scalar, Stem, TrainConfig,
};

use manifest::RunManifest;

const GRAMMAR: &str = "\
model spec grammar:
  MgNet[nu_1,..,nu_J]-[c_1,..,c_J]-B(l|li)       e.g. MgNet[2,2,2,2]-[256]-Bl
  ResNet[..]-[..]-A(l|li)-B(l|li)                e.g. ResNet[2,2,2,2]-[64,128,256,512]-Al-Bli
  PreactResNet[..]-[..]-A(l|li)-B(l|li)
  GDFI[..]-[..]-B(l|li)-A:<form>-B:<form>        forms K, Ks, sK, sKs
  one channel entry applies to every grid; (cu,cf) gives distinct u/f widths";

#[derive(Parser, Debug)]
#[command(name = "mgnetlab", version, about = "Constrained data-feature models: training, counts and structural checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset, evaluating after every epoch.
    Train(TrainArgs),
    /// Test-set accuracy of saved weights.
    Eval(EvalArgs),
    /// Parameter count with a per-bank breakdown.
    CountParams(CountArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset id: mnist, cifar10, cifar100 or synthetic.
    #[arg(long)]
    dataset: String,
    /// Dataset root; defaults to $MGNETLAB_DATA, then ./data.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Epochs at which the learning rate drops by 10x, comma separated.
    #[arg(long, value_delimiter = ',')]
    decay_at: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single")]
    precision: Precision,
    /// Random crops and flips.
    #[arg(long)]
    augment: bool,
    /// Output directory for the manifest, metrics and weights.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "single")]
    precision: Precision,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value = "cifar")]
    stem: Stem,
    #[arg(long, default_value_t = 3)]
    input_channels: usize,
    /// Count without batch-norm scales and shifts.
    #[arg(long)]
    no_batch_norm: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// duality, positivity, gdfi, grad, tables or all.
    #[arg(long)]
    suite: Suite,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write one JSON record per check to this file.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Also print each check's detail lines.
    #[arg(long)]
    verbose: bool,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    ChecksFailed,
}

fn parse_spec(text: &str) -> Result<ModelSpec> {
    parse_model_spec(text).map_err(|e| Usage(format!("invalid model spec `{text}`: {e}\n\n{GRAMMAR}")).into())
}

fn data_root(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().or_else(|| std::env::var_os("MGNETLAB_DATA").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
}

fn load_data(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    if !DATASET_IDS.contains(&args.dataset.as_str()) {
        return Err(Usage(format!("unknown dataset `{}` (expected one of {})", args.dataset, DATASET_IDS.join(", "))).into());
    }
    let root = data_root(&args.data_root);
    load_named(&args.dataset, &root).with_context(|| format!("loading {} from {}", args.dataset, root.display()))
}

/// The spec adapted to the dataset's channels and classes.
fn fit_to(spec: ModelSpec, data: &Dataset) -> ModelSpec {
    let c = data.sample_shape().c;
    spec.with_input_channels(c).with_classes(data.classes)
}

fn train<T: Scalar>(args: &TrainArgs, spec: ModelSpec, cfg: TrainConfig) -> Result<Outcome> {
    let (train, test) = load_data(&args.data)?;
    let spec = fit_to(spec, &train);
    let mut g: ModelGraph<T> = build_model(&spec, BuildOptions::default(), cfg.seed)?;
    println!("{} on {}: {} train / {} test, {} parameters", spec, args.data.dataset, train.len(), test.len(), g.count_parameters().total);
    let metrics_path = args.out.join("metrics.txt");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_err = None;
    let history = train_and_evaluate(&mut g, &train, &test, &cfg, |r| {
        let line = format!(
            "epoch={} lr={} train_loss={:.6} test_accuracy={:.4} seconds={:.1}",
            r.epoch, r.lr, r.train_loss, r.test_accuracy, r.seconds
        );
        println!("{line}");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    fs::write(args.out.join("history.json"), serde_json::to_vec_pretty(&history)?)?;
    let weights = args.out.join("weights.mgnw");
    checkpoint::save(&g, &weights)?;
    println!("weights written to {}", weights.display());
    Ok(Outcome::Ok)
}

fn run_train(args: &TrainArgs) -> Result<Outcome> {
    let spec = parse_spec(&args.model)?;
    let cfg = TrainConfig {
        lr0: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        epochs: args.epochs,
        decay_epochs: args.decay_at.clone(),
        seed: args.seed,
        precision: args.precision,
        augment: args.augment,
    };
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = RunManifest::new("train", &args.model, &args.data.dataset, cfg.clone(), &args.out);
    manifest.write(&args.out)?;
    match args.precision {
        Precision::Single => train::<f32>(args, spec, cfg),
        Precision::Double => train::<f64>(args, spec, cfg),
    }
}

fn eval<T: Scalar>(args: &EvalArgs, spec: &ModelSpec) -> Result<Outcome> {
    let g: ModelGraph<T> = checkpoint::load(&args.weights)?;
    if g.spec.to_string() != spec.to_string() {
        bail!("weights in {} are for {}, not {}", args.weights.display(), g.spec, spec);
    }
    let (_, test) = load_data(&args.data)?;
    if fit_to(g.spec.clone(), &test) != g.spec {
        bail!("{} does not fit {} ({} channels, {} classes)", g.spec, args.data.dataset, test.sample_shape().c, test.classes);
    }
    let acc = evaluate(&g, &test, args.batch_size)?;
    println!("test_accuracy={acc:.4} samples={}", test.len());
    Ok(Outcome::Ok)
}

fn run_eval(args: &EvalArgs) -> Result<Outcome> {
    let spec = parse_spec(&args.model)?;
    match args.precision {
        Precision::Single => eval::<f32>(args, &spec),
        Precision::Double => eval::<f64>(args, &spec),
    }
}

fn run_count(args: &CountArgs) -> Result<Outcome> {
    let spec = parse_spec(&args.model)?.with_classes(args.classes).with_stem(args.stem).with_input_channels(args.input_channels);
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let opts = BuildOptions { batch_norm: !args.no_batch_norm, ..BuildOptions::default() };
    let count = count_parameters(&spec, opts)?;
    println!("{spec} ({} classes, {} stem)", args.classes, args.stem);
    println!("{count}");
    Ok(Outcome::Ok)
}

fn run_verify(args: &VerifyArgs) -> Result<Outcome> {
    let mut summary = match &args.summary {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut io_err = None;
    let reports = run_suite(args.suite, args.seed, |r| {
        println!("{r}");
        if args.verbose || !r.passed() {
            for d in &r.details {
                println!("    {d}");
            }
        }
        if let Some(f) = summary.as_mut() {
            if let Err(e) = writeln!(f, "{}", r.to_json_line()) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing summary");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} passed, {failed} failed", reports.len(), reports.len() - failed);
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::ChecksFailed })
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::CountParams(a) => run_count(a),
        Command::Verify(a) => run_verify(a),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<Usage>().is_some() || matches!(e.downcast_ref::<Error>(), Some(Error::Parse { .. }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            if code == 2 {
                eprintln!("\n{}\n\n{GRAMMAR}", Cli::command().render_usage());
            }
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
