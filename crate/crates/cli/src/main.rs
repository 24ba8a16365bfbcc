use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use labelnoise_core::datagen::{generate_blobs, inject_noise, split, BlobSpec, LabeledDataset};
use labelnoise_core::harness::{
    aggregate, format_summary_csv, load_results, run_experiment, write_report, DatasetSource, ExperimentConfig,
};
use labelnoise_core::losses::LossSpec;
use labelnoise_core::model::{init_mlp, MlpConfig, MlpParams};
use labelnoise_core::trainer::{
    estimate_transition, evaluate, stage_estimate, stage_reweight, stage_revise, train, AnchorConfig, TrainConfig,
};
use labelnoise_core::transition::{format_matrix, presets, RevisionMode, TransitionMatrix};

#[derive(Parser, Debug)]
#[command(name = "labelnoise", version, about = "Train classifiers under class-conditional label noise")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with experiment settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Accept transition matrices that are not row-stochastic.
    #[arg(long, global = true)]
    no_validate: bool,
    /// Abort the experiment on the first failed trial.
    #[arg(long, global = true)]
    fail_fast: bool,
    /// Worker threads for experiment trials.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clean synthetic blob dataset.
    GenData(GenData),
    /// Corrupt a dataset's labels with a transition matrix.
    Inject(Inject),
    /// Train a classifier on noisy labels.
    Train(TrainCmd),
    /// Estimate the transition matrix from a trained model.
    EstimateT(EstimateT),
    /// Run T-Revision.
    Revise(Revise),
    /// Score a model on clean labels.
    Eval(Eval),
    /// Run a multi-seed experiment and write its report.
    Experiment,
    /// Rebuild summary and plots from an experiment directory.
    Report(Report),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layout {
    Simplex,
    Paired,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2500)]
    n_per_class: usize,
    #[arg(long, value_enum, default_value_t = Layout::Simplex)]
    layout: Layout,
    /// Distance between class means in units of sigma (simplex layout).
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Distance within a class pair (paired layout).
    #[arg(long, default_value_t = 1.5)]
    within: f64,
    /// Distance between class pairs (paired layout).
    #[arg(long, default_value_t = 6.0)]
    between: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Output file; defaults to `<out>/data.txt` or stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Inject {
    #[arg(long)]
    data: PathBuf,
    /// Preset (`circulant:0.3`, `symmetric:0.6@4`, `identity`) or matrix file.
    #[arg(long)]
    matrix: String,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Baseline,
    Forward,
    Reweight,
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    /// Dataset with noisy labels.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Baseline)]
    loss: LossArg,
    /// Transition matrix for the forward and reweight losses.
    #[arg(long)]
    matrix: Option<String>,
    #[command(flatten)]
    opts: TrainOpts,
    /// Checkpoint path; defaults to `<out>/model.txt`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateT {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Alpha,
    Softmax,
}

#[derive(Args, Debug)]
struct Revise {
    /// Dataset with noisy labels.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Alpha)]
    mode: ModeArg,
    #[arg(long)]
    alpha: Option<f64>,
    /// Initial estimate; estimated from a cross-entropy model when absent.
    #[arg(long)]
    t_hat: Option<String>,
    /// Reweight-trained checkpoint to revise; trained from scratch when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    /// Test set; scored against its clean labels.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct Report {
    /// Experiment output directory to read.
    dir: PathBuf,
}

/// Bad invocations exit 1, failures while running exit 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<labelnoise_core::Error> for Failure {
    fn from(e: labelnoise_core::Error) -> Self {
        Self::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Outcome {
    let config = load_config(&cli.shared)?;
    match cli.command {
        Command::GenData(a) => gen_data(&cli.shared, &config, a),
        Command::Inject(a) => inject(&cli.shared, &config, a),
        Command::Train(a) => train_cmd(&cli.shared, &config, a),
        Command::EstimateT(a) => estimate_t(&cli.shared, &config, a),
        Command::Revise(a) => revise(&cli.shared, &config, a),
        Command::Eval(a) => eval(a),
        Command::Experiment => experiment(config),
        Command::Report(a) => report(&cli.shared, a),
    }
}

fn load_config(shared: &Shared) -> Outcome<ExperimentConfig> {
    let mut config = match &shared.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Usage)?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::Usage(e.into()))?
        }
        None => ExperimentConfig::reference(),
    };
    if let Some(seed) = shared.seed {
        config.master_seed = seed;
    }
    if shared.no_validate {
        config.validate = false;
    }
    if shared.fail_fast {
        config.fail_fast = true;
    }
    if let Some(w) = shared.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        config.workers = Some(w);
    }
    if let Some(out) = &shared.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn matrix_arg(spec: &str, validate: bool) -> Outcome<TransitionMatrix> {
    let m = match presets::parse(spec) {
        Some(m) => m,
        None if Path::new(spec).exists() => TransitionMatrix::load(spec, false)?,
        None => return Err(usage(format!("{spec:?} is neither a matrix preset nor an existing file"))),
    };
    if validate {
        Ok(m.validate().map_err(labelnoise_core::Error::Violation)?)
    } else {
        Ok(m)
    }
}

/// Writes to `explicit`, else `<out>/<default_name>`, else stdout.
fn emit(shared: &Shared, explicit: Option<&Path>, default_name: &str, text: &str) -> Outcome {
    let path = match (explicit, &shared.out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => dir.join(default_name),
        (None, None) => {
            print!("{text}");
            return Ok(());
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn out_path(shared: &Shared, explicit: Option<&Path>, default_name: &str) -> Outcome<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => shared.out.clone().unwrap_or_else(|| PathBuf::from(".")).join(default_name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn gen_data(shared: &Shared, config: &ExperimentConfig, a: GenData) -> Outcome {
    let seed = shared.seed.unwrap_or(0);
    let spec = match (&shared.config, &config.dataset) {
        (Some(_), DatasetSource::Blobs { spec, .. }) => BlobSpec { seed: shared.seed.unwrap_or(spec.seed), ..spec.clone() },
        _ => match a.layout {
            Layout::Simplex => {
                if a.dim < a.classes {
                    return Err(usage("the simplex layout needs --dim >= --classes"));
                }
                BlobSpec::simplex(a.classes, a.dim, a.n_per_class, a.separation, a.sigma, seed)
            }
            Layout::Paired => {
                if a.classes % 2 != 0 || a.dim <= a.classes / 2 {
                    return Err(usage("the paired layout needs an even --classes and --dim > classes / 2"));
                }
                BlobSpec::paired(a.classes, a.dim, a.n_per_class, a.within, a.between, a.sigma, seed)
            }
        },
    };
    spec.check().map_err(|e| Failure::Usage(e.into()))?;
    let data = generate_blobs(&spec)?;
    emit(shared, a.output.as_deref(), "data.txt", &data.to_text())
}

fn inject(shared: &Shared, config: &ExperimentConfig, a: Inject) -> Outcome {
    let t = matrix_arg(&a.matrix, config.validate)?;
    let data = LabeledDataset::load(&a.data)?;
    if t.classes() != data.classes {
        return Err(usage(format!("matrix has {} classes, dataset has {}", t.classes(), data.classes)));
    }
    let noisy = inject_noise(&data, &t, config.master_seed)?;
    emit(shared, a.output.as_deref(), "noisy.txt", &noisy.to_text())
}

fn train_config(base: &TrainConfig, opts: &TrainOpts, seed: u64) -> Outcome<TrainConfig> {
    let mut c = base.clone().with_seed(seed);
    if let Some(v) = opts.epochs {
        c.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = opts.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = opts.patience {
        c.patience = v;
    }
    c.check().map_err(|e| Failure::Usage(e.into()))?;
    Ok(c)
}

fn model_config(config: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> MlpConfig {
    MlpConfig {
        input_dim: data.dim(),
        hidden_dims: config.model.hidden_dims.clone(),
        classes: data.classes,
        dropout_rate: config.model.dropout_rate,
        seed,
    }
}

fn noisy_split(config: &ExperimentConfig, path: &Path) -> Outcome<(LabeledDataset, LabeledDataset)> {
    let data = LabeledDataset::load(path)?;
    if data.noisy_labels.is_none() {
        return Err(usage(format!("{} has no noisy labels; run `inject` first", path.display())));
    }
    Ok(split(&data, 1.0 - config.validation_fraction, config.master_seed)?)
}

fn train_cmd(shared: &Shared, config: &ExperimentConfig, a: TrainCmd) -> Outcome {
    let seed = config.master_seed;
    let tc = train_config(&config.train, &a.opts, seed)?;
    let (tr, va) = noisy_split(config, &a.data)?;
    let loss = match (a.loss, &a.matrix) {
        (LossArg::Baseline, _) => LossSpec::baseline(),
        (LossArg::Forward | LossArg::Reweight, None) => return Err(usage("--matrix is required for the forward and reweight losses")),
        (kind, Some(m)) => {
            let t = matrix_arg(m, config.validate)?;
            if t.classes() != tr.classes {
                return Err(usage(format!("matrix has {} classes, dataset has {}", t.classes(), tr.classes)));
            }
            match kind {
                LossArg::Forward => LossSpec::forward_unchecked(t),
                _ => LossSpec::reweight_unchecked(t).with_beta_stop_gradient(config.beta_stop_gradient),
            }
        }
    };
    let params = init_mlp(&model_config(config, &tr, seed))?;
    let out = train(params, &loss, &tr, &va, &tc, None)?;
    let path = out_path(shared, a.model.as_deref(), "model.txt")?;
    out.params.save(&path)?;
    let hist = path.with_extension("history.csv");
    fs::write(&hist, out.history.to_csv()).with_context(|| format!("writing {}", hist.display()))?;
    let best = out.history.best().expect("at least one epoch");
    println!(
        "loss={} best_epoch={} stop_epoch={} val_loss={:.6} val_acc={:.2}",
        loss.name(),
        out.history.best_epoch,
        out.history.stop_epoch,
        best.val_loss,
        best.val_acc
    );
    eprintln!("wrote {} and {}", path.display(), hist.display());
    Ok(())
}

fn anchor(config: &ExperimentConfig, percentile: Option<f64>, top_k: Option<usize>) -> AnchorConfig {
    AnchorConfig { percentile: percentile.unwrap_or(config.anchor.percentile), top_k: top_k.unwrap_or(config.anchor.top_k) }
}

fn estimate_t(shared: &Shared, config: &ExperimentConfig, a: EstimateT) -> Outcome {
    let params = MlpParams::load(&a.model)?;
    let data = LabeledDataset::load(&a.data)?;
    if data.dim() != params.config.input_dim {
        return Err(usage(format!("model expects {} features, dataset has {}", params.config.input_dim, data.dim())));
    }
    let t = estimate_transition(&params, &data, anchor(config, a.percentile, a.top_k))?;
    emit(shared, a.output.as_deref(), "t_hat.txt", &t.to_string())
}

fn revise(shared: &Shared, config: &ExperimentConfig, a: Revise) -> Outcome {
    let seed = config.master_seed;
    let (tr, va) = noisy_split(config, &a.data)?;
    let mode = match a.mode {
        ModeArg::Alpha => RevisionMode::Alpha { alpha: a.alpha.unwrap_or(config.alpha) },
        ModeArg::Softmax => RevisionMode::Softmax,
    };
    mode.check().map_err(|e| Failure::Usage(e.into()))?;
    let base = train_config(&config.train, &TrainOpts { epochs: None, batch_size: None, learning_rate: None, patience: None }, seed)?;
    let rcfg = train_config(&config.revision, &a.opts, seed)?;
    let mcfg = model_config(config, &tr, seed);

    let t_hat = match &a.t_hat {
        Some(s) => matrix_arg(s, false)?,
        None => {
            if a.model.is_some() {
                return Err(usage("--model needs --t-hat: the revision starts from the matrix that model was trained under"));
            }
            stage_estimate(&tr, &va, &mcfg, &base, config.anchor)?.1
        }
    };
    if t_hat.classes() != tr.classes {
        return Err(usage(format!("T̂ has {} classes, dataset has {}", t_hat.classes(), tr.classes)));
    }
    let start = match &a.model {
        Some(p) => MlpParams::load(p)?,
        None => stage_reweight(&t_hat, &tr, &va, &mcfg, &base, config.beta_stop_gradient)?.params,
    };
    let (params, delta, t_final, history) = stage_revise(start, &t_hat, mode, &tr, &va, &rcfg, config.beta_stop_gradient)?;

    let dir = shared.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    params.save(dir.join("revised_model.txt"))?;
    for (name, text) in [
        ("t_hat.txt", t_hat.to_string()),
        ("delta.txt", format_matrix(&delta)),
        ("t_final.txt", format_matrix(&t_final)),
        ("revision_history.csv", history.to_csv()),
    ] {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("mode={} revision_learning_rate={}", mode.name(), rcfg.learning_rate);
    print!("{}", format_matrix(&t_final));
    eprintln!("wrote revised_model.txt, t_hat.txt, delta.txt, t_final.txt, revision_history.csv under {}", dir.display());
    Ok(())
}

fn eval(a: Eval) -> Outcome {
    let params = MlpParams::load(&a.model)?;
    let data = LabeledDataset::load(&a.data)?;
    if data.dim() != params.config.input_dim || data.classes != params.config.classes {
        return Err(usage("model and dataset disagree on features or classes"));
    }
    let ev = evaluate(&params, &data, &LossSpec::baseline())?;
    println!("test_loss={} test_acc={}", ev.loss, ev.accuracy_percent);
    Ok(())
}

fn experiment(config: ExperimentConfig) -> Outcome {
    config.check().map_err(|e| Failure::Usage(e.into()))?;
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let run = run_experiment(&config)?;
    for f in &run.failures {
        eprintln!("trial failed: {} seed {}: {}", f.method, f.seed, f.message);
    }
    if run.results.is_empty() {
        return Err(Failure::Runtime(anyhow!("every trial failed")));
    }
    let summary = aggregate(&run.results, run.true_t.as_ref())?;
    let files = write_report(&dir, &run.results, &summary, run.true_t.as_ref(), &run.failures)?;
    let meta = dir.join("config.toml");
    fs::write(&meta, config.metadata()).with_context(|| format!("writing {}", meta.display()))?;
    print!("{}", format_summary_csv(&summary));
    eprintln!("wrote {} files under {}", files.len() + 1, dir.display());
    Ok(())
}

fn report(shared: &Shared, a: Report) -> Outcome {
    let (results, reference) = load_results(&a.dir)?;
    if results.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} has no trial rows", a.dir.join("trials.csv").display())));
    }
    let summary = aggregate(&results, reference.as_ref())?;
    let dir = shared.out.clone().unwrap_or(a.dir);
    write_report(&dir, &results, &summary, reference.as_ref(), &[])?;
    print!("{}", format_summary_csv(&summary));
    Ok(())
}
