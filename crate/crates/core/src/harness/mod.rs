//! Multi-seed experiments: per-trial splits, method runs, aggregation and
//! report files.

mod boxplot;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_blobs, inject_noise, split, BlobSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::{init_mlp, MlpConfig, MlpParams};
use crate::tensor::Tensor;
use crate::trainer::{
    estimate_transition, evaluate, stage_reweight, stage_revise, train, AnchorConfig, TrainConfig, TrainHistory,
    PUBLISHED_REVISION_LEARNING_RATE,
};
use crate::transition::{mean_matrix, presets, rre, RevisionMode, TransitionMatrix, DEFAULT_ALPHA};

pub use boxplot::{box_stats, render_boxplot, BoxStats, CANVAS_HEIGHT, CANVAS_WIDTH};
pub use report::{aggregate, format_summary_csv, format_trials_csv, load_results, parse_trials_csv, write_report, MethodSummary, ExperimentSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Forward,
    Reweight,
    RevisionAlpha,
    RevisionSoftmax,
    AnchorEstimate,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Self::Baseline, Self::Forward, Self::Reweight, Self::RevisionAlpha, Self::RevisionSoftmax, Self::AnchorEstimate];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Forward => "forward",
            Self::Reweight => "reweight",
            Self::RevisionAlpha => "revision_alpha",
            Self::RevisionSoftmax => "revision_softmax",
            Self::AnchorEstimate => "anchor_estimate",
        }
    }

    /// Whether the method produces a transition matrix estimate.
    pub fn estimates_matrix(self) -> bool {
        matches!(self, Self::RevisionAlpha | Self::RevisionSoftmax | Self::AnchorEstimate)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::invalid("method", format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Synthetic blobs. The clean test set is drawn from the same recipe
    /// with a shifted seed and `test_per_class` samples per class.
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
        test_per_class: usize,
    },
    /// A noisy training file and a clean test file in the dataset format.
    Files { train: PathBuf, test: PathBuf },
}

/// Which matrix the forward and reweight methods correct with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSource {
    /// The true matrix when one is configured, else the anchor estimate.
    #[default]
    Truth,
    Estimate,
}

/// The T̂ that seeds the revision stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionSeed {
    /// Element-wise mean of the per-trial anchor estimates.
    #[default]
    Averaged,
    PerTrial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let desk = MlpConfig::desk(1, 2, 0);
        Self { hidden_dims: desk.hidden_dims, dropout_rate: desk.dropout_rate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset label written to every result row.
    pub name: String,
    pub dataset: DatasetSource,
    /// True transition matrix: a preset such as `circulant:0.3` or a matrix
    /// file path. Blobs are corrupted with it; file datasets use it for
    /// scoring only.
    pub true_t: Option<String>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub master_seed: u64,
    pub validation_fraction: f64,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub revision: TrainConfig,
    pub anchor: AnchorConfig,
    pub alpha: f64,
    pub correction: CorrectionSource,
    pub revision_seed: RevisionSeed,
    /// Hold the classifier posterior inside β constant when training with
    /// the reweighted and revision losses.
    pub beta_stop_gradient: bool,
    /// Row-normalize alpha-revised matrices before they are scored and
    /// reported. Off by default, since the ReLU output is compared as is.
    pub renormalize_alpha: bool,
    /// Check the true matrix is row-stochastic before use.
    pub validate: bool,
    pub fail_fast: bool,
    /// Worker threads for trials; `None` uses every core.
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ExperimentConfig {
    /// The reference synthetic benchmark: four classes in 16 dimensions,
    /// 10,000 training samples under 0.3 circulant noise, five trials.
    pub fn reference() -> Self {
        Self {
            name: "blobs4_circulant0.3".into(),
            dataset: DatasetSource::Blobs { spec: BlobSpec::paired(4, 16, 2500, 1.5, 6.0, 1.0, 7), test_per_class: 1000 },
            true_t: Some("circulant:0.3".into()),
            methods: Method::ALL.to_vec(),
            trials: 5,
            master_seed: 0,
            validation_fraction: 0.2,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            revision: TrainConfig::revision(),
            anchor: AnchorConfig::default(),
            alpha: DEFAULT_ALPHA,
            correction: CorrectionSource::Truth,
            revision_seed: RevisionSeed::Averaged,
            beta_stop_gradient: true,
            renormalize_alpha: false,
            validate: true,
            fail_fast: false,
            workers: None,
            out: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("experiment config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("experiment config", "trials must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("experiment config", "no methods requested"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("experiment config", "validation_fraction must lie in (0, 1)"));
        }
        self.train.check()?;
        self.revision.check()?;
        RevisionMode::Alpha { alpha: self.alpha }.check()?;
        if let DatasetSource::Blobs { spec, test_per_class } = &self.dataset {
            spec.check()?;
            if *test_per_class == 0 {
                return Err(Error::invalid("experiment config", "test_per_class must be at least 1"));
            }
        }
        Ok(())
    }

    /// Resolves `true_t` to a matrix.
    pub fn true_matrix(&self) -> Result<Option<TransitionMatrix>> {
        let Some(src) = &self.true_t else { return Ok(None) };
        let m = match presets::parse(src) {
            Some(m) => m,
            None => TransitionMatrix::load(src, false)?,
        };
        if self.validate {
            m.validate().map(Some).map_err(Error::Violation)
        } else {
            Ok(Some(m))
        }
    }

    /// The noisy training pool and clean test set.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetSource::Blobs { spec, test_per_class } => {
                let clean = generate_blobs(spec)?;
                let noisy = match self.true_matrix()? {
                    Some(t) => inject_noise(&clean, &t, self.master_seed)?,
                    None => {
                        let labels = clean.clean_labels.clone();
                        LabeledDataset { noisy_labels: Some(labels), ..clean }
                    }
                };
                let test_spec = BlobSpec { n_per_class: *test_per_class, seed: spec.seed.wrapping_add(TEST_SEED_OFFSET), ..spec.clone() };
                Ok((noisy, generate_blobs(&test_spec)?))
            }
            DatasetSource::Files { train, test } => {
                let pool = LabeledDataset::load(train)?;
                pool.training_labels()?;
                Ok((pool, LabeledDataset::load(test)?))
            }
        }
    }

    fn model_config(&self, input_dim: usize, classes: usize, seed: u64) -> MlpConfig {
        MlpConfig { input_dim, hidden_dims: self.model.hidden_dims.clone(), classes, dropout_rate: self.model.dropout_rate, seed }
    }

    /// Seed of trial `index`.
    pub fn trial_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }

    /// Learning rates recorded alongside the outputs.
    pub fn metadata(&self) -> String {
        format!(
            "# revision learning rate in use: {}\n# published revision learning rate: {}\n{}",
            self.revision.learning_rate,
            PUBLISHED_REVISION_LEARNING_RATE,
            self.to_toml()
        )
    }
}

/// Offset between the blob seed of the training pool and of the test set.
const TEST_SEED_OFFSET: u64 = 0x5EED_7E57;

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub method: Method,
    pub dataset: String,
    pub seed: u64,
    pub test_loss: f64,
    pub test_accuracy_percent: f64,
    pub rre: Option<f64>,
    pub wall_time_seconds: f64,
    pub matrix: Option<Tensor>,
    pub history: Option<TrainHistory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialFailure {
    pub method: Method,
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentRun {
    /// Ordered by method, then seed.
    pub results: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    pub true_t: Option<TransitionMatrix>,
    /// Element-wise mean of the per-trial anchor estimates, when computed.
    pub mean_anchor: Option<Tensor>,
}

/// Per-trial state carried from the estimation phase to the second phase.
struct Trial {
    seed: u64,
    train: LabeledDataset,
    val: LabeledDataset,
    stage1: Result<(MlpParams, TrainHistory, f64)>,
    t_hat: Option<TransitionMatrix>,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    test: &'a LabeledDataset,
    true_t: Option<&'a TransitionMatrix>,
    input_dim: usize,
    classes: usize,
}

impl Context<'_> {
    fn score(&self, method: Method, seed: u64, params: &MlpParams, elapsed: f64, matrix: Option<Tensor>, history: Option<TrainHistory>) -> Result<TrialResult> {
        let ev = evaluate(params, self.test, &LossSpec::baseline())?;
        let rre = match (self.true_t, &matrix) {
            (Some(t), Some(m)) => Some(rre(t.entries(), m)?),
            _ => None,
        };
        Ok(TrialResult {
            method,
            dataset: self.config.name.clone(),
            seed,
            test_loss: ev.loss,
            test_accuracy_percent: ev.accuracy_percent,
            rre,
            wall_time_seconds: elapsed,
            matrix,
            history,
        })
    }

    fn wants(&self, m: Method) -> bool {
        self.config.methods.contains(&m)
    }

    fn needs_estimate(&self) -> bool {
        let c = self.config;
        let correction_needs = (self.wants(Method::Forward) || self.wants(Method::Reweight))
            && (c.correction == CorrectionSource::Estimate || self.true_t.is_none());
        self.wants(Method::AnchorEstimate) || self.wants(Method::RevisionAlpha) || self.wants(Method::RevisionSoftmax) || correction_needs
    }

    /// Stage 1 on one split: the baseline model and its anchor estimate.
    fn phase_one(&self, index: usize, pool: &LabeledDataset) -> Result<Trial> {
        let c = self.config;
        let seed = c.trial_seed(index);
        let (train_set, val) = split(pool, 1.0 - c.validation_fraction, seed)?;
        let mut trial = Trial { seed, train: train_set, val, stage1: Err(Error::invalid("stage 1", "not run")), t_hat: None };
        if !(self.wants(Method::Baseline) || self.needs_estimate()) {
            return Ok(trial);
        }
        let start = Instant::now();
        let model = self.model_config(seed);
        let cfg = c.train.clone().with_seed(seed);
        let outcome = init_mlp(&model)
            .and_then(|p| train(p, &LossSpec::baseline(), &trial.train, &trial.val, &cfg, None))
            .map_err(|e| e.in_stage("stage 1 (estimate)"));
        trial.stage1 = outcome.map(|o| (o.params, o.history, start.elapsed().as_secs_f64()));
        if let (Ok((params, _, _)), true) = (&trial.stage1, self.needs_estimate()) {
            trial.t_hat = Some(estimate_transition(params, &trial.train, c.anchor).map_err(|e| e.in_stage("stage 1 (estimate)"))?);
        }
        Ok(trial)
    }

    fn model_config(&self, seed: u64) -> MlpConfig {
        self.config.model_config(self.input_dim, self.classes, seed)
    }

    /// Remaining methods for one trial, in method order.
    fn phase_two(&self, trial: &Trial, mean_anchor: Option<&TransitionMatrix>) -> Vec<std::result::Result<TrialResult, TrialFailure>> {
        let c = self.config;
        let seed = trial.seed;
        let fail = |method: Method, e: &Error| TrialFailure { method, seed, message: e.to_string() };
        let mut out = Vec::new();
        let stage1 = trial.stage1.as_ref();

        let estimate = || -> Result<TransitionMatrix> {
            match &trial.stage1 {
                Err(e) => Err(Error::invalid("stage 1", e.to_string())),
                Ok(_) => trial.t_hat.clone().ok_or_else(|| Error::invalid("stage 1", "no anchor estimate")),
            }
        };
        let correction = || -> Result<TransitionMatrix> {
            match (c.correction, self.true_t) {
                (CorrectionSource::Truth, Some(t)) => Ok(t.clone()),
                _ => estimate(),
            }
        };
        let revision_seed = || -> Result<TransitionMatrix> {
            match (c.revision_seed, mean_anchor) {
                (RevisionSeed::Averaged, Some(m)) => Ok(m.clone()),
                _ => estimate(),
            }
        };

        if self.wants(Method::Baseline) {
            out.push(match stage1 {
                Ok((params, history, elapsed)) => self.score(Method::Baseline, seed, params, *elapsed, None, Some(history.clone())).map_err(|e| fail(Method::Baseline, &e)),
                Err(e) => Err(fail(Method::Baseline, e)),
            });
        }

        let fresh = self.model_config(seed.wrapping_add(1));
        let cfg = c.train.clone().with_seed(seed);
        let mut reweight_model: Option<(TransitionMatrix, MlpParams, f64)> = None;
        for method in [Method::Forward, Method::Reweight] {
            if !self.wants(method) {
                continue;
            }
            let start = Instant::now();
            let run = || -> Result<_> {
                let t = correction()?;
                let loss = match method {
                    Method::Forward => LossSpec::forward_unchecked(t.clone()),
                    _ => LossSpec::reweight_unchecked(t.clone()).with_beta_stop_gradient(c.beta_stop_gradient),
                };
                let o = train(init_mlp(&fresh)?, &loss, &trial.train, &trial.val, &cfg, None)?;
                Ok((t, o))
            };
            out.push(match run() {
                Ok((t, o)) => {
                    let elapsed = start.elapsed().as_secs_f64();
                    if method == Method::Reweight {
                        reweight_model = Some((t, o.params.clone(), elapsed));
                    }
                    self.score(method, seed, &o.params, elapsed, None, Some(o.history)).map_err(|e| fail(method, &e))
                }
                Err(e) => Err(fail(method, &e)),
            });
        }

        let revisions: Vec<(Method, RevisionMode)> = [
            (Method::RevisionAlpha, RevisionMode::Alpha { alpha: c.alpha }),
            (Method::RevisionSoftmax, RevisionMode::Softmax),
        ]
        .into_iter()
        .filter(|(m, _)| self.wants(*m))
        .collect();
        if !revisions.is_empty() {
            let start = Instant::now();
            let stage2 = revision_seed().and_then(|t_hat| {
                // The reweight model doubles as Stage 2 when it was trained
                // under the same matrix.
                match &reweight_model {
                    Some((t, params, elapsed)) if t == &t_hat => Ok((t_hat, params.clone(), *elapsed)),
                    _ => {
                        let s = stage_reweight(&t_hat, &trial.train, &trial.val, &self.model_config(seed), &cfg, c.beta_stop_gradient)?;
                        Ok((t_hat, s.params, start.elapsed().as_secs_f64()))
                    }
                }
            });
            for (method, mode) in revisions {
                let start = Instant::now();
                let result = stage2.as_ref().map_err(|e| Error::invalid("stage 2", e.to_string())).and_then(|(t_hat, params, s2_time)| {
                    let rcfg = c.revision.clone().with_seed(seed);
                    let (p, _, mut t_final, h) = stage_revise(params.clone(), t_hat, mode, &trial.train, &trial.val, &rcfg, c.beta_stop_gradient)?;
                    if c.renormalize_alpha && method == Method::RevisionAlpha {
                        t_final = TransitionMatrix::new(t_final)?.row_normalized().into_entries();
                    }
                    self.score(method, seed, &p, s2_time + start.elapsed().as_secs_f64(), Some(t_final), Some(h))
                });
                out.push(result.map_err(|e| fail(method, &e)));
            }
        }

        if self.wants(Method::AnchorEstimate) {
            out.push(match (stage1, estimate()) {
                (Ok((params, history, elapsed)), Ok(t)) => self
                    .score(Method::AnchorEstimate, seed, params, *elapsed, Some(t.into_entries()), Some(history.clone()))
                    .map_err(|e| fail(Method::AnchorEstimate, &e)),
                (_, Err(e)) => Err(fail(Method::AnchorEstimate, &e)),
                (Err(e), _) => Err(fail(Method::AnchorEstimate, e)),
            });
        }
        out
    }
}

/// Runs every requested method for every trial.
///
/// Trials run in parallel on up to `config.workers` threads; results come
/// back ordered by method and seed regardless of scheduling. A failing
/// method is recorded in [`ExperimentRun::failures`] unless `fail_fast` is
/// set, in which case the first failure (in method/seed order) is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config.check()?;
    let true_t = config.true_matrix()?;
    let (pool, test) = config.load_data()?;
    if pool.classes != test.classes || pool.dim() != test.dim() {
        return Err(Error::invalid("dataset", "training and test sets disagree on classes or dimension"));
    }
    if let Some(t) = &true_t {
        if t.classes() != pool.classes {
            return Err(Error::invalid("true_t", format!("{} classes, dataset has {}", t.classes(), pool.classes)));
        }
    }
    let ctx = Context { config, test: &test, true_t: true_t.as_ref(), input_dim: pool.dim(), classes: pool.classes };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w.max(1));
    }
    let workers = builder.build().map_err(|e| Error::invalid("workers", e.to_string()))?;

    let trials: Vec<Trial> =
        workers.install(|| (0..config.trials).into_par_iter().map(|i| ctx.phase_one(i, &pool)).collect::<Result<Vec<_>>>())?;

    let estimates: Vec<Tensor> = trials.iter().filter_map(|t| t.t_hat.as_ref().map(|m| m.entries().clone())).collect();
    let mean_anchor = if estimates.is_empty() { None } else { Some(mean_matrix(&estimates)?) };
    let mean_anchor_t = mean_anchor.clone().map(TransitionMatrix::new).transpose()?;

    let per_trial: Vec<Vec<_>> = workers.install(|| trials.par_iter().map(|t| ctx.phase_two(t, mean_anchor_t.as_ref())).collect());

    let mut run = ExperimentRun { true_t, mean_anchor, ..Default::default() };
    for r in per_trial.into_iter().flatten() {
        match r {
            Ok(r) => run.results.push(r),
            Err(f) => run.failures.push(f),
        }
    }
    run.results.sort_by_key(|r| (r.method, r.seed));
    run.failures.sort_by_key(|f| (f.method, f.seed));
    if config.fail_fast {
        if let Some(f) = run.failures.first() {
            return Err(Error::invalid("trial", format!("{} seed {}: {}", f.method, f.seed, f.message)));
        }
    }
    Ok(run)
}
