//! Mini-batch Adam training with early stopping, evaluation, and the
//! three-stage T-Revision pipeline.

mod adam;
mod revision;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{LeafId, Tape};
use crate::datagen::{rng, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::MlpParams;
use crate::tensor::Tensor;

pub use adam::{AdamConfig, AdamState};
pub use revision::{
    estimate_transition, revision_pipeline, stage_estimate, stage_reweight, stage_revise, AnchorConfig, RevisionOutcome,
    RevisionSettings, StageOutcome,
};

/// Rows per chunk when evaluating a whole dataset.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    /// Apply the model's dropout during training.
    pub dropout: bool,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_epsilon() -> f64 {
    AdamConfig::default().epsilon
}

impl Default for TrainConfig {
    /// Learning rate 5e-4, batch 32, up to 100 epochs, patience 10.
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-4,
            patience: 10,
            seed: 0,
            dropout: true,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

/// Learning rate used by the original T-Revision fine-tuning stage. It barely
/// moves a small MLP, so [`TrainConfig::revision`] defaults to
/// [`DESK_REVISION_LEARNING_RATE`] instead.
pub const PUBLISHED_REVISION_LEARNING_RATE: f64 = 5e-7;
pub const DESK_REVISION_LEARNING_RATE: f64 = 1e-4;

impl TrainConfig {
    /// Fine-tuning defaults for the slack-matrix stage: batch 256 at the
    /// desk-scale learning rate.
    pub fn revision() -> Self {
        Self { batch_size: 256, learning_rate: DESK_REVISION_LEARNING_RATE, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("train config", "epochs, batch_size and patience must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train config", format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train config", "Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Top-1 accuracy (percent) against the validation set's noisy labels.
    pub val_acc: f64,
    pub min_batch_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// Smallest single-batch loss seen during training.
    pub fn min_batch_loss(&self) -> f64 {
        self.epochs.iter().map(|r| r.min_batch_loss).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve for `patience`
/// consecutive observations.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub delta: Option<Tensor>,
    pub history: TrainHistory,
}

/// Trains `params` (and the slack matrix, for revision losses) on the noisy
/// labels of `train_set`, early-stopping on the loss over `val_set`.
///
/// Returns the snapshot from the epoch with the lowest validation loss.
pub fn train(
    params: MlpParams,
    loss: &LossSpec,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
    delta: Option<Tensor>,
) -> Result<TrainOutcome> {
    config.check()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("dataset", "training and validation sets must be non-empty"));
    }
    if loss.needs_slack() != delta.is_some() {
        return Err(Error::invalid("train", "a slack matrix is required exactly when training a revision loss"));
    }
    if let Some(c) = loss.classes() {
        if c != params.config.classes {
            return Err(Error::invalid("train", format!("loss has {c} classes, model has {}", params.config.classes)));
        }
    }
    let labels = train_set.training_labels()?;
    let val_labels = val_set.training_labels()?;

    let mut params = params;
    let mut delta = delta;
    let n_params = params.tensor_count();
    let delta_id = LeafId(n_params);
    let mut adam = AdamState::new(config.adam(), params.tensors().into_iter().chain(delta.as_ref()));
    let mut rng = rng(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (params.clone(), delta.clone());
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut min_batch = f64::INFINITY;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let dropout_seed: u64 = rng.random();

            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let d = delta.as_ref().map(|d| tape.leaf(delta_id, d.clone()));
            let xv = tape.constant(x);
            let logits = params.record_forward(&mut tape, &vars, xv, config.dropout, dropout_seed)?;
            let l = loss.record(&mut tape, logits, &y, d)?;
            let value = tape.value(l)?.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            total += value * chunk.len() as f64;
            min_batch = min_batch.min(value);

            let mut grads = tape.backward(l)?;
            let mut owned: Vec<Tensor> =
                (0..n_params).map(|k| grads.remove(MlpParams::leaf_id(k)).expect("every parameter is a leaf")).collect();
            if delta.is_some() {
                owned.push(grads.remove(delta_id).expect("slack is a leaf"));
            }
            let grad_refs: Vec<&Tensor> = owned.iter().collect();
            let mut targets = params.tensors_mut();
            if let Some(d) = delta.as_mut() {
                targets.push(d);
            }
            adam.step(&mut targets, &grad_refs);
        }

        let (val_loss, val_acc) = loss_and_accuracy(&params, val_set, val_labels, loss, delta.as_ref())?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_acc,
            min_batch_loss: min_batch,
        });
        history.stop_epoch = epoch;
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = (params.clone(), delta.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    history.best_epoch = stopper.best_epoch();
    let (params, delta) = best;
    Ok(TrainOutcome { params, delta, history })
}

/// Mean loss and top-1 accuracy (percent) of a model against `labels`,
/// in evaluation mode.
fn loss_and_accuracy(params: &MlpParams, data: &LabeledDataset, labels: &[usize], loss: &LossSpec, delta: Option<&Tensor>) -> Result<(f64, f64)> {
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = data.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let d = delta.map(|d| tape.constant(d.clone()));
        let xv = tape.constant(x);
        let logits = params.record_forward(&mut tape, &vars, xv, false, 0)?;
        let l = loss.record(&mut tape, logits, &y, d)?;
        loss_sum += tape.value(l)?.item() * chunk.len() as f64;
        let pred = tape.value(logits)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / n as f64, 100.0 * correct as f64 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy_percent: f64,
}

/// Loss and top-1 accuracy against the clean labels. Predictions are the
/// argmax of the posterior with ties going to the lowest class index.
pub fn evaluate(params: &MlpParams, test_set: &LabeledDataset, loss: &LossSpec) -> Result<Evaluation> {
    evaluate_with_slack(params, test_set, loss, None)
}

/// [`evaluate`] for revision losses, which also need the trained slack.
pub fn evaluate_with_slack(params: &MlpParams, test_set: &LabeledDataset, loss: &LossSpec, delta: Option<&Tensor>) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::invalid("test set", "empty"));
    }
    let (loss, accuracy_percent) = loss_and_accuracy(params, test_set, &test_set.clean_labels, loss, delta)?;
    Ok(Evaluation { loss, accuracy_percent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_blobs, inject_noise, split, BlobSpec};
    use crate::model::{init_mlp, MlpConfig};
    use crate::transition::TransitionMatrix;

    #[test]
    fn stopping_rule_on_constructed_sequence() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 0.9), StopDecision::Improved);
        assert_eq!(s.observe(3, 0.95), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 2);
    }

    #[test]
    fn patience_counts_consecutive_misses() {
        let mut s = EarlyStopping::new(3);
        for (e, l) in [(1, 1.0), (2, 1.1), (3, 1.2)] {
            assert_ne!(s.observe(e, l), StopDecision::Stop);
        }
        assert_eq!(s.observe(4, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(5, 0.6), StopDecision::Continue);
    }

    #[test]
    fn accuracy_arithmetic() {
        // Zero weights predict class 0 everywhere.
        let cfg = MlpConfig { input_dim: 1, hidden_dims: vec![2], classes: 4, dropout_rate: 0.0, seed: 0 };
        let mut p = init_mlp(&cfg).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let d = LabeledDataset::new(Tensor::zeros(&[4, 1]), vec![0, 0, 0, 1], None, 4, "t").unwrap();
        assert_eq!(evaluate(&p, &d, &LossSpec::baseline()).unwrap().accuracy_percent, 75.0);
        let balanced = LabeledDataset::new(Tensor::zeros(&[8, 1]), vec![0, 1, 2, 3, 0, 1, 2, 3], None, 4, "t").unwrap();
        let ev = evaluate(&p, &balanced, &LossSpec::baseline()).unwrap();
        assert_eq!(ev.accuracy_percent, 25.0);
        assert!((ev.loss - 4f64.ln()).abs() < 1e-12);
        let all = LabeledDataset::new(Tensor::zeros(&[2, 1]), vec![0, 0], None, 4, "t").unwrap();
        assert_eq!(evaluate(&p, &all, &LossSpec::baseline()).unwrap().accuracy_percent, 100.0);
        let empty = LabeledDataset::new(Tensor::zeros(&[0, 1]), vec![], None, 4, "t").unwrap();
        assert!(evaluate(&p, &empty, &LossSpec::baseline()).is_err());
    }

    fn toy() -> (LabeledDataset, LabeledDataset) {
        let d = generate_blobs(&BlobSpec::simplex(3, 4, 60, 5.0, 1.0, 1)).unwrap();
        let d = inject_noise(&d, &TransitionMatrix::identity(3), 0).unwrap();
        split(&d, 0.8, 0).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (tr, va) = toy();
        let cfg = TrainConfig { epochs: 8, batch_size: 16, learning_rate: 5e-3, ..TrainConfig::default() };
        let p = init_mlp(&MlpConfig::desk(4, 3, 5)).unwrap();
        let a = train(p.clone(), &LossSpec::baseline(), &tr, &va, &cfg, None).unwrap();
        let b = train(p, &LossSpec::baseline(), &tr, &va, &cfg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let first = a.history.epochs[0].train_loss;
        assert!(a.history.best().unwrap().train_loss <= first);
        assert!(a.history.best_epoch <= a.history.stop_epoch);
    }

    #[test]
    fn training_needs_noisy_labels_and_data() {
        let d = generate_blobs(&BlobSpec::simplex(3, 4, 10, 5.0, 1.0, 1)).unwrap();
        let (tr, va) = split(&d, 0.8, 0).unwrap();
        let p = init_mlp(&MlpConfig::desk(4, 3, 5)).unwrap();
        assert!(train(p.clone(), &LossSpec::baseline(), &tr, &va, &TrainConfig::default(), None).is_err());
        let (tr, va) = toy();
        let empty = tr.subset(&[]);
        assert!(train(p, &LossSpec::baseline(), &empty, &va, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, val_acc: 90.0, min_batch_loss: 0.1 }],
            stop_epoch: 1,
            best_epoch: 1,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,val_acc\n1,0.5,0.25,90\n");
    }
}
