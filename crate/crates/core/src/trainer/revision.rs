use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::{init_mlp, MlpConfig, MlpParams};
use crate::tensor::Tensor;
use crate::transition::{effective_matrix, estimate_anchor, RevisionMode, TransitionMatrix};

use super::{train, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub percentile: f64,
    pub top_k: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { percentile: 97.0, top_k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevisionSettings {
    pub model: MlpConfig,
    pub base: TrainConfig,
    pub revision: TrainConfig,
    pub mode: RevisionMode,
    #[serde(default)]
    pub anchor: AnchorConfig,
    /// Hold the classifier posterior inside β constant in Stages 2 and 3.
    #[serde(default = "stop_gradient_default")]
    pub beta_stop_gradient: bool,
}

fn stop_gradient_default() -> bool {
    true
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub params: MlpParams,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct RevisionOutcome {
    pub params: MlpParams,
    pub t_hat: TransitionMatrix,
    pub delta: Tensor,
    pub t_final: Tensor,
    pub stage1: TrainHistory,
    pub stage2: TrainHistory,
    pub stage3: TrainHistory,
}

/// Anchor-point estimate from a trained model's posteriors on `data`.
pub fn estimate_transition(params: &MlpParams, data: &LabeledDataset, anchor: AnchorConfig) -> Result<TransitionMatrix> {
    let posteriors = params.predict_proba(&data.features)?;
    estimate_anchor(&posteriors, anchor.percentile, anchor.top_k)
}

/// Stage 1: cross-entropy on the noisy labels, then an anchor estimate of T
/// from the training split's posteriors.
pub fn stage_estimate(
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    model: &MlpConfig,
    config: &TrainConfig,
    anchor: AnchorConfig,
) -> Result<(StageOutcome, TransitionMatrix)> {
    let run = || -> Result<_> {
        let out = train(init_mlp(model)?, &LossSpec::baseline(), train_set, val_set, config, None)?;
        let t_hat = estimate_transition(&out.params, train_set, anchor)?;
        Ok((StageOutcome { params: out.params, history: out.history }, t_hat))
    };
    run().map_err(|e| e.in_stage("stage 1 (estimate)"))
}

/// Stage 2: a fresh model (seeded one past `model.seed`) trained with the
/// importance-reweighted loss under `t_hat`.
pub fn stage_reweight(
    t_hat: &TransitionMatrix,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    model: &MlpConfig,
    config: &TrainConfig,
    beta_stop_gradient: bool,
) -> Result<StageOutcome> {
    let run = || -> Result<_> {
        let fresh = MlpConfig { seed: model.seed.wrapping_add(1), ..model.clone() };
        let loss = LossSpec::reweight_unchecked(t_hat.clone()).with_beta_stop_gradient(beta_stop_gradient);
        let out = train(init_mlp(&fresh)?, &loss, train_set, val_set, config, None)?;
        Ok(StageOutcome { params: out.params, history: out.history })
    };
    run().map_err(|e| e.in_stage("stage 2 (reweight)"))
}

/// Stage 3: joint fine-tuning of the classifier and a zero-initialized
/// slack matrix. Returns the tuned params, the slack, the revised matrix and
/// the history.
pub fn stage_revise(
    params: MlpParams,
    t_hat: &TransitionMatrix,
    mode: RevisionMode,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
    beta_stop_gradient: bool,
) -> Result<(MlpParams, Tensor, Tensor, TrainHistory)> {
    let run = || -> Result<_> {
        let loss = LossSpec::revision(t_hat.clone(), mode)?.with_beta_stop_gradient(beta_stop_gradient);
        let c = t_hat.classes();
        let out = train(params, &loss, train_set, val_set, config, Some(Tensor::zeros(&[c, c])))?;
        let delta = out.delta.ok_or_else(|| Error::invalid("revision", "trainer dropped the slack matrix"))?;
        let t_final = effective_matrix(t_hat, &delta, mode)?;
        Ok((out.params, delta, t_final, out.history))
    };
    run().map_err(|e| e.in_stage("stage 3 (revise)"))
}

/// The full three-stage pipeline on one noisy train/validation split.
pub fn revision_pipeline(train_set: &LabeledDataset, val_set: &LabeledDataset, settings: &RevisionSettings) -> Result<RevisionOutcome> {
    settings.mode.check()?;
    let (s1, t_hat) = stage_estimate(train_set, val_set, &settings.model, &settings.base, settings.anchor)?;
    let s2 = stage_reweight(&t_hat, train_set, val_set, &settings.model, &settings.base, settings.beta_stop_gradient)?;
    let (params, delta, t_final, stage3) = stage_revise(s2.params, &t_hat, settings.mode, train_set, val_set, &settings.revision, settings.beta_stop_gradient)?;
    Ok(RevisionOutcome { params, t_hat, delta, t_final, stage1: s1.history, stage2: s2.history, stage3 })
}
