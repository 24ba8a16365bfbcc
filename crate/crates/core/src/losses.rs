//! Training objectives under class-conditional label noise.
//!
//! Every loss takes pre-softmax logits, applies a row softmax to obtain the
//! clean-class posterior `g(x)`, and reduces over the batch with a mean.
//! Probabilities are clamped to [`LOG_FLOOR`] before any log.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LOG_FLOOR};
use crate::error::{Error, GradError, Result};
use crate::transition::{effective_matrix_var, RevisionMode, TransitionMatrix};

/// Mean categorical cross-entropy of `softmax(logits)` against `labels`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let g = tape.row_softmax(logits)?;
    let picked = tape.gather_per_row(g, labels)?;
    let safe = tape.clamp_min(picked, LOG_FLOOR)?;
    let log = tape.log(safe)?;
    let mean = tape.mean(log)?;
    Ok(tape.scalar_mul(mean, -1.0)?)
}

/// Forward correction: cross-entropy of the noisy posterior `Tᵀ g(x)`.
///
/// `t` is a `c × c` matrix on the tape; row `i` of the batch posterior times
/// `t` is `Tᵀ g(x_i)` laid out as a row.
pub fn forward_corrected_loss(tape: &mut Tape, logits: Var, labels: &[usize], t: Var) -> Result<Var> {
    let g = tape.row_softmax(logits)?;
    let noisy = tape.matmul(g, t)?;
    let picked = tape.gather_per_row(noisy, labels)?;
    let safe = tape.clamp_min(picked, LOG_FLOOR)?;
    let log = tape.log(safe)?;
    let mean = tape.mean(log)?;
    Ok(tape.scalar_mul(mean, -1.0)?)
}

/// Importance reweighting: `mean(β · −log g_ȳ)` with
/// `β = g_ȳ / (Tᵀ g)_ȳ`.
///
/// With `beta_stop_gradient` the posterior inside β is held constant, so the
/// classifier is trained by the weighted log term alone while `t` (when it is
/// trainable) still receives gradient through the denominator.
pub fn reweighted_loss(tape: &mut Tape, logits: Var, labels: &[usize], t: Var, beta_stop_gradient: bool) -> Result<Var> {
    let g = tape.row_softmax(logits)?;
    let clean = tape.gather_per_row(g, labels)?;
    let (g_beta, clean_beta) = if beta_stop_gradient {
        let g_const = tape.detach(g)?;
        (g_const, tape.detach(clean)?)
    } else {
        (g, clean)
    };
    let noisy_all = tape.matmul(g_beta, t)?;
    let noisy = tape.gather_per_row(noisy_all, labels)?;
    let beta = tape.div(clean_beta, noisy).map_err(|e| match e {
        GradError::Domain { index, .. } => Error::ZeroDenominator { sample: index },
        other => other.into(),
    })?;
    let safe = tape.clamp_min(clean, LOG_FLOOR)?;
    let log = tape.log(safe)?;
    let nll = tape.scalar_mul(log, -1.0)?;
    let weighted = tape.mul(beta, nll)?;
    Ok(tape.mean(weighted)?)
}

/// Reweighted loss under the revised matrix built from `t_hat` and the
/// trainable slack `delta`.
pub fn revision_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    t_hat: Var,
    delta: Var,
    mode: RevisionMode,
    beta_stop_gradient: bool,
) -> Result<Var> {
    let t = effective_matrix_var(tape, t_hat, delta, mode)?;
    reweighted_loss(tape, logits, labels, t, beta_stop_gradient)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    BaselineCe,
    Forward { matrix: TransitionMatrix },
    Reweight { matrix: TransitionMatrix },
    Revision { t_hat: TransitionMatrix, mode: RevisionMode },
}

/// A training objective plus the matrices it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub beta_stop_gradient: bool,
}

impl LossSpec {
    pub fn baseline() -> Self {
        Self { kind: LossKind::BaselineCe, beta_stop_gradient: false }
    }

    /// Forward correction under `t`, which must be row-stochastic.
    pub fn forward(t: TransitionMatrix) -> Result<Self> {
        Ok(Self::forward_unchecked(validated(t)?))
    }

    /// Forward correction without the row-stochastic check.
    pub fn forward_unchecked(t: TransitionMatrix) -> Self {
        Self { kind: LossKind::Forward { matrix: t }, beta_stop_gradient: false }
    }

    pub fn reweight(t: TransitionMatrix) -> Result<Self> {
        Ok(Self::reweight_unchecked(validated(t)?))
    }

    pub fn reweight_unchecked(t: TransitionMatrix) -> Self {
        Self { kind: LossKind::Reweight { matrix: t }, beta_stop_gradient: false }
    }

    pub fn revision(t_hat: TransitionMatrix, mode: RevisionMode) -> Result<Self> {
        mode.check()?;
        Ok(Self { kind: LossKind::Revision { t_hat, mode }, beta_stop_gradient: false })
    }

    pub fn with_beta_stop_gradient(mut self, on: bool) -> Self {
        self.beta_stop_gradient = on;
        self
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            LossKind::BaselineCe => "baseline_ce",
            LossKind::Forward { .. } => "forward",
            LossKind::Reweight { .. } => "reweight",
            LossKind::Revision { mode: RevisionMode::Alpha { .. }, .. } => "revision_alpha",
            LossKind::Revision { mode: RevisionMode::Softmax, .. } => "revision_softmax",
        }
    }

    /// Class count implied by the matrix, if the loss carries one.
    pub fn classes(&self) -> Option<usize> {
        match &self.kind {
            LossKind::BaselineCe => None,
            LossKind::Forward { matrix } | LossKind::Reweight { matrix } => Some(matrix.classes()),
            LossKind::Revision { t_hat, .. } => Some(t_hat.classes()),
        }
    }

    pub fn needs_slack(&self) -> bool {
        matches!(self.kind, LossKind::Revision { .. })
    }

    /// Records this loss for a batch. Revision losses need the slack
    /// matrix as a var on the same tape.
    pub fn record(&self, tape: &mut Tape, logits: Var, labels: &[usize], delta: Option<Var>) -> Result<Var> {
        match &self.kind {
            LossKind::BaselineCe => ce_loss(tape, logits, labels),
            LossKind::Forward { matrix } => {
                let t = tape.constant(matrix.entries().clone());
                forward_corrected_loss(tape, logits, labels, t)
            }
            LossKind::Reweight { matrix } => {
                let t = tape.constant(matrix.entries().clone());
                reweighted_loss(tape, logits, labels, t, self.beta_stop_gradient)
            }
            LossKind::Revision { t_hat, mode } => {
                let delta = delta.ok_or_else(|| Error::invalid("revision loss", "slack matrix was not supplied"))?;
                let t = tape.constant(t_hat.entries().clone());
                revision_loss(tape, logits, labels, t, delta, *mode, self.beta_stop_gradient)
            }
        }
    }
}

fn validated(t: TransitionMatrix) -> Result<TransitionMatrix> {
    if t.is_validated() {
        Ok(t)
    } else {
        t.validate().map_err(Error::Violation)
    }
}
