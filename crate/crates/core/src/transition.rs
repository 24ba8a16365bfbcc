//! Noise transition matrices: representation, validation, anchor-point
//! estimation, T-Revision transforms and reconstruction error.
//!
//! Entry `(i, j)` of a transition matrix is `P(noisy = j | clean = i)`, so a
//! valid matrix is row-stochastic.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, GradError, Result};
use crate::tensor::Tensor;

/// Allowed deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Default scale applied to the slack matrix in alpha mode.
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    entries: Tensor,
    validated: bool,
}

impl TransitionMatrix {
    /// Wraps a square matrix without validating it.
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 || entries.rows() != entries.cols() || entries.rows() == 0 {
            return Err(Error::invalid("transition matrix", format!("expected a non-empty square matrix, got {:?}", entries.shape())));
        }
        Ok(Self { entries, validated: false })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows))
    }

    pub fn identity(classes: usize) -> Self {
        Self { entries: Tensor::identity(classes), validated: true }
    }

    /// Each class keeps `1 - flip` of its mass and sends `flip` to the next
    /// class (cyclically).
    pub fn circulant(classes: usize, flip: f64) -> Self {
        let mut t = Tensor::zeros(&[classes, classes]);
        for i in 0..classes {
            t.set(i, i, 1.0 - flip);
            let next = (i + 1) % classes;
            let v = t.get(i, next) + flip;
            t.set(i, next, v);
        }
        Self { entries: t, validated: false }.validate().expect("circulant matrix is row-stochastic")
    }

    /// Each class keeps `1 - flip` of its mass and spreads `flip` evenly
    /// over the others.
    pub fn symmetric(classes: usize, flip: f64) -> Self {
        assert!(classes >= 2);
        let off = flip / (classes - 1) as f64;
        let mut t = Tensor::full(&[classes, classes], off);
        for i in 0..classes {
            t.set(i, i, 1.0 - flip);
        }
        Self { entries: t, validated: false }.validate().expect("symmetric matrix is row-stochastic")
    }

    pub fn classes(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn into_entries(self) -> Tensor {
        self.entries
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// Checks nonnegativity and unit row sums, reporting every violation.
    pub fn validate(mut self) -> Result<Self, ViolationReport> {
        let report = check(&self.entries);
        if report.is_empty() {
            self.validated = true;
            Ok(self)
        } else {
            Err(report)
        }
    }

    /// Scales every row to sum to 1. Rows that sum to zero are left alone.
    pub fn row_normalized(&self) -> Self {
        let c = self.classes();
        let mut t = self.entries.clone();
        for row in t.data_mut().chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        Self { entries: t, validated: false }
    }

    /// Parses `c` lines of `c` whitespace-separated numbers.
    pub fn parse(text: &str, validate: bool) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|e| Error::Parse { line: n + 1, message: format!("bad number {tok:?}: {e}") })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse { line: n + 1, message: format!("expected {} columns, found {}", first.len(), row.len()) });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() || rows.len() != rows[0].len() {
            return Err(Error::Parse { line: rows.len(), message: "matrix must be square and non-empty".into() });
        }
        let m = Self::new(Tensor::from_rows(&rows))?;
        if validate {
            m.validate().map_err(Error::Violation)
        } else {
            Ok(m)
        }
    }

    pub fn load(path: impl AsRef<Path>, validate: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, validate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, format_matrix(&self.entries)).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for TransitionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_matrix(&self.entries))
    }
}

/// Serializes a matrix in the text format read by [`TransitionMatrix::parse`].
pub fn format_matrix(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Entry { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Entry { row, col, value } => write!(f, "entry ({row}, {col}) = {value} is negative or not finite"),
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
        }
    }
}

/// Every cell and row that broke row-stochasticity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ViolationReport {}

fn check(t: &Tensor) -> ViolationReport {
    let c = t.cols();
    let mut violations = Vec::new();
    for i in 0..t.rows() {
        for j in 0..c {
            let v = t.get(i, j);
            if !(v >= 0.0) || !v.is_finite() {
                violations.push(Violation::Entry { row: i, col: j, value: v });
            }
        }
        let sum: f64 = t.row(i).iter().sum();
        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
            violations.push(Violation::RowSum { row: i, sum });
        }
    }
    ViolationReport { violations }
}

/// How the slack matrix is folded into the initial estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RevisionMode {
    /// `ReLU(T̂ + alpha·ΔT)`, rows not renormalized.
    Alpha { alpha: f64 },
    /// Row-wise softmax of `T̂ + ΔT`.
    Softmax,
}

impl RevisionMode {
    pub fn alpha() -> Self {
        Self::Alpha { alpha: DEFAULT_ALPHA }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Alpha { .. } => "alpha",
            Self::Softmax => "softmax",
        }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            Self::Alpha { alpha } if !(alpha > 0.0) => Err(Error::invalid("revision mode", format!("alpha must be positive, got {alpha}"))),
            _ => Ok(()),
        }
    }
}

/// Records the revised matrix on a tape so gradients reach `delta`.
pub fn effective_matrix_var(tape: &mut Tape, t_hat: Var, delta: Var, mode: RevisionMode) -> Result<Var, GradError> {
    match mode {
        RevisionMode::Alpha { alpha } => {
            let scaled = tape.scalar_mul(delta, alpha)?;
            let sum = tape.add(t_hat, scaled)?;
            tape.relu(sum)
        }
        RevisionMode::Softmax => {
            let sum = tape.add(t_hat, delta)?;
            tape.row_softmax(sum)
        }
    }
}

/// The matrix actually used by the revision loss for a given slack.
pub fn effective_matrix(t_hat: &TransitionMatrix, delta: &Tensor, mode: RevisionMode) -> Result<Tensor> {
    if delta.shape() != t_hat.entries().shape() {
        return Err(Error::invalid("slack matrix", format!("shape {:?} does not match {:?}", delta.shape(), t_hat.entries().shape())));
    }
    let mut tape = Tape::new();
    let t = tape.constant(t_hat.entries().clone());
    let d = tape.constant(delta.clone());
    let out = effective_matrix_var(&mut tape, t, d, mode)?;
    Ok(tape.value(out)?.clone())
}

/// Anchor-point estimate of the transition matrix from noisy-class posteriors.
///
/// For class `i`, samples are ranked by `posteriors[:, i]` from highest to
/// lowest. The sample sitting at `percentile` of that score distribution is
/// located (percentile 100 is the maximum), and the `top_k` samples centred
/// on it are averaged to give row `i`.
pub fn estimate_anchor(posteriors: &Tensor, percentile: f64, top_k: usize) -> Result<TransitionMatrix> {
    if posteriors.rank() != 2 {
        return Err(Error::invalid("posteriors", format!("expected a matrix, got {:?}", posteriors.shape())));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid("percentile", format!("{percentile} not in (0, 100]")));
    }
    if top_k == 0 {
        return Err(Error::invalid("top_k", "must be at least 1"));
    }
    let (n, c) = (posteriors.rows(), posteriors.cols());
    if n < top_k {
        return Err(Error::invalid("posteriors", format!("{n} samples but top_k = {top_k}")));
    }

    let from_top = ((1.0 - percentile / 100.0) * (n - 1) as f64).round() as usize;
    let start = from_top.saturating_sub((top_k - 1) / 2).min(n - top_k);

    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        order.sort_by(|&a, &b| posteriors.get(b, i).total_cmp(&posteriors.get(a, i)).then(a.cmp(&b)));
        for &s in &order[start..start + top_k] {
            for (j, &p) in posteriors.row(s).iter().enumerate() {
                let v = out.get(i, j) + p / top_k as f64;
                out.set(i, j, v);
            }
        }
    }
    TransitionMatrix::new(out)
}

/// Relative reconstruction error `‖a - b‖_F / ‖a‖_F`, with `a` the reference.
pub fn rre(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::invalid("rre", format!("shape {:?} vs {:?}", reference.shape(), estimate.shape())));
    }
    let norm = reference.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::invalid("rre", "reference matrix has zero norm"));
    }
    let diff = reference.zip_map(estimate, |a, b| a - b);
    Ok(diff.frobenius_norm() / norm)
}

/// Element-wise arithmetic mean of equally shaped matrices.
pub fn mean_matrix(estimates: &[Tensor]) -> Result<Tensor> {
    let first = estimates.first().ok_or_else(|| Error::invalid("mean_matrix", "no matrices given"))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in estimates {
        if m.shape() != first.shape() {
            return Err(Error::invalid("mean_matrix", format!("shape {:?} vs {:?}", m.shape(), first.shape())));
        }
        acc.add_assign(m);
    }
    let k = estimates.len() as f64;
    Ok(acc.map(|x| x / k))
}

/// Fixtures shared by tests and the CLI presets.
pub mod presets {
    use super::TransitionMatrix;

    /// 4-class circulant matrix with flip rate 0.3.
    pub fn circulant_03() -> TransitionMatrix {
        TransitionMatrix::circulant(4, 0.3)
    }

    /// 4-class symmetric matrix with flip rate 0.6.
    pub fn symmetric_06() -> TransitionMatrix {
        TransitionMatrix::symmetric(4, 0.6)
    }

    /// Published T-Revision-Alpha estimate for the 0.3 circulant noise.
    pub fn published_estimate_03() -> TransitionMatrix {
        TransitionMatrix::from_rows(&[
            [0.7005, 0.2867, 0.0058, 0.0069],
            [0.0015, 0.6970, 0.2991, 0.0023],
            [0.0054, 0.0, 0.7392, 0.2569],
            [0.2692, 0.0016, 0.0105, 0.7187],
        ])
        .unwrap()
    }

    /// Published T-Revision-Alpha estimate for the 0.6 symmetric noise.
    pub fn published_estimate_06() -> TransitionMatrix {
        TransitionMatrix::from_rows(&[
            [0.3967, 0.2016, 0.2038, 0.1978],
            [0.2021, 0.3967, 0.2001, 0.2011],
            [0.1970, 0.2006, 0.3995, 0.2029],
            [0.1962, 0.2008, 0.2016, 0.4014],
        ])
        .unwrap()
    }

    /// Parses presets of the form `circulant:0.3`, `symmetric:0.6` or
    /// `identity`, with an optional `@classes` suffix (default 4).
    pub fn parse(spec: &str) -> Option<TransitionMatrix> {
        let (body, classes) = match spec.split_once('@') {
            Some((b, c)) => (b, c.parse().ok()?),
            None => (spec, 4),
        };
        if classes < 2 {
            return None;
        }
        match body.split_once(':') {
            Some(("circulant", r)) => r.parse().ok().filter(|r| (0.0..=1.0).contains(r)).map(|r| TransitionMatrix::circulant(classes, r)),
            Some(("symmetric", r)) => r.parse().ok().filter(|r| (0.0..=1.0).contains(r)).map(|r| TransitionMatrix::symmetric(classes, r)),
            None if body == "identity" => Some(TransitionMatrix::identity(classes)),
            _ => None,
        }
    }
}
