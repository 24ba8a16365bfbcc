//! Synthetic Gaussian-blob datasets, class-conditional label flipping, and
//! the plain-text dataset format.
//!
//! All randomness comes from ChaCha8 seeded with a `u64`, so every output is
//! a pure function of its inputs and seed.
//!
//! Dataset file layout:
//!
//! ```text
//! n d c
//! clean,noisy,f1,...,fd      (n lines; noisy is an integer or `-`)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transition::TransitionMatrix;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `n × d` feature matrix.
    pub features: Tensor,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Option<Vec<usize>>,
    pub classes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(features: Tensor, clean_labels: Vec<usize>, noisy_labels: Option<Vec<usize>>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let d = Self { features, clean_labels, noisy_labels, classes, provenance: provenance.into() };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.features.rank() != 2 || self.features.rows() != self.clean_labels.len() {
            return Err(Error::invalid("dataset", format!("{:?} features for {} labels", self.features.shape(), self.clean_labels.len())));
        }
        if self.classes < 2 {
            return Err(Error::invalid("dataset", "need at least two classes"));
        }
        if let Some(i) = self.clean_labels.iter().position(|&y| y >= self.classes) {
            return Err(Error::invalid("dataset", format!("clean label {} at sample {i} out of range", self.clean_labels[i])));
        }
        if let Some(noisy) = &self.noisy_labels {
            if noisy.len() != self.clean_labels.len() {
                return Err(Error::invalid("dataset", "noisy label count differs from sample count"));
            }
            if let Some(i) = noisy.iter().position(|&y| y >= self.classes) {
                return Err(Error::invalid("dataset", format!("noisy label {} at sample {i} out of range", noisy[i])));
            }
        }
        if !self.features.all_finite() {
            return Err(Error::invalid("dataset", "features contain non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Labels a model is trained against: the noisy ones.
    pub fn training_labels(&self) -> Result<&[usize]> {
        self.noisy_labels
            .as_deref()
            .ok_or_else(|| Error::invalid("dataset", format!("{} has no noisy labels", self.provenance)))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            noisy_labels: self.noisy_labels.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the dataset in the text format described at module level.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.len(), self.dim(), self.classes);
        for i in 0..self.len() {
            let _ = write!(out, "{},", self.clean_labels[i]);
            match &self.noisy_labels {
                Some(n) => {
                    let _ = write!(out, "{}", n[i]);
                }
                None => out.push('-'),
            }
            for x in self.features.row(i) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, provenance: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "missing header".into() })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: 1, message: format!("malformed header {header:?}: {e}") })?;
        let [n, d, c] = dims[..] else {
            return Err(Error::Parse { line: 1, message: format!("header must be `n d c`, got {header:?}") });
        };
        if c < 2 {
            return Err(Error::Parse { line: 1, message: "class count must be at least 2".into() });
        }

        let mut features = Vec::with_capacity(n * d);
        let mut clean = Vec::with_capacity(n);
        let mut noisy: Vec<Option<usize>> = Vec::with_capacity(n);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let perr = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 2 {
                return Err(perr(format!("expected {} fields, found {}", d + 2, fields.len())));
            }
            let label = |tok: &str| -> Result<usize> {
                let y: usize = tok.trim().parse().map_err(|_| perr(format!("bad label {tok:?}")))?;
                if y >= c {
                    return Err(perr(format!("label {y} out of range for {c} classes")));
                }
                Ok(y)
            };
            clean.push(label(fields[0])?);
            noisy.push(if fields[1].trim() == "-" { None } else { Some(label(fields[1])?) });
            if noisy.len() > 1 && noisy[0].is_some() != noisy[noisy.len() - 1].is_some() {
                return Err(perr("noisy labels must be present on every row or none".into()));
            }
            for tok in &fields[2..] {
                let x: f64 = tok.trim().parse().map_err(|_| perr(format!("bad feature {tok:?}")))?;
                if !x.is_finite() {
                    return Err(perr(format!("non-finite feature {tok:?}")));
                }
                features.push(x);
            }
        }
        if clean.len() != n {
            return Err(Error::Parse { line: clean.len() + 1, message: format!("header declares {n} rows, found {}", clean.len()) });
        }
        let noisy_labels = if noisy.first().is_some_and(Option::is_some) {
            Some(noisy.into_iter().map(|y| y.expect("checked per row")).collect())
        } else {
            None
        };
        Self::new(Tensor::matrix(n, d, features), clean, noisy_labels, c, provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.display().to_string())
    }
}

/// Recipe for isotropic Gaussian blobs, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// `classes × dim`, row-major.
    pub class_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self::simplex(4, 16, 2500, 6.0, 1.0, 0)
    }
}

impl BlobSpec {
    /// Means on scaled coordinate axes so every pair of class means is
    /// `separation · sigma` apart. Needs `dim >= classes`.
    pub fn simplex(classes: usize, dim: usize, n_per_class: usize, separation: f64, sigma: f64, seed: u64) -> Self {
        assert!(dim >= classes, "simplex layout needs dim >= classes");
        let scale = separation * sigma / std::f64::consts::SQRT_2;
        let class_means = (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[k] = scale;
                m
            })
            .collect();
        Self { classes, dim, n_per_class, class_means, noise_sigma: sigma, seed }
    }

    /// Classes `2k` and `2k+1` sit `within · sigma` apart; consecutive pairs
    /// sit `between · sigma` apart along an orthogonal axis. With circulant
    /// noise this places each flip target next to its source. Needs an even
    /// class count and `dim >= classes / 2 + 1`.
    pub fn paired(classes: usize, dim: usize, n_per_class: usize, within: f64, between: f64, sigma: f64, seed: u64) -> Self {
        assert!(classes % 2 == 0, "paired layout needs an even class count");
        assert!(dim > classes / 2, "paired layout needs dim > classes / 2");
        let pair_scale = between * sigma / std::f64::consts::SQRT_2;
        let class_means = (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[0] = if k % 2 == 1 { within * sigma } else { 0.0 };
                m[1 + k / 2] = pair_scale;
                m
            })
            .collect();
        Self { classes, dim, n_per_class, class_means, noise_sigma: sigma, seed }
    }

    pub fn check(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.n_per_class == 0 {
            return Err(Error::invalid("blob spec", "need classes >= 2, dim >= 1 and n_per_class >= 1"));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::invalid("blob spec", format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.class_means.len() != self.classes || self.class_means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::invalid("blob spec", "class_means must be classes × dim"));
        }
        Ok(())
    }
}

/// Draws `n_per_class` samples around each class mean. Samples are grouped
/// by class in order; noisy labels are left empty.
pub fn generate_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    spec.check()?;
    let mut rng = rng(spec.seed);
    let n = spec.classes * spec.n_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in spec.class_means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spec.noise_sigma * z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        Tensor::matrix(n, spec.dim, features),
        labels,
        None,
        spec.classes,
        format!("blobs(c={}, d={}, n_per_class={}, seed={})", spec.classes, spec.dim, spec.n_per_class, spec.seed),
    )
}

/// Draws a noisy label for every sample from row `clean` of `t`.
pub fn inject_noise(data: &LabeledDataset, t: &TransitionMatrix, seed: u64) -> Result<LabeledDataset> {
    if t.classes() != data.classes {
        return Err(Error::invalid("transition matrix", format!("{} classes for a {}-class dataset", t.classes(), data.classes)));
    }
    let t = if t.is_validated() { t.clone() } else { t.clone().validate().map_err(Error::Violation)? };
    let mut rng = rng(seed);
    let c = data.classes;
    let noisy = data
        .clean_labels
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            let row = t.entries().row(y);
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            // u landed in rounding slack at the top; take the last class with mass.
            (0..c).rev().find(|&j| row[j] > 0.0).unwrap_or(y)
        })
        .collect();
    let mut out = data.clone();
    out.noisy_labels = Some(noisy);
    out.provenance = format!("{} + noise(seed={seed})", data.provenance);
    Ok(out)
}

/// Observed flip frequencies: entry `(i, j)` is the share of clean-`i`
/// samples whose noisy label is `j`.
pub fn empirical_flip_matrix(data: &LabeledDataset) -> Result<Tensor> {
    let noisy = data.training_labels()?;
    let c = data.classes;
    let mut counts = vec![0usize; c * c];
    let mut totals = vec![0usize; c];
    for (&y, &n) in data.clean_labels.iter().zip(noisy) {
        counts[y * c + n] += 1;
        totals[y] += 1;
    }
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(Error::MissingClass(k));
    }
    let data = counts.iter().enumerate().map(|(idx, &n)| n as f64 / totals[idx / c] as f64).collect();
    Ok(Tensor::matrix(c, c, data))
}

/// Shuffled partition into `(train, rest)` with `round(n · train_fraction)`
/// samples in the first part.
pub fn split(data: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("split", format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n = data.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid("split", format!("{n} samples at fraction {train_fraction} leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    Ok((data.subset(&idx[..n_train]), data.subset(&idx[n_train..])))
}
