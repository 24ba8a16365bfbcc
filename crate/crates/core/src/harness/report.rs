use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transition::{format_matrix, mean_matrix, rre, TransitionMatrix};

use super::boxplot::render_boxplot;
use super::{Method, TrialFailure, TrialResult};

pub const TRIALS_HEADER: &str = "method,dataset,seed,test_loss,test_acc,rre,wall_time";

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub n: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub rre_mean: Option<f64>,
    pub rre_std: Option<f64>,
    /// Element-wise mean of the per-trial matrices.
    pub mean_matrix: Option<Tensor>,
    /// RRE of [`Self::mean_matrix`] against the reference.
    pub mean_matrix_rre: Option<f64>,
}

impl MethodSummary {
    /// A single trial has no spread; its std is reported as 0.
    pub fn is_single(&self) -> bool {
        self.n == 1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentSummary {
    pub methods: Vec<MethodSummary>,
}

impl ExperimentSummary {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Mean and sample standard deviation (n - 1 divisor; 0 for one value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups results by method (in method order) and summarizes each group.
/// `reference` scores the mean matrix of methods that produce estimates.
pub fn aggregate(results: &[TrialResult], reference: Option<&TransitionMatrix>) -> Result<ExperimentSummary> {
    if results.is_empty() {
        return Err(Error::invalid("aggregate", "no results"));
    }
    let mut methods: Vec<Method> = results.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut summary = ExperimentSummary::default();
    for method in methods {
        let group: Vec<&TrialResult> = results.iter().filter(|r| r.method == method).collect();
        let (loss_mean, loss_std) = mean_std(&group.iter().map(|r| r.test_loss).collect::<Vec<_>>());
        let (acc_mean, acc_std) = mean_std(&group.iter().map(|r| r.test_accuracy_percent).collect::<Vec<_>>());
        let rres: Option<Vec<f64>> = group.iter().map(|r| r.rre).collect();
        let (rre_mean, rre_std) = match rres {
            Some(v) => {
                let (m, s) = mean_std(&v);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        let matrices: Option<Vec<Tensor>> = group.iter().map(|r| r.matrix.clone()).collect();
        let mean_matrix = matrices.map(|m| mean_matrix(&m)).transpose()?;
        let mean_matrix_rre = match (reference, &mean_matrix) {
            (Some(t), Some(m)) => Some(rre(t.entries(), m)?),
            _ => None,
        };
        summary.methods.push(MethodSummary {
            method,
            n: group.len(),
            loss_mean,
            loss_std,
            acc_mean,
            acc_std,
            rre_mean,
            rre_std,
            mean_matrix,
            mean_matrix_rre,
        });
    }
    Ok(summary)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `trials.csv` contents. Without `wall_time` the last column is left out
/// so the output is fully determined by the configuration.
pub fn format_trials_csv(results: &[TrialResult], wall_time: bool) -> String {
    let mut out = String::new();
    if wall_time {
        out.push_str(TRIALS_HEADER);
    } else {
        out.push_str(TRIALS_HEADER.trim_end_matches(",wall_time"));
    }
    out.push('\n');
    for r in results {
        let _ = write!(out, "{},{},{},{},{},{}", r.method, r.dataset, r.seed, r.test_loss, r.test_accuracy_percent, opt(r.rre));
        if wall_time {
            let _ = write!(out, ",{}", r.wall_time_seconds);
        }
        out.push('\n');
    }
    out
}

pub fn parse_trials_csv(text: &str) -> Result<Vec<TrialResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRIALS_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header {TRIALS_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(perr(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| perr(format!("bad {what} {s:?}")));
        out.push(TrialResult {
            method: f[0].parse().map_err(|_| perr(format!("unknown method {:?}", f[0])))?,
            dataset: f[1].to_string(),
            seed: f[2].parse().map_err(|_| perr(format!("bad seed {:?}", f[2])))?,
            test_loss: num(f[3], "test_loss")?,
            test_accuracy_percent: num(f[4], "test_acc")?,
            rre: if f[5].is_empty() { None } else { Some(num(f[5], "rre")?) },
            wall_time_seconds: num(f[6], "wall_time")?,
            matrix: None,
            history: None,
        });
    }
    Ok(out)
}

pub fn format_summary_csv(summary: &ExperimentSummary) -> String {
    let mut out = String::from("method,n,loss_mean,loss_std,acc_mean,acc_std,rre_mean,rre_std,mean_matrix_rre,note\n");
    for m in &summary.methods {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.method,
            m.n,
            m.loss_mean,
            m.loss_std,
            m.acc_mean,
            m.acc_std,
            opt(m.rre_mean),
            opt(m.rre_std),
            opt(m.mean_matrix_rre),
            if m.is_single() { "n=1" } else { "" }
        );
    }
    out
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn matrix_file(method: Method, seed: u64) -> String {
    format!("{method}_seed{seed}.txt")
}

/// Writes tables, matrices, training histories and box plots under `dir`.
/// Returns every file written.
pub fn write_report(
    dir: &Path,
    results: &[TrialResult],
    summary: &ExperimentSummary,
    reference: Option<&TransitionMatrix>,
    failures: &[TrialFailure],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("matrices"), dir.join("histories")] {
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    write(dir.join("trials.csv"), &format_trials_csv(results, true), &mut written)?;
    write(dir.join("summary.csv"), &format_summary_csv(summary), &mut written)?;
    if !failures.is_empty() {
        let mut text = String::from("method,seed,message\n");
        for f in failures {
            let _ = writeln!(text, "{},{},\"{}\"", f.method, f.seed, f.message.replace('"', "'"));
        }
        write(dir.join("failures.csv"), &text, &mut written)?;
    }
    if let Some(t) = reference {
        write(dir.join("true_t.txt"), &t.to_string(), &mut written)?;
    }
    for r in results {
        if let Some(m) = &r.matrix {
            write(dir.join("matrices").join(matrix_file(r.method, r.seed)), &format_matrix(m), &mut written)?;
        }
        if let Some(h) = &r.history {
            write(dir.join("histories").join(format!("{}_seed{}.csv", r.method, r.seed)), &h.to_csv(), &mut written)?;
        }
    }
    for m in &summary.methods {
        if let Some(mean) = &m.mean_matrix {
            write(dir.join("matrices").join(format!("{}_mean.txt", m.method)), &format_matrix(mean), &mut written)?;
        }
    }

    let metric = |f: &dyn Fn(&TrialResult) -> Option<f64>| -> Vec<(String, Vec<f64>)> {
        summary
            .methods
            .iter()
            .map(|m| (m.method.to_string(), results.iter().filter(|r| r.method == m.method).filter_map(f).collect()))
            .collect()
    };
    write(dir.join("test_acc.svg"), &render_boxplot("Test accuracy (%)", &metric(&|r| Some(r.test_accuracy_percent))), &mut written)?;
    write(dir.join("test_loss.svg"), &render_boxplot("Test loss", &metric(&|r| Some(r.test_loss))), &mut written)?;
    let rre_groups: Vec<_> = metric(&|r| r.rre).into_iter().filter(|(_, v)| !v.is_empty()).collect();
    if !rre_groups.is_empty() {
        write(dir.join("rre.svg"), &render_boxplot("Transition matrix RRE", &rre_groups), &mut written)?;
    }
    Ok(written)
}

/// Reads back `trials.csv` plus any per-trial matrices and the reference
/// matrix written by [`write_report`].
pub fn load_results(dir: &Path) -> Result<(Vec<TrialResult>, Option<TransitionMatrix>)> {
    let path = dir.join("trials.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut results = parse_trials_csv(&text)?;
    for r in &mut results {
        let p = dir.join("matrices").join(matrix_file(r.method, r.seed));
        if p.exists() {
            r.matrix = Some(TransitionMatrix::load(&p, false)?.into_entries());
        }
    }
    let t = dir.join("true_t.txt");
    let reference = if t.exists() { Some(TransitionMatrix::load(&t, false)?) } else { None };
    Ok((results, reference))
}
