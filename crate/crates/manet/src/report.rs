//! Run artifacts and aggregate statistics: the per-run training report,
//! the multi-run manifest, mean/stderr/t-test helpers, and table rendering
//! to aligned text and CSV with identical numbers in both.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::Config;
use crate::error::{Error, Result};

/// Everything a single training run reports. Serialization deliberately
/// omits wall-clock time so identical config and seed produce byte-identical
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Labeled domain ids, in discriminator index order.
    pub labeled_domains: Vec<String>,
    /// Unlabeled-only domain ids that have held-out labeled eval sets.
    pub unlabeled_eval_domains: Vec<String>,
    /// Iterations at which dev/test evaluation ran.
    pub eval_iterations: Vec<usize>,
    /// Per evaluation point, per labeled domain: dev accuracy.
    pub dev_accuracy: Vec<Vec<f64>>,
    /// Per evaluation point, per labeled domain: test accuracy.
    pub test_accuracy: Vec<Vec<f64>>,
    /// Per evaluation point: mean dev accuracy over labeled domains.
    pub mean_dev_accuracy: Vec<f64>,
    /// Iteration whose parameters were kept.
    pub best_iteration: usize,
    pub best_mean_dev_accuracy: f64,
    pub iterations_run: usize,
    /// Per labeled domain, after restoring the best parameters.
    pub final_test_accuracy: Vec<f64>,
    pub mean_final_test_accuracy: f64,
    /// Per unlabeled-eval domain, zero-vector inference.
    pub unlabeled_test_accuracy: Vec<f64>,
    /// Post-training domain-identity probe on the shared features, when run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    /// Chance level for the probe (1 / number of domains).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_chance: Option<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Checks the internal consistency invariants: aligned lengths and all
    /// accuracies within [0, 1].
    pub fn validate(&self) -> Result<()> {
        let evals = self.eval_iterations.len();
        if self.dev_accuracy.len() != evals
            || self.test_accuracy.len() != evals
            || self.mean_dev_accuracy.len() != evals
        {
            return Err(Error::invalid("train_report", "history lengths disagree"));
        }
        let n = self.labeled_domains.len();
        if self.final_test_accuracy.len() != n
            || self.dev_accuracy.iter().any(|row| row.len() != n)
            || self.test_accuracy.iter().any(|row| row.len() != n)
        {
            return Err(Error::invalid("train_report", "domain counts disagree"));
        }
        if self.unlabeled_test_accuracy.len() != self.unlabeled_eval_domains.len() {
            return Err(Error::invalid("train_report", "unlabeled eval lengths disagree"));
        }
        let all = self
            .dev_accuracy
            .iter()
            .chain(self.test_accuracy.iter())
            .flatten()
            .chain(self.mean_dev_accuracy.iter())
            .chain(self.final_test_accuracy.iter())
            .chain(self.unlabeled_test_accuracy.iter())
            .chain(std::iter::once(&self.best_mean_dev_accuracy))
            .chain(std::iter::once(&self.mean_final_test_accuracy));
        for &a in all {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid("train_report", format!("accuracy {a} outside [0,1]")));
            }
        }
        for a in [self.probe_accuracy, self.probe_chance].into_iter().flatten() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid("train_report", format!("probe value {a} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Canonical serialized form: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<TrainReport> {
        Ok(serde_json::from_str(s)?)
    }

    /// Human-readable summary table: one row per domain plus an average row.
    pub fn render_table(&self) -> String {
        let mut t = Table::new(vec!["domain".into(), "test_acc".into()]);
        for (id, acc) in self.labeled_domains.iter().zip(&self.final_test_accuracy) {
            t.push_row(vec![id.clone(), fmt_acc(*acc)]);
        }
        t.push_row(vec!["Avg".into(), fmt_acc(self.mean_final_test_accuracy)]);
        for (id, acc) in self.unlabeled_eval_domains.iter().zip(&self.unlabeled_test_accuracy) {
            t.push_row(vec![format!("{id} (unlabeled)"), fmt_acc(*acc)]);
        }
        let mut out = t.render_text();
        out.push_str(&format!(
            "best iteration {} of {} (mean dev accuracy {})\n",
            self.best_iteration,
            self.iterations_run,
            fmt_acc(self.best_mean_dev_accuracy)
        ));
        if let (Some(p), Some(c)) = (self.probe_accuracy, self.probe_chance) {
            out.push_str(&format!(
                "domain probe accuracy {} (chance {})\n",
                fmt_acc(p),
                fmt_acc(c)
            ));
        }
        out
    }
}

/// Index of a multi-run experiment: the config snapshot, one seed and one
/// report path per run, and aggregate statistics recomputable from the
/// per-run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub seeds: Vec<u64>,
    pub report_paths: Vec<String>,
    pub aggregate: Aggregate,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() != self.report_paths.len() {
            return Err(Error::invalid("run_manifest", "seed list length must equal run count"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("run_manifest", "manifest needs at least one run"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-domain and overall accuracy statistics over a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub domains: Vec<String>,
    pub per_domain_mean: Vec<f64>,
    /// Absent for single-run experiments.
    pub per_domain_stderr: Option<Vec<f64>>,
    pub overall_mean: f64,
    pub overall_stderr: Option<f64>,
}

/// Aggregates per-run, per-domain accuracies: `per_run[r][d]` is run r's
/// accuracy on domain d. Stderr columns appear only with two or more runs.
pub fn aggregate_runs(domains: &[String], per_run: &[Vec<f64>]) -> Result<Aggregate> {
    if per_run.is_empty() {
        return Err(Error::invalid("aggregate", "no runs to aggregate"));
    }
    if per_run.iter().any(|r| r.len() != domains.len()) {
        return Err(Error::invalid("aggregate", "run rows disagree with domain count"));
    }
    let n_runs = per_run.len();
    let mut per_domain_mean = Vec::with_capacity(domains.len());
    let mut per_domain_stderr = Vec::with_capacity(domains.len());
    for d in 0..domains.len() {
        let col: Vec<f64> = per_run.iter().map(|r| r[d]).collect();
        per_domain_mean.push(mean(&col)?);
        if let Some(se) = stderr(&col) {
            per_domain_stderr.push(se);
        }
    }
    let run_means: Vec<f64> = per_run.iter().map(|r| mean(r)).collect::<Result<_>>()?;
    let overall_mean = mean(&run_means)?;
    let overall_stderr = stderr(&run_means);
    let per_domain_stderr = if n_runs >= 2 { Some(per_domain_stderr) } else { None };
    Ok(Aggregate { domains: domains.to_vec(), per_domain_mean, per_domain_stderr, overall_mean, overall_stderr })
}

impl Aggregate {
    /// Renders the Table-1-style layout: one row per domain plus Avg, with
    /// a stderr column only when it exists.
    pub fn to_table(&self) -> Table {
        let mut headers = vec!["domain".to_string(), "mean_acc".to_string()];
        if self.per_domain_stderr.is_some() {
            headers.push("stderr".to_string());
        }
        let mut t = Table::new(headers);
        for (i, id) in self.domains.iter().enumerate() {
            let mut row = vec![id.clone(), fmt_acc(self.per_domain_mean[i])];
            if let Some(se) = &self.per_domain_stderr {
                row.push(fmt_acc(se[i]));
            }
            t.push_row(row);
        }
        let mut avg = vec!["Avg".to_string(), fmt_acc(self.overall_mean)];
        if let Some(se) = self.overall_stderr {
            avg.push(fmt_acc(se));
        }
        t.push_row(avg);
        t
    }
}

// ---- statistics ----

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("mean", "empty sample"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (n-1 denominator). None for fewer than two
/// points.
pub fn sample_stddev(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Standard error of the mean: s / sqrt(n).
pub fn stderr(xs: &[f64]) -> Option<f64> {
    sample_stddev(xs).map(|s| s / (xs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-sided one-sample t-test of the sample mean against `mu0`. A
/// zero-variance sample short-circuits: p = 1 when the mean equals `mu0`
/// exactly, else p = 0.
pub fn one_sample_t_test(xs: &[f64], mu0: f64) -> Result<TTest> {
    if xs.len() < 2 {
        return Err(Error::invalid("t_test", "need at least two observations"));
    }
    let m = mean(xs)?;
    let s = sample_stddev(xs).expect("n >= 2");
    let df = (xs.len() - 1) as f64;
    if s == 0.0 {
        return if m == mu0 {
            Ok(TTest { t: 0.0, df, p: 1.0 })
        } else {
            Ok(TTest { t: if m > mu0 { f64::INFINITY } else { f64::NEG_INFINITY }, df, p: 0.0 })
        };
    }
    let t = (m - mu0) / (s / (xs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::invalid("t_test", format!("bad degrees of freedom: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, df, p })
}

/// Accuracies render with four decimal places everywhere.
pub fn fmt_acc(x: f64) -> String {
    format!("{x:.4}")
}

// ---- table rendering ----

/// A rectangular table rendered to aligned text or CSV; both forms carry
/// the same cell strings, so the numbers are identical by construction.
#[derive(Debug, Clone)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Table {
        Table { headers, rows: Vec::new() }
    }

    /// Adds a row; short rows are padded with empty cells, so optional
    /// trailing columns render cleanly.
    pub fn push_row(&mut self, mut row: Vec<String>) {
        row.resize(self.headers.len(), String::new());
        self.rows.push(row);
    }

    pub fn render_text(&self) -> String {
        let cols = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for row in &self.rows {
            for c in 0..cols {
                widths[c] = widths[c].max(row[c].len());
            }
        }
        let mut out = String::new();
        let emit = |cells: &[String], out: &mut String| {
            for (c, cell) in cells.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                if c == 0 {
                    out.push_str(&format!("{cell:<width$}", width = widths[c]));
                } else {
                    out.push_str(&format!("{cell:>width$}", width = widths[c]));
                }
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        };
        emit(&self.headers, &mut out);
        for row in &self.rows {
            emit(row, &mut out);
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        let emit = |cells: &[String], out: &mut String| {
            let escaped: Vec<String> = cells
                .iter()
                .map(|c| {
                    if c.contains(',') || c.contains('"') || c.contains('\n') {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.clone()
                    }
                })
                .collect();
            out.push_str(&escaped.join(","));
            out.push('\n');
        };
        emit(&self.headers, &mut out);
        for row in &self.rows {
            emit(row, &mut out);
        }
        out
    }
}
