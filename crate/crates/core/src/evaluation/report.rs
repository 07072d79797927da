use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Held-out accuracy below which the evaluation classifier is flagged.
pub const QUALITY_GATE: f64 = 0.8;

const HEADER: &str = "run,seed,accuracy";
const SUMMARY_HEADER: &str = "mean,std";
const FAILED: &str = "failed";

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// `None` for a run that diverged.
    pub accuracy: Option<f64>,
}

/// Aggregate of repeated runs. `mean` and `std` (population) cover the
/// completed runs only.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: String,
    pub classifier_accuracy: Option<f64>,
}

/// Population mean and standard deviation; both are NaN for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn new(runs: Vec<RunResult>, fingerprint: String, classifier_accuracy: Option<f64>) -> Self {
        let (mean, std) = mean_std(&Self::accuracies_of(&runs));
        EvalReport {
            runs,
            mean,
            std,
            fingerprint,
            classifier_accuracy,
        }
    }

    fn accuracies_of(runs: &[RunResult]) -> Vec<f64> {
        runs.iter().filter_map(|r| r.accuracy).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        Self::accuracies_of(&self.runs)
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn n_failed(&self) -> usize {
        self.runs.iter().filter(|r| r.accuracy.is_none()).count()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(acc) = self.classifier_accuracy {
            if acc < QUALITY_GATE {
                out.push(format!(
                    "evaluation classifier held-out accuracy {acc} is below the quality gate {QUALITY_GATE}"
                ));
            }
        }
        let failed = self.n_failed();
        if failed > 0 {
            out.push(format!("{failed} of {} runs diverged and are excluded", self.n_runs()));
        }
        out
    }

    pub fn below_quality_gate(&self) -> bool {
        self.classifier_accuracy.is_some_and(|a| a < QUALITY_GATE)
    }

    /// CSV text. Metadata and warnings are `#` lines ahead of the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fingerprint={}", self.fingerprint);
        if let Some(acc) = self.classifier_accuracy {
            let _ = writeln!(out, "# classifier_accuracy={acc}");
        }
        for w in self.warnings() {
            let _ = writeln!(out, "# warning: {w}");
        }
        let _ = writeln!(out, "{HEADER}");
        for r in &self.runs {
            match r.accuracy {
                Some(a) => writeln!(out, "{},{},{a}", r.run, r.seed),
                None => writeln!(out, "{},{},{FAILED}", r.run, r.seed),
            }
            .expect("writing to a String");
        }
        let _ = writeln!(out, "{SUMMARY_HEADER}");
        let _ = writeln!(out, "{},{}", self.mean, self.std);
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format(format!("report: {msg}"));
        let mut fingerprint = String::new();
        let mut classifier_accuracy = None;
        let mut lines = Vec::new();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some(v) = meta.strip_prefix("fingerprint=") {
                    fingerprint = v.to_string();
                } else if let Some(v) = meta.strip_prefix("classifier_accuracy=") {
                    classifier_accuracy = Some(v.parse().map_err(|_| bad(format!("bad classifier accuracy {v:?}")))?);
                }
            } else if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let mut it = lines.into_iter();
        if it.next() != Some(HEADER) {
            return Err(bad(format!("missing header {HEADER:?}")));
        }
        let mut runs = Vec::new();
        let mut summary = None;
        while let Some(line) = it.next() {
            if line == SUMMARY_HEADER {
                summary = it.next();
                if it.next().is_some() {
                    return Err(bad("rows after the summary".into()));
                }
                break;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [run, seed, acc] = fields[..] else {
                return Err(bad(format!("expected 3 fields in {line:?}")));
            };
            let accuracy = match acc {
                FAILED => None,
                v => Some(v.parse().map_err(|_| bad(format!("bad accuracy {v:?}")))?),
            };
            runs.push(RunResult {
                run: run.parse().map_err(|_| bad(format!("bad run {run:?}")))?,
                seed: seed.parse().map_err(|_| bad(format!("bad seed {seed:?}")))?,
                accuracy,
            });
        }
        let summary = summary.ok_or_else(|| bad("missing mean,std summary".into()))?;
        let (m, s) = summary
            .split_once(',')
            .ok_or_else(|| bad(format!("bad summary {summary:?}")))?;
        let mean: f64 = m.parse().map_err(|_| bad(format!("bad mean {m:?}")))?;
        let std: f64 = s.parse().map_err(|_| bad(format!("bad std {s:?}")))?;
        let report = EvalReport::new(runs, fingerprint, classifier_accuracy);
        let same = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12;
        if !same(report.mean, mean) || !same(report.std, std) {
            return Err(bad(format!("summary {mean},{std} disagrees with the rows")));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}
