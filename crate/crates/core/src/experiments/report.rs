//! Experiment reports: per-trial rows, condition summaries, paired tests,
//! and their on-disk layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{mean, median, std_dev, Rmse};
use super::stats::{paired_test, PairedTest};
use crate::controller::RunManifest;
use crate::error::{Error, Result};

/// One trial of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub condition: String,
    /// Sweep-axis value (period, delay, gain scale, repetition), if any.
    pub x: Option<f64>,
    pub trial: usize,
    pub trajectory_seed: u64,
    pub rmse: Rmse,
    /// Flagged trials (diverged, collapsed, unstable) are excluded from summaries.
    pub flagged: bool,
    pub flag: Option<String>,
    /// Task-specific scalar metrics.
    pub metrics: BTreeMap<String, f64>,
    pub manifest: RunManifest,
}

impl TrialResult {
    pub fn value(&self, metric: &str) -> Option<f64> {
        match metric {
            "rmse" => Some(self.rmse.aggregate),
            "rmse_proximal" => Some(self.rmse.per_joint[0]),
            "rmse_distal" => Some(self.rmse.per_joint[1]),
            m => self.metrics.get(m).copied(),
        }
    }
}

/// Descriptive statistics of one metric within one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        MetricSummary {
            n: values.len(),
            mean: mean(values),
            median: median(values),
            sd: std_dev(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub x: Option<f64>,
    pub n_trials: usize,
    pub n_excluded: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub metric: String,
    /// Condition expected to be lower.
    pub a: String,
    pub b: String,
    pub x: Option<f64>,
    pub test: Option<PairedTest>,
    /// Pairs dropped because either side was flagged.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub seed: u64,
    pub n_trials: usize,
    pub axis: Option<String>,
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
    pub trials: Vec<TrialResult>,
    /// Task-level scalars (plateau levels, trajectory counts, thresholds...).
    pub info: BTreeMap<String, f64>,
}

fn same_x(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
        _ => false,
    }
}

impl ExperimentReport {
    pub fn new(task: &str, seed: u64, n_trials: usize, axis: Option<&str>) -> Self {
        ExperimentReport {
            task: task.to_string(),
            seed,
            n_trials,
            axis: axis.map(str::to_string),
            conditions: Vec::new(),
            comparisons: Vec::new(),
            trials: Vec::new(),
            info: BTreeMap::new(),
        }
    }

    pub fn trials_of<'a>(
        &'a self,
        condition: &'a str,
        x: Option<f64>,
    ) -> impl Iterator<Item = &'a TrialResult> + 'a {
        self.trials
            .iter()
            .filter(move |t| t.condition == condition && same_x(t.x, x))
    }

    /// Rebuild condition summaries from the trial list, in first-seen order.
    pub fn summarize(&mut self) {
        let mut keys: Vec<(String, Option<f64>)> = Vec::new();
        for t in &self.trials {
            if !keys.iter().any(|(c, x)| *c == t.condition && same_x(*x, t.x)) {
                keys.push((t.condition.clone(), t.x));
            }
        }
        self.conditions = keys
            .into_iter()
            .map(|(c, x)| {
                let all: Vec<&TrialResult> = self
                    .trials
                    .iter()
                    .filter(|t| t.condition == c && same_x(t.x, x))
                    .collect();
                let ok: Vec<&&TrialResult> = all.iter().filter(|t| !t.flagged).collect();
                let mut names: Vec<String> =
                    vec!["rmse".into(), "rmse_proximal".into(), "rmse_distal".into()];
                for t in &all {
                    for k in t.metrics.keys() {
                        if !names.contains(k) {
                            names.push(k.clone());
                        }
                    }
                }
                let metrics = names
                    .into_iter()
                    .map(|m| {
                        let vals: Vec<f64> = ok
                            .iter()
                            .filter_map(|t| t.value(&m))
                            .filter(|v| v.is_finite())
                            .collect();
                        (m, MetricSummary::of(&vals))
                    })
                    .collect();
                ConditionSummary {
                    condition: c.clone(),
                    x,
                    n_trials: all.len(),
                    n_excluded: all.len() - ok.len(),
                    metrics,
                }
            })
            .collect();
    }

    pub fn summary(&self, condition: &str, x: Option<f64>) -> Option<&ConditionSummary> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition && same_x(c.x, x))
    }

    /// Summary statistic shortcut; NaN when absent.
    pub fn stat(&self, condition: &str, x: Option<f64>, metric: &str) -> &MetricSummary {
        static EMPTY: MetricSummary = MetricSummary {
            n: 0,
            mean: f64::NAN,
            median: f64::NAN,
            sd: f64::NAN,
        };
        self.summary(condition, x)
            .and_then(|s| s.metrics.get(metric))
            .unwrap_or(&EMPTY)
    }

    /// Paired test of `metric` between two conditions, matched on trial index.
    pub fn compare(
        &mut self,
        label: &str,
        metric: &str,
        (a, xa): (&str, Option<f64>),
        (b, xb): (&str, Option<f64>),
    ) -> Result<()> {
        let trials = &self.trials;
        let by_trial = |c: &str, x: Option<f64>| -> BTreeMap<usize, &TrialResult> {
            trials
                .iter()
                .filter(|t| t.condition == c && same_x(t.x, x))
                .map(|t| (t.trial, t))
                .collect()
        };
        let ta = by_trial(a, xa);
        let tb = by_trial(b, xb);
        let mut va = Vec::new();
        let mut vb = Vec::new();
        let mut excluded = 0;
        for (i, ra) in &ta {
            let Some(rb) = tb.get(i) else { continue };
            if ra.trajectory_seed != rb.trajectory_seed {
                return Err(Error::Contract(format!(
                    "trial {i}: `{a}` and `{b}` used different trajectory seeds"
                )));
            }
            match (ra.value(metric), rb.value(metric)) {
                (Some(x), Some(y)) if !ra.flagged && !rb.flagged && x.is_finite() && y.is_finite() => {
                    va.push(x);
                    vb.push(y);
                }
                _ => excluded += 1,
            }
        }
        let test = if va.len() >= super::stats::MIN_PAIRS {
            Some(paired_test(&va, &vb)?)
        } else {
            None
        };
        self.comparisons.push(Comparison {
            label: label.to_string(),
            metric: metric.to_string(),
            a: a.to_string(),
            b: b.to_string(),
            x: xa,
            test,
            n_excluded: excluded,
        });
        Ok(())
    }

    pub fn comparison(&self, label: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Per-trial rows.
    pub fn trials_csv(&self) -> String {
        let mut extra: Vec<&String> = Vec::new();
        for t in &self.trials {
            for k in t.metrics.keys() {
                if !extra.contains(&k) {
                    extra.push(k);
                }
            }
        }
        let mut s = String::from("condition,x,trial,trajectory_seed,rmse,rmse_proximal,rmse_distal,flagged");
        for k in &extra {
            let _ = write!(s, ",{k}");
        }
        s.push('\n');
        for t in &self.trials {
            let _ = write!(
                s,
                "{},{},{},{},{:?},{:?},{:?},{}",
                t.condition,
                t.x.map(|x| format!("{x:?}")).unwrap_or_default(),
                t.trial,
                t.trajectory_seed,
                t.rmse.aggregate,
                t.rmse.per_joint[0],
                t.rmse.per_joint[1],
                t.flagged
            );
            for k in &extra {
                let v = t.metrics.get(*k).map(|v| format!("{v:?}")).unwrap_or_default();
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Condition-level curve: one row per (condition, x, metric).
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("condition,x,metric,n,n_excluded,mean,median,sd\n");
        for c in &self.conditions {
            for (m, v) in &c.metrics {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{:?},{:?},{:?}",
                    c.condition,
                    c.x.map(|x| format!("{x:?}")).unwrap_or_default(),
                    m,
                    v.n,
                    c.n_excluded,
                    v.mean,
                    v.median,
                    v.sd
                );
            }
        }
        s
    }

    pub fn tests_csv(&self) -> String {
        let mut s = String::from("label,metric,a,b,x,n,n_nonzero,statistic,p_value,exact,degenerate,median_difference,n_excluded\n");
        for c in &self.comparisons {
            let x = c.x.map(|x| format!("{x:?}")).unwrap_or_default();
            match &c.test {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{x},{},{},{:?},{:e},{},{},{:?},{}",
                        c.label, c.metric, c.a, c.b, t.n, t.n_nonzero, t.statistic,
                        t.p_value, t.exact, t.degenerate, t.median_difference, c.n_excluded
                    );
                }
                None => {
                    let _ = writeln!(s, "{},{},{},{},{x},0,0,,,,,,{}", c.label, c.metric, c.a, c.b, c.n_excluded);
                }
            }
        }
        s
    }

    /// Write `report.json`, `trials.csv`, `summary.csv` and `tests.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()),
            ("trials.csv", self.trials_csv()),
            ("summary.csv", self.summary_csv()),
            ("tests.csv", self.tests_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
