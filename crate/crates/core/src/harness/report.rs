//! Experiment reports and their markdown/CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{Cooperation, HyperParams, ModelKind};
use super::metrics::{ClassMetrics, Metrics, Stat};
use crate::dataset::{FailureClass, ScenarioKind};
use crate::error::Result;

/// Wall-clock seconds spent training, with the Paillier share isolated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    /// Encryption plus decryption seconds (zero outside HE mode).
    pub he_seconds: f64,
    /// `he_seconds / train_seconds`, zero when nothing was timed.
    pub he_share: f64,
}

impl Timing {
    pub fn new(train_seconds: f64, he_seconds: f64) -> Self {
        let he_share = if train_seconds > 0.0 { he_seconds / train_seconds } else { 0.0 };
        Self { train_seconds, he_seconds, he_share }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_size: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub timing: Timing,
    /// Payload bytes crossing party boundaries.
    pub bytes_exchanged: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPointSummary {
    pub params: HyperParams,
    pub accuracy: Stat,
    pub macro_f1: Stat,
}

/// Cross-validated result of one party's local model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartyReport {
    pub party: String,
    pub n_features: usize,
    pub best_params: HyperParams,
    pub accuracy: Stat,
    pub macro_f1: Stat,
    pub weighted_f1: Stat,
    pub folds: Vec<FoldMetrics>,
    pub grid: Vec<GridPointSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: ScenarioKind,
    pub model: ModelKind,
    pub cooperation: Cooperation,
    pub k_folds: usize,
    pub seed: u64,
    pub data: String,
    pub n_obs: usize,
    pub n_features: usize,
    pub n_parties: usize,
    /// Over folds; over parties for non-cooperative runs.
    pub accuracy: Stat,
    pub macro_f1: Stat,
    pub weighted_f1: Stat,
    /// Per-class scores of the pooled confusion matrix.
    pub per_class: Vec<ClassMetrics>,
    /// Sum of every fold's confusion matrix (and every party's, if several).
    pub confusion: Vec<Vec<u64>>,
    /// Summed over the winner's folds (and parties).
    pub timing: Timing,
    pub bytes_exchanged: u64,
    /// Absent for non-cooperative runs, where each party has its own winner.
    pub best_params: Option<HyperParams>,
    pub folds: Vec<FoldMetrics>,
    pub grid: Vec<GridPointSummary>,
    pub parties: Vec<PartyReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The report with every wall-clock quantity zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        let zero = |folds: &mut Vec<FoldMetrics>| folds.iter_mut().for_each(|f| f.timing = Timing::default());
        r.timing = Timing::default();
        zero(&mut r.folds);
        r.parties.iter_mut().for_each(|p| zero(&mut p.folds));
        r
    }
}

/// Parses either one report or a JSON array of reports.
pub fn reports_from_json(text: &str) -> Result<Vec<MetricsReport>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(if value.is_array() { serde_json::from_value(value)? } else { vec![serde_json::from_value(value)?] })
}

fn pm(s: Stat) -> String {
    format!("{:.2} ± {:.2}", s.mean, s.std)
}

fn class_name(c: usize) -> String {
    FailureClass::from_index(c).map_or_else(|| c.to_string(), |f| f.to_string())
}

/// Scenario × model table of accuracy and F1, followed by per-report detail
/// when exactly one report is given.
pub fn render_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str("| Scenario | Model | Cooperation | Accuracy (%) | F1 (%) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.scenario,
            r.model.display_name(),
            r.cooperation,
            pm(r.accuracy),
            pm(r.macro_f1)
        );
    }
    if let [r] = reports {
        out.push('\n');
        render_detail(&mut out, r);
    }
    out
}

fn render_detail(out: &mut String, r: &MetricsReport) {
    let _ = writeln!(out, "Data: {} ({} rows, {} features, {} parties)", r.data, r.n_obs, r.n_features, r.n_parties);
    if let Some(p) = r.best_params {
        let _ = writeln!(out, "Best parameters: {p}");
    }
    let _ = writeln!(out, "Weighted F1 (%): {}", pm(r.weighted_f1));
    let _ = writeln!(
        out,
        "Training time (s): {:.2} (HE {:.2}, {:.2}%)  Bytes exchanged: {}",
        r.timing.train_seconds,
        r.timing.he_seconds,
        100.0 * r.timing.he_share,
        r.bytes_exchanged
    );
    if !r.folds.is_empty() {
        out.push_str("\n| Fold | Test rows | Accuracy (%) | F1 (%) |\n|---|---|---|---|\n");
        for f in &r.folds {
            let _ = writeln!(
                out,
                "| {} | {} | {:.2} | {:.2} |",
                f.fold, f.test_size, f.metrics.accuracy, f.metrics.macro_f1
            );
        }
    }
    if !r.parties.is_empty() {
        out.push_str("\n| Party | Features | Accuracy (%) | F1 (%) | Parameters |\n|---|---|---|---|---|\n");
        for p in &r.parties {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                p.party,
                p.n_features,
                pm(p.accuracy),
                pm(p.macro_f1),
                p.best_params
            );
        }
    }
    out.push_str("\n| Class | Precision (%) | Recall (%) | F1 (%) | Support |\n|---|---|---|---|---|\n");
    for c in &r.per_class {
        let flag = if c.degenerate { " (degenerate)" } else { "" };
        let _ = writeln!(
            out,
            "| {}{flag} | {:.2} | {:.2} | {:.2} | {} |",
            class_name(c.class),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    let k = r.confusion.len();
    out.push_str("\n| True \\ Predicted |");
    for c in 0..k {
        let _ = write!(out, " {} |", class_name(c));
    }
    out.push_str(&format!("\n|---|{}\n", "---|".repeat(k)));
    for (t, row) in r.confusion.iter().enumerate() {
        let _ = write!(out, "| {} |", class_name(t));
        for v in row {
            let _ = write!(out, " {v} |");
        }
        out.push('\n');
    }
}

/// Every grid point's cross-validated scores; the winner is starred.
pub fn render_grid_markdown(r: &MetricsReport) -> String {
    let mut out = String::new();
    let mut table = |party: Option<&str>, grid: &[GridPointSummary], best: Option<HyperParams>| {
        if let Some(p) = party {
            let _ = writeln!(out, "Party {p}\n");
        }
        out.push_str("| Parameters | Accuracy (%) | F1 (%) |\n|---|---|---|\n");
        for g in grid {
            let star = if Some(g.params) == best { " *" } else { "" };
            let _ = writeln!(out, "| {}{star} | {} | {} |", g.params, pm(g.accuracy), pm(g.macro_f1));
        }
        out.push('\n');
    };
    table(None, &r.grid, r.best_params);
    for p in &r.parties {
        table(Some(&p.party), &p.grid, Some(p.best_params));
    }
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}

pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "scenario,model,cooperation,accuracy_mean,accuracy_std,f1_mean,f1_std,weighted_f1_mean,weighted_f1_std,\
         train_seconds,he_seconds,bytes_exchanged\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{}",
            r.scenario,
            r.model,
            r.cooperation,
            r.accuracy.mean,
            r.accuracy.std,
            r.macro_f1.mean,
            r.macro_f1.std,
            r.weighted_f1.mean,
            r.weighted_f1.std,
            r.timing.train_seconds,
            r.timing.he_seconds,
            r.bytes_exchanged
        );
    }
    out
}
