use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::metrics::MetricRecord;

/// Final result of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub total_params: usize,
    pub per_sample_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub max: f64,
    pub min: f64,
    pub avg: f64,
    pub total_params: usize,
    pub per_sample_params: usize,
}

/// Max/Min/Avg test accuracy per model label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

/// Groups finished runs by label, in order of first appearance.
pub fn summarize(records: &[MetricRecord]) -> SummaryTable {
    let mut runs: Vec<RunSummary> = Vec::new();
    for r in records {
        if let MetricRecord::RunEnd { label, seed, test_accuracy, total_params, per_sample_params, .. } = r {
            runs.push(RunSummary {
                label: label.clone(),
                seed: *seed,
                test_accuracy: *test_accuracy,
                total_params: *total_params,
                per_sample_params: *per_sample_params,
            });
        }
    }
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in &runs {
        if rows.iter().any(|row| row.label == r.label) {
            continue;
        }
        let accs: Vec<f64> = runs.iter().filter(|x| x.label == r.label).map(|x| x.test_accuracy).collect();
        rows.push(SummaryRow {
            label: r.label.clone(),
            runs: accs.len(),
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            avg: accs.iter().sum::<f64>() / accs.len() as f64,
            total_params: r.total_params,
            per_sample_params: r.per_sample_params,
        });
    }
    SummaryTable { rows }
}

impl SummaryTable {
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>4}  {:>7}  {:>7}  {:>7}  {:>10}  {:>10}",
            "Model", "Runs", "Max", "Min", "Avg", "Params", "Per-sample"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>4}  {:>7.2}  {:>7.2}  {:>7.2}  {:>10}  {:>10}",
                r.label,
                r.runs,
                100.0 * r.max,
                100.0 * r.min,
                100.0 * r.avg,
                r.total_params,
                r.per_sample_params
            );
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("model,runs,max,min,avg,params,per_sample_params\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.4},{},{}",
                r.label,
                r.runs,
                100.0 * r.max,
                100.0 * r.min,
                100.0 * r.avg,
                r.total_params,
                r.per_sample_params
            );
        }
        s
    }
}
