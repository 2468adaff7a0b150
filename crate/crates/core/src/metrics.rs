//! Accuracy-matrix bookkeeping and the average-accuracy / forgetting
//! metrics, plus the fixed CSV schemas emitted by every run.
//!
//! CSV headers are part of the output contract and never change without a
//! manifest version bump:
//!
//! - per-task: `task_trained,task_evaluated,accuracy,selected_task_mode`
//! - summary:  `seed,method,avg_acc,forgetting,prompt_length,prompt_depth`
//! - selection histogram: `true_task,selected_task,count`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix: `rows[t][j]` is the accuracy on task
/// `j`'s test set after training task `t` (`j <= t`). Baselines that train
/// once (upper bound) carry a single row over all tasks.
pub type AccMatrix = Vec<Vec<f64>>;

/// Average accuracy over the final row, and mean drop from each task's peak
/// accuracy to its final accuracy. Forgetting needs a full task-sequential
/// matrix of at least two rows; otherwise it is reported as 0 with
/// `defined = false`.
pub fn compute_metrics(acc: &AccMatrix) -> Result<(f64, f64, bool)> {
    if acc.is_empty() || acc.last().is_none_or(|r| r.is_empty()) {
        return Err(Error::Data("empty accuracy matrix".into()));
    }
    for (t, row) in acc.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Data(format!(
                    "accuracy out of range at ({t}, {j}): {a}"
                )));
            }
        }
    }
    let last = acc.last().unwrap();
    let n = last.len();
    let avg_acc = last.iter().sum::<f64>() / n as f64;

    // A sequential run has one row per task, row t covering tasks 0..=t.
    let sequential = acc.len() == n && acc.iter().enumerate().all(|(t, r)| r.len() == t + 1);
    if !sequential || n < 2 {
        return Ok((avg_acc, 0.0, false));
    }
    let mut total = 0.0;
    for j in 0..n - 1 {
        let peak = (j..n).map(|t| acc[t][j]).fold(f64::NEG_INFINITY, f64::max);
        total += peak - last[j];
    }
    Ok((avg_acc, total / (n - 1) as f64, true))
}

/// Per-task accuracy matrix plus derived metrics and the prompter-selection
/// histogram of the final evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualReport {
    pub seed: u64,
    pub method: String,
    pub acc_matrix: AccMatrix,
    pub avg_acc: f64,
    /// 0 when not defined (single task, or no task sequence).
    pub forgetting: f64,
    pub forgetting_defined: bool,
    /// `histogram[true_task][selected_task]` counts from the final
    /// evaluation; all zeros for methods without task selection.
    pub selection_histogram: Vec<Vec<usize>>,
    /// `matched`, `oracle`, or `none`.
    pub selection_mode: String,
    pub prompt_length: usize,
    pub prompt_depth: usize,
}

impl ContinualReport {
    pub fn num_tasks(&self) -> usize {
        self.acc_matrix.last().map_or(0, |r| r.len())
    }

    pub const PER_TASK_HEADER: &'static str =
        "task_trained,task_evaluated,accuracy,selected_task_mode";
    pub const SUMMARY_HEADER: &'static str =
        "seed,method,avg_acc,forgetting,prompt_length,prompt_depth";
    pub const HISTOGRAM_HEADER: &'static str = "true_task,selected_task,count";

    pub fn per_task_csv(&self) -> String {
        let mut out = String::from(Self::PER_TASK_HEADER);
        out.push('\n');
        for (t, row) in self.acc_matrix.iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                out.push_str(&format!(
                    "{t},{j},{:.6},{}\n",
                    acc, self.selection_mode
                ));
            }
        }
        out
    }

    pub fn summary_row(&self) -> String {
        let forgetting = if self.forgetting_defined {
            format!("{:.6}", self.forgetting)
        } else {
            "na".to_string()
        };
        format!(
            "{},{},{:.6},{},{},{}",
            self.seed, self.method, self.avg_acc, forgetting, self.prompt_length, self.prompt_depth
        )
    }

    pub fn summary_csv(&self) -> String {
        format!("{}\n{}\n", Self::SUMMARY_HEADER, self.summary_row())
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from(Self::HISTOGRAM_HEADER);
        out.push('\n');
        for (true_task, row) in self.selection_histogram.iter().enumerate() {
            for (selected, count) in row.iter().enumerate() {
                out.push_str(&format!("{true_task},{selected},{count}\n"));
            }
        }
        out
    }

    /// Fraction of each row's mass on the diagonal; empty rows count as 0.
    pub fn diagonal_selection_fractions(&self) -> Vec<f64> {
        self.selection_histogram
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect()
    }
}
