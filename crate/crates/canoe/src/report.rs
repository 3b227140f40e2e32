//! Evaluation reports and the per-epoch training log.

use std::fmt::Write as _;
use std::path::Path;

use canoe_core::metrics::{EvalReport, StratumReport};
use canoe_core::train::EpochLog;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{write_json, write_text};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    /// `canoe` or `mmc`.
    pub model: String,
    pub overall: EvalReport,
    pub strata: Vec<StratumReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalOutput {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "subset", "n", "acc@1", "acc@3", "acc@5", "acc@10", "mrr"
        );
        let mut row = |label: String, n: usize, r: Option<&EvalReport>| {
            let _ = match r {
                Some(r) => writeln!(
                    out,
                    "{label:<10} {n:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                    r.acc1, r.acc3, r.acc5, r.acc10, r.mrr
                ),
                None => writeln!(out, "{label:<10} {n:>7} {:>8} {:>8} {:>8} {:>8} {:>8}", "-", "-", "-", "-", "-"),
            };
        };
        row("all".into(), self.overall.n_samples, Some(&self.overall));
        for s in &self.strata {
            row(format!("H>={:.2}", s.threshold), s.n_high, s.high.as_ref());
            row(format!("H<{:.2}", s.threshold), s.n_low, s.low.as_ref());
        }
        out
    }

    /// Long-format rows `threshold,subset,n,metric,value`. Empty subsets
    /// contribute only their size.
    pub fn csv(&self) -> String {
        let mut out = String::from("threshold,subset,n,metric,value\n");
        let mut emit = |threshold: &str, subset: &str, n: usize, r: Option<&EvalReport>| {
            let _ = writeln!(out, "{threshold},{subset},{n},n,{n}");
            if let Some(r) = r {
                for (name, v) in [("acc1", r.acc1), ("acc3", r.acc3), ("acc5", r.acc5), ("acc10", r.acc10), ("mrr", r.mrr)] {
                    let _ = writeln!(out, "{threshold},{subset},{n},{name},{v}");
                }
            }
        };
        emit("", "all", self.overall.n_samples, Some(&self.overall));
        for s in &self.strata {
            let t = s.threshold.to_string();
            emit(&t, "high", s.n_high, s.high.as_ref());
            emit(&t, "low", s.n_low, s.low.as_ref());
        }
        out
    }

    /// Writes `report.json`, `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        write_text(&dir.join("report.txt"), &self.table())?;
        write_text(&dir.join("report.csv"), &self.csv())
    }
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_loc,loss_time,loss_aux,val_acc1,val_mrr";

/// One CSV line; floats use the shortest representation that reads back
/// to the same value.
pub fn log_line(log: &EpochLog) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        log.epoch,
        log.loss_total,
        log.loss_loc,
        log.loss_time,
        log.loss_aux,
        opt(log.val_acc1),
        opt(log.val_mrr)
    )
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&log_line(l));
        out.push('\n');
    }
    out
}
