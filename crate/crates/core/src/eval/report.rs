use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ConfusionCounts, RocPoint};
use crate::error::{Error, Result};

/// Test-set metrics of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub confusion: ConfusionCounts,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Summary { mean, std }
    }

    /// Percentage cell such as `87.68±6.81`.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: String,
    pub backbone: String,
    pub seed: u64,
    pub config_hash: String,
    /// What the metrics were computed on, e.g. `cross-validation`.
    pub evaluation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub folds: Vec<FoldMetrics>,
    pub accuracy: Summary,
    pub auc: Summary,
    pub f1: Summary,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(meta: RunMeta, folds: Vec<FoldMetrics>) -> Self {
        let col = |f: fn(&FoldMetrics) -> f64| -> Vec<f64> { folds.iter().map(f).collect() };
        let mut notes = Vec::new();
        if folds.iter().any(|f| f.confusion.tp + f.confusion.fp + f.confusion.fn_ == 0) {
            notes.push("F1 is defined as 0 for folds with no positive predictions or cases".into());
        }
        MetricsReport {
            accuracy: Summary::of(&col(|f| f.accuracy)),
            auc: Summary::of(&col(|f| f.auc)),
            f1: Summary::of(&col(|f| f.f1)),
            meta,
            folds,
            notes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,n_test,accuracy,auc,f1,tp,tn,fp,fn\n");
        for f in &self.folds {
            let c = f.confusion;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                f.fold, f.n_test, f.accuracy, f.auc, f.f1, c.tp, c.tn, c.fp, c.fn_
            )
            .unwrap();
        }
        s
    }

    /// Writes `metrics.json`, `folds.csv` and `roc_fold<k>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("metrics.json", self.to_json())?;
        put("folds.csv", self.to_csv())?;
        for f in &self.folds {
            let mut s = String::from("threshold,fpr,tpr\n");
            for p in &f.roc {
                writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
            }
            put(&format!("roc_fold{}.csv", f.fold), s)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("metrics.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&p, e))
    }
}

/// Markdown and CSV comparison of runs; the best mean per metric is bold in
/// the markdown and starred in the CSV.
pub fn comparison_table(reports: &[MetricsReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Empty("report list"));
    }
    let metrics: [(&str, fn(&MetricsReport) -> Summary); 3] = [
        ("ACC (%)", |r| r.accuracy),
        ("AUC (%)", |r| r.auc),
        ("F1 (%)", |r| r.f1),
    ];
    let best: Vec<f64> = metrics
        .iter()
        .map(|(_, get)| reports.iter().map(|r| get(r).mean).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut md = String::from("| run | backbone | evaluation |");
    let mut csv = String::from("run,backbone,evaluation");
    for (name, _) in &metrics {
        write!(md, " {name} |").unwrap();
        write!(csv, ",{name}").unwrap();
    }
    md.push_str("\n|---|---|---|");
    md.push_str(&"---|".repeat(metrics.len()));
    md.push('\n');
    csv.push('\n');
    for r in reports {
        write!(md, "| {} | {} | {} |", r.meta.variant, r.meta.backbone, r.meta.evaluation).unwrap();
        write!(csv, "{},{},{}", r.meta.variant, r.meta.backbone, r.meta.evaluation).unwrap();
        for ((_, get), &b) in metrics.iter().zip(&best) {
            let s = get(r);
            if s.mean == b {
                write!(md, " **{}** |", s.cell()).unwrap();
                write!(csv, ",{}*", s.cell()).unwrap();
            } else {
                write!(md, " {} |", s.cell()).unwrap();
                write!(csv, ",{}", s.cell()).unwrap();
            }
        }
        md.push('\n');
        csv.push('\n');
    }
    Ok((md, csv))
}
