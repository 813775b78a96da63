//! Confusion matrices and the occupancy metric suite.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {0} outside 0..3")]
    BadLabel(usize),
    #[error("class {0} has no samples; recall undefined")]
    EmptyClass(usize),
    #[error("no populated (class 1 or 2) samples")]
    NoPopulated,
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix(pub [[u64; CLASSES]; CLASSES]);

impl ConfusionMatrix {
    pub fn support(&self, c: usize) -> u64 {
        self.0[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..CLASSES).map(|r| self.0[r][c]).sum()
    }

    pub fn total(&self) -> u64 {
        (0..CLASSES).map(|c| self.support(c)).sum()
    }

    /// Each row divided by its support (zero rows stay zero).
    pub fn normalized(&self) -> [[f64; CLASSES]; CLASSES] {
        std::array::from_fn(|r| {
            let s = self.support(r);
            std::array::from_fn(|c| if s == 0 { 0.0 } else { self.0[r][c] as f64 / s as f64 })
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred,0,1,2\n");
        for (r, row) in self.0.iter().enumerate() {
            let _ = writeln!(s, "{r},{},{},{}", row[0], row[1], row[2]);
        }
        s
    }
}

pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= CLASSES {
            return Err(MetricsError::BadLabel(t));
        }
        if p >= CLASSES {
            return Err(MetricsError::BadLabel(p));
        }
        cm.0[t][p] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let correct: u64 = (0..CLASSES).map(|c| cm.0[c][c]).sum();
    correct as f64 / cm.total().max(1) as f64
}

pub fn recalls(cm: &ConfusionMatrix) -> Result<[f64; CLASSES], MetricsError> {
    let mut r = [0.0; CLASSES];
    for (c, v) in r.iter_mut().enumerate() {
        let s = cm.support(c);
        if s == 0 {
            return Err(MetricsError::EmptyClass(c));
        }
        *v = cm.0[c][c] as f64 / s as f64;
    }
    Ok(r)
}

/// Mean per-class recall.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    Ok(recalls(cm)?.iter().sum::<f64>() / CLASSES as f64)
}

/// Mean per-class F1; a class never predicted and never correct scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = |c: usize| {
        let tp = cm.0[c][c] as f64;
        let pred = cm.predicted(c) as f64;
        let sup = cm.support(c) as f64;
        let p = if pred > 0.0 { tp / pred } else { 0.0 };
        let r = if sup > 0.0 { tp / sup } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    (0..CLASSES).map(f1).sum::<f64>() / CLASSES as f64
}

/// Recall of the merged "occupied" class {1, 2}: a one-person frame called
/// two-person still counts as detected.
pub fn recall_populated(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let tp: u64 = (1..CLASSES).flat_map(|t| (1..CLASSES).map(move |p| (t, p))).map(|(t, p)| cm.0[t][p]).sum();
    let fneg: u64 = (1..CLASSES).map(|t| cm.0[t][0]).sum();
    if tp + fneg == 0 {
        return Err(MetricsError::NoPopulated);
    }
    Ok(tp as f64 / (tp + fneg) as f64)
}

pub const REPORT_HEADER: &str = "variant,domain,snr_db,seed,acc,ba,macro_f1,rec_pop";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub domain: String,
    /// `None` for the clean set.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub acc: f64,
    pub ba: f64,
    pub macro_f1: f64,
    pub rec_pop: f64,
    pub recalls: [f64; CLASSES],
    pub confusion: ConfusionMatrix,
}

pub fn snr_tag(snr: Option<f64>) -> String {
    match snr {
        None => "clean".into(),
        Some(v) => format!("{v}"),
    }
}

impl MetricsReport {
    pub fn from_confusion(
        variant: &str,
        domain: &str,
        snr_db: Option<f64>,
        seed: u64,
        cm: ConfusionMatrix,
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            variant: variant.into(),
            domain: domain.into(),
            snr_db,
            seed,
            acc: accuracy(&cm),
            ba: balanced_accuracy(&cm)?,
            macro_f1: macro_f1(&cm),
            rec_pop: recall_populated(&cm)?,
            recalls: recalls(&cm)?,
            confusion: cm,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.variant,
            self.domain,
            snr_tag(self.snr_db),
            self.seed,
            self.acc,
            self.ba,
            self.macro_f1,
            self.rec_pop
        )
    }
}

pub fn write_report_csv(rows: &[MetricsReport], path: &Path) -> std::io::Result<()> {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s)
}

/// One parsed row of a report CSV.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub domain: String,
    pub snr_db: String,
    pub seed: u64,
    pub acc: f64,
    pub ba: f64,
    pub macro_f1: f64,
    pub rec_pop: f64,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {}", header.join(",")),
        )));
    }
    r.deserialize().collect()
}

/// Mean with a two-sided 95% Student-t half-width; `None` below two values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    pub half_width: Option<f64>,
}

pub fn t_interval(values: &[f64]) -> Interval {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    if n < 2 {
        return Interval {
            n,
            mean,
            half_width: None,
        };
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("dof >= 1")
        .inverse_cdf(0.975);
    Interval {
        n,
        mean,
        half_width: Some(t * sd / (n as f64).sqrt()),
    }
}
