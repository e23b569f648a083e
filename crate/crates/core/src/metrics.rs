//! Overlap metrics between predicted and reference label masks, and their
//! per-volume and cohort aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data_io::{LabelMask, Phase, LV_CAVITY, MYOCARDIUM};
use crate::numfmt::sig6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: prediction {pred:?} vs reference {gt:?}")]
    DimMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("no metric rows to aggregate")]
    Empty,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Voxel counts of a binary comparison; they sum to the voxel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    /// Neither mask contains the class.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.r#fn == 0
    }

    fn merge(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            r#fn: self.r#fn + o.r#fn,
            tn: self.tn + o.tn,
        }
    }
}

fn check_dims(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    Ok(())
}

/// Compares `pred == class` against `gt == class` voxel by voxel.
pub fn confusion(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; 1 when the class is absent from both masks.
pub fn dice_from_counts(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.r#fn) as f64
}

pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    Ok(dice_from_counts(&confusion(pred, gt, class)?))
}

/// Precision, recall and their harmonic mean. Zero denominators give 0,
/// except that two empty masks score a perfect 1 throughout.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    if c.both_empty() {
        return (1.0, 1.0, 1.0);
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.r#fn);
    // harmonic mean of precision and recall in count form, so f1 == dice bitwise
    let f1 = dice_from_counts(c);
    (precision, recall, f1)
}

/// `tp / (tp + fp + fn) · 100`; 100 when the class is absent from both.
pub fn iou_percent(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 100.0;
    }
    c.tp as f64 / (c.tp + c.fp + c.r#fn) as f64 * 100.0
}

/// Foreground classes reported for every volume, with their CSV names.
pub const REPORTED_CLASSES: [(u8, &str); 2] = [(MYOCARDIUM, "myo"), (LV_CAVITY, "lv")];

pub fn class_name(class: u8) -> &'static str {
    REPORTED_CLASSES
        .iter()
        .find(|(c, _)| *c == class)
        .map_or("background", |(_, n)| n)
}

/// Metrics of one class in one volume (or an aggregate of several).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    pub phase: Phase,
    pub class: String,
    pub dice: f64,
    pub dice_loss: f64,
    pub f1: f64,
    pub iou_percent: f64,
    pub counts: ConfusionCounts,
}

impl MetricRow {
    pub fn from_counts(subject: &str, phase: Phase, class: &str, counts: ConfusionCounts) -> Self {
        let dice = dice_from_counts(&counts);
        Self {
            subject: subject.to_string(),
            phase,
            class: class.to_string(),
            dice,
            dice_loss: 1.0 - dice,
            f1: precision_recall_f1(&counts).2,
            iou_percent: iou_percent(&counts),
            counts,
        }
    }
}

/// One row per reported class for a single predicted volume.
pub fn evaluate_volume(
    subject: &str,
    phase: Phase,
    pred: &LabelMask,
    gt: &LabelMask,
) -> Result<Vec<MetricRow>> {
    REPORTED_CLASSES
        .iter()
        .map(|&(class, name)| {
            Ok(MetricRow::from_counts(
                subject,
                phase,
                name,
                confusion(pred, gt, class)?,
            ))
        })
        .collect()
}

/// How per-volume rows are combined into cohort figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Unweighted mean of per-volume metrics.
    #[default]
    PerVolume,
    /// Metrics of the summed confusion counts.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    /// One row per (phase, class) with subject `mean`, followed by a
    /// `foreground` macro average per phase.
    pub aggregates: Vec<MetricRow>,
    pub mode: Aggregation,
}

pub const AGGREGATE_SUBJECT: &str = "mean";
pub const MACRO_CLASS: &str = "foreground";

fn mean_row(phase: Phase, class: &str, rows: &[&MetricRow], mode: Aggregation) -> MetricRow {
    let counts = rows
        .iter()
        .fold(ConfusionCounts::default(), |a, r| a.merge(r.counts));
    match mode {
        Aggregation::Pooled => MetricRow::from_counts(AGGREGATE_SUBJECT, phase, class, counts),
        Aggregation::PerVolume => {
            let n = rows.len() as f64;
            let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            MetricRow {
                subject: AGGREGATE_SUBJECT.into(),
                phase,
                class: class.into(),
                dice: avg(|r| r.dice),
                dice_loss: avg(|r| r.dice_loss),
                f1: avg(|r| r.f1),
                iou_percent: avg(|r| r.iou_percent),
                counts,
            }
        }
    }
}

/// Aggregates per-volume rows for each (phase, class) and macro-averages the
/// foreground classes. Aggregates are ordered by phase then class name.
pub fn aggregate_report(rows: Vec<MetricRow>, mode: Aggregation) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<(Phase, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.phase, r.class.clone()))
            .or_default()
            .push(r);
    }
    let mut aggregates = Vec::new();
    let mut by_phase: BTreeMap<Phase, Vec<MetricRow>> = BTreeMap::new();
    for ((phase, class), members) in &groups {
        let row = mean_row(*phase, class, members, mode);
        by_phase.entry(*phase).or_default().push(row.clone());
        aggregates.push(row);
    }
    for (phase, class_rows) in by_phase {
        let refs: Vec<&MetricRow> = class_rows.iter().collect();
        // macro average across classes is always an unweighted mean
        aggregates.push(mean_row(phase, MACRO_CLASS, &refs, Aggregation::PerVolume));
    }
    Ok(MetricsReport {
        rows,
        aggregates,
        mode,
    })
}

pub const CSV_HEADER: [&str; 7] = [
    "subject",
    "phase",
    "class",
    "dice",
    "dice_loss",
    "f1",
    "iou_percent",
];

/// Writes per-volume rows then aggregate rows.
pub fn write_metrics_csv(report: &MetricsReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in report.rows.iter().chain(&report.aggregates) {
        w.write_record([
            r.subject.clone(),
            r.phase.to_string(),
            r.class.clone(),
            sig6(r.dice),
            sig6(r.dice_loss),
            sig6(r.f1),
            sig6(r.iou_percent),
        ])?;
    }
    w.flush()?;
    Ok(())
}
