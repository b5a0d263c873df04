//! Binary classification metrics and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold turning scores into 0/1 predictions.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::UndefinedMetric(format!(
            "length mismatch: {a} predictions vs {b} labels"
        )));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric("empty input".into()));
    }
    Ok(())
}

pub fn confusion(pred: &[u8], labels: &[u8]) -> Result<Confusion> {
    check_lengths(pred.len(), labels.len())?;
    let mut c = Confusion::default();
    for (&p, &y) in pred.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve in its Mann–Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn rocauc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROCAUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Per tie group: negatives strictly below count fully, negatives inside
    // the group count half. Integer arithmetic keeps this exact.
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] != 0).count() as u128;
        let neg = group.len() as u128 - pos;
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean of true-positive and true-negative rates.
pub fn balanced_accuracy(pred: &[u8], labels: &[u8]) -> Result<f64> {
    let c = confusion(pred, labels)?;
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::UndefinedMetric(
            "balanced accuracy needs both classes present".into(),
        ));
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn f1(pred: &[u8], labels: &[u8]) -> Result<f64> {
    let c = confusion(pred, labels)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    if c.tp == 0 || denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

pub fn accuracy(pred: &[u8], labels: &[u8]) -> Result<f64> {
    let c = confusion(pred, labels)?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

pub fn binarize(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// ROC curve as `(fpr, tpr)` points from `(0,0)` to `(1,1)`, one point per
/// distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n_neg, tp / n_pos));
    }
    Ok(points)
}

/// One evaluated model at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model: String,
    pub horizon: u32,
    pub feature_count: usize,
    /// Probabilities, or 0/1 predictions for rule-based models.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub horizon: u32,
    pub feature_count: usize,
    pub rocauc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub threshold: f64,
}

/// Scores every run and orders rows by `(horizon, model order of first
/// appearance)`. Runs sharing a horizon must share the label vector.
pub fn build_report(runs: &[EvalRun]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let mut labels_by_horizon: BTreeMap<u32, &[u8]> = BTreeMap::new();
    for r in runs {
        if let Some(prev) = labels_by_horizon.insert(r.horizon, &r.labels) {
            if prev != r.labels.as_slice() {
                return Err(Error::Report(format!(
                    "model {} at horizon {} was scored on a different label vector",
                    r.model, r.horizon
                )));
            }
        }
    }
    let mut model_order: Vec<&str> = Vec::new();
    for r in runs {
        if !model_order.contains(&r.model.as_str()) {
            model_order.push(&r.model);
        }
    }
    let mut sorted: Vec<&EvalRun> = runs.iter().collect();
    sorted.sort_by_key(|r| {
        (
            r.horizon,
            model_order
                .iter()
                .position(|m| *m == r.model)
                .unwrap_or(usize::MAX),
        )
    });
    let rows = sorted
        .into_iter()
        .map(|r| {
            let pred = binarize(&r.scores, DECISION_THRESHOLD);
            Ok(ReportRow {
                model: r.model.clone(),
                horizon: r.horizon,
                feature_count: r.feature_count,
                rocauc: rocauc(&r.scores, &r.labels)?,
                accuracy: accuracy(&pred, &r.labels)?,
                f1: f1(&pred, &r.labels)?,
                balanced_accuracy: balanced_accuracy(&pred, &r.labels)?,
                n_test: r.labels.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows,
        threshold: DECISION_THRESHOLD,
    })
}

impl EvalReport {
    pub fn row(&self, model: &str, horizon: u32) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.horizon == horizon)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let rows = csv::Reader::from_reader(file)
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(Self {
            rows,
            threshold: DECISION_THRESHOLD,
        })
    }

    /// Fixed-width table with one block per horizon.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.model.len() + 6)
            .max()
            .unwrap_or(10)
            .max(10);
        let mut out = String::new();
        let mut last_h = None;
        for r in &self.rows {
            if last_h != Some(r.horizon) {
                if last_h.is_some() {
                    out.push('\n');
                }
                let _ = writeln!(out, "next {} year(s)  (n_test = {})", r.horizon, r.n_test);
                let _ = writeln!(
                    out,
                    "{:<name_w$} {:>8} {:>8} {:>8} {:>8}",
                    "model", "ROCAUC", "Acc", "F1", "BalAcc"
                );
                last_h = Some(r.horizon);
            }
            let label = format!("{} ({})", r.model, r.feature_count);
            let _ = writeln!(
                out,
                "{:<name_w$} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                label, r.rocauc, r.accuracy, r.f1, r.balanced_accuracy
            );
        }
        let _ = writeln!(out, "\nthreshold for Acc/F1/BalAcc: {}", self.threshold);
        out
    }
}

/// Writes `roc_<model>_<horizon>.png` into `dir` for each run.
pub fn write_roc_figures(runs: &[EvalRun], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for r in runs {
        let points = roc_curve(&r.scores, &r.labels)?;
        let path = dir.join(format!("roc_{}_{}.png", r.model, r.horizon));
        render_roc(&points, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn render_roc(points: &[(f64, f64)], path: &Path) -> Result<()> {
    const SIZE: u32 = 320;
    const MARGIN: u32 = 20;
    let span = (SIZE - 2 * MARGIN) as f64;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let to_px = |(x, y): (f64, f64)| (MARGIN as f64 + x * span, (SIZE - MARGIN) as f64 - y * span);
    let mut line = |a: (f64, f64), b: (f64, f64), color: [u8; 3]| {
        let (pa, pb) = (to_px(a), to_px(b));
        let steps = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (pa.0 + t * (pb.0 - pa.0)).round() as u32;
            let y = (pa.1 + t * (pb.1 - pa.1)).round() as u32;
            if x < SIZE && y < SIZE {
                img.put_pixel(x, y, image::Rgb(color));
            }
        }
    };
    line((0.0, 0.0), (1.0, 0.0), [0, 0, 0]);
    line((0.0, 0.0), (0.0, 1.0), [0, 0, 0]);
    line((0.0, 0.0), (1.0, 1.0), [180, 180, 180]);
    for w in points.windows(2) {
        line(w[0], w[1], [200, 30, 30]);
    }
    img.save(path)
        .map_err(|e| Error::artifact(path, format!("png encode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rocauc_examples() {
        assert_eq!(rocauc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(rocauc(&[0.1, 0.2, 0.3, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(rocauc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(
            rocauc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(rocauc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(
            balanced_accuracy(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        assert_eq!(
            balanced_accuracy(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap(),
            0.5
        );
        assert_eq!(
            balanced_accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap(),
            0.75
        );
        assert!(balanced_accuracy(&[1, 0], &[0, 0]).is_err());
    }

    #[test]
    fn f1_and_accuracy_examples() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(f1(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert!((f1(&[1, 1, 0], &[1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((accuracy(&[1, 1, 0], &[1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn curve_ends_at_corners() {
        let pts = roc_curve(&[0.2, 0.9, 0.4, 0.4], &[0, 1, 1, 0]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    fn run(model: &str, h: u32, labels: Vec<u8>) -> EvalRun {
        let scores = labels.iter().map(|&y| y as f64 * 0.6 + 0.2).collect();
        EvalRun {
            model: model.into(),
            horizon: h,
            feature_count: 25,
            scores,
            labels,
        }
    }

    #[test]
    fn report_orders_rows_and_checks_labels() {
        let labels = vec![0, 1, 0, 1];
        let runs: Vec<EvalRun> = [5, 1, 2]
            .iter()
            .flat_map(|&h| {
                [
                    run("baseline", h, labels.clone()),
                    run("statistical", h, labels.clone()),
                ]
            })
            .collect();
        let report = build_report(&runs).unwrap();
        assert_eq!(report.rows.len(), 6);
        let order: Vec<(u32, &str)> = report
            .rows
            .iter()
            .map(|r| (r.horizon, r.model.as_str()))
            .collect();
        assert_eq!(order[0], (1, "baseline"));
        assert_eq!(order[1], (1, "statistical"));
        assert_eq!(order[5], (5, "statistical"));
        assert!(report.to_table().contains("statistical (25)"));

        let mut bad = runs.clone();
        bad[1].labels = vec![1, 1, 0, 0];
        assert!(matches!(build_report(&bad), Err(Error::Report(_))));
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let report = build_report(&[run("baseline", 1, vec![0, 1, 1])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "model,horizon,feature_count,rocauc,accuracy,f1,balanced_accuracy,n_test\n"
        ));
        assert_eq!(EvalReport::read_csv(&p).unwrap(), report);
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let files =
            write_roc_figures(&[run("transfer_head", 2, vec![0, 1, 1, 0])], dir.path()).unwrap();
        assert!(files[0].ends_with("roc_transfer_head_2.png"));
        assert!(files[0].exists());
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(-5.0f64..5.0, n),
                    proptest::collection::vec(0u8..2, n),
                )
            })
            .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    }

    proptest! {
        #[test]
        fn monotone_transforms_keep_auc((s, y) in scored()) {
            let base = rocauc(&s, &y).unwrap();
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let aff: Vec<f64> = s.iter().map(|v| 3.0 * v + 7.0).collect();
            prop_assert_eq!(rocauc(&exp, &y).unwrap(), base);
            prop_assert_eq!(rocauc(&aff, &y).unwrap(), base);
        }

        #[test]
        fn negation_complements_auc((s, y) in scored()) {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = rocauc(&s, &y).unwrap() + rocauc(&neg, &y).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_predictor_balanced_accuracy((_, y) in scored(), c in 0u8..2) {
            let pred = vec![c; y.len()];
            prop_assert_eq!(balanced_accuracy(&pred, &y).unwrap(), 0.5);
        }

        #[test]
        fn thresholded_confusion_sums((s, y) in scored(), t in -5.0f64..5.0) {
            let c = confusion(&binarize(&s, t), &y).unwrap();
            prop_assert_eq!(c.total(), y.len());
        }
    }
}
