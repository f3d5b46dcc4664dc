//! Classification metrics over argmax predictions and class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// `counts[t * m + p]` is the number of samples of true class `t`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub m: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], truths: &[usize], m: usize) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(CoreError::Data(format!(
                "confusion matrix of {} predictions and {} labels",
                preds.len(),
                truths.len()
            )));
        }
        let mut counts = vec![0; m * m];
        for (&p, &t) in preds.iter().zip(truths) {
            if p >= m || t >= m {
                return Err(CoreError::Data(format!("class index {} out of range for {m} classes", p.max(t))));
            }
            counts[t * m + p] += 1;
        }
        Ok(ConfusionMatrix { m, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.m + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.m).map(|t| self.get(t, c)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.m).map(|p| self.get(c, p)).sum::<u64>() - self.tp(c)
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.tp(c) + self.fn_(c)
    }

    pub fn accuracy(&self) -> f64 {
        (0..self.m).map(|c| self.tp(c)).sum::<u64>() as f64 / self.total() as f64
    }

    /// `TP / (TP + (FP + FN) / 2)`, or 0 when the class never occurs.
    pub fn f1(&self, c: usize) -> f64 {
        let (tp, fp, fn_) = (self.tp(c) as f64, self.fp(c) as f64, self.fn_(c) as f64);
        let denom = tp + 0.5 * (fp + fn_);
        if denom == 0.0 {
            0.0
        } else {
            tp / denom
        }
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.tp(c), self.tp(c) + self.fp(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.tp(c), self.tp(c) + self.fn_(c))
    }

    /// Multi-class Matthews correlation from the full matrix; 0 when
    /// either marginal is concentrated on one class.
    pub fn mcc(&self) -> f64 {
        let m = self.m;
        let s = self.total() as f64;
        let c = (0..m).map(|k| self.tp(k)).sum::<u64>() as f64;
        let pred: Vec<f64> = (0..m).map(|k| (0..m).map(|t| self.get(t, k)).sum::<u64>() as f64).collect();
        let truth: Vec<f64> = (0..m).map(|k| self.support(k) as f64).collect();
        let pt: f64 = pred.iter().zip(&truth).map(|(p, t)| p * t).sum();
        let pp: f64 = pred.iter().map(|p| p * p).sum();
        let tt: f64 = truth.iter().map(|t| t * t).sum();
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (c * s - pt) / denom
        }
    }

    /// Support-weighted and plain means of a per-class quantity. The plain
    /// mean skips classes with no true samples.
    fn averages(&self, f: impl Fn(usize) -> f64) -> (f64, f64) {
        let total = self.total() as f64;
        let mut weighted = 0.0;
        let mut macro_sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.m {
            let support = self.support(c);
            if support == 0 {
                continue;
            }
            let v = f(c);
            weighted += support as f64 * v;
            macro_sum += v;
            present += 1;
        }
        (weighted / total, macro_sum / present as f64)
    }
}

fn ratio(num: u64, denom: u64) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

/// Threshold-free scores of one evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub f1_macro: f64,
    pub precision_weighted: f64,
    pub precision_macro: f64,
    pub recall_weighted: f64,
    pub recall_macro: f64,
    pub mcc: f64,
    /// Micro-averaged one-vs-rest areas.
    pub auc: f64,
    pub aupr: f64,
    pub auc_macro: f64,
    pub aupr_macro: f64,
}

/// Argmax-based quantities of a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub f1_macro: f64,
    pub precision_weighted: f64,
    pub precision_macro: f64,
    pub recall_weighted: f64,
    pub recall_macro: f64,
    pub mcc: f64,
}

pub fn aggregate(cm: &ConfusionMatrix) -> Aggregates {
    let (f1_weighted, f1_macro) = cm.averages(|c| cm.f1(c));
    let (precision_weighted, precision_macro) = cm.averages(|c| cm.precision(c));
    let (recall_weighted, recall_macro) = cm.averages(|c| cm.recall(c));
    Aggregates {
        accuracy: cm.accuracy(),
        f1_weighted,
        f1_macro,
        precision_weighted,
        precision_macro,
        recall_weighted,
        recall_macro,
        mcc: cm.mcc(),
    }
}

/// Points of a curve plus its area.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

/// Distinct-score groups in descending score order as cumulative
/// `(true positives, false positives)` after each group.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(i + 1).is_none_or(|&n| scores[n] != scores[k]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

/// ROC curve with tied scores grouped, trapezoidal area. `None` when the
/// labels are all of one kind.
pub fn binary_roc(scores: &[f64], labels: &[bool]) -> Option<Curve> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut points = vec![(0.0, 0.0)];
    let mut area = 0.0;
    for (tp, fp) in sweep(scores, labels) {
        let (x0, y0) = *points.last().expect("starts with origin");
        let (x, y) = (fp as f64 / neg, tp as f64 / pos);
        area += (x - x0) * (y + y0) / 2.0;
        points.push((x, y));
    }
    Some(Curve { points, area })
}

/// Precision-recall curve as `(recall, precision)` and the step-wise area
/// `Σ (R_k − R_{k−1}) P_k` (average precision). `None` without positives.
pub fn binary_pr(scores: &[f64], labels: &[bool]) -> Option<Curve> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut points = vec![(0.0, 1.0)];
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Some(Curve { points, area })
}

/// One-vs-rest curves for every class plus the micro average over all
/// (sample, class) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub per_class: Vec<Option<Curve>>,
    pub micro: Curve,
    /// Mean area over classes that have a defined curve.
    pub macro_area: f64,
}

fn check_probabilities(probs: &[f64], truths: &[usize], m: usize) -> Result<()> {
    if m == 0 || probs.len() != truths.len() * m || truths.is_empty() {
        return Err(CoreError::Data(format!(
            "{} scores for {} samples of {m} classes",
            probs.len(),
            truths.len()
        )));
    }
    for (i, row) in probs.chunks(m).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!("score row {i} sums to {s}, not 1")));
        }
        if truths[i] >= m {
            return Err(CoreError::Data(format!("class index {} out of range for {m} classes", truths[i])));
        }
    }
    Ok(())
}

fn curve_set(
    probs: &[f64],
    truths: &[usize],
    m: usize,
    curve: fn(&[f64], &[bool]) -> Option<Curve>,
) -> Result<CurveSet> {
    check_probabilities(probs, truths, m)?;
    let labels: Vec<bool> = truths.iter().flat_map(|&t| (0..m).map(move |c| c == t)).collect();
    let micro = curve(probs, &labels)
        .ok_or_else(|| CoreError::Data("micro-averaged curve needs both positive and negative pairs".into()))?;
    let mut per_class = Vec::with_capacity(m);
    for c in 0..m {
        let s: Vec<f64> = probs.iter().skip(c).step_by(m).copied().collect();
        let l: Vec<bool> = truths.iter().map(|&t| t == c).collect();
        per_class.push(curve(&s, &l));
    }
    let defined: Vec<f64> = per_class.iter().flatten().map(|c| c.area).collect();
    let macro_area = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(CurveSet {
        per_class,
        micro,
        macro_area,
    })
}

pub fn roc_auc(probs: &[f64], truths: &[usize], m: usize) -> Result<CurveSet> {
    curve_set(probs, truths, m, binary_roc)
}

pub fn aupr(probs: &[f64], truths: &[usize], m: usize) -> Result<CurveSet> {
    curve_set(probs, truths, m, binary_pr)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full report and curves from a row-major `[n, m]` probability matrix.
pub fn evaluate(probs: &[f64], truths: &[usize], m: usize) -> Result<(MetricReport, CurveSet, CurveSet)> {
    check_probabilities(probs, truths, m)?;
    let preds: Vec<usize> = probs.chunks(m).map(argmax).collect();
    let cm = ConfusionMatrix::new(&preds, truths, m)?;
    let a = aggregate(&cm);
    let roc = roc_auc(probs, truths, m)?;
    let pr = aupr(probs, truths, m)?;
    let report = MetricReport {
        accuracy: a.accuracy,
        f1_weighted: a.f1_weighted,
        f1_macro: a.f1_macro,
        precision_weighted: a.precision_weighted,
        precision_macro: a.precision_macro,
        recall_weighted: a.recall_weighted,
        recall_macro: a.recall_macro,
        mcc: a.mcc,
        auc: roc.micro.area,
        aupr: pr.micro.area,
        auc_macro: roc.macro_area,
        aupr_macro: pr.macro_area,
    };
    Ok((report, roc, pr))
}

/// `class,x,y` rows; the micro curve is labelled `micro`.
pub fn curves_csv(set: &CurveSet, x_name: &str, y_name: &str) -> String {
    let mut out = format!("class,{x_name},{y_name}\n");
    for (x, y) in &set.micro.points {
        out.push_str(&format!("micro,{x},{y}\n"));
    }
    for (c, curve) in set.per_class.iter().enumerate() {
        for (x, y) in curve.iter().flat_map(|c| &c.points) {
            out.push_str(&format!("{c},{x},{y}\n"));
        }
    }
    out
}
