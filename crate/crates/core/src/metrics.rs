//! Binary classification metrics: AUROC, average precision, confusion
//! matrices and ROC / precision-recall curve points.
//!
//! Ties in score share a threshold: AUROC credits tied positive/negative
//! pairs with one half and AP steps over tie groups as a unit.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::plot::{svg_line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    /// Predicted probability of class 1.
    pub score: f64,
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> Self {
        ScoredSample { score, label }
    }
}

/// Cumulative counts after including every sample with score ≥ threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Step {
    threshold: f64,
    tp: u64,
    fp: u64,
}

fn validate(samples: &[ScoredSample]) -> Result<(u64, u64)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Input(format!("non-finite score {}", s.score)));
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(Error::Input(format!("label {} is not binary", s.label)));
    }
    let pos = samples.iter().filter(|s| s.label == 1).count() as u64;
    Ok((pos, samples.len() as u64 - pos))
}

/// One step per distinct score, in descending score order.
fn steps(samples: &[ScoredSample]) -> Vec<Step> {
    let mut sorted: Vec<ScoredSample> = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<Step> = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(Step { threshold: t, tp, fp });
    }
    out
}

fn need_both(pos: u64, neg: u64, what: &str) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Equal to the trapezoidal ROC area.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = validate(samples)?;
    need_both(pos, neg, "AUROC")?;
    // Twice the trapezoid sum, kept in integers so the result is exact.
    let mut twice_area: u128 = 0;
    let (mut ptp, mut pfp) = (0u64, 0u64);
    for s in steps(samples) {
        twice_area += (s.fp - pfp) as u128 * (s.tp + ptp) as u128;
        ptp = s.tp;
        pfp = s.fp;
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Step-interpolated area under the precision-recall curve,
/// `Σ (R_n − R_{n−1})·P_n` over descending thresholds.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, _) = validate(samples)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    // Summing `Δtp·P` and dividing once keeps a perfect ranking at exactly 1.
    let mut acc = 0.0;
    let mut prev_tp = 0u64;
    for s in steps(samples) {
        let precision = s.tp as f64 / (s.tp + s.fp) as f64;
        acc += (s.tp - prev_tp) as f64 * precision;
        prev_tp = s.tp;
    }
    Ok(acc / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Rows are the true class (0, 1), columns the predicted class; each row
    /// is divided by its true-class count (all zeros for an absent class).
    pub normalized: [[f64; 2]; 2],
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

/// Predict class 1 iff `score ≥ threshold`.
pub fn confusion(samples: &[ScoredSample], threshold: f64) -> Result<Confusion> {
    validate(samples)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Input(format!("threshold {threshold} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for s in samples {
        match (s.label == 1, s.score >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let row = |a: u64, b: u64| {
        let n = a + b;
        if n == 0 {
            [0.0, 0.0]
        } else {
            [a as f64 / n as f64, b as f64 / n as f64]
        }
    };
    Ok(Confusion {
        threshold,
        tp,
        fp,
        fn_,
        tn,
        normalized: [row(tn, fp), row(fn_, tp)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    /// Score threshold producing the point (`+inf` for the origin).
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    /// `(FPR, TPR)`, starting at `(0, 0)` and ending at `(1, 1)`.
    pub roc: Vec<CurvePoint>,
    /// `(recall, precision)`, starting at `(0, 1)`.
    pub pr: Vec<CurvePoint>,
}

impl Curves {
    pub fn roc_trapezoid(&self) -> f64 {
        self.roc
            .windows(2)
            .map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0)
            .sum()
    }

    pub fn pr_step_sum(&self) -> f64 {
        self.pr.windows(2).map(|w| (w[1].x - w[0].x) * w[1].y).sum()
    }
}

pub fn curves(samples: &[ScoredSample]) -> Result<Curves> {
    let (pos, neg) = validate(samples)?;
    need_both(pos, neg, "ROC/PR curves")?;
    let st = steps(samples);
    let mut roc = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut pr = vec![CurvePoint {
        x: 0.0,
        y: 1.0,
        threshold: f64::INFINITY,
    }];
    for s in st {
        roc.push(CurvePoint {
            x: s.fp as f64 / neg as f64,
            y: s.tp as f64 / pos as f64,
            threshold: s.threshold,
        });
        pr.push(CurvePoint {
            x: s.tp as f64 / pos as f64,
            y: s.tp as f64 / (s.tp + s.fp) as f64,
            threshold: s.threshold,
        });
    }
    Ok(Curves { roc, pr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub auroc: f64,
    pub average_precision: f64,
    pub confusion: Confusion,
    pub curves: Curves,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl EvalReport {
    pub fn compute(samples: &[ScoredSample], threshold: f64) -> Result<Self> {
        Ok(EvalReport {
            n_samples: samples.len(),
            auroc: auroc(samples)?,
            average_precision: average_precision(samples)?,
            confusion: confusion(samples, threshold)?,
            curves: curves(samples)?,
        })
    }

    pub fn metrics_csv(&self) -> String {
        let c = &self.confusion;
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "auroc,{}", self.auroc);
        let _ = writeln!(s, "average_precision,{}", self.average_precision);
        let _ = writeln!(s, "accuracy,{}", c.accuracy());
        let _ = writeln!(s, "threshold,{}", c.threshold);
        let _ = writeln!(s, "n_samples,{}", self.n_samples);
        let _ = writeln!(s, "tp,{}", c.tp);
        let _ = writeln!(s, "fp,{}", c.fp);
        let _ = writeln!(s, "fn,{}", c.fn_);
        let _ = writeln!(s, "tn,{}", c.tn);
        s
    }

    pub fn roc_csv(&self) -> String {
        points_csv("fpr,tpr,threshold", &self.curves.roc)
    }

    pub fn pr_csv(&self) -> String {
        points_csv("recall,precision,threshold", &self.curves.pr)
    }

    /// Counts and row-normalised fractions (never percentages).
    pub fn confusion_csv(&self) -> String {
        let c = &self.confusion;
        let n = c.normalized;
        let mut s = String::from("true_class,pred_0,pred_1,frac_pred_0,frac_pred_1\n");
        let _ = writeln!(s, "0,{},{},{},{}", c.tn, c.fp, n[0][0], n[0][1]);
        let _ = writeln!(s, "1,{},{},{},{}", c.fn_, c.tp, n[1][0], n[1][1]);
        s
    }

    pub fn roc_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.curves.roc.iter().map(|p| (p.x, p.y)).collect();
        svg_line_chart(
            &format!("ROC (AUROC = {:.4})", self.auroc),
            "false positive rate",
            "true positive rate",
            &[
                Series::new("model", pts),
                Series::new("chance", vec![(0.0, 0.0), (1.0, 1.0)]),
            ],
            Some((0.0, 1.0, 0.0, 1.0)),
        )
    }

    pub fn pr_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.curves.pr.iter().map(|p| (p.x, p.y)).collect();
        svg_line_chart(
            &format!("Precision-recall (AP = {:.4})", self.average_precision),
            "recall",
            "precision",
            &[Series::new("model", pts)],
            Some((0.0, 1.0, 0.0, 1.0)),
        )
    }
}

fn points_csv(header: &str, pts: &[CurvePoint]) -> String {
    let mut s = format!("{header}\n");
    for p in pts {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.threshold);
    }
    s
}

/// Parse the `metric,value` rows of a `metrics.csv`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Input(format!("bad metrics row {l:?}")))?;
            let v = v
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad metrics value {v:?}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}
