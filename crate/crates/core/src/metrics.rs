//! Soft-label metrics (W-MAE, W-FR) and hard-label metrics (accuracy,
//! average accuracy, per-class precision/recall/F1, confusion matrix).
//!
//! Weights are assigned by rank on the *truth* vector: the largest element
//! gets 1, the second 1/2, down to 1/8. Equal values are ranked by emotion
//! index.
//!
//! W-FR needs a per-image error to threshold. The default normalisation is
//! the per-image mean of the weighted absolute differences (the inner term
//! of W-MAE, without the factor 100). [`FailureNormalization::WeightSum`]
//! divides by the sum of the weights instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, ScoringError};
use crate::model::{Emotion, EmotionVector, NUM_EMOTIONS};
use crate::par::{self, Execution};
use crate::scoring::{confidence_score, ConfidenceMode, ConfusionCounts, SoftLabel};
use crate::subsets::{ranks, Subset};

pub const DEFAULT_EPSILON: f64 = 0.3;

/// Rank-based weights of a truth vector: `1 / rank`.
pub fn rank_weights(truth: &SoftLabel) -> EmotionVector {
    ranks(truth).map(|r| 1.0 / r as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureNormalization {
    /// `(1/8) * sum_i w_i |d_i|`.
    #[default]
    PerEmotionMean,
    /// `sum_i w_i |d_i| / sum_i w_i`.
    WeightSum,
}

fn weighted_abs_sum(truth: &SoftLabel, pred: &SoftLabel) -> f64 {
    let w = rank_weights(truth);
    (0..NUM_EMOTIONS)
        .map(|i| w[i] * (truth.values()[i] - pred.values()[i]).abs())
        .sum()
}

/// Per-image weighted error used by W-FR.
pub fn image_weighted_error(truth: &SoftLabel, pred: &SoftLabel, norm: FailureNormalization) -> f64 {
    let s = weighted_abs_sum(truth, pred);
    match norm {
        FailureNormalization::PerEmotionMean => s / NUM_EMOTIONS as f64,
        FailureNormalization::WeightSum => s / rank_weights(truth).iter().sum::<f64>(),
    }
}

fn check_aligned(truth: usize, pred: usize) -> Result<(), MetricsError> {
    if truth != pred {
        return Err(MetricsError::LengthMismatch { left: truth, right: pred });
    }
    if truth == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Weighted mean absolute error, in percent.
pub fn weighted_mae(truth: &[SoftLabel], pred: &[SoftLabel]) -> Result<f64, MetricsError> {
    weighted_mae_with(truth, pred, Execution::Sequential)
}

pub fn weighted_mae_with(truth: &[SoftLabel], pred: &[SoftLabel], exec: Execution) -> Result<f64, MetricsError> {
    check_aligned(truth.len(), pred.len())?;
    let pairs: Vec<(&SoftLabel, &SoftLabel)> = truth.iter().zip(pred).collect();
    // Per-image terms in parallel, summed in input order.
    let terms = par::map_slice(&pairs, exec, |(t, p)| weighted_abs_sum(t, p));
    let total: f64 = terms.iter().sum();
    Ok(100.0 * total / (truth.len() * NUM_EMOTIONS) as f64)
}

/// Share of images whose weighted error exceeds `epsilon`, in percent.
pub fn weighted_failure_rate(truth: &[SoftLabel], pred: &[SoftLabel], epsilon: f64) -> Result<f64, MetricsError> {
    weighted_failure_rate_with(truth, pred, epsilon, FailureNormalization::default())
}

pub fn weighted_failure_rate_with(
    truth: &[SoftLabel],
    pred: &[SoftLabel],
    epsilon: f64,
    norm: FailureNormalization,
) -> Result<f64, MetricsError> {
    check_aligned(truth.len(), pred.len())?;
    let failures = truth
        .iter()
        .zip(pred)
        .filter(|(t, p)| image_weighted_error(t, p, norm) > epsilon)
        .count();
    Ok(100.0 * failures as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftReport {
    pub n: usize,
    pub w_mae: f64,
    pub w_fr: f64,
    pub epsilon: f64,
    pub normalization: FailureNormalization,
}

pub fn soft_report(
    truth: &[SoftLabel],
    pred: &[SoftLabel],
    epsilon: f64,
    norm: FailureNormalization,
    exec: Execution,
) -> Result<SoftReport, MetricsError> {
    Ok(SoftReport {
        n: truth.len(),
        w_mae: weighted_mae_with(truth, pred, exec)?,
        w_fr: weighted_failure_rate_with(truth, pred, epsilon, norm)?,
        epsilon,
        normalization: norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub emotion: Emotion,
    pub support: u64,
    pub predicted: u64,
    /// Percent; 0 when the class is never predicted.
    pub precision: f64,
    /// Percent; 0 when the class has no support.
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest score of the literal confidence formula, percent. Terms
    /// with a zero denominator contribute 0.
    pub average_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardReport {
    pub n: usize,
    /// Percent.
    pub accuracy: f64,
    /// Mean of the per-class average accuracy over classes with support, percent.
    pub average_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][pred]`.
    pub confusion: [[u64; NUM_EMOTIONS]; NUM_EMOTIONS],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Literal confidence formula with 0/0 terms taken as 0.
fn lenient_literal(c: &ConfusionCounts) -> f64 {
    match confidence_score(c, ConfidenceMode::Literal) {
        Ok(v) => v,
        Err(ScoringError::ZeroDenominator { .. }) => 0.5 * (ratio(c.tp, c.tp + c.fp) + ratio(c.tn, c.tn + c.fn_)),
        Err(e) => unreachable!("{e}"),
    }
}

pub fn hard_metrics(truth: &[Emotion], pred: &[Emotion]) -> Result<HardReport, MetricsError> {
    check_aligned(truth.len(), pred.len())?;
    let mut confusion = [[0u64; NUM_EMOTIONS]; NUM_EMOTIONS];
    for (t, p) in truth.iter().zip(pred) {
        confusion[t.index()][p.index()] += 1;
    }
    let n = truth.len() as u64;
    let correct: u64 = (0..NUM_EMOTIONS).map(|i| confusion[i][i]).sum();

    let mut per_class = Vec::with_capacity(NUM_EMOTIONS);
    for e in Emotion::ALL {
        let i = e.index();
        let support: u64 = confusion[i].iter().sum();
        let predicted: u64 = (0..NUM_EMOTIONS).map(|r| confusion[r][i]).sum();
        let tp = confusion[i][i];
        let counts = ConfusionCounts {
            tp,
            fp: predicted - tp,
            fn_: support - tp,
            tn: n + tp - support - predicted,
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            emotion: e,
            support,
            predicted,
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
            average_accuracy: 100.0 * lenient_literal(&counts),
        });
    }
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let average_accuracy = supported.iter().map(|c| c.average_accuracy).sum::<f64>() / supported.len() as f64;

    Ok(HardReport {
        n: truth.len(),
        accuracy: 100.0 * correct as f64 / n as f64,
        average_accuracy,
        per_class,
        confusion,
    })
}

/// Metrics for one stratum (or for all records).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft: Option<SoftReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard: Option<HardReport>,
    /// Soft metrics grouped by the truth hard label.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub soft_per_class: BTreeMap<Emotion, SoftReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub all: StratumReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub strata: BTreeMap<Subset, StratumReport>,
}

impl EvalReport {
    pub const KIND: &'static str = "evaluation";
}

/// One aligned record for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub truth: SoftLabel,
    pub pred: SoftLabel,
    pub truth_hard: Option<Emotion>,
    pub subset: Option<Subset>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub epsilon: f64,
    pub normalization: FailureNormalization,
    pub hard: bool,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            epsilon: DEFAULT_EPSILON,
            normalization: FailureNormalization::default(),
            hard: false,
            exec: Execution::default(),
        }
    }
}

fn stratum(records: &[&EvalRecord], opts: &EvalOptions) -> Result<StratumReport, MetricsError> {
    let truth: Vec<SoftLabel> = records.iter().map(|r| r.truth).collect();
    let pred: Vec<SoftLabel> = records.iter().map(|r| r.pred).collect();
    let soft = soft_report(&truth, &pred, opts.epsilon, opts.normalization, opts.exec)?;

    let mut soft_per_class = BTreeMap::new();
    for e in Emotion::ALL {
        let (t, p): (Vec<SoftLabel>, Vec<SoftLabel>) = records
            .iter()
            .filter(|r| r.truth_hard == Some(e))
            .map(|r| (r.truth, r.pred))
            .unzip();
        if !t.is_empty() {
            soft_per_class.insert(e, soft_report(&t, &p, opts.epsilon, opts.normalization, opts.exec)?);
        }
    }

    let hard = if opts.hard {
        let truth_hard: Option<Vec<Emotion>> = records.iter().map(|r| r.truth_hard).collect();
        let truth_hard = truth_hard.ok_or(MetricsError::Empty)?;
        let pred_hard: Vec<Emotion> = records.iter().map(|r| r.pred.argmax()).collect();
        Some(hard_metrics(&truth_hard, &pred_hard)?)
    } else {
        None
    };
    Ok(StratumReport {
        soft: Some(soft),
        hard,
        soft_per_class,
    })
}

/// Evaluates all records and, when subsets are present, each subset alone.
/// Hard predictions are the argmax of the predicted soft-label.
pub fn evaluate(records: &[EvalRecord], opts: &EvalOptions) -> Result<EvalReport, MetricsError> {
    let all_refs: Vec<&EvalRecord> = records.iter().collect();
    let all = stratum(&all_refs, opts)?;
    let mut strata = BTreeMap::new();
    for s in Subset::ALL {
        let refs: Vec<&EvalRecord> = records.iter().filter(|r| r.subset == Some(s)).collect();
        if !refs.is_empty() {
            strata.insert(s, stratum(&refs, opts)?);
        }
    }
    Ok(EvalReport {
        kind: EvalReport::KIND.to_string(),
        all,
        strata,
    })
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    fn columns(&self) -> Vec<(String, &StratumReport)> {
        let mut cols = vec![("All".to_string(), &self.all)];
        for (s, r) in &self.strata {
            cols.push((s.name().to_string(), r));
        }
        cols
    }

    /// Markdown tables: accuracy / average accuracy, per-class P/R/F1 and
    /// confusion matrices (hard metrics only), W-FR / W-MAE overall and per
    /// class.
    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            out.push_str(&format!("| {first} |"));
            for (name, _) in &cols {
                out.push_str(&format!(" {name} |"));
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(cols.len()));
            out.push('\n');
        };

        if cols.iter().any(|(_, r)| r.hard.is_some()) {
            out.push_str("### Accuracy\n\n");
            header(&mut out, "");
            for (label, pick) in [
                ("Acc (%)", (|h: &HardReport| h.accuracy) as fn(&HardReport) -> f64),
                ("Avg Acc (%)", |h: &HardReport| h.average_accuracy),
            ] {
                out.push_str(&format!("| {label} |"));
                for (_, r) in &cols {
                    let cell = r.hard.as_ref().map_or("-".to_string(), |h| pct(pick(h)));
                    out.push_str(&format!(" {cell} |"));
                }
                out.push('\n');
            }

            out.push_str("\n### Per-class precision, recall and F-1 (%)\n\n");
            for (name, r) in &cols {
                let Some(h) = &r.hard else { continue };
                out.push_str(&format!("**{name}**\n\n| |"));
                for e in Emotion::ALL {
                    out.push_str(&format!(" {e} |"));
                }
                out.push_str("\n|---|");
                out.push_str(&"---|".repeat(NUM_EMOTIONS));
                out.push('\n');
                for (label, pick) in [
                    ("Prec", (|c: &ClassMetrics| c.precision) as fn(&ClassMetrics) -> f64),
                    ("Rec", |c: &ClassMetrics| c.recall),
                    ("F-1", |c: &ClassMetrics| c.f1),
                ] {
                    out.push_str(&format!("| {label} |"));
                    for c in &h.per_class {
                        out.push_str(&format!(" {} |", pct(pick(c))));
                    }
                    out.push('\n');
                }
                out.push('\n');
            }

            out.push_str("### Confusion matrices (rows: truth, columns: prediction)\n\n");
            for (name, r) in &cols {
                let Some(h) = &r.hard else { continue };
                out.push_str(&format!("**{name}**\n\n| |"));
                for e in Emotion::ALL {
                    out.push_str(&format!(" {e} |"));
                }
                out.push_str("\n|---|");
                out.push_str(&"---|".repeat(NUM_EMOTIONS));
                out.push('\n');
                for e in Emotion::ALL {
                    out.push_str(&format!("| {e} |"));
                    for v in h.confusion[e.index()] {
                        out.push_str(&format!(" {v} |"));
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
        }

        out.push_str("### Weighted soft-label error\n\n");
        header(&mut out, "");
        for (label, pick) in [
            ("W-FR (%)", (|s: &SoftReport| s.w_fr) as fn(&SoftReport) -> f64),
            ("W-MAE (%)", |s: &SoftReport| s.w_mae),
        ] {
            out.push_str(&format!("| {label} |"));
            for (_, r) in &cols {
                let cell = r.soft.as_ref().map_or("-".to_string(), |s| pct(pick(s)));
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }

        if cols.iter().any(|(_, r)| !r.soft_per_class.is_empty()) {
            out.push_str("\n### Weighted soft-label error per class (%)\n\n");
            out.push_str("| | |");
            for (name, _) in &cols {
                out.push_str(&format!(" {name} |"));
            }
            out.push_str("\n|---|---|");
            out.push_str(&"---|".repeat(cols.len()));
            out.push('\n');
            for e in Emotion::ALL {
                for (label, pick) in [
                    ("W-FR", (|s: &SoftReport| s.w_fr) as fn(&SoftReport) -> f64),
                    ("W-MAE", |s: &SoftReport| s.w_mae),
                ] {
                    out.push_str(&format!("| {e} | {label} |"));
                    for (_, r) in &cols {
                        let cell = r.soft_per_class.get(&e).map_or("-".to_string(), |s| pct(pick(s)));
                        out.push_str(&format!(" {cell} |"));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}
