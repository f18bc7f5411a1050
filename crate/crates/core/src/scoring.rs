//! Confidence scores, semantic scores, the AU similarity chain and soft-label
//! fusion.
//!
//! The per-image chain for the AU classifier of emotion `e` is
//!
//! ```text
//! au_hat -> similarity vector (8) -> binary similarity vs e (2)
//!        -> softmax (APV) -> mean with the binary head (P) -> CS_au[e] * P[0]
//! ```
//!
//! and the ensemble side averages `CS_j[e] * p_j[e]` over the three backbones.
//! The soft-label element is the mean of the two semantic scores.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::ScoringError;
use crate::model::{
    AuScoreVector, AuTable, AuVector, AusVariant, Emotion, EmotionVector, NUM_EMOTIONS,
};
use crate::par::{self, Execution};

/// Similarity assigned to Neutral, which has no AUs.
pub const DEFAULT_SIM_NEUTRAL: f64 = 0.25;

/// Probability at or above which a binary prediction counts as positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Eight independent per-emotion probabilities. Not normalised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftLabel(EmotionVector);

impl SoftLabel {
    pub fn new(values: EmotionVector) -> Result<SoftLabel, ScoringError> {
        for (e, v) in Emotion::ALL.iter().zip(values) {
            if !(0.0..=1.0).contains(&v) {
                return Err(ScoringError::OutOfRange {
                    what: format!("soft-label[{e}]"),
                    value: v,
                });
            }
        }
        Ok(SoftLabel(values))
    }

    pub fn zeros() -> SoftLabel {
        SoftLabel([0.0; NUM_EMOTIONS])
    }

    pub fn values(&self) -> &EmotionVector {
        &self.0
    }

    pub fn get(&self, emotion: Emotion) -> f64 {
        self.0[emotion.index()]
    }

    /// Highest-scoring emotion; ties go to the lower index.
    pub fn argmax(&self) -> Emotion {
        let mut best = 0;
        for i in 1..NUM_EMOTIONS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Emotion::ALL[best]
    }
}

impl TryFrom<Vec<f64>> for SoftLabel {
    type Error = ScoringError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let arr: EmotionVector = v.try_into().map_err(|v: Vec<f64>| ScoringError::Arity {
            expected: NUM_EMOTIONS,
            got: v.len(),
        })?;
        SoftLabel::new(arr)
    }
}

impl From<SoftLabel> for Vec<f64> {
    fn from(s: SoftLabel) -> Self {
        s.0.to_vec()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies one prediction.
    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.tn += rhs.tn;
        self.fn_ += rhs.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    /// `(TP/(TP+FP) + TN/(TN+FN)) / 2`, as the formula is printed.
    #[default]
    Literal,
    /// `(TP/(TP+FN) + TN/(TN+FP)) / 2`, i.e. balanced accuracy.
    Balanced,
}

impl ConfidenceMode {
    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMode::Literal => "literal",
            ConfidenceMode::Balanced => "balanced",
        }
    }
}

impl fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn confidence_score(c: &ConfusionCounts, mode: ConfidenceMode) -> Result<f64, ScoringError> {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let zero = |term| ScoringError::ZeroDenominator {
        mode: mode.name(),
        term,
    };
    match mode {
        ConfidenceMode::Literal => {
            if c.tp + c.fp == 0 {
                return Err(zero("TP+FP"));
            }
            if c.tn + c.fn_ == 0 {
                return Err(zero("TN+FN"));
            }
            Ok(0.5 * (tp / (tp + fp) + tn / (tn + fn_)))
        }
        ConfidenceMode::Balanced => {
            if c.tp + c.fn_ == 0 {
                return Err(zero("TP+FN"));
            }
            if c.tn + c.fp == 0 {
                return Err(zero("TN+FP"));
            }
            Ok(0.5 * (tp / (tp + fn_) + tn / (tn + fp)))
        }
    }
}

pub fn semantic_score_ebc(cs: f64, p: f64) -> f64 {
    cs * p
}

/// Mean of `cs_j * p_j` over exactly three backbones.
pub fn semantic_score_ebc_mean(cs: &[f64], p: &[f64]) -> Result<f64, ScoringError> {
    for got in [cs.len(), p.len()] {
        if got != 3 {
            return Err(ScoringError::Arity { expected: 3, got });
        }
    }
    Ok(cs.iter().zip(p).map(|(c, p)| semantic_score_ebc(*c, *p) / 3.0).sum())
}

/// Mean of `cs_j * p_j` over however many backbones are available.
fn semantic_score_partial(cs: &[f64], p: &[f64]) -> f64 {
    let n = cs.len() as f64;
    cs.iter().zip(p).map(|(c, p)| semantic_score_ebc(*c, *p) / n).sum()
}

/// Weighted overlap between a predicted AU vector and each emotion's AU set.
pub fn similarity_vector(
    au_hat: &AuVector,
    table: &AuTable,
    aus: &AuScoreVector,
    sim_neutral: f64,
) -> EmotionVector {
    let mut sv = [0.0; NUM_EMOTIONS];
    for e in Emotion::EXPRESSIVE {
        let ind = table.indicator(e);
        sv[e.index()] = (0..au_hat.len())
            .map(|i| aus.0[i] * ind[i] * au_hat[i])
            .sum();
    }
    sv[Emotion::Neutral.index()] = sim_neutral;
    sv
}

/// `(sv[gt], mean of the other seven)`.
pub fn binary_similarity(sv: &EmotionVector, gt: Emotion) -> [f64; 2] {
    let rest: f64 = gt.others().map(|e| sv[e.index()]).sum();
    [sv[gt.index()], rest / (NUM_EMOTIONS - 1) as f64]
}

/// Two-way softmax, shifted by the max for stability.
pub fn au_probability(bsv: [f64; 2]) -> [f64; 2] {
    let m = bsv[0].max(bsv[1]);
    let e0 = (bsv[0] - m).exp();
    let e1 = (bsv[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

pub fn au_fused_probability(bpv: [f64; 2], apv: [f64; 2]) -> [f64; 2] {
    [0.5 * (bpv[0] + apv[0]), 0.5 * (bpv[1] + apv[1])]
}

/// Element-wise mean of the two semantic score vectors.
pub fn fuse_soft_label(ebc_mean: &EmotionVector, au: &EmotionVector) -> Result<SoftLabel, ScoringError> {
    let mut out = [0.0; NUM_EMOTIONS];
    for i in 0..NUM_EMOTIONS {
        out[i] = 0.5 * (ebc_mean[i] + au[i]);
    }
    SoftLabel::new(out)
}

/// Binary-head output and AU vector of one emotion's AU model for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuHead {
    /// `[positive, negative]`.
    pub bpv: [f64; 2],
    pub au_hat: AuVector,
}

/// Positive-class probability from each backbone for one emotion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneScore {
    pub backbone: String,
    pub p: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEbc {
    pub per_emotion: [Vec<BackboneScore>; NUM_EMOTIONS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EbcPredictions {
    /// Backbone ids in first-seen order.
    pub backbones: Vec<String>,
    pub images: IndexMap<String, ImageEbc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAu {
    pub per_emotion: [AuHead; NUM_EMOTIONS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuPredictions {
    pub images: IndexMap<String, ImageAu>,
}

/// Per-classifier, per-emotion confidence scores (`conf.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub mode: ConfidenceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Per-backbone scores of the binary ensemble.
    #[serde(default)]
    pub ebc: IndexMap<String, EmotionVector>,
    /// Scores of the ensemble as a whole.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ebc_ensemble: Option<EmotionVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub au: Option<EmotionVector>,
    /// Counts the scores were computed from, keyed like the rows above
    /// (`ensemble` and `au` for the non-backbone rows).
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub counts: IndexMap<String, [ConfusionCounts; NUM_EMOTIONS]>,
}

impl ConfidenceTable {
    /// Published per-class scores: per-backbone average accuracies, the
    /// ensemble row and the AU-classifier row, as fractions.
    pub fn published() -> ConfidenceTable {
        let mut ebc = IndexMap::new();
        ebc.insert(
            "resnet50".to_string(),
            [0.7948, 0.8713, 0.7700, 0.8564, 0.8385, 0.8037, 0.8392, 0.6523],
        );
        ebc.insert(
            "efficientnet_b3".to_string(),
            [0.8291, 0.8733, 0.7988, 0.8634, 0.8256, 0.8578, 0.8259, 0.6960],
        );
        ebc.insert(
            "xception".to_string(),
            [0.8155, 0.8804, 0.8276, 0.8748, 0.8479, 0.8741, 0.8763, 0.6551],
        );
        ConfidenceTable {
            mode: ConfidenceMode::Literal,
            source: Some("published per-class confidence scores".to_string()),
            ebc,
            ebc_ensemble: Some([0.8133, 0.8745, 0.7988, 0.8647, 0.8376, 0.8452, 0.8469, 0.6678]),
            au: Some([0.8871, 0.8750, 0.8464, 0.9071, 0.8900, 0.8628, 0.8478, 0.7778]),
            counts: IndexMap::new(),
        }
    }

    fn validate_row(name: &str, row: &EmotionVector) -> Result<(), ScoringError> {
        for (e, v) in Emotion::ALL.iter().zip(row) {
            if !(0.0..=1.0).contains(v) {
                return Err(ScoringError::OutOfRange {
                    what: format!("confidence[{name}][{e}]"),
                    value: *v,
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        for (name, row) in &self.ebc {
            Self::validate_row(name, row)?;
        }
        if let Some(row) = &self.ebc_ensemble {
            Self::validate_row("ebc_ensemble", row)?;
        }
        if let Some(row) = &self.au {
            Self::validate_row("au", row)?;
        }
        Ok(())
    }
}

/// Where each backbone's confidence comes from when averaging the ensemble.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EbcConfidenceSource {
    /// Each backbone weighted by its own row.
    #[default]
    PerBackbone,
    /// All backbones weighted by the ensemble row.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub sim_neutral: f64,
    pub ebc_confidence: EbcConfidenceSource,
    /// Average over whichever backbones are present instead of failing.
    pub allow_partial: bool,
    pub aus_variant: AusVariant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            sim_neutral: DEFAULT_SIM_NEUTRAL,
            ebc_confidence: EbcConfidenceSource::PerBackbone,
            allow_partial: false,
            aus_variant: AusVariant::Published,
        }
    }
}

/// Intermediate and final scores for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScores {
    pub ebc_mean: EmotionVector,
    pub au_semantic: EmotionVector,
    pub soft_label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub scores: ImageScores,
}

/// Positive-class probability of emotion `e`'s AU model (fused `P[0]`).
pub fn au_positive_probability(
    head: &AuHead,
    emotion: Emotion,
    table: &AuTable,
    aus: &AuScoreVector,
    sim_neutral: f64,
) -> f64 {
    let sv = similarity_vector(&head.au_hat, table, aus, sim_neutral);
    let apv = au_probability(binary_similarity(&sv, emotion));
    au_fused_probability(head.bpv, apv)[0]
}

/// Fuses ensemble and AU-classifier outputs into soft-labels.
#[derive(Debug, Clone)]
pub struct SoftLabeler {
    table: AuTable,
    aus: AuScoreVector,
    confidence: ConfidenceTable,
    config: FusionConfig,
}

impl SoftLabeler {
    pub fn new(confidence: ConfidenceTable, config: FusionConfig) -> Result<SoftLabeler, ScoringError> {
        confidence.validate()?;
        if confidence.au.is_none() {
            return Err(ScoringError::MissingClassifier("au".into()));
        }
        if config.ebc_confidence == EbcConfidenceSource::Ensemble && confidence.ebc_ensemble.is_none() {
            return Err(ScoringError::MissingClassifier("ebc_ensemble".into()));
        }
        let table = AuTable::emfacs();
        let aus = AuScoreVector::for_variant(config.aus_variant, &table);
        Ok(SoftLabeler {
            table,
            aus,
            confidence,
            config,
        })
    }

    pub fn with_tables(mut self, table: AuTable, aus: AuScoreVector) -> SoftLabeler {
        self.table = table;
        self.aus = aus;
        self
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn confidence(&self) -> &ConfidenceTable {
        &self.confidence
    }

    fn backbone_confidence(&self, backbone: &str, emotion: Emotion) -> Result<f64, ScoringError> {
        match self.config.ebc_confidence {
            EbcConfidenceSource::Ensemble => Ok(self.confidence.ebc_ensemble.expect("checked in new")[emotion.index()]),
            EbcConfidenceSource::PerBackbone => self
                .confidence
                .ebc
                .get(backbone)
                .map(|row| row[emotion.index()])
                .ok_or_else(|| ScoringError::MissingClassifier(format!("ebc:{backbone}"))),
        }
    }

    /// Ensemble semantic score for every emotion.
    pub fn ebc_semantic(&self, image_id: &str, ebc: &ImageEbc) -> Result<EmotionVector, ScoringError> {
        let mut out = [0.0; NUM_EMOTIONS];
        for e in Emotion::ALL {
            let scores = &ebc.per_emotion[e.index()];
            let mut cs = Vec::with_capacity(scores.len());
            let mut p = Vec::with_capacity(scores.len());
            for s in scores {
                cs.push(self.backbone_confidence(&s.backbone, e)?);
                p.push(s.p);
            }
            out[e.index()] = if self.config.allow_partial && !scores.is_empty() {
                semantic_score_partial(&cs, &p)
            } else {
                semantic_score_ebc_mean(&cs, &p).map_err(|_| ScoringError::Incomplete {
                    image_id: image_id.to_string(),
                    message: format!("{e} has {} backbone predictions, expected 3", scores.len()),
                })?
            };
        }
        Ok(out)
    }

    /// AU-classifier semantic score for every emotion.
    pub fn au_semantic(&self, au: &ImageAu) -> EmotionVector {
        let cs = self.confidence.au.expect("checked in new");
        let mut out = [0.0; NUM_EMOTIONS];
        for e in Emotion::ALL {
            let p = au_positive_probability(
                &au.per_emotion[e.index()],
                e,
                &self.table,
                &self.aus,
                self.config.sim_neutral,
            );
            out[e.index()] = cs[e.index()] * p;
        }
        out
    }

    pub fn score_image(&self, image_id: &str, ebc: &ImageEbc, au: &ImageAu) -> Result<ImageScores, ScoringError> {
        let ebc_mean = self.ebc_semantic(image_id, ebc)?;
        let au_semantic = self.au_semantic(au);
        let soft_label = fuse_soft_label(&ebc_mean, &au_semantic)?;
        Ok(ImageScores {
            ebc_mean,
            au_semantic,
            soft_label,
        })
    }

    /// Labels every image of `ebc` (in its order). Each image must also be
    /// present in `au`, and vice versa.
    pub fn label_batch(
        &self,
        ebc: &EbcPredictions,
        au: &AuPredictions,
        exec: Execution,
    ) -> Result<Vec<LabeledImage>, ScoringError> {
        if let Some(extra) = au.images.keys().find(|id| !ebc.images.contains_key(*id)) {
            return Err(ScoringError::Incomplete {
                image_id: extra.clone(),
                message: "present in AU predictions but missing from ensemble predictions".into(),
            });
        }
        let items: Vec<(&String, &ImageEbc)> = ebc.images.iter().collect();
        par::try_map_slice(&items, exec, |(id, img)| {
            let au_img = au.images.get(*id).ok_or_else(|| ScoringError::Incomplete {
                image_id: (*id).clone(),
                message: "missing from AU predictions".into(),
            })?;
            Ok(LabeledImage {
                image_id: (*id).clone(),
                scores: self.score_image(id, img, au_img)?,
            })
        })
    }
}

fn hard_label_of(hard: &HashMap<String, Emotion>, image_id: &str) -> Result<Emotion, ScoringError> {
    hard.get(image_id).copied().ok_or_else(|| ScoringError::Incomplete {
        image_id: image_id.to_string(),
        message: "no hard label in manifest".into(),
    })
}

/// Confusion counts per backbone, plus an `ensemble` entry for the mean of
/// the backbones, thresholded at [`DECISION_THRESHOLD`].
pub fn ebc_confusion(
    preds: &EbcPredictions,
    hard: &HashMap<String, Emotion>,
) -> Result<IndexMap<String, [ConfusionCounts; NUM_EMOTIONS]>, ScoringError> {
    let mut out: IndexMap<String, [ConfusionCounts; NUM_EMOTIONS]> = preds
        .backbones
        .iter()
        .map(|b| (b.clone(), [ConfusionCounts::default(); NUM_EMOTIONS]))
        .collect();
    let mut ensemble = [ConfusionCounts::default(); NUM_EMOTIONS];
    for (id, img) in &preds.images {
        let truth = hard_label_of(hard, id)?;
        for e in Emotion::ALL {
            let actual = truth == e;
            let scores = &img.per_emotion[e.index()];
            for s in scores {
                let row = out.get_mut(&s.backbone).expect("backbone registered at load");
                row[e.index()].record(actual, s.p >= DECISION_THRESHOLD);
            }
            if !scores.is_empty() {
                let mean = scores.iter().map(|s| s.p).sum::<f64>() / scores.len() as f64;
                ensemble[e.index()].record(actual, mean >= DECISION_THRESHOLD);
            }
        }
    }
    out.insert("ensemble".to_string(), ensemble);
    Ok(out)
}

/// Confusion counts of the AU classifier, deciding on the fused `P[0]`.
pub fn au_confusion(
    preds: &AuPredictions,
    hard: &HashMap<String, Emotion>,
    sim_neutral: f64,
    aus_variant: AusVariant,
) -> Result<[ConfusionCounts; NUM_EMOTIONS], ScoringError> {
    let table = AuTable::emfacs();
    let aus = AuScoreVector::for_variant(aus_variant, &table);
    let mut counts = [ConfusionCounts::default(); NUM_EMOTIONS];
    for (id, img) in &preds.images {
        let truth = hard_label_of(hard, id)?;
        for e in Emotion::ALL {
            let p = au_positive_probability(&img.per_emotion[e.index()], e, &table, &aus, sim_neutral);
            counts[e.index()].record(truth == e, p >= DECISION_THRESHOLD);
        }
    }
    Ok(counts)
}

fn scores_from_counts(
    name: &str,
    counts: &[ConfusionCounts; NUM_EMOTIONS],
    mode: ConfidenceMode,
) -> Result<EmotionVector, ScoringError> {
    let mut row = [0.0; NUM_EMOTIONS];
    for e in Emotion::ALL {
        row[e.index()] = confidence_score(&counts[e.index()], mode).map_err(|err| ScoringError::Incomplete {
            image_id: format!("<{name}:{e}>"),
            message: err.to_string(),
        })?;
    }
    Ok(row)
}

/// Builds a confidence table from per-classifier counts. `ebc` is the output
/// of [`ebc_confusion`]; either side may be absent.
pub fn build_confidence_table(
    ebc: Option<&IndexMap<String, [ConfusionCounts; NUM_EMOTIONS]>>,
    au: Option<&[ConfusionCounts; NUM_EMOTIONS]>,
    mode: ConfidenceMode,
) -> Result<ConfidenceTable, ScoringError> {
    let mut table = ConfidenceTable {
        mode,
        source: Some("computed from prediction files".into()),
        ..ConfidenceTable::default()
    };
    if let Some(ebc) = ebc {
        for (name, counts) in ebc {
            let row = scores_from_counts(name, counts, mode)?;
            if name == "ensemble" {
                table.ebc_ensemble = Some(row);
            } else {
                table.ebc.insert(name.clone(), row);
            }
            table.counts.insert(name.clone(), *counts);
        }
    }
    if let Some(au) = au {
        table.au = Some(scores_from_counts("au", au, mode)?);
        table.counts.insert("au".into(), *au);
    }
    Ok(table)
}
