//! Emotion vocabulary, EMFACS action-unit tables and the constants derived
//! from them.
//!
//! Everything here is immutable after construction and cheap to clone, so the
//! tables can be shared freely between worker threads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::ModelError;

/// Number of emotion classes.
pub const NUM_EMOTIONS: usize = 8;

/// Number of action units in the representation vector.
pub const NUM_AUS: usize = 21;

/// A vector indexed by [`ActionUnit::ordinal`].
pub type AuVector = [f64; NUM_AUS];

/// A vector indexed by [`Emotion::index`].
pub type EmotionVector = [f64; NUM_EMOTIONS];

/// The eight expression classes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Neutral = 0,
    Happy = 1,
    Sad = 2,
    Surprise = 3,
    Fear = 4,
    Disgust = 5,
    Anger = 6,
    Contempt = 7,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_EMOTIONS] = [
        Emotion::Neutral,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Anger,
        Emotion::Contempt,
    ];

    /// The seven classes that carry an AU set.
    pub const EXPRESSIVE: [Emotion; NUM_EMOTIONS - 1] = [
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Anger,
        Emotion::Contempt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Emotion> {
        Emotion::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "Neutral",
            Emotion::Happy => "Happy",
            Emotion::Sad => "Sad",
            Emotion::Surprise => "Surprise",
            Emotion::Fear => "Fear",
            Emotion::Disgust => "Disgust",
            Emotion::Anger => "Anger",
            Emotion::Contempt => "Contempt",
        }
    }

    /// Iterates over every other emotion in ascending index order.
    pub fn others(self) -> impl Iterator<Item = Emotion> {
        Emotion::ALL.into_iter().filter(move |e| *e != self)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if let Ok(index) = trimmed.parse::<usize>() {
            return Emotion::from_index(index).ok_or_else(|| ModelError::UnknownEmotion(s.to_string()));
        }
        Emotion::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| ModelError::UnknownEmotion(s.to_string()))
    }
}

impl Serialize for Emotion {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Emotion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Visitor;

        impl serde::de::Visitor<'_> for Visitor {
            type Value = Emotion;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an emotion name or an index in 0..8")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Emotion, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Emotion, E> {
                Emotion::from_index(v as usize)
                    .ok_or_else(|| E::custom(ModelError::UnknownEmotion(v.to_string())))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Emotion, E> {
                usize::try_from(v)
                    .ok()
                    .and_then(Emotion::from_index)
                    .ok_or_else(|| E::custom(ModelError::UnknownEmotion(v.to_string())))
            }
        }

        deserializer.deserialize_any(Visitor)
    }
}

/// EMFACS codes of the representation vector, in ordinal order.
pub const AU_CODES: [u8; NUM_AUS] = [
    1, 2, 4, 5, 6, 7, 9, 10, 11, 12, 14, 15, 16, 17, 20, 22, 23, 24, 25, 26, 27,
];

/// One of the 21 facial action units used by the AU classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionUnit(u8);

impl ActionUnit {
    pub fn from_code(code: u8) -> Option<ActionUnit> {
        AU_CODES
            .iter()
            .position(|c| *c == code)
            .map(|ordinal| ActionUnit(ordinal as u8))
    }

    pub fn from_ordinal(ordinal: usize) -> Option<ActionUnit> {
        (ordinal < NUM_AUS).then_some(ActionUnit(ordinal as u8))
    }

    pub fn code(self) -> u8 {
        AU_CODES[self.0 as usize]
    }

    pub fn ordinal(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = ActionUnit> {
        (0..NUM_AUS).map(|o| ActionUnit(o as u8))
    }
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.code())
    }
}

const EMFACS_MEMBERSHIP: [&[u8]; NUM_EMOTIONS] = [
    &[],
    &[6, 12, 25],
    &[1, 4, 6, 11, 15, 17],
    &[1, 2, 5, 26, 27],
    &[1, 2, 4, 5, 20, 25, 26, 27],
    &[9, 10, 16, 17, 25, 27],
    &[4, 5, 7, 10, 17, 22, 23, 24, 25, 26],
    &[12, 14],
];

/// Per-emotion AU membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuTable {
    membership: [Vec<ActionUnit>; NUM_EMOTIONS],
}

impl AuTable {
    /// The EMFACS table used throughout the toolkit. Neutral has no AUs.
    pub fn emfacs() -> AuTable {
        let membership = EMFACS_MEMBERSHIP.map(|codes| {
            codes
                .iter()
                .map(|c| ActionUnit::from_code(*c).expect("EMFACS code outside the AU set"))
                .collect()
        });
        AuTable { membership }
    }

    /// Builds a table from raw EMFACS codes. Neutral must be empty.
    pub fn from_codes(codes: [Vec<u8>; NUM_EMOTIONS]) -> Result<AuTable, ModelError> {
        if !codes[Emotion::Neutral.index()].is_empty() {
            return Err(ModelError::NeutralHasAus);
        }
        let mut membership: [Vec<ActionUnit>; NUM_EMOTIONS] = Default::default();
        for (slot, list) in membership.iter_mut().zip(codes) {
            let mut units = list
                .into_iter()
                .map(|c| ActionUnit::from_code(c).ok_or(ModelError::UnknownAu(c)))
                .collect::<Result<Vec<_>, _>>()?;
            units.sort();
            units.dedup();
            *slot = units;
        }
        Ok(AuTable { membership })
    }

    pub fn members(&self, emotion: Emotion) -> &[ActionUnit] {
        &self.membership[emotion.index()]
    }

    pub fn contains(&self, emotion: Emotion, unit: ActionUnit) -> bool {
        self.members(emotion).contains(&unit)
    }

    /// 0/1 representation vector of an emotion.
    pub fn indicator(&self, emotion: Emotion) -> AuVector {
        let mut v = [0.0; NUM_AUS];
        for unit in self.members(emotion) {
            v[unit.ordinal()] = 1.0;
        }
        v
    }

    /// Number of emotions whose set contains `unit`.
    pub fn frequency(&self, unit: ActionUnit) -> usize {
        self.membership.iter().filter(|m| m.contains(&unit)).count()
    }
}

impl Default for AuTable {
    fn default() -> Self {
        AuTable::emfacs()
    }
}

/// Shorthand for `AuTable::emfacs().indicator(emotion)`.
pub fn au_indicator(emotion: Emotion) -> AuVector {
    AuTable::emfacs().indicator(emotion)
}

/// Which AU weighting to use when scoring similarity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AusVariant {
    /// The published literal weights.
    #[default]
    Published,
    /// `1 / frequency` recomputed from the AU table.
    InverseFrequency,
}

/// Per-AU weights, indexed by ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuScoreVector(pub AuVector);

impl AuScoreVector {
    /// Published weights, kept as the exact decimals printed (0.33 is not 1/3).
    pub const PUBLISHED: AuVector = [
        0.33, 0.5, 0.33, 0.33, 0.5, 1.0, 1.0, 0.5, 1.0, 0.5, 1.0, 1.0, 1.0, 0.33, 1.0, 1.0, 1.0,
        1.0, 0.25, 0.25, 0.5,
    ];

    pub fn published() -> AuScoreVector {
        AuScoreVector(Self::PUBLISHED)
    }

    /// Weights recomputed as the inverse of each AU's emotion frequency.
    /// Differs from the published vector at AU26 (1/3 vs 0.25) and AU27
    /// (1/3 vs 0.5), and wherever 1/3 was printed as 0.33.
    pub fn inverse_frequency(table: &AuTable) -> AuScoreVector {
        let mut v = [0.0; NUM_AUS];
        for unit in ActionUnit::all() {
            let freq = table.frequency(unit);
            v[unit.ordinal()] = if freq == 0 { 0.0 } else { 1.0 / freq as f64 };
        }
        AuScoreVector(v)
    }

    pub fn for_variant(variant: AusVariant, table: &AuTable) -> AuScoreVector {
        match variant {
            AusVariant::Published => AuScoreVector::published(),
            AusVariant::InverseFrequency => AuScoreVector::inverse_frequency(table),
        }
    }

    pub fn weight(&self, unit: ActionUnit) -> f64 {
        self.0[unit.ordinal()]
    }

    pub fn values(&self) -> &AuVector {
        &self.0
    }
}

impl Default for AuScoreVector {
    fn default() -> Self {
        AuScoreVector::published()
    }
}

const EXPRESSIVE_COUNT: usize = NUM_EMOTIONS - 1;

/// Published common-AU counts, rows/columns Happy..Contempt.
const PUBLISHED_CORRELATION: [[u32; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT] = [
    [0, 1, 0, 1, 1, 1, 1],
    [1, 0, 1, 2, 1, 2, 0],
    [0, 1, 0, 5, 1, 2, 0],
    [1, 2, 5, 0, 2, 4, 0],
    [1, 1, 1, 2, 0, 4, 0],
    [1, 2, 2, 4, 4, 0, 0],
    [1, 0, 0, 0, 0, 0, 0],
];

/// Symmetric count of shared AUs between the seven expressive emotions.
/// Neutral is not part of the matrix; lookups involving it return 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u32>>", into = "Vec<Vec<u32>>")]
pub struct AuCorrelationMatrix {
    counts: [[u32; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT],
}

/// A cell where a derived matrix disagrees with the published one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellMismatch {
    pub row: Emotion,
    pub col: Emotion,
    pub derived: u32,
    pub published: u32,
}

impl AuCorrelationMatrix {
    /// The matrix as published, including its (Disgust, Anger) = 4 cell.
    pub fn published() -> AuCorrelationMatrix {
        AuCorrelationMatrix {
            counts: PUBLISHED_CORRELATION,
        }
    }

    pub fn from_counts(
        counts: [[u32; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT],
    ) -> Result<AuCorrelationMatrix, ModelError> {
        for i in 0..EXPRESSIVE_COUNT {
            if counts[i][i] != 0 {
                return Err(ModelError::InvalidCorrelation(format!(
                    "diagonal entry {} is {}",
                    Emotion::EXPRESSIVE[i],
                    counts[i][i]
                )));
            }
            for j in 0..i {
                if counts[i][j] != counts[j][i] {
                    return Err(ModelError::InvalidCorrelation(format!(
                        "asymmetric at ({}, {})",
                        Emotion::EXPRESSIVE[i],
                        Emotion::EXPRESSIVE[j]
                    )));
                }
            }
        }
        Ok(AuCorrelationMatrix { counts })
    }

    pub fn get(&self, a: Emotion, b: Emotion) -> u32 {
        if a == b || a == Emotion::Neutral || b == Emotion::Neutral {
            return 0;
        }
        self.counts[a.index() - 1][b.index() - 1]
    }

    /// Row of `target` across all eight emotions (Neutral and self are 0).
    pub fn row(&self, target: Emotion) -> [u32; NUM_EMOTIONS] {
        let mut row = [0; NUM_EMOTIONS];
        for e in Emotion::ALL {
            row[e.index()] = self.get(target, e);
        }
        row
    }

    pub fn counts(&self) -> &[[u32; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT] {
        &self.counts
    }

    /// Cells (upper triangle, row index < column index) that differ from the
    /// published matrix.
    pub fn check_against_published(&self) -> Vec<CellMismatch> {
        self.diff(&AuCorrelationMatrix::published())
    }

    /// Upper-triangle cells where `self` and `other` disagree.
    pub fn diff(&self, other: &AuCorrelationMatrix) -> Vec<CellMismatch> {
        let mut out = Vec::new();
        for i in 0..EXPRESSIVE_COUNT {
            for j in (i + 1)..EXPRESSIVE_COUNT {
                if self.counts[i][j] != other.counts[i][j] {
                    out.push(CellMismatch {
                        row: Emotion::EXPRESSIVE[i],
                        col: Emotion::EXPRESSIVE[j],
                        derived: self.counts[i][j],
                        published: other.counts[i][j],
                    });
                }
            }
        }
        out
    }
}

impl TryFrom<Vec<Vec<u32>>> for AuCorrelationMatrix {
    type Error = ModelError;

    fn try_from(rows: Vec<Vec<u32>>) -> Result<Self, Self::Error> {
        if rows.len() != EXPRESSIVE_COUNT || rows.iter().any(|r| r.len() != EXPRESSIVE_COUNT) {
            return Err(ModelError::InvalidCorrelation("expected a 7x7 matrix".into()));
        }
        let mut counts = [[0; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT];
        for (dst, src) in counts.iter_mut().zip(rows) {
            dst.copy_from_slice(&src);
        }
        AuCorrelationMatrix::from_counts(counts)
    }
}

impl From<AuCorrelationMatrix> for Vec<Vec<u32>> {
    fn from(m: AuCorrelationMatrix) -> Self {
        m.counts.iter().map(|r| r.to_vec()).collect()
    }
}

/// Counts shared AUs for every pair of expressive emotions.
pub fn derive_correlation(table: &AuTable) -> AuCorrelationMatrix {
    let mut counts = [[0; EXPRESSIVE_COUNT]; EXPRESSIVE_COUNT];
    for (i, a) in Emotion::EXPRESSIVE.into_iter().enumerate() {
        for (j, b) in Emotion::EXPRESSIVE.into_iter().enumerate() {
            if i == j {
                continue;
            }
            counts[i][j] = table
                .members(a)
                .iter()
                .filter(|u| table.contains(b, **u))
                .count() as u32;
        }
    }
    AuCorrelationMatrix { counts }
}

/// Exported constants document (`au-tables.json`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuTablesDocument {
    pub emotions: Vec<String>,
    pub au_codes: Vec<u8>,
    pub membership: indexmap::IndexMap<String, Vec<u8>>,
    pub aus: Vec<f64>,
    /// Published matrix, used by the sampling planner.
    pub correlation: Vec<Vec<u32>>,
    /// Matrix recomputed from `membership`.
    pub correlation_derived: Vec<Vec<u32>>,
}

impl AuTablesDocument {
    pub fn build(table: &AuTable, aus: &AuScoreVector) -> AuTablesDocument {
        AuTablesDocument {
            emotions: Emotion::ALL.iter().map(|e| e.name().to_string()).collect(),
            au_codes: AU_CODES.to_vec(),
            membership: Emotion::ALL
                .iter()
                .map(|e| {
                    (
                        e.name().to_string(),
                        table.members(*e).iter().map(|u| u.code()).collect(),
                    )
                })
                .collect(),
            aus: aus.0.to_vec(),
            correlation: AuCorrelationMatrix::published().into(),
            correlation_derived: derive_correlation(table).into(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("constants document serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("constants document serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
