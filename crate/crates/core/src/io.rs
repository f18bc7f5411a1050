//! File formats: JSON Lines manifests and label files, CSV prediction grids,
//! JSON confidence tables. Any path ending in `.gz` is read and written
//! gzip-compressed.
//!
//! Loaders reject rather than coerce: unknown enum values, non-finite
//! numbers, out-of-range probabilities and duplicate ids are all errors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, SamplingError, Shortfall};
use crate::model::{Emotion, AU_CODES, NUM_AUS, NUM_EMOTIONS};
use crate::sampling::SamplingPlan;
use crate::scoring::{AuHead, AuPredictions, BackboneScore, EbcPredictions, ImageAu, SoftLabel};
use crate::subsets::{Subset, SubsetAssignment};

/// Identifier of the seeded generator used for every random choice.
pub const RNG_ALGORITHM: &str = "chacha20";

/// Tolerance on `bpv_pos + bpv_neg = 1`.
pub const BPV_SUM_TOLERANCE: f64 = 1e-6;

pub const EBC_HEADER: [&str; 4] = ["image_id", "emotion", "backbone", "p"];

/// `image_id,emotion,bpv_pos,bpv_neg,au_1,...,au_27`.
pub fn au_header() -> Vec<String> {
    let mut h: Vec<String> = ["image_id", "emotion", "bpv_pos", "bpv_neg"].map(String::from).to_vec();
    h.extend(AU_CODES.iter().map(|c| format!("au_{c}")));
    h
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Man,
    Woman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ethnicity {
    Indian,
    Black,
    White,
    MiddleEastern,
    Hispanic,
    Asian,
}

/// Head pose in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<Ethnicity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    /// 68 or 28 `(x, y)` pixel positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub hard_label: Emotion,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Metadata>,
}

fn check_finite(what: &str, v: f64) -> Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("{what} is not a finite number"))
    }
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, hard_label: Emotion, split: Split) -> ImageRecord {
        ImageRecord {
            image_id: image_id.into(),
            hard_label,
            split,
            metadata: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("image_id is empty".into());
        }
        let Some(m) = &self.metadata else { return Ok(()) };
        if let Some(p) = &m.pose {
            check_finite("pose.yaw", p.yaw)?;
            check_finite("pose.pitch", p.pitch)?;
            check_finite("pose.roll", p.roll)?;
        }
        if let Some(l) = &m.landmarks {
            if l.len() != 68 && l.len() != 28 {
                return Err(format!("landmarks must have 68 or 28 points, got {}", l.len()));
            }
            for (i, [x, y]) in l.iter().enumerate() {
                check_finite(&format!("landmarks[{i}].x"), *x)?;
                check_finite(&format!("landmarks[{i}].y"), *y)?;
            }
        }
        for (name, v) in [("valence", m.valence), ("arousal", m.arousal)] {
            if let Some(v) = v {
                check_finite(name, v)?;
                if !(-1.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [-1, 1]"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plumbing

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Opens `path` for reading, decompressing `.gz` files.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(if is_gz(path) {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

/// Writes `bytes` to `path`, compressing when it ends in `.gz`. The gzip
/// header carries no timestamp, so output is byte-identical across runs.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(bytes).map_err(io_err(path))?;
        w = enc.finish().map_err(io_err(path))?;
    } else {
        w.write_all(bytes).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_to_string(path: &Path) -> Result<String, DataError> {
    let mut s = String::new();
    open_reader(path)?.read_to_string(&mut s).map_err(io_err(path))?;
    Ok(s)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a JSON Lines file; blank lines are skipped.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let reader = open_reader(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    write_file(path, to_jsonl(items).as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn reject_duplicates<'a>(path: &Path, ids: impl Iterator<Item = &'a str>) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                image_id: id.to_string(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest I/O

pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let rows: Vec<(usize, ImageRecord)> = load_jsonl(path)?;
    for (line, r) in &rows {
        r.validate().map_err(|m| parse_err(path, *line, m))?;
    }
    reject_duplicates(path, rows.iter().map(|(_, r)| r.image_id.as_str()))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn save_manifest(path: &Path, records: &[ImageRecord]) -> Result<(), DataError> {
    save_jsonl(path, records)
}

/// `image_id -> hard_label` lookup.
pub fn hard_labels(records: &[ImageRecord]) -> HashMap<String, Emotion> {
    records.iter().map(|r| (r.image_id.clone(), r.hard_label)).collect()
}

// ---------------------------------------------------------------------------
// Numbers

/// Formats `v` rounded to 9 significant digits, in the shortest form that
/// parses back to the rounded value.
pub fn format_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn parse_prob(path: &Path, line: usize, column: &str, raw: &str) -> Result<f64, DataError> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{column}: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{column}: {raw} is not finite")));
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(parse_err(path, line, format!("{column}: {v} outside [0, 1]")));
    }
    Ok(v)
}

fn parse_emotion(path: &Path, line: usize, raw: &str) -> Result<Emotion, DataError> {
    raw.parse().map_err(|e: crate::error::ModelError| parse_err(path, line, e.to_string()))
}

// ---------------------------------------------------------------------------
// Prediction grids

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Ebc,
    Au,
}

impl PredictionKind {
    /// Detects the kind of a prediction CSV from its header.
    pub fn detect(path: &Path) -> Result<PredictionKind, DataError> {
        let mut first = String::new();
        open_reader(path)?.read_line(&mut first).map_err(io_err(path))?;
        let fields: Vec<&str> = first.trim_end().split(',').collect();
        if fields == EBC_HEADER {
            Ok(PredictionKind::Ebc)
        } else if fields == au_header() {
            Ok(PredictionKind::Au)
        } else {
            Err(DataError::Header {
                path: path.to_path_buf(),
                expected: format!("{} or {}", EBC_HEADER.join(","), au_header().join(",")),
                found: first.trim_end().to_string(),
            })
        }
    }
}

fn csv_reader(path: &Path, expected: &[String]) -> Result<csv::Reader<Box<dyn BufRead>>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(open_reader(path)?);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if headers != expected {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: headers.join(","),
        });
    }
    Ok(reader)
}

fn csv_records(
    path: &Path,
    reader: &mut csv::Reader<Box<dyn BufRead>>,
) -> Result<Vec<(usize, csv::StringRecord)>, DataError> {
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

/// Loads `image_id,emotion,backbone,p`. Unless `allow_partial`, every image
/// must have one row per emotion and backbone.
pub fn load_ebc(path: &Path, allow_partial: bool) -> Result<EbcPredictions, DataError> {
    let header: Vec<String> = EBC_HEADER.map(String::from).to_vec();
    let mut reader = csv_reader(path, &header)?;
    let mut preds = EbcPredictions::default();
    let mut seen = HashSet::new();
    for (line, rec) in csv_records(path, &mut reader)? {
        let id = rec[0].to_string();
        let emotion = parse_emotion(path, line, &rec[1])?;
        let backbone = rec[2].to_string();
        if id.is_empty() || backbone.is_empty() {
            return Err(parse_err(path, line, "empty image_id or backbone"));
        }
        let p = parse_prob(path, line, "p", &rec[3])?;
        if !seen.insert((id.clone(), emotion, backbone.clone())) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate row for image `{id}`, {emotion}, backbone `{backbone}`"),
            ));
        }
        if !preds.backbones.contains(&backbone) {
            preds.backbones.push(backbone.clone());
        }
        preds.images.entry(id).or_default().per_emotion[emotion.index()].push(BackboneScore { backbone, p });
    }
    if !allow_partial {
        for (id, img) in &preds.images {
            for e in Emotion::ALL {
                let have = &img.per_emotion[e.index()];
                if let Some(missing) = preds.backbones.iter().find(|b| !have.iter().any(|s| &s.backbone == *b)) {
                    return Err(DataError::Incomplete {
                        path: path.to_path_buf(),
                        message: format!("image `{id}` has no {e} prediction from backbone `{missing}`"),
                    });
                }
            }
        }
    }
    // Canonical backbone order inside each cell.
    for img in preds.images.values_mut() {
        for cell in img.per_emotion.iter_mut() {
            cell.sort_by_key(|s| preds.backbones.iter().position(|b| *b == s.backbone));
        }
    }
    Ok(preds)
}

pub fn ebc_to_csv(preds: &EbcPredictions) -> String {
    let mut w = csv_writer();
    w.write_record(EBC_HEADER).expect("in-memory write");
    for (id, img) in &preds.images {
        for e in Emotion::ALL {
            for s in &img.per_emotion[e.index()] {
                w.write_record([id.as_str(), e.name(), s.backbone.as_str(), &format_sig9(s.p)])
                    .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn save_ebc(path: &Path, preds: &EbcPredictions) -> Result<(), DataError> {
    write_file(path, ebc_to_csv(preds).as_bytes())
}

/// Loads `image_id,emotion,bpv_pos,bpv_neg,au_1,...,au_27`. Every image must
/// have exactly one row per emotion.
pub fn load_au(path: &Path) -> Result<AuPredictions, DataError> {
    let mut reader = csv_reader(path, &au_header())?;
    let mut partial: IndexMap<String, [Option<AuHead>; NUM_EMOTIONS]> = IndexMap::new();
    let header = au_header();
    for (line, rec) in csv_records(path, &mut reader)? {
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty image_id"));
        }
        let emotion = parse_emotion(path, line, &rec[1])?;
        let pos = parse_prob(path, line, "bpv_pos", &rec[2])?;
        let neg = parse_prob(path, line, "bpv_neg", &rec[3])?;
        if ((pos + neg) - 1.0).abs() > BPV_SUM_TOLERANCE {
            return Err(parse_err(
                path,
                line,
                format!("bpv_pos + bpv_neg = {} (must be 1 within {BPV_SUM_TOLERANCE})", pos + neg),
            ));
        }
        let mut au_hat = [0.0; NUM_AUS];
        for (k, v) in au_hat.iter_mut().enumerate() {
            *v = parse_prob(path, line, &header[4 + k], &rec[4 + k])?;
        }
        let slot = &mut partial.entry(id.clone()).or_insert([None; NUM_EMOTIONS])[emotion.index()];
        if slot.is_some() {
            return Err(parse_err(path, line, format!("duplicate row for image `{id}`, {emotion}")));
        }
        *slot = Some(AuHead { bpv: [pos, neg], au_hat });
    }
    let mut preds = AuPredictions::default();
    for (id, heads) in partial {
        let mut per_emotion = [AuHead {
            bpv: [0.0, 1.0],
            au_hat: [0.0; NUM_AUS],
        }; NUM_EMOTIONS];
        for e in Emotion::ALL {
            per_emotion[e.index()] = heads[e.index()].ok_or_else(|| DataError::Incomplete {
                path: path.to_path_buf(),
                message: format!("image `{id}` has no {e} row"),
            })?;
        }
        preds.images.insert(id, ImageAu { per_emotion });
    }
    Ok(preds)
}

pub fn au_to_csv(preds: &AuPredictions) -> String {
    let mut w = csv_writer();
    w.write_record(au_header()).expect("in-memory write");
    for (id, img) in &preds.images {
        for e in Emotion::ALL {
            let head = &img.per_emotion[e.index()];
            let mut row = vec![id.clone(), e.name().to_string()];
            row.push(format_sig9(head.bpv[0]));
            row.push(format_sig9(head.bpv[1]));
            row.extend(head.au_hat.iter().map(|v| format_sig9(*v)));
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn save_au(path: &Path, preds: &AuPredictions) -> Result<(), DataError> {
    write_file(path, au_to_csv(preds).as_bytes())
}

// ---------------------------------------------------------------------------
// Soft labels and subsets

/// One line of a soft-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftLabelRecord {
    pub image_id: String,
    pub soft_label: SoftLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_label: Option<Emotion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Subset>,
}

pub fn load_soft_labels(path: &Path) -> Result<Vec<SoftLabelRecord>, DataError> {
    let rows: Vec<(usize, SoftLabelRecord)> = load_jsonl(path)?;
    reject_duplicates(path, rows.iter().map(|(_, r)| r.image_id.as_str()))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn save_soft_labels(path: &Path, records: &[SoftLabelRecord]) -> Result<(), DataError> {
    save_jsonl(path, records)
}

pub fn load_subsets(path: &Path) -> Result<Vec<SubsetAssignment>, DataError> {
    let rows: Vec<(usize, SubsetAssignment)> = load_jsonl(path)?;
    reject_duplicates(path, rows.iter().map(|(_, r)| r.image_id.as_str()))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn save_subsets(path: &Path, records: &[SubsetAssignment]) -> Result<(), DataError> {
    save_jsonl(path, records)
}

// ---------------------------------------------------------------------------
// Plan materialization

/// Generator for stream `stream` under `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Picks concrete negatives for a plan: each emotion's pool (manifest
/// order) is shuffled with its own seeded stream and the first `k` ids kept.
/// Ids come out grouped by emotion in plan order.
pub fn materialize_plan(plan: &SamplingPlan, manifest: &[ImageRecord], seed: u64) -> Result<Vec<String>, SamplingError> {
    let mut pools: [Vec<&str>; NUM_EMOTIONS] = Default::default();
    for r in manifest {
        pools[r.hard_label.index()].push(&r.image_id);
    }
    let shortfalls: Vec<Shortfall> = plan
        .allocations
        .iter()
        .filter(|a| a.count() > pools[a.emotion.index()].len())
        .map(|a| Shortfall {
            emotion: a.emotion,
            requested: a.count(),
            available: pools[a.emotion.index()].len(),
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(SamplingError::InsufficientPool(shortfalls));
    }
    let mut out = Vec::with_capacity(plan.sum());
    for a in &plan.allocations {
        if a.count() == 0 {
            continue;
        }
        let mut pool = pools[a.emotion.index()].clone();
        let mut rng = seeded_rng(seed, a.emotion.index() as u64);
        pool.shuffle(&mut rng);
        out.extend(pool[..a.count()].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Resolves `dir/name`, preferring a `.gz` sibling when only that exists.
pub fn resolve_in(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}
