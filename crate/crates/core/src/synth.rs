//! Desk-scale synthetic batches with planted soft-labels.
//!
//! Each image gets a dominant emotion drawn uniformly and, with probability
//! `secondary_emotion_bias`, a second emotion drawn from the dominant's row of
//! the AU correlation matrix. The dominant carries intensity `λ ∈ [0.5, 1)`
//! and the second `1 − λ`; unmixed images have `λ = 1`. Every image draws from
//! its own RNG stream, so output does not depend on thread count.

use std::path::Path;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::io::{self, seeded_rng, ImageRecord, SoftLabelRecord, Split, RNG_ALGORITHM};
use crate::model::{au_indicator, AuCorrelationMatrix, AuVector, Emotion, EmotionVector, NUM_AUS, NUM_EMOTIONS};
use crate::par::{self, Execution};
use crate::scoring::{AuHead, AuPredictions, BackboneScore, ConfidenceTable, EbcPredictions, ImageAu, ImageEbc, SoftLabel};

/// Backbones of the simulated ensemble, matching the published confidence rows.
pub const BACKBONES: [&str; 3] = ["resnet50", "efficientnet_b3", "xception"];

/// Noise is redrawn until it falls within this many standard deviations.
pub const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n_images: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub secondary_emotion_bias: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            n_images: 1000,
            seed: 0,
            noise_sigma: 0.05,
            secondary_emotion_bias: 0.0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DataError::Invalid(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.secondary_emotion_bias) {
            return Err(DataError::Invalid(format!(
                "secondary_emotion_bias must lie in [0, 1], got {}",
                self.secondary_emotion_bias
            )));
        }
        Ok(())
    }
}

/// Ground truth of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLabel {
    pub image_id: String,
    pub dominant: Emotion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<Emotion>,
    pub lambda: f64,
    pub soft_label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBatch {
    pub config: SynthesisConfig,
    pub manifest: Vec<ImageRecord>,
    pub ebc: EbcPredictions,
    pub au: AuPredictions,
    pub planted: Vec<PlantedLabel>,
}

/// Provenance written next to a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub kind: String,
    pub rng: String,
    pub config: SynthesisConfig,
    pub backbones: Vec<String>,
    pub mixed_images: usize,
}

struct Generated {
    record: ImageRecord,
    ebc: ImageEbc,
    au: ImageAu,
    planted: PlantedLabel,
}

fn noise(rng: &mut ChaCha20Rng, normal: Option<&Normal<f64>>, sigma: f64) -> f64 {
    let Some(normal) = normal else { return 0.0 };
    loop {
        let v = normal.sample(rng);
        if v.abs() <= TRUNCATION * sigma {
            return v;
        }
    }
}

fn generate_one(index: usize, config: &SynthesisConfig, correlation: &AuCorrelationMatrix) -> Generated {
    let mut rng = seeded_rng(config.seed, index as u64);
    let normal = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("validated sigma"));
    let sigma = config.noise_sigma;

    let dominant = Emotion::ALL[rng.random_range(0..NUM_EMOTIONS)];
    let row = correlation.row(dominant);
    let can_mix = row.iter().any(|w| *w > 0);
    let secondary = if can_mix && rng.random_bool(config.secondary_emotion_bias) {
        let weights = WeightedIndex::new(row.iter().map(|w| *w as f64)).expect("row has positive weight");
        Some(Emotion::ALL[weights.sample(&mut rng)])
    } else {
        None
    };
    let lambda = if secondary.is_some() { rng.random_range(0.5..1.0) } else { 1.0 };

    let mut intensity: EmotionVector = [0.0; NUM_EMOTIONS];
    intensity[dominant.index()] = lambda;
    let mut clean_au: AuVector = au_indicator(dominant).map(|v| lambda * v);
    if let Some(sec) = secondary {
        intensity[sec.index()] = 1.0 - lambda;
        let ind = au_indicator(sec);
        for k in 0..NUM_AUS {
            clean_au[k] = clean_au[k].max((1.0 - lambda) * ind[k]);
        }
    }

    let mut ebc = ImageEbc::default();
    for e in Emotion::ALL {
        for b in BACKBONES {
            let p = (intensity[e.index()] + noise(&mut rng, normal.as_ref(), sigma)).clamp(0.0, 1.0);
            ebc.per_emotion[e.index()].push(BackboneScore {
                backbone: b.to_string(),
                p,
            });
        }
    }

    let per_emotion = std::array::from_fn(|e| {
        let q = (intensity[e] + noise(&mut rng, normal.as_ref(), sigma)).clamp(0.0, 1.0);
        let au_hat = clean_au.map(|v| (v + noise(&mut rng, normal.as_ref(), sigma)).clamp(0.0, 1.0));
        AuHead { bpv: [q, 1.0 - q], au_hat }
    });

    let image_id = format!("img{index:06}");
    // Every tenth image goes to validation.
    let split = if index % 10 == 9 { Split::Val } else { Split::Train };
    Generated {
        record: ImageRecord::new(image_id.clone(), dominant, split),
        ebc,
        au: ImageAu { per_emotion },
        planted: PlantedLabel {
            image_id,
            dominant,
            secondary,
            lambda,
            soft_label: SoftLabel::new(intensity).expect("intensities lie in [0, 1]"),
        },
    }
}

pub fn generate(config: &SynthesisConfig) -> Result<SynthBatch, DataError> {
    generate_with(config, Execution::default())
}

pub fn generate_with(config: &SynthesisConfig, exec: Execution) -> Result<SynthBatch, DataError> {
    config.validate()?;
    let correlation = AuCorrelationMatrix::published();
    let items = par::map_range(config.n_images, exec, |i| generate_one(i, config, &correlation));

    let mut batch = SynthBatch {
        config: *config,
        manifest: Vec::with_capacity(items.len()),
        ebc: EbcPredictions {
            backbones: BACKBONES.map(String::from).to_vec(),
            images: IndexMap::with_capacity(items.len()),
        },
        au: AuPredictions::default(),
        planted: Vec::with_capacity(items.len()),
    };
    for g in items {
        batch.ebc.images.insert(g.record.image_id.clone(), g.ebc);
        batch.au.images.insert(g.record.image_id.clone(), g.au);
        batch.manifest.push(g.record);
        batch.planted.push(g.planted);
    }
    Ok(batch)
}

impl SynthBatch {
    pub fn meta(&self) -> BatchMeta {
        BatchMeta {
            kind: "synthetic-batch".into(),
            rng: RNG_ALGORITHM.into(),
            config: self.config,
            backbones: self.ebc.backbones.clone(),
            mixed_images: self.planted.iter().filter(|p| p.secondary.is_some()).count(),
        }
    }

    /// Planted labels as soft-label records, usable as evaluation truth.
    pub fn truth_records(&self) -> Vec<SoftLabelRecord> {
        self.planted
            .iter()
            .map(|p| SoftLabelRecord {
                image_id: p.image_id.clone(),
                soft_label: p.soft_label,
                hard_label: Some(p.dominant),
                subset: None,
            })
            .collect()
    }

    /// Writes `manifest.jsonl`, `ebc.csv`, `au.csv`, `planted.jsonl`,
    /// `truth.jsonl`, `conf.json` (the published confidence table) and
    /// `meta.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        io::save_manifest(&dir.join("manifest.jsonl"), &self.manifest)?;
        io::save_ebc(&dir.join("ebc.csv"), &self.ebc)?;
        io::save_au(&dir.join("au.csv"), &self.au)?;
        io::save_jsonl(&dir.join("planted.jsonl"), &self.planted)?;
        io::save_soft_labels(&dir.join("truth.jsonl"), &self.truth_records())?;
        io::save_json(&dir.join("conf.json"), &ConfidenceTable::published())?;
        io::save_json(&dir.join("meta.json"), &self.meta())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_au_is_indicator() {
        let cfg = SynthesisConfig {
            n_images: 50,
            seed: 3,
            noise_sigma: 0.0,
            secondary_emotion_bias: 0.0,
        };
        let batch = generate(&cfg).unwrap();
        for p in &batch.planted {
            assert_eq!(p.secondary, None);
            let au = &batch.au.images[&p.image_id];
            for head in &au.per_emotion {
                assert_eq!(head.au_hat, au_indicator(p.dominant));
            }
            let ebc = &batch.ebc.images[&p.image_id];
            for e in Emotion::ALL {
                let want = if e == p.dominant { 1.0 } else { 0.0 };
                assert!(ebc.per_emotion[e.index()].iter().all(|s| s.p == want));
            }
        }
    }

    #[test]
    fn mixed_blend_is_max_of_scaled_indicators() {
        let cfg = SynthesisConfig {
            n_images: 200,
            seed: 8,
            noise_sigma: 0.0,
            secondary_emotion_bias: 1.0,
        };
        let batch = generate(&cfg).unwrap();
        let mut mixed = 0;
        for p in &batch.planted {
            let Some(sec) = p.secondary else {
                assert_eq!(p.dominant, Emotion::Neutral);
                continue;
            };
            mixed += 1;
            assert!((0.5..1.0).contains(&p.lambda));
            assert!(AuCorrelationMatrix::published().get(p.dominant, sec) > 0);
            let a = au_indicator(p.dominant);
            let b = au_indicator(sec);
            let au = &batch.au.images[&p.image_id].per_emotion[0].au_hat;
            for k in 0..NUM_AUS {
                assert_eq!(au[k], (p.lambda * a[k]).max((1.0 - p.lambda) * b[k]));
            }
        }
        assert!(mixed > 100);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = SynthesisConfig {
            n_images: 64,
            seed: 1,
            noise_sigma: 0.1,
            secondary_emotion_bias: 0.5,
        };
        assert_eq!(
            generate_with(&cfg, Execution::Sequential).unwrap(),
            generate_with(&cfg, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = SynthesisConfig::default();
        cfg.noise_sigma = -1.0;
        assert!(generate(&cfg).is_err());
        cfg.noise_sigma = 0.0;
        cfg.secondary_emotion_bias = 1.5;
        assert!(generate(&cfg).is_err());
    }
}
