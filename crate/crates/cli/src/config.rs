//! Defaults file named by `SOFTFER_CONFIG`.
//!
//! Flags win over the file, and the file wins over built-in defaults. Unknown
//! keys are rejected, like unknown flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softfer::metrics::FailureNormalization;
use softfer::model::AusVariant;
use softfer::scoring::{ConfidenceMode, EbcConfidenceSource};

use crate::failure::Failure;

pub const ENV_VAR: &str = "SOFTFER_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub seed: Option<u64>,
    pub log_level: Option<String>,
    pub threads: Option<usize>,
    #[serde(default, rename = "plan-sampling")]
    pub plan_sampling: PlanDefaults,
    #[serde(default)]
    pub confidence: ConfidenceDefaults,
    #[serde(default)]
    pub fuse: FuseDefaults,
    #[serde(default)]
    pub evaluate: EvaluateDefaults,
    #[serde(default)]
    pub synth: SynthDefaults,
    #[serde(default)]
    pub serve: ServeDefaults,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDefaults {
    pub uniform_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceDefaults {
    pub mode: Option<ConfidenceMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseDefaults {
    pub sim_neutral: Option<f64>,
    pub ebc_confidence: Option<EbcConfidenceSource>,
    pub aus_variant: Option<AusVariant>,
    pub allow_partial: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateDefaults {
    pub epsilon: Option<f64>,
    pub normalization: Option<FailureNormalization>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDefaults {
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub secondary_bias: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeDefaults {
    pub bind: Option<String>,
    pub snapshot_every: Option<u64>,
}

/// Loads the file named by the environment variable, if any.
pub fn load_from_env() -> Result<(Defaults, Option<PathBuf>), Failure> {
    match std::env::var_os(ENV_VAR) {
        None => Ok((Defaults::default(), None)),
        Some(p) if p.is_empty() => Ok((Defaults::default(), None)),
        Some(p) => {
            let path = PathBuf::from(p);
            Ok((load(&path)?, Some(path)))
        }
    }
}

pub fn load(path: &Path) -> Result<Defaults, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(path, format!("cannot read defaults file: {e}")))?;
    toml::from_str(&text).map_err(|e| Failure::config(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_section() {
        let d: Defaults = toml::from_str(
            r#"
seed = 9
log_level = "info"
threads = 2
[plan-sampling]
uniform_fraction = 0.3
[confidence]
mode = "balanced"
[fuse]
sim_neutral = 0.5
ebc_confidence = "ensemble"
aus_variant = "inverse-frequency"
allow_partial = true
[evaluate]
epsilon = 0.1
normalization = "weight-sum"
[synth]
n = 10
noise = 0.1
secondary_bias = 0.5
[serve]
bind = "0.0.0.0:9000"
snapshot_every = 10
"#,
        )
        .unwrap();
        assert_eq!(d.seed, Some(9));
        assert_eq!(d.confidence.mode, Some(ConfidenceMode::Balanced));
        assert_eq!(d.fuse.ebc_confidence, Some(EbcConfidenceSource::Ensemble));
        assert_eq!(d.evaluate.normalization, Some(FailureNormalization::WeightSum));
        assert_eq!(d.serve.snapshot_every, Some(10));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Defaults>("sed = 1").is_err());
        assert!(toml::from_str::<Defaults>("[fuse]\nsim = 0.2").is_err());
        assert!(toml::from_str::<Defaults>("[fuse]\naus_variant = \"made-up\"").is_err());
    }
}
