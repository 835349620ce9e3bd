//! The single run configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{ChromaConfig, FeatureKind, MfccConfig};
use crate::encoder::{EncoderConfig, ModelConfig};
use crate::error::{CoreError, Result};
use crate::metrics::DbnConfig;
use crate::pretrain::TrainConfig;
use crate::probe::ProbeConfig;
use crate::quantize::KMeansConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureChoice {
    #[default]
    Mfcc,
    Chroma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DspSection {
    pub feature: FeatureChoice,
    pub mfcc: MfccConfig,
    pub chroma: ChromaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSection {
    /// Beat hit window in seconds.
    pub beat_tolerance: f64,
    pub dbn: DbnConfig,
    /// Credit fifths in both directions in the refined key score.
    pub bidirectional_fifth: bool,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            beat_tolerance: 0.02,
            dbn: DbnConfig::default(),
            bidirectional_fifth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dsp: DspSection,
    pub quantize: KMeansConfig,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub probe: ProbeConfig,
    pub metric: MetricSection,
}

/// Re-labels a plain validation error with the key it belongs to.
fn at(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        CoreError::InvalidInput(detail) => CoreError::Config {
            path: path.into(),
            detail,
        },
        other => other,
    })
}

impl RunConfig {
    /// Parses and validates a JSON document. Unknown keys and type errors
    /// are reported with the dotted path of the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CoreError::Config {
                path: if path == "." { "<root>".into() } else { path },
                detail: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        at("dsp.mfcc", self.dsp.mfcc.validate())?;
        let c = &self.dsp.chroma;
        if c.window == 0 || c.hop == 0 || c.n_fft < c.window || !(0.0 < c.fmin && c.fmin < c.fmax) {
            return Err(CoreError::Config {
                path: "dsp.chroma".into(),
                detail: "need 0 < window <= n_fft, hop > 0 and 0 < fmin < fmax".into(),
            });
        }
        let q = &self.quantize;
        if q.k == 0 || q.max_iter == 0 || q.frame_budget < q.k || !(q.tol >= 0.0) {
            return Err(CoreError::Config {
                path: "quantize".into(),
                detail: "need k >= 1, max_iter >= 1, frame_budget >= k and tol >= 0".into(),
            });
        }
        self.encoder.validate()?;
        self.pretrain.validate()?;
        let model = ModelConfig {
            encoder: self.encoder.clone(),
            paradigm: self.pretrain.paradigm,
            head: self.pretrain.head.clone(),
        };
        at("pretrain.head", model.validate())?;
        at(
            "pretrain.target_layers",
            self.pretrain.target_layers.indices(self.encoder.n_layers).map(drop),
        )?;
        if let Some(l) = self.pretrain.iteration_layer {
            if l > self.encoder.n_layers {
                return Err(CoreError::Config {
                    path: "pretrain.iteration_layer".into(),
                    detail: format!("layer {l} beyond the {}-layer encoder", self.encoder.n_layers),
                });
            }
        }
        self.probe.validate()?;
        if !(self.metric.beat_tolerance > 0.0) {
            return Err(CoreError::Config {
                path: "metric.beat_tolerance".into(),
                detail: "must be positive".into(),
            });
        }
        at("metric.dbn", self.metric.dbn.validate())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn feature_kind(&self) -> FeatureKind {
        match self.dsp.feature {
            FeatureChoice::Mfcc => FeatureKind::Mfcc,
            FeatureChoice::Chroma => FeatureKind::Chroma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn knobs_are_reachable() {
        let text = r#"{
            "seed": 4,
            "dsp": {"mfcc": {"include_deltas": false}},
            "quantize": {"k": 2000},
            "pretrain": {"mask": {"span": 5, "prob": 0.5}, "steps": 300, "crop_seconds": 5,
                         "target_layers": 1, "iterations": 2},
            "probe": {"hidden": 256}
        }"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.quantize.k, 2000);
        assert_eq!(cfg.dsp.mfcc.dims(), 13);
        assert_eq!((cfg.pretrain.mask.span, cfg.pretrain.steps, cfg.pretrain.iterations), (5, 300, 2));
        assert_eq!(cfg.probe.hidden, 256);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::parse(r#"{"pretrain": {"mask": {"spam": 3}}}"#).unwrap_err();
        match err {
            CoreError::Config { path, .. } => assert_eq!(path, "pretrain.mask.spam"),
            e => panic!("{e}"),
        }
        let err = RunConfig::parse(r#"{"quantize": {"k": "many"}}"#).unwrap_err();
        assert!(matches!(err, CoreError::Config { ref path, .. } if path == "quantize.k"), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = RunConfig::parse(r#"{"probe": {"lr": 0}}"#).unwrap_err();
        assert!(matches!(err, CoreError::Config { ref path, .. } if path.starts_with("probe")), "{err}");
        let err = RunConfig::parse(r#"{"dsp": {"mfcc": {"hop": 7}}}"#).unwrap_err();
        assert!(matches!(err, CoreError::Config { ref path, .. } if path == "dsp.mfcc"), "{err}");
        let err = RunConfig::parse(r#"{"pretrain": {"iteration_layer": 9}}"#).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
