//! Layered pipeline configuration: defaults, then a TOML file, then
//! explicit (command-line) overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MaqaError, Result};
use crate::types::{MatchStrategy, PipelineConfig, Similarity};

/// Partial configuration whose keys mirror `PipelineConfig` field names.
/// Unset keys fall through to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigOverlay {
    pub retrieval_size: Option<usize>,
    pub evidence_k: Option<usize>,
    pub tau: Option<f64>,
    pub max_passage_tokens: Option<usize>,
    pub qc_separator: Option<String>,
    pub reader_separator: Option<String>,
    pub similarity: Option<Similarity>,
    pub match_strategy: Option<MatchStrategy>,
}

impl ConfigOverlay {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| MaqaError::Config(e.to_string()))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        Self::from_toml_str(&raw)
            .map_err(|e| MaqaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn is_empty(&self) -> bool {
        *self == ConfigOverlay::default()
    }

    /// Overlay this layer's set keys onto `base`.
    pub fn apply(&self, mut base: PipelineConfig) -> PipelineConfig {
        if let Some(v) = self.retrieval_size {
            base.retrieval_size = v;
        }
        if let Some(v) = self.evidence_k {
            base.evidence_k = v;
        }
        if let Some(v) = self.tau {
            base.tau = v;
        }
        if let Some(v) = self.max_passage_tokens {
            base.max_passage_tokens = v;
        }
        if let Some(v) = &self.qc_separator {
            base.qc_separator = v.clone();
        }
        if let Some(v) = &self.reader_separator {
            base.reader_separator = v.clone();
        }
        if let Some(v) = self.similarity {
            base.similarity = v;
        }
        if let Some(v) = self.match_strategy {
            base.match_strategy = v;
        }
        base
    }
}

/// Defaults, overridden by the optional file layer, overridden by the
/// explicit layer; the result is validated.
pub fn resolve(explicit: &ConfigOverlay, file: Option<&ConfigOverlay>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(layer) = file {
        cfg = layer.apply(cfg);
    }
    cfg = explicit.apply(cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_override_in_order() {
        let file = ConfigOverlay {
            evidence_k: Some(5),
            tau: Some(0.7),
            ..ConfigOverlay::default()
        };
        let cli = ConfigOverlay {
            tau: Some(0.3),
            ..ConfigOverlay::default()
        };
        let cfg = resolve(&cli, Some(&file)).unwrap();
        assert_eq!(cfg.evidence_k, 5);
        assert_eq!(cfg.tau, 0.3);
        assert_eq!(cfg.retrieval_size, PipelineConfig::default().retrieval_size);
    }

    #[test]
    fn toml_keys_match_field_names() {
        let overlay = ConfigOverlay::from_toml_str(
            "retrieval_size = 40\nevidence_k = 4\ntau = 0.6\nsimilarity = \"cosine\"\nmatch_strategy = \"optimal\"\nreader_separator = \"<sep>\"\n",
        )
        .unwrap();
        let cfg = resolve(&ConfigOverlay::default(), Some(&overlay)).unwrap();
        assert_eq!(cfg.retrieval_size, 40);
        assert_eq!(cfg.evidence_k, 4);
        assert_eq!(cfg.tau, 0.6);
        assert_eq!(cfg.similarity, Similarity::Cosine);
        assert_eq!(cfg.match_strategy, MatchStrategy::Optimal);
        assert_eq!(cfg.reader_separator, "<sep>");
    }

    #[test]
    fn unknown_keys_and_invalid_values_rejected() {
        assert!(matches!(
            ConfigOverlay::from_toml_str("no_such_key = 1"),
            Err(MaqaError::Config(_))
        ));
        let overlay = ConfigOverlay::from_toml_str("tau = 1.5").unwrap();
        assert!(resolve(&ConfigOverlay::default(), Some(&overlay)).is_err());
        let overlay = ConfigOverlay::from_toml_str("evidence_k = 200").unwrap();
        assert!(resolve(&ConfigOverlay::default(), Some(&overlay)).is_err());
    }

    #[test]
    fn empty_overlay_resolves_to_defaults() {
        let cfg = resolve(&ConfigOverlay::default(), None).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(ConfigOverlay::default().is_empty());
        assert!(ConfigOverlay::from_toml_str("").unwrap().is_empty());
    }
}
