//! One versioned configuration document drives every pipeline stage.
//!
//! Unknown keys are rejected, all defaults live on the section types, and
//! the config hash is taken over a canonical re-serialization of the parsed
//! document, so it is stable under key reordering in the source file.

use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::loss::LossHyperparams;
use crate::scene::GeneratorConfig;
use crate::semisup::{MixConfig, TransferMode};
use crate::teacher::InferenceConfig;
use crate::train::TrainerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length of the square feature window each anchor slot reads.
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { window: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemisupConfig {
    /// Manifest composition used when `distill` is given a fragment.
    pub mode: TransferMode,
}

impl Default for SemisupConfig {
    fn default() -> Self {
        SemisupConfig {
            mode: TransferMode::SemisupFull,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub labeled_data: String,
    pub unlabeled_data: String,
    pub records: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub loss: LossHyperparams,
    pub trainer: TrainerConfig,
    pub generator: GeneratorConfig,
    pub anchors: AnchorConfig,
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    pub mixing: MixConfig,
    pub semisup: SemisupConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: 1,
            loss: LossHyperparams::default(),
            trainer: TrainerConfig::default(),
            generator: GeneratorConfig::default(),
            anchors: AnchorConfig::default(),
            model: ModelConfig::default(),
            inference: InferenceConfig::default(),
            mixing: MixConfig {
                rho: 1.0,
                total_count: 0,
                seed: 13,
            },
            semisup: SemisupConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        self.loss.validate()?;
        self.trainer.validate()?;
        self.generator.validate()?;
        self.anchors.validate()?;
        self.inference.validate()?;
        if self.model.window == 0 || self.model.window % 2 == 0 {
            return Err(Error::config("model window must be odd"));
        }
        if !(0.0..=1.0).contains(&self.mixing.rho) {
            return Err(Error::config("mixing rho must be in [0, 1]"));
        }
        Ok(())
    }

    /// Canonical JSON of the parsed document: object keys sorted, no
    /// dependence on TOML formatting or key order.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        value.to_string()
    }

    pub fn config_hash_bytes(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher.finalize().into()
    }

    pub fn config_hash(&self) -> String {
        hex_string(&self.config_hash_bytes())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_ledgers() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.loss.gamma, 2.0);
        assert_eq!(cfg.loss.beta, 1.5);
        assert_eq!(cfg.loss.theta, 1.8);
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.loss.eps, 1e-6);
        assert_eq!(cfg.trainer.momentum, 0.9);
        assert_eq!(cfg.trainer.weight_decay, 1e-4);
        assert_eq!(cfg.trainer.lr_drop_points, vec![0.7, 0.9]);
        assert_eq!(cfg.trainer.iterations, 2000);
        assert_eq!(cfg.trainer.batch_size, 8);
        assert_eq!(cfg.trainer.learning_rate, 0.05);
        assert_eq!(cfg.anchors.scales, vec![2.0, 3.0, 4.5]);
        assert_eq!(cfg.anchors.pos_iou, 0.5);
        assert_eq!(cfg.anchors.neg_iou, 0.4);
        assert_eq!(cfg.model.window, 3);
        assert_eq!(cfg.inference.score_floor, 0.05);
        assert_eq!(cfg.inference.pre_nms_top_k, 1000);
        assert_eq!(cfg.inference.nms_iou, 0.5);
        assert_eq!(cfg.inference.calibration_tolerance, 0.02);
        cfg.validate().unwrap();
    }

    #[test]
    fn hash_stable_across_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        std::fs::write(&a, "[loss]\ngamma = 3.0\nbeta = 0.5\n").unwrap();
        std::fs::write(&b, "[loss]\nbeta = 0.5\ngamma = 3.0\n").unwrap();
        let ca = RunConfig::load(&a).unwrap();
        let cb = RunConfig::load(&b).unwrap();
        assert_eq!(ca.config_hash(), cb.config_hash());
        // and differs from defaults
        assert_ne!(ca.config_hash(), RunConfig::default().config_hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[loss]\ngama = 3.0\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        let p2 = dir.path().join("d.toml");
        std::fs::write(&p2, "[nonsense]\nx = 1\n").unwrap();
        assert!(RunConfig::load(&p2).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.toml");
        std::fs::write(&p, "[trainer]\niterations = 50\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.trainer.iterations, 50);
        assert_eq!(cfg.trainer.batch_size, 8);
    }
}
