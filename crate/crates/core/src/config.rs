//! Run configuration: flat, documented keys with defaults, JSON file
//! loading, and the effective-config snapshot written next to outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::MaeConfig;

/// Flat configuration for every command. File values come from `--config`;
/// CLI flags override individual fields; the merged result is written to
/// the output directory for auditability.
///
/// Model defaults are the desk-scale "tiny" configuration; optimizer and
/// protocol defaults are the full-scale reference values (mask ratio 0.75,
/// base LR 1.5e-4 × batch/256, weight decay 0.05/0.01, label smoothing 0.1,
/// drop path 0.2, 5 warmup epochs, 50 fine-tune epochs, 5 folds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it by name.
    pub seed: u64,
    /// Output directory for checkpoints, logs, and metric files.
    pub out_dir: String,
    /// Input manifest (`path,label,source` CSV).
    pub manifest: String,

    // model architecture (tiny defaults)
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub normalize_targets: bool,

    // imaging
    /// Pre-crop working size (full-scale analogue: 256 → 224 crop).
    pub working_size: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    /// Fill padding with the constant mode color instead of matched noise.
    pub pad_constant: bool,

    // pretraining
    pub epochs: usize,
    pub batch_size: usize,
    /// Reference LR at batch 256; the actual base LR is scaled linearly by
    /// the effective batch size.
    pub reference_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Pretraining warmup; `None` selects 5% of total epochs.
    pub warmup_epochs: Option<usize>,
    pub min_lr: f64,
    pub accumulation_steps: usize,
    /// Checkpoint cadence in epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Write masked/reconstruction/original triptychs at checkpoints.
    pub dump_recon: bool,

    // fine-tuning
    pub ft_epochs: usize,
    pub ft_batch_size: usize,
    pub ft_lr: f64,
    pub ft_weight_decay: f64,
    pub ft_beta2: f64,
    /// Fine-tune warmup epochs (clamped to total−1 for very short runs).
    pub ft_warmup_epochs: usize,
    pub label_smoothing: f64,
    pub drop_path_rate: f64,
    pub llrd_decay: f64,
    pub head_hidden: usize,
    /// K of the stratified K-fold protocol.
    pub folds: usize,
    /// Folds to run (`None` = all).
    pub fold_list: Option<Vec<usize>>,
    /// Labeled-data fraction of the training part (min one per label).
    pub fraction: f64,
    /// Random-initialize the encoder instead of loading the checkpoint.
    pub scratch: bool,
    /// Pretraining checkpoint for fine-tuning, or fine-tuned checkpoint for
    /// evaluation.
    pub checkpoint: Option<String>,
    /// Resume pretraining from this checkpoint.
    pub resume: Option<String>,

    // synthetic data
    pub synth_labels: usize,
    pub synth_per_label: usize,
    pub synth_image_size: usize,
    /// Larger values shrink the inter-label shape offsets.
    pub synth_difficulty: f64,

    // preprocessing
    /// Input image tree for `preprocess` (one subdirectory per label).
    pub input_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "out".to_string(),
            manifest: String::new(),
            image_size: 32,
            patch_size: 8,
            enc_depth: 4,
            enc_dim: 64,
            enc_heads: 4,
            dec_depth: 2,
            dec_dim: 32,
            dec_heads: 4,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            normalize_targets: true,
            working_size: 36,
            crop_scale_min: 0.4,
            crop_scale_max: 1.0,
            pad_constant: false,
            epochs: 100,
            batch_size: 64,
            reference_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            warmup_epochs: None,
            min_lr: 0.0,
            accumulation_steps: 1,
            checkpoint_every: 0,
            dump_recon: false,
            ft_epochs: 50,
            ft_batch_size: 128,
            ft_lr: 2e-3,
            ft_weight_decay: 0.01,
            ft_beta2: 0.999,
            ft_warmup_epochs: 5,
            label_smoothing: 0.1,
            drop_path_rate: 0.2,
            llrd_decay: 0.75,
            head_hidden: 512,
            folds: 5,
            fold_list: None,
            fraction: 1.0,
            scratch: false,
            checkpoint: None,
            resume: None,
            synth_labels: 10,
            synth_per_label: 64,
            synth_image_size: 40,
            synth_difficulty: 1.0,
            input_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Writes the effective merged configuration next to the outputs.
    pub fn write_effective(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(out_dir.join("config.json"), json + "\n")?;
        Ok(())
    }

    pub fn model_config(&self) -> MaeConfig {
        MaeConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: 1,
            enc_depth: self.enc_depth,
            enc_dim: self.enc_dim,
            enc_heads: self.enc_heads,
            dec_depth: self.dec_depth,
            dec_dim: self.dec_dim,
            dec_heads: self.dec_heads,
            mlp_ratio: self.mlp_ratio,
            mask_ratio: self.mask_ratio,
            normalize_targets: self.normalize_targets,
        }
    }

    /// Pretraining warmup: explicit value or 5% of total epochs, at least 1.
    pub fn pretrain_warmup_epochs(&self) -> usize {
        self.warmup_epochs
            .unwrap_or(((self.epochs as f64) * 0.05).round() as usize)
            .clamp(1, self.epochs.saturating_sub(1).max(1))
    }

    pub fn validate_common(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.image_size > self.working_size {
            return Err(Error::Config(format!(
                "image_size {} exceeds working_size {}",
                self.image_size, self.working_size
            )));
        }
        if !(0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "crop scale range ({}, {}) outside (0,1]",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if self.batch_size == 0 || self.ft_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".to_string()));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0,1]",
                self.drop_path_rate
            )));
        }
        if !(0.0 < self.fraction && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0,1]", self.fraction)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds {} must be >= 2", self.folds)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.mask_ratio, 0.75);
        assert_eq!(cfg.reference_lr, 1.5e-4);
        assert_eq!(cfg.weight_decay, 0.05);
        assert_eq!(cfg.ft_weight_decay, 0.01);
        assert_eq!(cfg.ft_lr, 2e-3);
        assert_eq!(cfg.ft_batch_size, 128);
        assert_eq!(cfg.ft_epochs, 50);
        assert_eq!(cfg.ft_warmup_epochs, 5);
        assert_eq!(cfg.label_smoothing, 0.1);
        assert_eq!(cfg.drop_path_rate, 0.2);
        assert_eq!(cfg.llrd_decay, 0.75);
        assert_eq!(cfg.head_hidden, 512);
        assert_eq!(cfg.folds, 5);
        assert_eq!((cfg.beta1, cfg.beta2), (0.9, 0.95));
        // Tiny model defaults.
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.patch_size, 8);
        assert_eq!((cfg.enc_depth, cfg.enc_dim, cfg.enc_heads), (4, 64, 4));
        assert_eq!((cfg.dec_depth, cfg.dec_dim), (2, 32));
        cfg.validate_common().unwrap();
    }

    #[test]
    fn pretrain_warmup_defaults_to_five_percent() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pretrain_warmup_epochs(), 5); // 5% of 100
        let mut short = cfg.clone();
        short.epochs = 20;
        assert_eq!(short.pretrain_warmup_epochs(), 1);
        let mut explicit = cfg;
        explicit.warmup_epochs = Some(10);
        assert_eq!(explicit.pretrain_warmup_epochs(), 10);
    }

    #[test]
    fn file_roundtrip_and_unknown_key_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut cfg = RunConfig::default();
        cfg.epochs = 7;
        cfg.fold_list = Some(vec![0, 2]);
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);

        std::fs::write(&path, r#"{"epochs": 3, "no_such_field": 1}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("no_such_field"), "{err}");
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.mask_ratio = 1.0;
        assert!(cfg.validate_common().is_err());
        let mut cfg = RunConfig::default();
        cfg.fraction = 0.0;
        assert!(cfg.validate_common().is_err());
        let mut cfg = RunConfig::default();
        cfg.image_size = 64; // larger than working_size 36
        assert!(cfg.validate_common().is_err());
    }
}
