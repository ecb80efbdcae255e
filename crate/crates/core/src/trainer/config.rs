use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::encoders::{TextConfig, VitConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::lora::LoraConfig;
use crate::objectives::LossWeights;

/// Architecture switches for the four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub lora: bool,
    pub mfa: bool,
    pub sfa: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            lora: true,
            mfa: true,
            sfa: true,
        }
    }
}

impl Ablation {
    pub const BASELINE: Self = Self {
        lora: false,
        mfa: false,
        sfa: false,
    };

    /// Baseline, then LoRA, LoRA+MFA and LoRA+MFA+SFA.
    pub fn arms() -> [(&'static str, Self); 4] {
        [
            ("baseline", Self::BASELINE),
            ("+LoRA", Self { lora: true, ..Self::BASELINE }),
            ("+MFA", Self { lora: true, mfa: true, sfa: false }),
            ("+SFA", Self { lora: true, mfa: true, sfa: true }),
        ]
    }
}

/// Everything a training run needs; serialised as the TOML run file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Interpolated features per batch; half the batch size when unset.
    pub sfa_count: Option<usize>,
    /// Vocabulary file; the built-in word list when unset.
    pub vocab: Option<PathBuf>,
    pub loss: LossWeights,
    pub lora: LoraConfig,
    pub fusion: FusionConfig,
    pub augment: AugmentPolicy,
    pub ablation: Ablation,
    pub vit: VitConfig,
    pub text: TextConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 42,
            max_steps: None,
            sfa_count: None,
            vocab: None,
            loss: LossWeights::default(),
            lora: LoraConfig::default(),
            fusion: FusionConfig::default(),
            augment: AugmentPolicy::default(),
            ablation: Ablation::default(),
            vit: VitConfig::default(),
            text: TextConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas ({b1}, {b2}) outside [0, 1)")));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.loss.validate()?;
        self.vit.validate()?;
        self.augment.validate()?;
        if self.ablation.lora {
            self.lora.validate(self.vit.d_model, self.vit.d_model)?;
        }
        if self.ablation.mfa {
            self.fusion.resolve(self.vit.num_blocks)?;
        }
        Ok(())
    }

    pub fn sfa_count(&self) -> usize {
        self.sfa_count.unwrap_or(self.batch_size / 2)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a run file. A relative `vocab` path is taken relative to the
    /// run file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(v), Some(dir)) = (&cfg.vocab, path.parent()) {
            if v.is_relative() {
                cfg.vocab = Some(dir.join(v));
            }
        }
        Ok(cfg)
    }
}
