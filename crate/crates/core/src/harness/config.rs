use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Structure};
use crate::postprocess::{RefinementConfig, RefinementMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_epochs: vec![30, 35, 40],
            decay_factor: 0.1,
            batch_size: 8,
            epochs: 45,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch > e).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub postproc: RefinementConfig,
    pub optim: OptimConfig,
    /// Seeds model initialization and the per-epoch data order.
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            postproc: RefinementConfig::default(),
            optim: OptimConfig::default(),
            seed: 7,
            data_dir: None,
            out_dir: None,
        }
    }
}

/// Flat key-value overrides, as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub structure: Option<Structure>,
    pub use_cem: Option<bool>,
    pub init_gain: Option<f64>,
    pub postproc: Option<RefinementMode>,
    pub alpha_up: Option<f64>,
    pub alpha_dec: Option<f64>,
    pub bin_threshold: Option<f64>,
    pub lr: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl ConfigOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    cfg.$($dst)+ = v;
                }
            };
        }
        set!(structure => model.structure);
        set!(use_cem => model.use_cem);
        set!(init_gain => model.init_gain);
        set!(postproc => postproc.mode);
        set!(alpha_up => postproc.alpha_up);
        set!(alpha_dec => postproc.alpha_dec);
        set!(bin_threshold => postproc.bin_threshold);
        set!(lr => optim.lr);
        set!(decay_epochs => optim.decay_epochs);
        set!(decay_factor => optim.decay_factor);
        set!(batch_size => optim.batch_size);
        set!(epochs => optim.epochs);
        set!(clip_norm => optim.clip_norm);
        set!(seed => seed);
        if self.data_dir.is_some() {
            cfg.data_dir = self.data_dir.clone();
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir.clone();
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.postproc.validate()?;
        let o = &self.optim;
        if !(o.decay_factor > 0.0 && o.decay_factor < 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1), got {}", o.decay_factor)));
        }
        if o.batch_size == 0 || o.epochs == 0 || !(o.lr > 0.0) || !(o.clip_norm > 0.0) {
            return Err(Error::Config("batch_size, epochs, lr and clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes a trained checkpoint.
    pub fn training_hash(&self) -> String {
        let doc = serde_json::json!({
            "model": self.model,
            "optim": self.optim,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}
