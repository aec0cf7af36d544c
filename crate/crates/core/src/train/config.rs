//! Run configuration files.
//!
//! ```toml
//! corpus = "data/corpus.txt"
//! output_dir = "runs/nitp"
//!
//! [model]
//! num_layers = 2
//!
//! [objective]      # omit the section for a plain next-token run
//! lambda = 1.0
//!
//! [train]
//! total_steps = 3000
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossFamily, ObjectiveConfig};
use crate::probes::ProbeConfig;
use crate::train::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_ratio: f64,
    pub total_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// 0 disables geometry snapshots.
    pub snapshot_every: usize,
    pub snapshot_pairs: usize,
    pub log_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 100,
            decay_ratio: 0.2,
            total_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 2,
            seq_len: 256,
            seed: 0,
            snapshot_every: 50,
            snapshot_pairs: 1024,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio < 1.0) {
            return bad(format!("decay_ratio must lie in (0, 1), got {}", self.decay_ratio));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.log_every == 0 || self.snapshot_pairs == 0 {
            return bad("batch_size, log_every and snapshot_pairs must be positive and seq_len >= 2".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            num_pairs: self.snapshot_pairs,
            every: self.snapshot_every,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    /// `None` trains on next-token prediction alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus: corpus.into(),
            output_dir: None,
            model: ModelConfig::default(),
            objective: Some(ObjectiveConfig::default()),
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.corpus.is_relative() {
            cfg.corpus = base.join(&cfg.corpus);
        }
        if let Some(out) = cfg.output_dir.as_mut().filter(|o| o.is_relative()) {
            *out = base.join(&*out);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("run config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if let Some(obj) = &self.objective {
            obj.validate(self.model.num_layers)?;
        }
        Ok(())
    }

    /// Whether a projection head is trained alongside the model.
    pub fn has_projector(&self) -> bool {
        self.objective
            .as_ref()
            .is_some_and(|o| o.use_projector && o.loss_family != LossFamily::GenericCosineReg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml_str("corpus = \"c.txt\"\n[objective]\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.objective, Some(ObjectiveConfig::default()));
        let cfg = RunConfig::from_toml_str("corpus = \"c.txt\"\n").unwrap();
        assert_eq!(cfg.objective, None);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::from_toml_str("corpus = \"c\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("corpus = \"c\"\n[train]\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::from_toml_str("corpus = \"c\"\n[objective]\nlambda = 1\nshift = 2\n").is_err());
    }

    #[test]
    fn cross_field_checks() {
        let too_long = "corpus = \"c\"\n[model]\nmax_seq_len = 16\n[train]\nseq_len = 32\n";
        assert!(matches!(RunConfig::from_toml_str(too_long), Err(Error::Config(_))));
        let deep_target = "corpus = \"c\"\n[model]\nnum_layers = 2\n[objective]\ntarget_layer = 3\n";
        assert!(RunConfig::from_toml_str(deep_target).is_err());
        let warm = "corpus = \"c\"\n[train]\nwarmup_steps = 10\ntotal_steps = 10\n";
        assert!(RunConfig::from_toml_str(warm).is_err());
        let decay = "corpus = \"c\"\n[train]\ndecay_ratio = 1.0\n";
        assert!(RunConfig::from_toml_str(decay).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::new("corpus.txt");
        cfg.output_dir = Some("out".into());
        cfg.objective.as_mut().unwrap().target_layer = Some(1);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
