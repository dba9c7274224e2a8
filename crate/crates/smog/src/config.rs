//! TOML run configuration with canonical serialization (stable key order) so
//! the config hash embedded in checkpoints is deterministic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use smog_core::augment::AugConfig;
use smog_core::encoder::{BackboneKind, NetworkSpec};
use smog_core::grouping::{InitMethod, UpdateVariant};
use smog_core::loss::Objective;
use smog_core::optim::{scaled_lr, OptimConfig};
use smog_core::trainer::TrainSettings;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCfg {
    #[serde(default = "EncoderCfg::d_backbone")]
    pub backbone: String,
    #[serde(default = "EncoderCfg::d_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "EncoderCfg::d_proj_hidden")]
    pub proj_hidden: usize,
    #[serde(default = "EncoderCfg::d_proj_dim")]
    pub proj_dim: usize,
    #[serde(default = "EncoderCfg::d_pred_hidden")]
    pub pred_hidden: usize,
}

impl EncoderCfg {
    fn d_backbone() -> String {
        "tiny_cnn".into()
    }
    fn d_widths() -> Vec<usize> {
        vec![8, 16]
    }
    fn d_proj_hidden() -> usize {
        256
    }
    fn d_proj_dim() -> usize {
        32
    }
    fn d_pred_hidden() -> usize {
        256
    }
}

impl Default for EncoderCfg {
    fn default() -> Self {
        EncoderCfg {
            backbone: Self::d_backbone(),
            widths: Self::d_widths(),
            proj_hidden: Self::d_proj_hidden(),
            proj_dim: Self::d_proj_dim(),
            pred_hidden: Self::d_pred_hidden(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimCfg {
    /// Base LR at batch 256; the effective peak is base_lr · batch/256.
    #[serde(default = "OptimCfg::d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "OptimCfg::d_momentum")]
    pub momentum: f64,
    #[serde(default = "OptimCfg::d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_true")]
    pub lars: bool,
    #[serde(default = "OptimCfg::d_warmup_epochs")]
    pub warmup_epochs: f64,
}

impl OptimCfg {
    fn d_base_lr() -> f64 {
        0.3
    }
    fn d_momentum() -> f64 {
        0.9
    }
    fn d_weight_decay() -> f64 {
        1e-6
    }
    fn d_warmup_epochs() -> f64 {
        1.0
    }
}

impl Default for OptimCfg {
    fn default() -> Self {
        OptimCfg {
            base_lr: Self::d_base_lr(),
            momentum: Self::d_momentum(),
            weight_decay: Self::d_weight_decay(),
            lars: true,
            warmup_epochs: Self::d_warmup_epochs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentCfg {
    #[serde(default = "AugmentCfg::d_large")]
    pub large_size: usize,
    #[serde(default = "AugmentCfg::d_small")]
    pub small_size: usize,
    #[serde(default = "AugmentCfg::d_n_small")]
    pub n_small: usize,
}

impl AugmentCfg {
    fn d_large() -> usize {
        32
    }
    fn d_small() -> usize {
        12
    }
    fn d_n_small() -> usize {
        4
    }
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            large_size: Self::d_large(),
            small_size: Self::d_small(),
            n_small: Self::d_n_small(),
        }
    }
}

/// One pretraining run. Required keys: dataset, run_dir, batch_size, epochs,
/// seed, l; everything else has documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub run_dir: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Number of groups l.
    pub l: usize,
    #[serde(default = "TrainConfig::d_objective")]
    pub objective: String,
    #[serde(default = "TrainConfig::d_update_variant")]
    pub update_variant: String,
    #[serde(default = "TrainConfig::d_beta_start")]
    pub beta_start: f64,
    #[serde(default = "TrainConfig::d_beta_end")]
    pub beta_end: f64,
    #[serde(default = "TrainConfig::d_alpha")]
    pub alpha: f64,
    #[serde(default = "TrainConfig::d_tau")]
    pub tau: f64,
    #[serde(default = "TrainConfig::d_reset_period")]
    pub reset_period: u64,
    #[serde(default = "d_true")]
    pub periodic_clustering: bool,
    #[serde(default = "d_true")]
    pub reset_momentum: bool,
    #[serde(default = "d_true")]
    pub multi_crop: bool,
    #[serde(default = "d_true")]
    pub symmetrize: bool,
    #[serde(default = "TrainConfig::d_init_batches")]
    pub init_batches: usize,
    #[serde(default = "TrainConfig::d_init_method")]
    pub init_method: String,
    /// Checkpoint every this many iterations (0 = final only).
    #[serde(default)]
    pub ckpt_every: u64,
    #[serde(default)]
    pub encoder: EncoderCfg,
    #[serde(default)]
    pub optimizer: OptimCfg,
    #[serde(default)]
    pub augment: AugmentCfg,
}

impl TrainConfig {
    fn d_objective() -> String {
        "smog".into()
    }
    fn d_update_variant() -> String {
        "mu".into()
    }
    fn d_beta_start() -> f64 {
        1.0
    }
    fn d_beta_end() -> f64 {
        0.99
    }
    fn d_alpha() -> f64 {
        0.9
    }
    fn d_tau() -> f64 {
        0.1
    }
    fn d_reset_period() -> u64 {
        25
    }
    fn d_init_batches() -> usize {
        8
    }
    fn d_init_method() -> String {
        "kmeans".into()
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Canonical serialization: serde emits struct fields in declaration
    /// order, so two equal configs always hash the same.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv64(self.canonical().as_bytes())
    }

    pub fn objective(&self) -> Result<Objective, ConfigError> {
        match self.objective.as_str() {
            "smog" | "eq3" => Ok(Objective::Smog),
            "group" | "eq2" => Ok(Objective::PureGroup),
            "instance" | "eq1" => Ok(Objective::InstanceNce),
            other => Err(ConfigError::Invalid(format!("objective `{other}`"))),
        }
    }

    pub fn update_variant(&self) -> Result<UpdateVariant, ConfigError> {
        match self.update_variant.as_str() {
            "mu" => Ok(UpdateVariant::MomentumUpdate),
            "au" => Ok(UpdateVariant::AveragingUpdate),
            "al" => Ok(UpdateVariant::AdoptLatest),
            "rs" => Ok(UpdateVariant::RandomSelect),
            other => Err(ConfigError::Invalid(format!("update_variant `{other}`"))),
        }
    }

    pub fn init_method(&self) -> Result<InitMethod, ConfigError> {
        match self.init_method.as_str() {
            "kmeans" => Ok(InitMethod::Kmeans),
            "random" => Ok(InitMethod::Random),
            other => Err(ConfigError::Invalid(format!("init_method `{other}`"))),
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, ConfigError> {
        let backbone = match self.encoder.backbone.as_str() {
            "tiny_cnn" => BackboneKind::TinyCnn,
            "mlp" => BackboneKind::Mlp,
            other => Err(ConfigError::Invalid(format!("backbone `{other}`")))?,
        };
        Ok(NetworkSpec {
            backbone,
            widths: self.encoder.widths.clone(),
            input_channels: 3,
            mlp_input_dim: 3 * self.augment.large_size * self.augment.large_size,
            proj_hidden: self.encoder.proj_hidden,
            proj_dim: self.encoder.proj_dim,
            pred_hidden: self.encoder.pred_hidden,
        })
    }

    /// Iterations in one epoch for a dataset of `n` images.
    pub fn iters_per_epoch(&self, n: usize) -> u64 {
        ((n / self.batch_size.max(1)).max(1)) as u64
    }

    pub fn to_settings(&self, dataset_len: usize) -> Result<TrainSettings, ConfigError> {
        let ipe = self.iters_per_epoch(dataset_len);
        let total_iters = ipe * self.epochs as u64;
        let warmup = ((self.optimizer.warmup_epochs * ipe as f64) as u64)
            .clamp(1, total_iters.saturating_sub(1).max(1));
        let mut aug = AugConfig::desk_default();
        aug.large_size = self.augment.large_size;
        aug.small_size = self.augment.small_size;
        aug.n_small = self.augment.n_small;
        Ok(TrainSettings {
            spec: self.network_spec()?,
            aug,
            multi_crop: self.multi_crop,
            objective: self.objective()?,
            l: self.l,
            tau: self.tau,
            alpha: self.alpha,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            update_variant: self.update_variant()?,
            reset_period: self.reset_period,
            periodic_clustering: self.periodic_clustering,
            reset_momentum: self.reset_momentum,
            symmetrize: self.symmetrize,
            optim: OptimConfig {
                lr: scaled_lr(self.optimizer.base_lr, self.batch_size),
                momentum: self.optimizer.momentum,
                weight_decay: self.optimizer.weight_decay,
                use_lars: self.optimizer.lars,
                lars_eta: 0.02,
                lars_eps: 1e-9,
            },
            warmup_iters: warmup,
            total_iters,
            batch_size: self.batch_size,
            seed: self.seed,
            init_batches: self.init_batches,
            init_method: self.init_method()?,
        })
    }
}

/// FNV-1a, enough for a config fingerprint.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
