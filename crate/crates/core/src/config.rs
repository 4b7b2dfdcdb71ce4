//! Flat run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adversarial::{GeneratorGanLoss, TrainConfig};
use crate::completion::CompletionConfig;
use crate::eval::{EvalConfig, ScoreVariant};
use crate::model::ReconstructionLoss;
use crate::synth::{AnomalyKind, ConnectomeSpec, DatasetSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub weight_location: f64,
    pub weight_scale: f64,
    pub mirror: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub anomaly_fraction: f64,
    pub anomaly_kind: AnomalyKind,
    pub severity: f64,
    pub target_block: Option<usize>,
    pub data_seed: u64,

    pub epochs: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub discriminator_width: usize,
    pub discriminator_steps: usize,
    pub loss: ReconstructionLoss,
    pub generator_gan_loss: GeneratorGanLoss,
    pub sample_latent: bool,
    pub train_seed: u64,

    pub restarts: usize,
    pub candidates: usize,
    pub max_rounds: usize,
    pub tolerance: f64,
    pub latent_steps: usize,
    pub latent_lr: f64,
    pub matching_weight: f64,
    pub ridge: f64,
    pub bandwidth: Option<f64>,
    pub temperature_scale: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub init_jitter: f64,
    pub dedup_distance: f64,
    pub completion_seed: u64,

    pub score: ScoreVariant,
    pub mask_fraction: f64,
    pub eval_seed: u64,

    pub data_dir: Option<String>,
    pub model_path: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        let t = TrainConfig::default();
        let c = CompletionConfig::default();
        let e = EvalConfig::default();
        Self {
            nodes: d.connectome.nodes,
            blocks: d.connectome.blocks,
            p_in: d.connectome.p_in,
            p_out: d.connectome.p_out,
            weight_location: d.connectome.weight_location,
            weight_scale: d.connectome.weight_scale,
            mirror: d.connectome.mirror,
            train_count: d.train_count,
            test_count: d.test_count,
            anomaly_fraction: d.anomaly_fraction,
            anomaly_kind: d.anomaly_kind,
            severity: d.severity,
            target_block: d.target_block,
            data_seed: 0,
            epochs: t.epochs,
            generator_lr: t.generator_lr,
            discriminator_lr: t.discriminator_lr,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            kappa: t.kappa,
            latent_dim: t.latent_dim,
            hidden_dim: t.hidden_dim,
            discriminator_width: t.discriminator_width,
            discriminator_steps: t.discriminator_steps,
            loss: t.loss,
            generator_gan_loss: t.generator_gan_loss,
            sample_latent: t.sample_latent,
            train_seed: t.seed,
            restarts: c.restarts,
            candidates: c.candidates,
            max_rounds: c.max_rounds,
            tolerance: c.tolerance,
            latent_steps: c.latent_steps,
            latent_lr: c.latent_lr,
            matching_weight: c.matching_weight,
            ridge: c.ridge,
            bandwidth: c.bandwidth,
            temperature_scale: c.temperature_scale,
            sinkhorn_iters: c.sinkhorn_iters,
            sinkhorn_tol: c.sinkhorn_tol,
            init_jitter: c.init_jitter,
            dedup_distance: c.dedup_distance,
            completion_seed: c.seed,
            score: e.score,
            mask_fraction: e.mask_fraction,
            eval_seed: e.seed,
            data_dir: None,
            model_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            connectome: ConnectomeSpec {
                nodes: self.nodes,
                blocks: self.blocks,
                p_in: self.p_in,
                p_out: self.p_out,
                weight_location: self.weight_location,
                weight_scale: self.weight_scale,
                mirror: self.mirror,
            },
            train_count: self.train_count,
            test_count: self.test_count,
            anomaly_fraction: self.anomaly_fraction,
            anomaly_kind: self.anomaly_kind,
            severity: self.severity,
            target_block: self.target_block,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            generator_lr: self.generator_lr,
            discriminator_lr: self.discriminator_lr,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            kappa: self.kappa,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            discriminator_width: self.discriminator_width,
            discriminator_steps: self.discriminator_steps,
            seed: self.train_seed,
            loss: self.loss,
            generator_gan_loss: self.generator_gan_loss,
            sample_latent: self.sample_latent,
        }
    }

    pub fn completion_config(&self) -> CompletionConfig {
        CompletionConfig {
            restarts: self.restarts,
            candidates: self.candidates,
            max_rounds: self.max_rounds,
            tolerance: self.tolerance,
            latent_steps: self.latent_steps,
            latent_lr: self.latent_lr,
            matching_weight: self.matching_weight,
            ridge: self.ridge,
            bandwidth: self.bandwidth,
            temperature_scale: self.temperature_scale,
            sinkhorn_iters: self.sinkhorn_iters,
            sinkhorn_tol: self.sinkhorn_tol,
            init_jitter: self.init_jitter,
            dedup_distance: self.dedup_distance,
            seed: self.completion_seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            completion: self.completion_config(),
            score: self.score,
            mask_fraction: self.mask_fraction,
            seed: self.eval_seed,
        }
    }

    /// Range checks delegated to each stage's own validation.
    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset_spec().connectome.validate().map_err(|e| invalid(&e))?;
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(ConfigError::Invalid("anomaly_fraction outside [0,1]".into()));
        }
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(ConfigError::Invalid("severity outside (0,1]".into()));
        }
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.completion_config().validate().map_err(|e| invalid(&e))?;
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(ConfigError::Invalid("mask_fraction outside [0,1)".into()));
        }
        Ok(())
    }

    /// Sets one key from its command-line text. The text is read as JSON
    /// when it parses, otherwise as a string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut value = serde_json::to_value(&*self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        if !map.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(value).map_err(|e| ConfigError::BadValue {
            key: key.to_string(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConfigError::File {
            path: "<config>".into(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file_err = |msg: String| ConfigError::File {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
