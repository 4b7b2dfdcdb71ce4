//! Versioned JSON checkpoints of trained parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{DiscriminatorParams, TrainedModel};
use crate::config::RunConfig;
use crate::model::{DecoderParams, EncoderParams, GraphAutoencoder, PolyFilterLayer};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: String,
    pub kappa: f64,
    pub tensors: Vec<NamedTensor>,
}

fn layer_tensors(prefix: &str, layer: &PolyFilterLayer, out: &mut Vec<(String, Tensor)>) {
    for (k, t) in layer.taps.iter().enumerate() {
        out.push((format!("{prefix}.tap{k}"), t.clone()));
    }
    if let Some(b) = &layer.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn named(model: &GraphAutoencoder, critic: &DiscriminatorParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (k, layer) in model.encoder.layers.iter().enumerate() {
        layer_tensors(&format!("encoder.layer{k}"), layer, &mut out);
    }
    out.push(("decoder.form".into(), model.decoder.form.clone()));
    out.push(("decoder.bias".into(), model.decoder.bias.clone()));
    layer_tensors("critic.filter", &critic.filter, &mut out);
    out.push(("critic.hidden_weight".into(), critic.hidden_weight.clone()));
    out.push(("critic.hidden_bias".into(), critic.hidden_bias.clone()));
    out.push(("critic.out_weight".into(), critic.out_weight.clone()));
    out.push(("critic.out_bias".into(), critic.out_bias.clone()));
    out
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel, config: &RunConfig) -> Self {
        let tensors = named(&model.autoencoder, &model.discriminator)
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch: model.history.len(),
            rng: format!(
                "ChaCha8 seed {}: stream 0 drives initialization, shuffling and latent noise; stream 1 the critic initialization",
                config.train_seed
            ),
            kappa: model.autoencoder.kappa,
            tensors,
        }
    }

    fn take(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
        Tensor::new(t.shape.clone(), t.values.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))
    }

    fn layer(&self, prefix: &str) -> Result<PolyFilterLayer> {
        let taps = [
            self.take(&format!("{prefix}.tap0"))?,
            self.take(&format!("{prefix}.tap1"))?,
            self.take(&format!("{prefix}.tap2"))?,
        ];
        let shape = taps[0].shape().to_vec();
        if shape.len() != 2 || taps.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(CheckpointError::Corrupt(format!("{prefix}: tap shapes disagree")));
        }
        let bias = self.take(&format!("{prefix}.bias"))?;
        if bias.shape() != [1, shape[1]] {
            return Err(CheckpointError::Corrupt(format!("{prefix}: bias shape {:?}", bias.shape())));
        }
        Ok(PolyFilterLayer {
            taps,
            bias: Some(bias),
        })
    }

    /// Rebuilds the autoencoder and critic, checking every shape.
    pub fn restore(&self) -> Result<(GraphAutoencoder, DiscriminatorParams)> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version,
            });
        }
        let corrupt = |m: String| Err(CheckpointError::Corrupt(m));
        let l0 = self.layer("encoder.layer0")?;
        let l1 = self.layer("encoder.layer1")?;
        if l0.d_out() != l1.d_in() {
            return corrupt("encoder layer widths disagree".into());
        }
        let c = l1.d_out();
        let form = self.take("decoder.form")?;
        let bias = self.take("decoder.bias")?;
        if form.shape() != [1, c * (c + 1) / 2] || bias.shape() != [1, 1] {
            return corrupt(format!("decoder shapes {:?} {:?} for latent dim {c}", form.shape(), bias.shape()));
        }
        let filter = self.layer("critic.filter")?;
        let width = filter.d_out();
        let critic = DiscriminatorParams {
            filter,
            hidden_weight: self.take("critic.hidden_weight")?,
            hidden_bias: self.take("critic.hidden_bias")?,
            out_weight: self.take("critic.out_weight")?,
            out_bias: self.take("critic.out_bias")?,
        };
        if critic.hidden_weight.shape() != [width, width]
            || critic.hidden_bias.shape() != [1, width]
            || critic.out_weight.shape() != [width, 1]
            || critic.out_bias.shape() != [1, 1]
        {
            return corrupt("critic dense shapes disagree".into());
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return corrupt(format!("kappa {}", self.kappa));
        }
        let model = GraphAutoencoder {
            encoder: EncoderParams { layers: [l0, l1] },
            decoder: DecoderParams { form, bias },
            kappa: self.kappa,
        };
        Ok((model, critic))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        ck.restore()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::train;
    use crate::synth::{generate_dataset, DatasetSpec};

    fn trained() -> (TrainedModel, RunConfig) {
        let cfg = RunConfig {
            nodes: 8,
            train_count: 3,
            test_count: 1,
            epochs: 2,
            latent_dim: 3,
            hidden_dim: 5,
            discriminator_width: 4,
            ..RunConfig::default()
        };
        let ds: DatasetSpec = cfg.dataset_spec();
        let data = generate_dataset(&ds, 1).unwrap();
        (train(&data.train, &cfg.train_config()).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, cfg) = trained();
        let ck = Checkpoint::from_model(&m, &cfg);
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        let (model, critic) = back.restore().unwrap();
        assert_eq!(model, m.autoencoder);
        assert_eq!(critic, m.discriminator);
        let g = generate_dataset(&cfg.dataset_spec(), 9).unwrap().train.remove(0);
        assert_eq!(model.reconstruct(&g).unwrap(), m.autoencoder.reconstruct(&g).unwrap());
    }

    #[test]
    fn damaged_files_are_errors() {
        let (m, cfg) = trained();
        let text = Checkpoint::from_model(&m, &cfg).to_json();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(CheckpointError::Corrupt(_))
        ));
        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        assert!(matches!(Checkpoint::from_json(&bumped), Err(CheckpointError::Version { found: 7 })));
        let mut ck = Checkpoint::from_model(&m, &cfg);
        ck.tensors[0].shape = vec![2, 2];
        assert!(matches!(ck.restore(), Err(CheckpointError::Corrupt(_))));
        let mut ck = Checkpoint::from_model(&m, &cfg);
        ck.tensors.retain(|t| t.name != "decoder.form");
        assert!(matches!(ck.restore(), Err(CheckpointError::Corrupt(_))));
    }
}
