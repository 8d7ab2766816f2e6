//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "hdt-checkpoint",
//!   "version": 1,
//!   "policy": "hdt" | "dt" | "dt-no-rtg" | "hdt-plus-rtg" | "bc",
//!   "env": "grid-maze-sparse",
//!   "iteration": 20000,
//!   "normalizer": {"state_mean": [..], "state_std": [..], "rtg_scale": 1.0},
//!   "dataset": {"label": "medium", "episodes": 500, "max_return": 1.0,
//!               "mean_return": 0.9, "mean_length": 80.1},
//!   "models": [
//!     {"role": "high" | "low" | "dt" | "bc",
//!      "config": {"type": "transformer", ...} | {"type": "mlp", ...},
//!      "params": [{"name": "head.w", "shape": [32, 2], "values": [..]}, ..]}
//!   ],
//!   "training": {            // optional; present for resumable checkpoints
//!     "config": {..},        // the training configuration
//!     "optimizers": [{"step": n, "m": [[..]], "v": [[..]]}, ..],
//!     "rngs": [{"seed": "<64 hex digits>", "stream": 0, "word_pos": "123"}, ..],
//!     "loss_sums": [..], "loss_count": n,
//!     "report": {..},
//!     "best": [..models..] | null
//!   }
//! }
//! ```
//!
//! Values are written with shortest round-trip formatting, so saving and
//! loading reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use diffcore::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalizer};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::optim::AdamState;
use crate::policy::{Agent, NetConfig, Network, PolicyKind, Role};
use crate::train::{TrainConfig, TrainReport};

pub const FORMAT: &str = "hdt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredModel {
    pub role: Role,
    pub config: NetConfig,
    pub params: Vec<StoredTensor>,
}

impl StoredModel {
    pub fn from_network(role: Role, net: &Network) -> Self {
        Self {
            role,
            config: net.config.clone(),
            params: net
                .params
                .names()
                .iter()
                .zip(net.params.tensors())
                .map(|(n, t)| StoredTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the network, checking names and shapes against the config.
    pub fn to_network(&self) -> Result<Network> {
        let names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        let tensors = self
            .params
            .iter()
            .map(|p| {
                Tensor::new(p.shape.clone(), p.values.clone())
                    .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_parts(names, tensors)?;
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        let reference = match &self.config {
            NetConfig::Transformer(c) => init_params(c, &mut crate::seed::rng(0, 0))?,
            NetConfig::Mlp(c) => Network::mlp(c.clone(), &mut crate::seed::rng(0, 0))?.params,
        };
        let layout_ok = reference.names() == params.names()
            && reference
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !layout_ok {
            return Err(Error::Checkpoint(format!(
                "{:?} parameters do not match their configuration",
                self.role
            )));
        }
        Ok(Network {
            config: self.config.clone(),
            params,
        })
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("corrupt random generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Summary of the dataset a policy was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub episodes: usize,
    pub max_return: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

impl DatasetSummary {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            label: dataset.meta.quality.clone(),
            episodes: dataset.len(),
            max_return: dataset.max_return(),
            mean_return: dataset.mean_return(),
            mean_length: dataset.mean_length(),
        }
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizers: Vec<AdamState>,
    pub rngs: Vec<RngState>,
    pub loss_sums: Vec<f64>,
    pub loss_count: u64,
    pub report: TrainReport,
    pub best: Option<Vec<StoredModel>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub policy: PolicyKind,
    pub env: String,
    pub iteration: u64,
    pub normalizer: Normalizer,
    pub dataset: DatasetSummary,
    pub models: Vec<StoredModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<Box<TrainingState>>,
}

impl Checkpoint {
    pub fn from_agent(agent: &Agent, env: &str, iteration: u64, dataset: DatasetSummary) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            policy: agent.kind,
            env: env.into(),
            iteration,
            normalizer: agent.normalizer.clone(),
            dataset,
            models: agent
                .networks()
                .into_iter()
                .map(|(r, n)| StoredModel::from_network(r, n))
                .collect(),
            training: None,
        }
    }

    pub fn agent(&self) -> Result<Agent> {
        let nets = self
            .models
            .iter()
            .map(|m| Ok((m.role, m.to_network()?)))
            .collect::<Result<Vec<_>>>()?;
        let agent = Agent::from_networks(self.policy, self.normalizer.clone(), nets)?;
        if agent.normalizer.state_mean.len() != agent.state_dim()
            || agent.normalizer.state_std.len() != agent.state_dim()
        {
            return Err(Error::Checkpoint("normalizer width differs from model state width".into()));
        }
        Ok(agent)
    }

    /// Fails unless the checkpoint's models fit `env`.
    pub fn check_env(&self, env: &EnvSpec) -> Result<()> {
        for m in &self.models {
            if m.config.state_dim() != env.state_dim || m.config.action_dim() != env.action_dim {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint expects state_dim {} and action_dim {}, {} has {} and {}",
                    m.config.state_dim(),
                    m.config.action_dim(),
                    env.name(),
                    env.state_dim,
                    env.action_dim
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                header.version
            )));
        }
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        ckpt.agent()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_round_trip() {
        let mut rng = crate::seed::rng(42, 3);
        for _ in 0..17 {
            rng.random::<u64>();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn corrupt_rng_state_is_rejected() {
        let s = RngState {
            seed: "zz".into(),
            stream: 0,
            word_pos: "0".into(),
        };
        assert!(s.restore().is_err());
    }
}
