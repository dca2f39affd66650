//! Model checkpoints.
//!
//! Layout: the ASCII line `DSWIR1`, a newline, a single-line JSON header with
//! the model configuration (and the optional training state scalars), a
//! newline, then little-endian `f32` parameters in model store order. When a
//! training state is present, the optimizer's first and then second moments
//! follow the parameters, each with the same length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_parameters, DeepSwirModel, ModelConfig};

pub const MAGIC: &str = "DSWIR1";

/// Optimizer and loop state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub seed: u64,
    pub step: u64,
    pub momentum_product: f64,
    pub lr: f64,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    epoch: usize,
    seed: u64,
    step: u64,
    momentum_product: f64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    #[serde(default)]
    train_state: Option<StateHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: Vec<f32>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &DeepSwirModel<f32>) -> Self {
        Self {
            model_config: model.config().clone(),
            params: model.params().flat_values(),
            train_state: None,
        }
    }

    pub fn to_model(&self) -> Result<DeepSwirModel<f32>> {
        let mut model = crate::model::build_model(&self.model_config)?;
        model.params_mut().load_flat(&self.params)?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        let n = count_parameters(&self.model_config);
        let check = |what: &str, len: usize| {
            if len != n {
                Err(Error::Checkpoint(format!(
                    "{what} holds {len} values, configuration needs {n}"
                )))
            } else {
                Ok(())
            }
        };
        check("parameter blob", self.params.len())?;
        if let Some(s) = &self.train_state {
            check("first moment", s.first_moment.len())?;
            check("second moment", s.second_moment.len())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            model_config: self.model_config.clone(),
            train_state: self.train_state.as_ref().map(|s| StateHeader {
                epoch: s.epoch,
                seed: s.seed,
                step: s.step,
                momentum_product: s.momentum_product,
                lr: s.lr,
            }),
        };
        let mut out = format!(
            "{MAGIC}\n{}\n",
            serde_json::to_string(&header).expect("header serializes")
        )
        .into_bytes();
        let mut put = |vals: &[f32]| vals.iter().for_each(|v| out.extend(v.to_le_bytes()));
        put(&self.params);
        if let Some(s) = &self.train_state {
            put(&s.first_moment);
            put(&s.second_moment);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "unsupported header {:?}, expected {MAGIC}",
                String::from_utf8_lossy(&magic[..magic.len().min(16)])
            )));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing configuration line".into()))?;
        let blob = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing parameter blob".into()))?;
        let header: Header = serde_json::from_slice(header)
            .map_err(|e| Error::Checkpoint(format!("bad configuration: {e}")))?;
        header.model_config.validate()?;

        let n = count_parameters(&header.model_config);
        let arrays = if header.train_state.is_some() { 3 } else { 1 };
        if blob.len() != arrays * n * 4 {
            return Err(Error::Checkpoint(format!(
                "blob holds {} bytes, expected {} ({} float arrays of {n})",
                blob.len(),
                arrays * n * 4,
                arrays
            )));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let train_state = header.train_state.map(|s| TrainState {
            epoch: s.epoch,
            seed: s.seed,
            step: s.step,
            momentum_product: s.momentum_product,
            lr: s.lr,
            first_moment: floats[n..2 * n].to_vec(),
            second_moment: floats[2 * n..].to_vec(),
        });
        Ok(Self {
            model_config: header.model_config,
            params: floats[..n].to_vec(),
            train_state,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
