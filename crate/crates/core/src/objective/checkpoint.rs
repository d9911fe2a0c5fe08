//! Checkpoint directory: `checkpoint.json` (configurations, step, tensor
//! table) plus raw little-endian f32 blobs for the parameters and both Adam
//! moment buffers, each the concatenation of all tensors in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::{read_f32_blob, write_f32_blob};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT: &str = "instructcap-checkpoint-1";
const PARAMS_BLOB: &str = "params.f32";
const FIRST_MOMENT_BLOB: &str = "adam_m.f32";
const SECOND_MOMENT_BLOB: &str = "adam_v.f32";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    step: u64,
    model: ModelConfig,
    train: TrainConfig,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn split_blob(path: &Path, flat: Vec<f32>, sizes: &[usize]) -> Result<Vec<Vec<f32>>> {
    let total: usize = sizes.iter().sum();
    if flat.len() != total {
        return Err(Error::format(path, format!("holds {} values, tensor table needs {total}", flat.len())));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut rest = flat.as_slice();
    for &n in sizes {
        let (head, tail) = rest.split_at(n);
        out.push(head.to_vec());
        rest = tail;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            format: FORMAT.into(),
            step: self.step,
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            adam: AdamHeader {
                step_count: self.adam.step_count,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                epsilon: self.adam.epsilon,
            },
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.into(), shape: t.shape().to_vec() })
                .collect(),
        };
        let params: Vec<f32> = self.params.iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect();
        write_f32_blob(&dir.join(PARAMS_BLOB), &params)?;
        write_f32_blob(&dir.join(FIRST_MOMENT_BLOB), &self.adam.first_moment.concat())?;
        write_f32_blob(&dir.join(SECOND_MOMENT_BLOB), &self.adam.second_moment.concat())?;
        let path = dir.join(CHECKPOINT_FILE);
        let mut text = serde_json::to_string_pretty(&header).map_err(|e| Error::format(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads from a checkpoint directory or its `checkpoint.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
        let header_path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e))?;
        if header.format != FORMAT {
            return Err(Error::format(&header_path, format!("unknown checkpoint format {:?}", header.format)));
        }
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let load = |name: &str| -> Result<Vec<Vec<f32>>> {
            let p = dir.join(name);
            split_blob(&p, read_f32_blob(&p)?, &sizes)
        };
        let mut params = ParamStore::new();
        for (entry, data) in header.tensors.iter().zip(load(PARAMS_BLOB)?) {
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        let adam = AdamState {
            step_count: header.adam.step_count,
            first_moment: load(FIRST_MOMENT_BLOB)?,
            second_moment: load(SECOND_MOMENT_BLOB)?,
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            epsilon: header.adam.epsilon,
        };
        Ok(Checkpoint {
            model_config: header.model,
            train_config: header.train,
            step: header.step,
            params,
            adam,
        })
    }
}
