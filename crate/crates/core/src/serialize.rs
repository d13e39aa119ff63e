//! Portable model container: format version, the hyperparameter record,
//! time/covariate scaling, and (name, shape, values) triples for every
//! parameter in insertion order. JSON keeps f64 values bit-exact through
//! shortest round-trip formatting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::encoder::HyperParams;
use crate::model::TrainedModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SerializeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {got} (expected {MODEL_FORMAT_VERSION})")]
    Version { got: u32 },
    #[error("parameter `{name}` has shape {shape:?} but {len} values")]
    BadShape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    hyperparams: HyperParams,
    time_scale: f64,
    standardization: Option<Standardization>,
    params: Vec<ParamRecord>,
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<(), SerializeError> {
    let path = path.as_ref();
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        hyperparams: model.hp.clone(),
        time_scale: model.time_scale,
        standardization: model.standardization.clone(),
        params: model
            .store
            .iter()
            .map(|(name, value, _)| ParamRecord {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                values: value.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|source| SerializeError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel, SerializeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SerializeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(SerializeError::Version {
            got: file.format_version,
        });
    }
    let mut store = ParamStore::new();
    for rec in file.params {
        let expected: usize = rec.shape.iter().product();
        if expected != rec.values.len() {
            return Err(SerializeError::BadShape {
                name: rec.name,
                shape: rec.shape,
                len: rec.values.len(),
            });
        }
        store.insert(&rec.name, Tensor::from_vec(&rec.shape, rec.values));
    }
    Ok(TrainedModel {
        hp: file.hyperparams,
        store,
        time_scale: file.time_scale,
        standardization: file.standardization,
    })
}
