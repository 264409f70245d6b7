//! JSON checkpoints: shape headers, row-major arrays and the fingerprint of
//! the concept pool the model was trained against.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concept_pool::ConceptPool;
use crate::error::{Error, Result};
use crate::model::{Dense, Modality, ModelParams};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub modality: Modality,
    pub frozen: bool,
    pub pool_fingerprint: String,
    pub params_hash: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, pool: &ConceptPool) -> Result<Self> {
        params.check_pool(pool)?;
        let tensors = params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorRecord {
                name,
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            modality: params.modality,
            frozen: params.frozen,
            pool_fingerprint: pool.fingerprint(),
            params_hash: params.hash(),
            tensors,
        })
    }

    /// Rebuilds the parameters, validating shapes and the stored hash.
    pub fn params(&self) -> Result<ModelParams> {
        let schema = |message: String| Error::InvalidArgument(format!("checkpoint: {message}"));
        if self.format_version != FORMAT_VERSION {
            return Err(schema(format!("unsupported format_version {}", self.format_version)));
        }
        let n = self.tensors.len();
        if n < 4 || !n.is_multiple_of(2) || n > 8 {
            return Err(schema(format!("{n} tensors is not a valid layer layout")));
        }
        let mut mats = Vec::with_capacity(n);
        for t in &self.tensors {
            let m = Matrix::new(t.rows, t.cols, t.data.clone()).map_err(|_| {
                schema(format!(
                    "{} holds {} values for {}x{}",
                    t.name,
                    t.data.len(),
                    t.rows,
                    t.cols
                ))
            })?;
            mats.push(m);
        }
        let mut layers: Vec<Dense> = mats
            .chunks(2)
            .map(|c| Dense {
                weight: c[0].clone(),
                bias: c[1].clone(),
            })
            .collect();
        let classifier = layers.pop().expect("at least two layers");
        let encoder = layers.pop().expect("at least two layers");
        let params = ModelParams {
            hidden: layers,
            encoder,
            classifier,
            modality: self.modality,
            frozen: self.frozen,
        };
        let names = params.tensor_names();
        for (t, expected) in self.tensors.iter().zip(&names) {
            if &t.name != expected {
                return Err(schema(format!("tensor {:?} where {expected:?} was expected", t.name)));
            }
        }
        let mut width = params.feature_dim();
        for layer in params.hidden.iter().chain([&params.encoder, &params.classifier]) {
            if layer.bias.rows() != 1 || layer.bias.cols() != layer.outputs() {
                return Err(schema(format!(
                    "bias shape {:?} does not match its layer",
                    layer.bias.shape()
                )));
            }
            if std::ptr::eq(layer, &params.classifier) {
                break;
            }
            if layer.inputs() != width {
                return Err(schema("layer widths do not chain".into()));
            }
            width = layer.outputs();
        }
        if params.hash() != self.params_hash {
            return Err(schema("parameter hash does not match the stored weights".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Loads the parameters, refusing a checkpoint trained against a
    /// different pool.
    pub fn load_checked(path: impl AsRef<Path>, pool: &ConceptPool) -> Result<ModelParams> {
        let ckpt = Self::load(path)?;
        let fp = pool.fingerprint();
        if ckpt.pool_fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                checkpoint: ckpt.pool_fingerprint,
                pool: fp,
            });
        }
        let params = ckpt.params()?;
        params.check_pool(pool)?;
        Ok(params)
    }
}

pub fn save_params(params: &ModelParams, pool: &ConceptPool, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(params, pool)?.save(path)
}
