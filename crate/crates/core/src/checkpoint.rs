//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"KDCK"
//! version  u32
//! hlen     u64            length of the JSON header
//! header   hlen bytes     config, init descriptor, precision, tensor table
//! payload  f64 LE values  tensors in header order
//! digest   32 bytes       SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::params::{LstmWeights, ParamSet, TENSOR_NAMES};
use crate::nn::{InitDescriptor, Model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"KDCK";
pub const FORMAT_VERSION: u32 = 1;
pub const PRECISION: &str = "f64";

/// A trained (or freshly initialized) model with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub init: InitDescriptor,
    /// Optimizer steps taken to produce these weights.
    pub steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    init: InitDescriptor,
    precision: String,
    steps: u64,
    tensors: Vec<TensorEntry>,
}

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

impl ModelCheckpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let weights = params.weights.tensors();
        let shapes = params.weights.shapes();
        let mut tensors: Vec<TensorEntry> = TENSOR_NAMES
            .iter()
            .zip(shapes)
            .map(|(name, shape)| TensorEntry {
                name: name.to_string(),
                shape,
            })
            .collect();
        tensors.push(TensorEntry {
            name: RUNNING_MEAN.into(),
            shape: vec![params.running_mean.len()],
        });
        tensors.push(TensorEntry {
            name: RUNNING_VAR.into(),
            shape: vec![params.running_var.len()],
        });
        let header = Header {
            config: self.model.config.clone(),
            init: self.init.clone(),
            precision: PRECISION.into(),
            steps: self.steps,
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let running = [
            params.running_mean.as_slice().expect("standard layout"),
            params.running_var.as_slice().expect("standard layout"),
        ];
        for t in weights.iter().chain(running.iter()) {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
        if header.precision != PRECISION {
            return Err(Error::Incompatible(format!(
                "precision {}, this build reads {PRECISION}",
                header.precision
            )));
        }
        header.config.validate()?;

        let mut expected: Vec<(String, Vec<usize>)> = TENSOR_NAMES
            .iter()
            .zip(ParamSet::zeros(&header.config).shapes())
            .map(|(n, s)| (n.to_string(), s))
            .collect();
        let h = header.config.lstm_units;
        expected.push((RUNNING_MEAN.into(), vec![h]));
        expected.push((RUNNING_VAR.into(), vec![h]));
        let got: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if got != expected {
            return Err(Error::Incompatible(
                "tensor table does not match the stored model config".into(),
            ));
        }

        let payload = &body[header_end..];
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut parts = Vec::with_capacity(expected.len());
        let mut offset = 0usize;
        for (_, shape) in &expected {
            let n: usize = shape.iter().product();
            parts.push(values[offset..offset + n].to_vec());
            offset += n;
        }
        let mut parts = parts.into_iter().zip(expected.iter().map(|(_, s)| s.clone()));
        let mut mat = || {
            let (data, shape) = parts.next().expect("tensor count checked");
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked")
        };
        let (l1_wi, l1_wr) = (mat(), mat());
        let mut vec = || Array1::from(parts.next().expect("tensor count checked").0);
        let (l1_b, gamma, beta) = (vec(), vec(), vec());
        let mut mat = || {
            let (data, shape) = parts.next().expect("tensor count checked");
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked")
        };
        let (l2_wi, l2_wr) = (mat(), mat());
        let mut vec = || Array1::from(parts.next().expect("tensor count checked").0);
        let (l2_b, running_mean, running_var) = (vec(), vec(), vec());

        let params = ModelParams {
            weights: ParamSet {
                lstm1: LstmWeights {
                    w_input: l1_wi,
                    w_recurrent: l1_wr,
                    bias: l1_b,
                },
                bn_gamma: gamma,
                bn_beta: beta,
                lstm2: LstmWeights {
                    w_input: l2_wi,
                    w_recurrent: l2_wr,
                    bias: l2_b,
                },
            },
            running_mean,
            running_var,
        };
        let model = Model::new(header.config, params).map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(Self {
            model,
            init: header.init,
            steps: header.steps,
        })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
