//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LIFTCKPT"          magic
//! u32                  format version
//! u64                  header length in bytes
//! header               JSON: model config, tensor names/shapes/decay flags,
//!                      optimizer step, training state
//! f64 * n              parameters in declaration order
//! f64 * n, f64 * n     Adam first and second moments (if present)
//! ```
//!
//! Values are stored as raw `f64` bits, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

/// Where a training run stands, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: u64,
    pub config: TrainConfig,
    pub vocab_hash: String,
    pub corpus_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorInfo>,
    optimizer_step: Option<u64>,
    train: Option<TrainState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &Denoiser) -> Self {
        Checkpoint {
            model: *model.config(),
            params: model.params().clone(),
            optimizer: None,
            train: None,
        }
    }

    pub fn into_model(self) -> Result<Denoiser> {
        Denoiser::from_params(self.model, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model,
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    decay: p.decay,
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 8 * 3 * self.params.num_scalars() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(&p.value);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !(body.len() - hlen).is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = data.by_ref().take(n).collect();
            if vals.len() != n {
                return Err(bad("truncated tensor data"));
            }
            Tensor::new(shape.to_vec(), vals)
        };
        let mut params = ParamStore::new();
        for info in &header.tensors {
            let t = take(&info.shape)?;
            params.add(info.name.clone(), t, info.decay);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = header.tensors.iter().map(|i| take(&i.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|i| take(&i.shape)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        if data.next().is_some() {
            return Err(bad("trailing data after tensors"));
        }
        Ok(Checkpoint {
            model: header.model,
            params,
            optimizer,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&bytes)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}
