//! Binary checkpoints: training config, step, model parameters and optimizer
//! moments.
//!
//! ```text
//! "VQCM" | u32 version | u32 len | config JSON | u32 count | records
//! record: u32 name_len | name | u8 dtype | u32 rank | u32 dims… | LE payload
//! ```
//!
//! All integers are little-endian. The step is stored as the f64 scalar
//! record `trainer.step` and the per-code usage counts as the vector
//! `trainer.code_usage`; optimizer moments as `optim.m.<param>` and
//! `optim.v.<param>`, plus the scalar `optim.t`.

use std::collections::HashMap;
use std::path::Path;

use crate::bytes::{put_u32, read_file, Reader};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::VqcModel;
use crate::nn::Params;
use crate::optim::AdamW;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "VQCM";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;
const STEP_KEY: &str = "trainer.step";
const USAGE_KEY: &str = "trainer.code_usage";
const OPTIM_T_KEY: &str = "optim.t";

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub config: TrainConfig,
    pub step: u64,
    /// Code assignment counts since the last validation pass.
    pub code_usage: Vec<u64>,
    pub model: VqcModel<F>,
    pub optimizer: Option<AdamW<F>>,
}

fn put_record<F: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(F::DTYPE.code());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(json.as_bytes());

        let params = self.model.params();
        let mut count = 2 + params.len();
        if self.optimizer.is_some() {
            count += 1 + 2 * params.len();
        }
        put_u32(&mut out, count as u32);
        put_record(&mut out, STEP_KEY, &Tensor::<f64>::scalar(self.step as f64));
        let usage: Vec<f64> = self.code_usage.iter().map(|&n| n as f64).collect();
        let usage = Tensor::<f64>::from_vec(&[usage.len()], usage).expect("vector");
        put_record(&mut out, USAGE_KEY, &usage);
        for (name, t) in params.iter() {
            put_record(&mut out, name, t);
        }
        if let Some(opt) = &self.optimizer {
            put_record(&mut out, OPTIM_T_KEY, &Tensor::<f64>::scalar(opt.t as f64));
            for (i, name) in params.names().iter().enumerate() {
                put_record(&mut out, &format!("optim.m.{name}"), &opt.m[i]);
                put_record(&mut out, &format!("optim.v.{name}"), &opt.v[i]);
            }
        }
        out
    }

    /// Write atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }

    /// Load and require the stored model config to equal `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config.model != expected {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "stored model {} differs from requested {}",
                    serde_json::to_string(&ck.config.model).expect("serializes"),
                    serde_json::to_string(expected).expect("serializes")
                ),
            });
        }
        Ok(ck)
    }

    /// Parse checkpoint bytes; `path` is only used in error messages.
    /// Tensors stored in another precision are converted.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32("config length")? as usize;
        let json = r.take(len, "config")?;
        let config: TrainConfig = serde_json::from_slice(json).map_err(|e| Error::ConfigMismatch {
            path: path.to_path_buf(),
            detail: format!("stored config does not parse: {e}"),
        })?;
        let count = r.u32("record count")?;
        let mut records: HashMap<String, Tensor<F>> = HashMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec()).map_err(|_| {
                Error::Integrity {
                    path: path.to_path_buf(),
                    detail: "record name is not UTF-8".into(),
                }
            })?;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Integrity {
                path: path.to_path_buf(),
                detail: format!("record {name}: unknown dtype code {code}"),
            })?;
            let dims = r.dims(MAX_RANK)?;
            let numel: usize = dims.iter().product();
            let nbytes = numel.checked_mul(dtype.size()).ok_or_else(|| Error::DimOverflow {
                path: path.to_path_buf(),
                detail: format!("record {name}: payload size overflows"),
            })?;
            let payload = r.take(nbytes, &name)?;
            let data: Vec<F> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|b| F::from_f64(f32::read_le(b) as f64))
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|b| F::from_f64(f64::read_le(b)))
                    .collect(),
            };
            let t = Tensor::from_vec(&dims, data)?;
            if records.insert(name.clone(), t).is_some() {
                return Err(Error::Integrity {
                    path: path.to_path_buf(),
                    detail: format!("duplicate record {name}"),
                });
            }
            order.push(name);
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }

        let missing = |name: &str| Error::ConfigMismatch {
            path: path.to_path_buf(),
            detail: format!("record {name} is missing"),
        };
        let scalar = |records: &mut HashMap<String, Tensor<F>>, key: &str| -> Result<u64> {
            let t = records.remove(key).ok_or_else(|| missing(key))?;
            let v = t.data().first().copied().ok_or_else(|| missing(key))?.as_f64();
            Ok(v as u64)
        };
        let step = scalar(&mut records, STEP_KEY)?;
        let code_usage = records
            .remove(USAGE_KEY)
            .ok_or_else(|| missing(USAGE_KEY))?
            .data()
            .iter()
            .map(|v| v.as_f64() as u64)
            .collect();
        let template = VqcModel::<F>::new(config.model.clone()).map_err(|e| Error::ConfigMismatch {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut params = Params::default();
        for (name, t) in template.params().iter() {
            let stored = records.remove(name).ok_or_else(|| missing(name))?;
            if stored.shape() != t.shape() {
                return Err(Error::ConfigMismatch {
                    path: path.to_path_buf(),
                    detail: format!(
                        "parameter {name}: stored shape {:?}, config expects {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
            params.push(name, stored);
        }
        let model = VqcModel::from_params(config.model.clone(), params)?;
        let optimizer = if records.contains_key(OPTIM_T_KEY) {
            let t = scalar(&mut records, OPTIM_T_KEY)?;
            let mut opt = AdamW::new(
                model.params(),
                config.learning_rate,
                config.adam_betas,
                config.weight_decay,
            );
            opt.t = t;
            for (i, name) in model.params().names().iter().enumerate() {
                for (key, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let k = format!("optim.{key}.{name}");
                    let s = records.remove(&k).ok_or_else(|| missing(&k))?;
                    if s.shape() != slot.shape() {
                        return Err(Error::ConfigMismatch {
                            path: path.to_path_buf(),
                            detail: format!("record {k} has the wrong shape"),
                        });
                    }
                    *slot = s;
                }
            }
            Some(opt)
        } else {
            None
        };
        if let Some(extra) = order.iter().find(|n| records.contains_key(*n)) {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                detail: format!("unexpected record {extra}"),
            });
        }
        Ok(Self {
            config,
            step,
            code_usage,
            model,
            optimizer,
        })
    }
}
