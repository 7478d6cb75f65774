//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `C2E1`, u32 version, u64 config JSON length
//! and bytes, u32 tensor count, then per tensor a u32 name length and bytes,
//! u32 rank, u64 extents and the f64 payload. Optimizer moments, the step
//! counter and the training RNG state are stored as ordinary named tensors.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::C2eConfig;
use crate::error::{C2eError, Result};
use crate::model::C2eModel;
use crate::optim::AdamW;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"C2E1";
pub const VERSION: u32 = 1;

const STEP_KEY: &str = "state.step";
const RNG_KEY: &str = "state.rng";
const OPT_T_KEY: &str = "optim.t";
const PARAM_PREFIX: &str = "param.";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

/// Optimizer moments and training position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub rng: RngState,
    pub opt_t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: C2eConfig,
    pub params: Vec<(String, Tensor)>,
    pub state: Option<TrainState>,
}

fn u64_tensor(vals: &[u64]) -> Tensor {
    Tensor::new(&[vals.len()], vals.iter().map(|&v| f64::from_bits(v)).collect()).expect("u64 tensor")
}

fn tensor_u64(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

impl Checkpoint {
    pub fn from_model(model: &C2eModel, state: Option<TrainState>) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            params: model
                .params
                .iter()
                .map(|p| {
                    let mut t = p.tensor.clone();
                    t.set_requires_grad(false);
                    t.zero_grad();
                    (p.name.clone(), t)
                })
                .collect(),
            state,
        }
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn to_model(&self) -> Result<C2eModel> {
        let mut model = C2eModel::new(&self.config)?;
        if model.params.len() != self.params.len() {
            return Err(C2eError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            model
                .params
                .set(name, t.clone())
                .map_err(|e| C2eError::Format(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn optimizer(&self, model: &C2eModel) -> Option<AdamW> {
        let s = self.state.as_ref()?;
        let mut opt = AdamW::new(&self.config.optimizer, &model.params, self.config.steps);
        opt.t = s.opt_t;
        opt.m = s.m.clone();
        opt.v = s.v.clone();
        Some(opt)
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t.clone()))
            .collect();
        if let Some(s) = &self.state {
            out.push((STEP_KEY.into(), u64_tensor(&[s.step])));
            out.push((RNG_KEY.into(), u64_tensor(&[s.rng.seed, s.rng.stream, s.rng.position])));
            out.push((OPT_T_KEY.into(), u64_tensor(&[s.opt_t])));
            for (i, (name, _)) in self.params.iter().enumerate() {
                out.push((format!("{M_PREFIX}{name}"), Tensor::new(&[s.m[i].len()], s.m[i].clone()).expect("m")));
                out.push((format!("{V_PREFIX}{name}"), Tensor::new(&[s.v[i].len()], s.v[i].clone()).expect("v")));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let json = self.config.to_json();
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(json.as_bytes());
        let tensors = self.named_tensors();
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                b.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(C2eError::Format("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(C2eError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|_| C2eError::Format("config is not UTF-8".into()))?;
        let config: C2eConfig =
            serde_json::from_str(json).map_err(|e| C2eError::Format(format!("embedded config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut extra = std::collections::HashMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| C2eError::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.ok_or_else(|| C2eError::Format(format!("tensor {name}: extents overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| C2eError::Format("payload overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data)?;
            match name.strip_prefix(PARAM_PREFIX) {
                Some(p) => params.push((p.to_owned(), t)),
                None => {
                    extra.insert(name, t);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(C2eError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let state = match (extra.remove(STEP_KEY), extra.remove(RNG_KEY), extra.remove(OPT_T_KEY)) {
            (Some(step), Some(rng), Some(t)) => {
                let rng = tensor_u64(&rng);
                if rng.len() != 3 || step.len() != 1 || t.len() != 1 {
                    return Err(C2eError::Format("malformed training state".into()));
                }
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, p) in &params {
                    let get = |prefix: &str, extra: &mut std::collections::HashMap<String, Tensor>| {
                        extra
                            .remove(&format!("{prefix}{name}"))
                            .filter(|t| t.len() == p.len())
                            .map(Tensor::into_data)
                            .ok_or_else(|| C2eError::Format(format!("missing optimizer state for {name}")))
                    };
                    m.push(get(M_PREFIX, &mut extra)?);
                    v.push(get(V_PREFIX, &mut extra)?);
                }
                Some(TrainState {
                    step: tensor_u64(&step)[0],
                    rng: RngState {
                        seed: rng[0],
                        stream: rng[1],
                        position: rng[2],
                    },
                    opt_t: tensor_u64(&t)[0],
                    m,
                    v,
                })
            }
            (None, None, None) => None,
            _ => return Err(C2eError::Format("incomplete training state".into())),
        };
        if let Some(name) = extra.keys().next() {
            return Err(C2eError::Format(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint { config, params, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| C2eError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| C2eError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            C2eError::Format(m) => C2eError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| C2eError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| C2eError::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
