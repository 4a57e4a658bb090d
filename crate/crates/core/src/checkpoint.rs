//! Checkpoint files.
//!
//! Layout: magic `MVCK`, a format version byte, a u64 LE header length, the
//! JSON header (model spec, normalizer, train config, progress, history),
//! a u32 LE entry count, then entries of
//! `u32 name_len | name | u32 ndim | u32 dims… | f32 LE values`.
//! Model parameters use their own names; optimizer moments are stored as
//! `adam.m.<name>` / `adam.v.<name>` and the best-validation parameters as
//! `best.<name>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, History, Normalizer, Progress, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MVCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    normalizer: Normalizer,
    train: Option<TrainConfig>,
    progress: Option<Progress>,
    adam_step: u64,
    history: History,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub normalizer: Normalizer,
    pub train: Option<TrainConfig>,
    /// Present when the file can resume training.
    pub state: Option<TrainState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model<f32>, normalizer: &Normalizer, train: Option<&TrainConfig>, state: Option<&TrainState>) -> Vec<u8> {
    let header = Header {
        spec: model.spec.clone(),
        normalizer: *normalizer,
        train: train.cloned(),
        progress: state.map(|s| s.progress.clone()),
        adam_step: state.map_or(0, |s| s.adam.step),
        history: state.map(|s| s.history.clone()).unwrap_or_default(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut entries: Vec<(String, &Tensor<f32>)> = model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &e.value))
        .collect();
    if let Some(s) = state {
        for (i, e) in model.params.entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (&s.adam.m[i], &s.adam.v[i]) {
                entries.push((format!("adam.m.{}", e.name), m));
                entries.push((format!("adam.v.{}", e.name), v));
            }
        }
        if let Some(best) = &s.best {
            for e in best.entries() {
                entries.push((format!("best.{}", e.name), &e.value));
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_entry(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn fill(store: &mut ParamStore<f32>, table: &mut HashMap<String, Tensor<f32>>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let t = table
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key} required by the model spec")))?;
        store
            .set(&name, t)
            .map_err(|e| Error::Format(format!("checkpoint entry {key} does not match the model spec: {e}")))?;
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32()?;
    let mut table = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry {name}: {e}")))?;
        table.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let mut model = Model::<f32>::new(header.spec.clone(), 0)?;
    fill(&mut model.params, &mut table, "")?;
    let state = match header.progress {
        None => None,
        Some(progress) => {
            let mut adam = AdamState {
                m: vec![None; model.params.len()],
                v: vec![None; model.params.len()],
                step: header.adam_step,
            };
            for (i, e) in model.params.entries().iter().enumerate() {
                adam.m[i] = table.remove(&format!("adam.m.{}", e.name));
                adam.v[i] = table.remove(&format!("adam.v.{}", e.name));
                if adam.m[i].is_some() != adam.v[i].is_some() {
                    return Err(Error::Format(format!("optimizer moments for {} are incomplete", e.name)));
                }
            }
            let best = if table.keys().any(|k| k.starts_with("best.")) {
                let mut b = model.params.clone();
                fill(&mut b, &mut table, "best.")?;
                Some(b)
            } else {
                None
            };
            Some(TrainState {
                progress,
                adam,
                best,
                history: header.history,
                normalizer: header.normalizer,
            })
        }
    };
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("checkpoint entry {extra} is not part of the model spec")));
    }
    Ok(Checkpoint {
        model,
        normalizer: header.normalizer,
        train: header.train,
        state,
    })
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    normalizer: &Normalizer,
    train: Option<&TrainConfig>,
    state: Option<&TrainState>,
) -> Result<()> {
    std::fs::write(path, encode(model, normalizer, train, state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
