//! Checkpoint container: magic, format version, a JSON header, then every
//! tensor in the sidecar layout in header order.
//!
//! ```text
//! "TMOECKPT" | u32 version | u64 header bytes | header JSON | tensors...
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, Stage, TouchLanguageModel};
use crate::data::sidecar::{read_tensor, write_tensor, DType};
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMOECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub stage: Stage,
    pub lora: bool,
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    /// Free-form metadata such as the training stage and step.
    pub meta: Value,
    pub params: Vec<TensorEntry>,
    /// Non-parameter tensors, e.g. optimizer moments.
    pub state: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Vec<f64>>,
    pub state: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &TouchLanguageModel, vocab: Option<&Vocab>) -> Self {
        let mut entries = Vec::new();
        let mut params = BTreeMap::new();
        model.visit("", &mut |name, p| {
            entries.push(TensorEntry { name: name.clone(), shape: p.tensor.shape().to_vec() });
            params.insert(name, p.tensor.to_vec());
        });
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                stage: model.stage(),
                lora: model.has_lora(),
                config: model.config().clone(),
                vocab: vocab.cloned(),
                meta: Value::Null,
                params: entries,
                state: Vec::new(),
            },
            params,
            state: BTreeMap::new(),
        }
    }

    pub fn add_state(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        self.header.state.push(TensorEntry { name: name.clone(), shape });
        self.state.insert(name, data);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.partial");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (entry, map) in self.entries() {
                write_tensor(&mut w, &entry.shape, &map[&entry.name], DType::F64)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn entries(&self) -> impl Iterator<Item = (&TensorEntry, &BTreeMap<String, Vec<f64>>)> {
        let p = self.header.params.iter().map(move |e| (e, &self.params));
        p.chain(self.header.state.iter().map(move |e| (e, &self.state)))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut read_all = |entries: &[TensorEntry]| -> Result<BTreeMap<String, Vec<f64>>> {
            let mut out = BTreeMap::new();
            for e in entries {
                let (shape, data, _) = read_tensor(&mut r)?;
                if shape != e.shape {
                    return Err(bad(format!("tensor `{}` has shape {shape:?}, header says {:?}", e.name, e.shape)));
                }
                out.insert(e.name.clone(), data);
            }
            Ok(out)
        };
        let params = read_all(&header.params)?;
        let state = read_all(&header.state)?;
        Ok(Checkpoint { header, params, state })
    }

    /// Rebuilds the model and overwrites every parameter from the file.
    pub fn to_model(&self) -> Result<TouchLanguageModel> {
        let h = &self.header;
        let mut model = TouchLanguageModel::new(h.config.clone())?;
        if h.stage == Stage::Moe {
            model = model.upcycle()?;
        } else if h.lora {
            model.attach_lora()?;
        }
        let mut problems = Vec::new();
        let mut seen = 0;
        model.visit("", &mut |name, p| match self.params.get(&name) {
            Some(data) if data.len() == p.tensor.numel() => {
                p.tensor.data_mut().copy_from_slice(data);
                seen += 1;
            }
            Some(data) => problems.push(format!("`{name}` holds {} values, expected {}", data.len(), p.tensor.numel())),
            None => problems.push(format!("missing tensor `{name}`")),
        });
        if seen != self.params.len() {
            problems.push(format!("{} unexpected tensors", self.params.len() - seen));
        }
        if !problems.is_empty() {
            return Err(Error::Format(problems.join("; ")));
        }
        Ok(model)
    }

    /// Like [`Checkpoint::to_model`], but first requires the stored config
    /// to equal `expected`, reporting each differing field.
    pub fn to_model_expecting(&self, expected: &ModelConfig) -> Result<TouchLanguageModel> {
        let diff = config_diff(expected, &self.header.config);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        self.to_model()
    }
}

/// Field-level differences between two configs, as `path: a != b` lines.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(found).expect("config serializes");
    let mut out = Vec::new();
    diff_values("model", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let null = Value::Null;
                diff_values(&format!("{path}.{k}"), x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: expected {a}, found {b}")),
        _ => {}
    }
}
