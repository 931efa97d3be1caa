//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, UTF-8 JSON header, then the
//! raw little-endian payloads of every tensor back to back. The header lists
//! each tensor's name, section, dtype, shape, byte offset (relative to the
//! payload start) and byte length.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, Samus};
use crate::registry::{Component, ParamRegistry};

pub const MAGIC: &[u8; 8] = b"SAMUSCK1";
pub const FORMAT_VERSION: u32 = 1;

/// Little-endian bytes of a tensor's values in row-major order.
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_le_bytes(bytes: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    fn chunks<const N: usize, T>(bytes: &[u8], f: fn([u8; N]) -> T) -> Vec<T> {
        bytes
            .chunks_exact(N)
            .map(|c| f(c.try_into().expect("chunk length")))
            .collect()
    }
    let n: usize = shape.iter().product();
    let expected = n * dtype.size_in_bytes();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, {dtype:?} {shape:?} needs {expected}",
            bytes.len()
        )));
    }
    let dev = &Device::Cpu;
    Ok(match dtype {
        DType::F32 => Tensor::from_vec(chunks(bytes, f32::from_le_bytes), shape, dev)?,
        DType::F64 => Tensor::from_vec(chunks(bytes, f64::from_le_bytes), shape, dev)?,
        DType::U32 => Tensor::from_vec(chunks(bytes, u32::from_le_bytes), shape, dev)?,
        DType::I64 => Tensor::from_vec(chunks(bytes, i64::from_le_bytes), shape, dev)?,
        DType::U8 => Tensor::from_vec(bytes.to_vec(), shape, dev)?,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn dtype_name(dtype: DType) -> &'static str {
    dtype.as_str()
}

fn parse_dtype(s: &str) -> Result<DType> {
    s.parse::<DType>()
        .map_err(|_| Error::Checkpoint(format!("unknown dtype `{s}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    section: Section,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    component: Option<Component>,
    #[serde(default)]
    trainable: bool,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default)]
    config: Option<ModelConfig>,
    #[serde(default)]
    ablation: Option<Ablation>,
    #[serde(default)]
    task_names: Vec<String>,
    #[serde(default)]
    seeds: BTreeMap<String, u64>,
    #[serde(default)]
    optimizer_step: Option<u64>,
    tensors: Vec<TensorMeta>,
}

/// One stored parameter.
#[derive(Clone, Debug)]
pub struct StoredParam {
    pub tensor: Tensor,
    pub component: Option<Component>,
    pub trainable: bool,
}

/// Adam moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub ablation: Option<Ablation>,
    /// Task-token bank index → task name.
    pub task_names: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub params: BTreeMap<String, StoredParam>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Snapshot of every registry entry.
    pub fn from_registry(reg: &ParamRegistry) -> Self {
        let params = reg
            .iter()
            .map(|(n, e)| {
                (
                    n.to_string(),
                    StoredParam {
                        tensor: e.param.value(),
                        component: Some(e.component),
                        trainable: e.param.is_trainable(),
                    },
                )
            })
            .collect();
        Self {
            params,
            ..Self::default()
        }
    }

    /// Full model snapshot, enough to rebuild it with [`Checkpoint::build_model`].
    pub fn from_model(model: &Samus) -> Self {
        let mut ck = Self::from_registry(model.registry());
        ck.config = Some(model.config().clone());
        ck.ablation = Some(model.ablation());
        ck.task_names = model.task_names().to_vec();
        ck.seeds.insert("init".into(), model.seed());
        ck
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut metas = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, section, component, trainable, t: &Tensor| -> Result<()> {
            let bytes = tensor_le_bytes(t)?;
            metas.push(TensorMeta {
                name: name.to_string(),
                section,
                component,
                trainable,
                dtype: dtype_name(t.dtype()).to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len() as u64,
                nbytes: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
            Ok(())
        };
        for (name, p) in &self.params {
            push(name, Section::Param, p.component, p.trainable, &p.tensor)?;
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.m {
                push(name, Section::AdamM, None, false, t)?;
            }
            for (name, t) in &opt.v {
                push(name, Section::AdamV, None, false, t)?;
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            ablation: self.ablation,
            task_names: self.task_names.clone(),
            seeds: self.seeds.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: metas,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &body[len..];
        let mut ck = Checkpoint {
            config: header.config,
            ablation: header.ablation,
            task_names: header.task_names,
            seeds: header.seeds,
            params: BTreeMap::new(),
            optimizer: header.optimizer_step.map(|step| OptimizerState {
                step,
                ..OptimizerState::default()
            }),
        };
        for meta in header.tensors {
            let start = meta.offset as usize;
            let end = start
                .checked_add(meta.nbytes as usize)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("payload of `{}` out of bounds", meta.name)))?;
            let t = tensor_from_le_bytes(&payload[start..end], parse_dtype(&meta.dtype)?, &meta.shape)?;
            match meta.section {
                Section::Param => {
                    ck.params.insert(
                        meta.name,
                        StoredParam {
                            tensor: t,
                            component: meta.component,
                            trainable: meta.trainable,
                        },
                    );
                }
                Section::AdamM | Section::AdamV => {
                    let opt = ck
                        .optimizer
                        .as_mut()
                        .ok_or_else(|| Error::Checkpoint("optimizer tensors without optimizer step".into()))?;
                    let map = if meta.section == Section::AdamM { &mut opt.m } else { &mut opt.v };
                    map.insert(meta.name, t);
                }
            }
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy every stored parameter into a registry holding exactly the same
    /// names and shapes. Nothing is written unless all entries match.
    pub fn load_into(&self, reg: &ParamRegistry) -> Result<()> {
        for (name, entry) in reg.iter() {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.tensor.dims() != entry.param.shape().dims() {
                return Err(Error::shape(
                    format!("checkpoint parameter `{name}`"),
                    entry.param.shape().dims(),
                    stored.tensor.dims(),
                ));
            }
        }
        if let Some(extra) = self.params.keys().find(|n| reg.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("parameter `{extra}` not present in the model")));
        }
        for (name, entry) in reg.iter() {
            entry.param.set(&self.params[name].tensor)?;
        }
        Ok(())
    }

    /// Rebuild the model described by the header and load its parameters.
    pub fn build_model(&self, dtype: DType) -> Result<Samus> {
        let cfg = self
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("no config snapshot".into()))?;
        let ablation = self
            .ablation
            .ok_or_else(|| Error::Checkpoint("no ablation snapshot".into()))?;
        let seed = self.seeds.get("init").copied().unwrap_or(0);
        let names = if self.task_names.is_empty() {
            (0..cfg.num_tasks).map(|i| format!("task{i}")).collect()
        } else {
            self.task_names.clone()
        };
        let model = Samus::with_tasks(cfg, ablation, dtype, seed, names)?;
        self.load_into(model.registry())?;
        Ok(model)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Source-name → target-name pairs for [`import_sam_layout`].
pub type NameMap = Vec<(String, String)>;

/// Identity mapping for every registry name in the given components. Names
/// already follow SAM's layout for the backbone, prompt encoder and decoder.
pub fn sam_name_map(reg: &ParamRegistry, components: &[Component]) -> NameMap {
    reg.iter()
        .filter(|(_, e)| components.contains(&e.component))
        .map(|(n, _)| (n.to_string(), n.to_string()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Target names that received source values.
    pub mapped: Vec<String>,
    /// Target names left at their fresh initialization.
    pub unmapped: Vec<String>,
}

/// Copy mapped tensors from a SAM-layout checkpoint into `reg`. All mapped
/// pairs are validated before anything is written; unmapped parameters keep
/// their values.
pub fn import_sam_layout(ck: &Checkpoint, name_map: &[(String, String)], reg: &ParamRegistry) -> Result<ImportReport> {
    let mut plan = Vec::with_capacity(name_map.len());
    for (src, dst) in name_map {
        let stored = ck
            .params
            .get(src)
            .ok_or_else(|| Error::Checkpoint(format!("source checkpoint lacks `{src}`")))?;
        let target = reg.param(dst)?;
        if stored.tensor.dims() != target.shape().dims() {
            return Err(Error::shape(
                format!("import `{src}` -> `{dst}`"),
                target.shape().dims(),
                stored.tensor.dims(),
            ));
        }
        plan.push((dst.as_str(), target, &stored.tensor));
    }
    for (_, target, value) in &plan {
        target.set(value)?;
    }
    let mapped: std::collections::BTreeSet<&str> = plan.iter().map(|(n, _, _)| *n).collect();
    Ok(ImportReport {
        mapped: mapped.iter().map(|s| s.to_string()).collect(),
        unmapped: reg
            .names()
            .filter(|n| !mapped.contains(n))
            .map(str::to_string)
            .collect(),
    })
}
