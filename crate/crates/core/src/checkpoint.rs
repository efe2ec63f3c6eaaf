//! Named-tensor checkpoint files.
//!
//! Layout: `"DMSN"`, format version (`u32` LE), header length (`u64` LE),
//! UTF-8 JSON header, zero padding up to a 64-byte boundary, then the payload
//! of little-endian `f32` blocks, each starting at a 64-byte-aligned offset
//! relative to the payload start. See `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DmshnConfig, Model, ModelKind};
use crate::nn::Module;
use crate::optim::{AdamState, LrSchedule};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"DMSN";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const PREAMBLE: usize = 16;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    StackFinetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::StackFinetune => "stack_finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stack_finetune" => Ok(Stage::StackFinetune),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed optimisation steps.
    pub step: u64,
    pub model_kind: ModelKind,
    pub model_config: DmshnConfig,
    /// SHA-256 of the canonical training config JSON.
    pub config_hash: String,
    pub schedule: LrSchedule,
    pub adam: AdamMeta,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn align(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    /// Snapshot of a model and its optimiser state.
    pub fn capture(model: &Model, adam: &AdamState, meta: CheckpointMeta) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, t| {
            tensors.insert(name, t.clone());
        });
        for (name, t) in &adam.m {
            tensors.insert(format!("{ADAM_M}{name}"), t.clone());
        }
        for (name, t) in &adam.v {
            tensors.insert(format!("{ADAM_V}{name}"), t.clone());
        }
        let meta = CheckpointMeta {
            adam: AdamMeta {
                t: adam.t,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
            },
            model_kind: model.kind(),
            model_config: model.config(),
            ..meta
        };
        Checkpoint { meta, tensors }
    }

    /// Model parameters only (optimiser moments excluded).
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn adam_state(&self) -> AdamState {
        let strip = |prefix: &str| -> BTreeMap<String, Tensor> {
            self.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        AdamState {
            beta1: self.meta.adam.beta1,
            beta2: self.meta.adam.beta2,
            eps: self.meta.adam.eps,
            t: self.meta.adam.t,
            m: strip(ADAM_M),
            v: strip(ADAM_V),
        }
    }

    /// Model described by the checkpoint's own metadata.
    pub fn model(&self) -> Result<Model> {
        Model::from_named(self.meta.model_kind, self.meta.model_config, &self.params())
    }

    /// Model of the requested kind and config; fails if the tensors do not fit.
    pub fn model_as(&self, kind: ModelKind, config: DmshnConfig) -> Result<Model> {
        Model::from_named(kind, config, &self.params())
    }

    pub fn header(&self) -> Header {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = 4 * t.numel() as u64;
                let entry = TensorEntry {
                    shape: t.shape().dims(),
                    dtype: "f32".into(),
                    offset,
                    length,
                };
                offset = align(offset + length);
                (name.clone(), entry)
            })
            .collect();
        Header {
            tensors,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let json = serde_json::to_vec(&header)?;
        let payload_start = align((PREAMBLE + json.len()) as u64) as usize;
        let mut out = Vec::with_capacity(payload_start + self.tensors.values().map(|t| 4 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (name, t) in &self.tensors {
            let entry = &header.tensors[name];
            out.resize(payload_start + entry.offset as usize, 0);
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = align((PREAMBLE + json_len) as u64) as usize;
        let payload = &bytes[payload_start.min(bytes.len())..];
        validate_layout(&header, payload.len() as u64)?;
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors {
            let block = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data: Vec<f32> = block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name.clone(), Tensor::from_vec(Shape::from(e.shape), data)?);
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    /// Atomic write: temporary sibling file, fsync, rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp: PathBuf = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::CorruptCheckpoint("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (PREAMBLE as u64).checked_add(json_len).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(Error::CorruptCheckpoint(format!("header length {json_len} exceeds file size")));
    };
    serde_json::from_slice(&bytes[PREAMBLE..end as usize])
        .map_err(|e| Error::CorruptCheckpoint(format!("header JSON: {e}")))
}

fn validate_layout(header: &Header, payload_len: u64) -> Result<()> {
    let mut blocks: Vec<(&String, &TensorEntry)> = header.tensors.iter().collect();
    blocks.sort_by_key(|(_, e)| e.offset);
    let mut cursor = 0u64;
    for (name, e) in &blocks {
        if e.dtype != "f32" {
            return Err(Error::CorruptCheckpoint(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.length != 4 * numel {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: length {} does not match shape {:?}",
                e.length, e.shape
            )));
        }
        if e.offset % ALIGN != 0 || e.offset < cursor {
            return Err(Error::CorruptCheckpoint(format!("{name}: misaligned or overlapping block")));
        }
        cursor = e.offset + e.length;
    }
    if cursor != payload_len {
        return Err(Error::CorruptCheckpoint(format!(
            "payload is {payload_len} bytes, blocks end at {cursor}"
        )));
    }
    Ok(())
}

/// Header only; reads no more of the file than the preamble and JSON.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; PREAMBLE];
    let got = read_up_to(&mut f, &mut pre).map_err(|e| Error::io(path, e))?;
    if got < 4 || pre[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if got < PREAMBLE {
        return Err(Error::CorruptCheckpoint("truncated preamble".into()));
    }
    let json_len = u64::from_le_bytes(pre[8..16].try_into().unwrap());
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if PREAMBLE as u64 + json_len > file_len {
        return parse_header(&pre);
    }
    let mut buf = pre.to_vec();
    buf.resize(PREAMBLE + json_len as usize, 0);
    f.read_exact(&mut buf[PREAMBLE..]).map_err(|e| Error::io(path, e))?;
    parse_header(&buf)
}

fn read_up_to(f: &mut std::fs::File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        let k = f.read(&mut buf[n..])?;
        if k == 0 {
            break;
        }
        n += k;
    }
    Ok(n)
}
