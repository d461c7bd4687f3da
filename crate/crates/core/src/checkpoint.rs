//! `POPC` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "POPC" | u32 version | u8 stage mask | u32 tensor count
//! per tensor: u32 name len | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! dtype tags are 0 = f32, 1 = f64, 2 = u8. Tensors are written sorted by
//! name, so save → load → save is byte-identical. The model config travels as
//! a u8 tensor holding its JSON; prototype banks as one f64 vector plus a
//! two-byte `[mode, initialized]` flag tensor per class.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dml::{BankEntry, PrototypeBank, ProtoMode};
use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, PipelineState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"POPC";
pub const VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Bit `s - 1` is set when stage `s` has been trained.
    pub stage_mask: u8,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: TensorData) {
        self.tensors.insert(name.into(), StoredTensor { dims, data });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage_mask);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.tag());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse and verify a checkpoint; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 + 4 + 1 + 4 + 4 {
            return Err(corrupt(path, "file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(path, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(corrupt(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let stage_mask = r.u8()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt(path, "tensor name is not UTF-8"))?.to_string();
            let tag = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(path, "tensor too large"))?;
            let data = match tag {
                0 => TensorData::F32(r.take(n.saturating_mul(4))?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                1 => TensorData::F64(r.take(n.saturating_mul(8))?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                t => return Err(corrupt(path, format!("unknown dtype tag {t} for {name}"))),
            };
            if tensors.insert(name.clone(), StoredTensor { dims, data }).is_some() {
                return Err(corrupt(path, format!("duplicate tensor name {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt(path, "trailing bytes after tensor table"));
        }
        Ok(Checkpoint { stage_mask, tensors })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn from_state(state: &PipelineState) -> Result<Self> {
        let mut ck = Checkpoint { stage_mask: stage_mask(&state.trained), ..Default::default() };
        for (name, t) in state.named_params() {
            ck.insert(name, t.shape().to_vec(), TensorData::F64(t.data().to_vec()));
        }
        let json = serde_json::to_vec(&state.config)?;
        ck.insert(CONFIG_TENSOR, vec![json.len()], TensorData::U8(json));
        for (prefix, bank) in [("s2", &state.stage2.bank), ("s3", &state.stage3.bank)] {
            for (class, e) in bank.entries() {
                ck.insert(format!("{prefix}.bank.{class}.vector"), vec![e.vector.len()], TensorData::F64(e.vector.clone()));
                let flags = vec![(e.mode == ProtoMode::Dynamic) as u8, e.initialized as u8];
                ck.insert(format!("{prefix}.bank.{class}.flags"), vec![2], TensorData::U8(flags));
            }
        }
        Ok(ck)
    }

    pub fn model_config(&self, path: &Path) -> Result<ModelConfig> {
        match self.tensors.get(CONFIG_TENSOR) {
            Some(StoredTensor { data: TensorData::U8(bytes), .. }) => Ok(serde_json::from_slice(bytes)?),
            _ => Err(corrupt(path, "missing model config")),
        }
    }

    /// Rebuild a pipeline. Every parameter of the stored config must be present
    /// with its expected shape; unknown tensors are rejected.
    pub fn to_state(&self, path: &Path) -> Result<PipelineState> {
        let config = self.model_config(path)?;
        let mut state = PipelineState::new(config)?;
        let mut used = 1;
        for (name, param) in state.named_params_mut() {
            let t = self.tensors.get(&name).ok_or_else(|| corrupt(path, format!("missing tensor {name}")))?;
            if t.dims != param.shape() || t.data.len() != param.len() {
                return Err(corrupt(path, format!("tensor {name} has shape {:?}, expected {:?}", t.dims, param.shape())));
            }
            *param = Tensor::new(&t.dims, t.data.to_f64())?;
            used += 1;
        }
        let alpha = state.config.alpha;
        for (prefix, bank) in [("s2", &mut state.stage2.bank), ("s3", &mut state.stage3.bank)] {
            let mut restored = PrototypeBank::new(alpha);
            let marker = format!("{prefix}.bank.");
            for (name, t) in self.tensors.range(marker.clone()..) {
                let Some(rest) = name.strip_prefix(&marker) else { break };
                let Some(class) = rest.strip_suffix(".vector") else { continue };
                let class: u8 = class.parse().map_err(|_| corrupt(path, format!("bad bank entry {name}")))?;
                let flags = match self.tensors.get(&format!("{marker}{class}.flags")) {
                    Some(StoredTensor { data: TensorData::U8(f), .. }) if f.len() == 2 => f.clone(),
                    _ => return Err(corrupt(path, format!("bank entry {name} has no flags"))),
                };
                let mode = if flags[0] == 1 { ProtoMode::Dynamic } else { ProtoMode::Static };
                restored.insert(class, BankEntry { vector: t.data.to_f64(), mode, initialized: flags[1] == 1 })?;
                used += 2;
            }
            *bank = restored;
        }
        if used != self.tensors.len() {
            return Err(corrupt(path, format!("{} unrecognised tensors", self.tensors.len() - used)));
        }
        for s in 0..3 {
            state.trained[s] = self.stage_mask & (1 << s) != 0;
        }
        Ok(state)
    }
}

pub fn stage_mask(trained: &[bool; 3]) -> u8 {
    trained.iter().enumerate().fold(0, |m, (i, &t)| m | ((t as u8) << i))
}

pub fn save_state(state: &PipelineState, path: &Path) -> Result<()> {
    Checkpoint::from_state(state)?.save(path)
}

pub fn load_state(path: &Path) -> Result<PipelineState> {
    Checkpoint::load(path)?.to_state(path)
}
