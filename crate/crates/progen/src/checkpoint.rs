//! Binary checkpoints.
//!
//! Layout (little-endian): magic `PGCK`, `u32` version, `u32` length and
//! UTF-8 `key=value` text (model config plus normalizer statistics), `u32`
//! tensor count, then per tensor `u32` name length, name, `u32` rank, `u64`
//! dims and the `f64` payload.

use std::path::Path;

use progen_core::data::Normalizer;
use progen_core::{ModelConfig, ScoreModel, ScoreModelParams, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PGCK";
pub const VERSION: u32 = 1;

const NORM_MEAN: &str = "normalizer_mean";
const NORM_STD: &str = "normalizer_std";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ScoreModel,
    pub normalizer: Normalizer,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut kv = ck.model.config().to_kv();
    kv.push_str(&format!("{NORM_MEAN}={}\n", join(&ck.normalizer.mean)));
    kv.push_str(&format!("{NORM_STD}={}\n", join(&ck.normalizer.std)));
    let params = ck.model.params();
    let mut out = Vec::with_capacity(64 + kv.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    out.extend_from_slice(kv.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CliError::CorruptPayload(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_floats(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::CorruptPayload(format!("bad normalizer entry {s:?}")))
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(CliError::CorruptPayload("not a checkpoint file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CliError::VersionMismatch(format!(
            "file has version {version}, expected {VERSION}"
        )));
    }
    let kv_len = c.u32("config length")? as usize;
    let kv = std::str::from_utf8(c.take(kv_len, "config")?)
        .map_err(|_| CliError::CorruptPayload("config text is not UTF-8".into()))?;
    let mut model_kv = String::new();
    let (mut mean, mut std) = (None, None);
    for line in kv.lines() {
        match line.split_once('=') {
            Some((NORM_MEAN, v)) => mean = Some(parse_floats(v)?),
            Some((NORM_STD, v)) => std = Some(parse_floats(v)?),
            _ => {
                model_kv.push_str(line);
                model_kv.push('\n');
            }
        }
    }
    let cfg = ModelConfig::from_kv(&model_kv)
        .map_err(|e| CliError::CorruptPayload(format!("model config: {e}")))?;
    let (Some(mean), Some(std)) = (mean, std) else {
        return Err(CliError::CorruptPayload("missing normalizer statistics".into()));
    };
    let count = c.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| CliError::CorruptPayload("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(CliError::CorruptPayload(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| CliError::CorruptPayload(format!("{name}: implausible shape {shape:?}")))?;
        let raw = c.take(8 * n, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(CliError::CorruptPayload(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let model = ScoreModel::new(cfg, ScoreModelParams::new(entries))
        .map_err(|e| CliError::CorruptPayload(e.to_string()))?;
    Ok(Checkpoint {
        model,
        normalizer: Normalizer { mean, std },
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, encode(ck)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}

/// Load and require the stored model config to equal `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.model.config() != expected {
        return Err(CliError::VersionMismatch(format!(
            "checkpoint model config differs from the requested one:\n--- checkpoint\n{}--- requested\n{}",
            ck.model.config().to_kv(),
            expected.to_kv()
        )));
    }
    Ok(ck)
}
