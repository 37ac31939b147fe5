//! Little-endian record container used for checkpoints.
//!
//! Layout: magic `AVNV`, `u32` version, `u32` record count, then per record
//! a `u16` name length, the UTF-8 name, a `u8` rank, `u32` extents and the
//! raw `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::applat::{ConditionRegistry, LatentMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AVNV";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            data: vec![value],
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize || r.shape.len() > u8::MAX as usize {
            return Err(Error::input(format!("record {:?} cannot be encoded", r.name)));
        }
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(Error::input(format!("record {:?} payload does not match its shape", r.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(r.shape.len() as u8);
        for e in &r.shape {
            buf.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, "record name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(records)
}

const CONFIG_FIELDS: [&str; 10] = [
    "d_token",
    "heads",
    "blocks",
    "samples",
    "latent_dim",
    "ffn_hidden",
    "rgb_hidden",
    "pe_freqs",
    "near",
    "far",
];

pub(super) fn config_records(config: &ModelConfig, registry: &ConditionRegistry) -> Vec<Record> {
    let values = [
        config.d_token as f32,
        config.heads as f32,
        config.blocks as f32,
        config.samples as f32,
        config.latent_dim as f32,
        config.ffn_hidden as f32,
        config.rgb_hidden as f32,
        config.pe_freqs as f32,
        config.near as f32,
        config.far as f32,
    ];
    let mut out: Vec<Record> = CONFIG_FIELDS
        .iter()
        .zip(values)
        .map(|(n, v)| Record::scalar(format!("config.{n}"), v))
        .collect();
    out.push(Record::scalar("registry.mode", registry.mode.flag() as f32));
    for (name, c) in &registry.conditions {
        out.push(Record {
            name: format!("registry.condition.{name}"),
            shape: vec![2],
            data: vec![c[0] as f32, c[1] as f32],
        });
    }
    out
}

/// Splits configuration and registry records from the rest.
pub(super) fn parse_config(path: &Path, records: Vec<Record>) -> Result<(ModelConfig, Vec<Record>)> {
    let mut values = [None; 10];
    let mut mode = None;
    let mut conditions = Vec::new();
    let mut rest = Vec::new();
    for r in records {
        if let Some(field) = r.name.strip_prefix("config.") {
            let Some(i) = CONFIG_FIELDS.iter().position(|f| *f == field) else {
                return Err(Error::format(path, format!("unknown configuration record {field:?}")));
            };
            values[i] = r.data.first().copied();
        } else if r.name == "registry.mode" {
            let flag = r.data.first().copied().unwrap_or(-1.0);
            mode = Some(LatentMode::from_flag(flag as u8).map_err(|e| Error::format(path, e.to_string()))?);
        } else if let Some(name) = r.name.strip_prefix("registry.condition.") {
            conditions.push(name.to_string());
        } else {
            rest.push(r);
        }
    }
    let get = |i: usize| -> Result<f32> { values[i].ok_or_else(|| Error::format(path, format!("missing record config.{}", CONFIG_FIELDS[i]))) };
    let Some(latent_mode) = mode else {
        return Err(Error::format(path, "missing record registry.mode"));
    };
    let config = ModelConfig {
        d_token: get(0)? as usize,
        heads: get(1)? as usize,
        blocks: get(2)? as usize,
        samples: get(3)? as usize,
        latent_dim: get(4)? as usize,
        ffn_hidden: get(5)? as usize,
        rgb_hidden: get(6)? as usize,
        pe_freqs: get(7)? as usize,
        near: get(8)? as f64,
        far: get(9)? as f64,
        latent_mode,
        conditions,
    };
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((config, rest))
}
