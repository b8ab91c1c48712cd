//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "OCTPCKPT"
//! version  u32
//! header   u32 length + JSON {"width_divisor", "input_rows", "input_cols"}
//! count    u32
//! count ×  u32 name length, UTF-8 name, u8 dtype (1 = f32),
//!          u32 rank, rank × u64 dims, f32 data
//! ```
//!
//! Names are `<layer path>.weight` (shape `[out, in, k, k]`) and
//! `<layer path>.bias` (shape `[out]`). Loading checks every tensor against
//! the shapes the architecture implies for the stored geometry.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{NetConfig, Network};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OCTPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

fn tensors(net: &Network<f32>) -> Vec<(String, Vec<u64>, &[f32])> {
    let mut out = Vec::new();
    for (name, conv) in net.layers() {
        let k = conv.kernel as u64;
        out.push((
            format!("{name}.weight"),
            vec![conv.out_channels as u64, conv.in_channels as u64, k, k],
            conv.weight.as_slice(),
        ));
        out.push((format!("{name}.bias"), vec![conv.out_channels as u64], conv.bias.as_slice()));
    }
    out
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&net.config).expect("config serializes");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let entries = tensors(net);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, data) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Network<f32>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let header_len = cur.u32()? as usize;
    let config: NetConfig =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| format!("bad header: {e}"))?;
    let mut net = Network::<f32>::zeros(config).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Vec<u64>)> =
        tensors(&net).into_iter().map(|(n, d, _)| (n, d)).collect();
    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(format!("expected {} tensors, found {count}", expected.len()));
    }
    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(count);
    for (name, dims) in &expected {
        let name_len = cur.u32()? as usize;
        let found = std::str::from_utf8(cur.take(name_len)?).map_err(|_| "non-UTF-8 tensor name".to_string())?;
        if found != name {
            return Err(format!("expected tensor {name}, found {found}"));
        }
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(format!("{name}: unsupported dtype tag {dtype}"));
        }
        let rank = cur.u32()? as usize;
        let found_dims = (0..rank).map(|_| cur.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if &found_dims != dims {
            return Err(format!("{name}: expected shape {dims:?}, found {found_dims:?}"));
        }
        let n = dims.iter().product::<u64>() as usize;
        let raw = cur.take(n * 4)?;
        loaded.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    let mut it = loaded.into_iter();
    for (_, conv) in net.layers_mut() {
        conv.weight = it.next().expect("counted");
        conv.bias = it.next().expect("counted");
    }
    if !net.all_finite() {
        return Err("checkpoint contains non-finite weights".into());
    }
    Ok(net)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
