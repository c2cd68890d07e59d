//! RSC1 checkpoints, little-endian:
//!
//! ```text
//! "RSC1" u32 version
//! u32 in_channels, u32 levels, u32 channels[levels], u8 residual, u8 z_frozen
//! u32 n_params, then per parameter: u32 name_len, name, u32 ndim, u32 dims[ndim], u64 offset
//! u64 n_values, f32 values[n_values]
//! u8 has_optimizer [u64 step, f32 m[n_values], f32 v[n_values]]
//! ```

use std::fs;
use std::path::Path;

use super::network::{NetConfig, Network};
use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::scanner::ByteReader;

pub const RSC_MAGIC: &[u8; 4] = b"RSC1";
pub const RSC_VERSION: u32 = 1;

fn integrity<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Integrity(msg.into()))
}

pub fn checkpoint_bytes(net: &Network<f32>, optim: Option<&OptimState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RSC_MAGIC);
    out.extend_from_slice(&RSC_VERSION.to_le_bytes());
    let c = &net.config;
    out.extend_from_slice(&(c.in_channels as u32).to_le_bytes());
    out.extend_from_slice(&(c.channels.len() as u32).to_le_bytes());
    for &ch in &c.channels {
        out.extend_from_slice(&(ch as u32).to_le_bytes());
    }
    out.push(c.residual as u8);
    out.push(net.blocks().any(|b| b.skip_z) as u8);
    let params = net.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += p.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for p in &params {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optim {
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            for arr in [&s.m, &s.v] {
                for v in arr.iter().flatten() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    out
}

fn read_f32s(r: &mut ByteReader, n: usize) -> Result<Vec<f32>> {
    Ok(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network<f32>, Option<OptimState>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != RSC_MAGIC {
        return integrity("not an RSC1 checkpoint");
    }
    let version = r.u32()?;
    if version != RSC_VERSION {
        return integrity(format!("unsupported checkpoint version {version}"));
    }
    let in_channels = r.u32()? as usize;
    let levels = r.u32()? as usize;
    if levels == 0 || levels > 16 {
        return integrity(format!("implausible level count {levels}"));
    }
    let channels = (0..levels).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let flags = r.take(2)?;
    let config = NetConfig { in_channels, channels, residual: flags[0] != 0 };
    let mut net = Network::<f32>::build(config, 0).map_err(|e| Error::Integrity(format!("bad network header: {e}")))?;
    net.set_z_frozen(flags[1] != 0);
    let n_params = r.u32()? as usize;
    let expected: Vec<(String, Vec<usize>)> = net.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if n_params != expected.len() {
        return integrity(format!("checkpoint has {n_params} parameters, architecture needs {}", expected.len()));
    }
    let mut offset = 0u64;
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let off = r.u64()?;
        if &got != name || &dims != shape || off != offset {
            return integrity(format!("parameter table mismatch at {name}"));
        }
        offset += shape.iter().product::<usize>() as u64;
    }
    let total = r.u64()?;
    if total != offset {
        return integrity(format!("value count {total} does not match table {offset}"));
    }
    let values = read_f32s(&mut r, total as usize)?;
    let mut at = 0;
    for p in net.params_mut() {
        let n = p.len();
        p.data.copy_from_slice(&values[at..at + n]);
        at += n;
    }
    let optim = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = read_f32s(&mut r, total as usize)?;
            let v = read_f32s(&mut r, total as usize)?;
            let split = |flat: Vec<f32>| {
                let mut at = 0;
                net.params()
                    .iter()
                    .map(|p| {
                        at += p.len();
                        flat[at - p.len()..at].to_vec()
                    })
                    .collect::<Vec<_>>()
            };
            Some(OptimState { step, m: split(m), v: split(v) })
        }
        f => return integrity(format!("bad optimizer flag {f}")),
    };
    if r.pos != bytes.len() {
        return integrity(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
    }
    if net.params().iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
        return integrity("checkpoint contains non-finite weights");
    }
    Ok((net, optim))
}

pub fn save_checkpoint(net: &Network<f32>, optim: Option<&OptimState>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(net, optim))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, Option<OptimState>)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
