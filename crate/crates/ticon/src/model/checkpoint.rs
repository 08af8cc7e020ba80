//! TCK1 checkpoint container, shared by the contextualizer and the
//! aggregator.
//!
//! Layout (little-endian): magic "TCK1", u16 version, u32 config length +
//! canonical config text, u32 tensor count, manifest entries (u16 name length
//! + bytes, u8 rank, rank x u32 extents, u64 byte offset into the payload),
//! payload of 32-bit floats, trailing u32 CRC32 of all preceding bytes.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TCK1";
const VERSION: u16 = 1;

#[derive(Debug)]
pub struct TensorContainer {
    pub config_text: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn write_container(
    path: &Path,
    config_text: &str,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(shape.len() as u8);
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * data.len() as u64;
    }
    for (_, _, data) in tensors {
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<TensorContainer> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub(crate) fn parse_container(bytes: &[u8]) -> Result<TensorContainer> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format_at(*off as u64, format!("truncated while reading {what}")));
        }
        let out = &bytes[*off..*off + n];
        *off += n;
        Ok(out)
    };

    if take(&mut off, 4, "magic")? != MAGIC {
        return Err(Error::format_at(0, "bad magic, expected TCK1"));
    }
    let version = u16::from_le_bytes(take(&mut off, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format_at(4, format!("unsupported version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(&mut off, 4, "config length")?.try_into().unwrap()) as usize;
    let cfg_at = off;
    let config_text = String::from_utf8(take(&mut off, cfg_len, "config text")?.to_vec())
        .map_err(|_| Error::format_at(cfg_at as u64, "config text not utf-8"))?;
    let count = u32::from_le_bytes(take(&mut off, 4, "tensor count")?.try_into().unwrap()) as usize;

    let mut manifest: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut off, 2, "name length")?.try_into().unwrap()) as usize;
        let name_at = off;
        let name = String::from_utf8(take(&mut off, name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::format_at(name_at as u64, format!("tensor {i} name not utf-8")))?;
        let rank = take(&mut off, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4, "extent")?.try_into().unwrap()) as usize);
        }
        let tensor_off = u64::from_le_bytes(take(&mut off, 8, "tensor offset")?.try_into().unwrap());
        manifest.push((name, shape, tensor_off));
    }

    let payload_at = off;
    let payload_len = bytes.len().saturating_sub(payload_at + 4);
    let crc_at = payload_at + payload_len;
    if bytes.len() < payload_at + 4 {
        return Err(Error::format_at(payload_at as u64, "truncated before crc"));
    }
    let stored = u32::from_le_bytes(bytes[crc_at..crc_at + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..crc_at]);
    if stored != computed {
        return Err(Error::format_at(
            crc_at as u64,
            format!("crc mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        ));
    }

    let payload = &bytes[payload_at..crc_at];
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, tensor_off) in manifest {
        let numel: usize = shape.iter().product();
        let start = tensor_off as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::format_at(
                (payload_at + start.min(payload.len())) as u64,
                format!("manifest declares {numel} floats for {name} beyond payload"),
            ));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(TensorContainer { config_text, tensors })
}
