//! Embedding grids and their binary file format.
//!
//! Layout (little-endian): magic "TEG1", u16 version, u32 M, u32 N, u32 d,
//! u8 encoder-id length + bytes, i32 origin row, i32 origin col, validity
//! bitmap (ceil(M*N/8) bytes, row-major, LSB-first), M*N*d f32 embeddings
//! row-major, trailing u32 CRC32 of all preceding bytes.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TEG1";
const VERSION: u16 = 1;

/// An M x N grid of d-dimensional tile embeddings with a validity mask.
/// Embeddings are stored in 32-bit floats (storage precision); invalid
/// positions hold all zeros and never enter model math.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub encoder_id: String,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub embeddings: Vec<f32>,
    pub validity: Vec<bool>,
    pub origin: (i32, i32),
}

impl EmbeddingGrid {
    pub fn zeros(encoder_id: &str, rows: usize, cols: usize, dim: usize) -> Self {
        EmbeddingGrid {
            encoder_id: encoder_id.to_string(),
            rows,
            cols,
            dim,
            embeddings: vec![0.0; rows * cols * dim],
            validity: vec![false; rows * cols],
            origin: (0, 0),
        }
    }

    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn valid(&self, r: usize, c: usize) -> bool {
        self.validity[self.idx(r, c)]
    }

    pub fn embedding(&self, r: usize, c: usize) -> &[f32] {
        let i = self.idx(r, c);
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Store one tile's embedding (f64 values rounded to storage precision)
    /// and mark it valid.
    pub fn set_embedding(&mut self, r: usize, c: usize, values: &[f64]) {
        let i = self.idx(r, c);
        self.validity[i] = true;
        for (dst, &v) in self.embeddings[i * self.dim..(i + 1) * self.dim]
            .iter_mut()
            .zip(values)
        {
            *dst = v as f32;
        }
    }

    pub fn valid_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.valid(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }

    /// K x K window with the origin offset recorded.
    pub fn crop(&self, r0: usize, c0: usize, k: usize) -> Result<EmbeddingGrid> {
        if r0 + k > self.rows || c0 + k > self.cols {
            return Err(Error::Range(format!(
                "crop ({r0},{c0})+{k} outside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = EmbeddingGrid::zeros(&self.encoder_id, k, k, self.dim);
        out.origin = (self.origin.0 + r0 as i32, self.origin.1 + c0 as i32);
        for r in 0..k {
            for c in 0..k {
                let src = self.idx(r0 + r, c0 + c);
                let dst = out.idx(r, c);
                out.validity[dst] = self.validity[src];
                out.embeddings[dst * self.dim..(dst + 1) * self.dim]
                    .copy_from_slice(&self.embeddings[src * self.dim..(src + 1) * self.dim]);
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cells = self.rows * self.cols;
        let mut buf = Vec::with_capacity(32 + cells / 8 + cells * self.dim * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let id = self.encoder_id.as_bytes();
        buf.push(id.len() as u8);
        buf.extend_from_slice(id);
        buf.extend_from_slice(&self.origin.0.to_le_bytes());
        buf.extend_from_slice(&self.origin.1.to_le_bytes());
        let mut bitmap = vec![0u8; cells.div_ceil(8)];
        for (i, &v) in self.validity.iter().enumerate() {
            if v {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bitmap);
        for &v in &self.embeddings {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, offset: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format_at(0, "bad magic, expected TEG1"));
        }
        let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format_at(4, format!("unsupported version {version}")));
        }
        let rows = cur.read_u32("rows")? as usize;
        let cols = cur.read_u32("cols")? as usize;
        let dim = cur.read_u32("dim")? as usize;
        let id_len = cur.take(1, "encoder id length")?[0] as usize;
        let id_bytes = cur.take(id_len, "encoder id")?;
        let encoder_id = String::from_utf8(id_bytes.to_vec())
            .map_err(|_| Error::format_at(cur.offset as u64 - id_len as u64, "encoder id not utf-8"))?;
        let origin_r = i32::from_le_bytes(cur.take(4, "origin row")?.try_into().unwrap());
        let origin_c = i32::from_le_bytes(cur.take(4, "origin col")?.try_into().unwrap());

        let cells = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format_at(6, "grid extent overflow"))?;
        let bitmap_len = cells.div_ceil(8);
        let bitmap = cur.take(bitmap_len, "validity bitmap")?;
        let mut validity = Vec::with_capacity(cells);
        for i in 0..cells {
            validity.push(bitmap[i / 8] >> (i % 8) & 1 == 1);
        }

        let payload_off = cur.offset;
        let count = cells
            .checked_mul(dim)
            .ok_or_else(|| Error::format_at(payload_off as u64, "payload extent overflow"))?;
        if cur.remaining() < count * 4 + 4 {
            return Err(Error::format_at(
                payload_off as u64,
                format!(
                    "header declares {count} floats but only {} bytes remain",
                    cur.remaining()
                ),
            ));
        }
        let raw = cur.take(count * 4, "embeddings")?;
        let embeddings: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let crc_off = cur.offset;
        let stored = u32::from_le_bytes(cur.take(4, "crc32")?.try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..crc_off]);
        if stored != computed {
            return Err(Error::format_at(
                crc_off as u64,
                format!("crc mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            ));
        }
        if cur.remaining() != 0 {
            return Err(Error::format_at(cur.offset as u64, "trailing bytes after crc"));
        }
        Ok(EmbeddingGrid {
            encoder_id,
            rows,
            cols,
            dim,
            embeddings,
            validity,
            origin: (origin_r, origin_c),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format_at(
                self.offset as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}

/// Write then re-read a grid; the result must be bit-exact.
pub fn grid_roundtrip(grid: &EmbeddingGrid, path: &Path) -> Result<EmbeddingGrid> {
    grid.write(path)?;
    EmbeddingGrid::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample_grid(seed: u64, rows: usize, cols: usize, dim: usize) -> EmbeddingGrid {
        let mut rng = stream_rng(seed, "grid");
        let mut g = EmbeddingGrid::zeros("mock48", rows, cols, dim);
        g.origin = (3, -2);
        for r in 0..rows {
            for c in 0..cols {
                if rng.random::<f64>() < 0.8 {
                    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                    g.set_embedding(r, c, &v);
                }
            }
        }
        g
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample_grid(1, 5, 7, 6);
        let back = grid_roundtrip(&g, &dir.path().join("g.teg")).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn wrong_magic_is_format_error_at_zero() {
        let mut bytes = sample_grid(2, 3, 3, 4).to_bytes();
        bytes[0] = b'X';
        match EmbeddingGrid::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn short_payload_reports_payload_offset() {
        let g = sample_grid(3, 4, 4, 8);
        let bytes = g.to_bytes();
        // header: magic(4)+ver(2)+3*u32(12)+idlen(1)+id+2*i32(8)+bitmap(2)
        let header_len = 4 + 2 + 12 + 1 + g.encoder_id.len() + 8 + 2;
        let truncated = &bytes[..header_len + 10];
        match EmbeddingGrid::from_bytes(truncated) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, header_len, "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_payload_fails_crc() {
        let g = sample_grid(4, 3, 3, 4);
        let mut bytes = g.to_bytes();
        let n = bytes.len();
        bytes[n - 12] ^= 0xff;
        match EmbeddingGrid::from_bytes(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, n - 4);
                assert!(msg.contains("crc"), "{msg}");
            }
            other => panic!("expected crc error, got {other:?}"),
        }
    }

    #[test]
    fn crop_offsets_origin() {
        let g = sample_grid(5, 6, 6, 3);
        let c = g.crop(2, 1, 4).unwrap();
        assert_eq!(c.origin, (5, -1));
        assert_eq!(c.embedding(0, 0), g.embedding(2, 1));
        assert!(g.crop(4, 4, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_survives_any_geometry(seed in 0u64..500, rows in 1usize..6, cols in 1usize..6, dim in 1usize..5) {
            let g = sample_grid(seed, rows, cols, dim);
            let back = EmbeddingGrid::from_bytes(&g.to_bytes()).unwrap();
            prop_assert_eq!(g, back);
        }

        #[test]
        fn single_flipped_byte_never_parses_silently(seed in 0u64..100, pos_frac in 0.0f64..1.0) {
            let g = sample_grid(seed, 3, 3, 2);
            let mut bytes = g.to_bytes();
            let pos = ((bytes.len() - 1) as f64 * pos_frac) as usize;
            bytes[pos] ^= 0x55;
            match EmbeddingGrid::from_bytes(&bytes) {
                Ok(parsed) => prop_assert_eq!(parsed, g), // flip must have been a no-op
                Err(Error::Format { .. }) => {}
                Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other:?}"))),
            }
        }
    }
}
