//! On-disk embedding bank, format `RECO-bank v1`.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "RECOBANK"            8 bytes
//! version u32 = 1
//! dim     u32
//! count   u64
//! flags   u32                   bit0: ids present
//! image   count * dim * f32
//! text    count * dim * f32
//! ids     count * u64           only when bit0 set
//! crc32   u32                   over all preceding bytes
//! ```
//!
//! Embeddings are stored at f32 and promoted to f64 on load without
//! re-normalization, so save -> load -> save is byte-identical. A sidecar
//! JSON manifest (`<bank>.manifest.json`) records provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::tensor::Tensor;
use crate::{Real, StorageReal};

const MAGIC: &[u8; 8] = b"RECOBANK";
const VERSION: u32 = 1;
const FLAG_IDS: u32 = 1;

/// Sidecar metadata written next to every bank.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BankManifest {
    pub dim: usize,
    pub count: usize,
    /// Creation tag. Deterministic (derived from the generating seed) so that
    /// regenerating an archive with the same seed reproduces it byte for byte.
    pub created: String,
    pub source: String,
    pub dedupe_threshold: Option<f64>,
}

pub fn manifest_path(bank: &Path) -> PathBuf {
    let mut os = bank.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// Serialize a store (plus its manifest sidecar) to `path`.
pub fn save_bank(store: &MemoryStore, path: &Path, manifest: &BankManifest) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + store.len() * store.dim() * 8 + store.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    buf.extend_from_slice(&FLAG_IDS.to_le_bytes());
    for side in [crate::memory::Modality::Image, crate::memory::Modality::Text] {
        for &v in store.matrix(side).data() {
            buf.extend_from_slice(&(v as StorageReal).to_le_bytes());
        }
    }
    for &id in store.ids() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;

    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Load a bank, verifying magic, version and checksum.
pub fn load_bank(path: &Path) -> Result<MemoryStore> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);

    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "RECOBANK" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let flags = r.u32()?;

    let payload_len = r.pos + 2 * count * dim * 4 + if flags & FLAG_IDS != 0 { count * 8 } else { 0 };
    if buf.len() < payload_len + 4 {
        return Err(Error::Truncated { needed: payload_len + 4 - buf.len() });
    }
    let stored_crc = u32::from_le_bytes(buf[payload_len..payload_len + 4].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..payload_len]);
    if stored_crc != computed {
        return Err(Error::ChecksumMismatch { stored: stored_crc, computed });
    }

    let read_matrix = |r: &mut Reader| -> Result<Tensor<Real>> {
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            data.push(StorageReal::from_le_bytes(r.take(4)?.try_into().unwrap()) as Real);
        }
        Tensor::new(vec![count, dim], data)
    };
    let image = read_matrix(&mut r)?;
    let text = read_matrix(&mut r)?;
    let ids = if flags & FLAG_IDS != 0 {
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.u64()?);
        }
        ids
    } else {
        (0..count as u64).collect()
    };
    MemoryStore::from_parts(image, text, ids)
}

pub fn load_manifest(bank: &Path) -> Result<BankManifest> {
    let buf = fs::read(manifest_path(bank))?;
    Ok(serde_json::from_slice(&buf)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated { needed: self.pos + n - self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
