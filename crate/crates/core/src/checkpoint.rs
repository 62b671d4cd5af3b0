//! Fusion checkpoint: a flat f64 array with a JSON header naming every
//! tensor, its shape and the architecture, plus a CRC32 trailer. The
//! temperature travels with the fusion weights under the name
//! `temperature.log_inv_tau`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionParams};
use crate::loss::TemperatureParam;
use crate::Real;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: FusionConfig,
    tensors: Vec<TensorInfo>,
    meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    params: &FusionParams,
    temperature: &TemperatureParam,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let named = params.named_tensors();
    let mut tensors: Vec<TensorInfo> =
        named.iter().map(|(n, t)| TensorInfo { name: n.clone(), shape: t.shape().to_vec() }).collect();
    tensors.push(TensorInfo { name: "temperature.log_inv_tau".into(), shape: vec![1] });
    let header = Header { config: params.config, tensors, meta: meta.clone() };
    let header_json = serde_json::to_vec(&header)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in &named {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&temperature.log_inv_tau.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(FusionParams, TemperatureParam, BTreeMap<String, String>)> {
    let buf = fs::read(path)?;
    if buf.len() < 12 {
        return Err(Error::Truncated { needed: 12 - buf.len() });
    }
    let payload = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let hlen = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
    if payload.len() < 8 + hlen {
        return Err(Error::Truncated { needed: 8 + hlen - payload.len() });
    }
    let header: Header = serde_json::from_slice(&payload[8..8 + hlen])?;

    let mut params = FusionParams::init(header.config, 0)?;
    let mut pos = 8 + hlen;
    let read_tensor = |len: usize, pos: &mut usize| -> Result<Vec<Real>> {
        let bytes = len * 8;
        if *pos + bytes > payload.len() {
            return Err(Error::Truncated { needed: *pos + bytes - payload.len() });
        }
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            out.push(Real::from_le_bytes(
                payload[*pos + i * 8..*pos + (i + 1) * 8].try_into().unwrap(),
            ));
        }
        *pos += bytes;
        Ok(out)
    };

    let mut infos = header.tensors.iter();
    for (name, t) in params.named_tensors_mut() {
        let info = infos.next().ok_or_else(|| {
            Error::InvalidConfig("checkpoint header lists too few tensors".into())
        })?;
        if info.name != name || info.shape != t.shape() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint tensor '{}' {:?} does not match expected '{}' {:?}",
                info.name,
                info.shape,
                name,
                t.shape()
            )));
        }
        let data = read_tensor(t.len(), &mut pos)?;
        t.data_mut().copy_from_slice(&data);
    }
    let temp_info = infos
        .next()
        .ok_or_else(|| Error::InvalidConfig("checkpoint missing temperature".into()))?;
    if temp_info.name != "temperature.log_inv_tau" {
        return Err(Error::InvalidConfig("checkpoint missing temperature".into()));
    }
    let temp = TemperatureParam { log_inv_tau: read_tensor(1, &mut pos)?[0] };
    Ok((params, temp, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn temp_path(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("reco-ckpt-test-{}-{}", std::process::id(), name));
        p
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let cfg = FusionConfig::new(16, 4, 2, 2.0);
        let params = FusionParams::random(cfg, 42, 0.3).unwrap();
        let temp = TemperatureParam::from_tau(0.11);
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), "42".into());

        let p1 = temp_path("a");
        let p2 = temp_path("b");
        save_checkpoint(&params, &temp, &meta, &p1).unwrap();
        save_checkpoint(&params, &temp, &meta, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "writes are deterministic");

        let (loaded, ltemp, lmeta) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(ltemp.log_inv_tau.to_bits(), temp.log_inv_tau.to_bits());
        assert_eq!(lmeta, meta);
        let _ = fs::remove_file(&p1);
        let _ = fs::remove_file(&p2);
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let cfg = FusionConfig::new(16, 4, 1, 1.0);
        let params = FusionParams::init(cfg, 1).unwrap();
        let p = temp_path("bad");
        save_checkpoint(&params, &TemperatureParam::default_init(), &BTreeMap::new(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x01;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::ChecksumMismatch { .. })));
        let _ = fs::remove_file(&p);
    }
}
