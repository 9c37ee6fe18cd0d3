//! `RCM1` checkpoints: magic line, one JSON header line, then the
//! parameters as little-endian f64 in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::{ReconModel, TrainingMeta};
use crate::net::Architecture;

const MAGIC: &[u8] = b"RCM1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    n_params: usize,
    tensors: Vec<String>,
}

pub fn to_bytes(model: &ReconModel) -> Vec<u8> {
    let arch = model.architecture();
    let header = Header {
        config: model.config.clone(),
        meta: model.meta.clone(),
        n_params: model.params.len(),
        tensors: arch.tensors().into_iter().map(|(n, _)| n).collect(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_string(&header).expect("serializable").into_bytes());
    out.push(b'\n');
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ReconModel> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| ModelError::BadCheckpoint("missing RCM1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| ModelError::BadCheckpoint("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| ModelError::BadCheckpoint(format!("header: {e}")))?;
    let arch = Architecture::new(&header.config)?;
    if arch.n_params != header.n_params {
        return Err(ModelError::BadCheckpoint(format!(
            "header declares {} parameters, config implies {}",
            header.n_params, arch.n_params
        )));
    }
    let blob = &rest[nl + 1..];
    if blob.len() != 8 * header.n_params {
        return Err(ModelError::BadCheckpoint(format!(
            "payload of {} bytes, expected {}",
            blob.len(),
            8 * header.n_params
        )));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(ReconModel {
        config: header.config,
        params,
        meta: header.meta,
    })
}

pub fn write_checkpoint(model: &ReconModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| ModelError::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ReconModel> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| ModelError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn roundtrip_and_corruption() {
        let mut m = build_model(&ModelConfig::default()).unwrap();
        m.meta.best_val_mse = Some(0.123);
        let bytes = to_bytes(&m);
        assert_eq!(from_bytes(&bytes).unwrap(), m);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(ModelError::BadCheckpoint(_))));
    }
}
