//! Checkpoint directories: `weights.uqar` (array container) plus
//! `config.json` with the model config and its hash.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Trainable;
use crate::error::{Error, Result};
use crate::io::{read_arrays, write_arrays, ArrayData, NamedArray};

pub const WEIGHTS_FILE: &str = "weights.uqar";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?)
    }
}

/// Hex SHA-256 (first 16 bytes) of the JSON serialization.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..16].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint<M: Trainable>(
    dir: &Path,
    model: &mut M,
    kind: &str,
    config: &impl Serialize,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    model.visit_buffers(&mut |name, buf| {
        arrays.push(NamedArray::f32(name, vec![buf.len()], buf.clone()));
    });
    write_arrays(&dir.join(WEIGHTS_FILE), &arrays)?;
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        config_hash: config_hash(config)?,
        config: serde_json::to_value(config)?,
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Restore buffers into `model`, which must be built from `config`. Fails if
/// the stored hash differs from the hash of `config`.
pub fn load_checkpoint<M: Trainable>(dir: &Path, model: &mut M, config: &impl Serialize) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta::read(dir)?;
    let expected = config_hash(config)?;
    if meta.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: meta.config_hash,
        });
    }
    let mut stored: HashMap<String, Vec<f32>> = read_arrays(&dir.join(WEIGHTS_FILE))?
        .into_iter()
        .map(|a| match a.data {
            ArrayData::F32(v) => Ok((a.name, v)),
            ArrayData::F64(_) => Err(Error::Container(format!("{} is not f32", a.name))),
        })
        .collect::<Result<_>>()?;
    let mut failure = None;
    model.visit_buffers(&mut |name, buf| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(v) if v.len() == buf.len() => *buf = v,
            Some(v) => failure = Some(Error::shape(format!("{name}: stored {} values, model has {}", v.len(), buf.len()))),
            None => failure = Some(Error::Container(format!("missing array {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Container(format!("unexpected array {extra}")));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_twomoons_net, StochasticModel, TwoMoonsNetConfig, VariationalMode};
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_and_hash_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TwoMoonsNetConfig {
            variational_mode: VariationalMode::Bbb,
            ..Default::default()
        };
        let mut a = build_twomoons_net(&cfg, &mut seeded(1)).unwrap();
        save_checkpoint(dir.path(), &mut a, "twomoons", &cfg).unwrap();
        let mut b = build_twomoons_net(&cfg, &mut seeded(2)).unwrap();
        load_checkpoint(dir.path(), &mut b, &cfg).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.9]).unwrap();
        assert_eq!(
            a.forward(&x, false, &mut seeded(0)).unwrap(),
            b.forward(&x, false, &mut seeded(0)).unwrap()
        );
        let other = TwoMoonsNetConfig {
            hidden: vec![64, 32],
            ..cfg.clone()
        };
        let mut c = build_twomoons_net(&other, &mut seeded(2)).unwrap();
        let err = load_checkpoint(dir.path(), &mut c, &other).unwrap_err();
        assert!(matches!(err, Error::ConfigHashMismatch { .. }));
    }
}
