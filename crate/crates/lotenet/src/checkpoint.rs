//! Versioned binary model checkpoints (`.ltc`).
//!
//! Layout: magic `LTNC`, little-endian u16 format version, length-prefixed
//! JSON run configuration, every parameter tensor in registry order as
//! little-endian f64, per-layer batch-norm running statistics, and a CRC32
//! trailer over all preceding bytes.

use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::{LoTeNetModel, ModelError};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTNC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("unsupported checkpoint version {got} (expected {CHECKPOINT_VERSION})")]
    Version { got: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn push_tensor_f64<T: Real>(out: &mut Vec<u8>, tensor: &Tensor<T>) {
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

/// Serializes the model with its run configuration.
pub fn save<T: Real>(
    model: &LoTeNetModel<T>,
    run_config: &RunConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(run_config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for param in model.params() {
        push_tensor_f64(&mut out, param);
    }
    for bn in model.bn_layers() {
        push_tensor_f64(&mut out, &bn.running_mean);
        push_tensor_f64(&mut out, &bn.running_var);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_body(bytes: &[u8]) -> Result<(RunConfig, &[u8]), CheckpointError> {
    if bytes.len() < 18 {
        return Err(CheckpointError::Malformed("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { got: version });
    }
    let json_len = u64::from_le_bytes(body[6..14].try_into().unwrap()) as usize;
    let rest = &body[14..];
    if rest.len() < json_len {
        return Err(CheckpointError::Malformed("config blob truncated".into()));
    }
    let config: RunConfig = serde_json::from_slice(&rest[..json_len]).map_err(ConfigError::Parse)?;
    config.validate()?;
    Ok((config, &rest[json_len..]))
}

/// Reads just the embedded run configuration (for precision dispatch).
pub fn peek_config(path: impl AsRef<Path>) -> Result<RunConfig, CheckpointError> {
    let bytes = std::fs::read(path)?;
    Ok(parse_body(&bytes)?.0)
}

/// Restores a model; parameters round-trip bitwise through the f64 encoding.
pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<(RunConfig, LoTeNetModel<T>), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let (run_config, mut payload) = parse_body(&bytes)?;
    let mut model = LoTeNetModel::<T>::new(run_config.model_config()?)?;

    let mut take = |len: usize| -> Result<Vec<f64>, CheckpointError> {
        let need = len * 8;
        if payload.len() < need {
            return Err(CheckpointError::Malformed(format!(
                "parameter payload truncated: need {need} bytes, have {}",
                payload.len()
            )));
        }
        let (chunk, rest) = payload.split_at(need);
        payload = rest;
        Ok(chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };

    {
        let mut params = model.params_mut();
        for param in params.iter_mut() {
            let values = take(param.len())?;
            let data: Vec<T> = values.into_iter().map(T::real).collect();
            **param = Tensor::from_vec(param.shape().to_vec(), data)?;
        }
    }
    let n_bn = model.bn_layers().len();
    for l in 0..n_bn {
        let features = model.bn_layers()[l].running_mean.len();
        let mean: Vec<T> = take(features)?.into_iter().map(T::real).collect();
        let var: Vec<T> = take(features)?.into_iter().map(T::real).collect();
        let layer = &mut model.bn_layers_mut()[l];
        layer.running_mean = Tensor::from_vec(vec![features], mean)?;
        layer.running_var = Tensor::from_vec(vec![features], var)?;
    }
    if !payload.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameters",
            payload.len()
        )));
    }
    Ok((run_config, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use rand::Rng;
    use tempfile::tempdir;

    fn test_setup() -> (RunConfig, LoTeNetModel<f64>) {
        let json = r#"{
            "seed": 3,
            "model": {"layers": 2, "strides": [4], "bond_dim": 2, "n_classes": 2,
                      "input_shape": [8, 8, 1]},
            "data": {"format": "synthetic", "synthetic": {"kind": "blobs2d", "count": 16, "size": 8}}
        }"#;
        let run_config = RunConfig::from_json(json).unwrap();
        let model = LoTeNetModel::new(run_config.model_config().unwrap()).unwrap();
        (run_config, model)
    }

    #[test]
    fn roundtrip_is_bitwise_and_logits_match() {
        let dir = tempdir().unwrap();
        let (run_config, mut model) = test_setup();
        // make running stats non-trivial
        let mean = Tensor::from_vec(vec![2], vec![0.3, -0.2]).unwrap();
        let var = Tensor::from_vec(vec![2], vec![1.5, 0.7]).unwrap();
        model.update_bn_stats(&[(mean, var)]);
        let path = dir.path().join("model.ltc");
        save(&model, &run_config, &path).unwrap();

        let (config2, restored): (RunConfig, LoTeNetModel<f64>) = load(&path).unwrap();
        assert_eq!(config2, run_config);
        let p1: Vec<&Tensor<f64>> = model.params();
        let p2: Vec<&Tensor<f64>> = restored.params();
        assert_eq!(p1, p2);
        assert_eq!(model.bn_layers(), restored.bn_layers());

        let ds = gen_synthetic::<f64>(SyntheticKind::Blobs2d, 4, 8, 1).unwrap();
        assert_eq!(
            model.forward(&ds.images).unwrap(),
            restored.forward(&ds.images).unwrap()
        );
    }

    #[test]
    fn perturbed_params_survive_roundtrip() {
        let dir = tempdir().unwrap();
        let (run_config, mut model) = test_setup();
        let mut rng = rand::thread_rng();
        {
            let mut params = model.params_mut();
            for p in params.iter_mut() {
                let data: Vec<f64> = p.data().iter().map(|&v| v + rng.gen_range(-0.1..0.1)).collect();
                **p = Tensor::from_vec(p.shape().to_vec(), data).unwrap();
            }
        }
        let path = dir.path().join("model.ltc");
        save(&model, &run_config, &path).unwrap();
        let (_, restored): (_, LoTeNetModel<f64>) = load(&path).unwrap();
        assert_eq!(model.params(), restored.params());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempdir().unwrap();
        let (run_config, model) = test_setup();
        let path = dir.path().join("model.ltc");
        save(&model, &run_config, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load::<f64>(&path),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn wrong_version_and_magic_are_rejected() {
        let dir = tempdir().unwrap();
        let (run_config, model) = test_setup();
        let path = dir.path().join("model.ltc");
        save(&model, &run_config, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut versioned = good.clone();
        versioned[4] = 9; // version byte
        let body_len = versioned.len() - 4;
        let crc = crc32fast::hash(&versioned[..body_len]);
        versioned[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(load::<f64>(&path), Err(CheckpointError::Version { got: 9 })));

        let mut magicked = good;
        magicked[0] = b'X';
        let crc = crc32fast::hash(&magicked[..body_len]);
        magicked[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &magicked).unwrap();
        assert!(matches!(load::<f64>(&path), Err(CheckpointError::Magic)));
    }

    #[test]
    fn peek_reads_config_without_building_a_model() {
        let dir = tempdir().unwrap();
        let (run_config, model) = test_setup();
        let path = dir.path().join("model.ltc");
        save(&model, &run_config, &path).unwrap();
        assert_eq!(peek_config(&path).unwrap(), run_config);
    }

    #[test]
    fn f32_model_roundtrips_through_f64_encoding() {
        let dir = tempdir().unwrap();
        let (run_config, _) = test_setup();
        let model = LoTeNetModel::<f32>::new(run_config.model_config().unwrap()).unwrap();
        let path = dir.path().join("model32.ltc");
        save(&model, &run_config, &path).unwrap();
        let (_, restored): (_, LoTeNetModel<f32>) = load(&path).unwrap();
        assert_eq!(model.params(), restored.params());
    }
}
