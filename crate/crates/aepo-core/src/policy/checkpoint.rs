//! Policy checkpoint io.
//!
//! Layout: magic bytes `AEPO`, format version as little-endian u32, the
//! `ModelConfig` as length-prefixed JSON (u32 length), then the parameter
//! values as little-endian 64-bit floats. The value count is implied by the
//! config, so trailing or missing bytes are format errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layout::ParamLayout;
use super::{ModelConfig, PolicyError, PolicyParams, CHECKPOINT_VERSION};

const MAGIC: &[u8; 4] = b"AEPO";

pub fn save_params(path: &Path, params: &PolicyParams) -> Result<(), PolicyError> {
    let layout = ParamLayout::of(&params.config);
    if params.values.len() != layout.total {
        return Err(PolicyError::ParamLengthMismatch {
            got: params.values.len(),
            want: layout.total,
        });
    }
    let config_json = serde_json::to_vec(&params.config)
        .map_err(|e| PolicyError::BadCheckpoint(format!("config serialization: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&params.version.to_le_bytes())?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PolicyError::BadCheckpoint(format!(
            "bad magic bytes {magic:?}"
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::BadCheckpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let json_len = u32::from_le_bytes(word) as usize;
    let mut config_json = vec![0u8; json_len];
    r.read_exact(&mut config_json)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| PolicyError::BadCheckpoint(format!("config parse: {e}")))?;
    config.validate()?;

    let expected = ParamLayout::of(&config).total;
    let mut values = Vec::with_capacity(expected);
    let mut buf = [0u8; 8];
    for _ in 0..expected {
        r.read_exact(&mut buf).map_err(|_| {
            PolicyError::BadCheckpoint(format!(
                "truncated values: expected {expected} floats"
            ))
        })?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(PolicyError::BadCheckpoint("non-finite parameter".into()));
        }
        values.push(v);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(PolicyError::BadCheckpoint("trailing bytes".into()));
    }
    Ok(PolicyParams {
        config,
        version,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, Arch};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            context_len: 16,
            hidden_dim: 4,
            n_layers: 1,
            arch: Arch::TinyAttention,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let params = init_params(&cfg(), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params.values, loaded.values);
        assert_eq!(params.config, loaded.config);
        assert_eq!(params.version, loaded.version);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let params = init_params(&cfg(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_params(&path, &params).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(PolicyError::BadCheckpoint(_))
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_params(&path),
            Err(PolicyError::BadCheckpoint(_))
        ));
    }
}
