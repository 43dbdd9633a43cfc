//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "FDRLCKPT"
//! version    u32
//! config_len u32, then config_len bytes of UTF-8 TOML (the training config echo)
//! count      u32
//! count × { name_len u32, name bytes, rows u32, cols u32, rows·cols × f64 }
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::FdrlModel;
use crate::config::TrainConfig;
use crate::diffcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint config block is invalid: {0}")]
    Config(String),
    #[error("checkpoint lacks tensor '{0}'")]
    Missing(String),
    #[error("checkpoint tensor '{0}' is not part of the model")]
    Unexpected(String),
    #[error("checkpoint tensor '{name}' is {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

/// Trained parameters together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: FdrlModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = self.config.to_toml();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.model.store.len() as u32).to_le_bytes());
        for (name, t) in self.model.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_len = read_u32(&mut r, "config length")? as usize;
        let mut config = vec![0u8; config_len];
        read_exact(&mut r, &mut config, "config")?;
        let config = String::from_utf8(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let config = TrainConfig::from_toml(&config).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut model =
            FdrlModel::new(&config.model, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;

        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut seen = vec![false; model.store.len()];
        for _ in 0..count {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8_lossy(&name).into_owned();
            let rows = read_u32(&mut r, "tensor rows")? as usize;
            let cols = read_u32(&mut r, "tensor cols")? as usize;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| CheckpointError::Unexpected(name.clone()))?;
            let expected = model.store.get(id).shape();
            if expected != (rows, cols) {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: (rows, cols),
                });
            }
            let mut buf = vec![0u8; rows * cols * 8];
            read_exact(&mut r, &mut buf, "tensor values")?;
            let values = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            *model.store.get_mut(id) = Tensor::new(rows, cols, values).expect("shape checked");
            seen[id.0] = true;
        }
        if let Some(missing) = model.store.ids().find(|id| !seen[id.0]) {
            return Err(CheckpointError::Missing(model.store.name(missing).to_string()));
        }
        Ok(Checkpoint { config, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Checkpoint::from_reader(bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model = ModelConfig {
            d_in: 6,
            d: 4,
            hidden: 5,
            classes: 3,
            heads: 2,
        };
        let model = FdrlModel::new(&config.model, 42).unwrap();
        Checkpoint { config, model }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_reader(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_reader(bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_reader(bad.as_slice()),
            Err(CheckpointError::Version(9))
        ));
        assert!(matches!(
            Checkpoint::from_reader(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(
            Checkpoint::from_reader(&bytes[..5]),
            Err(CheckpointError::Truncated("magic"))
        ));
    }
}
