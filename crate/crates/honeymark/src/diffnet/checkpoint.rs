//! Checkpoint persistence.
//!
//! Layout: magic `HIMG` (4 bytes), u16 LE version, u32 LE length-prefixed
//! UTF-8 JSON arch descriptor, u64 LE parameter count, parameters as
//! little-endian IEEE-754 binary64. The init seed is not persisted;
//! loaded models report `rng_seed_of_init = 0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchDescriptor, Classifier};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HIMG";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let arch_json = serde_json::to_vec(&model.arch)?;
    out.write_all(&(arch_json.len() as u32).to_le_bytes())?;
    out.write_all(&arch_json)?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for p in &model.params {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        Error::CorruptCheckpoint(format!("truncated while reading {what}: {e}"))
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let mut version = [0u8; 2];
    read_exact(&mut reader, &mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut len = [0u8; 4];
    read_exact(&mut reader, &mut len, "arch length")?;
    let mut arch_json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut reader, &mut arch_json, "arch descriptor")?;
    let arch: ArchDescriptor = serde_json::from_slice(&arch_json)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad arch descriptor: {e}")))?;
    arch.validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("invalid arch: {e}")))?;

    let mut count = [0u8; 8];
    read_exact(&mut reader, &mut count, "parameter count")?;
    let count = u64::from_le_bytes(count) as usize;
    if count != arch.param_count() {
        return Err(Error::CorruptCheckpoint(format!(
            "parameter count {count} does not match arch ({})",
            arch.param_count()
        )));
    }
    let mut bytes = vec![0u8; count * 8];
    read_exact(&mut reader, &mut bytes, "parameters")?;
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::CorruptCheckpoint(
            "non-finite parameter values".into(),
        ));
    }
    Ok(Classifier {
        arch,
        params,
        rng_seed_of_init: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Shape;

    fn sample_model() -> Classifier {
        let arch = ArchDescriptor::mlp(Shape::new(1, 3, 3), vec![5], 4).unwrap();
        Classifier::init(arch, 99).unwrap()
    }

    #[test]
    fn round_trip_preserves_arch_and_params() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch, model.arch);
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn future_version_is_unsupported() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::UnsupportedVersion {
                found: 2,
                supported: 1
            })
        ));
    }

    #[test]
    fn truncation_is_corrupt() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
