//! Dataset manifest persistence: a JSON index plus a companion
//! little-endian binary64 pixel payload. Round-trips are bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, ImageSample, Shape};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: usize,
    pixel_file: String,
    /// Byte offset of this sample's pixels within the payload file.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    num_classes: usize,
    shape: Shape,
    samples: Vec<ManifestEntry>,
}

fn payload_name(json_path: &Path) -> String {
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    format!("{stem}.bin")
}

/// Writes `<path>` (JSON index) and a sibling `.bin` pixel payload.
pub fn save_manifest(data: &Dataset, json_path: &Path) -> Result<()> {
    let pixel_file = payload_name(json_path);
    let bin_path = json_path.with_file_name(&pixel_file);
    let sample_bytes = (data.shape().len() * 8) as u64;

    let mut bin = BufWriter::new(File::create(&bin_path)?);
    let mut entries = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        for p in &s.pixels {
            bin.write_all(&p.to_le_bytes())?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            label: s.label,
            pixel_file: pixel_file.clone(),
            offset: i as u64 * sample_bytes,
        });
    }
    bin.flush()?;

    let manifest = Manifest {
        name: data.name.clone(),
        num_classes: data.num_classes,
        shape: data.shape(),
        samples: entries,
    };
    let mut out = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut out, &manifest)?;
    out.flush()?;
    Ok(())
}

/// Loads a dataset previously written by [`save_manifest`].
pub fn load_manifest(json_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(json_path)?))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let pixel_len = manifest.shape.len();

    // The payload is read sequentially; entries index it by byte offset.
    let mut payloads: std::collections::HashMap<PathBuf, Vec<u8>> = std::collections::HashMap::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let bin_path = dir.join(&entry.pixel_file);
        if !payloads.contains_key(&bin_path) {
            let mut buf = Vec::new();
            BufReader::new(File::open(&bin_path)?).read_to_end(&mut buf)?;
            payloads.insert(bin_path.clone(), buf);
        }
        let buf = &payloads[&bin_path];
        let start = entry.offset as usize;
        let end = start + pixel_len * 8;
        if end > buf.len() {
            return Err(Error::Format {
                field: format!("sample {}", entry.id),
                detail: format!(
                    "pixel payload truncated: need {end} bytes, file has {}",
                    buf.len()
                ),
            });
        }
        let pixels: Vec<f64> = buf[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(ImageSample::new(
            entry.id.clone(),
            manifest.shape,
            pixels,
            entry.label,
        )?);
    }
    Dataset::new(manifest.name, manifest.num_classes, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSpec};

    #[test]
    fn round_trip_is_bitwise_identity() {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 10,
            image_side: 6,
            class_separation: 1.5,
            noise_sigma: 0.2,
        };
        let data = generate_synthetic(&spec, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        save_manifest(&data, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(data, loaded);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 3,
            image_side: 4,
            class_separation: 1.0,
            noise_sigma: 0.0,
        };
        let data = generate_synthetic(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        save_manifest(&data, &path).unwrap();
        let bin = dir.path().join("data.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
