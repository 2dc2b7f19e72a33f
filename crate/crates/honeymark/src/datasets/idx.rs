//! IDX (MNIST-style) file ingestion.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, ImageSample, Shape};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read, field: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| Error::Format {
        field: field.to_string(),
        detail: format!("truncated while reading u32: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair into a dataset. Pixels are scaled
/// from bytes to [0, 1] by /255; `num_classes` is the largest label + 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut images, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images magic".into(),
            detail: format!("expected {IMAGES_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let count = read_u32_be(&mut images, "images count")? as usize;
    let rows = read_u32_be(&mut images, "images rows")? as usize;
    let cols = read_u32_be(&mut images, "images cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            field: "images dimensions".into(),
            detail: format!("degenerate {rows}x{cols}"),
        });
    }
    let mut pixel_bytes = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixel_bytes)
        .map_err(|e| Error::Format {
            field: "images payload".into(),
            detail: format!("truncated: {e}"),
        })?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut labels, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels magic".into(),
            detail: format!("expected {LABELS_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let label_count = read_u32_be(&mut labels, "labels count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            field: "labels count".into(),
            detail: format!("{label_count} labels for {count} images"),
        });
    }
    let mut label_bytes = vec![0u8; label_count];
    labels
        .read_exact(&mut label_bytes)
        .map_err(|e| Error::Format {
            field: "labels payload".into(),
            detail: format!("truncated: {e}"),
        })?;

    let num_classes = usize::from(*label_bytes.iter().max().unwrap_or(&0)) + 1;
    let shape = Shape::new(1, rows, cols);
    let samples = pixel_bytes
        .chunks_exact(rows * cols)
        .zip(&label_bytes)
        .enumerate()
        .map(|(i, (chunk, label))| {
            let pixels = chunk.iter().map(|b| f64::from(*b) / 255.0).collect();
            ImageSample::new(format!("idx{i:05}"), shape, pixels, usize::from(*label))
        })
        .collect::<Result<Vec<_>>>()?;

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, num_classes.max(2), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(
        dir: &Path,
        count: u32,
        rows: u32,
        cols: u32,
        pixels: &[u8],
        labels: &[u8],
        images_magic: u32,
        truncate_labels: bool,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let images_path = dir.join("imgs.idx");
        let labels_path = dir.join("lbls.idx");
        let mut f = File::create(&images_path).unwrap();
        f.write_all(&images_magic.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = File::create(&labels_path).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        let label_count = if truncate_labels { count - 1 } else { count };
        f.write_all(&label_count.to_be_bytes()).unwrap();
        f.write_all(&labels[..label_count as usize]).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn bytes_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8, 255, 128, 64, 0, 255, 1, 254];
        let labels = [0u8, 1];
        let (ip, lp) = write_idx(dir.path(), 2, 2, 2, &pixels, &labels, IMAGES_MAGIC, false);
        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.samples[0].pixels[0], 0.0);
        assert_eq!(data.samples[0].pixels[1], 1.0);
        assert_eq!(data.samples[1].pixels[1], 1.0);
        assert_eq!(data.samples[0].label, 0);
        assert_eq!(data.samples[1].label, 1);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 1, 1, 1, &[7], &[0], 0xdead_beef, false);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("images magic"), "{err}");
    }

    #[test]
    fn short_label_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 2, 1, 1, &[7, 8], &[0, 1], IMAGES_MAGIC, true);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("labels count"), "{err}");
    }
}
