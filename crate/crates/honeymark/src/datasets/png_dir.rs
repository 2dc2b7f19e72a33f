//! PNG class-directory ingestion: `root/<class_name>/<file>.png`.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, ImageSample, Shape};

/// Loads a directory of per-class PNG folders. Class names are sorted
/// lexicographically and assigned indices 0..K-1; sample ids are
/// `<class>/<file-stem>`. All images must share dimensions and color kind.
pub fn load_png_dir(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Format {
            field: "root".into(),
            detail: format!("{} is not a directory", root.display()),
        });
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    if class_dirs.len() < 2 {
        return Err(Error::Format {
            field: "root".into(),
            detail: format!("need >= 2 class directories, found {}", class_dirs.len()),
        });
    }

    let mut samples = Vec::new();
    let mut shape: Option<Shape> = None;
    for (label, (class_name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .map(|x| x.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format {
                field: format!("class {class_name}"),
                detail: "empty class directory".into(),
            });
        }
        for file in files {
            let img = image::open(&file).map_err(|e| Error::Format {
                field: file.display().to_string(),
                detail: format!("unreadable image: {e}"),
            })?;
            let channels = if img.color().has_color() { 3 } else { 1 };
            let this_shape = Shape::new(channels, img.height() as usize, img.width() as usize);
            match shape {
                None => shape = Some(this_shape),
                Some(s) if s != this_shape => {
                    return Err(Error::Format {
                        field: file.display().to_string(),
                        detail: format!("shape {this_shape} differs from {s}"),
                    });
                }
                _ => {}
            }
            // Planar (c, y, x) layout from the interleaved 8-bit buffer.
            let (h, w) = (this_shape.height, this_shape.width);
            let mut pixels = vec![0.0; this_shape.len()];
            if channels == 3 {
                let rgb = img.to_rgb8();
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        pixels[(c * h + y as usize) * w + x as usize] =
                            f64::from(p.0[c]) / 255.0;
                    }
                }
            } else {
                let luma = img.to_luma8();
                for (x, y, p) in luma.enumerate_pixels() {
                    pixels[y as usize * w + x as usize] = f64::from(p.0[0]) / 255.0;
                }
            }
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(ImageSample::new(
                format!("{class_name}/{stem}"),
                this_shape,
                pixels,
                label,
            )?);
        }
    }

    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png".into());
    Dataset::new(name, class_dirs.len(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, side: u32, value: u8) {
        let img = image::GrayImage::from_pixel(side, side, image::Luma([value]));
        img.save(path).unwrap();
    }

    #[test]
    fn classes_sort_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("dog")).unwrap();
        std::fs::create_dir(dir.path().join("cat")).unwrap();
        write_png(&dir.path().join("dog/a.png"), 4, 255);
        write_png(&dir.path().join("cat/b.png"), 4, 0);
        let data = load_png_dir(dir.path()).unwrap();
        assert_eq!(data.num_classes, 2);
        let cat = data.get("cat/b").unwrap();
        let dog = data.get("dog/a").unwrap();
        assert_eq!(cat.label, 0);
        assert_eq!(dog.label, 1);
        assert_eq!(cat.pixels[0], 0.0);
        assert_eq!(dog.pixels[0], 1.0);
    }

    #[test]
    fn empty_class_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::create_dir(dir.path().join("b")).unwrap();
        write_png(&dir.path().join("a/x.png"), 4, 10);
        let err = load_png_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty class directory"), "{err}");
    }

    #[test]
    fn mixed_dimensions_fail() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::create_dir(dir.path().join("b")).unwrap();
        write_png(&dir.path().join("a/x.png"), 4, 10);
        write_png(&dir.path().join("b/y.png"), 5, 10);
        let err = load_png_dir(dir.path()).unwrap_err();
        assert!(err.to_string().contains("differs from"), "{err}");
    }

    #[test]
    fn single_class_fails() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("only")).unwrap();
        write_png(&dir.path().join("only/x.png"), 4, 10);
        assert!(load_png_dir(dir.path()).is_err());
    }
}
