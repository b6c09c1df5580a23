use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use super::ImageSet;
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Sorted listing of `root/split/<class>/<image>`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub class_names: Vec<String>,
    pub entries: Vec<(PathBuf, usize)>,
    pub image_size: usize,
    /// SHA-256 over relative paths, labels and file contents.
    pub checksum: String,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Indexes one split. Class labels follow the sorted class directory names.
pub fn load_directory_dataset(root: impl AsRef<Path>, split: &str, image_size: usize) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    let mut hasher = Sha256::new();
    for class_dir in sorted_dir(&dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let label = class_names.len();
        let files: Vec<PathBuf> =
            sorted_dir(&class_dir)?.into_iter().filter(|p| p.is_file() && has_image_extension(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class `{name}` in {} has no images", dir.display())));
        }
        for f in files {
            let rel = f.strip_prefix(&dir).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update((label as u64).to_le_bytes());
            hasher.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
            entries.push((f, label));
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", dir.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split: split.to_string(),
        class_names,
        entries,
        image_size,
        checksum: hex::encode(hasher.finalize()),
    })
}

/// Decodes to RGB `[3, size, size]` in `[0, 1]`; grayscale is replicated and
/// other sizes are resampled.
pub fn decode_image(path: impl AsRef<Path>, size: usize) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(Array3::from_shape_fn((3, size, size), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

/// Decodes to RGB `[3, H, W]` in `[0, 1]` at the stored size.
pub fn read_image(path: impl AsRef<Path>) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let rgb = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

/// Writes `[3, H, W]` pixels in `[0, 1]` as 8-bit RGB; the format follows
/// the extension.
pub fn save_image(path: impl AsRef<Path>, image: &Array3<f32>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|ch| (image[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every entry. Unreadable files are skipped with a warning and
    /// counted in the second return value.
    pub fn load(&self) -> Result<(ImageSet, usize)> {
        let mut set = ImageSet { class_names: self.class_names.clone(), ..Default::default() };
        let mut skipped = 0;
        for (path, label) in &self.entries {
            match decode_image(path, self.image_size) {
                Ok(img) => {
                    set.images.push(img);
                    set.labels.push(*label);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if set.is_empty() {
            return Err(Error::Dataset(format!("no readable images in {}", self.root.join(&self.split).display())));
        }
        Ok((set, skipped))
    }
}
