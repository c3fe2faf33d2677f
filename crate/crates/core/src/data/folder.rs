//! Image folders: one subdirectory per class, any PNG/JPEG/PPM inside.

use std::path::{Path, PathBuf};

use crate::data::{resize_bilinear, DataError, LabeledDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FolderLoad {
    pub dataset: LabeledDataset,
    pub skipped: Vec<SkippedFile>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let rd = std::fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path) -> Result<image::RgbImage, String> {
    let reader = image::io::Reader::open(path).map_err(|e| e.to_string())?;
    let reader = reader.with_guessed_format().map_err(|e| e.to_string())?;
    Ok(reader.decode().map_err(|e| e.to_string())?.to_rgb8())
}

/// Loads every image under `root/<class>/`, converted to RGB and stretched
/// to `height × width` with bilinear resampling.
///
/// Classes are numbered in sorted directory order and files are read in
/// sorted path order. Files that fail to decode are skipped with a warning
/// and reported; a class directory with no usable image is an error.
pub fn load_image_folder(root: &Path, height: usize, width: usize) -> Result<FolderLoad, DataError> {
    if height == 0 || width == 0 {
        return Err(DataError::Invalid("target size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut skipped = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let mut loaded = 0;
        for path in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = match decode(&path) {
                Ok(img) => img,
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    skipped.push(SkippedFile { path, reason });
                    continue;
                }
            };
            let (w, h) = img.dimensions();
            let pixels = img.into_raw().into_iter().map(|p| p as f32 / 255.0).collect();
            let t = Tensor::new(vec![h as usize, w as usize, 3], pixels)?;
            data.extend_from_slice(resize_bilinear(&t, height, width)?.data());
            labels.push(class);
            loaded += 1;
        }
        if loaded == 0 {
            return Err(DataError::EmptyClass(dir.clone()));
        }
    }
    if !skipped.is_empty() {
        log::warn!("{}: skipped {} undecodable files", root.display(), skipped.len());
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, height, width, 3], data)?;
    let source = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into());
    Ok(FolderLoad { dataset: LabeledDataset::new(images, labels, names, source, None)?, skipped })
}
