pub mod detect_eval;
pub mod manifest;
pub mod pnm;
pub mod pose_eval;
pub mod reports;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use manifest::{load_manifest, save_manifest, DatasetManifest};
use pnm::{read_image, write_image, ImageBuffer};

/// Name of the manifest inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `dir/manifest.jsonl` and every image at its manifest path.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, images: &[ImageBuffer]) -> Result<()> {
    if images.len() != manifest.records.len() {
        return Err(Error::InvalidInput(format!("{} images for {} records", images.len(), manifest.records.len())));
    }
    for (r, img) in manifest.records.iter().zip(images) {
        let path = dir.join(&r.image_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_image(img, &path)?;
    }
    save_manifest(manifest, &dir.join(MANIFEST_FILE))
}

/// Loads a manifest and its images; paths resolve against the manifest's
/// directory. Image sizes must match the records.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<ImageBuffer>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = manifest
        .records
        .iter()
        .map(|r| {
            let img = read_image(&base.join(&r.image_path))
                .map_err(|e| Error::Format(format!("{}: {e}", r.image_path)))?;
            if [img.width, img.height] != r.resolution {
                return Err(Error::Format(format!(
                    "{}: image is {}x{}, manifest says {}x{}",
                    r.image_path, img.width, img.height, r.resolution[0], r.resolution[1]
                )));
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, images))
}
