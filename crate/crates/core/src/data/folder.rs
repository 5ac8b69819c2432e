use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;

use super::ImageSample;
use crate::error::{Error, Result};
use crate::grid::Grid;

const IMAGES: &str = "images";
const MASKS: &str = "masks";
const MASK_THRESHOLD: u8 = 127;

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Ok(BTreeSet::new());
    }
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// Load `<root>/images/*.png` paired by name with `<root>/masks/*.png`, in
/// lexicographic order. Masks are binarized at > 127.
pub fn load_folder_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    let (img_dir, mask_dir) = (root.join(IMAGES), root.join(MASKS));
    let images = png_names(&img_dir)?;
    let masks = png_names(&mask_dir)?;
    if let Some(orphan) = images.symmetric_difference(&masks).next() {
        let path: PathBuf = if images.contains(orphan) {
            img_dir.join(orphan)
        } else {
            mask_dir.join(orphan)
        };
        return Err(Error::Orphan(path));
    }
    if images.is_empty() {
        log::warn!("no image/mask pairs under {}", root.display());
        return Ok(Vec::new());
    }
    images
        .iter()
        .map(|name| {
            let img = load_gray(&img_dir.join(name))?;
            let mask = load_gray(&mask_dir.join(name))?;
            if img.dimensions() != mask.dimensions() {
                return Err(Error::shape(format!(
                    "{name}: image {:?} vs mask {:?}",
                    img.dimensions(),
                    mask.dimensions()
                )));
            }
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(ImageSample {
                image: Grid::from_vec(h, w, img.pixels().map(|p| p.0[0] as f32).collect())?,
                mask: Grid::from_vec(h, w, mask.pixels().map(|p| (p.0[0] > MASK_THRESHOLD) as u8).collect())?,
                crack: None,
            })
        })
        .collect()
}

/// Write samples as `images/NNNNN.png` and `masks/NNNNN.png` (mask 0/255).
pub fn export_folder_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    let (img_dir, mask_dir) = (root.join(IMAGES), root.join(MASKS));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = (s.image.width as u32, s.image.height as u32);
        let name = format!("{i:05}.png");
        let img = GrayImage::from_raw(w, h, s.image.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
            .ok_or_else(|| Error::shape("image buffer size"))?;
        let mask = GrayImage::from_raw(w, h, s.mask.data.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect())
            .ok_or_else(|| Error::shape("mask buffer size"))?;
        img.save(img_dir.join(&name))?;
        mask.save(mask_dir.join(&name))?;
    }
    Ok(())
}
