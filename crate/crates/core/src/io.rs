//! PNG/JPEG decoding into `[0, 1]` feature maps and PNG encoding back.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Element, FeatureMap};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn image_error(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Decodes any supported image as 8-bit RGB scaled by `1/255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| image_error(path, e))?;
    Ok(from_rgb(&decoded.to_rgb8()))
}

pub fn from_rgb(img: &RgbImage) -> FeatureMap<f32> {
    let (w, h) = img.dimensions();
    FeatureMap::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
pub fn to_rgb<T: Element>(map: &FeatureMap<T>) -> Result<RgbImage> {
    if map.channels() != 3 {
        return Err(Error::contract(format!(
            "RGB encoding needs 3 channels, got {}",
            map.channels()
        )));
    }
    let (h, w) = (map.height(), map.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| quantize(map.get(c, y, x).as_f64()));
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png<T: Element>(map: &FeatureMap<T>) -> Result<Vec<u8>> {
    let img = to_rgb(map)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::contract(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png<T: Element>(path: impl AsRef<Path>, map: &FeatureMap<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(map)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}
