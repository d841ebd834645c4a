//! Image loading and conversion to network input tensors.

use std::path::Path;
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;

use crate::error::{LookError, Result};

/// A decoded image together with the reference it was loaded from.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub id: String,
    pub pixels: Arc<RgbImage>,
}

impl LoadedImage {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Self {
        LoadedImage {
            id: id.into(),
            pixels: Arc::new(pixels),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(LoadedImage::new(path.display().to_string(), load_image(path)?))
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| LookError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn decode_image_bytes(id: &str, bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| LookError::Decode {
            path: id.to_string(),
            reason: e.to_string(),
        })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LookError::io(parent, e))?;
    }
    img.save(path).map_err(|e| LookError::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Resize to `height x width` and map pixels to roughly zero-mean, unit-range CHW floats.
pub fn to_chw(img: &RgbImage, height: usize, width: usize) -> Array3<f32> {
    let resized;
    let src = if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        resized = imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
        &resized
    };
    Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let v = src.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
        (v - 0.5) * 4.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_range_and_shape() {
        let mut img = RgbImage::new(4, 2);
        img.put_pixel(0, 0, image::Rgb([255, 0, 128]));
        let t = to_chw(&img, 2, 4);
        assert_eq!(t.dim(), (3, 2, 4));
        assert_eq!(t[[0, 0, 0]], 2.0);
        assert_eq!(t[[1, 0, 0]], -2.0);
        assert_eq!(to_chw(&img, 8, 8).dim(), (3, 8, 8));
    }

    #[test]
    fn undecodable_bytes_error() {
        assert!(matches!(
            decode_image_bytes("x", b"not an image"),
            Err(LookError::Decode { .. })
        ));
    }
}
