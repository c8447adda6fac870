//! 8-bit PNG load/save. Pixel values map linearly to `[0, 1]`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::fourier::Field;

/// Decodes a PNG as a 3-channel field. Grayscale inputs are replicated.
pub fn load_png(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Field::from_fn(h, w, 3, |y, x, c| raw[(y * w + x) * 3 + c] as f64 / 255.0)
}

/// Quantizes a field to 8 bits with round-to-nearest after clamping to
/// `[0, 1]`, then writes it as RGB (3 channels) or grayscale (1 channel).
pub fn save_png(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = field.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if c == 1 {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([q(field.get(y as usize, x as usize, 0))])
        });
        img.save_with_format(path, image::ImageFormat::Png).map_err(err)
    } else {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            image::Rgb([q(field.get(y, x, 0)), q(field.get(y, x, 1)), q(field.get(y, x, 2))])
        });
        img.save_with_format(path, image::ImageFormat::Png).map_err(err)
    }
}

/// Rounds a field to the 8-bit grid that [`save_png`] would store.
pub fn quantize(field: &Field) -> Field {
    field.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
