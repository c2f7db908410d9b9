//! 8-bit PNG frames and masks. Values map linearly: `v = byte / 255`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use shadowflow_core::{Shape, Tensor4};

use crate::error::{Error, Result};
use crate::fsutil;

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn load(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fsutil::read(path)?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// `(1, 3, H, W)` in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor4> {
    let img = load(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// `(1, 1, H, W)` with 1 where the grey level is at least 128.
pub fn read_mask(path: &Path) -> Result<Tensor4> {
    let img = load(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor4::from_vec(Shape::new(1, 1, h, w), data)?)
}

fn encode(img: impl Into<image::DynamicImage>, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.into()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(buf.into_inner())
}

pub fn write_rgb(path: &Path, t: &Tensor4) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Usage(format!("{}: expected an RGB tensor, got {s}", path.display())));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_byte(t.at(0, c, y as usize, x as usize))))
    });
    fsutil::write_atomic(path, &encode(img, path)?)
}

/// Writes channel 0 of `t` as greyscale.
pub fn write_gray(path: &Path, t: &Tensor4) -> Result<()> {
    let s = t.shape();
    let img = GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| image::Luma([to_byte(t.at(0, 0, y as usize, x as usize))]));
    fsutil::write_atomic(path, &encode(img, path)?)
}
