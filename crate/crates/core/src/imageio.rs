//! Conversions between image files and `[C, H, W]` tensors in `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, DynamicImage, ImageFormat, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Center-crops to a square and resizes to `size x size`.
pub fn to_tensor(img: &DynamicImage, size: i64) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let rgb = if side as i64 == size {
        cropped.to_rgb8()
    } else {
        cropped
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8()
    };
    let raw = rgb.into_raw();
    Tensor::from_slice(&raw)
        .view([size, size, 3])
        .permute([2, 0, 1])
        .to_kind(Kind::Float)
        / 127.5
        - 1.0
}

pub fn load_image(path: &Path, size: i64) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(to_tensor(&img, size))
}

pub fn decode_png(bytes: &[u8], size: i64) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?;
    Ok(to_tensor(&img, size))
}

/// Quantises a `[3, H, W]` tensor in `[-1, 1]` to 8-bit RGB.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let size = t.size();
    if size.len() != 3 || size[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W] image, got {size:?}")));
    }
    let bytes = ((t.detach().clamp(-1.0, 1.0) + 1.0) * 127.5)
        .round()
        .to_kind(Kind::Uint8)
        .permute([1, 2, 0])
        .contiguous()
        .view(-1);
    let raw: Vec<u8> = Vec::try_from(&bytes).map_err(Error::Torch)?;
    RgbImage::from_raw(size[2] as u32, size[1] as u32, raw)
        .ok_or_else(|| Error::Shape("pixel buffer does not match image size".into()))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb(t)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    to_rgb(t)?.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Places `[3, H, W]` frames side by side.
pub fn strip(frames: &[Tensor]) -> Tensor {
    Tensor::cat(frames, 2)
}
