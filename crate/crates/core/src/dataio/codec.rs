//! PNG encoding of images and mattes.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::{AlphaMatte, Image};
use crate::error::Result;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn rgb_buffer(img: &Image) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| to_u8(img[[c, y as usize, x as usize]]);
        Rgb([px(0), px(1), px(2)])
    })
}

fn image_from(img: DynamicImage) -> Image {
    let img = img.into_rgb8();
    let (w, h) = img.dimensions();
    Image::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

/// Any grey or colour depth is read through its luminance at 16 bits.
fn alpha_from(img: DynamicImage) -> AlphaMatte {
    let img = img.into_luma16();
    let (w, h) = img.dimensions();
    AlphaMatte::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0)
}

/// 8-bit RGB PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    rgb_buffer(img).save(path)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    Ok(image_from(image::open(path)?))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    Ok(image_from(image::load_from_memory(bytes)?))
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    rgb_buffer(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// 16-bit grey PNG.
pub fn save_alpha(a: &AlphaMatte, path: &Path) -> Result<()> {
    let (h, w) = a.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(a[[y as usize, x as usize]])]));
    buf.save(path)?;
    Ok(())
}

pub fn load_alpha(path: &Path) -> Result<AlphaMatte> {
    Ok(alpha_from(image::open(path)?))
}

pub fn decode_alpha(bytes: &[u8]) -> Result<AlphaMatte> {
    Ok(alpha_from(image::load_from_memory(bytes)?))
}

/// 8-bit grey PNG.
pub fn encode_alpha8(a: &AlphaMatte) -> Result<Vec<u8>> {
    let (h, w) = a.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(a[[y as usize, x as usize]])]));
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
