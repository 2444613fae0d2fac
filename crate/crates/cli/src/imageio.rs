//! 8-bit PNG reading and writing of `C×H×W` tensors in `[0, 1]`.

use std::path::Path;

use anyhow::{bail, Context};
use image::{GrayImage, RgbImage};
use stegalift::Tensor;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round-trip through 8-bit storage without touching disk.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn save_png(path: &Path, t: &Tensor) -> anyhow::Result<()> {
    let (c, h, w) = t.dims3("save_png")?;
    let d = t.data();
    let px = |ch: usize, y: u32, x: u32| to_u8(d[(ch * h + y as usize) * w + x as usize]);
    let (w32, h32) = (w as u32, h as u32);
    let res = match c {
        1 => GrayImage::from_fn(w32, h32, |x, y| image::Luma([px(0, y, x)])).save(path),
        3 => RgbImage::from_fn(w32, h32, |x, y| image::Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])).save(path),
        _ => bail!("cannot store {c} channels as an image"),
    };
    res.with_context(|| format!("writing image {}", path.display()))
}

pub fn load_png(path: &Path, channels: usize) -> anyhow::Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => bail!("cannot load {channels} channels"),
    };
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * channels + c] as f64 / 255.0
    }))
}
