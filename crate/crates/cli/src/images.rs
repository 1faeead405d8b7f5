//! PNG sequences in, PNG and raw f32 out.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvs_deblur::sensor::Frame;
use image::{ImageBuffer, Rgb};

/// Inverse of the sRGB transfer curve.
fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Reads an 8- or 16-bit PNG (gray or colour) into a linear RGB frame in `[0, 1]`.
pub fn read_png(path: &Path, srgb_decode: bool) -> Result<Frame> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = img.into_rgb32f();
    let (w, h) = rgb.dimensions();
    let mut data = rgb.into_raw();
    if srgb_decode {
        data.iter_mut().for_each(|v| *v = srgb_to_linear(*v));
    }
    Ok(Frame::from_clamped(h as usize, w as usize, 3, data)?)
}

/// PNG files directly inside `dir`, ordered by the first run of digits in their names.
pub fn numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let digits: String = stem.chars().skip_while(|c| !c.is_ascii_digit()).take_while(|c| c.is_ascii_digit()).collect();
            let Ok(index) = digits.parse() else {
                bail!("{} has no frame number", path.display());
            };
            files.push((index, path));
        }
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

pub fn read_sequence(dir: &Path, srgb_decode: bool) -> Result<Vec<Frame>> {
    let frames = numbered_pngs(dir)?.iter().map(|p| read_png(p, srgb_decode)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = frames.first() {
        if frames.iter().any(|f| !f.same_extent(first)) {
            bail!("{}: frames differ in size", dir.display());
        }
    }
    Ok(frames)
}

/// Writes an 8-bit RGB PNG; gray frames are replicated.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let rgb = frame.to_rgb();
    let bytes: Vec<u8> = rgb.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(rgb.width() as u32, rgb.height() as u32, bytes).context("image buffer")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Little-endian f32 values in channel-last order.
pub fn write_raw(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes `<stem>.png` and `<stem>.f32` into `dir`.
pub fn write_both(dir: &Path, stem: &str, frame: &Frame) -> Result<Vec<PathBuf>> {
    let png = dir.join(format!("{stem}.png"));
    let raw = dir.join(format!("{stem}.f32"));
    write_png(&png, frame)?;
    write_raw(&raw, frame)?;
    Ok(vec![png, raw])
}
