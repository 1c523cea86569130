//! PNG reading and writing plus the small figures the CLI emits.

use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb};
use moe_edit_core::diffusion::{AttentionHeatmap, ImageTensor};
use moe_edit_core::training::LossRecord;

use crate::error::{CliError, CliResult};

type Rgb16 = ImageBuffer<Rgb<u16>, Vec<u16>>;

fn to_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

fn from_u16(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

pub fn to_buffer(img: &ImageTensor) -> Rgb16 {
    ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        Rgb(img.pixel(y as usize, x as usize).map(to_u16))
    })
}

pub fn from_buffer(buf: &Rgb16) -> ImageTensor {
    ImageTensor::from_fn(buf.height() as usize, buf.width() as usize, |c, y, x| {
        from_u16(buf.get_pixel(x as u32, y as u32).0[c])
    })
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

/// 16-bit RGB PNG.
pub fn save_png(path: &Path, img: &ImageTensor) -> CliResult<()> {
    ensure_parent(path)?;
    to_buffer(img).save(path).map_err(|e| CliError::io(path, e))
}

/// Any PNG, converted to RGB; resized to `side × side` when given.
pub fn load_png(path: &Path, side: Option<usize>) -> CliResult<ImageTensor> {
    let dynamic = image::open(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = dynamic.into_rgb16();
    if let Some(s) = side {
        if buf.width() as usize != s || buf.height() as usize != s {
            buf = imageops::resize(&buf, s as u32, s as u32, imageops::FilterType::Triangle);
        }
    }
    Ok(from_buffer(&buf))
}

/// Images laid out left to right, each upscaled by `zoom`, with a one-pixel
/// gap.
pub fn save_row(path: &Path, images: &[ImageTensor], zoom: u32) -> CliResult<()> {
    let Some(first) = images.first() else {
        return Err(CliError::pipeline("no images to lay out"));
    };
    let (w, h) = (first.width() as u32 * zoom, first.height() as u32 * zoom);
    let mut canvas: Rgb16 = ImageBuffer::from_pixel((w + 1) * images.len() as u32 - 1, h, Rgb([65535; 3]));
    for (i, img) in images.iter().enumerate() {
        let tile = imageops::resize(&to_buffer(img), w, h, imageops::FilterType::Nearest);
        imageops::replace(&mut canvas, &tile, (i as u32 * (w + 1)) as i64, 0);
    }
    ensure_parent(path)?;
    canvas.save(path).map_err(|e| CliError::io(path, e))
}

/// One grayscale tile per token.
pub fn save_heatmap(path: &Path, heatmap: &AttentionHeatmap, zoom: u32) -> CliResult<()> {
    let (w, h) = (heatmap.width as u32, heatmap.height as u32);
    let tiles = heatmap.tokens as u32;
    let mut canvas: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel((w * zoom + 1) * tiles - 1, h * zoom, Luma([255]));
    for t in 0..heatmap.tokens {
        let map = heatmap.map(t);
        let peak = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                let v = map[(y / zoom * w + x / zoom) as usize] / peak;
                canvas.put_pixel(t as u32 * (w * zoom + 1) + x, y, Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    ensure_parent(path)?;
    canvas.save(path).map_err(|e| CliError::io(path, e))
}

/// Total loss against step on a fixed canvas, min-max scaled.
pub fn save_loss_plot(path: &Path, curve: &[LossRecord]) -> CliResult<()> {
    const W: u32 = 320;
    const H: u32 = 160;
    let mut canvas: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(W, H, Luma([255]));
    if !curve.is_empty() {
        let (lo, hi) = curve
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r.total), h.max(r.total)));
        let span = (hi - lo).max(1e-12);
        let mut prev: Option<(i64, i64)> = None;
        for (i, r) in curve.iter().enumerate() {
            let x = if curve.len() == 1 {
                0
            } else {
                (i as f64 / (curve.len() - 1) as f64 * (W - 1) as f64).round() as i64
            };
            let y = ((1.0 - (r.total - lo) / span) * (H - 1) as f64).round() as i64;
            if let Some((px, py)) = prev {
                let steps = (x - px).abs().max((y - py).abs()).max(1);
                for k in 0..=steps {
                    let xi = px + (x - px) * k / steps;
                    let yi = py + (y - py) * k / steps;
                    canvas.put_pixel(xi as u32, yi as u32, Luma([0]));
                }
            } else {
                canvas.put_pixel(x as u32, y as u32, Luma([0]));
            }
            prev = Some((x, y));
        }
    }
    ensure_parent(path)?;
    canvas.save(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 8.0 - 1.0);
        let path = dir.path().join("a.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path, None).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()).unwrap() <= 1.0 / 65535.0);
        // a second pass is exact
        save_png(&path, &back).unwrap();
        assert_eq!(load_png(&path, None).unwrap(), back);
        assert_eq!(load_png(&path, Some(4)).unwrap().height(), 4);
    }
}
