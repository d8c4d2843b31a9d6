//! PNG image I/O and small raster helpers.
//!
//! Pixels are stored on disk as 8-bit per channel; the in-memory unit is
//! f64 in [0,1]. Quantization is round(v * 255), so files round-trip
//! bit-exactly once a value has been through one write/read cycle.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Write an H x W x 3 image in [0,1] as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if image.shape()[2] != 3 {
        return Err(Error::InvalidShape("expected 3 channels".into()));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(to_u8(image[[y, x, c]]));
            }
        }
    }
    write_png(path, w as u32, h as u32, png::ColorType::Rgb, &buf)
}

/// Write an H x W mask in [0,1] as an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut buf = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            buf.push(to_u8(mask[[y, x]]));
        }
    }
    write_png(path, w as u32, h as u32, png::ColorType::Grayscale, &buf)
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, buf: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w, h);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Other(format!("png header {}: {e}", path.display())))?;
    writer
        .write_image_data(buf)
        .map_err(|e| Error::Other(format!("png data {}: {e}", path.display())))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(Vec<u8>, png::OutputInfo)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Other(format!("png info {}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Other(format!("png frame {}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info))
}

/// Read an 8-bit PNG as an RGB image in [0,1]; grayscale files broadcast.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let (buf, info) = read_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array3::zeros((h, w, 3));
    match info.color_type {
        png::ColorType::Rgb => {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[y, x, c]] = from_u8(buf[(y * w + x) * 3 + c]);
                    }
                }
            }
        }
        png::ColorType::Rgba => {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[y, x, c]] = from_u8(buf[(y * w + x) * 4 + c]);
                    }
                }
            }
        }
        png::ColorType::Grayscale => {
            for y in 0..h {
                for x in 0..w {
                    let v = from_u8(buf[y * w + x]);
                    for c in 0..3 {
                        out[[y, x, c]] = v;
                    }
                }
            }
        }
        other => {
            return Err(Error::Other(format!(
                "unsupported png color type {other:?} in {}",
                path.display()
            )))
        }
    }
    Ok(out)
}

/// Read an 8-bit grayscale PNG as a mask in [0,1]; RGB files average.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let rgb = read_rgb(path)?;
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        (rgb[[y, x, 0]] + rgb[[y, x, 1]] + rgb[[y, x, 2]]) / 3.0
    }))
}

/// Bilinear sample with edge clamping.
pub fn bilinear(image: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (image.shape()[0] as isize, image.shape()[1] as isize);
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |yy: isize, xx: isize| -> f64 {
        let yy = yy.clamp(0, h - 1) as usize;
        let xx = xx.clamp(0, w - 1) as usize;
        image[[yy, xx, c]]
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize to (out_h, out_w).
pub fn resize(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    Array3::from_shape_fn((out_h, out_w, 3), |(y, x, c)| {
        let sy = (y as f64 + 0.5) * h / out_h as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w / out_w as f64 - 0.5;
        bilinear(image, sy, sx, c)
    })
}

/// Center-crop to a square and resize.
pub fn center_crop_resize(image: &Array3<f64>, size: usize) -> Array3<f64> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let cropped = image
        .slice(ndarray::s![y0..y0 + side, x0..x0 + side, ..])
        .to_owned();
    resize(&cropped, size, size)
}

/// Map a scalar in [0,1] to a heat color (dark blue -> red -> yellow).
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (2.0 * v).min(1.0);
    let g = (2.0 * v - 0.8).clamp(0.0, 1.0);
    let b = (0.9 - 1.8 * v).clamp(0.0, 1.0);
    [r, g, b]
}
