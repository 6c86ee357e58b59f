//! PNG and CSV renderings of images, grids and attribution maps.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{file_err, shape_err, Result};

/// Intensity in `[0, 1]` to an 8-bit gray level (rounded, clamped).
pub fn gray_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(values: &[f64], shape: (usize, usize), what: &'static str) -> Result<()> {
    if values.len() != shape.0 * shape.1 {
        return Err(shape_err(what, format!("{} values for a {}x{} image", values.len(), shape.0, shape.1)));
    }
    Ok(())
}

pub fn gray_image(pixels: &[f64], shape: (usize, usize)) -> Result<GrayImage> {
    check_len(pixels, shape, "gray_image")?;
    let (h, w) = shape;
    Ok(GrayImage::from_raw(w as u32, h as u32, pixels.iter().map(|&v| gray_level(v)).collect())
        .expect("buffer length checked"))
}

pub fn png_gray_bytes(pixels: &[f64], shape: (usize, usize)) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    gray_image(pixels, shape)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png_gray(path: impl AsRef<Path>, pixels: &[f64], shape: (usize, usize)) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, png_gray_bytes(pixels, shape)?).map_err(file_err(path))
}

/// Lays out equally sized images on a grid with `cols` columns and `pad`
/// pixels of zero-valued spacing. Returns the mosaic and its shape.
pub fn tile(images: &[Vec<f64>], shape: (usize, usize), cols: usize, pad: usize) -> Result<(Vec<f64>, (usize, usize))> {
    let cols = cols.max(1);
    for img in images {
        check_len(img, shape, "tile")?;
    }
    let rows = images.len().div_ceil(cols).max(1);
    let (h, w) = shape;
    let out_h = rows * h + (rows - 1) * pad;
    let out_w = cols * w + (cols - 1) * pad;
    let mut out = vec![0.0; out_h * out_w];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (h + pad), (k % cols) * (w + pad));
        for r in 0..h {
            out[(r0 + r) * out_w + c0..(r0 + r) * out_w + c0 + w].copy_from_slice(&img[r * w..(r + 1) * w]);
        }
    }
    Ok((out, (out_h, out_w)))
}

/// Diverging palette: negative values blue, positive red, zero white,
/// scaled by the largest magnitude. An all-zero map renders white.
pub fn heatmap_image(values: &[f64], shape: (usize, usize)) -> Result<RgbImage> {
    check_len(values, shape, "heatmap")?;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut buf = Vec::with_capacity(values.len() * 3);
    for &v in values {
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        let fade = gray_level(1.0 - t.abs());
        buf.extend_from_slice(&if t >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] });
    }
    Ok(RgbImage::from_raw(shape.1 as u32, shape.0 as u32, buf).expect("buffer length checked"))
}

pub fn png_heatmap_bytes(values: &[f64], shape: (usize, usize)) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    heatmap_image(values, shape)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png_heatmap(path: impl AsRef<Path>, values: &[f64], shape: (usize, usize)) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, png_heatmap_bytes(values, shape)?).map_err(file_err(path))
}

/// One comma-separated line. Numbers use the shortest text that parses
/// back to the same `f64`.
pub fn csv_row(values: &[f64]) -> String {
    let mut s = values.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

/// `H` lines of `W` values.
pub fn csv_matrix(values: &[f64], shape: (usize, usize)) -> Result<String> {
    check_len(values, shape, "csv_matrix")?;
    Ok(values.chunks(shape.1.max(1)).map(csv_row).collect())
}

pub fn parse_csv_row(line: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    line.trim().split(',').map(str::parse).collect()
}
