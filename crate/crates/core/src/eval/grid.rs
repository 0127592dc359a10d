use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::corpus::to_rgb_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GUTTER: u32 = 2;

/// Tiles `[n, 3, S, S]` cells row-major into `rows × cols` with white
/// gutters between cells. Unused trailing slots stay white.
pub fn tile(cells: &Tensor<f32>, rows: usize, cols: usize) -> Result<RgbImage> {
    let shape = cells.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::shape("grid cells", "[n, 3, s, s]", shape));
    }
    let n = shape[0];
    if rows * cols < n || n == 0 {
        return Err(Error::domain(format!("{n} cells do not fit a {rows}x{cols} grid")));
    }
    let s = shape[2] as u32;
    let (w, h) = (cols as u32 * (s + GUTTER) - GUTTER, rows as u32 * (s + GUTTER) - GUTTER);
    let mut canvas = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let per = 3 * (s * s) as usize;
    for i in 0..n {
        let cell = to_rgb_image(&cells.data()[i * per..(i + 1) * per], s);
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        image::imageops::replace(&mut canvas, &cell, (c * (s + GUTTER)) as i64, (r * (s + GUTTER)) as i64);
    }
    Ok(canvas)
}

/// Writes `<stem>.png` and the sidecar `<stem>.tsv` (header line, then one
/// line per cell: `index, row, col, ` followed by `fields`).
pub fn write_grid(
    cells: &Tensor<f32>,
    rows: usize,
    cols: usize,
    header: &str,
    fields: &[String],
    png: &Path,
) -> Result<()> {
    let canvas = tile(cells, rows, cols)?;
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    canvas
        .save_with_format(png, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: png.to_owned(), source })?;
    let mut text = format!("index\trow\tcol\t{header}\n");
    for (i, f) in fields.iter().enumerate() {
        writeln!(text, "{i}\t{}\t{}\t{f}", i / cols, i % cols).expect("string write");
    }
    let sidecar = png.with_extension("tsv");
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_white_gutters_and_row_major_order() {
        // cell i is filled with gray level i/4 mapped into [-1, 1]
        let s = 4;
        let mut data = Vec::new();
        for i in 0..5 {
            data.extend(std::iter::repeat_n(i as f32 / 4.0 * 2.0 - 1.0, 3 * s * s));
        }
        let cells = Tensor::from_vec(&[5, 3, s, s], data).unwrap();
        let img = tile(&cells, 2, 3).unwrap();
        assert_eq!(img.dimensions(), (3 * 4 + 2 * 2, 2 * 4 + 2));
        let level = |i: u32| ((i as f32 / 4.0 * 2.0 - 1.0 + 1.0) * 127.5).round() as u8;
        assert_eq!(img.get_pixel(0, 0).0[0], level(0));
        assert_eq!(img.get_pixel(6, 0).0[0], level(1));
        assert_eq!(img.get_pixel(12, 0).0[0], level(2));
        assert_eq!(img.get_pixel(0, 6).0[0], level(3));
        assert_eq!(img.get_pixel(6, 6).0[0], level(4));
        assert_eq!(img.get_pixel(4, 0).0, [255; 3]);
        assert_eq!(img.get_pixel(0, 4).0, [255; 3]);
        assert_eq!(img.get_pixel(13, 7).0, [255; 3], "unused slot stays white");
    }

    #[test]
    fn too_many_cells_is_an_error() {
        let cells = Tensor::zeros(&[5, 3, 4, 4]);
        assert!(tile(&cells, 2, 2).is_err());
    }
}
