//! Resize-and-normalize into the generator's `[-1, 1]` range.
//!
//! Each axis is resampled independently: area averaging when shrinking,
//! bilinear interpolation (pixel-center aligned) when growing.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One axis of resampling weights: for each output index, `(source index, weight)` pairs.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if dst == src {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    if dst < src {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src);
                (first..last)
                    .map(|j| {
                        let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                        (j, overlap / ratio)
                    })
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            })
            .collect()
    } else {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let j = pos.floor() as usize;
                let frac = pos - j as f64;
                if j + 1 < src && frac > 0.0 {
                    vec![(j, 1.0 - frac), (j + 1, frac)]
                } else {
                    vec![(j, 1.0)]
                }
            })
            .collect()
    }
}

/// Resizes to `target_size`² and maps 0..=255 onto `[-1, 1]`.
///
/// Returns a `[3, target_size, target_size]` (CHW) tensor.
pub fn preprocess(image: &RgbImage, target_size: u32) -> Result<Tensor<f32>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::domain("cannot preprocess an empty image"));
    }
    if target_size == 0 {
        return Err(Error::domain("target size must be positive"));
    }
    let s = target_size as usize;
    let wx = axis_weights(w, s);
    let wy = axis_weights(h, s);
    let raw = image.as_raw();

    // Horizontal pass into [h, s, 3], then vertical into CHW.
    let mut rows = vec![0.0f64; h * s * 3];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            for &(sx, wgt) in taps {
                let p = (y * w + sx) * 3;
                for c in 0..3 {
                    rows[(y * s + ox) * 3 + c] += wgt * raw[p + c] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; 3 * s * s];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..s {
            for c in 0..3 {
                let v: f64 = taps.iter().map(|&(sy, wgt)| wgt * rows[(sy * s + ox) * 3 + c]).sum();
                out[(c * s + oy) * s + ox] = (v / 127.5 - 1.0).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, s, s], out)
}

/// Inverse of the normalization for a `[3, S, S]` slice.
pub fn to_rgb_image(chw: &[f32], size: u32) -> RgbImage {
    let s = size as usize;
    assert_eq!(chw.len(), 3 * s * s, "CHW slice length");
    RgbImage::from_fn(size, size, |x, y| {
        let at = |c: usize| {
            let v = chw[(c * s + y as usize) * s + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([
                (x * 255 / (w - 1)) as u8,
                (y * 255 / (h - 1)) as u8,
                ((x * 7 + y * 13) % 256) as u8,
            ])
        })
    }

    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    /// Box-filter oracle by midpoint sampling of the piecewise-constant
    /// source. `src / gcd(src, dst)` samples per axis put every source pixel
    /// edge on a sample-cell edge, so the quadrature is exact.
    fn area_oracle(img: &RgbImage, s: u32, c: usize, ox: u32, oy: u32) -> f64 {
        let (w, h) = (img.width(), img.height());
        let (nx, ny) = (w / gcd(w, s), h / gcd(h, s));
        let mut acc = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                let fx = (ox as f64 + (i as f64 + 0.5) / nx as f64) * w as f64 / s as f64;
                let fy = (oy as f64 + (j as f64 + 0.5) / ny as f64) * h as f64 / s as f64;
                acc += img.get_pixel(fx as u32, fy as u32).0[c] as f64;
            }
        }
        acc / (nx * ny) as f64
    }

    fn check_against_oracle(img: &RgbImage, s: u32) {
        let t = preprocess(img, s).unwrap();
        assert_eq!(t.shape(), &[3, s as usize, s as usize]);
        for c in 0..3 {
            for oy in 0..s {
                for ox in 0..s {
                    let got = (t.data()[((c * s as usize + oy as usize) * s as usize) + ox as usize] as f64 + 1.0) * 127.5;
                    let want = area_oracle(img, s, c, ox, oy);
                    assert!((got - want).abs() <= 2.0, "c{c} ({ox},{oy}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn downscale_matches_area_oracle() {
        check_against_oracle(&gradient(512, 512), 64);
    }

    #[test]
    fn non_integer_downscale_matches_area_oracle() {
        check_against_oracle(&gradient(100, 90), 64);
    }

    #[test]
    fn normalization_endpoints() {
        let black = RgbImage::from_pixel(20, 20, image::Rgb([0, 0, 0]));
        let white = RgbImage::from_pixel(20, 20, image::Rgb([255, 255, 255]));
        for s in [8, 20, 32] {
            assert!(preprocess(&black, s).unwrap().data().iter().all(|&v| v == -1.0));
            assert!(preprocess(&white, s).unwrap().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn upscale_is_bilinear_and_preserves_constant_regions() {
        let img = RgbImage::from_fn(2, 1, |x, _| image::Rgb([if x == 0 { 0 } else { 255 }; 3]));
        let t = preprocess(&img, 4).unwrap();
        let row: Vec<f64> = (0..4).map(|x| (t.data()[x] as f64 + 1.0) * 127.5).collect();
        // centers at -0.25, 0.25, 0.75, 1.25 in source pixels, clamped to [0, 1]
        let want = [0.0, 63.75, 191.25, 255.0];
        for (g, w) in row.iter().zip(want) {
            assert!((g - w).abs() < 1e-3, "{row:?}");
        }
    }

    #[test]
    fn identity_size_round_trips_exactly() {
        let img = gradient(32, 32);
        let t = preprocess(&img, 32).unwrap();
        assert_eq!(to_rgb_image(t.data(), 32), img);
    }

    #[test]
    fn zero_size_input_is_rejected() {
        assert!(preprocess(&RgbImage::new(0, 0), 64).is_err());
    }
}
