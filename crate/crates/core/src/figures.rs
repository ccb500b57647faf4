//! PNG figures: heatmap overlays and difference histograms.

use std::path::Path;

use image::{Rgb, RgbImage};
use stealthpatch_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::evaluation::DiffSummary;
use crate::imaging::{self, ImageTensor, PatchRegion};

/// Blue-to-red ramp for `t` in `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// `x` blended with a false-color rendering of `map` (red = high), with an
/// optional one-pixel white outline around `region`. Same size as `x`.
pub fn heatmap_overlay(x: &ImageTensor, map: &Tensor, region: Option<&PatchRegion>) -> Result<RgbImage> {
    let (_, h, w) = x.dims();
    if map.shape() != [h, w] {
        return Err(CoreError::dims("heatmap", [h, w], map.shape()));
    }
    let m = map.max();
    let base = imaging::to_rgb8(x);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for xx in 0..w {
            let t = if m > 0.0 { map.data()[y * w + xx] / m } else { 0.0 };
            let c = heat(t);
            let px: [u8; 3] = std::array::from_fn(|k| {
                let v = 0.45 * base[(y * w + xx) * 3 + k] as f64 + 0.55 * 255.0 * c[k];
                v.round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(xx as u32, y as u32, Rgb(px));
        }
    }
    if let Some(r) = region {
        r.check_within(h, w)?;
        for y in r.top..r.bottom() {
            for xx in r.left..r.right() {
                if y == r.top || y + 1 == r.bottom() || xx == r.left || xx + 1 == r.right() {
                    out.put_pixel(xx as u32, y as u32, Rgb([255, 255, 255]));
                }
            }
        }
    }
    Ok(out)
}

/// Bar chart of a difference histogram. Bars are scaled to the tallest
/// bin; red vertical lines mark `-epsilon` and `+epsilon`.
pub fn histogram_chart(d: &DiffSummary, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let bins = d.counts.len().max(1) as u32;
    let tallest = d.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (width / bins).max(1);
    for (i, &c) in d.counts.iter().enumerate() {
        let bar_h = ((c as f64 / tallest) * (height - 1) as f64).round() as u32;
        for x in i as u32 * bar_w..((i as u32 + 1) * bar_w).min(width) {
            for y in height - bar_h..height {
                img.put_pixel(x, y, Rgb([60, 90, 160]));
            }
        }
    }
    let span = d.bin_width * d.counts.len() as f64;
    for e in [-d.epsilon, d.epsilon] {
        let x = ((e - d.bin_lo) / span * (bins * bar_w) as f64).round();
        if x >= 0.0 && (x as u32) < width {
            for y in 0..height {
                img.put_pixel(x as u32, y, Rgb([200, 30, 30]));
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::diff_distribution;

    #[test]
    fn overlay_has_image_dims_and_outlines_the_region() {
        let x = ImageTensor::filled(3, 12, 20, -1.0).unwrap();
        let map = Tensor::zeros(&[12, 20]);
        let r = PatchRegion::new(2, 3, 4, 5);
        let img = heatmap_overlay(&x, &map, Some(&r)).unwrap();
        assert_eq!(img.dimensions(), (20, 12));
        assert_eq!(img.get_pixel(3, 2), &Rgb([255, 255, 255]));
        assert_ne!(img.get_pixel(5, 3), &Rgb([255, 255, 255]));
        assert!(heatmap_overlay(&x, &Tensor::zeros(&[4, 4]), None).is_err());
    }

    #[test]
    fn histogram_chart_draws_bars() {
        let x = ImageTensor::filled(3, 4, 4, 0.0).unwrap();
        let d = diff_distribution(&x, &x, None, 0.1).unwrap();
        let img = histogram_chart(&d, 160, 60);
        assert_eq!(img.dimensions(), (160, 60));
        assert!(img.pixels().any(|p| p == &Rgb([60, 90, 160])));
    }
}
