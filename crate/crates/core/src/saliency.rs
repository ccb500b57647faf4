//! Model-free bottom-up saliency: center-surround contrast on an intensity
//! channel and two color-opponency channels across a Gaussian pyramid.
//!
//! Steps, all on `[0, 1]` RGB:
//! 1. `I = (r + g + b) / 3`. Color is normalized by `I` where `I` exceeds a
//!    tenth of its maximum and zeroed elsewhere, then the broadly tuned
//!    channels `R = r - (g + b)/2`, `G = g - (r + b)/2`, `B = b - (r + g)/2`,
//!    `Y = (r + g)/2 - |r - g|/2 - b` (negatives clipped) give `RG = R - G`
//!    and `BY = B - Y`.
//! 2. Each channel gets a pyramid: level 0 is the image, each next level is
//!    a `[1 4 6 4 1] / 16` blur (edge replicate) decimated by two, while both
//!    sides stay at least 2.
//! 3. For centers `c` in `0..=2` and surrounds `s = c + d`, `d` in `1..=2`
//!    (skipping missing levels), the feature map is `|center - up(surround)|`
//!    with bilinear `up` to the center size, then resized to full resolution.
//! 4. `N(m) = (m / max m) * (1 - mean(m / max m))^2`. Maps whose maximum is
//!    below [`MIN_CONTRAST`] are treated as zero, so blur rounding on a flat
//!    image does not get amplified into structure.
//!    Intensity maps sum into one conspicuity map, RG and BY maps into
//!    another; the result is the max-normalized mean of `N` of the two.

use stealthpatch_tensor::Tensor;

use crate::imaging::{bilinear_matrix, resample_plane, ImageTensor};

const KERNEL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
const CENTERS: std::ops::RangeInclusive<usize> = 0..=2;
const DELTAS: std::ops::RangeInclusive<usize> = 1..=2;

pub const MIN_CONTRAST: f64 = 1e-9;

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn resized(&self, h: usize, w: usize) -> Plane {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let mut v = vec![0.0; h * w];
        resample_plane(&self.v, self.h, self.w, &bilinear_matrix(self.h, h), &bilinear_matrix(self.w, w), &mut v);
        Plane { h, w, v }
    }

    fn blur_decimate(&self) -> Plane {
        let (h, w) = (self.h, self.w);
        let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = (0..5)
                    .map(|k| KERNEL[k] * self.v[y * w + tap(x as isize + k as isize - 2, w)])
                    .sum::<f64>()
                    / 16.0;
            }
        }
        let (nh, nw) = (h / 2, w / 2);
        let mut v = vec![0.0; nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                v[y * nw + x] = (0..5)
                    .map(|k| KERNEL[k] * rows[tap(2 * y as isize + k as isize - 2, h) * w + 2 * x])
                    .sum::<f64>()
                    / 16.0;
            }
        }
        Plane { h: nh, w: nw, v }
    }
}

fn pyramid(base: Plane) -> Vec<Plane> {
    let mut levels = vec![base];
    loop {
        let last = levels.last().unwrap();
        if last.h / 2 < 2 || last.w / 2 < 2 {
            return levels;
        }
        let next = last.blur_decimate();
        levels.push(next);
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m < MIN_CONTRAST {
        v.iter_mut().for_each(|x| *x = 0.0);
        return v;
    }
    v.iter_mut().for_each(|x| *x /= m);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let w = (1.0 - mean) * (1.0 - mean);
    v.iter_mut().for_each(|x| *x *= w);
    v
}

fn center_surround(base: Plane, out: &mut [f64]) {
    let (h, w) = (base.h, base.w);
    let levels = pyramid(base);
    for c in CENTERS {
        for d in DELTAS {
            let s = c + d;
            if s >= levels.len() {
                continue;
            }
            let center = &levels[c];
            let surround = levels[s].resized(center.h, center.w);
            let diff = Plane {
                h: center.h,
                w: center.w,
                v: center.v.iter().zip(&surround.v).map(|(a, b)| (a - b).abs()).collect(),
            };
            let full = diff.resized(h, w);
            for (o, v) in out.iter_mut().zip(normalize(full.v)) {
                *o += v;
            }
        }
    }
}

/// Bottom-up saliency of `x`, `[H, W]`, nonnegative and max-normalized.
pub fn saliency_map(x: &ImageTensor) -> Tensor {
    let (c, h, w) = x.dims();
    let n = h * w;
    let chan = |k: usize| -> Vec<f64> {
        let k = k.min(c - 1);
        x.data()[k * n..(k + 1) * n].iter().map(|v| (v + 1.0) / 2.0).collect()
    };
    let (r, g, b) = (chan(0), chan(1), chan(2));
    let intensity: Vec<f64> = (0..n).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect();
    let i_max = intensity.iter().cloned().fold(0.0, f64::max);
    let (mut rg, mut by) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        if intensity[i] <= 0.1 * i_max || intensity[i] <= 0.0 {
            continue;
        }
        let (r, g, b) = (r[i] / intensity[i], g[i] / intensity[i], b[i] / intensity[i]);
        let rr = (r - (g + b) / 2.0).max(0.0);
        let gg = (g - (r + b) / 2.0).max(0.0);
        let bb = (b - (r + g) / 2.0).max(0.0);
        let yy = ((r + g) / 2.0 - (r - g).abs() / 2.0 - b).max(0.0);
        rg[i] = rr - gg;
        by[i] = bb - yy;
    }
    let plane = |v: Vec<f64>| Plane { h, w, v };
    let mut int_map = vec![0.0; n];
    center_surround(plane(intensity), &mut int_map);
    let mut color_map = vec![0.0; n];
    center_surround(plane(rg), &mut color_map);
    center_surround(plane(by), &mut color_map);
    let combined: Vec<f64> = normalize(int_map)
        .into_iter()
        .zip(normalize(color_map))
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    let m = combined.iter().cloned().fold(0.0, f64::max);
    let out = if m > 0.0 { combined.into_iter().map(|v| v / m).collect() } else { combined };
    Tensor::from_vec(&[h, w], out).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_saliency() {
        for v in [-1.0, 0.0, 0.7] {
            let s = saliency_map(&ImageTensor::filled(3, 24, 20, v).unwrap());
            assert!(s.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn white_square_on_black_peaks_at_the_square() {
        let x = ImageTensor::from_fn(3, 32, 32, |_, y, x| if (12..18).contains(&y) && (20..26).contains(&x) { 1.0 } else { -1.0 }).unwrap();
        let s = saliency_map(&x);
        let k = s.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let (y, xx) = (k / 32, k % 32);
        assert!((10..20).contains(&y) && (18..28).contains(&xx), "peak at {y},{xx}");
        assert_eq!(s.max(), 1.0);
        assert!(s.min() >= 0.0);
    }

    #[test]
    fn color_contrast_registers_on_equal_intensity() {
        // Red and green halves with equal intensity: only the color channels respond.
        let x = ImageTensor::from_fn(3, 16, 16, |c, _, x| match (c, x < 8) {
            (0, true) | (1, false) => 1.0,
            _ => -1.0,
        })
        .unwrap();
        let s = saliency_map(&x);
        assert!(s.max() > 0.0);
        let edge: f64 = (0..16).map(|y| s.data()[y * 16 + 7] + s.data()[y * 16 + 8]).sum();
        let far: f64 = (0..16).map(|y| s.data()[y * 16] + s.data()[y * 16 + 15]).sum();
        assert!(edge > far);
    }
}
