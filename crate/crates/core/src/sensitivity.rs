//! Model-gradient attention maps and patch location selection.

use serde::{Deserialize, Serialize};
use stealthpatch_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::imaging::{ImageTensor, PatchRegion};
use crate::victim::{self, Classifier};

/// Nonnegative `H x W` sensitivity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub values: Tensor,
    pub source_model: String,
    pub normalized: bool,
}

impl AttentionMap {
    pub fn new(values: Tensor, source_model: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 || values.is_empty() {
            return Err(CoreError::dims("attention map", "[H, W]", values.shape()));
        }
        if values.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(CoreError::InvalidValue("attention values must be finite and >= 0".into()));
        }
        Ok(Self {
            values,
            source_model: source_model.into(),
            normalized: false,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Divide by the maximum; an all-zero map is left unchanged.
    pub fn max_normalized(mut self) -> Self {
        let m = self.values.max();
        if m > 0.0 {
            self.values = self.values.map(|v| v / m);
        }
        self.normalized = true;
        self
    }
}

/// Channel-summed absolute gradient of the top predicted class score,
/// max-normalized. In a black-box setting pass a surrogate model.
pub fn compute_attention(model: &dyn Classifier, x: &ImageTensor) -> Result<AttentionMap> {
    if !model.supports_gradients() {
        return Err(CoreError::Unsupported(format!(
            "model `{}` has no gradients; compute attention on a surrogate model from the registry",
            model.id()
        )));
    }
    let top = victim::predict(model, x)?.top_class;
    let grad = victim::gradients(model, x, top)?;
    let (c, h, w) = x.dims();
    let mut map = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        for i in 0..h * w {
            map.data_mut()[i] += grad.data()[ch * h * w + i].abs();
        }
    }
    Ok(AttentionMap::new(map, model.id())?.max_normalized())
}

/// Sum of every `h x w` window via a summed-area table; entry `(t, l)` is the
/// window with top-left corner `(t, l)`.
pub fn window_sums(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (hh, ww) = (map.shape()[0], map.shape()[1]);
    if h == 0 || w == 0 || h > hh || w > ww {
        return Err(CoreError::InvalidRegion(format!("{h}x{w} window does not fit a {hh}x{ww} map")));
    }
    // sat[(y, x)] = sum of map[..y, ..x]
    let mut sat = vec![0.0; (hh + 1) * (ww + 1)];
    for y in 0..hh {
        let mut row = 0.0;
        for x in 0..ww {
            row += map.data()[y * ww + x];
            sat[(y + 1) * (ww + 1) + x + 1] = sat[y * (ww + 1) + x + 1] + row;
        }
    }
    let (oh, ow) = (hh - h + 1, ww - w + 1);
    let at = |y: usize, x: usize| sat[y * (ww + 1) + x];
    let data = (0..oh * ow)
        .map(|k| {
            let (t, l) = (k / ow, k % ow);
            at(t + h, l + w) - at(t, l + w) - at(t + h, l) + at(t, l)
        })
        .collect();
    Ok(Tensor::from_vec(&[oh, ow], data)?)
}

/// Relative tolerance under which two window sums count as tied; absorbs
/// the rounding difference between summation orders.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// The `h x w` window with the largest attention sum. Ties (within
/// [`TIE_TOLERANCE`] of the total mass) go to the smallest `(top, left)` in
/// row-major order.
pub fn select_location(map: &AttentionMap, h: usize, w: usize) -> Result<PatchRegion> {
    if h > map.height() || w > map.width() {
        return Err(CoreError::InvalidRegion(format!(
            "patch {h}x{w} is larger than the {}x{} image",
            map.height(),
            map.width()
        )));
    }
    let sums = window_sums(&map.values, h, w)?;
    let best = sums.max();
    let tol = TIE_TOLERANCE * map.values.sum().max(1.0);
    let ow = sums.shape()[1];
    let k = sums
        .data()
        .iter()
        .position(|&s| s >= best - tol)
        .expect("at least one window");
    Ok(PatchRegion::new(k / ow, k % ow, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{ConstantModel, LinearProbe};
    use proptest::prelude::*;

    fn brute_force(map: &Tensor, h: usize, w: usize) -> (usize, usize) {
        let (hh, ww) = (map.shape()[0], map.shape()[1]);
        let mut sums = Vec::new();
        for t in 0..=hh - h {
            for l in 0..=ww - w {
                let mut s = 0.0;
                for y in t..t + h {
                    for x in l..l + w {
                        s += map.data()[y * ww + x];
                    }
                }
                sums.push((t, l, s));
            }
        }
        let best = sums.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOLERANCE * map.sum().max(1.0);
        let (t, l, _) = *sums.iter().find(|s| s.2 >= best - tol).unwrap();
        (t, l)
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let m = ConstantModel { id: "c".into(), input_dims: (3, 8, 8), logits: vec![1.0, 0.0] };
        let map = compute_attention(&m, &ImageTensor::filled(3, 8, 8, 0.1).unwrap()).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(select_location(&map, 3, 3).unwrap(), PatchRegion::new(0, 0, 3, 3));
    }

    #[test]
    fn window_sum_model_lights_up_its_window() {
        // Class 0 score = sum of pixels in the 4x4 window at (5, 6) on every channel.
        let (c, h, w) = (3, 12, 12);
        let mut weight = Tensor::zeros(&[2, c * h * w]);
        for ch in 0..c {
            for y in 5..9 {
                for x in 6..10 {
                    weight.data_mut()[(ch * h + y) * w + x] = 1.0;
                }
            }
        }
        let bias = Tensor::from_vec(&[2], vec![10.0, 0.0]).unwrap();
        let m = LinearProbe::new("win", (c, h, w), weight, bias).unwrap();
        let map = compute_attention(&m, &ImageTensor::filled(c, h, w, 0.0).unwrap()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = (5..9).contains(&y) && (6..10).contains(&x);
                assert_eq!(map.values.data()[y * w + x], if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(select_location(&map, 4, 4).unwrap(), PatchRegion::new(5, 6, 4, 4));
    }

    #[test]
    fn hot_pixel_and_uniform_maps() {
        let mut t = Tensor::zeros(&[20, 20]);
        t.data_mut()[10 * 20 + 10] = 1.0;
        let map = AttentionMap::new(t.clone(), "m").unwrap();
        let r = select_location(&map, 4, 4).unwrap();
        assert!(r.contains(10, 10));
        assert_eq!((r.top, r.left), brute_force(&t, 4, 4));
        assert_eq!((r.top, r.left), (7, 7));
        let uni = AttentionMap::new(Tensor::ones(&[9, 7]), "m").unwrap();
        assert_eq!(select_location(&uni, 3, 2).unwrap(), PatchRegion::new(0, 0, 3, 2));
        assert!(select_location(&uni, 10, 2).is_err());
        assert!(AttentionMap::new(Tensor::full(&[2, 2], -1.0), "m").is_err());
    }

    proptest! {
        #[test]
        fn selection_matches_exhaustive_scan(
            hh in 1usize..24, ww in 1usize..24,
            h in 1usize..8, w in 1usize..8,
            vals in proptest::collection::vec(0u8..4, 24 * 24),
            scale in 0.01f64..3.0,
        ) {
            let (h, w) = (h.min(hh), w.min(ww));
            // Small integer levels force frequent ties.
            let t = Tensor::from_vec(&[hh, ww], vals[..hh * ww].iter().map(|&v| v as f64 * scale).collect()).unwrap();
            let map = AttentionMap::new(t.clone(), "m").unwrap();
            let r = select_location(&map, h, w).unwrap();
            prop_assert_eq!((r.top, r.left), brute_force(&t, h, w));
            let sums = window_sums(&t, h, w).unwrap();
            for tt in 0..=hh - h {
                for l in 0..=ww - w {
                    let mut s = 0.0;
                    for y in tt..tt + h { for x in l..l + w { s += t.data()[y * ww + x]; } }
                    prop_assert!((sums.data()[tt * (ww - w + 1) + l] - s).abs() < 1e-9);
                }
            }
        }
    }
}
