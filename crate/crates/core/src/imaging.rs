//! Pixel containers, mask algebra, patch/context cropping and pyramid geometry.
//!
//! Pixels live in `[-1, 1]` everywhere; 8-bit files are converted exactly once
//! at ingestion with `v = byte / 127.5 - 1`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stealthpatch_tensor::Tensor;

use crate::error::{CoreError, Result};

/// Normalization convention recorded in every sidecar.
pub const NORMALIZATION: &str = "v = byte / 127.5 - 1";

/// A `C x H x W` image with every value in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Tensor", into = "Tensor")]
pub struct ImageTensor(Tensor);

impl TryFrom<Tensor> for ImageTensor {
    type Error = CoreError;
    fn try_from(t: Tensor) -> Result<Self> {
        Self::new(t)
    }
}

impl From<ImageTensor> for Tensor {
    fn from(img: ImageTensor) -> Tensor {
        img.0
    }
}

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.shape().iter().any(|&d| d == 0) {
            return Err(CoreError::dims("image tensor", "[C>=1, H>=1, W>=1]", t.shape()));
        }
        if let Some(v) = t.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(CoreError::InvalidValue(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self(t))
    }

    /// Clamp into `[-1, 1]` (non-finite values are rejected).
    pub fn clamped(t: Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(CoreError::InvalidValue("non-finite pixel value".into()));
        }
        Self::new(t.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[channels, height, width], value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(Tensor::from_vec(&[channels, height, width], data)?)
    }

    /// Image `index` of a `[N, C, H, W]` batch.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(CoreError::dims("batch image", "[N, C, H, W] with index < N", s));
        }
        let len = s[1] * s[2] * s[3];
        let data = batch.data()[index * len..(index + 1) * len].to_vec();
        Self::new(Tensor::from_vec(&[s[1], s[2], s[3]], data)?)
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `[1, C, H, W]` copy for network input.
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = self.dims();
        self.0.reshape(&[1, c, h, w]).expect("same element count")
    }

    /// Sub-image at `region`.
    pub fn crop(&self, region: &PatchRegion) -> Result<ImageTensor> {
        region.check_within(self.height(), self.width())?;
        let c = self.channels();
        ImageTensor::from_fn(c, region.h, region.w, |ch, y, x| {
            self.get(ch, region.top + y, region.left + x)
        })
    }

    pub fn checksum(&self) -> String {
        self.0.checksum()
    }
}

/// Axis-aligned rectangle `(top, left, h, w)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRegion {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchRegion {
    pub const fn new(top: usize, left: usize, h: usize, w: usize) -> Self {
        Self { top, left, h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn bottom(&self) -> usize {
        self.top + self.h
    }

    pub fn right(&self) -> usize {
        self.left + self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom()).contains(&y) && (self.left..self.right()).contains(&x)
    }

    /// Non-empty and fully inside an `height x width` image.
    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(CoreError::InvalidRegion(format!("{self:?} has zero area")));
        }
        if self.bottom() > height || self.right() > width {
            return Err(CoreError::InvalidRegion(format!(
                "{self:?} exceeds image bounds {height}x{width}"
            )));
        }
        Ok(())
    }

    /// [`check_within`](Self::check_within) plus `h * w < height * width`:
    /// an attack patch must leave some of the host image visible.
    pub fn check_strict_subregion(&self, height: usize, width: usize) -> Result<()> {
        self.check_within(height, width)?;
        if self.area() >= height * width {
            return Err(CoreError::InvalidRegion(format!(
                "{self:?} covers the whole {height}x{width} image; a patch must be a strict sub-region"
            )));
        }
        Ok(())
    }

    /// Fraction of an `height x width` image covered by the region.
    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        self.area() as f64 / (height * width) as f64
    }
}

/// Binary `H x W` location mask: 1 inside `region`, 0 outside.
pub fn make_mask(region: &PatchRegion, height: usize, width: usize) -> Result<Tensor> {
    region.check_within(height, width)?;
    let mut m = Tensor::zeros(&[height, width]);
    for y in region.top..region.bottom() {
        m.data_mut()[y * width + region.left..y * width + region.right()].fill(1.0);
    }
    Ok(m)
}

/// `m * p_padded + (1 - m) * x`: pixels inside `region` come from `patch`,
/// every other pixel is copied unchanged from `x`.
pub fn apply_patch(x: &ImageTensor, patch: &ImageTensor, region: &PatchRegion) -> Result<ImageTensor> {
    region.check_within(x.height(), x.width())?;
    if patch.channels() != x.channels() {
        return Err(CoreError::dims("patch channels", x.channels(), patch.channels()));
    }
    if (patch.height(), patch.width()) != (region.h, region.w) {
        return Err(CoreError::dims(
            "patch size",
            (region.h, region.w),
            (patch.height(), patch.width()),
        ));
    }
    let mut out = x.tensor().clone();
    let (h, w) = (x.height(), x.width());
    let od = out.data_mut();
    for c in 0..x.channels() {
        for y in 0..region.h {
            let dst = (c * h + region.top + y) * w + region.left;
            let src = (c * region.h + y) * region.w;
            od[dst..dst + region.w].copy_from_slice(&patch.data()[src..src + region.w]);
        }
    }
    ImageTensor::new(out)
}

/// Result of [`crop_patch_and_context`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAndContext {
    pub patch: ImageTensor,
    pub context: ImageTensor,
    /// Placement of the context in the host image.
    pub context_region: PatchRegion,
}

impl PatchAndContext {
    /// Offset `(top, left)` of the patch inside the context.
    pub fn patch_offset(&self, region: &PatchRegion) -> (usize, usize) {
        (
            region.top - self.context_region.top,
            region.left - self.context_region.left,
        )
    }
}

pub(crate) fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Crop the patch at `region` and a surrounding context whose sides are
/// `context_scale` times the patch sides, centered on the patch as far as the
/// image bounds allow. A context that would cross the border is shifted back
/// inside, leaving the patch off-center.
pub fn crop_patch_and_context(
    x: &ImageTensor,
    region: &PatchRegion,
    context_scale: f64,
) -> Result<PatchAndContext> {
    if !(context_scale > 1.0) || !context_scale.is_finite() {
        return Err(CoreError::InvalidValue(format!(
            "context_scale must be > 1, got {context_scale}"
        )));
    }
    let (height, width) = (x.height(), x.width());
    region.check_strict_subregion(height, width)?;
    let ch = round_half_up(context_scale * region.h as f64).max(region.h + 1);
    let cw = round_half_up(context_scale * region.w as f64).max(region.w + 1);
    if ch > height || cw > width {
        return Err(CoreError::InvalidRegion(format!(
            "a {ch}x{cw} context around {region:?} does not fit in the {height}x{width} image; \
             shrink context_scale (currently {context_scale})"
        )));
    }
    let place = |start: usize, len: usize, ctx: usize, bound: usize| -> usize {
        let ideal = start as isize - ((ctx - len) / 2) as isize;
        ideal.clamp(0, (bound - ctx) as isize) as usize
    };
    let context_region = PatchRegion::new(
        place(region.top, region.h, ch, height),
        place(region.left, region.w, cw, width),
        ch,
        cw,
    );
    Ok(PatchAndContext {
        patch: x.crop(region)?,
        context: x.crop(&context_region)?,
        context_region,
    })
}

/// Bilinear interpolation matrix `[n_out, n_in]` with half-pixel centers and
/// edge clamping. Rows sum to one, so constants and the `[-1, 1]` range are
/// preserved.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m.data_mut()[i * n_in + i0] += 1.0 - t;
        m.data_mut()[i * n_in + i1] += t;
    }
    m
}

pub(crate) fn resample_plane(src: &[f64], h: usize, w: usize, ry: &Tensor, rx: &Tensor, out: &mut [f64]) {
    let (th, tw) = (ry.shape()[0], rx.shape()[0]);
    let mut tmp = vec![0.0; h * tw];
    for y in 0..h {
        for ox in 0..tw {
            tmp[y * tw + ox] = (0..w).map(|x| src[y * w + x] * rx.data()[ox * w + x]).sum();
        }
    }
    for oy in 0..th {
        for ox in 0..tw {
            out[oy * tw + ox] = (0..h).map(|y| ry.data()[oy * h + y] * tmp[y * tw + ox]).sum();
        }
    }
}

/// Bilinear resize in either direction. Same-size requests return the input.
pub fn resize(img: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    if target_h == 0 || target_w == 0 {
        return Err(CoreError::InvalidValue("resize to zero size".into()));
    }
    let (c, h, w) = img.dims();
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let ry = bilinear_matrix(h, target_h);
    let rx = bilinear_matrix(w, target_w);
    let mut out = Tensor::zeros(&[c, target_h, target_w]);
    for ch in 0..c {
        resample_plane(
            &img.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            &ry,
            &rx,
            &mut out.data_mut()[ch * target_h * target_w..(ch + 1) * target_h * target_w],
        );
    }
    // Convex combinations can only leave [-1, 1] by rounding.
    ImageTensor::clamped(out)
}

/// Bilinear upsampling; downscaling requests are rejected.
pub fn upsample(img: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    if target_h < img.height() || target_w < img.width() {
        return Err(CoreError::InvalidValue(format!(
            "upsample target {target_h}x{target_w} is smaller than source {}x{}",
            img.height(),
            img.width()
        )));
    }
    resize(img, target_h, target_w)
}

/// One pyramid level: a patch, its context and the patch offset inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub patch: ImageTensor,
    pub context: ImageTensor,
    pub patch_offset: (usize, usize),
}

impl PyramidLevel {
    pub fn patch_dims(&self) -> (usize, usize) {
        (self.patch.height(), self.patch.width())
    }

    pub fn context_dims(&self) -> (usize, usize) {
        (self.context.height(), self.context.width())
    }

    /// Context with the level's own patch placed at its offset.
    pub fn real_composite(&self) -> Result<ImageTensor> {
        let (top, left) = self.patch_offset;
        let (h, w) = self.patch_dims();
        apply_patch(&self.context, &self.patch, &PatchRegion::new(top, left, h, w))
    }
}

/// Coarse-to-fine `(patch, context)` pairs. Level `k` (the last) is the
/// original resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub levels: Vec<PyramidLevel>,
    /// Per-level ratio `r` with `r^k = coarse_ratio`.
    pub ratio: f64,
    pub coarse_ratio: f64,
    pub k: usize,
}

/// Side length of pyramid level `i` of `k` for an original side `side`:
/// `round_half_up(side * coarse_ratio^((k - i) / k))`. With `k = 0` the single
/// level sits at the coarse ratio.
pub fn level_side(side: usize, k: usize, i: usize, coarse_ratio: f64) -> usize {
    let exponent = if k == 0 { 1.0 } else { (k - i) as f64 / k as f64 };
    round_half_up(side as f64 * coarse_ratio.powf(exponent)).max(1)
}

/// Build the pyramid of `patch` and `context`. `patch_offset` locates the
/// patch inside the context at full resolution; it is rescaled per level.
/// The coarsest context must be at least `min_context_side` pixels on each
/// side so the critic's receptive field fits inside it.
pub fn build_pyramid(
    patch: &ImageTensor,
    context: &ImageTensor,
    patch_offset: (usize, usize),
    k: usize,
    coarse_ratio: f64,
    min_context_side: usize,
) -> Result<ScalePyramid> {
    if !(coarse_ratio > 0.0 && coarse_ratio < 1.0) {
        return Err(CoreError::InvalidValue(format!(
            "coarse_ratio must lie in (0, 1), got {coarse_ratio}"
        )));
    }
    let (ph, pw) = (patch.height(), patch.width());
    let (ch, cw) = (context.height(), context.width());
    PatchRegion::new(patch_offset.0, patch_offset.1, ph, pw).check_within(ch, cw)?;
    let coarse_h = level_side(ch, k, 0, coarse_ratio);
    let coarse_w = level_side(cw, k, 0, coarse_ratio);
    if coarse_h.min(coarse_w) < min_context_side {
        return Err(CoreError::InvalidValue(format!(
            "coarsest context {coarse_h}x{coarse_w} is below the critic's {min_context_side}px receptive field; \
             use fewer scales or a larger patch/context"
        )));
    }
    let levels = (0..=k)
        .map(|i| {
            if i == k && k > 0 {
                return Ok(PyramidLevel {
                    patch: patch.clone(),
                    context: context.clone(),
                    patch_offset,
                });
            }
            let (lph, lpw) = (level_side(ph, k, i, coarse_ratio), level_side(pw, k, i, coarse_ratio));
            let (lch, lcw) = (level_side(ch, k, i, coarse_ratio), level_side(cw, k, i, coarse_ratio));
            let off_y = round_half_up(patch_offset.0 as f64 * lch as f64 / ch as f64).min(lch - lph);
            let off_x = round_half_up(patch_offset.1 as f64 * lcw as f64 / cw as f64).min(lcw - lpw);
            Ok(PyramidLevel {
                patch: resize(patch, lph, lpw)?,
                context: resize(context, lch, lcw)?,
                patch_offset: (off_y, off_x),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratio = if k == 0 { coarse_ratio } else { coarse_ratio.powf(1.0 / k as f64) };
    Ok(ScalePyramid {
        levels,
        ratio,
        coarse_ratio,
        k,
    })
}

/// Bytes `[H, W, 3]` (or gray) to `[-1, 1]` pixels.
pub fn from_rgb8(width: u32, height: u32, rgb: &[u8]) -> Result<ImageTensor> {
    let (w, h) = (width as usize, height as usize);
    if rgb.len() != w * h * 3 {
        return Err(CoreError::dims("rgb8 buffer", w * h * 3, rgb.len()));
    }
    ImageTensor::from_fn(3, h, w, |c, y, x| rgb[(y * w + x) * 3 + c] as f64 / 127.5 - 1.0)
}

/// `[-1, 1]` pixels to 8-bit RGB (single-channel images are replicated).
pub fn to_rgb8(img: &ImageTensor) -> Vec<u8> {
    let (c, h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.get(ch.min(c - 1), y, x);
                out.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Load a PNG or JPEG as an RGB image in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    from_rgb8(img.width(), img.height(), img.as_raw())
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, to_rgb8(img))
        .expect("buffer sized from image dims");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Metadata written next to every persisted image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub normalization: String,
    pub dims: (usize, usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<PatchRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pyramid_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Sidecar {
    pub fn for_image(img: &ImageTensor) -> Self {
        Self {
            normalization: NORMALIZATION.into(),
            dims: img.dims(),
            region: None,
            pyramid_ratio: None,
            scale_index: None,
            seed: None,
        }
    }
}

/// Save `img` as PNG plus a `<name>.json` sidecar.
pub fn save_png_with_sidecar(img: &ImageTensor, path: &Path, sidecar: &Sidecar) -> Result<()> {
    save_png(img, path)?;
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_vec_pretty(sidecar)?).map_err(|e| CoreError::io(side, e))
}
