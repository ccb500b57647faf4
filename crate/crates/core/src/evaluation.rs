//! Attack success, transfer, conspicuousness, and patch-vs-perturbation
//! difference statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stealthpatch_tensor::{nn, par, Graph, Tensor};

use crate::error::{CoreError, Result};
use crate::generator::{GeneratorStack, NoiseMode};
use crate::imaging::{apply_patch, ImageTensor, PatchRegion};
use crate::saliency::saliency_map;
use crate::trainer::AttackGoal;
use crate::victim::{self, Classifier, Prediction};

/// Source of adversarial patches indexed by seed.
pub trait PatchSampler: Sync {
    fn sample(&self, seed: u64) -> Result<ImageTensor>;
}

impl PatchSampler for GeneratorStack {
    fn sample(&self, seed: u64) -> Result<ImageTensor> {
        self.generate(seed, NoiseMode::Random)
    }
}

/// The same patch for every seed.
pub struct FixedPatch(pub ImageTensor);

impl PatchSampler for FixedPatch {
    fn sample(&self, _seed: u64) -> Result<ImageTensor> {
        Ok(self.0.clone())
    }
}

/// Seeds of the `n` evaluation samples drawn from `seed`.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|j| seed.wrapping_add(j)).collect()
}

pub fn sample_patches(sampler: &dyn PatchSampler, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let seeds = sample_seeds(seed, n);
    par::map_collect(&seeds, |&s| sampler.sample(s)).into_iter().collect()
}

/// Whether a prediction counts as a successful attack.
pub fn is_success(pred: &Prediction, goal: AttackGoal) -> bool {
    match goal.target {
        Some(t) => pred.top_class == t,
        None => pred.top_class != goal.true_class,
    }
}

/// Error unless `model` predicts the true class on the clean image.
pub fn check_clean(model: &dyn Classifier, x: &ImageTensor, goal: AttackGoal) -> Result<()> {
    let predicted = victim::predict(model, x)?.top_class;
    if predicted != goal.true_class {
        return Err(CoreError::CleanMisclassified {
            model: model.id().into(),
            predicted,
            label: goal.true_class,
        });
    }
    Ok(())
}

const PREDICT_CHUNK: usize = 16;

/// Successful composites among `patches` applied at `region`.
pub fn count_successes(
    model: &dyn Classifier,
    x: &ImageTensor,
    region: &PatchRegion,
    patches: &[ImageTensor],
    goal: AttackGoal,
) -> Result<usize> {
    let chunks: Vec<&[ImageTensor]> = patches.chunks(PREDICT_CHUNK).collect();
    let counts = par::map_collect(&chunks, |chunk| -> Result<usize> {
        let composites = chunk.iter().map(|p| apply_patch(x, p, region)).collect::<Result<Vec<_>>>()?;
        let preds = victim::predict_batch(model, &composites)?;
        Ok(preds.iter().filter(|p| is_success(p, goal)).count())
    });
    counts.into_iter().sum()
}

/// Fraction of `n` sampled patches that fool `model` at `region`. The clean
/// image must be classified correctly.
pub fn success_rate(
    sampler: &dyn PatchSampler,
    model: &dyn Classifier,
    x: &ImageTensor,
    region: &PatchRegion,
    n: usize,
    seed: u64,
    goal: AttackGoal,
) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::InvalidValue("success rate needs at least one sample".into()));
    }
    check_clean(model, x, goal)?;
    let patches = sample_patches(sampler, n, seed)?;
    Ok(count_successes(model, x, region, &patches, goal)? as f64 / n as f64)
}

/// Success of one model on one image's samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRate {
    pub model: String,
    pub samples: usize,
    pub successes: usize,
    /// `None` when the model misclassifies the clean image.
    pub rate: Option<f64>,
    pub excluded: Option<String>,
}

/// Success rate of identical patch samples on every model. Models that
/// misclassify the clean image are reported as excluded.
pub fn transfer_matrix(
    sampler: &dyn PatchSampler,
    models: &[&dyn Classifier],
    x: &ImageTensor,
    region: &PatchRegion,
    n: usize,
    seed: u64,
    goal: AttackGoal,
) -> Result<Vec<ModelRate>> {
    if models.is_empty() {
        return Err(CoreError::InvalidValue("transfer evaluation needs at least one model".into()));
    }
    if n == 0 {
        return Err(CoreError::InvalidValue("success rate needs at least one sample".into()));
    }
    let patches = sample_patches(sampler, n, seed)?;
    rates_on_patches(models, x, region, &patches, goal)
}

pub fn rates_on_patches(
    models: &[&dyn Classifier],
    x: &ImageTensor,
    region: &PatchRegion,
    patches: &[ImageTensor],
    goal: AttackGoal,
) -> Result<Vec<ModelRate>> {
    models
        .iter()
        .map(|m| match check_clean(*m, x, goal) {
            Err(e @ CoreError::CleanMisclassified { .. }) => Ok(ModelRate {
                model: m.id().into(),
                samples: 0,
                successes: 0,
                rate: None,
                excluded: Some(e.to_string()),
            }),
            Err(e) => Err(e),
            Ok(()) => {
                let successes = count_successes(*m, x, region, patches, goal)?;
                Ok(ModelRate {
                    model: m.id().into(),
                    samples: patches.len(),
                    successes,
                    rate: Some(successes as f64 / patches.len() as f64),
                    excluded: None,
                })
            }
        })
        .collect()
}

/// Mean saliency inside a region over mean saliency of the whole image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conspicuousness {
    pub ratio: f64,
    /// Set when the saliency map was all zero and the ratio defaulted to 1.
    pub zero_map: bool,
}

pub fn ratio_from_map(map: &Tensor, region: &PatchRegion) -> Result<Conspicuousness> {
    if map.ndim() != 2 {
        return Err(CoreError::dims("saliency map", "[H, W]", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    region.check_within(h, w)?;
    let global = map.mean();
    if global <= 0.0 {
        return Ok(Conspicuousness { ratio: 1.0, zero_map: true });
    }
    let mut inside = 0.0;
    for y in region.top..region.bottom() {
        inside += map.data()[y * w + region.left..y * w + region.right()].iter().sum::<f64>();
    }
    Ok(Conspicuousness {
        ratio: inside / region.area() as f64 / global,
        zero_map: false,
    })
}

/// Ratio of bottom-up saliency inside `region` of an attacked image.
pub fn conspicuousness_ratio(x_attacked: &ImageTensor, region: &PatchRegion) -> Result<Conspicuousness> {
    ratio_from_map(&saliency_map(x_attacked), region)
}

/// Checkerboard of saturated red and cyan with `cell`-pixel squares: a
/// deliberately conspicuous reference patch.
pub fn checkerboard_patch(channels: usize, h: usize, w: usize, cell: usize) -> ImageTensor {
    let cell = cell.max(1);
    ImageTensor::from_fn(channels, h, w, |c, y, x| {
        let red = (y / cell + x / cell) % 2 == 0;
        if (c == 0) == red {
            1.0
        } else {
            -1.0
        }
    })
    .expect("values in range")
}

/// The L-infinity budget, given in 8-bit pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epsilon {
    pub eight_bit: f64,
}

impl Epsilon {
    pub fn new(eight_bit: f64) -> Result<Self> {
        if !(eight_bit >= 0.0 && eight_bit.is_finite()) {
            return Err(CoreError::InvalidValue(format!("epsilon must be >= 0, got {eight_bit}")));
        }
        Ok(Self { eight_bit })
    }

    /// In `[0, 1]` pixel units.
    pub fn unit(&self) -> f64 {
        self.eight_bit / 255.0
    }

    /// In the internal `[-1, 1]` domain, twice the unit value.
    pub fn internal(&self) -> f64 {
        2.0 * self.eight_bit / 255.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon_8bit: f64,
    pub steps: usize,
    /// Step size as a fraction of epsilon.
    pub step_fraction: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon_8bit: 8.0,
            steps: 40,
            step_fraction: 0.1,
        }
    }
}

impl PgdConfig {
    pub fn epsilon(&self) -> Result<Epsilon> {
        Epsilon::new(self.epsilon_8bit)
    }
}

/// Nearest value to `v` in `[x - eps, x + eps] ∩ [-1, 1]` whose computed
/// distance from `x` does not exceed `eps`.
fn project(v: f64, x: f64, eps: f64) -> f64 {
    let mut out = v.clamp((x - eps).max(-1.0), (x + eps).min(1.0));
    while (out - x).abs() > eps {
        out = if out > x { out.next_down() } else { out.next_up() };
    }
    out
}

/// Sign-gradient steps on cross-entropy (ascending away from the true class,
/// or descending toward the target), each projected onto the L-infinity ball
/// of radius `epsilon` (internal units) around `x` and the valid range.
pub fn pgd_attack(
    model: &dyn Classifier,
    x: &ImageTensor,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    goal: AttackGoal,
) -> Result<ImageTensor> {
    if !model.supports_gradients() {
        return Err(CoreError::Unsupported(format!("PGD needs gradients from model `{}`", model.id())));
    }
    if !(epsilon >= 0.0 && step_size >= 0.0) {
        return Err(CoreError::InvalidValue(format!("epsilon {epsilon} and step {step_size} must be >= 0")));
    }
    let (label, sign) = match goal.target {
        Some(t) => (t, -1.0),
        None => (goal.true_class, 1.0),
    };
    let mut adv = x.to_batch();
    for _ in 0..steps {
        let g = Graph::new();
        let xv = g.leaf(adv.clone());
        let loss = nn::cross_entropy(model.forward(xv)?, &[label]);
        let grad = g.backward(loss, &[xv]).remove(0);
        for ((a, gr), x0) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            let step = if *gr > 0.0 { step_size } else if *gr < 0.0 { -step_size } else { 0.0 };
            *a = project(*a + sign * step, *x0, epsilon);
        }
    }
    ImageTensor::from_batch(&adv, 0)
}

pub const HIST_BINS: usize = 40;
pub const HIST_RANGE: (f64, f64) = (-2.0, 2.0);

/// Histogram of `attacked - original` differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    /// `region` or `image`.
    pub scope: String,
    pub bin_lo: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub elements: usize,
    pub max_abs: f64,
    /// Largest difference outside the region; `None` for whole-image scope.
    pub max_abs_outside: Option<f64>,
    pub epsilon: f64,
    /// Fraction of in-scope elements with `|diff| > epsilon`.
    pub exceed_fraction: f64,
}

/// Difference statistics. With a region the histogram covers only the
/// region (a patch attack), otherwise the whole image (a perturbation).
/// `epsilon` is in internal units.
pub fn diff_distribution(
    original: &ImageTensor,
    attacked: &ImageTensor,
    region: Option<&PatchRegion>,
    epsilon: f64,
) -> Result<DiffSummary> {
    if original.dims() != attacked.dims() {
        return Err(CoreError::dims("attacked image", original.dims(), attacked.dims()));
    }
    let (c, h, w) = original.dims();
    if let Some(r) = region {
        r.check_within(h, w)?;
    }
    let width = (HIST_RANGE.1 - HIST_RANGE.0) / HIST_BINS as f64;
    let mut counts = vec![0u64; HIST_BINS];
    let (mut elements, mut exceed) = (0usize, 0usize);
    let (mut max_abs, mut max_out) = (0.0f64, 0.0f64);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = attacked.get(ch, y, x) - original.get(ch, y, x);
                if region.is_some_and(|r| !r.contains(y, x)) {
                    max_out = max_out.max(d.abs());
                    continue;
                }
                let bin = (((d - HIST_RANGE.0) / width).floor().max(0.0) as usize).min(HIST_BINS - 1);
                counts[bin] += 1;
                elements += 1;
                max_abs = max_abs.max(d.abs());
                if d.abs() > epsilon {
                    exceed += 1;
                }
            }
        }
    }
    Ok(DiffSummary {
        scope: if region.is_some() { "region" } else { "image" }.into(),
        bin_lo: HIST_RANGE.0,
        bin_width: width,
        counts,
        elements,
        max_abs,
        max_abs_outside: region.map(|_| max_out),
        epsilon,
        exceed_fraction: if elements == 0 { 0.0 } else { exceed as f64 / elements as f64 },
    })
}

/// Evaluation settings shared by every image of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub pgd: PgdConfig,
    /// Skip the PGD baseline when false.
    pub run_pgd: bool,
    /// Cell side of the checkerboard baseline patch.
    pub baseline_cell: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            pgd: PgdConfig::default(),
            run_pgd: true,
            baseline_cell: 2,
        }
    }
}

/// Everything measured on one attacked image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub image: String,
    pub true_class: usize,
    pub target_class: Option<usize>,
    pub region: PatchRegion,
    pub patch_area_fraction: f64,
    /// The surrogate (white-box) model first, then transfer targets.
    pub rates: Vec<ModelRate>,
    /// Median ratio over the generated samples.
    pub conspicuousness_patch: Conspicuousness,
    pub conspicuousness_baseline: Conspicuousness,
    /// Differences of the first sample's composite.
    pub patch_diff: DiffSummary,
    pub pgd_diff: Option<DiffSummary>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Rates on every model, conspicuousness against the checkerboard baseline,
/// and difference statistics (with a PGD baseline on the first model).
pub fn evaluate_image(
    name: &str,
    sampler: &dyn PatchSampler,
    models: &[&dyn Classifier],
    x: &ImageTensor,
    region: &PatchRegion,
    goal: AttackGoal,
    cfg: &EvalConfig,
) -> Result<ImageEvaluation> {
    if cfg.samples == 0 {
        return Err(CoreError::InvalidValue("evaluation needs at least one sample".into()));
    }
    if models.is_empty() {
        return Err(CoreError::InvalidValue("evaluation needs at least one model".into()));
    }
    let patches = sample_patches(sampler, cfg.samples, cfg.seed)?;
    let rates = rates_on_patches(models, x, region, &patches, goal)?;
    let ratios = par::map_collect(&patches, |p| conspicuousness_ratio(&apply_patch(x, p, region)?, region));
    let ratios: Vec<Conspicuousness> = ratios.into_iter().collect::<Result<_>>()?;
    let mut values: Vec<f64> = ratios.iter().map(|r| r.ratio).collect();
    let conspicuousness_patch = Conspicuousness {
        ratio: median(&mut values).expect("nonempty"),
        zero_map: ratios.iter().any(|r| r.zero_map),
    };
    let baseline = checkerboard_patch(x.channels(), region.h, region.w, cfg.baseline_cell);
    let conspicuousness_baseline = conspicuousness_ratio(&apply_patch(x, &baseline, region)?, region)?;
    let eps = cfg.pgd.epsilon()?.internal();
    let patch_diff = diff_distribution(x, &apply_patch(x, &patches[0], region)?, Some(region), eps)?;
    let pgd_diff = if cfg.run_pgd && models[0].supports_gradients() {
        let adv = pgd_attack(models[0], x, eps, cfg.pgd.steps, eps * cfg.pgd.step_fraction, goal)?;
        Some(diff_distribution(x, &adv, None, eps)?)
    } else {
        None
    };
    Ok(ImageEvaluation {
        image: name.into(),
        true_class: goal.true_class,
        target_class: goal.target,
        region: *region,
        patch_area_fraction: region.area_fraction(x.height(), x.width()),
        rates,
        conspicuousness_patch,
        conspicuousness_baseline,
        patch_diff,
        pgd_diff,
    })
}

/// Success pooled over images for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledRate {
    pub model: String,
    pub images: usize,
    pub samples: usize,
    pub successes: usize,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub run_id: String,
    pub surrogate: String,
    pub models: Vec<String>,
    pub config_hash: String,
    pub samples_per_image: usize,
    pub seed: u64,
    pub epsilon_8bit: f64,
    pub epsilon_unit: f64,
    pub epsilon_internal: f64,
    pub pooled: Vec<PooledRate>,
    pub median_conspicuousness_patch: Option<f64>,
    pub median_conspicuousness_baseline: Option<f64>,
    /// The conspicuousness ratio is a constructed metric, not a published one.
    pub conspicuousness_note: String,
    pub images: Vec<ImageEvaluation>,
}

/// Columns of the per-(image, model) CSV table, in order.
pub const REPORT_COLUMNS: [&str; 14] = [
    "image",
    "model",
    "role",
    "true_class",
    "region_top",
    "region_left",
    "region_h",
    "region_w",
    "patch_area_fraction",
    "samples",
    "successes",
    "success_rate",
    "conspicuousness_patch",
    "conspicuousness_baseline",
];

impl AttackReport {
    pub fn new(run_id: &str, config_hash: &str, cfg: &EvalConfig, images: Vec<ImageEvaluation>) -> Result<Self> {
        let models: Vec<String> = images
            .first()
            .map(|e| e.rates.iter().map(|r| r.model.clone()).collect())
            .unwrap_or_default();
        let pooled = models
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let counted: Vec<&ModelRate> = images.iter().filter_map(|e| e.rates.get(k)).filter(|r| r.rate.is_some()).collect();
                let samples = counted.iter().map(|r| r.samples).sum();
                let successes = counted.iter().map(|r| r.successes).sum();
                PooledRate {
                    model: m.clone(),
                    images: counted.len(),
                    samples,
                    successes,
                    rate: (samples > 0).then(|| successes as f64 / samples as f64),
                }
            })
            .collect();
        let eps = cfg.pgd.epsilon()?;
        Ok(Self {
            run_id: run_id.into(),
            surrogate: models.first().cloned().unwrap_or_default(),
            models,
            config_hash: config_hash.into(),
            samples_per_image: cfg.samples,
            seed: cfg.seed,
            epsilon_8bit: eps.eight_bit,
            epsilon_unit: eps.unit(),
            epsilon_internal: eps.internal(),
            pooled,
            median_conspicuousness_patch: median(&mut images.iter().map(|e| e.conspicuousness_patch.ratio).collect::<Vec<_>>()),
            median_conspicuousness_baseline: median(
                &mut images.iter().map(|e| e.conspicuousness_baseline.ratio).collect::<Vec<_>>(),
            ),
            conspicuousness_note: "mean bottom-up saliency inside the patch over the image mean; a constructed metric".into(),
            images,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for e in &self.images {
            for (k, r) in e.rates.iter().enumerate() {
                rows.push(vec![
                    e.image.clone(),
                    r.model.clone(),
                    if k == 0 { "white-box" } else { "transfer" }.into(),
                    e.true_class.to_string(),
                    e.region.top.to_string(),
                    e.region.left.to_string(),
                    e.region.h.to_string(),
                    e.region.w.to_string(),
                    e.patch_area_fraction.to_string(),
                    r.samples.to_string(),
                    r.successes.to_string(),
                    r.rate.map(|v| v.to_string()).unwrap_or_default(),
                    e.conspicuousness_patch.ratio.to_string(),
                    e.conspicuousness_baseline.ratio.to_string(),
                ]);
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)?;
        for row in self.rows() {
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::InvalidValue(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        for (name, text) in [("report.json", self.to_json()?), ("report.csv", self.to_csv()?)] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
        }
        Ok(())
    }
}
