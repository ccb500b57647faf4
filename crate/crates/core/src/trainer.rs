//! Coarse-to-fine min-max training of a generator stack against one image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stealthpatch_tensor::nn::{self, Module};
use stealthpatch_tensor::optim::AdamConfig;
use stealthpatch_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::generator::{self, forward_scale, forward_scale_var, Critic, Generator, GeneratorStack, NetConfig, NoiseMode, ScalePair};
use crate::imaging::{self, bilinear_matrix, ImageTensor, PatchRegion};
use crate::losses::{self, GanObjective, LossComponents, LossWeights, PrintablePalette};
use crate::rng;
use crate::sensitivity;
use crate::victim::{self, Classifier};

/// Every knob of a training run. Serialized snapshots of this struct are
/// hashed into checkpoints, so two runs with equal configs are comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_scale: usize,
    pub critic_steps: usize,
    pub generator_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub gan_objective: GanObjective,
    pub k: usize,
    pub coarse_ratio: f64,
    pub context_scale: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Fixed placement; when absent the location is chosen by attention.
    pub region: Option<PatchRegion>,
    pub seed: u64,
    pub targeted: bool,
    pub target_class: Option<usize>,
    /// Label of the clean image; defaults to the victim's prediction.
    pub true_class: Option<usize>,
    pub net: NetConfig,
    /// Noise amplitude above the coarsest scale as a multiple of the
    /// reconstruction RMSE inherited from the scale below.
    pub noise_amp_factor: f64,
    /// Random patches averaged per generator step.
    pub samples_per_step: usize,
    /// Palette file for the non-printability term; the bundled palette when absent.
    pub palette: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_scale: 2000,
            critic_steps: 3,
            generator_steps: 3,
            learning_rate: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            gan_objective: GanObjective::default(),
            k: 3,
            coarse_ratio: 0.75,
            context_scale: 2.0,
            patch_h: 8,
            patch_w: 8,
            region: None,
            seed: 0,
            targeted: false,
            target_class: None,
            true_class: None,
            net: NetConfig::default(),
            noise_amp_factor: 0.1,
            samples_per_step: 1,
            palette: None,
        }
    }
}

fn cfg_err(key: &str, expected: &str, problem: String) -> CoreError {
    CoreError::Config {
        key: key.into(),
        expected: expected.into(),
        problem,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("epochs_per_scale", self.epochs_per_scale),
            ("critic_steps", self.critic_steps),
            ("generator_steps", self.generator_steps),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("samples_per_step", self.samples_per_step),
        ] {
            if v == 0 {
                return Err(cfg_err(key, "integer >= 1", "got 0".into()));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(cfg_err("learning_rate", "finite real > 0", format!("got {}", self.learning_rate)));
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(cfg_err(key, "real in [0, 1)", format!("got {v}")));
            }
        }
        if !(self.coarse_ratio > 0.0 && self.coarse_ratio < 1.0) {
            return Err(cfg_err("coarse_ratio", "real in (0, 1)", format!("got {}", self.coarse_ratio)));
        }
        if !(self.context_scale > 1.0 && self.context_scale.is_finite()) {
            return Err(cfg_err("context_scale", "finite real > 1", format!("got {}", self.context_scale)));
        }
        if !(self.noise_amp_factor >= 0.0 && self.noise_amp_factor.is_finite()) {
            return Err(cfg_err("noise_amp_factor", "finite real >= 0", format!("got {}", self.noise_amp_factor)));
        }
        if self.targeted != self.target_class.is_some() {
            return Err(cfg_err(
                "target_class",
                "an index exactly when targeted = true",
                format!("targeted = {}, target_class = {:?}", self.targeted, self.target_class),
            ));
        }
        if let Some(r) = self.region {
            if (r.h, r.w) != (self.patch_h, self.patch_w) {
                return Err(cfg_err(
                    "region",
                    "a region of size patch_h x patch_w",
                    format!("region is {}x{}, patch is {}x{}", r.h, r.w, self.patch_h, self.patch_w),
                ));
            }
        }
        self.weights.validate()?;
        self.net.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    /// JSON snapshot hashed into checkpoints.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Smallest coarsest-context side: one more than the critic's receptive
    /// field, so each critic output sees a strict sub-window of the composite.
    pub fn min_context_side(&self) -> usize {
        self.net.critic_receptive_field() + 1
    }

    pub fn palette(&self) -> Result<PrintablePalette> {
        match &self.palette {
            Some(p) => PrintablePalette::load(p),
            None => Ok(PrintablePalette::default_palette()),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub scale: usize,
    pub epoch: usize,
    /// `critic` or `generator`.
    pub kind: String,
    pub step: usize,
    pub total: f64,
    pub attack: f64,
    pub gan: f64,
    pub rec: f64,
    pub tv: f64,
    pub nps: f64,
    pub critic_real: f64,
    pub critic_fake: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleLog {
    pub scale: usize,
    pub noise_amp: f64,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub rows: Vec<StepRow>,
    /// Mean attack loss over each epoch's generator steps.
    pub epoch_attack: Vec<f64>,
}

/// Everything one critic step saw, for independent recomputation.
#[derive(Clone, Debug)]
pub struct CriticStep {
    pub scale: usize,
    pub real_composite: Tensor,
    pub fake_composite: Tensor,
    pub eps: f64,
    pub total: f64,
}

/// Everything one generator step saw, for independent recomputation.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub scale: usize,
    /// Random-mode patches at this scale's resolution.
    pub fakes: Vec<ImageTensor>,
    /// Context composites of `fakes`.
    pub fake_composites: Vec<Tensor>,
    /// Reconstruction-path output.
    pub reconstruction: ImageTensor,
    pub components: LossComponents,
    pub total: f64,
}

/// Hooks into the training loop. Detailed step records are only built when
/// [`wants_steps`](Self::wants_steps) returns true.
pub trait TrainObserver {
    fn wants_steps(&self) -> bool {
        false
    }
    /// Called before the critic update with the pre-update pair.
    fn critic_step(&mut self, _pair: &ScalePair, _step: &CriticStep) {}
    /// Called before the generator update with the pre-update pair.
    fn generator_step(&mut self, _pair: &ScalePair, _step: &GeneratorStep) {}
    fn scale_done(&mut self, _stack: &GeneratorStack, _log: &ScaleLog) {}
}

/// Observer that ignores everything.
pub struct Quiet;

impl TrainObserver for Quiet {}

/// What the victim must (not) predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackGoal {
    pub true_class: usize,
    pub target: Option<usize>,
}

/// Placement of the patch in the host image and the level tensors used by
/// one scale's losses.
struct ScaleData {
    x_hole: Tensor,
    region: PatchRegion,
    host_dims: (usize, usize),
    ctx_hole: Tensor,
    real_composite: Tensor,
    target_patch: Tensor,
    ry: Tensor,
    rx: Tensor,
    recon_prior: Tensor,
    recon_noise: Tensor,
}

fn zero_region(t: &mut Tensor, c: usize, h: usize, w: usize, r: &PatchRegion) {
    let d = t.data_mut();
    for ch in 0..c {
        for y in r.top..r.bottom() {
            d[(ch * h + y) * w + r.left..(ch * h + y) * w + r.right()].fill(0.0);
        }
    }
}

/// `base` (with zeros at `r`) plus `patch` embedded at `r`.
fn composite<'g>(base: Var<'g>, patch: Var<'g>, r: &PatchRegion, dims: (usize, usize)) -> Var<'g> {
    base + patch.embed(r.top, r.left, dims.0, dims.1)
}

fn noise_batch(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::randn(&[1, c, h, w], 1.0, rng)
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite(name.into()))
    }
}

fn check_grads(name: &str, grads: &[Tensor]) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!("{name} gradient")))
    }
}

/// Fresh pair for scale `i`: random weights at scale 0, a copy of scale
/// `i - 1` above.
fn init_pair(stack: &GeneratorStack, i: usize, cfg: &TrainConfig, noise_amp: f64) -> ScalePair {
    let level = &stack.pyramid.levels[i];
    let (generator, critic) = if i == 0 {
        let g = Generator::new(stack.channels, &stack.net, &mut rng::stream(cfg.seed, "init-generator", 0));
        let c = Critic::new(stack.channels, &stack.net, &mut rng::stream(cfg.seed, "init-critic", 0));
        (g, c)
    } else {
        let prev = &stack.pairs[i - 1];
        (prev.generator.clone(), prev.critic.clone())
    };
    ScalePair::new(level, i, generator, critic, noise_amp, cfg.adam())
}

/// Train scale `i` of `stack` (scales below must exist and be frozen) and
/// freeze it. The attack term applies the upsampled patch at `region` in `x`
/// and scores it with `model`.
pub fn train_scale(
    stack: &mut GeneratorStack,
    i: usize,
    model: &dyn Classifier,
    x: &ImageTensor,
    region: &PatchRegion,
    goal: AttackGoal,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ScaleLog> {
    if stack.pairs.len() != i || stack.pairs.iter().any(|p| !p.frozen) {
        return Err(CoreError::ScaleState(format!(
            "scale {i} needs exactly {i} frozen scales below it; the stack has {} ({} frozen)",
            stack.pairs.len(),
            stack.pairs.iter().filter(|p| p.frozen).count()
        )));
    }
    if i >= stack.num_scales() {
        return Err(CoreError::ScaleState(format!("scale {i} beyond the pyramid's {} levels", stack.num_scales())));
    }
    if !model.supports_gradients() {
        return Err(CoreError::Unsupported(format!("training needs gradients from victim `{}`", model.id())));
    }
    region.check_within(x.height(), x.width())?;
    if (region.h, region.w) != stack.original_patch_dims {
        return Err(CoreError::dims("region size", stack.original_patch_dims, (region.h, region.w)));
    }
    let level = stack.pyramid.levels[i].clone();
    let c = stack.channels;
    let (ph, pw) = level.patch_dims();
    let (ch, cw) = level.context_dims();
    let off = PatchRegion::new(level.patch_offset.0, level.patch_offset.1, ph, pw);

    let recon_prior = stack.prior(i, 0, NoiseMode::Reconstruction)?;
    let noise_amp = if i == 0 {
        1.0
    } else {
        let mse = recon_prior
            .data()
            .iter()
            .zip(level.patch.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / level.patch.data().len() as f64;
        cfg.noise_amp_factor * mse.sqrt()
    };
    let mut pair = init_pair(stack, i, cfg, noise_amp);

    let (hh, hw) = (x.height(), x.width());
    let mut x_hole = x.to_batch();
    zero_region(&mut x_hole, c, hh, hw, region);
    let mut ctx_hole = level.context.to_batch();
    zero_region(&mut ctx_hole, c, ch, cw, &off);
    let data = ScaleData {
        x_hole,
        region: *region,
        host_dims: (hh, hw),
        ctx_hole,
        real_composite: level.real_composite()?.to_batch(),
        target_patch: level.patch.to_batch(),
        ry: bilinear_matrix(ph, region.h),
        rx: bilinear_matrix(pw, region.w),
        recon_prior: recon_prior.to_batch(),
        recon_noise: stack.recon_noise[i].clone(),
    };
    let palette = if cfg.weights.delta_print > 0.0 { Some(cfg.palette()?) } else { None };

    let mut noise_rng = rng::stream(cfg.seed, "train-noise", i as u64);
    let mut prior_rng = rng::stream(cfg.seed, "train-prior", i as u64);
    let mut gp_rng = rng::stream(cfg.seed, "gp-interpolation", i as u64);
    let mut log = ScaleLog {
        scale: i,
        noise_amp,
        ..Default::default()
    };

    // Random-mode prior for scale i; fixed zeros at the coarsest scale.
    let mut random_prior = |stack: &GeneratorStack| -> Result<Tensor> {
        if i == 0 {
            return Ok(Tensor::zeros(&[1, c, ph, pw]));
        }
        Ok(stack.prior(i, prior_rng.next_u64(), NoiseMode::Random)?.to_batch())
    };

    for epoch in 0..cfg.epochs_per_scale {
        for step in 0..cfg.critic_steps {
            let z = noise_batch(&mut noise_rng, c, ph, pw);
            let prior = random_prior(&*stack)?;
            let fake = forward_scale(&pair, &z, &ImageTensor::new(prior.reshape(&[c, ph, pw])?)?)?;
            let fake_composite = imaging::apply_patch(&level.context, &fake, &off)?.to_batch();
            let eps: f64 = gp_rng.random();
            let g = Graph::new();
            let params = nn::bind(&g, &pair.critic);
            let parts = losses::critic_loss_var(
                &|v| pair.critic.score(&params, v),
                g.constant(data.real_composite.clone()),
                g.constant(fake_composite.clone()),
                cfg.weights.gp_coef,
                eps,
                cfg.gan_objective,
            )?;
            let total = parts.total.item();
            check_finite("critic", total)?;
            if observer.wants_steps() {
                observer.critic_step(
                    &pair,
                    &CriticStep {
                        scale: i,
                        real_composite: data.real_composite.clone(),
                        fake_composite,
                        eps,
                        total,
                    },
                );
            }
            let grads = g.backward(parts.total, &params);
            check_grads("critic", &grads)?;
            pair.critic_opt.update(pair.critic.params_mut(), &grads)?;
            log.critic_updates += 1;
            log.rows.push(StepRow {
                scale: i,
                epoch,
                kind: "critic".into(),
                step,
                total,
                attack: 0.0,
                gan: 0.0,
                rec: 0.0,
                tv: 0.0,
                nps: 0.0,
                critic_real: parts.real_score.item(),
                critic_fake: parts.fake_score.item(),
                penalty: parts.penalty.item(),
            });
        }

        let mut attack_sum = 0.0;
        for step in 0..cfg.generator_steps {
            let zs: Vec<Tensor> = (0..cfg.samples_per_step).map(|_| noise_batch(&mut noise_rng, c, ph, pw)).collect();
            let priors: Vec<Tensor> = (0..cfg.samples_per_step).map(|_| random_prior(&*stack)).collect::<Result<_>>()?;
            let g = Graph::new();
            let params = nn::bind(&g, &pair.generator);
            let critic_params: Vec<Var> = pair.critic.params().into_iter().map(|t| g.constant(t.clone())).collect();
            let n = cfg.samples_per_step as f64;
            let zero = || g.scalar(0.0);
            let (mut attack, mut gan, mut tv, mut nps) = (zero(), zero(), zero(), zero());
            let mut fakes = Vec::new();
            let mut fake_composites = Vec::new();
            for (z, prior) in zs.into_iter().zip(priors) {
                let fake = forward_scale_var(&pair.generator, &params, g.constant(z), g.constant(prior), noise_amp);
                let comp = composite(g.constant(data.ctx_hole.clone()), fake, &off, (ch, cw));
                gan = gan + losses::generator_gan_term(pair.critic.score(&critic_params, comp), cfg.gan_objective).scale(1.0 / n);
                let up = fake.resample(&data.ry, &data.rx);
                let attacked = composite(g.constant(data.x_hole.clone()), up, &data.region, data.host_dims);
                let logits = model.forward(attacked)?;
                attack = attack + losses::attack_loss_var(logits, goal.true_class, cfg.weights.kappa, goal.target)?.scale(1.0 / n);
                tv = tv + losses::tv_loss_var(fake).scale(1.0 / n);
                if let Some(pal) = &palette {
                    nps = nps + losses::nps_loss_var(fake, pal)?.scale(1.0 / n);
                }
                if observer.wants_steps() {
                    fakes.push(ImageTensor::new(fake.value().reshape(&[c, ph, pw])?)?);
                    fake_composites.push((*comp.value()).clone());
                }
            }
            let rec_out = forward_scale_var(
                &pair.generator,
                &params,
                g.constant(data.recon_noise.clone()),
                g.constant(data.recon_prior.clone()),
                noise_amp,
            );
            let rec = losses::reconstruction_loss_var(rec_out, g.constant(data.target_patch.clone()));
            let w = &cfg.weights;
            let total = attack + gan.scale(w.alpha) + rec.scale(w.beta) + tv.scale(w.gamma) + nps.scale(w.delta_print);
            let components = LossComponents {
                attack: attack.item(),
                gan: gan.item(),
                rec: rec.item(),
                tv: tv.item(),
                nps: nps.item(),
            };
            let total_value = losses::generator_loss(&components, w)?;
            check_finite("generator", total.item())?;
            if observer.wants_steps() {
                observer.generator_step(
                    &pair,
                    &GeneratorStep {
                        scale: i,
                        fakes,
                        fake_composites,
                        reconstruction: ImageTensor::new(rec_out.value().reshape(&[c, ph, pw])?)?,
                        components,
                        total: total.item(),
                    },
                );
            }
            let grads = g.backward(total, &params);
            check_grads("generator", &grads)?;
            pair.generator_opt.update(pair.generator.params_mut(), &grads)?;
            log.generator_updates += 1;
            attack_sum += components.attack;
            log.rows.push(StepRow {
                scale: i,
                epoch,
                kind: "generator".into(),
                step,
                total: total_value,
                attack: components.attack,
                gan: components.gan,
                rec: components.rec,
                tv: components.tv,
                nps: components.nps,
                critic_real: 0.0,
                critic_fake: 0.0,
                penalty: 0.0,
            });
        }
        log.epoch_attack.push(attack_sum / cfg.generator_steps as f64);
    }
    pair.frozen = true;
    stack.pairs.push(pair);
    observer.scale_done(stack, &log);
    Ok(log)
}

/// Decisions made before training, recorded in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub region: PatchRegion,
    pub region_source: String,
    pub context_region: PatchRegion,
    pub goal: AttackGoal,
    pub patch_sides: Vec<(usize, usize)>,
    pub context_sides: Vec<(usize, usize)>,
    pub patch_offsets: Vec<(usize, usize)>,
    pub ratio: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub patch_area_fraction: f64,
    pub victim_id: String,
    pub victim_checksum: String,
}

/// Location, geometry and goal for `x` without training anything.
pub fn plan(x: &ImageTensor, model: &dyn Classifier, cfg: &TrainConfig) -> Result<(TrainPlan, GeneratorStack)> {
    cfg.validate()?;
    let (mc, mh, mw) = model.input_dims();
    if x.dims() != (mc, mh, mw) {
        return Err(CoreError::dims("victim image vs model input", (mc, mh, mw), x.dims()));
    }
    let true_class = match cfg.true_class {
        Some(t) => t,
        None => victim::predict(model, x)?.top_class,
    };
    let goal = AttackGoal {
        true_class,
        target: cfg.target_class,
    };
    losses::attack_loss(&vec![0.0; model.num_classes()], goal.true_class, 0.0, goal.target)?;
    let (region, region_source) = match cfg.region {
        Some(r) => (r, "config".to_string()),
        None => {
            let map = sensitivity::compute_attention(model, x)?;
            (sensitivity::select_location(&map, cfg.patch_h, cfg.patch_w)?, format!("attention:{}", model.id()))
        }
    };
    region.check_strict_subregion(x.height(), x.width())?;
    let pc = imaging::crop_patch_and_context(x, &region, cfg.context_scale)?;
    let pyramid = imaging::build_pyramid(
        &pc.patch,
        &pc.context,
        pc.patch_offset(&region),
        cfg.k,
        cfg.coarse_ratio,
        cfg.min_context_side(),
    )?;
    let plan = TrainPlan {
        region,
        region_source,
        context_region: pc.context_region,
        goal,
        patch_sides: pyramid.levels.iter().map(|l| l.patch_dims()).collect(),
        context_sides: pyramid.levels.iter().map(|l| l.context_dims()).collect(),
        patch_offsets: pyramid.levels.iter().map(|l| l.patch_offset).collect(),
        ratio: pyramid.ratio,
        weights: cfg.weights,
        seed: cfg.seed,
        patch_area_fraction: region.area_fraction(x.height(), x.width()),
        victim_id: model.id().to_string(),
        victim_checksum: model.checksum(),
    };
    let stack = GeneratorStack::new(pyramid, (region.h, region.w), cfg.net, cfg.seed, cfg.snapshot())?;
    Ok((plan, stack))
}

/// Result of [`train_all`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stack: GeneratorStack,
    pub plan: TrainPlan,
    pub logs: Vec<ScaleLog>,
    /// Scales loaded from an existing checkpoint instead of trained.
    pub resumed_scales: usize,
}

/// The full pipeline: attention, location, crop, pyramid, then every scale
/// coarse to fine. With `checkpoint_dir`, the stack is saved after each
/// scale and an existing compatible checkpoint is resumed.
pub fn train_all(
    x: &ImageTensor,
    model: &dyn Classifier,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let (plan, mut stack) = plan(x, model, cfg)?;
    let mut resumed_scales = 0;
    if let Some(dir) = checkpoint_dir {
        if dir.join("stack.json").exists() {
            let loaded = generator::load_stack_expecting(dir, &cfg.snapshot())?;
            if loaded.pyramid != stack.pyramid {
                return Err(CoreError::Checkpoint(format!(
                    "{}: checkpoint pyramid differs from this image's pyramid",
                    dir.display()
                )));
            }
            resumed_scales = loaded.pairs.len();
            stack = loaded;
        }
    }
    let mut logs = Vec::new();
    for i in resumed_scales..stack.num_scales() {
        let log = train_scale(&mut stack, i, model, x, &plan.region, plan.goal, cfg, observer)?;
        if let Some(dir) = checkpoint_dir {
            generator::save_stack(&stack, dir)?;
            append_log(&dir.join("train_log.csv"), &log.rows)?;
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        stack,
        plan,
        logs,
        resumed_scales,
    })
}

/// Append rows to a CSV log, writing the header for a new file.
pub fn append_log(path: &Path, rows: &[StepRow]) -> Result<()> {
    let exists = path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
