//! Acceptance criteria 1 to 11. Run with `--nocapture` to see one line per
//! criterion; the test fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use stealthpatch_core::dataset::{synthetic_shapes, train_desk_classifier, Recipe, TrainedVictim};
use stealthpatch_core::evaluation::{
    diff_distribution, evaluate_image, median, pgd_attack, AttackReport, DiffSummary, EvalConfig, Epsilon,
};
use stealthpatch_core::generator::{Critic, NetConfig, ScalePair};
use stealthpatch_core::imaging::{apply_patch, build_pyramid, crop_patch_and_context, level_side, ImageTensor, PatchRegion};
use stealthpatch_core::losses::{
    attack_loss, attack_loss_var, critic_loss_var, nps_loss, nps_loss_var, reconstruction_loss, reconstruction_loss_var,
    tv_loss, tv_loss_var, GanObjective, PrintablePalette,
};
use stealthpatch_core::sensitivity::{select_location, AttentionMap};
use stealthpatch_core::trainer::{self, train_all, AttackGoal, CriticStep, GeneratorStep, Quiet, TrainConfig, TrainObserver, TrainOutcome};
use stealthpatch_core::victim::{predict, Arch, Classifier};
use stealthpatch_tensor::nn::{self, Module};
use stealthpatch_tensor::{Graph, Tensor};

type Outcome = Result<String, String>;

struct Board {
    failures: Vec<String>,
}

impl Board {
    /// Run one criterion, print its line and remember failures. `budget`
    /// bounds the wall time of `f` alone.
    fn check(&mut self, n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let secs = start.elapsed();
        let result = match result {
            Ok(d) if secs > budget => Err(format!("{d}; took {:.1}s, over the {:.0}s budget", secs.as_secs_f64(), budget.as_secs_f64())),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {name}: {tag} ({detail}; {:.1}s)", secs.as_secs_f64());
        if result.is_err() {
            self.failures.push(format!("criterion {n} {name}: {detail}"));
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::uniform(&[c, h, w], -1.0, 1.0, rng)).unwrap()
}

// Criterion 1

fn mask_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..1000 {
        let c = if rng.random_bool(0.5) { 3 } else { 1 };
        let (h, w) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let (ph, pw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let r = PatchRegion::new(rng.random_range(0..=h - ph), rng.random_range(0..=w - pw), ph, pw);
        let x = random_image(&mut rng, c, h, w);
        let p = random_image(&mut rng, c, ph, pw);
        let out = apply_patch(&x, &p, &r).map_err(|e| e.to_string())?;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let inside = y >= r.top && y < r.top + ph && xx >= r.left && xx < r.left + pw;
                    let expect = if inside { p.get(ch, y - r.top, xx - r.left) } else { x.get(ch, y, xx) };
                    ensure(out.get(ch, y, xx).to_bits() == expect.to_bits(), || {
                        format!("trial {trial}: pixel ({ch},{y},{xx}) differs")
                    })?;
                }
            }
        }
    }
    Ok("1000 random triples bit-exact".into())
}

// Criterion 2

fn tv_oracle(p: &ImageTensor) -> f64 {
    let (c, h, w) = p.dims();
    let mut vertical = 0.0;
    let mut horizontal = 0.0;
    for ch in 0..c {
        for y in 1..h {
            for x in 0..w {
                vertical += (p.get(ch, y, x) - p.get(ch, y - 1, x)).abs();
            }
        }
        for y in 0..h {
            for x in 1..w {
                horizontal += (p.get(ch, y, x) - p.get(ch, y, x - 1)).abs();
            }
        }
    }
    vertical + horizontal
}

fn rec_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (c, h, w) = a.dims();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = a.get(ch, y, x) - b.get(ch, y, x);
                s += d * d;
            }
        }
    }
    s
}

fn nps_oracle(p: &ImageTensor, palette: &[[f64; 3]]) -> f64 {
    let (_, h, w) = p.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut prod = 1.0;
            for color in palette {
                let mut sq = 0.0;
                for k in 0..3 {
                    let v = (p.get(k, y, x) + 1.0) / 2.0 - color[k];
                    sq += v * v;
                }
                prod *= sq.sqrt();
            }
            total += prod;
        }
    }
    total
}

fn margin_oracle(z: &[f64], y: usize, kappa: f64, target: Option<usize>) -> f64 {
    let best_except = |skip: usize| {
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in z.iter().enumerate() {
            if i != skip && v > best {
                best = v;
            }
        }
        best
    };
    let m = match target {
        None => z[y] - best_except(y),
        Some(t) => best_except(t) - z[t],
    };
    if m < -kappa {
        -kappa
    } else {
        m
    }
}

fn as_var_value<F>(p: &ImageTensor, f: F) -> f64
where
    F: for<'g> Fn(stealthpatch_tensor::Var<'g>) -> stealthpatch_tensor::Var<'g>,
{
    let g = Graph::new();
    f(g.constant(p.to_batch())).item()
}

fn random_palette(rng: &mut ChaCha8Rng) -> PrintablePalette {
    let n = rng.random_range(1..=6);
    PrintablePalette::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let default_palette = PrintablePalette::default_palette();
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64, what: &str| -> Result<(), String> {
        let d = (a - b).abs();
        worst = worst.max(d);
        ensure(d <= 1e-9, || format!("{what}: {a} vs oracle {b}"))
    };
    for _ in 0..200 {
        let c = if rng.random_bool(0.7) { 3 } else { 1 };
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let p = random_image(&mut rng, c, h, w);
        let q = random_image(&mut rng, c, h, w);
        let tv = tv_oracle(&p);
        track(tv_loss(&p), tv, "tv_loss")?;
        track(as_var_value(&p, tv_loss_var), tv, "tv_loss_var")?;
        let rec = rec_oracle(&p, &q);
        track(reconstruction_loss(&p, &q).unwrap(), rec, "reconstruction_loss")?;
        let g = Graph::new();
        track(reconstruction_loss_var(g.constant(p.to_batch()), g.constant(q.to_batch())).item(), rec, "reconstruction_loss_var")?;
        if c == 3 {
            let pal = if rng.random_bool(0.5) { default_palette.clone() } else { random_palette(&mut rng) };
            let nps = nps_oracle(&p, pal.colors());
            track(nps_loss(&p, &pal).unwrap(), nps, "nps_loss")?;
            let g = Graph::new();
            track(nps_loss_var(g.constant(p.to_batch()), &pal).unwrap().item(), nps, "nps_loss_var")?;
        }
    }
    for i in 0..100 {
        let k = rng.random_range(2..=10);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = rng.random_range(0..k);
        let target = if i % 2 == 0 { None } else { Some((y + rng.random_range(1..k)) % k) };
        let kappa = if i % 3 == 0 { 0.0 } else { rng.random_range(0.0..5.0) };
        let expect = margin_oracle(&z, y, kappa, target);
        let got = attack_loss(&z, y, kappa, target).unwrap();
        ensure(got.to_bits() == expect.to_bits(), || format!("attack_loss {got} vs hand {expect}"))?;
        let g = Graph::new();
        let v = attack_loss_var(g.constant(Tensor::from_vec(&[1, k], z.clone()).unwrap()), y, kappa, target).unwrap();
        track(v.item(), expect, "attack_loss_var")?;
    }
    Ok(format!("200 inputs within 1e-9 (worst {worst:.1e}), 100 margins exact"))
}

// Criterion 3

const FD_STEP: f64 = 1e-6;

fn central_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.clone();
            a.data_mut()[i] += FD_STEP;
            let mut b = x.clone();
            b.data_mut()[i] -= FD_STEP;
            (f(&a) - f(&b)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn image_of(t: &Tensor) -> ImageTensor {
    let s = t.shape();
    ImageTensor::new(t.reshape(&[s[1], s[2], s[3]]).unwrap()).unwrap()
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let palette = PrintablePalette::default_palette();
    let mut worst = [0.0f64; 4];

    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let x = Tensor::uniform(&[1, 3, h, w], -0.9, 0.9, &mut rng);
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let analytic = g.backward(tv_loss_var(v), &[v])[0].data().to_vec();
        let numeric = central_diff(&x, &|t| tv_oracle(&image_of(t)));
        worst[0] = worst[0].max(rel_err(&analytic, &numeric));
    }

    let mut points = 0;
    while points < 50 {
        let k = rng.random_range(2..=10);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = rng.random_range(0..k);
        let target = if points % 2 == 0 { None } else { Some((y + rng.random_range(1..k)) % k) };
        let kappa = rng.random_range(0.0..3.0);
        // Stay away from the clamp and from argmax switches.
        let skip = target.unwrap_or(y);
        let mut others: Vec<f64> = z.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| *v).collect();
        others.sort_by(|a, b| b.total_cmp(a));
        let margin = margin_oracle(&z, y, f64::INFINITY, target);
        if (margin + kappa).abs() < 1e-3 || (others.len() > 1 && others[0] - others[1] < 1e-3) {
            continue;
        }
        points += 1;
        let t = Tensor::from_vec(&[1, k], z).unwrap();
        let g = Graph::new();
        let v = g.leaf(t.clone());
        let analytic = g.backward(attack_loss_var(v, y, kappa, target).unwrap(), &[v])[0].data().to_vec();
        let numeric = central_diff(&t, &|t| margin_oracle(t.data(), y, kappa, target));
        worst[1] = worst[1].max(rel_err(&analytic, &numeric));
    }

    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = Tensor::uniform(&[1, 3, h, w], -0.95, 0.95, &mut rng);
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let analytic = g.backward(nps_loss_var(v, &palette).unwrap(), &[v])[0].data().to_vec();
        let numeric = central_diff(&x, &|t| nps_oracle(&image_of(t), palette.colors()));
        worst[2] = worst[2].max(rel_err(&analytic, &numeric));
    }

    let net = NetConfig { base_channels: 4, generator_blocks: 2, critic_blocks: 3 };
    for _ in 0..50 {
        let critic = Critic::new(3, &net, &mut rng);
        let real = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let fake = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let eps: f64 = rng.random();
        let penalty_at = |params: &[Tensor]| -> f64 {
            let g = Graph::new();
            let ps: Vec<_> = params.iter().map(|t| g.constant(t.clone())).collect();
            critic_loss_var(&|v| critic.score(&ps, v), g.constant(real.clone()), g.constant(fake.clone()), 1.0, eps, GanObjective::WassersteinGp)
                .unwrap()
                .penalty
                .item()
        };
        let g = Graph::new();
        let ps = nn::bind(&g, &critic);
        let loss = critic_loss_var(&|v| critic.score(&ps, v), g.constant(real.clone()), g.constant(fake.clone()), 1.0, eps, GanObjective::WassersteinGp)
            .unwrap();
        let grads = g.backward(loss.penalty, &ps);
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let base: Vec<Tensor> = critic.params().into_iter().cloned().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for (j, t) in base.iter().enumerate() {
            for d in central_diff(t, &|tj| {
                let mut p = base.clone();
                p[j] = tj.clone();
                penalty_at(&p)
            }) {
                numeric.push(d);
            }
        }
        worst[3] = worst[3].max(rel_err(&analytic, &numeric));
    }
    let names = ["tv", "attack", "nps", "gp-penalty"];
    for (n, e) in names.iter().zip(worst) {
        ensure(e < 1e-3, || format!("{n} worst relative error {e:.2e}"))?;
    }
    Ok(format!(
        "50 points each, worst relative errors tv {:.1e}, attack {:.1e}, nps {:.1e}, gp {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// Criterion 4

fn pyramid_geometry() -> Outcome {
    let sides: Vec<usize> = (0..=3).map(|i| level_side(40, 3, i, 0.75)).collect();
    ensure(sides == [30, 33, 36, 40], || format!("side 40, K 3 gave {sides:?}"))?;
    // The same sides come out of a real crop.
    let x = ImageTensor::filled(3, 96, 96, 0.1).unwrap();
    let r = PatchRegion::new(28, 28, 40, 40);
    let pc = crop_patch_and_context(&x, &r, 2.0).map_err(|e| e.to_string())?;
    let pyr = build_pyramid(&pc.patch, &pc.context, pc.patch_offset(&r), 3, 0.75, 12).map_err(|e| e.to_string())?;
    let built: Vec<usize> = pyr.levels.iter().map(|l| l.patch_dims().0).collect();
    ensure(built == sides, || format!("built pyramid {built:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..50 {
        let side = rng.random_range(4..=256);
        let k = rng.random_range(1..=6);
        let r = 0.75f64.powf(1.0 / k as f64);
        for i in 0..=k {
            // Coarsest and finest levels are exact rationals (3 side / 4 and
            // side), so use integer half-up rounding there; the levels in
            // between are irrational and never sit on a .5 tie.
            let expect = match i {
                0 => (3 * side + 2) / 4,
                _ if i == k => side,
                _ => (side as f64 * r.powi((k - i) as i32)).round() as usize,
            };
            let got = level_side(side, k, i, 0.75);
            ensure(got == expect, || format!("side {side}, K {k}, level {i}: {got} vs {expect}"))?;
        }
    }
    Ok("[30, 33, 36, 40] and 50 random (side, K) pairs".into())
}

// Criterion 5

fn exhaustive_location(map: &Tensor, h: usize, w: usize) -> PatchRegion {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for top in 0..=mh - h {
        for left in 0..=mw - w {
            let mut s = 0.0;
            for y in top..top + h {
                for x in left..left + w {
                    s += map.data()[y * mw + x];
                }
            }
            if s > best.0 {
                best = (s, top, left);
            }
        }
    }
    PatchRegion::new(best.1, best.2, h, w)
}

fn location_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ties = 0;
    for i in 0..100 {
        let (mh, mw) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (h, w) = (rng.random_range(1..=mh), rng.random_range(1..=mw));
        // Small integers give exact sums and many tied windows.
        let integer = i % 2 == 0;
        let values: Vec<f64> = match i {
            0 => vec![0.0; mh * mw],
            2 => vec![1.0; mh * mw],
            _ if integer => (0..mh * mw).map(|_| rng.random_range(0..3) as f64).collect(),
            _ => (0..mh * mw).map(|_| rng.random::<f64>()).collect(),
        };
        let map = Tensor::from_vec(&[mh, mw], values).unwrap();
        let expect = exhaustive_location(&map, h, w);
        let got = select_location(&AttentionMap::new(map.clone(), "oracle").unwrap(), h, w).map_err(|e| e.to_string())?;
        ensure(got == expect, || format!("map {i} ({mh}x{mw}, window {h}x{w}): {got:?} vs {expect:?}"))?;
        if integer {
            let sums = stealthpatch_core::sensitivity::window_sums(&map, h, w).unwrap();
            let top = sums.max();
            if sums.data().iter().filter(|&&s| s == top).count() > 1 {
                ties += 1;
            }
        }
    }
    Ok(format!("100 maps match exhaustive search, {ties} with tied maxima"))
}

// Shared desk fixture for criteria 6 to 11

struct Victims {
    surrogate: TrainedVictim,
    transfer: TrainedVictim,
}

fn train_victims() -> Victims {
    let train = synthetic_shapes(1, 0, 3000, 32);
    let test = synthetic_shapes(1, 1_000_000, 1000, 32);
    let fit = |id: &str, arch| train_desk_classifier(id, &train, &test, &Recipe { arch, ..Recipe::default() }, 0.8).unwrap();
    Victims { surrogate: fit("convnet-a", Arch::ConvnetA), transfer: fit("widenet-b", Arch::WidenetB) }
}

/// The first `n` held-out images the surrogate classifies correctly.
fn fixture_images(v: &Victims, n: usize) -> Vec<(ImageTensor, usize)> {
    let test = synthetic_shapes(1, 1_000_000, 1000, 32);
    test.images
        .into_iter()
        .zip(test.labels)
        .filter(|(x, y)| predict(&v.surrogate.model, x).unwrap().top_class == *y)
        .take(n)
        .collect()
}

fn desk_config(true_class: usize) -> TrainConfig {
    let mut cfg = TrainConfig { epochs_per_scale: 200, true_class: Some(true_class), ..TrainConfig::default() };
    cfg.net.base_channels = 16;
    cfg.weights.kappa = 15.0;
    cfg
}

#[derive(Default)]
struct Counter {
    critic: usize,
    generator: usize,
}

impl TrainObserver for Counter {
    fn wants_steps(&self) -> bool {
        true
    }
    fn critic_step(&mut self, _: &ScalePair, _: &CriticStep) {
        self.critic += 1;
    }
    fn generator_step(&mut self, _: &ScalePair, _: &GeneratorStep) {
        self.generator += 1;
    }
}

fn freeze_discipline(v: &Victims, x: &ImageTensor, y: usize) -> Outcome {
    let mut cfg = desk_config(y);
    cfg.epochs_per_scale = 5;
    cfg.k = 1;
    cfg.net.base_channels = 8;
    let model = &v.surrogate.model;
    let victim_sum = Module::checksum(model);
    let (plan, mut stack) = trainer::plan(x, model, &cfg).map_err(|e| e.to_string())?;
    let mut counter = Counter::default();
    let mut logs = Vec::new();
    let mut frozen_sums = Vec::new();
    for i in 0..=cfg.k {
        logs.push(trainer::train_scale(&mut stack, i, model, x, &plan.region, plan.goal, &cfg, &mut counter).map_err(|e| e.to_string())?);
        frozen_sums.push(stack.pairs[i].checksum());
        for (j, sum) in frozen_sums.iter().enumerate() {
            ensure(&stack.pairs[j].checksum() == sum && stack.pairs[j].frozen, || format!("scale {j} changed after training scale {i}"))?;
        }
    }
    let expect_d = (cfg.k + 1) * cfg.epochs_per_scale * cfg.critic_steps;
    let expect_g = (cfg.k + 1) * cfg.epochs_per_scale * cfg.generator_steps;
    let logged_d: usize = logs.iter().map(|l| l.critic_updates).sum();
    let logged_g: usize = logs.iter().map(|l| l.generator_updates).sum();
    ensure(counter.critic == expect_d && logged_d == expect_d, || format!("critic updates {} / {logged_d}, expected {expect_d}", counter.critic))?;
    ensure(counter.generator == expect_g && logged_g == expect_g, || {
        format!("generator updates {} / {logged_g}, expected {expect_g}", counter.generator)
    })?;
    ensure(Module::checksum(model) == victim_sum, || "victim parameters changed".into())?;
    Ok(format!("frozen checksums unchanged, {expect_d} critic and {expect_g} generator updates"))
}

struct DeskPass {
    outcomes: Vec<TrainOutcome>,
    report: AttackReport,
    pgd: Vec<DiffSummary>,
    train_secs: f64,
    eval_secs: f64,
}

const TRAINED: usize = 10;
const PGD_IMAGES: usize = 15;

fn desk_pass(v: &Victims, fixtures: &[(ImageTensor, usize)]) -> DeskPass {
    let t = Instant::now();
    let outcomes: Vec<TrainOutcome> = fixtures[..TRAINED]
        .iter()
        .map(|(x, y)| train_all(x, &v.surrogate.model, &desk_config(*y), None, &mut Quiet).unwrap())
        .collect();
    let train_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let cfg = EvalConfig { samples: 100, seed: 0, ..EvalConfig::default() };
    let models: [&dyn Classifier; 2] = [&v.surrogate.model, &v.transfer.model];
    let images = outcomes
        .iter()
        .zip(fixtures)
        .enumerate()
        .map(|(i, (o, (x, _)))| evaluate_image(&format!("fixture-{i}"), &o.stack, &models, x, &o.plan.region, o.plan.goal, &cfg).unwrap())
        .collect();
    let report = AttackReport::new("acceptance", &outcomes[0].stack.config_hash, &cfg, images).unwrap();
    let eps = Epsilon::new(cfg.pgd.epsilon_8bit).unwrap().internal();
    let pgd = fixtures[..PGD_IMAGES]
        .iter()
        .map(|(x, y)| {
            let goal = AttackGoal { true_class: *y, target: None };
            let adv = pgd_attack(&v.surrogate.model, x, eps, cfg.pgd.steps, eps * cfg.pgd.step_fraction, goal).unwrap();
            diff_distribution(x, &adv, None, eps).unwrap()
        })
        .collect();
    DeskPass { outcomes, report, pgd, train_secs, eval_secs: t.elapsed().as_secs_f64() }
}

fn pooled(report: &AttackReport, model_index: usize, images: usize) -> (usize, usize) {
    report.images[..images].iter().map(|e| &e.rates[model_index]).fold((0, 0), |(s, n), r| {
        if r.excluded.is_some() {
            (s, n)
        } else {
            (s + r.successes, n + r.samples)
        }
    })
}

fn white_box(v: &Victims, pass: &DeskPass) -> Outcome {
    let acc = v.surrogate.test_accuracy;
    ensure(acc >= 0.8, || format!("surrogate accuracy {acc:.3} below 0.80"))?;
    let (s, n) = pooled(&pass.report, 0, 5);
    let rate = s as f64 / n as f64;
    let per: Vec<usize> = pass.report.images[..5].iter().map(|e| e.rates[0].successes).collect();
    ensure(rate >= 0.70, || format!("success {s}/{n} = {rate:.3} < 0.70, per image {per:?}"))?;
    Ok(format!(
        "victim accuracy {acc:.3}, success {s}/{n} = {rate:.3} >= 0.70, per image {per:?}, training {:.0}s for {TRAINED} images",
        pass.train_secs
    ))
}

fn transfer(v: &Victims, pass: &DeskPass) -> Outcome {
    let (s, n) = pooled(&pass.report, 1, 5);
    ensure(n > 0, || "transfer model misclassifies every clean fixture image".into())?;
    let rate = s as f64 / n as f64;
    let per: Vec<String> = pass.report.images[..5]
        .iter()
        .map(|e| e.rates[1].rate.map_or("excluded".into(), |r| format!("{r:.2}")))
        .collect();
    ensure(rate >= 0.20, || format!("transfer {s}/{n} = {rate:.3} < 0.20, per image {per:?}"))?;
    Ok(format!("{} accuracy {:.3}, transfer {s}/{n} = {rate:.3} >= 0.20, per image {per:?}", v.transfer.model.id, v.transfer.test_accuracy))
}

fn conspicuousness(pass: &DeskPass) -> Outcome {
    let mut patch: Vec<f64> = pass.report.images.iter().map(|e| e.conspicuousness_patch.ratio).collect();
    let mut base: Vec<f64> = pass.report.images.iter().map(|e| e.conspicuousness_baseline.ratio).collect();
    let (mp, mb) = (median(&mut patch).unwrap(), median(&mut base).unwrap());
    ensure(mp < mb, || format!("median patch ratio {mp:.3} >= checkerboard {mb:.3}"))?;
    Ok(format!("median ratio {mp:.3} < checkerboard {mb:.3} over {TRAINED} images, evaluation {:.0}s", pass.eval_secs))
}

fn patch_vs_perturbation(pass: &DeskPass) -> Outcome {
    let eps = pass.report.epsilon_internal;
    ensure(eps == 16.0 / 255.0, || format!("internal epsilon {eps}"))?;
    for (i, d) in pass.pgd.iter().enumerate() {
        ensure(d.max_abs <= eps && d.exceed_fraction == 0.0, || format!("PGD image {i}: max |diff| {} > {eps}", d.max_abs))?;
    }
    let mut fractions = Vec::new();
    for e in &pass.report.images {
        let d = &e.patch_diff;
        ensure(d.max_abs_outside == Some(0.0), || format!("{}: nonzero diff outside the region", e.image))?;
        ensure(d.exceed_fraction > 0.0, || format!("{}: no in-region pixel exceeds epsilon", e.image))?;
        fractions.push(d.exceed_fraction);
    }
    let min = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "PGD within {eps:.4} on {PGD_IMAGES} images; patches exact outside, in-region exceed fraction >= {min:.2} on {TRAINED} images"
    ))
}

fn pass_hash(pass: &DeskPass) -> String {
    let json = serde_json::to_string(&(pass.report.to_json().unwrap(), &pass.pgd)).unwrap();
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Informational: the 50-epoch moving average of the attack loss at the
/// finest scale, first vs last window, and whether it reached the clamp.
fn attack_trend(pass: &DeskPass) -> String {
    let (mut down, mut clamped) = (0, 0);
    for o in &pass.outcomes {
        let a = &o.logs.last().unwrap().epoch_attack;
        let ma = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (ma(&a[..50]), ma(&a[a.len() - 50..]));
        let kappa = o.plan.weights.kappa;
        if a.iter().any(|&v| v <= -kappa) {
            clamped += 1;
        } else if last < first {
            down += 1;
        }
    }
    format!("attack-loss moving average: {clamped} of {TRAINED} runs reached the clamp, {down} more decreased")
}

#[test]
fn acceptance_criteria() {
    let mut board = Board { failures: Vec::new() };
    let s = Duration::from_secs;
    board.check(1, "mask algebra", s(10), mask_algebra);
    board.check(2, "loss oracles", s(30), loss_oracles);
    board.check(3, "gradient checks", s(120), gradient_checks);
    board.check(4, "pyramid geometry", s(5), pyramid_geometry);
    board.check(5, "location selection", s(30), location_selection);

    let t = Instant::now();
    let victims = train_victims();
    let fixtures = fixture_images(&victims, PGD_IMAGES);
    println!(
        "fixture: victims trained in {:.0}s (accuracy {:.3} / {:.3}), {} images",
        t.elapsed().as_secs_f64(),
        victims.surrogate.test_accuracy,
        victims.transfer.test_accuracy,
        fixtures.len()
    );
    let (x0, y0) = &fixtures[0];
    board.check(6, "freeze discipline and step accounting", s(300), || freeze_discipline(&victims, x0, *y0));

    let first = desk_pass(&victims, &fixtures);
    println!("info: {}", attack_trend(&first));
    board.check(7, "desk-scale white-box success", s(6 * 3600), || white_box(&victims, &first));
    board.check(8, "black-box transfer", s(60), || transfer(&victims, &first));
    board.check(9, "conspicuousness vs checkerboard", s(300), || conspicuousness(&first));
    board.check(10, "patch vs perturbation", s(600), || patch_vs_perturbation(&first));
    board.check(11, "reproducibility", s(6 * 3600), || {
        let second = desk_pass(&victims, &fixtures);
        let (a, b) = (pass_hash(&first), pass_hash(&second));
        ensure(a == b, || format!("report hashes differ: {a} vs {b}"))?;
        Ok(format!("repeat of 7 to 10 gives identical report hash {}", &a[..16]))
    });

    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.json");
    let _ = std::fs::write(&out, first.report.to_json().unwrap());
    println!("report written to {}", out.display());
    assert!(board.failures.is_empty(), "failed:\n{}", board.failures.join("\n"));
}

#[test]
fn full_region_patch_replaces_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_image(&mut rng, 3, 5, 6);
    let p = random_image(&mut rng, 3, 5, 6);
    assert_eq!(apply_patch(&x, &p, &PatchRegion::new(0, 0, 5, 6)).unwrap(), p);
}
