//! Per-scale generator/critic networks, the coarse-to-fine cascade and stack
//! checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use stealthpatch_tensor::nn::{self, Conv2d, InstanceNorm, Module, Params};
use stealthpatch_tensor::optim::{Adam, AdamConfig};
use stealthpatch_tensor::{io as tio, ConvGeom, Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::imaging::{self, ImageTensor, PyramidLevel, ScalePyramid};
use crate::rng;

/// Network widths and depths shared by every scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Conv-norm-activation blocks before the generator's output conv.
    pub generator_blocks: usize,
    /// Conv blocks in the critic, including its single-channel output conv.
    pub critic_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            generator_blocks: 4,
            critic_blocks: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, v: usize| CoreError::Config {
            key: format!("net.{key}"),
            expected: "integer >= 1".into(),
            problem: format!("got {v}"),
        };
        if self.base_channels == 0 {
            return Err(bad("base_channels", 0));
        }
        if self.generator_blocks == 0 {
            return Err(bad("generator_blocks", 0));
        }
        if self.critic_blocks < 2 {
            return Err(CoreError::Config {
                key: "net.critic_blocks".into(),
                expected: "integer >= 2".into(),
                problem: format!("got {}", self.critic_blocks),
            });
        }
        Ok(())
    }

    /// Side of the square input window seen by one critic output (3x3 convs,
    /// stride 1).
    pub fn critic_receptive_field(&self) -> usize {
        1 + 2 * self.critic_blocks
    }
}

const SLOPE: f64 = 0.2;
const SAME: ConvGeom = ConvGeom { stride: 1, pad: 1 };

/// Image-to-image residual network: conv-norm-activation blocks followed by
/// a zero-initialized output conv and `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub blocks: Vec<(Conv2d, InstanceNorm)>,
    pub head: Conv2d,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(channels: usize, net: &NetConfig, rng: &mut R) -> Self {
        let c = net.base_channels;
        let blocks = (0..net.generator_blocks)
            .map(|b| {
                let cin = if b == 0 { channels } else { c };
                (Conv2d::he(cin, c, 3, SAME, rng), InstanceNorm::new(c))
            })
            .collect();
        Self {
            blocks,
            head: Conv2d::zeros(c, channels, 3, SAME),
        }
    }

    /// `tanh(head(body(input)))`, the residual added to the prior.
    pub fn residual<'g>(&self, p: &mut Params<'_, 'g>, input: Var<'g>) -> Var<'g> {
        let mut h = input;
        for (conv, norm) in &self.blocks {
            let y = conv.forward(p, h);
            h = norm.forward(p, y).leaky_relu(SLOPE);
        }
        self.head.forward(p, h).tanh()
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        for (c, n) in &self.blocks {
            v.extend(c.params());
            v.extend(n.params());
        }
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for (c, n) in &mut self.blocks {
            v.extend(c.params_mut());
            v.extend(n.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Fully convolutional critic producing a spatial score map; the image score
/// is the map's mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub blocks: Vec<Conv2d>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(channels: usize, net: &NetConfig, rng: &mut R) -> Self {
        let c = net.base_channels;
        let n = net.critic_blocks;
        let blocks = (0..n)
            .map(|b| {
                let cin = if b == 0 { channels } else { c };
                let cout = if b + 1 == n { 1 } else { c };
                Conv2d::he(cin, cout, 3, SAME, rng)
            })
            .collect();
        Self { blocks }
    }

    /// Score map `[N, 1, H, W]`.
    pub fn score_map<'g>(&self, p: &mut Params<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        let last = self.blocks.len() - 1;
        for (b, conv) in self.blocks.iter().enumerate() {
            h = conv.forward(p, h);
            if b < last {
                h = h.leaky_relu(SLOPE);
            }
        }
        h
    }

    pub fn score<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        self.score_map(&mut Params::new(params), x).mean()
    }
}

impl Module for Critic {
    fn params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|c| c.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// Generator/critic pair for one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePair {
    pub scale_index: usize,
    pub generator: Generator,
    pub critic: Critic,
    pub patch_dims: (usize, usize),
    pub context_dims: (usize, usize),
    pub patch_offset: (usize, usize),
    pub noise_amp: f64,
    pub frozen: bool,
    pub generator_opt: Adam,
    pub critic_opt: Adam,
}

impl ScalePair {
    pub fn new(
        level: &PyramidLevel,
        scale_index: usize,
        generator: Generator,
        critic: Critic,
        noise_amp: f64,
        adam: AdamConfig,
    ) -> Self {
        let generator_opt = Adam::new(adam, generator.params());
        let critic_opt = Adam::new(adam, critic.params());
        Self {
            scale_index,
            generator,
            critic,
            patch_dims: level.patch_dims(),
            context_dims: level.context_dims(),
            patch_offset: level.patch_offset,
            noise_amp,
            frozen: false,
            generator_opt,
            critic_opt,
        }
    }

    /// SHA-256 over generator and critic parameters.
    pub fn checksum(&self) -> String {
        stealthpatch_tensor::checksum_all(self.generator.params().into_iter().chain(self.critic.params()))
    }
}

/// Standard-normal noise of `dims` times `amp`, reproducible from `seed`.
pub fn sample_noise(dims: &[usize], amp: f64, seed: u64) -> Result<Tensor> {
    if !(amp >= 0.0 && amp.is_finite()) {
        return Err(CoreError::InvalidValue(format!("noise amplitude must be >= 0, got {amp}")));
    }
    Ok(Tensor::randn(dims, 1.0, &mut rng::stream(seed, "noise", 0)).map(|v| v * amp))
}

/// `clamp(prior + residual(amp * z + prior), -1, 1)` recorded on the tape.
pub fn forward_scale_var<'g>(
    generator: &Generator,
    params: &[Var<'g>],
    z: Var<'g>,
    prior: Var<'g>,
    noise_amp: f64,
) -> Var<'g> {
    let input = z.scale(noise_amp) + prior;
    (prior + generator.residual(&mut Params::new(params), input)).clamp(-1.0, 1.0)
}

/// One cascade step. `z` is `[1, C, h, w]` or `[C, h, w]` unit noise; `prior`
/// is the previous scale's output already upsampled to this scale.
pub fn forward_scale(pair: &ScalePair, z: &Tensor, prior: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = prior.dims();
    if (h, w) != pair.patch_dims {
        return Err(CoreError::dims("prior size", pair.patch_dims, (h, w)));
    }
    if z.len() != c * h * w || z.shape()[z.ndim() - 2..] != [h, w] {
        return Err(CoreError::dims("noise shape", [c, h, w], z.shape()));
    }
    let g = Graph::new();
    let params: Vec<Var> = pair.generator.params().into_iter().map(|t| g.constant(t.clone())).collect();
    let out = forward_scale_var(
        &pair.generator,
        &params,
        g.constant(z.reshape(&[1, c, h, w])?),
        g.constant(prior.to_batch()),
        pair.noise_amp,
    );
    ImageTensor::new(out.value().reshape(&[c, h, w])?)
}

/// Noise source for the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Fresh noise at every scale, drawn from the seed.
    Random,
    /// The stored reconstruction noise.
    Reconstruction,
}

/// Trained cascade plus everything needed to resume or regenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStack {
    pub pyramid: ScalePyramid,
    /// Coarse to fine; shorter than the pyramid while training is in progress.
    pub pairs: Vec<ScalePair>,
    /// Per-scale unit noise for the reconstruction path: a fixed Gaussian at
    /// scale 0, zeros above.
    pub recon_noise: Vec<Tensor>,
    pub original_patch_dims: (usize, usize),
    pub channels: usize,
    pub net: NetConfig,
    pub seed: u64,
    pub config_hash: String,
    pub config_snapshot: serde_json::Value,
}

impl GeneratorStack {
    /// Empty stack over `pyramid`; reconstruction noise is drawn here.
    pub fn new(
        pyramid: ScalePyramid,
        original_patch_dims: (usize, usize),
        net: NetConfig,
        seed: u64,
        config_snapshot: serde_json::Value,
    ) -> Result<Self> {
        net.validate()?;
        let channels = pyramid.levels[0].patch.channels();
        let recon_noise = pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (h, w) = l.patch_dims();
                if i == 0 {
                    Tensor::randn(&[1, channels, h, w], 1.0, &mut rng::stream(seed, "recon-noise", 0))
                } else {
                    Tensor::zeros(&[1, channels, h, w])
                }
            })
            .collect();
        Ok(Self {
            pyramid,
            pairs: Vec::new(),
            recon_noise,
            original_patch_dims,
            channels,
            net,
            seed,
            config_hash: config_hash(&config_snapshot),
            config_snapshot,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.pyramid.levels.len()
    }

    pub fn is_complete(&self) -> bool {
        self.pairs.len() == self.num_scales() && self.pairs.iter().all(|p| p.frozen)
    }

    /// Unit noise for scale `i`.
    pub fn noise(&self, i: usize, seed: u64, mode: NoiseMode) -> Tensor {
        match mode {
            NoiseMode::Reconstruction => self.recon_noise[i].clone(),
            NoiseMode::Random => {
                let (h, w) = self.pyramid.levels[i].patch_dims();
                Tensor::randn(&[1, self.channels, h, w], 1.0, &mut rng::stream(seed, "patch-noise", i as u64))
            }
        }
    }

    /// Input prior of scale `i`: zeros at scale 0, otherwise the upsampled
    /// output of the cascade up to scale `i - 1`.
    pub fn prior(&self, i: usize, seed: u64, mode: NoiseMode) -> Result<ImageTensor> {
        let (h, w) = self.pyramid.levels[0].patch_dims();
        let mut prior = ImageTensor::filled(self.channels, h, w, 0.0)?;
        if i > self.pairs.len() {
            return Err(CoreError::ScaleState(format!(
                "prior for scale {i} needs scales 0..{i}, only {} exist",
                self.pairs.len()
            )));
        }
        for j in 0..i {
            let pair = &self.pairs[j];
            if !pair.frozen {
                return Err(CoreError::ScaleState(format!("scale {j} is not frozen")));
            }
            let out = forward_scale(pair, &self.noise(j, seed, mode), &prior)?;
            let (nh, nw) = self.pyramid.levels[j + 1].patch_dims();
            prior = imaging::upsample(&out, nh, nw)?;
        }
        Ok(prior)
    }

    /// Run the full frozen cascade; the result has the original patch size.
    pub fn generate(&self, seed: u64, mode: NoiseMode) -> Result<ImageTensor> {
        if !self.is_complete() {
            return Err(CoreError::ScaleState(format!(
                "generation needs all {} scales trained and frozen; {} of them are",
                self.num_scales(),
                self.pairs.iter().filter(|p| p.frozen).count()
            )));
        }
        let last = self.num_scales() - 1;
        let prior = self.prior(last, seed, mode)?;
        let out = forward_scale(&self.pairs[last], &self.noise(last, seed, mode), &prior)?;
        let (h, w) = self.original_patch_dims;
        imaging::upsample(&out, h, w)
    }

    /// Checksums of every existing scale, coarse to fine.
    pub fn checksums(&self) -> Vec<String> {
        self.pairs.iter().map(ScalePair::checksum).collect()
    }
}

/// SHA-256 of the canonical JSON form of a config snapshot.
pub fn config_hash(snapshot: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(snapshot).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StackManifest {
    format_version: u32,
    num_scales: usize,
    k: usize,
    ratio: f64,
    coarse_ratio: f64,
    channels: usize,
    original_patch_dims: (usize, usize),
    net: NetConfig,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    trained_scales: usize,
}

#[derive(Serialize, Deserialize)]
struct ScaleManifest {
    scale_index: usize,
    patch_dims: (usize, usize),
    context_dims: (usize, usize),
    patch_offset: (usize, usize),
    noise_amp: f64,
    frozen: bool,
    adam: AdamConfig,
    generator_steps: u64,
    critic_steps: u64,
    checksum: String,
    config_hash: String,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| CoreError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))
}

fn save_bundle(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let names: Vec<String> = (0..tensors.len()).map(|i| format!("t{i}")).collect();
    let named: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors.iter().copied()).collect();
    tio::save(path, &named).map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))
}

fn load_bundle(path: &Path) -> Result<Vec<Tensor>> {
    tio::load(path)
        .map(|v| v.into_iter().map(|(_, t)| t).collect())
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))
}

fn fill_params(dst: Vec<&mut Tensor>, src: Vec<Tensor>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(CoreError::Checkpoint(format!(
            "{what}: expected {} tensors, found {}",
            dst.len(),
            src.len()
        )));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{what}: tensor shape {:?} does not match network shape {:?}",
                s.shape(),
                d.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}

/// Write `stack` under `dir`: `stack.json`, `pyramid.bin` and one
/// `scale_<i>/` directory per existing scale holding `generator.bin`,
/// `critic.bin`, `optimizer.bin`, `recon_noise.bin` and `manifest.json`.
pub fn save_stack(stack: &GeneratorStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let pyr: Vec<&Tensor> = stack
        .pyramid
        .levels
        .iter()
        .flat_map(|l| [l.patch.tensor(), l.context.tensor()])
        .collect();
    save_bundle(&dir.join("pyramid.bin"), &pyr)?;
    let offsets: Vec<Tensor> = stack
        .pyramid
        .levels
        .iter()
        .map(|l| Tensor::from_vec(&[2], vec![l.patch_offset.0 as f64, l.patch_offset.1 as f64]).expect("2 values"))
        .collect();
    save_bundle(&dir.join("pyramid_offsets.bin"), &offsets.iter().collect::<Vec<_>>())?;
    for pair in &stack.pairs {
        let sdir = dir.join(format!("scale_{}", pair.scale_index));
        fs::create_dir_all(&sdir).map_err(|e| CoreError::io(&sdir, e))?;
        save_bundle(&sdir.join("generator.bin"), &pair.generator.params())?;
        save_bundle(&sdir.join("critic.bin"), &pair.critic.params())?;
        let opt: Vec<&Tensor> = [&pair.generator_opt, &pair.critic_opt]
            .iter()
            .flat_map(|o| o.first.iter().chain(&o.second))
            .collect();
        save_bundle(&sdir.join("optimizer.bin"), &opt)?;
        save_bundle(&sdir.join("recon_noise.bin"), &[&stack.recon_noise[pair.scale_index]])?;
        write_json(
            &sdir.join("manifest.json"),
            &ScaleManifest {
                scale_index: pair.scale_index,
                patch_dims: pair.patch_dims,
                context_dims: pair.context_dims,
                patch_offset: pair.patch_offset,
                noise_amp: pair.noise_amp,
                frozen: pair.frozen,
                adam: pair.generator_opt.config,
                generator_steps: pair.generator_opt.step,
                critic_steps: pair.critic_opt.step,
                checksum: pair.checksum(),
                config_hash: stack.config_hash.clone(),
            },
        )?;
    }
    // Written last: a crash mid-save leaves the previous manifest's scale count.
    write_json(
        &dir.join("stack.json"),
        &StackManifest {
            format_version: FORMAT_VERSION,
            num_scales: stack.num_scales(),
            k: stack.pyramid.k,
            ratio: stack.pyramid.ratio,
            coarse_ratio: stack.pyramid.coarse_ratio,
            channels: stack.channels,
            original_patch_dims: stack.original_patch_dims,
            net: stack.net,
            seed: stack.seed,
            config_hash: stack.config_hash.clone(),
            config: stack.config_snapshot.clone(),
            trained_scales: stack.pairs.len(),
        },
    )
}

/// Read a stack written by [`save_stack`]. Any missing, truncated or
/// inconsistent file fails the whole load.
pub fn load_stack(dir: &Path) -> Result<GeneratorStack> {
    let m: StackManifest = read_json(&dir.join("stack.json"))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "stack format version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if config_hash(&m.config) != m.config_hash {
        return Err(CoreError::Checkpoint("stack.json config snapshot does not match its hash".into()));
    }
    let pyr = load_bundle(&dir.join("pyramid.bin"))?;
    let offsets = load_bundle(&dir.join("pyramid_offsets.bin"))?;
    if pyr.len() != 2 * m.num_scales || offsets.len() != m.num_scales {
        return Err(CoreError::Checkpoint(format!(
            "pyramid holds {} tensors and {} offsets for {} scales",
            pyr.len(),
            offsets.len(),
            m.num_scales
        )));
    }
    let mut it = pyr.into_iter();
    let levels = offsets
        .iter()
        .map(|off| {
            let patch = ImageTensor::new(it.next().expect("counted"))?;
            let context = ImageTensor::new(it.next().expect("counted"))?;
            Ok(PyramidLevel {
                patch,
                context,
                patch_offset: (off.data()[0] as usize, off.data()[1] as usize),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pyramid = ScalePyramid {
        levels,
        ratio: m.ratio,
        coarse_ratio: m.coarse_ratio,
        k: m.k,
    };
    let mut stack = GeneratorStack::new(pyramid, m.original_patch_dims, m.net, m.seed, m.config)?;
    for i in 0..m.trained_scales {
        let sdir = dir.join(format!("scale_{i}"));
        let sm: ScaleManifest = read_json(&sdir.join("manifest.json"))?;
        if sm.config_hash != m.config_hash || sm.scale_index != i {
            return Err(CoreError::Checkpoint(format!(
                "{}: manifest belongs to a different run or scale",
                sdir.display()
            )));
        }
        let level = &stack.pyramid.levels[i];
        // Parameter values are overwritten below; the rng only fixes shapes.
        let mut scratch = rng::stream(0, "shape-only", 0);
        let mut generator = Generator::new(stack.channels, &stack.net, &mut scratch);
        let mut critic = Critic::new(stack.channels, &stack.net, &mut scratch);
        fill_params(generator.params_mut(), load_bundle(&sdir.join("generator.bin"))?, "generator.bin")?;
        fill_params(critic.params_mut(), load_bundle(&sdir.join("critic.bin"))?, "critic.bin")?;
        let mut pair = ScalePair::new(level, i, generator, critic, sm.noise_amp, sm.adam);
        if (pair.patch_dims, pair.context_dims, pair.patch_offset) != (sm.patch_dims, sm.context_dims, sm.patch_offset) {
            return Err(CoreError::Checkpoint(format!("scale {i}: geometry disagrees with the pyramid")));
        }
        let mut opt = load_bundle(&sdir.join("optimizer.bin"))?.into_iter();
        for o in [&mut pair.generator_opt, &mut pair.critic_opt] {
            let n = o.first.len();
            let first: Vec<Tensor> = opt.by_ref().take(n).collect();
            let second: Vec<Tensor> = opt.by_ref().take(n).collect();
            fill_params(o.first.iter_mut().collect(), first, "optimizer.bin")?;
            fill_params(o.second.iter_mut().collect(), second, "optimizer.bin")?;
        }
        if opt.next().is_some() {
            return Err(CoreError::Checkpoint("optimizer.bin has extra tensors".into()));
        }
        pair.generator_opt.step = sm.generator_steps;
        pair.critic_opt.step = sm.critic_steps;
        pair.frozen = sm.frozen;
        let mut noise = load_bundle(&sdir.join("recon_noise.bin"))?;
        if noise.len() != 1 || noise[0].shape() != stack.recon_noise[i].shape() {
            return Err(CoreError::Checkpoint(format!("scale {i}: malformed recon_noise.bin")));
        }
        stack.recon_noise[i] = noise.remove(0);
        if pair.checksum() != sm.checksum {
            return Err(CoreError::Checkpoint(format!("scale {i}: parameter checksum mismatch")));
        }
        stack.pairs.push(pair);
    }
    Ok(stack)
}

/// [`load_stack`], then require the stored config snapshot to equal
/// `expected`; a mismatch lists the differing keys.
pub fn load_stack_expecting(dir: &Path, expected: &serde_json::Value) -> Result<GeneratorStack> {
    let stack = load_stack(dir)?;
    if stack.config_hash != config_hash(expected) {
        let mut diffs = Vec::new();
        json_diff("", &stack.config_snapshot, expected, &mut diffs);
        return Err(CoreError::Checkpoint(format!(
            "config hash mismatch with {}; differing keys: {}",
            dir.display(),
            diffs.join(", ")
        )));
    }
    Ok(stack)
}

fn json_diff(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => json_diff(&path, va, vb, out),
                    (va, vb) => out.push(format!("{path} ({} -> {})", show(va), show(vb))),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix} ({a} -> {b})")),
        _ => {}
    }
}

fn show(v: Option<&serde_json::Value>) -> String {
    v.map_or_else(|| "missing".into(), |v| v.to_string())
}

/// Bound parameters and a forward closure for a critic; convenience for
/// tests and evaluation code that score composites.
pub fn critic_score(critic: &Critic, x: &Tensor) -> f64 {
    let g = Graph::new();
    let params = nn::bind(&g, critic);
    critic.score(&params, g.constant(x.clone())).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::build_pyramid;

    fn small_stack(k: usize) -> GeneratorStack {
        let patch = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c + y * x) as f64 * 0.05).sin() * 0.8).unwrap();
        let ctx = ImageTensor::from_fn(3, 16, 16, |c, y, x| ((c * 3 + y + x) as f64 * 0.1).cos() * 0.7).unwrap();
        let pyr = build_pyramid(&patch, &ctx, (4, 4), k, 0.75, 12).unwrap();
        let net = NetConfig { base_channels: 4, ..Default::default() };
        GeneratorStack::new(pyr, (8, 8), net, 11, serde_json::json!({"k": k})).unwrap()
    }

    fn add_frozen_pairs(stack: &mut GeneratorStack) {
        for i in 0..stack.num_scales() {
            let mut r = rng::stream(3, "init", i as u64);
            let mut g = Generator::new(3, &stack.net, &mut r);
            // Non-zero head so the residual matters.
            g.head = Conv2d::he(4, 3, 3, SAME, &mut r);
            let c = Critic::new(3, &stack.net, &mut r);
            let mut pair = ScalePair::new(&stack.pyramid.levels[i], i, g, c, 0.3, AdamConfig::default());
            pair.frozen = true;
            stack.pairs.push(pair);
        }
    }

    #[test]
    fn zero_head_outputs_prior_exactly() {
        let stack = small_stack(3);
        let mut r = rng::stream(1, "t", 0);
        let g = Generator::new(3, &stack.net, &mut r);
        let c = Critic::new(3, &stack.net, &mut r);
        let pair = ScalePair::new(&stack.pyramid.levels[1], 1, g, c, 0.5, AdamConfig::default());
        let (h, w) = pair.patch_dims;
        let prior = ImageTensor::from_fn(3, h, w, |c, y, x| (c as f64 - 1.0) * 0.3 + (y * x) as f64 * 0.001).unwrap();
        let z = sample_noise(&[1, 3, h, w], 1.0, 9).unwrap();
        assert_eq!(forward_scale(&pair, &z, &prior).unwrap(), prior);
        let zero_prior = ImageTensor::filled(3, h, w, 0.0).unwrap();
        assert_eq!(forward_scale(&pair, &z, &zero_prior).unwrap().dims(), (3, h, w));
        assert!(forward_scale(&pair, &z, &ImageTensor::filled(3, h + 1, w, 0.0).unwrap()).is_err());
    }

    #[test]
    fn sample_noise_contract() {
        assert!(sample_noise(&[2, 3], 0.0, 5).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(sample_noise(&[4, 4], 0.7, 5).unwrap(), sample_noise(&[4, 4], 0.7, 5).unwrap());
        assert!(sample_noise(&[1], -1.0, 5).is_err());
        let n = 100_000;
        let t = sample_noise(&[n], 2.0, 42).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard error of the mean is 2/sqrt(n); of the std roughly 2/sqrt(2n).
        assert!(mean.abs() < 3.0 * 2.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 3.0 * 2.0 / (2.0 * n as f64).sqrt(), "std {}", var.sqrt());
    }

    #[test]
    fn generate_requires_frozen_scales_and_is_deterministic() {
        let mut stack = small_stack(2);
        assert!(stack.generate(1, NoiseMode::Random).is_err());
        add_frozen_pairs(&mut stack);
        let a = stack.generate(7, NoiseMode::Random).unwrap();
        assert_eq!(a.dims(), (3, 8, 8));
        assert_eq!(a, stack.generate(7, NoiseMode::Random).unwrap());
        assert_ne!(a, stack.generate(8, NoiseMode::Random).unwrap());
        assert_eq!(
            stack.generate(1, NoiseMode::Reconstruction).unwrap(),
            stack.generate(2, NoiseMode::Reconstruction).unwrap()
        );
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        stack.pairs[1].frozen = false;
        assert!(matches!(stack.generate(7, NoiseMode::Random), Err(CoreError::ScaleState(_))));
    }

    #[test]
    fn degenerate_stack_upsamples_to_original_size() {
        let mut stack = small_stack(0);
        add_frozen_pairs(&mut stack);
        assert_eq!(stack.pairs[0].patch_dims, (6, 6));
        assert_eq!(stack.generate(3, NoiseMode::Random).unwrap().dims(), (3, 8, 8));
    }

    #[test]
    fn save_load_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut stack = small_stack(2);
        add_frozen_pairs(&mut stack);
        save_stack(&stack, dir.path()).unwrap();
        let back = load_stack(dir.path()).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.generate(7, NoiseMode::Random).unwrap(), stack.generate(7, NoiseMode::Random).unwrap());

        let err = load_stack_expecting(dir.path(), &serde_json::json!({"k": 5})).unwrap_err();
        assert!(err.to_string().contains("k (2 -> 5)"), "{err}");

        let gen = dir.path().join("scale_1/generator.bin");
        let bytes = fs::read(&gen).unwrap();
        fs::write(&gen, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_stack(dir.path()), Err(CoreError::Checkpoint(_))));
    }

    #[test]
    fn critic_receptive_field_and_map_shape() {
        let net = NetConfig { base_channels: 3, ..Default::default() };
        assert_eq!(net.critic_receptive_field(), 11);
        let c = Critic::new(3, &net, &mut rng::stream(0, "c", 0));
        let g = Graph::new();
        let p = nn::bind(&g, &c);
        let map = c.score_map(&mut Params::new(&p), g.constant(Tensor::zeros(&[1, 3, 12, 13])));
        assert_eq!(map.shape(), vec![1, 1, 12, 13]);
        // A single-pixel impulse only reaches outputs within the receptive field.
        let mut x = Tensor::zeros(&[1, 3, 13, 13]);
        x.data_mut()[6 * 13 + 6] = 1.0;
        let base = c.score_map(&mut Params::new(&p), g.constant(Tensor::zeros(&[1, 3, 13, 13]))).value();
        let hit = c.score_map(&mut Params::new(&p), g.constant(x)).value();
        for y in 0..13usize {
            for xx in 0..13usize {
                let i = y * 13 + xx;
                if y.abs_diff(6) > 5 || xx.abs_diff(6) > 5 {
                    assert_eq!(hit.data()[i], base.data()[i]);
                }
            }
        }
    }
}
