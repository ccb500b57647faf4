//! Victim classifiers: a uniform logits/gradient interface, the two desk-scale
//! architectures, small analytic models for testing, and an on-disk registry.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use stealthpatch_tensor::nn::{Conv2d, Linear, Module, Params};
use stealthpatch_tensor::{io as tio, ConvGeom, Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::imaging::ImageTensor;

/// Environment variable naming the registry root directory.
pub const REGISTRY_ENV: &str = "STEALTHPATCH_REGISTRY";

/// A classifier over `[N, C, H, W]` images in `[-1, 1]`.
pub trait Classifier: Send + Sync {
    fn id(&self) -> &str;

    fn input_dims(&self) -> (usize, usize, usize);

    fn num_classes(&self) -> usize;

    fn supports_gradients(&self) -> bool {
        true
    }

    /// Logits `[N, K]` recorded on `x`'s graph. Models without gradient
    /// access return [`CoreError::Unsupported`].
    fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>>;

    /// Plain logits for a batch.
    fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(self, x)?;
        let g = Graph::new();
        let out = self.forward(g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Hash of everything that determines the model's outputs.
    fn checksum(&self) -> String;
}

fn check_batch<M: Classifier + ?Sized>(model: &M, x: &Tensor) -> Result<()> {
    let (c, h, w) = model.input_dims();
    let s = x.shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(CoreError::dims("model input", format!("[N, {c}, {h}, {w}]"), s));
    }
    Ok(())
}

/// Logits and the argmax class (lowest index on ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub top_class: usize,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rows(logits: &Tensor) -> Vec<Prediction> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| Prediction {
            logits: r.to_vec(),
            top_class: argmax(r),
        })
        .collect()
}

pub fn predict(model: &dyn Classifier, x: &ImageTensor) -> Result<Prediction> {
    Ok(rows(&model.logits_batch(&x.to_batch())?).remove(0))
}

pub fn predict_batch(model: &dyn Classifier, xs: &[ImageTensor]) -> Result<Vec<Prediction>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(rows(&model.logits_batch(&stack_images(xs)?)?))
}

/// `[N, C, H, W]` batch from equally sized images.
pub fn stack_images(xs: &[ImageTensor]) -> Result<Tensor> {
    let (c, h, w) = xs[0].dims();
    let mut data = Vec::with_capacity(xs.len() * c * h * w);
    for x in xs {
        if x.dims() != (c, h, w) {
            return Err(CoreError::dims("batch image", (c, h, w), x.dims()));
        }
        data.extend_from_slice(x.data());
    }
    Ok(Tensor::from_vec(&[xs.len(), c, h, w], data)?)
}

/// `d logit[class] / d x`, shaped like `x`.
pub fn gradients(model: &dyn Classifier, x: &ImageTensor, class_index: usize) -> Result<Tensor> {
    if !model.supports_gradients() {
        return Err(CoreError::Unsupported(format!("model `{}` exposes no gradients", model.id())));
    }
    if class_index >= model.num_classes() {
        return Err(CoreError::InvalidValue(format!(
            "class {class_index} out of range for {} classes",
            model.num_classes()
        )));
    }
    let batch = x.to_batch();
    check_batch(model, &batch)?;
    let g = Graph::new();
    let xv = g.leaf(batch);
    let logits = model.forward(xv)?;
    let score = logits.reshape(&[model.num_classes()]).gather(&[class_index]).sum();
    Ok(g.backward(score, &[xv]).remove(0).reshape(&[x.channels(), x.height(), x.width()])?)
}

/// Desk-scale architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Three stride-2 3x3 convs (16, 32, 64 channels) and a linear head.
    ConvnetA,
    /// A stride-2 5x5 conv then two stride-2 3x3 convs (24, 48, 48) and a
    /// linear head.
    WidenetB,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::ConvnetA => "convnet-a",
            Arch::WidenetB => "widenet-b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convnet-a" => Ok(Arch::ConvnetA),
            "widenet-b" => Ok(Arch::WidenetB),
            other => Err(CoreError::InvalidValue(format!(
                "unknown architecture `{other}` (expected convnet-a or widenet-b)"
            ))),
        }
    }

    /// `(in, out, kernel, stride, pad)` per conv layer.
    fn layers(&self, channels: usize) -> Vec<(usize, usize, usize, usize, usize)> {
        match self {
            Arch::ConvnetA => vec![(channels, 16, 3, 2, 1), (16, 32, 3, 2, 1), (32, 64, 3, 2, 1)],
            Arch::WidenetB => vec![(channels, 24, 5, 2, 2), (24, 48, 3, 2, 1), (48, 48, 3, 2, 1)],
        }
    }
}

/// Conv stack with ReLUs, flattened into a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub id: String,
    pub arch: Arch,
    pub input_dims: (usize, usize, usize),
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

impl ConvNet {
    pub fn new<R: Rng + ?Sized>(
        id: impl Into<String>,
        arch: Arch,
        input_dims: (usize, usize, usize),
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, mut h, mut w) = input_dims;
        let mut convs = Vec::new();
        let mut ch = c;
        for (cin, cout, k, stride, pad) in arch.layers(c) {
            let geom = ConvGeom::new(stride, pad);
            h = geom.out_len(h, k).ok_or_else(|| CoreError::dims("model input", "larger image", input_dims))?;
            w = geom.out_len(w, k).ok_or_else(|| CoreError::dims("model input", "larger image", input_dims))?;
            convs.push(Conv2d::he(cin, cout, k, geom, rng));
            ch = cout;
        }
        Ok(Self {
            id: id.into(),
            arch,
            input_dims,
            convs,
            head: Linear::new(ch * h * w, num_classes, rng),
        })
    }

    pub fn forward_with<'g>(&self, p: &mut Params<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(p, h).relu();
        }
        let s = h.shape();
        let flat = h.reshape(&[s[0], s[1] * s[2] * s[3]]);
        self.head.forward(p, flat)
    }
}

impl Module for ConvNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }
}

fn bind_constants<'g>(g: &'g Graph, m: &dyn Module) -> Vec<Var<'g>> {
    m.params().into_iter().map(|t| g.constant(t.clone())).collect()
}

impl Classifier for ConvNet {
    fn id(&self) -> &str {
        &self.id
    }
    fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }
    fn num_classes(&self) -> usize {
        self.head.bias.len()
    }
    fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != self.input_dims {
            return Err(CoreError::dims("model input", self.input_dims, &s));
        }
        let params = bind_constants(x.graph(), self);
        Ok(self.forward_with(&mut Params::new(&params), x))
    }
    fn checksum(&self) -> String {
        Module::checksum(self)
    }
}

/// `logits = W x + b` on the flattened image; `weight` is `[K, C*H*W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub id: String,
    pub input_dims: (usize, usize, usize),
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn new(id: impl Into<String>, input_dims: (usize, usize, usize), weight: Tensor, bias: Tensor) -> Result<Self> {
        let n = input_dims.0 * input_dims.1 * input_dims.2;
        if weight.ndim() != 2 || weight.shape()[1] != n || bias.shape() != [weight.shape()[0]] {
            return Err(CoreError::dims("linear probe weight/bias", format!("[K, {n}] / [K]"), (weight.shape().to_vec(), bias.shape().to_vec())));
        }
        Ok(Self {
            id: id.into(),
            input_dims,
            weight,
            bias,
        })
    }
}

impl Classifier for LinearProbe {
    fn id(&self) -> &str {
        &self.id
    }
    fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }
    fn num_classes(&self) -> usize {
        self.bias.len()
    }
    fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (c, h, w) = self.input_dims;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(CoreError::dims("model input", self.input_dims, &s));
        }
        let g = x.graph();
        let flat = x.reshape(&[s[0], c * h * w]);
        let k = self.bias.len();
        let y = flat.matmul(g.constant(self.weight.clone()).transpose());
        Ok(y + g.constant(self.bias.reshape(&[1, k])?).expand(&[s[0], k]))
    }
    fn checksum(&self) -> String {
        stealthpatch_tensor::checksum_all([&self.weight, &self.bias])
    }
}

/// Emits the same logits for every input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantModel {
    pub id: String,
    pub input_dims: (usize, usize, usize),
    pub logits: Vec<f64>,
}

impl Classifier for ConstantModel {
    fn id(&self) -> &str {
        &self.id
    }
    fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }
    fn num_classes(&self) -> usize {
        self.logits.len()
    }
    fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let n = x.shape()[0];
        let k = self.logits.len();
        let data = self.logits.iter().copied().cycle().take(n * k).collect();
        Ok(x.graph().constant(Tensor::from_vec(&[n, k], data)?))
    }
    fn checksum(&self) -> String {
        let t = Tensor::from_vec(&[self.logits.len()], self.logits.clone()).expect("1-d");
        t.checksum()
    }
}

/// Logits-only view of another model, for black-box evaluation.
#[derive(Clone)]
pub struct BlackBoxStub {
    pub inner: Arc<dyn Classifier>,
}

impl Classifier for BlackBoxStub {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn input_dims(&self) -> (usize, usize, usize) {
        self.inner.input_dims()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn supports_gradients(&self) -> bool {
        false
    }
    fn forward<'g>(&self, _x: Var<'g>) -> Result<Var<'g>> {
        Err(CoreError::Unsupported(format!(
            "model `{}` is black-box: logits only, no gradients",
            self.id()
        )))
    }
    fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.logits_batch(x)
    }
    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

/// One registry record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub arch: Arch,
    /// Relative to the registry root.
    pub checkpoint: PathBuf,
    pub input_dims: (usize, usize, usize),
    pub class_labels: Vec<String>,
    /// Pixel convention the model was trained with.
    pub preprocessing: String,
    pub recipe_hash: String,
    pub test_accuracy: f64,
    pub param_checksum: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct RegistryManifest {
    models: Vec<RegistryEntry>,
}

/// Directory of model checkpoints indexed by `registry.json`.
#[derive(Clone, Debug)]
pub struct Registry {
    root: PathBuf,
    manifest: RegistryManifest,
}

impl Registry {
    const MANIFEST: &'static str = "registry.json";

    /// Open (or start) a registry at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(Self::MANIFEST);
        let manifest = if path.exists() {
            let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CoreError::Model(format!("{}: {e}", path.display())))?
        } else {
            RegistryManifest::default()
        };
        Ok(Self { root, manifest })
    }

    /// Open the registry named by [`REGISTRY_ENV`].
    pub fn from_env() -> Result<Self> {
        let root = std::env::var_os(REGISTRY_ENV).ok_or_else(|| CoreError::Config {
            key: REGISTRY_ENV.into(),
            expected: "path to a model registry directory".into(),
            problem: "environment variable is not set".into(),
        })?;
        Self::open(PathBuf::from(root))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.manifest.models
    }

    pub fn entry(&self, id: &str) -> Result<&RegistryEntry> {
        self.manifest.models.iter().find(|e| e.id == id).ok_or_else(|| {
            let known: Vec<&str> = self.manifest.models.iter().map(|e| e.id.as_str()).collect();
            CoreError::Model(format!("no model `{id}` in registry {} (known: {known:?})", self.root.display()))
        })
    }

    /// Save `model` and add (or replace) its record.
    pub fn register(&mut self, model: &ConvNet, class_labels: Vec<String>, recipe_hash: String, test_accuracy: f64) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| CoreError::io(&self.root, e))?;
        let rel = PathBuf::from(format!("{}.bin", model.id.replace(['/', '@'], "_")));
        let path = self.root.join(&rel);
        let params = model.params();
        let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
        let named: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(params).collect();
        tio::save(&path, &named).map_err(|e| CoreError::Model(format!("{}: {e}", path.display())))?;
        let entry = RegistryEntry {
            id: model.id.clone(),
            arch: model.arch,
            checkpoint: rel,
            input_dims: model.input_dims,
            class_labels,
            preprocessing: crate::imaging::NORMALIZATION.into(),
            recipe_hash,
            test_accuracy,
            param_checksum: Module::checksum(model),
        };
        self.manifest.models.retain(|e| e.id != entry.id);
        self.manifest.models.push(entry);
        let mpath = self.root.join(Self::MANIFEST);
        fs::write(&mpath, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| CoreError::io(&mpath, e))
    }

    /// Load a registered model, verifying its parameter checksum.
    pub fn load(&self, id: &str) -> Result<ConvNet> {
        let e = self.entry(id)?;
        let path = self.root.join(&e.checkpoint);
        let tensors = tio::load(&path).map_err(|err| CoreError::Model(format!("{}: {err}", path.display())))?;
        let mut scratch = crate::rng::stream(0, "shape-only", 0);
        let mut model = ConvNet::new(e.id.clone(), e.arch, e.input_dims, e.class_labels.len(), &mut scratch)?;
        let dst = model.params_mut();
        if dst.len() != tensors.len() {
            return Err(CoreError::Model(format!("{}: wrong tensor count", path.display())));
        }
        for (d, (_, s)) in dst.into_iter().zip(tensors) {
            if d.shape() != s.shape() {
                return Err(CoreError::Model(format!("{}: tensor shape mismatch", path.display())));
            }
            *d = s;
        }
        if Module::checksum(&model) != e.param_checksum {
            return Err(CoreError::Model(format!("{}: parameter checksum mismatch", path.display())));
        }
        Ok(model)
    }
}
