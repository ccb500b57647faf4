//! Labeled image sets for desk-scale victims: a procedural 10-class shapes
//! set, a directory format, and the victim training recipe.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use stealthpatch_tensor::nn::{self, Module, Params};
use stealthpatch_tensor::optim::{Adam, AdamConfig};
use stealthpatch_tensor::{par, Graph, Tensor};

use crate::error::{CoreError, Result};
use crate::imaging::{self, ImageTensor};
use crate::rng;
use crate::victim::{self, Arch, Classifier, ConvNet};

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "h-bars", "v-bars", "diagonal", "x-cross", "two-blobs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_labels: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn inside(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    let in_box = dx.abs() < s && dy.abs() < s;
    let band = |t: f64| ((t + 2.0 * s) / (s * 0.5)).floor() as i64 % 2 == 0;
    match class {
        0 => r < s,
        1 => dx.abs().max(dy.abs()) < s * 0.85,
        2 => dy > -s * 0.85 && dy < s * 0.85 && dx.abs() < (dy + s * 0.85) / 1.7,
        3 => r < s && r > s * 0.55,
        4 => (dx.abs() < s * 0.3 && dy.abs() < s) || (dy.abs() < s * 0.3 && dx.abs() < s),
        5 => in_box && band(dy),
        6 => in_box && band(dx),
        7 => in_box && band((dx + dy) * 0.7),
        8 => in_box && (dx.abs() - dy.abs()).abs() < s * 0.3,
        9 => {
            let b = |cx: f64| ((dx - cx).powi(2) + dy * dy).sqrt() < s * 0.45;
            b(-s * 0.55) || b(s * 0.55)
        }
        _ => unreachable!("10 classes"),
    }
}

/// Image `index` of the procedural shapes set for `seed`: a shape of a random
/// class, size, position and color over a noisy two-color gradient.
pub fn shape_image(seed: u64, index: u64, side: usize) -> (ImageTensor, usize) {
    let mut r = rng::stream(seed, "shapes", index);
    let class = r.random_range(0..SHAPE_CLASSES.len());
    let sidef = side as f64;
    let s = r.random_range(0.2..0.3) * sidef;
    let cx = r.random_range(s + 1.0..sidef - s - 1.0);
    let cy = r.random_range(s + 1.0..sidef - s - 1.0);
    let bg_a: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.7..0.7));
    let bg_b: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.7..0.7));
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let sign = if bg_a.iter().sum::<f64>() + bg_b.iter().sum::<f64>() > 0.0 { -1.0 } else { 1.0 };
    let fg: [f64; 3] = std::array::from_fn(|c| ((bg_a[c] + bg_b[c]) / 2.0 + sign * r.random_range(0.6..1.1)).clamp(-1.0, 1.0));
    let noise: Vec<f64> = (0..3 * side * side).map(|_| r.random_range(-0.08..0.08)).collect();
    let img = ImageTensor::from_fn(3, side, side, |c, y, x| {
        let t = (((x as f64 / sidef - 0.5) * gx + (y as f64 / sidef - 0.5) * gy) + 0.71) / 1.42;
        let bg = bg_a[c] * (1.0 - t) + bg_b[c] * t;
        // 2x2 supersampled coverage.
        let mut cover = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            if inside(class, x as f64 + ox - cx, y as f64 + oy - cy, s) {
                cover += 0.25;
            }
        }
        (bg * (1.0 - cover) + fg[c] * cover + noise[(c * side + y) * side + x]).clamp(-1.0, 1.0)
    })
    .expect("values clamped into range");
    (img, class)
}

/// `count` procedural images starting at index `start`.
pub fn synthetic_shapes(seed: u64, start: u64, count: usize, side: usize) -> Dataset {
    let pairs = par::map_range(count, |i| shape_image(seed, start + i as u64, side));
    let (images, labels) = pairs.into_iter().unzip();
    Dataset {
        images,
        labels,
        class_labels: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
}

/// Write `ds` as PNGs plus `labels.csv` (`file,label`) and `classes.txt`.
pub fn save_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let file = format!("{i:06}.png");
        imaging::save_png(img, &dir.join(&file))?;
        w.serialize(LabelRow { file, label })?;
    }
    w.flush().map_err(|e| CoreError::io(dir.join("labels.csv"), e))?;
    let classes = dir.join("classes.txt");
    fs::write(&classes, ds.class_labels.join("\n") + "\n").map_err(|e| CoreError::io(classes, e))
}

/// Read a directory written by [`save_dir`].
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CoreError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let classes_path = dir.join("classes.txt");
    let class_labels: Vec<String> = fs::read_to_string(&classes_path)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", classes_path.display())))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect();
    let labels_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", labels_path.display())))?;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for row in rdr.deserialize() {
        let row: LabelRow = row.map_err(|e| CoreError::Dataset(format!("{}: {e}", labels_path.display())))?;
        if row.label >= class_labels.len() {
            return Err(CoreError::Dataset(format!(
                "{}: label {} out of range for {} classes",
                row.file,
                row.label,
                class_labels.len()
            )));
        }
        let img = imaging::load_image(&dir.join(&row.file))
            .map_err(|e| CoreError::Dataset(format!("{}: {e}", row.file)))?;
        if let Some(first) = images.first().map(ImageTensor::dims) {
            if img.dims() != first {
                return Err(CoreError::Dataset(format!("{}: size {:?} differs from {:?}", row.file, img.dims(), first)));
            }
        }
        images.push(img);
        labels.push(row.label);
    }
    if images.is_empty() {
        return Err(CoreError::Dataset(format!("{} lists no images", labels_path.display())));
    }
    Ok(Dataset { images, labels, class_labels })
}

/// Victim training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub arch: Arch,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            arch: Arch::ConvnetA,
            seed: 0,
            epochs: 6,
            batch_size: 32,
            learning_rate: 2e-3,
        }
    }
}

impl Recipe {
    /// SHA-256 of the recipe and the dataset identity.
    pub fn hash(&self, dataset_tag: &str) -> String {
        let snapshot = serde_json::json!({ "recipe": self, "dataset": dataset_tag });
        crate::generator::config_hash(&snapshot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedVictim {
    pub model: ConvNet,
    pub test_accuracy: f64,
    pub log: Vec<EpochLog>,
}

/// Fraction of `ds` classified correctly.
pub fn accuracy(model: &dyn Classifier, ds: &Dataset) -> Result<f64> {
    let chunks: Vec<usize> = (0..ds.len()).step_by(64).collect();
    let correct = par::map_collect(&chunks, |&start| -> Result<usize> {
        let end = (start + 64).min(ds.len());
        let preds = victim::predict_batch(model, &ds.images[start..end])?;
        Ok(preds.iter().zip(&ds.labels[start..end]).filter(|(p, &y)| p.top_class == y).count())
    });
    let total: usize = correct.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
    Ok(total as f64 / ds.len() as f64)
}

const SHARD: usize = 8;

/// Train `recipe.arch` with mini-batch Adam on cross-entropy. Each batch is
/// split into fixed shards whose gradients are summed in order, so results do
/// not depend on the worker count. Fails if test accuracy ends below `floor`.
pub fn train_desk_classifier(
    id: &str,
    train: &Dataset,
    test: &Dataset,
    recipe: &Recipe,
    floor: f64,
) -> Result<TrainedVictim> {
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::Dataset("training and test sets must be nonempty".into()));
    }
    if recipe.batch_size == 0 || recipe.epochs == 0 || !(recipe.learning_rate > 0.0) {
        return Err(CoreError::InvalidValue(format!("invalid recipe {recipe:?}")));
    }
    let dims = train.images[0].dims();
    let classes = train.class_labels.len();
    let mut model = ConvNet::new(id, recipe.arch, dims, classes, &mut rng::stream(recipe.seed, "victim-init", 0))?;
    let adam = AdamConfig {
        lr: recipe.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt = Adam::new(adam, model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng::stream(recipe.seed, "victim-shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(recipe.batch_size) {
            let shards: Vec<&[usize]> = batch.chunks(SHARD).collect();
            let results = par::map_collect(&shards, |idx| -> Result<(Vec<Tensor>, f64, usize)> {
                let imgs: Vec<ImageTensor> = idx.iter().map(|&i| train.images[i].clone()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let g = Graph::new();
                let params = nn::bind(&g, &model);
                let logits = model.forward_with(&mut Params::new(&params), g.constant(victim::stack_images(&imgs)?));
                let hits = logits
                    .value()
                    .data()
                    .chunks(classes)
                    .zip(&labels)
                    .filter(|(row, &y)| victim::argmax(row) == y)
                    .count();
                let loss = nn::cross_entropy(logits, &labels).scale(idx.len() as f64 / batch.len() as f64);
                Ok((g.backward(loss, &params), loss.item(), hits))
            });
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (g, l, hits) = r?;
                loss_sum += l * batch.len() as f64;
                correct += hits;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.axpy(1.0, b)?;
                        }
                    }
                }
            }
            opt.update(model.params_mut(), &grads.expect("nonempty batch"))?;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        });
    }
    let test_accuracy = accuracy(&model, test)?;
    if test_accuracy < floor {
        let lines: Vec<String> = log
            .iter()
            .map(|e| format!("epoch {} loss {:.4} train acc {:.3}", e.epoch, e.mean_loss, e.train_accuracy))
            .collect();
        return Err(CoreError::Model(format!(
            "`{id}` reached test accuracy {test_accuracy:.3}, below the floor {floor:.2}\n{}",
            lines.join("\n")
        )));
    }
    Ok(TrainedVictim { model, test_accuracy, log })
}
