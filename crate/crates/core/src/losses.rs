//! Scalar objectives of the patch min-max game.
//!
//! Each loss comes in two forms: a `*_var` function that records the
//! computation on an autodiff [`Graph`] for training, and a plain function on
//! [`ImageTensor`]s/slices that evaluates the same formula.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stealthpatch_tensor::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::imaging::ImageTensor;

/// Weights of the generator objective plus the critic's gradient-penalty
/// coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Adversarial (critic) term.
    pub alpha: f64,
    /// Reconstruction term.
    pub beta: f64,
    /// Total variation term.
    pub gamma: f64,
    /// Non-printability term; 0 disables it.
    pub delta_print: f64,
    /// Attack-loss margin.
    pub kappa: f64,
    /// Gradient-penalty coefficient. With 0.1 the critic's scale grows until
    /// its term swamps the attack loss; 10 keeps the two comparable.
    pub gp_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 0.1,
            delta_print: 0.0,
            kappa: 0.0,
            gp_coef: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta_print", self.delta_print),
            ("kappa", self.kappa),
            ("gp_coef", self.gp_coef),
        ];
        for (key, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config {
                    key: format!("weights.{key}"),
                    expected: "finite real >= 0".into(),
                    problem: format!("got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Which adversarial objective the critic and generator play.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanObjective {
    /// Wasserstein critic with gradient penalty.
    #[default]
    WassersteinGp,
    /// Original log-likelihood min-max form on sigmoid(score).
    Saturating,
}

/// Finite set of printable RGB colors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintablePalette {
    colors: Vec<[f64; 3]>,
}

const DEFAULT_PALETTE: &str = include_str!("../assets/palette30.txt");

impl PrintablePalette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(CoreError::InvalidValue("printable palette is empty".into()));
        }
        if let Some(c) = colors.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(CoreError::InvalidValue(format!(
                "palette color {c:?} has a component outside [0, 1]"
            )));
        }
        Ok(Self { colors })
    }

    /// One `r g b` triple per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::InvalidValue(format!("palette line {}: {e}", lineno + 1)))?;
            let [r, g, b] = vals[..] else {
                return Err(CoreError::InvalidValue(format!(
                    "palette line {}: expected 3 values, got {}",
                    lineno + 1,
                    vals.len()
                )));
            };
            colors.push([r, g, b]);
        }
        Self::new(colors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    /// The bundled 30-color stand-in palette.
    pub fn default_palette() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("bundled palette is valid")
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }
}

fn check_logits(len: usize, true_class: usize, target: Option<usize>) -> Result<()> {
    if len < 2 {
        return Err(CoreError::InvalidValue(format!("need at least 2 logits, got {len}")));
    }
    if true_class >= len {
        return Err(CoreError::InvalidValue(format!("true class {true_class} out of range for {len} logits")));
    }
    if let Some(t) = target {
        if t >= len {
            return Err(CoreError::InvalidValue(format!("target class {t} out of range for {len} logits")));
        }
        if t == true_class {
            return Err(CoreError::InvalidValue(format!(
                "targeted attack: target class {t} equals the true class"
            )));
        }
    }
    Ok(())
}

/// Index of the largest logit other than `skip` (lowest index on ties).
fn argmax_excluding(logits: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &z) in logits.iter().enumerate() {
        if i != skip && (best == usize::MAX || z > logits[best]) {
            best = i;
        }
    }
    best
}

/// Margin loss on raw logits. Untargeted: `max(z_y - max_{i!=y} z_i, -kappa)`;
/// targeted (`target = Some(t)`): `max(max_{i!=t} z_i - z_t, -kappa)`.
pub fn attack_loss(logits: &[f64], true_class: usize, kappa: f64, target: Option<usize>) -> Result<f64> {
    check_logits(logits.len(), true_class, target)?;
    let margin = match target {
        None => logits[true_class] - logits[argmax_excluding(logits, true_class)],
        Some(t) => logits[argmax_excluding(logits, t)] - logits[t],
    };
    Ok(margin.max(-kappa))
}

/// [`attack_loss`] averaged over the rows of `[N, K]` logits.
pub fn attack_loss_var<'g>(
    logits: Var<'g>,
    true_class: usize,
    kappa: f64,
    target: Option<usize>,
) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(CoreError::dims("logits", "[N, K]", &shape));
    }
    let (n, k) = (shape[0], shape[1]);
    check_logits(k, true_class, target)?;
    let values = logits.value();
    let (mut plus, mut minus) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for r in 0..n {
        let row = &values.data()[r * k..(r + 1) * k];
        match target {
            None => {
                plus.push(r * k + true_class);
                minus.push(r * k + argmax_excluding(row, true_class));
            }
            Some(t) => {
                plus.push(r * k + argmax_excluding(row, t));
                minus.push(r * k + t);
            }
        }
    }
    let flat = logits.reshape(&[n * k]);
    let margin = flat.gather(&plus) - flat.gather(&minus);
    // max(m, -kappa) = relu(m + kappa) - kappa
    Ok(margin.add_scalar(kappa).relu().add_scalar(-kappa).mean())
}

/// Squared L2 distance summed over all elements.
pub fn reconstruction_loss(generated: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    if generated.dims() != target.dims() {
        return Err(CoreError::dims("reconstruction input", target.dims(), generated.dims()));
    }
    Ok(generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

pub fn reconstruction_loss_var<'g>(generated: Var<'g>, target: Var<'g>) -> Var<'g> {
    (generated - target).square().sum()
}

/// Anisotropic total variation with out-of-range neighbor terms dropped.
pub fn tv_loss(p: &ImageTensor) -> f64 {
    let (c, h, w) = p.dims();
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = p.get(ch, y, x);
                if y + 1 < h {
                    total += (p.get(ch, y + 1, x) - v).abs();
                }
                if x + 1 < w {
                    total += (p.get(ch, y, x + 1) - v).abs();
                }
            }
        }
    }
    total
}

/// [`tv_loss`] over the last two axes of `p`.
pub fn tv_loss_var<'g>(p: Var<'g>) -> Var<'g> {
    let s = p.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut total = p.graph().scalar(0.0);
    if h > 1 {
        total = total + (p.crop(1, 0, h - 1, w) - p.crop(0, 0, h - 1, w)).abs().sum();
    }
    if w > 1 {
        total = total + (p.crop(0, 1, h, w - 1) - p.crop(0, 0, h, w - 1)).abs().sum();
    }
    total
}

/// Non-printability score: for each pixel mapped to `[0, 1]` by `(v + 1) / 2`,
/// the product over palette colors of the Euclidean RGB distance, summed over
/// pixels. Requires a 3-channel patch.
pub fn nps_loss(p: &ImageTensor, palette: &PrintablePalette) -> Result<f64> {
    let (c, h, w) = p.dims();
    if c != 3 {
        return Err(CoreError::dims("non-printability input channels", 3, c));
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| (p.get(ch, y, x) + 1.0) / 2.0);
            total += palette
                .colors()
                .iter()
                .map(|a| (0..3).map(|k| (px[k] - a[k]).powi(2)).sum::<f64>().sqrt())
                .product::<f64>();
        }
    }
    Ok(total)
}

/// [`nps_loss`] for a `[1, 3, h, w]` patch.
pub fn nps_loss_var<'g>(p: Var<'g>, palette: &PrintablePalette) -> Result<Var<'g>> {
    let s = p.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(CoreError::dims("non-printability input", "[1, 3, h, w]", &s));
    }
    let g = p.graph();
    let q = p.add_scalar(1.0).scale(0.5);
    let mut product: Option<Var<'g>> = None;
    for a in palette.colors() {
        let color = g.constant(Tensor::from_vec(&[1, 3, 1, 1], a.to_vec())?).expand(&s);
        let dist = (q - color).square().sum_axes(&[1]).sqrt();
        product = Some(match product {
            Some(acc) => acc * dist,
            None => dist,
        });
    }
    Ok(product.expect("palette is nonempty").sum())
}

/// Critic objective and its parts, all scalar vars.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss<'g> {
    pub total: Var<'g>,
    pub real_score: Var<'g>,
    pub fake_score: Var<'g>,
    pub penalty: Var<'g>,
}

/// Critic loss on composites. Under [`GanObjective::WassersteinGp`] it is
/// `D(fake) - D(real) + gp_coef * (||grad D(x_hat)|| - 1)^2` with
/// `x_hat = eps * real + (1 - eps) * fake`; the penalty is differentiable
/// with respect to the critic's parameters. Under
/// [`GanObjective::Saturating`] it is `softplus(-D(real)) + softplus(D(fake))`
/// with no penalty.
pub fn critic_loss_var<'g>(
    critic: &dyn Fn(Var<'g>) -> Var<'g>,
    real: Var<'g>,
    fake: Var<'g>,
    gp_coef: f64,
    eps: f64,
    objective: GanObjective,
) -> Result<CriticLoss<'g>> {
    if real.shape() != fake.shape() {
        return Err(CoreError::dims("critic composite", real.shape(), fake.shape()));
    }
    let g = real.graph();
    let real_score = critic(real);
    let fake_score = critic(fake);
    match objective {
        GanObjective::WassersteinGp => {
            let penalty = if gp_coef > 0.0 {
                let x_hat = g.leaf((*(real.scale(eps) + fake.scale(1.0 - eps)).value()).clone());
                let grad = g.grad(critic(x_hat), &[x_hat])[0];
                grad.square().sum().sqrt().add_scalar(-1.0).square()
            } else {
                g.scalar(0.0)
            };
            Ok(CriticLoss {
                total: fake_score - real_score + penalty.scale(gp_coef),
                real_score,
                fake_score,
                penalty,
            })
        }
        GanObjective::Saturating => Ok(CriticLoss {
            total: softplus(-real_score) + softplus(fake_score),
            real_score,
            fake_score,
            penalty: g.scalar(0.0),
        }),
    }
}

/// Generator-side adversarial term for a fake composite score.
pub fn generator_gan_term<'g>(fake_score: Var<'g>, objective: GanObjective) -> Var<'g> {
    match objective {
        GanObjective::WassersteinGp => -fake_score,
        // log(1 - sigmoid(s)) = -softplus(s)
        GanObjective::Saturating => -softplus(fake_score),
    }
}

/// `ln(1 + e^x)` computed as `relu(x) + ln(1 + e^-|x|)`.
pub fn softplus(x: Var<'_>) -> Var<'_> {
    x.relu() + (-x.abs()).exp().add_scalar(1.0).ln()
}

/// Plain-value [`critic_loss_var`] for composites given as `[1, C, H, W]` tensors.
pub fn critic_loss(
    critic: &dyn for<'g> Fn(Var<'g>) -> Var<'g>,
    real: &Tensor,
    fake: &Tensor,
    gp_coef: f64,
    eps: f64,
    objective: GanObjective,
) -> Result<f64> {
    let g = Graph::new();
    let loss = critic_loss_var(&|v| critic(v), g.constant(real.clone()), g.constant(fake.clone()), gp_coef, eps, objective)?;
    Ok(loss.total.item())
}

/// Component values of one generator objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub attack: f64,
    pub gan: f64,
    pub rec: f64,
    pub tv: f64,
    pub nps: f64,
}

/// `attack + alpha * gan + beta * rec + gamma * tv + delta_print * nps`.
pub fn generator_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("attack", c.attack),
        ("gan", c.gan),
        ("reconstruction", c.rec),
        ("tv", c.tv),
        ("nps", c.nps),
    ] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite(name.into()));
        }
    }
    Ok(c.attack + w.alpha * c.gan + w.beta * c.rec + w.gamma * c.tv + w.delta_print * c.nps)
}
