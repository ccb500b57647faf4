//! Parameterized layers. Parameters live outside the tape as plain tensors;
//! each pass binds them into a [`Graph`] with [`bind`] and hands the bound
//! vars to `forward` through a [`Params`] cursor in [`Module::params`] order.

use rand::Rng;

use crate::{ConvGeom, Graph, Tensor, Var};

/// Anything that owns an ordered list of trainable tensors.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn checksum(&self) -> String {
        crate::checksum_all(self.params())
    }
}

/// Bind every parameter of `module` as a leaf of `graph`.
pub fn bind<'g, M: Module + ?Sized>(graph: &'g Graph, module: &M) -> Vec<Var<'g>> {
    module.params().into_iter().map(|t| graph.leaf(t.clone())).collect()
}

/// Sequential reader over bound parameters.
pub struct Params<'a, 'g> {
    vars: &'a [Var<'g>],
    pos: usize,
}

impl<'a, 'g> Params<'a, 'g> {
    pub fn new(vars: &'a [Var<'g>]) -> Self {
        Self { vars, pos: 0 }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Var<'g> {
        let v = *self
            .vars
            .get(self.pos)
            .expect("fewer bound parameters than the module consumes");
        self.pos += 1;
        v
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
            bias: Tensor::zeros(&[out_ch]),
            geom,
        }
    }

    /// He-style initialization for a (leaky) rectifier that follows.
    pub fn he<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, geom: ConvGeom, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::new(in_ch, out_ch, kernel, geom, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, geom: ConvGeom) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            geom,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'g>(&self, p: &mut Params<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let (w, b) = (p.next(), p.next());
        let y = x.conv2d(w, self.geom);
        let shape = y.shape();
        y + b.reshape(&[1, shape[1], 1, 1]).expand(&shape)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self {
            weight: Tensor::randn(&[inputs, outputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward<'g>(&self, p: &mut Params<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let (w, b) = (p.next(), p.next());
        let y = x.matmul(w);
        let shape = y.shape();
        y + b.reshape(&[1, shape[1]]).expand(&shape)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-sample, per-channel normalization over the spatial axes with a
/// learned affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&self, p: &mut Params<'_, 'g>, x: Var<'g>) -> Var<'g> {
        let (gamma, beta) = (p.next(), p.next());
        let shape = x.shape();
        let hw = (shape[2] * shape[3]) as f64;
        let mean = x.sum_axes(&[2, 3]).scale(1.0 / hw);
        let centered = x - mean.expand(&shape);
        let var = centered.square().sum_axes(&[2, 3]).scale(1.0 / hw);
        let inv_std = var.add_scalar(self.eps).sqrt().recip_safe();
        let normed = centered * inv_std.expand(&shape);
        let c = shape[1];
        normed * gamma.reshape(&[1, c, 1, 1]).expand(&shape) + beta.reshape(&[1, c, 1, 1]).expand(&shape)
    }
}

impl Module for InstanceNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Row-wise log-softmax of `[N, K]` logits.
pub fn log_softmax<'g>(logits: Var<'g>) -> Var<'g> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    // Shift by the (constant) row max for stability; the result is shift-invariant.
    let v = logits.value();
    let mut shift = Tensor::zeros(&[n, 1]);
    for r in 0..n {
        shift.data_mut()[r] = v.data()[r * k..(r + 1) * k]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let g = logits.graph();
    let shifted = logits - g.constant(shift).expand(&shape);
    let lse = shifted.exp().sum_axes(&[1]).ln();
    shifted - lse.expand(&shape)
}

/// Mean cross-entropy of `[N, K]` logits against integer labels.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Var<'g> {
    let shape = logits.shape();
    let k = shape[1];
    assert_eq!(shape[0], labels.len(), "cross_entropy: batch/label mismatch");
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * k + y).collect();
    -(log_softmax(logits).reshape(&[shape[0] * k]).gather(&idx).mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let norm = InstanceNorm::new(2);
        let g = Graph::new();
        let x = g.leaf(Tensor::randn(&[1, 2, 5, 5], 3.0, &mut rng));
        let p = bind(&g, &norm);
        let y = norm.forward(&mut Params::new(&p), x).value();
        for c in 0..2 {
            let s = &y.data()[c * 25..(c + 1) * 25];
            let mean: f64 = s.iter().sum::<f64>() / 25.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(logits, &[0, 1, 3]);
        assert!((ce.item() - 4f64.ln()).abs() < 1e-12);
    }
}
