//! Feature extractor: a small perceptron with `tanh` between layers,
//! followed by L2 normalization. Gradients are accumulated layer by layer
//! in reverse; there is no runtime graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossExample, LossWeights, MeanTable};
use crate::mixture::{ClassId, ModelBank};
use crate::vmf::{self, normalize, UnitVector};

/// Default hidden width of the perceptron.
pub const DEFAULT_HIDDEN: usize = 64;

/// Dense layer with a row-major `out x in` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + vmf::dot(row, x)
            })
            .collect()
    }
}

/// Backbone parameters. `tanh` is applied after every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    layers: Vec<Layer>,
}

impl BackboneParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension { expected: pair[0].out_dim, actual: pair[1].in_dim });
            }
        }
        for l in &layers {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Config("layer buffers do not match their shape".into()));
            }
        }
        if layers.last().map(|l| l.out_dim).unwrap_or(0) < 2 {
            return Err(Error::Config("feature dimension must be >= 2".into()));
        }
        Ok(Self { layers })
    }

    /// Single linear identity layer: the backbone reduces to `normalize`.
    pub fn identity(dim: usize) -> Self {
        let mut l = Layer::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        Self { layers: vec![l] }
    }

    /// Xavier-uniform initialized perceptron, zero biases.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut l = Layer::zeros(w[0], w[1]);
                let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                for x in l.weight.iter_mut() {
                    *x = rng.random_range(-a..a);
                }
                l
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), actual: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut h = l.apply(&acts[i]);
            if i < last {
                h.iter_mut().for_each(|z| *z = z.tanh());
            }
            acts.push(h);
        }
        let raw = acts.last().expect("at least one layer");
        let r = vmf::norm(raw);
        if !r.is_finite() {
            return Err(Error::Numerical { term: "forward" });
        }
        if r < vmf::MIN_NORM {
            return Err(Error::DegenerateFeature { norm: r });
        }
        let unit = normalize(raw)?;
        Ok(Trace { acts, norm: r, unit })
    }

    fn backward(&self, trace: &Trace, d_unit: &[f64], grad: &mut BackboneGrad) {
        // through v / |v|
        let u = trace.unit.as_slice();
        let radial = vmf::dot(u, d_unit);
        let mut delta: Vec<f64> = d_unit.iter().zip(u).map(|(g, ui)| (g - ui * radial) / trace.norm).collect();
        let last = self.layers.len() - 1;
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            if i < last {
                // acts[i + 1] = tanh(pre)
                for (d, a) in delta.iter_mut().zip(&trace.acts[i + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &trace.acts[i];
            let g = &mut grad.layers[i];
            for o in 0..l.out_dim {
                g.bias[o] += delta[o];
                let row = &mut g.weight[o * l.in_dim..(o + 1) * l.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += delta[o] * x;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; l.in_dim];
                for o in 0..l.out_dim {
                    let row = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                delta = prev;
            }
        }
    }
}

struct Trace {
    acts: Vec<Vec<f64>>,
    norm: f64,
    unit: UnitVector,
}

/// Normalized embedding of `x`.
pub fn forward(params: &BackboneParams, x: &[f64]) -> Result<UnitVector> {
    Ok(params.trace(x)?.unit)
}

/// Gradient of the backbone parameters, shape-congruent with [`BackboneParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrad {
    pub layers: Vec<Layer>,
}

impl BackboneGrad {
    pub fn zeros_like(p: &BackboneParams) -> Self {
        Self { layers: p.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect() }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    /// Flattened view in layer order (weights then bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }
}

/// Gradient of the overall loss with respect to the backbone and every
/// raw mean coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub backbone: BackboneGrad,
    /// Per class (ascending id), `K x d` row-major.
    pub means: Vec<(ClassId, Vec<f64>)>,
}

impl Gradient {
    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        for (_, g) in &mut self.means {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Loss value plus its gradient.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: LossBreakdown,
    pub total: f64,
    pub grad: Gradient,
}

/// Batch-mean overall loss and its gradient. Means are read as given
/// from `means`, so callers may pass unnormalized tables.
pub fn loss_and_grad_table(
    params: &BackboneParams,
    means: &MeanTable,
    batch: &[LossExample<'_>],
    weights: &LossWeights,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::Config("loss over an empty batch".into()));
    }
    let mut out = loss_and_grad_summed(params, means, batch, weights)?;
    let n = batch.len() as f64;
    // the per-example sums become means; the regularizer is added once
    out.loss.inter /= n;
    out.loss.intra /= n;
    out.loss.distill /= n;
    out.grad.scale(1.0 / n);
    let (reg, reg_grad) = loss::reg_loss_and_grad(means);
    out.loss.reg = reg;
    if !reg.is_finite() {
        return Err(Error::Numerical { term: "reg" });
    }
    for ((_, g), (_, rg)) in out.grad.means.iter_mut().zip(&reg_grad) {
        for (a, b) in g.iter_mut().zip(rg) {
            *a += weights.eta * b;
        }
    }
    out.total = out.loss.total(weights);
    if !out.total.is_finite() {
        return Err(Error::Numerical { term: "overall" });
    }
    Ok(out)
}

/// [`loss_and_grad_table`] over a [`ModelBank`].
pub fn loss_and_grad(
    params: &BackboneParams,
    bank: &ModelBank,
    batch: &[LossExample<'_>],
    weights: &LossWeights,
) -> Result<LossAndGrad> {
    loss_and_grad_table(params, &MeanTable::from(bank), batch, weights)
}

/// Per-example terms summed over the batch, without averaging and without
/// the regularizer.
pub fn loss_and_grad_summed(
    params: &BackboneParams,
    means: &MeanTable,
    batch: &[LossExample<'_>],
    weights: &LossWeights,
) -> Result<LossAndGrad> {
    let mut grad = Gradient { backbone: BackboneGrad::zeros_like(params), means: means.zeros_like() };
    let mut sums = LossBreakdown::default();
    for ex in batch {
        let trace = params.trace(ex.input)?;
        let terms = loss::example_terms(means, trace.unit.as_slice(), ex, weights, &mut grad.means)?;
        sums.inter += terms.inter;
        sums.intra += terms.intra;
        sums.distill += terms.distill;
        params.backward(&trace, &terms.d_feature, &mut grad.backbone);
    }
    let total = sums.total(weights);
    Ok(LossAndGrad { loss: sums, total, grad })
}

/// `w <- w - lr * (g + weight_decay * w)` on every backbone parameter.
pub fn sgd_step(params: &mut BackboneParams, grad: &BackboneGrad, lr: f64, weight_decay: f64) {
    for (l, g) in params.layers.iter_mut().zip(&grad.layers) {
        for (w, gw) in l.weight.iter_mut().zip(&g.weight) {
            *w -= lr * (gw + weight_decay * *w);
        }
        for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
            *b -= lr * (gb + weight_decay * *b);
        }
    }
}

/// Projected step on the mixture means: `mu <- normalize(mu - lr * g)`.
/// No weight decay on means.
pub fn mean_step(bank: &mut ModelBank, grad: &[(ClassId, Vec<f64>)], lr: f64) -> Result<()> {
    let d = bank.dim();
    for (class, g) in grad {
        let mix = bank.mixture_mut(*class)?;
        let updated = mix
            .means()
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let row = &g[k * d..(k + 1) * d];
                let raw: Vec<f64> = m.as_slice().iter().zip(row).map(|(a, b)| a - lr * b).collect();
                normalize(&raw)
            })
            .collect::<Result<Vec<_>>>()?;
        mix.set_means(updated);
    }
    Ok(())
}
