//! Bernoulli weight dropout: every kernel element `M` is multiplied by its own
//! mask bit `Z ~ Bernoulli(retain_prob)`, and one sampled set of masks defines
//! one model drawn from the variational distribution.

mod arch;
mod units;

pub use arch::{Activation, Architecture};
pub use units::{
    count_layer, count_units, street_generator_layers, table10_report, ConvLayerSpec, Table10Row, UnitCount,
    UnitReport,
};

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamUpdate;
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Dense,
    Conv,
}

/// One layer of variational parameters.
///
/// Dense weights are stored `in×out` (inputs are row vectors); conv kernels
/// are `C_out×C_in×k×k`. The bias is never masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDropoutLayer {
    pub kind: WeightKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub retain_prob: f64,
}

impl WeightDropoutLayer {
    pub fn new(kind: WeightKind, weight: Tensor, bias: Tensor, retain_prob: f64) -> Result<Self> {
        check_retain(retain_prob)?;
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Data("layer parameters must be finite".into()));
        }
        Ok(WeightDropoutLayer {
            kind,
            weight: weight.requiring_grad(),
            bias: bias.requiring_grad(),
            retain_prob,
        })
    }

    pub fn dense<R: Rng + ?Sized>(inputs: usize, outputs: usize, retain_prob: f64, rng: &mut R) -> Result<Self> {
        let std = (2.0 / inputs as f64).sqrt();
        Self::new(
            WeightKind::Dense,
            Tensor::randn(&[inputs, outputs], std, rng),
            Tensor::zeros(&[outputs]),
            retain_prob,
        )
    }

    pub fn conv<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        retain_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self::new(
            WeightKind::Conv,
            Tensor::randn(&[c_out, c_in, k, k], std, rng),
            Tensor::zeros(&[c_out]),
            retain_prob,
        )
    }

    pub fn num_weights(&self) -> usize {
        self.weight.len()
    }
}

pub(crate) fn check_retain(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("retain probability must lie in (0, 1], got {p}")))
    }
}

/// Converts a configured dropout rate into the per-weight retain probability.
pub fn retain_from_dropout(rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(1.0 - rate)
}

/// One draw from the variational distribution: a binary mask per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSample {
    masks: Vec<Tensor>,
    pub seed: Option<u64>,
}

impl ModelSample {
    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    /// The sample that keeps every weight (the mean parameters).
    pub fn all_ones(model: &VariationalModel) -> Self {
        ModelSample {
            masks: model.layers.iter().map(|l| Tensor::ones(l.weight.shape())).collect(),
            seed: None,
        }
    }

    pub fn from_masks(model: &VariationalModel, masks: Vec<Tensor>) -> Result<Self> {
        let s = ModelSample { masks, seed: None };
        model.check_sample(&s)?;
        if s.masks.iter().any(|m| m.data().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        Ok(s)
    }
}

/// Parameter leaves of a model inserted into one graph.
#[derive(Clone, Debug)]
pub struct Binding {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

impl Binding {
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b])
    }
}

/// Ordered weight-dropout layers plus the architecture that wires them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalModel {
    pub arch: Architecture,
    pub layers: Vec<WeightDropoutLayer>,
}

/// `S` sampled-model outputs, stored in sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveEnsemble {
    pub outputs: Vec<Tensor>,
}

impl PredictiveEnsemble {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Elementwise average over samples.
    pub fn mean(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.outputs[0].shape());
        for o in &self.outputs {
            for (a, v) in acc.data_mut().iter_mut().zip(o.data()) {
                *a += v;
            }
        }
        let s = self.outputs.len() as f64;
        acc.map(|v| v / s)
    }
}

impl VariationalModel {
    /// Fresh model with He-initialised weights and zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, retain_prob: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|s| match s {
                arch::LayerShape::Dense { inputs, outputs } => {
                    WeightDropoutLayer::dense(inputs, outputs, retain_prob, rng)
                }
                arch::LayerShape::Conv { c_in, c_out, k } => {
                    WeightDropoutLayer::conv(c_in, c_out, k, retain_prob, rng)
                }
            })
            .collect::<Result<_>>()?;
        Ok(VariationalModel { arch, layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn set_retain_prob(&mut self, p: f64) -> Result<()> {
        check_retain(p)?;
        self.layers.iter_mut().for_each(|l| l.retain_prob = p);
        Ok(())
    }

    /// Draws one mask per weight element, independently per layer.
    pub fn sample_model<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelSample {
        let masks = self
            .layers
            .iter()
            .map(|l| {
                if l.retain_prob >= 1.0 {
                    return Tensor::ones(l.weight.shape());
                }
                let dist = Bernoulli::new(l.retain_prob).expect("retain_prob validated");
                let n = l.weight.len();
                let bits = (0..n).map(|_| if dist.sample(rng) { 1.0 } else { 0.0 }).collect();
                Tensor::from_parts(l.weight.shape().to_vec(), bits)
            })
            .collect();
        ModelSample { masks, seed: None }
    }

    /// Like [`sample_model`](Self::sample_model) with a dedicated seeded stream.
    pub fn sample_model_seeded(&self, seed: u64) -> ModelSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.sample_model(&mut rng);
        s.seed = Some(seed);
        s
    }

    fn check_sample(&self, sample: &ModelSample) -> Result<()> {
        if sample.masks.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "sample has {} masks, model has {} layers",
                sample.masks.len(),
                self.layers.len()
            )));
        }
        for (i, (m, l)) in sample.masks.iter().zip(&self.layers).enumerate() {
            if m.shape() != l.weight.shape() {
                return Err(Error::Usage(format!(
                    "mask {i} has shape {:?}, weight has {:?}",
                    m.shape(),
                    l.weight.shape()
                )));
            }
        }
        Ok(())
    }

    /// Inserts the parameters as graph leaves. With `trainable` they receive
    /// gradients; otherwise they are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if trainable {
                weights.push(g.leaf(&l.weight));
                biases.push(g.leaf(&l.bias));
            } else {
                weights.push(g.constant(l.weight.clone()));
                biases.push(g.constant(l.bias.clone()));
            }
        }
        Binding { weights, biases }
    }

    /// Forward pass with effective weights `M ⊙ Z` (no rescaling). `None`
    /// uses the unmasked parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &Binding,
        sample: Option<&ModelSample>,
        x: NodeId,
    ) -> Result<NodeId> {
        if let Some(s) = sample {
            self.check_sample(s)?;
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        for (i, &w) in binding.weights.iter().enumerate() {
            let eff = match sample {
                Some(s) if self.layers[i].retain_prob < 1.0 || s.masks[i].data().iter().any(|&v| v != 1.0) => {
                    let m = g.constant(s.masks[i].clone());
                    g.mul(w, m)?
                }
                _ => w,
            };
            weights.push(eff);
        }
        self.arch.forward(g, &weights, &binding.biases, x)
    }

    /// Pure evaluation of one sampled model on `x`.
    pub fn forward_with_sample(&self, sample: &ModelSample, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &b, Some(sample), xi)?;
        Ok(g.value(out).clone())
    }

    /// Draws `count` models (sequentially from `rng`) and evaluates them; the
    /// evaluations run in parallel and are collected by sample index.
    pub fn predictive_ensemble<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        count: usize,
        rng: &mut R,
    ) -> Result<PredictiveEnsemble> {
        if count == 0 {
            return Err(Error::Usage("ensemble needs at least one sample".into()));
        }
        let samples: Vec<ModelSample> = (0..count).map(|_| self.sample_model(rng)).collect();
        let outputs = samples
            .par_iter()
            .map(|s| self.forward_with_sample(s, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictiveEnsemble { outputs })
    }

    /// `decay · Σ_layers retain_prob · (‖M‖² + ‖b‖²) / 2` as a graph node.
    pub fn kl_regularizer(&self, g: &mut Graph, binding: &Binding, weight_decay: f64) -> Result<NodeId> {
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        let mut total: Option<NodeId> = None;
        for (l, (&w, &b)) in self.layers.iter().zip(binding.weights.iter().zip(&binding.biases)) {
            let sw = g.square(w);
            let sw = g.sum(sw);
            let sb = g.square(b);
            let sb = g.sum(sb);
            let s = g.add(sw, sb)?;
            let s = g.scale(s, 0.5 * weight_decay * l.retain_prob);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
    }

    /// Value of [`kl_regularizer`](Self::kl_regularizer) without a graph.
    pub fn kl_value(&self, weight_decay: f64) -> f64 {
        self.layers
            .iter()
            .map(|l| 0.5 * weight_decay * l.retain_prob * (l.weight.sq_norm() + l.bias.sq_norm()))
            .sum()
    }

    /// Gradients for the bound parameters, in `[w0, b0, w1, b1, …]` order.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients) -> Vec<Tensor> {
        binding
            .nodes()
            .zip(self.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .map(|(id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Pairs parameters with gradients (as returned by
    /// [`collect_grads`](Self::collect_grads)) for an optimizer step.
    pub fn param_updates<'a>(&'a mut self, grads: &'a [Tensor], prefix: &str) -> Vec<ParamUpdate<'a>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.layer{i}.weight"), &mut l.weight),
                    (format!("{prefix}.layer{i}.bias"), &mut l.bias),
                ]
            })
            .zip(grads)
            .map(|((name, value), grad)| ParamUpdate { name, value, grad })
            .collect()
    }
}
