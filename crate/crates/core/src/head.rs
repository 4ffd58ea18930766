//! Observation noise: per-dimension Gaussian outputs, reparameterised
//! sampling, class probabilities and the likelihoods built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{channel_axis, Graph, NodeId, Tensor};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const SIGMA_FLOOR: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How the raw network output maps to a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Output has `2C` channels: means, then log-variances.
    #[default]
    Heteroscedastic,
    /// Output is the mean; σ is fixed at 1.
    ConstantSigma,
}

impl HeadMode {
    /// Raw channel count needed to predict `dims` Gaussian dimensions.
    pub fn raw_channels(self, dims: usize) -> usize {
        match self {
            HeadMode::Heteroscedastic => 2 * dims,
            HeadMode::ConstantSigma => dims,
        }
    }
}

/// Mean and standard deviation, shape-equal, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianPrediction {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shapes("gaussian", mu.shape(), sigma.shape()));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data("sigma must be finite and positive".into()));
        }
        Ok(GaussianPrediction { mu, sigma })
    }

    pub fn from_nodes(g: &Graph, nodes: GaussianNodes) -> Self {
        GaussianPrediction {
            mu: g.value(nodes.mu).clone(),
            sigma: g.value(nodes.sigma).clone(),
        }
    }
}

/// Mean and standard deviation as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

/// Splits a raw output along its channel axis (axis 0 for `2C×H×W`, axis 1
/// for batched tensors) into means and σ = exp(½·clamp(log-variance)).
pub fn split_statistics(g: &mut Graph, raw: NodeId, mode: HeadMode) -> Result<GaussianNodes> {
    let shape = g.shape(raw).to_vec();
    let axis = if shape.len() == 1 { 0 } else { channel_axis(&shape) };
    match mode {
        HeadMode::ConstantSigma => {
            let sigma = g.constant(Tensor::ones(&shape));
            Ok(GaussianNodes { mu: raw, sigma })
        }
        HeadMode::Heteroscedastic => {
            let c2 = shape[axis];
            if c2 % 2 != 0 {
                return Err(Error::dim(format!(
                    "cannot split {c2} channels into mean and variance"
                )));
            }
            let c = c2 / 2;
            let mu = g.narrow(raw, axis, 0, c)?;
            let log_var = g.narrow(raw, axis, c, c)?;
            let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
            let half = g.scale(log_var, 0.5);
            let sigma = g.exp(half);
            Ok(GaussianNodes { mu, sigma })
        }
    }
}

/// `mu + z ⊙ sigma`.
pub fn reparameterized_sample(g: &mut Graph, pred: GaussianNodes, z: &Tensor) -> Result<NodeId> {
    if z.shape() != g.shape(pred.mu) {
        return Err(Error::shapes("reparameterized_sample", g.shape(pred.mu), z.shape()));
    }
    let zn = g.constant(z.clone());
    let scaled = g.mul(zn, pred.sigma)?;
    g.add(pred.mu, scaled)
}

/// Softmax over the class axis at every position.
pub fn class_probabilities(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let axis = if shape.len() == 1 { 0 } else { channel_axis(&shape) };
    g.softmax(y, axis)
}

/// Mean over dimensions of `½((y−μ)/σ)² + ln σ + ½ ln 2π`, with σ floored.
pub fn gaussian_nll(g: &mut Graph, pred: GaussianNodes, y: NodeId) -> Result<NodeId> {
    let sigma = g.clamp(pred.sigma, SIGMA_FLOOR, f64::INFINITY);
    let r = g.sub(y, pred.mu)?;
    let r = g.div(r, sigma)?;
    let sq = g.square(r);
    let quad = g.scale(sq, 0.5);
    let ln_s = g.ln(sigma);
    let per = g.add(quad, ln_s)?;
    let m = g.mean(per);
    Ok(g.add_scalar(m, HALF_LN_2PI))
}

/// Value-level version of [`gaussian_nll`].
pub fn gaussian_nll_value(pred: &GaussianPrediction, y: &Tensor) -> Result<f64> {
    if pred.mu.shape() != y.shape() {
        return Err(Error::shapes("gaussian_nll", pred.mu.shape(), y.shape()));
    }
    let n = y.len() as f64;
    let total: f64 = pred
        .mu
        .data()
        .iter()
        .zip(pred.sigma.data())
        .zip(y.data())
        .map(|((m, s), v)| {
            let s = s.max(SIGMA_FLOOR);
            0.5 * ((v - m) / s).powi(2) + s.ln()
        })
        .sum();
    Ok(total / n + HALF_LN_2PI)
}

/// Uniform mixture of `S` categorical predictions, each `C×P…` with the class
/// axis first.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    components: Vec<Tensor>,
}

impl MixtureDistribution {
    pub fn new(components: Vec<Tensor>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Usage("mixture needs at least one component".into()))?;
        for c in &components {
            if c.shape() != first.shape() {
                return Err(Error::shapes("mixture", first.shape(), c.shape()));
            }
        }
        let m = MixtureDistribution { components };
        let (classes, positions) = m.layout();
        for comp in &m.components {
            let d = comp.data();
            for p in 0..positions {
                let s: f64 = (0..classes).map(|k| d[k * positions + p]).sum();
                if (s - 1.0).abs() > 1e-6 || (0..classes).any(|k| d[k * positions + p] < 0.0) {
                    return Err(Error::Data(format!(
                        "component is not a distribution at position {p} (sum {s})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn components(&self) -> &[Tensor] {
        &self.components
    }

    pub fn num_classes(&self) -> usize {
        self.layout().0
    }

    pub fn num_positions(&self) -> usize {
        self.layout().1
    }

    fn layout(&self) -> (usize, usize) {
        let s = self.components[0].shape();
        let c = s[0];
        (c, self.components[0].len() / c)
    }

    /// Average of the components (the mean predictive distribution).
    pub fn mean(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.components[0].shape());
        for c in &self.components {
            for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                *a += v;
            }
        }
        let s = self.components.len() as f64;
        acc.map(|v| v / s)
    }
}

/// Negative mean log of the mixture probability of the label at each position.
pub fn mixture_cll(mix: &MixtureDistribution, labels: &[usize]) -> Result<f64> {
    let (classes, positions) = mix.layout();
    if labels.len() != positions {
        return Err(Error::dim(format!(
            "{} labels for {positions} positions",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let s = mix.components.len() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            let pr: f64 = mix.components.iter().map(|c| c.data()[l * positions + p]).sum::<f64>() / s;
            -pr.max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / positions as f64)
}
