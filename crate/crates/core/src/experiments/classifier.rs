//! Small digit classifier used to score completed images.

use rand::seq::SliceRandom;

use super::config::ClassifierSpec;
use super::stream_rng;
use crate::dropout::{Activation, Architecture, VariationalModel};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{Graph, Tensor};

pub const DIGITS: usize = 10;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DigitClassifier {
    net: VariationalModel,
}

impl DigitClassifier {
    /// Fits a one-hidden-layer network with softmax cross-entropy. `images` is `N×P`.
    pub fn train(images: &Tensor, labels: &[usize], spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        let s = images.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "classifier needs N×P images and N labels, got {s:?} and {}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= DIGITS) {
            return Err(Error::Data(format!("digit label {bad} out of range")));
        }
        let arch = Architecture::Mlp {
            input: s[1],
            hidden: vec![spec.hidden],
            output: DIGITS,
            activation: Activation::Relu,
        };
        let mut net = VariationalModel::new(arch, 1.0, &mut stream_rng(seed, 20))?;
        let mut opt = AdamState::new(spec.lr);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut shuffle = stream_rng(seed, 21);
        for _ in 0..spec.epochs {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(spec.batch_size) {
                let x = images.gather_first(chunk)?;
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let b = net.bind(&mut g, true);
                let xi = g.constant(x);
                let logits = net.forward(&mut g, &b, None, xi)?;
                let loss = g.softmax_cross_entropy(logits, &y)?;
                let grads = net.collect_grads(&b, &g.backward(loss)?);
                drop(g);
                opt.step(&mut net.param_updates(&grads, "classifier"))?;
            }
        }
        Ok(DigitClassifier { net })
    }

    /// Class probabilities, `N×10`.
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, false);
        let x = g.constant(images.clone());
        let logits = self.net.forward(&mut g, &b, None, x)?;
        let p = g.softmax(logits, 1)?;
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let p = self.probabilities(images)?;
        Ok(p.data()
            .chunks(DIGITS)
            .map(|row| (0..DIGITS).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0))
            .collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}
