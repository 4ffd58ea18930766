//! Synthetic-likelihood training.
//!
//! A discriminator `D(x, ŷ)` is trained to separate real pairs from pairs
//! generated by sampled models. Its log-odds `log(D / (1 − D))` stand in for
//! the likelihood ratio of a generated sample, so the generator is rewarded
//! for producing plausible outputs rather than for explaining every target.
//! The generator objective mixes that term (weight α) with the Gaussian
//! log-likelihood (weight β) and the weight-decay KL term.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{Architecture, Binding, ModelSample, VariationalModel};
use crate::error::{Error, Result};
use crate::head::{self, HeadMode};
use crate::optim::AdamState;
use crate::tensor::{Graph, NodeId, Tensor};

pub const LOGIT_CLAMP: f64 = 20.0;

/// Log-odds of the discriminator, which for a sigmoid output is the logit.
pub fn synthetic_ll(logit: f64) -> f64 {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Deterministic network producing one raw logit per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: VariationalModel,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        match &arch {
            Architecture::Mlp { output: 1, .. } | Architecture::ConvClassifier { .. } => {}
            Architecture::Mlp { output, .. } => {
                return Err(Error::Config(format!("discriminator must emit one logit, not {output}")))
            }
            Architecture::EncoderDecoder { .. } => {
                return Err(Error::Config("encoder-decoder cannot be a discriminator".into()))
            }
        }
        Ok(Discriminator {
            net: VariationalModel::new(arch, 1.0, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, binding: &Binding, input: NodeId) -> Result<NodeId> {
        self.net.forward(g, binding, None, input)
    }

    /// Logits for already-assembled discriminator inputs.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &b, x)?;
        Ok(g.value(out).clone())
    }
}

/// Piecewise-constant override of β: `beta` applies while `epoch < until_epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaStage {
    pub until_epoch: usize,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridLossConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub beta_schedule: Vec<BetaStage>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_weight_decay() -> f64 {
    1e-6
}

impl HybridLossConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        HybridLossConfig {
            alpha,
            beta,
            beta_schedule: Vec::new(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_betas = std::iter::once(self.beta).chain(self.beta_schedule.iter().map(|s| s.beta));
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        for b in all_betas {
            if b < 0.0 || !b.is_finite() {
                return Err(Error::Config(format!("beta must be ≥ 0, got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.beta_schedule.windows(2).any(|w| w[0].until_epoch >= w[1].until_epoch) {
            return Err(Error::Config("beta_schedule stages must have increasing until_epoch".into()));
        }
        Ok(())
    }

    /// Whether the configuration keeps α ≥ β at every epoch (the stable regime).
    pub fn alpha_dominates(&self) -> bool {
        std::iter::once(self.beta)
            .chain(self.beta_schedule.iter().map(|s| s.beta))
            .all(|b| self.alpha >= b)
    }
}

/// Effective β for an epoch.
pub fn beta_schedule(epoch: usize, cfg: &HybridLossConfig) -> f64 {
    cfg.beta_schedule
        .iter()
        .find(|s| epoch < s.until_epoch)
        .map_or(cfg.beta, |s| s.beta)
}

/// Where the discriminator compares real and generated outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSpace {
    /// Raw Gaussian samples against raw targets.
    #[default]
    Identity,
    /// Class-confidence samples and targets pushed through a channel softmax.
    Softmax,
}

impl DataSpace {
    pub fn apply(self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        match self {
            DataSpace::Identity => Ok(y),
            DataSpace::Softmax => g.softmax(y, 1),
        }
    }
}

/// How generator outputs turn into samples and discriminator inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWiring {
    #[serde(default)]
    pub head: HeadMode,
    #[serde(default)]
    pub space: DataSpace,
    /// Scale of the standard-normal draw in generated samples, `μ + s·z·σ`.
    /// The likelihood term always uses the full σ.
    #[serde(default = "unit")]
    pub sample_noise: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for TaskWiring {
    fn default() -> Self {
        TaskWiring {
            head: HeadMode::default(),
            space: DataSpace::default(),
            sample_noise: 1.0,
        }
    }
}

impl TaskWiring {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_noise >= 0.0 && self.sample_noise.is_finite()) {
            return Err(Error::Config(format!("sample_noise must be ≥ 0, got {}", self.sample_noise)));
        }
        Ok(())
    }

    /// `z` scaled by `sample_noise`.
    pub fn scale_noise(&self, z: &Tensor) -> Tensor {
        if self.sample_noise == 1.0 {
            z.clone()
        } else {
            z.map(|v| v * self.sample_noise)
        }
    }
}

/// Batched inputs `N×…` and targets `N×…`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph nodes of one generator objective, plus term values for logging.
#[derive(Clone, Debug)]
pub struct GeneratorLoss {
    pub total: NodeId,
    pub sample: NodeId,
    pub alpha_term: f64,
    pub beta_term: f64,
    pub kl_term: f64,
}

/// Everything the generator objective needs that is not a graph node.
pub struct GeneratorInputs<'a> {
    pub batch: &'a Batch,
    pub sample: &'a ModelSample,
    pub noise: &'a Tensor,
    pub wiring: TaskWiring,
    pub loss: &'a HybridLossConfig,
    pub beta: f64,
}

/// Generator objective `−α·mean(clamp(logit)) + β·NLL + KL`.
///
/// `ŷ` is the reparameterised sample, so the α term reaches the mean, the
/// variance and the masked weights through the (frozen) discriminator. When
/// α is zero the discriminator is not evaluated, and when β is zero the
/// likelihood is only logged.
pub fn generator_loss(
    g: &mut Graph,
    generator: &VariationalModel,
    gen_binding: &Binding,
    disc: &Discriminator,
    inp: &GeneratorInputs<'_>,
) -> Result<GeneratorLoss> {
    let x = g.constant(inp.batch.x.clone());
    let y = g.constant(inp.batch.y.clone());
    let raw = generator.forward(g, gen_binding, Some(inp.sample), x)?;
    let pred = head::split_statistics(g, raw, inp.wiring.head)?;
    let y_hat = head::reparameterized_sample(g, pred, &inp.wiring.scale_noise(inp.noise))?;

    let mut terms = Vec::with_capacity(3);
    let mut alpha_term = 0.0;
    if inp.loss.alpha != 0.0 {
        let d_bind = disc.net.bind(g, false);
        let fake = inp.wiring.space.apply(g, y_hat)?;
        let d_in = g.concat(x, fake, 1)?;
        let logits = disc.forward(g, &d_bind, d_in)?;
        let sl = g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
        let sl = g.mean(sl);
        let t = g.scale(sl, -inp.loss.alpha);
        alpha_term = g.value(t).item()?;
        terms.push(t);
    }
    let nll = head::gaussian_nll(g, pred, y)?;
    let mut beta_term = 0.0;
    if inp.beta != 0.0 {
        let t = g.scale(nll, inp.beta);
        beta_term = g.value(t).item()?;
        terms.push(t);
    }
    let kl = generator.kl_regularizer(g, gen_binding, inp.loss.weight_decay)?;
    let kl_term = g.value(kl).item()?;
    terms.push(kl);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let value = g.value(total).item()?;
    if !value.is_finite() {
        return Err(Error::Training {
            param: "generator_loss".into(),
            msg: format!("non-finite loss {value} (alpha term {alpha_term}, beta term {beta_term}, kl term {kl_term})"),
        });
    }
    Ok(GeneratorLoss {
        total,
        sample: y_hat,
        alpha_term,
        beta_term,
        kl_term,
    })
}

/// Binary cross-entropy with real inputs labelled 1 and generated inputs 0.
pub fn discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    binding: &Binding,
    real: NodeId,
    fake: NodeId,
) -> Result<NodeId> {
    let (nr, nf) = (g.shape(real)[0], g.shape(fake)[0]);
    if nr != nf {
        return Err(Error::dim(format!("real batch {nr} vs generated batch {nf}")));
    }
    let both = g.concat(real, fake, 0)?;
    let logits = disc.forward(g, binding, both)?;
    let targets: Vec<f64> = (0..2 * nr).map(|i| if i < nr { 1.0 } else { 0.0 }).collect();
    g.bce_with_logits(logits, &targets)
}

/// Independent random streams, one per role.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub mask: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub disc: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        RngStreams {
            mask: stream(1),
            noise: stream(2),
            disc: stream(3),
        }
    }
}

/// Scalars recorded for one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub generator_loss: f64,
    pub alpha_term: f64,
    pub beta_term: f64,
    pub kl_term: f64,
    pub discriminator_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: VariationalModel,
    pub gen_opt: AdamState,
    pub discriminator: Discriminator,
    pub disc_opt: AdamState,
    pub loss: HybridLossConfig,
    pub wiring: TaskWiring,
    pub epoch: usize,
    pub step: u64,
    pub rngs: RngStreams,
}

impl TrainState {
    pub fn new(
        generator: VariationalModel,
        discriminator: Discriminator,
        loss: HybridLossConfig,
        wiring: TaskWiring,
        gen_lr: f64,
        disc_lr: f64,
        seed: u64,
    ) -> Result<Self> {
        loss.validate()?;
        wiring.validate()?;
        Ok(TrainState {
            generator,
            gen_opt: AdamState::new(gen_lr),
            discriminator,
            disc_opt: AdamState::new(disc_lr),
            loss,
            wiring,
            epoch: 0,
            step: 0,
            rngs: RngStreams::new(seed),
        })
    }

    /// Generated targets (regression space) from a fresh model sample.
    pub fn generate<R: Rng + ?Sized>(&self, x: &Tensor, target_shape: &[usize], rng: &mut R) -> Result<Tensor> {
        let sample = self.generator.sample_model(rng);
        let z = Tensor::randn(target_shape, 1.0, rng);
        sample_output(&self.generator, self.wiring.head, &sample, x, &self.wiring.scale_noise(&z))
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        if batch.x.shape()[0] != batch.y.shape()[0] {
            return Err(Error::dim(format!(
                "batch inputs {:?} and targets {:?} disagree on size",
                batch.x.shape(),
                batch.y.shape()
            )));
        }
        let beta = beta_schedule(self.epoch, &self.loss);

        // Generator.
        let sample = self.generator.sample_model(&mut self.rngs.mask);
        let noise = Tensor::randn(batch.y.shape(), 1.0, &mut self.rngs.noise);
        let mut g = Graph::new();
        let gb = self.generator.bind(&mut g, true);
        let inputs = GeneratorInputs {
            batch,
            sample: &sample,
            noise: &noise,
            wiring: self.wiring,
            loss: &self.loss,
            beta,
        };
        let gl = generator_loss(&mut g, &self.generator, &gb, &self.discriminator, &inputs)?;
        let generator_loss = g.value(gl.total).item()?;
        let grads = self.generator.collect_grads(&gb, &g.backward(gl.total)?);
        drop(g);
        self.gen_opt.step(&mut self.generator.param_updates(&grads, "generator"))?;

        // Discriminator, against a fresh sample from the updated generator.
        let fake_sample = self.generator.sample_model(&mut self.rngs.disc);
        let z = Tensor::randn(batch.y.shape(), 1.0, &mut self.rngs.disc);
        let fake_y = sample_output(&self.generator, self.wiring.head, &fake_sample, &batch.x, &self.wiring.scale_noise(&z))?;
        let mut g = Graph::new();
        let db = self.discriminator.net.bind(&mut g, true);
        let x = g.constant(batch.x.clone());
        let y = g.constant(batch.y.clone());
        let fy = g.constant(fake_y);
        let real_y = self.wiring.space.apply(&mut g, y)?;
        let fake_y = self.wiring.space.apply(&mut g, fy)?;
        let real = g.concat(x, real_y, 1)?;
        let fake = g.concat(x, fake_y, 1)?;
        let dl = discriminator_loss(&mut g, &self.discriminator, &db, real, fake)?;
        let discriminator_loss = g.value(dl).item()?;
        if !discriminator_loss.is_finite() {
            return Err(Error::Training {
                param: "discriminator_loss".into(),
                msg: format!("non-finite loss {discriminator_loss}"),
            });
        }
        let dgrads = self.discriminator.net.collect_grads(&db, &g.backward(dl)?);
        drop(g);
        self.disc_opt
            .step(&mut self.discriminator.net.param_updates(&dgrads, "discriminator"))?;

        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: self.epoch,
            generator_loss,
            alpha_term: gl.alpha_term,
            beta_term: gl.beta_term,
            kl_term: gl.kl_term,
            discriminator_loss,
        })
    }
}

/// Reparameterised output of one sampled model for explicit noise `z`.
pub fn sample_output(
    model: &VariationalModel,
    head_mode: HeadMode,
    sample: &ModelSample,
    x: &Tensor,
    z: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let raw = model.forward(&mut g, &b, Some(sample), xi)?;
    let pred = head::split_statistics(&mut g, raw, head_mode)?;
    let y = head::reparameterized_sample(&mut g, pred, z)?;
    Ok(g.value(y).clone())
}

/// Writes step logs as CSV.
pub fn write_step_log<W: std::io::Write>(w: W, logs: &[StepLog]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for l in logs {
        wtr.serialize(l)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::Activation;

    fn mlp(input: usize, hidden: Vec<usize>, output: usize) -> Architecture {
        Architecture::Mlp {
            input,
            hidden,
            output,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }

    fn tiny_state(alpha: f64, beta: f64, seed: u64) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = VariationalModel::new(mlp(1, vec![8], 1), 0.5, &mut rng).unwrap();
        let disc = Discriminator::new(mlp(2, vec![8], 1), &mut rng).unwrap();
        let wiring = TaskWiring {
            head: HeadMode::ConstantSigma,
            space: DataSpace::Identity,
            sample_noise: 1.0,
        };
        TrainState::new(gen, disc, HybridLossConfig::new(alpha, beta), wiring, 1e-3, 1e-3, seed).unwrap()
    }

    fn batch() -> Batch {
        Batch {
            x: Tensor::new(vec![4, 1], vec![-1.0, -0.5, 0.5, 1.0]).unwrap(),
            y: Tensor::new(vec![4, 1], vec![0.0, 0.0, 0.3, -0.3]).unwrap(),
        }
    }

    #[test]
    fn synthetic_ll_is_clamped_logit() {
        assert_eq!(synthetic_ll(0.0), 0.0);
        assert_eq!(synthetic_ll(1.0), 1.0);
        assert_eq!(synthetic_ll(100.0), 20.0);
        assert_eq!(synthetic_ll(-100.0), -20.0);
    }

    #[test]
    fn beta_schedule_cases() {
        let mut cfg = HybridLossConfig::new(1.0, 0.0);
        cfg.beta_schedule = vec![BetaStage {
            until_epoch: 4,
            beta: 1e-4,
        }];
        for e in 0..4 {
            assert_eq!(beta_schedule(e, &cfg), 1e-4);
        }
        assert_eq!(beta_schedule(4, &cfg), 0.0);
        assert_eq!(beta_schedule(40, &cfg), 0.0);
        let flat = HybridLossConfig::new(1.0, 1.0);
        assert_eq!(beta_schedule(0, &flat), 1.0);
        assert_eq!(beta_schedule(99, &flat), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(HybridLossConfig::new(-1.0, 0.0).validate().is_err());
        assert!(HybridLossConfig::new(1.0, -1.0).validate().is_err());
        assert!(HybridLossConfig::new(1.0, 1.0).alpha_dominates());
        assert!(!HybridLossConfig::new(0.0, 1.0).alpha_dominates());
    }

    #[test]
    fn discriminator_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Discriminator::new(mlp(2, vec![], 1), &mut rng).unwrap();
        for l in &mut d.net.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let mut g = Graph::new();
        let b = d.net.bind(&mut g, true);
        let real = g.constant(Tensor::ones(&[3, 2]));
        let fake = g.constant(Tensor::zeros(&[3, 2]));
        let l = discriminator_loss(&mut g, &d, &b, real, fake).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        // Logit = 40·(x₀) − 20: +20 on real (x₀=1), −20 on fake (x₀=0).
        d.net.layers[0].weight = Tensor::from_rows(&[&[40.0], &[0.0]]);
        d.net.layers[0].bias = Tensor::from_vec(vec![-20.0]);
        let mut g = Graph::new();
        let b = d.net.bind(&mut g, true);
        let real = g.constant(Tensor::ones(&[3, 2]));
        let fake = g.constant(Tensor::zeros(&[3, 2]));
        let l = discriminator_loss(&mut g, &d, &b, real, fake).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-8);

        let short = g.constant(Tensor::zeros(&[2, 2]));
        assert!(discriminator_loss(&mut g, &d, &b, real, short).is_err());
    }

    #[test]
    fn discriminator_loss_symmetric_under_swap_with_label_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Discriminator::new(mlp(2, vec![4], 1), &mut rng).unwrap();
        let a = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let c = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let mut flipped = d.clone();
        // Negating the output layer flips every logit, i.e. swaps the labels.
        let last = flipped.net.layers.len() - 1;
        flipped.net.layers[last].weight = flipped.net.layers[last].weight.map(|v| -v);
        flipped.net.layers[last].bias = flipped.net.layers[last].bias.map(|v| -v);
        let loss = |d: &Discriminator, r: &Tensor, f: &Tensor| {
            let mut g = Graph::new();
            let b = d.net.bind(&mut g, false);
            let (r, f) = (g.constant(r.clone()), g.constant(f.clone()));
            let l = discriminator_loss(&mut g, d, &b, r, f).unwrap();
            g.value(l).item().unwrap()
        };
        let x = loss(&d, &a, &c);
        let y = loss(&flipped, &c, &a);
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }

    #[test]
    fn alpha_zero_reduces_to_beta_nll_plus_kl() {
        let st = tiny_state(0.0, 1.0, 5);
        let b = batch();
        let sample = st.generator.sample_model(&mut ChaCha8Rng::seed_from_u64(1));
        let z = Tensor::randn(&[4, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let gb = st.generator.bind(&mut g, true);
        let inp = GeneratorInputs {
            batch: &b,
            sample: &sample,
            noise: &z,
            wiring: st.wiring,
            loss: &st.loss,
            beta: 1.0,
        };
        let gl = generator_loss(&mut g, &st.generator, &gb, &st.discriminator, &inp).unwrap();
        assert_eq!(gl.alpha_term, 0.0);
        let total = g.value(gl.total).item().unwrap();
        assert!((total - (gl.beta_term + gl.kl_term)).abs() < 1e-15);
    }

    #[test]
    fn beta_zero_with_neutral_discriminator_is_kl_only() {
        let mut st = tiny_state(1.0, 0.0, 6);
        for l in &mut st.discriminator.net.layers {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let b = batch();
        let sample = st.generator.sample_model(&mut ChaCha8Rng::seed_from_u64(1));
        let z = Tensor::zeros(&[4, 1]);
        let mut g = Graph::new();
        let gb = st.generator.bind(&mut g, true);
        let inp = GeneratorInputs {
            batch: &b,
            sample: &sample,
            noise: &z,
            wiring: st.wiring,
            loss: &st.loss,
            beta: 0.0,
        };
        let gl = generator_loss(&mut g, &st.generator, &gb, &st.discriminator, &inp).unwrap();
        let total = g.value(gl.total).item().unwrap();
        assert_eq!(total, gl.kl_term);
        assert_eq!(gl.beta_term, 0.0);
    }

    #[test]
    fn train_step_updates_both_players_and_is_deterministic() {
        let mut a = tiny_state(1.0, 1.0, 7);
        let mut b = tiny_state(1.0, 1.0, 7);
        let g0 = a.generator.clone();
        let d0 = a.discriminator.clone();
        for _ in 0..100 {
            let la = a.train_step(&batch()).unwrap();
            let lb = b.train_step(&batch()).unwrap();
            assert_eq!(la, lb);
        }
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.discriminator, b.discriminator);
        assert_ne!(a.generator, g0);
        assert_ne!(a.discriminator, d0);
        assert_eq!(a.gen_opt.steps(), 100);
        assert_eq!(a.disc_opt.steps(), 100);
    }

    #[test]
    fn alpha_zero_generator_ignores_discriminator() {
        let mut a = tiny_state(0.0, 1.0, 8);
        let mut b = tiny_state(0.0, 1.0, 8);
        // Different discriminators must not change the generator trajectory.
        for l in &mut b.discriminator.net.layers {
            l.weight = l.weight.map(|v| v * 3.0 + 0.1);
        }
        for _ in 0..20 {
            a.train_step(&batch()).unwrap();
            b.train_step(&batch()).unwrap();
        }
        assert_eq!(a.generator, b.generator);
        assert_ne!(a.discriminator, b.discriminator);
    }

    #[test]
    fn step_log_csv_has_header_and_rows() {
        let mut st = tiny_state(1.0, 1.0, 9);
        let logs: Vec<_> = (0..3).map(|_| st.train_step(&batch()).unwrap()).collect();
        let mut buf = Vec::new();
        write_step_log(&mut buf, &logs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,generator_loss,alpha_term,beta_term,kl_term,discriminator_loss"
        );
        assert_eq!(lines.count(), 3);
    }
}
