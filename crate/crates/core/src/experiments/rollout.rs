//! Multi-step forecasting by feeding predictions back into the input window.

use rand::Rng;

use crate::dropout::{ModelSample, VariationalModel};
use crate::error::{Error, Result};
use crate::head;
use crate::synthetic::TaskWiring;
use crate::tensor::{Graph, Tensor};

/// One step: class probabilities `softmax(μ + s·zσ)` for a window `N×(T·C)×H×W`,
/// with `s` the wiring's sample-noise scale.
pub fn predict_frame<R: Rng + ?Sized>(
    model: &VariationalModel,
    wiring: TaskWiring,
    sample: &ModelSample,
    window: &Tensor,
    noise: &mut R,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let x = g.constant(window.clone());
    let raw = model.forward(&mut g, &b, Some(sample), x)?;
    let pred = head::split_statistics(&mut g, raw, wiring.head)?;
    let z = Tensor::randn(g.shape(pred.mu), 1.0, noise);
    let y = head::reparameterized_sample(&mut g, pred, &wiring.scale_noise(&z))?;
    let p = head::class_probabilities(&mut g, y)?;
    Ok(g.value(p).clone())
}

/// Drops the oldest `classes` channels of `window` and appends `frame`.
pub fn advance_window(window: &Tensor, frame: &Tensor, classes: usize) -> Result<Tensor> {
    let (ws, fs) = (window.shape(), frame.shape());
    if ws.len() != 4 || fs.len() != 4 || ws[0] != fs[0] || ws[2..] != fs[2..] || fs[1] != classes || ws[1] % classes != 0 {
        return Err(Error::shapes("advance_window", ws, fs));
    }
    let (n, wc, plane) = (ws[0], ws[1], ws[2] * ws[3]);
    let mut out = Vec::with_capacity(window.len());
    for i in 0..n {
        let img = &window.data()[i * wc * plane..(i + 1) * wc * plane];
        out.extend_from_slice(&img[classes * plane..]);
        out.extend_from_slice(&frame.data()[i * classes * plane..(i + 1) * classes * plane]);
    }
    Tensor::new(ws.to_vec(), out)
}

/// Predicts `t_future` frames under one fixed model sample; each prediction
/// becomes the newest frame of the next input window.
pub fn recursive_rollout<R: Rng + ?Sized>(
    model: &VariationalModel,
    wiring: TaskWiring,
    sample: &ModelSample,
    past: &Tensor,
    classes: usize,
    t_future: usize,
    noise: &mut R,
) -> Result<Vec<Tensor>> {
    if t_future == 0 {
        return Err(Error::Usage("rollout horizon must be at least 1".into()));
    }
    let mut window = past.clone();
    let mut frames = Vec::with_capacity(t_future);
    for _ in 0..t_future {
        let f = predict_frame(model, wiring, sample, &window, noise)?;
        window = advance_window(&window, &f, classes)?;
        frames.push(f);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> VariationalModel {
        let arch = Architecture::EncoderDecoder {
            in_channels: 6,
            out_channels: 4,
            widths: [2, 2, 4],
            kernel: 3,
        };
        VariationalModel::new(arch, 0.8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn window_semantics() {
        let w = Tensor::new(vec![1, 6, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = Tensor::new(vec![1, 2, 1, 1], vec![7.0, 8.0]).unwrap();
        let next = advance_window(&w, &f, 2).unwrap();
        assert_eq!(next.data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn one_step_rollout_is_single_prediction() {
        let m = model();
        let s = m.sample_model(&mut ChaCha8Rng::seed_from_u64(1));
        let past = Tensor::uniform(&[2, 6, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let roll = recursive_rollout(&m, TaskWiring::default(), &s, &past, 2, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let single = predict_frame(&m, TaskWiring::default(), &s, &past, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(roll, vec![single]);
    }

    #[test]
    fn rollout_is_deterministic_and_feeds_back() {
        let m = model();
        let s = m.sample_model(&mut ChaCha8Rng::seed_from_u64(1));
        let past = Tensor::uniform(&[1, 6, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = recursive_rollout(&m, TaskWiring::default(), &s, &past, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = recursive_rollout(&m, TaskWiring::default(), &s, &past, 2, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        // Second frame comes from the window holding the first prediction.
        let mut noise = ChaCha8Rng::seed_from_u64(9);
        let f1 = predict_frame(&m, TaskWiring::default(), &s, &past, &mut noise).unwrap();
        let w1 = advance_window(&past, &f1, 2).unwrap();
        let f2 = predict_frame(&m, TaskWiring::default(), &s, &w1, &mut noise).unwrap();
        assert_eq!(a[1], f2);
        for f in &a {
            for p in 0..16 {
                assert!((f.data()[p] + f.data()[16 + p] - 1.0).abs() < 1e-12);
            }
        }
    }
}
