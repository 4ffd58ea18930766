use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{DigitClassifier, DIGITS};
use super::config::{ExperimentConfig, Task};
use super::data::{self, MovingShapesSpec};
use super::rollout::recursive_rollout;
use super::stream_rng;
use crate::dropout::{Architecture, ModelSample, VariationalModel};
use crate::error::{Error, Result, StageExt};
use crate::head::{self, HeadMode, MixtureDistribution};
use crate::metrics::{self, CalibrationAccumulator, CalibrationTable, Direction};
use crate::synthetic::{self, Batch, Discriminator, StepLog, TrainState};
use crate::tensor::{Graph, Tensor};

// Stream ids under the experiment seed; the trainer's own streams are 1–3.
const SHUFFLE: u64 = 4;
const GEN_INIT: u64 = 5;
const DISC_INIT: u64 = 6;
const SPLIT: u64 = 7;
const EVAL_MASK: u64 = 1 << 20;
const EVAL_NOISE: u64 = 1 << 21;

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub metric: String,
    pub horizon: Option<usize>,
    pub k: Option<f64>,
    pub value: f64,
}

/// A grid written under `samples/`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDump {
    pub file: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Vec<MetricRow>,
    pub calibration: Option<CalibrationTable>,
    pub samples: Vec<SampleDump>,
}

impl Evaluation {
    pub fn metric(&self, name: &str, horizon: Option<usize>) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == name && (horizon.is_none() || m.horizon == horizon))
            .map(|m| m.value)
    }
}

/// Everything needed to resume evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub generator: VariationalModel,
    pub discriminator: Discriminator,
    pub epoch: usize,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Task data after generation or ingestion.
#[derive(Clone, Debug)]
pub enum Prepared {
    Bimodal {
        train: Batch,
        probe: Tensor,
    },
    Mnist {
        train: Batch,
        test_x: Tensor,
        test_labels: Vec<usize>,
        classifier: DigitClassifier,
    },
    Shapes {
        train: Batch,
        /// `N×(T·C)×H×W` smoothed class probabilities of the past frames.
        test_past: Tensor,
        /// `future[h][i]`: ground-truth class indices of input `i` at horizon `h+1`.
        future: Vec<Vec<Vec<usize>>>,
        spec: MovingShapesSpec,
    },
}

impl Prepared {
    pub fn train_batch(&self) -> &Batch {
        match self {
            Prepared::Bimodal { train, .. } | Prepared::Mnist { train, .. } | Prepared::Shapes { train, .. } => train,
        }
    }
}

fn smoothed_probs(frame: &[usize], classes: usize, eps: f64) -> Vec<f64> {
    data::one_hot_frame(frame, classes)
        .into_iter()
        .map(|v| (1.0 - eps) * v + eps / classes as f64)
        .collect()
}

/// Windows of `t_past` frames with the following frame as target, taken at
/// every future step so rollouts see their own feedback regime.
fn shape_windows(seqs: &[data::SceneSequence], spec: &MovingShapesSpec, eps: f64) -> Result<Batch> {
    let (c, h, w) = (spec.classes, spec.height, spec.width);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0;
    for s in seqs {
        for t in spec.t_past..spec.t_past + spec.t_future {
            for f in &s.frames[t - spec.t_past..t] {
                xs.extend(smoothed_probs(f, c, eps));
            }
            ys.extend(data::log_confidence_frame(&s.frames[t], c, eps));
            n += 1;
        }
    }
    Ok(Batch {
        x: Tensor::new(vec![n, spec.t_past * c, h, w], xs)?,
        y: Tensor::new(vec![n, c, h, w], ys)?,
    })
}

fn output_dims(arch: &Architecture) -> usize {
    match arch {
        Architecture::Mlp { output, .. } => *output,
        Architecture::EncoderDecoder { out_channels, .. } => *out_channels,
        Architecture::ConvClassifier { .. } => 1,
    }
}

fn input_dims(arch: &Architecture) -> usize {
    match arch {
        Architecture::Mlp { input, .. } => *input,
        Architecture::EncoderDecoder { in_channels, .. } | Architecture::ConvClassifier { in_channels, .. } => {
            *in_channels
        }
    }
}

/// Generator output and discriminator input widths must match the task.
fn check_wiring(cfg: &ExperimentConfig, x_dims: usize, y_dims: usize) -> Result<()> {
    let raw = cfg.wiring.head.raw_channels(y_dims);
    let checks = [
        ("generator input", input_dims(&cfg.generator), x_dims),
        ("generator output", output_dims(&cfg.generator), raw),
        ("discriminator input", input_dims(&cfg.discriminator), x_dims + y_dims),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(Error::Config(format!("{what} is {got}, task needs {want}")));
        }
    }
    Ok(())
}

/// Generates or loads the task data. Relative paths resolve against `data_dir`.
pub fn prepare(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Prepared> {
    match &cfg.task {
        Task::Bimodal {
            train,
            probe_points,
            probe_range: [lo, hi],
            ..
        } => {
            check_wiring(cfg, 1, 1)?;
            let (x, y) = data::gen_bimodal_2d(train, cfg.seed)?;
            let n = *probe_points;
            let probe = (0..n)
                .map(|i| if n == 1 { *lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
                .collect();
            Ok(Prepared::Bimodal {
                train: Batch { x, y },
                probe: Tensor::new(vec![n, 1], probe)?,
            })
        }
        Task::Mnist {
            images,
            labels,
            n_train,
            n_test,
            classifier,
        } => {
            let imgs = data::parse_idx_images(&data::read_maybe_gz(&data_dir.join(images))?)?;
            let labs = data::parse_idx_labels(&data::read_maybe_gz(&data_dir.join(labels))?)?;
            let total = n_train + n_test;
            if imgs.shape()[0] < total || labs.len() < total {
                return Err(Error::Data(format!(
                    "need {total} digits, files hold {} images and {} labels",
                    imgs.shape()[0],
                    labs.len()
                )));
            }
            let (qx, full) = data::make_quarter_completion(&imgs)?;
            check_wiring(cfg, qx.shape()[1], full.shape()[1])?;
            let labs: Vec<usize> = labs.iter().map(|&l| usize::from(l)).collect();
            // Files may be sorted by digit, so split on a seeded permutation.
            let mut order: Vec<usize> = (0..labs.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, SPLIT));
            let (train_idx, test_idx) = (&order[..*n_train], &order[*n_train..total]);
            let train_labels: Vec<usize> = train_idx.iter().map(|&i| labs[i]).collect();
            let train_full = full.gather_first(train_idx)?;
            let clf = DigitClassifier::train(&train_full, &train_labels, classifier, cfg.seed)
                .stage("classifier")?;
            Ok(Prepared::Mnist {
                train: Batch {
                    x: qx.gather_first(train_idx)?,
                    y: train_full,
                },
                test_x: qx.gather_first(test_idx)?,
                test_labels: test_idx.iter().map(|&i| labs[i]).collect(),
                classifier: clf,
            })
        }
        Task::MovingShapes {
            scenes,
            n_train,
            n_test,
            label_smoothing,
        } => {
            let c = scenes.classes;
            if input_dims(&cfg.generator) != scenes.t_past * c {
                return Err(Error::Config(format!(
                    "generator takes {} channels, task stacks {} frames of {c} classes",
                    input_dims(&cfg.generator),
                    scenes.t_past
                )));
            }
            check_wiring(cfg, scenes.t_past * c, c)?;
            let train_seqs = data::gen_moving_shapes(scenes, *n_train, cfg.seed)?;
            let test_seqs = data::gen_moving_shapes(scenes, *n_test, cfg.seed.wrapping_add(0x7E57))?;
            let train = shape_windows(&train_seqs, scenes, *label_smoothing)?;
            let mut past = Vec::new();
            for s in &test_seqs {
                for f in s.past(scenes.t_past) {
                    past.extend(smoothed_probs(f, c, *label_smoothing));
                }
            }
            let future = (0..scenes.t_future)
                .map(|h| test_seqs.iter().map(|s| s.frames[scenes.t_past + h].clone()).collect())
                .collect();
            Ok(Prepared::Shapes {
                train,
                test_past: Tensor::new(vec![*n_test, scenes.t_past * c, scenes.height, scenes.width], past)?,
                future,
                spec: scenes.clone(),
            })
        }
    }
}

/// Fresh generator, discriminator and optimisers for `cfg`.
pub fn build_state(cfg: &ExperimentConfig) -> Result<TrainState> {
    let generator = VariationalModel::new(cfg.generator.clone(), cfg.retain_prob(), &mut stream_rng(cfg.seed, GEN_INIT))?;
    let discriminator = Discriminator::new(cfg.discriminator.clone(), &mut stream_rng(cfg.seed, DISC_INIT))?;
    TrainState::new(
        generator,
        discriminator,
        cfg.loss.clone(),
        cfg.wiring,
        cfg.gen_lr,
        cfg.disc_lr,
        cfg.seed,
    )
}

/// Runs `cfg.epochs` epochs of shuffled minibatches.
pub fn train(cfg: &ExperimentConfig, data: &Prepared, state: &mut TrainState) -> Result<Vec<StepLog>> {
    let all = data.train_batch();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut shuffle = stream_rng(cfg.seed, SHUFFLE);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                x: all.x.gather_first(chunk)?,
                y: all.y.gather_first(chunk)?,
            };
            logs.push(state.train_step(&batch)?);
        }
        log::debug!("{} epoch {epoch}: last generator loss {:?}", cfg.name, logs.last().map(|l| l.generator_loss));
    }
    Ok(logs)
}

/// The `i`-th evaluation model sample and its noise stream.
fn eval_draw(cfg: &ExperimentConfig, model: &VariationalModel, i: usize) -> (ModelSample, rand_chacha::ChaCha8Rng) {
    let sample = model.sample_model(&mut stream_rng(cfg.seed, EVAL_MASK + i as u64));
    (sample, stream_rng(cfg.seed, EVAL_NOISE + i as u64))
}

/// Gaussian means of one sampled model.
fn sample_means(model: &VariationalModel, head_mode: HeadMode, sample: &ModelSample, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let raw = model.forward(&mut g, &b, Some(sample), xi)?;
    let pred = head::split_statistics(&mut g, raw, head_mode)?;
    Ok(g.value(pred.mu).clone())
}

fn row(cfg: &ExperimentConfig, metric: &str, horizon: Option<usize>, k: Option<f64>, value: f64) -> MetricRow {
    MetricRow {
        experiment: cfg.name.clone(),
        metric: metric.into(),
        horizon,
        k,
        value,
    }
}

/// Scores `generator` on the held-out part of the task with `samples_eval`
/// model samples, evaluated in parallel and collected by index.
pub fn evaluate(cfg: &ExperimentConfig, data: &Prepared, generator: &VariationalModel) -> Result<Evaluation> {
    let s_eval = cfg.samples_eval;
    match data {
        Prepared::Bimodal { probe, .. } => {
            let Task::Bimodal { tolerance, .. } = &cfg.task else {
                return Err(Error::Usage("prepared data does not match the task".into()));
            };
            let preds = (0..s_eval)
                .into_par_iter()
                .map(|i| sample_means(generator, cfg.wiring.head, &eval_draw(cfg, generator, i).0, probe))
                .collect::<Result<Vec<_>>>()?;
            let per_model: Vec<Vec<f64>> = preds.iter().map(|p| p.data().to_vec()).collect();
            let cov = metrics::mode_coverage(&per_model, &[0.3, -0.3, 0.0], *tolerance)?;
            let samples = per_model
                .iter()
                .enumerate()
                .map(|(i, p)| SampleDump {
                    file: format!("model_{i:03}.csv"),
                    rows: probe.data().iter().zip(p).map(|(&x, &y)| vec![x, y]).collect(),
                })
                .collect();
            Ok(Evaluation {
                metrics: vec![
                    row(cfg, "coverage_plus", None, None, cov[0] as f64),
                    row(cfg, "coverage_minus", None, None, cov[1] as f64),
                    row(cfg, "coverage_zero", None, None, cov[2] as f64),
                ],
                calibration: None,
                samples,
            })
        }
        Prepared::Mnist {
            test_x,
            test_labels,
            classifier,
            ..
        } => {
            let n = test_labels.len();
            let per_sample = (0..s_eval)
                .into_par_iter()
                .map(|i| -> Result<(Tensor, Tensor)> {
                    let imgs = sample_means(generator, cfg.wiring.head, &eval_draw(cfg, generator, i).0, test_x)?
                        .map(|v| v.clamp(0.0, 1.0));
                    let probs = classifier.probabilities(&imgs)?;
                    Ok((imgs, probs))
                })
                .collect::<Result<Vec<_>>>()?;
            let argmax = |row: &[f64]| (0..DIGITS).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    per_sample
                        .iter()
                        .map(|(_, p)| f64::from(u8::from(argmax(&p.data()[j * DIGITS..(j + 1) * DIGITS]) == test_labels[j])))
                        .collect()
                })
                .collect();
            let oracle = metrics::top_k_percent(&scores, cfg.oracle_k, Direction::HigherIsBetter)?;
            let sample_acc = scores.iter().flatten().sum::<f64>() / (n * s_eval) as f64;
            // Mean completion and the mean of class probabilities over samples.
            let mut mean_img_data = vec![0.0; n * per_sample[0].0.shape()[1]];
            let mut class_major = vec![0.0; DIGITS * n];
            for (imgs, probs) in &per_sample {
                for (a, v) in mean_img_data.iter_mut().zip(imgs.data()) {
                    *a += v / s_eval as f64;
                }
                for j in 0..n {
                    for c in 0..DIGITS {
                        class_major[c * n + j] += probs.data()[j * DIGITS + c] / s_eval as f64;
                    }
                }
            }
            let mean_img = Tensor::new(vec![n, per_sample[0].0.shape()[1]], mean_img_data)?;
            let mean_acc = classifier.accuracy(&mean_img, test_labels)?;
            let mut cal = CalibrationAccumulator::new(10)?;
            cal.add(&class_major, test_labels)?;
            let side = (per_sample[0].0.shape()[1] as f64).sqrt() as usize;
            let mut samples = Vec::new();
            for j in 0..n.min(4) {
                for (i, (imgs, _)) in per_sample.iter().enumerate() {
                    let img = &imgs.data()[j * side * side..(j + 1) * side * side];
                    samples.push(SampleDump {
                        file: format!("input_{j:03}_sample_{i:03}.csv"),
                        rows: img.chunks(side).map(<[f64]>::to_vec).collect(),
                    });
                }
            }
            Ok(Evaluation {
                metrics: vec![
                    row(cfg, "oracle_accuracy", None, Some(cfg.oracle_k), oracle.value),
                    row(cfg, "sample_accuracy", None, None, sample_acc),
                    row(cfg, "mean_prediction_accuracy", None, None, mean_acc),
                ],
                calibration: Some(cal.finish()),
                samples,
            })
        }
        Prepared::Shapes {
            test_past, future, spec, ..
        } => {
            let c = spec.classes;
            let n = test_past.shape()[0];
            let plane = spec.height * spec.width;
            // rollouts[i][h]: N×C×H×W probabilities of sample i at horizon h+1.
            let rollouts = (0..s_eval)
                .into_par_iter()
                .map(|i| {
                    let (sample, mut noise) = eval_draw(cfg, generator, i);
                    recursive_rollout(generator, cfg.wiring, &sample, test_past, c, spec.t_future, &mut noise)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            let mut cal = CalibrationAccumulator::new(10)?;
            for h in 0..spec.t_future {
                let mut scores = Vec::with_capacity(n);
                let (mut mean_miou, mut cll) = (0.0, 0.0);
                for j in 0..n {
                    let gt = &future[h][j];
                    let comps: Vec<Tensor> = rollouts
                        .iter()
                        .map(|r| Tensor::new(vec![c, plane], r[h].data()[j * c * plane..(j + 1) * c * plane].to_vec()))
                        .collect::<Result<_>>()?;
                    scores.push(
                        comps
                            .iter()
                            .map(|p| metrics::miou(&data::argmax_classes(p.data(), c), gt, c, None))
                            .collect::<Result<Vec<_>>>()?,
                    );
                    let mix = MixtureDistribution::new(comps)?;
                    let mean = mix.mean();
                    mean_miou += metrics::miou(&data::argmax_classes(mean.data(), c), gt, c, None)?;
                    cll += head::mixture_cll(&mix, gt)?;
                    cal.add(mean.data(), gt)?;
                }
                let oracle = metrics::top_k_percent(&scores, cfg.oracle_k, Direction::HigherIsBetter)?;
                let hz = Some(h + 1);
                rows.push(row(cfg, "miou_oracle", hz, Some(cfg.oracle_k), oracle.value));
                rows.push(row(cfg, "miou_mean", hz, None, mean_miou / n as f64));
                rows.push(row(cfg, "cll", hz, None, cll / n as f64));
            }
            let mut samples = Vec::new();
            for j in 0..n.min(2) {
                for (i, r) in rollouts.iter().enumerate().take(10) {
                    for (h, frame) in r.iter().enumerate() {
                        let cls = data::argmax_classes(&frame.data()[j * c * plane..(j + 1) * c * plane], c);
                        samples.push(SampleDump {
                            file: format!("input_{j:03}_sample_{i:03}_h{}.csv", h + 1),
                            rows: cls.chunks(spec.width).map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
                        });
                    }
                }
            }
            Ok(Evaluation {
                metrics: rows,
                calibration: Some(cal.finish()),
                samples,
            })
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration(path: &Path, table: &CalibrationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin", "confidence", "frequency", "count"])?;
    for (i, b) in table.bins.iter().enumerate() {
        w.write_record([i.to_string(), b.confidence.to_string(), b.frequency.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_grid(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in rows {
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `calibration.csv` (when the task has classes) and `samples/`.
pub fn write_evaluation(out_dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(out_dir.join("samples"))?;
    write_metrics(&out_dir.join("metrics.csv"), &eval.metrics)?;
    if let Some(t) = &eval.calibration {
        write_calibration(&out_dir.join("calibration.csv"), t)?;
    }
    for s in &eval.samples {
        write_grid(&out_dir.join("samples").join(&s.file), &s.rows)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub evaluation: Evaluation,
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
}

/// Trains, evaluates and (with `out_dir`) writes every artifact plus `checkpoint.json`.
pub fn run_experiment(cfg: &ExperimentConfig, data_dir: &Path, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate().stage("config")?;
    let data = prepare(cfg, data_dir).stage("data")?;
    let mut state = build_state(cfg).stage("setup")?;
    let logs = train(cfg, &data, &mut state).stage("train")?;
    let evaluation = evaluate(cfg, &data, &state.generator).stage("evaluate")?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        generator: state.generator,
        discriminator: state.discriminator,
        epoch: cfg.epochs,
        step: state.step,
    };
    if let Some(dir) = out_dir {
        (|| -> Result<()> {
            write_evaluation(dir, &evaluation)?;
            let mut f = fs::File::create(dir.join("train_log.csv"))?;
            synthetic::write_step_log(&mut f, &logs)?;
            checkpoint.save(&dir.join("checkpoint.json"))
        })()
        .stage("write")?;
    }
    Ok(RunOutput {
        evaluation,
        checkpoint,
        logs,
    })
}

/// Re-evaluates a saved generator against freshly prepared data.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data_dir: &Path) -> Result<Evaluation> {
    let data = prepare(&ckpt.config, data_dir).stage("data")?;
    evaluate(&ckpt.config, &data, &ckpt.generator).stage("evaluate")
}
