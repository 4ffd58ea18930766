use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{Bimodal2DSpec, MovingShapesSpec};
use crate::dropout::{Activation, Architecture};
use crate::error::{Error, Result};
use crate::synthetic::{HybridLossConfig, TaskWiring};

/// Evaluation classifier for completed digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Bimodal {
        train: Bimodal2DSpec,
        /// Probe points spread evenly over `probe_range`.
        probe_points: usize,
        probe_range: [f64; 2],
        tolerance: f64,
    },
    Mnist {
        /// Relative paths resolve against the data directory given at run time.
        images: PathBuf,
        labels: PathBuf,
        n_train: usize,
        n_test: usize,
        classifier: ClassifierSpec,
    },
    MovingShapes {
        scenes: MovingShapesSpec,
        n_train: usize,
        n_test: usize,
        /// ε of the smoothed one-hot targets.
        label_smoothing: f64,
    },
}

impl Task {
    pub fn id(&self) -> &'static str {
        match self {
            Task::Bimodal { .. } => "bimodal",
            Task::Mnist { .. } => "mnist",
            Task::MovingShapes { .. } => "moving_shapes",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub generator: Architecture,
    pub discriminator: Architecture,
    #[serde(default)]
    pub wiring: TaskWiring,
    pub dropout_rate: f64,
    pub loss: HybridLossConfig,
    #[serde(default = "one")]
    pub samples_train: usize,
    pub samples_eval: usize,
    pub oracle_k: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

const PRESETS: [(&str, &str); 6] = [
    ("bimodal-sl", include_str!("../../../../configs/bimodal-sl.json")),
    ("bimodal-s", include_str!("../../../../configs/bimodal-s.json")),
    ("mnist-sl", include_str!("../../../../configs/mnist-sl.json")),
    ("mnist-s", include_str!("../../../../configs/mnist-s.json")),
    ("shapes-sl", include_str!("../../../../configs/shapes-sl.json")),
    ("shapes-det", include_str!("../../../../configs/shapes-det.json")),
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no shipped config named `{name}`")))?;
        Self::from_json(text)
    }

    /// A preset name or a path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn retain_prob(&self) -> f64 {
        1.0 - self.dropout_rate
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return cfg_err(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.oracle_k > 0.0 && self.oracle_k <= 1.0) {
            return cfg_err(format!("oracle_k must lie in (0, 1], got {}", self.oracle_k));
        }
        if self.samples_train != 1 {
            return cfg_err("samples_train must be 1 (one model sample per step)".into());
        }
        if self.samples_eval == 0 || self.epochs == 0 || self.batch_size == 0 {
            return cfg_err("samples_eval, epochs and batch_size must be positive".into());
        }
        for (n, lr) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return cfg_err(format!("{n} must be positive"));
            }
        }
        self.loss.validate()?;
        self.wiring.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        match &self.task {
            Task::Bimodal {
                train,
                probe_points,
                probe_range,
                tolerance,
            } => {
                if train.n == 0 || *probe_points == 0 || probe_range[0] > probe_range[1] || !(*tolerance >= 0.0) {
                    return cfg_err("bimodal task needs data, probe points, an ordered probe range and tol ≥ 0".into());
                }
            }
            Task::Mnist {
                n_train,
                n_test,
                classifier,
                ..
            } => {
                if *n_train == 0 || *n_test == 0 || classifier.hidden == 0 || classifier.batch_size == 0 {
                    return cfg_err("mnist task needs positive split sizes and classifier width".into());
                }
            }
            Task::MovingShapes {
                scenes,
                n_train,
                n_test,
                label_smoothing,
            } => {
                scenes.validate()?;
                if *n_train == 0 || *n_test == 0 {
                    return cfg_err("moving shapes needs positive split sizes".into());
                }
                if !(*label_smoothing > 0.0 && *label_smoothing < 1.0) {
                    return cfg_err("label_smoothing must lie in (0, 1)".into());
                }
            }
        }
        Ok(())
    }
}

/// Parses an architecture given as a preset name (`bimodal`, `mnist`,
/// `shapes`) or inline JSON.
pub fn architecture_arg(arg: &str) -> Result<Architecture> {
    let relu = Activation::Relu;
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    let arch = match arg {
        "shapes" => Architecture::EncoderDecoder {
            in_channels: 12,
            out_channels: 6,
            widths: [8, 16, 32],
            kernel: 3,
        },
        "mnist" => Architecture::Mlp {
            input: 196,
            hidden: vec![512, 256],
            output: 1568,
            activation: leaky,
        },
        "bimodal" => Architecture::Mlp {
            input: 1,
            hidden: vec![256, 128],
            output: 1,
            activation: relu,
        },
        json => serde_json::from_str(json)?,
    };
    arch.validate()?;
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadMode;

    #[test]
    fn presets_parse_and_validate() {
        for name in ExperimentConfig::preset_names() {
            ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn bimodal_sl_preset_encodes_appendix_settings() {
        let c = ExperimentConfig::preset("bimodal-sl").unwrap();
        match &c.generator {
            Architecture::Mlp { hidden, .. } => assert_eq!(hidden, &[256, 128]),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.dropout_rate, 0.5);
        assert_eq!((c.loss.alpha, c.loss.beta), (1.0, 0.0));
        assert_eq!(c.wiring.head, HeadMode::ConstantSigma);
    }

    #[test]
    fn mnist_sl_preset_encodes_schedule_and_oracle() {
        let c = ExperimentConfig::preset("mnist-sl").unwrap();
        for e in 0..4 {
            assert_eq!(crate::synthetic::beta_schedule(e, &c.loss), 1e-4);
        }
        assert_eq!(crate::synthetic::beta_schedule(4, &c.loss), 0.0);
        assert_eq!(c.samples_eval, 10);
        assert_eq!(c.oracle_k, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["learning_rate"] = serde_json::json!(0.1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["generator"]["depth"] = serde_json::json!(3);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn rates_are_checked() {
        let mut c = ExperimentConfig::preset("bimodal-s").unwrap();
        c.dropout_rate = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn architecture_presets() {
        assert!(architecture_arg("shapes").is_ok());
        assert!(architecture_arg(r#"{"type":"mlp","input":2,"hidden":[3],"output":1,"activation":{"kind":"relu"}}"#).is_ok());
        assert!(architecture_arg("nonsense").is_err());
    }
}
