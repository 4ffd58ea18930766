//! Evaluation metrics: oracle top-k%, mean IoU, calibration and mode coverage.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub k: f64,
    /// Best-subset mean for every input.
    pub per_input: Vec<f64>,
    /// Average of `per_input`.
    pub value: f64,
    pub raw: Vec<Vec<f64>>,
}

/// Number of samples kept by an oracle with fraction `k` out of `s`.
pub fn oracle_count(k: f64, s: usize) -> usize {
    // Guard against 0.05·100 = 5.000000000000001 style rounding.
    (((k * s as f64) - 1e-9).ceil() as usize).clamp(1, s)
}

/// Mean of the best ⌈k·S⌉ scores per input, averaged over inputs.
pub fn top_k_percent(scores: &[Vec<f64>], k: f64, direction: Direction) -> Result<OracleResult> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Usage(format!("k must lie in (0, 1], got {k}")));
    }
    if scores.is_empty() || scores.iter().any(|s| s.is_empty()) {
        return Err(Error::Usage("top_k_percent needs at least one score per input".into()));
    }
    let per_input: Vec<f64> = scores
        .iter()
        .map(|s| {
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| match direction {
                Direction::HigherIsBetter => b.total_cmp(a),
                Direction::LowerIsBetter => a.total_cmp(b),
            });
            let n = oracle_count(k, sorted.len());
            sorted[..n].iter().sum::<f64>() / n as f64
        })
        .collect();
    let value = per_input.iter().sum::<f64>() / per_input.len() as f64;
    Ok(OracleResult {
        k,
        per_input,
        value,
        raw: scores.to_vec(),
    })
}

/// Per-class true-positive, false-positive and false-negative counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize], ignore_label: Option<usize>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!(
                "prediction has {} labels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in pred.iter().zip(gt) {
            if Some(t) == ignore_label {
                continue;
            }
            if p >= c || t >= c {
                return Err(Error::Data(format!("label {} out of range for {c} classes", p.max(t))));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Usage("cannot merge accumulators of different class counts".into()));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }

    /// IoU of every class that occurs in prediction or truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Usage("no scored positions".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize, ignore_label: Option<usize>) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(num_classes);
    acc.add(pred, gt, ignore_label)?;
    acc.miou()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean predicted probability of the entries in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction of entries whose class equals the label (0 when empty).
    pub frequency: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub total: u64,
}

/// Streaming reliability-diagram accumulator over `(position, class)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationAccumulator {
    prob_sum: Vec<f64>,
    correct: Vec<u64>,
    count: Vec<u64>,
}

impl CalibrationAccumulator {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Usage(format!("need at least 2 bins, got {n_bins}")));
        }
        Ok(CalibrationAccumulator {
            prob_sum: vec![0.0; n_bins],
            correct: vec![0; n_bins],
            count: vec![0; n_bins],
        })
    }

    fn bin_of(&self, p: f64) -> usize {
        let n = self.count.len();
        ((p * n as f64).floor() as usize).min(n - 1)
    }

    /// `probs` is class-major (`C×P`), `labels` has one entry per position.
    pub fn add(&mut self, probs: &[f64], labels: &[usize]) -> Result<()> {
        let positions = labels.len();
        if positions == 0 || probs.len() % positions != 0 {
            return Err(Error::dim(format!(
                "{} probabilities do not split over {positions} positions",
                probs.len()
            )));
        }
        let classes = probs.len() / positions;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        for c in 0..classes {
            for (p, &label) in labels.iter().enumerate() {
                let v = probs[c * positions + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!("probability {v} outside [0, 1]")));
                }
                let b = self.bin_of(v);
                self.prob_sum[b] += v;
                self.count[b] += 1;
                if c == label {
                    self.correct[b] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationAccumulator) -> Result<()> {
        if other.count.len() != self.count.len() {
            return Err(Error::Usage("cannot merge calibration tables with different bins".into()));
        }
        for b in 0..self.count.len() {
            self.prob_sum[b] += other.prob_sum[b];
            self.correct[b] += other.correct[b];
            self.count[b] += other.count[b];
        }
        Ok(())
    }

    pub fn finish(&self) -> CalibrationTable {
        let n = self.count.len();
        let total: u64 = self.count.iter().sum();
        let bins: Vec<CalibrationBin> = (0..n)
            .map(|b| {
                let count = self.count[b];
                let (confidence, frequency) = if count == 0 {
                    (0.0, 0.0)
                } else {
                    (self.prob_sum[b] / count as f64, self.correct[b] as f64 / count as f64)
                };
                CalibrationBin {
                    lower: b as f64 / n as f64,
                    upper: (b + 1) as f64 / n as f64,
                    confidence,
                    frequency,
                    count,
                }
            })
            .collect();
        let ece = if total == 0 {
            0.0
        } else {
            bins.iter()
                .map(|b| b.count as f64 / total as f64 * (b.confidence - b.frequency).abs())
                .sum()
        };
        CalibrationTable { bins, ece, total }
    }
}

/// Reliability table of class-major probabilities `C×P` against labels.
pub fn calibration(mean_probs: &[f64], labels: &[usize], n_bins: usize) -> Result<CalibrationTable> {
    let mut acc = CalibrationAccumulator::new(n_bins)?;
    acc.add(mean_probs, labels)?;
    Ok(acc.finish())
}

/// For each mode, how many models' average prediction over the probe set lies
/// within `tol` of it.
pub fn mode_coverage(model_preds: &[Vec<f64>], modes: &[f64], tol: f64) -> Result<Vec<usize>> {
    if model_preds.is_empty() || model_preds.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage("mode_coverage needs at least one model with predictions".into()));
    }
    let means: Vec<f64> = model_preds
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .collect();
    Ok(modes
        .iter()
        .map(|&m| means.iter().filter(|&&v| (v - m).abs() <= tol).count())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        let same = vec![vec![0.7; 20]; 3];
        for k in [0.05, 0.5, 1.0] {
            let v = top_k_percent(&same, k, Direction::HigherIsBetter).unwrap().value;
            assert!((v - 0.7).abs() < 1e-12);
        }
        let ramp = vec![(1..=100).map(f64::from).collect::<Vec<_>>()];
        assert_eq!(top_k_percent(&ramp, 0.05, Direction::HigherIsBetter).unwrap().value, 98.0);
        assert_eq!(top_k_percent(&ramp, 0.05, Direction::LowerIsBetter).unwrap().value, 3.0);
        assert_eq!(top_k_percent(&ramp, 1.0, Direction::HigherIsBetter).unwrap().value, 50.5);
        assert!(top_k_percent(&[], 0.1, Direction::HigherIsBetter).is_err());
        assert!(top_k_percent(&ramp, 0.0, Direction::HigherIsBetter).is_err());
    }

    #[test]
    fn oracle_counts() {
        assert_eq!(oracle_count(0.05, 100), 5);
        assert_eq!(oracle_count(0.1, 10), 1);
        assert_eq!(oracle_count(0.01, 10), 1);
        assert_eq!(oracle_count(1.0, 7), 7);
    }

    #[test]
    fn miou_examples() {
        let gt = [0, 1, 1, 0, 2];
        assert_eq!(miou(&gt, &gt, 3, None).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1, 1], &[0, 0, 0], 2, None).unwrap(), 0.0);
        // 2 classes, 8 positions, every other label flipped: tp=2, fp=2, fn=2 per class.
        let truth = [0, 0, 0, 0, 1, 1, 1, 1];
        let pred = [1, 0, 1, 0, 0, 1, 0, 1];
        assert!((miou(&pred, &truth, 2, None).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(miou(&[3], &[0], 2, None), Err(Error::Data(_))));
    }

    #[test]
    fn miou_ignores_label_and_absent_classes() {
        let v = miou(&[0, 1, 2], &[0, 255, 0], 3, Some(255)).unwrap();
        // class 0: tp 1, fn 1; class 2: fp 1; class 1 ignored and absent.
        assert!((v - (0.5 + 0.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_perfect_predictor() {
        // 3 classes, 4 positions, probability 1 on the truth.
        let labels = [0, 2, 1, 2];
        let mut probs = vec![0.0; 12];
        for (p, &l) in labels.iter().enumerate() {
            probs[l * 4 + p] = 1.0;
        }
        let t = calibration(&probs, &labels, 10).unwrap();
        assert_eq!(t.total, 12);
        assert_eq!(t.bins[9].frequency, 1.0);
        assert_eq!(t.bins[9].count, 4);
        assert_eq!(t.bins[0].frequency, 0.0);
        assert!(t.ece.abs() < 1e-15);
        assert!(calibration(&probs, &labels, 1).is_err());
    }

    #[test]
    fn calibration_constant_half_on_balanced_binary() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let probs = vec![0.5; 2000];
        let t = calibration(&probs, &labels, 10).unwrap();
        assert_eq!(t.bins[5].count, 2000);
        assert_eq!(t.bins[5].frequency, 0.5);
    }

    #[test]
    fn mode_coverage_examples() {
        let at_mode = vec![vec![0.3, 0.3]; 4];
        assert_eq!(mode_coverage(&at_mode, &[0.3, -0.3], 0.15).unwrap(), vec![4, 0]);
        let alternating: Vec<Vec<f64>> = (0..10).map(|i| vec![if i % 2 == 0 { -0.3 } else { 0.3 }]).collect();
        assert_eq!(mode_coverage(&alternating, &[-0.3, 0.3], 0.15).unwrap(), vec![5, 5]);
        let all = mode_coverage(&alternating, &[-0.3, 0.3], f64::INFINITY).unwrap();
        assert!(all.iter().all(|&c| c == 10));
        assert!(mode_coverage(&[], &[0.0], 1.0).is_err());
    }

    #[test]
    fn accumulators_merge() {
        let mut a = ConfusionAccumulator::new(2);
        a.add(&[0, 1], &[0, 0], None).unwrap();
        let mut b = ConfusionAccumulator::new(2);
        b.add(&[1], &[1], None).unwrap();
        a.merge(&b).unwrap();
        let mut whole = ConfusionAccumulator::new(2);
        whole.add(&[0, 1, 1], &[0, 0, 1], None).unwrap();
        assert_eq!(a, whole);
    }
}
