//! Dataset generators and the IDX reader.

use std::io::Read;
use std::path::Path;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two-branch regression data: a single curve at `left_value` for `x ≤ 0`
/// and two equiprobable point modes for `x > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bimodal2DSpec {
    pub n: usize,
    #[serde(default = "default_x_range")]
    pub x_range: [f64; 2],
    #[serde(default = "default_modes")]
    pub modes: [f64; 2],
    #[serde(default)]
    pub left_value: f64,
}

fn default_x_range() -> [f64; 2] {
    [-10.0, 10.0]
}

fn default_modes() -> [f64; 2] {
    [-0.3, 0.3]
}

impl Bimodal2DSpec {
    pub fn new(n: usize) -> Self {
        Bimodal2DSpec {
            n,
            x_range: default_x_range(),
            modes: default_modes(),
            left_value: 0.0,
        }
    }
}

/// `(x, y)` pairs as two `n×1` tensors.
pub fn gen_bimodal_2d(spec: &Bimodal2DSpec, seed: u64) -> Result<(Tensor, Tensor)> {
    if spec.n == 0 {
        return Err(Error::Config("bimodal dataset needs n ≥ 1".into()));
    }
    let [lo, hi] = spec.x_range;
    if !(lo <= 0.0 && 0.0 < hi) {
        return Err(Error::Config(format!("x range [{lo}, {hi}] must straddle 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = rng.random_range(lo..=hi);
        let y = if x <= 0.0 {
            spec.left_value
        } else {
            spec.modes[rng.random_range(0..2)]
        };
        xs.push(x);
        ys.push(y);
    }
    Ok((Tensor::new(vec![spec.n, 1], xs)?, Tensor::new(vec![spec.n, 1], ys)?))
}

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Decoded IDX payload.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `N×rows×cols`, rescaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            msg: "truncated header".into(),
        })
}

/// Header extents of an IDX byte stream without decoding the payload.
pub fn idx_header(bytes: &[u8]) -> Result<(u32, Vec<usize>)> {
    let magic = be_u32(bytes, 0)?;
    let ndim = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unknown magic {other:#010x}"),
            })
        }
    };
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((magic, dims))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let (magic, dims) = idx_header(bytes)?;
    let start = 4 + 4 * dims.len();
    let len: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < len {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("payload truncated: expected {len} bytes after offset {start}, found {}", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(Error::Format {
            offset: start + len,
            msg: format!("{} trailing bytes", payload.len() - len),
        });
    }
    if magic == IDX_LABELS {
        return Ok(IdxData::Labels(payload.to_vec()));
    }
    if dims.contains(&0) {
        return Err(Error::Format {
            offset: 4,
            msg: "zero image extent".into(),
        });
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(IdxData::Images(Tensor::new(dims, data)?))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    match parse_idx(bytes)? {
        IdxData::Images(t) => Ok(t),
        IdxData::Labels(_) => Err(Error::Format {
            offset: 0,
            msg: format!("expected image magic {IDX_IMAGES:#010x}, found label magic"),
        }),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match parse_idx(bytes)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => Err(Error::Format {
            offset: 0,
            msg: format!("expected label magic {IDX_LABELS:#010x}, found image magic"),
        }),
    }
}

/// Reads a file, gunzipping when it carries the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Inputs (lower-left quarter, flattened) and targets (whole image, flattened).
pub fn make_quarter_completion(images: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = images.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] % 2 != 0 {
        return Err(Error::dim(format!(
            "quarter completion needs N×H×H images with even H, got {s:?}"
        )));
    }
    let (n, side) = (s[0], s[1]);
    let half = side / 2;
    let mut xs = Vec::with_capacity(n * half * half);
    for i in 0..n {
        let img = &images.data()[i * side * side..(i + 1) * side * side];
        for r in half..side {
            xs.extend_from_slice(&img[r * side..r * side + half]);
        }
    }
    Ok((
        Tensor::new(vec![n, half * half], xs)?,
        Tensor::new(vec![n, side * side], images.data().to_vec())?,
    ))
}

/// Writes flattened quarters back into the lower-left block of `images`.
pub fn paste_quarter(images: &Tensor, quarters: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] % 2 != 0 {
        return Err(Error::dim(format!("cannot paste into {s:?}")));
    }
    let (n, side) = (s[0], s[1]);
    let half = side / 2;
    if quarters.shape() != [n, half * half] {
        return Err(Error::shapes("paste_quarter", quarters.shape(), &[n, half * half]));
    }
    let mut out = images.clone();
    for i in 0..n {
        for r in 0..half {
            let src = &quarters.data()[(i * half + r) * half..(i * half + r + 1) * half];
            let dst = (i * side + half + r) * side;
            out.data_mut()[dst..dst + half].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Parameters of the toy segmentation-forecasting task: a square object of a
/// random foreground class moves with constant velocity, then at the branch
/// point picks one of `branches` headings and keeps it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingShapesSpec {
    pub height: usize,
    pub width: usize,
    /// Classes including background (class 0).
    pub classes: usize,
    pub branches: usize,
    /// Branch probabilities; empty means equiprobable.
    #[serde(default)]
    pub mode_probs: Vec<f64>,
    pub t_past: usize,
    pub t_future: usize,
    pub object_size: usize,
    pub speed: usize,
}

impl Default for MovingShapesSpec {
    fn default() -> Self {
        MovingShapesSpec {
            height: 16,
            width: 16,
            classes: 3,
            branches: 2,
            mode_probs: Vec::new(),
            t_past: 4,
            t_future: 2,
            object_size: 4,
            speed: 2,
        }
    }
}

/// Headings relative to the past direction: straight, left, right, back.
const TURNS: [fn((isize, isize)) -> (isize, isize); 4] = [
    |(dy, dx)| (dy, dx),
    |(dy, dx)| (-dx, dy),
    |(dy, dx)| (dx, -dy),
    |(dy, dx)| (-dy, -dx),
];

const HEADINGS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

/// One generated sequence of class-index frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    /// `t_past + t_future` frames, each `H·W` class indices.
    pub frames: Vec<Vec<usize>>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Branch actually taken.
    pub mode: usize,
    /// Top-left corner of the object per frame.
    pub positions: Vec<(isize, isize)>,
}

impl SceneSequence {
    pub fn past(&self, t_past: usize) -> &[Vec<usize>] {
        &self.frames[..t_past]
    }

    pub fn centroid(&self, t: usize, size: usize) -> (f64, f64) {
        let (y, x) = self.positions[t];
        let h = (size as f64 - 1.0) / 2.0;
        (y as f64 + h, x as f64 + h)
    }
}

impl MovingShapesSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.classes < 2 {
            return bad("moving shapes needs background plus at least one object class");
        }
        if !(1..=4).contains(&self.branches) {
            return bad("branch count must be 1..=4");
        }
        if !self.mode_probs.is_empty() {
            if self.mode_probs.len() != self.branches {
                return bad("mode_probs must have one entry per branch");
            }
            if self.mode_probs.iter().any(|&p| !(p >= 0.0)) || (self.mode_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("mode_probs must be a probability vector");
            }
        }
        if self.t_past == 0 || self.t_future == 0 || self.speed == 0 || self.object_size == 0 {
            return bad("t_past, t_future, speed and object_size must be positive");
        }
        if self.feasible_starts().is_empty() {
            return Err(Error::Config(format!(
                "a {}-pixel object at speed {} over {} frames does not fit a {}×{} grid",
                self.object_size,
                self.speed,
                self.t_past + self.t_future,
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    fn trajectory(&self, start: (isize, isize), heading: (isize, isize), branch: usize) -> Vec<(isize, isize)> {
        let v = self.speed as isize;
        let mut p = start;
        let mut out = vec![p];
        for t in 1..self.t_past + self.t_future {
            let (dy, dx) = if t < self.t_past { heading } else { TURNS[branch](heading) };
            p = (p.0 + dy * v, p.1 + dx * v);
            out.push(p);
        }
        out
    }

    fn fits(&self, traj: &[(isize, isize)]) -> bool {
        let s = self.object_size as isize;
        traj.iter()
            .all(|&(y, x)| y >= 0 && x >= 0 && y + s <= self.height as isize && x + s <= self.width as isize)
    }

    /// `(start, heading)` pairs for which every branch stays inside the grid.
    fn feasible_starts(&self) -> Vec<((isize, isize), (isize, isize))> {
        let mut out = Vec::new();
        for &h in &HEADINGS {
            for y in 0..self.height as isize {
                for x in 0..self.width as isize {
                    if (0..self.branches).all(|b| self.fits(&self.trajectory((y, x), h, b))) {
                        out.push(((y, x), h));
                    }
                }
            }
        }
        out
    }

    fn render(&self, pos: (isize, isize), class: usize) -> Vec<usize> {
        let mut f = vec![0; self.height * self.width];
        let s = self.object_size as isize;
        for y in pos.0..pos.0 + s {
            for x in pos.1..pos.1 + s {
                f[y as usize * self.width + x as usize] = class;
            }
        }
        f
    }
}

/// `count` sequences; a pure function of `(spec, seed)`.
pub fn gen_moving_shapes(spec: &MovingShapesSpec, count: usize, seed: u64) -> Result<Vec<SceneSequence>> {
    spec.validate()?;
    let starts = spec.feasible_starts();
    let probs = if spec.mode_probs.is_empty() {
        vec![1.0; spec.branches]
    } else {
        spec.mode_probs.clone()
    };
    let branch_dist = WeightedIndex::new(&probs).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (start, heading) = starts[rng.random_range(0..starts.len())];
        let class = rng.random_range(1..spec.classes);
        let mode = branch_dist.sample(&mut rng);
        let positions = spec.trajectory(start, heading, mode);
        let frames = positions.iter().map(|&p| spec.render(p, class)).collect();
        out.push(SceneSequence {
            frames,
            height: spec.height,
            width: spec.width,
            classes: spec.classes,
            mode,
            positions,
        });
    }
    Ok(out)
}

/// Smoothed one-hot encoding in log space, `C×H×W`: the raw class-confidence
/// target whose channel softmax is `(1−ε)·onehot + ε/C`.
pub fn log_confidence_frame(frame: &[usize], classes: usize, eps: f64) -> Vec<f64> {
    let n = frame.len();
    let hi = (1.0 - eps + eps / classes as f64).ln();
    let lo = (eps / classes as f64).ln();
    let mut out = vec![lo; classes * n];
    for (p, &c) in frame.iter().enumerate() {
        out[c * n + p] = hi;
    }
    out
}

/// One-hot encoding of a class-index frame, `C×H×W`.
pub fn one_hot_frame(frame: &[usize], classes: usize) -> Vec<f64> {
    let n = frame.len();
    let mut out = vec![0.0; classes * n];
    for (p, &c) in frame.iter().enumerate() {
        out[c * n + p] = 1.0;
    }
    out
}

/// Per-position argmax over the class axis of a `C×P` tensor.
pub fn argmax_classes(probs: &[f64], classes: usize) -> Vec<usize> {
    let n = probs.len() / classes;
    (0..n)
        .map(|p| {
            (0..classes)
                .max_by(|&a, &b| probs[a * n + p].total_cmp(&probs[b * n + p]).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect()
}
