#![allow(dead_code)]
// Independent oracles shared by the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdsl::{Graph, NodeId, Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Triple-loop matrix product of row-major `m×k` and `k×n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Direct zero-padded "same" cross-correlation of one `C_in×H×W` image.
pub fn naive_conv(x: &[f64], w: &[f64], b: &[f64], c_in: usize, h: usize, wd: usize, c_out: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c_out * h * wd];
    for co in 0..c_out {
        for i in 0..h as isize {
            for j in 0..wd as isize {
                let mut s = b[co];
                for ci in 0..c_in {
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, xx) = (i + di, j + dj);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let wv = w[((co * c_in + ci) * k + (di + r) as usize) * k + (dj + r) as usize];
                            s += wv * x[(ci * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
                out[(co * h + i as usize) * wd + j as usize] = s;
            }
        }
    }
    out
}

pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// A scalar-valued graph over trainable leaves.
pub struct GraphCase {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub build: Builder,
}

impl GraphCase {
    pub fn eval(&self, leaves: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t)).collect();
        let loss = (self.build)(&mut g, &ids).expect("graph builds");
        g.value(loss).item().unwrap()
    }

    pub fn gradients(&self) -> Vec<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.leaves.iter().map(|t| g.leaf(t)).collect();
        let loss = (self.build)(&mut g, &ids).expect("graph builds");
        let mut grads = g.backward(loss).unwrap();
        ids.iter().map(|&id| grads.take(id).expect("leaf gradient")).collect()
    }
}

pub struct FdReport {
    pub checked: usize,
    /// Elements whose one-sided differences disagree (a kink lies within the step).
    pub skipped: usize,
    pub max_rel: f64,
}

/// Compares autodiff with central differences element by element. The
/// relative error uses a floor of `1e-6` in the denominator so exact zeros
/// on both sides compare equal.
pub fn finite_difference_check(case: &GraphCase, h: f64) -> FdReport {
    let grads = case.gradients();
    let base = case.eval(&case.leaves);
    let mut rep = FdReport {
        checked: 0,
        skipped: 0,
        max_rel: 0.0,
    };
    for (li, leaf) in case.leaves.iter().enumerate() {
        assert_eq!(grads[li].shape(), leaf.shape());
        for e in 0..leaf.len() {
            let mut plus = case.leaves.clone();
            plus[li].data_mut()[e] += h;
            let mut minus = case.leaves.clone();
            minus[li].data_mut()[e] -= h;
            let (fp, fm) = (case.eval(&plus), case.eval(&minus));
            let (fwd, bwd) = ((fp - base) / h, (base - fm) / h);
            let central = (fp - fm) / (2.0 * h);
            // Smooth functions agree one-sidedly to O(h·f''); a kink gives an O(1) jump.
            if (fwd - bwd).abs() > 1e-3 * (1.0 + central.abs()) {
                rep.skipped += 1;
                continue;
            }
            let a = grads[li].data()[e];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-6);
            rep.max_rel = rep.max_rel.max(err);
            rep.checked += 1;
        }
    }
    rep
}

fn pick<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Graph `index` of a family that, over any five consecutive indices, uses
/// every primitive of the tensor core.
pub fn random_graph(index: usize, seed: u64) -> GraphCase {
    let mut r = rng(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    match index % 5 {
        0 => {
            // conv → relu → residual → pool → upsample → leaky → concat → narrow → softmax → ln → mean
            let n = pick(&mut r, 1, 2);
            let c = pick(&mut r, 1, 2);
            let co = c + pick(&mut r, 0, 2);
            let (h, w) = (2 * pick(&mut r, 1, 2), 2 * pick(&mut r, 1, 2));
            let k = [1, 3][pick(&mut r, 0, 1)];
            let leaves = vec![
                Tensor::randn(&[n, c, h, w], 1.0, &mut r).requiring_grad(),
                Tensor::randn(&[co, c, k, k], 0.7, &mut r).requiring_grad(),
                Tensor::randn(&[co], 0.3, &mut r).requiring_grad(),
            ];
            GraphCase {
                name: "conv-stack",
                leaves,
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    let y = g.relu(y);
                    let y = g.residual_add(v[0], y)?;
                    let y = g.max_pool2(y)?;
                    let y = g.upsample2(y)?;
                    let y = g.leaky_relu(y, 0.2);
                    let y = g.concat(y, v[0], 1)?;
                    let y = g.narrow(y, 1, 1, co + c - 1)?;
                    let y = g.softmax(y, 1)?;
                    let y = g.ln(y);
                    Ok(g.mean(y))
                }),
            }
        }
        1 => {
            // two-layer perceptron with softmax cross-entropy
            let n = pick(&mut r, 2, 4);
            let (d, hdim, c) = (pick(&mut r, 2, 4), pick(&mut r, 2, 5), pick(&mut r, 2, 4));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let leaves = vec![
                Tensor::randn(&[n, d], 1.0, &mut r).requiring_grad(),
                Tensor::randn(&[d, hdim], 0.8, &mut r).requiring_grad(),
                Tensor::randn(&[hdim], 0.3, &mut r).requiring_grad(),
                Tensor::randn(&[hdim, c], 0.8, &mut r).requiring_grad(),
                Tensor::randn(&[c], 0.3, &mut r).requiring_grad(),
            ];
            GraphCase {
                name: "mlp-xent",
                leaves,
                build: Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let y = g.add_bias(y, v[2])?;
                    let y = g.leaky_relu(y, 0.1);
                    let y = g.matmul(y, v[3])?;
                    let y = g.add_bias(y, v[4])?;
                    g.softmax_cross_entropy(y, &labels)
                }),
            }
        }
        2 => {
            // elementwise algebra
            let shape = [pick(&mut r, 1, 3), pick(&mut r, 1, 4)];
            let leaves = vec![
                Tensor::randn(&shape, 1.0, &mut r).requiring_grad(),
                Tensor::randn(&shape, 1.0, &mut r).requiring_grad(),
            ];
            GraphCase {
                name: "elementwise",
                leaves,
                build: Box::new(|g, v| {
                    let a = g.clamp(v[0], -0.8, 0.8);
                    let a = g.exp(a);
                    let num = g.mul(a, v[1])?;
                    let b2 = g.square(v[1]);
                    let den = g.add_scalar(b2, 0.5);
                    let q = g.div(num, den)?;
                    let s = g.scale(v[0], 0.7);
                    let d = g.sub(q, s)?;
                    let e = g.add(d, v[0])?;
                    Ok(g.sum(e))
                }),
            }
        }
        3 => {
            // logistic regression with reshape
            let n = pick(&mut r, 2, 5);
            let d = pick(&mut r, 1, 4);
            let targets: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let leaves = vec![
                Tensor::randn(&[n, d], 1.0, &mut r).requiring_grad(),
                Tensor::randn(&[d, 1], 1.0, &mut r).requiring_grad(),
            ];
            GraphCase {
                name: "bce",
                leaves,
                build: Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let y = g.reshape(y, &[n])?;
                    let l = g.bce_with_logits(y, &targets)?;
                    let sq = g.square(v[1]);
                    let reg = g.mean(sq);
                    let reg = g.scale(reg, 0.01);
                    g.add(l, reg)
                }),
            }
        }
        _ => {
            // layer dispatch on a 3-D feature map plus a log-softmax head
            let c = pick(&mut r, 1, 3);
            let (h, w) = (2 * pick(&mut r, 1, 2), 2 * pick(&mut r, 1, 2));
            let leaves = vec![
                Tensor::randn(&[c, h, w], 1.0, &mut r).requiring_grad(),
                Tensor::randn(&[c + 1, c, 3, 3], 0.5, &mut r).requiring_grad(),
                Tensor::randn(&[c + 1], 0.2, &mut r).requiring_grad(),
            ];
            GraphCase {
                name: "layers-3d",
                leaves,
                build: Box::new(|g, v| {
                    use wdsl::tensor::LayerKind;
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    let y = g.layer(LayerKind::LeakyRelu(0.3), &[y])?;
                    let y = g.layer(LayerKind::ResidualAdd, &[v[0], y])?;
                    let y = g.layer(LayerKind::MaxPool2, &[y])?;
                    let y = g.layer(LayerKind::UpsampleNearest2, &[y])?;
                    let y = g.layer(LayerKind::Relu, &[y])?;
                    let y = g.softmax(y, 0)?;
                    let y = g.add_scalar(y, 1e-3);
                    let y = g.ln(y);
                    Ok(g.sum(y))
                }),
            }
        }
    }
}
