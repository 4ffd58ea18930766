use super::kernels::{self, ConvGeom};
use super::{channel_axis, matmul_dims, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter-free layers selectable through [`Graph::layer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Relu,
    LeakyRelu(f64),
    MaxPool2,
    UpsampleNearest2,
    /// `inputs[0]` is the shortcut, `inputs[1]` the block output.
    ResidualAdd,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2(NodeId),
    ResidualAdd { skip: NodeId, x: NodeId },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Softmax { x: NodeId, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's parents precede it and
/// the reverse sweep in [`Graph::backward`] is a plain reverse iteration.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf, &[])
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, &[])
    }

    /// Inserts `t` as a constant regardless of its flag.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Stride-1 cross-correlation with zero "same" padding plus a per-channel bias.
    ///
    /// `x` is `C_in×H×W` or `N×C_in×H×W`; `w` is `C_out×C_in×k×k` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, geom, c_out) = conv_geom(self.shape(x), self.shape(w), self.shape(b))?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let hw = geom.plane();
        let img_len = geom.c_in * hw;
        let mut out = vec![0.0; n * c_out * hw];
        let mut cols = vec![0.0; geom.patch_len() * hw];
        for i in 0..n {
            kernels::im2col(geom, &xv[i * img_len..(i + 1) * img_len], &mut cols);
            let dst = &mut out[i * c_out * hw..(i + 1) * c_out * hw];
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bv[co]);
            }
            kernels::gemm(c_out, geom.patch_len(), hw, wv, &cols, dst);
        }
        let mut shape = self.shape(x).to_vec();
        let ca = channel_axis(&shape);
        shape[ca] = c_out;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Adds `b` (one value per channel) along the channel axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (outer, c, inner) = bias_layout(&xs, self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (ci, &bias) in bv.iter().enumerate().take(c) {
                let base = (o * c + ci) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bias;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddBias(x, b), &[x, b]))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shapes(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// 2×2 max pooling over the last two axes.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = spatial(&shape, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "max_pool2 needs even spatial extents, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape;
        let nd = oshape.len();
        oshape[nd - 2] = oh;
        oshape[nd - 1] = ow;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = spatial(&shape, "upsample2")?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut oshape = shape;
        let nd = oshape.len();
        oshape[nd - 2] = oh;
        oshape[nd - 1] = ow;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Upsample2(x), &[x]))
    }

    /// `x + pad(skip)`, where `skip` is zero-padded on the channel axis when it
    /// has fewer channels than `x`.
    pub fn residual_add(&mut self, skip: NodeId, x: NodeId) -> Result<NodeId> {
        let (ss, xs) = (self.shape(skip).to_vec(), self.shape(x).to_vec());
        let ca = channel_axis(&xs);
        let compatible = ss.len() == xs.len()
            && ss.iter().zip(&xs).enumerate().all(|(i, (a, b))| if i == ca { a <= b } else { a == b });
        if !compatible {
            return Err(Error::shapes("residual_add", &ss, &xs));
        }
        let (outer, cx, inner) = split_axis(&xs, ca)?;
        let cs = ss[ca];
        let sv = self.value(skip).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..cs {
                let src = &sv[(o * cs + c) * inner..(o * cs + c + 1) * inner];
                let dst = &mut out[(o * cx + c) * inner..(o * cx + c + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::ResidualAdd { skip, x }, &[skip, x]))
    }

    pub fn layer(&mut self, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let need = if kind == LayerKind::ResidualAdd { 2 } else { 1 };
        if inputs.len() != need {
            return Err(Error::Usage(format!(
                "{kind:?} takes {need} input(s), got {}",
                inputs.len()
            )));
        }
        match kind {
            LayerKind::Relu => Ok(self.relu(inputs[0])),
            LayerKind::LeakyRelu(s) => Ok(self.leaky_relu(inputs[0], s)),
            LayerKind::MaxPool2 => self.max_pool2(inputs[0]),
            LayerKind::UpsampleNearest2 => self.upsample2(inputs[0]),
            LayerKind::ResidualAdd => self.residual_add(inputs[0], inputs[1]),
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::shapes("concat", &sa, &sb));
        }
        let (outer, la, inner) = split_axis(&sa, axis)?;
        let lb = sb[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bv[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, axis }, &[a, b]))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (outer, l, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > l {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * l + start) * inner..(o * l + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let mut t = self.value(x).reshape(shape)?;
        t.set_requires_grad(false);
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (outer, l, inner) = split_axis(&shape, axis)?;
        let mut out = self.value(x).data().to_vec();
        softmax_in_place(&mut out, outer, l, inner);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of raw logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits).data();
        if lv.len() != targets.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} logits vs {} targets",
                lv.len(),
                targets.len()
            )));
        }
        let n = lv.len() as f64;
        let loss = lv
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean categorical cross-entropy of `N×C` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let [n, c] = shape[..] else {
            return Err(Error::dim(format!("softmax_cross_entropy wants N×C, got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_in_place(&mut probs, n, c, 1);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if self.needs(id) {
                let g = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| kernels::gemm_nt(m, n, k, gy, bv, g));
                acc(*b, &mut |g| kernels::gemm_tn(k, m, n, av, gy, g));
            }
            Op::Conv2d { x, w, b } => {
                let (n, geom, c_out) =
                    conv_geom(self.shape(*x), self.shape(*w), self.shape(*b)).expect("checked in forward");
                let hw = geom.plane();
                let img_len = geom.c_in * hw;
                let (xv, wv) = (val(*x), val(*w));
                acc(*b, &mut |g| {
                    for i in 0..n {
                        for (co, gb) in g.iter_mut().enumerate().take(c_out) {
                            let base = (i * c_out + co) * hw;
                            *gb += gy[base..base + hw].iter().sum::<f64>();
                        }
                    }
                });
                let mut cols = vec![0.0; geom.patch_len() * hw];
                if self.needs(*w) {
                    acc(*w, &mut |g| {
                        for i in 0..n {
                            kernels::im2col(geom, &xv[i * img_len..(i + 1) * img_len], &mut cols);
                            let gyi = &gy[i * c_out * hw..(i + 1) * c_out * hw];
                            kernels::gemm_nt(c_out, hw, geom.patch_len(), gyi, &cols, g);
                        }
                    });
                }
                acc(*x, &mut |g| {
                    for i in 0..n {
                        cols.fill(0.0);
                        let gyi = &gy[i * c_out * hw..(i + 1) * c_out * hw];
                        kernels::gemm_tn(geom.patch_len(), c_out, hw, wv, gyi, &mut cols);
                        kernels::col2im(geom, &cols, &mut g[i * img_len..(i + 1) * img_len]);
                    }
                });
            }
            Op::AddBias(x, b) => {
                let (outer, c, inner) = bias_layout(self.shape(*x), self.shape(*b)).expect("checked in forward");
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for o in 0..outer {
                        for (ci, gb) in g.iter_mut().enumerate().take(c) {
                            let base = (o * c + ci) * inner;
                            *gb += gy[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (((g, d), x), y) in g.iter_mut().zip(gy).zip(av).zip(bv) {
                        *g -= d * x / (y * y);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += if v > 0.0 { *d } else { d * slope };
                    }
                });
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * y;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d / v;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += 2.0 * d * v;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *g += d;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |g| {
                for (&idx, d) in argmax.iter().zip(gy) {
                    g[idx] += d;
                }
            }),
            Op::Upsample2(x) => {
                let (planes, h, w) = spatial(self.shape(*x), "upsample2").expect("checked in forward");
                acc(*x, &mut |g| {
                    let (oh, ow) = (2 * h, 2 * w);
                    for p in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                g[(p * h + y / 2) * w + xx / 2] += gy[(p * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ResidualAdd { skip, x } => {
                acc(*x, &mut |g| add_into(g, gy));
                let xs = node.value.shape();
                let ca = channel_axis(xs);
                let (outer, cx, inner) = split_axis(xs, ca).expect("checked in forward");
                let cs = self.shape(*skip)[ca];
                acc(*skip, &mut |g| {
                    for o in 0..outer {
                        for c in 0..cs {
                            let src = &gy[(o * cx + c) * inner..(o * cx + c + 1) * inner];
                            add_into(&mut g[(o * cs + c) * inner..(o * cs + c + 1) * inner], src);
                        }
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = split_axis(self.shape(*a), *axis).expect("checked in forward");
                let lb = self.shape(*b)[*axis];
                let l = la + lb;
                acc(*a, &mut |g| {
                    for o in 0..outer {
                        add_into(
                            &mut g[o * la * inner..(o + 1) * la * inner],
                            &gy[o * l * inner..(o * l + la) * inner],
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for o in 0..outer {
                        add_into(
                            &mut g[o * lb * inner..(o + 1) * lb * inner],
                            &gy[(o * l + la) * inner..(o + 1) * l * inner],
                        );
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (outer, l, inner) = split_axis(self.shape(*x), *axis).expect("checked in forward");
                let len = node.value.shape()[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        add_into(
                            &mut g[(o * l + start) * inner..(o * l + start + len) * inner],
                            &gy[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, l, inner) = split_axis(self.shape(*x), *axis).expect("checked in forward");
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * l + j) * inner + i;
                            let dot: f64 = (0..l).map(|j| gy[idx(j)] * yv[idx(j)]).sum();
                            for j in 0..l {
                                g[idx(j)] += yv[idx(j)] * (gy[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits);
                let n = lv.len() as f64;
                acc(*logits, &mut |g| {
                    for ((g, &l), t) in g.iter_mut().zip(lv).zip(targets) {
                        *g += gy[0] * (sigmoid(l) - t) / n;
                    }
                });
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                acc(*logits, &mut |g| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            g[i * c + j] += gy[0] * (probs[i * c + j] - onehot) / n as f64;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64], outer: usize, l: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * l + j) * inner + i;
            let max = (0..l).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..l {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..l {
                data[idx(j)] /= total;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn spatial(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::dim(format!("{op} needs a C×H×W or N×C×H×W input, got {shape:?}")));
    }
    let nd = shape.len();
    Ok((shape[..nd - 2].iter().product(), shape[nd - 2], shape[nd - 1]))
}

fn bias_layout(x: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    let axis = if x.len() == 1 { 0 } else { channel_axis(x) };
    let (outer, c, inner) = split_axis(x, axis)?;
    if b != [c] {
        return Err(Error::shapes("add_bias", x, b));
    }
    Ok((outer, c, inner))
}

fn conv_geom(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, ConvGeom, usize)> {
    let (n, c_in, h, wd) = match *x {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim(format!("conv2d input must be C×H×W or N×C×H×W, got {x:?}"))),
    };
    let [c_out, kc, k, k2] = *w else {
        return Err(Error::dim(format!("conv2d kernels must be C_out×C_in×k×k, got {w:?}")));
    };
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {x:?} has {c_in} channels, kernels {w:?} expect {kc}"
        )));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::dim(format!("conv2d kernel must be square with odd size, got {k}×{k2}")));
    }
    if b != [c_out] {
        return Err(Error::shapes("conv2d bias", w, b));
    }
    Ok((n, ConvGeom { c_in, h, w: wd, k }, c_out))
}
