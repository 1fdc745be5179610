//! Reverse-mode autodiff over an append-only tape.
//!
//! Each operation records its inputs and forward value at execution time;
//! `backward` walks the tape in reverse, accumulating gradients in fixed
//! index order so results are bit-identical across runs and thread counts.

use crate::conv::{self, ConvSpec};
use crate::error::{GlamError, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
    AddN,
    Mul,
    Dot,
    Conv2d(ConvSpec),
    BiasAddChan,
    /// Per-channel normalization with statistics from this input.
    ChannelNorm { mu: Vec<f64>, inv_std: Vec<f64> },
    /// Per-channel normalization with externally fixed statistics.
    NormFixed { mu: Vec<f64>, inv_std: Vec<f64> },
    MaxPool2d { argmax: Vec<usize> },
    SpatialMax { argmax: Vec<usize> },
    ResampleNearest,
    TopTPool { k: usize, picked: Vec<usize> },
    ConcatWidth,
    ConcatVec,
    MatVec,
    Softmax,
    BceSum { targets: Vec<f64> },
    L1Sum,
    WeightedSum,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Nearest-neighbor source index for resampling:
/// `floor(target_index * src / dst)`, which replicates blocks exactly for
/// integer scale factors.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

/// Number of cells kept by top-t pooling on an `h x w` map.
pub fn top_t_count(t: f64, h: usize, w: usize) -> usize {
    let k = (t / 100.0 * (h * w) as f64).round() as usize;
    k.clamp(1, h * w)
}

/// Sums in ascending value order; the result depends only on the multiset of
/// addends, not their arrangement.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Gradient of the last `backward` root w.r.t. node `id` (zeros if the
    /// node does not influence the root).
    pub fn grad(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        match &self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(n.value.shape().to_vec(), (*g).clone()).unwrap(),
            None => Tensor::zeros(n.value.shape().to_vec()),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, what: &str) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| GlamError::shape(format!("{what}: node {} not on tape", id.0)))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x, "relu")?.map(|a| a.max(0.0));
        Ok(self.push(Op::Relu, vec![x], v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x, "sigmoid")?.map(|a| 1.0 / (1.0 + (-a).exp()));
        Ok(self.push(Op::Sigmoid, vec![x], v))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x, "tanh")?.map(f64::tanh);
        Ok(self.push(Op::Tanh, vec![x], v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.check(x, "scale")?.map(|a| a * c);
        Ok(self.push(Op::Scale(c), vec![x], v))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(GlamError::shape("add_n: needs at least one input"));
        }
        let shape = self.check(xs[0], "add_n")?.shape().to_vec();
        let mut data = self.nodes[xs[0].0].value.data().to_vec();
        for &x in &xs[1..] {
            let t = self.check(x, "add_n")?;
            if t.shape() != shape.as_slice() {
                return Err(GlamError::shape(format!(
                    "add_n: shape {:?} != {:?}",
                    t.shape(),
                    shape
                )));
            }
            for (d, s) in data.iter_mut().zip(t.data()) {
                *d += s;
            }
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::AddN, xs.to_vec(), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_n(&[a, b])
    }

    /// Elementwise product of two same-shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.check(a, "mul")?;
        let tb = self.check(b, "mul")?;
        if ta.shape() != tb.shape() {
            return Err(GlamError::shape(format!(
                "mul: shape {:?} != {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    /// Inner product of two equal-length nodes -> scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.check(a, "dot")?;
        let tb = self.check(b, "dot")?;
        if ta.numel() != tb.numel() {
            return Err(GlamError::shape(format!(
                "dot: length {} != {}",
                ta.numel(),
                tb.numel()
            )));
        }
        let mut acc = 0.0;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            acc += x * y;
        }
        Ok(self.push(Op::Dot, vec![a, b], Tensor::scalar(acc)))
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `kernel: [C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let tx = self.check(x, "conv2d")?;
        let tk = self.check(kernel, "conv2d")?;
        let spec = conv::conv_spec(tx, tk, stride, padding)?;
        let v = conv::conv2d_forward(tx, tk, &spec)?;
        Ok(self.push(Op::Conv2d(spec), vec![x, kernel], v))
    }

    /// Adds `bias: [C]` across the spatial grid of `x: [C, H, W]`.
    pub fn bias_add_chan(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let tx = self.check(x, "bias_add_chan")?;
        let (c, h, w) = tx.dims3()?;
        let tb = self.check(bias, "bias_add_chan")?;
        if tb.numel() != c {
            return Err(GlamError::shape(format!(
                "bias_add_chan: bias length {} != channels {}",
                tb.numel(),
                c
            )));
        }
        let mut data = tx.data().to_vec();
        for ci in 0..c {
            let b = tb.data()[ci];
            for v in &mut data[ci * h * w..(ci + 1) * h * w] {
                *v += b;
            }
        }
        let v = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(Op::BiasAddChan, vec![x, bias], v))
    }

    /// Per-channel normalization `gamma * (x - mu_c) / sqrt(var_c + eps) + beta`
    /// with statistics taken over each channel's spatial grid.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let tx = self.check(x, "channel_norm")?;
        let (c, h, w) = tx.dims3()?;
        let (mu, var) = channel_stats(tx.data(), c, h * w);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        self.norm_with(x, gamma, beta, mu, inv_std, true)
    }

    /// Per-channel normalization with fixed statistics (e.g. running averages).
    pub fn norm_fixed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mu: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<NodeId> {
        let (c, _, _) = self.check(x, "norm_fixed")?.dims3()?;
        if mu.len() != c || var.len() != c {
            return Err(GlamError::shape(format!(
                "norm_fixed: stats length {}/{} != channels {}",
                mu.len(),
                var.len(),
                c
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        self.norm_with(x, gamma, beta, mu, inv_std, false)
    }

    fn norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mu: Vec<f64>,
        inv_std: Vec<f64>,
        from_input: bool,
    ) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (c, h, w) = tx.dims3()?;
        let tg = self.check(gamma, "channel_norm")?;
        let tb = self.check(beta, "channel_norm")?;
        if tg.numel() != c || tb.numel() != c {
            return Err(GlamError::shape(format!(
                "channel_norm: gamma/beta length {}/{} != channels {}",
                tg.numel(),
                tb.numel(),
                c
            )));
        }
        let tx = &self.nodes[x.0].value;
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            let (m, istd, gc, bc) = (mu[ci], inv_std[ci], g[ci], b[ci]);
            let src = &tx.data()[ci * h * w..(ci + 1) * h * w];
            let dst = &mut data[ci * h * w..(ci + 1) * h * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = gc * (s - m) * istd + bc;
            }
        }
        let v = Tensor::new(vec![c, h, w], data)?;
        let op = if from_input {
            Op::ChannelNorm { mu, inv_std }
        } else {
            Op::NormFixed { mu, inv_std }
        };
        Ok(self.push(op, vec![x, gamma, beta], v))
    }

    /// Windowed max pool; ties take the first maximum in row-major order.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let tx = self.check(x, "max_pool2d")?;
        let (v, argmax) = conv::max_pool2d_forward(tx, k, stride, padding)?;
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x], v))
    }

    /// Per-channel maximum over the spatial grid: `[C, H, W] -> [C]`.
    pub fn spatial_max(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.check(x, "spatial_max")?;
        let (c, h, w) = tx.dims3()?;
        let mut vals = vec![0.0; c];
        let mut argmax = vec![0usize; c];
        for ci in 0..c {
            let plane = &tx.data()[ci * h * w..(ci + 1) * h * w];
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            vals[ci] = best;
            argmax[ci] = ci * h * w + best_i;
        }
        let v = Tensor::new(vec![c], vals)?;
        Ok(self.push(Op::SpatialMax { argmax }, vec![x], v))
    }

    /// Nearest-neighbor resample of `[C, h, w]` to `[C, th, tw]`.
    pub fn resample_nearest(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let tx = self.check(x, "resample_nearest")?;
        let (c, h, w) = tx.dims3()?;
        if th == 0 || tw == 0 {
            return Err(GlamError::shape("resample_nearest: target dims must be positive"));
        }
        let mut data = vec![0.0; c * th * tw];
        for ci in 0..c {
            let plane = &tx.data()[ci * h * w..(ci + 1) * h * w];
            for ti in 0..th {
                let si = nearest_index(ti, h, th);
                for tj in 0..tw {
                    let sj = nearest_index(tj, w, tw);
                    data[ci * th * tw + ti * tw + tj] = plane[si * w + sj];
                }
            }
        }
        let v = Tensor::new(vec![c, th, tw], data)?;
        Ok(self.push(Op::ResampleNearest, vec![x], v))
    }

    /// Top-t% pooling per channel: mean of the k largest cells where
    /// k = max(1, round(t/100 * h * w)). Ties keep the earlier row-major cell.
    pub fn top_t_pool(&mut self, x: NodeId, t: f64) -> Result<NodeId> {
        if !(t > 0.0 && t <= 100.0) {
            return Err(GlamError::config(format!("top_t_pool: t={t} outside (0, 100]")));
        }
        let tx = self.check(x, "top_t_pool")?;
        let (c, h, w) = tx.dims3()?;
        let k = top_t_count(t, h, w);
        let mut vals = vec![0.0; c];
        let mut picked = Vec::with_capacity(c * k);
        let mut order: Vec<usize> = Vec::with_capacity(h * w);
        for ci in 0..c {
            let plane = &tx.data()[ci * h * w..(ci + 1) * h * w];
            order.clear();
            order.extend(0..h * w);
            // Stable sort by descending value keeps row-major order inside ties.
            order.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]));
            let mut acc = 0.0;
            for &i in order.iter().take(k) {
                acc += plane[i];
                picked.push(ci * h * w + i);
            }
            vals[ci] = acc / k as f64;
        }
        let v = Tensor::new(vec![c], vals)?;
        Ok(self.push(Op::TopTPool { k, picked }, vec![x], v))
    }

    /// Concatenates `[C, H, w_i]` maps along the width axis.
    pub fn concat_width(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(GlamError::shape("concat_width: needs at least one input"));
        }
        let (c, h, _) = self.check(xs[0], "concat_width")?.dims3()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ci, hi, wi) = self.check(x, "concat_width")?.dims3()?;
            if ci != c || hi != h {
                return Err(GlamError::shape(format!(
                    "concat_width: [{ci}, {hi}, _] incompatible with [{c}, {h}, _]"
                )));
            }
            widths.push(wi);
        }
        let tw: usize = widths.iter().sum();
        let mut data = vec![0.0; c * h * tw];
        let mut off = 0;
        for (xi, &x) in xs.iter().enumerate() {
            let wi = widths[xi];
            let src = self.nodes[x.0].value.data();
            for ci in 0..c {
                for hi in 0..h {
                    let s = ci * h * wi + hi * wi;
                    let d = ci * h * tw + hi * tw + off;
                    data[d..d + wi].copy_from_slice(&src[s..s + wi]);
                }
            }
            off += wi;
        }
        let v = Tensor::new(vec![c, h, tw], data)?;
        Ok(self.push(Op::ConcatWidth, xs.to_vec(), v))
    }

    /// Concatenates the flattened data of all inputs into one vector.
    pub fn concat_vec(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(GlamError::shape("concat_vec: needs at least one input"));
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.check(x, "concat_vec")?.data());
        }
        let v = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(Op::ConcatVec, xs.to_vec(), v))
    }

    /// `w: [m, n]` times `x: [n]` -> `[m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let tw = self.check(w, "matvec")?;
        let tx = self.check(x, "matvec")?;
        let (m, n) = tw.dims2()?;
        if tx.numel() != n {
            return Err(GlamError::shape(format!(
                "matvec: matrix [{m}, {n}] incompatible with vector of length {}",
                tx.numel()
            )));
        }
        let v = Tensor::new(vec![m], linalg::matvec(tw.data(), tx.data(), m, n))?;
        Ok(self.push(Op::MatVec, vec![w, x], v))
    }

    /// Softmax over a vector (max-shifted for stability). The normalizer sums
    /// addends in value order, so the outputs are bit-exactly equivariant
    /// under input permutation.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.check(x, "softmax")?;
        if tx.numel() == 0 {
            return Err(GlamError::shape("softmax: empty input"));
        }
        let m = tx.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tx.data().iter().map(|v| (v - m).exp()).collect();
        let z = sorted_sum(&mut exps.clone());
        let v = Tensor::new(vec![tx.numel()], exps.iter().map(|e| e / z).collect())?;
        Ok(self.push(Op::Softmax, vec![x], v))
    }

    /// Summed binary cross-entropy of probabilities `p` against `targets`,
    /// with probabilities clipped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_sum(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId> {
        let tp = self.check(p, "bce_sum")?;
        if tp.numel() != targets.len() {
            return Err(GlamError::shape(format!(
                "bce_sum: {} probabilities vs {} targets",
                tp.numel(),
                targets.len()
            )));
        }
        let mut acc = 0.0;
        for (&pv, &y) in tp.data().iter().zip(targets) {
            let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let op = Op::BceSum { targets: targets.to_vec() };
        Ok(self.push(op, vec![p], Tensor::scalar(acc)))
    }

    /// Sum of absolute values -> scalar.
    pub fn l1_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.check(x, "l1_sum")?;
        let mut acc = 0.0;
        for &v in tx.data() {
            acc += v.abs();
        }
        Ok(self.push(Op::L1Sum, vec![x], Tensor::scalar(acc)))
    }

    /// `sum_i alpha_i * v_i` where `alpha: [K]` and each `v_i` has one shape.
    /// Each output coordinate sums its terms in value order, so the result is
    /// bit-exactly invariant under a joint permutation of (alpha, vs).
    pub fn weighted_sum(&mut self, alpha: NodeId, vs: &[NodeId]) -> Result<NodeId> {
        let ta = self.check(alpha, "weighted_sum")?;
        if ta.numel() != vs.len() || vs.is_empty() {
            return Err(GlamError::shape(format!(
                "weighted_sum: {} weights vs {} vectors",
                ta.numel(),
                vs.len()
            )));
        }
        let shape = self.check(vs[0], "weighted_sum")?.shape().to_vec();
        for (i, &vid) in vs.iter().enumerate() {
            let tv = self.check(vid, "weighted_sum")?;
            if tv.shape() != shape.as_slice() {
                return Err(GlamError::shape(format!(
                    "weighted_sum: vector {i} shape {:?} != {:?}",
                    tv.shape(),
                    shape
                )));
            }
        }
        let numel = self.nodes[vs[0].0].value.numel();
        let mut data = vec![0.0; numel];
        let mut terms = vec![0.0; vs.len()];
        for (d, out) in data.iter_mut().enumerate() {
            for (i, &vid) in vs.iter().enumerate() {
                let a = self.nodes[alpha.0].value.data()[i];
                terms[i] = a * self.nodes[vid.0].value.data()[d];
            }
            *out = sorted_sum(&mut terms);
        }
        let v = Tensor::new(shape, data)?;
        let mut inputs = vec![alpha];
        inputs.extend_from_slice(vs);
        Ok(self.push(Op::WeightedSum, inputs, v))
    }

    /// Accumulates gradients of `root` (a scalar node) into every node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_numel = self.check(root, "backward")?.numel();
        if root_numel != 1 {
            return Err(GlamError::shape(format!(
                "backward: root must be scalar, has {root_numel} elements"
            )));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            backward_op(node, &g, nodes, grads);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Per-channel mean and (population) variance over the spatial grid.
pub fn channel_stats(data: &[f64], c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let p = &data[ci * plane..(ci + 1) * plane];
        let mut s = 0.0;
        for &v in p {
            s += v;
        }
        let m = s / plane as f64;
        let mut s2 = 0.0;
        for &v in p {
            s2 += (v - m) * (v - m);
        }
        mu[ci] = m;
        var[ci] = s2 / plane as f64;
    }
    (mu, var)
}

fn add_into(grads: &mut Vec<Option<Vec<f64>>>, nodes: &[Node], id: NodeId, contrib: impl Fn(&mut [f64])) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id.0].value.numel()]);
    }
    contrib(slot.as_mut().unwrap());
}

fn backward_op(node: &Node, g: &[f64], nodes: &[Node], grads: &mut Vec<Option<Vec<f64>>>) {
    let ins = &node.inputs;
    match &node.op {
        Op::Leaf => {}
        Op::Relu => {
            let x = nodes[ins[0].0].value.data();
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    if x[i] > 0.0 {
                        *d += g[i];
                    }
                }
            });
        }
        Op::Sigmoid => {
            let y = node.value.data();
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh => {
            let y = node.value.data();
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Scale(c) => {
            let c = *c;
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * c;
                }
            });
        }
        Op::AddN => {
            for &x in ins {
                add_into(grads, nodes, x, |dst| {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i];
                    }
                });
            }
        }
        Op::Mul => {
            let a = nodes[ins[0].0].value.data();
            let b = nodes[ins[1].0].value.data();
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * b[i];
                }
            });
            add_into(grads, nodes, ins[1], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * a[i];
                }
            });
        }
        Op::Dot => {
            let a = nodes[ins[0].0].value.data();
            let b = nodes[ins[1].0].value.data();
            let gs = g[0];
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += gs * b[i];
                }
            });
            add_into(grads, nodes, ins[1], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += gs * a[i];
                }
            });
        }
        Op::Conv2d(spec) => {
            let x = &nodes[ins[0].0].value;
            let k = &nodes[ins[1].0].value;
            let go = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
            let (dx, dk) = conv::conv2d_backward(x, k, spec, &go).unwrap();
            add_into(grads, nodes, ins[0], |dst| {
                for (d, s) in dst.iter_mut().zip(dx.data()) {
                    *d += s;
                }
            });
            add_into(grads, nodes, ins[1], |dst| {
                for (d, s) in dst.iter_mut().zip(dk.data()) {
                    *d += s;
                }
            });
        }
        Op::BiasAddChan => {
            let (c, h, w) = node.value.dims3().unwrap();
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i];
                }
            });
            add_into(grads, nodes, ins[1], |dst| {
                for ci in 0..c {
                    let mut s = 0.0;
                    for v in &g[ci * h * w..(ci + 1) * h * w] {
                        s += v;
                    }
                    dst[ci] += s;
                }
            });
        }
        Op::ChannelNorm { mu, inv_std } => {
            let x = nodes[ins[0].0].value.data();
            let gamma = nodes[ins[1].0].value.data();
            let (c, h, w) = node.value.dims3().unwrap();
            let plane = h * w;
            let n = plane as f64;
            for ci in 0..c {
                let (m, istd, gc) = (mu[ci], inv_std[ci], gamma[ci]);
                let xs = &x[ci * plane..(ci + 1) * plane];
                let gs = &g[ci * plane..(ci + 1) * plane];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut sum_g = 0.0;
                for i in 0..plane {
                    let xhat = (xs[i] - m) * istd;
                    let dxhat = gs[i] * gc;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    sum_g += gs[i];
                }
                add_into(grads, nodes, ins[0], |dst| {
                    let dp = &mut dst[ci * plane..(ci + 1) * plane];
                    for i in 0..plane {
                        let xhat = (xs[i] - m) * istd;
                        let dxhat = gs[i] * gc;
                        dp[i] += istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                });
                add_into(grads, nodes, ins[1], |dst| {
                    let mut s = 0.0;
                    for i in 0..plane {
                        s += gs[i] * (xs[i] - m) * istd;
                    }
                    dst[ci] += s;
                });
                add_into(grads, nodes, ins[2], |dst| dst[ci] += sum_g);
            }
        }
        Op::NormFixed { mu, inv_std } => {
            let x = nodes[ins[0].0].value.data();
            let gamma = nodes[ins[1].0].value.data();
            let (c, h, w) = node.value.dims3().unwrap();
            let plane = h * w;
            for ci in 0..c {
                let (m, istd, gc) = (mu[ci], inv_std[ci], gamma[ci]);
                let xs = &x[ci * plane..(ci + 1) * plane];
                let gs = &g[ci * plane..(ci + 1) * plane];
                add_into(grads, nodes, ins[0], |dst| {
                    let dp = &mut dst[ci * plane..(ci + 1) * plane];
                    for i in 0..plane {
                        dp[i] += gs[i] * gc * istd;
                    }
                });
                add_into(grads, nodes, ins[1], |dst| {
                    let mut s = 0.0;
                    for i in 0..plane {
                        s += gs[i] * (xs[i] - m) * istd;
                    }
                    dst[ci] += s;
                });
                add_into(grads, nodes, ins[2], |dst| {
                    let mut s = 0.0;
                    for v in gs {
                        s += v;
                    }
                    dst[ci] += s;
                });
            }
        }
        Op::MaxPool2d { argmax } | Op::SpatialMax { argmax } => {
            add_into(grads, nodes, ins[0], |dst| {
                for (o, &src) in argmax.iter().enumerate() {
                    dst[src] += g[o];
                }
            });
        }
        Op::ResampleNearest => {
            let (c, th, tw) = node.value.dims3().unwrap();
            let (_, h, w) = nodes[ins[0].0].value.dims3().unwrap();
            add_into(grads, nodes, ins[0], |dst| {
                for ci in 0..c {
                    for ti in 0..th {
                        let si = nearest_index(ti, h, th);
                        for tj in 0..tw {
                            let sj = nearest_index(tj, w, tw);
                            dst[ci * h * w + si * w + sj] += g[ci * th * tw + ti * tw + tj];
                        }
                    }
                }
            });
        }
        Op::TopTPool { k, picked } => {
            let k = *k;
            let inv = 1.0 / k as f64;
            add_into(grads, nodes, ins[0], |dst| {
                for (ci, chunk) in picked.chunks(k).enumerate() {
                    let gc = g[ci] * inv;
                    for &idx in chunk {
                        dst[idx] += gc;
                    }
                }
            });
        }
        Op::ConcatWidth => {
            let (c, h, tw) = node.value.dims3().unwrap();
            let mut off = 0;
            for &x in ins {
                let (_, _, wi) = nodes[x.0].value.dims3().unwrap();
                let start = off;
                add_into(grads, nodes, x, |dst| {
                    for ci in 0..c {
                        for hi in 0..h {
                            let s = ci * h * tw + hi * tw + start;
                            let d = ci * h * wi + hi * wi;
                            for j in 0..wi {
                                dst[d + j] += g[s + j];
                            }
                        }
                    }
                });
                off += wi;
            }
        }
        Op::ConcatVec => {
            let mut off = 0;
            for &x in ins {
                let n = nodes[x.0].value.numel();
                let start = off;
                add_into(grads, nodes, x, |dst| {
                    for j in 0..n {
                        dst[j] += g[start + j];
                    }
                });
                off += n;
            }
        }
        Op::MatVec => {
            let w = nodes[ins[0].0].value.data();
            let x = nodes[ins[1].0].value.data();
            let m = node.value.numel();
            let n = x.len();
            add_into(grads, nodes, ins[0], |dst| {
                for i in 0..m {
                    for j in 0..n {
                        dst[i * n + j] += g[i] * x[j];
                    }
                }
            });
            add_into(grads, nodes, ins[1], |dst| {
                for i in 0..m {
                    for j in 0..n {
                        dst[j] += g[i] * w[i * n + j];
                    }
                }
            });
        }
        Op::Softmax => {
            let y = node.value.data();
            let mut gy = 0.0;
            for (gi, yi) in g.iter().zip(y) {
                gy += gi * yi;
            }
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += y[i] * (g[i] - gy);
                }
            });
        }
        Op::BceSum { targets } => {
            let p = nodes[ins[0].0].value.data();
            let gs = g[0];
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    let pv = p[i];
                    if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                        *d += gs * (pv - targets[i]) / (pv * (1.0 - pv));
                    }
                }
            });
        }
        Op::L1Sum => {
            let x = nodes[ins[0].0].value.data();
            let gs = g[0];
            add_into(grads, nodes, ins[0], |dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    if x[i] > 0.0 {
                        *d += gs;
                    } else if x[i] < 0.0 {
                        *d -= gs;
                    }
                }
            });
        }
        Op::WeightedSum => {
            let alpha = nodes[ins[0].0].value.data();
            for (i, &vid) in ins[1..].iter().enumerate() {
                let v = nodes[vid.0].value.data();
                add_into(grads, nodes, ins[0], |dst| {
                    let mut s = 0.0;
                    for (gj, vj) in g.iter().zip(v) {
                        s += gj * vj;
                    }
                    dst[i] += s;
                });
                let a = alpha[i];
                add_into(grads, nodes, vid, |dst| {
                    for (d, gj) in dst.iter_mut().zip(g) {
                        *d += a * gj;
                    }
                });
            }
        }
    }
}
