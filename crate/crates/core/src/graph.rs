//! Tape-style computation graph with analytic reverse-mode gradients.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and backprop is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::loss;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element label for the binary/focal losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryTarget {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    ChannelPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Crop(NodeId),
    Add(NodeId, NodeId),
    /// `x · s` with `s` a one-element node.
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    /// `x(c, y, x) · mask(0, y, x)`.
    MulBroadcast {
        x: NodeId,
        mask: NodeId,
    },
    /// 2-D transpose of the (rows, cols) view; feature maps are viewed as (C, H·W).
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Focal {
        logits: NodeId,
        targets: Vec<BinaryTarget>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        pred: NodeId,
        targets: Vec<Option<f64>>,
        beta: f64,
        norm: f64,
    },
    Bce {
        logits: NodeId,
        targets: Vec<BinaryTarget>,
        norm: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelPool { .. } => "channel_pool_concat",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Upsample { .. } => "nearest_upsample",
            Op::Crop(_) => "crop",
            Op::Add(..) => "add",
            Op::ScaleBy { .. } => "scale_by",
            Op::Scale { .. } => "scale",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::Transpose { .. } => "transpose",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Softmax(_) => "softmax_rows",
            Op::Sum(_) => "sum",
            Op::Focal { .. } => "focal_loss",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Bce { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward computation. Values are computed eagerly as nodes are added.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`CompGraph::backprop`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Adjoints of every node, in node order.
    pub fn all(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.grads[id.0], Tensor::zeros(vec![0]))
    }
}

fn fmap_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, "rank", 3, t.shape().len())),
    }
}

fn mat_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, "rank", 2, t.shape().len())),
    }
}

fn accumulate(slot: &mut Tensor, delta: &[f64]) {
    for (a, d) in slot.data_mut().iter_mut().zip(delta) {
        *a += d;
    }
}

impl CompGraph {
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

    pub fn fmap(&self, id: NodeId) -> Result<FeatureMap> {
        FeatureMap::try_from(self.value(id).clone())
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Inputs and parameters both enter the graph as leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_fmap(&mut self, f: FeatureMap) -> NodeId {
        self.leaf(f.into())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let xd = fmap_dims(self.value(x), "conv2d")?;
        let wd = match *self.value(w).shape() {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape("conv2d", "weight rank", 4, self.value(w).shape().len())),
        };
        if self.value(b).numel() != wd.0 {
            return Err(Error::shape("conv2d", "bias length", wd.0, self.value(b).numel()));
        }
        let geom = ConvGeom::new(xd, wd, stride, padding)?;
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(vec![geom.out_channels, geom.out_height, geom.out_width], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value))
    }

    pub fn channel_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = fmap_dims(self.value(x), "channel_pool_concat")?;
        let (out, argmax) = kernels::channel_pool(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![2, h, w], out)?;
        Ok(self.push(Op::ChannelPool { x, argmax }, value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| kernels::sigmoid(t)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Sigmoid(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| if t > 0.0 || t.is_nan() { t } else { 0.0 }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::invalid("nearest_upsample", "factor must be at least 1"));
        }
        let (c, h, w) = fmap_dims(self.value(x), "nearest_upsample")?;
        let out = kernels::upsample_nearest(self.value(x).data(), c, h, w, factor);
        let value = Tensor::new(vec![c, h * factor, w * factor], out)?;
        Ok(self.push(Op::Upsample { x, factor }, value))
    }

    /// Top-left `height × width` window.
    pub fn crop(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, h, w) = fmap_dims(self.value(x), "crop")?;
        if height == 0 || width == 0 || height > h || width > w {
            return Err(Error::invalid("crop", format!("window {height}x{width} outside map {h}x{w}")));
        }
        if height == h && width == w {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                let start = (ch * h + y) * w;
                out.extend_from_slice(&src[start..start + width]);
            }
        }
        let value = Tensor::new(vec![c, height, width], out)?;
        Ok(self.push(Op::Crop(x), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::invalid(
                "add",
                format!("shape {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", "scalar length", 1, self.value(s).numel()));
        }
        let k = self.scalar(s);
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().map(|t| k * t).collect();
        kernels::counter::add_madds(data.len() as u64);
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::ScaleBy { x, s }, value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|t| c * t).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { x, c }, value)
    }

    pub fn mul_broadcast(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let (c, h, w) = fmap_dims(self.value(x), "mul_broadcast")?;
        let md = fmap_dims(self.value(mask), "mul_broadcast")?;
        if md != (1, h, w) {
            return Err(Error::invalid(
                "mul_broadcast",
                format!("mask {md:?} does not cover map {c}x{h}x{w}"),
            ));
        }
        let n = h * w;
        let m = self.value(mask).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * m[i % n])
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.push(Op::MulBroadcast { x, mask }, value))
    }

    /// `(C, H, W)` map → `(H·W) × C` token matrix.
    pub fn to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = fmap_dims(self.value(x), "to_tokens")?;
        let out = kernels::transpose(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![h * w, c], out)?;
        Ok(self.push(Op::Transpose { x, rows: c, cols: h * w }, value))
    }

    /// `(H·W) × C` token matrix → `(C, H, W)` map.
    pub fn from_tokens(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (n, c) = mat_dims(self.value(x), "from_tokens")?;
        if n != height * width {
            return Err(Error::shape("from_tokens", "rows", height * width, n));
        }
        let out = kernels::transpose(self.value(x).data(), n, c);
        let value = Tensor::new(vec![c, height, width], out)?;
        Ok(self.push(Op::Transpose { x, rows: n, cols: c }, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = mat_dims(self.value(a), "matmul")?;
        let (k2, m) = mat_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", "inner dimension", k, k2));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = mat_dims(self.value(a), "matmul_nt")?;
        let (m, k2) = mat_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", "inner dimension", k, k2));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = mat_dims(self.value(x), "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x).data(), r, c);
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Sigmoid focal loss summed over non-ignored elements and divided by `norm`.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: Vec<BinaryTarget>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    ) -> Result<NodeId> {
        let v = self.value(logits);
        if targets.len() != v.numel() {
            return Err(Error::shape("focal_loss", "target length", v.numel(), targets.len()));
        }
        let mut total = 0.0;
        for (&z, t) in v.data().iter().zip(&targets) {
            let p = kernels::sigmoid(z);
            total += match t {
                BinaryTarget::Positive => loss::focal_term(p, true, alpha, gamma),
                BinaryTarget::Negative => loss::focal_term(p, false, alpha, gamma),
                BinaryTarget::Ignore => 0.0,
            };
        }
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            },
            value,
        ))
    }

    /// Smooth-L1 over elements with a target, divided by `norm`.
    pub fn smooth_l1(&mut self, pred: NodeId, targets: Vec<Option<f64>>, beta: f64, norm: f64) -> Result<NodeId> {
        let v = self.value(pred);
        if targets.len() != v.numel() {
            return Err(Error::shape("smooth_l1", "target length", v.numel(), targets.len()));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(&targets)
            .filter_map(|(p, t)| t.map(|t| loss::smooth_l1_term(p - t, beta)))
            .sum();
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                targets,
                beta,
                norm,
            },
            value,
        ))
    }

    /// Binary cross-entropy on `sigmoid(logits)`, ignoring `Ignore` elements.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Vec<BinaryTarget>, norm: f64) -> Result<NodeId> {
        let v = self.value(logits);
        if targets.len() != v.numel() {
            return Err(Error::shape("bce_with_logits", "target length", v.numel(), targets.len()));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, t)| match t {
                BinaryTarget::Positive => loss::bce_logit_term(z, 1.0),
                BinaryTarget::Negative => loss::bce_logit_term(z, 0.0),
                BinaryTarget::Ignore => 0.0,
            })
            .sum();
        let value = Tensor::scalar(total / norm);
        Ok(self.push(Op::Bce { logits, targets, norm }, value))
    }

    /// Reverse sweep from `output` seeded with `seed`. Every node, leaf or not,
    /// receives an adjoint of its value's shape (zeros when unreachable).
    pub fn backprop(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::invalid(
                "backprop",
                format!("seed shape {:?} does not match output {:?}", seed.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[output.0] = seed.clone();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let dy = std::mem::replace(&mut grads[idx], Tensor::zeros(vec![0]));
            if dy.data().iter().all(|&v| v == 0.0) {
                grads[idx] = dy;
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = dy;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Tensor]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(self.value(*x).data(), self.value(*w).data(), d, geom);
                accumulate(&mut grads[x.0], &dx);
                accumulate(&mut grads[w.0], &dw);
                accumulate(&mut grads[b.0], &db);
            }
            Op::ChannelPool { x, argmax } => {
                let (c, h, w) = fmap_dims(self.value(*x), "channel_pool").expect("recorded shape");
                let n = h * w;
                let g = grads[x.0].data_mut();
                for p in 0..n {
                    g[argmax[p] * n + p] += d[p];
                    let share = d[n + p] / c as f64;
                    for ch in 0..c {
                        g[ch * n + p] += share;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let g = grads[x.0].data_mut();
                for i in 0..d.len() {
                    g[i] += d[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = grads[x.0].data_mut();
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        g[i] += d[i];
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = fmap_dims(self.value(*x), "upsample").expect("recorded shape");
                let dx = kernels::upsample_nearest_backward(d, c, h, w, *factor);
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Crop(x) => {
                let (c, h, w) = fmap_dims(self.value(*x), "crop").expect("recorded shape");
                let (_, ch_, cw) = fmap_dims(&node.value, "crop").expect("recorded shape");
                let g = grads[x.0].data_mut();
                for c_ in 0..c {
                    for y in 0..ch_ {
                        for xx in 0..cw {
                            g[(c_ * h + y) * w + xx] += d[(c_ * ch_ + y) * cw + xx];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], d);
                accumulate(&mut grads[b.0], d);
            }
            Op::ScaleBy { x, s } => {
                let k = self.scalar(*s);
                let xv = self.value(*x).data();
                let ds: f64 = d.iter().zip(xv).map(|(g, v)| g * v).sum();
                let scaled: Vec<f64> = d.iter().map(|g| g * k).collect();
                accumulate(&mut grads[x.0], &scaled);
                grads[s.0].data_mut()[0] += ds;
            }
            Op::Scale { x, c } => {
                let scaled: Vec<f64> = d.iter().map(|g| g * c).collect();
                accumulate(&mut grads[x.0], &scaled);
            }
            Op::MulBroadcast { x, mask } => {
                let xv = self.value(*x).data();
                let mv = self.value(*mask).data();
                let n = mv.len();
                let mut dm = vec![0.0; n];
                let mut dx = vec![0.0; xv.len()];
                for i in 0..xv.len() {
                    dx[i] = d[i] * mv[i % n];
                    dm[i % n] += d[i] * xv[i];
                }
                accumulate(&mut grads[x.0], &dx);
                accumulate(&mut grads[mask.0], &dm);
            }
            Op::Transpose { x, rows, cols } => {
                // forward mapped (rows × cols) → (cols × rows)
                let dx = kernels::transpose(d, *cols, *rows);
                accumulate(&mut grads[x.0], &dx);
            }
            Op::MatMul(a, b) => {
                let (n, k) = mat_dims(self.value(*a), "matmul").expect("recorded shape");
                let (_, m) = mat_dims(self.value(*b), "matmul").expect("recorded shape");
                let da = kernels::matmul_nt(d, self.value(*b).data(), n, m, k);
                let db = kernels::matmul_tn(self.value(*a).data(), d, n, k, m);
                accumulate(&mut grads[a.0], &da);
                accumulate(&mut grads[b.0], &db);
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = mat_dims(self.value(*a), "matmul_nt").expect("recorded shape");
                let (m, _) = mat_dims(self.value(*b), "matmul_nt").expect("recorded shape");
                let da = kernels::matmul(d, self.value(*b).data(), n, m, k);
                let db = kernels::matmul_tn(d, self.value(*a).data(), n, m, k);
                accumulate(&mut grads[a.0], &da);
                accumulate(&mut grads[b.0], &db);
            }
            Op::Softmax(x) => {
                let (r, c) = mat_dims(&node.value, "softmax").expect("recorded shape");
                let dx = kernels::softmax_rows_backward(node.value.data(), d, r, c);
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let g = d[0];
                for v in grads[x.0].data_mut() {
                    *v += g;
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
                norm,
            } => {
                let scale = d[0] / norm;
                let zs = self.value(*logits).data();
                let g = grads[logits.0].data_mut();
                for i in 0..zs.len() {
                    let pos = match targets[i] {
                        BinaryTarget::Positive => true,
                        BinaryTarget::Negative => false,
                        BinaryTarget::Ignore => continue,
                    };
                    g[i] += scale * loss::focal_term_grad_logit(zs[i], pos, *alpha, *gamma);
                }
            }
            Op::SmoothL1 {
                pred,
                targets,
                beta,
                norm,
            } => {
                let scale = d[0] / norm;
                let pv = self.value(*pred).data();
                let g = grads[pred.0].data_mut();
                for i in 0..pv.len() {
                    if let Some(t) = targets[i] {
                        g[i] += scale * loss::smooth_l1_grad(pv[i] - t, *beta);
                    }
                }
            }
            Op::Bce { logits, targets, norm } => {
                let scale = d[0] / norm;
                let zs = self.value(*logits).data();
                let g = grads[logits.0].data_mut();
                for i in 0..zs.len() {
                    let t = match targets[i] {
                        BinaryTarget::Positive => 1.0,
                        BinaryTarget::Negative => 0.0,
                        BinaryTarget::Ignore => continue,
                    };
                    g[i] += scale * (kernels::sigmoid(zs[i]) - t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scale_gradient() {
        let mut g = CompGraph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0);
        let grads = g.backprop(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = CompGraph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backprop(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).data(), &[0.25]);
    }

    #[test]
    fn seed_shape_mismatch_rejected() {
        let mut g = CompGraph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        let y = g.scale(x, 1.0);
        assert!(g.backprop(y, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero_adjoint() {
        let mut g = CompGraph::new();
        let a = g.leaf(Tensor::zeros(vec![3]));
        let b = g.leaf(Tensor::scalar(1.0));
        let y = g.scale(b, 2.0);
        let grads = g.backprop(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(a).shape(), &[3]);
        assert!(grads.get(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = CompGraph::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        let grads = g.backprop(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0]);
    }
}
