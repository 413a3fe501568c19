//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! A [`Graph`] is an append-only tape: every operator evaluates eagerly,
//! stores its output, and records what it needs for the backward pass. Node
//! ids increase in evaluation order, so walking ids downwards from the loss is
//! a reverse topological traversal that visits each node once.
//!
//! [`Graph::backward`] takes `&self` and leaves the tape intact, so the same
//! graph can be differentiated more than once (the "retain" behaviour is the
//! only behaviour). Drop the graph to release its intermediates.

mod conv;
mod gemm;

pub use conv::{ConvOptions, Padding};

use conv::ConvGeometry;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Abs => x.abs(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How a loss folds per-element terms into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Pointwise {
        input: usize,
        kind: Activation,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    BroadcastMul {
        input: usize,
        gate: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    Bce {
        pred: usize,
        target: Tensor,
        pos_weight: f64,
        neg_weight: f64,
        eps: f64,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every branch decision taken by the forward pass: the sign of
    /// each ReLU/abs input, each max-pool argmax and
    /// each BCE clamp. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn kink_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Pointwise {
                    input,
                    kind: Activation::Relu | Activation::Abs,
                } => {
                    i.hash(&mut h);
                    for v in self.nodes[*input].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { pred, eps, .. } => {
                    i.hash(&mut h);
                    for p in self.nodes[*pred].value.data() {
                        (*p < *eps).hash(&mut h);
                        (*p > 1.0 - *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Named trainable leaf; its gradient appears in [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Unnamed leaf that still receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: ConvOptions,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(weight).shape(), opts)?;
        if let Some(b) = bias {
            let bshape = self.value(b).shape();
            if bshape != [geom.cout] {
                return Err(TensorError::DimMismatch {
                    op: "conv2d",
                    dim: "bias length (Cout)",
                    left: geom.cout,
                    right: bshape.iter().product(),
                });
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut ids = vec![input.0, weight.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![geom.n, geom.cout, geom.oh, geom.ow], out),
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    pub fn pointwise(&mut self, kind: Activation, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.requires_grad(x);
        self.push(out, Op::Pointwise { input: x.0, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(Activation::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.pointwise(Activation::Abs, x)
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("max_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("spatial size {h}x{w} is not divisible by 2"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool { input: x.0, argmax },
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("global_avg_pool")?;
        let plane = h * w;
        let out: Vec<f64> = t
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalAvgPool { input: x.0 },
            rg,
        ))
    }

    /// Affine map `v Wᵀ + b` for `v: [N, Cin]`, `W: [Cout, Cin]`, `b: [Cout]`.
    pub fn dense(&mut self, v: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let (n, cin) = self.value(v).dims2("dense")?;
        let (cout, wcin) = self.value(weight).dims2("dense(weight)")?;
        if cin != wcin {
            return Err(TensorError::DimMismatch {
                op: "dense",
                dim: "input features",
                left: cin,
                right: wcin,
            });
        }
        let mut out = vec![0.0; n * cout];
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.len() != cout {
                return Err(TensorError::DimMismatch {
                    op: "dense",
                    dim: "bias length",
                    left: cout,
                    right: bt.len(),
                });
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm::gemm(
            gemm::MatRef::row_major(self.value(v).data(), n, cin),
            gemm::MatRef::row_major(self.value(weight).data(), cout, cin).t(),
            1.0,
            &mut out,
        );
        let mut ids = vec![v.0, weight.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![n, cout], out),
            Op::Dense {
                input: v.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
            },
            rg,
        ))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis, preserving order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_channels",
            msg: "no inputs".into(),
        })?;
        let (n, _, h, w) = self.value(*first).dims4("concat_channels")?;
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4("concat_channels")?;
            for (dim, a, b) in [("batch", n, xn), ("height", h, xh), ("width", w, xw)] {
                if a != b {
                    return Err(TensorError::DimMismatch {
                        op: "concat_channels",
                        dim,
                        left: a,
                        right: b,
                    });
                }
            }
            chans.push(xc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for img in 0..n {
            for (&x, &c) in xs.iter().zip(&chans) {
                let len = c * plane;
                out.extend_from_slice(&self.value(x).data()[img * len..(img + 1) * len]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![n, total, h, w], out),
            Op::Concat { inputs: ids },
            rg,
        ))
    }

    /// Bilinear upsampling by an integer factor.
    ///
    /// Output index `i` samples source coordinate `(i + 0.5) / factor - 0.5`,
    /// clamped to `[0, size - 1]`.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        if factor == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_upsample",
                msg: "factor must be at least 1".into(),
            });
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4("bilinear_upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let ys = upsample_axis(h, factor);
        let xs = upsample_axis(w, factor);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in src.chunks_exact(h * w) {
            for &(y0, y1, fy) in &ys {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for &(x0, x1, fx) in &xs {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
                    out.push(top + fy * (bottom - top));
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample { input: x.0, factor },
            rg,
        ))
    }

    /// Multiplies `x: [N, C, H, W]` by a per-channel gate `[N, C]` or a spatial gate `[N, 1, H, W]`.
    pub fn broadcast_mul(&mut self, x: Var, gate: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("broadcast_mul")?;
        let gshape = self.value(gate).shape().to_vec();
        let plane = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let out: Vec<f64> = match gshape.as_slice() {
            [gn, gc] if *gn == n && *gc == c => xd
                .chunks_exact(plane)
                .zip(gd)
                .flat_map(|(p, &g)| p.iter().map(move |v| v * g))
                .collect(),
            [gn, 1, gh, gw] if *gn == n && *gh == h && *gw == w => {
                let mut out = Vec::with_capacity(xd.len());
                for (img, chunk) in xd.chunks_exact(c * plane).enumerate() {
                    let g = &gd[img * plane..(img + 1) * plane];
                    for p in chunk.chunks_exact(plane) {
                        out.extend(p.iter().zip(g).map(|(v, g)| v * g));
                    }
                }
                out
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "broadcast_mul",
                    msg: format!(
                        "gate shape {gshape:?} is neither [{n}, {c}] nor [{n}, 1, {h}, {w}]"
                    ),
                })
            }
        };
        let rg = self.any_grad(&[x.0, gate.0]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BroadcastMul {
                input: x.0,
                gate: gate.0,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Invalid {
                op,
                msg: format!("shape {sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Add { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { input: x.0, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { input: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean { input: x.0 }, rg)
    }

    /// Weighted binary cross-entropy against a fixed (possibly soft) target:
    /// `-Σ [pos_weight·y·ln p + neg_weight·(1−y)·ln(1−p)]`, with `p` clamped to
    /// `[eps, 1 − eps]`. The clamp has zero derivative outside that interval.
    pub fn binary_cross_entropy(
        &mut self,
        pred: Var,
        target: &Tensor,
        pos_weight: f64,
        neg_weight: f64,
        eps: f64,
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::Invalid {
                op: "binary_cross_entropy",
                msg: format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            });
        }
        let mut total = 0.0;
        for (&p, &y) in p.data().iter().zip(target.data()) {
            let pc = p.clamp(eps, 1.0 - eps);
            total -= pos_weight * y * pc.ln() + neg_weight * (1.0 - y) * (1.0 - pc).ln();
        }
        if reduction == Reduction::Mean {
            total /= p.len() as f64;
        }
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                pred: pred.0,
                target: target.clone(),
                pos_weight,
                neg_weight,
                eps,
                reduction,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut leaves = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves.push((
                    Var(id),
                    node.name.clone(),
                    Tensor::from_parts(node.value.shape().to_vec(), data),
                ));
            }
        }
        Ok(Gradients { leaves })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match grads[id].as_mut() {
            Some(s) => {
                for (a, b) in s.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => grads[id] = Some(contrib.to_vec()),
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match grads[id].as_mut() {
            Some(s) => {
                for (a, b) in s.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => grads[id] = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.nodes[*input].requires_grad,
                    self.nodes[*weight].requires_grad,
                    bias.is_some_and(|b| self.nodes[b].requires_grad),
                ];
                let cg = conv::backward(
                    geom,
                    self.nodes[*input].value.data(),
                    self.nodes[*weight].value.data(),
                    g,
                    need,
                );
                if let Some(d) = cg.input {
                    self.accumulate_owned(grads, *input, d);
                }
                if let Some(d) = cg.weight {
                    self.accumulate_owned(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    self.accumulate_owned(grads, *b, d);
                }
            }
            Op::Pointwise { input, kind } => {
                if !self.nodes[*input].requires_grad {
                    return;
                }
                let x = self.nodes[*input].value.data();
                let y = node.value.data();
                let local: Vec<f64> = match kind {
                    Activation::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    _ => g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                        .collect(),
                };
                self.accumulate_owned(grads, *input, local);
            }
            Op::MaxPool { input, argmax } => {
                if let Some(s) = self.slot(grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        s[src] += gv;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.nodes[*input].value.shape();
                let plane = shape[2] * shape[3];
                if let Some(s) = self.slot(grads, *input) {
                    for (chunk, &gv) in s.chunks_exact_mut(plane).zip(g) {
                        let share = gv / plane as f64;
                        chunk.iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, cin) = (
                    self.nodes[*input].value.shape()[0],
                    self.nodes[*input].value.shape()[1],
                );
                let cout = self.nodes[*weight].value.shape()[0];
                let gmat = gemm::MatRef::row_major(g, n, cout);
                if self.nodes[*input].requires_grad {
                    let w = self.nodes[*weight].value.data();
                    let s = self.slot(grads, *input).expect("requires grad");
                    gemm::gemm(gmat, gemm::MatRef::row_major(w, cout, cin), 1.0, s);
                }
                if self.nodes[*weight].requires_grad {
                    let v = self.nodes[*input].value.data();
                    let s = self.slot(grads, *weight).expect("requires grad");
                    gemm::gemm(gmat.t(), gemm::MatRef::row_major(v, n, cin), 1.0, s);
                }
                if let Some(b) = bias {
                    if let Some(s) = self.slot(grads, *b) {
                        for row in g.chunks_exact(cout) {
                            for (a, v) in s.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let [n, _, h, w] = *node.value.shape() else {
                    unreachable!()
                };
                let plane = h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &id in inputs {
                    let c = self.nodes[id].value.shape()[1];
                    if let Some(s) = self.slot(grads, id) {
                        for img in 0..n {
                            let src = &g[(img * total + offset) * plane
                                ..(img * total + offset + c) * plane];
                            let dst = &mut s[img * c * plane..(img + 1) * c * plane];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Upsample { input, factor } => {
                let [_, _, h, w] = *self.nodes[*input].value.shape() else {
                    unreachable!()
                };
                let ys = upsample_axis(h, *factor);
                let xs = upsample_axis(w, *factor);
                let ow = w * factor;
                if let Some(s) = self.slot(grads, *input) {
                    for (dst, src) in s.chunks_exact_mut(h * w).zip(g.chunks_exact(ys.len() * ow)) {
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                let top = gv * (1.0 - fy);
                                let bottom = gv * fy;
                                dst[y0 * w + x0] += top * (1.0 - fx);
                                dst[y0 * w + x1] += top * fx;
                                dst[y1 * w + x0] += bottom * (1.0 - fx);
                                dst[y1 * w + x1] += bottom * fx;
                            }
                        }
                    }
                }
            }
            Op::BroadcastMul { input, gate } => {
                let [n, c, h, w] = *node.value.shape() else {
                    unreachable!()
                };
                let plane = h * w;
                let xd = self.nodes[*input].value.data();
                let gd = self.nodes[*gate].value.data();
                let per_channel = self.nodes[*gate].value.rank() == 2;
                if self.nodes[*input].requires_grad {
                    let mut dx = Vec::with_capacity(g.len());
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let gp = &g[base..base + plane];
                            if per_channel {
                                let gate_v = gd[img * c + ch];
                                dx.extend(gp.iter().map(|v| v * gate_v));
                            } else {
                                let gs = &gd[img * plane..(img + 1) * plane];
                                dx.extend(gp.iter().zip(gs).map(|(v, s)| v * s));
                            }
                        }
                    }
                    self.accumulate_owned(grads, *input, dx);
                }
                if let Some(s) = self.slot(grads, *gate) {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * plane;
                            let gp = &g[base..base + plane];
                            let xp = &xd[base..base + plane];
                            if per_channel {
                                s[img * c + ch] +=
                                    gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                let ds = &mut s[img * plane..(img + 1) * plane];
                                for ((d, a), b) in ds.iter_mut().zip(gp).zip(xp) {
                                    *d += a * b;
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(s) = self.slot(grads, *input) {
                    for (a, b) in s.iter_mut().zip(g) {
                        *a += b * factor;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(s) = self.slot(grads, *input) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { input } => {
                if let Some(s) = self.slot(grads, *input) {
                    let share = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::Bce {
                pred,
                target,
                pos_weight,
                neg_weight,
                eps,
                reduction,
            } => {
                let p = self.nodes[*pred].value.data();
                let scale = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / p.len() as f64,
                };
                if let Some(s) = self.slot(grads, *pred) {
                    for ((a, &p), &y) in s.iter_mut().zip(p).zip(target.data()) {
                        if p < *eps || p > 1.0 - eps {
                            continue;
                        }
                        *a -= scale * (pos_weight * y / p - neg_weight * (1.0 - y) / (1.0 - p));
                    }
                }
            }
        }
    }
}

/// Per output index: (lower source index, upper source index, blend weight).
fn upsample_axis(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let max = (size - 1) as f64;
    (0..size * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Gradients of every differentiable leaf, in leaf-creation order.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(Var, Option<String>, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(id, _, _)| *id == v)
            .map(|(_, _, t)| t)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(_, n, _)| n.as_deref() == Some(name))
            .map(|(_, _, t)| t)
    }

    /// Gradients of the named parameters, keyed by name.
    pub fn named(&self) -> indexmap::IndexMap<String, Tensor> {
        self.leaves
            .iter()
            .filter_map(|(_, n, t)| n.clone().map(|n| (n, t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conv_center_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 5, 5]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), ConvOptions::same()).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.data()[12], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn dilated_same_conv_keeps_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 64, 64]));
        let w = g.constant(Tensor::ones(&[5, 1, 3, 3]));
        let y = g.conv2d(x, w, None, ConvOptions::dilated(3)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5, 64, 64]);
    }

    #[test]
    fn zero_conv_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 6, 6], |i| i as f64));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, Some(b), ConvOptions::dilated(2)).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(
            Activation::Tanh.apply(4.0),
            0.999_329_299_739_067,
            epsilon = 1e-12
        );
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Abs.apply(-2.0), 2.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn max_pool_picks_max_and_routes_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 3.0));
        let y = g.max_pool2d(x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_sizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.max_pool2d(x).is_err());
    }

    #[test]
    fn global_avg_pool_mean() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::new(
                vec![1, 2, 2, 2],
                vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0],
            )
            .unwrap(),
        );
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 2.0]);
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = g.dense(v, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[12.0]);

        let wz = g.constant(Tensor::zeros(&[1, 2]));
        let b3 = g.constant(Tensor::new(vec![1], vec![0.3]).unwrap());
        let y = g.dense(v, wz, Some(b3)).unwrap();
        assert_eq!(g.value(y).data(), &[0.3]);

        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.dense(v, bad, None).is_err());
    }

    #[test]
    fn concat_channel_counts_and_order() {
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..4)
            .map(|i| g.constant(Tensor::full(&[1, 32, 4, 4], i as f64)))
            .collect();
        let y = g.concat_channels(&xs).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 128, 4, 4]);
        for i in 0..4 {
            let s = g.value(y).channel_slice(i * 32, 32).unwrap();
            assert!(s.data().iter().all(|&v| v == i as f64));
        }
        let single = g.concat_channels(&xs[..1]).unwrap();
        assert_eq!(g.value(single), g.value(xs[0]));
        let other = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(g.concat_channels(&[xs[0], other]).is_err());
    }

    #[test]
    fn upsample_ramp_and_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = g.bilinear_upsample(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(&g.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let same = g.bilinear_upsample(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn broadcast_mul_per_channel_and_spatial() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        let w = g.constant(Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap());
        let y = g.broadcast_mul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0, 0.5, 0.5, 0.5, 0.5]);
        let s = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.broadcast_mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]);
        let bad = g.constant(Tensor::ones(&[1, 3]));
        assert!(g.broadcast_mul(x, bad).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[2, 3]));
        let s = g.sum(x);
        assert_eq!(g.value(s).item(), 6.0);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
        let y = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let m = g.mean(y);
        assert_eq!(g.value(m).item(), 0.5);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = g.scale(x, 2.0);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_is_repeatable() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones(&[2]));
        let y = g.scale(x, 3.0);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let l = g.sum(y);
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        assert_eq!(a.by_name("x"), b.by_name("x"));
        assert_eq!(a.named().len(), 1);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("used", Tensor::ones(&[2]));
        let _unused = g.param("unused", Tensor::ones(&[3, 1]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        let z = grads.by_name("unused").unwrap();
        assert_eq!(z.shape(), &[3, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
