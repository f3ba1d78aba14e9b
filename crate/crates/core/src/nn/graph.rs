//! Tape-based reverse-mode graph. Nodes are appended in evaluation order
//! (already topological); `backward` walks the tape in reverse and flushes
//! leaf gradients into their `Param` cells.

use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{self, ConvGeom};
use super::{LabelMap, NnError, NnResult, Param, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Leaf(Param),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f32),
    Scale(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Softplus(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<f32>>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    UpsampleNearest {
        x: Var,
        fh: usize,
        fw: usize,
    },
    ResizeBilinear {
        x: Var,
        oh: usize,
        ow: usize,
    },
    SoftmaxClasses(Var),
    LogSoftmaxClasses(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<LabelMap>,
        ignore: u8,
        valid: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_cache: HashMap<(usize, bool), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> NnResult<f32> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(NnError::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    /// Snapshot a node's value as a detached tensor.
    pub fn detached(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    // ── leaves ─────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Const, false)
    }

    pub fn constant_owned(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(shape, data, Op::Const, false)
    }

    pub fn scalar_const(&mut self, v: f32) -> Var {
        self.push(vec![1], vec![v], Op::Const, false)
    }

    /// Trainable leaf bound to `p`; gradients flow back into `p` on `backward`.
    /// Repeated binds of the same cell reuse one node.
    pub fn param(&mut self, p: &Param) -> Var {
        self.bind(p, true)
    }

    /// Constant leaf reading `p`'s current value; no gradient is recorded.
    pub fn frozen_param(&mut self, p: &Param) -> Var {
        self.bind(p, false)
    }

    fn bind(&mut self, p: &Param, trainable: bool) -> Var {
        let key = (p.cell_id(), trainable);
        if let Some(&v) = self.leaf_cache.get(&key) {
            return v;
        }
        let t = p.borrow();
        let op = if trainable {
            Op::Leaf(p.clone())
        } else {
            Op::Const
        };
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), op, trainable);
        drop(t);
        self.leaf_cache.insert(key, v);
        v
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> NnResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> NnResult<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NnResult<Var> {
        self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> NnResult<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::AddScalar(a, c), needs)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), needs)
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::LeakyRelu(a, slope), needs)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::Softplus(a), needs)
    }

    // ── structured ops ─────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> NnResult<Var> {
        let geom = ConvGeom::resolve(self.shape(x), self.shape(w), stride, pad, dilation)?;
        let keep_cols = self.needs(w);
        let (value, cols) = ops::conv2d_forward(self.value(x), self.value(w), &geom, keep_cols);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            geom.out_shape(),
            value,
            Op::Conv2d { x, w, geom, cols },
            needs,
        ))
    }

    /// Per-channel bias over `[B,C,H,W]`; bias shape `[C]`. Applied after the
    /// matrix product so exact zeros keep a positive sign.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> NnResult<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(bias) != [xs[1]] {
            return Err(NnError::ShapeMismatch {
                op: "bias_add",
                expected: format!("bias [{}] for x {:?}", xs.get(1).copied().unwrap_or(0), xs),
                got: format!("{:?}", self.shape(bias)),
            });
        }
        let hw = xs[2] * xs[3];
        let b_val = self.value(bias);
        let mut value = self.value(x).to_vec();
        for bi in 0..xs[0] {
            for c in 0..xs[1] {
                let off = (bi * xs[1] + c) * hw;
                let add = b_val[c];
                for v in &mut value[off..off + hw] {
                    *v += add;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(xs, value, Op::BiasAdd { x, bias }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> NnResult<Var> {
        let s = self.rank4("global_avg_pool", x)?;
        let value = ops::global_avg_pool(self.value(x), s[0], s[1], s[2] * s[3]);
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[1], 1, 1], value, Op::GlobalAvgPool(x), needs))
    }

    /// Nearest-neighbor upsample to `(oh, ow)`; each target size must be an
    /// integer multiple of the source size.
    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> NnResult<Var> {
        let s = self.rank4("upsample_nearest", x)?;
        if oh % s[2] != 0 || ow % s[3] != 0 {
            return Err(NnError::BadConfig {
                op: "upsample_nearest",
                reason: format!("({oh},{ow}) not multiples of ({},{})", s[2], s[3]),
            });
        }
        let (fh, fw) = (oh / s[2], ow / s[3]);
        let value = ops::upsample_nearest(self.value(x), s[0], s[1], s[2], s[3], fh, fw);
        let needs = self.needs(x);
        Ok(self.push(
            vec![s[0], s[1], oh, ow],
            value,
            Op::UpsampleNearest { x, fh, fw },
            needs,
        ))
    }

    /// Bilinear resize to `(oh, ow)`, half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> NnResult<Var> {
        let s = self.rank4("resize_bilinear", x)?;
        if oh == 0 || ow == 0 {
            return Err(NnError::BadConfig {
                op: "resize_bilinear",
                reason: "target size must be positive".into(),
            });
        }
        let value = ops::resize_bilinear(self.value(x), s[0], s[1], s[2], s[3], oh, ow);
        let needs = self.needs(x);
        Ok(self.push(
            vec![s[0], s[1], oh, ow],
            value,
            Op::ResizeBilinear { x, oh, ow },
            needs,
        ))
    }

    pub fn softmax_classes(&mut self, x: Var) -> NnResult<Var> {
        let s = self.rank4("softmax_classes", x)?;
        let value = ops::softmax_classes(self.value(x), s[0], s[1], s[2] * s[3]);
        let needs = self.needs(x);
        Ok(self.push(s.to_vec(), value, Op::SoftmaxClasses(x), needs))
    }

    pub fn log_softmax_classes(&mut self, x: Var) -> NnResult<Var> {
        let s = self.rank4("log_softmax_classes", x)?;
        let value = ops::log_softmax_classes(self.value(x), s[0], s[1], s[2] * s[3]);
        let needs = self.needs(x);
        Ok(self.push(s.to_vec(), value, Op::LogSoftmaxClasses(x), needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![sum as f32], Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let sum: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![(sum / n as f64) as f32], Op::MeanAll(x), needs)
    }

    /// Mean cross-entropy over non-ignored pixels. `logits` is `[B,C,H,W]`,
    /// `labels` is `[B,H,W]` with values in `[0,C)` or `ignore`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        labels: &Rc<LabelMap>,
        ignore: u8,
    ) -> NnResult<Var> {
        let s = self.rank4("cross_entropy", logits)?;
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if labels.shape() != [b, h, w] {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("labels [{b},{h},{w}]"),
                got: format!("{:?}", labels.shape()),
            });
        }
        let hw = h * w;
        let x = self.value(logits);
        let mut total = 0.0f64;
        let mut valid = 0usize;
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let lbl = labels.data()[bi * hw + p];
                if lbl == ignore {
                    continue;
                }
                if lbl as usize >= c {
                    return Err(NnError::LabelOutOfRange {
                        value: lbl as u32,
                        classes: c,
                    });
                }
                let mut m = f32::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(x[base + ci * hw + p]);
                }
                let mut sum = 0.0f64;
                for ci in 0..c {
                    sum += ((x[base + ci * hw + p] - m) as f64).exp();
                }
                let lse = sum.ln() + m as f64;
                total += lse - x[base + lbl as usize * hw + p] as f64;
                valid += 1;
            }
        }
        if valid == 0 {
            return Err(NnError::NoValidPixels);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![(total / valid as f64) as f32],
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                ignore,
                valid,
            },
            needs,
        ))
    }

    fn rank4(&self, op: &'static str, x: Var) -> NnResult<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(NnError::ShapeMismatch {
                op,
                expected: "rank-4 [B,C,H,W]".into(),
                got: format!("{s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; accumulates into `Param::grad_mut`
    /// for every trainable leaf on the path.
    pub fn backward(&self, loss: Var) -> NnResult<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Leaf(p) => {
                    let mut t = p.borrow_mut();
                    let g = t.grad_mut();
                    for (gi, di) in g.iter_mut().zip(&dy) {
                        *gi += di;
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &dy, |d| d);
                    self.accum(&mut grads, *b, &dy, |d| d);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &dy, |d| d);
                    self.accum(&mut grads, *b, &dy, |d| -d);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = &self.nodes[b.0].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for ((gi, di), vi) in g.iter_mut().zip(&dy).zip(bv) {
                            *gi += di * vi;
                        }
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.0].value;
                        let g = self.grad_buf(&mut grads, *b);
                        for ((gi, di), vi) in g.iter_mut().zip(&dy).zip(av) {
                            *gi += di * vi;
                        }
                    }
                }
                Op::AddScalar(a, _) => self.accum(&mut grads, *a, &dy, |d| d),
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accum(&mut grads, *a, &dy, move |d| c * d);
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let xv = &self.nodes[a.0].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for ((gi, di), xi) in g.iter_mut().zip(&dy).zip(xv) {
                            if *xi > 0.0 {
                                *gi += di;
                            }
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.needs(*a) {
                        let slope = *slope;
                        let xv = &self.nodes[a.0].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for ((gi, di), xi) in g.iter_mut().zip(&dy).zip(xv) {
                            *gi += if *xi > 0.0 { *di } else { slope * di };
                        }
                    }
                }
                Op::Softplus(a) => {
                    if self.needs(*a) {
                        let xv = &self.nodes[a.0].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for ((gi, di), xi) in g.iter_mut().zip(&dy).zip(xv) {
                            let sig = 1.0 / (1.0 + (-xi).exp());
                            *gi += di * sig;
                        }
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    if self.needs(*x) {
                        let wv = &self.nodes[w.0].value;
                        let dx = ops::conv2d_backward_input(&dy, wv, geom);
                        let g = self.grad_buf(&mut grads, *x);
                        for (gi, di) in g.iter_mut().zip(&dx) {
                            *gi += di;
                        }
                    }
                    if self.needs(*w) {
                        let cols = cols.as_ref().expect("cols kept when weight is trainable");
                        let g = self.grad_buf(&mut grads, *w);
                        ops::conv2d_backward_weight(&dy, cols, geom, g);
                    }
                }
                Op::BiasAdd { x, bias } => {
                    self.accum(&mut grads, *x, &dy, |d| d);
                    if self.needs(*bias) {
                        let s = &self.nodes[i].shape;
                        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                        let g = self.grad_buf(&mut grads, *bias);
                        for bi in 0..b {
                            for ci in 0..c {
                                let off = (bi * c + ci) * hw;
                                let mut acc = 0.0f64;
                                for d in &dy[off..off + hw] {
                                    acc += *d as f64;
                                }
                                g[ci] += acc as f32;
                            }
                        }
                    }
                }
                Op::GlobalAvgPool(a) => {
                    if self.needs(*a) {
                        let s = &self.nodes[a.0].shape;
                        let hw = s[2] * s[3];
                        let inv = 1.0 / hw as f32;
                        let g = self.grad_buf(&mut grads, *a);
                        for (plane, d) in dy.iter().enumerate() {
                            let add = d * inv;
                            for gi in &mut g[plane * hw..(plane + 1) * hw] {
                                *gi += add;
                            }
                        }
                    }
                }
                Op::UpsampleNearest { x, fh, fw } => {
                    if self.needs(*x) {
                        let s = &self.nodes[x.0].shape;
                        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                        let (fh, fw) = (*fh, *fw);
                        let g = self.grad_buf(&mut grads, *x);
                        ops::upsample_nearest_backward(&dy, b, c, h, w, fh, fw, g);
                    }
                }
                Op::ResizeBilinear { x, oh, ow } => {
                    if self.needs(*x) {
                        let s = &self.nodes[x.0].shape;
                        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                        let (oh, ow) = (*oh, *ow);
                        let g = self.grad_buf(&mut grads, *x);
                        ops::resize_bilinear_backward(&dy, b, c, h, w, oh, ow, g);
                    }
                }
                Op::SoftmaxClasses(a) => {
                    if self.needs(*a) {
                        let s = &self.nodes[i].shape;
                        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                        let sv = &self.nodes[i].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for bi in 0..b {
                            let base = bi * c * hw;
                            for p in 0..hw {
                                let mut dot = 0.0f64;
                                for ci in 0..c {
                                    let idx = base + ci * hw + p;
                                    dot += (dy[idx] * sv[idx]) as f64;
                                }
                                for ci in 0..c {
                                    let idx = base + ci * hw + p;
                                    g[idx] += sv[idx] * (dy[idx] - dot as f32);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmaxClasses(a) => {
                    if self.needs(*a) {
                        let s = &self.nodes[i].shape;
                        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                        let lv = &self.nodes[i].value;
                        let g = self.grad_buf(&mut grads, *a);
                        for bi in 0..b {
                            let base = bi * c * hw;
                            for p in 0..hw {
                                let mut sum = 0.0f64;
                                for ci in 0..c {
                                    sum += dy[base + ci * hw + p] as f64;
                                }
                                for ci in 0..c {
                                    let idx = base + ci * hw + p;
                                    g[idx] += dy[idx] - lv[idx].exp() * sum as f32;
                                }
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let d = dy[0];
                    self.accum(&mut grads, *a, &[], move |_| d);
                }
                Op::MeanAll(a) => {
                    let d = dy[0] / self.nodes[a.0].value.len() as f32;
                    self.accum(&mut grads, *a, &[], move |_| d);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    valid,
                } => {
                    if self.needs(*logits) {
                        let s = &self.nodes[logits.0].shape;
                        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                        let x = &self.nodes[logits.0].value;
                        let scale = dy[0] / *valid as f32;
                        let lbl_data = labels.data();
                        let ignore = *ignore;
                        let g = self.grad_buf(&mut grads, *logits);
                        for bi in 0..b {
                            let base = bi * c * hw;
                            for p in 0..hw {
                                let lbl = lbl_data[bi * hw + p];
                                if lbl == ignore {
                                    continue;
                                }
                                let mut m = f32::NEG_INFINITY;
                                for ci in 0..c {
                                    m = m.max(x[base + ci * hw + p]);
                                }
                                let mut sum = 0.0f64;
                                for ci in 0..c {
                                    sum += ((x[base + ci * hw + p] - m) as f64).exp();
                                }
                                let inv = 1.0 / sum as f32;
                                for ci in 0..c {
                                    let idx = base + ci * hw + p;
                                    let soft = ((x[idx] - m) as f64).exp() as f32 * inv;
                                    let one = (ci == lbl as usize) as u8 as f32;
                                    g[idx] += scale * (soft - one);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply `f` to each incoming gradient element and accumulate into `v`'s
    /// buffer. With an empty `dy` the closure's output is broadcast.
    fn accum<F: Fn(f32) -> f32>(
        &self,
        grads: &mut [Option<Vec<f32>>],
        v: Var,
        dy: &[f32],
        f: F,
    ) {
        if !self.needs(v) {
            return;
        }
        let g = self.grad_buf_slice(grads, v);
        if dy.is_empty() {
            let add = f(0.0);
            for gi in g.iter_mut() {
                *gi += add;
            }
        } else {
            for (gi, di) in g.iter_mut().zip(dy) {
                *gi += f(*di);
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> &'a mut Vec<f32> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn grad_buf_slice<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> &'a mut [f32] {
        self.grad_buf(grads, v).as_mut_slice()
    }

    // ── f64 shadow evaluation ──────────────────────────────────────────

    /// Recompute the scalar `v` in 64-bit precision by replaying the tape.
    /// Leaves enter at their stored f32 values. Used by gradcheck, where the
    /// f32 forward would drown central differences in rounding noise.
    pub fn eval_scalar_f64(&self, v: Var) -> NnResult<f64> {
        if self.nodes[v.0].value.len() != 1 {
            return Err(NnError::NotScalar(self.nodes[v.0].shape.clone()));
        }
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(v.0 + 1);
        for i in 0..=v.0 {
            let node = &self.nodes[i];
            let out = match &node.op {
                Op::Const | Op::Leaf(_) => node.value.iter().map(|&x| x as f64).collect(),
                Op::Add(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::AddScalar(a, c) => vals[a.0].iter().map(|&x| x + *c as f64).collect(),
                Op::Scale(a, c) => vals[a.0].iter().map(|&x| x * *c as f64).collect(),
                Op::Relu(a) => vals[a.0].iter().map(|&x| x.max(0.0)).collect(),
                Op::LeakyRelu(a, s) => vals[a.0]
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { *s as f64 * x })
                    .collect(),
                Op::Softplus(a) => vals[a.0]
                    .iter()
                    .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
                    .collect(),
                Op::Conv2d { x, w, geom, .. } => conv2d_f64(&vals[x.0], &vals[w.0], geom),
                Op::BiasAdd { x, bias } => {
                    let s = &node.shape;
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut out = vals[x.0].clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let add = vals[bias.0][ci];
                            for o in &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                                *o += add;
                            }
                        }
                    }
                    out
                }
                Op::GlobalAvgPool(a) => {
                    let s = &self.nodes[a.0].shape;
                    let hw = s[2] * s[3];
                    vals[a.0]
                        .chunks(hw)
                        .map(|p| p.iter().sum::<f64>() / hw as f64)
                        .collect()
                }
                Op::UpsampleNearest { x, fh, fw } => {
                    let s = &self.nodes[x.0].shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * fh, w * fw);
                    let src = &vals[x.0];
                    let mut out = vec![0.0f64; b * c * oh * ow];
                    for plane in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                out[plane * oh * ow + oy * ow + ox] =
                                    src[plane * h * w + (oy / fh) * w + ox / fw];
                            }
                        }
                    }
                    out
                }
                Op::ResizeBilinear { x, oh, ow } => {
                    let (oh, ow) = (*oh, *ow);
                    let s = &self.nodes[x.0].shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let ys = ops::bilinear_axis(h, oh);
                    let xs = ops::bilinear_axis(w, ow);
                    let src = &vals[x.0];
                    let mut out = vec![0.0f64; b * c * oh * ow];
                    for plane in 0..b * c {
                        let sp = &src[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                                let top = sp[y0 * w + x0] + wx * (sp[y0 * w + x1] - sp[y0 * w + x0]);
                                let bot = sp[y1 * w + x0] + wx * (sp[y1 * w + x1] - sp[y1 * w + x0]);
                                out[plane * oh * ow + oy * ow + ox] = top + wy * (bot - top);
                            }
                        }
                    }
                    out
                }
                Op::SoftmaxClasses(a) | Op::LogSoftmaxClasses(a) => {
                    let log = matches!(node.op, Op::LogSoftmaxClasses(_));
                    let s = &node.shape;
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let x = &vals[a.0];
                    let mut out = vec![0.0f64; x.len()];
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let m = (0..c)
                                .map(|ci| x[base + ci * hw + p])
                                .fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 =
                                (0..c).map(|ci| (x[base + ci * hw + p] - m).exp()).sum();
                            for ci in 0..c {
                                let idx = base + ci * hw + p;
                                out[idx] = if log {
                                    x[idx] - (sum.ln() + m)
                                } else {
                                    (x[idx] - m).exp() / sum
                                };
                            }
                        }
                    }
                    out
                }
                Op::SumAll(a) => vec![vals[a.0].iter().sum::<f64>()],
                Op::MeanAll(a) => {
                    vec![vals[a.0].iter().sum::<f64>() / vals[a.0].len() as f64]
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore,
                    ..
                } => {
                    let s = &self.nodes[logits.0].shape;
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let x = &vals[logits.0];
                    let mut total = 0.0f64;
                    let mut valid = 0usize;
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let lbl = labels.data()[bi * hw + p];
                            if lbl == *ignore {
                                continue;
                            }
                            let m = (0..c)
                                .map(|ci| x[base + ci * hw + p])
                                .fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 =
                                (0..c).map(|ci| (x[base + ci * hw + p] - m).exp()).sum();
                            total += sum.ln() + m - x[base + lbl as usize * hw + p];
                            valid += 1;
                        }
                    }
                    vec![total / valid as f64]
                }
            };
            vals.push(out);
        }
        Ok(vals[v.0][0])
    }
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn conv2d_f64(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0f64; g.batch * g.c_out * g.h_out * g.w_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for ho in 0..g.h_out {
                for wo in 0..g.w_out {
                    let mut acc = 0.0f64;
                    for ci in 0..g.c_in {
                        for kh in 0..g.kernel {
                            for kw in 0..g.kernel {
                                let hy = (ho * g.stride + kh * g.dilation) as isize
                                    - g.pad as isize;
                                let wx = (wo * g.stride + kw * g.dilation) as isize
                                    - g.pad as isize;
                                if hy < 0
                                    || wx < 0
                                    || hy >= g.h_in as isize
                                    || wx >= g.w_in as isize
                                {
                                    continue;
                                }
                                let xi = ((b * g.c_in + ci) * g.h_in + hy as usize) * g.w_in
                                    + wx as usize;
                                let wi = ((co * g.c_in + ci) * g.kernel + kh) * g.kernel + kw;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * g.c_out + co) * g.h_out + ho) * g.w_out + wo] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, shape: &[usize], data: Vec<f32>) -> Param {
        Param::new(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn add_mul_backward() {
        // loss = sum( (a + a) * b )
        let a = param("a", &[3], vec![1.0, 2.0, 3.0]);
        let b = param("b", &[3], vec![4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let av = g.param(&a);
        let bv = g.param(&b);
        let s = g.add(av, av).unwrap();
        let m = g.mul(s, bv).unwrap();
        let loss = g.sum_all(m);
        assert_eq!(g.scalar(loss).unwrap(), 2.0 * (4.0 + 10.0 + 18.0));
        g.backward(loss).unwrap();
        assert_eq!(a.borrow().grad().unwrap(), &[8.0, 10.0, 12.0]);
        assert_eq!(b.borrow().grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn leaf_cache_reuses_nodes_and_accumulates_once() {
        let a = param("a", &[2], vec![1.0, 1.0]);
        let mut g = Graph::new();
        let v1 = g.param(&a);
        let v2 = g.param(&a);
        assert_eq!(v1, v2);
        let s = g.sum_all(v1);
        g.backward(s).unwrap();
        assert_eq!(a.borrow().grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let a = param("a", &[2], vec![1.0, 2.0]);
        let b = param("b", &[2], vec![3.0, 4.0]);
        let mut g = Graph::new();
        let av = g.frozen_param(&a);
        let bv = g.param(&b);
        let m = g.mul(av, bv).unwrap();
        let loss = g.sum_all(m);
        g.backward(loss).unwrap();
        assert!(a.borrow().grad().is_none());
        assert_eq!(b.borrow().grad().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let a = param("a", &[3], vec![-1.0, 0.0, 2.0]);
        let mut g = Graph::new();
        let av = g.param(&a);
        let r = g.relu(av);
        let loss = g.sum_all(r);
        g.backward(loss).unwrap();
        assert_eq!(a.borrow().grad().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let labels = Rc::new(LabelMap::new(vec![1, 2, 2], vec![0, 1, 2, 3]).unwrap());
        let mut g = Graph::new();
        let lv = g.constant(&logits);
        let ce = g.cross_entropy_mean(lv, &labels, 255).unwrap();
        assert!((g.scalar(ce).unwrap() - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels_and_all_ignored() {
        let logits = Tensor::zeros(&[1, 3, 1, 2]);
        let mut g = Graph::new();
        let lv = g.constant(&logits);
        let bad = Rc::new(LabelMap::new(vec![1, 1, 2], vec![0, 7]).unwrap());
        assert!(matches!(
            g.cross_entropy_mean(lv, &bad, 255),
            Err(NnError::LabelOutOfRange { .. })
        ));
        let ignored = Rc::new(LabelMap::new(vec![1, 1, 2], vec![255, 255]).unwrap());
        assert!(matches!(
            g.cross_entropy_mean(lv, &ignored, 255),
            Err(NnError::NoValidPixels)
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let a = param("a", &[2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let av = g.param(&a);
        assert!(matches!(g.backward(av), Err(NnError::NotScalar(_))));
    }
}
