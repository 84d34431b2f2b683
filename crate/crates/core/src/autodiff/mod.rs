//! Minimal reverse-mode autodiff.
//!
//! A `Tape` records forward ops; `backward` walks the nodes in reverse
//! insertion order (a valid reverse topological order, each node visited
//! once) and accumulates parameter gradients into a `GradStore`. Learnable
//! tensors live outside the tape in a `ParamStore` and are referenced by id,
//! so per-sample tapes never copy weights.

pub mod kernels;

mod gradcheck;


pub use gradcheck::grad_check;

use crate::error::{CdiraError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Gradient reversal: identity forward, gradient scaled by -lambda backward.
#[derive(Debug, Clone, Copy)]
pub struct GrlConfig {
    pub lambda: f32,
}

impl GrlConfig {
    pub fn new(lambda: f32) -> Result<GrlConfig> {
        if !(lambda >= 0.0) {
            return Err(CdiraError::invalid(format!(
                "grl lambda must be non-negative, got {lambda}"
            )));
        }
        Ok(GrlConfig { lambda })
    }
}

/// Named learnable tensors; insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.entries.push((name.to_string(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameter gradients, indexed like the `ParamStore` they were built from.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> GradStore {
        GradStore {
            grads: params
                .entries
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Disjoint mutable access to two gradient tensors.
    fn grad_pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (left, right) = self.grads.split_at_mut(b.0);
            (&mut left[a.0], &mut right[0])
        } else {
            let (left, right) = self.grads.split_at_mut(a.0);
            (&mut right[0], &mut left[b.0])
        }
    }

    /// Elementwise `self += other`; callers control the accumulation order.
    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// (h_out, w_out, pad_top, pad_left) for an input of h x w.
    pub fn geometry(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let k = self.kernel;
        let s = self.stride;
        match self.padding {
            Padding::Same => {
                let h_out = h.div_ceil(s);
                let w_out = w.div_ceil(s);
                let pad_h = ((h_out - 1) * s + k).saturating_sub(h);
                let pad_w = ((w_out - 1) * s + k).saturating_sub(w);
                Ok((h_out, w_out, pad_h / 2, pad_w / 2))
            }
            Padding::Valid => {
                if h < k || w < k {
                    return Err(CdiraError::shape(format!(
                        "valid conv needs input >= kernel, got {h}x{w} vs k={k}"
                    )));
                }
                Ok(((h - k) / s + 1, (w - k) / s + 1, 0, 0))
            }
        }
    }
}

/// Op kinds, used for evaluation counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Linear,
    Relu,
    Gap,
    Softmax,
    SoftmaxXent,
    Sigmoid,
    BceLogit,
    Concat,
    MeanSelect,
    Grl,
    WeightedSum,
}

const N_OP_KINDS: usize = 13;

impl OpKind {
    fn index(self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::Conv2d => 1,
            OpKind::Linear => 2,
            OpKind::Relu => 3,
            OpKind::Gap => 4,
            OpKind::Softmax => 5,
            OpKind::SoftmaxXent => 6,
            OpKind::Sigmoid => 7,
            OpKind::BceLogit => 8,
            OpKind::Concat => 9,
            OpKind::MeanSelect => 10,
            OpKind::Grl => 11,
            OpKind::WeightedSum => 12,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: ParamId,
        b: ParamId,
        spec: ConvSpec,
        // saved forward context
        cols: Vec<f32>,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        pad: (usize, usize),
    },
    Linear {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Relu {
        x: Var,
    },
    Gap {
        x: Var,
        hw: usize,
    },
    Softmax {
        x: Var,
    },
    SoftmaxXent {
        x: Var,
        label: usize,
        probs: Vec<f32>,
    },
    Sigmoid {
        x: Var,
    },
    BceLogit {
        x: Var,
        target: f32,
        weight: f32,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    MeanSelect {
        x: Var,
        positions: Vec<(usize, usize)>,
    },
    Grl {
        x: Var,
        lambda: f32,
    },
    WeightedSum {
        items: Vec<(Var, f32)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only forward graph for one sample.
pub struct Tape {
    nodes: Vec<Node>,
    counts: [usize; N_OP_KINDS],
    relu_signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            counts: [0; N_OP_KINDS],
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Hash of every ReLU activation mask seen on this tape. Two forward
    /// passes with different signatures straddle a ReLU kink, where central
    /// differences are invalid.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_count(&self, kind: OpKind) -> usize {
        self.counts[kind.index()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, kind: OpKind) -> Var {
        self.counts[kind.index()] += 1;
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false, OpKind::Leaf)
    }

    /// Leaf that participates in gradient propagation (used by grad checks
    /// that differentiate w.r.t. an input rather than a parameter).
    pub fn leaf_with_grad(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true, OpKind::Leaf)
    }

    pub fn conv2d(
        &mut self,
        params: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
        spec: ConvSpec,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || xv.shape()[0] != spec.in_ch {
            return Err(CdiraError::shape(format!(
                "conv2d input shape {:?} does not match in_ch {}",
                xv.shape(),
                spec.in_ch
            )));
        }
        let (h, w_in) = (xv.shape()[1], xv.shape()[2]);
        let wt = params.tensor(w);
        let bt = params.tensor(b);
        let k = spec.kernel;
        if wt.shape() != [spec.out_ch, spec.in_ch, k, k] {
            return Err(CdiraError::shape(format!(
                "conv2d weight shape {:?}, expected {:?}",
                wt.shape(),
                [spec.out_ch, spec.in_ch, k, k]
            )));
        }
        if bt.shape() != [spec.out_ch] {
            return Err(CdiraError::shape("conv2d bias shape".to_string()));
        }
        let (h_out, w_out, pad_top, pad_left) = spec.geometry(h, w_in)?;
        let kk = spec.in_ch * k * k;
        let n = h_out * w_out;
        let mut cols = vec![0.0f32; kk * n];
        im2col(
            xv.data(),
            spec.in_ch,
            h,
            w_in,
            k,
            spec.stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
            &mut cols,
        );
        let mut out = vec![0.0f32; spec.out_ch * n];
        kernels::gemm(wt.data(), &cols, &mut out, spec.out_ch, kk, n);
        for (o, &bv) in bt.data().iter().enumerate() {
            for v in out[o * n..(o + 1) * n].iter_mut() {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(&[spec.out_ch, h_out, w_out], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
                in_hw: (h, w_in),
                out_hw: (h_out, w_out),
                pad: (pad_top, pad_left),
            },
            value,
            true,
            OpKind::Conv2d,
        ))
    }

    pub fn linear(&mut self, params: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let xv = self.value(x);
        let wt = params.tensor(w);
        let bt = params.tensor(b);
        let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
        if xv.len() != in_dim {
            return Err(CdiraError::shape(format!(
                "linear input length {} vs weight columns {}",
                xv.len(),
                in_dim
            )));
        }
        if bt.len() != out_dim {
            return Err(CdiraError::shape("linear bias length".to_string()));
        }
        let mut y = vec![0.0f32; out_dim];
        kernels::affine(wt.data(), bt.data(), xv.data(), &mut y);
        let value = Tensor::from_vec(&[out_dim], y)?;
        Ok(self.push(Op::Linear { x, w, b }, value, true, OpKind::Linear))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let mut sig = self.relu_signature;
        let value = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| {
                    sig = sig
                        .wrapping_mul(0x1000_0000_01b3)
                        .wrapping_add((v > 0.0) as u64);
                    v.max(0.0)
                })
                .collect(),
        )
        .expect("same shape");
        self.relu_signature = sig;
        self.push(Op::Relu { x }, value, needs, OpKind::Relu)
    }

    /// max(0, Wx + b): the two-layer MLP building block.
    pub fn linear_relu(
        &mut self,
        params: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let lin = self.linear(params, x, w, b)?;
        Ok(self.relu(lin))
    }

    /// Spatial mean of a [C, H, W] map: out[c] = (1/HW) sum_{h,w} x[c,h,w].
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(CdiraError::shape("gap expects [C, H, W]".to_string()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let hw = h * w;
        if hw == 0 {
            return Err(CdiraError::invalid("gap on empty spatial extent".to_string()));
        }
        let mut out = vec![0.0f32; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let plane = &xv.data()[ci * hw..(ci + 1) * hw];
            let mut acc = 0.0f32;
            for &v in plane {
                acc += v;
            }
            *o = acc / hw as f32;
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(&[c], out)?;
        Ok(self.push(Op::Gap { x, hw }, value, needs, OpKind::Gap))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(CdiraError::invalid("softmax on empty vector".to_string()));
        }
        let probs = kernels::softmax(xv.data());
        let needs = self.needs(x);
        let value = Tensor::from_vec(xv.shape(), probs)?;
        Ok(self.push(Op::Softmax { x }, value, needs, OpKind::Softmax))
    }

    /// Fused log-softmax cross-entropy. Returns the scalar loss node and the
    /// class probabilities computed along the way.
    pub fn softmax_xent(&mut self, x: Var, label: usize) -> Result<(Var, Vec<f32>)> {
        let xv = self.value(x);
        let c = xv.len();
        if c == 0 {
            return Err(CdiraError::invalid("cross-entropy over zero classes".to_string()));
        }
        if label >= c {
            return Err(CdiraError::invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let logits = xv.data();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = logits.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        let loss = -(logits[label] - max - log_sum);
        let probs: Vec<f32> = logits.iter().map(|&v| (v - max).exp() / sum).collect();
        let needs = self.needs(x);
        let var = self.push(
            Op::SoftmaxXent {
                x,
                label,
                probs: probs.clone(),
            },
            Tensor::scalar(loss),
            needs,
            OpKind::SoftmaxXent,
        );
        Ok((var, probs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let needs = self.needs(x);
        let value = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| kernels::sigmoid(v))
                .collect(),
        )
        .expect("same shape");
        self.push(Op::Sigmoid { x }, value, needs, OpKind::Sigmoid)
    }

    /// Weighted binary cross-entropy on a scalar logit, via stable softplus:
    /// loss = weight * target * softplus(-a) + (1 - target) * softplus(a).
    pub fn bce_logit(&mut self, x: Var, target: f32, weight: f32) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(CdiraError::shape("bce_logit expects a scalar logit".to_string()));
        }
        let a = xv.item();
        let loss = weight * target * kernels::softplus(-a)
            + (1.0 - target) * kernels::softplus(a);
        let needs = self.needs(x);
        Ok(self.push(
            Op::BceLogit { x, target, weight },
            Tensor::scalar(loss),
            needs,
            OpKind::BceLogit,
        ))
    }

    /// Concatenate two vectors, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.value(a).data().to_vec();
        let split = data.len();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        let n = data.len();
        self.push(
            Op::Concat { a, b, split },
            Tensor::from_vec(&[n], data).expect("len"),
            needs,
            OpKind::Concat,
        )
    }

    /// Mean of the channel vectors at `positions` of a [C, H, W] map.
    /// Positions must be distinct, in range, and sorted row-major so the
    /// summation order is fixed; gradients flow only to the selected cells.
    pub fn mean_select(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(CdiraError::shape("mean_select expects [C, H, W]".to_string()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if positions.is_empty() || positions.len() > h * w {
            return Err(CdiraError::invalid(format!(
                "mean_select k={} out of range 1..={}",
                positions.len(),
                h * w
            )));
        }
        for win in positions.windows(2) {
            if win[0] >= win[1] {
                return Err(CdiraError::invalid(
                    "mean_select positions must be strictly row-major sorted".to_string(),
                ));
            }
        }
        if positions.iter().any(|&(ph, pw)| ph >= h || pw >= w) {
            return Err(CdiraError::invalid("mean_select position out of range".to_string()));
        }
        let k = positions.len() as f32;
        let mut out = vec![0.0f32; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let plane = &xv.data()[ci * h * w..(ci + 1) * h * w];
            let mut acc = 0.0f32;
            for &(ph, pw) in positions {
                acc += plane[ph * w + pw];
            }
            *o = acc / k;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::MeanSelect {
                x,
                positions: positions.to_vec(),
            },
            Tensor::from_vec(&[c], out)?,
            needs,
            OpKind::MeanSelect,
        ))
    }

    /// Identity forward; backward multiplies the upstream gradient by -lambda.
    pub fn grl(&mut self, x: Var, cfg: GrlConfig) -> Var {
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(
            Op::Grl {
                x,
                lambda: cfg.lambda,
            },
            value,
            needs,
            OpKind::Grl,
        )
    }

    /// y = sum_i c_i * x_i over same-shape tensors; covers scaling as the
    /// single-item case.
    pub fn weighted_sum(&mut self, items: &[(Var, f32)]) -> Result<Var> {
        if items.is_empty() {
            return Err(CdiraError::invalid("weighted_sum of nothing".to_string()));
        }
        let shape = self.value(items[0].0).shape().to_vec();
        let mut out = vec![0.0f32; self.value(items[0].0).len()];
        for &(v, c) in items {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(CdiraError::shape("weighted_sum shape mismatch".to_string()));
            }
            for (o, &x) in out.iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let needs = items.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Op::WeightedSum {
                items: items.to_vec(),
            },
            Tensor::from_vec(&shape, out)?,
            needs,
            OpKind::WeightedSum,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.weighted_sum(&[(x, c)]).expect("single item")
    }

    /// Reverse pass from a scalar output. Parameter gradients accumulate into
    /// `grads`; gradients that reached `leaf_with_grad` nodes are returned.
    pub fn backward(
        &self,
        out: Var,
        seed: f32,
        params: &ParamStore,
        grads: &mut GradStore,
    ) -> Result<InputGrads> {
        if self.value(out).len() != 1 {
            return Err(CdiraError::invalid(
                "backward requires a scalar output".to_string(),
            ));
        }
        let mut node_grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[out.0] = Some(vec![seed]);

        for idx in (0..=out.0).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    // Restore so callers can read input gradients afterwards.
                    node_grads[idx] = Some(dy);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    spec,
                    cols,
                    in_hw,
                    out_hw,
                    pad,
                } => {
                    let n = out_hw.0 * out_hw.1;
                    let kk = spec.in_ch * spec.kernel * spec.kernel;
                    {
                        let db = grads.grad_mut(*b);
                        for (o, dbv) in db.data_mut().iter_mut().enumerate() {
                            let mut acc = 0.0f32;
                            for &v in &dy[o * n..(o + 1) * n] {
                                acc += v;
                            }
                            *dbv += acc;
                        }
                    }
                    kernels::gemm_bt(
                        &dy,
                        cols,
                        grads.grad_mut(*w).data_mut(),
                        spec.out_ch,
                        n,
                        kk,
                    );
                    if self.needs(*x) {
                        let mut dcols = vec![0.0f32; kk * n];
                        kernels::gemm_at(
                            params.tensor(*w).data(),
                            &dy,
                            &mut dcols,
                            spec.out_ch,
                            kk,
                            n,
                        );
                        let dx = acc_buf(&mut node_grads, *x, self.value(*x).len());
                        col2im(
                            &dcols,
                            spec.in_ch,
                            in_hw.0,
                            in_hw.1,
                            spec.kernel,
                            spec.stride,
                            pad.0,
                            pad.1,
                            out_hw.0,
                            out_hw.1,
                            dx,
                        );
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x).data();
                    let (dw, db) = grads.grad_pair_mut(*w, *b);
                    kernels::affine_backward_params(xv, &dy, dw.data_mut(), db.data_mut());
                    if self.needs(*x) {
                        let dx = acc_buf(&mut node_grads, *x, xv.len());
                        kernels::affine_backward_input(params.tensor(*w).data(), &dy, dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let pre = self.value(*x).data();
                        let dx = acc_buf(&mut node_grads, *x, pre.len());
                        // Subgradient 0 at exactly zero pre-activation.
                        for ((xv, &p), &d) in dx.iter_mut().zip(pre).zip(&dy) {
                            if p > 0.0 {
                                *xv += d;
                            }
                        }
                    }
                }
                Op::Gap { x, hw } => {
                    if self.needs(*x) {
                        let inv = 1.0 / *hw as f32;
                        let hw = *hw;
                        let dx = acc_buf(&mut node_grads, *x, self.value(*x).len());
                        for (c, &d) in dy.iter().enumerate() {
                            let g = d * inv;
                            for v in dx[c * hw..(c + 1) * hw].iter_mut() {
                                *v += g;
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    if self.needs(*x) {
                        let y = self.nodes[idx].value.data();
                        let inner: f32 = dy.iter().zip(y).map(|(&d, &p)| d * p).sum();
                        let dx = acc_buf(&mut node_grads, *x, y.len());
                        for ((xv, &p), &d) in dx.iter_mut().zip(y).zip(&dy) {
                            *xv += p * (d - inner);
                        }
                    }
                }
                Op::SoftmaxXent { x, label, probs } => {
                    if self.needs(*x) {
                        let d = dy[0];
                        let dx = acc_buf(&mut node_grads, *x, probs.len());
                        for (c, (xv, &p)) in dx.iter_mut().zip(probs).enumerate() {
                            let onehot = if c == *label { 1.0 } else { 0.0 };
                            *xv += d * (p - onehot);
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.needs(*x) {
                        let y = self.nodes[idx].value.data();
                        let dx = acc_buf(&mut node_grads, *x, y.len());
                        for ((xv, &s), &d) in dx.iter_mut().zip(y).zip(&dy) {
                            *xv += d * s * (1.0 - s);
                        }
                    }
                }
                Op::BceLogit { x, target, weight } => {
                    if self.needs(*x) {
                        let a = self.value(*x).item();
                        let d = dy[0];
                        let grad = -weight * target * kernels::sigmoid(-a)
                            + (1.0 - target) * kernels::sigmoid(a);
                        let dx = acc_buf(&mut node_grads, *x, 1);
                        dx[0] += d * grad;
                    }
                }
                Op::Concat { a, b, split } => {
                    if self.needs(*a) {
                        let da = acc_buf(&mut node_grads, *a, *split);
                        for (xv, &d) in da.iter_mut().zip(&dy[..*split]) {
                            *xv += d;
                        }
                    }
                    if self.needs(*b) {
                        let len_b = dy.len() - *split;
                        let db = acc_buf(&mut node_grads, *b, len_b);
                        for (xv, &d) in db.iter_mut().zip(&dy[*split..]) {
                            *xv += d;
                        }
                    }
                }
                Op::MeanSelect { x, positions } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape();
                        let (h, w) = (shape[1], shape[2]);
                        let hw = h * w;
                        let inv = 1.0 / positions.len() as f32;
                        let dx = acc_buf(&mut node_grads, *x, self.value(*x).len());
                        for (c, &d) in dy.iter().enumerate() {
                            let g = d * inv;
                            for &(ph, pw) in positions {
                                dx[c * hw + ph * w + pw] += g;
                            }
                        }
                    }
                }
                Op::Grl { x, lambda } => {
                    if self.needs(*x) {
                        let dx = acc_buf(&mut node_grads, *x, dy.len());
                        for (xv, &d) in dx.iter_mut().zip(&dy) {
                            *xv += -lambda * d;
                        }
                    }
                }
                Op::WeightedSum { items } => {
                    for &(v, c) in items {
                        if self.needs(v) {
                            let dx = acc_buf(&mut node_grads, v, dy.len());
                            for (xv, &d) in dx.iter_mut().zip(&dy) {
                                *xv += c * d;
                            }
                        }
                    }
                }
            }
        }
        Ok(InputGrads { grads: node_grads })
    }
}

/// Gradients that reached graph leaves during one backward pass.
pub struct InputGrads {
    grads: Vec<Option<Vec<f32>>>,
}

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc_buf(node_grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
    node_grads[v.0].get_or_insert_with(|| vec![0.0f32; len])
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [f32],
) {
    let n = h_out * w_out;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ci * k + dy) * k + dx) * n;
                for oh in 0..h_out {
                    let ih = (oh * stride + dy) as isize - pad_top as isize;
                    let dst = &mut cols[row + oh * w_out..row + (oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + dx) as isize - pad_left as isize;
                        *d = if iw >= 0 && iw < w as isize {
                            src[iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [f32],
) {
    let n = h_out * w_out;
    for ci in 0..c_in {
        let plane_off = ci * h * w;
        for dy in 0..k {
            for dx_k in 0..k {
                let row = ((ci * k + dy) * k + dx_k) * n;
                for oh in 0..h_out {
                    let ih = (oh * stride + dy) as isize - pad_top as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &dcols[row + oh * w_out..row + (oh + 1) * w_out];
                    let dst_row = plane_off + ih as usize * w;
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride + dx_k) as isize - pad_left as isize;
                        if iw >= 0 && iw < w as isize {
                            dx[dst_row + iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
