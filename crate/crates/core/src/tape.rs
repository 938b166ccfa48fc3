//! Wengert-list reverse-mode differentiation over `Tensor4`.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to replay the adjoint. `backward` walks the list in reverse creation
//! order, which is a valid reverse topological order because ops can only
//! reference earlier ids. Gradients live in a side table so leaf gradients
//! survive after the sweep.
//!
//! Numerics that tests rely on:
//! - self_correlation computes cell norms with the same fused multiply-add
//!   accumulation as the pair dot products, so a bit-identical duplicated
//!   cell scores exactly 1.0 in 32-bit mode (the 1e-8 stabilizer rounds away
//!   below the half-ulp of any squared norm >= 0.25);
//! - the whole-vector LCCD plane built from `mul` + `reduce_channels_sum`
//!   accumulates channels in index order, matching a naive per-cell loop.

use crate::error::{Error, Result};
use crate::kernels::{conv2d_backward, conv2d_forward, matmul_acc, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Handle to a value recorded on a tape. Only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place stabilized softmax over one pixel's channel slice.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const CORR_EPS: f64 = 1e-8;
const LOG_CLAMP: f64 = -30.0;

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        geom: ConvGeom,
    },
    Relu {
        input: ValueId,
    },
    Sigmoid {
        input: ValueId,
    },
    OneMinus {
        input: ValueId,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    Mul {
        lhs: ValueId,
        rhs: ValueId,
    },
    MaxPool2 {
        input: ValueId,
        picks: Vec<u32>,
    },
    Upsample2 {
        input: ValueId,
    },
    ConcatChannels {
        parts: Vec<ValueId>,
    },
    ReduceChannelsSum {
        input: ValueId,
    },
    SelfCorrelation {
        input: ValueId,
        norms_sq: Vec<T>,
    },
    PercentilePool {
        input: ValueId,
        picks: Vec<u32>,
    },
    SoftmaxChannels {
        input: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    WeightedCrossEntropy {
        logits: ValueId,
        labels: Vec<u8>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::OneMinus { .. } => "one_minus",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::ReduceChannelsSum { .. } => "reduce_channels_sum",
            Op::SelfCorrelation { .. } => "self_correlation",
            Op::PercentilePool { .. } => "percentile_pool",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::SumAll { .. } => "sum_all",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. One forward pass per tape; `backward` may be called once.
pub struct GradTape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Gradient is tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor4<T>) -> ValueId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, id: ValueId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> Shape4 {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated for `id` by the last `backward`, `None` when the
    /// value does not influence the loss.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Result<ValueId> {
        value.ensure_finite(op.name())?;
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let in_shape = self.shape(input);
        let k_shape = self.shape(kernel);
        if k_shape.height.is_multiple_of(2) || k_shape.width.is_multiple_of(2) {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel spatial dims must be odd, got {}", k_shape),
            });
        }
        if k_shape.channels != in_shape.channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: in_shape.to_string(),
                right: k_shape.to_string(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "stride must be >= 1".into(),
            });
        }
        if in_shape.height + 2 * padding < k_shape.height
            || in_shape.width + 2 * padding < k_shape.width
        {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {} larger than padded input {}", k_shape, in_shape),
            });
        }
        if let Some(b) = bias {
            let b_shape = self.shape(b);
            if b_shape.len() != k_shape.batch {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: format!("bias {}", b_shape),
                    right: format!("kernel {}", k_shape),
                });
            }
        }
        let geom = ConvGeom::new(in_shape, k_shape, stride, padding);
        let mut out = Tensor4::zeros(geom.out_shape());
        conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let needs =
            self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        self.push_checked(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            needs,
        )
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: ValueId) -> Result<ValueId> {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::Sigmoid { input }, needs)
    }

    pub fn one_minus(&mut self, input: ValueId) -> Result<ValueId> {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = T::one() - *v;
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::OneMinus { input }, needs)
    }

    fn binary_shapes(&self, op: &'static str, lhs: ValueId, rhs: ValueId) -> Result<Shape4> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a != b {
            return Err(Error::ShapeMismatch {
                op,
                left: a.to_string(),
                right: b.to_string(),
            });
        }
        Ok(a)
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let shape = self.binary_shapes("add", lhs, rhs)?;
        let mut out = Tensor4::zeros(shape);
        for ((o, &a), &b) in out
            .data_mut()
            .iter_mut()
            .zip(self.nodes[lhs.0].value.data())
            .zip(self.nodes[rhs.0].value.data())
        {
            *o = a + b;
        }
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push_checked(out, Op::Add { lhs, rhs }, needs)
    }

    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let shape = self.binary_shapes("mul", lhs, rhs)?;
        let mut out = Tensor4::zeros(shape);
        for ((o, &a), &b) in out
            .data_mut()
            .iter_mut()
            .zip(self.nodes[lhs.0].value.data())
            .zip(self.nodes[rhs.0].value.data())
        {
            *o = a * b;
        }
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push_checked(out, Op::Mul { lhs, rhs }, needs)
    }

    /// Reverse gate: x * (1 - sigmoid(x)), recorded as three primitive ops.
    pub fn rgm(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.sigmoid(input)?;
        let om = self.one_minus(s)?;
        self.mul(input, om)
    }

    /// 2x2 max pooling, stride 2. Ties keep the first element in row-major
    /// window scan order.
    pub fn max_pool2(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return Err(Error::InvalidArgument {
                op: "max_pool2",
                reason: format!("spatial dims must be even, got {}", s),
            });
        }
        let out_shape = Shape4::new(s.batch, s.height / 2, s.width / 2, s.channels);
        let mut out = Tensor4::zeros(out_shape);
        let mut picks = vec![0u32; out_shape.len()];
        {
            let data = self.nodes[input.0].value.data();
            let o = out.data_mut();
            for b in 0..s.batch {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        for c in 0..s.channels {
                            let mut best = s.index(b, oy * 2, ox * 2, c);
                            let mut best_v = data[best];
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = s.index(b, oy * 2 + dy, ox * 2 + dx, c);
                                if data[idx] > best_v {
                                    best_v = data[idx];
                                    best = idx;
                                }
                            }
                            let oi = out_shape.index(b, oy, ox, c);
                            o[oi] = best_v;
                            picks[oi] = best as u32;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::MaxPool2 { input, picks }, needs)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        let out_shape = Shape4::new(s.batch, s.height * 2, s.width * 2, s.channels);
        let mut out = Tensor4::zeros(out_shape);
        {
            let data = self.nodes[input.0].value.data();
            let o = out.data_mut();
            for b in 0..s.batch {
                for y in 0..out_shape.height {
                    for x in 0..out_shape.width {
                        let src = s.index(b, y / 2, x / 2, 0);
                        let dst = out_shape.index(b, y, x, 0);
                        o[dst..dst + s.channels].copy_from_slice(&data[src..src + s.channels]);
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::Upsample2 { input }, needs)
    }

    /// Concatenate along the channel axis; all parts share batch and spatial
    /// dims.
    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_channels",
                reason: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first.to_string(),
                    right: s.to_string(),
                });
            }
            channels += s.channels;
        }
        let out_shape = Shape4::new(first.batch, first.height, first.width, channels);
        let mut out = Tensor4::zeros(out_shape);
        {
            let o = out.data_mut();
            let cells = first.cells();
            let mut offset = 0;
            for &p in parts {
                let s = self.nodes[p.0].value.shape().channels;
                let data = self.nodes[p.0].value.data();
                for cell in 0..cells {
                    let dst = cell * channels + offset;
                    o[dst..dst + s].copy_from_slice(&data[cell * s..(cell + 1) * s]);
                }
                offset += s;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::ConcatChannels {
            parts: parts.to_vec(),
        };
        self.push_checked(out, op, needs)
    }

    /// Sum over channels, producing a single-channel map. Accumulates in
    /// channel index order.
    pub fn reduce_channels_sum(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        let out_shape = Shape4::new(s.batch, s.height, s.width, 1);
        let mut out = Tensor4::zeros(out_shape);
        {
            let data = self.nodes[input.0].value.data();
            let o = out.data_mut();
            for (cell, ov) in o.iter_mut().enumerate() {
                let row = &data[cell * s.channels..(cell + 1) * s.channels];
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                *ov = acc;
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::ReduceChannelsSum { input }, needs)
    }

    /// All-pairs cosine similarity between spatial cells of a feature map.
    /// Output is (B, L, L, 1) with L = H*W; entry (i, j) is
    /// dot(u_i, u_j) / (sqrt(|u_i|^2 * |u_j|^2) + 1e-8) and the diagonal is
    /// forced to -1.
    pub fn self_correlation(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        let l = s.height * s.width;
        if l < 2 {
            return Err(Error::InvalidArgument {
                op: "self_correlation",
                reason: format!("need at least 2 spatial cells, got {}", s),
            });
        }
        let c = s.channels;
        let eps = T::from_f64(CORR_EPS);
        let out_shape = Shape4::new(s.batch, l, l, 1);
        let mut out = Tensor4::zeros(out_shape);
        let mut norms_sq = vec![T::zero(); s.batch * l];
        {
            let data = self.nodes[input.0].value.data();
            let o = out.data_mut();
            let mut ut = vec![T::zero(); c * l];
            let mut dots = vec![T::zero(); l * l];
            for b in 0..s.batch {
                let u = &data[b * l * c..(b + 1) * l * c];
                // Same fused accumulation as the matmul below, so dot(u_i,
                // u_i) lands bit-identical to norms_sq[i].
                for i in 0..l {
                    let mut acc = T::zero();
                    for &v in &u[i * c..(i + 1) * c] {
                        acc = v.mul_add(v, acc);
                    }
                    norms_sq[b * l + i] = acc;
                }
                for i in 0..l {
                    for k in 0..c {
                        ut[k * l + i] = u[i * c + k];
                    }
                }
                dots.fill(T::zero());
                matmul_acc(u, &ut, &mut dots, l, c, l);
                let ob = &mut o[b * l * l..(b + 1) * l * l];
                for i in 0..l {
                    let ni = norms_sq[b * l + i];
                    for j in 0..l {
                        ob[i * l + j] = if i == j {
                            -T::one()
                        } else {
                            let m = (ni * norms_sq[b * l + j]).sqrt();
                            dots[i * l + j] / (m + eps)
                        };
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::SelfCorrelation { input, norms_sq }, needs)
    }

    /// Sample each correlation row at K fixed rank positions after a stable
    /// descending sort; the diagonal sinks to the bottom and the index range
    /// round(k*(L-2)/(K-1)) never reaches it. Output is (B, out_h, out_w, K)
    /// with out_h*out_w = L.
    pub fn percentile_pool(
        &mut self,
        corr: ValueId,
        out_h: usize,
        out_w: usize,
        k: usize,
    ) -> Result<ValueId> {
        let s = self.shape(corr);
        let l = s.height;
        if s.width != l || s.channels != 1 {
            return Err(Error::InvalidArgument {
                op: "percentile_pool",
                reason: format!("expected square single-channel correlation, got {}", s),
            });
        }
        if out_h * out_w != l {
            return Err(Error::InvalidArgument {
                op: "percentile_pool",
                reason: format!("out dims {}x{} do not cover {} rows", out_h, out_w, l),
            });
        }
        if k == 0 || k > l - 1 {
            return Err(Error::InvalidArgument {
                op: "percentile_pool",
                reason: format!("K={} outside 1..={}", k, l - 1),
            });
        }
        let out_shape = Shape4::new(s.batch, out_h, out_w, k);
        let mut out = Tensor4::zeros(out_shape);
        let mut picks = vec![0u32; out_shape.len()];
        {
            let data = self.nodes[corr.0].value.data();
            let o = out.data_mut();
            let mut order: Vec<u32> = Vec::with_capacity(l);
            for b in 0..s.batch {
                for i in 0..l {
                    let row = &data[(b * l + i) * l..(b * l + i + 1) * l];
                    order.clear();
                    order.extend(0..l as u32);
                    // Stable sort keeps equal entries in column order.
                    order.sort_by(|&x, &y| {
                        row[y as usize]
                            .partial_cmp(&row[x as usize])
                            .expect("correlation entries are finite")
                    });
                    for kk in 0..k {
                        let rank = if k == 1 {
                            0
                        } else {
                            percentile_rank(kk, k, l)
                        };
                        let src = order[rank] as usize;
                        let oi = (b * l + i) * k + kk;
                        o[oi] = row[src];
                        picks[oi] = ((b * l + i) * l + src) as u32;
                    }
                }
            }
        }
        let needs = self.needs(corr);
        self.push_checked(out, Op::PercentilePool { input: corr, picks }, needs)
    }

    /// Sum of every element, as a scalar tensor. Sequential accumulation in
    /// storage order.
    pub fn sum_all(&mut self, input: ValueId) -> Result<ValueId> {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        let out = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![acc])?;
        let needs = self.needs(input);
        self.push_checked(out, Op::SumAll { input }, needs)
    }

    pub fn softmax_channels(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        if s.channels < 2 {
            return Err(Error::InvalidArgument {
                op: "softmax_channels",
                reason: format!("need >= 2 channels, got {}", s),
            });
        }
        let mut out = self.value(input).clone();
        for cell in 0..s.cells() {
            softmax_in_place(&mut out.data_mut()[cell * s.channels..(cell + 1) * s.channels]);
        }
        let needs = self.needs(input);
        self.push_checked(out, Op::SoftmaxChannels { input }, needs)
    }

    /// Weighted pixel-mean cross-entropy over per-pixel class logits:
    /// -mean(w_y * log p_y) with log p clamped at -30 (clamped pixels
    /// contribute zero gradient). `labels` is row-major over (batch, y, x).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[u8],
        weights: &[T],
    ) -> Result<ValueId> {
        let s = self.shape(logits);
        let classes = s.channels;
        if weights.len() != classes {
            return Err(Error::InvalidArgument {
                op: "weighted_cross_entropy",
                reason: format!("{} weights for {} classes", weights.len(), classes),
            });
        }
        if labels.len() != s.cells() {
            return Err(Error::ShapeMismatch {
                op: "weighted_cross_entropy",
                left: format!("{} labels", labels.len()),
                right: format!("{} pixels", s.cells()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::InvalidArgument {
                op: "weighted_cross_entropy",
                reason: format!("label {} outside 0..{}", bad, classes),
            });
        }
        let clamp = T::from_f64(LOG_CLAMP);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (cell, &label) in labels.iter().enumerate() {
            let row = &mut probs[cell * classes..(cell + 1) * classes];
            softmax_in_place(row);
            let mut log_p = row[label as usize].ln();
            if log_p < clamp {
                log_p = clamp;
            }
            total += weights[label as usize] * log_p;
        }
        let n = T::from_f64(s.cells() as f64);
        let loss = -total / n;
        let out = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![loss])?;
        let needs = self.needs(logits);
        self.push_checked(
            out,
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Smallest decision margin over every non-smooth choice recorded on the
    /// tape: ReLU distance to zero, pooling runner-up gaps, percentile
    /// neighbor gaps at the sampled ranks, and log-clamp headroom. Finite
    /// differences straddle a kink once the step times the local sensitivity
    /// exceeds this, so gradient checks should refuse points where it is
    /// tiny. Plateaus at exactly 0.0 are skipped: they come from clipped
    /// ReLUs that stay frozen under small perturbations.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut consider = |m: f64| {
            if m < margin {
                margin = m;
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[input.0].value.data() {
                        consider(v.as_f64().abs());
                    }
                }
                Op::MaxPool2 { input, .. } => {
                    let s = self.nodes[input.0].value.shape();
                    let data = self.nodes[input.0].value.data();
                    let at = |b: usize, h: usize, w: usize, c: usize| {
                        data[((b * s.height + h) * s.width + w) * s.channels + c].as_f64()
                    };
                    for b in 0..s.batch {
                        for oh in 0..s.height / 2 {
                            for ow in 0..s.width / 2 {
                                for c in 0..s.channels {
                                    let mut top1 = f64::NEG_INFINITY;
                                    let mut top2 = f64::NEG_INFINITY;
                                    for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let v = at(b, oh * 2 + dh, ow * 2 + dw, c);
                                        if v > top1 {
                                            top2 = top1;
                                            top1 = v;
                                        } else if v > top2 {
                                            top2 = v;
                                        }
                                    }
                                    if top1 == 0.0 && top2 == 0.0 {
                                        continue;
                                    }
                                    consider(top1 - top2);
                                }
                            }
                        }
                    }
                }
                Op::PercentilePool { input, .. } => {
                    let s = self.nodes[input.0].value.shape();
                    let data = self.nodes[input.0].value.data();
                    let l = s.height;
                    let k = node.value.shape().channels;
                    let mut sorted: Vec<f64> = Vec::with_capacity(l);
                    for row_idx in 0..s.batch * l {
                        sorted.clear();
                        sorted.extend(data[row_idx * l..(row_idx + 1) * l].iter().map(|v| v.as_f64()));
                        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                        for kk in 0..k {
                            let rank = if k == 1 { 0 } else { percentile_rank(kk, k, l) };
                            for nb in [rank.wrapping_sub(1), rank + 1] {
                                if nb >= l {
                                    continue;
                                }
                                let gap = (sorted[rank] - sorted[nb]).abs();
                                if gap == 0.0 && sorted[rank] == 0.0 {
                                    continue;
                                }
                                consider(gap);
                            }
                        }
                    }
                }
                Op::WeightedCrossEntropy { labels, probs, .. } => {
                    let classes = node_classes(labels.len(), probs.len());
                    for (pix, &y) in labels.iter().enumerate() {
                        let p = probs[pix * classes + y as usize].as_f64();
                        consider((p.max(f64::MIN_POSITIVE).ln() - LOG_CLAMP).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Accumulate adjoints from `loss` (which must be scalar) back to every
    /// contributing value. Leaf gradients stay readable via `grad`.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                reason: format!("loss must be scalar, got {}", self.shape(loss)),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.step_backward(idx)?;
        }
        for (idx, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[idx].op, Op::Leaf) && g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: ValueId, len: usize) -> &mut [T] {
        grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn step_backward(&mut self, idx: usize) -> Result<()> {
        // The output grad is taken (not borrowed) so input grads can be
        // accumulated without aliasing; node `idx` is finished after this.
        let g = match self.grads[idx].take() {
            Some(g) => g,
            None => return Ok(()),
        };
        let keep = matches!(self.nodes[idx].op, Op::Leaf);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_input = nodes[input.0].needs_grad;
                let want_kernel = nodes[kernel.0].needs_grad;
                let want_bias = bias.is_some_and(|b| nodes[b.0].needs_grad);
                let in_len = nodes[input.0].value.len();
                let k_len = nodes[kernel.0].value.len();
                let mut d_input = if want_input {
                    Some(vec![T::zero(); in_len])
                } else {
                    None
                };
                let mut d_kernel = if want_kernel {
                    Some(vec![T::zero(); k_len])
                } else {
                    None
                };
                let mut d_bias = if want_bias {
                    Some(vec![T::zero(); geom.kernel_shape.batch])
                } else {
                    None
                };
                conv2d_backward(
                    geom,
                    nodes[input.0].value.data(),
                    nodes[kernel.0].value.data(),
                    &g,
                    d_input.as_deref_mut(),
                    d_kernel.as_deref_mut(),
                    d_bias.as_deref_mut(),
                );
                if let Some(d) = d_input {
                    let acc = Self::accumulate(grads, *input, in_len);
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
                if let Some(d) = d_kernel {
                    let acc = Self::accumulate(grads, *kernel, k_len);
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
                if let (Some(d), Some(b)) = (d_bias, bias) {
                    let acc = Self::accumulate(grads, *b, nodes[b.0].value.len());
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
            }
            Op::Relu { input } => {
                if nodes[input.0].needs_grad {
                    let x = nodes[input.0].value.data();
                    let acc = Self::accumulate(grads, *input, x.len());
                    for i in 0..x.len() {
                        if x[i] > T::zero() {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if nodes[input.0].needs_grad {
                    let s = nodes[idx].value.data();
                    let acc = Self::accumulate(grads, *input, s.len());
                    for i in 0..s.len() {
                        acc[i] += g[i] * s[i] * (T::one() - s[i]);
                    }
                }
            }
            Op::OneMinus { input } => {
                if nodes[input.0].needs_grad {
                    let acc = Self::accumulate(grads, *input, g.len());
                    for i in 0..g.len() {
                        acc[i] -= g[i];
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for side in [lhs, rhs] {
                    if nodes[side.0].needs_grad {
                        let acc = Self::accumulate(grads, *side, g.len());
                        for i in 0..g.len() {
                            acc[i] += g[i];
                        }
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if nodes[lhs.0].needs_grad {
                    let other = nodes[rhs.0].value.data();
                    let acc = Self::accumulate(grads, *lhs, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * other[i];
                    }
                }
                if nodes[rhs.0].needs_grad {
                    let other = nodes[lhs.0].value.data();
                    let acc = Self::accumulate(grads, *rhs, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * other[i];
                    }
                }
            }
            Op::MaxPool2 { input, picks } => {
                if nodes[input.0].needs_grad {
                    let acc = Self::accumulate(grads, *input, nodes[input.0].value.len());
                    for (o, &src) in picks.iter().enumerate() {
                        acc[src as usize] += g[o];
                    }
                }
            }
            Op::Upsample2 { input } => {
                if nodes[input.0].needs_grad {
                    let s = nodes[input.0].value.shape();
                    let out_shape = nodes[idx].value.shape();
                    let acc = Self::accumulate(grads, *input, nodes[input.0].value.len());
                    for b in 0..out_shape.batch {
                        for y in 0..out_shape.height {
                            for x in 0..out_shape.width {
                                let src = s.index(b, y / 2, x / 2, 0);
                                let dst = out_shape.index(b, y, x, 0);
                                for c in 0..s.channels {
                                    acc[src + c] += g[dst + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { parts } => {
                let out_shape = nodes[idx].value.shape();
                let cells = out_shape.cells();
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.shape().channels;
                    if nodes[p.0].needs_grad {
                        let acc = Self::accumulate(grads, p, nodes[p.0].value.len());
                        for cell in 0..cells {
                            let src = cell * out_shape.channels + offset;
                            let dst = cell * pc;
                            for c in 0..pc {
                                acc[dst + c] += g[src + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ReduceChannelsSum { input } => {
                if nodes[input.0].needs_grad {
                    let s = nodes[input.0].value.shape();
                    let acc = Self::accumulate(grads, *input, nodes[input.0].value.len());
                    for cell in 0..s.cells() {
                        for c in 0..s.channels {
                            acc[cell * s.channels + c] += g[cell];
                        }
                    }
                }
            }
            Op::SelfCorrelation { input, norms_sq } => {
                if nodes[input.0].needs_grad {
                    let s = nodes[input.0].value.shape();
                    let l = s.height * s.width;
                    let c = s.channels;
                    let eps = T::from_f64(CORR_EPS);
                    let u_all = nodes[input.0].value.data();
                    let acc = Self::accumulate(grads, *input, u_all.len());
                    for b in 0..s.batch {
                        let u = &u_all[b * l * c..(b + 1) * l * c];
                        let gb = &g[b * l * l..(b + 1) * l * l];
                        let nsq = &norms_sq[b * l..(b + 1) * l];
                        let da = &mut acc[b * l * c..(b + 1) * l * c];
                        for i in 0..l {
                            for j in 0..l {
                                if i == j {
                                    continue;
                                }
                                let go = gb[i * l + j];
                                if go == T::zero() {
                                    continue;
                                }
                                let m = (nsq[i] * nsq[j]).sqrt();
                                // A zero-norm cell makes the cosine
                                // one-sidedly steep; treat its subgradient as
                                // zero rather than dividing by eps.
                                if m == T::zero() {
                                    continue;
                                }
                                let q = T::one() / (m + eps);
                                // s = dot/(m + eps) with m = sqrt(nsq_i*nsq_j):
                                // ds/du_i[k] = q*(u_j[k] - dot/(m*(m+eps)) * nsq_j * u_i[k])
                                // and symmetrically for u_j.
                                let mut dot = T::zero();
                                for k in 0..c {
                                    dot = u[i * c + k].mul_add(u[j * c + k], dot);
                                }
                                let dot_term = dot * q / m;
                                for k in 0..c {
                                    let ui = u[i * c + k];
                                    let uj = u[j * c + k];
                                    da[i * c + k] += go * q * (uj - dot_term * nsq[j] * ui);
                                    da[j * c + k] += go * q * (ui - dot_term * nsq[i] * uj);
                                }
                            }
                        }
                    }
                }
            }
            Op::PercentilePool { input, picks } => {
                if nodes[input.0].needs_grad {
                    let acc = Self::accumulate(grads, *input, nodes[input.0].value.len());
                    for (o, &src) in picks.iter().enumerate() {
                        acc[src as usize] += g[o];
                    }
                }
            }
            Op::SumAll { input } => {
                if nodes[input.0].needs_grad {
                    let acc = Self::accumulate(grads, *input, nodes[input.0].value.len());
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::SoftmaxChannels { input } => {
                if nodes[input.0].needs_grad {
                    let s = nodes[idx].value.shape();
                    let p = nodes[idx].value.data();
                    let acc = Self::accumulate(grads, *input, p.len());
                    for cell in 0..s.cells() {
                        let base = cell * s.channels;
                        let mut dot = T::zero();
                        for c in 0..s.channels {
                            dot += g[base + c] * p[base + c];
                        }
                        for c in 0..s.channels {
                            acc[base + c] += p[base + c] * (g[base + c] - dot);
                        }
                    }
                }
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if nodes[logits.0].needs_grad {
                    let s = nodes[logits.0].value.shape();
                    let classes = s.channels;
                    let go = g[0];
                    let n = T::from_f64(s.cells() as f64);
                    let clamp_p = T::from_f64(LOG_CLAMP.exp());
                    let acc = Self::accumulate(grads, *logits, probs.len());
                    for (cell, &label) in labels.iter().enumerate() {
                        let row = &probs[cell * classes..(cell + 1) * classes];
                        let y = label as usize;
                        // A clamped pixel contributes a constant to the loss.
                        if row[y] < clamp_p {
                            continue;
                        }
                        let scale = go * weights[y] / n;
                        for c in 0..classes {
                            let indicator = if c == y { T::one() } else { T::zero() };
                            acc[cell * classes + c] += scale * (row[c] - indicator);
                        }
                    }
                }
            }
        }
        if keep {
            self.grads[idx] = Some(g);
        }
        Ok(())
    }
}

/// Sorted-row sampling index for pooled channel `k` of `K` over row length
/// `l`: round(k*(l-2)/(K-1)).
fn node_classes(pixels: usize, prob_len: usize) -> usize {
    debug_assert!(pixels > 0 && prob_len.is_multiple_of(pixels));
    prob_len / pixels
}

fn percentile_rank(k: usize, total: usize, l: usize) -> usize {
    let num = k as f64 * (l - 2) as f64 / (total - 1) as f64;
    num.round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut GradTape<f64>, shape: Shape4, data: Vec<f64>) -> ValueId {
        tape.leaf(Tensor4::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn sigmoid_reference_values() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 1, 2), vec![0.0, 1.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn one_minus_sigmoid_at_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![0.0]);
        let s = tape.sigmoid(x).unwrap();
        let om = tape.one_minus(s).unwrap();
        assert_eq!(tape.value(om).data()[0], 0.5);
    }

    #[test]
    fn rgm_reference_values() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 1, 3), vec![0.0, 1.0, 20.0]);
        let y = tape.rgm(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.2689414213699951).abs() < 1e-12);
        assert!(out[2].abs() < 1e-7);
    }

    #[test]
    fn softmax_rows() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(
            &mut tape,
            Shape4::new(1, 1, 3, 3),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 1000.0, 1.0, 2.0, 3.0],
        );
        let p = tape.softmax_channels(x).unwrap();
        let out = tape.value(p).data();
        for v in &out[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(out[3].abs() < 1e-6 && out[4].abs() < 1e-6 && (out[5] - 1.0).abs() < 1e-6);
        let expect = [
            0.09003057317038046,
            0.24472847105479767,
            0.6652409557748219,
        ];
        for (got, want) in out[6..9].iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_scales_ones() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 3, 3, 1), vec![1.0; 9]);
        let k = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![2.0]);
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 4, 4, 2), vec![0.0; 32]);
        let k_even = leaf64(&mut tape, Shape4::new(1, 2, 2, 2), vec![0.0; 8]);
        assert!(tape.conv2d(x, k_even, None, 1, 0).is_err());
        let k_chan = leaf64(&mut tape, Shape4::new(1, 3, 3, 3), vec![0.0; 27]);
        assert!(tape.conv2d(x, k_chan, None, 1, 1).is_err());
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let mut tape = GradTape::<f64>::new();
        let a = leaf64(&mut tape, Shape4::new(1, 2, 2, 1), vec![0.0; 4]);
        let b = leaf64(&mut tape, Shape4::new(1, 2, 2, 2), vec![0.0; 8]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn max_pool_picks_max_and_routes_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(
            &mut tape,
            Shape4::new(1, 2, 2, 1),
            vec![1.0, 4.0, 3.0, 2.0],
        );
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        // Reduce to scalar through sum to drive backward.
        let s = tape.reduce_channels_sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_repeats_and_backward_sums() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 2, 1), vec![5.0, 7.0]);
        let y = tape.upsample2(x).unwrap();
        assert_eq!(tape.shape(y), Shape4::new(1, 2, 4, 1));
        assert_eq!(
            tape.value(y).data(),
            &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]
        );
    }

    #[test]
    fn concat_and_reduce_layouts() {
        let mut tape = GradTape::<f64>::new();
        let a = leaf64(&mut tape, Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf64(&mut tape, Shape4::new(1, 1, 2, 1), vec![9.0, 8.0]);
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let sum = tape.reduce_channels_sum(cat).unwrap();
        assert_eq!(tape.value(sum).data(), &[12.0, 15.0]);
    }

    #[test]
    #[allow(clippy::erasing_op, clippy::identity_op)] // spelled-out row*3+col
    fn self_correlation_identical_cells_hit_one_in_f32() {
        let mut tape = GradTape::<f32>::new();
        // Two cells share the exact same vector; norms are >= 0.25 so the
        // 1e-8 stabilizer rounds away.
        let x = tape.leaf(
            Tensor4::from_vec(
                Shape4::new(1, 1, 3, 2),
                vec![0.7, -0.3, 0.9, 0.4, 0.7, -0.3],
            )
            .unwrap(),
        );
        let corr = tape.self_correlation(x).unwrap();
        let out = tape.value(corr).data();
        assert_eq!(out[0 * 3 + 2], 1.0f32);
        assert_eq!(out[2 * 3 + 0], 1.0f32);
        for i in 0..3 {
            assert_eq!(out[i * 3 + i], -1.0f32);
        }
        assert!(out[0 * 3 + 1] < 1.0 && out[1 * 3 + 0] < 1.0);
    }

    #[test]
    fn self_correlation_orthogonal_cells_are_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(
            &mut tape,
            Shape4::new(1, 1, 2, 2),
            vec![1.0, 0.0, 0.0, 1.0],
        );
        let corr = tape.self_correlation(x).unwrap();
        let out = tape.value(corr).data();
        assert!(out[1].abs() < 1e-9 && out[2].abs() < 1e-9);
    }

    #[test]
    fn percentile_pool_full_row_is_sorted_row() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(
            &mut tape,
            Shape4::new(1, 2, 2, 1),
            vec![0.1, 0.9, 0.5, 0.3],
        );
        let corr = tape.self_correlation(x).unwrap();
        let l = 4;
        let pooled = tape.percentile_pool(corr, 2, 2, l - 1).unwrap();
        let corr_data = tape.value(corr).data().to_vec();
        let out = tape.value(pooled).data();
        for i in 0..l {
            let mut row: Vec<f64> = (0..l).map(|j| corr_data[i * l + j]).collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert_eq!(&out[i * (l - 1)..(i + 1) * (l - 1)], &row[0..l - 1]);
        }
    }

    #[test]
    fn percentile_pool_rejects_oversized_k() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 2, 1), vec![0.5, 0.25]);
        let corr = tape.self_correlation(x).unwrap();
        assert!(tape.percentile_pool(corr, 1, 2, 2).is_err());
        assert!(tape.percentile_pool(corr, 1, 2, 1).is_ok());
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 2, 2, 3), vec![0.0; 12]);
        let labels = [0u8, 1, 2, 0];
        let loss = tape
            .weighted_cross_entropy(x, &labels, &[1.0, 1.0, 1.0])
            .unwrap();
        assert!((tape.value(loss).data()[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_near_zero() {
        let mut tape = GradTape::<f64>::new();
        let mut logits = vec![0.0; 6];
        logits[0] = 50.0; // pixel 0 -> class 0
        logits[5] = 50.0; // pixel 1 -> class 2
        let x = leaf64(&mut tape, Shape4::new(1, 1, 2, 3), logits);
        let loss = tape
            .weighted_cross_entropy(x, &[0, 2], &[0.5, 1.0, 1.0])
            .unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = GradTape::<f64>::new();
        let x = leaf64(&mut tape, Shape4::new(1, 1, 1, 3), vec![0.0; 3]);
        assert!(tape
            .weighted_cross_entropy(x, &[3], &[1.0, 1.0, 1.0])
            .is_err());
    }

    #[test]
    fn unused_value_has_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let a = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![2.0]);
        let b = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![3.0]);
        let c = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![4.0]);
        let prod = tape.mul(a, b).unwrap();
        tape.backward(prod).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        let mut tape = GradTape::<f64>::new();
        let a = leaf64(&mut tape, Shape4::new(1, 1, 1, 1), vec![3.0]);
        let sq = tape.mul(a, a).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = GradTape::<f64>::new();
        let a = leaf64(&mut tape, Shape4::new(1, 1, 1, 2), vec![1.0, 2.0]);
        assert!(tape.backward(a).is_err());
    }
}
