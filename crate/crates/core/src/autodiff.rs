//! Scope-limited reverse-mode differentiation over real and complex
//! coefficient tensors.
//!
//! The tape covers exactly the operations the networks use; complex
//! quantities receive gradients consistent with treating (Re, Im) as
//! independent reals, stored as a complex number g = dL/dRe + i dL/dIm.
//! Parameters live in a [`ParamStore`] as flat real vectors (the true
//! degrees of freedom); ops capture the materialized values they need for
//! the backward pass, which recomputes cheap intermediates instead of
//! saving large gather buffers.

use crate::activations::{
    apply_fft_map, apply_fft_map_backward, apply_norm_map, apply_norm_map_backward, clip_l1_map,
    clip_l1_map_backward, Activation, NormInner,
};
use crate::conv2d::{
    avg_pool_backward, avg_pool_features, conv2triv, conv_backward_kernel, conv_forward_kernel,
    fourier_bn_apply, fourier_bn_batch_stats, norm_map, BnStats, ConvPlan, PoolPlan, QLayout,
};
use crate::error::{Error, Result};
use crate::fourier::FeatureMap;
use crate::scalar::Scalar;
use crate::surfel::{surfel_conv_backward_kernel, surfel_conv_kernel, SurfelPlan};
use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::Rng;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub data: Vec<T>,
}

/// Flat named parameter storage shared by the model and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.entries[id.0].data
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Gradients accumulated per parameter entry during backward.
#[derive(Debug, Clone)]
pub struct GradMap<T> {
    pub by_param: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradMap<T> {
    fn new(n: usize) -> Self {
        Self {
            by_param: vec![None; n],
        }
    }

    fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let slot = &mut self.by_param[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += *b;
                }
            }
            None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param[id.0].as_deref()
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub enum Value<T> {
    Features(FeatureMap<T>),
    Real(Array2<T>),
    Scalar(T),
}

impl<T: Scalar> Value<T> {
    pub fn features(&self) -> &FeatureMap<T> {
        match self {
            Value::Features(f) => f,
            _ => panic!("expected feature value"),
        }
    }

    pub fn real(&self) -> &Array2<T> {
        match self {
            Value::Real(r) => r,
            _ => panic!("expected real value"),
        }
    }

    pub fn scalar(&self) -> T {
        match self {
            Value::Scalar(s) => *s,
            _ => panic!("expected scalar value"),
        }
    }
}

enum Op<T: Scalar> {
    LeafFeatures {
        pid: Option<ParamId>,
    },
    LeafReal {
        pid: Option<ParamId>,
    },
    Conv2d {
        input: NodeId,
        pid: ParamId,
        plan: Arc<ConvPlan<T>>,
        layout: Arc<QLayout>,
        q_dense: Vec<Complex<T>>,
        need_input_grad: bool,
    },
    SurfelConv {
        input: NodeId,
        pid: ParamId,
        plan: Arc<SurfelPlan<T>>,
        layout: Arc<QLayout>,
        q_dense: Vec<Complex<T>>,
        need_input_grad: bool,
    },
    FourierBn {
        input: NodeId,
        pid_gamma: ParamId,
        pid_beta: ParamId,
        gamma: Vec<T>,
        stats: BnStats<T>,
        batch_mode: bool,
        eps: T,
    },
    FftActivation {
        input: NodeId,
        activation: Activation<T>,
        pad: usize,
        samples: Vec<T>,
    },
    ClipL1 {
        input: NodeId,
        cap: T,
        scales: Vec<T>,
    },
    NormActivation {
        input: NodeId,
        inner: NormInner,
        pid_bias: ParamId,
        bias: Vec<T>,
    },
    AvgPool {
        input: NodeId,
        plan: Arc<PoolPlan<T>>,
        n_in: usize,
    },
    SelectPoints {
        input: NodeId,
        keep: Arc<Vec<usize>>,
        n_in: usize,
    },
    Conv2Triv {
        input: NodeId,
    },
    NormMap {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        pid_w: ParamId,
        pid_b: ParamId,
        w: Array2<T>,
    },
    RealBn {
        input: NodeId,
        pid_gamma: ParamId,
        pid_beta: ParamId,
        gamma: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        batch_mode: bool,
        eps: T,
    },
    Pointwise {
        input: NodeId,
        activation: Activation<T>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    LogSoftmaxNll {
        input: NodeId,
        labels: Vec<usize>,
        softmax: Array2<T>,
    },
    SumSquares {
        input: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Value<T>,
    op: Op<T>,
}

/// Normalization statistics selector for batch-norm ops.
#[derive(Debug, Clone)]
pub enum BnUse<T> {
    /// compute statistics from the current batch (training mode)
    Batch,
    /// use the provided fixed statistics (evaluation / frozen mode)
    Fixed(BnStats<T>),
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    num_params: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            num_params: store.entries.len(),
        }
    }

    fn push(&mut self, value: Value<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Value<T> {
        &self.nodes[id.0].value
    }

    /// Statistics a Fourier batch-norm node actually used (harvested by the
    /// exact-statistics pass).
    pub fn fourier_bn_stats_used(&self, id: NodeId) -> Option<&BnStats<T>> {
        match &self.nodes[id.0].op {
            Op::FourierBn { stats, .. } => Some(stats),
            _ => None,
        }
    }

    /// Mean and variance a real batch-norm node used.
    pub fn real_bn_stats_used(&self, id: NodeId) -> Option<BnStats<T>> {
        match &self.nodes[id.0].op {
            Op::RealBn { mean, var, .. } => Some(BnStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            _ => None,
        }
    }

    // -- leaves --------------------------------------------------------------

    pub fn leaf_features(&mut self, f: FeatureMap<T>) -> NodeId {
        self.push(Value::Features(f), Op::LeafFeatures { pid: None })
    }

    /// Feature leaf backed by a raw parameter vector (used by gradient
    /// checks to differentiate through op inputs). Layout per signal:
    /// [z0.re, z1.re, z1.im, ..., zK.re, zK.im].
    pub fn leaf_features_param(
        &mut self,
        store: &ParamStore<T>,
        pid: ParamId,
        batch: usize,
        points: usize,
        channels: usize,
        max_freq: usize,
    ) -> NodeId {
        let raw = store.get(pid);
        let dof = 2 * max_freq + 1;
        assert_eq!(raw.len(), batch * points * channels * dof);
        let mut f = FeatureMap::zeros(batch, points, channels, max_freq);
        let kw = max_freq + 1;
        for (sig_idx, chunk) in raw.chunks_exact(dof).enumerate() {
            let off = sig_idx * kw;
            f.data_mut()[off] = Complex::new(chunk[0], T::zero());
            for k in 1..=max_freq {
                f.data_mut()[off + k] = Complex::new(chunk[2 * k - 1], chunk[2 * k]);
            }
        }
        self.push(Value::Features(f), Op::LeafFeatures { pid: Some(pid) })
    }

    pub fn leaf_real(&mut self, r: Array2<T>) -> NodeId {
        self.push(Value::Real(r), Op::LeafReal { pid: None })
    }

    pub fn leaf_real_param(
        &mut self,
        store: &ParamStore<T>,
        pid: ParamId,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        let raw = store.get(pid);
        let arr = Array2::from_shape_vec((rows, cols), raw.to_vec()).expect("shape matches");
        self.push(Value::Real(arr), Op::LeafReal { pid: Some(pid) })
    }

    // -- equivariant ops -----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        pid: ParamId,
        plan: Arc<ConvPlan<T>>,
        layout: Arc<QLayout>,
    ) -> Result<NodeId> {
        let q_dense = layout.materialize(store.get(pid));
        let out = conv_forward_kernel(&plan, &layout, &q_dense, self.value(input).features())?;
        let need_input_grad = !matches!(self.nodes[input.0].op, Op::LeafFeatures { pid: None });
        Ok(self.push(
            Value::Features(out),
            Op::Conv2d {
                input,
                pid,
                plan,
                layout,
                q_dense,
                need_input_grad,
            },
        ))
    }

    pub fn surfel_conv(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        pid: ParamId,
        plan: Arc<SurfelPlan<T>>,
        layout: Arc<QLayout>,
    ) -> Result<NodeId> {
        let q_dense = layout.materialize(store.get(pid));
        let out = surfel_conv_kernel(&plan, &layout, &q_dense, self.value(input).features())?;
        let need_input_grad = !matches!(self.nodes[input.0].op, Op::LeafFeatures { pid: None });
        Ok(self.push(
            Value::Features(out),
            Op::SurfelConv {
                input,
                pid,
                plan,
                layout,
                q_dense,
                need_input_grad,
            },
        ))
    }

    pub fn fourier_bn(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        pid_gamma: ParamId,
        pid_beta: ParamId,
        usage: BnUse<T>,
        eps: T,
    ) -> NodeId {
        let x = self.value(input).features();
        let (stats, batch_mode) = match usage {
            BnUse::Batch => (fourier_bn_batch_stats(x), true),
            BnUse::Fixed(s) => (s, false),
        };
        let gamma = store.get(pid_gamma).to_vec();
        let beta = store.get(pid_beta);
        let out = fourier_bn_apply(x, &stats, &gamma, beta, eps);
        self.push(
            Value::Features(out),
            Op::FourierBn {
                input,
                pid_gamma,
                pid_beta,
                gamma,
                stats,
                batch_mode,
                eps,
            },
        )
    }

    pub fn fft_activation(
        &mut self,
        input: NodeId,
        activation: Activation<T>,
        pad: usize,
    ) -> Result<NodeId> {
        let (out, samples) = apply_fft_map(self.value(input).features(), &activation, pad)?;
        Ok(self.push(
            Value::Features(out),
            Op::FftActivation {
                input,
                activation,
                pad,
                samples,
            },
        ))
    }

    pub fn clip_l1(&mut self, input: NodeId, cap: T) -> NodeId {
        let (out, scales) = clip_l1_map(self.value(input).features(), cap);
        self.push(Value::Features(out), Op::ClipL1 { input, cap, scales })
    }

    pub fn norm_activation(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        inner: NormInner,
        pid_bias: ParamId,
    ) -> NodeId {
        let bias = store.get(pid_bias).to_vec();
        let out = apply_norm_map(self.value(input).features(), inner, &bias);
        self.push(
            Value::Features(out),
            Op::NormActivation {
                input,
                inner,
                pid_bias,
                bias,
            },
        )
    }

    pub fn avg_pool(&mut self, input: NodeId, plan: Arc<PoolPlan<T>>) -> NodeId {
        let x = self.value(input).features();
        let n_in = x.num_points();
        let out = avg_pool_features(&plan, x);
        self.push(Value::Features(out), Op::AvgPool { input, plan, n_in })
    }

    pub fn select_points(&mut self, input: NodeId, keep: Arc<Vec<usize>>) -> NodeId {
        let x = self.value(input).features();
        let n_in = x.num_points();
        let out = x.select_points(&keep);
        self.push(Value::Features(out), Op::SelectPoints { input, keep, n_in })
    }

    pub fn conv2triv(&mut self, input: NodeId) -> NodeId {
        let out = conv2triv(self.value(input).features());
        self.push(Value::Real(out), Op::Conv2Triv { input })
    }

    pub fn norm_map(&mut self, input: NodeId) -> NodeId {
        let out = norm_map(self.value(input).features());
        self.push(Value::Real(out), Op::NormMap { input })
    }

    // -- real head ops ---------------------------------------------------------

    /// Fully connected layer y = x Wᵀ + b; W stored row-major [out × in].
    pub fn linear(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        pid_w: ParamId,
        pid_b: ParamId,
        out_features: usize,
    ) -> NodeId {
        let x = self.value(input).real();
        let in_features = x.shape()[1];
        let w = Array2::from_shape_vec((out_features, in_features), store.get(pid_w).to_vec())
            .expect("weight shape");
        let b = store.get(pid_b);
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += *bi;
            }
        }
        self.push(
            Value::Real(y),
            Op::Linear {
                input,
                pid_w,
                pid_b,
                w,
            },
        )
    }

    pub fn real_bn(
        &mut self,
        input: NodeId,
        store: &ParamStore<T>,
        pid_gamma: ParamId,
        pid_beta: ParamId,
        usage: BnUse<T>,
        eps: T,
    ) -> NodeId {
        let x = self.value(input).real();
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let m = T::from_usize(rows).unwrap();
        let (mean, var, batch_mode) = match usage {
            BnUse::Batch => {
                let mut mean = vec![T::zero(); cols];
                let mut var = vec![T::zero(); cols];
                for r in x.rows() {
                    for (c, v) in r.iter().enumerate() {
                        mean[c] += *v;
                    }
                }
                for mc in mean.iter_mut() {
                    *mc /= m;
                }
                for r in x.rows() {
                    for (c, v) in r.iter().enumerate() {
                        let d = *v - mean[c];
                        var[c] += d * d;
                    }
                }
                for vc in var.iter_mut() {
                    *vc /= m;
                }
                (mean, var, true)
            }
            BnUse::Fixed(s) => (s.mean, s.var, false),
        };
        let gamma = store.get(pid_gamma).to_vec();
        let beta = store.get(pid_beta);
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = gamma[c] * (*v - mean[c]) / (var[c] + eps).sqrt() + beta[c];
            }
        }
        self.push(
            Value::Real(y),
            Op::RealBn {
                input,
                pid_gamma,
                pid_beta,
                gamma,
                mean,
                var,
                batch_mode,
                eps,
            },
        )
    }

    pub fn pointwise(&mut self, input: NodeId, activation: Activation<T>) -> NodeId {
        let x = self.value(input).real();
        let y = x.mapv(|v| activation.eval(v));
        self.push(Value::Real(y), Op::Pointwise { input, activation })
    }

    /// Inverted dropout: keep with probability 1-p, scale kept values by
    /// 1/(1-p). p = 0 is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: T, rng: &mut R) -> NodeId {
        let x = self.value(input).real();
        let keep = T::one() - p;
        let inv = T::one() / keep;
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if p == T::zero() || T::sample_uniform(rng) < keep {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask_arr = Array2::from_shape_vec((x.shape()[0], x.shape()[1]), mask.clone()).unwrap();
        let y = x * &mask_arr;
        self.push(Value::Real(y), Op::Dropout { input, mask })
    }

    /// Mean negative log-likelihood under log-softmax.
    pub fn log_softmax_nll(&mut self, input: NodeId, labels: Vec<usize>) -> NodeId {
        let x = self.value(input).real();
        let rows = x.shape()[0];
        assert_eq!(rows, labels.len(), "one label per batch row");
        let mut softmax = x.clone();
        let mut loss = T::zero();
        for (r, mut row) in softmax.rows_mut().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let log_sum = sum.ln();
            for v in row.iter_mut() {
                *v /= sum;
            }
            let logit = x[[r, labels[r]]];
            loss -= logit - mx - log_sum;
        }
        loss /= T::from_usize(rows).unwrap();
        self.push(
            Value::Scalar(loss),
            Op::LogSoftmaxNll {
                input,
                labels,
                softmax,
            },
        )
    }

    /// Σ of squared components (real and imaginary). Test-friendly scalar
    /// loss.
    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let v = match self.value(input) {
            Value::Features(f) => f
                .data()
                .iter()
                .map(|z| z.re * z.re + z.im * z.im)
                .fold(T::zero(), |a, b| a + b),
            Value::Real(r) => r.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b),
            Value::Scalar(s) => *s * *s,
        };
        self.push(Value::Scalar(v), Op::SumSquares { input })
    }

    // -- backward --------------------------------------------------------------

    /// Reverse pass from a scalar loss node; returns parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss node not on tape".into()));
        }
        if !matches!(self.value(loss), Value::Scalar(_)) {
            return Err(Error::InvalidArgument(
                "backward starts from a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Scalar(T::one()));
        let mut out = GradMap::new(self.num_params);

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            // everything before idx is a valid input source
            let (before, after) = self.nodes.split_at_mut(idx);
            let node = &after[0];
            match &node.op {
                Op::LeafFeatures { pid } => {
                    if let Some(pid) = pid {
                        let g = grad.features();
                        let kw = g.max_freq() + 1;
                        let mut raw = Vec::with_capacity(g.num_signals() * (2 * kw - 1));
                        for sig in g.data().chunks_exact(kw) {
                            raw.push(sig[0].re);
                            for z in &sig[1..] {
                                raw.push(z.re);
                                raw.push(z.im);
                            }
                        }
                        out.accumulate(*pid, &raw);
                    }
                }
                Op::LeafReal { pid } => {
                    if let Some(pid) = pid {
                        let g = grad.real();
                        let raw: Vec<T> = g.iter().cloned().collect();
                        out.accumulate(*pid, &raw);
                    }
                }
                Op::Conv2d {
                    input,
                    pid,
                    plan,
                    layout,
                    q_dense,
                    need_input_grad,
                } => {
                    let x = before[input.0].value.features();
                    let (dx, dq_dense) = conv_backward_kernel(
                        plan,
                        layout,
                        q_dense,
                        x,
                        grad.features(),
                        *need_input_grad,
                    );
                    let mut dq_raw = vec![T::zero(); layout.raw_len];
                    layout.fold_grad(&dq_dense, &mut dq_raw);
                    out.accumulate(*pid, &dq_raw);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[input.0], Value::Features(dx));
                    }
                }
                Op::SurfelConv {
                    input,
                    pid,
                    plan,
                    layout,
                    q_dense,
                    need_input_grad,
                } => {
                    let x = before[input.0].value.features();
                    let (dx, dq_dense) = surfel_conv_backward_kernel(
                        plan,
                        layout,
                        q_dense,
                        x,
                        grad.features(),
                        *need_input_grad,
                    );
                    let mut dq_raw = vec![T::zero(); layout.raw_len];
                    layout.fold_grad(&dq_dense, &mut dq_raw);
                    out.accumulate(*pid, &dq_raw);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[input.0], Value::Features(dx));
                    }
                }
                Op::FourierBn {
                    input,
                    pid_gamma,
                    pid_beta,
                    gamma,
                    stats,
                    batch_mode,
                    eps,
                } => {
                    let x = before[input.0].value.features();
                    let g = grad.features();
                    let (dx, dgamma, dbeta) =
                        fourier_bn_backward(x, g, gamma, stats, *batch_mode, *eps);
                    out.accumulate(*pid_gamma, &dgamma);
                    out.accumulate(*pid_beta, &dbeta);
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::FftActivation {
                    input,
                    activation,
                    pad,
                    samples,
                } => {
                    let dx = apply_fft_map_backward(grad.features(), samples, activation, *pad);
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::ClipL1 { input, cap, scales } => {
                    let x = before[input.0].value.features();
                    let dx = clip_l1_map_backward(grad.features(), x, scales, *cap);
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::NormActivation {
                    input,
                    inner,
                    pid_bias,
                    bias,
                } => {
                    let x = before[input.0].value.features();
                    let (dx, dbias) = apply_norm_map_backward(grad.features(), x, *inner, bias);
                    out.accumulate(*pid_bias, &dbias);
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::AvgPool { input, plan, n_in } => {
                    let dx = avg_pool_backward(plan, *n_in, grad.features());
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::SelectPoints { input, keep, n_in } => {
                    let g = grad.features();
                    let mut dx =
                        FeatureMap::zeros(g.batch(), *n_in, g.num_channels(), g.max_freq());
                    let row = g.num_channels() * (g.max_freq() + 1);
                    for b in 0..g.batch() {
                        for (pi, &p) in keep.iter().enumerate() {
                            let src = (b * keep.len() + pi) * row;
                            let dst = (b * *n_in + p) * row;
                            dx.data_mut()[dst..dst + row]
                                .copy_from_slice(&g.data()[src..src + row]);
                        }
                    }
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::Conv2Triv { input } => {
                    let x = before[input.0].value.features();
                    let g = grad.real();
                    let (n, d) = (x.num_points(), x.num_channels());
                    let mut dx = FeatureMap::zeros(x.batch(), n, d, x.max_freq());
                    for b in 0..x.batch() {
                        for p in 0..n {
                            for c in 0..d {
                                dx.signal_mut(b, p, c)[0] =
                                    Complex::new(g[[b, p * d + c]], T::zero());
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::NormMap { input } => {
                    let x = before[input.0].value.features();
                    let g = grad.real();
                    let (n, d, k) = (x.num_points(), x.num_channels(), x.max_freq());
                    let w = k + 1;
                    let mut dx = FeatureMap::zeros(x.batch(), n, d, k);
                    for b in 0..x.batch() {
                        for p in 0..n {
                            for c in 0..d {
                                let s = x.signal(b, p, c);
                                let base = (p * d + c) * w;
                                let sig = dx.signal_mut(b, p, c);
                                sig[0] = Complex::new(g[[b, base]], T::zero());
                                for kk in 1..=k {
                                    let m = s[kk].norm();
                                    if m > T::zero() {
                                        let gv = g[[b, base + kk]];
                                        sig[kk] = Complex::new(
                                            gv * s[kk].re / m,
                                            gv * s[kk].im / m,
                                        );
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], Value::Features(dx));
                }
                Op::Linear {
                    input,
                    pid_w,
                    pid_b,
                    w,
                } => {
                    let x = before[input.0].value.real();
                    let g = grad.real();
                    let dx = g.dot(w);
                    let dw = g.t().dot(x);
                    let db: Array1<T> = g.sum_axis(ndarray::Axis(0));
                    let dw_flat: Vec<T> = dw.iter().cloned().collect();
                    out.accumulate(*pid_w, &dw_flat);
                    out.accumulate(*pid_b, db.as_slice().unwrap());
                    accumulate(&mut grads[input.0], Value::Real(dx));
                }
                Op::RealBn {
                    input,
                    pid_gamma,
                    pid_beta,
                    gamma,
                    mean,
                    var,
                    batch_mode,
                    eps,
                } => {
                    let x = before[input.0].value.real();
                    let g = grad.real();
                    let (rows, cols) = (x.shape()[0], x.shape()[1]);
                    let m = T::from_usize(rows).unwrap();
                    let mut dgamma = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    let mut dx = Array2::zeros((rows, cols));
                    for c in 0..cols {
                        let s = T::one() / (var[c] + *eps).sqrt();
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for r in 0..rows {
                            let xc = x[[r, c]] - mean[c];
                            sum_g += g[[r, c]];
                            sum_gx += g[[r, c]] * xc;
                        }
                        dgamma[c] = s * sum_gx;
                        dbeta[c] = sum_g;
                        if *batch_mode {
                            let dldv = -gamma[c] * sum_gx * s * s * s / T::of(2.0);
                            for r in 0..rows {
                                let xc = x[[r, c]] - mean[c];
                                dx[[r, c]] = gamma[c] * s * (g[[r, c]] - sum_g / m)
                                    + dldv * T::of(2.0) * xc / m;
                            }
                        } else {
                            for r in 0..rows {
                                dx[[r, c]] = gamma[c] * s * g[[r, c]];
                            }
                        }
                    }
                    out.accumulate(*pid_gamma, &dgamma);
                    out.accumulate(*pid_beta, &dbeta);
                    accumulate(&mut grads[input.0], Value::Real(dx));
                }
                Op::Pointwise { input, activation } => {
                    let x = before[input.0].value.real();
                    let g = grad.real();
                    let dx = ndarray::Zip::from(x)
                        .and(g)
                        .map_collect(|&xv, &gv| gv * activation.derivative(xv));
                    accumulate(&mut grads[input.0], Value::Real(dx));
                }
                Op::Dropout { input, mask } => {
                    let g = grad.real();
                    let mask_arr =
                        Array2::from_shape_vec((g.shape()[0], g.shape()[1]), mask.clone())
                            .unwrap();
                    let dx = g * &mask_arr;
                    accumulate(&mut grads[input.0], Value::Real(dx));
                }
                Op::LogSoftmaxNll {
                    input,
                    labels,
                    softmax,
                } => {
                    let gs = grad.scalar();
                    let rows = softmax.shape()[0];
                    let m = T::from_usize(rows).unwrap();
                    let mut dx = softmax.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row[labels[r]] -= T::one();
                        for v in row.iter_mut() {
                            *v = *v * gs / m;
                        }
                    }
                    accumulate(&mut grads[input.0], Value::Real(dx));
                }
                Op::SumSquares { input } => {
                    let gs = grad.scalar();
                    let two = T::of(2.0);
                    let dv = match &before[input.0].value {
                        Value::Features(f) => {
                            let mut d = f.clone();
                            for z in d.data_mut() {
                                *z = *z * (two * gs);
                            }
                            Value::Features(d)
                        }
                        Value::Real(r) => Value::Real(r.mapv(|v| two * gs * v)),
                        Value::Scalar(s) => Value::Scalar(two * gs * *s),
                    };
                    accumulate(&mut grads[input.0], dv);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Value<T>>, v: Value<T>) {
    match slot {
        None => *slot = Some(v),
        Some(Value::Features(a)) => {
            if let Value::Features(b) = v {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += *y;
                }
            }
        }
        Some(Value::Real(a)) => {
            if let Value::Real(b) = v {
                *a += &b;
            }
        }
        Some(Value::Scalar(a)) => {
            if let Value::Scalar(b) = v {
                *a += b;
            }
        }
    }
}

/// Backward of the Fourier batch normalization.
fn fourier_bn_backward<T: Scalar>(
    x: &FeatureMap<T>,
    g: &FeatureMap<T>,
    gamma: &[T],
    stats: &BnStats<T>,
    batch_mode: bool,
    eps: T,
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let (b_n, n, d, k) = (x.batch(), x.num_points(), x.num_channels(), x.max_freq());
    let m = T::from_usize(b_n * n).unwrap();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut sum_g0 = vec![T::zero(); d];
    // Σ over the batch of the real-paired product ⟨g, x̂⟩ per channel, where
    // x̂ is (x₀ - μ) for the mean coefficient and x_k for k ≥ 1
    let mut pair = vec![T::zero(); d];

    for b in 0..b_n {
        for p in 0..n {
            for c in 0..d {
                let xs = x.signal(b, p, c);
                let gs = g.signal(b, p, c);
                sum_g0[c] += gs[0].re;
                let mut a = gs[0].re * (xs[0].re - stats.mean[c]);
                for kk in 1..=k {
                    a += gs[kk].re * xs[kk].re + gs[kk].im * xs[kk].im;
                }
                pair[c] += a;
            }
        }
    }
    let scale: Vec<T> = (0..d)
        .map(|c| T::one() / (stats.var[c] + eps).sqrt())
        .collect();
    for c in 0..d {
        dgamma[c] = scale[c] * pair[c];
        dbeta[c] = sum_g0[c];
    }

    let mut dx = g.clone();
    if batch_mode {
        let dldv: Vec<T> = (0..d)
            .map(|c| -gamma[c] * pair[c] * scale[c] * scale[c] * scale[c] / T::of(2.0))
            .collect();
        let two = T::of(2.0);
        let four = T::of(4.0);
        for b in 0..b_n {
            for p in 0..n {
                for c in 0..d {
                    let xs = x.signal(b, p, c);
                    let gsc = gamma[c] * scale[c];
                    let sig = dx.signal_mut(b, p, c);
                    let g0 = sig[0].re;
                    sig[0] = Complex::new(
                        gsc * (g0 - sum_g0[c] / m)
                            + dldv[c] * two * (xs[0].re - stats.mean[c]) / m,
                        T::zero(),
                    );
                    for kk in 1..=k {
                        let gk = sig[kk];
                        sig[kk] = Complex::new(
                            gsc * gk.re + dldv[c] * four * xs[kk].re / m,
                            gsc * gk.im + dldv[c] * four * xs[kk].im / m,
                        );
                    }
                }
            }
        }
    } else {
        for b in 0..b_n {
            for p in 0..n {
                for c in 0..d {
                    let gsc = gamma[c] * scale[c];
                    let sig = dx.signal_mut(b, p, c);
                    sig[0] = Complex::new(gsc * sig[0].re, T::zero());
                    for kk in 1..=k {
                        sig[kk] = sig[kk] * gsc;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state; first and second moments per parameter entry.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
            v: store
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
            t: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// One Adam update over every parameter that received a gradient.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    lr: T,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    for (i, entry) in store.entries.iter_mut().enumerate() {
        let Some(g) = &grads.by_param[i] else {
            continue;
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..entry.data.len() {
            let gj = g[j];
            m[j] = state.beta1 * m[j] + (T::one() - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (T::one() - state.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            entry.data[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Per-parameter deviations between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_dev: f64,
}

impl GradCheckReport {
    pub fn max_rel_dev(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_dev).fold(0.0, f64::max)
    }
}

/// Central-difference check of `analytic` gradients at the picked parameter
/// coordinates. `loss` must be a pure function of the store.
pub fn grad_check<T: Scalar, F>(
    store: &mut ParamStore<T>,
    analytic: &GradMap<T>,
    picks: &[(ParamId, usize)],
    step: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<T>) -> T,
{
    let h = T::of(step);
    let mut entries = Vec::with_capacity(picks.len());
    for &(pid, idx) in picks {
        let orig = store.get(pid)[idx];
        store.get_mut(pid)[idx] = orig + h;
        let up = loss(store).to_f64_();
        store.get_mut(pid)[idx] = orig - h;
        let down = loss(store).to_f64_();
        store.get_mut(pid)[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get(pid).map(|g| g[idx].to_f64_()).unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs());
        let rel_dev = if denom < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        entries.push(GradCheckEntry {
            param: store.entries[pid.0].name.clone(),
            index: idx,
            analytic: a,
            numeric,
            rel_dev,
        });
    }
    GradCheckReport { entries, step }
}
