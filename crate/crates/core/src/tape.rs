//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! node owns its output tensor. [`Tape::backward`] walks the list in reverse,
//! applying each operator's vector-Jacobian product and accumulating
//! gradients per node, so a value consumed by several downstream ops (the
//! shared fully connected head, for instance) receives the sum of its path
//! gradients. Leaves registered from a [`ParamSet`] remember their parameter
//! id; [`Tape::grads_into_params`] copies their totals back.
//!
//! The operator set is exactly what the depth-map regression networks need:
//! conv2d, batchnorm, relu, global average pooling, fully connected, channel
//! concat/slice, broadcast multiply, sigmoid, softmax cross-entropy, mse,
//! plus add/scale/reshape glue for residual connections and loss weighting.
//! One tape is single-owner and single-use: it is consumed by the step that
//! recorded it, and a second backward call is an error.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::optim::ParamSet;
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;

pub type VarId = usize;

/// Forward mode for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with externally supplied running statistics.
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batchnorm, for the
/// caller to fold into its running estimates.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: VarId,
    },
    Gap {
        x: VarId,
    },
    Fc {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    ConcatCh {
        a: VarId,
        b: VarId,
    },
    SliceCh {
        x: VarId,
        from: usize,
        to: usize,
    },
    MulBroadcast {
        features: VarId,
        map: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    SoftmaxCe {
        logits: VarId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: VarId,
        target: Vec<T>,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: T,
    },
    Reshape {
        x: VarId,
    },
    Sum {
        x: VarId,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, VarId>,
    spent: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel-axis view of a 2-d or 4-d tensor: (n, c, spatial).
fn ch_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, c] => Some((n, c, 1)),
        [n, c, h, w] => Some((n, c, h * w)),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            spent: false,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> VarId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        id
    }

    /// Register a constant/input leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, value)
    }

    /// Register a parameter leaf. Repeated registration of the same entry
    /// returns the same variable, so shared layers accumulate naturally.
    pub fn param(&mut self, params: &ParamSet<T>, id: usize) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, params.get(id).value.clone());
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // -- operators ---------------------------------------------------------

    /// 2-d convolution with zero padding.
    /// input N×C×H×W, weight K×C×kh×kw, bias K.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (n, c, h, wd) = self.nodes[x].value.dims4()?;
        let (k, wc, kh, kw) = self.nodes[w].value.dims4()?;
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d input/weight channels",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [k] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![k],
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let (ho, wo) = (geom.h_out, geom.w_out);
        let rows = geom.rows();
        let spatial = geom.cols();

        let mut out = vec![T::ZERO; n * k * ho * wo];
        let mut cols = vec![T::ZERO; rows * spatial];
        {
            let xv = self.nodes[x].value.values();
            let wv = self.nodes[w].value.values();
            let bv = self.nodes[b].value.values();
            for s in 0..n {
                cols.iter_mut().for_each(|v| *v = T::ZERO);
                ops::im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
                let y = &mut out[s * k * spatial..(s + 1) * k * spatial];
                ops::matmul(wv, &cols, y, k, rows, spatial);
                for kk in 0..k {
                    let bias = bv[kk];
                    for v in &mut y[kk * spatial..(kk + 1) * spatial] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// Train mode computes batch statistics (biased variance) and returns
    /// them so the caller can update its running estimates; eval mode
    /// normalizes with the provided running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(VarId, Option<BnBatchStats<T>>)> {
        let (n, c, h, w) = self.nodes[x].value.dims4()?;
        for (name, g) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(g) != [c] {
                return Err(Error::ShapeMismatch {
                    op: match name {
                        "gamma" => "batchnorm gamma",
                        _ => "batchnorm beta",
                    },
                    lhs: self.shape(g).to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let spatial = h * w;
        let reduce = n * spatial;
        let eps_t = T::from_f64(eps);

        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                let xv = self.nodes[x].value.values();
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut s = T::ZERO;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            s += v;
                        }
                    }
                    mean[ch] = s * recip(T::from_f64(reduce as f64));
                    let m = mean[ch];
                    let mut q = T::ZERO;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            let d = v - m;
                            q += d * d;
                        }
                    }
                    var[ch] = q * recip(T::from_f64(reduce as f64));
                }
                (mean, var, true)
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::InvalidArgument(
                        "batchnorm eval mode requires initialized running statistics".into(),
                    )
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batchnorm running stats",
                        lhs: vec![rm.len(), rv.len()],
                        rhs: vec![c, c],
                    });
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| recip((v + eps_t).sqrt())).collect();
        let mut out = vec![T::ZERO; n * c * spatial];
        {
            let xv = self.nodes[x].value.values();
            let gv = self.nodes[gamma].value.values();
            let bv = self.nodes[beta].value.values();
            for s_i in 0..n {
                for ch in 0..c {
                    let base = (s_i * c + ch) * spatial;
                    let (m, is, g, bt) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                    for (o, &v) in out[base..base + spatial].iter_mut().zip(&xv[base..base + spatial]) {
                        *o = (v - m) * is * g + bt;
                    }
                }
            }
        }
        let stats = if batch_stats {
            Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            })
        } else {
            None
        };
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            value,
        );
        Ok((id, stats))
    }

    /// Elementwise max(0, x). The subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x]
                .value
                .values()
                .iter()
                .map(|&v| v.max(T::ZERO))
                .collect(),
        )
        .expect("same shape");
        self.push(Op::Relu { x }, value)
    }

    /// Global average pooling: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.nodes[x].value.dims4()?;
        let spatial = h * w;
        let inv = recip(T::from_f64(spatial as f64));
        let xv = self.nodes[x].value.values();
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n * c {
            let mut s = T::ZERO;
            for &v in &xv[i * spatial..(i + 1) * spatial] {
                s += v;
            }
            out[i] = s * inv;
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(Op::Gap { x }, value))
    }

    /// Affine map x·W + b: input N×D, weight D×M, bias M.
    pub fn fully_connected(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (n, d) = self.nodes[x].value.dims2()?;
        let (wd, m) = self.nodes[w].value.dims2()?;
        if wd != d {
            return Err(Error::ShapeMismatch {
                op: "fully_connected input/weight",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [m] {
            return Err(Error::ShapeMismatch {
                op: "fully_connected bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![m],
            });
        }
        let mut out = vec![T::ZERO; n * m];
        ops::matmul(
            self.nodes[x].value.values(),
            self.nodes[w].value.values(),
            &mut out,
            n,
            d,
            m,
        );
        let bv = self.nodes[b].value.values();
        for row in out.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Fc { x, w, b }, value))
    }

    /// Stack two tensors along the channel axis.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (na, ca, sa) = ch_view(self.shape(a)).ok_or_else(|| {
            Error::InvalidArgument(format!("concat_channels on shape {:?}", self.shape(a)))
        })?;
        let (nb, cb, sb) = ch_view(self.shape(b)).ok_or_else(|| {
            Error::InvalidArgument(format!("concat_channels on shape {:?}", self.shape(b)))
        })?;
        if na != nb || sa != sb || self.shape(a).len() != self.shape(b).len() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut shape = self.shape(a).to_vec();
        shape[1] = ca + cb;
        let mut out = vec![T::ZERO; na * (ca + cb) * sa];
        {
            let av = self.nodes[a].value.values();
            let bv = self.nodes[b].value.values();
            for i in 0..na {
                let dst = &mut out[i * (ca + cb) * sa..(i + 1) * (ca + cb) * sa];
                dst[..ca * sa].copy_from_slice(&av[i * ca * sa..(i + 1) * ca * sa]);
                dst[ca * sa..].copy_from_slice(&bv[i * cb * sa..(i + 1) * cb * sa]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::ConcatCh { a, b }, value))
    }

    /// Take channels `from..to`.
    pub fn slice_channels(&mut self, x: VarId, from: usize, to: usize) -> Result<VarId> {
        let (n, c, s) = ch_view(self.shape(x)).ok_or_else(|| {
            Error::InvalidArgument(format!("slice_channels on shape {:?}", self.shape(x)))
        })?;
        if from >= to || to > c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels {from}..{to} out of range for {c} channels"
            )));
        }
        let cw = to - from;
        let mut shape = self.shape(x).to_vec();
        shape[1] = cw;
        let mut out = vec![T::ZERO; n * cw * s];
        {
            let xv = self.nodes[x].value.values();
            for i in 0..n {
                out[i * cw * s..(i + 1) * cw * s]
                    .copy_from_slice(&xv[(i * c + from) * s..(i * c + to) * s]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SliceCh { x, from, to }, value))
    }

    /// Multiply every channel of `features` by the single-channel `map`.
    pub fn mul_broadcast(&mut self, features: VarId, map: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.nodes[features].value.dims4()?;
        let (mn, mc, mh, mw) = self.nodes[map].value.dims4()?;
        if mn != n || mc != 1 || mh != h || mw != w {
            return Err(Error::ShapeMismatch {
                op: "mul_broadcast",
                lhs: self.shape(features).to_vec(),
                rhs: self.shape(map).to_vec(),
            });
        }
        let spatial = h * w;
        let fv = self.nodes[features].value.values();
        let mv = self.nodes[map].value.values();
        let mut out = vec![T::ZERO; n * c * spatial];
        for s_i in 0..n {
            let m_s = &mv[s_i * spatial..(s_i + 1) * spatial];
            for ch in 0..c {
                let base = (s_i * c + ch) * spatial;
                for ((o, &f), &m) in out[base..base + spatial]
                    .iter_mut()
                    .zip(&fv[base..base + spatial])
                    .zip(m_s)
                {
                    *o = f * m;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(Op::MulBroadcast { features, map }, value))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x]
                .value
                .values()
                .iter()
                .map(|&v| recip(T::ONE + (-v).exp()))
                .collect(),
        )
        .expect("same shape");
        self.push(Op::Sigmoid { x }, value)
    }

    /// Mean over the batch of −log softmax(logits)[target], stabilized by
    /// max subtraction. Logits N×K, one class index per row.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let (n, k) = self.nodes[logits].value.dims2()?;
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy needs K >= 2 classes, got {k}"
            )));
        }
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy targets",
                lhs: vec![targets.len()],
                rhs: vec![n],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range 0..{k}"
            )));
        }
        let lv = self.nodes[logits].value.values();
        let mut probs = vec![T::ZERO; n * k];
        let mut loss = T::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut denom = T::ZERO;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                denom += *p;
            }
            let inv = recip(denom);
            for p in &mut probs[i * k..(i + 1) * k] {
                *p *= inv;
            }
            loss += -(probs[i * k + t].ln());
        }
        loss *= recip(T::from_f64(n as f64));
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Mean squared error between flat `pred` and `target` of equal length.
    pub fn mse_loss(&mut self, pred: VarId, target: &Tensor<T>) -> Result<VarId> {
        let pv = self.nodes[pred].value.values();
        if pv.len() != target.numel() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let mut s = T::ZERO;
        for (&p, &t) in pv.iter().zip(target.values()) {
            let d = p - t;
            s += d * d;
        }
        s *= recip(T::from_f64(pv.len() as f64));
        let value = Tensor::scalar(s);
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.values().to_vec(),
            },
            value,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self.nodes[a]
            .value
            .values()
            .iter()
            .zip(self.nodes[b].value.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: VarId, factor: T) -> VarId {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x].value.values().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        self.push(Op::Scale { x, factor }, value)
    }

    /// View the same values under a different shape.
    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Sum all entries to a scalar (loss-side glue; gradient is all ones).
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut total = T::ZERO;
        for &v in self.nodes[x].value.values() {
            total += v;
        }
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients become available through
    /// [`Tape::grad`]; call [`Tape::grads_into_params`] to push parameter
    /// gradients back into their entries. A tape can only run backward once.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.spent {
            return Err(Error::Autodiff(
                "backward already ran on this tape; higher-order derivatives are unsupported"
                    .into(),
            ));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.spent = true;
        self.nodes[loss].grad = Some(vec![T::ONE]);

        for id in (0..=loss).rev() {
            let dy = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(id, &dy);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: VarId, delta: &[T]) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&mut self, id: VarId, dy: &[T]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let (n, c, h, wd) = self.nodes[x].value.dims4().expect("recorded");
                let k = self.nodes[w].value.shape()[0];
                let rows = geom.rows();
                let spatial = geom.cols();
                let xv = self.nodes[x].value.values();
                let wv = self.nodes[w].value.values();

                let mut dx = vec![T::ZERO; n * c * h * wd];
                let mut dw = vec![T::ZERO; k * rows];
                let mut db = vec![T::ZERO; k];
                let mut cols_t = vec![T::ZERO; spatial * rows];
                let mut dcols = vec![T::ZERO; rows * spatial];
                for s in 0..n {
                    let dy_s = &dy[s * k * spatial..(s + 1) * k * spatial];
                    cols_t.iter_mut().for_each(|v| *v = T::ZERO);
                    ops::im2col_t(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols_t);
                    ops::matmul(dy_s, &cols_t, &mut dw, k, spatial, rows);
                    dcols.iter_mut().for_each(|v| *v = T::ZERO);
                    ops::matmul_tn(wv, dy_s, &mut dcols, rows, k, spatial);
                    ops::col2im(&dcols, &geom, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                    for kk in 0..k {
                        let mut s_b = T::ZERO;
                        for &v in &dy_s[kk * spatial..(kk + 1) * spatial] {
                            s_b += v;
                        }
                        db[kk] += s_b;
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std, batch_stats) = (mean.clone(), inv_std.clone(), *batch_stats);
                let (n, c, h, w) = self.nodes[x].value.dims4().expect("recorded");
                let spatial = h * w;
                let reduce = T::from_f64((n * spatial) as f64);
                let xv = self.nodes[x].value.values();
                let gv = self.nodes[gamma].value.values();

                let mut dx = vec![T::ZERO; n * c * spatial];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    let (m, is, g) = (mean[ch], inv_std[ch], gv[ch]);
                    let mut sum_dy = T::ZERO;
                    let mut sum_dy_xhat = T::ZERO;
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * spatial;
                        for (&d, &v) in dy[base..base + spatial].iter().zip(&xv[base..base + spatial]) {
                            sum_dy += d;
                            sum_dy_xhat += d * (v - m) * is;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    if batch_stats {
                        let mean_dy = sum_dy * recip(reduce);
                        let mean_dy_xhat = sum_dy_xhat * recip(reduce);
                        for s_i in 0..n {
                            let base = (s_i * c + ch) * spatial;
                            for (o, (&d, &v)) in dx[base..base + spatial]
                                .iter_mut()
                                .zip(dy[base..base + spatial].iter().zip(&xv[base..base + spatial]))
                            {
                                let xhat = (v - m) * is;
                                *o = g * is * (d - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    } else {
                        let f = g * is;
                        for s_i in 0..n {
                            let base = (s_i * c + ch) * spatial;
                            for (o, &d) in dx[base..base + spatial].iter_mut().zip(&dy[base..base + spatial]) {
                                *o = d * f;
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<T> = self.nodes[x]
                    .value
                    .values()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::ZERO { d } else { T::ZERO })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Gap { x } => {
                let x = *x;
                let (n, c, h, w) = self.nodes[x].value.dims4().expect("recorded");
                let spatial = h * w;
                let inv = recip(T::from_f64(spatial as f64));
                let mut dx = vec![T::ZERO; n * c * spatial];
                for i in 0..n * c {
                    let g = dy[i] * inv;
                    for o in &mut dx[i * spatial..(i + 1) * spatial] {
                        *o = g;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Fc { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, d) = self.nodes[x].value.dims2().expect("recorded");
                let m = self.nodes[w].value.shape()[1];
                let mut dx = vec![T::ZERO; n * d];
                let mut dw = vec![T::ZERO; d * m];
                let mut db = vec![T::ZERO; m];
                ops::matmul_nt(dy, self.nodes[w].value.values(), &mut dx, n, m, d);
                ops::matmul_tn(self.nodes[x].value.values(), dy, &mut dw, d, n, m);
                for row in dy.chunks(m) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::ConcatCh { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, s) = ch_view(self.nodes[a].value.shape()).expect("recorded");
                let (_, cb, _) = ch_view(self.nodes[b].value.shape()).expect("recorded");
                let mut da = vec![T::ZERO; n * ca * s];
                let mut dbv = vec![T::ZERO; n * cb * s];
                for i in 0..n {
                    let src = &dy[i * (ca + cb) * s..(i + 1) * (ca + cb) * s];
                    da[i * ca * s..(i + 1) * ca * s].copy_from_slice(&src[..ca * s]);
                    dbv[i * cb * s..(i + 1) * cb * s].copy_from_slice(&src[ca * s..]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &dbv);
            }
            Op::SliceCh { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let (n, c, s) = ch_view(self.nodes[x].value.shape()).expect("recorded");
                let cw = to - from;
                let mut dx = vec![T::ZERO; n * c * s];
                for i in 0..n {
                    dx[(i * c + from) * s..(i * c + to) * s]
                        .copy_from_slice(&dy[i * cw * s..(i + 1) * cw * s]);
                }
                self.add_grad(x, &dx);
            }
            Op::MulBroadcast { features, map } => {
                let (features, map) = (*features, *map);
                let (n, c, h, w) = self.nodes[features].value.dims4().expect("recorded");
                let spatial = h * w;
                let fv = self.nodes[features].value.values();
                let mv = self.nodes[map].value.values();
                let mut df = vec![T::ZERO; n * c * spatial];
                let mut dm = vec![T::ZERO; n * spatial];
                for s_i in 0..n {
                    let m_s = &mv[s_i * spatial..(s_i + 1) * spatial];
                    for ch in 0..c {
                        let base = (s_i * c + ch) * spatial;
                        for p in 0..spatial {
                            df[base + p] = dy[base + p] * m_s[p];
                            dm[s_i * spatial + p] += dy[base + p] * fv[base + p];
                        }
                    }
                }
                self.add_grad(features, &df);
                self.add_grad(map, &dm);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let dx: Vec<T> = self.nodes[id]
                    .value
                    .values()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| d * y * (T::ONE - y))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let n = targets.len();
                let k = probs.len() / n;
                let scale = dy[0] * recip(T::from_f64(n as f64));
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * k + t] -= T::ONE;
                }
                for v in &mut dl {
                    *v *= scale;
                }
                self.add_grad(logits, &dl);
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let n = target.len();
                let scale = dy[0] * T::from_f64(2.0) * recip(T::from_f64(n as f64));
                let dx: Vec<T> = self.nodes[pred]
                    .value
                    .values()
                    .iter()
                    .zip(&target)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                self.add_grad(pred, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let dya = dy.to_vec();
                self.add_grad(a, &dya);
                self.add_grad(b, &dya);
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let dx: Vec<T> = dy.iter().map(|&d| d * factor).collect();
                self.add_grad(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                let dx = dy.to_vec();
                self.add_grad(x, &dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = vec![dy[0]; self.nodes[x].value.numel()];
                self.add_grad(x, &dx);
            }
        }
    }

    /// Copy accumulated leaf gradients back into their parameter entries.
    pub fn grads_into_params(&self, params: &mut ParamSet<T>) {
        for (&pid, &vid) in &self.param_vars {
            if let Some(g) = self.nodes[vid].grad.as_deref() {
                params.get_mut(pid).value.accumulate_grad(g);
            }
        }
    }
}

#[inline(always)]
fn recip<T: Real>(x: T) -> T {
    T::ONE / x
}
