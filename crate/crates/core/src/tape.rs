//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Leaves
//! are either constants or bound to a [`Param`] in a [`ParamStore`];
//! [`Tape::backward`] walks the records in reverse and accumulates
//! `∂loss/∂param` into each bound parameter's gradient buffer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// What a parameter is, which decides whether weight decay touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
    pub kind: ParamKind,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
            kind,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, param: Param<T>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BnState<T> {
    pub fn new(features: usize, eps: f64, momentum: f64) -> Self {
        BnState {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            eps,
            momentum,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LeakyRelu(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_coupled: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    /// A scalar whose local gradients with respect to each input were
    /// computed alongside its value.
    Fused(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Ordered record of primitive applications; each node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf);
        if p.requires_grad {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    /// Flat spatial argmax indices of a [`Tape::global_max_pool`] output,
    /// one per `(sample, channel)`.
    pub fn argmax_of(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::GlobalMaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`k` vector to every row of an `n×k` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.dims2()?;
        let bv = self.value(bias);
        if bv.len() != k {
            return Err(Error::dim(format!("bias of {} for {k} columns", bv.len())));
        }
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for (o, &b) in out[i * k..(i + 1) * k].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x · w + b`, the fully connected layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "cannot multiply shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).leaky_relu(slope);
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// 2-D convolution of `x: N×C×H×W` with `w: O×C×kh×kw`, zero padding
    /// `kh/2` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::dim(format!("conv weight expects {wc} channels, input has {c}")));
        }
        if self.value(b).len() != o {
            return Err(Error::dim(format!("conv bias of {} for {o} filters", self.value(b).len())));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv stride must be positive".into()));
        }
        let pad = kh / 2;
        let geo = ConvGeometry::new(c, h, wd, kh, kw, stride, pad)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let img_in = c * h * wd;
        let img_out = o * ho * wo;
        let mut out = vec![T::zero(); n * img_out];
        let mut cols = vec![T::zero(); geo.col_rows() * ho * wo];
        for img in 0..n {
            geo.im2col(&xv[img * img_in..(img + 1) * img_in], &mut cols);
            let dst = &mut out[img * img_out..(img + 1) * img_out];
            for (f, &bias) in bv.iter().enumerate() {
                dst[f * ho * wo..(f + 1) * ho * wo].iter_mut().for_each(|v| *v = bias);
            }
            gemm_nn(o, geo.col_rows(), ho * wo, wv, &cols, dst);
        }
        let out = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Per-channel spatial maximum: `N×C×H×W → N×C`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in xv.chunks_exact(hw) {
            let (i, v) = crate::tensor::argmax_slice(plane);
            out.push(v);
            argmax.push(i);
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }))
    }

    /// Batch normalization of `x: B×D`.
    ///
    /// Train mode normalizes with the batch mean and biased variance; when
    /// `update_running` is set it also folds the batch statistics into
    /// `state` with the configured momentum. Eval mode uses `state` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
        update_running: bool,
    ) -> Result<Var> {
        let (bsz, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!("batch norm affine params do not match {d} features")));
        }
        if state.running_mean.len() != d {
            return Err(Error::dim(format!(
                "batch norm state has {} features, input has {d}",
                state.running_mean.len()
            )));
        }
        let eps = lit::<T>(state.eps);
        let xv = self.value(x).data();
        let (mean, var, coupled) = match mode {
            Mode::Train => {
                if bsz < 2 {
                    return Err(Error::Batch(format!(
                        "batch norm in train mode needs at least 2 samples, got {bsz}"
                    )));
                }
                let bf = lit::<T>(bsz as f64);
                let mut mean = vec![T::zero(); d];
                for row in xv.chunks_exact(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / bf);
                let mut var = vec![T::zero(); d];
                for row in xv.chunks_exact(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / bf);
                (mean, var, true)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); bsz * d];
        let mut out = vec![T::zero(); bsz * d];
        for i in 0..bsz {
            for j in 0..d {
                let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + bt[j];
            }
        }
        if mode == Mode::Train && update_running {
            let mom = lit::<T>(state.momentum);
            let unbias = lit::<T>(bsz as f64 / (bsz as f64 - 1.0));
            for j in 0..d {
                state.running_mean[j] = (T::one() - mom) * state.running_mean[j] + mom * mean[j];
                state.running_var[j] =
                    (T::one() - mom) * state.running_var[j] + mom * var[j] * unbias;
            }
        }
        let out = Tensor::new(vec![bsz, d], out)?;
        let xhat = Tensor::new(vec![bsz, d], xhat)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_coupled: coupled,
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` so eval mode
    /// is the identity. Rate zero and eval mode return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = lit::<T>(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Records a scalar whose gradient with respect to each input is already
    /// known; used by the fused loss and MMD kernels.
    pub(crate) fn fused_scalar(&mut self, value: T, parts: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &parts {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Contract(format!(
                    "local gradient shape {:?} does not match input {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused(parts)))
    }

    /// Propagates `∂loss/∂·` through the tape, accumulating into every bound
    /// parameter's gradient. Consumes the tape; returns the per-node
    /// gradients for inspection.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                let p = store.get_mut(pid);
                if p.grad.shape() != g.shape() {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} for param {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.grad.shape()
                    )));
                }
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                let mut ga = vec![T::zero(); m * k];
                gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                let mut gb = vec![T::zero(); k * n];
                gemm_tn(k, m, n, av.data(), g.data(), &mut gb);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
            }
            Op::AddRow(x, bias) => {
                let (_, k) = g.dims2()?;
                let mut gb = vec![T::zero(); k];
                for row in g.data().chunks_exact(k) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                let shape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::new(shape, gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), gb)?);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4()?;
                let (o, _, kh, kw) = wv.dims4()?;
                let geo = ConvGeometry::new(c, h, wd, kh, kw, *stride, *pad)?;
                let howo = geo.ho * geo.wo;
                let rows = geo.col_rows();
                let img_in = c * h * wd;
                let img_out = o * howo;
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gb = vec![T::zero(); o];
                let mut cols = vec![T::zero(); rows * howo];
                let mut gcols = vec![T::zero(); rows * howo];
                for img in 0..n {
                    let gout = &g.data()[img * img_out..(img + 1) * img_out];
                    for f in 0..o {
                        gb[f] += gout[f * howo..(f + 1) * howo].iter().copied().sum::<T>();
                    }
                    geo.im2col(&xv.data()[img * img_in..(img + 1) * img_in], &mut cols);
                    gemm_nt(o, howo, rows, gout, &cols, &mut gw);
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(rows, o, howo, wv.data(), gout, &mut gcols);
                    geo.col2im_add(&gcols, &mut gx[img * img_in..(img + 1) * img_in]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let hw = h * w;
                let mut gx = vec![T::zero(); xv.len()];
                for (plane, (&am, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    gx[plane * hw + am] += gv;
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_coupled,
            } => {
                let (bsz, d) = xhat.dims2()?;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let xh = xhat.data();
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for i in 0..bsz {
                    for j in 0..d {
                        ggamma[j] += gd[i * d + j] * xh[i * d + j];
                        gbeta[j] += gd[i * d + j];
                    }
                }
                let mut gx = vec![T::zero(); bsz * d];
                if *batch_coupled {
                    let bf = lit::<T>(bsz as f64);
                    for j in 0..d {
                        // with dxhat = g·γ: sum(dxhat) = γ·Σg, sum(dxhat·xhat) = γ·Σ g·xhat
                        let s1 = gam[j] * gbeta[j];
                        let s2 = gam[j] * ggamma[j];
                        let scale = inv_std[j] / bf;
                        for i in 0..bsz {
                            let dxh = gd[i * d + j] * gam[j];
                            gx[i * d + j] = scale * (bf * dxh - s1 - xh[i * d + j] * s2);
                        }
                    }
                } else {
                    for i in 0..bsz {
                        for j in 0..d {
                            gx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![bsz, d], gx)?);
                let gshape = self.value(*gamma).shape().to_vec();
                accumulate(grads, *gamma, Tensor::new(gshape.clone(), ggamma)?);
                accumulate(grads, *beta, Tensor::new(gshape, gbeta)?);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Fused(parts) => {
                let up = g.item();
                for (v, local) in parts {
                    accumulate(grads, *v, local.scale(up));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-node gradients left behind by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `∂loss/∂v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Index bookkeeping for im2col-style convolution of one image.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!("{h}×{w} input too small for a {kh}×{kw} kernel")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source pixel for output position `(oy, ox)` and tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let howo = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, x)) => img[(ch * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let howo = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * howo..(row + 1) * howo];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.src(oy, ox, ky, kx) {
                                img[(ch * self.h + y) * self.w + x] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
