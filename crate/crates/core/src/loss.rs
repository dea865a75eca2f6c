//! Identity, attribute, and alignment losses and their weighted total.
//!
//! Each loss has a plain form over tensors and a tape form that records it
//! as a single fused node. Both share one kernel, so the value seen during
//! training is bit-identical to the value reported by the plain form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{mmd2_with_grad, FeatureBatch, KernelSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    /// Supervised terms only; the alignment terms are switched off.
    pub fn source_only(self) -> Self {
        LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// The four loss components, in the working precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<T> {
    pub l_id: T,
    pub l_attr: T,
    pub l_aal: T,
    pub l_mdal: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_id: f64,
    pub l_attr: f64,
    pub l_aal: f64,
    pub l_mdal: f64,
    pub l_all: f64,
}

impl LossReport {
    pub fn new<T: Real>(step: u64, c: LossComponents<T>, l_all: T) -> Self {
        LossReport {
            step,
            l_id: c.l_id.as_f64(),
            l_attr: c.l_attr.as_f64(),
            l_aal: c.l_aal.as_f64(),
            l_mdal: c.l_mdal.as_f64(),
            l_all: l_all.as_f64(),
        }
    }
}

/// `l_id + λ1·l_attr + λ2·l_aal + λ3·l_mdal`, evaluated left to right.
pub fn total_loss<T: Real>(c: LossComponents<T>, w: &LossWeights) -> Result<T> {
    for (name, v) in [
        ("l_id", c.l_id),
        ("l_attr", c.l_attr),
        ("l_aal", c.l_aal),
        ("l_mdal", c.l_mdal),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    w.validate()?;
    Ok(c.l_id + lit::<T>(w.lambda1) * c.l_attr + lit::<T>(w.lambda2) * c.l_aal
        + lit::<T>(w.lambda3) * c.l_mdal)
}

/// Mean softmax cross entropy and its gradient with respect to the logits.
pub(crate) fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label(format!("identity label {bad} outside [0, {k})")));
    }
    let nf = lit::<T>(n as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &z in row {
            denom += (z - m).exp();
        }
        let lse = m + denom.ln();
        total += lse - row[y];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - m).exp() / denom / nf;
        }
        g[y] -= T::one() / nf;
    }
    Ok((total / nf, Tensor::new(vec![n, k], grad)?))
}

/// Stable binary cross entropy on logits: `max(z,0) − z·a + ln(1+e^{−|z|})`.
#[inline]
fn bce_term<T: Real>(z: T, a: T) -> (T, T) {
    let loss = z.max(T::zero()) - z * a + (-z.abs()).exp().ln_1p();
    let sig = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    (loss, sig - a)
}

fn check_binary<T: Real>(attrs: &Tensor<T>) -> Result<()> {
    if let Some(v) = attrs.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Label(format!("attribute value {v} is not binary")));
    }
    Ok(())
}

/// Mean over attributes and samples of the sigmoid cross entropy, with the
/// gradient for each attribute's logits.
pub(crate) fn attribute_xent<T: Real>(
    logits: &[&Tensor<T>],
    attrs: &Tensor<T>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let (n, m) = attrs.dims2()?;
    if logits.len() != m {
        return Err(Error::Schema(format!(
            "{} attribute heads for {m} attribute columns",
            logits.len()
        )));
    }
    if m == 0 {
        return Err(Error::Schema("no attributes".into()));
    }
    check_binary(attrs)?;
    let scale = T::one() / (lit::<T>(m as f64) * lit::<T>(n as f64));
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(m);
    for (j, z) in logits.iter().enumerate() {
        let (rows, d) = z.dims2()?;
        if rows != n {
            return Err(Error::dim(format!("attribute head {j} has {rows} rows for {n} samples")));
        }
        if d != 1 {
            return Err(Error::dim(format!(
                "attribute head {j} emits {d} logits; the sigmoid loss needs one per attribute"
            )));
        }
        let mut g = vec![T::zero(); n];
        for i in 0..n {
            let (l, dl) = bce_term(z.data()[i], attrs.data()[i * m + j]);
            total += l;
            g[i] = dl * scale;
        }
        grads.push(Tensor::new(vec![n, 1], g)?);
    }
    Ok((total * scale, grads))
}

/// Mean biased MMD² over attributes, with gradients for both sides.
#[allow(clippy::type_complexity)]
pub(crate) fn aal_with_grad<T: Real>(
    source: &[&Tensor<T>],
    target: &[&Tensor<T>],
    spec: &KernelSpec,
) -> Result<(T, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    if source.len() != target.len() {
        return Err(Error::Schema(format!(
            "{} source attribute features vs {} target",
            source.len(),
            target.len()
        )));
    }
    if source.is_empty() {
        return Err(Error::Schema("no attribute features".into()));
    }
    let inv_m = T::one() / lit::<T>(source.len() as f64);
    let mut total = T::zero();
    let mut gs = Vec::with_capacity(source.len());
    let mut gt = Vec::with_capacity(source.len());
    for (s, t) in source.iter().zip(target) {
        let (v, gx, gy) = mmd2_with_grad(s, t, spec, true)?;
        total += v;
        gs.push(gx.scale(inv_m));
        gt.push(gy.scale(inv_m));
    }
    Ok((total * inv_m, gs, gt))
}

pub fn identity_loss<T: Real>(id_logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(softmax_xent(id_logits, labels)?.0)
}

pub fn attribute_loss<T: Real>(attr_logits: &[Tensor<T>], attrs: &Tensor<T>) -> Result<T> {
    let refs: Vec<&Tensor<T>> = attr_logits.iter().collect();
    Ok(attribute_xent(&refs, attrs)?.0)
}

pub fn aal_loss<T: Real>(
    attr_feats_s: &[FeatureBatch<T>],
    attr_feats_t: &[FeatureBatch<T>],
    spec: &KernelSpec,
) -> Result<T> {
    let s: Vec<&Tensor<T>> = attr_feats_s.iter().map(FeatureBatch::features).collect();
    let t: Vec<&Tensor<T>> = attr_feats_t.iter().map(FeatureBatch::features).collect();
    Ok(aal_with_grad(&s, &t, spec)?.0)
}

pub fn mdal_loss<T: Real>(h_s: &FeatureBatch<T>, h_t: &FeatureBatch<T>, spec: &KernelSpec) -> Result<T> {
    crate::kernel::mmd2_biased(h_s, h_t, spec)
}

/// Tape-recorded versions of the losses.
pub mod on_tape {
    use super::*;

    pub fn identity_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let (v, g) = softmax_xent(tape.value(logits), labels)?;
        tape.fused_scalar(v, vec![(logits, g)])
    }

    pub fn attribute_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], attrs: &Tensor<T>) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = logits.iter().map(|&v| tape.value(v)).collect();
        let (v, grads) = attribute_xent(&vals, attrs)?;
        let parts = logits.iter().copied().zip(grads).collect();
        tape.fused_scalar(v, parts)
    }

    pub fn aal_loss<T: Real>(
        tape: &mut Tape<T>,
        source: &[Var],
        target: &[Var],
        spec: &KernelSpec,
    ) -> Result<Var> {
        let s: Vec<&Tensor<T>> = source.iter().map(|&v| tape.value(v)).collect();
        let t: Vec<&Tensor<T>> = target.iter().map(|&v| tape.value(v)).collect();
        let (v, gs, gt) = aal_with_grad(&s, &t, spec)?;
        let parts = source
            .iter()
            .copied()
            .zip(gs)
            .chain(target.iter().copied().zip(gt))
            .collect();
        tape.fused_scalar(v, parts)
    }

    pub fn mdal_loss<T: Real>(tape: &mut Tape<T>, h_s: Var, h_t: Var, spec: &KernelSpec) -> Result<Var> {
        let (v, gx, gy) = mmd2_with_grad(tape.value(h_s), tape.value(h_t), spec, true)?;
        tape.fused_scalar(v, vec![(h_s, gx), (h_t, gy)])
    }

    /// Records the weighted total with the same operation order as
    /// [`super::total_loss`], so both produce the same bits.
    pub fn total_loss<T: Real>(
        tape: &mut Tape<T>,
        parts: [Var; 4],
        w: &LossWeights,
    ) -> Result<Var> {
        w.validate()?;
        let [id, attr, aal, mdal] = parts;
        let t1 = tape.scale(attr, lit(w.lambda1));
        let s = tape.add(id, t1)?;
        let t2 = tape.scale(aal, lit(w.lambda2));
        let s = tape.add(s, t2)?;
        let t3 = tape.scale(mdal, lit(w.lambda3));
        tape.add(s, t3)
    }
}
