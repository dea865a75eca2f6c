//! SGD with Nesterov momentum and decoupled-from-BN weight decay.

use crate::error::{Error, Result};
use crate::tape::{ParamKind, ParamStore};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    /// One buffer per parameter, in store order.
    pub velocity: Vec<Tensor<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Parameter names that must be exempt from weight decay.
fn is_exempt_name(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Checks that decay touches exactly the weight tensors and nothing in the
/// batch-norm or bias sets.
pub fn check_decay_set<T: Real>(params: &ParamStore<T>) -> Result<()> {
    for p in params.iter() {
        let exempt = is_exempt_name(&p.name);
        let kind_ok = match p.kind {
            ParamKind::Weight => !exempt,
            ParamKind::Bias => p.name.ends_with(".bias"),
            ParamKind::BnScale => p.name.ends_with(".gamma"),
            ParamKind::BnShift => p.name.ends_with(".beta"),
        };
        if !kind_ok || p.kind.decays() == exempt {
            return Err(Error::Contract(format!(
                "parameter {} of kind {:?} breaks the weight-decay exclusion set",
                p.name, p.kind
            )));
        }
    }
    Ok(())
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        check_decay_set(params)?;
        let state = OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            lr,
            momentum,
            weight_decay,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// One update from the gradients stored on each parameter; clears them.
///
/// With `g' = g + w·θ`: `v ← μ·v + g'`, then `θ ← θ − lr·(g' + μ·v)`.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let lr = lit::<T>(state.lr);
    let mu = lit::<T>(state.momentum);
    let wd = lit::<T>(state.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "{}: value {:?}, grad {:?}, velocity {:?}",
                p.name,
                p.value.shape(),
                p.grad.shape(),
                v.shape()
            )));
        }
        if !p.requires_grad {
            continue;
        }
        let decays = p.kind.decays();
        let vals = p.value.data_mut();
        for ((theta, &g), vel) in vals.iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            let g = if decays { g + wd * *theta } else { g };
            *vel = mu * *vel + g;
            *theta -= lr * (g + mu * *vel);
        }
        p.zero_grad();
    }
    Ok(())
}
