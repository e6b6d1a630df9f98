//! Named parameter storage and first-order optimizers.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`encoder.block3.attn.wq`, `heads.gender.w1`, ...). Freezing is a hard
//! property enforced here, not a convention: an optimizer asked to apply a
//! gradient to a frozen or unknown parameter returns an error instead of
//! silently skipping it, and frozen values are never rewritten, so their
//! bytes stay identical across any number of steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// One value plus its freeze state.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// All parameters of a model, in deterministic name order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Insert a fresh trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidOp {
                op: "param_set",
                msg: format!("parameter '{name}' inserted twice"),
            });
        }
        self.params.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParameter { name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Bind every parameter onto `tape` (frozen ones as non-trainable
    /// leaves) and hand back the name-to-node mapping the forward pass
    /// navigates by.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<BTreeMap<String, VarId>> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            ids.insert(name.clone(), tape.bind(name, &p.value, p.trainable)?);
        }
        Ok(ids)
    }
}

/// Per-namespace learning rates: the encoder usually trains slower than the
/// randomly initialized downstream parts.
#[derive(Clone, Copy, Debug)]
pub struct LrGroups {
    /// Applied to parameters under the `encoder.` namespace.
    pub encoder: f64,
    /// Applied to everything else.
    pub downstream: f64,
}

impl LrGroups {
    /// Same rate everywhere.
    pub fn uniform(lr: f64) -> Self {
        LrGroups {
            encoder: lr,
            downstream: lr,
        }
    }

    pub fn rate_for(&self, name: &str) -> f64 {
        if name.starts_with("encoder.") {
            self.encoder
        } else {
            self.downstream
        }
    }
}

/// Applies one gradient map to a [`ParamSet`].
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()>;
}

/// Check a (name, gradient) pair against the parameter set and return the
/// parameter it may update.
fn checked_target<'p>(
    params: &'p mut ParamSet,
    name: &str,
    grad: &Tensor,
    op: &'static str,
) -> Result<&'p mut Param> {
    let p = params
        .params
        .get_mut(name)
        .ok_or_else(|| Error::UnknownParameter { name: name.into() })?;
    if !p.trainable {
        return Err(Error::FrozenParameter { name: name.into() });
    }
    if p.value.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.value.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(p)
}

/// Plain stochastic gradient descent.
pub struct Sgd {
    pub lrs: LrGroups,
}

impl Sgd {
    pub fn new(lrs: LrGroups) -> Self {
        Sgd { lrs }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, grad) in grads {
            let lr = self.lrs.rate_for(name);
            let p = checked_target(params, name, grad, "sgd")?;
            for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction (Kingma & Ba defaults).
pub struct Adam {
    pub lrs: LrGroups,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lrs: LrGroups) -> Self {
        Adam {
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let lr = self.lrs.rate_for(name);
            let p = checked_target(params, name, grad, "adam")?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.value.data_mut()[i] -= update;
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}
