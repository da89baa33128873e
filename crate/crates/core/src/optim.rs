//! Parameter storage, SGD with momentum, and the step-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// What a named entry holds: a trainable parameter, or a statistic buffer
/// (batch-norm running moments) that is serialized but never stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Stat,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    momentum: Vec<T>,
}

impl<T: Real> ParamEntry<T> {
    pub fn momentum(&self) -> &[T] {
        &self.momentum
    }
}

/// Ordered, uniquely named parameter set. Insertion order is the
/// serialization order, so checkpoints are byte-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.entries.len();
        let momentum = vec![T::ZERO; value.numel()];
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            kind,
            momentum,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut ParamEntry<T> {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id_of(name).map(|id| &self.entries[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        let id = self.id_of(name)?;
        Some(&mut self.entries[id])
    }

    /// Count of values across trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.value.clear_grad();
        }
    }
}

/// One SGD-with-momentum update:
/// `v ← momentum·v + grad; p ← p − lr·v`, then gradients are cleared.
///
/// Every trainable entry must carry a gradient; statistic entries are
/// skipped.
pub fn sgd_momentum_step<T: Real>(params: &mut ParamSet<T>, lr: T, momentum: T) -> Result<()> {
    for e in &mut params.entries {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let grad = e
            .value
            .grad()
            .ok_or_else(|| Error::MissingGradient(e.name.clone()))?
            .to_vec();
        for (v, g) in e.momentum.iter_mut().zip(&grad) {
            *v = momentum * *v + *g;
        }
        for (p, v) in e.value.values_mut().iter_mut().zip(&e.momentum) {
            *p -= lr * *v;
        }
        e.value.clear_grad();
    }
    Ok(())
}

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub momentum: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 0.01,
            decay_factor: 0.1,
            decay_every: 20,
            momentum: 0.9,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_factor must be in (0,1), got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidConfig("decay_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `base_lr · decay_factor^⌊epoch/decay_every⌋`, computed by iterated
/// multiplication: for the default 0.01/0.1 schedule this lands exactly on
/// the decimal doubles 0.001, 0.0001, ... (powi does not).
pub fn lr_at_epoch(schedule: &Schedule, epoch: usize) -> f64 {
    let k = epoch / schedule.decay_every;
    let mut lr = schedule.base_lr;
    for _ in 0..k {
        lr *= schedule.decay_factor;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_1d(vals: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals).unwrap()
    }

    #[test]
    fn vanilla_sgd() {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", param_1d(vec![1.0]), ParamKind::Trainable).unwrap();
        ps.get_mut(id).value.accumulate_grad(&[1.0]);
        sgd_momentum_step(&mut ps, 0.1, 0.0).unwrap();
        assert_eq!(ps.get(id).value.values(), &[0.9]);
        assert!(ps.get(id).value.grad().is_none());
    }

    #[test]
    fn two_momentum_steps() {
        // From p=0, v=0 with grad 1 each step, lr 0.1, momentum 0.9:
        // v1=1, p=-0.1; v2=1.9, p=-0.1-0.19=-0.29.
        let mut ps = ParamSet::new();
        let id = ps.insert("p", param_1d(vec![0.0]), ParamKind::Trainable).unwrap();
        for _ in 0..2 {
            ps.get_mut(id).value.accumulate_grad(&[1.0]);
            sgd_momentum_step(&mut ps, 0.1, 0.9).unwrap();
        }
        let p = ps.get(id).value.values()[0];
        assert!((p - (-0.29)).abs() < 1e-15, "p={p}");
    }

    #[test]
    fn zero_grad_decays_via_momentum_only() {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", param_1d(vec![1.0]), ParamKind::Trainable).unwrap();
        ps.get_mut(id).value.accumulate_grad(&[2.0]);
        sgd_momentum_step(&mut ps, 0.1, 0.5).unwrap();
        let after_first = ps.get(id).value.values()[0];
        ps.get_mut(id).value.accumulate_grad(&[0.0]);
        sgd_momentum_step(&mut ps, 0.1, 0.5).unwrap();
        let after_second = ps.get(id).value.values()[0];
        // v2 = 0.5·2 = 1, so the second step still moves by -0.1.
        assert!((after_first - 0.8).abs() < 1e-15);
        assert!((after_second - 0.7).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("w.conv", param_1d(vec![1.0]), ParamKind::Trainable).unwrap();
        let err = sgd_momentum_step(&mut ps, 0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("w.conv"));
    }

    #[test]
    fn stat_entries_not_stepped() {
        let mut ps = ParamSet::new();
        let id = ps.insert("bn.running_mean", param_1d(vec![3.0]), ParamKind::Stat).unwrap();
        sgd_momentum_step(&mut ps, 0.1, 0.9).unwrap();
        assert_eq!(ps.get(id).value.values(), &[3.0]);
    }

    #[test]
    fn schedule_exact_decimal_steps() {
        let s = Schedule::default();
        assert_eq!(lr_at_epoch(&s, 0), 0.01);
        assert_eq!(lr_at_epoch(&s, 19), 0.01);
        assert_eq!(lr_at_epoch(&s, 20), 0.001);
        assert_eq!(lr_at_epoch(&s, 39), 0.001);
        assert_eq!(lr_at_epoch(&s, 40), 0.0001);
        assert_eq!(lr_at_epoch(&s, 45), 0.0001);
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::default();
        s.decay_factor = 1.0;
        assert!(s.validate().is_err());
        s.decay_factor = 0.5;
        s.momentum = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", param_1d(vec![0.0]), ParamKind::Trainable).unwrap();
        assert!(ps.insert("w", param_1d(vec![0.0]), ParamKind::Trainable).is_err());
    }
}
