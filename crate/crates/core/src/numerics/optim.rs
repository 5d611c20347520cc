//! Adam with bias correction and the warmup / inverse-square-root schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Linear warmup to `peak_lr`, then `peak_lr * sqrt(warmup_steps / step)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64) -> Result<Self> {
        let s = LrSchedule { peak_lr, warmup_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 {
            return Err(Error::invalid("schedule needs peak_lr > 0 and warmup_steps >= 1"));
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        if s <= w {
            self.peak_lr * s / w
        } else {
            self.peak_lr * (w / s).sqrt()
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<ParamId, Vec<S>>,
    v: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Default for OptimizerState<S> {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[S]> {
        self.m.get(&id).map(Vec::as_slice)
    }
}

/// One Adam update of every non-frozen parameter. Missing gradients count
/// as zero. Nothing is modified if any gradient is non-finite.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &HashMap<ParamId, Tensor<S>>,
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        let p = params.get(*id);
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{}` is {:?}, gradient {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: p.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(state.beta1), S::lit(state.beta2));
    let c1 = S::lit(1.0 - state.beta1.powi(t));
    let c2 = S::lit(1.0 - state.beta2.powi(t));
    let lr = S::lit(lr);
    let eps = S::lit(state.eps);
    let ids: Vec<ParamId> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = params.value(id).len();
        let m = state.m.entry(id).or_insert_with(|| vec![S::zero(); n]);
        let v = state.v.entry(id).or_insert_with(|| vec![S::zero(); n]);
        let g = grads.get(&id).map(|t| t.data());
        let w = params.get_mut(id).value.data_mut();
        for i in 0..n {
            let gi = g.map_or(S::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamGroup;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::new(1e-3, 10_000).unwrap();
        assert!((s.lr_at_step(10_000) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at_step(40_000) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at_step(5_000) - 5e-4).abs() < 1e-15);
        // continuity at the warmup boundary
        let a = s.lr_at_step(10_000);
        let b = s.lr_at_step(10_001);
        assert!((a - b).abs() < 1e-7);
        assert!(LrSchedule::new(0.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 0).is_err());
    }

    fn one_param(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Student, Tensor::scalar(x)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = one_param(0.7);
        let mut st = OptimizerState::default();
        let mut g = HashMap::new();
        g.insert(id, Tensor::scalar(0.0));
        adam_step(&mut store, &g, &mut st, 1e-2).unwrap();
        assert_eq!(store.value(id).item(), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = one_param(1.0);
        let mut st = OptimizerState::default();
        let mut g = HashMap::new();
        g.insert(id, Tensor::scalar(1.0));
        adam_step(&mut store, &g, &mut st, 1e-3).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-9);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_frozen_untouched() {
        let (mut a, id) = one_param(0.3);
        let frozen = a.add("t", ParamGroup::Teacher, Tensor::scalar(5.0)).unwrap();
        a.set_group_frozen(ParamGroup::Teacher, true);
        let mut b = a.clone();
        let mut sa = OptimizerState::default();
        let mut sb = OptimizerState::default();
        let mut g = HashMap::new();
        g.insert(id, Tensor::scalar(0.25));
        for _ in 0..3 {
            adam_step(&mut a, &g, &mut sa, 1e-2).unwrap();
            adam_step(&mut b, &g, &mut sb, 1e-2).unwrap();
        }
        assert_eq!(a.value(id).item().to_bits(), b.value(id).item().to_bits());
        assert_eq!(a.value(frozen).item(), 5.0);
    }

    #[test]
    fn non_finite_gradient_named() {
        let (mut store, id) = one_param(0.0);
        let mut st = OptimizerState::default();
        let mut g = HashMap::new();
        g.insert(id, Tensor::scalar(f64::INFINITY));
        match adam_step(&mut store, &g, &mut st, 1e-3) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }
}
