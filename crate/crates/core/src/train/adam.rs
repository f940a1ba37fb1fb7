use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !open(self.beta1) || !open(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment buffers, created on first use of a parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update at step `t` (counted from 1). Parameters
/// without a gradient entry are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    config: &AdamConfig,
    state: &mut AdamState<T>,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step index starts at 1"));
    }
    config.validate()?;
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
        let c1 = T::of(1.0 - config.beta1.powi(t as i32));
        let c2 = T::of(1.0 - config.beta2.powi(t as i32));
        let (lr, eps) = (T::of(config.lr), T::of(config.eps));
        for (((x, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![1.5f64, -2.0]));
        let before = p.clone();
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &AdamConfig::default(), &mut s, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamConfig::default();
        for g in [0.5, -3.0, 1e-3] {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::from_vec(vec![0.0f64]));
            let mut s = AdamState::new();
            adam_step(&mut p, &one("w", g), &cfg, &mut s, 1).unwrap();
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_quadratic_steps_match_scalar_replay() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(vec![2.0f64]));
        let mut s = AdamState::new();
        for t in 1..=2 {
            let x = p.get("x").unwrap().item();
            adam_step(&mut p, &one("x", 2.0 * x), &cfg, &mut s, t).unwrap();
        }

        let (mut x, mut m, mut v) = (2.0f64, 0.0, 0.0);
        for t in 1..=2 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-4);
        }
        assert!((p.get("x").unwrap().item() - x).abs() <= 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![0.0f64, 1.0]));
        let mut s = AdamState::new();
        assert!(adam_step(&mut p, &one("w", 1.0), &AdamConfig::default(), &mut s, 1).is_err());
    }
}
