//! Adam with bias correction and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::m2trans::{Bound, ModelParams};

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    /// Reads the gradient of every bound parameter; parameters the loss does
    /// not reach get zeros.
    pub fn collect(tape: &Tape, bound: &Bound) -> Self {
        Gradients(
            bound
                .named()
                .iter()
                .map(|(name, v)| {
                    let g = tape
                        .grad(*v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(*v).len()]);
                    (name.clone(), g)
                })
                .collect(),
        )
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to norm at most `max_norm`; returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            self.0.values_mut().flatten().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().flatten().all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with gradient in `grads`.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in &grads.0 {
            let n = params.get(name).map(|t| t.len());
            if n != Some(g.len()) {
                return Err(Error::shape("adam", format!("gradient for {name} does not match its parameter")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in &grads.0 {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(name).expect("checked above").data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_to_the_bound() {
        let mut g = Gradients([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])].into_iter().collect());
        assert_eq!(g.clip(10.0), 5.0);
        assert_eq!(g.0["a"], vec![3.0]);
        assert_eq!(g.clip(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert!((g.0["a"][0] - 0.6).abs() < 1e-15);
    }
}
