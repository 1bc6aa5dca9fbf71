//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::ParamStore;

const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, weight_decay, state: BTreeMap::new() }
    }

    /// Updates every parameter for which `lr_of` returns a rate and a gradient exists.
    /// Bias correction counts the updates each parameter has actually received.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Grid>,
        lr_of: impl Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        for (name, g) in grads {
            let Some(lr) = lr_of(name) else { continue };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != g.len() {
                return Err(Error::InvalidArgument(format!("gradient shape mismatch for `{name}`")));
            }
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            st.t += 1;
            let c1 = 1.0 - self.beta1.powi(st.t as i32);
            let c2 = 1.0 - self.beta2.powi(st.t as i32);
            for ((pv, &gv), (m, v)) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let upd = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *pv -= lr * (upd + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Grid::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Grid::from_vec(&[2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        opt.step(&mut p, &g, |_| Some(0.1)).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
