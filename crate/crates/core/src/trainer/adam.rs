use std::collections::BTreeMap;

use super::config::AdamConfig;
use crate::autodiff::{GradientMap, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn zeros(params: &ModelParams) -> Self {
        let z: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState { m: z.clone(), v: z }
    }

    /// One bias-corrected update at 1-based step `t`. Parameters without a
    /// gradient are left untouched.
    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &GradientMap,
        cfg: AdamConfig,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let c1 = 1.0 - cfg.beta1.powf(t as f64);
        let c2 = 1.0 - cfg.beta2.powf(t as f64);
        for (name, g) in grads.iter() {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            let (Some(m), Some(v), Some(p)) = (self.m.get_mut(name), self.v.get_mut(name), params.get_mut(name))
            else {
                return Err(Error::contract(format!("no optimizer slot for {name}")));
            };
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((p, m), v), &g) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
