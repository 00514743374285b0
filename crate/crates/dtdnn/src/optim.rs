//! Adam optimizer over a network's named parameter groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GradStore, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

/// Adam state: first/second moment per parameter group, keyed by name. The
/// step counter advances once per [`Adam::step`] call, gradients or not.
pub struct Adam {
    hyper: AdamParams,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(hyper: AdamParams) -> Self {
        Adam { hyper, t: 0, moments: BTreeMap::new() }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// Apply one update. The gradient store must cover exactly the network's
    /// parameter groups; non-finite gradients abort with the group name.
    pub fn step(&mut self, net: &mut Network, grads: &GradStore) -> Result<()> {
        for (name, vals) in grads.entries() {
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { what: "gradient", name: name.clone() });
            }
        }
        self.t += 1;
        let mut missing: Option<String> = None;
        let t = self.t;
        let hyper = self.hyper;
        let moments = &mut self.moments;
        net.visit_params_mut(|name, theta| {
            let Some(grad) = grads.get(name) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; theta.len()], vec![0.0; theta.len()]));
            update_group(theta, grad, m, v, &hyper, t);
        });
        match missing {
            Some(name) => Err(Error::usage(format!("no gradient for parameter group `{name}`"))),
            None => Ok(()),
        }
    }
}

fn update_group(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamParams,
    t: u64,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}
