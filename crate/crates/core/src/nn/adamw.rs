use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::NnError;

/// Decoupled weight decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One AdamW update of every parameter from its gradient buffer.
///
/// Every parameter must carry a gradient (call [`ParamStore::zero_grads`]
/// before the backward pass). Moments are kept in `f64`-equivalent precision
/// of `T`; the step counter is shared by the whole store.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamW) -> Result<(), NnError> {
    if let Some((name, _)) = store.iter().find(|(_, e)| e.grad.is_none()) {
        return Err(NnError::MissingGrad(name.to_string()));
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::c(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    let (bc1, bc2) = (T::c(bc1), T::c(bc2));
    for (_, e) in store.iter_mut() {
        let shape = e.value.shape().to_vec();
        let m = e.m.get_or_insert_with(|| Tensor::zeros(&shape));
        let v = e.v.get_or_insert_with(|| Tensor::zeros(&shape));
        let g = e.grad.as_ref().expect("checked above");
        for (((p, m), v), &g) in e
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *p = *p * decay;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
