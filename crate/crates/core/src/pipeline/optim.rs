use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Decoupled-weight-decay Adam:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`, with decay on every trainable tensor.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradients / {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !p.trainable {
            continue;
        }
        if g.shape() != p.tensor.shape() {
            return Err(Error::Usage(format!(
                "gradient for `{}` has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.tensor.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (theta, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = f64::from(gj);
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = f64::from(*theta);
            *theta = (old - lr * m_hat / (v_hat.sqrt() + hyper.eps) - lr * weight_decay * old) as f32;
        }
    }
    Ok(())
}

/// Cosine annealing; `t` past `t_max` stays at `lr_min`.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64, lr_min: f64) -> f64 {
    if t >= t_max {
        return lr_min;
    }
    let frac = t as f64 / t_max as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
