//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup + cosine-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UclError};
use crate::tensor::Tensor;

/// Parameter names never touched by weight decay: biases, norm gains, and
/// the learnable temperature. This exclusion list is part of the contract.
pub fn decay_excluded(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name == "log_tau"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyperparams {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimHyperparams {
    fn default() -> Self {
        OptimHyperparams {
            lr_base: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: OptimHyperparams,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &BTreeMap<String, Tensor>, hyper: OptimHyperparams) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        OptimState {
            hyper,
            step: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed moment tensors; shapes must match `params`.
    pub fn from_parts(
        params: &BTreeMap<String, Tensor>,
        hyper: OptimHyperparams,
        step: usize,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        for (name, p) in params {
            for (label, buf) in [("m", m.get(name)), ("v", v.get(name))] {
                let buf = buf.ok_or_else(|| {
                    UclError::contract(format!("missing {label} moment for parameter '{name}'"))
                })?;
                if buf.shape() != p.shape() {
                    return Err(UclError::shape(format!(
                        "{label} moment for '{name}' has shape {:?}, parameter has {:?}",
                        buf.shape(),
                        p.shape()
                    )));
                }
            }
        }
        Ok(OptimState {
            hyper,
            step,
            m,
            v,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_base: f64,
    pub lr_min: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, lr_base: f64, lr_min: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(UclError::config(format!(
                "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
            )));
        }
        if lr_base < lr_min || lr_min < 0.0 {
            return Err(UclError::config("need lr_base >= lr_min >= 0"));
        }
        Ok(Schedule {
            warmup_steps,
            total_steps,
            lr_base,
            lr_min,
        })
    }
}

/// Learning rate at `step`: linear ramp to `lr_base` over the warmup, then
/// cosine decay to `lr_min`. Both pieces evaluate to `lr_base` at the warmup
/// boundary, so the schedule is continuous.
pub fn lr_at(schedule: &Schedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(UclError::contract(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    if step < schedule.warmup_steps {
        return Ok(schedule.lr_base * step as f64 / schedule.warmup_steps as f64);
    }
    if step == schedule.total_steps {
        return Ok(schedule.lr_min);
    }
    let progress = (step - schedule.warmup_steps) as f64
        / (schedule.total_steps - schedule.warmup_steps) as f64;
    Ok(schedule.lr_min
        + (schedule.lr_base - schedule.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale all gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when already under the threshold).
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(UclError::contract("max_norm must be positive"));
    }
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= factor;
        }
    }
    Ok(factor)
}

/// One AdamW step. Parameters without a gradient entry are left untouched
/// (they were not part of the traced computation); parameters with a
/// gradient get the full update, including decoupled decay unless excluded.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| UclError::contract(format!("gradient for unknown parameter '{name}'")))?;
        if g.shape() != p.shape() {
            return Err(UclError::shape(format!(
                "gradient for '{name}' has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powf(t);
    let bias2 = 1.0 - h.beta2.powf(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state.m.get_mut(name).expect("state built from params");
        let v = state.v.get_mut(name).expect("state built from params");
        let decay = if decay_excluded(name) {
            0.0
        } else {
            h.weight_decay
        };
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..gd.len() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gd[i];
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + decay * pd[i]);
        }
    }
    Ok(())
}
