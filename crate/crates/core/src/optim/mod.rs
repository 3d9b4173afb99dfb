//! AdamW with parameter groups, plain gradient descent, a cosine schedule
//! with linear warmup, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};


/// Role of a parameter group. Gate and bias groups never decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupTag {
    Adapter,
    Gate,
    Dense,
    Bias,
}

impl GroupTag {
    pub fn decays(self) -> bool {
        matches!(self, GroupTag::Adapter | GroupTag::Dense)
    }
}

/// Parameter slices updated with one learning rate and decay setting.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub tag: GroupTag,
    pub lr: f64,
    /// Requested decay; ignored for tags that never decay.
    pub weight_decay: f64,
    pub params: Vec<&'a mut [f64]>,
}

impl<'a> ParamGroup<'a> {
    pub fn new(
        name: impl Into<String>,
        tag: GroupTag,
        lr: f64,
        weight_decay: f64,
        params: Vec<&'a mut [f64]>,
    ) -> Self {
        Self {
            name: name.into(),
            tag,
            lr,
            weight_decay,
            params,
        }
    }

    pub fn effective_weight_decay(&self) -> f64 {
        if self.tag.decays() {
            self.weight_decay
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step count and per-entry moments, laid out as `[group][param][entry]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<Vec<f64>>>,
}

fn check_grads(groups: &[ParamGroup], grads: &[Vec<&[f64]>]) -> Result<()> {
    if groups.len() != grads.len() {
        return invalid(format!(
            "{} parameter groups but {} gradient groups",
            groups.len(),
            grads.len()
        ));
    }
    for (g, gr) in groups.iter().zip(grads) {
        if g.params.len() != gr.len() || g.params.iter().zip(gr).any(|(p, d)| p.len() != d.len()) {
            return invalid(format!(
                "gradient shapes do not match parameters in group '{}'",
                g.name
            ));
        }
        if gr.iter().any(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in group '{}'",
                g.name
            )));
        }
    }
    Ok(())
}

fn check_lr_scale(lr_scale: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lr_scale) {
        return invalid(format!("lr_scale must lie in [0, 1], got {lr_scale}"));
    }
    Ok(())
}

/// One bias-corrected AdamW step. Decoupled decay multiplies each parameter
/// by `1 − lr·wd` before the Adam update. Nothing is modified on error.
pub fn adamw_step(
    groups: &mut [ParamGroup],
    grads: &[Vec<&[f64]>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr_scale: f64,
) -> Result<()> {
    check_lr_scale(lr_scale)?;
    check_grads(groups, grads)?;
    if state.step == 0 && state.m.is_empty() {
        let zeros = || -> Vec<Vec<Vec<f64>>> {
            groups
                .iter()
                .map(|g| g.params.iter().map(|p| vec![0.0; p.len()]).collect())
                .collect()
        };
        state.m = zeros();
        state.v = zeros();
    }
    let shapes_match = state.m.len() == groups.len()
        && groups.iter().zip(&state.m).all(|(g, m)| {
            m.len() == g.params.len() && g.params.iter().zip(m).all(|(p, mm)| p.len() == mm.len())
        });
    if !shapes_match {
        return invalid("optimizer state does not match the parameter groups");
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (gi, group) in groups.iter_mut().enumerate() {
        let lr = group.lr * lr_scale;
        let shrink = 1.0 - lr * group.effective_weight_decay();
        for (pi, param) in group.params.iter_mut().enumerate() {
            let m = &mut state.m[gi][pi];
            let v = &mut state.v[gi][pi];
            for (k, (p, &g)) in param.iter_mut().zip(grads[gi][pi]).enumerate() {
                *p *= shrink;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

/// `p ← (1 − lr·wd) p − lr·g` per group.
pub fn sgd_step(groups: &mut [ParamGroup], grads: &[Vec<&[f64]>], lr_scale: f64) -> Result<()> {
    check_lr_scale(lr_scale)?;
    check_grads(groups, grads)?;
    for (gi, group) in groups.iter_mut().enumerate() {
        let lr = group.lr * lr_scale;
        let shrink = 1.0 - lr * group.effective_weight_decay();
        for (param, grad) in group.params.iter_mut().zip(&grads[gi]) {
            for (p, &g) in param.iter_mut().zip(grad.iter()) {
                *p = shrink * *p - lr * g;
            }
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `base_lr` over `warmup_ratio · total_steps` steps,
/// then `base_lr · ½(1 + cos(π · progress))` down to 0 at `total_steps`.
pub fn cosine_warmup_lr(
    step: u64,
    total_steps: u64,
    warmup_ratio: f64,
    base_lr: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return invalid("total_steps must be positive");
    }
    if step > total_steps {
        return invalid(format!("step {step} beyond total_steps {total_steps}"));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return invalid(format!(
            "warmup_ratio must lie in [0, 1), got {warmup_ratio}"
        ));
    }
    let (s, total) = (step as f64, total_steps as f64);
    let warmup = warmup_ratio * total;
    if s < warmup {
        return Ok(base_lr * s / warmup);
    }
    let progress = (s - warmup) / (total - warmup);
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Global L2 norm over every slice.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Multiplier that brings a gradient of norm `total_norm` within `max_norm`.
pub fn clip_factor(total_norm: f64, max_norm: f64) -> f64 {
    if total_norm > max_norm {
        max_norm / total_norm
    } else {
        1.0
    }
}

/// Rescales all slices jointly so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return invalid(format!("max_norm must be positive, got {max_norm}"));
    }
    let views: Vec<&[f64]> = grads.iter().map(|g| &**g).collect();
    let total = global_norm(&views);
    let f = clip_factor(total, max_norm);
    if f < 1.0 {
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= f));
    }
    Ok(total)
}
