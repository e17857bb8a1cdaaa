use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_unchecked, softmax, Logits};

use super::LossGrad;

/// Tolerance for cosines that drift slightly outside [-1, 1].
const COSINE_SLACK: f64 = 1e-9;

/// Additive angular margin head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamConfig {
    pub scale: f64,
    pub margin_max: f64,
    /// Explicit warmup length. When absent the warmup covers
    /// `margin_warmup_fraction` of the run.
    pub margin_warmup_steps: Option<usize>,
    pub margin_warmup_fraction: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            scale: 32.0,
            margin_max: 0.2,
            margin_warmup_steps: None,
            margin_warmup_fraction: 0.3,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::config("aam.scale", "must be finite and > 0"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin_max) {
            return Err(Error::config("aam.margin_max", "must lie in [0, pi/2)"));
        }
        if !(0.0..=1.0).contains(&self.margin_warmup_fraction) {
            return Err(Error::config("aam.margin_warmup_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        self.margin_warmup_steps
            .unwrap_or_else(|| (self.margin_warmup_fraction * total_steps as f64).round() as usize)
    }

    pub fn margin_at(&self, step: usize, total_steps: usize) -> f64 {
        margin_at_step(step, self.margin_max, self.warmup_steps(total_steps))
    }
}

/// Linear ramp from 0 at step 0 to `margin_max` at `warmup_steps`, flat after.
/// A zero-length warmup applies the full margin from the start.
pub fn margin_at_step(step: usize, margin_max: f64, warmup_steps: usize) -> f64 {
    if step >= warmup_steps {
        margin_max
    } else {
        margin_max * step as f64 / warmup_steps as f64
    }
}

fn check_head(cosines: &[f64], target: usize, scale: f64, margin: f64) -> Result<Vec<f64>> {
    if target >= cosines.len() {
        return Err(Error::domain(format!(
            "target class {target} out of range for {} classes",
            cosines.len()
        )));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::domain(format!("margin {margin} outside [0, pi/2)")));
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::domain(format!("scale {scale} must be positive")));
    }
    cosines
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c.is_nan() || c.abs() > 1.0 + COSINE_SLACK {
                Err(Error::domain(format!("cosine {i} = {c} outside [-1, 1]")))
            } else {
                Ok(c.clamp(-1.0, 1.0))
            }
        })
        .collect()
}

/// `s · cos(θ_τ + m)` for the target, `s · cos θ_i` elsewhere.
pub fn aam_logits(cosines: &[f64], target: usize, scale: f64, margin: f64) -> Result<Logits> {
    let mut z = check_head(cosines, target, scale, margin)?;
    let c_target = z[target];
    z.iter_mut().for_each(|c| *c *= scale);
    if margin != 0.0 {
        z[target] = scale * (c_target.acos() + margin).cos();
    }
    Logits::new(z)
}

/// Pulls a gradient on the AAM logits back onto the cosines.
///
/// `d/dc cos(acos c + m) = cos m + sin m · c / sqrt(1 - c²)`; the square root
/// is floored at 1e-12 so the target derivative stays finite at `c = ±1`.
pub fn aam_logits_backward(
    cosines: &[f64],
    target: usize,
    scale: f64,
    margin: f64,
    grad_logits: &[f64],
) -> Result<Vec<f64>> {
    let c = check_head(cosines, target, scale, margin)?;
    if grad_logits.len() != c.len() {
        return Err(Error::domain("gradient length does not match the cosines"));
    }
    let mut g: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
    if margin != 0.0 {
        let ct = c[target];
        let sine = (1.0 - ct * ct).max(0.0).sqrt().max(1e-12);
        g[target] *= margin.cos() + margin.sin() * ct / sine;
    }
    Ok(g)
}

/// Softmax cross-entropy `-log softmax(z)[target]`, gradient `softmax(z) - onehot`.
pub fn cross_entropy(z: &Logits, target: usize) -> Result<LossGrad> {
    if target >= z.dim() {
        return Err(Error::domain(format!(
            "target class {target} out of range for {} classes",
            z.dim()
        )));
    }
    let loss = log_sum_exp_unchecked(z.as_slice()) - z.as_slice()[target];
    let mut grad = softmax(z).into_vec();
    grad[target] -= 1.0;
    Ok(LossGrad { loss, grad })
}

/// AAM-softmax classification loss with the gradient w.r.t. the cosines.
pub fn aam_cross_entropy(
    cosines: &[f64],
    target: usize,
    scale: f64,
    margin: f64,
) -> Result<LossGrad> {
    let z = aam_logits(cosines, target, scale, margin)?;
    let ce = cross_entropy(&z, target)?;
    let grad = aam_logits_backward(cosines, target, scale, margin, &ce.grad)?;
    Ok(LossGrad {
        loss: ce.loss,
        grad,
    })
}
