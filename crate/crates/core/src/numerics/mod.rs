//! Stable scalar/vector primitives shared by the losses and models.
//!
//! Everything here works in `f64`. Softmax-family functions always go through
//! a max-shifted log-sum-exp so that logits at AAM scale (|z| up to ~32, and
//! far beyond in adversarial tests) never overflow.

mod linalg;
mod rng;

pub use linalg::{dot, norm, Matrix};
pub use rng::RngStream;

use crate::error::{Error, Result};

/// Raw class scores. At least two classes, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::domain(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Logits(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Divides every entry by `temperature`.
    pub fn scaled(&self, temperature: f64) -> Logits {
        if temperature == 1.0 {
            return self.clone();
        }
        Logits(self.0.iter().map(|z| z / temperature).collect())
    }
}

/// A discrete probability distribution over K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Tolerance on the total mass of user-supplied distributions.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("empty probability vector"));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(Error::domain(format!(
                "probability {i} outside [0, 1] ({})",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::domain(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(ProbDist(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Outcome of a KL divergence. `Infinite` arises when `p` puts mass where `q` has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn value(self) -> f64 {
        match self {
            Divergence::Finite(v) => v,
            Divergence::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Divergence::Finite(_))
    }
}

/// `ln Σ exp(v_i)` via the max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("log_sum_exp of an empty vector"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::domain("log_sum_exp input contains NaN"));
    }
    Ok(log_sum_exp_unchecked(v))
}

/// Caller guarantees `v` is non-empty and NaN-free.
pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(z: &Logits) -> ProbDist {
    let z = z.as_slice();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    ProbDist(out)
}

pub fn log_softmax(z: &Logits) -> Vec<f64> {
    let lse = log_sum_exp_unchecked(z.as_slice());
    z.as_slice().iter().map(|x| x - lse).collect()
}

/// `D_KL(p || q) = Σ p_i ln(p_i / q_i)` with the `0 · ln 0 = 0` convention.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<Divergence> {
    if p.dim() != q.dim() {
        return Err(Error::domain(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(Divergence::Infinite);
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(Divergence::Finite(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            log_sum_exp(&[1000.0, 1000.0]).unwrap(),
            1000.0 + 2f64.ln()
        );
        assert!(matches!(log_sum_exp(&[]), Err(Error::Domain(_))));
        assert!(matches!(log_sum_exp(&[1.0, f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_analytic_cases() {
        let p = softmax(&logits(&[0.0; 4]));
        assert!(p.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-16));
        let p = softmax(&logits(&[1f64.ln(), 3f64.ln()]));
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_analytic_cases() {
        for (v, expect) in [
            (vec![0.0, 0.0], -(2f64.ln())),
            (vec![5.0, 5.0, 5.0], -(3f64.ln())),
        ] {
            for x in log_softmax(&logits(&v)) {
                assert!((x - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logits_reject_bad_input() {
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::NAN]).is_err());
        assert!(Logits::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn kl_analytic_cases() {
        let half = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), Divergence::Finite(0.0));
        let point = ProbDist::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&point, &half).unwrap().value();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        // reversed direction puts mass on a zero of q
        assert_eq!(kl_divergence(&half, &point).unwrap(), Divergence::Infinite);
        let three = ProbDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_divergence(&half, &three).is_err());
    }

    #[test]
    fn prob_dist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
    }
}
