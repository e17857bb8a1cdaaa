//! Label-level and embedding-level distillation losses.
//!
//! The label-level losses split the K-way softmax at the target class τ into
//! a binary part `b = (p_τ, p_τ̄)` and the renormalised non-target
//! distribution `p̂` over the remaining K−1 classes. With these,
//!
//! ```text
//! KL(p_T || p_S) = KL(b_T || b_S) + (1 - p_τ^T) · KL(p̂_T || p̂_S)
//!                  \____ TSKD ___/                 \____ NSKD ____/
//! ```
//!
//! and the decoupled loss replaces the teacher-dependent factor with a fixed
//! weight γ: `L_DKD = TSKD + γ · NSKD`.

use crate::error::{Error, Result};
use crate::numerics::{
    dot, kl_divergence, log_softmax, log_sum_exp_unchecked, norm, Logits, ProbDist,
};

use super::{DkdConfig, Gamma, LossGrad, STUDENT_PROB_FLOOR};

/// A distribution split at the target class.
///
/// Log-domain copies of every probability are kept so that losses built from
/// logits never pay for `1 - p_τ` cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledProbs {
    target_index: usize,
    num_classes: usize,
    p_target: f64,
    p_nontarget_total: f64,
    nontarget_dist: Vec<f64>,
    log_p_target: f64,
    log_p_nontarget_total: f64,
    log_nontarget_dist: Vec<f64>,
}

impl DecoupledProbs {
    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn p_target(&self) -> f64 {
        self.p_target
    }

    /// Total probability of all non-target classes.
    pub fn p_nontarget_total(&self) -> f64 {
        self.p_nontarget_total
    }

    /// `p̂`: non-target probabilities renormalised to sum to one, in class
    /// order with the target removed.
    pub fn nontarget_dist(&self) -> &[f64] {
        &self.nontarget_dist
    }

    /// Class index of the `j`-th entry of [`Self::nontarget_dist`].
    pub fn nontarget_class(&self, j: usize) -> usize {
        if j < self.target_index {
            j
        } else {
            j + 1
        }
    }

    /// Rebuilds `p_i`; non-target entries come back as `p_τ̄ · p̂_i`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_classes);
        p.extend(
            self.nontarget_dist[..self.target_index]
                .iter()
                .map(|q| self.p_nontarget_total * q),
        );
        p.push(self.p_target);
        p.extend(
            self.nontarget_dist[self.target_index..]
                .iter()
                .map(|q| self.p_nontarget_total * q),
        );
        p
    }

    fn check_compatible(&self, other: &DecoupledProbs) -> Result<()> {
        if self.target_index != other.target_index || self.num_classes != other.num_classes {
            return Err(Error::domain(format!(
                "decoupled distributions disagree: target {} / K {} vs target {} / K {}",
                self.target_index, self.num_classes, other.target_index, other.num_classes
            )));
        }
        Ok(())
    }
}

fn check_target(target: usize, k: usize) -> Result<()> {
    if target >= k {
        return Err(Error::domain(format!(
            "target class {target} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Splits a probability vector at `target`.
pub fn decouple(p: &ProbDist, target: usize) -> Result<DecoupledProbs> {
    let probs = p.as_slice();
    let k = probs.len();
    check_target(target, k)?;
    let p_target = probs[target];
    let p_nontarget_total: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| v)
        .sum();
    if p_nontarget_total == 0.0 {
        return Err(Error::degenerate(
            "target probability is exactly 1; the non-target distribution is undefined",
        ));
    }
    let nontarget_dist: Vec<f64> = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| v / p_nontarget_total)
        .collect();
    Ok(DecoupledProbs {
        target_index: target,
        num_classes: k,
        p_target,
        p_nontarget_total,
        log_p_target: p_target.ln(),
        log_p_nontarget_total: p_nontarget_total.ln(),
        log_nontarget_dist: nontarget_dist.iter().map(|v| v.ln()).collect(),
        nontarget_dist,
    })
}

/// Splits `softmax(z)` at `target`, working in the log domain throughout.
pub fn decouple_logits(z: &Logits, target: usize) -> Result<DecoupledProbs> {
    let z = z.as_slice();
    let k = z.len();
    check_target(target, k)?;
    let others: Vec<f64> = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| v)
        .collect();
    let lse_all = log_sum_exp_unchecked(z);
    let lse_others = log_sum_exp_unchecked(&others);
    let log_p_target = z[target] - lse_all;
    let log_p_nontarget_total = lse_others - lse_all;
    let log_nontarget_dist: Vec<f64> = others.iter().map(|v| v - lse_others).collect();
    Ok(DecoupledProbs {
        target_index: target,
        num_classes: k,
        p_target: log_p_target.exp(),
        p_nontarget_total: log_p_nontarget_total.exp(),
        nontarget_dist: log_nontarget_dist.iter().map(|v| v.exp()).collect(),
        log_p_target,
        log_p_nontarget_total,
        log_nontarget_dist,
    })
}

/// `p · (ln p - ln q)` with `0 · ln 0 = 0` and the student floor on `ln q`.
fn kl_term(p: f64, log_p: f64, log_q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (log_p - log_q.max(STUDENT_PROB_FLOOR.ln()))
    }
}

/// Conventional label-level distillation: `KL(p_teacher || p_student)`.
pub fn kd_conventional(p_teacher: &ProbDist, p_student: &ProbDist) -> Result<f64> {
    Ok(kl_divergence(p_teacher, p_student)?.value())
}

/// [`kd_conventional`] on logits, with the gradient w.r.t. the student logits.
pub fn kd_conventional_logits(
    z_teacher: &Logits,
    z_student: &Logits,
    temperature: f64,
) -> Result<LossGrad> {
    if z_teacher.dim() != z_student.dim() {
        return Err(Error::domain(format!(
            "teacher has {} classes, student {}",
            z_teacher.dim(),
            z_student.dim()
        )));
    }
    let log_p = log_softmax(&z_teacher.scaled(temperature));
    let log_q = log_softmax(&z_student.scaled(temperature));
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(log_p.len());
    for (&lp, &lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        loss += kl_term(p, lp, lq);
        grad.push((lq.exp() - p) / temperature);
    }
    Ok(LossGrad { loss, grad })
}

/// Target knowledge: KL between the binary (target, rest) distributions.
pub fn tskd_loss(d_teacher: &DecoupledProbs, d_student: &DecoupledProbs) -> Result<f64> {
    d_teacher.check_compatible(d_student)?;
    Ok(kl_term(
        d_teacher.p_target,
        d_teacher.log_p_target,
        d_student.log_p_target,
    ) + kl_term(
        d_teacher.p_nontarget_total,
        d_teacher.log_p_nontarget_total,
        d_student.log_p_nontarget_total,
    ))
}

/// Non-target knowledge: KL between the renormalised non-target
/// distributions. Zero when K = 2 (both sides are the same point mass).
pub fn nskd_loss(d_teacher: &DecoupledProbs, d_student: &DecoupledProbs) -> Result<f64> {
    d_teacher.check_compatible(d_student)?;
    if d_teacher.num_classes == 2 {
        return Ok(0.0);
    }
    Ok(d_teacher
        .nontarget_dist
        .iter()
        .zip(&d_teacher.log_nontarget_dist)
        .zip(&d_student.log_nontarget_dist)
        .map(|((&p, &lp), &lq)| kl_term(p, lp, lq))
        .sum())
}

/// Value, components and student-logit gradient of the decoupled loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DkdLoss {
    pub loss: f64,
    pub tskd: f64,
    pub nskd: f64,
    /// The non-target weight actually applied (resolved per sample for
    /// [`Gamma::TeacherNonTarget`]).
    pub gamma: f64,
    pub grad: Vec<f64>,
}

/// `L = TSKD + γ · NSKD` from teacher and student logits.
///
/// With student probabilities `q` and teacher `p` (after temperature scaling),
/// the gradient with respect to the scaled student logits is
/// `q_τ - p_τ` at the target and `q̂_j (q_τ̄ - p_τ̄) + γ (q̂_j - p̂_j)` elsewhere.
pub fn dkd_loss(
    z_teacher: &Logits,
    z_student: &Logits,
    target: usize,
    cfg: &DkdConfig,
) -> Result<DkdLoss> {
    if z_teacher.dim() != z_student.dim() {
        return Err(Error::domain(format!(
            "teacher has {} classes, student {}",
            z_teacher.dim(),
            z_student.dim()
        )));
    }
    let t = cfg.temperature;
    let dt = decouple_logits(&z_teacher.scaled(t), target)?;
    let ds = decouple_logits(&z_student.scaled(t), target)?;
    let gamma = match cfg.gamma {
        Gamma::Value(g) => g,
        Gamma::TeacherNonTarget => dt.p_nontarget_total,
    };
    let tskd = tskd_loss(&dt, &ds)?;
    let nskd = nskd_loss(&dt, &ds)?;

    let k = dt.num_classes;
    let mut grad = vec![0.0; k];
    grad[target] = (ds.p_target - dt.p_target) / t;
    let rest_gap = ds.p_nontarget_total - dt.p_nontarget_total;
    for j in 0..k - 1 {
        let q_hat = ds.nontarget_dist[j];
        let p_hat = dt.nontarget_dist[j];
        grad[dt.nontarget_class(j)] = (q_hat * rest_gap + gamma * (q_hat - p_hat)) / t;
    }
    Ok(DkdLoss {
        loss: tskd + gamma * nskd,
        tskd,
        nskd,
        gamma,
        grad,
    })
}

/// Embedding-level distillation: `1 - cos(e_teacher, e_student)`, with the
/// gradient w.r.t. the student embedding.
pub fn cosine_embedding_kd(e_teacher: &[f64], e_student: &[f64]) -> Result<LossGrad> {
    if e_teacher.len() != e_student.len() || e_teacher.is_empty() {
        return Err(Error::domain(format!(
            "embedding dimensions {} and {} must match and be non-zero",
            e_teacher.len(),
            e_student.len()
        )));
    }
    let nt = norm(e_teacher);
    let ns = norm(e_student);
    if nt == 0.0 || ns == 0.0 {
        return Err(Error::domain("cosine distance of a zero vector"));
    }
    let cos = dot(e_teacher, e_student) / (nt * ns);
    let grad = e_teacher
        .iter()
        .zip(e_student)
        .map(|(t, s)| cos * s / (ns * ns) - t / (nt * ns))
        .collect();
    Ok(LossGrad {
        loss: 1.0 - cos,
        grad,
    })
}
