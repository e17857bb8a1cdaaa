//! Cosine scoring of verification trials and the EER / minDCF metrics.
//!
//! Conventions. A trial is accepted when `score >= threshold`. With the
//! distinct scores sorted as `s_1 < … < s_n`, operating point `j` (for
//! `j = 0..=n`) rejects exactly the `j` lowest distinct scores; its threshold
//! is `s_1` for `j = 0`, the midpoint `(s_j + s_{j+1}) / 2` in between, and the
//! next float above `s_n` for `j = n`. False-acceptance rate falls and
//! false-rejection rate rises with `j`.
//!
//! EER is taken at the first operating point where FRR >= FAR; if the two are
//! not equal there, it is linearly interpolated (in operating-point index)
//! between that point and its predecessor. minDCF is the smallest normalised
//! detection cost over all operating points, with ties going to the lower
//! threshold.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SpeakerDataset, TrialList};
use crate::error::{Error, Result};
use crate::models::MlpParams;
use crate::numerics::{dot, norm};

/// Detection-cost parameters used for every reported minDCF.
pub const P_TARGET: f64 = 0.01;
pub const C_FA: f64 = 1.0;
pub const C_MISS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::domain(format!(
                "need equal, non-zero numbers of scores and labels (got {} and {})",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::domain("scores contain NaN"));
        }
        Ok(ScoredTrials { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn num_target(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn num_nontarget(&self) -> usize {
        self.labels.len() - self.num_target()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.num_target() == 0 || self.num_nontarget() == 0 {
            return Err(Error::domain(
                "EER/minDCF need at least one target and one non-target trial",
            ));
        }
        Ok(())
    }
}

/// One point on the empirical detection curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// All `n + 1` operating points, in increasing threshold order.
pub fn operating_points(st: &ScoredTrials) -> Result<Vec<OperatingPoint>> {
    st.require_both_classes()?;
    let mut order: Vec<usize> = (0..st.scores.len()).collect();
    order.sort_by(|&a, &b| st.scores[a].total_cmp(&st.scores[b]));

    // (score, targets, non-targets) per distinct score
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &order {
        let s = st.scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {}
            _ => groups.push((s, 0, 0)),
        }
        let g = groups.last_mut().unwrap();
        if st.labels[i] {
            g.1 += 1;
        } else {
            g.2 += 1;
        }
    }
    let n_t = st.num_target() as f64;
    let n_n = st.num_nontarget() as f64;
    let mut points = Vec::with_capacity(groups.len() + 1);
    let (mut rejected_t, mut rejected_n) = (0usize, 0usize);
    for j in 0..=groups.len() {
        let threshold = if j == 0 {
            groups[0].0
        } else if j == groups.len() {
            groups[j - 1].0.next_up()
        } else {
            0.5 * (groups[j - 1].0 + groups[j].0)
        };
        points.push(OperatingPoint {
            threshold,
            far: (st.num_nontarget() - rejected_n) as f64 / n_n,
            frr: rejected_t as f64 / n_t,
        });
        if j < groups.len() {
            rejected_t += groups[j].1;
            rejected_n += groups[j].2;
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// EER from an operating-point sequence (see the module docs).
pub fn eer_from_points(points: &[OperatingPoint]) -> EerResult {
    let i = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("the last operating point has FRR = 1 >= FAR = 0");
    let p = points[i];
    let result = if p.frr == p.far || i == 0 {
        EerResult {
            eer: p.far,
            threshold: p.threshold,
        }
    } else {
        let q = points[i - 1];
        let d_prev = q.far - q.frr;
        let d_here = p.far - p.frr;
        let t = d_prev / (d_prev - d_here);
        EerResult {
            eer: q.far + t * (p.far - q.far),
            threshold: q.threshold + t * (p.threshold - q.threshold),
        }
    };
    if result.eer > 0.5 {
        log::warn!(
            "EER {} above 0.5: scores rank non-targets above targets",
            result.eer
        );
    }
    result
}

pub fn compute_eer(st: &ScoredTrials) -> Result<EerResult> {
    Ok(eer_from_points(&operating_points(st)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfResult {
    pub min_dcf: f64,
    pub threshold: f64,
}

/// Normalised detection cost of one operating point.
pub fn normalized_dcf(far: f64, frr: f64, p_target: f64, c_fa: f64, c_miss: f64) -> f64 {
    let cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far;
    cost / (c_miss * p_target).min(c_fa * (1.0 - p_target))
}

pub fn compute_min_dcf(st: &ScoredTrials, p_target: f64, c_fa: f64, c_miss: f64) -> Result<DcfResult> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::domain(format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_fa > 0.0 && c_miss > 0.0) {
        return Err(Error::domain("detection costs must be positive"));
    }
    let points = operating_points(st)?;
    let mut best = DcfResult {
        min_dcf: f64::INFINITY,
        threshold: f64::NAN,
    };
    for p in &points {
        let c = normalized_dcf(p.far, p.frr, p_target, c_fa, c_miss);
        if c < best.min_dcf {
            best = DcfResult {
                min_dcf: c,
                threshold: p.threshold,
            };
        }
    }
    Ok(best)
}

/// Cosine score of every trial, using the model's raw embeddings.
pub fn score_trials(
    params: &MlpParams,
    dataset: &SpeakerDataset,
    trials: &TrialList,
) -> Result<ScoredTrials> {
    let n = dataset.len();
    let mut needed = vec![false; n];
    for t in &trials.trials {
        if t.enroll >= n || t.test >= n {
            return Err(Error::domain(format!(
                "trial ({}, {}) references an utterance outside 0..{n}",
                t.enroll, t.test
            )));
        }
        needed[t.enroll] = true;
        needed[t.test] = true;
    }
    let embeddings: Vec<Option<Vec<f64>>> = dataset
        .utterances
        .par_iter()
        .zip(needed.par_iter())
        .enumerate()
        .map(|(id, (u, &need))| {
            if !need {
                return Ok(None);
            }
            let e = params.embed(&u.features)?;
            let nrm = norm(&e);
            if nrm == 0.0 {
                return Err(Error::degenerate(format!("utterance {id} has a zero embedding")));
            }
            Ok(Some(e.into_iter().map(|v| v / nrm).collect()))
        })
        .collect::<Result<_>>()?;
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            dot(
                embeddings[t.enroll].as_ref().unwrap(),
                embeddings[t.test].as_ref().unwrap(),
            )
        })
        .collect();
    let labels = trials.trials.iter().map(|t| t.is_target).collect();
    ScoredTrials::new(scores, labels)
}

/// Verification metrics of one model on one trial list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_at_eer: f64,
    pub threshold_at_min_dcf: f64,
    pub num_trials: usize,
    pub num_target: usize,
    pub num_nontarget: usize,
}

pub fn report(st: &ScoredTrials) -> Result<EvalReport> {
    let eer = compute_eer(st)?;
    let dcf = compute_min_dcf(st, P_TARGET, C_FA, C_MISS)?;
    Ok(EvalReport {
        eer: eer.eer,
        min_dcf: dcf.min_dcf,
        threshold_at_eer: eer.threshold,
        threshold_at_min_dcf: dcf.threshold,
        num_trials: st.scores.len(),
        num_target: st.num_target(),
        num_nontarget: st.num_nontarget(),
    })
}

pub fn evaluate(params: &MlpParams, dataset: &SpeakerDataset, trials: &TrialList) -> Result<EvalReport> {
    report(&score_trials(params, dataset, trials)?)
}

/// `enroll_id<TAB>test_id<TAB>score`, one line per trial.
pub fn write_scores<W: Write>(trials: &TrialList, st: &ScoredTrials, mut out: W) -> Result<()> {
    for (t, s) in trials.trials.iter().zip(&st.scores) {
        writeln!(out, "{}\t{}\t{s:.16e}", t.enroll, t.test).map_err(|e| Error::io("<scores>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_universe, make_trials, sample_dataset, Trial};
    use crate::models::init_params;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn st(targets: &[f64], nontargets: &[f64]) -> ScoredTrials {
        let mut s = targets.to_vec();
        s.extend_from_slice(nontargets);
        let mut l = vec![true; targets.len()];
        l.extend(vec![false; nontargets.len()]);
        ScoredTrials::new(s, l).unwrap()
    }

    /// Counts acceptances at every candidate threshold directly.
    fn brute_force_points(st: &ScoredTrials) -> Vec<OperatingPoint> {
        let mut distinct = st.scores().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut thresholds = vec![distinct[0]];
        thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        thresholds.push(distinct.last().unwrap().next_up());
        let n_t = st.num_target() as f64;
        let n_n = st.num_nontarget() as f64;
        thresholds
            .into_iter()
            .map(|th| {
                let mut fa = 0;
                let mut miss = 0;
                for (&s, &l) in st.scores().iter().zip(st.labels()) {
                    if l && s < th {
                        miss += 1;
                    }
                    if !l && s >= th {
                        fa += 1;
                    }
                }
                OperatingPoint {
                    threshold: th,
                    far: fa as f64 / n_n,
                    frr: miss as f64 / n_t,
                }
            })
            .collect()
    }

    #[test]
    fn perfect_separation() {
        let s = st(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_eer(&s).unwrap().eer, 0.0);
        assert_eq!(compute_min_dcf(&s, P_TARGET, C_FA, C_MISS).unwrap().min_dcf, 0.0);
    }

    #[test]
    fn interleaved_crossing() {
        let s = st(&[0.4, 0.6], &[0.3, 0.5]);
        let r = compute_eer(&s).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.eer, eer_from_points(&brute_force_points(&s)).eer);
    }

    #[test]
    fn anti_separation_reports_one() {
        let s = st(&[0.1, 0.2], &[0.9, 0.8]);
        assert_eq!(compute_eer(&s).unwrap().eer, 1.0);
    }

    #[test]
    fn constant_scores_give_unit_min_dcf() {
        let s = st(&[0.5; 3], &[0.5; 7]);
        // accept-all costs 0.99/0.01 = 99, reject-all 0.01/0.01 = 1
        assert_eq!(compute_min_dcf(&s, P_TARGET, C_FA, C_MISS).unwrap().min_dcf, 1.0);
    }

    #[test]
    fn interpolated_eer() {
        // FAR 1, 2/3, 2/3, 1/3, 0, 0 and FRR 0, 0, 1/2, 1/2, 1/2, 1:
        // crossing between j = 2 and j = 3 at t = 1/2
        let s = st(&[0.2, 0.9], &[0.1, 0.5, 0.6]);
        let pts = operating_points(&s).unwrap();
        let r = eer_from_points(&pts);
        let i = pts.iter().position(|p| p.frr >= p.far).unwrap();
        let lo = pts[i - 1].frr.min(pts[i].far);
        let hi = pts[i - 1].far.max(pts[i].frr);
        assert!(r.eer >= lo && r.eer <= hi);
        assert!((r.eer - 0.5).abs() < 1e-15);
        assert!((r.threshold - 0.5 * (0.35 + 0.55)).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = ScoredTrials::new(vec![0.1, 0.2], vec![true, true]).unwrap();
        assert!(compute_eer(&s).is_err());
        assert!(compute_min_dcf(&s, 0.01, 1.0, 1.0).is_err());
        assert!(ScoredTrials::new(vec![], vec![]).is_err());
        assert!(ScoredTrials::new(vec![0.1], vec![true, false]).is_err());
        let s = st(&[0.3], &[0.1]);
        assert!(compute_min_dcf(&s, 1.0, 1.0, 1.0).is_err());
        assert!(compute_min_dcf(&s, 0.5, 0.0, 1.0).is_err());
    }

    fn grid_trials() -> impl Strategy<Value = ScoredTrials> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1024i32..=1024, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_filter_map("both classes", |(s, mut l)| {
                    if l.iter().all(|&x| x) {
                        l[0] = false;
                    }
                    if l.iter().all(|&x| !x) {
                        l[0] = true;
                    }
                    ScoredTrials::new(s.iter().map(|&v| v as f64 / 1024.0).collect(), l).ok()
                })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_transform_invariant(s in grid_trials()) {
            let pts = operating_points(&s).unwrap();
            prop_assert_eq!(&pts, &brute_force_points(&s));
            let eer = compute_eer(&s).unwrap().eer;
            let dcf = compute_min_dcf(&s, P_TARGET, C_FA, C_MISS).unwrap().min_dcf;
            for f in [|x: f64| 3.0 * x + 0.5, |x: f64| x * x * x] {
                let t = ScoredTrials::new(s.scores().iter().map(|&x| f(x)).collect(), s.labels().to_vec()).unwrap();
                prop_assert_eq!(compute_eer(&t).unwrap().eer, eer);
                prop_assert_eq!(compute_min_dcf(&t, P_TARGET, C_FA, C_MISS).unwrap().min_dcf, dcf);
            }
            let flipped = ScoredTrials::new(
                s.scores().iter().map(|x| -x).collect(),
                s.labels().iter().map(|l| !l).collect(),
            ).unwrap();
            prop_assert!((compute_eer(&flipped).unwrap().eer - eer).abs() < 1e-12);
            let accept_all = normalized_dcf(1.0, 0.0, P_TARGET, C_FA, C_MISS);
            let reject_all = normalized_dcf(0.0, 1.0, P_TARGET, C_FA, C_MISS);
            prop_assert!(dcf <= accept_all.min(reject_all));
        }
    }

    #[test]
    fn cosine_scores_match_direct_recomputation() {
        let u = build_universe(6, 3, 5, 0.5, 1).unwrap();
        let d = sample_dataset(&u, &[0, 1, 2, 3, 4, 5], 4, 2).unwrap();
        let p = init_params(&[5, 7, 4], 6, &mut RngStream::new(3)).unwrap();
        let trials = make_trials(&d, 10, 10, 4).unwrap();
        let s = score_trials(&p, &d, &trials).unwrap();
        for (t, score) in trials.trials.iter().zip(s.scores()) {
            let a = p.embed(&d.utterances[t.enroll].features).unwrap();
            let b = p.embed(&d.utterances[t.test].features).unwrap();
            let direct = dot(&a, &b) / (norm(&a) * norm(&b));
            assert!((direct - score).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_and_orthogonal_embeddings() {
        let u = build_universe(2, 2, 2, 0.5, 1).unwrap();
        let mut d = sample_dataset(&u, &[0, 1], 2, 2).unwrap();
        d.utterances[0].features = vec![1.0, 0.0];
        d.utterances[1].features = vec![2.0, 0.0];
        d.utterances[2].features = vec![0.0, 3.0];
        let mut p = init_params(&[2, 2], 2, &mut RngStream::new(0)).unwrap();
        p.layers[0].weight = crate::numerics::Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let trials = TrialList {
            trials: vec![
                Trial { enroll: 0, test: 1, is_target: true },
                Trial { enroll: 0, test: 2, is_target: false },
            ],
        };
        let s = score_trials(&p, &d, &trials).unwrap();
        assert_eq!(s.scores(), &[1.0, 0.0]);

        d.utterances[3].features = vec![0.0, 0.0];
        let bad = TrialList {
            trials: vec![Trial { enroll: 3, test: 1, is_target: false }],
        };
        let err = score_trials(&p, &d, &bad).unwrap_err();
        assert!(err.to_string().contains("utterance 3"));
        let out_of_range = TrialList {
            trials: vec![Trial { enroll: 9, test: 1, is_target: false }],
        };
        assert!(score_trials(&p, &d, &out_of_range).is_err());
    }
}
