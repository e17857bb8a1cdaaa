use std::collections::HashSet;

use super::SpeakerDataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Unordered utterance pair, stored with `enroll < test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_target(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn num_nontarget(&self) -> usize {
        self.len() - self.num_target()
    }
}

/// Samples verification trials from `dataset`.
///
/// Pairs of each kind are drawn uniformly without replacement. If more pairs
/// are requested than exist, every pair is used once and the remainder is
/// drawn uniformly with replacement (a warning is logged). The final list is
/// shuffled.
pub fn make_trials(
    dataset: &SpeakerDataset,
    num_target: usize,
    num_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let n = dataset.len();
    let labels: Vec<usize> = dataset.utterances.iter().map(|u| u.label).collect();
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_speakers];
    for (i, &l) in labels.iter().enumerate() {
        by_speaker[l].push(i);
    }
    if num_target > 0 {
        if let Some(s) = by_speaker.iter().position(|u| u.len() < 2) {
            return Err(Error::domain(format!(
                "speaker {s} has {} utterance(s); target trials need at least 2",
                by_speaker[s].len()
            )));
        }
    }
    let same_pairs: usize = by_speaker.iter().map(|u| u.len() * (u.len().saturating_sub(1)) / 2).sum();
    let all_pairs = n * n.saturating_sub(1) / 2;
    let cross_pairs = all_pairs - same_pairs;
    if num_nontarget > 0 && cross_pairs == 0 {
        return Err(Error::domain("non-target trials need at least two speakers"));
    }

    let root = RngStream::new(seed);
    let mut rng = root.split("target-trials");
    let mut same: Vec<Trial> = Vec::with_capacity(same_pairs);
    for utts in &by_speaker {
        for (a, &i) in utts.iter().enumerate() {
            for &j in &utts[a + 1..] {
                same.push(Trial {
                    enroll: i.min(j),
                    test: i.max(j),
                    is_target: true,
                });
            }
        }
    }
    let mut trials = take_pairs(same, num_target, &mut rng, "target");

    let mut rng = root.split("nontarget-trials");
    // Enumerate when the request is a sizeable fraction of the pair space,
    // otherwise reject-sample distinct pairs.
    if num_nontarget > 0 && (num_nontarget >= cross_pairs / 2 || cross_pairs <= 200_000) {
        let mut cross = Vec::with_capacity(cross_pairs);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    cross.push(Trial {
                        enroll: i,
                        test: j,
                        is_target: false,
                    });
                }
            }
        }
        trials.extend(take_pairs(cross, num_nontarget, &mut rng, "non-target"));
    } else if num_nontarget > 0 {
        let mut chosen = HashSet::with_capacity(num_nontarget);
        while chosen.len() < num_nontarget {
            let i = rng.below(n);
            let j = rng.below(n);
            if labels[i] == labels[j] {
                continue;
            }
            let t = Trial {
                enroll: i.min(j),
                test: i.max(j),
                is_target: false,
            };
            if chosen.insert(t) {
                trials.push(t);
            }
        }
    }

    root.split("trial-order").shuffle(&mut trials);
    Ok(TrialList { trials })
}

fn take_pairs(mut pool: Vec<Trial>, want: usize, rng: &mut RngStream, kind: &str) -> Vec<Trial> {
    if want == 0 {
        return Vec::new();
    }
    if want <= pool.len() {
        // partial Fisher–Yates
        for i in 0..want {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(want);
        return pool;
    }
    log::warn!(
        "requested {want} {kind} trials but only {} distinct pairs exist; sampling the rest with replacement",
        pool.len()
    );
    let mut out = pool.clone();
    while out.len() < want {
        out.push(pool[rng.below(pool.len())]);
    }
    out
}
