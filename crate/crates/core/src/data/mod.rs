//! Synthetic speaker universe.
//!
//! Each speaker is a standard-normal prototype in a small latent space. An
//! utterance adds isotropic Gaussian noise to its speaker's prototype and
//! passes the result through a fixed random feature map
//! `f(v) = tanh(A v + c)`, where `A` is `feature_dim × latent_dim` with
//! entries `N(0, 1) / sqrt(latent_dim)` and `c` has entries `N(0, 0.5²)`.
//! Everything is a pure function of the seeds and arguments.

mod io;
mod trials;

pub use io::{read_dataset, read_trials, write_dataset, write_trials};
pub use trials::{make_trials, Trial, TrialList};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

const FEATURE_BIAS_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerUniverse {
    latent_dim: usize,
    feature_dim: usize,
    intra_std: f64,
    seed: u64,
    prototypes: Matrix,
    map_weight: Matrix,
    map_bias: Vec<f64>,
}

pub fn build_universe(
    num_speakers: usize,
    latent_dim: usize,
    feature_dim: usize,
    intra_std: f64,
    seed: u64,
) -> Result<SpeakerUniverse> {
    if num_speakers == 0 || latent_dim == 0 || feature_dim == 0 {
        return Err(Error::domain(format!(
            "universe dimensions must be positive (speakers {num_speakers}, latent {latent_dim}, feature {feature_dim})"
        )));
    }
    if !intra_std.is_finite() || intra_std <= 0.0 {
        return Err(Error::domain(format!(
            "intra-speaker std must be finite and > 0, got {intra_std}"
        )));
    }
    let root = RngStream::new(seed);
    let mut proto_rng = root.split("prototypes");
    let prototypes = Matrix::from_vec(
        num_speakers,
        latent_dim,
        (0..num_speakers * latent_dim).map(|_| proto_rng.normal()).collect(),
    );
    let mut map_rng = root.split("feature-map");
    let inv_sqrt = 1.0 / (latent_dim as f64).sqrt();
    let map_weight = Matrix::from_vec(
        feature_dim,
        latent_dim,
        (0..feature_dim * latent_dim)
            .map(|_| map_rng.normal() * inv_sqrt)
            .collect(),
    );
    let map_bias = (0..feature_dim)
        .map(|_| map_rng.normal() * FEATURE_BIAS_STD)
        .collect();
    Ok(SpeakerUniverse {
        latent_dim,
        feature_dim,
        intra_std,
        seed,
        prototypes,
        map_weight,
        map_bias,
    })
}

impl SpeakerUniverse {
    pub fn num_speakers(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn intra_std(&self) -> f64 {
        self.intra_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn feature_map(&self, latent: &[f64]) -> Vec<f64> {
        let mut f = self.map_weight.matvec(latent);
        f.iter_mut()
            .zip(&self.map_bias)
            .for_each(|(v, b)| *v = (*v + b).tanh());
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Utterances with dense labels `0..num_speakers`, grouped by speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDataset {
    pub utterances: Vec<Utterance>,
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Universe id of each dense label.
    pub speaker_ids: Vec<usize>,
}

impl SpeakerDataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.len())
    }
}

/// Draws `utterances_per_speaker` utterances for each listed speaker.
/// Label `i` in the result is `speaker_ids[i]`.
pub fn sample_dataset(
    universe: &SpeakerUniverse,
    speaker_ids: &[usize],
    utterances_per_speaker: usize,
    seed: u64,
) -> Result<SpeakerDataset> {
    if speaker_ids.is_empty() {
        return Err(Error::domain("no speakers requested"));
    }
    if utterances_per_speaker == 0 {
        return Err(Error::domain("utterances_per_speaker must be >= 1"));
    }
    let mut seen = HashSet::with_capacity(speaker_ids.len());
    for &id in speaker_ids {
        if id >= universe.num_speakers() {
            return Err(Error::domain(format!(
                "speaker {id} not in a universe of {}",
                universe.num_speakers()
            )));
        }
        if !seen.insert(id) {
            return Err(Error::domain(format!("speaker {id} requested twice")));
        }
    }
    let mut rng = RngStream::new(seed).split("utterances");
    let mut utterances = Vec::with_capacity(speaker_ids.len() * utterances_per_speaker);
    let mut latent = vec![0.0; universe.latent_dim];
    for (label, &id) in speaker_ids.iter().enumerate() {
        let proto = universe.prototypes.row(id);
        for _ in 0..utterances_per_speaker {
            for (l, p) in latent.iter_mut().zip(proto) {
                *l = p + universe.intra_std * rng.normal();
            }
            utterances.push(Utterance {
                features: universe.feature_map(&latent),
                label,
            });
        }
    }
    Ok(SpeakerDataset {
        utterances,
        num_speakers: speaker_ids.len(),
        utterances_per_speaker,
        speaker_ids: speaker_ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_is_deterministic() {
        let a = build_universe(20, 4, 6, 0.5, 7).unwrap();
        let b = build_universe(20, 4, 6, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_universe(20, 4, 6, 0.5, 8).unwrap());
    }

    #[test]
    fn universe_rejects_degenerate_arguments() {
        assert!(build_universe(20, 4, 6, 0.0, 7).is_err());
        assert!(build_universe(0, 4, 6, 0.5, 7).is_err());
        assert!(build_universe(20, 0, 6, 0.5, 7).is_err());
    }

    #[test]
    fn prototype_row_means_are_near_zero() {
        // Each row mean over 8 coordinates has std 1/sqrt(8); the mean of all
        // 500 row means has std 1/sqrt(4000), and 5/sqrt(4000) is a 5σ bound.
        let u = build_universe(500, 8, 24, 0.6, 42).unwrap();
        let bound = 5.0 / (8.0f64 * 500.0).sqrt();
        let row_means: Vec<f64> = (0..500)
            .map(|r| u.prototypes().row(r).iter().sum::<f64>() / 8.0)
            .collect();
        let grand = row_means.iter().sum::<f64>() / 500.0;
        assert!(grand.abs() < bound, "grand mean {grand} exceeds {bound}");
        // individual rows: 5σ with σ = 1/sqrt(8)
        assert!(row_means.iter().all(|m| m.abs() < 5.0 / 8f64.sqrt()));
    }

    #[test]
    fn dataset_counts_and_labels() {
        let u = build_universe(30, 4, 6, 0.5, 1).unwrap();
        let ids: Vec<usize> = (5..15).collect();
        let d = sample_dataset(&u, &ids, 10, 2).unwrap();
        assert_eq!(d.len(), 100);
        for label in 0..10 {
            assert_eq!(d.utterances.iter().filter(|x| x.label == label).count(), 10);
        }
        assert_eq!(d.speaker_ids, ids);
        assert_eq!(d, sample_dataset(&u, &ids, 10, 2).unwrap());
        assert!(d
            .utterances
            .iter()
            .all(|x| x.features.iter().all(|v| v.abs() < 1.0)));
    }

    #[test]
    fn fixed_budget_split() {
        let u = build_universe(600, 8, 24, 0.6, 1).unwrap();
        let a = sample_dataset(&u, &(0..50).collect::<Vec<_>>(), 100, 3).unwrap();
        let b = sample_dataset(&u, &(0..500).collect::<Vec<_>>(), 10, 3).unwrap();
        assert_eq!(a.len(), 5000);
        assert_eq!(b.len(), 5000);
    }

    #[test]
    fn dataset_rejects_bad_speakers() {
        let u = build_universe(10, 2, 3, 0.5, 1).unwrap();
        assert!(sample_dataset(&u, &[1, 2, 1], 3, 0).is_err());
        assert!(sample_dataset(&u, &[10], 3, 0).is_err());
        assert!(sample_dataset(&u, &[1], 0, 0).is_err());
    }
}
