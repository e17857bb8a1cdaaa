use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::KdMode;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub intra_std: f64,
    pub universe_speakers: usize,
    /// Speakers `0..train_speakers` form the training pool; the next
    /// `eval_speakers` are held out for verification trials.
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub train_utterances_per_speaker: usize,
    /// When set, the teacher trains on its own draw of this many utterances
    /// per training speaker instead of the student's training set.
    pub teacher_utterances_per_speaker: Option<usize>,
    pub eval_utterances_per_speaker: usize,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub universe_seed: u64,
    pub sample_seed: u64,
    pub trial_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            latent_dim: 8,
            feature_dim: 24,
            intra_std: 0.3,
            universe_speakers: 600,
            train_speakers: 500,
            eval_speakers: 100,
            train_utterances_per_speaker: 10,
            teacher_utterances_per_speaker: Some(40),
            eval_utterances_per_speaker: 10,
            target_trials: 3000,
            nontarget_trials: 3000,
            universe_seed: 42,
            sample_seed: 7,
            trial_seed: 11,
        }
    }
}

macro_rules! model_section {
    ($name:ident, $dims:expr, $train:expr) => {
        /// Layer widths after the input (the last one is the embedding) and
        /// the training schedule for one model role.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub dims: Vec<usize>,
            pub train: TrainConfig,
        }

        impl Default for $name {
            fn default() -> Self {
                $name {
                    dims: $dims,
                    train: $train,
                }
            }
        }

        impl $name {
            /// Full width list including the input.
            pub fn full_dims(&self, feature_dim: usize) -> Vec<usize> {
                std::iter::once(feature_dim).chain(self.dims.iter().copied()).collect()
            }
        }
    };
}

model_section!(
    TeacherSection,
    vec![256, 128, 32],
    TrainConfig {
        epochs: 15,
        seed: 1,
        ..TrainConfig::default()
    }
);
model_section!(StudentSection, vec![32, 32], TrainConfig::default());

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub gammas: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            gammas: vec![0.0, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub budget: usize,
    pub speaker_counts: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            budget: 5000,
            speaker_counts: vec![50, 100, 250, 500],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: Option<PathBuf>,
    /// Student run seeds for `distill`, `sweep-speakers` and `ablate-gamma`.
    pub seeds: Vec<u64>,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub ablation: AblationSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: None,
            seeds: vec![1, 2, 3, 4, 5],
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            ablation: AblationSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<config>", e.to_string().trim_end()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { message, .. } => Error::config(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.latent_dim == 0 || d.feature_dim == 0 {
            return Err(Error::config("data", "latent_dim and feature_dim must be positive"));
        }
        if !d.intra_std.is_finite() || d.intra_std <= 0.0 {
            return Err(Error::config("data.intra_std", "must be finite and > 0"));
        }
        if d.train_speakers == 0 || d.eval_speakers == 0 {
            return Err(Error::config("data", "train_speakers and eval_speakers must be positive"));
        }
        if d.train_speakers + d.eval_speakers > d.universe_speakers {
            return Err(Error::config(
                "data.universe_speakers",
                format!(
                    "{} train + {} eval speakers do not fit in a universe of {}",
                    d.train_speakers, d.eval_speakers, d.universe_speakers
                ),
            ));
        }
        if d.train_utterances_per_speaker == 0 {
            return Err(Error::config("data.train_utterances_per_speaker", "must be >= 1"));
        }
        if d.teacher_utterances_per_speaker == Some(0) {
            return Err(Error::config("data.teacher_utterances_per_speaker", "must be >= 1"));
        }
        if d.eval_utterances_per_speaker < 2 {
            return Err(Error::config(
                "data.eval_utterances_per_speaker",
                "target trials need at least 2 utterances per speaker",
            ));
        }
        if d.target_trials == 0 || d.nontarget_trials == 0 {
            return Err(Error::config("data", "both trial counts must be positive"));
        }
        if d.eval_speakers < 2 {
            return Err(Error::config("data.eval_speakers", "non-target trials need 2 speakers"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        for (name, dims, train) in [
            ("teacher", &self.teacher.dims, &self.teacher.train),
            ("student", &self.student.dims, &self.student.train),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::config(
                    format!("{name}.dims"),
                    "needs at least one positive width",
                ));
            }
            train.validate().map_err(|e| prefix(e, name))?;
        }
        if self.teacher.train.kd.mode != KdMode::None {
            return Err(Error::config("teacher.train.kd.mode", "teachers are trained without distillation"));
        }
        if self.ablation.gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::config("ablation.gammas", "entries must be finite and >= 0"));
        }
        let s = &self.sweep;
        for &k in &s.speaker_counts {
            if k == 0 || !s.budget.is_multiple_of(k) {
                return Err(Error::config(
                    "sweep.speaker_counts",
                    format!("{k} does not divide the budget {}", s.budget),
                ));
            }
            if k > d.train_speakers {
                return Err(Error::config(
                    "sweep.speaker_counts",
                    format!("{k} exceeds the {} training speakers", d.train_speakers),
                ));
            }
        }
        if s.speaker_counts.is_empty() {
            return Err(Error::config("sweep.speaker_counts", "must not be empty"));
        }
        Ok(())
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, message } => {
            Error::config(format!("{section}.train.{field}"), message)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "seeds = [3]\n[data]\nintra_std = 0.4\n[student]\ndims = [8, 4]\n[student.train]\nepochs = 2\n[student.train.kd]\nmode = \"dkd\"\ngamma = \"1-p_target\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.data.intra_std, 0.4);
        assert_eq!(cfg.student.train.kd.temperature, 2.0);
        assert_eq!(cfg.data.latent_dim, 8);
        assert_eq!(cfg.student.train.epochs, 2);
        assert_eq!(cfg.student.train.batch_size, 64);
        assert_eq!(cfg.student.train.kd.mode, KdMode::Dkd);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml_str("[data]\nlatent = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("latent"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert!(ExperimentConfig::from_toml_str("[student.train]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.speaker_counts = vec![50, 300];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("sweep.speaker_counts"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.student.train.momentum = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("student.train.momentum"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.data.train_speakers = 550;
        assert!(cfg.validate().is_err());
    }
}
