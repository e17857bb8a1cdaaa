//! Training objectives and their analytic gradients.
//!
//! Label-level distillation losses take teacher logits as constants; every
//! gradient returned here is with respect to student quantities only.

mod classification;
mod kd;

pub use classification::{
    aam_cross_entropy, aam_logits, aam_logits_backward, cross_entropy, margin_at_step, AamConfig,
};
pub use kd::{
    cosine_embedding_kd, decouple, decouple_logits, dkd_loss, kd_conventional,
    kd_conventional_logits, nskd_loss, tskd_loss, DecoupledProbs, DkdLoss,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to student probabilities inside logarithms.
pub const STUDENT_PROB_FLOOR: f64 = 1e-30;

/// A scalar loss together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Which distillation term is added to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    #[default]
    None,
    CosineEmbedding,
    ConventionalKld,
    Dkd,
}

impl KdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            KdMode::None => "none",
            KdMode::CosineEmbedding => "cosine_embedding",
            KdMode::ConventionalKld => "conventional_kld",
            KdMode::Dkd => "dkd",
        }
    }

    /// True for the modes that need teacher class logits.
    pub fn is_label_level(self) -> bool {
        matches!(self, KdMode::ConventionalKld | KdMode::Dkd)
    }
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KdMode::None),
            "cosine_embedding" | "cos" => Ok(KdMode::CosineEmbedding),
            "conventional_kld" | "kld" => Ok(KdMode::ConventionalKld),
            "dkd" => Ok(KdMode::Dkd),
            other => Err(Error::config("kd.mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Weight on the non-target term of the decoupled loss.
///
/// `TeacherNonTarget` uses the per-sample teacher mass `1 - p_τ` outside the
/// target, which turns the decoupled loss back into plain KL distillation.
/// In config files it is written as the string `"1-p_target"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Value(f64),
    TeacherNonTarget,
}

impl Gamma {
    const TEACHER_NON_TARGET: &'static str = "1-p_target";
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::Value(2.0)
    }
}

impl std::fmt::Display for Gamma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gamma::Value(g) => write!(f, "{g}"),
            Gamma::TeacherNonTarget => f.write_str(Self::TEACHER_NON_TARGET),
        }
    }
}

impl std::str::FromStr for Gamma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == Self::TEACHER_NON_TARGET {
            return Ok(Gamma::TeacherNonTarget);
        }
        s.parse::<f64>()
            .map(Gamma::Value)
            .map_err(|_| Error::config("kd.gamma", format!("expected a number or \"{}\", got `{s}`", Self::TEACHER_NON_TARGET)))
    }
}

impl Serialize for Gamma {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Value(g) => s.serialize_f64(*g),
            Gamma::TeacherNonTarget => s.serialize_str(Self::TEACHER_NON_TARGET),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => Ok(Gamma::Value(g)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Distillation settings for the student objective
/// `L = L_cls + kd_weight · L_kd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DkdConfig {
    pub mode: KdMode,
    pub gamma: Gamma,
    pub kd_weight: f64,
    /// Divides teacher and student logits before the softmax. 1 leaves the
    /// losses untouched. No T² rescaling is applied.
    pub temperature: f64,
    /// Margin applied to the teacher's target logit when forming KD targets.
    pub teacher_margin: f64,
    /// Apply the scheduled AAM margin to the student's logits inside the KD term too.
    pub student_margin_in_kd: bool,
}

impl Default for DkdConfig {
    fn default() -> Self {
        DkdConfig {
            mode: KdMode::None,
            gamma: Gamma::default(),
            kd_weight: 1.0,
            temperature: 2.0,
            teacher_margin: 0.0,
            student_margin_in_kd: false,
        }
    }
}

impl DkdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Gamma::Value(g) = self.gamma {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::config("kd.gamma", format!("must be finite and >= 0, got {g}")));
            }
        }
        if !self.kd_weight.is_finite() || self.kd_weight < 0.0 {
            return Err(Error::config(
                "kd.kd_weight",
                format!("must be finite and >= 0, got {}", self.kd_weight),
            ));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::config(
                "kd.temperature",
                format!("must be > 0, got {}", self.temperature),
            ));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.teacher_margin) {
            return Err(Error::config("kd.teacher_margin", "must lie in [0, pi/2)"));
        }
        Ok(())
    }
}
