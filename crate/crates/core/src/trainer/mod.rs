//! Mini-batch SGD for teachers and distilled students.
//!
//! Teachers and students share one loop. Per sample the student's AAM
//! cross-entropy is combined with `kd_weight` times the selected distillation
//! term; gradients are averaged over the batch, then an SGD-with-momentum step
//! with decoupled weight decay is applied and the class-weight rows are
//! renormalised.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::SpeakerDataset;
use crate::error::{Error, Result};
use crate::losses::{
    aam_cross_entropy, aam_logits, aam_logits_backward, cosine_embedding_kd, dkd_loss,
    kd_conventional_logits, AamConfig, DkdConfig, KdMode,
};
use crate::models::{init_params, MlpParams};
use crate::numerics::RngStream;

/// Training accuracy below which a teacher run is flagged.
pub const TEACHER_MIN_ACCURACY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the total step count at which the learning rate is
    /// multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    pub aam: AamConfig,
    pub kd: DkdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![0.6, 0.9],
            lr_decay: 0.1,
            seed: 0,
            aam: AamConfig::default(),
            kd: DkdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("lr_milestones", "entries must lie in [0, 1]"));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 {
            return Err(Error::config("lr_decay", "must be finite and > 0"));
        }
        self.aam.validate()?;
        self.kd.validate()
    }

    pub fn total_steps(&self, num_samples: usize) -> usize {
        self.epochs * num_samples.div_ceil(self.batch_size)
    }

    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| step as f64 >= (m * total_steps as f64).floor())
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: MlpParams,
}

impl SgdState {
    pub fn new(params: &MlpParams) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← μ v + g`, `p ← p − lr (v + λ p)`, then unit-norm class rows.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.layer_dims() != params.layer_dims()
        || grads.num_classes() != params.num_classes()
        || state.velocity.layer_dims() != params.layer_dims()
        || state.velocity.num_classes() != params.num_classes()
    {
        return Err(Error::domain("gradient or optimizer state shape does not match the model"));
    }
    for ((p, g), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.velocity.slices_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *p -= lr * (*v + weight_decay * *p);
        }
    }
    params.class_weights.normalize_rows();
    Ok(())
}

/// Frozen teacher outputs for every training utterance.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    cosines: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn build(teacher: &MlpParams, dataset: &SpeakerDataset) -> Result<Self> {
        let mut cosines = Vec::with_capacity(dataset.len());
        let mut embeddings = Vec::with_capacity(dataset.len());
        for u in &dataset.utterances {
            let trace = teacher.forward(&u.features)?;
            embeddings.push(trace.embedding().to_vec());
            cosines.push(trace.cosines);
        }
        Ok(TeacherCache { cosines, embeddings })
    }
}

/// Batch-mean losses and parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub grads: MlpParams,
    pub cls: f64,
    pub kd: f64,
}

/// Gradients of `L_cls + kd_weight · L_kd` averaged over `indices`.
pub fn compute_batch_gradients(
    params: &MlpParams,
    dataset: &SpeakerDataset,
    indices: &[usize],
    teacher: Option<&TeacherCache>,
    cfg: &TrainConfig,
    margin: f64,
) -> Result<BatchGradients> {
    let kd = &cfg.kd;
    let teacher = match (kd.mode, teacher) {
        (KdMode::None, _) => None,
        (_, Some(t)) => Some(t),
        (mode, None) => {
            return Err(Error::config("kd.mode", format!("{} needs a teacher", mode.as_str())))
        }
    };
    let scale = cfg.aam.scale;
    let mut grads = params.zeros_like();
    let (mut cls_sum, mut kd_sum) = (0.0, 0.0);
    let zero_emb = vec![0.0; params.embedding_dim()];
    for &i in indices {
        let u = &dataset.utterances[i];
        let trace = params.forward(&u.features)?;
        let ce = aam_cross_entropy(&trace.cosines, u.label, scale, margin)?;
        cls_sum += ce.loss;
        let mut grad_cos = ce.grad;
        let mut grad_emb: Option<Vec<f64>> = None;
        if let Some(t) = teacher {
            let student_margin = if kd.student_margin_in_kd { margin } else { 0.0 };
            let label_grad = match kd.mode {
                KdMode::CosineEmbedding => {
                    let lg = cosine_embedding_kd(&t.embeddings[i], trace.embedding())?;
                    kd_sum += lg.loss;
                    grad_emb = Some(lg.grad);
                    None
                }
                KdMode::ConventionalKld | KdMode::Dkd => {
                    let zt = aam_logits(&t.cosines[i], u.label, scale, kd.teacher_margin)?;
                    let zs = aam_logits(&trace.cosines, u.label, scale, student_margin)?;
                    let (loss, g) = if kd.mode == KdMode::Dkd {
                        let d = dkd_loss(&zt, &zs, u.label, kd)?;
                        (d.loss, d.grad)
                    } else {
                        let lg = kd_conventional_logits(&zt, &zs, kd.temperature)?;
                        (lg.loss, lg.grad)
                    };
                    kd_sum += loss;
                    Some(aam_logits_backward(
                        &trace.cosines,
                        u.label,
                        scale,
                        student_margin,
                        &g,
                    )?)
                }
                KdMode::None => None,
            };
            // A zero weight must leave the update bit-identical to no KD.
            if kd.kd_weight != 0.0 {
                if let Some(g) = label_grad {
                    grad_cos.iter_mut().zip(&g).for_each(|(a, b)| *a += kd.kd_weight * b);
                }
                if let Some(g) = grad_emb.as_mut() {
                    g.iter_mut().for_each(|v| *v *= kd.kd_weight);
                }
            } else {
                grad_emb = None;
            }
        }
        params.backward_into(
            &trace,
            &grad_cos,
            grad_emb.as_deref().unwrap_or(&zero_emb),
            &mut grads,
        )?;
    }
    let n = indices.len() as f64;
    grads.scale(1.0 / n);
    Ok(BatchGradients {
        grads,
        cls: cls_sum / n,
        kd: kd_sum / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub kd: f64,
    pub margin: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub final_train_accuracy: f64,
    pub wall_clock_seconds: f64,
    /// Set by callers that persist the final parameters.
    pub checkpoint: Option<String>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    /// One JSON object per step. Wall clock is left out so the log is
    /// reproducible byte for byte.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.steps {
            let line = serde_json::to_string(s).expect("step logs serialise");
            writeln!(out, "{line}").map_err(|e| Error::io("<run log>", e))?;
        }
        Ok(())
    }
}

/// Fraction of utterances whose largest margin-free cosine is their own class.
pub fn train_accuracy(params: &MlpParams, dataset: &SpeakerDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    let mut correct = 0usize;
    for u in &dataset.utterances {
        let c = params.forward(&u.features)?.cosines;
        let best = (0..c.len())
            .max_by(|&a, &b| c[a].total_cmp(&c[b]).then(b.cmp(&a)))
            .unwrap();
        correct += usize::from(best == u.label);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn check_dataset(dataset: &SpeakerDataset, dims: &[usize]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if dims.first() != Some(&dataset.feature_dim()) {
        return Err(Error::config(
            "dims",
            format!(
                "input width {:?} does not match the feature dimension {}",
                dims.first(),
                dataset.feature_dim()
            ),
        ));
    }
    Ok(())
}

/// Trains a model from scratch with classification loss only.
///
/// `dims` lists layer widths from input to embedding. A final training
/// accuracy under [`TEACHER_MIN_ACCURACY`] is recorded as a warning.
pub fn train_teacher(
    dataset: &SpeakerDataset,
    dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunRecord)> {
    if cfg.kd.mode != KdMode::None {
        return Err(Error::config("kd.mode", "teacher training takes no distillation term"));
    }
    let (params, mut record) = run(None, dims, dataset, cfg)?;
    if record.final_train_accuracy < TEACHER_MIN_ACCURACY && cfg.epochs > 0 {
        let msg = format!(
            "teacher training accuracy {:.4} is below {TEACHER_MIN_ACCURACY}",
            record.final_train_accuracy
        );
        log::warn!("{msg}");
        record.warnings.push(msg);
    }
    Ok((params, record))
}

/// Trains a student of widths `dims` against a frozen teacher.
pub fn distill(
    teacher: &MlpParams,
    dims: &[usize],
    dataset: &SpeakerDataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunRecord)> {
    run(Some(teacher), dims, dataset, cfg)
}

fn run(
    teacher: Option<&MlpParams>,
    dims: &[usize],
    dataset: &SpeakerDataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunRecord)> {
    cfg.validate()?;
    check_dataset(dataset, dims)?;
    let mode = cfg.kd.mode;
    let cache = match teacher {
        Some(t) if mode != KdMode::None => {
            t.validate()?;
            if t.input_dim() != dataset.feature_dim() {
                return Err(Error::config("teacher", "teacher input width differs from the features"));
            }
            if mode == KdMode::CosineEmbedding && t.embedding_dim() != *dims.last().unwrap() {
                return Err(Error::config(
                    "student.dims",
                    format!(
                        "cosine-embedding distillation needs a student embedding of width {}, got {}",
                        t.embedding_dim(),
                        dims.last().unwrap()
                    ),
                ));
            }
            if mode.is_label_level() && t.num_classes() != dataset.num_speakers {
                return Err(Error::config(
                    "teacher",
                    format!(
                        "teacher has {} classes but the training set {}",
                        t.num_classes(),
                        dataset.num_speakers
                    ),
                ));
            }
            Some(TeacherCache::build(t, dataset)?)
        }
        None if mode != KdMode::None => {
            return Err(Error::config("kd.mode", format!("{} needs a teacher", mode.as_str())))
        }
        _ => None,
    };

    let started = Instant::now();
    let root = RngStream::new(cfg.seed);
    let mut params = init_params(dims, dataset.num_speakers, &mut root.split("init"))?;
    let mut shuffle_rng = root.split("shuffle");
    let mut state = SgdState::new(&params);
    let total_steps = cfg.total_steps(dataset.len());
    let mut steps = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let order = shuffle_rng.permutation(dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            let margin = cfg.aam.margin_at(step, total_steps);
            let lr = cfg.learning_rate_at(step, total_steps);
            let bg = compute_batch_gradients(&params, dataset, batch, cache.as_ref(), cfg, margin)?;
            let total = bg.cls + cfg.kd.kd_weight * bg.kd;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("loss became {total} (cls {}, kd {})", bg.cls, bg.kd),
                });
            }
            sgd_step(&mut params, &bg.grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
            if !params.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            steps.push(StepLog {
                step,
                total,
                cls: bg.cls,
                kd: bg.kd,
                margin,
                lr,
            });
            step += 1;
        }
    }
    let final_train_accuracy = train_accuracy(&params, dataset)?;
    Ok((
        params,
        RunRecord {
            steps,
            final_train_accuracy,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            checkpoint: None,
            warnings: Vec::new(),
        },
    ))
}
