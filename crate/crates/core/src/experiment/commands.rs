use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::CSV_VERSION_LINE;
use crate::data::{
    build_universe, make_trials, read_dataset, read_trials, sample_dataset, write_dataset,
    write_trials, SpeakerDataset, SpeakerUniverse, TrialList,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report, score_trials, write_scores, EvalReport};
use crate::losses::{Gamma, KdMode};
use crate::models::MlpParams;
use crate::numerics::RngStream;
use crate::trainer::{self, RunRecord, TrainConfig};

/// Training set, held-out evaluation set and its trials.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub universe: SpeakerUniverse,
    pub train: SpeakerDataset,
    pub teacher_train: SpeakerDataset,
    pub eval: SpeakerDataset,
    pub trials: TrialList,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let d = &cfg.data;
    let universe = build_universe(
        d.universe_speakers,
        d.latent_dim,
        d.feature_dim,
        d.intra_std,
        d.universe_seed,
    )?;
    let train_ids: Vec<usize> = (0..d.train_speakers).collect();
    let eval_ids: Vec<usize> = (d.train_speakers..d.train_speakers + d.eval_speakers).collect();
    let train = sample_dataset(&universe, &train_ids, d.train_utterances_per_speaker, d.sample_seed)?;
    let teacher_train = match d.teacher_utterances_per_speaker {
        Some(n) => {
            let seed = RngStream::new(d.sample_seed).split("teacher").next_u64();
            sample_dataset(&universe, &train_ids, n, seed)?
        }
        None => train.clone(),
    };
    let eval_seed = RngStream::new(d.sample_seed).split("eval").next_u64();
    let eval = sample_dataset(&universe, &eval_ids, d.eval_utterances_per_speaker, eval_seed)?;
    check_disjoint(&train, &eval)?;
    check_disjoint(&teacher_train, &eval)?;
    let trials = make_trials(&eval, d.target_trials, d.nontarget_trials, d.trial_seed)?;
    Ok(PreparedData {
        universe,
        train,
        teacher_train,
        eval,
        trials,
    })
}

fn check_disjoint(train: &SpeakerDataset, eval: &SpeakerDataset) -> Result<()> {
    let train_ids: HashSet<usize> = train.speaker_ids.iter().copied().collect();
    if let Some(id) = eval.speaker_ids.iter().find(|id| train_ids.contains(id)) {
        return Err(Error::data(format!("speaker {id} is in both the training and evaluation sets")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestSeeds {
    pub universe: u64,
    pub sample: u64,
    pub trials: u64,
    pub teacher: u64,
    pub runs: Vec<u64>,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: ManifestSeeds,
    pub train_eval_speakers_disjoint: bool,
    /// sha256 of each output, keyed by path relative to the output directory.
    pub files: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

struct Output {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Output {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Output {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn finish(self, cfg: &ExperimentConfig, command: &str) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            seeds: ManifestSeeds {
                universe: cfg.data.universe_seed,
                sample: cfg.data.sample_seed,
                trials: cfg.data.trial_seed,
                teacher: cfg.teacher.train.seed,
                runs: cfg.seeds.clone(),
            },
            train_eval_speakers_disjoint: true,
            files: self.files,
            // output location omitted so manifests match across directories
            config: ExperimentConfig {
                output_dir: None,
                ..cfg.clone()
            },
        };
        let path = self.root.join(format!("manifest-{command}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn to_bytes<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes the training set, evaluation set and trial list.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let data = prepare_data(cfg)?;
    let mut o = Output::new(out)?;
    o.write("data/train.tsv", &to_bytes(|b| write_dataset(&data.train, b))?)?;
    if cfg.data.teacher_utterances_per_speaker.is_some() {
        o.write("data/teacher_train.tsv", &to_bytes(|b| write_dataset(&data.teacher_train, b))?)?;
    }
    o.write("data/eval.tsv", &to_bytes(|b| write_dataset(&data.eval, b))?)?;
    o.write("data/trials.tsv", &to_bytes(|b| write_trials(&data.trials, b))?)?;
    o.finish(cfg, "gen-data")
}

fn save_run(
    o: &mut Output,
    dir: &str,
    params: &MlpParams,
    record: &mut RunRecord,
    eval: &EvalReport,
) -> Result<()> {
    let ckpt = format!("{dir}/model.ckpt");
    o.write(&ckpt, &params.to_bytes())?;
    record.checkpoint = Some(ckpt);
    o.write(&format!("{dir}/train_log.jsonl"), &to_bytes(|b| record.write_jsonl(b))?)?;
    o.write(
        &format!("{dir}/eval.json"),
        (serde_json::to_string_pretty(eval).expect("report serialises") + "\n").as_bytes(),
    )?;
    Ok(())
}

pub const TEACHER_CHECKPOINT: &str = "teacher/model.ckpt";

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub params: MlpParams,
    pub record: RunRecord,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<TeacherOutcome> {
    let data = prepare_data(cfg)?;
    let mut o = Output::new(out)?;
    let dims = cfg.teacher.full_dims(cfg.data.feature_dim);
    let (params, mut record) = trainer::train_teacher(&data.teacher_train, &dims, &cfg.teacher.train)?;
    let eval = evaluate(&params, &data.eval, &data.trials)?;
    log::info!(
        "teacher: train accuracy {:.4}, held-out EER {:.4}, minDCF {:.4}",
        record.final_train_accuracy,
        eval.eer,
        eval.min_dcf
    );
    save_run(&mut o, "teacher", &params, &mut record, &eval)?;
    o.finish(cfg, "train-teacher")?;
    Ok(TeacherOutcome {
        params,
        record,
        eval,
        checkpoint: out.join(TEACHER_CHECKPOINT),
    })
}

pub fn load_teacher(path: &Path) -> Result<MlpParams> {
    if !path.exists() {
        return Err(Error::data(format!(
            "no teacher checkpoint at {}; run train-teacher first",
            path.display()
        )));
    }
    MlpParams::load(path)
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub group: String,
    pub seed: u64,
    pub eer: f64,
    pub min_dcf: f64,
}

fn write_results_csv(o: &mut Output, rel: &str, group_column: &str, rows: &[ResultRow]) -> Result<PathBuf> {
    let mut text = format!("{CSV_VERSION_LINE}\n{group_column},seed,eer,min_dcf\n");
    for r in rows {
        let _ = writeln!(text, "{},{},{},{}", r.group, r.seed, r.eer, r.min_dcf);
    }
    o.write(rel, text.as_bytes())
}

struct Job {
    group: String,
    dir: String,
    seed: u64,
    train: TrainConfig,
    dims: Vec<usize>,
}

fn run_jobs(
    jobs: Vec<Job>,
    teacher: Option<&MlpParams>,
    train_set: impl Fn(&Job) -> Result<SpeakerDataset> + Sync,
    data: &PreparedData,
) -> Result<Vec<(Job, MlpParams, RunRecord, EvalReport)>> {
    jobs.into_par_iter()
        .map(|job| {
            let train = train_set(&job)?;
            let (params, record) = match teacher {
                Some(t) => trainer::distill(t, &job.dims, &train, &job.train)?,
                None => trainer::train_teacher(&train, &job.dims, &job.train)?,
            };
            let eval = evaluate(&params, &data.eval, &data.trials)?;
            log::info!(
                "{} seed {}: EER {:.4}, minDCF {:.4}",
                job.group,
                job.seed,
                eval.eer,
                eval.min_dcf
            );
            Ok((job, params, record, eval))
        })
        .collect()
}

fn collect_rows(
    o: &mut Output,
    results: Vec<(Job, MlpParams, RunRecord, EvalReport)>,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::with_capacity(results.len());
    for (job, params, mut record, eval) in results {
        save_run(o, &job.dir, &params, &mut record, &eval)?;
        rows.push(ResultRow {
            group: job.group,
            seed: job.seed,
            eer: eval.eer,
            min_dcf: eval.min_dcf,
        });
    }
    Ok(rows)
}

fn arm_name(mode: KdMode, gamma: Gamma) -> String {
    match mode {
        KdMode::Dkd => format!("dkd_gamma_{gamma}"),
        other => other.as_str().to_string(),
    }
}

/// Distils one student per seed using `student.train.kd`.
pub fn cmd_distill(cfg: &ExperimentConfig, teacher_path: &Path, out: &Path) -> Result<Vec<ResultRow>> {
    let data = prepare_data(cfg)?;
    let kd = &cfg.student.train.kd;
    let teacher = if kd.mode == KdMode::None {
        None
    } else {
        Some(load_teacher(teacher_path)?)
    };
    let arm = arm_name(kd.mode, kd.gamma);
    let jobs = cfg
        .seeds
        .iter()
        .map(|&seed| Job {
            group: arm.clone(),
            dir: format!("distill/{arm}/seed-{seed}"),
            seed,
            train: TrainConfig {
                seed,
                ..cfg.student.train.clone()
            },
            dims: cfg.student.full_dims(cfg.data.feature_dim),
        })
        .collect();
    let mut o = Output::new(out)?;
    let results = run_jobs(jobs, teacher.as_ref(), |_| Ok(data.train.clone()), &data)?;
    let rows = collect_rows(&mut o, results)?;
    write_results_csv(&mut o, "distill.csv", "arm", &rows)?;
    o.finish(cfg, "distill")?;
    Ok(rows)
}

/// Student arms of the ablation: none, cosine-embedding, conventional KL and
/// one decoupled arm per configured γ.
pub fn ablation_arms(cfg: &ExperimentConfig) -> Vec<(KdMode, Gamma)> {
    let mut arms = vec![
        (KdMode::None, Gamma::default()),
        (KdMode::CosineEmbedding, Gamma::default()),
        (KdMode::ConventionalKld, Gamma::default()),
    ];
    arms.extend(cfg.ablation.gammas.iter().map(|&g| (KdMode::Dkd, Gamma::Value(g))));
    arms
}

pub fn cmd_ablate_gamma(cfg: &ExperimentConfig, teacher_path: &Path, out: &Path) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let teacher = load_teacher(teacher_path)?;
    let student_dims = cfg.student.full_dims(cfg.data.feature_dim);
    if teacher.embedding_dim() != *student_dims.last().unwrap() {
        return Err(Error::config(
            "student.dims",
            format!(
                "the cosine-embedding arm needs the student embedding width to equal the teacher's ({})",
                teacher.embedding_dim()
            ),
        ));
    }
    let data = prepare_data(cfg)?;
    let mut jobs = Vec::new();
    for (mode, gamma) in ablation_arms(cfg) {
        let arm = arm_name(mode, gamma);
        for &seed in &cfg.seeds {
            let mut train = TrainConfig {
                seed,
                ..cfg.student.train.clone()
            };
            train.kd.mode = mode;
            train.kd.gamma = gamma;
            jobs.push(Job {
                group: arm.clone(),
                dir: format!("ablation/{arm}/seed-{seed}"),
                seed,
                train,
                dims: student_dims.clone(),
            });
        }
    }
    let mut o = Output::new(out)?;
    let results = run_jobs(jobs, Some(&teacher), |_| Ok(data.train.clone()), &data)?;
    let rows = collect_rows(&mut o, results)?;
    write_results_csv(&mut o, "ablation.csv", "arm", &rows)?;
    o.finish(cfg, "ablate-gamma")?;
    Ok(rows)
}

/// Fixed-budget speaker-count sweep: for each count `k`, the first `k`
/// training speakers with `budget / k` utterances each.
pub fn cmd_sweep_speakers(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResultRow>> {
    let data = prepare_data(cfg)?;
    let mut jobs = Vec::new();
    for &k in &cfg.sweep.speaker_counts {
        for &seed in &cfg.seeds {
            let mut train = TrainConfig {
                seed,
                ..cfg.student.train.clone()
            };
            train.kd.mode = KdMode::None;
            jobs.push(Job {
                group: k.to_string(),
                dir: format!("sweep/k-{k}/seed-{seed}"),
                seed,
                train,
                dims: cfg.student.full_dims(cfg.data.feature_dim),
            });
        }
    }
    let budget = cfg.sweep.budget;
    let sample_seed = cfg.data.sample_seed;
    let universe = &data.universe;
    let train_set = |job: &Job| {
        let k: usize = job.group.parse().expect("group is the speaker count");
        let s = RngStream::new(sample_seed)
            .split(&format!("sweep/{k}/{}", job.seed))
            .next_u64();
        let set = sample_dataset(universe, &(0..k).collect::<Vec<_>>(), budget / k, s)?;
        check_disjoint(&set, &data.eval)?;
        Ok(set)
    };
    let mut o = Output::new(out)?;
    let results = run_jobs(jobs, None, train_set, &data)?;
    let rows = collect_rows(&mut o, results)?;
    write_results_csv(&mut o, "sweep.csv", "num_speakers", &rows)?;
    o.finish(cfg, "sweep-speakers")?;
    Ok(rows)
}

/// Evaluates a checkpoint on the configured held-out trials, or on the given
/// dataset/trial files.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    inputs: Option<(&Path, &Path)>,
    out: &Path,
    dump_scores: bool,
) -> Result<EvalReport> {
    let params = MlpParams::load(checkpoint)?;
    let (dataset, trials) = match inputs {
        Some((dp, tp)) => {
            let open = |p: &Path| fs::File::open(p).map(std::io::BufReader::new).map_err(|e| Error::io(p, e));
            (read_dataset(open(dp)?)?, read_trials(open(tp)?)?)
        }
        None => {
            let d = prepare_data(cfg)?;
            (d.eval, d.trials)
        }
    };
    if dataset.feature_dim() != params.input_dim() {
        return Err(Error::data(format!(
            "features have width {} but the model expects {}",
            dataset.feature_dim(),
            params.input_dim()
        )));
    }
    let st = score_trials(&params, &dataset, &trials)?;
    let rep = report(&st)?;
    let mut o = Output::new(out)?;
    o.write(
        "eval.json",
        (serde_json::to_string_pretty(&rep).expect("report serialises") + "\n").as_bytes(),
    )?;
    if dump_scores {
        o.write("scores.tsv", &to_bytes(|b| write_scores(&trials, &st, b))?)?;
    }
    o.finish(cfg, "eval")?;
    Ok(rep)
}
