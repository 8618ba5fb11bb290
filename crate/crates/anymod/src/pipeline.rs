//! End-to-end runs shared by the command line and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use anymod_core::cohort::{generate_synthetic_cohort, Cohort, Split, SubjectRecord, SyntheticAtlas};
use anymod_core::eval::{attention_map, evaluate, label_efficiency_sweep, region_scores, robustness_sweep, AttentionMap, RegionScore};
use anymod_core::finetune::{finetune, labeled, EpochLog, FinetuneConfig, FinetuneOutcome, Task, TaskModel};
use anymod_core::masking::{build_membership_matrix, AtlasMembership, ImportanceState, MaskPlan, RegionWeights};
use anymod_core::model::Model;
use anymod_core::rng::{domain, stream};
use anymod_core::train::{PretrainData, Pretrainer, StepLog, TrainState};
use anymod_core::{Error, Modality, ModalitySet, Result};
use serde::Serialize;

use crate::bav::{io_error, write_volume};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::manifest::load_cohort as load_manifest_cohort;
use crate::report::{fraction_point, ReportRow, Sweep};
use crate::steplog::StepLogWriter;

pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bck";
pub const FINETUNED_CHECKPOINT: &str = "finetuned.bck";

/// The configured manifest, or the configured synthetic cohort.
pub fn load_cohort(cfg: &RunConfig) -> Result<(Cohort, Option<SyntheticAtlas>)> {
    match &cfg.cohort.manifest {
        Some(path) => load_manifest_cohort(path),
        None => {
            let (cohort, atlas, _) = generate_synthetic_cohort(&cfg.cohort.synthetic)?;
            Ok((cohort, Some(atlas)))
        }
    }
}

pub fn split(cohort: &Cohort, s: Split) -> Vec<&SubjectRecord> {
    cohort.indices(s).into_iter().map(|i| &cohort.subjects[i]).collect()
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(&cfg.model, &mut stream(&[domain::INIT, cfg.train.seed]))
}

pub fn membership(atlas: Option<&SyntheticAtlas>, model: &Model) -> Result<Option<AtlasMembership>> {
    match atlas {
        Some(a) => {
            if a.labels.shape != model.cfg.volume_shape {
                return Err(Error::Data("atlas shape differs from the model volume shape".into()));
            }
            build_membership_matrix(&a.labels, &model.grid, a.n_regions()).map(Some)
        }
        None => Ok(None),
    }
}

pub fn initial_importance(cfg: &RunConfig, membership: Option<&AtlasMembership>, atlas: Option<&SyntheticAtlas>, n_patches: usize) -> Result<ImportanceState> {
    let beta = cfg.train.curriculum.beta;
    match (membership, atlas) {
        (Some(m), Some(a)) => ImportanceState::from_atlas(m, &RegionWeights::from_classes(&a.classes), beta),
        _ => Ok(ImportanceState::flat(n_patches, beta)),
    }
}

/// Applies an ablation switch (`rcmd`, `pacm` or `both`).
pub fn apply_ablation(cfg: &mut RunConfig, ablate: &str) -> Result<()> {
    match ablate {
        "rcmd" => cfg.train.rcmd = false,
        "pacm" => cfg.train.curriculum.enabled = false,
        "both" => {
            cfg.train.rcmd = false;
            cfg.train.curriculum.enabled = false;
        }
        other => return Err(Error::Config(format!("unknown ablation '{other}' (expected rcmd, pacm or both)"))),
    }
    Ok(())
}

fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.bck"))
}

/// Pretrains from scratch or from `resume`. With an output directory it
/// writes the step log, periodic checkpoints and the final checkpoint.
pub fn pretrain(
    cfg: &RunConfig,
    cohort: &Cohort,
    atlas: Option<&SyntheticAtlas>,
    resume: Option<TrainState>,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainState> {
    let model = match &resume {
        Some(s) => {
            if s.model.cfg != cfg.model {
                return Err(Error::Config("the checkpoint's model settings differ from the configuration".into()));
            }
            s.model.clone()
        }
        None => init_model(cfg)?,
    };
    let membership = if cfg.train.curriculum.enabled { membership(atlas, &model)? } else { None };
    let data = PretrainData { train: split(cohort, Split::Train), val: split(cohort, Split::Val) };
    let trainer = Pretrainer::new(&cfg.train, data, membership.as_ref(), model.n_patches())?;
    let mut state = match resume {
        Some(s) => {
            if s.step > trainer.total_steps {
                return Err(Error::Config(format!("checkpoint step {} is past the run horizon {}", s.step, trainer.total_steps)));
            }
            s
        }
        None => {
            let imp = initial_importance(cfg, membership.as_ref(), atlas, model.n_patches())?;
            TrainState::new(model, &cfg.train, imp)?
        }
    };
    let echo = config_echo(cfg);
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| io_error(dir, e))?;
            Some(StepLogWriter::create(&dir.join(LOG_FILE), cfg.train.rcmd)?)
        }
        None => None,
    };
    let every = cfg.pretrain.checkpoint_every;
    trainer.run(&mut state, trainer.total_steps, |st, log| {
        on_step(log);
        if let (Some(w), Some(dir)) = (writer.as_mut(), out_dir) {
            w.append(log)?;
            if every.is_some_and(|k| st.step % k == 0) {
                w.flush()?;
                Checkpoint::from_train_state(st, cfg.train.seed, echo.clone())?.save(&checkpoint_path(dir, st.step))?;
            }
        }
        Ok(())
    })?;
    if let (Some(w), Some(dir)) = (writer.as_mut(), out_dir) {
        w.flush()?;
        Checkpoint::from_train_state(&state, cfg.train.seed, echo)?.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(state)
}

/// Initial weights for finetuning: the checkpoint's student, or a fresh
/// model when none is given.
pub fn init_for_finetune(cfg: &RunConfig, ckpt: Option<&Checkpoint>) -> Result<Model> {
    match ckpt {
        Some(c) => {
            if c.header.model != cfg.model {
                return Err(Error::Config("the checkpoint's model settings differ from the configuration".into()));
            }
            c.model()
        }
        None => init_model(cfg),
    }
}

pub fn finetune_config(cfg: &RunConfig, seed: u64) -> FinetuneConfig {
    FinetuneConfig { seed, ..cfg.finetune.clone() }
}

pub fn finetune_task(init: &Model, cfg: &RunConfig, task: Task, cohort: &Cohort, seed: u64, hook: Option<&mut dyn FnMut(&TaskModel, &EpochLog)>) -> Result<FinetuneOutcome> {
    finetune(init, task, &finetune_config(cfg, seed), &split(cohort, Split::Train), &split(cohort, Split::Val), hook)
}

pub fn save_task_model(path: &Path, tm: &TaskModel, cfg: &RunConfig, seed: u64, epoch: u64) -> Result<()> {
    Checkpoint::from_task_model(tm, seed, epoch, config_echo(cfg))?.save(path)
}

pub fn load_task_model(ckpt: &Checkpoint) -> Result<TaskModel> {
    if ckpt.header.kind != CheckpointKind::Finetune {
        return Err(Error::Data("expected a finetuned checkpoint".into()));
    }
    ckpt.task_model()
}

/// Metrics on `split` with every observed modality.
pub fn evaluate_rows(tm: &TaskModel, cohort: &Cohort, splits: &[Split], seed: u64) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &s in splits {
        let subjects = labeled(&split(cohort, s), tm.task);
        if subjects.is_empty() {
            return Err(Error::Data(format!("no labeled {} subjects for {}", split_name(s), tm.task)));
        }
        let m = evaluate(tm, &subjects, ModalitySet::FULL)?;
        rows.push(ReportRow::new(tm.task, Sweep::Evaluate, split_name(s), seed, subjects.len(), &m));
    }
    Ok(rows)
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Robustness rows of one finetuned model on the fully observed test
/// subjects.
pub fn robustness_rows(tm: &TaskModel, cohort: &Cohort, seed: u64) -> Result<Vec<ReportRow>> {
    let report = robustness_sweep(tm, &split(cohort, Split::Test))?;
    Ok(report.rows.iter().map(|r| ReportRow::new(tm.task, Sweep::Robustness, r.combination.label(), seed, r.n, &r.metrics)).collect())
}

pub fn label_efficiency_rows(init: &Model, cfg: &RunConfig, task: Task, cohort: &Cohort, seed: u64) -> Result<Vec<ReportRow>> {
    let res = label_efficiency_sweep(
        init,
        task,
        &finetune_config(cfg, seed),
        &split(cohort, Split::Train),
        &split(cohort, Split::Val),
        &split(cohort, Split::Test),
        &cfg.eval.fractions,
    )?;
    Ok(res.iter().map(|r| ReportRow::new(task, Sweep::LabelEfficiency, fraction_point(r.fraction), seed, r.n_train, &r.metrics)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionExport {
    pub subject: String,
    pub heatmap: PathBuf,
    pub regions: Option<PathBuf>,
}

/// Writes `<id>_attention.bav` and, with an atlas, `<id>_regions.csv`.
pub fn export_attention(model: &Model, subject: &SubjectRecord, membership: Option<&AtlasMembership>, out_dir: &Path) -> Result<(AttentionMap, Option<Vec<RegionScore>>, AttentionExport)> {
    let map = attention_map(model, subject)?;
    let heatmap = out_dir.join(format!("{}_attention.bav", subject.id));
    write_volume(&heatmap, &map.heatmap)?;
    let mut export = AttentionExport { subject: subject.id.clone(), heatmap, regions: None };
    let scores = match membership {
        Some(m) => {
            let scores = region_scores(&map.patch_weights, m)?;
            let path = out_dir.join(format!("{}_regions.csv", subject.id));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            for s in &scores {
                w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| io_error(&path, e))?;
            export.regions = Some(path);
            Some(scores)
        }
        None => None,
    };
    Ok((map, scores, export))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMask {
    pub subject: String,
    pub subset: ModalitySet,
    pub visible: Vec<(Modality, Vec<usize>)>,
    pub masked: Vec<(Modality, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskDump {
    pub step: u64,
    pub total_steps: u64,
    pub tau: Option<f64>,
    pub importance_static: Vec<f64>,
    pub importance_dynamic: Vec<f64>,
    pub importance_combined: Vec<f64>,
    /// Patch masking probabilities at this step; absent while uniform.
    pub mask_probabilities: Option<Vec<f64>>,
    pub samples: Vec<SampleMask>,
}

/// Mask plans the pretraining step `step` draws for its batch, together
/// with the importance vectors behind them.
pub fn dump_masks(cfg: &RunConfig, cohort: &Cohort, atlas: Option<&SyntheticAtlas>, state: Option<TrainState>, step: u64) -> Result<MaskDump> {
    let model = match &state {
        Some(s) => s.model.clone(),
        None => init_model(cfg)?,
    };
    let membership = if cfg.train.curriculum.enabled { membership(atlas, &model)? } else { None };
    let data = PretrainData { train: split(cohort, Split::Train), val: split(cohort, Split::Val) };
    let trainer = Pretrainer::new(&cfg.train, data, membership.as_ref(), model.n_patches())?;
    let state = match state {
        Some(s) => s,
        None => {
            let imp = initial_importance(cfg, membership.as_ref(), atlas, model.n_patches())?;
            TrainState::new(model, &cfg.train, imp)?
        }
    };
    if step >= trainer.total_steps {
        return Err(Error::Config(format!("step {step} is outside the run horizon {}", trainer.total_steps)));
    }
    let tau = if cfg.train.curriculum.enabled {
        anymod_core::masking::temperature_at(step, trainer.total_steps, &cfg.train.curriculum)
    } else {
        anymod_core::masking::Temperature::Uniform
    };
    let mut samples = Vec::new();
    for (k, i) in trainer.batch_indices(step).into_iter().enumerate() {
        let subject = trainer.data.train[i];
        let (subset, _, plan): (ModalitySet, _, MaskPlan) = trainer.sample_inputs(&state, subject, step, k)?;
        samples.push(SampleMask {
            subject: subject.id.clone(),
            subset,
            visible: subset.iter().map(|m| (m, plan.visible(m).to_vec())).collect(),
            masked: subset.iter().map(|m| (m, plan.masked(m).to_vec())).collect(),
        });
    }
    Ok(MaskDump {
        step,
        total_steps: trainer.total_steps,
        tau: tau.tau(),
        mask_probabilities: state.importance.mask_distribution(tau)?,
        importance_static: state.importance.s_static.clone(),
        importance_dynamic: state.importance.s_dynamic.clone(),
        importance_combined: state.importance.s_combined.clone(),
        samples,
    })
}
