//! Downstream adaptation: a CLS task head trained on full-visibility token
//! sequences with modality dropout, an initial frozen-encoder phase, and
//! early stopping on validation loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cohort::{Diagnosis, Labels, SubjectRecord};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::math;
use crate::modality::ModalitySet;
use crate::model::{encode, task_output, tokenize, Fwd, Model, TaskHead};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Grads, ParamStore};
use crate::rng::{domain, stream, Rng};
use crate::train::{lr_at, sample_patches};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "CN_vs_AD")]
    CnVsAd,
    #[serde(rename = "CN_vs_MCI")]
    CnVsMci,
    #[serde(rename = "MMSE")]
    Mmse,
    #[serde(rename = "AGE")]
    Age,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::CnVsAd, Task::CnVsMci, Task::Mmse, Task::Age];

    pub fn name(self) -> &'static str {
        match self {
            Task::CnVsAd => "CN_vs_AD",
            Task::CnVsMci => "CN_vs_MCI",
            Task::Mmse => "MMSE",
            Task::Age => "AGE",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::CnVsAd | Task::CnVsMci)
    }

    /// Target for a subject, or `None` when the subject is not part of the
    /// task. Classification positives are the more impaired class.
    pub fn target(self, labels: &Labels) -> Option<f64> {
        match self {
            Task::CnVsAd => match labels.diagnosis? {
                Diagnosis::CN => Some(0.0),
                Diagnosis::AD => Some(1.0),
                Diagnosis::MCI => None,
            },
            Task::CnVsMci => match labels.diagnosis? {
                Diagnosis::CN => Some(0.0),
                Diagnosis::MCI => Some(1.0),
                Diagnosis::AD => None,
            },
            Task::Mmse => labels.mmse,
            Task::Age => labels.age,
        }
    }
}

impl core::fmt::Display for Task {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: u64,
    pub patience: u64,
    pub freeze_epochs: u64,
    pub modality_dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { lr: 1e-5, weight_decay: 0.05, max_epochs: 100, patience: 15, freeze_epochs: 5, modality_dropout: 0.2, batch_size: 8, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.max_epochs == 0 || self.freeze_epochs >= self.max_epochs {
            return bad("freeze epochs must be fewer than max epochs");
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch size and patience must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad("modality dropout rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Drops each observed modality with probability `rate`; if nothing
/// survives, one original modality is restored uniformly at random.
pub fn modality_dropout(observed: ModalitySet, rate: f64, rng: &mut Rng) -> Result<ModalitySet> {
    if observed.is_empty() {
        return Err(Error::Precondition("modality dropout needs a nonempty set".into()));
    }
    let mut kept = ModalitySet::EMPTY;
    for m in observed.iter() {
        if rng.random::<f64>() >= rate {
            kept = kept.with(m);
        }
    }
    if kept.is_empty() {
        let members = observed.to_vec();
        kept = ModalitySet::single(members[rng.random_range(0..members.len())]);
    }
    Ok(kept)
}

/// Affine map between raw regression targets and the standardized scale
/// the head is trained on. Identity for classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub const IDENTITY: TargetScale = TargetScale { mean: 0.0, std: 1.0 };

    pub fn fit(task: Task, targets: &[f64]) -> TargetScale {
        if task.is_classification() || targets.is_empty() {
            return TargetScale::IDENTITY;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        TargetScale { mean, std: if var > 0.0 { math::sqrt(var) } else { 1.0 } }
    }

    pub fn forward(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// A model whose task head is trained for `task`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub model: Model,
    pub head: TaskHead,
    pub task: Task,
    pub scale: TargetScale,
}

fn head_output(fwd: &mut Fwd<'_>, model: &Model, head: TaskHead, subject: &SubjectRecord, keep: ModalitySet) -> Result<Var> {
    let patches = sample_patches(model, &subject.volumes)?;
    let plan = MaskPlan::full_visibility(subject.observed.intersection(keep), model.n_patches());
    let batch = tokenize(fwd, model, &patches, &plan)?;
    let enc = encode(fwd, model, &batch)?;
    Ok(task_output(fwd, head, enc.out))
}

fn sample_loss(g: &mut Graph, out: Var, task: Task, target: f64) -> Var {
    if task.is_classification() {
        g.bce_with_logits(out, target)
    } else {
        g.squared_error(out, target)
    }
}

impl TaskModel {
    /// Raw head output (logit or standardized value) with only `keep`
    /// modalities visible; the others are zeroed and attention-blocked.
    pub fn raw_output(&self, subject: &SubjectRecord, keep: ModalitySet) -> Result<f64> {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, &self.model.store, false);
        let out = head_output(&mut fwd, &self.model, self.head, subject, keep)?;
        Ok(g.scalar(out))
    }

    /// Probability of the positive class, or the regression estimate in
    /// raw units.
    pub fn predict(&self, subject: &SubjectRecord, keep: ModalitySet) -> Result<f64> {
        let z = self.raw_output(subject, keep)?;
        Ok(if self.task.is_classification() { math::sigmoid(z) } else { self.scale.inverse(z) })
    }

    /// Mean task loss over `subjects` with all observed modalities.
    pub fn loss(&self, subjects: &[(&SubjectRecord, f64)]) -> Result<f64> {
        let losses = map_maybe_parallel(subjects, |(s, t)| {
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, &self.model.store, false);
            let out = head_output(&mut fwd, &self.model, self.head, s, ModalitySet::FULL)?;
            let l = sample_loss(&mut g, out, self.task, self.scale.forward(*t));
            Ok(g.scalar(l))
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / subjects.len() as f64)
    }
}

fn map_maybe_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Subjects of `pool` that have a target for `task`, with that target.
pub fn labeled<'a>(pool: &[&'a SubjectRecord], task: Task) -> Vec<(&'a SubjectRecord, f64)> {
    pool.iter().filter_map(|s| task.target(&s.labels).map(|t| (*s, t))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: TaskModel,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    pub history: Vec<EpochLog>,
}

/// Optional per-epoch observer; receives the model after each epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&TaskModel, &EpochLog);

/// Trains a fresh task head on top of `init` (whose decoders, predictors
/// and any previous head are ignored).
pub fn finetune(
    init: &Model,
    task: Task,
    cfg: &FinetuneConfig,
    train: &[&SubjectRecord],
    val: &[&SubjectRecord],
    mut hook: Option<EpochHook<'_>>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let train = labeled(train, task);
    let val = labeled(val, task);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!("no labeled subjects for {task} in the train or validation split")));
    }
    let targets: Vec<f64> = train.iter().map(|(_, t)| *t).collect();
    let scale = TargetScale::fit(task, &targets);
    let mut model = init.clone();
    model.task_head = None;
    let head = model.ensure_task_head(&mut stream(&[domain::FINETUNE, cfg.seed, u64::MAX]));
    let mut tm = TaskModel { model, head, task, scale };
    let mut optim = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &tm.model.store);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let frozen = epoch < cfg.freeze_epochs;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = stream(&[domain::FINETUNE, cfg.seed, epoch]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(k, &i)| (k, i)).collect();
            let results = map_maybe_parallel(&jobs, |&(k, i)| {
                let (subject, target) = train[i];
                let mut rng = stream(&[domain::DROPOUT, cfg.seed, epoch, b as u64, k as u64]);
                let keep = modality_dropout(subject.observed, cfg.modality_dropout, &mut rng)?;
                let mut g = Graph::new();
                let out = {
                    let mut fwd = Fwd::new(&mut g, &tm.model.store, !frozen);
                    let patches = sample_patches(&tm.model, &subject.volumes)?;
                    let plan = MaskPlan::full_visibility(keep, tm.model.n_patches());
                    let batch = tokenize(&mut fwd, &tm.model, &patches, &plan)?;
                    let enc = encode(&mut fwd, &tm.model, &batch)?;
                    let mut head_fwd = Fwd::new(fwd.g, &tm.model.store, true);
                    task_output(&mut head_fwd, tm.head, enc.out)
                };
                let loss = sample_loss(&mut g, out, task, scale.forward(target));
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { step, detail: format!("finetune loss for subject {}", subject.id) });
                }
                Ok((value, g.backward(loss, tm.model.store.len())))
            });
            let mut grads = Grads::new(tm.model.store.len());
            for r in results {
                let (l, g) = r?;
                epoch_loss += l;
                grads.merge(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            lr = lr_at(step, total_steps, 0, cfg.lr);
            optim.step(&mut tm.model.store, &grads, lr);
            step += 1;
        }
        let val_loss = tm.loss(&val)?;
        let log = EpochLog { epoch, train_loss: epoch_loss / train.len() as f64, val_loss, lr, frozen };
        history.push(log);
        if let Some(h) = hook.as_mut() {
            h(&tm, &log);
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, tm.model.store.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }
    let (best_val_loss, best_epoch, store) = best.expect("at least one epoch ran");
    tm.model.store = store;
    Ok(FinetuneOutcome { best: tm, best_epoch, best_val_loss, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = stream(&[1]);
        for s in ModalitySet::all_nonempty() {
            assert_eq!(modality_dropout(s, 0.0, &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn dropout_rate_one_keeps_one_uniformly() {
        let mut rng = stream(&[2]);
        let observed = ModalitySet::parse("T1+FLAIR+PET").unwrap();
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let s = modality_dropout(observed, 1.0, &mut rng).unwrap();
            assert_eq!(s.len(), 1);
            assert!(s.is_subset_of(observed));
            counts[s.iter().next().unwrap().index()] += 1;
        }
        for m in observed.iter() {
            assert!((counts[m.index()] as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.02);
        }
        assert_eq!(counts[Modality::T2.index()], 0);
    }

    #[test]
    fn task_targets() {
        let l = Labels { diagnosis: Some(Diagnosis::MCI), mmse: Some(25.0), age: Some(70.0) };
        assert_eq!(Task::CnVsAd.target(&l), None);
        assert_eq!(Task::CnVsMci.target(&l), Some(1.0));
        assert_eq!(Task::Mmse.target(&l), Some(25.0));
        assert_eq!(Task::parse("cn_vs_ad").unwrap(), Task::CnVsAd);
    }

    #[test]
    fn target_scale_round_trip() {
        let s = TargetScale::fit(Task::Age, &[60.0, 70.0, 80.0]);
        assert!((s.inverse(s.forward(75.0)) - 75.0).abs() < 1e-12);
        assert_eq!(TargetScale::fit(Task::CnVsAd, &[0.0, 1.0]), TargetScale::IDENTITY);
    }
}
