//! Pretraining: schedules, the per-step update, and the run loop.
//!
//! All randomness of a step is drawn from streams keyed by
//! `(seed, step, sample)`, so a run resumed from a checkpoint at step `k`
//! replays steps `k..` exactly, and the parallel and serial paths agree.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::autograd::Graph;
use crate::cohort::SubjectRecord;
use crate::error::{Error, Result};
use crate::masking::{
    build_mask_plan, dynamic_scores_from_attention, temperature_at, AnatomyTeacher, AtlasMembership, CurriculumConfig, ImportanceState,
    MaskPlan, MaskingConfig, Temperature,
};
use crate::math;
use crate::modality::{sample_modality_subset, Modality, ModalitySet};
use crate::model::{cls_attention, encode, forward_pretrain, predict, tokenize, Fwd, Model, SamplePatches};
use crate::objectives::{ema_update, group_pool, mae_loss_graph, momentum_at, normalized_targets, rcmd_loss_graph};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Grads, ParamStore};
use crate::rng::{domain, stream};
use crate::volume::patch_matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the epoch-derived step horizon; warmup scales with it.
    pub max_steps: Option<u64>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub rcmd: bool,
    pub lambda: f64,
    pub lambda_warmup_frac: f64,
    pub momentum_start: f64,
    pub augment: AugmentConfig,
    pub masking: MaskingConfig,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 2,
            lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 8,
            seed: 0,
            max_steps: None,
            grad_clip: Some(1.0),
            rcmd: true,
            lambda: 0.1,
            lambda_warmup_frac: 0.1,
            momentum_start: crate::objectives::MOMENTUM_START,
            augment: AugmentConfig::default(),
            masking: MaskingConfig::default(),
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("warmup epochs must be fewer than total epochs");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("learning rate must be positive; weight decay and lambda nonnegative");
        }
        if !(self.lambda_warmup_frac > 0.0 && self.lambda_warmup_frac <= 1.0) {
            return bad("lambda warmup fraction must lie in (0, 1]");
        }
        if !(self.momentum_start > 0.0 && self.momentum_start <= 1.0) {
            return bad("momentum must lie in (0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        self.augment.validate()?;
        self.masking.validate(n_patches)?;
        self.curriculum.validate()
    }

    pub fn steps_per_epoch(&self, n_subjects: usize) -> u64 {
        n_subjects.div_ceil(self.batch_size).max(1) as u64
    }

    pub fn total_steps(&self, n_subjects: usize) -> u64 {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n_subjects))
    }

    pub fn warmup_steps(&self, n_subjects: usize) -> u64 {
        let total = self.total_steps(n_subjects);
        math::round(total as f64 * self.warmup_epochs as f64 / self.epochs as f64) as u64
    }
}

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let u = (step - warmup) as f64 / (total - warmup) as f64;
    base * (1.0 + math::cos(math::PI * u)) / 2.0
}

/// Linear ramp from 0 to `target` over the first `warmup_frac * total`
/// steps, then constant.
pub fn lambda_at(step: u64, total: u64, target: f64, warmup_frac: f64) -> f64 {
    let horizon = warmup_frac * total as f64;
    if horizon <= 0.0 || step as f64 >= horizon {
        return target;
    }
    target * step as f64 / horizon
}

/// Everything that evolves during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    /// EMA copy of the student encoder.
    pub teacher: ParamStore,
    pub optim: AdamW,
    pub importance: ImportanceState,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig, importance: ImportanceState) -> Result<TrainState> {
        if importance.n_patches() != model.n_patches() {
            return Err(Error::Config("importance scores do not match the patch grid".into()));
        }
        let teacher = model.encoder_store();
        let optim = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &model.store);
        Ok(TrainState { step: 0, model, teacher, optim, importance })
    }
}

/// One row of the step log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    /// Mean over samples with at least one masked patch.
    pub l_mae: Option<f64>,
    /// Mean over paired samples; absent when none was paired or RCMD is off.
    pub l_rcmd: Option<f64>,
    pub lambda: f64,
    pub mu: f64,
    /// `None` during uniform masking.
    pub tau: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Subjects a run draws from. Validation subjects feed the dynamic-score
/// refresh only.
pub struct PretrainData<'a> {
    pub train: Vec<&'a SubjectRecord>,
    pub val: Vec<&'a SubjectRecord>,
}

/// Fixed context shared by every step of a run.
pub struct Pretrainer<'a> {
    pub cfg: &'a TrainConfig,
    pub data: PretrainData<'a>,
    pub membership: Option<&'a AtlasMembership>,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps_per_epoch: u64,
}

struct SampleOutcome {
    grads: Option<Grads>,
    l_mae: Option<f64>,
    l_rcmd: Option<f64>,
}

/// Patch matrices for every volume present in `volumes`.
pub fn sample_patches(model: &Model, volumes: &[Option<crate::volume::Volume>; 4]) -> Result<SamplePatches> {
    let mut patches: [Option<crate::tensor::Mat>; 4] = Default::default();
    for (slot, v) in patches.iter_mut().zip(volumes) {
        if let Some(v) = v {
            *slot = Some(patch_matrix(v, &model.grid)?);
        }
    }
    Ok(SamplePatches { patches })
}

/// Teacher pooled `(MRI, PET)` features with full visibility of `subset`.
pub fn teacher_features(model: &Model, teacher: &ParamStore, patches: &SamplePatches, subset: ModalitySet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut fwd = Fwd::new(&mut g, teacher, false);
    let plan = MaskPlan::full_visibility(subset, model.n_patches());
    let batch = tokenize(&mut fwd, model, patches, &plan)?;
    let enc = encode(&mut fwd, model, &batch)?;
    let mri: Vec<usize> = [Modality::T1, Modality::T2, Modality::Flair].into_iter().flat_map(|m| batch.included_of(m)).collect();
    group_pool(g.value(enc.out), &mri, &batch.included_of(Modality::Pet))
}

impl<'a> Pretrainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: PretrainData<'a>, membership: Option<&'a AtlasMembership>, n_patches: usize) -> Result<Pretrainer<'a>> {
        cfg.validate(n_patches)?;
        if data.train.is_empty() {
            return Err(Error::Data("no training subjects".into()));
        }
        if membership.is_some_and(|m| m.n_patches() != n_patches) {
            return Err(Error::Config("atlas membership does not match the patch grid".into()));
        }
        let n = data.train.len();
        Ok(Pretrainer {
            total_steps: cfg.total_steps(n),
            warmup_steps: cfg.warmup_steps(n),
            steps_per_epoch: cfg.steps_per_epoch(n),
            cfg,
            data,
            membership,
        })
    }

    /// Training-subject indices of `step`'s batch.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.train.len();
        let epoch = step / self.steps_per_epoch;
        let b = (step % self.steps_per_epoch) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = stream(&[domain::EPOCH, self.cfg.seed, epoch]);
        use rand::Rng as _;
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let lo = b * self.cfg.batch_size;
        perm[lo.min(n)..(lo + self.cfg.batch_size).min(n)].to_vec()
    }

    /// The mask plan and decoded subset for one sample, exactly as the step
    /// would draw them. Also returns the augmented patches.
    pub fn sample_inputs(&self, state: &TrainState, subject: &SubjectRecord, step: u64, index: usize) -> Result<(ModalitySet, SamplePatches, MaskPlan)> {
        let mut rng = stream(&[domain::SAMPLE, self.cfg.seed, step, index as u64]);
        let subset = sample_modality_subset(subject.observed, &mut rng)?;
        let restricted = subject.restricted(subset);
        let volumes = augment(&restricted.volumes, &self.cfg.augment, &mut rng);
        let patches = sample_patches(&state.model, &volumes)?;
        let plan = build_mask_plan(subset, &self.cfg.masking, &self.cfg.curriculum, &state.importance, step, self.total_steps, &mut rng)?;
        Ok((subset, patches, plan))
    }

    fn sample_step(&self, state: &TrainState, subject: &SubjectRecord, step: u64, index: usize, lambda: f64) -> Result<SampleOutcome> {
        let (subset, patches, plan) = self.sample_inputs(state, subject, step, index)?;
        let has_masked = subset.iter().any(|m| !plan.masked(m).is_empty());
        let rcmd_possible = self.cfg.rcmd && subset.is_paired();
        if !has_masked && !rcmd_possible {
            return Ok(SampleOutcome { grads: None, l_mae: None, l_rcmd: None });
        }
        let model = &state.model;
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, &model.store, true);
        let decode: ModalitySet = subset.iter().filter(|m| !plan.masked(*m).is_empty()).collect();
        let out = forward_pretrain(&mut fwd, model, &patches, &plan, decode)?;
        let mut terms = Vec::new();
        let mut l_mae = None;
        if has_masked {
            let mut recon = Vec::new();
            for &(m, pred) in &out.predictions {
                let target = normalized_targets(patches.get(m).expect("decoded modality present"));
                recon.push((pred, target, plan.masked(m).to_vec()));
            }
            let mae = mae_loss_graph(fwd.g, recon)?;
            l_mae = Some(fwd.g.scalar(mae));
            terms.push((mae, 1.0));
        }
        let mut l_rcmd = None;
        if let (true, Some((z_mri, z_pet))) = (self.cfg.rcmd, out.pooled) {
            let (t_mri, t_pet) = teacher_features(model, &state.teacher, &patches, subset)?;
            let pred_pet = predict(&mut fwd, model.rcmd.mri_to_pet, z_mri);
            let pred_mri = predict(&mut fwd, model.rcmd.pet_to_mri, z_pet);
            let r = rcmd_loss_graph(fwd.g, pred_pet, pred_mri, &t_pet, &t_mri)?;
            l_rcmd = Some(fwd.g.scalar(r));
            terms.push((r, lambda));
        }
        if terms.is_empty() {
            return Ok(SampleOutcome { grads: None, l_mae, l_rcmd });
        }
        let total = g.weighted_sum(terms);
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("subject {} subset {subset}: l_mae {l_mae:?} l_rcmd {l_rcmd:?}", subject.id),
            });
        }
        Ok(SampleOutcome { grads: Some(g.backward(total, model.store.len())), l_mae, l_rcmd })
    }

    /// Recomputes dynamic scores from final-layer CLS attention over T1
    /// patches of up to one batch of held-out subjects.
    pub fn refresh_dynamic(&self, state: &mut TrainState) -> Result<()> {
        let Some(membership) = self.membership else { return Ok(()) };
        let pool = if self.data.val.is_empty() { &self.data.train } else { &self.data.val };
        let model = &state.model;
        let store = match self.cfg.curriculum.anatomy_teacher {
            AnatomyTeacher::Ema => &state.teacher,
            AnatomyTeacher::Student => &model.store,
        };
        let n = model.n_patches();
        let mut acc = vec![0.0; n];
        let mut used = 0usize;
        for subject in pool.iter().take(self.cfg.batch_size) {
            let patches = sample_patches(model, &subject.volumes)?;
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, store, false);
            let plan = MaskPlan::full_visibility(subject.observed, n);
            let batch = tokenize(&mut fwd, model, &patches, &plan)?;
            let enc = encode(&mut fwd, model, &batch)?;
            let att = cls_attention(&g, &enc, model.encoder.blocks.len() - 1, model.seq_len());
            let t1 = &att[model.slot(Modality::T1, 0)..model.slot(Modality::T1, 0) + n];
            acc.iter_mut().zip(t1).for_each(|(a, v)| *a += v);
            used += 1;
        }
        if used == 0 {
            return Ok(());
        }
        let scores = dynamic_scores_from_attention(&acc, membership)?;
        state.importance.set_dynamic(scores);
        Ok(())
    }

    pub fn refresh_due(&self, step: u64) -> bool {
        self.cfg.curriculum.enabled && step > 0 && step % self.cfg.curriculum.refresh_interval(self.total_steps) == 0
    }

    /// One optimizer step: per-sample gradients reduced in batch order,
    /// clipped, applied, then the EMA teacher update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepLog> {
        let step = state.step;
        if self.refresh_due(step) {
            self.refresh_dynamic(state)?;
        }
        let lambda = if self.cfg.rcmd { lambda_at(step, self.total_steps, self.cfg.lambda, self.cfg.lambda_warmup_frac) } else { 0.0 };
        let batch = self.batch_indices(step);
        let outcomes = self.run_samples(state, &batch, step, lambda);
        let mut grads = Grads::new(state.model.store.len());
        let (mut n_grad, mut maes, mut rcmds) = (0usize, Vec::new(), Vec::new());
        for o in outcomes {
            let o = o?;
            if let Some(g) = &o.grads {
                grads.merge(g);
                n_grad += 1;
            }
            maes.extend(o.l_mae);
            rcmds.extend(o.l_rcmd);
        }
        let lr = lr_at(step, self.total_steps, self.warmup_steps, self.cfg.lr);
        let mut grad_norm = 0.0;
        if n_grad > 0 {
            grads.scale(1.0 / n_grad as f64);
            grad_norm = match self.cfg.grad_clip {
                Some(c) => grads.clip_global_norm(c),
                None => grads.global_norm(),
            };
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: "non-finite gradient norm".into() });
            }
            state.optim.step(&mut state.model.store, &grads, lr);
        }
        let mu = momentum_at(step, self.total_steps, self.cfg.momentum_start);
        ema_update(&mut state.teacher, &state.model.store, mu)?;
        state.step += 1;
        let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        let tau = if self.cfg.curriculum.enabled { temperature_at(step, self.total_steps, &self.cfg.curriculum) } else { Temperature::Uniform };
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch,
            l_mae: mean(&maes),
            l_rcmd: mean(&rcmds),
            lambda,
            mu,
            tau: tau.tau(),
            lr,
            grad_norm,
        })
    }

    fn run_samples(&self, state: &TrainState, batch: &[usize], step: u64, lambda: f64) -> Vec<Result<SampleOutcome>> {
        let work = |(k, &i): (usize, &usize)| self.sample_step(state, self.data.train[i], step, k, lambda);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            batch.par_iter().enumerate().map(work).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            batch.iter().enumerate().map(work).collect()
        }
    }

    /// Steps until `state.step == until` (clamped to the horizon), handing
    /// each record to `on_step`.
    pub fn run(&self, state: &mut TrainState, until: u64, mut on_step: impl FnMut(&TrainState, &StepLog) -> Result<()>) -> Result<()> {
        let until = until.min(self.total_steps);
        while state.step < until {
            let log = self.step(state)?;
            on_step(state, &log)?;
        }
        Ok(())
    }
}
