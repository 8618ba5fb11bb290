//! Evaluation protocols: within-subject modality robustness, label
//! efficiency with nested subsamples, and CLS attention maps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cohort::SubjectRecord;
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, Task, TaskModel};
use crate::masking::{AtlasMembership, MaskPlan};
use crate::metrics::{classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
use crate::modality::{designated_nesting, ModalitySet, DESIGNATED_COMBINATIONS};
use crate::model::{cls_attention, encode, tokenize, Fwd, Model};
use crate::rng::{domain, stream};
use crate::train::sample_patches;
use crate::volume::{upsample_patch_values, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

impl Metrics {
    pub fn auc(&self) -> Option<f64> {
        match self {
            Metrics::Classification(c) => Some(c.auc),
            Metrics::Regression(_) => None,
        }
    }
}

/// Metrics of `model` on `subjects` (with targets) seeing only `keep`.
pub fn evaluate(model: &TaskModel, subjects: &[(&SubjectRecord, f64)], keep: ModalitySet) -> Result<Metrics> {
    if subjects.is_empty() {
        return Err(Error::UndefinedMetric("no subjects to evaluate".into()));
    }
    let mut preds = Vec::with_capacity(subjects.len());
    for (s, _) in subjects {
        preds.push(model.predict(s, keep)?);
    }
    if model.task.is_classification() {
        let labels: Vec<bool> = subjects.iter().map(|(_, t)| *t > 0.5).collect();
        Ok(Metrics::Classification(classification_metrics(&preds, &labels)?))
    } else {
        let targets: Vec<f64> = subjects.iter().map(|(_, t)| *t).collect();
        Ok(Metrics::Regression(regression_metrics(&preds, &targets)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationResult {
    pub combination: ModalitySet,
    pub n: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub task: Task,
    pub rows: Vec<CombinationResult>,
    /// `(i, j)`: combination `i` is a subset of combination `j`.
    pub nesting: Vec<(usize, usize)>,
    pub subject_ids: Vec<alloc::string::String>,
}

/// Evaluates the same fully observed subjects under each designated
/// combination by hiding the other modalities.
pub fn robustness_sweep(model: &TaskModel, subjects: &[&SubjectRecord]) -> Result<RobustnessReport> {
    let pool: Vec<(&SubjectRecord, f64)> = subjects
        .iter()
        .filter(|s| s.observed == ModalitySet::FULL)
        .filter_map(|s| model.task.target(&s.labels).map(|t| (*s, t)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Protocol("robustness sweep needs fully observed, labeled test subjects".into()));
    }
    let mut rows = Vec::new();
    for combo in DESIGNATED_COMBINATIONS {
        rows.push(CombinationResult { combination: combo, n: pool.len(), metrics: evaluate(model, &pool, combo)? });
    }
    Ok(RobustnessReport {
        task: model.task,
        rows,
        nesting: designated_nesting(),
        subject_ids: pool.iter().map(|(s, _)| s.id.clone()).collect(),
    })
}

/// Nested training subsets: for every fraction, the first
/// `round(f * n_class)` members of one fixed per-class shuffle, returned in
/// original order. Fraction 1.0 is the full list in original order.
pub fn nested_subsamples(train: &[&SubjectRecord], task: Task, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        if let Some(t) = task.target(&s.labels) {
            // regression tasks are stratified by diagnosis instead
            let key = if task.is_classification() { t as i64 } else { s.labels.diagnosis.map_or(-1, |d| d as i64) };
            classes.entry(key).or_default().push(i);
        }
    }
    let mut rng = stream(&[domain::SUBSAMPLE, seed]);
    for members in classes.values_mut() {
        for i in (1..members.len()).rev() {
            members.swap(i, rng.random_range(0..=i));
        }
    }
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("training fraction {f} outside (0, 1]")));
        }
        let mut picked = Vec::new();
        for members in classes.values() {
            let k = crate::math::round(f * members.len() as f64) as usize;
            if task.is_classification() && k < 2 {
                return Err(Error::Protocol(format!("fraction {f} leaves fewer than 2 subjects in a class")));
            }
            picked.extend_from_slice(&members[..k.min(members.len())]);
        }
        picked.sort_unstable();
        out.push(picked);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionResult {
    pub fraction: f64,
    pub n_train: usize,
    pub metrics: Metrics,
}

/// Finetunes from `init` on each nested subsample and evaluates on `test`
/// with every observed modality.
pub fn label_efficiency_sweep(
    init: &Model,
    task: Task,
    cfg: &FinetuneConfig,
    train: &[&SubjectRecord],
    val: &[&SubjectRecord],
    test: &[&SubjectRecord],
    fractions: &[f64],
) -> Result<Vec<FractionResult>> {
    let subsets = nested_subsamples(train, task, fractions, cfg.seed)?;
    let test = crate::finetune::labeled(test, task);
    let mut out = Vec::new();
    for (&fraction, idx) in fractions.iter().zip(subsets) {
        let sub: Vec<&SubjectRecord> = idx.iter().map(|&i| train[i]).collect();
        let res = finetune(init, task, cfg, &sub, val, None)?;
        out.push(FractionResult { fraction, n_train: sub.len(), metrics: evaluate(&res.best, &test, ModalitySet::FULL)? });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Final-layer CLS attention per spatial patch, summed over modalities
    /// and renormalized over patch tokens; sums to 1.
    pub patch_weights: Vec<f64>,
    pub heatmap: Volume,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub label: u16,
    /// Attention mass attributed to the region by voxel share.
    pub mass: f64,
    /// Fraction of grid voxels in the region.
    pub volume_fraction: f64,
}

pub fn attention_map(model: &Model, subject: &SubjectRecord) -> Result<AttentionMap> {
    let patches = sample_patches(model, &subject.volumes)?;
    let n = model.n_patches();
    let mut g = Graph::new();
    let mut fwd = Fwd::new(&mut g, &model.store, false);
    let plan = MaskPlan::full_visibility(subject.observed, n);
    let batch = tokenize(&mut fwd, model, &patches, &plan)?;
    let enc = encode(&mut fwd, model, &batch)?;
    let att = cls_attention(&g, &enc, model.encoder.blocks.len() - 1, model.seq_len());
    let mut w = vec![0.0; n];
    for slot in 1..att.len() {
        if let Some((_, i)) = batch.provenance(slot) {
            w[i] += att[slot];
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Internal("CLS attends to no patch token".into()));
    }
    w.iter_mut().for_each(|v| *v /= total);
    let heatmap = upsample_patch_values(&w, &model.grid)?;
    Ok(AttentionMap { patch_weights: w, heatmap })
}

/// Per-region attention mass and volume share via the membership matrix.
pub fn region_scores(patch_weights: &[f64], membership: &AtlasMembership) -> Result<Vec<RegionScore>> {
    if patch_weights.len() != membership.n_patches() {
        return Err(Error::Input("one weight per patch expected".into()));
    }
    let n = membership.n_patches() as f64;
    Ok((0..membership.n_regions())
        .map(|k| {
            let (mut mass, mut frac) = (0.0, 0.0);
            for (i, w) in patch_weights.iter().enumerate() {
                let r = membership.r.at(i, k);
                mass += r * w;
                frac += r / n;
            }
            RegionScore { label: k as u16 + 1, mass, volume_fraction: frac }
        })
        .collect())
}
