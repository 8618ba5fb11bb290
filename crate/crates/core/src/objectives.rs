//! Training objectives: per-patch normalized masked reconstruction, the EMA
//! teacher, reciprocal cross-modal distillation and their combination.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::{Modality, ModalitySet};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// `(x - mean) / sqrt(var + eps)` with population variance.
pub fn per_patch_normalize(patch: &[f64]) -> Vec<f64> {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / math::sqrt(var + PATCH_NORM_EPS);
    patch.iter().map(|v| (v - mean) * inv).collect()
}

/// Row-wise [`per_patch_normalize`].
pub fn normalized_targets(patches: &Mat) -> Mat {
    let mut out = Mat::zeros(patches.rows, patches.cols);
    for r in 0..patches.rows {
        out.row_mut(r).copy_from_slice(&per_patch_normalize(patches.row(r)));
    }
    out
}

/// Predictions, raw ground truth and masked indices for one modality.
#[derive(Clone, Debug)]
pub struct ModalityReconstruction {
    pub modality: Modality,
    pub predicted: Mat,
    pub target: Mat,
    pub masked: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ReconstructionBatch {
    pub items: Vec<ModalityReconstruction>,
}

/// Masked-patch reconstruction loss.
///
/// For each observed modality with a nonempty masked set: the mean over
/// masked patches of the squared Euclidean distance between prediction and
/// normalized target; then the mean over those modalities. Only masked
/// indices are read.
pub fn mae_loss(batch: &ReconstructionBatch, observed: ModalitySet) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in batch.items.iter().filter(|it| observed.contains(it.modality) && !it.masked.is_empty()) {
        let per: f64 = item
            .masked
            .iter()
            .map(|&i| {
                let t = per_patch_normalize(item.target.row(i));
                item.predicted.row(i).iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        sum += per / item.masked.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedLoss("no observed modality has masked patches".into()));
    }
    Ok(sum / count as f64)
}

/// Graph form of [`mae_loss`]. `terms` holds `(prediction node, normalized
/// target, masked indices)` per observed modality.
pub fn mae_loss_graph(g: &mut Graph, terms: Vec<(Var, Mat, Vec<usize>)>) -> Result<Var> {
    let per: Vec<Var> = terms
        .into_iter()
        .filter(|(_, _, idx)| !idx.is_empty())
        .map(|(pred, target, idx)| g.masked_patch_mse(pred, target, idx))
        .collect();
    if per.is_empty() {
        return Err(Error::UndefinedLoss("no observed modality has masked patches".into()));
    }
    let w = 1.0 / per.len() as f64;
    Ok(g.weighted_sum(per.into_iter().map(|v| (v, w)).collect()))
}

pub const MOMENTUM_START: f64 = 0.996;

/// Cosine schedule from `mu0` at step 0 to `1.0` at `total_steps`.
pub fn momentum_at(step: u64, total_steps: u64, mu0: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - mu0) * (1.0 + math::cos(math::PI * t)) / 2.0
}

/// `teacher <- mu * teacher + (1 - mu) * student` for every teacher tensor;
/// the student store may hold extra (non-encoder) parameters after them.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, mu: f64) -> Result<()> {
    if student.len() < teacher.len() {
        return Err(Error::Internal("student has fewer parameters than the teacher".into()));
    }
    for ((_, s), t) in student.iter().zip(teacher.iter_mut()) {
        if s.name != t.name || !s.value.same_shape(&t.value) {
            return Err(Error::Internal(alloc::format!("teacher/student mismatch at '{}'", t.name)));
        }
        for (tv, sv) in t.value.data.iter_mut().zip(&s.value.data) {
            *tv = mu * *tv + (1.0 - mu) * sv;
        }
    }
    Ok(())
}

/// Mean of the rows of `out` at `mri_slots` and at `pet_slots`.
pub fn group_pool(out: &Mat, mri_slots: &[usize], pet_slots: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if mri_slots.is_empty() || pet_slots.is_empty() {
        return Err(Error::Pairing("both MRI and PET groups need included tokens".into()));
    }
    let mean = |idx: &[usize]| {
        let mut acc = alloc::vec![0.0; out.cols];
        for &i in idx {
            acc.iter_mut().zip(out.row(i)).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= idx.len() as f64);
        acc
    };
    Ok((mean(mri_slots), mean(pet_slots)))
}

const NORM_FLOOR: f64 = 1e-12;

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if !(n > NORM_FLOOR) {
        return Err(Error::Normalization("zero-norm representation".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `1 - (cos(pred_pet, teacher_pet) + cos(pred_mri, teacher_mri)) / 2`, all
/// vectors l2-normalized first. `pred_pet` is the MRI->PET predictor output.
pub fn rcmd_loss_from_predictions(pred_pet: &[f64], teacher_pet: &[f64], pred_mri: &[f64], teacher_mri: &[f64]) -> Result<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let c1 = dot(&unit(pred_pet)?, &unit(teacher_pet)?);
    let c2 = dot(&unit(pred_mri)?, &unit(teacher_mri)?);
    Ok(1.0 - 0.5 * (c1 + c2))
}

/// Graph form: student-side predictions are nodes, teacher features are
/// constants (no gradient can reach the teacher).
pub fn rcmd_loss_graph(g: &mut Graph, pred_pet: Var, pred_mri: Var, teacher_pet: &[f64], teacher_mri: &[f64]) -> Result<Var> {
    for v in [pred_pet, pred_mri] {
        if !(math::sqrt(g.value(v).data.iter().map(|x| x * x).sum()) > NORM_FLOOR) {
            return Err(Error::Normalization("zero-norm predictor output".into()));
        }
    }
    let tp = g.constant(Mat::from_vec(1, teacher_pet.len(), unit(teacher_pet)?));
    let tm = g.constant(Mat::from_vec(1, teacher_mri.len(), unit(teacher_mri)?));
    let pp = g.l2_normalize(pred_pet);
    let pm = g.l2_normalize(pred_mri);
    let c1 = g.dot(pp, tp);
    let c2 = g.dot(pm, tm);
    let one = g.constant(Mat::scalar(1.0));
    Ok(g.weighted_sum(alloc::vec![(one, 1.0), (c1, -0.5), (c2, -0.5)]))
}

/// `l_mae + lambda * [paired] * l_rcmd`.
pub fn total_loss(l_mae: f64, l_rcmd: f64, paired: bool, lambda: f64) -> f64 {
    if paired {
        l_mae + lambda * l_rcmd
    } else {
        l_mae
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn normalize_examples() {
        assert!(per_patch_normalize(&[4.0; 8]).iter().all(|&x| x == 0.0));
        let n = per_patch_normalize(&[1.0, 2.0, 3.0]);
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-6).sqrt();
        assert!((n[0] + expect).abs() < 1e-12 && n[1] == 0.0 && (n[2] - expect).abs() < 1e-12);
        assert!((n[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn normalize_contract_on_random_patches() {
        let mut rng = stream(&[5]);
        for _ in 0..50 {
            let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let n = per_patch_normalize(&p);
            let mean = n.iter().sum::<f64>() / 64.0;
            let var = n.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    fn one_modality(pred: Mat, target: Mat, masked: Vec<usize>) -> ReconstructionBatch {
        ReconstructionBatch { items: alloc::vec![ModalityReconstruction { modality: Modality::T1, predicted: pred, target, masked }] }
    }

    #[test]
    fn mae_examples() {
        let mut rng = stream(&[6]);
        let target = Mat::from_vec(3, 4, (0..12).map(|_| rng.random_range(0.0..1.0)).collect());
        let perfect = normalized_targets(&target);
        let t1 = ModalitySet::single(Modality::T1);
        assert_eq!(mae_loss(&one_modality(perfect.clone(), target.clone(), alloc::vec![0, 2]), t1).unwrap(), 0.0);

        let mut off = perfect.clone();
        off.data[4] += 1.0; // patch 1, first voxel
        let l = mae_loss(&one_modality(off, target.clone(), alloc::vec![1]), t1).unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        assert!(matches!(mae_loss(&one_modality(perfect, target, alloc::vec![]), t1), Err(Error::UndefinedLoss(_))));
    }

    #[test]
    fn momentum_schedule() {
        assert_eq!(momentum_at(0, 1000, MOMENTUM_START), 0.996);
        assert!((momentum_at(500, 1000, MOMENTUM_START) - 0.998).abs() < 1e-12);
        assert_eq!(momentum_at(1000, 1000, MOMENTUM_START), 1.0);
        let mut prev = 0.0;
        for s in 0..=1000 {
            let m = momentum_at(s, 1000, MOMENTUM_START);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn rcmd_trivial_cases() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 2.0, 0.0];
        let neg = [-3.0, 0.0, 0.0];
        assert!(rcmd_loss_from_predictions(&a, &a, &b, &b).unwrap().abs() < 1e-12);
        assert!((rcmd_loss_from_predictions(&a, &neg, &a, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!((rcmd_loss_from_predictions(&a, &b, &b, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(rcmd_loss_from_predictions(&[0.0; 3], &a, &a, &a), Err(Error::Normalization(_))));
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.0, 0.5, false, 0.1), 1.0);
        assert!((total_loss(1.0, 0.5, true, 0.1) - 1.05).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.5, true, 0.0), 1.0);
    }

    #[test]
    fn group_pool_singletons_and_errors() {
        let out = Mat::from_vec(3, 2, alloc::vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
        let (m, p) = group_pool(&out, &[1], &[2]).unwrap();
        assert_eq!(m, [1.0, 2.0]);
        assert_eq!(p, [3.0, 4.0]);
        assert!(matches!(group_pool(&out, &[], &[2]), Err(Error::Pairing(_))));
    }
}
