//! Which patch tokens the encoder sees.
//!
//! Visible-token budgeting across observed modalities (Dirichlet shares of a
//! constant budget), atlas-derived patch importance, the temperature
//! curriculum, and Gumbel-top-k selection of masked patches. Importance is
//! defined once on the shared spatial patch grid and reused for every
//! modality.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::math;
use crate::modality::{Modality, ModalitySet};
use crate::rng::Rng;
use crate::tensor::Mat;
use crate::volume::{LabelVolume, PatchGrid};

/// How the visible budget depends on modality availability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// `B = round((1 - r) * N * 4)` regardless of how many modalities are
    /// observed.
    #[default]
    Constant,
    /// `B = round((1 - r) * N * |observed|)`.
    PerObserved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_ratio: f64,
    pub dirichlet_alpha: f64,
    pub total_modalities: usize,
    pub budget_mode: BudgetMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { mask_ratio: 0.75, dirichlet_alpha: 1.0, total_modalities: Modality::COUNT, budget_mode: BudgetMode::Constant }
    }
}

impl MaskingConfig {
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(alloc::format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("Dirichlet concentration must be positive".into()));
        }
        if self.total_modalities != Modality::COUNT {
            return Err(Error::Config("the system has exactly four modalities".into()));
        }
        let b = self.budget(n_patches, Modality::COUNT);
        if b == 0 || b > n_patches * self.total_modalities {
            return Err(Error::Config(alloc::format!("visible budget {b} out of range")));
        }
        Ok(())
    }

    /// Visible-token budget `B` for `n_observed` modalities.
    pub fn budget(&self, n_patches: usize, n_observed: usize) -> usize {
        let mult = match self.budget_mode {
            BudgetMode::Constant => self.total_modalities,
            BudgetMode::PerObserved => n_observed,
        };
        math::round((1.0 - self.mask_ratio) * (n_patches * mult) as f64) as usize
    }
}

/// Largest-remainder apportionment of `budget` by `shares`, each count capped
/// at `cap`, with overflow handed greedily to the largest uncapped shares.
/// The result sums to `min(budget, cap * shares.len())`.
pub fn apportion(shares: &[f64], budget: usize, cap: usize) -> Vec<usize> {
    let n = shares.len();
    if n == 0 {
        return Vec::new();
    }
    let total: f64 = shares.iter().sum();
    let norm: Vec<f64> = if total > 0.0 { shares.iter().map(|s| s / total).collect() } else { vec![1.0 / n as f64; n] };
    let quotas: Vec<f64> = norm.iter().map(|s| s * budget as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| math::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - math::floor(quotas[a]), quotas[b] - math::floor(quotas[b]));
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    let mut overflow = 0;
    for c in counts.iter_mut() {
        if *c > cap {
            overflow += *c - cap;
            *c = cap;
        }
    }
    let mut by_share: Vec<usize> = (0..n).collect();
    by_share.sort_by(|&a, &b| norm[b].partial_cmp(&norm[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in &by_share {
        if overflow == 0 {
            break;
        }
        let take = (cap - counts[i]).min(overflow);
        counts[i] += take;
        overflow -= take;
    }
    counts
}

/// Draws Dirichlet shares over the observed modalities and apportions the
/// visible budget. Unobserved modalities get zero.
pub fn allocate_visible_budget(observed: ModalitySet, n_patches: usize, cfg: &MaskingConfig, rng: &mut Rng) -> Result<[usize; 4]> {
    if observed.is_empty() {
        return Err(Error::Precondition("no observed modality to allocate a budget to".into()));
    }
    let members = observed.to_vec();
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let shares: Vec<f64> = members.iter().map(|_| gamma.sample(rng)).collect();
    let counts = apportion(&shares, cfg.budget(n_patches, members.len()), n_patches);
    let mut out = [0; 4];
    for (m, c) in members.iter().zip(counts) {
        out[m.index()] = c;
    }
    Ok(out)
}

/// Pathological relevance class of an atlas region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    AdCritical,
    GrayMatter,
    NonBrain,
}

impl RegionClass {
    pub fn default_weight(self) -> f64 {
        match self {
            RegionClass::AdCritical => 3.0,
            RegionClass::GrayMatter => 1.5,
            RegionClass::NonBrain => 0.3,
        }
    }
}

/// Per-region weights `w_k`, index `k` referring to atlas label `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights(pub Vec<f64>);

impl RegionWeights {
    pub fn from_classes(classes: &[RegionClass]) -> RegionWeights {
        RegionWeights(classes.iter().map(|c| c.default_weight()).collect())
    }
}

/// Patch-region membership `R` (`N x K`): fraction of each patch's voxels
/// carrying region label `k + 1`. Background is not a column.
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasMembership {
    pub r: Mat,
}

impl AtlasMembership {
    pub fn n_patches(&self) -> usize {
        self.r.rows
    }

    pub fn n_regions(&self) -> usize {
        self.r.cols
    }
}

pub fn build_membership_matrix(atlas: &LabelVolume, grid: &PatchGrid, n_regions: usize) -> Result<AtlasMembership> {
    if atlas.shape != grid.shape {
        return Err(Error::Config("atlas shape differs from the volume shape".into()));
    }
    if usize::from(atlas.max_label()) > n_regions {
        return Err(Error::Config(alloc::format!(
            "atlas label {} exceeds region count {n_regions}",
            atlas.max_label()
        )));
    }
    let n = grid.n_patches();
    let mut r = Mat::zeros(n, n_regions);
    let inv = 1.0 / grid.patch_len() as f64;
    for i in 0..n {
        let row = r.row_mut(i);
        grid.for_each_voxel(i, |_, o| {
            let label = usize::from(atlas.data[o]);
            if label > 0 {
                row[label - 1] += inv;
            }
        });
    }
    Ok(AtlasMembership { r })
}

/// `s_static[i] = sum_k R[i][k] * w[k]`.
pub fn static_scores(membership: &AtlasMembership, weights: &RegionWeights) -> Result<Vec<f64>> {
    if weights.0.len() != membership.n_regions() {
        return Err(Error::Config("region weight count differs from atlas region count".into()));
    }
    Ok((0..membership.n_patches())
        .map(|i| membership.r.row(i).iter().zip(&weights.0).map(|(a, w)| a * w).sum())
        .collect())
}

const REGION_EPS: f64 = 1e-8;

/// Aggregates per-patch attention to regions and projects back to patches.
pub fn dynamic_scores_from_attention(attention: &[f64], membership: &AtlasMembership) -> Result<Vec<f64>> {
    if attention.len() != membership.n_patches() {
        return Err(Error::Input("one attention value per patch expected".into()));
    }
    if attention.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Input("attention must be nonnegative".into()));
    }
    let (n, k) = (membership.n_patches(), membership.n_regions());
    let r = &membership.r;
    let region: Vec<f64> = (0..k)
        .map(|c| {
            let (num, den) = (0..n).fold((0.0, 0.0), |(num, den), i| (num + r.at(i, c) * attention[i], den + r.at(i, c)));
            num / (den + REGION_EPS)
        })
        .collect();
    Ok((0..n).map(|i| r.row(i).iter().zip(&region).map(|(a, b)| a * b).sum()).collect())
}

/// Min-max normalization to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| (x - lo) / (hi - lo + REGION_EPS)).collect()
}

/// `(1 - beta) * minmax(static) + beta * minmax(dynamic)`.
pub fn combine_scores(s_static: &[f64], s_dynamic: &[f64], beta: f64) -> Vec<f64> {
    assert_eq!(s_static.len(), s_dynamic.len());
    min_max(s_static)
        .into_iter()
        .zip(min_max(s_dynamic))
        .map(|(a, b)| (1.0 - beta) * a + beta * b)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// When false every plan uses uniform masking (the PACM ablation).
    pub enabled: bool,
    pub tau_start: f64,
    pub tau_target: f64,
    pub phase1_end: f64,
    pub phase2_end: f64,
    pub beta: f64,
    /// Dynamic-score refresh period as a fraction of total steps.
    pub refresh_fraction: f64,
    /// Source of CLS attention for dynamic scores.
    pub anatomy_teacher: AnatomyTeacher,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            enabled: true,
            tau_start: 5.0,
            tau_target: 1.0,
            phase1_end: 0.2,
            phase2_end: 0.7,
            beta: 0.5,
            refresh_fraction: 0.05,
            anatomy_teacher: AnatomyTeacher::Ema,
        }
    }
}

/// Which network provides attention for dynamic scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnatomyTeacher {
    /// The EMA teacher that also serves cross-modal distillation.
    #[default]
    Ema,
    /// The current student weights.
    Student,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.phase1_end
            && self.phase1_end < self.phase2_end
            && self.phase2_end <= 1.0
            && self.tau_start > self.tau_target
            && self.tau_target > 0.0
            && (0.0..=1.0).contains(&self.beta)
            && self.refresh_fraction > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid curriculum configuration".into()))
        }
    }

    /// Steps between dynamic-score refreshes (at least one).
    pub fn refresh_interval(&self, total_steps: u64) -> u64 {
        (math::round(self.refresh_fraction * total_steps as f64) as u64).max(1)
    }
}

/// Output of the temperature curriculum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    /// Phase 1: uniform sampling without replacement.
    Uniform,
    Tau(f64),
}

impl Temperature {
    pub fn tau(self) -> Option<f64> {
        match self {
            Temperature::Uniform => None,
            Temperature::Tau(t) => Some(t),
        }
    }
}

pub fn temperature_at(step: u64, total_steps: u64, cfg: &CurriculumConfig) -> Temperature {
    if total_steps == 0 {
        return Temperature::Tau(cfg.tau_target);
    }
    let frac = step as f64 / total_steps as f64;
    if frac < cfg.phase1_end {
        Temperature::Uniform
    } else if frac < cfg.phase2_end {
        let u = (frac - cfg.phase1_end) / (cfg.phase2_end - cfg.phase1_end);
        Temperature::Tau(cfg.tau_target + (cfg.tau_start - cfg.tau_target) * (1.0 + math::cos(math::PI * u)) / 2.0)
    } else {
        Temperature::Tau(cfg.tau_target)
    }
}

/// `softmax(s / tau)` with max subtraction.
pub fn mask_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Precondition("temperature must be positive".into()));
    }
    let mut p: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// Indices of the `k` largest keys `log p_i + g_i`, `g_i ~ Gumbel(0, 1)`,
/// returned in ascending index order.
pub fn gumbel_top_k_mask(p: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > p.len() {
        return Err(Error::Precondition(alloc::format!("cannot mask {k} of {} patches", p.len())));
    }
    if p.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Precondition("mask probabilities must be strictly positive".into()));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let keys: Vec<f64> = p.iter().map(|pi| math::ln(*pi) + gumbel.sample(rng)).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap_or(core::cmp::Ordering::Equal));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `k` distinct indices of `0..n`, uniformly, ascending.
pub fn uniform_without_replacement(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Precondition(alloc::format!("cannot choose {k} of {n}")));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Static and dynamic importance plus their combination.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub s_static: Vec<f64>,
    pub s_dynamic: Vec<f64>,
    pub s_combined: Vec<f64>,
    pub beta: f64,
}

impl ImportanceState {
    pub fn new(s_static: Vec<f64>, beta: f64) -> ImportanceState {
        let s_dynamic = vec![0.0; s_static.len()];
        let s_combined = combine_scores(&s_static, &s_dynamic, beta);
        ImportanceState { s_static, s_dynamic, s_combined, beta }
    }

    pub fn from_atlas(membership: &AtlasMembership, weights: &RegionWeights, beta: f64) -> Result<ImportanceState> {
        Ok(ImportanceState::new(static_scores(membership, weights)?, beta))
    }

    /// Uniform scores; used when no atlas is available.
    pub fn flat(n: usize, beta: f64) -> ImportanceState {
        ImportanceState::new(vec![1.0; n], beta)
    }

    pub fn n_patches(&self) -> usize {
        self.s_static.len()
    }

    pub fn set_dynamic(&mut self, s_dynamic: Vec<f64>) {
        assert_eq!(s_dynamic.len(), self.s_static.len());
        self.s_combined = combine_scores(&self.s_static, &s_dynamic, self.beta);
        self.s_dynamic = s_dynamic;
    }

    /// Mask probabilities for a temperature; `None` in the uniform phase.
    pub fn mask_distribution(&self, t: Temperature) -> Result<Option<Vec<f64>>> {
        match t {
            Temperature::Uniform => Ok(None),
            Temperature::Tau(tau) => mask_probabilities(&self.s_combined, tau).map(Some),
        }
    }
}

/// Per-modality visible/masked partition of the patch grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub visible: [Vec<usize>; 4],
    pub masked: [Vec<usize>; 4],
}

impl MaskPlan {
    /// Every patch of every observed modality visible; missing modalities
    /// fully masked. This is the finetuning/inference layout.
    pub fn full_visibility(observed: ModalitySet, n: usize) -> MaskPlan {
        let all: Vec<usize> = (0..n).collect();
        let mut visible: [Vec<usize>; 4] = Default::default();
        let mut masked: [Vec<usize>; 4] = Default::default();
        for m in Modality::ALL {
            if observed.contains(m) {
                visible[m.index()] = all.clone();
            } else {
                masked[m.index()] = all.clone();
            }
        }
        MaskPlan { n_patches: n, visible, masked }
    }

    pub fn visible(&self, m: Modality) -> &[usize] {
        &self.visible[m.index()]
    }

    pub fn masked(&self, m: Modality) -> &[usize] {
        &self.masked[m.index()]
    }

    pub fn total_visible(&self) -> usize {
        self.visible.iter().map(Vec::len).sum()
    }

    /// Modalities with at least one visible patch.
    pub fn visible_modalities(&self) -> ModalitySet {
        Modality::ALL.into_iter().filter(|m| !self.visible(*m).is_empty()).collect()
    }

    /// Checks the partition invariant for every modality.
    pub fn check(&self) -> Result<()> {
        for m in Modality::ALL {
            let mut seen = vec![false; self.n_patches];
            for &i in self.visible(m).iter().chain(self.masked(m)) {
                if i >= self.n_patches || seen[i] {
                    return Err(Error::Internal(alloc::format!("{m}: patch {i} duplicated or out of range")));
                }
                seen[i] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Internal(alloc::format!("{m}: visible and masked sets do not cover the grid")));
            }
        }
        Ok(())
    }
}

/// Budgets visible tokens across `observed` and picks masked patches per
/// modality: uniformly in curriculum phase 1 (or with the curriculum
/// disabled), by Gumbel-top-k over importance afterwards.
pub fn build_mask_plan(
    observed: ModalitySet,
    masking: &MaskingConfig,
    curriculum: &CurriculumConfig,
    importance: &ImportanceState,
    step: u64,
    total_steps: u64,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let n = importance.n_patches();
    let counts = allocate_visible_budget(observed, n, masking, rng)?;
    let temperature = if curriculum.enabled { temperature_at(step, total_steps, curriculum) } else { Temperature::Uniform };
    let dist = importance.mask_distribution(temperature)?;
    plan_from_counts(observed, n, &counts, dist.as_deref(), rng)
}

/// Builds a plan from fixed visible counts and an optional mask distribution.
pub fn plan_from_counts(observed: ModalitySet, n: usize, counts: &[usize; 4], dist: Option<&[f64]>, rng: &mut Rng) -> Result<MaskPlan> {
    let mut visible: [Vec<usize>; 4] = Default::default();
    let mut masked: [Vec<usize>; 4] = Default::default();
    for m in Modality::ALL {
        let mi = m.index();
        if !observed.contains(m) {
            masked[mi] = (0..n).collect();
            continue;
        }
        let k = n.checked_sub(counts[mi]).ok_or_else(|| Error::Internal("visible count exceeds patch count".into()))?;
        let chosen = match dist {
            None => uniform_without_replacement(n, k, rng)?,
            Some(p) => gumbel_top_k_mask(p, k, rng)?,
        };
        let mut is_masked = vec![false; n];
        chosen.iter().for_each(|&i| is_masked[i] = true);
        visible[mi] = (0..n).filter(|&i| !is_masked[i]).collect();
        masked[mi] = chosen;
    }
    Ok(MaskPlan { n_patches: n, visible, masked })
}
