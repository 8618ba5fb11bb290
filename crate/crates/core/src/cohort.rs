//! Subjects, splits, and the synthetic cohort generator.
//!
//! The generator builds a template anatomy (an ellipsoidal "brain" inside a
//! non-brain shell, parcellated into Voronoi regions, a few of which are
//! designated AD-critical) and renders each subject from a latent disease
//! score `z in [0, 1]`: MRI intensity in critical regions falls with `z`,
//! PET uptake there rises with `z`, both scaled by `signal_strength`.
//! Labels are deterministic functions of the latents plus fixed-scale noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::RegionClass;
use crate::math;
use crate::modality::{is_designated, Modality, ModalitySet};
use crate::rng::{domain, hash_str, stream, Rng};
use crate::volume::{normalize_volume, LabelVolume, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub diagnosis: Option<Diagnosis>,
    pub mmse: Option<f64>,
    pub age: Option<f64>,
}

/// One subject with the volumes of its observed modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub observed: ModalitySet,
    pub volumes: [Option<Volume>; 4],
    pub labels: Labels,
}

impl SubjectRecord {
    pub fn volume(&self, m: Modality) -> Option<&Volume> {
        self.volumes[m.index()].as_ref()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed.is_empty() {
            return Err(Error::Data(format!("subject {} has no observed modality", self.id)));
        }
        let mut shape = None;
        for m in Modality::ALL {
            match (self.observed.contains(m), self.volume(m)) {
                (true, Some(v)) => {
                    if *shape.get_or_insert(v.shape) != v.shape {
                        return Err(Error::Data(format!("subject {}: volume shapes differ", self.id)));
                    }
                }
                (false, None) => {}
                _ => return Err(Error::Data(format!("subject {}: volumes do not match observed set for {m}", self.id))),
            }
        }
        if let Some(mmse) = self.labels.mmse {
            if !(0.0..=30.0).contains(&mmse) {
                return Err(Error::Data(format!("subject {}: MMSE {mmse} outside [0, 30]", self.id)));
            }
        }
        if let Some(age) = self.labels.age {
            if !(40.0..=100.0).contains(&age) {
                return Err(Error::Data(format!("subject {}: age {age} outside [40, 100]", self.id)));
            }
        }
        Ok(())
    }

    /// The same subject restricted to `keep` (volumes outside are dropped).
    pub fn restricted(&self, keep: ModalitySet) -> SubjectRecord {
        let observed = ModalitySet::from_bits(self.observed.bits() & keep.bits());
        let volumes = Modality::ALL.map(|m| if observed.contains(m) { self.volumes[m.index()].clone() } else { None });
        SubjectRecord { id: self.id.clone(), observed, volumes, labels: self.labels }
    }
}

/// In-memory cohort: subjects plus their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub splits: Vec<Split>,
}

impl Cohort {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.subjects.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.len() != self.splits.len() {
            return Err(Error::Data("one split per subject expected".into()));
        }
        let mut ids = BTreeMap::new();
        for (s, split) in self.subjects.iter().zip(&self.splits) {
            s.validate()?;
            if ids.insert(s.id.clone(), ()).is_some() {
                return Err(Error::Data(format!("duplicate subject id {}", s.id)));
            }
            if *split == Split::Test && !is_designated(s.observed) {
                return Err(Error::Data(format!("test subject {} has non-designated combination {}", s.id, s.observed)));
            }
        }
        Ok(())
    }
}

/// Per-modality observation probabilities. T1 is always observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessProfile {
    pub t2: f64,
    pub flair: f64,
    pub pet: f64,
}

impl Default for MissingnessProfile {
    fn default() -> Self {
        MissingnessProfile { t2: 0.5, flair: 0.8, pet: 0.5 }
    }
}

impl MissingnessProfile {
    pub const COMPLETE: MissingnessProfile = MissingnessProfile { t2: 1.0, flair: 1.0, pet: 1.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCohortConfig {
    pub n_subjects: usize,
    pub volume_shape: Shape3,
    /// Atlas regions including the non-brain shell (label 1).
    pub n_regions: usize,
    pub seed: u64,
    pub signal_strength: f64,
    pub missingness: MissingnessProfile,
}

impl Default for SyntheticCohortConfig {
    fn default() -> Self {
        SyntheticCohortConfig {
            n_subjects: 200,
            volume_shape: Shape3::cube(32),
            n_regions: 12,
            seed: 0,
            signal_strength: 1.0,
            missingness: MissingnessProfile::default(),
        }
    }
}

/// Fixed constants of the synthetic label and image model.
pub mod constants {
    /// `z` below this is CN.
    pub const CN_UPPER: f64 = 1.0 / 3.0;
    /// `z` at or above this is AD; in between is MCI.
    pub const AD_LOWER: f64 = 2.0 / 3.0;
    pub const MMSE_SLOPE: f64 = 12.0;
    pub const MMSE_NOISE: f64 = 1.0;
    pub const AGE_MEAN: f64 = 70.0;
    pub const AGE_PER_COVARIATE: f64 = 7.0;
    pub const AGE_NOISE: f64 = 2.0;
    /// Relative MRI intensity loss in critical regions at `z = 1`.
    pub const MRI_EFFECT: f64 = 0.12;
    /// Absolute PET uptake gain in critical regions at `z = 1`.
    pub const PET_EFFECT: f64 = 0.45;
    /// PET uptake gain elsewhere in gray matter at `z = 1`.
    pub const PET_DIFFUSE_EFFECT: f64 = 0.08;
    /// Relative gray-matter intensity change per unit age covariate.
    pub const AGE_EFFECT: f64 = 0.05;
    /// Subject-level relative jitter of each region's intensity.
    pub const REGION_JITTER: f64 = 0.06;
    pub const SMOOTH_NOISE: f64 = 0.03;
    pub const WHITE_NOISE: f64 = 0.01;
}

impl SyntheticCohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("cohort needs at least one subject".into()));
        }
        if self.n_regions < 3 {
            return Err(Error::Config("at least three atlas regions are required".into()));
        }
        if self.n_regions > usize::from(u16::MAX) {
            return Err(Error::Config("too many regions".into()));
        }
        let s = self.volume_shape;
        if s.d < 8 || s.h < 8 || s.w < 8 {
            return Err(Error::Config("volume too small for the synthetic anatomy".into()));
        }
        if !(self.signal_strength >= 0.0) {
            return Err(Error::Config("signal strength must be nonnegative".into()));
        }
        let m = self.missingness;
        if [m.t2, m.flair, m.pet].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("observation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Region labels plus the relevance class of each region (`classes[k]` is
/// label `k + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAtlas {
    pub labels: LabelVolume,
    pub classes: Vec<RegionClass>,
}

impl SyntheticAtlas {
    pub fn n_regions(&self) -> usize {
        self.classes.len()
    }

    pub fn critical_labels(&self) -> Vec<u16> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == RegionClass::AdCritical)
            .map(|(k, _)| k as u16 + 1)
            .collect()
    }
}

/// Normalized ellipsoid radius of a voxel centre (1.0 at the brain surface).
fn brain_radius(shape: Shape3, z: usize, y: usize, x: usize) -> f64 {
    let r = |i: usize, n: usize| ((i as f64 + 0.5) - n as f64 / 2.0) / (0.40 * n as f64);
    let (a, b, c) = (r(z, shape.d), r(y, shape.h), r(x, shape.w));
    math::sqrt(a * a + b * b + c * c)
}

const SHELL_OUTER: f64 = 1.18;

pub fn generate_atlas(cfg: &SyntheticCohortConfig) -> Result<SyntheticAtlas> {
    cfg.validate()?;
    let shape = cfg.volume_shape;
    let mut rng = stream(&[domain::ATLAS, cfg.seed]);
    let parcels = cfg.n_regions - 1;
    let mut seeds: Vec<(f64, f64, f64)> = Vec::with_capacity(parcels);
    while seeds.len() < parcels {
        let p = (rng.random_range(0.0..shape.d as f64), rng.random_range(0.0..shape.h as f64), rng.random_range(0.0..shape.w as f64));
        if brain_radius(shape, p.0 as usize, p.1 as usize, p.2 as usize) < 0.85 {
            seeds.push(p);
        }
    }
    let mut data = vec![0u16; shape.voxels()];
    for z in 0..shape.d {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let r = brain_radius(shape, z, y, x);
                let label = if r < 1.0 {
                    let c = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                    let nearest = seeds
                        .iter()
                        .enumerate()
                        .map(|(k, s)| (k, (s.0 - c.0) * (s.0 - c.0) + (s.1 - c.1) * (s.1 - c.1) + (s.2 - c.2) * (s.2 - c.2)))
                        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                        .0;
                    2 + nearest as u16
                } else if r < SHELL_OUTER {
                    1
                } else {
                    0
                };
                data[shape.offset(z, y, x)] = label;
            }
        }
    }
    let n_critical = (parcels / 4).max(1);
    let mut classes = vec![RegionClass::NonBrain];
    classes.extend((0..parcels).map(|k| if k < n_critical { RegionClass::AdCritical } else { RegionClass::GrayMatter }));
    Ok(SyntheticAtlas { labels: LabelVolume::new(shape, data)?, classes })
}

/// Cohort-level appearance shared by all subjects.
struct Template {
    /// `base[m][label]`, label 0 = background.
    base: [Vec<f64>; 4],
    /// Fixed smooth texture per modality, voxel-wise.
    texture: [Vec<f64>; 4],
}

fn make_template(cfg: &SyntheticCohortConfig) -> Template {
    let mut rng = stream(&[domain::TEMPLATE, cfg.seed]);
    let k = cfg.n_regions;
    let ranges = [(0.25, 0.45, 0.75), (0.6, 0.3, 0.6), (0.2, 0.35, 0.65), (0.05, 0.2, 0.3)];
    let base = ranges.map(|(shell, lo, hi)| {
        let mut v = vec![0.0, shell];
        v.extend((0..k - 1).map(|_| rng.random_range(lo..hi)));
        v
    });
    let shape = cfg.volume_shape;
    let texture = core::array::from_fn(|_| {
        let waves: Vec<([f64; 3], f64)> = (0..3)
            .map(|_| ([rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)], rng.random_range(0.0..6.3)))
            .collect();
        let mut t = vec![0.0; shape.voxels()];
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    t[shape.offset(z, y, x)] = waves
                        .iter()
                        .map(|(f, ph)| 0.02 * math::sin(f[0] * z as f64 + f[1] * y as f64 + f[2] * x as f64 + ph))
                        .sum();
                }
            }
        }
        t
    });
    Template { base, texture }
}

/// Trilinearly upsampled coarse Gaussian field (`4^3` control points).
fn smooth_field(shape: Shape3, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let c = 4;
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let ctrl: Vec<f64> = (0..c * c * c).map(|_| normal.sample(rng)).collect();
    let at = |a: usize, b: usize, d: usize| ctrl[(a * c + b) * c + d];
    let coord = |i: usize, n: usize| {
        let t = (i as f64 + 0.5) / n as f64 * (c - 1) as f64;
        let lo = (math::floor(t) as usize).min(c - 2);
        (lo, t - lo as f64)
    };
    let mut out = vec![0.0; shape.voxels()];
    for z in 0..shape.d {
        let (z0, fz) = coord(z, shape.d);
        for y in 0..shape.h {
            let (y0, fy) = coord(y, shape.h);
            for x in 0..shape.w {
                let (x0, fx) = coord(x, shape.w);
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            v += wz * wy * wx * at(z0 + dz, y0 + dy, x0 + dx);
                        }
                    }
                }
                out[shape.offset(z, y, x)] = v;
            }
        }
    }
    out
}

pub fn diagnosis_of(z: f64) -> Diagnosis {
    if z < constants::CN_UPPER {
        Diagnosis::CN
    } else if z < constants::AD_LOWER {
        Diagnosis::MCI
    } else {
        Diagnosis::AD
    }
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{:04}", i + 1)
}

/// Renders one subject. The RNG stream depends only on `(seed, id)`.
fn render_subject(cfg: &SyntheticCohortConfig, atlas: &SyntheticAtlas, tpl: &Template, id: &str) -> Result<(SubjectRecord, f64)> {
    use constants::*;
    let mut rng = stream(&[domain::SUBJECT, cfg.seed, hash_str(id)]);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z: f64 = rng.random_range(0.0..1.0);
    let age_cov: f64 = std_normal.sample(&mut rng);
    let age = (AGE_MEAN + AGE_PER_COVARIATE * age_cov + AGE_NOISE * std_normal.sample(&mut rng)).clamp(40.0, 100.0);
    let mmse = (30.0 - MMSE_SLOPE * z + MMSE_NOISE * std_normal.sample(&mut rng)).clamp(0.0, 30.0);

    let m = cfg.missingness;
    let mut observed = ModalitySet::single(Modality::T1);
    for (modality, p) in [(Modality::T2, m.t2), (Modality::Flair, m.flair), (Modality::Pet, m.pet)] {
        if rng.random::<f64>() < p {
            observed = observed.with(modality);
        }
    }

    let s = cfg.signal_strength;
    let shape = cfg.volume_shape;
    let k = cfg.n_regions;
    let mut volumes: [Option<Volume>; 4] = Default::default();
    for modality in Modality::ALL {
        let mi = modality.index();
        let mut region_value = vec![0.0; k + 1];
        for label in 1..=k {
            let class = atlas.classes[label - 1];
            let mut v = tpl.base[mi][label] * (1.0 + REGION_JITTER * std_normal.sample(&mut rng));
            let gray = class != RegionClass::NonBrain;
            if modality.is_mri() {
                if gray {
                    v *= 1.0 - AGE_EFFECT * age_cov;
                }
                if class == RegionClass::AdCritical {
                    v *= 1.0 - MRI_EFFECT * s * z;
                }
            } else if class == RegionClass::AdCritical {
                v += PET_EFFECT * s * z;
            } else if gray {
                v += PET_DIFFUSE_EFFECT * s * z;
            }
            region_value[label] = v;
        }
        let field = smooth_field(shape, SMOOTH_NOISE, &mut rng);
        let mut data = Vec::with_capacity(shape.voxels());
        for o in 0..shape.voxels() {
            let label = usize::from(atlas.labels.data[o]);
            let noise = WHITE_NOISE * std_normal.sample(&mut rng);
            let v = if label == 0 { 0.0 } else { (region_value[label] + field[o] + tpl.texture[mi][o] + noise).max(0.0) };
            data.push(v as f32);
        }
        if observed.contains(modality) {
            volumes[mi] = Some(normalize_volume(&Volume::new(shape, data)?)?);
        }
    }
    let labels = Labels { diagnosis: Some(diagnosis_of(z)), mmse: Some(mmse), age: Some(age) };
    Ok((SubjectRecord { id: String::from(id), observed, volumes, labels }, z))
}

/// Deterministic cohort + atlas. Also returns the latent disease scores.
pub fn generate_synthetic_cohort(cfg: &SyntheticCohortConfig) -> Result<(Cohort, SyntheticAtlas, Vec<f64>)> {
    let atlas = generate_atlas(cfg)?;
    let tpl = make_template(cfg);
    let ids: Vec<String> = (0..cfg.n_subjects).map(subject_id).collect();
    #[cfg(feature = "parallel")]
    let rendered: Vec<Result<(SubjectRecord, f64)>> = {
        use rayon::prelude::*;
        ids.par_iter().map(|id| render_subject(cfg, &atlas, &tpl, id)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rendered: Vec<Result<(SubjectRecord, f64)>> = ids.iter().map(|id| render_subject(cfg, &atlas, &tpl, id)).collect();
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut latents = Vec::with_capacity(cfg.n_subjects);
    for r in rendered {
        let (s, z) = r?;
        subjects.push(s);
        latents.push(z);
    }
    let splits = assign_splits(&subjects, cfg.seed);
    Ok((Cohort { subjects, splits }, atlas, latents))
}

/// 60/10/30 train/val/test, stratified by (combination, diagnosis), for the
/// designated combinations; 80/20 train/val for everything else.
pub fn assign_splits(subjects: &[SubjectRecord], seed: u64) -> Vec<Split> {
    let mut groups: BTreeMap<(u8, Option<Diagnosis>), Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        groups.entry((s.observed.bits(), s.labels.diagnosis)).or_default().push(i);
    }
    let mut splits = vec![Split::Train; subjects.len()];
    for ((bits, diag), mut members) in groups {
        let mut rng = stream(&[domain::SPLIT, seed, u64::from(bits), diag.map_or(9, |d| d as u64)]);
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let n = members.len() as f64;
        let (n_train, n_val) = if is_designated(ModalitySet::from_bits(bits)) {
            let tr = math::round(0.6 * n) as usize;
            (tr, (math::round(0.1 * n) as usize).min(members.len() - tr))
        } else {
            let tr = math::round(0.8 * n) as usize;
            (tr, members.len() - tr)
        };
        for (rank, &i) in members.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}
