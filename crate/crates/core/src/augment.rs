//! Spatial augmentation. One transform is sampled per subject and applied to
//! every observed modality through a shared sampling-coordinate map, so the
//! modalities stay voxel-aligned.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::Rng;
use crate::volume::{Shape3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub affine: bool,
    pub elastic: bool,
    /// Per-axis (z, y, x) flip probability.
    pub flip_prob: [f64; 3],
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_translation: f64,
    /// Control points per axis of the elastic displacement grid.
    pub elastic_grid: usize,
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            affine: true,
            elastic: true,
            flip_prob: [0.0, 0.0, 0.5],
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_translation: 4.0,
            elastic_grid: 4,
            elastic_sigma: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> AugmentConfig {
        AugmentConfig { flip: false, affine: false, elastic: false, ..Default::default() }
    }

    pub fn any(&self) -> bool {
        self.flip || self.affine || self.elastic
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.into()));
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("invalid scale range");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0 && self.elastic_sigma >= 0.0) {
            return bad("augmentation magnitudes must be nonnegative");
        }
        if self.elastic_grid < 2 {
            return bad("elastic grid needs at least two control points per axis");
        }
        Ok(())
    }
}

/// Rotation about the volume centre (radians about z, y, x), isotropic
/// scale, then translation in voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub rotation: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { rotation: [0.0; 3], scale: 1.0, translation: [0.0; 3] };

    /// Inverse of the linear part, used to pull output voxels back.
    fn inverse_linear(&self) -> [[f64; 3]; 3] {
        let rot = |axis: usize, a: f64| {
            let (c, s) = (math::cos(a), math::sin(a));
            let mut m = [[0.0; 3]; 3];
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[j][j] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut c = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            c
        };
        let t = |m: [[f64; 3]; 3]| {
            let mut o = m;
            for i in 0..3 {
                for j in 0..3 {
                    o[i][j] = m[j][i];
                }
            }
            o
        };
        // forward R = Rz Ry Rx, inverse of a rotation is its transpose
        let r = mul(mul(rot(0, self.rotation[0]), rot(1, self.rotation[1])), rot(2, self.rotation[2]));
        let mut inv = t(r);
        for row in inv.iter_mut() {
            for v in row.iter_mut() {
                *v /= self.scale;
            }
        }
        inv
    }
}

/// Dense displacement in voxels, one component per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub field: [Vec<f64>; 3],
}

impl Displacement {
    pub fn sample(shape: Shape3, grid: usize, sigma: f64, rng: &mut Rng) -> Displacement {
        let normal = Normal::new(0.0, sigma).expect("nonnegative sigma");
        let field = core::array::from_fn(|_| {
            let ctrl: Vec<f64> = (0..grid * grid * grid).map(|_| normal.sample(rng)).collect();
            trilinear_upsample(&ctrl, grid, shape)
        });
        Displacement { field }
    }
}

fn trilinear_upsample(ctrl: &[f64], c: usize, shape: Shape3) -> Vec<f64> {
    let coord = |i: usize, n: usize| {
        let t = if n > 1 { i as f64 / (n - 1) as f64 * (c - 1) as f64 } else { 0.0 };
        let lo = (math::floor(t) as usize).min(c - 2);
        (lo, t - lo as f64)
    };
    let at = |a: usize, b: usize, d: usize| ctrl[(a * c + b) * c + d];
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

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTransform {
    pub flips: [bool; 3],
    pub affine: Option<Affine>,
    pub elastic: Option<Displacement>,
}

impl SpatialTransform {
    pub const IDENTITY: SpatialTransform = SpatialTransform { flips: [false; 3], affine: None, elastic: None };

    pub fn flip(axis: usize) -> SpatialTransform {
        let mut flips = [false; 3];
        flips[axis] = true;
        SpatialTransform { flips, ..SpatialTransform::IDENTITY }
    }

    pub fn sample(cfg: &AugmentConfig, shape: Shape3, rng: &mut Rng) -> SpatialTransform {
        let mut t = SpatialTransform::IDENTITY;
        if cfg.flip {
            for a in 0..3 {
                t.flips[a] = rng.random::<f64>() < cfg.flip_prob[a];
            }
        }
        if cfg.affine {
            let max_rot = cfg.max_rotation_deg.to_radians();
            let mut uni = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let rotation = [uni(-max_rot, max_rot), uni(-max_rot, max_rot), uni(-max_rot, max_rot)];
            let scale = uni(cfg.scale_min, cfg.scale_max);
            let m = cfg.max_translation;
            let translation = [uni(-m, m), uni(-m, m), uni(-m, m)];
            t.affine = Some(Affine { rotation, scale, translation });
        }
        if cfg.elastic {
            t.elastic = Some(Displacement::sample(shape, cfg.elastic_grid, cfg.elastic_sigma, rng));
        }
        t
    }

    /// Source coordinate (z, y, x) sampled for every output voxel.
    pub fn coordinate_map(&self, shape: Shape3) -> Vec<[f64; 3]> {
        let dims = [shape.d as f64, shape.h as f64, shape.w as f64];
        let centre = dims.map(|n| (n - 1.0) / 2.0);
        let inv = self.affine.map(|a| (a.inverse_linear(), a.translation));
        let mut out = Vec::with_capacity(shape.voxels());
        for z in 0..shape.d {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let mut p = [z as f64, y as f64, x as f64];
                    if let Some(e) = &self.elastic {
                        let o = shape.offset(z, y, x);
                        for a in 0..3 {
                            p[a] += e.field[a][o];
                        }
                    }
                    if let Some((m, t)) = &inv {
                        let q = [p[0] - centre[0] - t[0], p[1] - centre[1] - t[1], p[2] - centre[2] - t[2]];
                        for a in 0..3 {
                            p[a] = m[a][0] * q[0] + m[a][1] * q[1] + m[a][2] * q[2] + centre[a];
                        }
                    }
                    for a in 0..3 {
                        if self.flips[a] {
                            p[a] = dims[a] - 1.0 - p[a];
                        }
                    }
                    out.push(p);
                }
            }
        }
        out
    }
}

/// Trilinear sample with zero outside the volume.
fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let s = v.shape;
    let dims = [s.d, s.h, s.w];
    let base = p.map(math::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            let wa = if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if wa == 0.0 {
                w = 0.0;
                break;
            }
            let i = base[a] as i64 + bit as i64;
            if i < 0 || i >= dims[a] as i64 {
                inside = false;
            }
            idx[a] = i.max(0) as usize;
            w *= wa;
        }
        if w != 0.0 && inside {
            acc += w * f64::from(v.get(idx[0], idx[1], idx[2]));
        }
    }
    acc
}

pub fn apply_map(v: &Volume, map: &[[f64; 3]]) -> Volume {
    let data = map.iter().map(|&p| sample_trilinear(v, p).clamp(0.0, 1.0) as f32).collect();
    Volume { shape: v.shape, data }
}

pub fn apply_transform(v: &Volume, t: &SpatialTransform) -> Volume {
    apply_map(v, &t.coordinate_map(v.shape))
}

/// Samples one transform and applies it to every present volume.
pub fn augment(volumes: &[Option<Volume>; 4], cfg: &AugmentConfig, rng: &mut Rng) -> [Option<Volume>; 4] {
    let Some(shape) = volumes.iter().flatten().map(|v| v.shape).next() else {
        return volumes.clone();
    };
    if !cfg.any() {
        return volumes.clone();
    }
    let t = SpatialTransform::sample(cfg, shape, rng);
    let map = t.coordinate_map(shape);
    volumes.each_ref().map(|v| v.as_ref().map(|v| apply_map(v, &map)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn noise_volume(seed: u64) -> Volume {
        let mut rng = stream(&[seed]);
        let shape = Shape3 { d: 6, h: 7, w: 8 };
        Volume::new(shape, (0..shape.voxels()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let v = noise_volume(1);
        for a in 0..3 {
            let t = SpatialTransform::flip(a);
            let once = apply_transform(&v, &t);
            assert_ne!(once, v);
            assert_eq!(apply_transform(&once, &t), v);
        }
    }

    #[test]
    fn identity_affine_keeps_input() {
        let v = noise_volume(2);
        let t = SpatialTransform { affine: Some(Affine::IDENTITY), ..SpatialTransform::IDENTITY };
        let out = apply_transform(&v, &t);
        for (a, b) in out.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn marker_lands_identically_in_every_modality() {
        let shape = Shape3::cube(16);
        let mut vols: [Option<Volume>; 4] = Default::default();
        for (k, slot) in vols.iter_mut().enumerate() {
            let mut v = Volume::zeros(shape);
            v.data.iter_mut().for_each(|x| *x = 0.05 * k as f32);
            v.set(7, 8, 9, 1.0);
            *slot = Some(v);
        }
        let mut rng = stream(&[3]);
        let out = augment(&vols, &AugmentConfig { flip_prob: [0.5; 3], ..Default::default() }, &mut rng);
        let argmax = |v: &Volume| (0..v.data.len()).max_by(|&a, &b| v.data[a].total_cmp(&v.data[b])).unwrap();
        let first = argmax(out[0].as_ref().unwrap());
        for v in out.iter().flatten() {
            assert_eq!(argmax(v), first);
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
