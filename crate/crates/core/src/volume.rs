//! Volumes, patch grids, min-max normalization and patch partitioning.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Grid extent in voxels, `(depth, height, width)`, indexed z, y, x.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn cube(n: usize) -> Shape3 {
        Shape3 { d: n, h: n, w: n }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn offset(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }
}

/// A 3D scalar grid stored row-major in z, y, x order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Volume> {
        if data.len() != shape.voxels() {
            return Err(Error::Truncated(alloc::format!(
                "expected {} voxels, got {}",
                shape.voxels(),
                data.len()
            )));
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Volume {
        Volume { shape, data: vec![0.0; shape.voxels()] }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.offset(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let o = self.shape.offset(z, y, x);
        self.data[o] = v;
    }
}

/// Min-max normalization guard.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Rescales intensities to `[0, 1]`: `(v - min) / (max - min + eps)`.
///
/// A constant volume maps to all zeros.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(alloc::format!("non-finite voxel at offset {i}")));
    }
    let (lo, hi) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(f64::from(x)), hi.max(f64::from(x)))
        });
    if v.data.is_empty() {
        return Ok(v.clone());
    }
    let scale = 1.0 / (hi - lo + NORMALIZE_EPS);
    let data = v
        .data
        .iter()
        .map(|&x| (((f64::from(x) - lo) * scale) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(Volume { shape: v.shape, data })
}

/// Non-overlapping cubic patches of edge `p` over a volume shape.
///
/// Patch `i` has block coordinates `(bz, by, bx)` with
/// `i = (bz * nh + by) * nw + bx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub shape: Shape3,
    pub p: usize,
}

impl PatchGrid {
    pub fn new(shape: Shape3, p: usize) -> Result<PatchGrid> {
        if p == 0 || shape.d % p != 0 || shape.h % p != 0 || shape.w % p != 0 || shape.voxels() == 0 {
            return Err(Error::Config(alloc::format!(
                "volume shape {}x{}x{} is not divisible by patch size {p}",
                shape.d,
                shape.h,
                shape.w
            )));
        }
        Ok(PatchGrid { shape, p })
    }

    /// Blocks per axis `(nd, nh, nw)`.
    pub fn blocks(&self) -> (usize, usize, usize) {
        (self.shape.d / self.p, self.shape.h / self.p, self.shape.w / self.p)
    }

    pub fn n_patches(&self) -> usize {
        let (a, b, c) = self.blocks();
        a * b * c
    }

    pub fn patch_len(&self) -> usize {
        self.p * self.p * self.p
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let (_, nh, nw) = self.blocks();
        (i / (nh * nw), (i / nw) % nh, i % nw)
    }

    pub fn index(&self, bz: usize, by: usize, bx: usize) -> usize {
        let (_, nh, nw) = self.blocks();
        (bz * nh + by) * nw + bx
    }

    /// Patch index containing voxel `(z, y, x)`.
    pub fn patch_of_voxel(&self, z: usize, y: usize, x: usize) -> usize {
        self.index(z / self.p, y / self.p, x / self.p)
    }

    /// Visits the voxel offsets of patch `i` in patch-local z, y, x order.
    pub fn for_each_voxel(&self, i: usize, mut f: impl FnMut(usize, usize)) {
        let (bz, by, bx) = self.coords(i);
        let p = self.p;
        let mut local = 0;
        for z in bz * p..(bz + 1) * p {
            for y in by * p..(by + 1) * p {
                let row = self.shape.offset(z, y, bx * p);
                for x in 0..p {
                    f(local, row + x);
                    local += 1;
                }
            }
        }
    }

    fn check(&self, v: &Volume) -> Result<()> {
        if v.shape != self.shape {
            return Err(Error::Config(alloc::format!(
                "volume shape {:?} does not match patch grid shape {:?}",
                v.shape,
                self.shape
            )));
        }
        Ok(())
    }
}

/// Splits `v` into `N` flattened patches of `p^3` voxels each.
pub fn partition_patches(v: &Volume, grid: &PatchGrid) -> Result<Vec<Vec<f32>>> {
    grid.check(v)?;
    Ok((0..grid.n_patches())
        .map(|i| {
            let mut patch = vec![0.0; grid.patch_len()];
            grid.for_each_voxel(i, |l, o| patch[l] = v.data[o]);
            patch
        })
        .collect())
}

/// Inverse of [`partition_patches`].
pub fn unpartition_patches(patches: &[Vec<f32>], grid: &PatchGrid) -> Result<Volume> {
    if patches.len() != grid.n_patches() || patches.iter().any(|p| p.len() != grid.patch_len()) {
        return Err(Error::Config("patch list does not match the patch grid".into()));
    }
    let mut v = Volume::zeros(grid.shape);
    for (i, patch) in patches.iter().enumerate() {
        grid.for_each_voxel(i, |l, o| v.data[o] = patch[l]);
    }
    Ok(v)
}

/// Patches as an `N x p^3` matrix, the layout the model consumes.
pub fn patch_matrix(v: &Volume, grid: &PatchGrid) -> Result<Mat> {
    grid.check(v)?;
    let len = grid.patch_len();
    let mut m = Mat::zeros(grid.n_patches(), len);
    for i in 0..grid.n_patches() {
        let row = &mut m.data[i * len..(i + 1) * len];
        grid.for_each_voxel(i, |l, o| row[l] = f64::from(v.data[o]));
    }
    Ok(m)
}

/// Nearest-patch upsampling of one value per patch back to voxel space.
pub fn upsample_patch_values(values: &[f64], grid: &PatchGrid) -> Result<Volume> {
    if values.len() != grid.n_patches() {
        return Err(Error::Config("one value per patch expected".into()));
    }
    let mut v = Volume::zeros(grid.shape);
    for (i, &val) in values.iter().enumerate() {
        grid.for_each_voxel(i, |_, o| v.data[o] = val as f32);
    }
    Ok(v)
}


/// Integer region labels on the volume grid; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: Shape3,
    pub data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, data: Vec<u16>) -> Result<LabelVolume> {
        if data.len() != shape.voxels() {
            return Err(Error::Truncated(alloc::format!(
                "expected {} labels, got {}",
                shape.voxels(),
                data.len()
            )));
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
