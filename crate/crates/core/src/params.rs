//! Named parameter tensors and their gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Ordered collection of named parameters. Ids are insertion indices, so a
/// store built by the same constructor always has the same layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// The first `n` parameters as a separate store (same ids, same names).
    pub fn prefix(&self, n: usize) -> ParamStore {
        let mut out = ParamStore::new();
        for p in &self.params[..n] {
            out.add(p.name.clone(), p.value.clone());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces values by name; every name in `self` must be present in
    /// `values` with a matching shape.
    pub fn load_from(&mut self, values: &BTreeMap<String, Mat>) -> Result<()> {
        for p in &mut self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::Data(alloc::format!("missing parameter '{}'", p.name)))?;
            if !v.same_shape(&p.value) {
                return Err(Error::Data(alloc::format!(
                    "parameter '{}' has shape {}x{}, expected {}x{}",
                    p.name,
                    v.rows,
                    v.cols,
                    p.value.rows,
                    p.value.cols
                )));
            }
            p.value.data.copy_from_slice(&v.data);
        }
        Ok(())
    }
}

/// Per-parameter gradient slots aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n: usize) -> Grads {
        Grads { slots: alloc::vec![None; n] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.slots.iter_mut().flatten().for_each(|g| g.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.slots.iter().flatten().flat_map(|g| g.data.iter()).map(|x| x * x).sum())
    }

    /// Scales all gradients so the global norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Glorot-uniform initialization for a `fan_in x fan_out` weight.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Mat {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect())
}

/// Normal initialization with standard deviation `std`, truncated at 2 std.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if math::abs(x) <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}
