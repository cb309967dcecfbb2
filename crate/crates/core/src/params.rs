//! Named, component-tagged parameter tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Which part of the model a tensor belongs to. Only `Backbone` tensors are
/// read by the inference path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Backbone,
    Bias1,
    Bias2,
    Bias3,
    Bim,
    DebiasedModule,
    Sampler,
}

impl Tag {
    pub const ALL: [Tag; 7] =
        [Tag::Backbone, Tag::Bias1, Tag::Bias2, Tag::Bias3, Tag::Bim, Tag::DebiasedModule, Tag::Sampler];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Backbone => "backbone",
            Tag::Bias1 => "bias1",
            Tag::Bias2 => "bias2",
            Tag::Bias3 => "bias3",
            Tag::Bim => "bim",
            Tag::DebiasedModule => "debiased_module",
            Tag::Sampler => "sampler",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown component tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Tag,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tag: Tag, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tag, value });
        id
    }

    /// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: impl Into<String>, tag: Tag, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, tag, rows, cols, a, rng)
    }

    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        tag: Tag,
        rows: usize,
        cols: usize,
        a: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, tag, Mat::from_vec(rows, cols, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, tag: Tag, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, tag, Mat::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_tag(&self, tag: Tag) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.tag == tag).map(|(id, _)| id).collect()
    }

    /// Total scalar count, optionally restricted to one tag.
    pub fn count(&self, tag: Option<Tag>) -> usize {
        self.params.iter().filter(|p| tag.map_or(true, |t| p.tag == t)).map(|p| p.value.len()).sum()
    }

    pub fn counts_by_tag(&self) -> BTreeMap<Tag, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.tag).or_insert(0) += p.value.len();
        }
        out
    }

    /// Copy of the store holding only tensors with the given tag. Parameter
    /// ids of retained tensors are preserved only if they form a prefix, so
    /// callers must look tensors up by name.
    pub fn retain_tag(&self, tag: Tag) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.tag == tag) {
            out.add(p.name.clone(), p.tag, p.value.clone());
        }
        out
    }

    /// Overwrite values by name from `other`. Every tensor in `other` must
    /// exist here with the same tag and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            let id = self.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.tag != p.tag || dst.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} mismatch: have {} {:?}, got {} {:?}",
                    p.name,
                    dst.tag,
                    dst.value.shape(),
                    p.tag,
                    p.value.shape()
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub tensors: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { tensors: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.tensors[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.tensors[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.tensors.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.tensors.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn has_non_finite(&self) -> bool {
        self.tensors.iter().flatten().any(|g| !g.is_finite())
    }
}
