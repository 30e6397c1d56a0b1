use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a tensor inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of parameter values between optimizer steps.
///
/// Arithmetic is always carried out in `f64`. With `F32` every stored value
/// (weights, optimizer moments, running statistics) is rounded to the nearest
/// `f32` after each update, so a 32-bit checkpoint captures the full state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn round_tensor(self, t: &mut Tensor) {
        if self == Precision::F32 {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable (or frozen) weight.
    Weight,
    /// Statistics updated during the forward pass, never by gradients.
    Buffer,
}

/// A named parameter with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct ParameterTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Owns every parameter of one model.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<ParameterTensor>,
    precision: Precision,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            precision: self.precision,
        }
    }
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            precision,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Switches precision; switching to `F32` rounds all current values.
    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        for p in &mut self.params {
            precision.round_tensor(&mut p.value);
        }
    }

    fn push(&mut self, name: &str, mut value: Tensor, trainable: bool, kind: ParamKind) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.precision.round_tensor(&mut value);
        let grad = Tensor::zeros(value.shape());
        self.params.push(ParameterTensor {
            name: name.to_string(),
            value,
            grad,
            trainable,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true, ParamKind::Weight)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false, ParamKind::Buffer)
    }

    /// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape/product agree"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParameterTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParameterTensor {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParameterTensor> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value, keeping its shape and rounding to the store precision.
    pub fn set_value(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        self.precision.round_tensor(&mut value);
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks every tensor non-trainable.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values from `other`, matching tensors by position and name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return invalid("parameter stores have different layouts");
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Loads named tensors (e.g. from a checkpoint). Every store tensor must be present.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let Some((_, t)) = tensors.iter().find(|(n, _)| *n == p.name) else {
                return invalid(format!("checkpoint is missing tensor {}", p.name));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            let mut v = t.clone();
            self.precision.round_tensor(&mut v);
            p.value = v;
        }
        Ok(())
    }

    /// Named snapshot of all values.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// True when all values are bit-identical to those of `other`.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
