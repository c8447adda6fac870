//! Named parameter tensors and matching gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Index of a parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Initial values for a new tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Constant(f64),
}

/// Ordered set of named tensors. Values are `f64` but kept exactly
/// representable in `f32`, the on-disk precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let n: usize = shape.iter().product();
        let values = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| round_f32(rng.random_range(-bound..bound))).collect()
            }
            Init::Constant(c) => vec![round_f32(c); n],
        };
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        ParamId(id)
    }

    /// Registers a tensor with explicit values.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!(
                "parameter `{name}` of shape {shape:?} given {} values",
                values.len()
            )));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    /// Replaces a tensor's values, checking the length.
    pub fn set(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values[id.0].len() {
            return Err(Error::Shape(format!(
                "parameter `{}` has {} values, got {}",
                self.names[id.0],
                self.values[id.0].len(),
                values.len()
            )));
        }
        self.values[id.0] = values;
        Ok(())
    }

    /// Snaps every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in self.values.iter_mut().flatten() {
            *v = round_f32(*v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    /// Gradient buffer of matching layout, all zeros.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// Flat `(tensor, offset)` address of scalar `k` in registration order.
    pub fn locate(&self, mut k: usize) -> Option<(ParamId, usize)> {
        for (i, v) in self.values.iter().enumerate() {
            if k < v.len() {
                return Some((ParamId(i), k));
            }
            k -= v.len();
        }
        None
    }
}

/// One gradient tensor per parameter, same layout as the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values.iter_mut().flatten() {
            *v *= s;
        }
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), v.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}
