//! Named parameter collections and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};

/// Flat name -> array map. The student set carries grad slots; the teacher
/// set is created without them and can never receive gradients.
#[derive(Debug, Clone)]
pub struct ParamSet<E: Scalar> {
    names: Vec<String>,
    arrays: Vec<Array<E>>,
    grads: Option<Vec<Array<E>>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new(trainable: bool) -> Self {
        ParamSet {
            names: Vec::new(),
            arrays: Vec::new(),
            grads: if trainable { Some(Vec::new()) } else { None },
            index: HashMap::new(),
        }
    }

    pub fn trainable(&self) -> bool {
        self.grads.is_some()
    }

    /// Keeps names sorted so iteration (and every float reduction over the
    /// whole set) is order-canonical regardless of construction order.
    pub fn insert(&mut self, name: impl Into<String>, value: Array<E>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let pos = self.names.partition_point(|n| n < &name);
        if let Some(g) = &mut self.grads {
            g.insert(pos, Array::zeros(value.shape()));
        }
        self.names.insert(pos, name.clone());
        self.arrays.insert(pos, value);
        self.index.insert(name, pos);
        for (i, n) in self.names.iter().enumerate().skip(pos + 1) {
            *self.index.get_mut(n).expect("indexed") = i;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Array<E>> {
        self.index
            .get(name)
            .map(|&i| &self.arrays[i])
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<E>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        Ok(&mut self.arrays[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Array<E>> {
        let i = *self.index.get(name)?;
        self.grads.as_ref().map(|g| &g[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<E>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.arrays.iter())
    }

    pub fn iter_with_grads(&mut self) -> Option<impl Iterator<Item = (&str, &mut Array<E>, &mut Array<E>)>> {
        let grads = self.grads.as_mut()?;
        Some(
            self.names
                .iter()
                .map(|s| s.as_str())
                .zip(self.arrays.iter_mut())
                .zip(grads.iter_mut())
                .map(|((n, a), g)| (n, a, g)),
        )
    }

    pub fn zero_grads(&mut self) {
        if let Some(grads) = &mut self.grads {
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v = E::zero();
                }
            }
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Array<E>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let grads = self
            .grads
            .as_mut()
            .ok_or_else(|| Error::config("parameter set has no grad slots"))?;
        if grads[i].shape() != delta.shape() {
            return Err(Error::shape(format!(
                "grad shape {:?} vs param {:?} for {name}",
                delta.shape(),
                grads[i].shape()
            )));
        }
        for (d, s) in grads[i].data_mut().iter_mut().zip(delta.data()) {
            *d = *d + *s;
        }
        Ok(())
    }

    /// Deep copy with independent grad policy (a teacher clone drops grads).
    pub fn clone_with_grads(&self, trainable: bool) -> Self {
        let mut out = ParamSet::new(trainable);
        for (n, a) in self.iter() {
            out.insert(n, a.clone()).expect("unique names");
        }
        out
    }

    pub fn shapes_match(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .all(|(n, a)| other.get(n).map(|b| b.shape() == a.shape()).unwrap_or(false))
    }

    /// Global gradient l2 norm over all parameters.
    pub fn grad_norm(&self) -> E {
        let mut acc = E::zero();
        if let Some(grads) = &self.grads {
            for g in grads {
                for &v in g.data() {
                    acc = acc + v * v;
                }
            }
        }
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, s: E) {
        if let Some(grads) = &mut self.grads {
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v = *v * s;
                }
            }
        }
    }
}

/// Caches leaf bindings so repeated uses of a parameter on one tape share a
/// node (and therefore accumulate into a single gradient).
pub struct ParamBinder<'t, E: Scalar> {
    tape: &'t Tape<E>,
    params: &'t ParamSet<E>,
    bound: RefCell<HashMap<String, TensorId>>,
}

impl<'t, E: Scalar> ParamBinder<'t, E> {
    pub fn new(tape: &'t Tape<E>, params: &'t ParamSet<E>) -> Self {
        ParamBinder {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.borrow().get(name) {
            return Ok(id);
        }
        let value = self.params.get(name)?.clone();
        let id = if self.params.trainable() {
            self.tape.leaf_grad(value)?
        } else {
            self.tape.leaf(value)?
        };
        self.bound.borrow_mut().insert(name.to_string(), id);
        Ok(id)
    }

    /// Copy tape gradients back into the parameter set, scaled by `scale`.
    pub fn harvest(
        &self,
        grads: &crate::tensor::tape::Gradients<E>,
        into: &mut ParamSet<E>,
        scale: E,
    ) -> Result<()> {
        for (name, id) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(*id) {
                let scaled = g.map(|v| v * scale);
                into.accumulate_grad(name, &scaled)?;
            }
        }
        Ok(())
    }
}

/// Gaussian init with the given std.
pub fn init_normal<E: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Array<E> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::c(normal.sample(rng))).collect();
    Array::new(shape.to_vec(), data).expect("init shape")
}

/// Xavier-style init for a [fan_in, fan_out] weight.
pub fn init_linear<E: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array<E> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    init_normal(rng, &[fan_in, fan_out], std)
}
