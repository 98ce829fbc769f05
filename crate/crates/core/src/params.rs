//! Named parameter collections shared by every network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// How a parameter is drawn by [`ParamSet::init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal { std: f64 },
    /// Zero-mean normal with std `gain / sqrt(fan_in)`.
    FanIn { gain: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    inits: Vec<Init>,
}

/// The graph leaves standing in for a [`ParamSet`] during one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Leaves supplied by the caller, in [`ParamSet`] registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Tensor::zeros(shape));
        self.inits.push(init);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Deterministically redraw every tensor from `seed`.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, init) in self.tensors.iter_mut().zip(&self.inits) {
            let std = match *init {
                Init::Zeros => {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                Init::Normal { std } => std,
                Init::FanIn { gain } => {
                    let fan_in: usize = t.shape()[1..].iter().product();
                    gain / (fan_in.max(1) as f64).sqrt()
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
    }

    /// Register every tensor as a graph leaf, trainable or frozen.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every tensor, zeros where the loss did not reach.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replace the tensor values, keeping names and shapes.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
            *own = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
