//! Named parameter storage and initializers.

use dfq_autograd::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Insertion order is the canonical order
/// used by optimizers, checkpoints and checksums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles of a [`ParamStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
    }

    /// Gradient for each parameter, zero-filled where the graph did not reach it.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &mut Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars.vars())
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// SHA-256 over names, shapes and raw bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replaces values by name; every stored name must be present in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> crate::Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != slot.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("sized by shape")
}

pub(crate) fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("sized by shape")
}

/// He-normal initialization for ReLU networks: std = sqrt(2 / fan_in).
pub(crate) fn kaiming_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

/// Default linear-layer initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn linear_init(out: usize, inp: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (inp as f32).sqrt();
    (uniform(&[out, inp], bound, rng), uniform(&[out], bound, rng))
}
