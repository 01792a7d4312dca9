use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::error::{BlendError, Result};
use crate::numerics::{SeededRng, Tape, Tensor, Var};

/// Ordered, named parameter tensors.
///
/// Values are kept at f32 precision (rounded on every write) so that the
/// float32 checkpoint blob reproduces them exactly; arithmetic runs in f64.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

fn round_f32(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
    t
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(BlendError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(Arc::new(round_f32(t)));
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| BlendError::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn set(&mut self, i: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(BlendError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[i],
                self.tensors[i].shape(),
                t.shape()
            )));
        }
        self.tensors[i] = Arc::new(round_f32(t));
        Ok(())
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on the tape, in store order.
    pub fn on_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t))
            .collect()
    }

    /// FNV-1a over names, shapes and f32 bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.write(n.as_bytes());
            for &s in t.shape() {
                h.write_u64(s as u64);
            }
            for &v in t.data() {
                h.write(&(v as f32).to_le_bytes());
            }
        }
        h.finish()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `fan_in × fan_out` weight.
pub fn fan_in_uniform(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_rows(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect(),
    )
}
