//! Parameter storage and the small layers shared by the text and temporal branches.

use std::ops::Index;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Reads through [`ParamSet::get`] and
/// [`ParamSet::bind`] are counted so callers can assert a code path never
/// touches a parameter group.
#[derive(Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    reads: AtomicUsize,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

/// Serialized form of one named parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Tape variables for every entry of a [`ParamSet`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wraps variables recorded elsewhere, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Registers every parameter on the tape; `trainable = false` records
    /// them as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn export(&self) -> Vec<ParamEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| ParamEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites every parameter from `entries`, which must list the same
    /// names with the same shapes.
    pub fn import(&mut self, entries: &[ParamEntry]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.values.len()
            )));
        }
        let mut fresh = Vec::with_capacity(entries.len());
        for ((name, v), e) in self.names.iter().zip(&self.values).zip(entries) {
            if *name != e.name || v.shape() != e.shape.as_slice() {
                return Err(Error::contract(format!(
                    "checkpoint entry {} {:?} does not match {name} {:?}",
                    e.name,
                    e.shape,
                    v.shape()
                )));
            }
            let t = Tensor::new(e.shape.clone(), e.data.clone())?;
            if !t.is_finite() {
                return Err(Error::contract(format!("checkpoint entry {name} is not finite")));
            }
            fresh.push(t);
        }
        self.values = fresh;
        Ok(())
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(rows, cols, data)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_parts(rows, cols, data)
}

/// `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: params.add(format!("{name}.weight"), uniform(rng, input, output, bound)),
            bias: params.add(format!("{name}.bias"), uniform(rng, 1, output, bound)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

/// Row-wise layer normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            shift: params.add(format!("{name}.shift"), Tensor::zeros(1, dim)),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let n = tape.mul(n, p[self.gain])?;
        tape.add(n, p[self.shift])
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(params, &format!("{name}.inner"), input, hidden, rng),
            outer: Linear::new(params, &format!("{name}.outer"), hidden, output, rng),
        }
    }

    /// Same shapes with the output layer at zero, so the block starts as
    /// the zero map.
    pub fn zero_output(params: &mut ParamSet, name: &str, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let ffn = Self::new(params, name, input, hidden, output, rng);
        for id in [ffn.outer.weight, ffn.outer.bias] {
            let t = params.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        ffn
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, p, h)
    }
}
