//! Reusable layers shared by the segmenter and the structure network.
//!
//! Layers are lightweight descriptors holding indices into a
//! [`NetworkParams`] collection. A forward pass first binds the collection
//! onto a tape ([`NetworkParams::bind`]) and then threads the resulting
//! [`Bound`] handles through the layers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation for embeddings and projections.
pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for NetworkParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name.clone(), t));
        self.index.insert(name, self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.entries[i].1)
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zero tensors with identical names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "params",
                format!("{} tensors vs {}", self.len(), other.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{na}{:?} vs {nb}{:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`NetworkParams`], in collection order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Copy with the handle of tensor `i` swapped for `v`.
    pub fn replace(&self, i: usize, v: Var) -> Bound {
        let mut vars = self.vars.clone();
        vars[i] = v;
        Bound { vars }
    }
}

/// Builder that draws initial values and records them under a name prefix.
pub struct Initializer<'a, T: Scalar, R> {
    pub params: &'a mut NetworkParams<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Initializer<'_, T, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<usize> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("{name}: zero dimension in {shape:?}")));
        }
        let dist = Normal::new(0.0, std)
            .map_err(|e| Error::contract(format!("{name}: bad std {std}: {e}")))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        self.params
            .insert(name, Tensor::full(shape.to_vec(), T::from_f64(value)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearLayer {
    weight: usize,
    bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn init<T: Scalar, R: Rng>(
        init: &mut Initializer<'_, T, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = init.normal(&format!("{name}.weight"), &[in_dim, out_dim], std)?;
        let bias = init.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks up an existing `{name}.weight` / `{name}.bias` pair.
    pub fn find<T: Scalar>(params: &NetworkParams<T>, name: &str) -> Result<Self> {
        let weight = params
            .position(&format!("{name}.weight"))
            .ok_or_else(|| Error::contract(format!("missing {name}.weight")))?;
        let bias = params
            .position(&format!("{name}.bias"))
            .ok_or_else(|| Error::contract(format!("missing {name}.bias")))?;
        let (in_dim, out_dim) = match params.at(weight).shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::shape("linear", format!("{name}.weight has shape {s:?}"))),
        };
        if params.at(bias).numel() != out_dim {
            return Err(Error::shape("linear", format!("{name}.bias mismatches weight")));
        }
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    /// `x · W + b`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("input {:?} for {} inputs", tape.value(x).shape(), self.in_dim),
            ));
        }
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormLayer {
    gamma: usize,
    beta: usize,
}

impl LayerNormLayer {
    pub fn init<T: Scalar, R: Rng>(
        init: &mut Initializer<'_, T, R>,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        let gamma = init.constant(&format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = init.constant(&format!("{name}.beta"), &[dim], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn find<T: Scalar>(params: &NetworkParams<T>, name: &str) -> Result<Self> {
        let gamma = params
            .position(&format!("{name}.gamma"))
            .ok_or_else(|| Error::contract(format!("missing {name}.gamma")))?;
        let beta = params
            .position(&format!("{name}.beta"))
            .ok_or_else(|| Error::contract(format!("missing {name}.beta")))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttention {
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
    pub heads: usize,
}

impl SelfAttention {
    /// `x` is `[batch·seq × D]`; attention runs independently per sequence.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        seq: usize,
    ) -> Result<Var> {
        let rows = tape.value(x).rows();
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape(
                "self_attention",
                format!("{rows} rows are not a whole number of length-{seq} sequences"),
            ));
        }
        let qkv = self.qkv.forward(tape, p, x)?;
        let ctx = tape.attention(qkv, rows / seq, seq, self.heads)?;
        self.proj.forward(tape, p, ctx)
    }
}

/// Pre-norm residual block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub attn: SelfAttention,
    pub ln2: LayerNormLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl TransformerBlock {
    pub fn init<T: Scalar, R: Rng>(
        init: &mut Initializer<'_, T, R>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let resid_std = INIT_STD / (2.0 * depth.max(1) as f64).sqrt();
        Ok(Self {
            ln1: LayerNormLayer::init(init, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention {
                qkv: LinearLayer::init(init, &format!("{name}.attn.qkv"), dim, 3 * dim, INIT_STD)?,
                proj: LinearLayer::init(init, &format!("{name}.attn.proj"), dim, dim, resid_std)?,
                heads,
            },
            ln2: LayerNormLayer::init(init, &format!("{name}.ln2"), dim)?,
            fc1: LinearLayer::init(init, &format!("{name}.mlp.fc1"), dim, 4 * dim, INIT_STD)?,
            fc2: LinearLayer::init(init, &format!("{name}.mlp.fc2"), 4 * dim, dim, resid_std)?,
        })
    }

    pub fn find<T: Scalar>(params: &NetworkParams<T>, name: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormLayer::find(params, &format!("{name}.ln1"))?,
            attn: SelfAttention {
                qkv: LinearLayer::find(params, &format!("{name}.attn.qkv"))?,
                proj: LinearLayer::find(params, &format!("{name}.attn.proj"))?,
                heads,
            },
            ln2: LayerNormLayer::find(params, &format!("{name}.ln2"))?,
            fc1: LinearLayer::find(params, &format!("{name}.mlp.fc1"))?,
            fc2: LinearLayer::find(params, &format!("{name}.mlp.fc2"))?,
        })
    }

    /// Parameters whose zeroing turns the block into the identity map.
    pub fn residual_output_indices(&self) -> [usize; 4] {
        [
            self.attn.proj.weight_index(),
            self.attn.proj.bias_index(),
            self.fc2.weight_index(),
            self.fc2.bias_index(),
        ]
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        seq: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, seq)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Sequential application of residual blocks; an empty list is the identity.
pub fn transformer_forward<T: Scalar>(
    blocks: &[TransformerBlock],
    tape: &mut Tape<T>,
    p: &Bound,
    mut x: Var,
    seq: usize,
) -> Result<Var> {
    for block in blocks {
        x = block.forward(tape, p, x, seq)?;
    }
    Ok(x)
}
