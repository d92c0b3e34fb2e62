//! Named parameter table and the small layers built on it.

use numgrad::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index into a [`ParamStore`]; doubles as the graph parameter key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Learnable tensors in creation order, each under a unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `t` under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `other`, which must have identical names
    /// and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_layout(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Invalid("parameter tables have different names".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Invalid(format!("parameter {n}: shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// How a fresh weight matrix is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform,
    Zero,
}

/// Creates parameters with names under a prefix, drawing from one RNG in
/// creation order.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child builder whose names get `name.` prepended.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = format!("{}{name}.", self.prefix);
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn tensor(&mut self, name: &str, rows: usize, cols: usize, init: Init, fan_in: usize) -> ParamId {
        let data = match init {
            Init::Zero => vec![0.0; rows * cols],
            Init::Uniform => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
        };
        self.store.add(format!("{}{name}", self.prefix), Tensor::matrix(rows, cols, data))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), Tensor::full(rows, cols, value))
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, init: Init) -> Linear {
        let mut b = self.scope(name);
        let w = b.tensor("weight", input, output, init, input);
        let bias = b.tensor("bias", 1, output, Init::Zero, input);
        Linear { w, b: bias, input, output }
    }

    pub fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize, act: Activation) -> Mlp {
        let mut b = self.scope(name);
        let l1 = b.linear("fc1", input, hidden, Init::Uniform);
        let l2 = b.linear("fc2", hidden, output, Init::Uniform);
        Mlp { l1, l2, act }
    }
}

/// A graph under construction plus the parameters it reads.
pub struct Cx<'a> {
    pub g: &'a mut Graph,
    pub p: &'a ParamStore,
}

impl<'a> Cx<'a> {
    pub fn new(g: &'a mut Graph, p: &'a ParamStore) -> Self {
        Self { g, p }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(id.0, self.p.get(id))
    }
}

/// `x·W + b`, `W` stored `input × output`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward(&self, cx: &mut Cx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        Ok(cx.g.affine(x, w, b)?)
    }

    /// Plain evaluation on row vectors, bypassing the graph.
    pub fn apply(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(p.get(self.w))?;
        let b = p.get(self.b).data();
        for r in 0..y.rows() {
            let cols = y.cols();
            for (v, bb) in y.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

fn activate(cx: &mut Cx<'_>, x: Var, act: Activation) -> Result<Var> {
    Ok(match act {
        Activation::Gelu => cx.g.gelu(x)?,
        Activation::Silu => cx.g.silu(x)?,
    })
}

/// Two linear layers with an activation between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn forward(&self, cx: &mut Cx<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(cx, x)?;
        let h = activate(cx, h, self.act)?;
        self.l2.forward(cx, h)
    }
}
