//! Named parameters and the small layers the encoder and decoder are built from.

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{C2eError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether AdamW applies weight decay to this parameter.
    pub decay: bool,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Replaces the value of a named parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| C2eError::Format(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != value.shape() {
            return Err(C2eError::dim("set parameter", slot.shape(), value.shape()));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// A tape plus lazily bound parameters for one forward pass.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters enter the tape as differentiable leaves.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Graph {
            trainable: false,
            ..Self::new(params)
        }
    }

    /// Continues recording on an existing tape with parameters frozen, so a
    /// caller can [`bind`](Self::bind) its own leaves in their place.
    pub fn on_tape(tape: Tape, params: &'p ParamStore) -> Self {
        Graph {
            tape,
            ..Self::frozen(params)
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing tape node in place of a stored parameter.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of each parameter that was used, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)))
            .collect()
    }
}

/// 2-D sine-cosine table `[grid² × dim]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn sincos_2d(grid: usize, dim: usize) -> Tensor {
    let axis = |pos: usize, i: usize, len: usize| {
        let omega = 10000f64.powf(-2.0 * (i / 2) as f64 / len as f64);
        let a = pos as f64 * omega;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let half = dim / 2;
    Tensor::from_fn(&[grid * grid, dim], |k| {
        let (cell, c) = (k / dim, k % dim);
        let (row, col) = (cell / grid, cell % grid);
        if c < half {
            axis(row, c, half)
        } else {
            axis(col, c - half, dim - half)
        }
    })
}

/// Xavier-uniform `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-a, a))
}

pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false));
        Linear { w, b }
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Self {
        let fan_out = w.cols();
        let w = store.add(format!("{name}.w"), w, true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.tape.layer_norm(x, LN_EPS)?;
        let gain = g.p(self.gain);
        let bias = g.p(self.bias);
        let y = g.tape.mul_row(n, gain)?;
        g.tape.add_row(y, bias)
    }
}

/// Multi-head self-attention over groups of consecutive token rows.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, dim: usize, heads: usize) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), rng, dim, dim, true),
            k: Linear::new(store, &format!("{name}.k"), rng, dim, dim, true),
            v: Linear::new(store, &format!("{name}.v"), rng, dim, dim, true),
            out: Linear::new(store, &format!("{name}.out"), rng, dim, dim, true),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (for saliency).
    pub fn forward(&self, g: &mut Graph, x: Var, groups: usize) -> Result<(Var, Var)> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.tape.attention(q, k, v, groups, self.heads)?;
        Ok((self.out.forward(g, a)?, a))
    }
}

/// Pre-norm two-layer GELU feedforward, used by the plain-ViT baseline.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        Mlp {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), rng, dim, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), rng, hidden, dim, true),
        }
    }

    /// `x + fc2(gelu(fc1(norm(x))))`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.tape.add(x, h)
    }
}
