//! Named parameter storage and the building blocks shared by encoders and
//! fusion layers.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every tensor of a model, in registration order. Frozen tensors carry
/// `requires_grad = false` and are skipped by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad)
    }

    pub fn frozen(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| !self.get(id).requires_grad)
    }

    pub fn count(&self, ids: impl Iterator<Item = ParamId>) -> usize {
        ids.map(|id| self.get(id).numel()).sum()
    }

    /// SHA-256 over names, shapes and value bits of the selected tensors.
    pub fn hash(&self, ids: impl Iterator<Item = ParamId>) -> [u8; 32] {
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.name(id).as_bytes());
            for d in self.get(id).shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in self.get(id).data() {
                h.update(v.bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Forward<'a, F> {
    pub g: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
}

impl<'a, F: Scalar> Forward<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Graph handle for a parameter; each parameter enters the graph once.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients per parameter after `g.backward`; `None` for parameters
    /// that were unused or frozen.
    pub fn param_grads(&self) -> Vec<Option<Vec<F>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(<[F]>::to_vec)))
            .collect()
    }
}

/// Hierarchical name builder for parameter registration.
pub(crate) struct Init<'s, 'r, F, R: ?Sized> {
    pub store: &'s mut ParamStore<F>,
    pub rng: &'r mut R,
    pub trainable: bool,
}

impl<F: Scalar, R: Rng + ?Sized> Init<'_, '_, F, R> {
    fn add(&mut self, name: String, t: Tensor<F>) -> ParamId {
        self.store.add(name, t.with_grad(self.trainable))
    }

    /// Gaussian with std `1/√fan_in`.
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, self.rng);
        self.add(name, t)
    }

    pub fn randn(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn full(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, F::lit(value)))
    }

    pub fn tensor(&mut self, name: String, t: Tensor<F>) -> ParamId {
        self.add(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, fan_out),
            b: Some(self.full(format!("{name}.b"), &[fan_out], 0.0)),
        }
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, fan_out),
            b: None,
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.full(format!("{name}.gain"), &[dim], 1.0),
            bias: self.full(format!("{name}.bias"), &[dim], 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, cx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward<F: Scalar>(&self, cx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.g.layer_norm(x, g, b, F::lit(NORM_EPS))
    }
}

/// Multi-head attention projections (no biases).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Attention {
    pub(crate) fn init<F: Scalar, R: Rng + ?Sized>(
        init: &mut Init<'_, '_, F, R>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            wq: init.weight(format!("{name}.wq"), dim, dim),
            wk: init.weight(format!("{name}.wk"), dim, dim),
            wv: init.weight(format!("{name}.wv"), dim, dim),
            wo: init.weight(format!("{name}.wo"), dim, dim),
            heads,
        }
    }

    /// `softmax(Q Kᵀ / √(d/h)) V` per head, heads concatenated, then `Wo`.
    /// Queries come from `query`, keys and values from `context`.
    pub fn forward<F: Scalar>(
        &self,
        cx: &mut Forward<'_, F>,
        query: Var,
        context: Var,
    ) -> Result<Var> {
        self.forward_with_weights(cx, query, context)
            .map(|(out, _)| out)
    }

    /// Like [`Attention::forward`], also returning each head's
    /// `n_q × n_c` attention weights.
    pub fn forward_with_weights<F: Scalar>(
        &self,
        cx: &mut Forward<'_, F>,
        query: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let dim = *cx.g.shape(query).last().expect("2d");
        if *cx.g.shape(context).last().expect("2d") != dim {
            return Err(Error::Shape {
                op: "attention",
                lhs: cx.g.shape(query).to_vec(),
                rhs: cx.g.shape(context).to_vec(),
            });
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        let head_dim = dim / self.heads;
        let (wq, wk, wv, wo) = (cx.p(self.wq), cx.p(self.wk), cx.p(self.wv), cx.p(self.wo));
        let q = cx.g.matmul(query, wq)?;
        let k = cx.g.matmul(context, wk)?;
        let v = cx.g.matmul(context, wv)?;
        let scale = F::one() / F::from_usize_lossy(head_dim).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut all_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = cx.g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = cx.g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = cx.g.transpose(kh)?;
            let scores = cx.g.matmul(qh, kt)?;
            let scores = cx.g.scale(scores, scale);
            let weights = cx.g.softmax(scores)?;
            outs.push(cx.g.matmul(weights, vh)?);
            all_weights.push(weights);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            cx.g.concat_cols(&outs)?
        };
        Ok((cx.g.matmul(merged, wo)?, all_weights))
    }
}
