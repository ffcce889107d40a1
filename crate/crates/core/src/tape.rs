//! Reverse-mode computation record.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Parameters
//! are registered by reference, so a tape never copies model weights. After
//! [`Tape::backward`] the record is spent: a second traversal is rejected.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Saved};
use crate::profiling::{Category, SharedLedger};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operations a tape can record.
///
/// Shape rules:
/// - `MatMul`: `[m,k] x [k,n] -> [m,n]`
/// - `Add`: equal shapes, or `[..,n] + [n]` broadcast over rows
/// - `Conv1dValid`: input `[T,H]`, kernel `[k,H,f]`, optional bias `[f]` -> `[T-k+1, f]`
/// - `MaxOverTime`: `[T,C] -> [C]`, over the first `limit` positions (all if `None`)
/// - `LayerNorm`: input `[..,H]`, scale `[H]`, offset `[H]`, normalized over the last axis
/// - `EmbeddingLookup`: table `[V,H]` -> `[ids.len(), H]`
/// - `ScaledDotAttention`: query, key, value `[T,H]` -> `[T,H]`; keys at positions
///   `>= valid` get zero weight
/// - `Concat`: along the last axis; `Stack`: new leading axis
/// - `Linear`: `x[n,in]` or `x[in]`, weight `[in,out]`, optional bias `[out]`
/// - `Sum`, `Mean`, `SoftmaxCrossEntropy`, `BceWithLogits`: scalar outputs
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Conv1dValid,
    MaxOverTime {
        limit: Option<usize>,
    },
    Relu,
    Gelu,
    Tanh,
    LayerNorm,
    EmbeddingLookup {
        ids: Vec<usize>,
    },
    ScaledDotAttention {
        heads: usize,
        valid: usize,
    },
    Concat,
    Linear,
    Mul,
    Sum,
    Mean,
    Scale(f64),
    Stack,
    /// Mean over rows of `-log softmax(row)[target]`.
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
    },
    /// Mean over all elements of binary cross-entropy on `sigmoid(logit)`.
    BceWithLogits {
        targets: Vec<f64>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Conv1dValid => "conv1d_valid",
            Primitive::MaxOverTime { .. } => "max_over_time",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::LayerNorm => "layer_norm",
            Primitive::EmbeddingLookup { .. } => "embedding_lookup",
            Primitive::ScaledDotAttention { .. } => "scaled_dot_attention",
            Primitive::Concat => "concat",
            Primitive::Linear => "linear",
            Primitive::Mul => "mul",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale(_) => "scale",
            Primitive::Stack => "stack",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Primitive::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Saved<T>,
    requires_grad: bool,
    group: Option<&'static str>,
}

/// Gradients of a scalar loss with respect to the leaves that require them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<Var, Vec<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.map.get(&var).map(Vec::as_slice)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.map.contains_key(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Vec<T>> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[T])> {
        self.map.iter().map(|(v, g)| (*v, g.as_slice()))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.map.keys().copied()
    }
}

pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    traversed: bool,
    inference: bool,
    ledger: Option<SharedLedger>,
    ledgered: u64,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    fn blank(inference: bool, ledger: Option<SharedLedger>) -> Self {
        Self {
            nodes: Vec::new(),
            traversed: false,
            inference,
            ledger,
            ledgered: 0,
        }
    }

    pub fn new() -> Self {
        Self::blank(false, None)
    }

    /// A tape that reports every tensor it allocates as activation memory.
    /// The bytes are released when the tape is dropped.
    pub fn with_ledger(ledger: SharedLedger) -> Self {
        Self::blank(false, Some(ledger))
    }

    /// A tape on which nothing requires a gradient, whatever the flags of the
    /// registered tensors say. Nothing is saved for backward.
    pub fn inference() -> Self {
        Self::blank(true, None)
    }

    /// An inference tape reporting to the same ledger as this one.
    pub fn scratch(&self) -> Tape<'static, T> {
        Tape::blank(true, self.ledger.clone())
    }

    pub fn ledger(&self) -> Option<&SharedLedger> {
        self.ledger.as_ref()
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn alloc(&mut self, bytes: u64) {
        if let Some(l) = &self.ledger {
            l.borrow_mut().record_alloc(Category::Activations, bytes);
            self.ledgered += bytes;
        }
    }

    fn free(&mut self, bytes: u64) {
        if let Some(l) = &self.ledger {
            // Only bytes recorded by this tape are ever freed.
            let _ = l.borrow_mut().record_free(Category::Activations, bytes);
            self.ledgered -= bytes;
        }
    }

    fn push(&mut self, node: Node<'a, T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf (input data). Its `requires_grad` flag is honored.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.alloc(tensor.byte_len());
        let requires_grad = tensor.requires_grad() && !self.inference;
        self.push(Node {
            value: Cow::Owned(tensor),
            prim: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad,
            group: None,
        })
    }

    /// Records an owned leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Registers a model parameter by reference. Parameter memory is owned by
    /// the model, so it is not counted as activation memory here.
    pub fn param(&mut self, tensor: &'a Tensor<T>, group: &'static str) -> Var {
        self.push(Node {
            value: Cow::Borrowed(tensor),
            prim: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad: tensor.requires_grad() && !self.inference,
            group: Some(group),
        })
    }

    fn node(&self, var: Var) -> Result<&Node<'a, T>> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| Error::InvalidArgument(format!("{var:?} is not on this tape")))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Owner tag of a parameter leaf.
    pub fn group(&self, var: Var) -> Option<&'static str> {
        self.nodes[var.0].group
    }

    /// Consumes the tape, returning one recorded tensor.
    pub fn into_value(mut self, var: Var) -> Tensor<T> {
        let node = self.nodes.swap_remove(var.0);
        node.value.into_owned()
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        let (value, saved) = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            kernels::forward(&prim, &xs, requires_grad)?
        };
        self.alloc(value.byte_len() + saved.bytes());
        Ok(self.push(Node {
            value: Cow::Owned(value),
            prim: Some(prim),
            inputs: inputs.to_vec(),
            saved,
            requires_grad,
            group: None,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn conv1d_valid(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Conv1dValid, &[x, kernel, b]),
            None => self.apply(Primitive::Conv1dValid, &[x, kernel]),
        }
    }

    pub fn max_over_time(&mut self, x: Var, limit: Option<usize>) -> Result<Var> {
        self.apply(Primitive::MaxOverTime { limit }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, scale, offset])
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::EmbeddingLookup { ids }, &[table])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, valid: usize) -> Result<Var> {
        self.apply(Primitive::ScaledDotAttention { heads, valid }, &[q, k, v])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Linear, &[x, weight, b]),
            None => self.apply(Primitive::Linear, &[x, weight]),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Stack, parts)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::SoftmaxCrossEntropy { targets }, &[logits])
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        self.apply(Primitive::BceWithLogits { targets }, &[logits])
    }

    /// Propagates the gradient of a scalar `loss` back to every leaf with
    /// `requires_grad`. Leaves without it, and anything reachable only through
    /// them, are absent from the result.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.traversed {
            return Err(Error::StaleRecord);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let root_requires_grad = root.requires_grad;
        self.traversed = true;
        let mut out = Gradients { map: BTreeMap::new() };
        if !root_requires_grad {
            return Ok(out);
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        // Interior gradient buffers are transient activations.
        let mut live = T::BYTES as u64;
        let mut high_water = live;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(prim) = &node.prim else {
                out.map.insert(Var(idx), g);
                continue;
            };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            let want: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = kernels::backward(prim, &xs, &node.value, &node.saved, &g, &want);
            live -= (g.len() * T::BYTES) as u64;
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => {
                        if self.nodes[v.0].prim.is_some() {
                            live += (ig.len() * T::BYTES) as u64;
                            high_water = high_water.max(live);
                        }
                        *slot = Some(ig);
                    }
                }
            }
        }
        // The transient buffers are gone by now; record their high-water mark
        // so the ledger peak reflects the backward pass.
        self.alloc(high_water);
        self.free(high_water);
        Ok(out)
    }
}

impl<T: Real> Drop for Tape<'_, T> {
    fn drop(&mut self) {
        if self.ledgered > 0 {
            let bytes = self.ledgered;
            self.free(bytes);
        }
    }
}
