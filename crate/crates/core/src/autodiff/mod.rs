//! Reverse-mode differentiation over dense matrices with an exact
//! activation-cache ledger.
//!
//! Every recorded node states which tensors its backward rule will read.
//! Nodes recorded inside [`Tape::with_grad_disabled`] are constants: they
//! save nothing and stop gradient flow, which is what lets the unselected
//! token group run through a layer without leaving activations behind.
//!
//! Accounting conventions:
//! - a saved tensor that is a parameter leaf is *resident* and not counted
//!   as an activation (it is already paid for as a parameter);
//! - a tensor saved by several nodes is counted once;
//! - the peak is tracked at primitive granularity as live cache plus the
//!   op's working set (output plus inputs not already held by the cache),
//!   and during backward as live cache plus pending gradient buffers.

mod ops;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

pub use ops::{Mask, Nonlinearity, Op, OpKind};
use ops::{SaveSpec, SavedView};

use crate::error::{Error, Result};
use crate::matrix::{Dtype, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Identifies a model parameter across tapes and gradient stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leaf {
    Param(ParamId),
    Input,
}

#[derive(Clone, Debug)]
enum SavedTensor {
    Node(usize),
    Owned(Matrix),
}

#[derive(Clone, Debug)]
struct Saved {
    role: &'static str,
    tensor: SavedTensor,
}

/// One entry of a node's cache ledger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub role: &'static str,
    pub elements: usize,
    /// Parameter tensors are resident anyway and are not activations.
    pub resident: bool,
}

#[derive(Clone, Debug)]
pub struct Node {
    id: usize,
    op: Option<Op>,
    leaf: Option<Leaf>,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Vec<Saved>,
    layer: Option<usize>,
}

impl Node {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn kind(&self) -> OpKind {
        self.op.as_ref().map_or(OpKind::Leaf, Op::kind)
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn layer(&self) -> Option<usize> {
        self.layer
    }

    pub fn leaf(&self) -> Option<Leaf> {
        self.leaf
    }
}

/// Gradients of parameters, keyed by [`ParamId`]. Frozen parameters never appear.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<ParamId, Matrix>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Matrix) {
        match self.grads.get_mut(&id) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.grads.insert(id, grad);
            }
        }
    }

    /// Adds every entry of `other`, in key order.
    pub fn merge(&mut self, other: GradStore) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }

    pub fn elements(&self) -> usize {
        self.grads.values().map(Matrix::len).sum()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

/// Reverse-mode recording of one computation.
pub struct Tape<'a> {
    nodes: Vec<Node>,
    values: Vec<Cow<'a, Matrix>>,
    scope: Vec<bool>,
    layer: Option<usize>,
    dtype: Dtype,
    consumed: bool,
    cache_untracked: bool,
    // accounting
    refcount: Vec<u32>,
    released: Vec<bool>,
    live_cache: usize,
    live_grads: usize,
    peak: usize,
}

impl<'a> Tape<'a> {
    pub fn new(dtype: Dtype) -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            scope: vec![true],
            layer: None,
            dtype,
            consumed: false,
            cache_untracked: false,
            refcount: Vec::new(),
            released: Vec::new(),
            live_cache: 0,
            live_grads: 0,
            peak: 0,
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Handle to the node at `index`.
    pub fn var(&self, index: usize) -> Var {
        assert!(index < self.nodes.len(), "node {index} not on this tape");
        Var(index)
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_grad_enabled(&self) -> bool {
        *self.scope.last().expect("scope stack never empty")
    }

    /// Runs `body` with gradient tracking disabled; nodes recorded inside are constants.
    pub fn with_grad_disabled<R>(&mut self, body: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(false);
        let out = body(self);
        self.scope.pop();
        out
    }

    /// Re-enables tracking inside a disabled scope.
    pub fn with_grad_enabled<R>(&mut self, body: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(true);
        let out = body(self);
        self.scope.pop();
        out
    }

    /// Tags subsequently recorded nodes with a layer index (for memory breakdowns).
    pub fn set_layer(&mut self, layer: Option<usize>) {
        self.layer = layer;
    }

    /// Mutation-testing hook: make untracked nodes save their inputs as if tracked.
    #[doc(hidden)]
    pub fn set_cache_untracked(&mut self, on: bool) {
        self.cache_untracked = on;
    }

    fn push_node(&mut self, node: Node, value: Cow<'a, Matrix>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.values.push(value);
        self.refcount.push(0);
        self.released.push(false);
        Var(id)
    }

    /// Registers a parameter by reference. Trainable parameters require grad.
    pub fn param(&mut self, id: ParamId, value: &'a Matrix, trainable: bool) -> Var {
        let node = Node {
            id: self.nodes.len(),
            op: None,
            leaf: Some(Leaf::Param(id)),
            inputs: Vec::new(),
            requires_grad: trainable,
            saved: Vec::new(),
            layer: self.layer,
        };
        self.push_node(node, Cow::Borrowed(value))
    }

    /// Registers an input tensor; tracked inputs propagate grad but produce no stored gradient.
    pub fn input(&mut self, value: Matrix, requires_grad: bool) -> Var {
        let node = Node {
            id: self.nodes.len(),
            op: None,
            leaf: Some(Leaf::Input),
            inputs: Vec::new(),
            requires_grad,
            saved: Vec::new(),
            layer: self.layer,
        };
        self.push_node(node, Cow::Owned(value))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.input(value, false)
    }

    fn is_resident(&self, id: usize) -> bool {
        matches!(self.nodes[id].leaf, Some(Leaf::Param(_)))
    }

    /// Records `op` applied to `inputs` and returns the output.
    pub fn apply(&mut self, mut op: Op, inputs: &[Var]) -> Result<Var> {
        let input_values: Vec<&Matrix> = inputs.iter().map(|v| self.values[v.0].as_ref()).collect();
        let fwd = ops::forward(&op, &input_values)?;
        if !fwd.value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
        let requires_grad = self.is_grad_enabled() && needs.iter().any(|&b| b);
        let id = self.nodes.len();
        let plan = if requires_grad {
            ops::save_plan(&op, &needs)
        } else if self.cache_untracked {
            ops::save_plan(&op, &vec![true; inputs.len()])
        } else {
            Vec::new()
        };
        let mut internals = fwd.internals;
        let mut saved = Vec::with_capacity(plan.len());
        for spec in plan {
            match spec {
                SaveSpec::Input { role, index } => saved.push(Saved {
                    role,
                    tensor: SavedTensor::Node(inputs[index].0),
                }),
                SaveSpec::Output { role } => saved.push(Saved {
                    role,
                    tensor: SavedTensor::Node(id),
                }),
                SaveSpec::Internal { role } => {
                    let pos = internals
                        .iter()
                        .position(|(r, _)| *r == role)
                        .expect("forward produces every internal its plan names");
                    let (_, m) = internals.swap_remove(pos);
                    saved.push(Saved {
                        role,
                        tensor: SavedTensor::Owned(m),
                    });
                }
            }
        }
        op.strip_forward_only();
        let out_len = fwd.value.len();
        let node = Node {
            id,
            op: Some(op),
            leaf: None,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            saved,
            layer: self.layer,
        };
        let var = self.push_node(node, Cow::Owned(fwd.value));
        self.retain_saves(id);
        // working set: output and inputs that the cache does not already hold
        let mut transient = 0;
        let mut seen = HashSet::new();
        for &i in std::iter::once(&id).chain(self.nodes[id].inputs.iter()) {
            if seen.insert(i) && self.refcount[i] == 0 && !self.is_resident(i) {
                transient += if i == id { out_len } else { self.values[i].len() };
            }
        }
        self.peak = self.peak.max(self.live_cache + transient);
        Ok(var)
    }

    fn retain_saves(&mut self, id: usize) {
        for k in 0..self.nodes[id].saved.len() {
            match &self.nodes[id].saved[k].tensor {
                SavedTensor::Node(j) => {
                    let j = *j;
                    if self.refcount[j] == 0 && !self.is_resident(j) {
                        self.live_cache += self.values[j].len();
                    }
                    self.refcount[j] += 1;
                }
                SavedTensor::Owned(m) => self.live_cache += m.len(),
            }
        }
    }

    fn release_saves(&mut self, id: usize) {
        if self.released[id] {
            return;
        }
        self.released[id] = true;
        let saved = std::mem::take(&mut self.nodes[id].saved);
        for s in &saved {
            match &s.tensor {
                SavedTensor::Node(j) => {
                    let j = *j;
                    self.refcount[j] -= 1;
                    if self.refcount[j] == 0 && !self.is_resident(j) {
                        self.live_cache -= self.values[j].len();
                    }
                }
                SavedTensor::Owned(m) => self.live_cache -= m.len(),
            }
        }
        // keep the ledger readable after release
        self.nodes[id].saved = saved;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul { transpose_rhs: false, scale: 1.0 }, &[a, b])
    }

    /// `scale * a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        self.apply(Op::Matmul { transpose_rhs: true, scale }, &[a, b])
    }

    pub fn matmul_scaled(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        self.apply(Op::Matmul { transpose_rhs: false, scale }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::AddBroadcast, &[a, b])
    }

    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.apply(Op::RowSoftmax { mask }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Elementwise(Nonlinearity::Gelu), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Elementwise(Nonlinearity::Tanh), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[x, scale, shift])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::RowSelect { rows: rows.to_vec() }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::ColSlice { start, len }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatCols, parts)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanRows, &[x])
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax, times `scale`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                scale,
            },
            &[logits],
        )
    }

    /// Cache ledger of one node.
    pub fn cached(&self, v: Var) -> Vec<CacheEntry> {
        self.nodes[v.0]
            .saved
            .iter()
            .map(|s| match &s.tensor {
                SavedTensor::Node(j) => CacheEntry {
                    role: s.role,
                    elements: self.values[*j].len(),
                    resident: self.is_resident(*j),
                },
                SavedTensor::Owned(m) => CacheEntry {
                    role: s.role,
                    elements: m.len(),
                    resident: false,
                },
            })
            .collect()
    }

    /// Activation elements cached for backward over the whole recording
    /// (shared tensors once, parameters excluded).
    pub fn cached_activation_elements(&self) -> usize {
        self.cache_breakdown().values().sum()
    }

    /// Cached activation elements attributed to `(layer, op kind)` of the
    /// first node that saved each tensor.
    pub fn cache_breakdown(&self) -> BTreeMap<(Option<usize>, OpKind), usize> {
        let mut seen = HashSet::new();
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            for s in &node.saved {
                let n = match &s.tensor {
                    SavedTensor::Node(j) => {
                        if self.is_resident(*j) || !seen.insert(*j) {
                            continue;
                        }
                        self.values[*j].len()
                    }
                    SavedTensor::Owned(m) => m.len(),
                };
                *out.entry((node.layer, node.kind())).or_insert(0) += n;
            }
        }
        out
    }

    /// Elements currently held for backward; zero once backward has run.
    pub fn live_cache_elements(&self) -> usize {
        self.live_cache
    }

    /// High-water mark of activation-side elements (cache, working set, gradient buffers).
    pub fn peak_elements(&self) -> usize {
        self.peak
    }

    /// Propagates d(loss)/d(.) back to every trainable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<GradStore> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let (r, c) = self.values[loss.0].shape();
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::LossNotTracked);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0, self.values[loss.0].dtype()));
        self.live_grads = 1;
        let mut store = GradStore::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                self.live_grads -= g.len();
                continue;
            }
            self.peak = self.peak.max(self.live_cache + self.live_grads);
            if let Some(Leaf::Param(pid)) = self.nodes[id].leaf {
                self.live_grads -= g.len();
                store.accumulate(pid, g);
                continue;
            }
            if self.nodes[id].op.is_none() {
                self.live_grads -= g.len();
                continue;
            }
            let input_grads = {
                let node = &self.nodes[id];
                let op = node.op.as_ref().expect("checked above");
                let needs: Vec<bool> =
                    node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let shapes: Vec<(usize, usize)> =
                    node.inputs.iter().map(|&i| self.values[i].shape()).collect();
                let view = SavedView {
                    entries: node
                        .saved
                        .iter()
                        .map(|s| {
                            let m: &Matrix = match &s.tensor {
                                SavedTensor::Node(j) => self.values[*j].as_ref(),
                                SavedTensor::Owned(m) => m,
                            };
                            (s.role, m)
                        })
                        .collect(),
                };
                ops::backward(op, &g, &view, &shapes, &needs)?
            };
            let inputs = self.nodes[id].inputs.clone();
            for (slot, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[slot] {
                    Some(acc) => acc.add_assign(&ig),
                    empty => {
                        self.live_grads += ig.len();
                        *empty = Some(ig);
                    }
                }
            }
            self.peak = self.peak.max(self.live_cache + self.live_grads);
            self.live_grads -= g.len();
            self.release_saves(id);
        }
        // nodes never reached (or recorded after the loss) drop their caches too
        for id in 0..self.nodes.len() {
            self.release_saves(id);
        }
        self.live_grads = 0;
        Ok(store)
    }
}
