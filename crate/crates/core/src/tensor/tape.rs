//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes are only ever appended, so the node list is
//! topologically ordered and the backward sweep is a single reverse scan.

use std::cell::Cell;
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::array::{numel, Tensor};
use super::kernels::{
    axis_split, broadcast_shape, ensure_finite, gemm_acc, gemm_nt_acc, gemm_tn_acc, permute_table, reduce_bcast, zip_bcast,
    Bcast,
};
use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

thread_local! {
    static CORRUPT_SIGMOID_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with a deliberately wrong sigmoid derivative on this thread.
/// Only meant for checking that the gradient checker catches broken ops.
#[doc(hidden)]
pub fn with_corrupted_sigmoid_backward<R>(f: impl FnOnce() -> R) -> R {
    CORRUPT_SIGMOID_BACKWARD.with(|c| c.set(true));
    let out = f();
    CORRUPT_SIGMOID_BACKWARD.with(|c| c.set(false));
    out
}

/// Every differentiable operation the tape records.
pub const DIFFERENTIABLE_OPS: [&str; 18] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "cross_entropy",
    "concat",
    "slice",
    "permute",
    "reshape",
    "embedding",
    "mean_abs",
    "sum",
    "mean",
];

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sigmoid { a: Var },
    Gelu { a: Var, tanh: Vec<f64> },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<Option<usize>>, count: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Permute { a: Var, table: Vec<usize> },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MeanAbs { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Embedding { .. } => "embedding",
            Op::MeanAbs { .. } => "mean_abs",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, Var)>,
    nodes_visited: usize,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn nodes_visited(&self) -> usize {
        self.nodes_visited
    }

    /// Gradients for every parameter bound on the tape that required one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bindings
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    pub fn accumulate_into_store(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            let t = store.get_mut(id);
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.wrt(v) {
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        ensure_finite(op.name(), &value)?;
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Names of the operations recorded so far.
    pub fn op_names(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).filter(|n| *n != "leaf").collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts_unchecked(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| Error::shape("matmul", &sa, &sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([p, r]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; numel(&out_shape)];
        if batch_b.is_empty() {
            // rows of every batch of `a` share one right-hand matrix
            let rows = numel(batch_a) * p;
            gemm_acc(av, bv, &mut out, rows, q, r);
        } else {
            let nb = numel(&batch);
            let ma = Bcast::new(&batch, batch_a);
            let mb = Bcast::new(&batch, batch_b);
            for i in 0..nb {
                let ia = ma.map(i);
                let ib = mb.map(i);
                gemm_acc(
                    &av[ia * p * q..(ia + 1) * p * q],
                    &bv[ib * q * r..(ib + 1) * q * r],
                    &mut out[i * p * r..(i + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out_shape, out, Op::MatMul { a, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(name, sa, sb)?;
        let ma = Bcast::new(&out_shape, sa);
        let mb = Bcast::new(&out_shape, sb);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = numel(&out_shape);
        let out = zip_bcast(n, av, &ma, bv, &mb, f);
        Ok((out_shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(s, v, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(s, v, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(s, v, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x * factor).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(s, v, Op::Scale { a, factor }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(s, v, Op::Sigmoid { a }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let xs = self.value(a);
        let tanh: Vec<f64> = xs.iter().map(|&x| (GELU_C * (x + GELU_A * x * x * x)).tanh()).collect();
        let v = xs.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let s = self.shape(a).to_vec();
        let ng = self.ng(a);
        let tanh = if ng { tanh } else { Vec::new() };
        self.push(s, v, Op::Gelu { a, tanh }, ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(x[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[base + k * inner] - m).exp();
                    y[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= s;
                }
            }
        }
        let ng = self.ng(a);
        self.push(shape, y, Op::Softmax { a, axis }, ng)
    }

    /// Normalizes over the trailing axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().ok_or_else(|| Error::Contract("layernorm on a scalar".into()))?;
        if self.shape(gain) != [e] || self.shape(bias) != [e] {
            return Err(Error::shape("layernorm", &shape, self.shape(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / e;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * e..(r + 1) * e];
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let h = (row[j] - mean) * rs;
                xhat[r * e + j] = h;
                out[r * e + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Mean token-level negative log-likelihood over positions whose target
    /// is not `ignore_index`. `logits` is `[S, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (s, v) = (shape[0], shape[1]);
        let x = self.value(logits);
        let mut probs = vec![0.0; s * v];
        let mut tg = Vec::with_capacity(s);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..s {
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            let t = targets[r];
            if t == ignore_index {
                tg.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::Input(format!("target id {t} outside vocabulary of {v}")));
            }
            total += lse - row[t];
            count += 1;
            tg.push(Some(t));
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let ng = self.ng(logits);
        self.push(
            Vec::new(),
            vec![total / count as f64],
            Op::CrossEntropy { logits, probs, targets: tg, count },
            ng,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * full * inner + start * inner;
            out.extend_from_slice(&x[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(a);
        self.push(out_shape, out, Op::Slice { a, axis, start }, ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let table = permute_table(&shape, perm);
        let x = self.value(a);
        let out = table.iter().map(|&i| x[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(a);
        self.push(out_shape, out, Op::Permute { a, table }, ng)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(shape.to_vec(), v, Op::Reshape { a }, ng)
    }

    /// Gathers rows of `table` (`[V, E]`); output shape is `ids_shape ++ [E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Contract(format!("embedding table must be rank 2, got {ts:?}")));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", ids_shape, &[ids.len()]));
        }
        let (v, e) = (ts[0], ts[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(e);
        let ng = self.ng(table);
        self.push(out_shape, out, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    pub fn mean_abs(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(Vec::new(), vec![m], Op::MeanAbs { a }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        self.push(Vec::new(), vec![m], Op::Mean { a }, ng)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes, bindings, .. } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            visited += 1;
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                ensure_finite(nodes[i].op.name(), g)?;
            }
        }
        Ok(Gradients {
            grads,
            bindings,
            nodes_visited: visited,
        })
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where f64 would round to an endpoint.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
    let ng = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (shp(*a), shp(*b));
            let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let r = sb[sb.len() - 1];
            let batch_a = &sa[..sa.len() - 2];
            let batch_b = &sb[..sb.len() - 2];
            let batch = &node.shape[..node.shape.len() - 2];
            if batch_b.is_empty() {
                let rows = numel(batch_a) * p;
                if ng(*a) {
                    let ga = add_into(&mut grads[a.0], rows * q);
                    gemm_nt_acc(g, val(*b), ga, rows, q, r);
                }
                if ng(*b) {
                    let gb = add_into(&mut grads[b.0], q * r);
                    gemm_tn_acc(val(*a), g, gb, rows, q, r);
                }
            } else {
                let nb = numel(batch);
                let ma = Bcast::new(batch, batch_a);
                let mb = Bcast::new(batch, batch_b);
                let (av, bv) = (val(*a), val(*b));
                if ng(*a) {
                    let ga = add_into(&mut grads[a.0], av.len());
                    for k in 0..nb {
                        let (ia, ib) = (ma.map(k), mb.map(k));
                        gemm_nt_acc(
                            &g[k * p * r..(k + 1) * p * r],
                            &bv[ib * q * r..(ib + 1) * q * r],
                            &mut ga[ia * p * q..(ia + 1) * p * q],
                            p,
                            q,
                            r,
                        );
                    }
                }
                if ng(*b) {
                    let gb = add_into(&mut grads[b.0], bv.len());
                    for k in 0..nb {
                        let (ia, ib) = (ma.map(k), mb.map(k));
                        gemm_tn_acc(
                            &av[ia * p * q..(ia + 1) * p * q],
                            &g[k * p * r..(k + 1) * p * r],
                            &mut gb[ib * q * r..(ib + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign_b = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            for (v, sign) in [(*a, 1.0), (*b, sign_b)] {
                if !ng(v) {
                    continue;
                }
                let m = Bcast::new(&node.shape, shp(v));
                let len = val(v).len();
                let gv = add_into(&mut grads[v.0], len);
                reduce_bcast(gv, &m, g, sign);
            }
        }
        Op::Mul { a, b } => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if !ng(v) {
                    continue;
                }
                let m = Bcast::new(&node.shape, shp(v));
                let mo = Bcast::new(&node.shape, shp(other));
                let ov = val(other);
                let len = val(v).len();
                let prod = zip_bcast(g.len(), g, &Bcast::Identity, ov, &mo, |x, y| x * y);
                let gv = add_into(&mut grads[v.0], len);
                reduce_bcast(gv, &m, &prod, 1.0);
            }
        }
        Op::Scale { a, factor } => {
            let ga = add_into(&mut grads[a.0], g.len());
            ga.iter_mut().zip(g).for_each(|(x, gk)| *x += factor * gk);
        }
        Op::Sigmoid { a } => {
            let corrupt = CORRUPT_SIGMOID_BACKWARD.with(|c| c.get());
            let ga = add_into(&mut grads[a.0], g.len());
            for ((x, gk), y) in ga.iter_mut().zip(g).zip(&node.value) {
                let d = if corrupt { y * (1.0 - y) * 1.1 } else { y * (1.0 - y) };
                *x += gk * d;
            }
        }
        Op::Gelu { a, tanh } => {
            let xs = val(*a);
            let ga = add_into(&mut grads[a.0], g.len());
            for (((acc, gk), &x), &t) in ga.iter_mut().zip(g).zip(xs).zip(tanh) {
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                *acc += gk * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let y = &node.value;
            let ga = add_into(&mut grads[a.0], g.len());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..len {
                        let idx = base + k * inner;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let e = *node.shape.last().unwrap();
            let rows = rstd.len();
            let gv = val(*gain);
            if ng(*x) {
                let gx = add_into(&mut grads[x.0], rows * e);
                for r in 0..rows {
                    let gr = &g[r * e..(r + 1) * e];
                    let hr = &xhat[r * e..(r + 1) * e];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..e {
                        let d = gr[j] * gv[j];
                        m1 += d;
                        m2 += d * hr[j];
                    }
                    m1 /= e as f64;
                    m2 /= e as f64;
                    for j in 0..e {
                        let d = gr[j] * gv[j];
                        gx[r * e + j] += rstd[r] * (d - m1 - hr[j] * m2);
                    }
                }
            }
            if ng(*gain) {
                let gg = add_into(&mut grads[gain.0], e);
                for (k, gk) in g.iter().enumerate() {
                    gg[k % e] += gk * xhat[k];
                }
            }
            if ng(*bias) {
                let gb = add_into(&mut grads[bias.0], e);
                for (k, gk) in g.iter().enumerate() {
                    gb[k % e] += gk;
                }
            }
        }
        Op::CrossEntropy { logits, probs, targets, count } => {
            let v = shp(*logits)[1];
            let scale = g[0] / *count as f64;
            let gl = add_into(&mut grads[logits.0], probs.len());
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                for j in 0..v {
                    gl[r * v + j] += scale * probs[r * v + j];
                }
                gl[r * v + t] -= scale;
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for o in 0..outer {
                for &v in inputs {
                    let block = shp(v)[*axis] * inner;
                    if ng(v) {
                        let len = val(v).len();
                        let gv = add_into(&mut grads[v.0], len);
                        for k in 0..block {
                            gv[o * block + k] += g[offset + k];
                        }
                    }
                    offset += block;
                }
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, full, inner) = axis_split(shp(*a), *axis);
            let len = node.shape[*axis];
            let ga = add_into(&mut grads[a.0], outer * full * inner);
            for o in 0..outer {
                let off = o * full * inner + start * inner;
                for k in 0..len * inner {
                    ga[off + k] += g[o * len * inner + k];
                }
            }
        }
        Op::Permute { a, table } => {
            let ga = add_into(&mut grads[a.0], g.len());
            for (k, &src) in table.iter().enumerate() {
                ga[src] += g[k];
            }
        }
        Op::Reshape { a } => {
            let ga = add_into(&mut grads[a.0], g.len());
            ga.iter_mut().zip(g).for_each(|(x, gk)| *x += gk);
        }
        Op::Embedding { table, ids } => {
            let e = shp(*table)[1];
            let len = val(*table).len();
            let gt = add_into(&mut grads[table.0], len);
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..e {
                    gt[id * e + j] += g[k * e + j];
                }
            }
        }
        Op::MeanAbs { a } => {
            let xs = val(*a);
            let n = xs.len() as f64;
            let ga = add_into(&mut grads[a.0], xs.len());
            for (acc, &x) in ga.iter_mut().zip(xs) {
                let s = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *acc += g[0] * s / n;
            }
        }
        Op::Sum { a } => {
            let len = val(*a).len();
            let ga = add_into(&mut grads[a.0], len);
            ga.iter_mut().for_each(|x| *x += g[0]);
        }
        Op::Mean { a } => {
            let len = val(*a).len();
            let ga = add_into(&mut grads[a.0], len);
            ga.iter_mut().for_each(|x| *x += g[0] / len as f64);
        }
    }
}
