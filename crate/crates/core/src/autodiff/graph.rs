//! The tape: forward evaluation records nodes, backward walks them in
//! reverse. Parameters are external leaves so graphs stay cheap to build.

use super::kernels::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::{AdError, Element, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, uniquely-indexed model parameters. Tensors share storage on clone,
/// so copying a ParamSet to perturb one coordinate is cheap.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> ParamSet<T> {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push((name.to_string(), value));
        self.index.insert(name.to_string(), id);
        id
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn convert<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.convert::<U>()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Per-parameter gradient accumulator aligned with a ParamSet.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn new(params: &ParamSet<T>) -> Grads<T> {
        Grads {
            slots: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    /// Gradient for a parameter, zeros if it never received one.
    pub fn dense(&self, id: ParamId, params: &ParamSet<T>) -> Tensor<T> {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.value(id).shape()),
        }
    }

    fn accum(&mut self, id: ParamId, grad: &Tensor<T>) {
        if let Some(t) = &mut self.slots[id.0] {
            t.add_assign(grad);
        } else {
            self.slots[id.0] = Some(grad.clone());
        }
    }

    /// Merge another accumulator into this one (fixed call order keeps the
    /// result independent of how work was distributed).
    pub fn merge(&mut self, other: &Grads<T>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(s) = src {
                match dst {
                    Some(d) => d.add_assign(s),
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.data_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn global_l2_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for slot in self.slots.iter().flatten() {
            for v in slot.data() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Backward sink: ops accumulate into their parents' gradient buffers.
pub struct GradSink<'a, T> {
    parent_ids: &'a [ValueId],
    parent_shapes: Vec<Vec<usize>>,
    node_grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Element> GradSink<'_, T> {
    /// Mutable gradient buffer of parent `i`, created as zeros on first use.
    pub fn grad(&mut self, i: usize) -> &mut Tensor<T> {
        let id = self.parent_ids[i].0;
        self.node_grads[id].get_or_insert_with(|| Tensor::zeros(&self.parent_shapes[i]))
    }

    /// Add `contribution` to parent `i`'s gradient.
    pub fn add(&mut self, i: usize, contribution: &Tensor<T>) {
        self.grad(i).add_assign(contribution);
    }
}

/// A recorded operation: how to push gradients to parents, and its forward
/// multiply-accumulate cost for FLOP instrumentation.
pub trait OpNode<T: Element>: Send {
    fn backward(&self, out: &Tensor<T>, out_grad: &Tensor<T>, sink: &mut GradSink<'_, T>);

    /// Forward FLOPs (2 per multiply-accumulate); elementwise work reports 0.
    fn flops(&self) -> u64 {
        0
    }
}

enum NodeKind<T: Element> {
    Input,
    Param(ParamId),
    Op(Box<dyn OpNode<T>>),
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<ValueId>,
    kind: NodeKind<T>,
}

pub struct Graph<T: Element> {
    params: Arc<ParamSet<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new(params: Arc<ParamSet<T>>) -> Graph<T> {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    #[inline]
    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<ValueId>, kind: NodeKind<T>) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            kind,
        });
        id
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Vec::new(), NodeKind::Input)
    }

    /// Parameter leaf; backward routes its gradient into the shared Grads.
    pub fn param(&mut self, id: ParamId) -> ValueId {
        let value = self.params.value(id).clone();
        self.push(value, Vec::new(), NodeKind::Param(id))
    }

    /// Record a custom operation node (used by attention and the heads).
    pub fn custom(
        &mut self,
        value: Tensor<T>,
        parents: Vec<ValueId>,
        op: Box<dyn OpNode<T>>,
    ) -> ValueId {
        self.push(value, parents, NodeKind::Op(op))
    }

    /// Sum of forward FLOPs across all executed nodes.
    pub fn flops(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Op(op) => op.flops(),
                _ => 0,
            })
            .sum()
    }

    /// Reverse pass from a scalar root. Parameter gradients accumulate into
    /// `grads`; everything else stays graph-local.
    pub fn backward(&self, root: ValueId, grads: &mut Grads<T>) {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut node_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        node_grads.resize(self.nodes.len(), None);
        node_grads[root.0] = Some(Tensor::scalar(T::ONE));

        for id in (0..=root.0).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Input => {}
                NodeKind::Param(pid) => grads.accum(*pid, &grad),
                NodeKind::Op(op) => {
                    let parent_shapes = node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].value.shape().to_vec())
                        .collect();
                    let mut sink = GradSink {
                        parent_ids: &node.parents,
                        parent_shapes,
                        node_grads: &mut node_grads,
                    };
                    op.backward(&node.value, &grad, &mut sink);
                }
            }
        }
    }

    // ---- primitive operations ----

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        Ok(self.push(
            out,
            vec![a, b],
            NodeKind::Op(Box::new(MatmulOp {
                a: av,
                b: bv,
                transposed_b: false,
            })),
        ))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (m, k) = (av.rows(), av.cols());
        let (n, k2) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        Ok(self.push(
            out,
            vec![a, b],
            NodeKind::Op(Box::new(MatmulOp {
                a: av,
                b: bv,
                transposed_b: true,
            })),
        ))
    }

    /// x·w with an optional row-broadcast bias.
    pub fn linear(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId, AdError> {
        let y = self.matmul(x, w)?;
        match bias {
            None => Ok(y),
            Some(b) => self.add_rows(y, b),
        }
    }

    /// Add a [n] vector to every row of a [m×n] tensor.
    pub fn add_rows(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId, AdError> {
        let xv = self.value(x).clone();
        let bv = self.value(bias).clone();
        let n = xv.cols();
        if bv.shape() != [n] {
            return Err(AdError::Shape {
                op: "add_rows",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.push(out, vec![x, bias], NodeKind::Op(Box::new(AddRowsOp))))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        self.zip("add", a, b, |x, y| x + y, Box::new(AddOp))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        self.zip("sub", a, b, |x, y| x - y, Box::new(SubOp))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        self.zip("mul", a, b, |x, y| x * y, Box::new(MulOp { a: av, b: bv }))
    }

    fn zip(
        &mut self,
        opname: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(T, T) -> T,
        op: Box<dyn OpNode<T>>,
    ) -> Result<ValueId, AdError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AdError::Shape {
                op: opname,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        Ok(self.push(out, vec![a, b], NodeKind::Op(op)))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| v * cv);
        self.push(out, vec![x], NodeKind::Op(Box::new(ScaleOp { c: cv })))
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> ValueId {
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| v + cv);
        self.push(out, vec![x], NodeKind::Op(Box::new(AddScalarOp)))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId, AdError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(AdError::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = xv.reshaped(shape);
        Ok(self.push(out, vec![x], NodeKind::Op(Box::new(ReshapeOp))))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId, AdError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(AdError::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[n, m]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Ok(self.push(out, vec![x], NodeKind::Op(Box::new(TransposeOp))))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, AdError> {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(AdError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[m, total]);
        {
            let dst = out.data_mut();
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                for i in 0..m {
                    dst[i * total + col..i * total + col + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                col += w;
            }
        }
        Ok(self.push(
            out,
            parts.to_vec(),
            NodeKind::Op(Box::new(ConcatColsOp { widths })),
        ))
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId, AdError> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > m {
            return Err(AdError::Shape {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(&[len, n]);
        out.data_mut()
            .copy_from_slice(&xv.data()[start * n..(start + len) * n]);
        Ok(self.push(
            out,
            vec![x],
            NodeKind::Op(Box::new(SliceRowsOp { start })),
        ))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId, AdError> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(AdError::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(&[m, len]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for i in 0..m {
                dst[i * len..(i + 1) * len]
                    .copy_from_slice(&src[i * n + start..i * n + start + len]);
            }
        }
        Ok(self.push(
            out,
            vec![x],
            NodeKind::Op(Box::new(SliceColsOp { start, len })),
        ))
    }

    /// Row-wise softmax with an optional shared column mask. Masked entries
    /// output exactly 0.
    pub fn softmax_masked(
        &mut self,
        x: ValueId,
        mask: Option<Vec<bool>>,
    ) -> Result<ValueId, AdError> {
        let xv = self.value(x).clone();
        let n = xv.cols();
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(AdError::Shape {
                    op: "softmax_masked",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = xv.clone();
        for (row_idx, row) in out.data_mut().chunks_mut(n).enumerate() {
            softmax_row(row, mask.as_deref()).map_err(|_| AdError::FullyMaskedRow { row: row_idx })?;
        }
        Ok(self.push(out, vec![x], NodeKind::Op(Box::new(SoftmaxOp))))
    }

    pub fn rmsnorm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId, AdError> {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let d = xv.cols();
        if gv.shape() != [d] {
            return Err(AdError::Shape {
                op: "rmsnorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let eps = T::from_f64(RMSNORM_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mut ms = T::ZERO;
            for &v in row.iter() {
                ms += v * v;
            }
            let r = (ms * inv_d + eps).sqrt();
            for (v, &g) in row.iter_mut().zip(gv.data()) {
                *v = g * (*v / r);
            }
        }
        Ok(self.push(
            out,
            vec![x, gain],
            NodeKind::Op(Box::new(RmsnormOp { x: xv, gain: gv })),
        ))
    }

    pub fn mish(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let out = xv.map(|v| v * softplus(v).tanh());
        self.push(out, vec![x], NodeKind::Op(Box::new(MishOp { x: xv })))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, vec![x], NodeKind::Op(Box::new(TanhOp)))
    }

    /// Fused masked-softmax cross-entropy against a constant target
    /// distribution. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        target: Tensor<T>,
        mask: Option<Vec<bool>>,
    ) -> Result<ValueId, AdError> {
        let lv = self.value(logits).clone();
        if lv.shape() != target.shape() {
            return Err(AdError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = lv.len();
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(AdError::Shape {
                    op: "cross_entropy",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            for (i, &t) in target.data().iter().enumerate() {
                if !m[i] && t != T::ZERO {
                    return Err(AdError::TargetOnMasked {
                        index: i,
                        mass: t.to_f64(),
                    });
                }
            }
        }
        let mut probs = lv.reshaped(&[n]);
        softmax_row(probs.data_mut(), mask.as_deref())
            .map_err(|_| AdError::FullyMaskedRow { row: 0 })?;
        let mut loss = T::ZERO;
        for (&p, &t) in probs.data().iter().zip(target.data()) {
            if t != T::ZERO {
                loss -= t * p.ln();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            NodeKind::Op(Box::new(CrossEntropyOp { probs, target })),
        ))
    }

    /// Mean squared difference of two same-shape values; scalar output.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AdError> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if av.shape() != bv.shape() {
            return Err(AdError::Shape {
                op: "mse",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let inv_n = T::from_f64(1.0 / av.len() as f64);
        let mut loss = T::ZERO;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = x - y;
            loss += d * d;
        }
        loss = loss * inv_n;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![a, b],
            NodeKind::Op(Box::new(MseOp { a: av, b: bv })),
        ))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(Tensor::scalar(s), vec![x], NodeKind::Op(Box::new(SumOp)))
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).clone();
        self.push(out, vec![x], NodeKind::Op(Box::new(DetachOp)))
    }
}

/// Epsilon inside the RMS norm root, shared by forward and backward.
pub const RMSNORM_EPS: f64 = 1e-6;

#[inline]
fn softplus<T: Element>(x: T) -> T {
    // max(x,0) + log1p(e^{-|x|}): overflow-safe in both tails.
    x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// In-place softmax over a slice with an optional mask; Err(()) if no entry
/// is unmasked.
fn softmax_row<T: Element>(row: &mut [T], mask: Option<&[bool]>) -> Result<(), ()> {
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max: Option<T> = None;
    for (i, v) in row.iter().enumerate() {
        if live(i) {
            max = Some(match max {
                None => *v,
                Some(m) => m.maximum(*v),
            });
        }
    }
    let Some(max) = max else { return Err(()) };
    let mut denom = T::ZERO;
    for i in 0..row.len() {
        if live(i) {
            row[i] = (row[i] - max).exp();
            denom += row[i];
        } else {
            row[i] = T::ZERO;
        }
    }
    for v in row.iter_mut() {
        *v = *v / denom;
    }
    Ok(())
}

// ---- op implementations ----

struct MatmulOp<T> {
    a: Tensor<T>,
    b: Tensor<T>,
    transposed_b: bool,
}

impl<T: Element> OpNode<T> for MatmulOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (m, k) = (self.a.rows(), self.a.cols());
        if !self.transposed_b {
            let n = self.b.cols();
            // dA += dC·Bᵀ ; dB += Aᵀ·dC
            matmul_nt_acc(g.data(), self.b.data(), sink.grad(0).data_mut(), m, n, k);
            matmul_tn_acc(self.a.data(), g.data(), sink.grad(1).data_mut(), m, k, n);
        } else {
            let n = self.b.rows();
            // C = A·Bᵀ: dA += dC·B ; dB += dCᵀ·A
            matmul_nn_acc(g.data(), self.b.data(), sink.grad(0).data_mut(), m, n, k);
            matmul_tn_acc(g.data(), self.a.data(), sink.grad(1).data_mut(), m, n, k);
        }
    }

    fn flops(&self) -> u64 {
        let (m, k) = (self.a.rows() as u64, self.a.cols() as u64);
        let n = if self.transposed_b {
            self.b.rows() as u64
        } else {
            self.b.cols() as u64
        };
        2 * m * k * n
    }
}

struct AddRowsOp;

impl<T: Element> OpNode<T> for AddRowsOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
        let n = out.cols();
        let bias_grad = sink.grad(1);
        for row in g.data().chunks(n) {
            for (b, &gv) in bias_grad.data_mut().iter_mut().zip(row) {
                *b += gv;
            }
        }
    }
}

struct AddOp;

impl<T: Element> OpNode<T> for AddOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
        sink.add(1, g);
    }
}

struct SubOp;

impl<T: Element> OpNode<T> for SubOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
        let neg = g.map(|v| -v);
        sink.add(1, &neg);
    }
}

struct MulOp<T> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Element> OpNode<T> for MulOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        {
            let da = sink.grad(0);
            for ((d, &gv), &bv) in da.data_mut().iter_mut().zip(g.data()).zip(self.b.data()) {
                *d += gv * bv;
            }
        }
        let db = sink.grad(1);
        for ((d, &gv), &av) in db.data_mut().iter_mut().zip(g.data()).zip(self.a.data()) {
            *d += gv * av;
        }
    }
}

struct ScaleOp<T> {
    c: T,
}

impl<T: Element> OpNode<T> for ScaleOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let c = self.c;
        let scaled = g.map(|v| v * c);
        sink.add(0, &scaled);
    }
}

struct AddScalarOp;

impl<T: Element> OpNode<T> for AddScalarOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        sink.add(0, g);
    }
}

struct ReshapeOp;

impl<T: Element> OpNode<T> for ReshapeOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let target = sink.grad(0);
        let reshaped = g.reshaped(&target.shape().to_vec());
        target.add_assign(&reshaped);
    }
}

struct TransposeOp;

impl<T: Element> OpNode<T> for TransposeOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (n, m) = (out.rows(), out.cols());
        let dst = sink.grad(0);
        let dd = dst.data_mut();
        for j in 0..n {
            for i in 0..m {
                dd[i * n + j] += g.data()[j * m + i];
            }
        }
    }
}

struct ConcatColsOp {
    widths: Vec<usize>,
}

impl<T: Element> OpNode<T> for ConcatColsOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let m = out.rows();
        let total = out.cols();
        let mut col = 0;
        for (idx, &w) in self.widths.iter().enumerate() {
            let part = sink.grad(idx);
            let pd = part.data_mut();
            for i in 0..m {
                for j in 0..w {
                    pd[i * w + j] += g.data()[i * total + col + j];
                }
            }
            col += w;
        }
    }
}

struct SliceRowsOp {
    start: usize,
}

impl<T: Element> OpNode<T> for SliceRowsOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let n = out.cols();
        let len = out.rows();
        let parent = sink.grad(0);
        let pd = parent.data_mut();
        for (d, &s) in pd[self.start * n..(self.start + len) * n]
            .iter_mut()
            .zip(g.data())
        {
            *d += s;
        }
    }
}

struct SliceColsOp {
    start: usize,
    len: usize,
}

impl<T: Element> OpNode<T> for SliceColsOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let m = out.rows();
        let parent = sink.grad(0);
        let n = parent.cols();
        let pd = parent.data_mut();
        for i in 0..m {
            for j in 0..self.len {
                pd[i * n + self.start + j] += g.data()[i * self.len + j];
            }
        }
    }
}

struct SoftmaxOp;

impl<T: Element> OpNode<T> for SoftmaxOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let n = out.cols();
        let dst = sink.grad(0);
        let dd = dst.data_mut();
        for (row, (pr, gr)) in out.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
            let mut dot = T::ZERO;
            for (&p, &gv) in pr.iter().zip(gr) {
                dot += p * gv;
            }
            for j in 0..n {
                dd[row * n + j] += pr[j] * (gr[j] - dot);
            }
        }
    }
}

struct RmsnormOp<T> {
    x: Tensor<T>,
    gain: Tensor<T>,
}

impl<T: Element> OpNode<T> for RmsnormOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let d = self.x.cols();
        let eps = T::from_f64(RMSNORM_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        {
            let dx = sink.grad(0);
            let dxd = dx.data_mut();
            for (row, (xr, gr)) in self
                .x
                .data()
                .chunks(d)
                .zip(g.data().chunks(d))
                .enumerate()
            {
                let mut ms = T::ZERO;
                for &v in xr {
                    ms += v * v;
                }
                let r = (ms * inv_d + eps).sqrt();
                let r3 = r * r * r;
                let mut dot = T::ZERO;
                for ((&gv, &xv), &gain) in gr.iter().zip(xr).zip(self.gain.data()) {
                    dot += gv * gain * xv;
                }
                for j in 0..d {
                    dxd[row * d + j] +=
                        self.gain.data()[j] * gr[j] / r - xr[j] * dot * inv_d / r3;
                }
            }
        }
        let dgain = sink.grad(1);
        let dgd = dgain.data_mut();
        for (xr, gr) in self.x.data().chunks(d).zip(g.data().chunks(d)) {
            let mut ms = T::ZERO;
            for &v in xr {
                ms += v * v;
            }
            let r = (ms * inv_d + eps).sqrt();
            for j in 0..d {
                dgd[j] += gr[j] * xr[j] / r;
            }
        }
    }
}

struct MishOp<T> {
    x: Tensor<T>,
}

impl<T: Element> OpNode<T> for MishOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dst = sink.grad(0);
        for ((d, &gv), &xv) in dst.data_mut().iter_mut().zip(g.data()).zip(self.x.data()) {
            let t = softplus(xv).tanh();
            let sig = T::ONE / (T::ONE + (-xv).exp());
            *d += gv * (t + xv * (T::ONE - t * t) * sig);
        }
    }
}

struct TanhOp;

impl<T: Element> OpNode<T> for TanhOp {
    fn backward(&self, out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dst = sink.grad(0);
        for ((d, &gv), &y) in dst.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
            *d += gv * (T::ONE - y * y);
        }
    }
}

struct CrossEntropyOp<T> {
    probs: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Element> OpNode<T> for CrossEntropyOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        // d/dlogits = p - t on unmasked entries; masked entries have p = t = 0.
        let s = g.item();
        let dst = sink.grad(0);
        for ((d, &p), &t) in dst
            .data_mut()
            .iter_mut()
            .zip(self.probs.data())
            .zip(self.target.data())
        {
            *d += s * (p - t);
        }
    }
}

struct MseOp<T> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Element> OpNode<T> for MseOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let s = g.item();
        let inv_n = T::from_f64(1.0 / self.a.len() as f64);
        let two = T::from_f64(2.0);
        {
            let da = sink.grad(0);
            for ((d, &x), &y) in da.data_mut().iter_mut().zip(self.a.data()).zip(self.b.data())
            {
                *d += s * two * (x - y) * inv_n;
            }
        }
        let db = sink.grad(1);
        for ((d, &x), &y) in db.data_mut().iter_mut().zip(self.a.data()).zip(self.b.data()) {
            *d -= s * two * (x - y) * inv_n;
        }
    }
}

struct SumOp;

impl<T: Element> OpNode<T> for SumOp {
    fn backward(&self, _out: &Tensor<T>, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let s = g.item();
        let dst = sink.grad(0);
        for d in dst.data_mut() {
            *d += s;
        }
    }
}

struct DetachOp;

impl<T: Element> OpNode<T> for DetachOp {
    fn backward(&self, _out: &Tensor<T>, _g: &Tensor<T>, _sink: &mut GradSink<'_, T>) {}
}
