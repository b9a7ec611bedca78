//! Wengert-list reverse-mode autodiff over f64 tensors.
//!
//! The tape is append-only, so node indices are already a topological order.
//! `backward` walks it once in reverse. Two gradient modes exist:
//!
//! * raw: adjoints are plain buffers and the returned gradients are recorded
//!   as constants. This is the fast path used for ordinary first-order
//!   training steps.
//! * recorded: every adjoint is itself built out of tape primitives, so the
//!   returned gradients can be differentiated again. Used for the exact
//!   second-order meta mode, where the outer loss flows through an inner
//!   gradient step.
//!
//! Broadcast is deliberately narrow: a one-element tensor combines with
//! anything, and a rank-1 `(d,)` tensor combines with a rank-2 `(n, d)` by
//! repeating across rows. Nothing else broadcasts; mismatches are errors that
//! name the primitive and both shapes.

use std::sync::Arc;

use crate::error::{Result, UdgError};
use crate::grad::primitive::Primitive;
use crate::grad::rng::Rng;
use crate::grad::tensor::{NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// `backward` returns gradients as constants (no higher-order flow).
    FirstOrder,
    /// `backward` records the adjoint computation, so gradients are
    /// differentiable tensors.
    SecondOrder,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf,
    Const,
    Op { prim: Primitive, inputs: Vec<NodeId> },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires: bool,
}

/// How a binary primitive pairs its two operand shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Same,
    ScalarLeft,
    ScalarRight,
    /// lhs is (d,), rhs is (n, d); lhs repeats across rows.
    RowLeft,
    /// lhs is (n, d), rhs is (d,).
    RowRight,
}

pub struct Tape {
    mode: TapeMode,
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_mismatch(prim: Primitive, lhs: &[usize], rhs: &[usize]) -> UdgError {
    UdgError::ShapeMismatch {
        primitive: prim.name().to_string(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid_shape(prim: Primitive, message: impl Into<String>) -> UdgError {
    UdgError::InvalidShape {
        primitive: prim.name().to_string(),
        message: message.into(),
    }
}

fn classify(prim: Primitive, lhs: &[usize], rhs: &[usize]) -> Result<(Pairing, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Pairing::Same, lhs.to_vec()));
    }
    if numel(lhs) == 1 {
        return Ok((Pairing::ScalarLeft, rhs.to_vec()));
    }
    if numel(rhs) == 1 {
        return Ok((Pairing::ScalarRight, lhs.to_vec()));
    }
    if lhs.len() == 1 && rhs.len() == 2 && lhs[0] == rhs[1] {
        return Ok((Pairing::RowLeft, rhs.to_vec()));
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok((Pairing::RowRight, lhs.to_vec()));
    }
    Err(shape_mismatch(prim, lhs, rhs))
}

#[inline]
fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row maxima and log-sum-exp for an (n, c) logit matrix.
fn row_lse(z: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut maxes = vec![0.0; n];
    let mut lse = vec![0.0; n];
    for i in 0..n {
        let row = &z[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        maxes[i] = m;
        lse[i] = m + s.ln();
    }
    (maxes, lse)
}

/// Operand indices for position `i` of the output under a pairing.
#[inline]
fn pair_idx(pairing: Pairing, d: usize, i: usize) -> (usize, usize) {
    match pairing {
        Pairing::Same => (i, i),
        Pairing::ScalarLeft => (0, i),
        Pairing::ScalarRight => (i, 0),
        Pairing::RowLeft => (i % d, i),
        Pairing::RowRight => (i, i % d),
    }
}

/// Forward evaluation of a binary elementwise primitive under a pairing.
fn ew_binary(
    pairing: Pairing,
    out_shape: &[usize],
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    let d = if out_shape.len() == 2 { out_shape[1] } else { 0 };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (ai, bi) = pair_idx(pairing, d, i);
        out.push(f(a[ai], b[bi]));
    }
    out
}

/// Fold an out-shaped buffer back to the shape of one broadcast operand.
fn reduce_to_operand(
    buf: &[f64],
    out_shape: &[usize],
    operand_shape: &[usize],
    operand_is_lhs: bool,
    pairing: Pairing,
) -> Vec<f64> {
    let broadcast_side = match pairing {
        Pairing::Same => None,
        Pairing::ScalarLeft | Pairing::RowLeft => Some(true),
        Pairing::ScalarRight | Pairing::RowRight => Some(false),
    };
    if broadcast_side != Some(operand_is_lhs) {
        return buf.to_vec();
    }
    match pairing {
        Pairing::ScalarLeft | Pairing::ScalarRight => vec![buf.iter().sum()],
        Pairing::RowLeft | Pairing::RowRight => {
            let d = out_shape[1];
            let mut out = vec![0.0; d];
            for (i, v) in buf.iter().enumerate() {
                out[i % d] += v;
            }
            debug_assert_eq!(d, numel(operand_shape));
            out
        }
        Pairing::Same => unreachable!(),
    }
}

impl Tape {
    pub fn new(mode: TapeMode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Tensor {
        let data = Arc::new(data);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            shape: shape.clone(),
            data: Arc::clone(&data),
            requires,
        });
        Tensor { id, shape, data }
    }

    /// A trainable input: gradients flow to it.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.check_payload(shape, &data)?;
        Ok(self.push(NodeKind::Leaf, shape.to_vec(), data, true))
    }

    /// A frozen input: treated as data, no gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.check_payload(shape, &data)?;
        Ok(self.push(NodeKind::Const, shape.to_vec(), data, false))
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(NodeKind::Const, vec![], vec![v], false)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        self.push(NodeKind::Const, shape.to_vec(), vec![1.0; n], false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        self.push(NodeKind::Const, shape.to_vec(), vec![0.0; n], false)
    }

    fn check_payload(&self, shape: &[usize], data: &[f64]) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(UdgError::InvalidValue(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(())
    }

    /// Guard against handles that belong to a different tape.
    fn check_owned(&self, t: &Tensor) -> Result<()> {
        let ok = t.id.0 < self.nodes.len() && Arc::ptr_eq(&self.nodes[t.id.0].data, &t.data);
        if ok {
            Ok(())
        } else {
            Err(UdgError::InvalidValue(
                "tensor handle does not belong to this tape".to_string(),
            ))
        }
    }

    fn handle(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            id,
            shape: n.shape.clone(),
            data: Arc::clone(&n.data),
        }
    }

    /// Record `prim` applied to `inputs` and return the result.
    ///
    /// Reshape cannot go through here because it needs a target shape; use
    /// [`Tape::reshape`].
    pub fn apply(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        if prim == Primitive::Reshape {
            return Err(invalid_shape(
                prim,
                "reshape needs a target shape; call Tape::reshape",
            ));
        }
        if inputs.len() != prim.arity() {
            return Err(invalid_shape(
                prim,
                format!("expects {} inputs, got {}", prim.arity(), inputs.len()),
            ));
        }
        for t in inputs {
            self.check_owned(t)?;
        }
        let (shape, data) = self.eval(prim, inputs)?;
        for &v in &data {
            if !v.is_finite() {
                return Err(UdgError::NonFinite {
                    context: prim.name().to_string(),
                });
            }
        }
        let requires = inputs.iter().any(|t| self.nodes[t.id.0].requires);
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(NodeKind::Op { prim, inputs: ids }, shape, data, requires))
    }

    pub fn reshape(&mut self, t: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        self.check_owned(t)?;
        if numel(new_shape) != t.numel() {
            return Err(invalid_shape(
                Primitive::Reshape,
                format!("cannot reshape {:?} to {:?}", t.shape(), new_shape),
            ));
        }
        let requires = self.nodes[t.id.0].requires;
        let data = t.data.as_ref().clone();
        Ok(self.push(
            NodeKind::Op {
                prim: Primitive::Reshape,
                inputs: vec![t.id],
            },
            new_shape.to_vec(),
            data,
            requires,
        ))
    }

    fn eval(&self, prim: Primitive, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
        use Primitive::*;
        match prim {
            MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                    return Err(shape_mismatch(prim, &a.shape, &b.shape));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for kk in 0..k {
                        let aik = a.data[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &b.data[kk * m..(kk + 1) * m];
                        let orow = &mut out[i * m..(i + 1) * m];
                        for j in 0..m {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
                Ok((vec![n, m], out))
            }
            Transpose => {
                let a = inputs[0];
                if a.rank() != 2 {
                    return Err(invalid_shape(prim, format!("needs rank 2, got {:?}", a.shape)));
                }
                let (n, m) = (a.shape[0], a.shape[1]);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = a.data[i * m + j];
                    }
                }
                Ok((vec![m, n], out))
            }
            Reshape => unreachable!("handled in apply/reshape"),
            Add | Sub | Mul | Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let (pairing, out_shape) = classify(prim, &a.shape, &b.shape)?;
                let f = match prim {
                    Add => |x: f64, y: f64| x + y,
                    Sub => |x: f64, y: f64| x - y,
                    Mul => |x: f64, y: f64| x * y,
                    _ => |x: f64, y: f64| x / y,
                };
                let out = ew_binary(pairing, &out_shape, &a.data, &b.data, f);
                Ok((out_shape, out))
            }
            Neg => Ok((inputs[0].shape.clone(), inputs[0].data.iter().map(|v| -v).collect())),
            Relu => Ok((
                inputs[0].shape.clone(),
                inputs[0].data.iter().map(|&v| v.max(0.0)).collect(),
            )),
            Softplus => Ok((
                inputs[0].shape.clone(),
                inputs[0].data.iter().map(|&v| stable_softplus(v)).collect(),
            )),
            Exp => Ok((inputs[0].shape.clone(), inputs[0].data.iter().map(|v| v.exp()).collect())),
            Log => Ok((inputs[0].shape.clone(), inputs[0].data.iter().map(|v| v.ln()).collect())),
            Sqrt => Ok((
                inputs[0].shape.clone(),
                inputs[0].data.iter().map(|v| v.sqrt()).collect(),
            )),
            Mean => {
                let a = inputs[0];
                if a.numel() == 0 {
                    return Err(invalid_shape(prim, "empty tensor"));
                }
                let s: f64 = a.data.iter().sum();
                Ok((vec![], vec![s / a.numel() as f64]))
            }
            Sum => Ok((vec![], vec![inputs[0].data.iter().sum()])),
            MeanAxis0 | SumAxis0 => {
                let a = inputs[0];
                if a.rank() != 2 || a.shape[0] == 0 {
                    return Err(invalid_shape(
                        prim,
                        format!("needs non-empty rank 2, got {:?}", a.shape),
                    ));
                }
                let (n, d) = (a.shape[0], a.shape[1]);
                let mut out = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        out[j] += a.data[i * d + j];
                    }
                }
                if prim == MeanAxis0 {
                    for v in &mut out {
                        *v /= n as f64;
                    }
                }
                Ok((vec![d], out))
            }
            SqDist => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape != b.shape {
                    return Err(shape_mismatch(prim, &a.shape, &b.shape));
                }
                let s: f64 = a
                    .data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                Ok((vec![], vec![s]))
            }
            SoftmaxCrossEntropy => {
                let (z, t) = (inputs[0], inputs[1]);
                if z.rank() != 2 || z.shape != t.shape || z.shape[0] == 0 {
                    return Err(shape_mismatch(prim, &z.shape, &t.shape));
                }
                let (n, c) = (z.shape[0], z.shape[1]);
                for i in 0..n {
                    let s: f64 = t.data[i * c..(i + 1) * c].iter().sum();
                    if (s - 1.0).abs() > 1e-6 {
                        return Err(UdgError::InvalidValue(format!(
                            "cross-entropy target row {i} sums to {s}, expected 1"
                        )));
                    }
                }
                let (_, lse) = row_lse(&z.data, n, c);
                let mut total = 0.0;
                for i in 0..n {
                    for j in 0..c {
                        total += t.data[i * c + j] * (lse[i] - z.data[i * c + j]);
                    }
                }
                Ok((vec![], vec![total / n as f64]))
            }
        }
    }

    /// Gradients of a scalar `loss` with respect to `params`.
    ///
    /// In [`TapeMode::SecondOrder`] the adjoint arithmetic is recorded so the
    /// results stay differentiable; otherwise this is [`Tape::backward_raw`].
    /// Parameters the loss does not depend on are zero-filled when
    /// `allow_unused` is set and are an error otherwise.
    pub fn backward(
        &mut self,
        loss: &Tensor,
        params: &[&Tensor],
        allow_unused: bool,
    ) -> Result<Vec<Tensor>> {
        match self.mode {
            TapeMode::SecondOrder => self.backward_recorded(loss, params, allow_unused),
            TapeMode::FirstOrder => self.backward_raw(loss, params, allow_unused),
        }
    }

    /// Gradient pass whose results are constants on the tape. Always valid,
    /// never differentiable.
    pub fn backward_raw(
        &mut self,
        loss: &Tensor,
        params: &[&Tensor],
        allow_unused: bool,
    ) -> Result<Vec<Tensor>> {
        let active = self.prepare_backward(loss, params)?;
        let limit = loss.id.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; limit];
        adj[loss.id.0] = Some(vec![1.0]);

        for id in (0..limit).rev() {
            if !active[id] || adj[id].is_none() {
                continue;
            }
            let (prim, input_ids) = match &self.nodes[id].kind {
                NodeKind::Op { prim, inputs } => (*prim, inputs.clone()),
                _ => continue,
            };
            // adjoints stay in place so a caller can ask for the gradient of
            // an intermediate node, not just leaves
            let g = adj[id].clone().unwrap();
            let contributions = self.raw_vjp(prim, id, &input_ids, &g, &active)?;
            for (input_id, contrib) in input_ids.iter().zip(contributions) {
                if let Some(c) = contrib {
                    match &mut adj[input_id.0] {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(c) {
                                *e += v;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(params.len());
        for (index, p) in params.iter().enumerate() {
            let slot = if p.id.0 < limit { adj[p.id.0].clone() } else { None };
            match slot {
                Some(buf) if active[p.id.0] => {
                    out.push(self.push(NodeKind::Const, p.shape.clone(), buf, false))
                }
                _ => {
                    if !allow_unused {
                        return Err(UdgError::UnusedParam { index });
                    }
                    let z = vec![0.0; p.numel()];
                    out.push(self.push(NodeKind::Const, p.shape.clone(), z, false));
                }
            }
        }
        Ok(out)
    }

    fn backward_recorded(
        &mut self,
        loss: &Tensor,
        params: &[&Tensor],
        allow_unused: bool,
    ) -> Result<Vec<Tensor>> {
        let active = self.prepare_backward(loss, params)?;
        let limit = loss.id.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; limit];
        adj[loss.id.0] = Some(self.scalar(1.0));

        for id in (0..limit).rev() {
            if !active[id] || adj[id].is_none() {
                continue;
            }
            let (prim, input_ids) = match &self.nodes[id].kind {
                NodeKind::Op { prim, inputs } => (*prim, inputs.clone()),
                _ => continue,
            };
            let g = adj[id].clone().unwrap();
            let contributions = self.recorded_vjp(prim, id, &input_ids, &g, &active)?;
            for (input_id, contrib) in input_ids.iter().zip(contributions) {
                if let Some(c) = contrib {
                    let merged = match adj[input_id.0].take() {
                        Some(prev) => self.apply(Primitive::Add, &[&prev, &c])?,
                        None => c,
                    };
                    adj[input_id.0] = Some(merged);
                }
            }
        }

        let mut out = Vec::with_capacity(params.len());
        for (index, p) in params.iter().enumerate() {
            let slot = if p.id.0 < limit { adj[p.id.0].clone() } else { None };
            match slot {
                Some(t) if active[p.id.0] => out.push(t),
                _ => {
                    if !allow_unused {
                        return Err(UdgError::UnusedParam { index });
                    }
                    out.push(self.zeros(&p.shape));
                }
            }
        }
        Ok(out)
    }

    /// Shared validation: loss must be scalar and on this tape; returns the
    /// set of nodes that both feed the loss and carry gradient.
    fn prepare_backward(&self, loss: &Tensor, params: &[&Tensor]) -> Result<Vec<bool>> {
        self.check_owned(loss)?;
        for p in params {
            self.check_owned(p)?;
        }
        if loss.numel() != 1 {
            return Err(UdgError::InvalidShape {
                primitive: "backward".to_string(),
                message: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let mut reach = vec![false; loss.id.0 + 1];
        let mut stack = vec![loss.id];
        while let Some(id) = stack.pop() {
            if reach[id.0] {
                continue;
            }
            reach[id.0] = true;
            if let NodeKind::Op { inputs, .. } = &self.nodes[id.0].kind {
                for i in inputs {
                    if !reach[i.0] {
                        stack.push(*i);
                    }
                }
            }
        }
        // Gradients also flow *to* constants' adjoint slots unnecessarily;
        // restrict to nodes that can reach a gradient-carrying leaf.
        Ok(reach
            .iter()
            .enumerate()
            .map(|(i, &r)| r && self.nodes[i].requires)
            .collect())
    }

    fn raw_vjp(
        &self,
        prim: Primitive,
        node_id: usize,
        input_ids: &[NodeId],
        g: &[f64],
        active: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        use Primitive::*;
        let node_shape = self.nodes[node_id].shape.clone();
        let want: Vec<bool> = input_ids.iter().map(|i| active[i.0]).collect();
        let inp = |k: usize| -> (&[usize], &[f64]) {
            let n = &self.nodes[input_ids[k].0];
            (&n.shape, &n.data)
        };
        let out_data = &self.nodes[node_id].data;

        match prim {
            MatMul => {
                let (ashape, a) = inp(0);
                let (_, b) = inp(1);
                let (n, k) = (ashape[0], ashape[1]);
                let m = node_shape[1];
                let da = want[0].then(|| {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gij * b[kk * m + j];
                            }
                        }
                    }
                    da
                });
                let db = want[1].then(|| {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for kk in 0..k {
                            let aik = a[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[kk * m + j] += aik * g[i * m + j];
                            }
                        }
                    }
                    db
                });
                Ok(vec![da, db])
            }
            Transpose => {
                let (ashape, _) = inp(0);
                let (n, m) = (ashape[0], ashape[1]);
                Ok(vec![want[0].then(|| {
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] = g[j * n + i];
                        }
                    }
                    da
                })])
            }
            Reshape => Ok(vec![want[0].then(|| g.to_vec())]),
            Add | Sub => {
                let (ashape, _) = inp(0);
                let (bshape, _) = inp(1);
                let (pairing, _) = classify(prim, ashape, bshape)?;
                let da = want[0]
                    .then(|| reduce_to_operand(g, &node_shape, ashape, true, pairing));
                let db = want[1].then(|| {
                    let src: Vec<f64> = if prim == Sub {
                        g.iter().map(|v| -v).collect()
                    } else {
                        g.to_vec()
                    };
                    reduce_to_operand(&src, &node_shape, bshape, false, pairing)
                });
                Ok(vec![da, db])
            }
            Mul | Div => {
                let (ashape, a) = inp(0);
                let (bshape, b) = inp(1);
                let (pairing, _) = classify(prim, ashape, bshape)?;
                let n = numel(&node_shape);
                let d = if node_shape.len() == 2 { node_shape[1] } else { 0 };
                // g lives in output space; operands go through the pairing map
                let da = want[0].then(|| {
                    let mut tmp = Vec::with_capacity(n);
                    for i in 0..n {
                        let (_, bi) = pair_idx(pairing, d, i);
                        tmp.push(match prim {
                            Mul => g[i] * b[bi],
                            _ => g[i] / b[bi],
                        });
                    }
                    reduce_to_operand(&tmp, &node_shape, ashape, true, pairing)
                });
                let db = want[1].then(|| {
                    let mut tmp = Vec::with_capacity(n);
                    for i in 0..n {
                        let (ai, bi) = pair_idx(pairing, d, i);
                        tmp.push(match prim {
                            Mul => g[i] * a[ai],
                            _ => -g[i] * a[ai] / (b[bi] * b[bi]),
                        });
                    }
                    reduce_to_operand(&tmp, &node_shape, bshape, false, pairing)
                });
                Ok(vec![da, db])
            }
            Neg => Ok(vec![want[0].then(|| g.iter().map(|v| -v).collect())]),
            Relu => {
                let (_, x) = inp(0);
                Ok(vec![want[0].then(|| {
                    g.iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect()
                })])
            }
            Softplus => {
                let (_, x) = inp(0);
                Ok(vec![want[0].then(|| {
                    g.iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| gv * stable_sigmoid(xv))
                        .collect()
                })])
            }
            Exp => Ok(vec![want[0].then(|| {
                g.iter().zip(out_data.iter()).map(|(gv, ov)| gv * ov).collect()
            })]),
            Log => {
                let (_, x) = inp(0);
                Ok(vec![want[0].then(|| {
                    g.iter().zip(x.iter()).map(|(gv, xv)| gv / xv).collect()
                })])
            }
            Sqrt => Ok(vec![want[0].then(|| {
                g.iter()
                    .zip(out_data.iter())
                    .map(|(gv, ov)| gv * 0.5 / ov)
                    .collect()
            })]),
            Mean => {
                let (ashape, _) = inp(0);
                let n = numel(ashape) as f64;
                Ok(vec![want[0].then(|| vec![g[0] / n; numel(ashape)])])
            }
            Sum => {
                let (ashape, _) = inp(0);
                Ok(vec![want[0].then(|| vec![g[0]; numel(ashape)])])
            }
            MeanAxis0 | SumAxis0 => {
                let (ashape, _) = inp(0);
                let (n, d) = (ashape[0], ashape[1]);
                let scale = if prim == MeanAxis0 { 1.0 / n as f64 } else { 1.0 };
                Ok(vec![want[0].then(|| {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] = g[j] * scale;
                        }
                    }
                    da
                })])
            }
            SqDist => {
                let (_, a) = inp(0);
                let (_, b) = inp(1);
                let gv = g[0];
                let da = want[0].then(|| {
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| 2.0 * (x - y) * gv)
                        .collect()
                });
                let db = want[1].then(|| {
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| 2.0 * (y - x) * gv)
                        .collect()
                });
                Ok(vec![da, db])
            }
            SoftmaxCrossEntropy => {
                let (zshape, z) = inp(0);
                let (_, t) = inp(1);
                let (n, c) = (zshape[0], zshape[1]);
                let gn = g[0] / n as f64;
                let (_, lse) = row_lse(z, n, c);
                let dz = want[0].then(|| {
                    let mut dz = vec![0.0; n * c];
                    for i in 0..n {
                        let tr: f64 = t[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            let s = (z[i * c + j] - lse[i]).exp();
                            dz[i * c + j] = gn * (s * tr - t[i * c + j]);
                        }
                    }
                    dz
                });
                let dt = want[1].then(|| {
                    let mut dt = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            dt[i * c + j] = gn * (lse[i] - z[i * c + j]);
                        }
                    }
                    dt
                });
                Ok(vec![dz, dt])
            }
        }
    }

    fn recorded_vjp(
        &mut self,
        prim: Primitive,
        node_id: usize,
        input_ids: &[NodeId],
        g: &Tensor,
        active: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        use Primitive::*;
        let want: Vec<bool> = input_ids.iter().map(|i| active[i.0]).collect();
        let node_shape = self.nodes[node_id].shape.clone();

        match prim {
            MatMul => {
                let a = self.handle(input_ids[0]);
                let b = self.handle(input_ids[1]);
                let da = if want[0] {
                    let bt = self.apply(Transpose, &[&b])?;
                    Some(self.apply(MatMul, &[g, &bt])?)
                } else {
                    None
                };
                let db = if want[1] {
                    let at = self.apply(Transpose, &[&a])?;
                    Some(self.apply(MatMul, &[&at, g])?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Transpose => Ok(vec![if want[0] {
                Some(self.apply(Transpose, &[g])?)
            } else {
                None
            }]),
            Reshape => {
                let in_shape = self.nodes[input_ids[0].0].shape.clone();
                Ok(vec![if want[0] {
                    Some(self.reshape(g, &in_shape)?)
                } else {
                    None
                }])
            }
            Add | Sub => {
                let mut out = Vec::with_capacity(2);
                for (k, is_lhs) in [(0usize, true), (1usize, false)] {
                    if !want[k] {
                        out.push(None);
                        continue;
                    }
                    let mut contrib = g.clone();
                    if prim == Sub && !is_lhs {
                        contrib = self.apply(Neg, &[&contrib])?;
                    }
                    let target = self.nodes[input_ids[k].0].shape.clone();
                    out.push(Some(self.reduce_recorded(&contrib, &node_shape, &target)?));
                }
                Ok(out)
            }
            Mul => {
                let a = self.handle(input_ids[0]);
                let b = self.handle(input_ids[1]);
                let da = if want[0] {
                    let t = self.apply(Mul, &[g, &b])?;
                    Some(self.reduce_recorded(&t, &node_shape, &a.shape.clone())?)
                } else {
                    None
                };
                let db = if want[1] {
                    let t = self.apply(Mul, &[g, &a])?;
                    Some(self.reduce_recorded(&t, &node_shape, &b.shape.clone())?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Div => {
                let a = self.handle(input_ids[0]);
                let b = self.handle(input_ids[1]);
                let da = if want[0] {
                    let t = self.apply(Div, &[g, &b])?;
                    Some(self.reduce_recorded(&t, &node_shape, &a.shape.clone())?)
                } else {
                    None
                };
                let db = if want[1] {
                    let ga = self.apply(Mul, &[g, &a])?;
                    let bb = self.apply(Mul, &[&b, &b])?;
                    let frac = self.apply(Div, &[&ga, &bb])?;
                    let neg = self.apply(Neg, &[&frac])?;
                    Some(self.reduce_recorded(&neg, &node_shape, &b.shape.clone())?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Neg => Ok(vec![if want[0] {
                Some(self.apply(Neg, &[g])?)
            } else {
                None
            }]),
            Relu => {
                if !want[0] {
                    return Ok(vec![None]);
                }
                // The relu derivative is piecewise constant, so a constant
                // mask is exact (and kills spurious higher-order terms).
                let x = self.handle(input_ids[0]);
                let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let mask = self.constant(&x.shape.clone(), mask)?;
                Ok(vec![Some(self.apply(Mul, &[g, &mask])?)])
            }
            Softplus => {
                if !want[0] {
                    return Ok(vec![None]);
                }
                // sigmoid(x) = exp(x - softplus(x)); the exponent is
                // always <= 0, so this stays finite for any x.
                let x = self.handle(input_ids[0]);
                let sp = self.apply(Softplus, &[&x])?;
                let diff = self.apply(Sub, &[&x, &sp])?;
                let sig = self.apply(Exp, &[&diff])?;
                Ok(vec![Some(self.apply(Mul, &[g, &sig])?)])
            }
            Exp => {
                let out = self.handle(NodeId(node_id));
                Ok(vec![if want[0] {
                    Some(self.apply(Mul, &[g, &out])?)
                } else {
                    None
                }])
            }
            Log => {
                let x = self.handle(input_ids[0]);
                Ok(vec![if want[0] {
                    Some(self.apply(Div, &[g, &x])?)
                } else {
                    None
                }])
            }
            Sqrt => {
                if !want[0] {
                    return Ok(vec![None]);
                }
                let out = self.handle(NodeId(node_id));
                let half = self.scalar(0.5);
                let gh = self.apply(Mul, &[g, &half])?;
                Ok(vec![Some(self.apply(Div, &[&gh, &out])?)])
            }
            Mean | Sum => {
                if !want[0] {
                    return Ok(vec![None]);
                }
                let in_shape = self.nodes[input_ids[0].0].shape.clone();
                let ones = self.ones(&in_shape);
                let seed = if prim == Mean {
                    let inv = self.scalar(1.0 / numel(&in_shape) as f64);
                    self.apply(Mul, &[g, &inv])?
                } else {
                    g.clone()
                };
                Ok(vec![Some(self.apply(Mul, &[&ones, &seed])?)])
            }
            MeanAxis0 | SumAxis0 => {
                if !want[0] {
                    return Ok(vec![None]);
                }
                let in_shape = self.nodes[input_ids[0].0].shape.clone();
                let ones = self.ones(&in_shape);
                let spread = self.apply(Mul, &[&ones, g])?;
                if prim == MeanAxis0 {
                    let inv = self.scalar(1.0 / in_shape[0] as f64);
                    Ok(vec![Some(self.apply(Mul, &[&spread, &inv])?)])
                } else {
                    Ok(vec![Some(spread)])
                }
            }
            SqDist => {
                let a = self.handle(input_ids[0]);
                let b = self.handle(input_ids[1]);
                let two = self.scalar(2.0);
                let g2 = self.apply(Mul, &[g, &two])?;
                let da = if want[0] {
                    let d = self.apply(Sub, &[&a, &b])?;
                    Some(self.apply(Mul, &[&d, &g2])?)
                } else {
                    None
                };
                let db = if want[1] {
                    let d = self.apply(Sub, &[&b, &a])?;
                    Some(self.apply(Mul, &[&d, &g2])?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            SoftmaxCrossEntropy => self.recorded_ce_vjp(input_ids, g, &want),
        }
    }

    /// Differentiable adjoint for the cross-entropy primitive.
    ///
    /// Uses the identity lse(z) = m + log(sum exp(z - m)) with m held as a
    /// constant per-row maximum; the identity holds exactly for any fixed m,
    /// so treating m as constant changes no derivative while keeping exp in
    /// range. Row quantities are spread back to (n, c) by multiplying with a
    /// constant ones matrix.
    fn recorded_ce_vjp(
        &mut self,
        input_ids: &[NodeId],
        g: &Tensor,
        want: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        use Primitive::*;
        let z = self.handle(input_ids[0]);
        let t = self.handle(input_ids[1]);
        let (n, c) = (z.shape[0], z.shape[1]);

        let mut maxes = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            for j in 0..c {
                maxes[i] = maxes[i].max(z.data[i * c + j]);
            }
        }
        let ones_1c = self.ones(&[1, c]);
        let ones_c1 = self.ones(&[c, 1]);
        let m = self.constant(&[n], maxes)?;
        let expand = |tape: &mut Tape, v: &Tensor| -> Result<Tensor> {
            let col = tape.reshape(v, &[n, 1])?;
            tape.apply(MatMul, &[&col, &ones_1c])
        };
        let rowsum = |tape: &mut Tape, mat: &Tensor| -> Result<Tensor> {
            let col = tape.apply(MatMul, &[mat, &ones_c1])?;
            tape.reshape(&col, &[n])
        };

        let m_e = expand(self, &m)?;
        let shifted = self.apply(Sub, &[&z, &m_e])?;
        let ze = self.apply(Exp, &[&shifted])?;
        let rs = rowsum(self, &ze)?;
        let log_rs = self.apply(Log, &[&rs])?;
        let lse = self.apply(Add, &[&m, &log_rs])?;
        let lse_e = expand(self, &lse)?;

        let inv_n = self.scalar(1.0 / n as f64);
        let gn = self.apply(Mul, &[g, &inv_n])?;

        let dz = if want[0] {
            let zl = self.apply(Sub, &[&z, &lse_e])?;
            let s = self.apply(Exp, &[&zl])?;
            let tr = rowsum(self, &t)?;
            let tr_e = expand(self, &tr)?;
            let st = self.apply(Mul, &[&s, &tr_e])?;
            let diff = self.apply(Sub, &[&st, &t])?;
            Some(self.apply(Mul, &[&diff, &gn])?)
        } else {
            None
        };
        let dt = if want[1] {
            let diff = self.apply(Sub, &[&lse_e, &z])?;
            Some(self.apply(Mul, &[&diff, &gn])?)
        } else {
            None
        };
        Ok(vec![dz, dt])
    }

    /// Recorded counterpart of [`reduce_to_operand`]: fold an out-shaped
    /// tensor to a broadcast operand's shape.
    fn reduce_recorded(
        &mut self,
        t: &Tensor,
        out_shape: &[usize],
        target: &[usize],
    ) -> Result<Tensor> {
        if t.shape() == target {
            return Ok(t.clone());
        }
        if numel(target) == 1 {
            let s = self.apply(Primitive::Sum, &[t])?;
            return if target.is_empty() {
                Ok(s)
            } else {
                self.reshape(&s, target)
            };
        }
        // remaining case: target (d,) against out (n, d)
        debug_assert_eq!(out_shape.len(), 2);
        debug_assert_eq!(numel(target), out_shape[1]);
        self.apply(Primitive::SumAxis0, &[t])
    }

    /// Record a primitive application. Alias of [`Tape::apply`] under the
    /// operation's formal name.
    pub fn apply_primitive(&mut self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply(prim, inputs)
    }

    /// Draw eps ~ N(0, 1) as a constant and return mu + sigma * eps, keeping
    /// mu and sigma differentiable.
    pub fn gaussian_reparam_sample(
        &mut self,
        mu: &Tensor,
        sigma: &Tensor,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if mu.shape() != sigma.shape() {
            return Err(shape_mismatch(Primitive::Add, mu.shape(), sigma.shape()));
        }
        if let Some(&bad) = sigma.data().iter().find(|v| **v <= 0.0) {
            return Err(UdgError::InvalidValue(format!(
                "gaussian_reparam_sample requires sigma > 0 elementwise, found {bad}"
            )));
        }
        let eps = rng.normal_vec(mu.numel());
        let eps = self.constant(&mu.shape.clone(), eps)?;
        let scaled = self.apply(Primitive::Mul, &[sigma, &eps])?;
        self.apply(Primitive::Add, &[mu, &scaled])
    }
}
