use std::collections::HashMap;

use crate::graph::{Graph, NodeId, Op};
use crate::{Error, Result, Tensor, LAYER_NORM_EPS};

/// Values for the bound leaves of a graph, keyed by node id.
#[derive(Default, Clone)]
pub struct Bindings {
    map: HashMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn set(&mut self, id: NodeId, value: Tensor) -> &mut Self {
        self.map.insert(id, value);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Removes and returns the gradient, letting update loops avoid a copy.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A completed forward pass: every node's value, cached in graph order.
///
/// Reverse mode needs exactly this cache, so gradient computation is a method
/// here rather than on [`Graph`] — "backward before forward" cannot be
/// expressed.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl Graph {
    /// Evaluates every node in order. All intermediates are retained for
    /// [`Evaluation::backward`].
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let id = NodeId(idx);
            let value = match &node.op {
                Op::Leaf { .. } => {
                    let bound = bindings
                        .get(id)
                        .ok_or_else(|| Error::UnboundLeaf {
                            node: self.label(id),
                        })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: self.label(id),
                            detail: format!(
                                "bound value has shape {:?}, declared {:?}",
                                bound.shape(),
                                node.shape
                            ),
                        });
                    }
                    bound.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::MatMul { a, b } => matmul_nn(&values[a.0], &values[b.0]),
                Op::Add { a, b } => add_broadcast(&values[a.0], &values[b.0]),
                Op::Mul { a, b } => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    map2(av, bv, |x, y| x * y)
                }
                Op::Relu { x } => map1(&values[x.0], |v| if v > 0.0 { v } else { 0.0 }),
                Op::Tanh { x } => map1(&values[x.0], f64::tanh),
                Op::Exp { x } => map1(&values[x.0], f64::exp),
                Op::Log { x } => map1(&values[x.0], f64::ln),
                Op::Sqrt { x } => map1(&values[x.0], f64::sqrt),
                Op::Softmax { x } => softmax_last(&values[x.0]),
                Op::LayerNorm { x, scale, shift } => {
                    layer_norm(&values[x.0], &values[scale.0], &values[shift.0])
                }
                Op::Concat { axis, parts } => {
                    let refs: Vec<&Tensor> = parts.iter().map(|p| &values[p.0]).collect();
                    Tensor::concat(&refs, *axis)?
                }
                Op::Mean { x, axis } => mean_axis(&values[x.0], *axis),
                Op::Reshape { x } => {
                    Tensor::new(&node.shape, values[x.0].values().to_vec())?
                }
                Op::Transpose { x } => transpose2(&values[x.0]),
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => slice_axis(&values[x.0], *axis, *start, *len),
                Op::Scale { x, factor } => map1(&values[x.0], |v| v * factor),
                Op::CrossEntropyOneHot { probs, target } => {
                    cross_entropy(&values[probs.0], &values[target.0])
                }
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: self.label(id),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }

    /// Convenience: forward pass returning only the root value.
    pub fn eval(&self, bindings: &Bindings) -> Result<Tensor> {
        Ok(self.forward(bindings)?.root().clone())
    }
}

impl Evaluation<'_> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Value of the graph's root (last) node.
    pub fn root(&self) -> &Tensor {
        self.values.last().expect("forward on empty graph")
    }

    /// Gradient of the scalar at `root` with respect to every trainable leaf.
    ///
    /// One reverse sweep: each node is visited exactly once, in reverse
    /// declaration order. Subgraphs that cannot reach a trainable leaf are
    /// skipped — their gradients are never observable.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let g = self.graph;
        if self.values[root.0].numel() != 1 {
            return Err(Error::NonScalarRoot {
                node: g.label(root),
                shape: self.values[root.0].shape().to_vec(),
            });
        }

        // needs[i]: node i lies on a path from a trainable leaf to anywhere.
        let mut needs = vec![false; g.nodes.len()];
        for (idx, node) in g.nodes.iter().enumerate() {
            needs[idx] = match &node.op {
                Op::Leaf { trainable } => *trainable,
                Op::Constant(_) => false,
                op => op_inputs(op).iter().any(|p| needs[p.0]),
            };
        }

        let mut out = Gradients::default();
        if !needs[root.0] {
            return Ok(out); // constant root: nothing to differentiate
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.values[root.0].shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &g.nodes[idx];
            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        out.map.insert(NodeId(idx), grad);
                    }
                }
                Op::Constant(_) => {}
                Op::MatMul { a, b } => {
                    if needs[a.0] {
                        accum(&mut grads[a.0], matmul_nt(&grad, &self.values[b.0]));
                    }
                    if needs[b.0] {
                        accum(&mut grads[b.0], matmul_tn(&self.values[a.0], &grad));
                    }
                }
                Op::Add { a, b } => {
                    for &side in &[a, b] {
                        if !needs[side.0] {
                            continue;
                        }
                        let want = self.values[side.0].shape();
                        if want == grad.shape() {
                            accum(&mut grads[side.0], grad.clone());
                        } else {
                            accum(&mut grads[side.0], fold_to_suffix(&grad, want));
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if needs[a.0] {
                        accum(&mut grads[a.0], map2(&grad, &self.values[b.0], |g, v| g * v));
                    }
                    if needs[b.0] {
                        accum(&mut grads[b.0], map2(&grad, &self.values[a.0], |g, v| g * v));
                    }
                }
                Op::Relu { x } => {
                    if needs[x.0] {
                        let dx =
                            map2(&grad, &self.values[x.0], |g, v| if v > 0.0 { g } else { 0.0 });
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::Tanh { x } => {
                    if needs[x.0] {
                        let dx = map2(&grad, &self.values[idx], |g, y| g * (1.0 - y * y));
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::Exp { x } => {
                    if needs[x.0] {
                        let dx = map2(&grad, &self.values[idx], |g, y| g * y);
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::Log { x } => {
                    if needs[x.0] {
                        let dx = map2(&grad, &self.values[x.0], |g, v| g / v);
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::Sqrt { x } => {
                    if needs[x.0] {
                        let dx = map2(&grad, &self.values[idx], |g, y| g / (2.0 * y));
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::Softmax { x } => {
                    if needs[x.0] {
                        accum(&mut grads[x.0], softmax_backward(&grad, &self.values[idx]));
                    }
                }
                Op::LayerNorm { x, scale, shift } => {
                    let (dx, dscale, dshift) = layer_norm_backward(
                        &grad,
                        &self.values[x.0],
                        &self.values[scale.0],
                        needs[x.0],
                        needs[scale.0],
                        needs[shift.0],
                    );
                    if let Some(dx) = dx {
                        accum(&mut grads[x.0], dx);
                    }
                    if let Some(d) = dscale {
                        accum(&mut grads[scale.0], d);
                    }
                    if let Some(d) = dshift {
                        accum(&mut grads[shift.0], d);
                    }
                }
                Op::Concat { axis, parts } => {
                    let sizes: Vec<usize> = parts
                        .iter()
                        .map(|p| self.values[p.0].shape()[*axis])
                        .collect();
                    let pieces = grad.split(*axis, &sizes)?;
                    for (part, piece) in parts.iter().zip(pieces) {
                        if needs[part.0] {
                            accum(&mut grads[part.0], piece);
                        }
                    }
                }
                Op::Mean { x, axis } => {
                    if needs[x.0] {
                        accum(
                            &mut grads[x.0],
                            mean_backward(&grad, self.values[x.0].shape(), *axis),
                        );
                    }
                }
                Op::Reshape { x } => {
                    if needs[x.0] {
                        let back =
                            Tensor::new(self.values[x.0].shape(), grad.values().to_vec())?;
                        accum(&mut grads[x.0], back);
                    }
                }
                Op::Transpose { x } => {
                    if needs[x.0] {
                        accum(&mut grads[x.0], transpose2(&grad));
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len: _,
                } => {
                    if needs[x.0] {
                        accum(
                            &mut grads[x.0],
                            slice_backward(&grad, self.values[x.0].shape(), *axis, *start),
                        );
                    }
                }
                Op::Scale { x, factor } => {
                    if needs[x.0] {
                        accum(&mut grads[x.0], map1(&grad, |g| g * factor));
                    }
                }
                Op::CrossEntropyOneHot { probs, target } => {
                    let gscalar = grad.item();
                    let (pv, tv) = (&self.values[probs.0], &self.values[target.0]);
                    if needs[probs.0] {
                        let dp = map2(tv, pv, |t, p| {
                            if t == 0.0 {
                                0.0
                            } else {
                                -gscalar * t / p
                            }
                        });
                        accum(&mut grads[probs.0], dp);
                    }
                    if needs[target.0] {
                        let dt = map1(pv, |p| -gscalar * p.ln());
                        accum(&mut grads[target.0], dt);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accum(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        None => *slot = Some(contrib),
        Some(t) => {
            for (dst, src) in t.values_mut().iter_mut().zip(contrib.values()) {
                *dst += src;
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
        Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Relu { x }
        | Op::Tanh { x }
        | Op::Exp { x }
        | Op::Log { x }
        | Op::Sqrt { x }
        | Op::Softmax { x }
        | Op::Mean { x, .. }
        | Op::Reshape { x }
        | Op::Transpose { x }
        | Op::Slice { x, .. }
        | Op::Scale { x, .. } => vec![*x],
        Op::LayerNorm { x, scale, shift } => vec![*x, *scale, *shift],
        Op::Concat { parts, .. } => parts.clone(),
        Op::CrossEntropyOneHot { probs, target } => vec![*probs, *target],
    }
}

// ── Forward kernels ─────────────────────────────────────────────────────────

fn map1(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let values = x.values().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape(), values).expect("shape preserved")
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), values).expect("shape preserved")
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &aval) in arow.iter().enumerate() {
            let brow = &bv[l * n..(l + 1) * n];
            for (o, &bval) in orow.iter_mut().zip(brow) {
                *o += aval * bval;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

/// `g · bᵀ` for g:[m,n], b:[k,n] → [m,k].
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let (gv, bv) = (g.values(), b.values());
    let mut out = vec![0.0f64; m * k];
    for i in 0..m {
        let grow = &gv[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bv[j * n..(j + 1) * n];
            *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(&[m, k], out).expect("matmul shape")
}

/// `aᵀ · g` for a:[m,k], g:[m,n] → [k,n].
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let (av, gv) = (a.values(), g.values());
    let mut out = vec![0.0f64; k * n];
    for l in 0..m {
        let arow = &av[l * k..(l + 1) * k];
        let grow = &gv[l * n..(l + 1) * n];
        for (i, &aval) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &gval) in orow.iter_mut().zip(grow) {
                *o += aval * gval;
            }
        }
    }
    Tensor::new(&[k, n], out).expect("matmul shape")
}

fn add_broadcast(a: &Tensor, b: &Tensor) -> Tensor {
    if a.shape() == b.shape() {
        return map2(a, b, |x, y| x + y);
    }
    let (big, small) = if a.rank() >= b.rank() { (a, b) } else { (b, a) };
    let n = small.numel();
    let values = big
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + small.values()[i % n])
        .collect();
    Tensor::new(big.shape(), values).expect("broadcast shape")
}

/// Sums `grad` over its leading axes until it matches `want` (the broadcast
/// adjoint). `want` may be empty (rank-0).
fn fold_to_suffix(grad: &Tensor, want: &[usize]) -> Tensor {
    let n: usize = want.iter().product();
    let mut out = vec![0.0f64; n];
    for (i, &v) in grad.values().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(want, out).expect("suffix shape")
}

fn softmax_last(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("softmax rank ≥ 1");
    let mut values = x.values().to_vec();
    for row in values.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape(), values).expect("shape preserved")
}

fn softmax_backward(grad: &Tensor, y: &Tensor) -> Tensor {
    let d = *y.shape().last().expect("softmax rank ≥ 1");
    let mut out = vec![0.0f64; y.numel()];
    for (rg, (ry, ro)) in grad
        .values()
        .chunks(d)
        .zip(y.values().chunks(d).zip(out.chunks_mut(d)))
    {
        let dot: f64 = rg.iter().zip(ry).map(|(&g, &p)| g * p).sum();
        for ((o, &g), &p) in ro.iter_mut().zip(rg).zip(ry) {
            *o = p * (g - dot);
        }
    }
    Tensor::new(y.shape(), out).expect("shape preserved")
}

fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("layer_norm rank ≥ 1");
    let (sv, bv) = (scale.values(), shift.values());
    let mut values = x.values().to_vec();
    for row in values.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = sv[j] * ((*v - mean) * inv) + bv[j];
        }
    }
    Tensor::new(x.shape(), values).expect("shape preserved")
}

#[allow(clippy::type_complexity)]
fn layer_norm_backward(
    grad: &Tensor,
    x: &Tensor,
    scale: &Tensor,
    need_x: bool,
    need_scale: bool,
    need_shift: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let d = *x.shape().last().expect("layer_norm rank ≥ 1");
    let sv = scale.values();
    let mut dx = if need_x {
        Some(vec![0.0f64; x.numel()])
    } else {
        None
    };
    let mut dscale = if need_scale { Some(vec![0.0f64; d]) } else { None };
    let mut dshift = if need_shift { Some(vec![0.0f64; d]) } else { None };

    for (row_idx, (rg, rx)) in grad.values().chunks(d).zip(x.values().chunks(d)).enumerate() {
        let mean = rx.iter().sum::<f64>() / d as f64;
        let var = rx.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        // xhat_j = (x_j - mean) * inv;  h_j = grad_j * scale_j
        let mut h_mean = 0.0;
        let mut hx_mean = 0.0;
        for j in 0..d {
            let xhat = (rx[j] - mean) * inv;
            let h = rg[j] * sv[j];
            h_mean += h;
            hx_mean += h * xhat;
            if let Some(ds) = dscale.as_mut() {
                ds[j] += rg[j] * xhat;
            }
            if let Some(db) = dshift.as_mut() {
                db[j] += rg[j];
            }
        }
        h_mean /= d as f64;
        hx_mean /= d as f64;
        if let Some(dx) = dx.as_mut() {
            let out_row = &mut dx[row_idx * d..(row_idx + 1) * d];
            for (j, o) in out_row.iter_mut().enumerate() {
                let xhat = (rx[j] - mean) * inv;
                let h = rg[j] * sv[j];
                *o = inv * (h - h_mean - xhat * hx_mean);
            }
        }
    }
    (
        dx.map(|v| Tensor::new(x.shape(), v).expect("shape preserved")),
        dscale.map(|v| Tensor::new(&[d], v).expect("scale shape")),
        dshift.map(|v| Tensor::new(&[d], v).expect("shift shape")),
    )
}

fn mean_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f64; outer * inner];
    let xv = x.values();
    for b in 0..outer {
        for a in 0..extent {
            let src = (b * extent + a) * inner;
            let dst = b * inner;
            for i in 0..inner {
                out[dst + i] += xv[src + i];
            }
        }
    }
    let scale = 1.0 / extent as f64;
    for v in &mut out {
        *v *= scale;
    }
    let mut new_shape = shape.to_vec();
    new_shape.remove(axis);
    Tensor::new(&new_shape, out).expect("mean shape")
}

fn mean_backward(grad: &Tensor, x_shape: &[usize], axis: usize) -> Tensor {
    let extent = x_shape[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let scale = 1.0 / extent as f64;
    let gv = grad.values();
    let mut out = vec![0.0f64; outer * extent * inner];
    for b in 0..outer {
        for a in 0..extent {
            let dst = (b * extent + a) * inner;
            let src = b * inner;
            for i in 0..inner {
                out[dst + i] = gv[src + i] * scale;
            }
        }
    }
    Tensor::new(x_shape, out).expect("mean backward shape")
}

fn transpose2(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let xv = x.values();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xv[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose shape")
}

fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let row = shape[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for b in 0..outer {
        let src = b * row + start * inner;
        out.extend_from_slice(&x.values()[src..src + len * inner]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    Tensor::new(&new_shape, out).expect("slice shape")
}

fn slice_backward(grad: &Tensor, x_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let len = grad.shape()[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let row = x_shape[axis] * inner;
    let mut out = vec![0.0f64; x_shape.iter().product()];
    for b in 0..outer {
        let dst = b * row + start * inner;
        let src = b * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad.values()[src..src + len * inner]);
    }
    Tensor::new(x_shape, out).expect("slice backward shape")
}

fn cross_entropy(probs: &Tensor, target: &Tensor) -> Tensor {
    let mut total = 0.0;
    for (&p, &t) in probs.values().iter().zip(target.values()) {
        if t != 0.0 {
            total -= t * p.ln();
        }
    }
    Tensor::scalar(total)
}
