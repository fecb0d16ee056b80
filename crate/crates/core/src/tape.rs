//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use dico_core::{Shape, Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 3), 2.0), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0, 4.0]);
//! ```

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, Activation, Conv2dSpec, ResampleDirection};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Gap {
        x: Var,
    },
    Resample {
        x: Var,
        r: usize,
        dir: ResampleDirection,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    /// Scalar-valued function whose local gradient was computed in forward.
    ScalarFn {
        x: Var,
        local_grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A recorded convolution, as seen by the cost enumerator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvRecord {
    pub node: usize,
    /// The weight operand, for mapping back to a parameter.
    pub weight_var: Var,
    pub input: Shape,
    pub weight: Shape,
    pub output: Shape,
    pub spec: Conv2dSpec,
    pub has_bias: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter. Gradients are collected for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Like [`Tape::leaf`] but shares the caller's storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backward`].
    /// `None` when the leaf is not on any path to the root.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Every convolution executed so far, in order.
    pub fn conv_records(&self) -> Vec<ConvRecord> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Conv2d { x, w, b, spec } => Some(ConvRecord {
                    node: i,
                    weight_var: w,
                    input: self.shape(x),
                    weight: self.shape(w),
                    output: node.value.shape(),
                    spec,
                    has_bias: b.is_some(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = kernels::activation(self.value(x), kind);
        self.push(out, Op::Act { x, kind }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::Gap { x }, &[x]))
    }

    pub fn pixel_resample(&mut self, x: Var, r: usize, dir: ResampleDirection) -> Result<Var> {
        let out = kernels::pixel_resample(self.value(x), r, dir)?;
        Ok(self.push(out, Op::Resample { x, r, dir }, &[x]))
    }

    pub fn channel_layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (out, inv_std) = kernels::channel_layer_norm(self.value(x), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// `x·(1+γ) + β` with per-sample, per-channel `γ`, `β` of shape `(n, c, 1, 1)`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != Shape::vector(xs.n, xs.c) {
                return dim_err(format!(
                    "modulate: {name} has shape {}, expected ({}, {}, 1, 1)",
                    self.shape(v),
                    xs.n,
                    xs.c
                ));
            }
        }
        let hw = xs.spatial();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = Tensor::zeros(xs);
        for ((o, xi), (g, b)) in out
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(xv.data().chunks_exact(hw))
            .zip(gv.data().iter().zip(bv.data()))
        {
            let scale = T::one() + *g;
            for (o, &xi) in o.iter_mut().zip(xi) {
                *o = xi * scale + *b;
            }
        }
        Ok(self.push(out, Op::Modulate { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Multiplies each channel plane by a per-sample factor from `s` of shape `(n, c, 1, 1)`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(s) != Shape::vector(xs.n, xs.c) {
            return dim_err(format!(
                "channel_scale: factor shape {} does not match {xs}",
                self.shape(s)
            ));
        }
        let hw = xs.spatial();
        let mut out = Tensor::zeros(xs);
        for ((o, xi), &k) in out
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(self.value(x).data().chunks_exact(hw))
            .zip(self.value(s).data())
        {
            for (o, &xi) in o.iter_mut().zip(xi) {
                *o = xi * k;
            }
        }
        Ok(self.push(out, Op::ChannelScale { x, s }, &[x, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale { x, k }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    /// Channel concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return dim_err(format!("concat_channels: {sa} vs {sb}"));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).sample(n));
            data.extend_from_slice(self.value(b).sample(n));
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c {
            return dim_err(format!("slice_channels {start}..{} of {s}", start + len));
        }
        let hw = s.spatial();
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            data.extend_from_slice(&self.value(x).sample(n)[start * hw..(start + len) * hw]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    /// Row lookup into a `(rows, dim, 1, 1)` table; returns `(len(rows), dim, 1, 1)`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.h != 1 || ts.w != 1 {
            return dim_err(format!("gather_rows: table must be (rows, dim, 1, 1), got {ts}"));
        }
        let mut data = Vec::with_capacity(rows.len() * ts.c);
        for &r in rows {
            if r >= ts.n {
                return Err(Error::Usage(format!("row index {r} out of range for {} rows", ts.n)));
            }
            data.extend_from_slice(self.value(table).sample(r));
        }
        let out = Tensor::from_vec(Shape::vector(rows.len(), ts.c), data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let diff = self.value(pred).sub(target)?;
        let value = diff.sq_norm() / T::of_usize(diff.numel().max(1));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Records a fused scalar function of `x` evaluated by the caller, along
    /// with its gradient `d value / d x`.
    pub fn scalar_fn(&mut self, x: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        local_grad.expect_shape(self.shape(x), "scalar_fn gradient")?;
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, local_grad }, &[x]))
    }

    /// Back-propagates from a one-element `root`, leaving gradients on every
    /// leaf created with `requires_grad`. Gradients from an earlier call are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &dy)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of node `i`'s inputs given its output gradient `dy`.
    fn local_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let need = (
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.map(|b| self.shape(b)),
                    *spec,
                    dy,
                    need,
                )?;
                out.extend(grads.dx.map(|g| (*x, g)));
                out.extend(grads.dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, grads.db) {
                    out.push((*b, g));
                }
            }
            Op::Act { x, kind } => {
                let g = self.value(*x).zip_map(dy, |xv, d| d * kind.derivative(xv))?;
                out.push((*x, g));
            }
            Op::Gap { x } => {
                out.push((*x, kernels::global_avg_pool_backward(self.shape(*x), dy)));
            }
            Op::Resample { x, r, dir } => {
                let inverse = match dir {
                    ResampleDirection::Shuffle => ResampleDirection::Unshuffle,
                    ResampleDirection::Unshuffle => ResampleDirection::Shuffle,
                };
                out.push((*x, kernels::pixel_resample(dy, *r, inverse)?));
            }
            Op::LayerNorm { x, inv_std } => {
                out.push((
                    *x,
                    kernels::channel_layer_norm_backward(&node.value, inv_std, dy),
                ));
            }
            Op::Modulate { x, gamma, beta } => {
                let xs = self.shape(*x);
                let hw = xs.spatial();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    for ((o, d), &g) in dx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(dy.data().chunks_exact(hw))
                        .zip(gv.data())
                    {
                        let k = T::one() + g;
                        for (o, &d) in o.iter_mut().zip(d) {
                            *o = d * k;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    let data = dy
                        .data()
                        .chunks_exact(hw)
                        .zip(xv.data().chunks_exact(hw))
                        .map(|(d, x)| d.iter().zip(x).fold(T::zero(), |a, (&d, &x)| a + d * x))
                        .collect();
                    out.push((*gamma, Tensor::from_vec(self.shape(*gamma), data)?));
                }
                if self.wants(*beta) {
                    let data = dy
                        .data()
                        .chunks_exact(hw)
                        .map(|d| d.iter().fold(T::zero(), |a, &d| a + d))
                        .collect();
                    out.push((*beta, Tensor::from_vec(self.shape(*beta), data)?));
                }
            }
            Op::ChannelScale { x, s } => {
                let xs = self.shape(*x);
                let hw = xs.spatial();
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    for ((o, d), &k) in dx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(dy.data().chunks_exact(hw))
                        .zip(self.value(*s).data())
                    {
                        for (o, &d) in o.iter_mut().zip(d) {
                            *o = d * k;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*s) {
                    let data = dy
                        .data()
                        .chunks_exact(hw)
                        .zip(self.value(*x).data().chunks_exact(hw))
                        .map(|(d, x)| d.iter().zip(x).fold(T::zero(), |a, (&d, &x)| a + d * x))
                        .collect();
                    out.push((*s, Tensor::from_vec(self.shape(*s), data)?));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul { a, b } => {
                out.push((*a, dy.zip_map(self.value(*b), |d, v| d * v)?));
                out.push((*b, dy.zip_map(self.value(*a), |d, v| d * v)?));
            }
            Op::Scale { x, k } => out.push((*x, dy.scale(*k))),
            Op::Sum { x } => {
                let d = dy.item()?;
                out.push((*x, Tensor::full(self.shape(*x), d)));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for n in 0..sa.n {
                    let (l, r) = dy.sample(n).split_at(sa.sample_len());
                    ga.extend_from_slice(l);
                    gb.extend_from_slice(r);
                }
                out.push((*a, Tensor::from_vec(sa, ga)?));
                out.push((*b, Tensor::from_vec(sb, gb)?));
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let hw = xs.spatial();
                let len = dy.shape().c;
                let mut g = Tensor::zeros(xs);
                for n in 0..xs.n {
                    g.sample_mut(n)[start * hw..(start + len) * hw].copy_from_slice(dy.sample(n));
                }
                out.push((*x, g));
            }
            Op::Gather { table, rows } => {
                let mut g = Tensor::zeros(self.shape(*table));
                for (i, &r) in rows.iter().enumerate() {
                    for (acc, &d) in g.sample_mut(r).iter_mut().zip(dy.sample(i)) {
                        *acc += d;
                    }
                }
                out.push((*table, g));
            }
            Op::Mse { pred, target } => {
                let k = dy.item()? * T::of(2.0) / T::of_usize(target.numel().max(1));
                out.push((*pred, self.value(*pred).zip_map(target, |p, t| (p - t) * k)?));
            }
            Op::ScalarFn { x, local_grad } => {
                out.push((*x, local_grad.scale(dy.item()?)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap(),
            true,
        );
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn off_path_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::scalar(), 3.0), true);
        let unused = tape.leaf(Tensor::full(Shape::scalar(), 1.0), true);
        let _dead = tape.scale(unused, 2.0);
        let y = tape.scale(x, 5.0);
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::scalar(), 2.0), true);
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let c = tape.add(b, x).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let t = tape.leaf(Tensor::zeros(Shape::new(3, 4, 1, 1)), true);
        assert!(matches!(tape.gather_rows(t, &[0, 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn modulate_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 2, 2), 2.0));
        let g = tape.constant(Tensor::full(Shape::vector(1, 2), 0.5));
        let b = tape.constant(Tensor::full(Shape::vector(1, 2), 1.0));
        let y = tape.modulate(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));

        let bad = tape.constant(Tensor::full(Shape::vector(1, 3), 1.0));
        assert!(matches!(tape.modulate(x, bad, b), Err(Error::Dimension(_))));
    }
}
