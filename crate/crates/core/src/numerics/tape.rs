//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates gradients into leaves created with
//! [`Tape::param`]. Tapes are single-threaded and meant to be thrown away
//! after each step; nothing is reused between forward passes.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Square(usize),
    Abs(usize),
    SoftmaxLast(usize),
    LayerNormLast { x: usize, rstd: Vec<T> },
    Sum(usize),
    Mean(usize),
    MeanLast(usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    PrependToken { x: usize, token: usize },
    SelectToken { x: usize, index: usize },
    SliceTokens { x: usize, start: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    leaf_grad: Option<Vec<T>>,
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            leaf_grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                index,
                shape: value.shape().to_vec(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            leaf_grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Accumulated gradient of a leaf. Leaves that require gradients but
    /// were never reached report zeros; constants report `None`.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape();
        Some(match &node.leaf_grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Reset accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.leaf_grad = None;
        }
    }

    /// Back-propagate from a single-element `loss`. Leaf gradients add onto
    /// whatever previous calls accumulated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_updates: Vec<(usize, Vec<T>)> = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let val = |p: usize| -> &Tensor<T> { &nodes[p].value };
            let req = |p: usize| nodes[p].requires_grad;
            match &node.op {
                Op::Leaf => leaf_updates.push((id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let k = bv.shape()[0];
                    let m = bv.shape()[1];
                    let n = av.numel() / k;
                    if req(*a) {
                        let mut ga = vec![T::zero(); n * k];
                        gemm_nt(&g, bv.data(), &mut ga, n, m, k);
                        accumulate(&mut grads, *a, ga);
                    }
                    if req(*b) {
                        let mut gb = vec![T::zero(); k * m];
                        gemm_tn(av.data(), &g, &mut gb, k, n, m);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let m = out.shape()[2];
                    if req(*a) {
                        let mut ga = vec![T::zero(); bs * n * k];
                        for i in 0..bs {
                            let gi = &g[i * n * m..(i + 1) * n * m];
                            let bi = &bv.data()[i * k * m..(i + 1) * k * m];
                            let dst = &mut ga[i * n * k..(i + 1) * n * k];
                            if *trans_b {
                                gemm(gi, bi, dst, n, m, k);
                            } else {
                                gemm_nt(gi, bi, dst, n, m, k);
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if req(*b) {
                        let mut gb = vec![T::zero(); bs * k * m];
                        for i in 0..bs {
                            let gi = &g[i * n * m..(i + 1) * n * m];
                            let ai = &av.data()[i * n * k..(i + 1) * n * k];
                            let dst = &mut gb[i * k * m..(i + 1) * k * m];
                            if *trans_b {
                                gemm_tn(gi, ai, dst, m, n, k);
                            } else {
                                gemm_tn(ai, gi, dst, k, n, m);
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if req(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if req(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if req(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if req(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if req(*a) {
                        let ga = g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                        accumulate(&mut grads, *a, ga);
                    }
                    if req(*b) {
                        let gb = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if req(*b) {
                        let inner = val(*b).numel();
                        accumulate(&mut grads, *b, reduce_rows(&g, inner));
                    }
                    if req(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulBroadcast(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let inner = bv.numel();
                    if req(*b) {
                        let prod: Vec<T> = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                        accumulate(&mut grads, *b, reduce_rows(&prod, inner));
                    }
                    if req(*a) {
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * bv.data()[i % inner])
                            .collect();
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.iter().map(|&v| v * s).collect());
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let ga = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| g * T::from_f64_lossy(gelu_grad(x.as_f64())))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = val(*a);
                    let two = T::one() + T::one();
                    let ga = g.iter().zip(x.data()).map(|(&g, &x)| g * two * x).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let x = val(*a);
                    let ga = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxLast(a) => {
                    let d = *out.shape().last().unwrap_or(&1);
                    let y = out.data();
                    let mut ga = vec![T::zero(); y.len()];
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let s: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for c in 0..d {
                            ga[r * d + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormLast { x, rstd } => {
                    let d = *out.shape().last().unwrap_or(&1);
                    let y = out.data();
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let mg: T = gr.iter().copied().sum::<T>() / dn;
                        let mgy: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / dn;
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    let v = g[0] / T::from_usize(n).unwrap();
                    accumulate(&mut grads, *a, vec![v; n]);
                }
                Op::MeanLast(a) => {
                    let x = val(*a);
                    let d = *x.shape().last().unwrap_or(&1);
                    let inv = T::one() / T::from_usize(d).unwrap();
                    let ga = (0..x.numel()).map(|i| g[i / d] * inv).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let gx = permute_data(&g, out.shape(), &inverse);
                    accumulate(&mut grads, *x, gx);
                }
                Op::PrependToken { x, token } => {
                    let s = out.shape();
                    let (n, t, d) = (s[0], s[1], s[2]);
                    if req(*token) {
                        let mut gt = vec![T::zero(); d];
                        for i in 0..n {
                            for c in 0..d {
                                gt[c] = gt[c] + g[i * t * d + c];
                            }
                        }
                        accumulate(&mut grads, *token, gt);
                    }
                    if req(*x) {
                        let mut gx = Vec::with_capacity(n * (t - 1) * d);
                        for i in 0..n {
                            gx.extend_from_slice(&g[i * t * d + d..(i + 1) * t * d]);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SelectToken { x, index } => {
                    let s = val(*x).shape();
                    let (n, t, d) = (s[0], s[1], s[2]);
                    let mut gx = vec![T::zero(); n * t * d];
                    for i in 0..n {
                        gx[(i * t + index) * d..(i * t + index + 1) * d]
                            .copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceTokens { x, start } => {
                    let s = val(*x).shape();
                    let (n, t, d) = (s[0], s[1], s[2]);
                    let kept = t - start;
                    let mut gx = vec![T::zero(); n * t * d];
                    for i in 0..n {
                        gx[(i * t + start) * d..(i + 1) * t * d]
                            .copy_from_slice(&g[i * kept * d..(i + 1) * kept * d]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / T::from_usize(n).unwrap();
                    let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * c + y] = gl[i * c + y] - scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            let slot = &mut nodes[id].leaf_grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
        slot @ None => *slot = Some(g),
    }
}

/// Sum `rows` consecutive blocks of length `inner` into one block.
fn reduce_rows<T: Scalar>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in g.chunks_exact(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    loop {
        for c in 0..inner_n {
            out.push(data[off + c * inner_s]);
        }
        // advance every axis except the innermost
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            core::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        let v = self.value().map(f);
        self.tape.push(name, v, op(self.id), &[self.id])
    }

    /// `[..., k] · [k, m] -> [..., m]`; leading axes are treated as rows.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (k, m) = (sb[0], sb[1]);
        let n = a.numel() / k;
        let mut out = vec![T::zero(); n * m];
        gemm(a.data(), b.data(), &mut out, n, k, m);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(&shape, out)?;
        self.tape.push("matmul", t, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    fn batch_matmul(&self, rhs: &Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err("batch_matmul", sa, sb));
        }
        let (bs, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * n * m];
        for i in 0..bs {
            let ai = &a.data()[i * n * k..(i + 1) * n * k];
            let bi = &b.data()[i * k * m..(i + 1) * k * m];
            let dst = &mut out[i * n * m..(i + 1) * n * m];
            if trans_b {
                gemm_nt(ai, bi, dst, n, k, m);
            } else {
                gemm(ai, bi, dst, n, k, m);
            }
        }
        let t = Tensor::new(&[bs, n, m], out)?;
        self.tape.push(
            "batch_matmul",
            t,
            Op::BatchMatMul {
                a: self.id,
                b: rhs.id,
                trans_b,
            },
            &[self.id, rhs.id],
        )
    }

    /// `[B, n, k] · [B, k, m] -> [B, n, m]`
    pub fn bmm(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.batch_matmul(rhs, false)
    }

    /// `[B, n, k] · [B, m, k]ᵀ -> [B, n, m]`
    pub fn bmm_nt(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.batch_matmul(rhs, true)
    }

    fn zip_same(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(dim_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(a.shape(), data)?;
        self.tape.push(name, t, op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_same(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    fn broadcast(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || b.numel() == 0 {
            return Err(dim_err(name, sa, sb));
        }
        let inner = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % inner]))
            .collect();
        let t = Tensor::new(sa, data)?;
        self.tape.push(name, t, op, &[self.id, rhs.id])
    }

    /// Adds `rhs`, whose shape equals the trailing axes of `self`.
    pub fn add_broadcast(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast(rhs, "add_broadcast", |x, y| x + y, Op::AddBroadcast(self.id, rhs.id))
    }

    /// Multiplies by `rhs`, whose shape equals the trailing axes of `self`.
    pub fn mul_broadcast(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast(rhs, "mul_broadcast", |x, y| x * y, Op::MulBroadcast(self.id, rhs.id))
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        self.unary("scale", |x| x * s, |a| Op::Scale(a, s))
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| if x > T::zero() { x } else { T::zero() }, Op::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.unary("gelu", |x| T::from_f64_lossy(gelu(x.as_f64())), Op::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn abs(&self) -> Result<Var<'t, T>> {
        self.unary("abs", |x| x.abs(), Op::Abs)
    }

    pub fn softmax_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err("softmax_last", x.shape(), &[]))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        self.tape.push("softmax_last", t, Op::SoftmaxLast(self.id), &[self.id])
    }

    /// Normalizes each row of the last axis to zero mean and unit (biased)
    /// variance. The affine part is left to the caller.
    pub fn layernorm_last(&self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err("layernorm_last", x.shape(), &[]))?;
        let dn = T::from_usize(d).unwrap();
        let mut out = x.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor::new(x.shape(), out)?;
        self.tape.push(
            "layernorm_last",
            t,
            Op::LayerNormLast {
                x: self.id,
                rstd: rstds,
            },
            &[self.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(Error::Contract(alloc::string::String::from("mean of empty tensor")));
        }
        let s = x.data().iter().copied().sum::<T>() / T::from_usize(x.numel()).unwrap();
        self.tape.push("mean", Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Mean over the last axis: `[..., d] -> [...]`.
    pub fn mean_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        let d = *s.last().ok_or_else(|| dim_err("mean_last", s, &[]))?;
        let dn = T::from_usize(d).unwrap();
        let data = x
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().copied().sum::<T>() / dn)
            .collect();
        let t = Tensor::new(&s[..s.len() - 1], data)?;
        self.tape.push("mean_last", t, Op::MeanLast(self.id), &[self.id])
    }

    /// Mean absolute difference, the L1 loss.
    pub fn l1(&self, target: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.sub(target)?.abs()?.mean()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let t = (*self.value()).clone().reshape(shape)?;
        self.tape.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", s, perm));
        }
        let data = permute_data(x.data(), s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor::new(&shape, data)?;
        self.tape.push(
            "permute",
            t,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// `[N, P, D]` with a `[D]` token prepended on axis 1 -> `[N, P+1, D]`.
    pub fn prepend_token(&self, token: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(token);
        let (x, tok) = (self.value(), token.value());
        let s = x.shape();
        if s.len() != 3 || tok.shape() != [s[2]] {
            return Err(dim_err("prepend_token", s, tok.shape()));
        }
        let (n, p, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(n * (p + 1) * d);
        for i in 0..n {
            data.extend_from_slice(tok.data());
            data.extend_from_slice(&x.data()[i * p * d..(i + 1) * p * d]);
        }
        let t = Tensor::new(&[n, p + 1, d], data)?;
        self.tape.push(
            "prepend_token",
            t,
            Op::PrependToken {
                x: self.id,
                token: token.id,
            },
            &[self.id, token.id],
        )
    }

    /// Token `index` of `[N, T, D]` -> `[N, D]`.
    pub fn select_token(&self, index: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || index >= s[1] {
            return Err(dim_err("select_token", s, &[index]));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend_from_slice(&x.data()[(i * t + index) * d..(i * t + index + 1) * d]);
        }
        let out = Tensor::new(&[n, d], data)?;
        self.tape.push("select_token", out, Op::SelectToken { x: self.id, index }, &[self.id])
    }

    /// Tokens `start..` of `[N, T, D]` -> `[N, T-start, D]`.
    pub fn slice_tokens(&self, start: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || start >= s[1] {
            return Err(dim_err("slice_tokens", s, &[start]));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(n * (t - start) * d);
        for i in 0..n {
            data.extend_from_slice(&x.data()[(i * t + start) * d..(i + 1) * t * d]);
        }
        let out = Tensor::new(&[n, t - start, d], data)?;
        self.tape.push("slice_tokens", out, Op::SliceTokens { x: self.id, start }, &[self.id])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// `[n, C]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        let s = z.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if c < 2 {
            return Err(Error::Argument(alloc::format!("cross_entropy needs at least 2 classes, got {c}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Argument(alloc::format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(z.numel());
        let mut total = 0.0f64;
        for (row, &y) in z.data().chunks_exact(c).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            total += (lse - row[y]).as_f64();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = Tensor::scalar(T::from_f64_lossy(total / labels.len() as f64));
        self.tape.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
        )
    }
}
