//! n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is dynamic: every op records its parent tensors
//! and a vector-Jacobian closure. [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into every
//! reachable tensor that requires them. Graphs are single-use; a second
//! backward through the same loss is rejected.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::{Error, Result, Scalar};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn<S> = Box<dyn Fn(&[S], &[Tensor<S>])>;

pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

struct Inner<S: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
    backward_done: Cell<bool>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape<S: Scalar>(shape: &[usize], data: &[S]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} holds {n} elements but data has {}",
            data.len()
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn alloc(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
            backward_done: Cell::new(false),
        }))
    }

    /// Constant tensor that does not participate in gradients.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Self::alloc(shape.to_vec(), data, false, vec![], None))
    }

    /// Gradient-tracked leaf (a learnable parameter or checked input).
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Self::alloc(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::alloc(shape.to_vec(), vec![S::zero(); n], false, vec![], None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self::alloc(shape.to_vec(), vec![v; n], false, vec![], None)
    }

    pub fn scalar(v: S) -> Self {
        Self::alloc(vec![1], vec![v], false, vec![], None)
    }

    fn op(shape: Vec<usize>, data: Vec<S>, parents: Vec<Tensor<S>>, back: BackwardFn<S>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::alloc(shape, data, true, parents, Some(back))
        } else {
            Self::alloc(shape, data, false, vec![], None)
        }
    }

    /// Build an op result with a hand-written vector-Jacobian rule.
    /// Used by the nn and optim modules for ops that are not compositions.
    pub(crate) fn custom_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        back: BackwardFn<S>,
    ) -> Self {
        Self::op(shape, data, parents, back)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a scalar tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replace the data of a leaf in place (optimizer updates).
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "set_data length {} vs tensor numel {}",
                data.len(),
                self.numel()
            )));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn accum(&self, f: impl FnOnce(&mut [S])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        f(buf);
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        binary(self, other, BinOp::Mul)
    }

    pub fn relu(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let shape = self.shape().to_vec();
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            let x = &parents[0];
            let xd = x.0.data.borrow();
            x.accum(|gx| {
                for (i, gi) in g.iter().enumerate() {
                    if xd[i] > S::zero() {
                        gx[i] = gx[i] + *gi;
                    }
                }
            });
        });
        Tensor::op(shape, out, vec![self.clone()], back)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| S::one() / (S::one() + (-v).exp()))
            .collect();
        let shape = self.shape().to_vec();
        let yv = out.clone();
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            let x = &parents[0];
            x.accum(|gx| {
                for (i, gi) in g.iter().enumerate() {
                    let y = yv[i];
                    gx[i] = gx[i] + *gi * y * (S::one() - y);
                }
            });
        });
        Tensor::op(shape, out, vec![self.clone()], back)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        let shape = self.shape().to_vec();
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            parents[0].accum(|gx| {
                for (i, gi) in g.iter().enumerate() {
                    gx[i] = gx[i] + *gi * c;
                }
            });
        });
        Tensor::op(shape, out, vec![self.clone()], back)
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor<S> {
        let s = self
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            let g0 = g[0];
            parents[0].accum(|gx| {
                for v in gx.iter_mut() {
                    *v = *v + g0;
                }
            });
        });
        Tensor::op(vec![1], vec![s], vec![self.clone()], back)
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        self.sum().scale(S::one() / n)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner extents {k} vs {k2}"
            )));
        }
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ad[i * k + kk];
                let brow = &bd[kk * n..kk * n + n];
                let orow = &mut out[i * n..i * n + n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o = *o + av * b;
                }
            }
        }
        drop(ad);
        drop(bd);
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                let bd = b.0.data.borrow();
                a.accum(|ga| {
                    // dA = g . B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = S::zero();
                            let grow = &g[i * n..i * n + n];
                            let brow = &bd[kk * n..kk * n + n];
                            for (gi, bi) in grow.iter().zip(brow.iter()) {
                                acc = acc + *gi * *bi;
                            }
                            ga[i * k + kk] = ga[i * k + kk] + acc;
                        }
                    }
                });
            }
            if b.requires_grad() {
                let ad = a.0.data.borrow();
                b.accum(|gb| {
                    // dB = A^T . g
                    for kk in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + kk];
                            let grow = &g[i * n..i * n + n];
                            let brow = &mut gb[kk * n..kk * n + n];
                            for (o, gi) in brow.iter_mut().zip(grow.iter()) {
                                *o = *o + av * *gi;
                            }
                        }
                    }
                });
            }
        });
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            back,
        ))
    }

    // ---- shape ops ----

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = new_shape.iter().product();
        if new_shape.is_empty() || new_shape.contains(&0) || n != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?}",
                self.shape(),
                self.numel()
            )));
        }
        let out = self.to_vec();
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            parents[0].accum(|gx| {
                for (o, gi) in gx.iter_mut().zip(g.iter()) {
                    *o = *o + *gi;
                }
            });
        });
        Ok(Tensor::op(
            new_shape.to_vec(),
            out,
            vec![self.clone()],
            back,
        ))
    }

    /// Reorder axes: `out` axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch(format!(
                "invalid permutation {axes:?} for rank {rank}"
            )));
        }
        let in_strides = row_major_strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let xd = self.data();
        let mut out = Vec::with_capacity(self.numel());
        for_each_offsets(&out_shape, &map_strides, |_, off| out.push(xd[off]));
        drop(xd);
        let shape_c = out_shape.clone();
        let back: BackwardFn<S> = Box::new(move |g, parents| {
            parents[0].accum(|gx| {
                for_each_offsets(&shape_c, &map_strides, |i, off| {
                    gx[off] = gx[off] + g[i];
                });
            });
        });
        Ok(Tensor::op(out_shape, out, vec![self.clone()], back))
    }

    /// Reverse-mode differentiation from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, shape is {:?}",
                self.shape()
            )));
        }
        if self.0.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this graph; rebuild the forward pass first".into(),
            ));
        }
        self.0.backward_done.set(true);

        // Iterative post-order DFS over parents.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        self.accum(|g| g[0] = g[0] + S::one());
        for node in topo.iter().rev() {
            if let Some(back) = &node.0.backward {
                let upstream = node.0.grad.borrow().clone();
                if let Some(g) = upstream {
                    back(&g, &node.0.parents);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

fn binary<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: BinOp) -> Result<Tensor<S>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = aligned_strides(a.shape(), &out_shape);
    let sb = aligned_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    {
        let ad = a.data();
        let bd = b.data();
        for_each_offsets2(&out_shape, &sa, &sb, |_, oa, ob| {
            let v = match op {
                BinOp::Add => ad[oa] + bd[ob],
                BinOp::Sub => ad[oa] - bd[ob],
                BinOp::Mul => ad[oa] * bd[ob],
            };
            out.push(v);
        });
    }
    let shape_c = out_shape.clone();
    let back: BackwardFn<S> = Box::new(move |g, parents| {
        let (a, b) = (&parents[0], &parents[1]);
        match op {
            BinOp::Add => {
                if a.requires_grad() {
                    a.accum(|ga| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, oa, _| ga[oa] = ga[oa] + g[i]);
                    });
                }
                if b.requires_grad() {
                    b.accum(|gb| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, _, ob| gb[ob] = gb[ob] + g[i]);
                    });
                }
            }
            BinOp::Sub => {
                if a.requires_grad() {
                    a.accum(|ga| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, oa, _| ga[oa] = ga[oa] + g[i]);
                    });
                }
                if b.requires_grad() {
                    b.accum(|gb| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, _, ob| gb[ob] = gb[ob] - g[i]);
                    });
                }
            }
            BinOp::Mul => {
                if a.requires_grad() {
                    let bd = b.0.data.borrow();
                    a.accum(|ga| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, oa, ob| {
                            ga[oa] = ga[oa] + g[i] * bd[ob];
                        });
                    });
                }
                if b.requires_grad() {
                    let ad = a.0.data.borrow();
                    b.accum(|gb| {
                        for_each_offsets2(&shape_c, &sa, &sb, |i, oa, ob| {
                            gb[ob] = gb[ob] + g[i] * ad[oa];
                        });
                    });
                }
            }
        }
    });
    Ok(Tensor::op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        back,
    ))
}

/// Concatenate along axis 0; trailing extents must agree.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let tail = &parts[0].shape()[1..];
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::ShapeMismatch(format!(
                "concat trailing extents differ: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
    }
    let lead: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    let mut out = Vec::with_capacity(shape.iter().product());
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let back: BackwardFn<S> = Box::new(move |g, parents| {
        let mut start = 0usize;
        for (p, &sz) in parents.iter().zip(sizes.iter()) {
            let seg = &g[start..start + sz];
            p.accum(|gp| {
                for (o, gi) in gp.iter_mut().zip(seg.iter()) {
                    *o = *o + *gi;
                }
            });
            start += sz;
        }
    });
    let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::op(shape, out, parents, back))
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Broadcast shape of two operands, numpy-style (right-aligned, extent-1
/// axes expand).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through broadcast target `out` (0 on
/// broadcast axes), right-aligned.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let native = row_major_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                native[i - pad]
            }
        })
        .collect()
}

fn for_each_offsets(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn for_each_offsets2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}
