//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse. Graphs are meant to be
//! built, differentiated once, and dropped: one graph per training step.
//!
//! Parameters live outside the graph in a [`ParamStore`]. Dense parameters
//! are copied in as leaves by [`Graph::param`]; embedding tables are never
//! copied, [`Graph::lookup`] gathers rows and backward scatters gradients into
//! the visited rows only.

use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Guard used by cosine similarity; norms below this are rejected.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        ids: Vec<usize>,
    },
    BagMean {
        param: ParamId,
        offsets: Vec<usize>,
        ids: Vec<usize>,
    },
    IndexSelect {
        a: Var,
        idx: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Binary {
        op: ElementwiseOp,
        a: Var,
        b: Var,
        bc: Option<Broadcast>,
    },
    Unary {
        op: ElementwiseOp,
        a: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    MaskedSoftmax {
        a: Var,
        mask: Vec<bool>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        a: Var,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    adjoints: Vec<Option<Vec<T>>>,
    param_grads: Gradients<T>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stride-checked wrapper around the scalar GEMM kernel, `c += a * b`
/// (or `c = a * b` when `beta` is zero).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    T::gemm(
        m,
        k,
        n,
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        csc as isize,
    );
}

/// Index mapping for a binary op whose operands broadcast over trailing
/// singleton dimensions (shapes are right-aligned; a dimension of 1 stretches).
#[derive(Debug, Clone)]
struct Broadcast {
    out_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return None;
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Some(Self {
            sa: strides(&pa),
            sb: strides(&pb),
            out_shape,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let numel: usize = self.out_shape.iter().product();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..numel {
            f(o, ia, ib);
            let mut d = rank - 1;
            loop {
                counter[d] += 1;
                ia += self.sa[d];
                ib += self.sb[d];
                if counter[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.sa[d] * self.out_shape[d];
                ib -= self.sb[d] * self.out_shape[d];
                counter[d] = 0;
                if d == 0 {
                    break;
                }
                d -= 1;
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            adjoints: Vec::new(),
            param_grads: Gradients::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participated and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> &Gradients<T> {
        &self.param_grads
    }

    pub fn take_param_grads(&mut self) -> Gradients<T> {
        std::mem::take(&mut self.param_grads)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.adjoints.clear();
        self.param_grads = Gradients::new();
        self.backward_done = false;
    }

    // ---- leaves -------------------------------------------------------

    /// Input that does not require a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that requires a gradient, readable through [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a dense parameter into the graph; its gradient is reported in
    /// [`Graph::param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Gathers rows `ids` of an embedding table, giving `[ids.len(), dim]`.
    /// Row 0 is the padding row: it reads as stored (zero) and never
    /// receives gradient.
    pub fn lookup(&mut self, store: &ParamStore<T>, id: ParamId, ids: &[usize]) -> Result<Var> {
        let p = store.get(id);
        let (vocab, dim) = table_dims(p.value.shape(), &p.name)?;
        if ids.is_empty() {
            return Err(Error::dim("lookup", format!("empty id list for `{}`", p.name)));
        }
        let src = p.value.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= vocab {
                return Err(Error::Lookup {
                    field: p.name.clone(),
                    id: i,
                    vocab,
                });
            }
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    /// Mean of the embedding rows of each bag, giving `[bags.len(), dim]`.
    /// An empty bag yields a zero row.
    pub fn lookup_bag_mean(&mut self, store: &ParamStore<T>, id: ParamId, bags: &[Vec<usize>]) -> Result<Var> {
        let p = store.get(id);
        let (vocab, dim) = table_dims(p.value.shape(), &p.name)?;
        if bags.is_empty() {
            return Err(Error::dim("lookup_bag_mean", "no bags"));
        }
        let src = p.value.data();
        let mut out = vec![T::zero(); bags.len() * dim];
        let mut offsets = Vec::with_capacity(bags.len() + 1);
        let mut flat = Vec::new();
        offsets.push(0);
        for (b, bag) in bags.iter().enumerate() {
            let row = &mut out[b * dim..(b + 1) * dim];
            for &i in bag {
                if i >= vocab {
                    return Err(Error::Lookup {
                        field: p.name.clone(),
                        id: i,
                        vocab,
                    });
                }
                for (o, &s) in row.iter_mut().zip(&src[i * dim..(i + 1) * dim]) {
                    *o += s;
                }
            }
            if !bag.is_empty() {
                let inv = T::one() / T::from_usize_lossy(bag.len());
                row.iter_mut().for_each(|v| *v *= inv);
            }
            flat.extend_from_slice(bag);
            offsets.push(flat.len());
        }
        let value = Tensor::new(vec![bags.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::BagMean {
                param: id,
                offsets,
                ids: flat,
            },
            true,
        ))
    }

    // ---- structural ops -------------------------------------------------

    /// Rows `idx` of a tensor of rank ≥ 1 (along axis 0).
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx.is_empty() {
            return Err(Error::dim(
                "index_select",
                format!("shape {shape:?}, {} indices", idx.len()),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= shape[0] {
                return Err(Error::dim(
                    "index_select",
                    format!("index {i} out of range for leading dimension {}", shape[0]),
                ));
            }
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = idx.len();
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::IndexSelect { a, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", format!("cannot reshape {:?} into {shape:?}", self.shape(a))))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} invalid for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", value, Op::MatMul { a, b }, rg)
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`; with `trans_b`
    /// the right operand is `[B, n, k]` and is used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim(
                "bmm",
                format!("cannot batch-multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let bstride = (if trans_b { (1, k) } else { (n, 1) }, k * n);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bd[i * bstride.1..(i + 1) * bstride.1],
                bstride.0,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push_checked("bmm", value, Op::Bmm { a, b, trans_b }, rg)
    }

    // ---- elementwise ----------------------------------------------------

    /// Applies `op`; binary ops need `b` and broadcast over trailing
    /// singleton dimensions.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Tanh, a)
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let f = |x: T, y: T| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!(),
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (out_shape, out, bc) = if sa == sb {
            let out: Vec<T> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa.to_vec(), out, None)
        } else {
            let bc = Broadcast::new(sa, sb)
                .ok_or_else(|| Error::dim("elementwise", format!("shapes {sa:?} and {sb:?} do not broadcast")))?;
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let mut out = vec![T::zero(); bc.out_shape.iter().product()];
            bc.for_each(|o, ia, ib| out[o] = f(ad[ia], bd[ib]));
            (bc.out_shape.clone(), out, Some(bc))
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, out)?;
        self.push_checked("elementwise", value, Op::Binary { op, a, b, bc }, rg)
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data: Vec<T> = match op {
            ElementwiseOp::Relu => src.data().iter().map(|&x| x.max(T::zero())).collect(),
            ElementwiseOp::Sigmoid => src.data().iter().map(|&x| sigmoid(x)).collect(),
            ElementwiseOp::Tanh => src.data().iter().map(|&x| x.tanh()).collect(),
            _ => unreachable!(),
        };
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push_checked("elementwise", value, Op::Unary { op, a }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x * c).collect())?;
        let rg = self.rg(a);
        self.push_checked("scale", value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| x + c).collect())?;
        let rg = self.rg(a);
        self.push_checked("add_scalar", value, Op::AddScalar { a }, rg)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        let value = Tensor::new(shape, out)?;
        self.push_checked("softmax", value, Op::Softmax { a, axis }, rg)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions get weight exactly 0; a fully masked row is
    /// all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let src = self.value(a).data();
        if shape.is_empty() || mask.len() != src.len() {
            return Err(Error::dim(
                "masked_softmax",
                format!("mask of length {} for shape {shape:?}", mask.len()),
            ));
        }
        let len = *shape.last().unwrap();
        let mut out = vec![T::zero(); src.len()];
        for r in 0..src.len() / len {
            let span = r * len..(r + 1) * len;
            let (x, m, y) = (&src[span.clone()], &mask[span.clone()], &mut out[span]);
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                if m[j] {
                    y[j] = (x[j] - max).exp();
                    total += y[j];
                }
            }
            for v in y.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        let value = Tensor::new(shape, out)?;
        self.push_checked(
            "masked_softmax",
            value,
            Op::MaskedSoftmax { a, mask: mask.to_vec() },
            rg,
        )
    }

    // ---- similarity and reductions ---------------------------------------

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::dim(
                "cosine_similarity",
                format!("expected vectors, got {:?}", self.shape(a)),
            ));
        }
        self.cosine(a, b)
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim(
                "cosine_rows",
                format!("expected a matrix, got {:?}", self.shape(a)),
            ));
        }
        self.cosine(a, b)
    }

    fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dim(
                "cosine_similarity",
                format!("shapes {sa:?} and {sb:?} differ"),
            ));
        }
        let d = *sa.last().unwrap();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let eps = T::from_f64_lossy(COSINE_EPS);
        let mut out = Vec::with_capacity(ad.len() / d);
        for (x, y) in ad.chunks(d).zip(bd.chunks(d)) {
            let (dot, nx, ny) = dot_norms(x, y);
            if nx < eps || ny < eps {
                return Err(Error::DegenerateVector {
                    op: "cosine_similarity",
                    eps: COSINE_EPS,
                });
            }
            out.push((dot / (nx * ny)).max(-T::one()).min(T::one()));
        }
        let out_shape = if sa.len() == 1 { vec![] } else { vec![sa[0]] };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, out)?;
        self.push_checked("cosine_similarity", value, Op::Cosine { a, b }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a).data();
        let total: T = src.iter().copied().sum();
        let value = Tensor::scalar(total / T::from_usize_lossy(src.len()));
        let rg = self.rg(a);
        self.push_checked("mean", value, Op::Mean { a }, rg)
    }

    /// Mean binary cross-entropy computed from logits:
    /// `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != labels.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits for {} labels", x.len(), labels.len()),
            ));
        }
        let total: T = x
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / T::from_usize_lossy(labels.len()));
        let rg = self.rg(logits);
        self.push_checked(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a single-element `loss`. Every leaf that requires a
    /// gradient and feeds the loss gets its gradient populated. A second call
    /// without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.param_grads = Gradients::new();
        if !self.rg(loss) {
            return Ok(());
        }
        self.adjoints[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = self.adjoints.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut sink = Sink {
                nodes: &self.nodes,
                adj: lower,
            };
            backprop(node, g, &mut sink, &mut self.param_grads);
        }
        Ok(())
    }
}

fn table_dims(shape: &[usize], name: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::dim(
            "lookup",
            format!("table `{name}` has shape {shape:?}, expected [vocab, dim]"),
        ));
    }
    Ok((shape[0], shape[1]))
}

fn dot_norms<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let (mut dot, mut xx, mut yy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

/// Mutable access to the adjoints of nodes preceding the one being
/// differentiated.
struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    adj: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Sink<'_, T> {
    /// Adjoint buffer of `v`, allocated on first use; `None` when `v` does
    /// not require a gradient.
    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(
            self.adj[v.0]
                .get_or_insert_with(|| vec![T::zero(); numel])
                .as_mut_slice(),
        )
    }

    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

fn backprop<T: Scalar>(node: &Node<T>, g: &[T], s: &mut Sink<'_, T>, pg: &mut Gradients<T>) {
    let nodes = s.nodes;
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Param(id) => pg.add_dense(*id, g),
        Op::Gather { param, ids } => {
            let dim = node.value.shape()[1];
            for (r, &id) in ids.iter().enumerate() {
                if id != 0 {
                    pg.add_row(*param, dim, id, &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::BagMean { param, offsets, ids } => {
            let dim = node.value.shape()[1];
            let mut scaled = vec![T::zero(); dim];
            for (b, w) in offsets.windows(2).enumerate() {
                let bag = &ids[w[0]..w[1]];
                if bag.is_empty() {
                    continue;
                }
                let inv = T::one() / T::from_usize_lossy(bag.len());
                for (o, &v) in scaled.iter_mut().zip(&g[b * dim..(b + 1) * dim]) {
                    *o = v * inv;
                }
                for &id in bag.iter().filter(|&&id| id != 0) {
                    pg.add_row(*param, dim, id, &scaled);
                }
            }
        }
        Op::IndexSelect { a, idx } => {
            let row = node.value.numel() / idx.len();
            if let Some(ga) = s.buf(*a) {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga[i * row..(i + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *o += v;
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (s.value(*a).shape()[0], s.value(*a).shape()[1]);
            let n = s.value(*b).shape()[1];
            if let Some(ga) = s.buf(*a) {
                // dA = dC * B^T
                gemm(m, n, k, g, (n, 1), val(*b), (1, n), T::one(), ga, (k, 1));
            }
            if let Some(gb) = s.buf(*b) {
                // dB = A^T * dC
                gemm(k, m, n, val(*a), (1, k), g, (n, 1), T::one(), gb, (n, 1));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let sa = s.value(*a).shape().to_vec();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.value.shape()[2];
            if let Some(ga) = s.buf(*a) {
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let bi = &val(*b)[i * k * n..(i + 1) * k * n];
                    // dA_i = dC_i * B_i^T, where B_i is [k, n] (or [n, k] when transposed)
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(
                        m,
                        n,
                        k,
                        gc,
                        (n, 1),
                        bi,
                        bt,
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k, 1),
                    );
                }
            }
            if let Some(gb) = s.buf(*b) {
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let ai = &val(*a)[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB_i [n, k] = dC_i^T * A_i
                        gemm(n, m, k, gc, (1, n), ai, (k, 1), T::one(), out, (k, 1));
                    } else {
                        // dB_i [k, n] = A_i^T * dC_i
                        gemm(k, m, n, ai, (1, k), gc, (n, 1), T::one(), out, (n, 1));
                    }
                }
            }
        }
        Op::Binary { op, a, b, bc } => {
            let (av, bv) = (val(*a), val(*b));
            let (da, db): (
                Box<dyn Fn(usize, usize, usize) -> T>,
                Box<dyn Fn(usize, usize, usize) -> T>,
            ) = match op {
                ElementwiseOp::Add => (Box::new(|o, _, _| g[o]), Box::new(|o, _, _| g[o])),
                ElementwiseOp::Sub => (Box::new(|o, _, _| g[o]), Box::new(|o, _, _| -g[o])),
                ElementwiseOp::Mul => (Box::new(|o, _, ib| g[o] * bv[ib]), Box::new(|o, ia, _| g[o] * av[ia])),
                _ => unreachable!(),
            };
            match bc {
                None => {
                    if let Some(ga) = s.buf(*a) {
                        for (o, x) in ga.iter_mut().enumerate() {
                            *x += da(o, o, o);
                        }
                    }
                    if let Some(gb) = s.buf(*b) {
                        for (o, x) in gb.iter_mut().enumerate() {
                            *x += db(o, o, o);
                        }
                    }
                }
                Some(bc) => {
                    if let Some(ga) = s.buf(*a) {
                        bc.for_each(|o, ia, ib| ga[ia] += da(o, ia, ib));
                    }
                    if let Some(gb) = s.buf(*b) {
                        bc.for_each(|o, ia, ib| gb[ib] += db(o, ia, ib));
                    }
                }
            }
        }
        Op::Unary { op, a } => {
            let (x, y) = (val(*a), node.value.data());
            if let Some(ga) = s.buf(*a) {
                for i in 0..ga.len() {
                    ga[i] += match op {
                        ElementwiseOp::Relu => {
                            if x[i] > T::zero() {
                                g[i]
                            } else {
                                T::zero()
                            }
                        }
                        ElementwiseOp::Sigmoid => g[i] * y[i] * (T::one() - y[i]),
                        ElementwiseOp::Tanh => g[i] * (T::one() - y[i] * y[i]),
                        _ => unreachable!(),
                    };
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = s.buf(*a) {
                ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = s.buf(*a) {
                ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(ga) = s.buf(*a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { a, mask } => {
            let y = node.value.data();
            let len = *node.value.shape().last().unwrap();
            if let Some(ga) = s.buf(*a) {
                for r in 0..y.len() / len {
                    let span = r * len..(r + 1) * len;
                    let dot: T = span.clone().filter(|&j| mask[j]).map(|j| g[j] * y[j]).sum();
                    for j in span.filter(|&j| mask[j]) {
                        ga[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = s.value(p).shape()[*axis] * inner;
                if let Some(gp) = s.buf(p) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                        gp[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &v)| *x += v);
                    }
                }
                offset += len;
            }
        }
        Op::Cosine { a, b } => {
            let d = *s.value(*a).shape().last().unwrap();
            let (av, bv) = (val(*a), val(*b));
            let c = node.value.data();
            // d cos / d x = y / (|x||y|) - cos * x / |x|^2
            let grad_of = |x: &[T], y: &[T], r: usize, out: &mut [T]| {
                let (_, nx, ny) = dot_norms(x, y);
                for j in 0..d {
                    out[j] += g[r] * (y[j] / (nx * ny) - c[r] * x[j] / (nx * nx));
                }
            };
            if let Some(ga) = s.buf(*a) {
                for r in 0..c.len() {
                    let span = r * d..(r + 1) * d;
                    grad_of(&av[span.clone()], &bv[span.clone()], r, &mut ga[span]);
                }
            }
            if let Some(gb) = s.buf(*b) {
                for r in 0..c.len() {
                    let span = r * d..(r + 1) * d;
                    grad_of(&bv[span.clone()], &av[span.clone()], r, &mut gb[span]);
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = s.buf(*a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = s.buf(*a) {
                let v = g[0] / T::from_usize_lossy(ga.len());
                ga.iter_mut().for_each(|o| *o += v);
            }
        }
        Op::BceWithLogits { logits, labels } => {
            let x = val(*logits);
            if let Some(gx) = s.buf(*logits) {
                let inv = g[0] / T::from_usize_lossy(labels.len());
                for i in 0..gx.len() {
                    gx[i] += (sigmoid(x[i]) - labels[i]) * inv;
                }
            }
        }
    }
}
