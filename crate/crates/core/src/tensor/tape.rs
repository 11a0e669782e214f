use std::borrow::Cow;
use std::collections::HashMap;

use super::{ensure_finite, numel, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    /// tanh approximation
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Recip,
    Square,
}

impl UnaryKind {
    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Recip => "recip",
            UnaryKind::Square => "square",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Outer/axis/inner decomposition of a row-major shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisView {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: numel(&shape[..axis]),
            n: shape[axis],
            inner: numel(&shape[axis + 1..]),
        })
    }

    #[inline]
    fn at(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.n + i) * self.inner + j
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Offset {
        x: Var,
    },
    Softmax {
        x: Var,
        view: AxisView,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        view: AxisView,
        argmax: Vec<usize>,
    },
    SumAll {
        x: Var,
        scale: T,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        view: AxisView,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    RepeatRows {
        x: Var,
        rows: usize,
    },
    RepeatCols {
        x: Var,
        cols: usize,
    },
    Unfold {
        x: Var,
        sources: Vec<Option<usize>>,
        channels: usize,
        kernel: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Unary { kind, .. } => kind.name(),
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::Softmax { .. } => "softmax",
            Op::Reduce { .. } => "reduce",
            Op::SumAll { .. } => "sum_all",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::RepeatCols { .. } => "repeat_cols",
            Op::Unfold { .. } => "unfold",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'p, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    needs_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Parameters are read from the
/// borrowed [`ParamStore`] without copying.
pub struct GradTape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: HashMap<Var, Vec<T>>,
    visited: Vec<usize>,
}

impl<T> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Gradient with respect to any leaf that required gradients.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var).map(|g| g.as_slice())
    }

    /// Indices of the non-leaf operations whose backward rule ran, in the
    /// order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, T: Scalar> Default for GradTape<'p, T> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p, T: Scalar> GradTape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape without parameters; leaves come from [`GradTape::input`].
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded value in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[var.0].value
    }

    pub fn tensor(&self, var: Var) -> Tensor<T> {
        let n = &self.nodes[var.0];
        Tensor::from_parts_unchecked(n.shape.clone(), n.value.to_vec())
    }

    pub fn item(&self, var: Var) -> Option<T> {
        let v = self.value(var);
        (v.len() == 1).then(|| v[0])
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [T]>, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        Ok(self.push(shape, Cow::Owned(value), needs_grad, op))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a parameter leaf. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.tensor(id);
        let v = self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
            Op::Leaf { param: Some(id) },
        );
        self.param_vars.insert(id, v);
        v
    }

    /// Records an owned leaf; it participates in differentiation iff the
    /// tensor requires gradients.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(
            shape,
            Cow::Owned(tensor.into_data()),
            needs,
            Op::Leaf { param: None },
        )
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.input(tensor)
    }

    /// Constant leaf from raw parts; shape and length must agree.
    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    // ---------------------------------------------------------------- linear

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(op_name, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(op_name, sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push_checked(
            op_name,
            vec![m, n],
            out,
            ng,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![cols, rows],
            Cow::Owned(out),
            ng,
            Op::Transpose { x, rows, cols },
        ))
    }

    // ----------------------------------------------------------- elementwise

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let v = self.value(x);
        let name = match kind {
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Recip => "recip",
            _ => "unary",
        };
        if matches!(kind, UnaryKind::Log | UnaryKind::Sqrt) && v.iter().any(|&e| e < T::zero()) {
            return Err(TensorError::Domain {
                op: name,
                detail: "negative input".into(),
            });
        }
        let half = T::from_f64(0.5);
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64(0.044715);
        let out: Vec<T> = v
            .iter()
            .map(|&e| match kind {
                UnaryKind::Relu => e.max(T::zero()),
                UnaryKind::Gelu => half * e * (T::one() + (c * (e + a * e * e * e)).tanh()),
                UnaryKind::Tanh => e.tanh(),
                UnaryKind::Sigmoid => sigmoid(e),
                UnaryKind::Exp => e.exp(),
                UnaryKind::Log => e.ln(),
                UnaryKind::Sqrt => e.sqrt(),
                UnaryKind::Recip => e.recip(),
                UnaryKind::Square => e * e,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push_checked(name, shape, out, ng, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Recip)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }

    /// Elementwise binary op. Operands must have equal shapes, or one of them
    /// must hold a single element.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (numel(sa), numel(sb));
        let shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(shape_err("binary", sa, sb));
        };
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = (0..n)
            .map(|i| f(va[if na == 1 { 0 } else { i }], vb[if nb == 1 { 0 } else { i }]))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("binary", shape, out, ng, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&e| e * factor).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push_checked("scale", shape, out, ng, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&e| e + s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push_checked("add_scalar", shape, out, ng, Op::Offset { x })
    }

    // ------------------------------------------------------------ reductions

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax where entries with `mask[i] == false` are excluded and receive
    /// exactly zero weight. A slice with every entry excluded is an error.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let view = AxisView::of("softmax", &shape, axis)?;
        if let Some(m) = mask {
            if m.len() != numel(&shape) {
                return Err(shape_err("softmax", &shape, &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..view.outer {
            for j in 0..view.inner {
                let mut max = T::neg_infinity();
                for i in 0..view.n {
                    let idx = view.at(o, i, j);
                    if keep(idx) && v[idx] > max {
                        max = v[idx];
                    }
                }
                if max == T::neg_infinity() {
                    return Err(TensorError::Degenerate {
                        op: "softmax",
                        detail: "every entry of a slice is masked".into(),
                    });
                }
                let mut sum = T::zero();
                for i in 0..view.n {
                    let idx = view.at(o, i, j);
                    if keep(idx) {
                        let e = (v[idx] - max).exp();
                        out[idx] = e;
                        sum = sum + e;
                    }
                }
                for i in 0..view.n {
                    out[view.at(o, i, j)] = out[view.at(o, i, j)] / sum;
                }
            }
        }
        let ng = self.ng(x);
        self.push_checked("softmax", shape, out, ng, Op::Softmax { x, view })
    }

    /// Reduces along `axis`. With `keep_dim` the axis stays with length 1.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize, keep_dim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let view = AxisView::of("reduce", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![T::zero(); view.outer * view.inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; out.len()];
        }
        let inv_n = T::from_f64(1.0 / view.n as f64);
        for o in 0..view.outer {
            for j in 0..view.inner {
                let oi = o * view.inner + j;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for i in 0..view.n {
                            s = s + v[view.at(o, i, j)];
                        }
                        out[oi] = if kind == ReduceKind::Mean { s * inv_n } else { s };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for i in 1..view.n {
                            if v[view.at(o, i, j)] > v[view.at(o, best, j)] {
                                best = i;
                            }
                        }
                        argmax[oi] = best;
                        out[oi] = v[view.at(o, best, j)];
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        if keep_dim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let ng = self.ng(x);
        self.push_checked(
            "reduce",
            out_shape,
            out,
            ng,
            Op::Reduce {
                x,
                kind,
                view,
                argmax,
            },
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axis, keep_dim)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axis, keep_dim)
    }

    pub fn max(&mut self, x: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.reduce(x, ReduceKind::Max, axis, keep_dim)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.total(x, T::one())
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.total(x, T::from_f64(1.0 / n as f64))
    }

    fn total(&mut self, x: Var, scale: T) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum::<T>() * scale;
        let ng = self.ng(x);
        self.push_checked("sum_all", Vec::new(), vec![s], ng, Op::SumAll { x, scale })
    }

    // ------------------------------------------------------------- structure

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        AxisView::of("concat", &base, axis)?;
        let mut total = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            sizes.push((p, s[axis]));
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &sizes {
                let block = len * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = sizes.iter().any(|&(p, _)| self.ng(p));
        Ok(self.push(
            shape,
            Cow::Owned(out),
            ng,
            Op::Concat {
                parts: sizes,
                outer,
                inner,
            },
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let view = AxisView::of("narrow", &shape, axis)?;
        if len == 0 || start + len > view.n {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(view.outer * len * view.inner);
        for o in 0..view.outer {
            let from = view.at(o, start, 0);
            out.extend_from_slice(&v[from..from + len * view.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            out_shape,
            Cow::Owned(out),
            ng,
            Op::Narrow {
                x,
                view,
                start,
                len,
            },
        ))
    }

    /// Equal-size split along `axis`; the inverse of [`GradTape::concat`].
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        if Some(&start) != self.shape(x).get(axis) {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape: self.shape(x).to_vec(),
                reason: format!("sizes sum to {start}"),
            });
        }
        Ok(out)
    }

    /// Selects rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape,
                reason: format!("bad row selection of {} rows", rows.len()),
            });
        }
        let cols = shape[1];
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![rows.len(), cols],
            Cow::Owned(out),
            ng,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x);
        if numel(shape) != numel(from) || shape.contains(&0) {
            return Err(shape_err("reshape", from, shape));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), Cow::Owned(v), ng, Op::Reshape { x }))
    }

    /// Tiles a vector (`[n]` or `[1, n]`) into `rows` identical rows.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        if !(s.len() == 1 || (s.len() == 2 && s[0] == 1)) || rows == 0 {
            return Err(shape_err("repeat_rows", s, &[rows]));
        }
        let n = numel(s);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(v);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, n], Cow::Owned(out), ng, Op::RepeatRows { x, rows }))
    }

    /// Tiles a column (`[r]` or `[r, 1]`) into `cols` identical columns.
    pub fn repeat_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if !(s.len() == 1 || (s.len() == 2 && s[1] == 1)) || cols == 0 {
            return Err(shape_err("repeat_cols", s, &[cols]));
        }
        let r = numel(s);
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * cols);
        for &e in v.iter() {
            out.extend(std::iter::repeat_n(e, cols));
        }
        let ng = self.ng(x);
        Ok(self.push(vec![r, cols], Cow::Owned(out), ng, Op::RepeatCols { x, cols }))
    }

    /// Sliding-window patch extraction over packed sequences.
    ///
    /// `x` is `[sum(lengths) x C]` holding each sequence's frames back to
    /// back. Each sequence is zero-padded by `padding` frames on both sides
    /// independently. Output row `t` of a sequence holds frames
    /// `t*stride - padding .. + kernel`, laid out channel-major
    /// (`column = c * kernel + j`), so it lines up with a row-major
    /// `[out x in x kernel]` convolution weight. Returns the output and the
    /// per-sequence output lengths.
    pub fn unfold(
        &mut self,
        x: Var,
        lengths: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || lengths.iter().sum::<usize>() != shape[0] {
            return Err(TensorError::InvalidShape {
                op: "unfold",
                shape,
                reason: format!("lengths {lengths:?} do not tile the rows"),
            });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Domain {
                op: "unfold",
                detail: "kernel and stride must be positive".into(),
            });
        }
        let channels = shape[1];
        let mut out_lengths = Vec::with_capacity(lengths.len());
        let mut sources = Vec::new();
        let mut offset = 0;
        for &len in lengths {
            if len + 2 * padding < kernel {
                return Err(TensorError::Domain {
                    op: "unfold",
                    detail: format!(
                        "sequence of {len} frames is shorter than the receptive field {kernel} with padding {padding}"
                    ),
                });
            }
            let out_len = (len + 2 * padding - kernel) / stride + 1;
            for t in 0..out_len {
                for j in 0..kernel {
                    let pos = (t * stride + j) as isize - padding as isize;
                    sources.push((pos >= 0 && (pos as usize) < len).then(|| offset + pos as usize));
                }
            }
            out_lengths.push(out_len);
            offset += len;
        }
        let rows: usize = out_lengths.iter().sum();
        let width = channels * kernel;
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * width];
        for (slot, src) in sources.iter().enumerate() {
            if let Some(r) = *src {
                let (row, j) = (slot / kernel, slot % kernel);
                let dst = &mut out[row * width..(row + 1) * width];
                let from = &v[r * channels..(r + 1) * channels];
                for (c, &e) in from.iter().enumerate() {
                    dst[c * kernel + j] = e;
                }
            }
        }
        let ng = self.ng(x);
        let var = self.push(
            vec![rows, width],
            Cow::Owned(out),
            ng,
            Op::Unfold {
                x,
                sources,
                channels,
                kernel,
            },
        );
        Ok((var, out_lengths))
    }

    /// Mean softmax cross-entropy of `logits[B x C]` against class indices,
    /// via the log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let v = self.value(logits);
        let mut probs = vec![T::zero(); v.len()];
        let mut total = 0.0f64;
        for (b, &label) in labels.iter().enumerate() {
            let row = &v[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&e| (e - max).exp()).sum();
            let lse = max + sum.ln();
            total += (lse - row[label]).as_f64();
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
        }
        let loss = T::from_f64(total / labels.len() as f64);
        let ng = self.ng(logits);
        self.push_checked(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            ng,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                classes,
            },
        )
    }

    // -------------------------------------------------------------- backward

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires them. Operations are visited in exact reverse order of
    /// recording.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        let mut params = Vec::new();
        let mut leaves = HashMap::new();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { param } = node.op {
                let g = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                match param {
                    Some(id) => params.push((id, g)),
                    None => {
                        leaves.insert(Var(idx), g);
                    }
                }
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.backward_node(idx, &dy, &mut grads);
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            params,
            leaves,
            visited,
        })
    }

    fn backward_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &self.nodes[v.0];
            if !target.needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.len()]);
            f(g);
        };
        match &node.op {
            Op::Leaf { .. } => unreachable!(),
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                // C = A * op(B); dA = dC * op(B)^T
                acc(a, &mut |g| T::gemm(m, n, k, dy, false, vb, !trans_b, T::one(), g));
                if trans_b {
                    // B stored n x k: dB = dC^T * A
                    acc(b, &mut |g| T::gemm(n, m, k, dy, true, va, false, T::one(), g));
                } else {
                    // dB = A^T * dC
                    acc(b, &mut |g| T::gemm(k, m, n, va, true, dy, false, T::one(), g));
                }
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |g| {
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] = g[r * cols + c] + dy[c * rows + r];
                    }
                }
            }),
            &Op::Unary { x, kind } => {
                let vx = self.value(x);
                let half = T::from_f64(0.5);
                let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let a = T::from_f64(0.044715);
                let three = T::from_f64(3.0);
                let two = T::from_f64(2.0);
                acc(x, &mut |g| {
                    for i in 0..g.len() {
                        let (xi, yi) = (vx[i], y[i]);
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Gelu => {
                                let t = (c * (xi + a * xi * xi * xi)).tanh();
                                half * (T::one() + t)
                                    + half * xi * (T::one() - t * t) * c * (T::one() + three * a * xi * xi)
                            }
                            UnaryKind::Tanh => T::one() - yi * yi,
                            UnaryKind::Sigmoid => yi * (T::one() - yi),
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => xi.recip(),
                            UnaryKind::Sqrt => half / yi,
                            UnaryKind::Recip => -(yi * yi),
                            UnaryKind::Square => two * xi,
                        };
                        g[i] = g[i] + dy[i] * d;
                    }
                });
            }
            &Op::Binary { a, b, kind } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (na, nb) = (va.len(), vb.len());
                let ea = |i: usize| va[if na == 1 { 0 } else { i }];
                let eb = |i: usize| vb[if nb == 1 { 0 } else { i }];
                acc(a, &mut |g| {
                    for (i, &dyi) in dy.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => dyi,
                            BinaryKind::Mul => dyi * eb(i),
                            BinaryKind::Div => dyi / eb(i),
                        };
                        let t = if na == 1 { 0 } else { i };
                        g[t] = g[t] + d;
                    }
                });
                acc(b, &mut |g| {
                    for (i, &dyi) in dy.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => dyi,
                            BinaryKind::Sub => -dyi,
                            BinaryKind::Mul => dyi * ea(i),
                            BinaryKind::Div => -dyi * ea(i) / (eb(i) * eb(i)),
                        };
                        let t = if nb == 1 { 0 } else { i };
                        g[t] = g[t] + d;
                    }
                });
            }
            &Op::Scale { x, factor } => acc(x, &mut |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi = *gi + d * factor;
                }
            }),
            &Op::Offset { x } | &Op::Reshape { x } => acc(x, &mut |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi = *gi + d;
                }
            }),
            &Op::Softmax { x, view } => acc(x, &mut |g| {
                for o in 0..view.outer {
                    for j in 0..view.inner {
                        let mut dot = T::zero();
                        for i in 0..view.n {
                            let t = view.at(o, i, j);
                            dot = dot + dy[t] * y[t];
                        }
                        for i in 0..view.n {
                            let t = view.at(o, i, j);
                            g[t] = g[t] + y[t] * (dy[t] - dot);
                        }
                    }
                }
            }),
            Op::Reduce {
                x,
                kind,
                view,
                argmax,
            } => {
                let view = *view;
                let inv_n = T::from_f64(1.0 / view.n as f64);
                acc(*x, &mut |g| {
                    for o in 0..view.outer {
                        for j in 0..view.inner {
                            let d = dy[o * view.inner + j];
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => {
                                    let d = if *kind == ReduceKind::Mean { d * inv_n } else { d };
                                    for i in 0..view.n {
                                        let t = view.at(o, i, j);
                                        g[t] = g[t] + d;
                                    }
                                }
                                ReduceKind::Max => {
                                    let t = view.at(o, argmax[o * view.inner + j], j);
                                    g[t] = g[t] + d;
                                }
                            }
                        }
                    }
                });
            }
            &Op::SumAll { x, scale } => acc(x, &mut |g| {
                let d = dy[0] * scale;
                g.iter_mut().for_each(|gi| *gi = *gi + d);
            }),
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|(_, len)| len).sum();
                let mut start = 0;
                for &(p, len) in parts {
                    acc(p, &mut |g| {
                        let block = len * inner;
                        for o in 0..*outer {
                            let src = &dy[(o * total + start) * inner..][..block];
                            for (gi, &d) in g[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *gi = *gi + d;
                            }
                        }
                    });
                    start += len;
                }
            }
            &Op::Narrow {
                x,
                view,
                start,
                len,
            } => acc(x, &mut |g| {
                let block = len * view.inner;
                for o in 0..view.outer {
                    let dst = view.at(o, start, 0);
                    for (gi, &d) in g[dst..dst + block].iter_mut().zip(&dy[o * block..(o + 1) * block]) {
                        *gi = *gi + d;
                    }
                }
            }),
            Op::GatherRows { x, rows, cols } => acc(*x, &mut |g| {
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        g[r * cols + c] = g[r * cols + c] + dy[i * cols + c];
                    }
                }
            }),
            &Op::RepeatRows { x, rows } => acc(x, &mut |g| {
                let n = g.len();
                for r in 0..rows {
                    for c in 0..n {
                        g[c] = g[c] + dy[r * n + c];
                    }
                }
            }),
            &Op::RepeatCols { x, cols } => acc(x, &mut |g| {
                for (r, gi) in g.iter_mut().enumerate() {
                    let s: T = dy[r * cols..(r + 1) * cols].iter().copied().sum();
                    *gi = *gi + s;
                }
            }),
            Op::Unfold {
                x,
                sources,
                channels,
                kernel,
            } => acc(*x, &mut |g| {
                let width = channels * kernel;
                for (slot, src) in sources.iter().enumerate() {
                    if let Some(r) = *src {
                        let (row, j) = (slot / kernel, slot % kernel);
                        let d = &dy[row * width..(row + 1) * width];
                        let dst = &mut g[r * channels..(r + 1) * channels];
                        for (c, gi) in dst.iter_mut().enumerate() {
                            *gi = *gi + d[c * kernel + j];
                        }
                    }
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = dy[0] / T::from_f64(labels.len() as f64);
                acc(*logits, &mut |g| {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            let t = b * classes + c;
                            g[t] = g[t] + (probs[t] - onehot) * scale;
                        }
                    }
                });
            }
        }
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
