//! Reverse-mode automatic differentiation on a per-computation Wengert tape.
//!
//! Everything is `f64`, row-major. Rank-3 tensors are laid out `[H, W, C]`,
//! convolution kernels `[kh, kw, c_in, c_out]`. There is no implicit
//! broadcasting: binary elementwise ops require identical shapes, except that
//! either operand may be a scalar (exactly one element).
//!
//! A `Tape` records a single computation eagerly (values are computed when an
//! op is recorded) and is discarded afterwards. `Var` handles are only valid
//! on the tape that produced them. `backward` from a scalar root returns the
//! gradient of the root with respect to every leaf; its accumulators are
//! local to the call, so repeated backward passes give identical results.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};

// ── tensors ──────────────────────────────────────────────────────────────

/// Dense f64 tensor. Immutable once recorded on a tape; plain value otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], c: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![c; n] }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(c: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![c] }
    }

    /// C-by-C identity matrix.
    pub fn eye(c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, c]);
        for i in 0..c {
            t.data[i * c + i] = 1.0;
        }
        t
    }

    /// Gaussian-filled tensor, `N(0, std^2)` per element.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on non-scalar shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape.len() != 3 {
        return Err(Error::Shape(format!("expected rank-3 tensor, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.shape.len() != 4 {
        return Err(Error::Shape(format!("expected rank-4 tensor, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

// ── tape structure ───────────────────────────────────────────────────────

/// Handle to a tensor recorded on a tape. Only valid on the originating tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Pad {
    Valid,
    SameZero,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Unary { kind: UnaryKind, a: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Conv2d { input: usize, kernel: usize, stride: usize, pt: usize, pl: usize },
    Reduce { kind: ReduceKind, a: usize, axes: Vec<usize> },
    Matmul { a: usize, b: usize },
    Transpose2 { a: usize },
    Reshape { a: usize },
    ConcatC { a: usize, b: usize, ca: usize },
    SliceC { a: usize, from: usize, to: usize },
    ExpandHw { a: usize },
    DiagMat { a: usize },
    Pick { a: usize, idx: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Per-computation Wengert tape: single owner, not aliased while recording.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by the leaf's `Var`.
pub struct Gradients {
    tape: u64,
    map: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. `None` when `v` is
    /// not a leaf of the tape.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.map.get(v.index).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index }
    }

    /// Record a differentiable leaf. `backward` reports its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Record a constant: participates in the computation, gets no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(Tensor::scalar(c))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    /// Uniform entry point mirroring the op table; dispatches on `op`.
    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElemOp::Add, Some(b)) => self.add(a, b),
            (ElemOp::Sub, Some(b)) => self.sub(a, b),
            (ElemOp::Mul, Some(b)) => self.mul(a, b),
            (ElemOp::Neg, None) => self.neg(a),
            (ElemOp::Exp, None) => self.exp(a),
            (ElemOp::Log, None) => self.log(a),
            (ElemOp::Tanh, None) => self.tanh(a),
            (ElemOp::Relu, None) => self.relu(a),
            (ElemOp::Add | ElemOp::Sub | ElemOp::Mul, None) => {
                Err(Error::Shape(format!("{op:?} requires a second operand")))
            }
            (_, Some(_)) => Err(Error::Shape(format!("{op:?} takes a single operand"))),
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let out = binary_forward(kind, va, vb)?;
        Ok(self.push(out, Op::Binary { kind, a: a.index, b: b.index }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let mut data = Vec::with_capacity(va.numel());
        for &x in va.data() {
            let y = match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!("log of non-positive value {x}")));
                    }
                    x.ln()
                }
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
            };
            data.push(y);
        }
        let out = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(out, Op::Unary { kind, a: a.index }))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log. Errors on any non-positive element (never returns NaN).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    /// `max(x, 0)`. The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Multiply by a compile-time-known scalar without recording a leaf.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| c * x).collect() };
        Ok(self.push(out, Op::Scale { a: a.index, c }))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| x + c).collect() };
        Ok(self.push(out, Op::AddConst { a: a.index }))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution (cross-correlation): input `[H, W, c_in]`, kernel
    /// `[kh, kw, c_in, c_out]`, output `[ho, wo, c_out]`. `Valid` requires the
    /// kernel to fit inside the input; `SameZero` zero-pads so
    /// `ho = ceil(H / stride)`, splitting the pad with the smaller half first.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: Pad) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let x = &self.nodes[input.index].value;
        let k = &self.nodes[kernel.index].value;
        let (out, pt, pl) = conv2d_forward(x, k, stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input: input.index, kernel: kernel.index, stride, pt, pl }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let axes = normalize_axes(axes, va.shape.len())?;
        let out = reduce_forward(kind, va, &axes);
        Ok(self.push(out, Op::Reduce { kind, a: a.index, axes }))
    }

    /// Sum over the listed axes. An empty axis list is the identity.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    /// Mean over the listed axes. An empty axis list is the identity.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    /// Sum over all axes, producing a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let rank = self.nodes[a.index].value.shape.len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(a, &axes)
    }

    // ── linear algebra and structure ────────────────────────────────────

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.nodes[a.index].value;
        let vb = &self.nodes[b.index].value;
        let out = matmul_forward(va, vb)?;
        Ok(self.push(out, Op::Matmul { a: a.index, b: b.index }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let out = transpose2_forward(va)?;
        Ok(self.push(out, Op::Transpose2 { a: a.index }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let n: usize = shape.iter().product();
        if n != va.numel() {
            return Err(Error::Shape(format!(
                "reshape from {:?} to {:?} changes element count",
                va.shape, shape
            )));
        }
        let out = Tensor { shape: shape.to_vec(), data: va.data.clone() };
        Ok(self.push(out, Op::Reshape { a: a.index }))
    }

    /// Concatenate two rank-3 tensors along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.nodes[a.index].value;
        let vb = &self.nodes[b.index].value;
        let (ha, wa, ca) = dims3(va)?;
        let (hb, wb, cb) = dims3(vb)?;
        if ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat_c spatial mismatch: {:?} vs {:?}",
                va.shape, vb.shape
            )));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for y in 0..ha {
            for x in 0..wa {
                for c in 0..ca {
                    data.push(va.at3(y, x, c));
                }
                for c in 0..cb {
                    data.push(vb.at3(y, x, c));
                }
            }
        }
        let out = Tensor { shape: vec![ha, wa, ca + cb], data };
        Ok(self.push(out, Op::ConcatC { a: a.index, b: b.index, ca }))
    }

    /// Slice channels `from..to` of a rank-3 tensor.
    pub fn slice_c(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        let (h, w, c) = dims3(va)?;
        if from >= to || to > c {
            return Err(Error::Shape(format!(
                "slice_c range {from}..{to} invalid for {c} channels"
            )));
        }
        let cs = to - from;
        let mut data = Vec::with_capacity(h * w * cs);
        for y in 0..h {
            for x in 0..w {
                for cc in from..to {
                    data.push(va.at3(y, x, cc));
                }
            }
        }
        let out = Tensor { shape: vec![h, w, cs], data };
        Ok(self.push(out, Op::SliceC { a: a.index, from, to }))
    }

    /// Broadcast a rank-1 `[C]` tensor to `[h, w, C]`.
    pub fn expand_hw(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        if va.shape.len() != 1 {
            return Err(Error::Shape(format!("expand_hw expects rank-1, got {:?}", va.shape)));
        }
        let c = va.shape[0];
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            data.extend_from_slice(&va.data);
        }
        let out = Tensor { shape: vec![h, w, c], data };
        Ok(self.push(out, Op::ExpandHw { a: a.index }))
    }

    /// Embed a rank-1 `[C]` tensor as the diagonal of a `[C, C]` matrix.
    pub fn diag_mat(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        if va.shape.len() != 1 {
            return Err(Error::Shape(format!("diag_mat expects rank-1, got {:?}", va.shape)));
        }
        let c = va.shape[0];
        let mut out = Tensor::zeros(&[c, c]);
        for i in 0..c {
            out.data[i * c + i] = va.data[i];
        }
        Ok(self.push(out, Op::DiagMat { a: a.index }))
    }

    /// Extract one element (by flat index) as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        self.check(a)?;
        let va = &self.nodes[a.index].value;
        if idx >= va.numel() {
            return Err(Error::Shape(format!(
                "pick index {idx} out of range for {} elements",
                va.numel()
            )));
        }
        let out = Tensor::scalar(va.data[idx]);
        Ok(self.push(out, Op::Pick { a: a.index, idx }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to every leaf (zeros for leaves the root does not reach).
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if self.nodes[root.index].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.index].value.shape
            )));
        }
        let mut acc: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.index].value.shape.clone();
        acc[root.index] = Some(Tensor::full(&root_shape, 1.0));
        let mut map: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=root.index).rev() {
            let Some(g) = acc[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    map[i] = Some(g);
                }
                Op::Constant => {}
                Op::Unary { kind, a } => {
                    let (a, kind) = (*a, *kind);
                    let va = &self.nodes[a].value;
                    let out = &self.nodes[i].value;
                    let mut d = Tensor::zeros(&va.shape);
                    for j in 0..d.data.len() {
                        let gj = g.data[j];
                        d.data[j] = match kind {
                            UnaryKind::Neg => -gj,
                            UnaryKind::Exp => gj * out.data[j],
                            UnaryKind::Log => gj / va.data[j],
                            UnaryKind::Tanh => gj * (1.0 - out.data[j] * out.data[j]),
                            UnaryKind::Relu => {
                                if va.data[j] > 0.0 {
                                    gj
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                    accumulate(&mut acc[a], d);
                }
                Op::Binary { kind, a, b } => {
                    let (kind, a, b) = (*kind, *a, *b);
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let (da, db) = binary_backward(kind, va, vb, &g);
                    accumulate(&mut acc[a], da);
                    accumulate(&mut acc[b], db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let d = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|&x| c * x).collect(),
                    };
                    accumulate(&mut acc[a], d);
                }
                Op::AddConst { a } => {
                    accumulate(&mut acc[*a], g);
                }
                Op::Conv2d { input, kernel, stride, pt, pl, .. } => {
                    let (input, kernel, stride, pt, pl) = (*input, *kernel, *stride, *pt, *pl);
                    let x = &self.nodes[input].value;
                    let k = &self.nodes[kernel].value;
                    let (dx, dk) = conv2d_backward(x, k, &g, stride, pt, pl);
                    accumulate(&mut acc[input], dx);
                    accumulate(&mut acc[kernel], dk);
                }
                Op::Reduce { kind, a, axes } => {
                    let (kind, a, axes) = (*kind, *a, axes.clone());
                    let va = &self.nodes[a].value;
                    let d = reduce_backward(kind, va, &axes, &g);
                    accumulate(&mut acc[a], d);
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let vbt = transpose2_forward(vb).expect("recorded matmul operand is rank-2");
                    let vat = transpose2_forward(va).expect("recorded matmul operand is rank-2");
                    let da = matmul_forward(&g, &vbt).expect("matmul backward shape");
                    let db = matmul_forward(&vat, &g).expect("matmul backward shape");
                    accumulate(&mut acc[a], da);
                    accumulate(&mut acc[b], db);
                }
                Op::Transpose2 { a } => {
                    let a = *a;
                    let d = transpose2_forward(&g).expect("transpose grad is rank-2");
                    accumulate(&mut acc[a], d);
                }
                Op::Reshape { a } => {
                    let a = *a;
                    let shape = self.nodes[a].value.shape.clone();
                    let d = Tensor { shape, data: g.data.clone() };
                    accumulate(&mut acc[a], d);
                }
                Op::ConcatC { a, b, ca } => {
                    let (a, b, ca) = (*a, *b, *ca);
                    let (h, w, ct) = dims3(&g).expect("concat grad is rank-3");
                    let cb = ct - ca;
                    let mut da = Tensor::zeros(&[h, w, ca]);
                    let mut db = Tensor::zeros(&[h, w, cb]);
                    for y in 0..h {
                        for x in 0..w {
                            for c in 0..ca {
                                da.set3(y, x, c, g.at3(y, x, c));
                            }
                            for c in 0..cb {
                                db.set3(y, x, c, g.at3(y, x, ca + c));
                            }
                        }
                    }
                    accumulate(&mut acc[a], da);
                    accumulate(&mut acc[b], db);
                }
                Op::SliceC { a, from, to } => {
                    let (a, from, to) = (*a, *from, *to);
                    let (h, w, c) = dims3(&self.nodes[a].value).expect("slice input is rank-3");
                    let mut da = Tensor::zeros(&[h, w, c]);
                    for y in 0..h {
                        for x in 0..w {
                            for cc in from..to {
                                da.set3(y, x, cc, g.at3(y, x, cc - from));
                            }
                        }
                    }
                    accumulate(&mut acc[a], da);
                }
                Op::ExpandHw { a } => {
                    let a = *a;
                    let (h, w, c) = dims3(&g).expect("expand grad is rank-3");
                    let mut da = Tensor::zeros(&[c]);
                    for y in 0..h {
                        for x in 0..w {
                            for cc in 0..c {
                                da.data[cc] += g.at3(y, x, cc);
                            }
                        }
                    }
                    accumulate(&mut acc[a], da);
                }
                Op::DiagMat { a } => {
                    let a = *a;
                    let c = self.nodes[a].value.shape[0];
                    let mut da = Tensor::zeros(&[c]);
                    for j in 0..c {
                        da.data[j] = g.data[j * c + j];
                    }
                    accumulate(&mut acc[a], da);
                }
                Op::Pick { a, idx } => {
                    let (a, idx) = (*a, *idx);
                    let mut da = Tensor::zeros(&self.nodes[a].value.shape.clone());
                    da.data[idx] = g.data[0];
                    accumulate(&mut acc[a], da);
                }
            }
        }

        // Leaves the root never reaches get explicit zero gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && map[i].is_none() {
                map[i] = Some(Tensor::zeros(&node.value.shape));
            }
        }
        Ok(Gradients { tape: self.id, map })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(delta.data.iter()) {
                *a += b;
            }
        }
    }
}

// ── op kernels ───────────────────────────────────────────────────────────

fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if b.numel() == 1 {
        let y = b.data[0];
        let data = a.data.iter().map(|&x| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if a.numel() == 1 {
        let x = a.data[0];
        let data = b.data.iter().map(|&y| f(x, y)).collect();
        return Ok(Tensor { shape: b.shape.clone(), data });
    }
    Err(Error::Shape(format!(
        "elementwise {:?} on incompatible shapes {:?} and {:?} (only scalar broadcast is allowed)",
        kind, a.shape, b.shape
    )))
}

fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    // Scalar operands fold their gradient into a single accumulator; the
    // `i % len` indexing is only exercised when that operand has one element.
    let (na, nb) = (a.numel(), b.numel());
    let mut ga = vec![0.0; na];
    let mut gb = vec![0.0; nb];
    for i in 0..g.numel() {
        let xa = a.data[i % na];
        let xb = b.data[i % nb];
        let gi = g.data[i];
        match kind {
            BinaryKind::Add => {
                ga[i % na] += gi;
                gb[i % nb] += gi;
            }
            BinaryKind::Sub => {
                ga[i % na] += gi;
                gb[i % nb] -= gi;
            }
            BinaryKind::Mul => {
                ga[i % na] += gi * xb;
                gb[i % nb] += gi * xa;
            }
        }
    }
    (
        Tensor { shape: a.shape.clone(), data: ga },
        Tensor { shape: b.shape.clone(), data: gb },
    )
}

fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
) -> Result<(usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be at least 1".into()));
    }
    match pad {
        Pad::Valid => {
            if kh > h || kw > w {
                return Err(Error::Shape(format!(
                    "conv2d dimension underflow: kernel {kh}x{kw} exceeds input {h}x{w}"
                )));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Pad::SameZero => {
            let ho = h.div_ceil(stride);
            let wo = w.div_ceil(stride);
            let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
            Ok((ho, wo, pad_h / 2, pad_w / 2))
        }
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: Pad) -> Result<(Tensor, usize, usize)> {
    let (h, w, ci) = dims3(x)?;
    let (kh, kw, kci, co) = dims4(k)?;
    if ci != kci {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {ci}, kernel expects {kci}"
        )));
    }
    let (ho, wo, pt, pl) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[ho, wo, co]);
    for oy in 0..ho {
        for ox in 0..wo {
            for c_out in 0..co {
                let mut s = 0.0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for c_in in 0..ci {
                            s += x.at3(iy as usize, ix as usize, c_in)
                                * k.data[((ky * kw + kx) * kci + c_in) * co + c_out];
                        }
                    }
                }
                out.set3(oy, ox, c_out, s);
            }
        }
    }
    Ok((out, pt, pl))
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    pt: usize,
    pl: usize,
) -> (Tensor, Tensor) {
    let (h, w, ci) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, _, co) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    let (ho, wo) = (g.shape[0], g.shape[1]);
    let mut dx = Tensor::zeros(&[h, w, ci]);
    let mut dk = Tensor::zeros(&k.shape.clone());
    for oy in 0..ho {
        for ox in 0..wo {
            for c_out in 0..co {
                let gv = g.at3(oy, ox, c_out);
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for c_in in 0..ci {
                            let ki = ((ky * kw + kx) * ci + c_in) * co + c_out;
                            let xi = ((iy as usize) * w + ix as usize) * ci + c_in;
                            dx.data[xi] += k.data[ki] * gv;
                            dk.data[ki] += x.data[xi] * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Shape(format!("duplicate reduce axis {}", pair[0])));
        }
    }
    if let Some(&last) = sorted.last() {
        if last >= rank {
            return Err(Error::Shape(format!("reduce axis {last} out of range for rank {rank}")));
        }
    }
    Ok(sorted)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// Map a flat input index to the flat index of its reduction cell.
fn reduce_cell_index(shape: &[usize], axes: &[usize], flat: usize) -> usize {
    let rank = shape.len();
    let mut rem = flat;
    let mut coords = vec![0usize; rank];
    for i in (0..rank).rev() {
        coords[i] = rem % shape[i];
        rem /= shape[i];
    }
    let mut out = 0usize;
    for i in 0..rank {
        if axes.contains(&i) {
            continue;
        }
        out = out * shape[i] + coords[i];
    }
    out
}

fn reduce_forward(kind: ReduceKind, a: &Tensor, axes: &[usize]) -> Tensor {
    if axes.is_empty() {
        return a.clone();
    }
    let out_shape = reduced_shape(&a.shape, axes);
    let mut out = Tensor::zeros(&out_shape);
    for flat in 0..a.numel() {
        out.data[reduce_cell_index(&a.shape, axes, flat)] += a.data[flat];
    }
    if kind == ReduceKind::Mean {
        let count: usize = axes.iter().map(|&ax| a.shape[ax]).product();
        for v in &mut out.data {
            *v /= count as f64;
        }
    }
    out
}

fn reduce_backward(kind: ReduceKind, a: &Tensor, axes: &[usize], g: &Tensor) -> Tensor {
    if axes.is_empty() {
        return g.clone();
    }
    let count: usize = axes.iter().map(|&ax| a.shape[ax]).product();
    let scale = match kind {
        ReduceKind::Sum => 1.0,
        ReduceKind::Mean => 1.0 / count as f64,
    };
    let mut d = Tensor::zeros(&a.shape.clone());
    for flat in 0..a.numel() {
        d.data[flat] = g.data[reduce_cell_index(&a.shape, axes, flat)] * scale;
    }
    d
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul on shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, kk) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..kk {
                s += a.data[i * kk + t] * b.data[t * n + j];
            }
            out.data[i * n + j] = s;
        }
    }
    Ok(out)
}

fn transpose2_forward(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::Shape(format!("transpose2 expects rank-2, got {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(out)
}

// ── jacobian helper ──────────────────────────────────────────────────────

/// Assemble the dense Jacobian of the recorded outputs with respect to `wrt`
/// (one backward pass per output element). Row `r` is the gradient of the
/// r-th output element, outputs flattened in the order given.
pub fn jacobian_rows(tape: &mut Tape, outputs: &[Var], wrt: Var) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for &out in outputs {
        let n = tape.value(out)?.numel();
        for j in 0..n {
            let root = tape.pick(out, j)?;
            let grads = tape.backward(root)?;
            let row = grads
                .wrt(wrt)
                .ok_or_else(|| Error::Tape("jacobian target is not a leaf".into()))?;
            rows.push(row.data().to_vec());
        }
    }
    Ok(rows)
}

/// log |det M| of a square matrix via LU decomposition with partial pivoting.
pub fn log_abs_det(matrix: &[Vec<f64>]) -> Result<f64> {
    let n = matrix.len();
    let mut m: Vec<Vec<f64>> = matrix.to_vec();
    for row in &m {
        if row.len() != n {
            return Err(Error::Shape("log_abs_det requires a square matrix".into()));
        }
    }
    let mut log_det = 0.0;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if m[i][k].abs() > m[piv][k].abs() {
                piv = i;
            }
        }
        if m[piv][k] == 0.0 {
            return Err(Error::Domain("singular matrix in log_abs_det".into()));
        }
        m.swap(k, piv);
        log_det += m[k][k].abs().ln();
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    Ok(log_det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{finite_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn leaf3(tape: &mut Tape, h: usize, w: usize, c: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(vec![h, w, c], data).unwrap())
    }

    #[test]
    fn exp_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.exp(x).unwrap();
        let v = t.value(y).unwrap();
        let e = std::f64::consts::E;
        assert!((v.data()[0] - e).abs() < 1e-12);
        assert!((v.data()[1] - e * e).abs() < 1e-11);
        assert!((v.data()[2] - e * e * e).abs() < 1e-10);
    }

    #[test]
    fn tanh_gradient_matches_frozen_value_and_fd() {
        // Oracle: central finite difference of tanh at 0.5, frozen to the
        // analytically derived 1 - tanh^2(0.5) = 0.7864477329659274.
        let fd = finite_diff(|x| Ok(x[0].tanh()), &[0.5], 1e-6).unwrap()[0];
        assert!((fd - 0.786448).abs() < 1e-6);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = t.tanh(x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        let gx = g.wrt(x).unwrap().data()[0];
        assert!((gx - 0.786448).abs() < 1e-6);
        assert!((gx - fd).abs() < 1e-9);
    }

    #[test]
    fn relu_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, -0.5]).unwrap());
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_mismatch_rejected_but_scalar_broadcast_allowed() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        let s = t.leaf(Tensor::scalar(10.0));
        let y = t.add(a, s).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[11.0, 12.0]);
        let y2 = t.sub(s, a).unwrap();
        assert_eq!(t.value(y2).unwrap().data(), &[9.0, 8.0]);
        // Scalar side accumulates the summed gradient.
        let total = t.sum_all(y).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.wrt(s).unwrap().data(), &[2.0]);
    }

    #[test]
    fn elementwise_dispatch_arity_checked() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(t.elementwise(ElemOp::Add, a, None).is_err());
        assert!(t.elementwise(ElemOp::Exp, a, Some(a)).is_err());
        let y = t.elementwise(ElemOp::Neg, a, None).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[-1.0, -2.0]);
    }

    #[test]
    fn conv2d_valid_ones_kernel_is_block_sums() {
        let mut t = Tape::new();
        let x = leaf3(&mut t, 3, 3, 1, (1..=9).map(|v| v as f64).collect());
        let k = t.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0; 4]).unwrap());
        let y = t.conv2d(x, k, 1, Pad::Valid).unwrap();
        let v = t.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 2, 1]);
        // 2x2 windows of [[1,2,3],[4,5,6],[7,8,9]]
        assert_eq!(v.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_same_zero_shapes_and_values() {
        let mut t = Tape::new();
        let x = leaf3(&mut t, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let k = t.constant(Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap());
        let y = t.conv2d(x, k, 1, Pad::SameZero).unwrap();
        let v = t.value(y).unwrap();
        assert_eq!(v.shape(), &[2, 2, 1]);
        // Every output sees all in-bounds pixels of the 2x2 input.
        assert_eq!(v.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut t = Tape::new();
        let x = leaf3(&mut t, 4, 4, 2, (0..32).map(|v| v as f64).collect());
        let k = t.constant(Tensor::new(vec![2, 2, 2, 3], vec![0.5; 24]).unwrap());
        let y = t.conv2d(x, k, 2, Pad::Valid).unwrap();
        assert_eq!(t.value(y).unwrap().shape(), &[2, 2, 3]);
    }

    #[test]
    fn conv2d_dimension_underflow_errors() {
        let mut t = Tape::new();
        let x = leaf3(&mut t, 2, 2, 1, vec![0.0; 4]);
        let k = t.constant(Tensor::new(vec![3, 3, 1, 1], vec![0.0; 9]).unwrap());
        assert!(matches!(t.conv2d(x, k, 1, Pad::Valid), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_kernel_gradient_matches_fd_on_random_5x5() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[5, 5, 1], 1.0, &mut rng);
        let k0 = Tensor::randn(&[3, 3, 1, 2], 0.5, &mut rng);
        let eval = |kd: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let k = t.leaf(Tensor::new(vec![3, 3, 1, 2], kd.to_vec()).unwrap());
            let y = t.conv2d(x, k, 1, Pad::SameZero).unwrap();
            let yy = t.mul(y, y).unwrap();
            let s = t.sum_all(yy).unwrap();
            t.value(s).unwrap().item()
        };
        let fd = finite_diff(eval, k0.data(), 1e-6).unwrap();

        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let k = t.leaf(k0.clone());
        let y = t.conv2d(x, k, 1, Pad::SameZero).unwrap();
        let yy = t.mul(y, y).unwrap();
        let s = t.sum_all(yy).unwrap();
        let g = t.backward(s).unwrap();
        let ad = g.wrt(k).unwrap();
        for (a, b) in ad.data().iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-6, "ad {a} vs fd {b}");
        }
    }

    #[test]
    fn conv2d_input_gradient_matches_fd_with_stride() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x0 = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let k0 = Tensor::randn(&[2, 2, 2, 1], 0.7, &mut rng);
        let eval = |xd: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![4, 4, 2], xd.to_vec()).unwrap());
            let k = t.constant(k0.clone());
            let y = t.conv2d(x, k, 2, Pad::Valid).unwrap();
            let yy = t.mul(y, y).unwrap();
            let s = t.sum_all(yy).unwrap();
            t.value(s).unwrap().item()
        };
        let fd = finite_diff(eval, x0.data(), 1e-6).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let k = t.constant(k0.clone());
        let y = t.conv2d(x, k, 2, Pad::Valid).unwrap();
        let yy = t.mul(y, y).unwrap();
        let s = t.sum_all(yy).unwrap();
        let g = t.backward(s).unwrap();
        for (a, b) in g.wrt(x).unwrap().data().iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-6, "ad {a} vs fd {b}");
        }
    }

    #[test]
    fn reduce_mean_and_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.mean(x, &[0]).unwrap();
        assert_eq!(t.value(m).unwrap().item().unwrap(), 2.5);
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_empty_axes_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.mean(x, &[]).unwrap();
        assert_eq!(t.value(m).unwrap().data(), t.value(x).unwrap().data());
        assert_eq!(t.value(m).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn reduce_axis_subset_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
        let eval = |xd: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 3, 2], xd.to_vec()).unwrap());
            let m = t.mean(x, &[0, 2]).unwrap();
            let mm = t.mul(m, m).unwrap();
            let s = t.sum_all(mm).unwrap();
            t.value(s).unwrap().item()
        };
        let fd = finite_diff(eval, x0.data(), 1e-6).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let m = t.mean(x, &[0, 2]).unwrap();
        let mm = t.mul(m, m).unwrap();
        let s = t.sum_all(mm).unwrap();
        let g = t.backward(s).unwrap();
        for (a, b) in g.wrt(x).unwrap().data().iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn duplicate_or_out_of_range_axes_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(t.sum(x, &[0, 0]).is_err());
        assert!(t.sum(x, &[2]).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let xx = t.mul(x, x).unwrap();
        let s = t.sum_all(xx).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn two_backward_passes_identical() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap());
        let y = t.tanh(x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.wrt(x).unwrap().data(), g2.wrt(x).unwrap().data());
    }

    #[test]
    fn chained_ops_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x0 = Tensor::randn(&[6], 1.0, &mut rng);
        let eval = |xd: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![6], xd.to_vec()).unwrap());
            let r = t.relu(x).unwrap();
            let y = t.tanh(r).unwrap();
            let s = t.sum_all(y).unwrap();
            t.value(s).unwrap().item()
        };
        let fd = finite_diff(eval, x0.data(), 1e-6).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let r = t.relu(x).unwrap();
        let y = t.tanh(r).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        for (a, b) in g.wrt(x).unwrap().data().iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar_root_on_this_tape() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(Error::Tape(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(Error::Tape(_))));
        assert!(matches!(t.value(y), Err(Error::Tape(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_transpose_reshape_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let a0 = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let b0 = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let eval = |ad: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(vec![3, 2], ad.to_vec()).unwrap());
            let b = t.constant(b0.clone());
            let m = t.matmul(a, b).unwrap();
            let mt = t.transpose2(m).unwrap();
            let r = t.reshape(mt, &[12]).unwrap();
            let rr = t.mul(r, r).unwrap();
            let s = t.sum_all(rr).unwrap();
            t.value(s).unwrap().item()
        };
        let fd = finite_diff(eval, a0.data(), 1e-6).unwrap();
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let b = t.constant(b0.clone());
        let m = t.matmul(a, b).unwrap();
        let mt = t.transpose2(m).unwrap();
        let r = t.reshape(mt, &[12]).unwrap();
        let rr = t.mul(r, r).unwrap();
        let s = t.sum_all(rr).unwrap();
        let g = t.backward(s).unwrap();
        for (x, y) in g.wrt(a).unwrap().data().iter().zip(fd.iter()) {
            assert!(rel_err(*x, *y) < 1e-6);
        }
    }

    #[test]
    fn structure_ops_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let x0 = Tensor::randn(&[2, 2, 4], 1.0, &mut rng);
        let v0 = Tensor::randn(&[3], 1.0, &mut rng);
        // slice + concat + expand + diag + pick, all in one graph
        let eval = |xd: &[f64], vd: &[f64]| -> crate::Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![2, 2, 4], xd.to_vec()).unwrap());
            let v = t.leaf(Tensor::new(vec![3], vd.to_vec()).unwrap());
            let a = t.slice_c(x, 0, 3).unwrap();
            let b = t.slice_c(x, 3, 4).unwrap();
            let e = t.expand_hw(v, 2, 2).unwrap();
            let ae = t.mul(a, e).unwrap();
            let cat = t.concat_c(ae, b).unwrap();
            let d = t.diag_mat(v).unwrap();
            let dsum = t.sum_all(d).unwrap();
            let csum = t.sum_all(cat).unwrap();
            let tot = t.add(csum, dsum).unwrap();
            let p = t.pick(cat, 5).unwrap();
            let tot2 = t.add(tot, p).unwrap();
            t.value(tot2).unwrap().item()
        };
        let fdx = finite_diff(|xd| eval(xd, v0.data()), x0.data(), 1e-6).unwrap();
        let fdv = finite_diff(|vd| eval(x0.data(), vd), v0.data(), 1e-6).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let v = t.leaf(v0.clone());
        let a = t.slice_c(x, 0, 3).unwrap();
        let b = t.slice_c(x, 3, 4).unwrap();
        let e = t.expand_hw(v, 2, 2).unwrap();
        let ae = t.mul(a, e).unwrap();
        let cat = t.concat_c(ae, b).unwrap();
        let d = t.diag_mat(v).unwrap();
        let dsum = t.sum_all(d).unwrap();
        let csum = t.sum_all(cat).unwrap();
        let tot = t.add(csum, dsum).unwrap();
        let p = t.pick(cat, 5).unwrap();
        let tot2 = t.add(tot, p).unwrap();
        let g = t.backward(tot2).unwrap();
        for (a, b) in g.wrt(x).unwrap().data().iter().zip(fdx.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
        for (a, b) in g.wrt(v).unwrap().data().iter().zip(fdv.iter()) {
            assert!(rel_err(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn jacobian_of_linear_map_recovers_matrix() {
        let w = vec![vec![2.0, 1.0], vec![-1.0, 3.0]];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let wm = t.constant(Tensor::new(vec![2, 2], vec![2.0, 1.0, -1.0, 3.0]).unwrap());
        let xc = t.reshape(x, &[2, 1]).unwrap();
        let y = t.matmul(wm, xc).unwrap();
        let rows = jacobian_rows(&mut t, &[y], x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((rows[i][j] - w[i][j]).abs() < 1e-12);
            }
        }
        let ld = log_abs_det(&rows).unwrap();
        assert!((ld - 7.0f64.ln()) < 1e-12);
    }

    #[test]
    fn log_abs_det_of_rotation_is_zero() {
        let th: f64 = 0.73;
        let m = vec![vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]];
        assert!(log_abs_det(&m).unwrap().abs() < 1e-14);
    }
}
