//! Define-by-run tape. Every op appends a node holding its forward value;
//! [`Graph::backward`] walks the tape in reverse.
//!
//! Parameter nodes borrow their values from the [`ParamSet`] instead of
//! copying them.

use crate::params::{Grads, ParamId, ParamSet};
use crate::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a valid-padding 2D convolution over HWC images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Length of one im2col row, `k·k·c`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Im2col(Var, ConvGeom),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SliceRows(Var, usize),
    LogSoftmax(Var, Vec<usize>, Vec<bool>),
    Gather(Var, Vec<usize>),
    Entropy(Var, Vec<usize>),
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    /// Some parameter is upstream of this node.
    needs_grad: bool,
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ConcatCols(parts) => parts.iter().copied().for_each(f),
            Op::Im2col(a, _)
            | Op::Relu(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SegmentSum(a, _)
            | Op::SegmentMean(a, _, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::LogSoftmax(a, _, _)
            | Op::Gather(a, _)
            | Op::Entropy(a, _) => f(*a),
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a shape as a matrix: leading dims collapse into rows.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols.max(1), cols)
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` for row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut needs_grad = false;
        op.for_each_parent(|p| needs_grad |= self.nodes[p.0].needs_grad);
        self.nodes.push(Node { shape, value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(x) => x,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn input(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, NnError> {
        if numel(shape) != value.len() {
            return Err(NnError::ShapeMismatch(format!(
                "input of {} values cannot have shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Input))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape.clone();
        self.nodes.push(Node { shape, value: Value::Param(id), op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = as_matrix(self.shape(a));
        let sb = self.shape(b);
        if sb.len() != 2 || sb[0] != k {
            return Err(NnError::ShapeMismatch(format!("matmul {:?} x {:?}", self.shape(a), sb)));
        }
        let n = sb[1];
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut c);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b)))
    }

    /// `a[i, :] + b` for every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, n) = as_matrix(self.shape(a));
        if self.value(b).len() != n {
            return Err(NnError::ShapeMismatch(format!("add_row {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(a).to_vec();
        let _ = m;
        Ok(self.push(shape, out, Op::AddRow(a, b)))
    }

    /// Dense layer `x W + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Patch matrix of a batch of HWC images: input `[batch, h·w·c]` (or
    /// any shape with that many values), output `[batch·oh·ow, k·k·c]`.
    pub fn im2col(&mut self, x: Var, g: ConvGeom) -> Result<Var, NnError> {
        let len = self.value(x).len();
        let il = g.image_len();
        if g.kernel > g.height || g.kernel > g.width || g.stride == 0 || il == 0 || !len.is_multiple_of(il) {
            return Err(NnError::ShapeMismatch(format!("im2col of {len} values with {g:?}")));
        }
        let batch = len / il;
        let (oh, ow, pl) = (g.out_height(), g.out_width(), g.patch_len());
        let xv = self.value(x);
        let mut out = vec![0.0; batch * oh * ow * pl];
        let row_len = g.kernel * g.channels;
        for b in 0..batch {
            let img = &xv[b * il..(b + 1) * il];
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut out[((b * oh + oy) * ow + ox) * pl..][..pl];
                    for ky in 0..g.kernel {
                        let iy = oy * g.stride + ky;
                        let src = (iy * g.width + ox * g.stride) * g.channels;
                        dst[ky * row_len..(ky + 1) * row_len].copy_from_slice(&img[src..src + row_len]);
                    }
                }
            }
        }
        Ok(self.push(vec![batch * oh * ow, pl], out, Op::Im2col(x, g)))
    }

    /// Valid-padding convolution with filters `[k·k·c, f]` and bias `[f]`;
    /// output `[batch, oh·ow·f]` in HWC order.
    pub fn conv2d(&mut self, x: Var, filters: Var, bias: Var, g: ConvGeom) -> Result<Var, NnError> {
        let cols = self.im2col(x, g)?;
        let y = self.dense(cols, filters, bias)?;
        let f = self.shape(filters)[1];
        let per = g.out_height() * g.out_width() * f;
        let batch = self.value(y).len() / per;
        self.reshape(y, &[batch, per])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>, NnError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NnError::ShapeMismatch(format!("{name} {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.binary(a, b, "minimum", f64::min)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Minimum(a, b)))
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var, NnError> {
        if c.len() != self.value(a).len() {
            return Err(NnError::ShapeMismatch(format!("add_const {:?} vs {}", self.shape(a), c.len())));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddConst(a)))
    }

    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var, NnError> {
        if c.len() != self.value(a).len() {
            return Err(NnError::ShapeMismatch(format!("mul_const {:?} vs {}", self.shape(a), c.len())));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulConst(a, c.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// `Σ_i w_i a_i` as a scalar node.
    pub fn weighted_sum(&mut self, a: Var, w: &[f64]) -> Result<Var, NnError> {
        let m = self.mul_const(a, w)?;
        Ok(self.sum(m))
    }

    /// Row sums grouped by segment: `out[seg[i], :] += a[i, :]`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Result<Var, NnError> {
        let (m, n) = as_matrix(self.shape(a));
        if seg.len() != m || seg.iter().any(|&s| s >= n_seg) {
            return Err(NnError::ShapeMismatch(format!("segment_sum of {m} rows into {n_seg}")));
        }
        let av = self.value(a);
        let mut out = vec![0.0; n_seg * n];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..n {
                out[s * n + j] += av[i * n + j];
            }
        }
        Ok(self.push(vec![n_seg, n], out, Op::SegmentSum(a, seg.to_vec())))
    }

    /// Row means grouped by segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Result<Var, NnError> {
        let (m, n) = as_matrix(self.shape(a));
        if seg.len() != m || seg.iter().any(|&s| s >= n_seg) {
            return Err(NnError::ShapeMismatch(format!("segment_mean of {m} rows into {n_seg}")));
        }
        let mut counts = vec![0.0; n_seg];
        for &s in seg {
            counts[s] += 1.0;
        }
        let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
        let av = self.value(a);
        let mut out = vec![0.0; n_seg * n];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..n {
                out[s * n + j] += av[i * n + j];
            }
        }
        for (s, row) in out.chunks_mut(n.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= inv[s]);
        }
        Ok(self.push(vec![n_seg, n], out, Op::SegmentMean(a, seg.to_vec(), inv)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let (m, n) = as_matrix(self.shape(a));
        if idx.iter().any(|&i| i >= m) {
            return Err(NnError::ShapeMismatch(format!("gather_rows index out of {m} rows")));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = as_matrix(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix(self.shape(p));
            if r != rows {
                return Err(NnError::ShapeMismatch(format!("concat_cols rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        if numel(shape) != self.value(a).len() {
            return Err(NnError::ShapeMismatch(format!("reshape {:?} to {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (m, n) = as_matrix(self.shape(a));
        if start > end || end > m {
            return Err(NnError::ShapeMismatch(format!("slice_rows {start}..{end} of {m}")));
        }
        let v = self.value(a)[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], v, Op::SliceRows(a, start)))
    }

    /// Log-softmax over consecutive segments of a flat logit vector.
    /// `offsets` holds segment starts plus the total length. Masked
    /// entries get `-inf` and receive no gradient.
    ///
    /// The normalizer sums exponentials in sorted order so the result does
    /// not depend on the order of entries within a segment.
    pub fn log_softmax_segments(&mut self, logits: Var, offsets: &[usize], mask: &[bool]) -> Result<Var, NnError> {
        let x = self.value(logits);
        if offsets.first() != Some(&0) || *offsets.last().unwrap() != x.len() || mask.len() != x.len() {
            return Err(NnError::ShapeMismatch(format!(
                "log_softmax over {} logits with {} offsets",
                x.len(),
                offsets.len()
            )));
        }
        let mut out = vec![f64::NEG_INFINITY; x.len()];
        let mut terms = Vec::new();
        for w in offsets.windows(2) {
            let (s, e) = (w[0], w[1]);
            let max = (s..e).filter(|&i| mask[i]).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NnError::EmptySegment);
            }
            terms.clear();
            terms.extend((s..e).filter(|&i| mask[i]).map(|i| (x[i] - max).exp()));
            terms.sort_by(f64::total_cmp);
            let lse = max + terms.iter().sum::<f64>().ln();
            for i in s..e {
                if mask[i] {
                    out[i] = x[i] - lse;
                }
            }
        }
        let shape = vec![x.len()];
        Ok(self.push(shape, out, Op::LogSoftmax(logits, offsets.to_vec(), mask.to_vec())))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NnError> {
        let av = self.value(a);
        if idx.iter().any(|&i| i >= av.len()) {
            return Err(NnError::ShapeMismatch(format!("gather index out of {} values", av.len())));
        }
        let out = idx.iter().map(|&i| av[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Gather(a, idx.to_vec())))
    }

    /// Per-segment entropy `-Σ p log p` of a log-probability vector;
    /// `-inf` entries count as zero probability.
    pub fn entropy_segments(&mut self, logp: Var, offsets: &[usize]) -> Result<Var, NnError> {
        let lp = self.value(logp);
        if *offsets.last().unwrap() != lp.len() {
            return Err(NnError::ShapeMismatch("entropy offsets".into()));
        }
        let out: Vec<f64> = offsets
            .windows(2)
            .map(|w| -(w[0]..w[1]).filter(|&i| lp[i].is_finite()).map(|i| lp[i].exp() * lp[i]).sum::<f64>())
            .collect();
        let shape = vec![out.len()];
        Ok(self.push(shape, out, Op::Entropy(logp, offsets.to_vec())))
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads = Grads::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let len = self.value(v).len();
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.values[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = as_matrix(self.shape(*a));
                    let n = self.shape(*b)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, &|s| gemm(m, n, k, &g, false, bv, true, 1.0, s));
                    acc(*b, &|s| gemm(k, m, n, av, true, &g, false, 1.0, s));
                }
                Op::AddRow(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    let n = self.value(*b).len();
                    acc(*b, &|s| {
                        for row in g.chunks(n.max(1)) {
                            add_into(s, row);
                        }
                    });
                }
                Op::Im2col(x, geom) => {
                    let geom = *geom;
                    acc(*x, &|s| col2im(&g, geom, s));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(*a, &|s| {
                        for ((o, &gi), &x) in s.iter_mut().zip(&g).zip(av) {
                            if x > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(o, gi)| *o -= gi));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, &|s| zip3(s, &g, bv, |gi, y| gi * y));
                    acc(*b, &|s| zip3(s, &g, av, |gi, x| gi * x));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(o, gi)| *o += c * gi));
                }
                Op::AddConst(a) => acc(*a, &|s| add_into(s, &g)),
                Op::MulConst(a, c) => acc(*a, &|s| zip3(s, &g, c, |gi, y| gi * y)),
                Op::Exp(a) => {
                    let out = self.value(Var(i));
                    acc(*a, &|s| zip3(s, &g, out, |gi, y| gi * y));
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    acc(*a, &|s| zip3(s, &g, av, |gi, x| 2.0 * x * gi));
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, &|s| zip3(s, &g, av, |gi, x| if x > lo && x < hi { gi } else { 0.0 }));
                }
                Op::Minimum(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, &|s| {
                        for k in 0..s.len() {
                            if av[k] <= bv[k] {
                                s[k] += g[k];
                            }
                        }
                    });
                    acc(*b, &|s| {
                        for k in 0..s.len() {
                            if av[k] > bv[k] {
                                s[k] += g[k];
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(*a, &|s| s.iter_mut().for_each(|o| *o += g0));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len().max(1) as f64;
                    let g0 = g[0] / n;
                    acc(*a, &|s| s.iter_mut().for_each(|o| *o += g0));
                }
                Op::SegmentSum(a, seg) => {
                    let n = node.shape[1];
                    acc(*a, &|s| {
                        for (r, &sg) in seg.iter().enumerate() {
                            add_into(&mut s[r * n..(r + 1) * n], &g[sg * n..(sg + 1) * n]);
                        }
                    });
                }
                Op::SegmentMean(a, seg, inv) => {
                    let n = node.shape[1];
                    acc(*a, &|s| {
                        for (r, &sg) in seg.iter().enumerate() {
                            for j in 0..n {
                                s[r * n + j] += inv[sg] * g[sg * n + j];
                            }
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let n = node.shape[1];
                    acc(*a, &|s| {
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(&mut s[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = as_matrix(self.shape(p)).1;
                        acc(p, &|s| {
                            for r in 0..rows {
                                add_into(&mut s[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                            }
                        });
                        off += w;
                    }
                }
                Op::Reshape(a) => acc(*a, &|s| add_into(s, &g)),
                Op::SliceRows(a, start) => {
                    let n = node.shape[1];
                    let off = start * n;
                    acc(*a, &|s| add_into(&mut s[off..off + g.len()], &g));
                }
                Op::LogSoftmax(a, offsets, mask) => {
                    let out = self.value(Var(i));
                    acc(*a, &|s| {
                        for w in offsets.windows(2) {
                            let total: f64 = (w[0]..w[1]).filter(|&k| mask[k]).map(|k| g[k]).sum();
                            for k in w[0]..w[1] {
                                if mask[k] {
                                    s[k] += g[k] - out[k].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::Gather(a, idx) => {
                    acc(*a, &|s| {
                        for (r, &src) in idx.iter().enumerate() {
                            s[src] += g[r];
                        }
                    });
                }
                Op::Entropy(a, offsets) => {
                    let lp = self.value(*a);
                    acc(*a, &|s| {
                        for (sg, w) in offsets.windows(2).enumerate() {
                            for k in w[0]..w[1] {
                                if lp[k].is_finite() {
                                    s[k] -= g[sg] * lp[k].exp() * (lp[k] + 1.0);
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(grads)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip3(dst: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &gi), &vi) in dst.iter_mut().zip(g).zip(v) {
        *d += f(gi, vi);
    }
}

fn col2im(g: &[f64], geom: ConvGeom, dst: &mut [f64]) {
    let il = geom.image_len();
    let batch = dst.len() / il;
    let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
    let row_len = geom.kernel * geom.channels;
    for b in 0..batch {
        let img = &mut dst[b * il..(b + 1) * il];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &g[((b * oh + oy) * ow + ox) * pl..][..pl];
                for ky in 0..geom.kernel {
                    let iy = oy * geom.stride + ky;
                    let d = (iy * geom.width + ox * geom.stride) * geom.channels;
                    add_into(&mut img[d..d + row_len], &src[ky * row_len..(ky + 1) * row_len]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn ps_with(name: &str, shape: &[usize], vals: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add(name, shape, Init::Zeros, 0).unwrap();
        let id = ps.id(name).unwrap();
        ps.value_mut(id).copy_from_slice(&vals);
        ps
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let ps = ps_with("w", &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let mut g = Graph::new(&ps);
        let w = g.param(ps.id("w").unwrap());
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert!(grads.values[0].iter().all(|&v| v == 1.0));
        let r = g.relu(w);
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.values[0], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_values() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.input(vec![-1.0, 2.0], &[2]).unwrap();
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 2.0]);
    }

    #[test]
    fn backward_needs_a_scalar() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.input(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(NnError::NotScalar(_))));
    }

    #[test]
    fn matmul_matches_naive() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let a = g.input((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let b = g.input((0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(), &[3, 4]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let (av, bv) = (g.value(a).to_vec(), g.value(b).to_vec());
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| av[i * 3 + k] * bv[k * 4 + j]).sum();
                assert_eq!(g.value(c)[i * 4 + j], e);
            }
        }
        assert!(g.matmul(b, a).is_err());
    }

    #[test]
    fn conv_output_geometry() {
        let geom = ConvGeom { height: 24, width: 24, channels: 2, kernel: 5, stride: 2 };
        assert_eq!((geom.out_height(), geom.out_width()), (10, 10));
        let mut ps = ParamSet::new();
        ps.add("f", &[50, 6], Init::TruncatedNormal(0.05), 1).unwrap();
        ps.add("b", &[6], Init::Zeros, 0).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(vec![0.1; 3 * 1152], &[3, 1152]).unwrap();
        let f = g.param(ps.id("f").unwrap());
        let b = g.param(ps.id("b").unwrap());
        let y = g.conv2d(x, f, b, geom).unwrap();
        assert_eq!(g.shape(y), &[3, 600]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let geom = ConvGeom { height: 7, width: 6, channels: 2, kernel: 3, stride: 2 };
        let mut ps = ParamSet::new();
        ps.add("f", &[18, 2], Init::TruncatedNormal(0.5), 3).unwrap();
        ps.add("b", &[2], Init::Constant(0.25), 0).unwrap();
        let img: Vec<f64> = (0..84).map(|v| ((v * 37 % 11) as f64) * 0.1 - 0.4).collect();
        let mut g = Graph::new(&ps);
        let x = g.input(img.clone(), &[1, 84]).unwrap();
        let f = g.param(ps.id("f").unwrap());
        let b = g.param(ps.id("b").unwrap());
        let y = g.conv2d(x, f, b, geom).unwrap();
        let fv = ps.value(ps.id("f").unwrap());
        let (oh, ow) = (geom.out_height(), geom.out_width());
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..2 {
                    let mut s = 0.25;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for c in 0..2 {
                                let pix = img[((oy * 2 + ky) * 6 + ox * 2 + kx) * 2 + c];
                                s += pix * fv[((ky * 3 + kx) * 2 + c) * 2 + o];
                            }
                        }
                    }
                    let got = g.value(y)[(oy * ow + ox) * 2 + o];
                    assert!((got - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn equal_logits_give_uniform_log_probs() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.input(vec![0.3; 5], &[5]).unwrap();
        let lp = g.log_softmax_segments(x, &[0, 5], &[true, false, true, true, true]).unwrap();
        let v = g.value(lp);
        assert_eq!(v[1], f64::NEG_INFINITY);
        for i in [0, 2, 3, 4] {
            assert!((v[i] - 0.25f64.ln()).abs() < 1e-15);
        }
        let h = g.entropy_segments(lp, &[0, 5]).unwrap();
        assert!((g.scalar(h) - 4f64.ln()).abs() < 1e-14);
        assert!(matches!(g.log_softmax_segments(x, &[0, 5], &[false; 5]), Err(NnError::EmptySegment)));
    }
}
