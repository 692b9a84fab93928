//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends one node whose inputs all have smaller ids, so the
//! tape is topologically ordered by construction and the backward sweep is a
//! single pass in decreasing id order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::dense::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Identity of a value within one [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded value together with its (lazily allocated) gradient.
#[derive(Debug, Clone)]
pub struct DiffValue<T> {
    data: Tensor<T>,
    grad: Option<Tensor<T>>,
    id: ValueId,
    requires_grad: bool,
}

impl<T: Scalar> DiffValue<T> {
    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn id(&self) -> ValueId {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind<T> {
    Sigmoid,
    Gelu,
    Relu,
    Scale(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

/// Geometry of a 2-D convolution over a `[channels × (height·width)]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

const NO_ARGMAX: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(ValueId, ValueId),
    Unary(UnaryKind<T>, ValueId),
    Binary(BinaryKind, ValueId, ValueId, Broadcast),
    AddRowVector(ValueId, ValueId),
    AddColVector(ValueId, ValueId),
    MaxDiff {
        target: ValueId,
        source: ValueId,
        negate: bool,
        argmax: Vec<u32>,
    },
    MeanRows(ValueId),
    Sum(ValueId),
    ConcatCols(ValueId, ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        geom: ConvGeom,
        cols: Tensor<T>,
    },
    RowDot(ValueId, ValueId),
    BceWithLogits {
        logits: ValueId,
        targets: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: DiffValue<T>,
    op: Op<T>,
}

/// Ordered record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn dim_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension {
        op,
        left: a,
        right: b,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Tensor<T>, op: Op<T>, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value: DiffValue {
                data,
                grad: None,
                id,
                requires_grad,
            },
            op,
        });
        id
    }

    fn rg(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].value.requires_grad)
    }

    /// Learnable leaf: receives a gradient on backward.
    pub fn param(&mut self, data: Tensor<T>) -> ValueId {
        self.push(data, Op::Leaf, true)
    }

    /// Constant leaf: no gradient is propagated into it.
    pub fn constant(&mut self, data: Tensor<T>) -> ValueId {
        self.push(data, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &DiffValue<T> {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        self.nodes[id.0].value.data.shape()
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.nodes[id.0].value.grad.as_ref()
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.data(a).matmul(self.data(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn unary(&mut self, kind: UnaryKind<T>, a: ValueId) -> ValueId {
        let x = self.data(a);
        let out = match kind {
            UnaryKind::Sigmoid => x.map(T::sigmoid),
            UnaryKind::Gelu => x.map(T::gelu),
            UnaryKind::Relu => x.map(|v| v.max(T::zero())),
            UnaryKind::Scale(s) => x.scale(s),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn scale(&mut self, a: ValueId, s: T) -> ValueId {
        self.unary(UnaryKind::Scale(s), a)
    }

    /// Elementwise binary op. Shapes must match, or one side must be 1×1.
    pub fn binary(&mut self, kind: BinaryKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = if sa == sb {
            Broadcast::None
        } else if sa == (1, 1) {
            Broadcast::LeftScalar
        } else if sb == (1, 1) {
            Broadcast::RightScalar
        } else {
            return Err(dim_err("elementwise", sa, sb));
        };
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (xa, xb) = (self.data(a), self.data(b));
        let out = match bc {
            Broadcast::None => xa.zip_map(xb, f),
            Broadcast::LeftScalar => {
                let s = xa.data()[0];
                xb.map(|y| f(s, y))
            }
            Broadcast::RightScalar => {
                let s = xb.data()[0];
                xa.map(|x| f(x, s))
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Adds a `[1 × cols]` bias to every row.
    pub fn add_row_vector(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb != (1, sx.1) {
            return Err(dim_err("add_row_vector", sx, sb));
        }
        let mut out = self.data(x).clone();
        let b = self.data(bias).data().to_vec();
        for r in 0..sx.0 {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowVector(x, bias), rg))
    }

    /// Adds a `[rows × 1]` bias to every column.
    pub fn add_col_vector(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb != (sx.0, 1) {
            return Err(dim_err("add_col_vector", sx, sb));
        }
        let mut out = self.data(x).clone();
        let b = self.data(bias).data().to_vec();
        for (r, &bv) in b.iter().enumerate() {
            for o in out.row_mut(r) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddColVector(x, bias), rg))
    }

    /// Max-relative aggregation between two node sets.
    ///
    /// Row `i` of the output is the elementwise max over `j ∈ neighbors[i]` of
    /// `source[j] − target[i]`, or of `target[i] − source[j]` when `negate` is
    /// set. Rows with no neighbors are zero. On backward each output element
    /// routes its gradient to a single contributor; among equal maxima the
    /// lowest source index wins.
    pub fn max_diff(
        &mut self,
        target: ValueId,
        source: ValueId,
        neighbors: &[Vec<usize>],
        negate: bool,
    ) -> Result<ValueId> {
        let (st, ss) = (self.shape(target), self.shape(source));
        if st.1 != ss.1 {
            return Err(dim_err("max_diff", st, ss));
        }
        if neighbors.len() != st.0 {
            return Err(Error::Topology(format!(
                "{} adjacency lists for {} target rows",
                neighbors.len(),
                st.0
            )));
        }
        let d = st.1;
        let tgt = self.data(target);
        let src = self.data(source);
        let mut out = Tensor::zeros(st.0, d);
        let mut argmax = vec![NO_ARGMAX; st.0 * d];
        for (i, nbrs) in neighbors.iter().enumerate() {
            if let Some(&bad) = nbrs.iter().find(|&&j| j >= ss.0) {
                return Err(Error::Topology(format!(
                    "neighbor index {bad} out of range for {} nodes",
                    ss.0
                )));
            }
            if nbrs.is_empty() {
                continue;
            }
            let trow = tgt.row(i);
            for c in 0..d {
                let mut best = T::neg_infinity();
                let mut best_j = usize::MAX;
                for &j in nbrs {
                    let diff = src.get(j, c) - trow[c];
                    let v = if negate { -diff } else { diff };
                    if v > best || (v == best && j < best_j) {
                        best = v;
                        best_j = j;
                    }
                }
                out.set(i, c, best);
                argmax[i * d + c] = best_j as u32;
            }
        }
        let rg = self.rg(&[target, source]);
        Ok(self.push(
            out,
            Op::MaxDiff {
                target,
                source,
                negate,
                argmax,
            },
            rg,
        ))
    }

    /// Max-relative aggregation within one node set: row `i` is
    /// `max_{j ∈ N(i)} (x_j − x_i)`.
    pub fn neighbor_max_diff(&mut self, nodes: ValueId, adjacency: &[Vec<usize>]) -> Result<ValueId> {
        self.max_diff(nodes, nodes, adjacency, false)
    }

    /// `[N × D] → [1 × D]`
    pub fn mean_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let x = self.data(a);
        if x.rows() == 0 {
            return Err(Error::Domain("mean_rows of an empty tensor".into()));
        }
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(x.rows() as f64);
        let out = out.scale(inv);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let x = self.data(a);
        if x.is_empty() {
            return Err(Error::Domain("sum of an empty tensor".into()));
        }
        let out = Tensor::scalar(x.sum());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// `[N × D₁], [N × D₂] → [N × (D₁+D₂)]` with `a` in the leading columns.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(dim_err("concat_cols", sa, sb));
        }
        if sa.0 == 0 {
            return Err(Error::Domain("concat_cols of empty tensors".into()));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(sa.0 * (sa.1 + sb.1));
        for r in 0..sa.0 {
            data.extend_from_slice(xa.row(r));
            data.extend_from_slice(xb.row(r));
        }
        let out = Tensor::from_vec(sa.0, sa.1 + sb.1, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let out = self.data(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
        let out = self.data(a).reshape(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Per-row normalization with learned `[1 × D]` gain and shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: T) -> Result<ValueId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg != (1, sx.1) || sb != (1, sx.1) {
            return Err(dim_err("layer_norm", sx, sg));
        }
        let d = T::of(sx.1 as f64);
        let xs = self.data(x);
        let g = self.data(gamma).data();
        let b = self.data(beta).data();
        let mut xhat = Tensor::zeros(sx.0, sx.1);
        let mut out = Tensor::zeros(sx.0, sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        for r in 0..sx.0 {
            let row = xs.row(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..sx.1 {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// 2-D convolution without bias; `x` is `[C_in × H·W]`, `w` is
    /// `[C_out × C_in·K·K]`, output is `[C_out × H'·W']`.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, geom: ConvGeom) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx != (geom.in_channels, geom.height * geom.width) {
            return Err(dim_err("conv2d input", sx, (geom.in_channels, geom.height * geom.width)));
        }
        if sw != (geom.out_channels, geom.patch_len()) {
            return Err(dim_err("conv2d weight", sw, (geom.out_channels, geom.patch_len())));
        }
        if geom.height + 2 * geom.padding < geom.kernel || geom.width + 2 * geom.padding < geom.kernel {
            return Err(Error::Shape("convolution kernel larger than padded input".into()));
        }
        let cols = im2col(self.data(x), &geom);
        let p = geom.out_height() * geom.out_width();
        let mut out = Tensor::zeros(geom.out_channels, p);
        gemm_nn(
            self.data(w).data(),
            cols.data(),
            out.data_mut(),
            geom.out_channels,
            geom.patch_len(),
            p,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// `[S × C], [S × C] → [S × 1]`, one dot product per row.
    pub fn row_dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("row_dot", sa, sb));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let data = (0..sa.0)
            .map(|r| xa.row(r).iter().zip(xb.row(r)).map(|(&p, &q)| p * q).sum())
            .collect();
        let out = Tensor::from_vec(sa.0, 1, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: ValueId, targets: &Tensor<T>) -> Result<ValueId> {
        let sl = self.shape(logits);
        if sl != targets.shape() {
            return Err(dim_err("bce_with_logits", sl, targets.shape()));
        }
        if sl.0 * sl.1 == 0 {
            return Err(Error::Domain("bce over zero classes".into()));
        }
        let z = self.data(logits);
        let mut total = T::zero();
        for (&zv, &tv) in z.data().iter().zip(targets.data()) {
            total += zv.max(T::zero()) - zv * tv + (T::one() + (-zv.abs()).exp()).ln();
        }
        let loss = total / T::of((sl.0 * sl.1) as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Clears gradients from a previous backward pass.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Propagates gradients from a 1×1 root to every ancestor that requires one.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.nodes[root.0].value.grad = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.value.requires_grad {
                continue;
            }
            let Some(g) = node.value.grad.as_ref() else {
                continue;
            };
            backprop(before, &node.op, &node.value.data, g);
        }
        Ok(())
    }
}

fn grad_slot<T: Scalar>(nodes: &mut [Node<T>], id: ValueId) -> Option<&mut Tensor<T>> {
    let v = &mut nodes[id.0].value;
    if !v.requires_grad {
        return None;
    }
    let (r, c) = v.data.shape();
    Some(v.grad.get_or_insert_with(|| Tensor::zeros(r, c)))
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: ValueId, delta: &Tensor<T>) {
    if let Some(slot) = grad_slot(nodes, id) {
        slot.add_assign(delta);
    }
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.data.shape();
            let n = nodes[b.0].value.data.cols();
            if nodes[a.0].value.requires_grad {
                let bdata = nodes[b.0].value.data.clone();
                let slot = grad_slot(nodes, *a).unwrap();
                gemm_nt(g.data(), bdata.data(), slot.data_mut(), m, n, k);
            }
            if nodes[b.0].value.requires_grad {
                let adata = nodes[a.0].value.data.clone();
                let slot = grad_slot(nodes, *b).unwrap();
                gemm_tn(adata.data(), g.data(), slot.data_mut(), m, k, n);
            }
        }
        Op::Unary(kind, a) => {
            let x = &nodes[a.0].value.data;
            let delta = match kind {
                UnaryKind::Sigmoid => out.zip_map(g, |s, gv| gv * s * (T::one() - s)),
                UnaryKind::Gelu => x.zip_map(g, |xv, gv| gv * xv.gelu_grad()),
                UnaryKind::Relu => x.zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() }),
                UnaryKind::Scale(s) => g.scale(*s),
            };
            accumulate(nodes, *a, &delta);
        }
        Op::Binary(kind, a, b, bc) => {
            let (da, db) = {
                let xa = &nodes[a.0].value.data;
                let xb = &nodes[b.0].value.data;
                let expand = |t: &Tensor<T>, like: &Tensor<T>| -> Tensor<T> {
                    if t.shape() == like.shape() {
                        t.clone()
                    } else {
                        Tensor::full(like.rows(), like.cols(), t.data()[0])
                    }
                };
                let (ea, eb) = match bc {
                    Broadcast::None => (xa.clone(), xb.clone()),
                    Broadcast::LeftScalar => (expand(xa, xb), xb.clone()),
                    Broadcast::RightScalar => (xa.clone(), expand(xb, xa)),
                };
                match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryKind::Mul => (g.zip_map(&eb, |gv, y| gv * y), g.zip_map(&ea, |gv, x| gv * x)),
                }
            };
            let reduce = |t: Tensor<T>, scalar_side: bool| {
                if scalar_side {
                    Tensor::scalar(t.sum())
                } else {
                    t
                }
            };
            accumulate(nodes, *a, &reduce(da, *bc == Broadcast::LeftScalar));
            accumulate(nodes, *b, &reduce(db, *bc == Broadcast::RightScalar));
        }
        Op::AddRowVector(x, bias) => {
            accumulate(nodes, *x, g);
            let mut db = Tensor::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(nodes, *bias, &db);
        }
        Op::AddColVector(x, bias) => {
            accumulate(nodes, *x, g);
            let data = (0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect();
            let db = Tensor::from_vec(g.rows(), 1, data).expect("bias shape");
            accumulate(nodes, *bias, &db);
        }
        Op::MaxDiff {
            target,
            source,
            negate,
            argmax,
        } => {
            let (rows, d) = g.shape();
            let sign = if *negate { -T::one() } else { T::one() };
            if nodes[source.0].value.requires_grad {
                let slot = grad_slot(nodes, *source).unwrap();
                for i in 0..rows {
                    for c in 0..d {
                        let j = argmax[i * d + c];
                        if j != NO_ARGMAX {
                            let cur = slot.get(j as usize, c);
                            slot.set(j as usize, c, cur + sign * g.get(i, c));
                        }
                    }
                }
            }
            if nodes[target.0].value.requires_grad {
                let slot = grad_slot(nodes, *target).unwrap();
                for i in 0..rows {
                    for c in 0..d {
                        if argmax[i * d + c] != NO_ARGMAX {
                            let cur = slot.get(i, c);
                            slot.set(i, c, cur - sign * g.get(i, c));
                        }
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (n, d) = nodes[a.0].value.data.shape();
            let inv = T::one() / T::of(n as f64);
            let mut delta = Tensor::zeros(n, d);
            for r in 0..n {
                for (o, &v) in delta.row_mut(r).iter_mut().zip(g.data()) {
                    *o = v * inv;
                }
            }
            accumulate(nodes, *a, &delta);
        }
        Op::Sum(a) => {
            let (n, d) = nodes[a.0].value.data.shape();
            accumulate(nodes, *a, &Tensor::full(n, d, g.data()[0]));
        }
        Op::ConcatCols(a, b) => {
            let da = nodes[a.0].value.data.cols();
            let db = nodes[b.0].value.data.cols();
            let rows = g.rows();
            let mut ga = Tensor::zeros(rows, da);
            let mut gb = Tensor::zeros(rows, db);
            for r in 0..rows {
                ga.row_mut(r).copy_from_slice(&g.row(r)[..da]);
                gb.row_mut(r).copy_from_slice(&g.row(r)[da..]);
            }
            accumulate(nodes, *a, &ga);
            accumulate(nodes, *b, &gb);
        }
        Op::Transpose(a) => accumulate(nodes, *a, &g.transpose()),
        Op::Reshape(a) => {
            let (r, c) = nodes[a.0].value.data.shape();
            accumulate(nodes, *a, &g.reshape(r, c).expect("reshape preserves size"));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, d) = g.shape();
            let gam = nodes[gamma.0].value.data.data().to_vec();
            let mut dgamma = Tensor::zeros(1, d);
            let mut dbeta = Tensor::zeros(1, d);
            let mut dx = Tensor::zeros(n, d);
            let df = T::of(d as f64);
            for r in 0..n {
                let gr = g.row(r);
                let hr = xhat.row(r);
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for c in 0..d {
                    let dh = gr[c] * gam[c];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[c];
                    dgamma.data_mut()[c] += gr[c] * hr[c];
                    dbeta.data_mut()[c] += gr[c];
                }
                mean_dh = mean_dh / df;
                mean_dh_h = mean_dh_h / df;
                for c in 0..d {
                    let dh = gr[c] * gam[c];
                    dx.set(r, c, inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h));
                }
            }
            accumulate(nodes, *x, &dx);
            accumulate(nodes, *gamma, &dgamma);
            accumulate(nodes, *beta, &dbeta);
        }
        Op::Conv2d { x, w, geom, cols } => {
            let p = geom.out_height() * geom.out_width();
            let k = geom.patch_len();
            if nodes[w.0].value.requires_grad {
                let slot = grad_slot(nodes, *w).unwrap();
                gemm_nt(g.data(), cols.data(), slot.data_mut(), geom.out_channels, p, k);
            }
            if nodes[x.0].value.requires_grad {
                let wdata = nodes[w.0].value.data.clone();
                let mut dcols = Tensor::zeros(k, p);
                gemm_tn(wdata.data(), g.data(), dcols.data_mut(), geom.out_channels, k, p);
                let slot = grad_slot(nodes, *x).unwrap();
                col2im_add(&dcols, geom, slot);
            }
        }
        Op::RowDot(a, b) => {
            let xa = nodes[a.0].value.data.clone();
            let xb = nodes[b.0].value.data.clone();
            let mut ga = Tensor::zeros(xa.rows(), xa.cols());
            let mut gb = Tensor::zeros(xa.rows(), xa.cols());
            for r in 0..xa.rows() {
                let gv = g.get(r, 0);
                for c in 0..xa.cols() {
                    ga.set(r, c, gv * xb.get(r, c));
                    gb.set(r, c, gv * xa.get(r, c));
                }
            }
            accumulate(nodes, *a, &ga);
            accumulate(nodes, *b, &gb);
        }
        Op::BceWithLogits { logits, targets } => {
            let z = &nodes[logits.0].value.data;
            let scale = g.data()[0] / T::of(z.len() as f64);
            let delta = z.zip_map(targets, |zv, tv| (zv.sigmoid() - tv) * scale);
            accumulate(nodes, *logits, &delta);
        }
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, geom: &ConvGeom) -> Tensor<T> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let kk = geom.kernel;
    let mut cols = Tensor::zeros(geom.patch_len(), oh * ow);
    for ci in 0..geom.in_channels {
        let plane = x.row(ci);
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = plane[iy as usize * geom.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &Tensor<T>, geom: &ConvGeom, dx: &mut Tensor<T>) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let kk = geom.kernel;
    for ci in 0..geom.in_channels {
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let src = dcols.row(row);
                let plane = dx.row_mut(ci);
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        plane[iy as usize * geom.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
