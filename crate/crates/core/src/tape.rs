use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::{CsrPattern, SparseCsr};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Backward-pass fault injection used by the gradient self-check to prove
/// it actually detects broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhBackwardSignFlip,
}

enum Op<T: Real> {
    Leaf,
    Matmul(TensorId, TensorId),
    /// a * b^T
    MatmulNt(TensorId, TensorId),
    /// Static sparse times dense; the sparse side never receives gradient.
    Spmm {
        a: Rc<SparseCsr<T>>,
        b: TensorId,
    },
    /// Sparse times dense where the edge values live on the tape (slot order).
    SpmmEdges {
        pattern: Rc<CsrPattern>,
        vals: TensorId,
        b: TensorId,
    },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, T),
    /// x[n,d] + bias[1,d] broadcast over rows.
    AddRow(TensorId, TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    /// x > 0 ? 1/sqrt(x) : 0, elementwise.
    InvSqrtOrZero(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    RowGather {
        x: TensorId,
        idx: Rc<Vec<usize>>,
    },
    /// out[idx[j], :] += x[j, :]; the adjoint of RowGather.
    ScatterAddRows {
        x: TensorId,
        idx: Rc<Vec<usize>>,
    },
    RowSum(TensorId),
    Sum(TensorId),
    RowLogSumExp(TensorId),
    RowNormalize {
        x: TensorId,
        norms: Vec<T>,
    },
    HConcat(TensorId, TensorId),
    VConcat(TensorId, TensorId),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Spmm { .. } => "spmm",
            Op::SpmmEdges { .. } => "spmm_edges",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elem",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::InvSqrtOrZero(..) => "inv_sqrt_or_zero",
            Op::LayerNorm { .. } => "layernorm",
            Op::RowGather { .. } => "row_gather",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::RowLogSumExp(..) => "row_log_sum_exp",
            Op::RowNormalize { .. } => "row_normalize",
            Op::HConcat(..) => "hconcat",
            Op::VConcat(..) => "vconcat",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.adjoints.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Record of one forward pass, rebuilt for every training step. Nodes are
/// appended in execution order, so inputs always precede consumers.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        debug_assert!(
            value.all_finite(),
            "non-finite values out of {} op",
            op.name()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::dim("matmul_nt", format!("{m}x{ka} * ({n}x{kb})^T")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..n {
                let br = bv.row(j);
                let mut acc = T::ZERO;
                for (&x, &y) in ar.iter().zip(br) {
                    acc += x * y;
                }
                out.set(i, j, acc);
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::MatmulNt(a, b), rg))
    }

    pub fn spmm(&mut self, a: Rc<SparseCsr<T>>, b: TensorId) -> Result<TensorId> {
        let (bk, bn) = self.shape(b);
        if a.cols() != bk {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} * {}x{}", a.rows(), a.cols(), bk, bn),
            ));
        }
        let bv = self.value(b);
        let mut out = Tensor::zeros(a.rows(), bn);
        for r in 0..a.rows() {
            for (&c, &v) in a.row_cols(r).iter().zip(a.row_vals(r)) {
                if v == T::ZERO {
                    continue;
                }
                let src = bv.row(c);
                let dst = out.row_mut(r);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        let rg = self.needs_grad(&[b]);
        Ok(self.push(out, Op::Spmm { a, b }, rg))
    }

    /// Sparse product with tape-resident edge values (an nnz x 1 tensor in
    /// slot order); gradients reach both the dense input and the values.
    pub fn spmm_edges(
        &mut self,
        pattern: Rc<CsrPattern>,
        vals: TensorId,
        b: TensorId,
    ) -> Result<TensorId> {
        let (vn, vc) = self.shape(vals);
        if vn != pattern.nnz() || vc != 1 {
            return Err(Error::dim(
                "spmm_edges",
                format!("{}x{} values for {} slots", vn, vc, pattern.nnz()),
            ));
        }
        let (bk, bn) = self.shape(b);
        if pattern.cols != bk {
            return Err(Error::dim(
                "spmm_edges",
                format!("{}x{} * {}x{}", pattern.rows, pattern.cols, bk, bn),
            ));
        }
        let vv = self.value(vals).data().to_vec();
        let bv = self.value(b);
        let mut out = Tensor::zeros(pattern.rows, bn);
        for r in 0..pattern.rows {
            for slot in pattern.row_ptr[r]..pattern.row_ptr[r + 1] {
                let v = vv[slot];
                if v == T::ZERO {
                    continue;
                }
                let src = bv.row(pattern.col_idx[slot]);
                let dst = out.row_mut(r);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        let rg = self.needs_grad(&[vals, b]);
        Ok(self.push(out, Op::SpmmEdges { pattern, vals, b }, rg))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, make(a, b), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul_elem", a, b, |x, y| x * y, Op::MulElem)
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != d {
            return Err(Error::dim("add_row", format!("{n}x{d} + {br}x{bc}")));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                out.set(r, c, xv.get(r, c) + bv.get(0, c));
            }
        }
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(T) -> T,
        make: impl Fn(TensorId) -> Op<T>,
    ) -> TensorId {
        let value = self.value(x).map(&f);
        let rg = self.needs_grad(&[x]);
        self.push(value, make(x), rg)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(T::ZERO), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, sigmoid_stable, Op::Sigmoid)
    }

    pub fn inv_sqrt_or_zero(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            |v| {
                if v > T::ZERO {
                    v.sqrt().recip()
                } else {
                    T::ZERO
                }
            },
            Op::InvSqrtOrZero,
        )
    }

    /// Rowwise (x - mean) / sqrt(var + eps) * gain + shift with biased variance.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(shift) != (1, d) {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "gain {:?} / shift {:?} for width {d}",
                    self.shape(gain),
                    self.shape(shift)
                ),
            ));
        }
        if d == 0 {
            return Err(Error::dim("layernorm", "zero-width input"));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let sv = self.value(shift);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut mean = Vec::with_capacity(n);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mut mu = T::ZERO;
            for &v in row {
                mu += v;
            }
            mu *= inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let diff = v - mu;
                var += diff * diff;
            }
            var *= inv_d;
            let s = (var + eps).sqrt().recip();
            mean.push(mu);
            inv_std.push(s);
            for c in 0..d {
                let xhat = (row[c] - mu) * s;
                out.set(r, c, xhat * gv.get(0, c) + sv.get(0, c));
            }
        }
        let rg = self.needs_grad(&[x, gain, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    pub fn row_gather(&mut self, x: TensorId, idx: Rc<Vec<usize>>) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row_gather index {bad} >= {n}")));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), d);
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(j).copy_from_slice(xv.row(i));
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, Op::RowGather { x, idx }, rg))
    }

    /// out has `n_out` rows; row `idx[j]` accumulates row j of x.
    pub fn scatter_add_rows(
        &mut self,
        x: TensorId,
        idx: Rc<Vec<usize>>,
        n_out: usize,
    ) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if idx.len() != n {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Index(format!("scatter index {bad} >= {n_out}")));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(n_out, d);
        for (j, &i) in idx.iter().enumerate() {
            let src = xv.row(j);
            let dst = out.row_mut(i);
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, Op::ScatterAddRows { x, idx }, rg))
    }

    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let (n, _) = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let mut acc = T::ZERO;
            for &v in xv.row(r) {
                acc += v;
            }
            out.set(r, 0, acc);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let mut acc = T::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    /// Rowwise log(sum(exp(x))) with max-shift for stability.
    pub fn row_log_sum_exp(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if d == 0 {
            return Err(Error::dim("row_log_sum_exp", "zero-width input"));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let row = xv.row(r);
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut acc = T::ZERO;
            for &v in row {
                acc += (v - m).exp();
            }
            out.set(r, 0, m + acc.ln());
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, Op::RowLogSumExp(x), rg))
    }

    /// Rowwise L2 normalization; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: TensorId) -> TensorId {
        let (n, d) = self.shape(x);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            let nrm = sq.sqrt();
            norms.push(nrm);
            if nrm > T::ZERO {
                let inv = nrm.recip();
                for c in 0..d {
                    out.set(r, c, row[c] * inv);
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, Op::RowNormalize { x, norms }, rg)
    }

    pub fn hconcat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (an, ad) = self.shape(a);
        let (bn, bd) = self.shape(b);
        if an != bn {
            return Err(Error::dim("hconcat", format!("{an} rows vs {bn} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(an, ad + bd);
        for r in 0..an {
            out.row_mut(r)[..ad].copy_from_slice(av.row(r));
            out.row_mut(r)[ad..].copy_from_slice(bv.row(r));
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::HConcat(a, b), rg))
    }

    pub fn vconcat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (an, ad) = self.shape(a);
        let (bn, bd) = self.shape(b);
        if ad != bd {
            return Err(Error::dim("vconcat", format!("{ad} cols vs {bd} cols")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity((an + bn) * ad);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_vec(an + bn, ad, data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::VConcat(a, b), rg))
    }

    /// Reverse sweep from a scalar root. The tape itself is untouched, so a
    /// second call returns identical gradients.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            // keep the adjoint for inspection and for idempotent re-reads
            adj[i] = Some(g);
        }

        // Leaves that never received gradient get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && adj[i].is_none() {
                adj[i] = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(adj: &mut [Option<Tensor<T>>], id: TensorId, delta: Tensor<T>) {
        match &mut adj[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.wants(*a) {
                    let bt = self.value(*b).transpose();
                    Self::accumulate(adj, *a, g.matmul(&bt).expect("shape checked"));
                }
                if self.wants(*b) {
                    let at = self.value(*a).transpose();
                    Self::accumulate(adj, *b, at.matmul(g).expect("shape checked"));
                }
            }
            Op::MatmulNt(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(adj, *a, g.matmul(self.value(*b)).expect("shape checked"));
                }
                if self.wants(*b) {
                    let gt = g.transpose();
                    Self::accumulate(adj, *b, gt.matmul(self.value(*a)).expect("shape checked"));
                }
            }
            Op::Spmm { a, b } => {
                if self.wants(*b) {
                    let (_, n) = g.shape();
                    let mut db = Tensor::zeros(a.cols(), n);
                    for r in 0..a.rows() {
                        let grow = g.row(r);
                        for (&c, &v) in a.row_cols(r).iter().zip(a.row_vals(r)) {
                            if v == T::ZERO {
                                continue;
                            }
                            let dst = db.row_mut(c);
                            for (d, &s) in dst.iter_mut().zip(grow) {
                                *d += v * s;
                            }
                        }
                    }
                    Self::accumulate(adj, *b, db);
                }
            }
            Op::SpmmEdges { pattern, vals, b } => {
                let vv = self.value(*vals);
                let bv = self.value(*b);
                if self.wants(*b) {
                    let (_, n) = g.shape();
                    let mut db = Tensor::zeros(pattern.cols, n);
                    for r in 0..pattern.rows {
                        let grow = g.row(r);
                        for slot in pattern.row_ptr[r]..pattern.row_ptr[r + 1] {
                            let v = vv.data()[slot];
                            if v == T::ZERO {
                                continue;
                            }
                            let dst = db.row_mut(pattern.col_idx[slot]);
                            for (d, &s) in dst.iter_mut().zip(grow) {
                                *d += v * s;
                            }
                        }
                    }
                    Self::accumulate(adj, *b, db);
                }
                if self.wants(*vals) {
                    let mut dv = Tensor::zeros(pattern.nnz(), 1);
                    for r in 0..pattern.rows {
                        let grow = g.row(r);
                        for slot in pattern.row_ptr[r]..pattern.row_ptr[r + 1] {
                            let brow = bv.row(pattern.col_idx[slot]);
                            let mut acc = T::ZERO;
                            for (&x, &y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            dv.set(slot, 0, acc);
                        }
                    }
                    Self::accumulate(adj, *vals, dv);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(adj, *b, g.map(|v| -v));
                }
            }
            Op::MulElem(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let mut d = g.clone();
                    for (x, &y) in d.data_mut().iter_mut().zip(bv.data()) {
                        *x *= y;
                    }
                    Self::accumulate(adj, *a, d);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let mut d = g.clone();
                    for (x, &y) in d.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    Self::accumulate(adj, *b, d);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    Self::accumulate(adj, *x, g.map(|v| v * *c));
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    Self::accumulate(adj, *x, g.clone());
                }
                if self.wants(*bias) {
                    let (n, d) = g.shape();
                    let mut db = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            db.set(0, c, db.get(0, c) + g.get(r, c));
                        }
                    }
                    Self::accumulate(adj, *bias, db);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = &self.nodes[i].value;
                    let mut d = g.clone();
                    for (gv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *gv *= T::ONE - yv * yv;
                    }
                    if self.fault == Some(Fault::TanhBackwardSignFlip) {
                        for gv in d.data_mut() {
                            *gv = -*gv;
                        }
                    }
                    Self::accumulate(adj, *x, d);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut d = g.clone();
                    for (gv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::ZERO {
                            *gv = T::ZERO;
                        }
                    }
                    Self::accumulate(adj, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let y = &self.nodes[i].value;
                    let mut d = g.clone();
                    for (gv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (T::ONE - yv);
                    }
                    Self::accumulate(adj, *x, d);
                }
            }
            Op::InvSqrtOrZero(x) => {
                if self.wants(*x) {
                    let y = &self.nodes[i].value;
                    let half = T::from_f64(0.5);
                    let mut d = g.clone();
                    for (gv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                        // dy/dx = -x^{-3/2}/2 = -y^3/2; zero branch stays zero
                        *gv *= -half * yv * yv * yv;
                    }
                    Self::accumulate(adj, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                inv_std,
            } => {
                let (n, d) = g.shape();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let inv_d = T::from_f64(1.0 / d as f64);
                if self.wants(*shift) {
                    let mut ds = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            ds.set(0, c, ds.get(0, c) + g.get(r, c));
                        }
                    }
                    Self::accumulate(adj, *shift, ds);
                }
                if self.wants(*gain) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            let xhat = (xv.get(r, c) - mean[r]) * inv_std[r];
                            dg.set(0, c, dg.get(0, c) + g.get(r, c) * xhat);
                        }
                    }
                    Self::accumulate(adj, *gain, dg);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for c in 0..d {
                            let xhat = (xv.get(r, c) - mean[r]) * inv_std[r];
                            let dxhat = g.get(r, c) * gv.get(0, c);
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for c in 0..d {
                            let xhat = (xv.get(r, c) - mean[r]) * inv_std[r];
                            let dxhat = g.get(r, c) * gv.get(0, c);
                            let v = inv_std[r]
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                            dx.set(r, c, v);
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::RowGather { x, idx } => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let mut dx = Tensor::zeros(n, d);
                    for (j, &src) in idx.iter().enumerate() {
                        let grow = g.row(j);
                        let dst = dx.row_mut(src);
                        for (o, &v) in dst.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let mut dx = Tensor::zeros(n, d);
                    for (j, &dst) in idx.iter().enumerate() {
                        dx.row_mut(j).copy_from_slice(g.row(dst));
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::RowSum(x) => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let gr = g.get(r, 0);
                        for c in 0..d {
                            dx.set(r, c, gr);
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let gs = g.scalar_value();
                    Self::accumulate(adj, *x, Tensor::filled(n, d, gs));
                }
            }
            Op::RowLogSumExp(x) => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let xv = self.value(*x);
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let gr = g.get(r, 0);
                        let lse = y.get(r, 0);
                        for c in 0..d {
                            dx.set(r, c, gr * (xv.get(r, c) - lse).exp());
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::RowNormalize { x, norms } => {
                if self.wants(*x) {
                    let (n, d) = self.shape(*x);
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        if norms[r] <= T::ZERO {
                            continue;
                        }
                        let inv = norms[r].recip();
                        let mut dot = T::ZERO;
                        for c in 0..d {
                            dot += g.get(r, c) * y.get(r, c);
                        }
                        for c in 0..d {
                            dx.set(r, c, (g.get(r, c) - y.get(r, c) * dot) * inv);
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::HConcat(a, b) => {
                let (n, ad) = self.shape(*a);
                let (_, bd) = self.shape(*b);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(n, ad);
                    for r in 0..n {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ad]);
                    }
                    Self::accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(n, bd);
                    for r in 0..n {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ad..]);
                    }
                    Self::accumulate(adj, *b, db);
                }
            }
            Op::VConcat(a, b) => {
                let (an, d) = self.shape(*a);
                let (bn, _) = self.shape(*b);
                if self.wants(*a) {
                    let da = Tensor::from_vec(an, d, g.data()[..an * d].to_vec())
                        .expect("split sized");
                    Self::accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    let db = Tensor::from_vec(bn, d, g.data()[an * d..].to_vec())
                        .expect("split sized");
                    Self::accumulate(adj, *b, db);
                }
            }
        }
    }
}

fn sigmoid_stable<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}
