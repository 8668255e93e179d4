use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

enum Value {
    Owned(Box<[f64]>),
    Shared(Arc<Vec<f64>>),
}

impl Value {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Shared(v) => v,
        }
    }
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    /// `a * b^T` with `b` stored row-major.
    MatmulNt(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    /// Broadcast-add a `1 x n` row to every row of `a`.
    AddRow(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    Abs(TensorId),
    Min2(TensorId, TensorId),
    Max2(TensorId, TensorId),
    /// Row-wise softmax. Masked columns get probability exactly 0 in the
    /// forward pass; backward needs only the output, so the mask is not kept.
    SoftmaxRows(TensorId),
    /// Row-wise normalization with learned gain and bias; aux = (mean, rstd) per row.
    LayerNorm(TensorId, TensorId, TensorId),
    /// Cosine similarity of every row of `a` against every row of `b`;
    /// aux = row norms of `a` then row norms of `b`.
    CosineRows(TensorId, TensorId),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    /// Multiply by a fixed mask holding 0 or 1/keep_prob.
    Dropout(TensorId, Arc<Vec<f64>>),
    MeanAll(TensorId),
    SumAll(TensorId),
    Get(TensorId, usize, usize),
    /// Mean over rows of `-ln(max(p[row, target], CLAMP))`.
    NllMean(TensorId, Vec<usize>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    grad: Option<Box<[f64]>>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Probabilities below this are clamped inside the NLL node; each clamp is
/// counted so callers can surface pathological collapse instead of silently
/// training on clipped values.
pub const NLL_CLAMP: f64 = 1e-12;

/// Define-by-run tape. Nodes evaluate eagerly at creation; `backward` walks
/// the tape in reverse. Leaf gradients accumulate across repeated backward
/// calls, internal gradients reset on each call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Per-node saved statistics (layer norm mean/rstd, cosine row norms).
    aux: std::collections::HashMap<TensorId, Vec<f64>>,
    pub nll_clamp_events: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.ix()];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.nodes[id.ix()].value.as_slice()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.ix()].len(), 1);
        self.value(id)[0]
    }

    /// Gradient of the last backward pass; `None` if never reached or the
    /// node does not track gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.ix()].grad.as_deref()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value.into_boxed_slice()),
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.ix()].needs_grad
    }

    /// Binds an external tensor as a leaf, sharing its storage.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.bind(t, t.requires_grad)
    }

    /// Binds a tensor as a leaf that never tracks gradients, regardless of
    /// its `requires_grad` flag. Used for inference passes over parameters.
    pub fn leaf_frozen(&mut self, t: &Tensor) -> TensorId {
        self.bind(t, false)
    }

    fn bind(&mut self, t: &Tensor, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Shared(t.share()),
            grad: None,
            op: Op::Leaf,
            needs_grad,
        });
        id
    }

    /// A leaf that never tracks gradients.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<TensorId> {
        if value.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} constant",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "{what}: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok((ra, ca))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul: {m}x{ka} * {kb}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Matmul(a, b), ng))
    }

    /// `a (m x k) * b^T` where `b` is stored `n x k`; the usual form for
    /// attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul_nt: {m}x{ka} * ({n}x{kb})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, ka, n, self.value(a), self.value(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatmulNt(a, b), ng))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "div")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Div(a, b), ng))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::Shape(format!("add_row: {m}x{n} + {rr}x{rc}")));
        }
        let va = self.value(a);
        let vr = self.value(row);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(va[r * n + c] + vr[c]);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.abs()).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Abs(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "min2")?;
        let out = zip_map(self.value(a), self.value(b), f64::min);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Min2(a, b), ng))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max2(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "max2")?;
        let out = zip_map(self.value(a), self.value(b), f64::max);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Max2(a, b), ng))
    }

    /// Row-wise softmax with the max subtracted before exponentiation.
    /// `mask[j] = true` excludes column `j`: it gets probability exactly 0
    /// and contributes nothing to the normalization. At least one column per
    /// row must stay unmasked.
    pub fn softmax_rows(&mut self, a: TensorId, mask: Option<Arc<Vec<bool>>>) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if let Some(mk) = &mask {
            if mk.len() != n {
                return Err(Error::Shape(format!(
                    "softmax mask has {} entries for {n} columns",
                    mk.len()
                )));
            }
            if mk.iter().all(|&x| x) {
                return Err(Error::Shape("softmax: every column masked".into()));
            }
        }
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        let allowed = |j: usize| mask.as_ref().map_or(true, |mk| !mk[j]);
        for r in 0..m {
            let row = &va[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > mx {
                    mx = x;
                }
            }
            let mut z = 0.0;
            for j in 0..n {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(m, n, out, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalization (population variance, eps 1e-5) followed
    /// by a learned per-column gain and bias.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.shape(a);
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = self.shape(id);
            if r != 1 || c != n {
                return Err(Error::Shape(format!("layer_norm {what}: {r}x{c} for width {n}")));
            }
        }
        let va = self.value(a);
        let vg = self.value(gain);
        let vb = self.value(bias);
        let mut out = vec![0.0; m * n];
        let mut aux = Vec::with_capacity(2 * m);
        for r in 0..m {
            let row = &va[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            aux.push(mean);
            aux.push(rstd);
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * rstd * vg[j] + vb[j];
            }
        }
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        let id = self.push(m, n, out, Op::LayerNorm(a, gain, bias), ng);
        self.aux.insert(id, aux);
        Ok(id)
    }

    /// Cosine similarity between every row of `a` (m x d) and every row of
    /// `b` (p x d), with 1e-8 added to the norm product: out is m x p.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        const EPS: f64 = 1e-8;
        let (m, da) = self.shape(a);
        let (p, db) = self.shape(b);
        if da != db {
            return Err(Error::Shape(format!("cosine_rows: widths {da} vs {db}")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut aux = Vec::with_capacity(m + p);
        for r in 0..m {
            aux.push(dot(&va[r * da..(r + 1) * da], &va[r * da..(r + 1) * da]).sqrt());
        }
        for r in 0..p {
            aux.push(dot(&vb[r * db..(r + 1) * db], &vb[r * db..(r + 1) * db]).sqrt());
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let d = dot(&va[i * da..(i + 1) * da], &vb[j * db..(j + 1) * db]);
                out[i * p + j] = d / (aux[i] * aux[m + j] + EPS);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        let id = self.push(m, p, out, Op::CosineRows(a, b), ng);
        self.aux.insert(id, aux);
        Ok(id)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, rows: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + rows > m {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {m} rows",
                start + rows
            )));
        }
        let out = self.value(a)[start * n..(start + rows) * n].to_vec();
        let ng = self.needs(a);
        Ok(self.push(rows, n, out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, cols: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + cols > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {n} cols",
                start + cols
            )));
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(m * cols);
        for r in 0..m {
            out.extend_from_slice(&va[r * n + start..r * n + start + cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(m, cols, out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::Shape(format!("concat_rows: widths {n} vs {c}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let m = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(Error::Shape(format!("concat_cols: heights {m} vs {r}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(m * cols);
        for r in 0..m {
            for &p in parts {
                let (_, c) = self.shape(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Elementwise multiply by a fixed mask whose entries are 0 or
    /// 1/keep_prob; the caller draws the mask.
    pub fn dropout(&mut self, a: TensorId, mask: Arc<Vec<f64>>) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if mask.len() != m * n {
            return Err(Error::Shape(format!(
                "dropout mask has {} entries for {m}x{n}",
                mask.len()
            )));
        }
        let out = zip_map(self.value(a), &mask, |x, y| x * y);
        let ng = self.needs(a);
        Ok(self.push(m, n, out, Op::Dropout(a, mask), ng))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let len = self.nodes[a.ix()].len();
        let v = self.value(a).iter().sum::<f64>() / len as f64;
        let ng = self.needs(a);
        self.push(1, 1, vec![v], Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).iter().sum::<f64>();
        let ng = self.needs(a);
        self.push(1, 1, vec![v], Op::SumAll(a), ng)
    }

    /// Extracts one element as a 1x1 node.
    pub fn get(&mut self, a: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if row >= m || col >= n {
            return Err(Error::Shape(format!("get ({row},{col}) of {m}x{n}")));
        }
        let v = self.value(a)[row * n + col];
        let ng = self.needs(a);
        Ok(self.push(1, 1, vec![v], Op::Get(a, row, col), ng))
    }

    /// Mean over rows of `-ln(p[row, targets[row]])`, with probabilities
    /// clamped at [`NLL_CLAMP`]; clamps increment `nll_clamp_events`.
    pub fn nll_mean(&mut self, probs: TensorId, targets: Vec<usize>) -> Result<TensorId> {
        let (m, n) = self.shape(probs);
        if targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Shape(format!("target column {t} out of {n}")));
        }
        let vp = self.value(probs);
        let mut s = 0.0;
        let mut clamps = 0;
        for (r, &t) in targets.iter().enumerate() {
            let p = vp[r * n + t];
            if p < NLL_CLAMP {
                clamps += 1;
            }
            s -= p.max(NLL_CLAMP).ln();
        }
        self.nll_clamp_events += clamps;
        let v = s / m as f64;
        let ng = self.needs(probs);
        Ok(self.push(1, 1, vec![v], Op::NllMean(probs, targets), ng))
    }

    /// Reverse-mode pass from a scalar node. Leaf gradients accumulate
    /// across calls; gradients of interior nodes are reset first.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.ix()].len() != 1 {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape(format!("backward from non-scalar {r}x{c}")));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.ix()].needs_grad {
            return Ok(());
        }
        self.add_to_grad(loss, 0, &[1.0]);
        for idx in (0..=loss.ix()).rev() {
            if !self.nodes[idx].needs_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.step_backward(idx);
        }
        Ok(())
    }

    /// Takes (or lazily allocates) the gradient buffer of `id`, leaving the
    /// node temporarily without one. Callers must put it back.
    fn take_grad(&mut self, id: TensorId) -> Box<[f64]> {
        let len = self.nodes[id.ix()].len();
        match self.nodes[id.ix()].grad.take() {
            Some(g) => g,
            None => vec![0.0; len].into_boxed_slice(),
        }
    }

    fn put_grad(&mut self, id: TensorId, g: Box<[f64]>) {
        self.nodes[id.ix()].grad = Some(g);
    }

    fn add_to_grad(&mut self, id: TensorId, offset: usize, contrib: &[f64]) {
        let mut g = self.take_grad(id);
        for (dst, src) in g[offset..offset + contrib.len()].iter_mut().zip(contrib) {
            *dst += src;
        }
        self.put_grad(id, g);
    }

    fn step_backward(&mut self, idx: usize) {
        // The output gradient is moved out for the duration of the node;
        // inputs then borrow values immutably while their own gradient buffer
        // is temporarily moved out, so every op accumulates in place.
        let go: Box<[f64]> = self.nodes[idx].grad.take().expect("grad present");
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        // Ops that need no dispatch state are handled inline.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    gemm_nt(m, n, k, &go, self.value(b), &mut ga);
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    gemm_tn(m, k, n, self.value(a), &go, &mut gb);
                    self.put_grad(b, gb);
                }
            }
            &Op::MatmulNt(a, b) => {
                // out = a * b^T, a is m x k, b is n x k, out is m x n.
                let (m, k) = self.shape(a);
                let n = self.shape(b).0;
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    gemm_nn(m, n, k, &go, self.value(b), &mut ga);
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    gemm_tn(m, n, k, &go, self.value(a), &mut gb);
                    self.put_grad(b, gb);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.add_to_grad(a, 0, &go);
                }
                if self.needs(b) {
                    self.add_to_grad(b, 0, &go);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.add_to_grad(a, 0, &go);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for (dst, &g) in gb.iter_mut().zip(go.iter()) {
                        *dst -= g;
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((dst, &g), &vb) in ga.iter_mut().zip(go.iter()).zip(self.value(b)) {
                        *dst = g.mul_add(vb, *dst);
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for ((dst, &g), &va) in gb.iter_mut().zip(go.iter()).zip(self.value(a)) {
                        *dst = g.mul_add(va, *dst);
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::Div(a, b) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((dst, &g), &vb) in ga.iter_mut().zip(go.iter()).zip(self.value(b)) {
                        *dst += g / vb;
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    let vout = self.nodes[idx].value.as_slice();
                    let vb = self.value(b);
                    for i in 0..gb.len() {
                        gb[i] -= go[i] * vout[i] / vb[i];
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::AddRow(a, row) => {
                if self.needs(a) {
                    self.add_to_grad(a, 0, &go);
                }
                if self.needs(row) {
                    let mut gr = self.take_grad(row);
                    for r in 0..rows {
                        for c in 0..cols {
                            gr[c] += go[r * cols + c];
                        }
                    }
                    self.put_grad(row, gr);
                }
            }
            &Op::Scale(a, factor) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for (dst, &g) in ga.iter_mut().zip(go.iter()) {
                        *dst = g.mul_add(factor, *dst);
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((dst, &g), &va) in ga.iter_mut().zip(go.iter()).zip(self.value(a)) {
                        if va > 0.0 {
                            *dst += g;
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Sigmoid(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    let vout = self.nodes[idx].value.as_slice();
                    for i in 0..ga.len() {
                        ga[i] += go[i] * vout[i] * (1.0 - vout[i]);
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Abs(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((dst, &g), &va) in ga.iter_mut().zip(go.iter()).zip(self.value(a)) {
                        if va > 0.0 {
                            *dst += g;
                        } else if va < 0.0 {
                            *dst -= g;
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Min2(a, b) => {
                self.minmax_backward(idx, a, b, &go, true);
            }
            &Op::Max2(a, b) => {
                self.minmax_backward(idx, a, b, &go, false);
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    let p = self.nodes[idx].value.as_slice();
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &go[r * cols..(r + 1) * cols];
                        let inner = dot(pr, gr);
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            // Masked columns have p = 0, so they get 0 here.
                            dst[j] += pr[j] * (gr[j] - inner);
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::LayerNorm(a, gain, bias) => {
                let aux = self.aux[&TensorId(idx as u32)].clone();
                let n = cols as f64;
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    let va = self.value(a);
                    let vg = self.value(gain);
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let row = &va[r * cols..(r + 1) * cols];
                        let gr = &go[r * cols..(r + 1) * cols];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..cols {
                            let xh = (row[j] - mean) * rstd;
                            let dxh = gr[j] * vg[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let dst = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let xh = (row[j] - mean) * rstd;
                            let dxh = gr[j] * vg[j];
                            dst[j] += rstd * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(gain) {
                    let mut gg = self.take_grad(gain);
                    let va = self.value(a);
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for j in 0..cols {
                            let xh = (va[r * cols + j] - mean) * rstd;
                            gg[j] += go[r * cols + j] * xh;
                        }
                    }
                    self.put_grad(gain, gg);
                }
                if self.needs(bias) {
                    let mut gb = self.take_grad(bias);
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] += go[r * cols + j];
                        }
                    }
                    self.put_grad(bias, gb);
                }
            }
            &Op::CosineRows(a, b) => {
                const EPS: f64 = 1e-8;
                let aux = self.aux[&TensorId(idx as u32)].clone();
                let d = self.shape(a).1;
                let (m, p) = (rows, cols);
                let vout = {
                    // Clone the cosine values: both input grads need them.
                    self.nodes[idx].value.as_slice().to_vec()
                };
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    let va = self.value(a);
                    let vb = self.value(b);
                    for i in 0..m {
                        let na = aux[i];
                        let ai = &va[i * d..(i + 1) * d];
                        for j in 0..p {
                            let g = go[i * p + j];
                            if g == 0.0 {
                                continue;
                            }
                            let nb = aux[m + j];
                            let den = na * nb + EPS;
                            let cos = vout[i * p + j];
                            let bj = &vb[j * d..(j + 1) * d];
                            // d/da of dot/(na*nb+eps); the norm term vanishes
                            // for zero rows where the direction is undefined.
                            let na_coef = if na > 0.0 { cos * nb / (den * na) } else { 0.0 };
                            let dst = &mut ga[i * d..(i + 1) * d];
                            for t in 0..d {
                                dst[t] += g * (bj[t] / den - na_coef * ai[t]);
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    let va = self.value(a);
                    let vb = self.value(b);
                    for i in 0..m {
                        let na = aux[i];
                        let ai = &va[i * d..(i + 1) * d];
                        for j in 0..p {
                            let g = go[i * p + j];
                            if g == 0.0 {
                                continue;
                            }
                            let nb = aux[m + j];
                            let den = na * nb + EPS;
                            let cos = vout[i * p + j];
                            let nb_coef = if nb > 0.0 { cos * na / (den * nb) } else { 0.0 };
                            let bj = &vb[j * d..(j + 1) * d];
                            let dst = &mut gb[j * d..(j + 1) * d];
                            for t in 0..d {
                                dst[t] += g * (ai[t] / den - nb_coef * bj[t]);
                            }
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::SliceRows(a, start) => {
                if self.needs(a) {
                    let n = self.shape(a).1;
                    self.add_to_grad(a, start * n, &go);
                }
            }
            &Op::SliceCols(a, start) => {
                if self.needs(a) {
                    let (m, n) = self.shape(a);
                    let mut ga = self.take_grad(a);
                    for r in 0..m {
                        for c in 0..cols {
                            ga[r * n + start + c] += go[r * cols + c];
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.ix()].len();
                    if self.needs(p) {
                        self.add_to_grad(p, 0, &go[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut col0 = 0;
                for p in parts {
                    let (m, c) = self.shape(p);
                    if self.needs(p) {
                        let mut gp = self.take_grad(p);
                        for r in 0..m {
                            for j in 0..c {
                                gp[r * c + j] += go[r * cols + col0 + j];
                            }
                        }
                        self.put_grad(p, gp);
                    }
                    col0 += c;
                }
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let mask = Arc::clone(mask);
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((dst, &g), &mk) in ga.iter_mut().zip(go.iter()).zip(mask.iter()) {
                        *dst = g.mul_add(mk, *dst);
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::MeanAll(a) => {
                if self.needs(a) {
                    let len = self.nodes[a.ix()].len();
                    let g = go[0] / len as f64;
                    let mut ga = self.take_grad(a);
                    ga.iter_mut().for_each(|x| *x += g);
                    self.put_grad(a, ga);
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let g = go[0];
                    let mut ga = self.take_grad(a);
                    ga.iter_mut().for_each(|x| *x += g);
                    self.put_grad(a, ga);
                }
            }
            &Op::Get(a, row, col) => {
                if self.needs(a) {
                    let n = self.shape(a).1;
                    self.add_to_grad(a, row * n + col, &go);
                }
            }
            Op::NllMean(probs, targets) => {
                let probs = *probs;
                let targets = targets.clone();
                if self.needs(probs) {
                    let m = targets.len() as f64;
                    let n = self.shape(probs).1;
                    let mut gp = self.take_grad(probs);
                    let vp = self.value(probs);
                    for (r, &t) in targets.iter().enumerate() {
                        let p = vp[r * n + t].max(NLL_CLAMP);
                        gp[r * n + t] -= go[0] / (p * m);
                    }
                    self.put_grad(probs, gp);
                }
            }
        }
        self.nodes[idx].grad = Some(go);
    }

    fn minmax_backward(&mut self, idx: usize, a: TensorId, b: TensorId, go: &[f64], is_min: bool) {
        let _ = idx;
        if self.needs(a) {
            let mut ga = self.take_grad(a);
            let va = self.value(a);
            let vb = self.value(b);
            for i in 0..ga.len() {
                let pick_a = if is_min { va[i] <= vb[i] } else { va[i] >= vb[i] };
                if pick_a {
                    ga[i] += go[i];
                }
            }
            self.put_grad(a, ga);
        }
        if self.needs(b) {
            let mut gb = self.take_grad(b);
            let va = self.value(a);
            let vb = self.value(b);
            for i in 0..gb.len() {
                let pick_b = if is_min { va[i] > vb[i] } else { va[i] < vb[i] };
                if pick_b {
                    gb[i] += go[i];
                }
            }
            self.put_grad(b, gb);
        }
    }
}

#[inline]
fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, r: usize, c: usize, v: Vec<f64>) -> TensorId {
        let t = Tensor::from_vec(r, c, v).unwrap().with_grad();
        g.leaf(&t)
    }

    #[test]
    fn rejects_shape_mismatches() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 2, 3, vec![0.0; 6]);
        let b = leaf(&mut g, 2, 2, vec![0.0; 4]);
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_rows(a, 1, 2).is_err());
        assert!(g.get(a, 2, 0).is_err());
        assert!(g.nll_mean(a, vec![0]).is_err());
        assert!(g.nll_mean(a, vec![0, 5]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_is_exact_zero() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 2, 4, vec![0.1, 5.0, -3.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let mask = Arc::new(vec![false, false, true, false]);
        let s = g.softmax_rows(a, Some(mask)).unwrap();
        let v = g.value(s);
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Fully masked rows are rejected at construction.
        let full = Arc::new(vec![true; 4]);
        assert!(g.softmax_rows(a, Some(full)).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 3, vec![1000.0, 1001.0, 999.0]);
        let s = g.softmax_rows(a, None).unwrap();
        let v = g.value(s);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[1] > v[0] && v[0] > v[2]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let gain = leaf(&mut g, 1, 4, vec![1.0; 4]);
        let bias = leaf(&mut g, 1, 4, vec![0.0; 4]);
        let y = g.layer_norm(a, gain, bias).unwrap();
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps shrinks it slightly
    }

    #[test]
    fn cosine_rows_matches_manual_value() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 2, vec![3.0, 4.0]);
        let b = leaf(&mut g, 2, 2, vec![3.0, 4.0, -4.0, 3.0]);
        let c = g.cosine_rows(a, b).unwrap();
        let v = g.value(c);
        assert!((v[0] - 25.0 / (25.0 + 1e-8)).abs() < 1e-12);
        assert!(v[1].abs() < 1e-9);
    }

    #[test]
    fn backward_accumulates_on_leaves_and_resets_interior() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(1, 2, vec![2.0, 3.0]).unwrap().with_grad();
        let a = g.leaf(&t);
        let sq = g.mul(a, a).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[4.0, 6.0]);
        // Second call accumulates on the leaf but not on interior nodes.
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[8.0, 12.0]);
        assert_eq!(g.grad(sq).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 2, vec![1.0, 2.0]);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(1, 2, vec![2.0, 3.0]).unwrap();
        let a = g.leaf(&t); // requires_grad = false
        let s = g.sum_all(a);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn nll_clamp_counts_events() {
        let mut g = Graph::new();
        let p = leaf(&mut g, 2, 2, vec![1.0, 0.0, 0.5, 0.5]);
        let loss = g.nll_mean(p, vec![1, 0]).unwrap();
        assert_eq!(g.nll_clamp_events, 1);
        let v = g.scalar_value(loss);
        assert!((v - (-(NLL_CLAMP.ln()) + -(0.5f64.ln())) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn forward_values_are_bit_reproducible() {
        let run = || {
            let mut g = Graph::new();
            let a = leaf(
                &mut g,
                3,
                3,
                (0..9).map(|i| (i as f64 * 0.37).sin()).collect(),
            );
            let b = leaf(
                &mut g,
                3,
                3,
                (0..9).map(|i| (i as f64 * 0.91).cos()).collect(),
            );
            let mm = g.matmul(a, b).unwrap();
            let sm = g.softmax_rows(mm, None).unwrap();
            let gain = leaf(&mut g, 1, 3, vec![1.0; 3]);
            let bias = leaf(&mut g, 1, 3, vec![0.0; 3]);
            let ln = g.layer_norm(sm, gain, bias).unwrap();
            g.value(ln).iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn min_max_route_gradients_by_branch() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 2, vec![1.0, 5.0]);
        let b = leaf(&mut g, 1, 2, vec![2.0, 4.0]);
        let mn = g.min2(a, b).unwrap();
        let loss = g.sum_all(mn);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0]);
        assert_eq!(g.value(mn), &[1.0, 4.0]);
    }
}
