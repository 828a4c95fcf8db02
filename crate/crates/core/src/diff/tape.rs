use std::collections::HashMap;

use super::{DiffError, Gradients, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Dynamic reverse-mode tape.
///
/// Every primitive validates shapes, computes its value eagerly and records
/// itself. A parameter is materialized at most once per tape.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    #[cfg(test)]
    pub(crate) corrupt_concat_backward: bool,
}

type Result<T> = std::result::Result<T, DiffError>;

fn mismatch(op: &'static str, shapes: &[&Tensor]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

// c[n×m] += a[n×k] · b[k×m]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[n×m] += a[n×k] · b[m×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * m + j] += s;
        }
    }
}

// c[k×m] += a[n×k]ᵀ · b[n×m]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Tape<'p> {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            #[cfg(test)]
            corrupt_concat_backward: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2().expect("tape values are rank 1 or 2")
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| mismatch(op, &[self.value(v)]))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if value.dims2().is_none() {
            return Err(mismatch("constant", &[&value]));
        }
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let value = self.params.get(id).clone();
        if value.dims2().is_none() {
            return Err(mismatch("param", &[&value]));
        }
        let v = self.push(Op::Param, value)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims("matmul", a)?;
        let (k2, m) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", &[self.value(a), self.value(b)]));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Op::MatMul(a, b), mat(n, m, out))
    }

    /// `a · bᵀ`, the natural form for `(out × in)` weight matrices applied to row features.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims("matmul_nt", a)?;
        let (m, k2) = self.dims("matmul_nt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", &[self.value(a), self.value(b)]));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push(Op::MatMulNt(a, b), mat(n, m, out))
    }

    fn zip_same(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() || ta.dims2().is_none() {
            return Err(mismatch(op.name(), &[ta, tb]));
        }
        let (r, c) = ta.dims2().unwrap();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, mat(r, c, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a `[c]` or `[1, c]` bias to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims("add_row", a)?;
        let (br, bc) = self.dims("add_row", bias)?;
        if br != 1 || bc != c {
            return Err(mismatch("add_row", &[self.value(a), self.value(bias)]));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), mat(r, c, data))
    }

    /// Scales row `i` of `a` by `col[i]`; `col` is `r × 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims("mul_col", a)?;
        let (cr, cc) = self.dims("mul_col", col)?;
        if cr != r || cc != 1 {
            return Err(mismatch("mul_col", &[self.value(a), self.value(col)]));
        }
        let s = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(s) {
            for x in row {
                *x *= k;
            }
        }
        self.push(Op::MulCol(a, col), mat(r, c, data))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.dims("scale", a)?;
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), mat(r, c, data))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(op.name(), a)?;
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(op, mat(r, c, data))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(a, slope), a, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Empty { op: "concat" });
        }
        let (r, _) = self.dims("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims("concat", p)?;
            if pr != r {
                let shapes: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::Concat(parts.to_vec()), mat(r, total, data))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_cols", a)?;
        if start >= end || end > c {
            return Err(DiffError::Index {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(Op::SliceCols(a, start), mat(r, w, data))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Empty { op: "concat_rows" });
        }
        let (_, c) = self.dims("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims("concat_rows", p)?;
            if pc != c {
                let shapes: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
                return Err(mismatch("concat_rows", &shapes));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        self.push(Op::ConcatRows(parts.to_vec()), mat(rows, c, data))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims("slice_rows", a)?;
        if start >= end || end > r {
            return Err(DiffError::Index {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        self.push(Op::SliceRows(a, start), mat(end - start, c, data))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("gather_rows", a)?;
        if idx.is_empty() {
            return Err(DiffError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Op::GatherRows(a, idx.to_vec()), mat(idx.len(), c, data))
    }

    /// Sums row `i` of `a` into output row `idx[i]` of an `n × c` result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.dims("scatter_add_rows", a)?;
        if idx.len() != r {
            return Err(mismatch("scatter_add_rows", &[self.value(a)]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::Index {
                op: "scatter_add_rows",
                index: bad,
                bound: n,
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for (i, &t) in idx.iter().enumerate() {
            for (d, s) in data[t * c..(t + 1) * c].iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        self.push(Op::ScatterAddRows(a, idx.to_vec()), mat(n, c, data))
    }

    /// Softmax of an `e × 1` score column within each group `segment[i]`.
    ///
    /// This is the masked softmax over an index set: every segment normalizes
    /// independently. Empty segments are allowed and produce nothing.
    pub fn segment_softmax(&mut self, scores: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let (r, c) = self.dims("segment_softmax", scores)?;
        if c != 1 || segment.len() != r {
            return Err(mismatch("segment_softmax", &[self.value(scores)]));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(DiffError::Index {
                op: "segment_softmax",
                index: bad,
                bound: n_segments,
            });
        }
        let x = self.value(scores).data();
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (&v, &s) in x.iter().zip(segment) {
            if v > max[s] {
                max[s] = v;
            }
        }
        let mut out: Vec<f64> = x.iter().zip(segment).map(|(&v, &s)| (v - max[s]).exp()).collect();
        let mut denom = vec![0.0; n_segments];
        for (&e, &s) in out.iter().zip(segment) {
            denom[s] += e;
        }
        for (e, &s) in out.iter_mut().zip(segment) {
            *e /= denom[s];
        }
        self.push(Op::SegmentSoftmax(scores, segment.to_vec()), mat(r, 1, out))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims("log_softmax_rows", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), mat(r, c, data))
    }

    /// Selects `a[i, idx[i]]` for each row, giving an `r × 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims("pick", a)?;
        if idx.len() != r {
            return Err(mismatch("pick", &[self.value(a)]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(DiffError::Index {
                op: "pick",
                index: bad,
                bound: c,
            });
        }
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        self.push(Op::Pick(a, idx.to_vec()), mat(r, 1, data))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.dims("sum", a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over the row axis, giving `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims("mean_rows", a)?;
        let mut data = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        self.push(Op::MeanRows(a), mat(1, c, data))
    }

    /// `x · Wᵀ + b` for an `(out × in)` weight and optional bias.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w)?;
        let bv = b.map(|b| self.param(b)).transpose()?;
        self.linear_vars(x, wv, bv)
    }

    /// [`Tape::linear`] with weights already on the tape.
    pub fn linear_vars(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Per-node gradients of a scalar root.
    fn backprop(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let acc = |grads: &mut [Option<Tensor>], v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let (_, m) = self.shape(*b);
                let mut ga = vec![0.0; n * k];
                gemm_nt(g.data(), self.value(*b).data(), &mut ga, n, m, k);
                let mut gb = vec![0.0; k * m];
                gemm_tn(self.value(*a).data(), g.data(), &mut gb, n, k, m);
                acc(grads, *a, like(*a, ga));
                acc(grads, *b, like(*b, gb));
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.shape(*a);
                let (m, _) = self.shape(*b);
                let mut ga = vec![0.0; n * k];
                gemm_nn(g.data(), self.value(*b).data(), &mut ga, n, m, k);
                let mut gb = vec![0.0; m * k];
                gemm_tn(g.data(), self.value(*a).data(), &mut gb, n, m, k);
                acc(grads, *a, like(*a, ga));
                acc(grads, *b, like(*b, gb));
            }
            Op::Add(a, b) => {
                acc(grads, *a, like(*a, g.data().to_vec()));
                acc(grads, *b, like(*b, g.data().to_vec()));
            }
            Op::AddRow(a, b) => {
                let (_, c) = self.shape(*a);
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(grads, *a, like(*a, g.data().to_vec()));
                acc(grads, *b, like(*b, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                acc(grads, *a, like(*a, ga));
                acc(grads, *b, like(*b, gb));
            }
            Op::MulCol(a, col) => {
                let (_, c) = self.shape(*a);
                let s = self.value(*col).data();
                let va = self.value(*a).data();
                let mut ga = g.data().to_vec();
                let mut gc = vec![0.0; s.len()];
                for (r, (grow, &k)) in ga.chunks_mut(c).zip(s).enumerate() {
                    let arow = &va[r * c..(r + 1) * c];
                    gc[r] = grow.iter().zip(arow).map(|(x, y)| x * y).sum();
                    for x in grow {
                        *x *= k;
                    }
                }
                acc(grads, *a, like(*a, ga));
                acc(grads, *col, like(*col, gc));
            }
            Op::Scale(a, k) => {
                acc(grads, *a, like(*a, g.data().iter().map(|x| x * k).collect()));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = g
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                let ga = g
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(&d, &x)| if x > 0.0 { d } else { slope * d })
                    .collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::Tanh(a) => {
                let ga = g.data().iter().zip(out.data()).map(|(d, y)| d * (1.0 - y * y)).collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::Sigmoid(a) => {
                let ga = g.data().iter().zip(out.data()).map(|(d, y)| d * y * (1.0 - y)).collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::Exp(a) => {
                let ga = g.data().iter().zip(out.data()).map(|(d, y)| d * y).collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::Concat(parts) => {
                let (r, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let (_, w) = self.shape(p);
                    let mut gp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        gp.extend_from_slice(&g.data()[row * total + offset..row * total + offset + w]);
                    }
                    #[cfg(test)]
                    if self.corrupt_concat_backward && pi == 0 {
                        for v in &mut gp {
                            *v *= 0.5;
                        }
                    }
                    let _ = pi;
                    acc(grads, p, like(p, gp));
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let w = out.cols();
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    ga[row * c + start..row * c + start + w]
                        .copy_from_slice(&g.data()[row * w..(row + 1) * w]);
                }
                acc(grads, *a, like(*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = vec![0.0; r * c];
                ga[start * c..start * c + out.len()].copy_from_slice(g.data());
                acc(grads, *a, like(*a, ga));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = vec![0.0; r * c];
                for (k, &t) in idx.iter().enumerate() {
                    for (d, s) in ga[t * c..(t + 1) * c].iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *d += s;
                    }
                }
                acc(grads, *a, like(*a, ga));
            }
            Op::ScatterAddRows(a, idx) => {
                let (_, c) = self.shape(*a);
                let mut ga = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    ga.extend_from_slice(&g.data()[t * c..(t + 1) * c]);
                }
                acc(grads, *a, like(*a, ga));
            }
            Op::SegmentSoftmax(a, segment) => {
                let y = out.data();
                let n = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for ((&gy, &yy), &s) in g.data().iter().zip(y).zip(segment) {
                    dot[s] += gy * yy;
                }
                let ga = g
                    .data()
                    .iter()
                    .zip(y)
                    .zip(segment)
                    .map(|((&gy, &yy), &s)| yy * (gy - dot[s]))
                    .collect();
                acc(grads, *a, like(*a, ga));
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(yrow).map(|(gv, yv)| gv - yv.exp() * gs));
                }
                acc(grads, *a, like(*a, ga));
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] = g.data()[i];
                }
                acc(grads, *a, like(*a, ga));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, like(*a, vec![g.item(); n]));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.data().iter().map(|v| v / r as f64));
                }
                acc(grads, *a, like(*a, ga));
            }
        }
    }

    /// Smallest `|x|` fed to a ReLU or LeakyReLU, infinite if there is none.
    /// Finite differences are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradients of a scalar root with respect to every parameter in the store.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let grads = self.backprop(root)?;
        let mut out = Gradients::zeros_like(self.params);
        for (&id, &v) in &self.param_vars {
            if let Some(Some(g)) = grads.get(v.0) {
                *out.get_mut(id) = g.clone();
            }
        }
        Ok(out)
    }
}
