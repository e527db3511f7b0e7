use crate::error::{Error, Result};

use super::{Real, Tensor};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    MeanPoolRows(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that
/// [`Tape::backward`] can replay them in reverse.
///
/// A tape is single-use: build it, run one backward pass, read gradients,
/// drop it. All values are rank-2 (`rows × cols`); scalars are `1 × 1`.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let value = half * x * (T::one() + th);
    let du = c * (T::one() + three * k * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (value, deriv)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(self.grads.is_none(), "recording after backward");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + bias` with a `1 × cols` bias added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims(x, "add_row")?;
        let (br, bc) = self.dims(bias, "add_row")?;
        if br != 1 || bc != d {
            return Err(mismatch("add_row", self.value(x), self.value(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (_, d) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p, "concat_rows")?;
            if c != d {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[rows, d], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (n, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[n, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x, "slice_rows")?;
        if start + len > n || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[len, d], data)?, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims(x, "slice_cols")?;
        if start + len > d || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, len], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = src[r * d + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[d, n], data)?, Op::Transpose(x), rg))
    }

    /// Row-wise softmax where `mask[r * cols + c] == false` excludes the
    /// entry before normalization; excluded outputs are exactly zero.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, d) = self.dims(x, "softmax_rows_masked")?;
        if let Some(m) = mask {
            if m.len() != n * d {
                return Err(Error::Shape {
                    op: "softmax_rows_masked",
                    lhs: vec![n, d],
                    rhs: vec![m.len()],
                });
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let allowed = |c: usize| mask.map_or(true, |m| m[r * d + c]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::FullyMasked {
                    op: "softmax_rows_masked",
                    row: r,
                });
            }
            let dst = &mut out[r * d..(r + 1) * d];
            let mut sum = T::zero();
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    dst[c] = e;
                    sum += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::Softmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the `1 × cols` affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims(x, "layernorm")?;
        for p in [gamma, beta] {
            let (r, c) = self.dims(p, "layernorm")?;
            if r != 1 || c != d {
                return Err(mismatch("layernorm", self.value(x), self.value(p)));
            }
        }
        let eps = T::of(LAYERNORM_EPS);
        let df = T::of(d as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    /// Column means: `n × d → 1 × d`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x, "mean_pool_rows")?;
        let src = self.value(x);
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= nf);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, d], out)?, Op::MeanPoolRows(x), rg))
    }

    /// Row-wise cosine similarity of two `n × d` matrices, giving `n × 1`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, _) = self.dims(a, "cosine")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("cosine", self.value(a), self.value(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); n];
        let mut norm_a = vec![T::zero(); n];
        let mut norm_b = vec![T::zero(); n];
        for r in 0..n {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na == T::zero() || nb == T::zero() {
                return Err(Error::ZeroNorm {
                    op: "cosine",
                    row: r,
                });
            }
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out[r] = dot / (na * nb);
            norm_a[r] = na;
            norm_b[r] = nb;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&[n, 1], out)?,
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            rg,
        ))
    }

    /// Rows `ids` of `table`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table, "gather_rows")?;
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    size: n,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        if ids.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![n, d],
                rhs: vec![0],
            });
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax
    /// of `logits` (`n × vocab`), giving `1 × 1`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims(logits, "cross_entropy_logits")?;
        if targets.len() != n || n == 0 {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            let t = targets[r];
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = src.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
        }
        let loss = total / T::of(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// computed in the logit domain.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let src = self.value(logits);
        if src.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: src.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = T::zero();
        for (&z, &y) in src.data().iter().zip(labels) {
            // log(1 + e^z) - y z, stable for large |z|
            total += z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p();
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Reverse pass from a `1 × 1` output. Allowed once per tape.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[out.0].value.shape().to_vec();
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(Tensor::full(&shape, T::one()));
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the backward output with respect to `v`; `None` when
    /// `v` does not require a gradient or no path reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }
}

fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'g mut Tensor<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[i];
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (va.rows(), va.cols());
            let n = vb.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                T::gemm(m, n, k, gd, false, vb.data(), true, da.data_mut(), true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                T::gemm(k, m, n, va.data(), true, gd, false, db.data_mut(), true);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    axpy(d.data_mut(), gd, T::one());
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                axpy(d.data_mut(), gd, T::one());
            }
            if let Some(d) = slot(nodes, grads, *b) {
                axpy(d.data_mut(), gd, -T::one());
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(d) = slot(nodes, grads, *x) {
                axpy(d.data_mut(), gd, T::one());
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                let cols = d.len();
                for row in gd.chunks(cols) {
                    axpy(d.data_mut(), row, T::one());
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((o, &gv), &bv) in d.data_mut().iter_mut().zip(gd).zip(vb) {
                    *o += gv * bv;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((o, &gv), &av) in d.data_mut().iter_mut().zip(gd).zip(va) {
                    *o += gv * av;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                axpy(d.data_mut(), gd, *c);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(d) = slot(nodes, grads, p) {
                    axpy(d.data_mut(), &gd[offset..offset + len], T::one());
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p.0].value.cols();
                if let Some(d) = slot(nodes, grads, p) {
                    for (r, drow) in d.data_mut().chunks_mut(w).enumerate() {
                        axpy(drow, &gd[r * total + col..r * total + col + w], T::one());
                    }
                }
                col += w;
            }
        }
        Op::SliceRows(x, start) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let cols = d.cols();
                let off = start * cols;
                axpy(&mut d.data_mut()[off..off + gd.len()], gd, T::one());
            }
        }
        Op::SliceCols(x, start) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let cols = d.cols();
                let w = g.cols();
                for (r, grow) in gd.chunks(w).enumerate() {
                    axpy(&mut d.data_mut()[r * cols + start..r * cols + start + w], grow, T::one());
                }
            }
        }
        Op::Transpose(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let (n, m) = (g.rows(), g.cols());
                let dd = d.data_mut();
                for r in 0..n {
                    for c in 0..m {
                        dd[c * n + r] += gd[r * m + c];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let y = node.value.data();
                let cols = g.cols();
                for ((drow, grow), yrow) in d
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (gv - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let cols = g.cols();
            let df = T::of(cols as f64);
            let gam = nodes[gamma.0].value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                let mut dxhat = vec![T::zero(); cols];
                for (r, drow) in d.data_mut().chunks_mut(cols).enumerate() {
                    let grow = &gd[r * cols..(r + 1) * cols];
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dxhat[c] = grow[c] * gam[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / df;
                    let m2 = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / df;
                    for c in 0..cols {
                        drow[c] += rstd[r] * (dxhat[c] - m1 - hrow[c] * m2);
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *gamma) {
                let dd = d.data_mut();
                for (grow, hrow) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        dd[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *beta) {
                for grow in gd.chunks(cols) {
                    axpy(d.data_mut(), grow, T::one());
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((o, &gv), &v) in d.data_mut().iter_mut().zip(gd).zip(xv) {
                    *o += gv * gelu_parts(v).1;
                }
            }
        }
        Op::MeanPoolRows(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let cols = d.cols();
                let inv = T::one() / T::of(d.rows() as f64);
                for drow in d.data_mut().chunks_mut(cols) {
                    axpy(drow, gd, inv);
                }
            }
        }
        Op::Cosine {
            a,
            b,
            norm_a,
            norm_b,
        } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let cols = va.cols();
            let cosv = node.value.data();
            for (target, this, other, n_this, n_other) in [
                (*a, va, vb, norm_a, norm_b),
                (*b, vb, va, norm_b, norm_a),
            ] {
                if let Some(d) = slot(nodes, grads, target) {
                    for (r, drow) in d.data_mut().chunks_mut(cols).enumerate() {
                        let inv = T::one() / (n_this[r] * n_other[r]);
                        let self_term = cosv[r] / (n_this[r] * n_this[r]);
                        let (tr, or) = (this.row(r), other.row(r));
                        for c in 0..cols {
                            drow[c] += gd[r] * (or[c] * inv - tr[c] * self_term);
                        }
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(d) = slot(nodes, grads, *table) {
                let cols = d.cols();
                for (r, &id) in ids.iter().enumerate() {
                    axpy(
                        &mut d.data_mut()[id * cols..(id + 1) * cols],
                        &gd[r * cols..(r + 1) * cols],
                        T::one(),
                    );
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(d) = slot(nodes, grads, *logits) {
                let cols = d.cols();
                let scale = gd[0] / T::of(targets.len() as f64);
                for (r, drow) in d.data_mut().chunks_mut(cols).enumerate() {
                    for c in 0..cols {
                        let onehot = if c == targets[r] { T::one() } else { T::zero() };
                        drow[c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
        }
        Op::BceLogits { logits, labels } => {
            let z = nodes[logits.0].value.data();
            if let Some(d) = slot(nodes, grads, *logits) {
                let scale = gd[0] / T::of(labels.len() as f64);
                for ((o, &zv), &y) in d.data_mut().iter_mut().zip(z).zip(labels) {
                    let s = T::one() / (T::one() + (-zv).exp());
                    *o += scale * (s - y);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.data_mut().iter_mut().for_each(|v| *v += gd[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let s = gd[0] / T::of(d.len() as f64);
                d.data_mut().iter_mut().for_each(|v| *v += s);
            }
        }
    }
}
