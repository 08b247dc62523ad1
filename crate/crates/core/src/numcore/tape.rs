//! Reverse-mode differentiation over a linear operation tape.
//!
//! A `Tape` is built fresh for each forward pass. Every op appends a node
//! holding its output value; `backward` walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! Parameters are registered by name and deduplicated, so a parameter used by
//! several branches (e.g. both modalities) owns one leaf that collects all of
//! its gradient.

use indexmap::IndexMap;

use super::kernels;
use super::tensor::{rows_cols, DTensor, Real};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SelectRows(Vec<(Var, usize)>),
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    NllRows {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MseRows {
        pred: Var,
        target: Vec<T>,
        rows: Vec<usize>,
    },
    Sum(Var),
}

struct Node<T> {
    value: DTensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a node; zeros when the node does not influence the output.
    pub fn wrt(&self, v: Var) -> DTensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => DTensor::new(shape.clone(), g.clone()).expect("grad shape"),
            None => DTensor::zeros(shape),
        }
    }

    /// Whether any gradient reached this node.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Parameter gradients keyed by name, in registration order.
    pub fn params(&self) -> IndexMap<String, DTensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<DTensor<T>> {
        self.params.get(name).map(|&v| self.wrt(v))
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DTensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &DTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: DTensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Registers (or returns the existing leaf for) a named parameter.
    pub fn param(&mut self, name: &str, t: &DTensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(t.clone(), Op::Leaf, name)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of the parameters this tape has touched, in first-use order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(dim_err(format!(
                "matmul [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(DTensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(DTensor::new(vec![n, m], out)?, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.rc(a) != self.rc(b) {
            return Err(dim_err(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(DTensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        if self.value(row).len() != n {
            return Err(dim_err(format!(
                "broadcast row of length {} onto width {n}",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(DTensor::new(shape, out)?, Op::AddRow(a, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(DTensor::new(shape, out)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(DTensor::new(shape, out)?, Op::Scale(a, c), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(DTensor::new(shape, out)?, Op::Gelu(a), "gelu")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err(format!(
                "layer norm affine {:?}/{:?} over width {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x).data(), r, c);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            DTensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Scaled dot-product attention over `heads` column groups of `[T, D]`
    /// query/key/value matrices; no projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.rc(q);
        if self.rc(k) != (t, d) || self.rc(v) != (t, d) {
            return Err(dim_err("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    p[i * t + j] = kernels::dot(qi, kj) * scale;
                }
                kernels::softmax_in_place(&mut p[i * t..(i + 1) * t]);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..t {
                    let w = p[i * t + j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o = *o + w * vv;
                    }
                }
            }
        }
        self.push(
            DTensor::new(vec![t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Builds a matrix whose row `r` is row `sources[r].1` of `sources[r].0`.
    /// Covers gather, concatenation, scatter and row broadcasting.
    pub fn select_rows(&mut self, sources: Vec<(Var, usize)>) -> Result<Var> {
        let Some(&(first, _)) = sources.first() else {
            return Err(dim_err("select_rows with no sources".into()));
        };
        let cols = self.rc(first).1;
        let mut out = Vec::with_capacity(sources.len() * cols);
        for &(v, r) in &sources {
            let (rows, c) = self.rc(v);
            if c != cols {
                return Err(dim_err(format!("select_rows width {c} vs {cols}")));
            }
            if r >= rows {
                return Err(Error::Geometry(format!(
                    "row {r} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
        }
        let n = sources.len();
        self.push(
            DTensor::new(vec![n, cols], out)?,
            Op::SelectRows(sources),
            "select_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut sources = Vec::new();
        for &p in parts {
            let rows = self.rc(p).0;
            sources.extend((0..rows).map(|r| (p, r)));
        }
        self.select_rows(sources)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.select_rows(idx.iter().map(|&r| (x, r)).collect())
    }

    /// Mean over rows of `[T, D]`, giving a `[D]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let pooled = kernels::mean_pool(self.value(x))?;
        self.push(pooled, Op::MeanRows(x), "mean_rows")
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = kernels::l2_norm(&src[i * c..(i + 1) * c]);
            if n == T::zero() {
                return Err(Error::DegenerateEmbedding(format!("row {i} has zero norm")));
            }
            norms.push(n);
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v / n);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            DTensor::new(shape, out)?,
            Op::L2NormalizeRows { x, norms },
            "l2_normalize_rows",
        )
    }

    /// Mean over rows of the negative log-softmax at each row's target column.
    pub fn nll_rows(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(dim_err("nll_rows targets do not match logits".into()));
        }
        let src = self.value(x).data();
        let mut probs = src.to_vec();
        let mut total = T::zero();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            total = total + kernels::log_sum_exp(row) - row[targets[i]];
            kernels::softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let loss = total / T::of_usize(r);
        self.push(
            DTensor::scalar(loss),
            Op::NllRows {
                x,
                targets: targets.to_vec(),
                probs,
            },
            "nll_rows",
        )
    }

    /// Mean squared error against a constant target, restricted to `rows`.
    pub fn mse_rows(&mut self, pred: Var, target: &DTensor<T>, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(pred);
        if target.rows_cols() != (r, c) {
            return Err(dim_err(format!(
                "mse target {:?} vs prediction {:?}",
                target.shape(),
                self.shape(pred)
            )));
        }
        if rows.is_empty() {
            return Err(Error::Precondition("mse over an empty row set".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Geometry(format!("row {bad} out of range for {r}")));
        }
        let p = self.value(pred).data();
        let t = target.data();
        let mut acc = T::zero();
        for &i in rows {
            for j in 0..c {
                let d = p[i * c + j] - t[i * c + j];
                acc = acc + d * d;
            }
        }
        let loss = acc / T::of_usize(rows.len() * c);
        self.push(
            DTensor::scalar(loss),
            Op::MseRows {
                pred,
                target: t.to_vec(),
                rows: rows.to_vec(),
            },
            "mse_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(DTensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(dim_err(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.vjp(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let accum = |grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, &c)| *a = *a + c),
                None => *slot = Some(contrib.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                let da = kernels::matmul_bt(g, self.value(*b).data(), m, n, k);
                let db = kernels::matmul_at(self.value(*a).data(), g, m, k, n);
                accum(grads, *a, &da);
                accum(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = self.rc(*a);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                accum(grads, *a, &da);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g);
                accum(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.rc(*a);
                accum(grads, *a, g);
                let mut colsum = vec![T::zero(); n];
                for i in 0..m {
                    for (c, &v) in colsum.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *c = *c + v;
                    }
                }
                accum(grads, *row, &colsum);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<T> = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let db: Vec<T> = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                accum(grads, *a, &da);
                accum(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = g.iter().map(|&v| v * *c).collect();
                accum(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                accum(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let (r, c) = self.rc(*a);
                let y = node.value.data();
                let mut da = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                accum(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.rc(*x);
                let gm = self.value(*gamma).data();
                let n = T::of_usize(c);
                let mut dx = vec![T::zero(); r * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..c {
                        let dxh = gr[j] * gm[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                        dg[j] = dg[j] + gr[j] * xh[j];
                        db[j] = db[j] + gr[j];
                    }
                    let mean_dxh = sum_dxh / n;
                    let mean_dxh_xh = sum_dxh_xh / n;
                    for j in 0..c {
                        let dxh = gr[j] * gm[j];
                        dx[i * c + j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                accum(grads, *x, &dx);
                accum(grads, *gamma, &dg);
                accum(grads, *beta, &db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = self.rc(*q);
                let dh = d / heads;
                let scale = T::one() / T::of_usize(dh).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let mut ds = vec![T::zero(); t];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    for i in 0..t {
                        let go = &g[i * d + off..i * d + off + dh];
                        // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                        for j in 0..t {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            ds[j] = kernels::dot(go, vj);
                            let pij = p[i * t + j];
                            for (dvv, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go)
                            {
                                *dvv = *dvv + pij * gv;
                            }
                        }
                        let pr = &p[i * t..(i + 1) * t];
                        let s = kernels::dot(pr, &ds[..t]);
                        for j in 0..t {
                            let dsij = pr[j] * (ds[j] - s) * scale;
                            if dsij == T::zero() {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] = dq[i * d + off + c] + dsij * kd[j * d + off + c];
                                dk[j * d + off + c] = dk[j * d + off + c] + dsij * qd[i * d + off + c];
                            }
                        }
                    }
                }
                accum(grads, *q, &dq);
                accum(grads, *k, &dk);
                accum(grads, *v, &dv);
            }
            Op::SelectRows(sources) => {
                let cols = node.value.cols();
                for (r_out, &(src, r_in)) in sources.iter().enumerate() {
                    let gr = &g[r_out * cols..(r_out + 1) * cols];
                    let slot = &mut grads[src.0];
                    let acc = slot.get_or_insert_with(|| vec![T::zero(); self.value(src).len()]);
                    for (a, &v) in acc[r_in * cols..(r_in + 1) * cols].iter_mut().zip(gr) {
                        *a = *a + v;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.rc(*x);
                let inv = T::one() / T::of_usize(r);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv;
                    }
                }
                accum(grads, *x, &dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = self.rc(*x);
                let y = node.value.data();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                accum(grads, *x, &dx);
            }
            Op::NllRows { x, targets, probs } => {
                let (r, c) = self.rc(*x);
                let scale = g[0] / T::of_usize(r);
                let mut dx = probs.clone();
                for i in 0..r {
                    dx[i * c + targets[i]] = dx[i * c + targets[i]] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * scale);
                accum(grads, *x, &dx);
            }
            Op::MseRows { pred, target, rows } => {
                let (r, c) = self.rc(*pred);
                let p = self.value(*pred).data();
                let scale = g[0] * T::of(2.0) / T::of_usize(rows.len() * c);
                let mut dp = vec![T::zero(); r * c];
                for &i in rows {
                    for j in 0..c {
                        dp[i * c + j] = dp[i * c + j] + (p[i * c + j] - target[i * c + j]) * scale;
                    }
                }
                accum(grads, *pred, &dp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accum(grads, *x, &vec![g[0]; n]);
            }
        }
        Ok(())
    }
}
