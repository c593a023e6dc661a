use super::params::ParamStore;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Gelu(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    RowNorm(usize),
    Log(usize),
    SumAll(usize),
    MeanRows(usize),
    MeanCols(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    MaskRows {
        x: usize,
        token: usize,
        mask: Vec<bool>,
    },
    SoftCrossEntropy {
        logits: usize,
        targets: Vec<T>,
        probs: Vec<T>,
        inv_temp: T,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        qkv: usize,
        batch: usize,
        tokens: usize,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. All recorded values are matrices (`[rows, cols]`).
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
    grad_enabled: bool,
    checked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact Gaussian-CDF GELU.
pub fn gelu<T: Real>(x: T) -> T {
    T::c(gelu_f64(x.f64()))
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records gradients, with non-finite checks enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
            checked: true,
        }
    }

    /// A tape where every leaf (including parameters) is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var, NnError> {
        if self.checked && !value.is_finite() {
            return Err(NnError::NonFinite(name.to_string()));
        }
        let (r, c) = value.dims2();
        let value = if value.shape().len() == 2 {
            value
        } else {
            value.reshape(vec![r, c])?
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, NnError> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf that receives gradients (when the tape records them).
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var, NnError> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Load a named parameter. On a recording tape its gradient is later
    /// collected by [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NnError> {
        let t = store
            .value(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true, name)?;
        if self.grad_enabled {
            self.params.push((name.to_string(), v.0));
        }
        Ok(v)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.dims(a) != self.dims(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NnError::Shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let t = self.value(a).transpose2();
        let ng = self.ng(a.0);
        self.push(t, Op::Transpose(a.0), ng, "transpose")
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var, NnError> {
        self.check_same(a, b, name)?;
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Tensor::matrix(r, c, out)?, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a.0, b.0), "mul")
    }

    fn row_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var, NnError> {
        let (r, c) = self.dims(a);
        if self.dims(b) != (1, c) {
            return Err(NnError::Shape(format!(
                "{name}: [{r},{c}] with row {:?}",
                self.dims(b)
            )));
        }
        let row = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Tensor::matrix(r, c, out)?, op, ng, name)
    }

    /// Broadcast-add a `[1, cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_op(a, row, |x, y| x + y, Op::AddRow(a.0, row.0), "add_row")
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_op(a, row, |x, y| x * y, Op::MulRow(a.0, row.0), "mul_row")
    }

    fn map_op(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>, name: &str) -> Result<Var, NnError> {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let ng = self.ng(a.0);
        self.push(Tensor::matrix(r, c, out)?, op, ng, name)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NnError> {
        self.map_op(a, |x| x * s, Op::Scale(a.0, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, NnError> {
        self.map_op(a, |x| x + s, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NnError> {
        self.map_op(a, gelu, Op::Gelu(a.0), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NnError> {
        self.map_op(a, |x| x.max(T::zero()), Op::Relu(a.0), "relu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NnError> {
        self.map_op(a, |x| x.ln(), Op::Log(a.0), "log")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(a);
        let mut out = vec![T::zero(); r * c];
        for (row, o) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o);
        }
        let ng = self.ng(a.0);
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a.0), ng, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(a);
        let mut out = vec![T::zero(); r * c];
        for (row, o) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        let ng = self.ng(a.0);
        self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmax(a.0), ng, "log_softmax")
    }

    /// Row-wise layer norm with affine `gamma`, `beta` (`[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(NnError::Shape("layer_norm affine width".into()));
        }
        let n = T::c(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for (i, row) in self.value(x).data().chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = (var + eps).sqrt().recip();
            inv_std[i] = is;
            for (h, &v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(c)
            .flat_map(|hr| hr.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    /// Row-wise `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(r, c, out)?, Op::L2Normalize { x: x.0, norms }, ng, "l2_normalize")
    }

    /// Euclidean norm of each row, `[rows, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(r, 1, out)?, Op::RowNorm(x.0), ng, "row_norm")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x.0);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), ng, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NnError> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, T::c(1.0 / n as f64))
    }

    /// Mean over rows (axis 0), `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::c(1.0 / r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x.0), ng, "mean_rows")
    }

    /// Mean over columns (axis 1), `[rows, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        let inv = T::c(1.0 / c as f64);
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(r, 1, out)?, Op::MeanCols(x.0), ng, "mean_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let c = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(NnError::Shape("concat_rows: width mismatch".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.dims(p).0;
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let idx = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(idx), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let r = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(NnError::Shape("concat_cols: height mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let idx = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(idx), ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if start > end || end > r {
            return Err(NnError::Shape(format!("slice_rows {start}..{end} of {r}")));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(end - start, c, out)?, Op::SliceRows { x: x.0, start }, ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(NnError::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.ng(x.0);
        self.push(Tensor::matrix(r, end - start, out)?, Op::SliceCols { x: x.0, start }, ng, "slice_cols")
    }

    /// Gather rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NnError::Shape(format!("select_rows index {bad} of {r}")));
        }
        let v = self.value(x);
        let out = idx.iter().flat_map(|&i| v.row_slice(i).iter().copied()).collect();
        let ng = self.ng(x.0);
        self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::SelectRows { x: x.0, idx: idx.to_vec() },
            ng,
            "select_rows",
        )
    }

    /// Replace every row `i` with `mask[i]` set by the `[1, cols]` `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var, NnError> {
        let (r, c) = self.dims(x);
        if mask.len() != r || self.dims(token) != (1, c) {
            return Err(NnError::Shape("mask_rows: mask/token shape".into()));
        }
        let tok = self.value(token).data();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .zip(mask)
            .flat_map(|(row, &m)| if m { tok } else { row }.iter().copied())
            .collect();
        let ng = self.ng(x.0) || self.ng(token.0);
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::MaskRows {
                x: x.0,
                token: token.0,
                mask: mask.to_vec(),
            },
            ng,
            "mask_rows",
        )
    }

    /// Mean over rows of `-sum_k p_k log softmax(logits / temp)_k` for fixed
    /// target distributions `targets` (same shape as `logits`).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>, temp: T) -> Result<Var, NnError> {
        let (r, c) = self.dims(logits);
        if targets.dims2() != (r, c) {
            return Err(NnError::Shape("soft_cross_entropy targets".into()));
        }
        let inv_temp = temp.recip();
        let mut probs = vec![T::zero(); r * c];
        let mut logp = vec![T::zero(); c];
        let mut total = T::zero();
        let mut scaled = vec![T::zero(); c];
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            for (s, &x) in scaled.iter_mut().zip(row) {
                *s = x * inv_temp;
            }
            log_softmax_row(&scaled, &mut logp);
            let t = targets.row_slice(i);
            total = total - t.iter().zip(&logp).map(|(&p, &l)| p * l).sum::<T>();
            for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let loss = total / T::c(r as f64);
        let ng = self.ng(logits.0);
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: logits.0,
                targets: targets.data().to_vec(),
                probs,
                inv_temp,
            },
            ng,
            "soft_cross_entropy",
        )
    }

    /// Mean hard-label cross entropy of row-wise softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.dims(logits);
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(NnError::Shape("cross_entropy labels".into()));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut logp = vec![T::zero(); c];
        let mut total = T::zero();
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            log_softmax_row(row, &mut logp);
            total = total - logp[labels[i]];
            for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let ng = self.ng(logits.0);
        self.push(
            Tensor::scalar(total / T::c(r as f64)),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    /// Fused multi-head self-attention over `batch` sequences of `tokens` rows.
    /// `qkv` is `[batch*tokens, 3*dim]` laid out as `[q | k | v]`; output is
    /// `[batch*tokens, dim]` with heads concatenated along columns.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize, scale: T) -> Result<Var, NnError> {
        let (r, c3) = self.dims(qkv);
        if r != batch * tokens || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(NnError::Shape(format!(
                "attention: [{r},{c3}] for batch {batch} tokens {tokens} heads {heads}"
            )));
        }
        let dim = c3 / 3;
        let dh = dim / heads;
        let x = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut out = vec![T::zero(); r * dim];
        let mut scores = vec![T::zero(); tokens];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &x[(b * tokens + i) * c3 + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &x[(b * tokens + j) * c3 + dim + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    let prow = &mut probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                    softmax_row(&scores, prow);
                    let orow = &mut out[(b * tokens + i) * dim + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &x[(b * tokens + j) * c3 + 2 * dim + h * dh..][..dh];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o = *o + p * v;
                        }
                    }
                }
            }
        }
        let ng = self.ng(qkv.0);
        self.push(
            Tensor::matrix(r, dim, out)?,
            Op::Attention {
                qkv: qkv.0,
                batch,
                tokens,
                heads,
                scale,
                probs,
            },
            ng,
            "attention",
        )
    }

    /// Reverse pass from a `[1,1]` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.dims(loss) != (1, 1) {
            return Err(NnError::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], idx: usize) -> Option<&'a mut Vec<T>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        let n = self.nodes[idx].value.len();
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let (r, c) = node.value.dims2();
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2();
                let n = c;
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = self.acc(grads, a) {
                    gemm_nt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gemm_tn_acc(av, g, gb, m, k, n);
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    // out is [r,c] = a^T, so a is [c,r].
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] = ga[q * r + p] + g[p * c + q];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if let Some(gj) = self.acc(grads, j) {
                        gj.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(&bv) {
                        *x = *x + gy * o;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(&av) {
                        *x = *x + gy * o;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            &Op::MulRow(a, b) => {
                let av = val(a).to_vec();
                let bv = val(b).to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    for (grow, garow) in g.chunks(c).zip(ga.chunks_mut(c)) {
                        for ((x, &gy), &w) in garow.iter_mut().zip(grow).zip(&bv) {
                            *x = *x + gy * w;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for (grow, arow) in g.chunks(c).zip(av.chunks(c)) {
                        for ((x, &gy), &a) in gb.iter_mut().zip(grow).zip(arow) {
                            *x = *x + gy * a;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * s);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            &Op::Gelu(a) => {
                let av = val(a).to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&av) {
                        *x = *x + gy * T::c(gelu_grad_f64(v.f64()));
                    }
                }
            }
            &Op::Relu(a) => {
                let av = val(a).to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&av) {
                        if v > T::zero() {
                            *x = *x + gy;
                        }
                    }
                }
            }
            &Op::Log(a) => {
                let av = val(a).to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&av) {
                        *x = *x + gy / v;
                    }
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((grow, prow), garow) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot = grow.iter().zip(prow).map(|(&x, &p)| x * p).sum::<T>();
                        for ((x, &gy), &p) in garow.iter_mut().zip(grow).zip(prow) {
                            *x = *x + p * (gy - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((grow, lrow), garow) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let gsum = grow.iter().copied().sum::<T>();
                        for ((x, &gy), &l) in garow.iter_mut().zip(grow).zip(lrow) {
                            *x = *x + gy - l.exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma).to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((x, &gy), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *x = *x + gy * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(c) {
                        gb.iter_mut().zip(grow).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = T::c(c as f64);
                    for (ri, ((grow, hrow), gxrow)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                        let is = inv_std[ri];
                        for ((x, &d), &h) in gxrow.iter_mut().zip(&dh).zip(hrow) {
                            *x = *x + is / n * (n * d - sum_dh - h * sum_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let xv = val(*x);
                    for (ri, ((grow, yrow), gxrow)) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let n = norms[ri];
                        let raw = xv[ri * c..(ri + 1) * c].iter().map(|&v| v * v).sum::<T>().sqrt();
                        if raw < n {
                            // Clamped by eps: y = x / eps is linear.
                            for (x, &gy) in gxrow.iter_mut().zip(grow) {
                                *x = *x + gy / n;
                            }
                            continue;
                        }
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((x, &gy), &y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *x = *x + (gy - y * dot) / n;
                        }
                    }
                }
            }
            &Op::RowNorm(a) => {
                let av = val(a).to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    let ca = av.len() / r;
                    for ri in 0..r {
                        let n = out[ri];
                        if n == T::zero() {
                            continue;
                        }
                        let s = g[ri] / n;
                        for (x, &v) in ga[ri * ca..(ri + 1) * ca].iter_mut().zip(&av[ri * ca..(ri + 1) * ca]) {
                            *x = *x + s * v;
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            &Op::MeanRows(a) => {
                let ra = self.nodes[a].value.rows();
                let inv = T::c(1.0 / ra as f64);
                if let Some(ga) = self.acc(grads, a) {
                    for garow in ga.chunks_mut(c) {
                        garow.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * inv);
                    }
                }
            }
            &Op::MeanCols(a) => {
                let ca = self.nodes[a].value.cols();
                let inv = T::c(1.0 / ca as f64);
                if let Some(ga) = self.acc(grads, a) {
                    for (garow, &gy) in ga.chunks_mut(ca).zip(g) {
                        garow.iter_mut().for_each(|x| *x = *x + gy * inv);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, &y)| *x = *x + y);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for ri in 0..r {
                            let src = &g[ri * c + col..ri * c + col + pc];
                            gp[ri * pc..(ri + 1) * pc].iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                    col += pc;
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            &Op::SliceCols { x, start } => {
                let cx = self.nodes[x].value.cols();
                if let Some(gx) = self.acc(grads, x) {
                    for ri in 0..r {
                        gx[ri * cx + start..ri * cx + start + c]
                            .iter_mut()
                            .zip(&g[ri * c..(ri + 1) * c])
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (ri, &src) in idx.iter().enumerate() {
                        gx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[ri * c..(ri + 1) * c])
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::MaskRows { x, token, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (ri, &m) in mask.iter().enumerate() {
                        if !m {
                            gx[ri * c..(ri + 1) * c]
                                .iter_mut()
                                .zip(&g[ri * c..(ri + 1) * c])
                                .for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
                if let Some(gt) = self.acc(grads, *token) {
                    for (ri, &m) in mask.iter().enumerate() {
                        if m {
                            gt.iter_mut().zip(&g[ri * c..(ri + 1) * c]).for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
                inv_temp,
            } => {
                let rows = self.nodes[*logits].value.rows();
                let s = g[0] * *inv_temp / T::c(rows as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    let k = self.nodes[*logits].value.cols();
                    for ((x, &p), t) in gl.iter_mut().zip(probs).zip(targets.chunks(k).flat_map(|row| {
                        let mass = row.iter().copied().sum::<T>();
                        row.iter().map(move |&t| (t, mass))
                    })) {
                        // d/dz of -sum_k t_k log q_k = (mass * q - t) / temp.
                        *x = *x + s * (t.1 * p - t.0);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let s = g[0] / T::c(rows as f64);
                let k = self.nodes[*logits].value.cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (ri, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let ind = if j == lab { T::one() } else { T::zero() };
                            gl[ri * k + j] = gl[ri * k + j] + s * (probs[ri * k + j] - ind);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                scale,
                probs,
            } => {
                let (batch, tokens, heads, scale) = (*batch, *tokens, *heads, *scale);
                let x = val(*qkv).to_vec();
                let c3 = 3 * c;
                let dim = c;
                let dh = dim / heads;
                if let Some(gx) = self.acc(grads, *qkv) {
                    let mut dp = vec![T::zero(); tokens];
                    for b in 0..batch {
                        for h in 0..heads {
                            let pbase = (b * heads + h) * tokens * tokens;
                            for i in 0..tokens {
                                let go = &g[(b * tokens + i) * dim + h * dh..][..dh];
                                let prow = &probs[pbase + i * tokens..pbase + (i + 1) * tokens];
                                for (j, d) in dp.iter_mut().enumerate() {
                                    let vj = &x[(b * tokens + j) * c3 + 2 * dim + h * dh..][..dh];
                                    *d = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                    // dV_j += p_ij * dO_i
                                    let gv = &mut gx[(b * tokens + j) * c3 + 2 * dim + h * dh..][..dh];
                                    let p = prow[j];
                                    gv.iter_mut().zip(go).for_each(|(x, &y)| *x = *x + p * y);
                                }
                                let dot = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                                for j in 0..tokens {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let qi_off = (b * tokens + i) * c3 + h * dh;
                                    let kj_off = (b * tokens + j) * c3 + dim + h * dh;
                                    for t in 0..dh {
                                        gx[qi_off + t] = gx[qi_off + t] + ds * x[kj_off + t];
                                        gx[kj_off + t] = gx[kj_off + t] + ds * x[qi_off + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Add the gradients of every parameter loaded via [`Tape::param`] into `store`.
    pub fn accumulate_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<(), NnError> {
        for (name, idx) in &self.params {
            if let Some(g) = grads.grads[*idx].as_deref() {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}
