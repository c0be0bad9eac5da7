//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive records its inputs (and whatever it needs to cache for the
//! backward pass) on a [`Tape`]. Nodes are appended in evaluation order, so the
//! tape is always topologically sorted and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Parameters enter the tape by reference through [`Tape::param`]. The
//! [`Tape::linear`] and [`Tape::layer_norm`] primitives read only a prefix block
//! of a parameter, which is how sub-networks are sliced out of a supernet
//! without copying weights. The backward pass reports, per parameter, exactly
//! which elements were read, so the optimizer can leave the rest untouched.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Strides, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu {
        a: Var,
        tanh: Vec<f64>,
    },
    Softmax(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        in_dim: usize,
        out_dim: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Which part of a parameter an op read, for touched-element bookkeeping.
enum Region<'a> {
    All,
    Prefix(usize),
    Block {
        rows: usize,
        cols: usize,
        stride: usize,
    },
    Rows {
        ids: &'a [usize],
        width: usize,
    },
}

/// A recording of primitive operations, replayed backwards by [`Tape::backward`].
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value"))
    }
}

fn shape_err(op: &str, detail: impl std::fmt::Display) -> Error {
    Error::InvalidShape(format!("{op}: {detail}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` of the GELU inner term, via one `exp`.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// In-place numerically stable softmax of one row.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameter storage; only [`Tape::leaf`] inputs.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.tensor()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if let Some(Some(var)) = self.param_vars.get(id.0) {
            return Ok(*var);
        }
        let tensor = store.get(id);
        if !tensor.is_finite() {
            return Err(Error::numeric("param", format!("{} holds a non-finite value", store.name(id))));
        }
        self.nodes.push(Node {
            value: Value::Borrowed(tensor),
            op: Op::Param(id),
            requires_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(var);
        Ok(var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims();
        let (k2, n) = self.value(b).matrix_dims();
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.dims(), tb.dims())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.dims().to_vec(), data)?;
        check_finite(name, &t)?;
        Ok(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(src.dims().to_vec(), data)?;
        check_finite("scale", &t)?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let t = Tensor::scalar(s);
        check_finite("sum", &t)?;
        Ok(self.push(t, Op::Sum(a), &[a]))
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let tanh: Vec<f64> = src.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = src.data().iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(src.dims().to_vec(), data)?;
        check_finite("gelu", &t)?;
        Ok(self.push(t, Op::Gelu { a, tanh }, &[a]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (_, cols) = src.matrix_dims();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let t = Tensor::new(src.dims().to_vec(), data)?;
        check_finite("softmax", &t)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// `x @ w[..out_dim, ..in_dim]^T + b[..out_dim]`.
    ///
    /// `w` is stored `max_out × max_in`; only its top-left block is read.
    pub fn linear(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Var> {
        let (m, xin) = self.value(x).matrix_dims();
        let (max_out, max_in) = self.value(w).matrix_dims();
        if xin != in_dim {
            return Err(shape_err("linear", format!("input width {xin} != in_dim {in_dim}")));
        }
        if in_dim == 0 || out_dim == 0 || in_dim > max_in || out_dim > max_out {
            return Err(shape_err(
                "linear",
                format!("slice {out_dim}x{in_dim} outside weight {max_out}x{max_in}"),
            ));
        }
        let mut out = vec![0.0; m * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() < out_dim {
                return Err(shape_err("linear", format!("bias len {} < {out_dim}", bias.len())));
            }
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(&bias[..out_dim]);
            }
        }
        gemm(
            m,
            in_dim,
            out_dim,
            self.value(x).data(),
            Strides::row_major(in_dim),
            self.value(w).data(),
            Strides::transposed(max_in),
            1.0,
            &mut out,
            Strides::row_major(out_dim),
        );
        let t = Tensor::new(vec![m, out_dim], out)?;
        check_finite("linear", &t)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::Linear {
                x,
                w,
                b,
                in_dim,
                out_dim,
            },
            &inputs,
        ))
    }

    /// Row-wise layer norm over width `dim` using `gamma[..dim]`, `beta[..dim]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, dim: usize) -> Result<Var> {
        let (m, width) = self.value(x).matrix_dims();
        if width != dim {
            return Err(shape_err("layer_norm", format!("width {width} != {dim}")));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() < dim || bt.len() < dim {
            return Err(shape_err("layer_norm", "affine parameters shorter than dim"));
        }
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * dim];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * dim];
        for r in 0..m {
            let row = &src[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..dim {
                let xh = (row[c] - mean) * rs;
                xhat[r * dim + c] = xh;
                out[r * dim + c] = xh * g[c] + bt[c];
            }
        }
        let t = Tensor::new(vec![m, dim], out)?;
        check_finite("layer_norm", &t)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table` (`vocab × width`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.value(table).matrix_dims();
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("embedding", format!("id {bad} >= {rows}")));
        }
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, width) = self.value(x).matrix_dims();
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} >= {m}")));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "no rows"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let t = Tensor::new(vec![rows.len(), width], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × d_attn`; heads split the columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d_attn) = self.value(q).matrix_dims();
        for other in [k, v] {
            if self.value(other).matrix_dims() != (rows, d_attn) {
                return Err(shape_err("attention", "q, k, v dims differ"));
            }
        }
        if rows != batch * seq || heads == 0 || d_attn % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{rows} rows for batch {batch} x seq {seq}, d_attn {d_attn}, heads {heads}"),
            ));
        }
        let hd = d_attn / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d_attn];
        let head_view = Strides::row_major(d_attn);
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d_attn + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    hd,
                    seq,
                    &qd[off..],
                    head_view,
                    &kd[off..],
                    Strides::transposed(d_attn),
                    0.0,
                    p,
                    Strides::row_major(seq),
                );
                for row in p.chunks_mut(seq) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_row(row);
                }
                gemm(
                    seq,
                    seq,
                    hd,
                    p,
                    Strides::row_major(seq),
                    &vd[off..],
                    head_view,
                    0.0,
                    &mut out[off..],
                    head_view,
                );
            }
        }
        let t = Tensor::new(vec![rows, d_attn], out)?;
        check_finite("attention", &t)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean cross-entropy over rows with a label; unlabeled rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = self.value(logits).matrix_dims();
        if labels.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
        }
        let count = labels.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyBatch("no labeled positions".into()));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= classes) {
            return Err(shape_err("cross_entropy", format!("label {bad} >= {classes}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, label) in probs.chunks_mut(classes).zip(labels) {
            let Some(label) = *label else { continue };
            softmax_row(row);
            total -= row[label].ln();
        }
        let t = Tensor::scalar(total / count as f64);
        check_finite("cross_entropy", &t)?;
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut touched: Vec<Option<Vec<bool>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            // Only nodes recorded earlier receive gradient from node i, so its
            // own buffer can be taken; leaves keep theirs for the caller.
            let dy = match node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let mut ctx = BackCtx {
                tape: self,
                grads: &mut grads,
                touched: &mut touched,
            };
            ctx.propagate(&node.op, node.value.tensor(), &dy);
        }
        Ok(Gradients { grads, touched })
    }
}

struct BackCtx<'t, 'p> {
    tape: &'t Tape<'p>,
    grads: &'t mut Vec<Option<Vec<f64>>>,
    touched: &'t mut Vec<Option<Vec<bool>>>,
}

impl BackCtx<'_, '_> {
    fn val(&self, v: Var) -> &[f64] {
        self.tape.value(v).data()
    }

    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    fn buf(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.tape.value(v).len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn mark(&mut self, v: Var, region: Region<'_>) {
        if !matches!(self.tape.nodes[v.0].op, Op::Param(_)) {
            return;
        }
        let len = self.tape.value(v).len();
        let mask = self.touched[v.0].get_or_insert_with(|| vec![false; len]);
        match region {
            Region::All => mask.iter_mut().for_each(|m| *m = true),
            Region::Prefix(n) => mask[..n].iter_mut().for_each(|m| *m = true),
            Region::Block { rows, cols, stride } => {
                for r in 0..rows {
                    mask[r * stride..r * stride + cols]
                        .iter_mut()
                        .for_each(|m| *m = true);
                }
            }
            Region::Rows { ids, width } => {
                for &r in ids {
                    mask[r * width..(r + 1) * width]
                        .iter_mut()
                        .for_each(|m| *m = true);
                }
            }
        }
    }

    fn add_into(&mut self, v: Var, contrib: &[f64]) {
        if !self.wants(v) {
            return;
        }
        self.mark(v, Region::All);
        for (g, c) in self.buf(v).iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn propagate(&mut self, op: &Op, out: &Tensor, dy: &[f64]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.tape.value(a).matrix_dims();
                let (_, n) = self.tape.value(b).matrix_dims();
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        dy,
                        Strides::row_major(n),
                        self.val(b),
                        Strides::transposed(n),
                        0.0,
                        &mut da,
                        Strides::row_major(k),
                    );
                    self.add_into(a, &da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.val(a),
                        Strides::transposed(k),
                        dy,
                        Strides::row_major(n),
                        0.0,
                        &mut db,
                        Strides::row_major(n),
                    );
                    self.add_into(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.add_into(*a, dy);
                self.add_into(*b, dy);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let da: Vec<f64> = dy.iter().zip(self.val(b)).map(|(g, y)| g * y).collect();
                    self.add_into(a, &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = dy.iter().zip(self.val(a)).map(|(g, x)| g * x).collect();
                    self.add_into(b, &db);
                }
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                self.add_into(*a, &da);
            }
            Op::Sum(a) => {
                let len = self.tape.value(*a).len();
                self.add_into(*a, &vec![dy[0]; len]);
            }
            Op::Gelu { a, tanh } => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(self.val(*a))
                    .zip(tanh)
                    .map(|((g, &x), &t)| g * gelu_grad(x, t))
                    .collect();
                self.add_into(*a, &da);
            }
            Op::Softmax(a) => {
                let (_, cols) = out.matrix_dims();
                let mut da = vec![0.0; dy.len()];
                for ((d, g), y) in da
                    .chunks_mut(cols)
                    .zip(dy.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[c] = y[c] * (g[c] - dot);
                    }
                }
                self.add_into(*a, &da);
            }
            Op::Linear {
                x,
                w,
                b,
                in_dim,
                out_dim,
            } => self.linear_back(*x, *w, *b, *in_dim, *out_dim, dy),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                rstd,
            } => self.layer_norm_back(*x, *gamma, *beta, *dim, xhat, rstd, dy),
            Op::Embedding { table, ids } => {
                let table = *table;
                if !self.wants(table) {
                    return;
                }
                let (_, width) = self.tape.value(table).matrix_dims();
                self.mark(table, Region::Rows { ids, width });
                let g = self.buf(table);
                for (row, &id) in dy.chunks(width).zip(ids) {
                    for (dst, src) in g[id * width..(id + 1) * width].iter_mut().zip(row) {
                        *dst += src;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if !self.wants(x) {
                    return;
                }
                let (_, width) = self.tape.value(x).matrix_dims();
                self.mark(x, Region::Rows { ids: rows, width });
                let g = self.buf(x);
                for (row, &r) in dy.chunks(width).zip(rows) {
                    for (dst, src) in g[r * width..(r + 1) * width].iter_mut().zip(row) {
                        *dst += src;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_back(*q, *k, *v, *batch, *seq, *heads, probs, dy),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let (_, classes) = self.tape.value(*logits).matrix_dims();
                let mut dl = vec![0.0; probs.len()];
                let scale = dy[0] / *count as f64;
                for ((d, p), label) in dl
                    .chunks_mut(classes)
                    .zip(probs.chunks(classes))
                    .zip(labels)
                {
                    let Some(label) = *label else { continue };
                    for c in 0..classes {
                        d[c] = p[c] * scale;
                    }
                    d[label] -= scale;
                }
                self.add_into(*logits, &dl);
            }
        }
    }

    fn linear_back(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        in_dim: usize,
        out_dim: usize,
        dy: &[f64],
    ) {
        let m = dy.len() / out_dim;
        let (_, max_in) = self.tape.value(w).matrix_dims();
        if self.wants(x) {
            let mut dx = vec![0.0; m * in_dim];
            gemm(
                m,
                out_dim,
                in_dim,
                dy,
                Strides::row_major(out_dim),
                self.val(w),
                Strides::row_major(max_in),
                0.0,
                &mut dx,
                Strides::row_major(in_dim),
            );
            self.add_into(x, &dx);
        }
        if self.wants(w) {
            self.mark(
                w,
                Region::Block {
                    rows: out_dim,
                    cols: in_dim,
                    stride: max_in,
                },
            );
            let tape = self.tape;
            let xs = tape.value(x).data();
            let g = self.grads[w.0].get_or_insert_with(|| vec![0.0; tape.value(w).len()]);
            gemm(
                out_dim,
                m,
                in_dim,
                dy,
                Strides::transposed(out_dim),
                xs,
                Strides::row_major(in_dim),
                1.0,
                g,
                Strides::row_major(max_in),
            );
        }
        if let Some(b) = b {
            if self.wants(b) {
                self.mark(b, Region::Prefix(out_dim));
                let g = self.buf(b);
                for row in dy.chunks(out_dim) {
                    for (dst, src) in g[..out_dim].iter_mut().zip(row) {
                        *dst += src;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_back(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: &[f64],
        rstd: &[f64],
        dy: &[f64],
    ) {
        let m = rstd.len();
        if self.wants(x) {
            let g = self.val(gamma);
            let mut dx = vec![0.0; m * dim];
            let mut dxhat = vec![0.0; dim];
            for r in 0..m {
                let row_dy = &dy[r * dim..(r + 1) * dim];
                let row_xh = &xhat[r * dim..(r + 1) * dim];
                for c in 0..dim {
                    dxhat[c] = row_dy[c] * g[c];
                }
                let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                let mean_dx = dxhat.iter().zip(row_xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                for c in 0..dim {
                    dx[r * dim + c] = rstd[r] * (dxhat[c] - mean_d - row_xh[c] * mean_dx);
                }
            }
            self.add_into(x, &dx);
        }
        if self.wants(gamma) {
            self.mark(gamma, Region::Prefix(dim));
            let g = self.buf(gamma);
            for (row_dy, row_xh) in dy.chunks(dim).zip(xhat.chunks(dim)) {
                for c in 0..dim {
                    g[c] += row_dy[c] * row_xh[c];
                }
            }
        }
        if self.wants(beta) {
            self.mark(beta, Region::Prefix(dim));
            let g = self.buf(beta);
            for row_dy in dy.chunks(dim) {
                for c in 0..dim {
                    g[c] += row_dy[c];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_back(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        dy: &[f64],
    ) {
        let (rows, d_attn) = self.tape.value(q).matrix_dims();
        let hd = d_attn / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.val(q), self.val(k), self.val(v));
        let mut dq = vec![0.0; rows * d_attn];
        let mut dk = vec![0.0; rows * d_attn];
        let mut dv = vec![0.0; rows * d_attn];
        let mut dp = vec![0.0; seq * seq];
        let head_view = Strides::row_major(d_attn);
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d_attn + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dP = dO V^T
                gemm(
                    seq,
                    hd,
                    seq,
                    &dy[off..],
                    head_view,
                    &vd[off..],
                    Strides::transposed(d_attn),
                    0.0,
                    &mut dp,
                    Strides::row_major(seq),
                );
                // dV = P^T dO
                gemm(
                    seq,
                    seq,
                    hd,
                    p,
                    Strides::transposed(seq),
                    &dy[off..],
                    head_view,
                    1.0,
                    &mut dv[off..],
                    head_view,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the 1/√hd scale
                for (dp_row, p_row) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    for (d, pv) in dp_row.iter_mut().zip(p_row) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                gemm(
                    seq,
                    seq,
                    hd,
                    &dp,
                    Strides::row_major(seq),
                    &kd[off..],
                    head_view,
                    1.0,
                    &mut dq[off..],
                    head_view,
                );
                gemm(
                    seq,
                    seq,
                    hd,
                    &dp,
                    Strides::transposed(seq),
                    &qd[off..],
                    head_view,
                    1.0,
                    &mut dk[off..],
                    head_view,
                );
            }
        }
        self.add_into(q, &dq);
        self.add_into(k, &dk);
        self.add_into(v, &dv);
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    touched: Vec<Option<Vec<bool>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node; zeros if it was unused.
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Vec<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }

    /// Collects parameter gradients and touched masks keyed by [`ParamId`].
    pub fn param_grads(self, tape: &Tape<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(tape.param_vars.len());
        let Gradients { grads, touched } = self;
        for (var, (g, t)) in grads.into_iter().zip(touched).enumerate() {
            let Op::Param(id) = tape.nodes[var].op else {
                continue;
            };
            let len = tape.nodes[var].value.tensor().len();
            let entry = out.entry_mut(id, len);
            if let Some(g) = g {
                entry.grad = g;
            }
            if let Some(t) = t {
                entry.touched = t;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for every input tensor.
    fn grad_check(
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
    ) {
        let h = 1e-5;
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (idx, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(&tape, *var);
            for e in 0..inputs[idx].len() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic[e].abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic[e] - numeric).abs() / denom;
                assert!(
                    rel <= 1e-4,
                    "input {idx} elem {e}: analytic {} numeric {numeric} rel {rel}",
                    analytic[e]
                );
            }
        }
    }

    /// Projects an output onto fixed random weights so every element matters.
    fn project(tape: &mut Tape<'static>, out: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, tape.value(out).dims());
        let w = tape.leaf(w, false)?;
        let p = tape.mul(out, w)?;
        tape.sum(p)
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), false).unwrap();
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap(), false).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.leaf(rand_tensor(&mut rng, &[5, 7]), false).unwrap();
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 3], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::full(&[3, 2], 1.0), false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).dims(), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_dim_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut tape = Tape::new();
        let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(bad, true), Err(Error::Numeric { .. })));
        let huge = tape.leaf(Tensor::new(vec![1], vec![1e308]).unwrap(), false).unwrap();
        assert!(matches!(tape.scale(huge, 10.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 2], 0.7), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x), vec![1.0; 6]);
    }

    #[test]
    fn zero_scaled_gradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], 2.5), true).unwrap();
        let y = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x), vec![0.0; 4]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true).unwrap();
        let unused = tape.leaf(Tensor::full(&[3], 1.0), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, unused), vec![0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_matmul_add_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[3, 2]);
        grad_check(vec![a, b, c], |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let s = t.add(ab, v[2])?;
            let m = t.mul(s, v[2])?;
            let m = t.scale(m, -1.5)?;
            t.sum(m)
        });
    }

    #[test]
    fn grad_gelu_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 5]);
        grad_check(vec![a], |t, v| {
            let g = t.gelu(v[0])?;
            let g = t.scale(g, 3.0)?;
            let s = t.softmax(g)?;
            project(t, s, 20)
        });
    }

    #[test]
    fn grad_sliced_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        grad_check(vec![x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]), 2, 3)?;
            project(t, y, 21)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        grad_check(vec![x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 3)?;
            project(t, y, 22)
        });
    }

    #[test]
    fn grad_embedding_gather_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_tensor(&mut rng, &[6, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        grad_check(vec![table, w], |t, v| {
            let e = t.embedding(v[0], &[1, 3, 3, 0])?;
            let r = t.gather_rows(e, &[0, 2, 3])?;
            let logits = t.linear(r, v[1], None, 4, 5)?;
            t.cross_entropy(logits, &[Some(2), None, Some(4)])
        });
    }

    #[test]
    fn grad_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_tensor(&mut rng, &[6, 4]);
        let k = rand_tensor(&mut rng, &[6, 4]);
        let v = rand_tensor(&mut rng, &[6, 4]);
        grad_check(vec![q, k, v], |t, vars| {
            let a = t.attention(vars[0], vars[1], vars[2], 2, 3, 2)?;
            project(t, a, 23)
        });
    }

    #[test]
    fn attention_matches_naive_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (seq, d) = (3, 2);
        let q = rand_tensor(&mut rng, &[seq, d]);
        let k = rand_tensor(&mut rng, &[seq, d]);
        let v = rand_tensor(&mut rng, &[seq, d]);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.leaf(q.clone(), false).unwrap(),
            tape.leaf(k.clone(), false).unwrap(),
            tape.leaf(v.clone(), false).unwrap(),
        );
        let out = tape.attention(qv, kv, vv, 1, seq, 1).unwrap();
        for i in 0..seq {
            let mut scores: Vec<f64> = (0..seq)
                .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            softmax_row(&mut scores);
            for c in 0..d {
                let expect: f64 = (0..seq).map(|j| scores[j] * v.at(j, c)).sum();
                assert!((tape.value(out).at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sliced_linear_touches_only_prefix() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::full(&[4, 4], 0.5)).unwrap();
        let b = store.insert("b", Tensor::full(&[4], 0.1)).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.leaf(Tensor::full(&[2, 2], 1.0), false).unwrap();
        let (wv, bv) = (tape.param(w).unwrap(), tape.param(b).unwrap());
        let y = tape.linear(x, wv, Some(bv), 2, 3).unwrap();
        // 2 * 0.5 + 0.1 per entry
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.1).abs() < 1e-15));
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap().param_grads(&tape);
        let gw = grads.get(w).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let inside = r < 3 && c < 2;
                assert_eq!(gw.touched[r * 4 + c], inside);
                if !inside {
                    assert_eq!(gw.grad[r * 4 + c], 0.0);
                }
            }
        }
        assert_eq!(grads.get(b).unwrap().touched, vec![true, true, true, false]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[16, 16]);
        let b = rand_tensor(&mut rng, &[16, 16]);
        let run = || {
            let mut tape = Tape::new();
            let (x, y) = (tape.leaf(a.clone(), false).unwrap(), tape.leaf(b.clone(), false).unwrap());
            let z = tape.matmul(x, y).unwrap();
            let z = tape.softmax(z).unwrap();
            tape.value(z).clone()
        };
        let (r1, r2) = (run(), run());
        assert!(r1.data().iter().zip(r2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
