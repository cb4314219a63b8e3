//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every op applied to its [`Var`]s during the forward
//! pass. [`Tape::backward`] then replays the tape in reverse and returns a
//! [`Gradients`] table, which can be folded into a [`ParamStore`] with
//! [`ParamStore::accumulate`]. Parameters are borrowed, never copied.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::rng::Rng;
use crate::tensor::{batch_dims, check_finite, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    /// Stride-1 convolution padded so the output length equals the input length.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Self {
            stride: 1,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    /// Stride-1 convolution that only looks at the current and past frames.
    pub fn causal(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad_left: kernel - 1,
            pad_right: 0,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f32, f32)>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    L1Mean(Var, Var),
    MseMean(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    RelShift {
        x: Var,
        q_offset: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

enum Value {
    Owned(Vec<f32>),
    Param(ParamId),
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id)
                .data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f32> {
        let d = self.value(v);
        if d.len() != 1 {
            return Err(Error::shape("scalar_value", self.shape(v), &[]));
        }
        Ok(d[0])
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &str,
        shape: Vec<usize>,
        data: Vec<f32>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(&data, op_name)?;
        let requires_grad = inputs.iter().any(|&i| self.requires(i));
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referring to a parameter of the bound store. Repeated calls return
    /// the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("Tape::param requires Tape::with_params");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `a @ b` for rank-2 operands or batched rank-3 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`, with `b` stored as `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ba, m, k) = batch_dims(&sa, "matmul")?;
        let (bb, r1, r2) = batch_dims(&sb, "matmul")?;
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb || sa.len() != sb.len() {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0f32; ba * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..ba {
                let aa = &av[bi * m * k..(bi + 1) * m * k];
                let bbm = &bv[bi * k * n..(bi + 1) * k * n];
                let cc = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(aa, bbm, cc, m, k, n);
                } else {
                    gemm_nn(aa, bbm, cc, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 3 {
            vec![ba, m, n]
        } else {
            vec![m, n]
        };
        self.push("matmul", shape, out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `x @ w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `b` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu(a), &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last dimension. With `causal = Some(off)`, entry `j`
    /// of row `i` (row index within the trailing matrix) is masked when
    /// `j > i + off`, which gives it probability exactly zero.
    pub fn softmax(&mut self, x: Var, causal: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let rows_per_mat = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for (r, row) in out.chunks_mut(cols).enumerate() {
                let limit = match causal {
                    Some(off) => (r % rows_per_mat) + off,
                    None => cols - 1,
                };
                kernels::softmax_row(row, limit);
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![0f32; self.value(x).len()];
        let stats = kernels::layer_norm_rows(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &mut out,
            n,
        );
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    // ---- convolution / lookup -------------------------------------------

    /// 1-D convolution. `x` is `[channels_in, length]` or
    /// `[batch, channels_in, length]`, `w` is `[channels_out, channels_in,
    /// kernel]` and `b` is `[channels_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (bsz, cin, len) = batch_dims(&sx, "conv1d")?;
        let sw = self.shape(w).to_vec();
        let [cout, wcin, kernel] = sw[..] else {
            return Err(Error::shape("conv1d", &sx, &sw));
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let lout = spec.out_len(len, kernel).ok_or_else(|| {
            Error::invalid(format!(
                "conv1d: length {len} too short for kernel {kernel}"
            ))
        })?;
        let ck = cin * kernel;
        let mut out = vec![0f32; bsz * cout * lout];
        let mut cols = vec![0f32; ck * lout];
        for bi in 0..bsz {
            let xb = &self.value(x)[bi * cin * len..(bi + 1) * cin * len];
            im2col(xb, &mut cols, cin, len, kernel, lout, spec);
            let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            for (o, row) in ob.chunks_mut(lout).enumerate() {
                row.fill(self.value(b)[o]);
            }
            gemm_nn(self.value(w), &cols, ob, cout, ck, lout);
        }
        let shape = if sx.len() == 3 {
            vec![bsz, cout, lout]
        } else {
            vec![cout, lout]
        };
        self.push(
            "conv1d",
            shape,
            out,
            Op::Conv1d { x, w, b, spec },
            &[x, w, b],
        )
    }

    /// Gathers rows of `table` (`[vocab, dim]`) into `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [vocab, dim] = st[..] else {
            return Err(Error::invalid("embedding table must be rank 2"));
        };
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&self.value(table)[id * dim..(id + 1) * dim]);
        }
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    // ---- losses / reductions --------------------------------------------

    /// `sum_i w_i * -log softmax(logits_i)[target_i]` over the rows of a
    /// `[rows, classes]` logit matrix. A zero weight masks the row out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f32]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let [rows, classes] = sl[..] else {
            return Err(Error::invalid(
                "cross_entropy expects [rows, classes] logits",
            ));
        };
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut total = 0f64;
        for r in 0..rows {
            let t = targets[r] as usize;
            if t >= classes {
                return Err(Error::OutOfRange {
                    what: "target class",
                    index: t,
                    size: classes,
                });
            }
            if weights[r] == 0.0 {
                continue;
            }
            let row = &lv[r * classes..(r + 1) * classes];
            total += weights[r] as f64 * (log_sum_exp(row) - row[t] as f64);
        }
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![total as f32],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        self.push("sum", Vec::new(), vec![s as f32], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s: f64 = self.value(a).iter().map(|&v| v as f64).sum();
        self.push(
            "mean",
            Vec::new(),
            vec![(s / n as f64) as f32],
            Op::Mean(a),
            &[a],
        )
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1_mean", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y).abs() as f64)
            .sum();
        self.push(
            "l1_mean",
            Vec::new(),
            vec![(s / n as f64) as f32],
            Op::L1Mean(a, b),
            &[a, b],
        )
    }

    /// Mean squared difference.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse_mean", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        self.push(
            "mse_mean",
            Vec::new(),
            vec![(s / n as f64) as f32],
            Op::MseMean(a, b),
            &[a, b],
        )
    }

    // ---- layout ---------------------------------------------------------

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (bsz, r, c) = batch_dims(&sa, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0f32; av.len()];
        for bi in 0..bsz {
            let src = &av[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            transpose_into(src, dst, r, c);
        }
        let shape = if sa.len() == 3 {
            vec![bsz, c, r]
        } else {
            vec![c, r]
        };
        self.push("transpose", shape, out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a), &[a])
    }

    /// `[len, heads*hd]` -> `[heads, len, hd]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [len, width] = sx[..] else {
            return Err(Error::invalid("split_heads expects rank 2"));
        };
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        let hd = width / heads;
        let xv = self.value(x);
        let mut out = vec![0f32; xv.len()];
        for l in 0..len {
            for h in 0..heads {
                out[(h * len + l) * hd..(h * len + l + 1) * hd]
                    .copy_from_slice(&xv[l * width + h * hd..l * width + (h + 1) * hd]);
            }
        }
        self.push(
            "split_heads",
            vec![heads, len, hd],
            out,
            Op::SplitHeads { x, heads },
            &[x],
        )
    }

    /// `[heads, len, hd]` -> `[len, heads*hd]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [heads, len, hd] = sx[..] else {
            return Err(Error::invalid("merge_heads expects rank 3"));
        };
        let xv = self.value(x);
        let width = heads * hd;
        let mut out = vec![0f32; xv.len()];
        for h in 0..heads {
            for l in 0..len {
                out[l * width + h * hd..l * width + (h + 1) * hd]
                    .copy_from_slice(&xv[(h * len + l) * hd..(h * len + l + 1) * hd]);
            }
        }
        self.push(
            "merge_heads",
            vec![len, width],
            out,
            Op::MergeHeads(x),
            &[x],
        )
    }

    /// Maps distance-indexed scores `[heads, q, dists]` onto key positions:
    /// `out[h, i, j] = x[h, i, min(i + q_offset - j, dists - 1)]` for
    /// `j <= i + q_offset` and zero for future keys.
    pub fn rel_shift(&mut self, x: Var, q_offset: usize, kv_len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [heads, q, dists] = sx[..] else {
            return Err(Error::invalid("rel_shift expects rank 3"));
        };
        if dists == 0 {
            return Err(Error::invalid("rel_shift needs at least one distance"));
        }
        let xv = self.value(x);
        let mut out = vec![0f32; heads * q * kv_len];
        for h in 0..heads {
            for i in 0..q {
                let qi = i + q_offset;
                let src = &xv[(h * q + i) * dists..(h * q + i + 1) * dists];
                let dst = &mut out[(h * q + i) * kv_len..(h * q + i + 1) * kv_len];
                for (j, o) in dst.iter_mut().enumerate().take((qi + 1).min(kv_len)) {
                    *o = src[(qi - j).min(dists - 1)];
                }
            }
        }
        self.push(
            "rel_shift",
            vec![heads, q, kv_len],
            out,
            Op::RelShift { x, q_offset },
            &[x],
        )
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = match self.shape(*first) {
            [_, c] => *c,
            s => {
                return Err(Error::invalid(format!(
                    "concat_rows expects rank 2, got {s:?}"
                )))
            }
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, c] if *c == cols => rows += *r,
                s => return Err(Error::shape("concat_rows", &[rows, cols], s)),
            }
            out.extend_from_slice(self.value(p));
        }
        self.push(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [rows, cols] = sx[..] else {
            return Err(Error::invalid("slice_rows expects rank 2"));
        };
        if start + len > rows {
            return Err(Error::OutOfRange {
                what: "slice_rows",
                index: start + len,
                size: rows,
            });
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice_rows",
            vec![len, cols],
            out,
            Op::SliceRows { x, start },
            &[x],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = batch_dims(sa, "matmul").expect("checked in forward");
                let n = *node.shape.last().unwrap();
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let ga = slot(grads, *a, av.len());
                    for bi in 0..bsz {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &bv[bi * k * n..(bi + 1) * k * n];
                        let da = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gc, bm, da, m, n, k);
                        } else {
                            gemm_nt(gc, bm, da, m, n, k);
                        }
                    }
                }
                if self.requires(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for bi in 0..bsz {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &av[bi * m * k..(bi + 1) * m * k];
                        let db = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gc, am, db, n, m, k);
                        } else {
                            gemm_tn(am, gc, db, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                let n = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    if n > 0 {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| kernels::axpy(*c, g, d)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.value(Var(idx));
                let cols = *node.shape.last().unwrap();
                self.acc(grads, *x, |d| {
                    if cols == 0 {
                        return;
                    }
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..cols {
                            dr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let xhat_of = |r: usize, i: usize| (xv[r * n + i] - stats[r].0) * stats[r].1;
                if self.requires(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for r in 0..stats.len() {
                        for i in 0..n {
                            dg[i] += g[r * n + i] * xhat_of(r, i);
                        }
                    }
                }
                if self.requires(*beta) {
                    let db = slot(grads, *beta, n);
                    for r in 0..stats.len() {
                        add_into(db, &g[r * n..(r + 1) * n]);
                    }
                }
                if self.requires(*x) {
                    let dx = slot(grads, *x, xv.len());
                    for r in 0..stats.len() {
                        let rstd = stats[r].1;
                        let mut m1 = 0f32;
                        let mut m2 = 0f32;
                        for i in 0..n {
                            let dxh = g[r * n + i] * gv[i];
                            m1 += dxh;
                            m2 += dxh * xhat_of(r, i);
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for i in 0..n {
                            let dxh = g[r * n + i] * gv[i];
                            dx[r * n + i] += rstd * (dxh - m1 - xhat_of(r, i) * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, spec } => {
                let (bsz, cin, len) = batch_dims(self.shape(*x), "conv1d").unwrap();
                let [cout, _, kernel] = self.shape(*w)[..] else {
                    unreachable!()
                };
                let lout = *node.shape.last().unwrap();
                let ck = cin * kernel;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut cols = vec![0f32; ck * lout];
                let mut dcols = vec![0f32; ck * lout];
                for bi in 0..bsz {
                    let gb = &g[bi * cout * lout..(bi + 1) * cout * lout];
                    if self.requires(*b) {
                        let db = slot(grads, *b, cout);
                        for (o, row) in gb.chunks(lout).enumerate() {
                            db[o] += row.iter().sum::<f32>();
                        }
                    }
                    if self.requires(*w) {
                        let xb = &xv[bi * cin * len..(bi + 1) * cin * len];
                        im2col(xb, &mut cols, cin, len, kernel, lout, *spec);
                        let dw = slot(grads, *w, wv.len());
                        gemm_nt(gb, &cols, dw, cout, lout, ck);
                    }
                    if self.requires(*x) {
                        dcols.fill(0.0);
                        gemm_tn(wv, gb, &mut dcols, ck, cout, lout);
                        let dx = slot(grads, *x, xv.len());
                        col2im(
                            &dcols,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                            cin,
                            len,
                            kernel,
                            lout,
                            *spec,
                        );
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = node.shape[1];
                let len = self.value(*table).len();
                self.acc_sized(grads, *table, len, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let classes = self.shape(*logits)[1];
                let lv = self.value(*logits);
                let g0 = g[0];
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let row = &lv[r * classes..(r + 1) * classes];
                        let lse = log_sum_exp(row);
                        let scale = g0 * weights[r];
                        let dr = &mut d[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            let p = libm::exp(row[c] as f64 - lse) as f32;
                            dr[c] += scale * p;
                        }
                        dr[t as usize] -= scale;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f32;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len().max(1) as f32;
                let sign = |i: usize| {
                    let diff = av[i] - bv[i];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.acc(grads, *a, |d| {
                    (0..d.len()).for_each(|i| d[i] += g[0] * sign(i) / n)
                });
                self.acc(grads, *b, |d| {
                    (0..d.len()).for_each(|i| d[i] -= g[0] * sign(i) / n)
                });
            }
            Op::MseMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len().max(1) as f32;
                self.acc(grads, *a, |d| {
                    (0..d.len()).for_each(|i| d[i] += g[0] * 2.0 * (av[i] - bv[i]) / n)
                });
                self.acc(grads, *b, |d| {
                    (0..d.len()).for_each(|i| d[i] -= g[0] * 2.0 * (av[i] - bv[i]) / n)
                });
            }
            Op::Transpose(a) => {
                let (bsz, r, c) = batch_dims(self.shape(*a), "transpose").unwrap();
                self.acc(grads, *a, |d| {
                    for bi in 0..bsz {
                        // forward mapped [r, c] -> [c, r]; g is [c, r]
                        let gs = &g[bi * r * c..(bi + 1) * r * c];
                        let ds = &mut d[bi * r * c..(bi + 1) * r * c];
                        for i in 0..c {
                            for j in 0..r {
                                ds[j * c + i] += gs[i * r + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::SplitHeads { x, heads } => {
                let [_, len, hd] = node.shape[..] else {
                    unreachable!()
                };
                let width = heads * hd;
                self.acc(grads, *x, |d| {
                    for l in 0..len {
                        for h in 0..*heads {
                            add_into(
                                &mut d[l * width + h * hd..l * width + (h + 1) * hd],
                                &g[(h * len + l) * hd..(h * len + l + 1) * hd],
                            );
                        }
                    }
                });
            }
            Op::MergeHeads(x) => {
                let [heads, len, hd] = self.shape(*x)[..] else {
                    unreachable!()
                };
                let width = heads * hd;
                self.acc(grads, *x, |d| {
                    for h in 0..heads {
                        for l in 0..len {
                            add_into(
                                &mut d[(h * len + l) * hd..(h * len + l + 1) * hd],
                                &g[l * width + h * hd..l * width + (h + 1) * hd],
                            );
                        }
                    }
                });
            }
            Op::RelShift { x, q_offset } => {
                let [heads, q, dists] = self.shape(*x)[..] else {
                    unreachable!()
                };
                let kv_len = node.shape[2];
                self.acc(grads, *x, |d| {
                    for h in 0..heads {
                        for i in 0..q {
                            let qi = i + q_offset;
                            let gr = &g[(h * q + i) * kv_len..(h * q + i + 1) * kv_len];
                            let dr = &mut d[(h * q + i) * dists..(h * q + i + 1) * dists];
                            for (j, &gv) in gr.iter().enumerate().take((qi + 1).min(kv_len)) {
                                dr[(qi - j).min(dists - 1)] += gv;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let piece = &g[offset..offset + len];
                    self.acc(grads, p, |d| add_into(d, piece));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                let off = start * cols;
                self.acc(grads, *x, |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        let len = self.value(v).len();
        self.acc_sized(grads, v, len, f);
    }

    fn acc_sized(
        &self,
        grads: &mut [Option<Vec<f32>>],
        v: Var,
        len: usize,
        f: impl FnOnce(&mut [f32]),
    ) {
        if self.requires(v) {
            f(slot(grads, v, len));
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(d: &mut [f32], g: &[f32]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let s: f64 = row.iter().map(|&v| libm::exp(v as f64 - mx)).sum();
    mx + libm::log(s)
}

pub(crate) fn transpose_into(src: &[f32], dst: &mut [f32], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

fn im2col(
    x: &[f32],
    cols: &mut [f32],
    cin: usize,
    len: usize,
    kernel: usize,
    lout: usize,
    spec: ConvSpec,
) {
    for c in 0..cin {
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * lout..(c * kernel + k + 1) * lout];
            for (t, v) in row.iter_mut().enumerate() {
                let pos = (t * spec.stride + k) as isize - spec.pad_left as isize;
                *v = if pos >= 0 && (pos as usize) < len {
                    x[c * len + pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(
    dcols: &[f32],
    dx: &mut [f32],
    cin: usize,
    len: usize,
    kernel: usize,
    lout: usize,
    spec: ConvSpec,
) {
    for c in 0..cin {
        for k in 0..kernel {
            let row = &dcols[(c * kernel + k) * lout..(c * kernel + k + 1) * lout];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * spec.stride + k) as isize - spec.pad_left as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[c * len + pos as usize] += v;
                }
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_deref().map(|g| (p, g)))
    }
}

impl ParamStore {
    /// Adds the parameter gradients from a reverse pass onto the stored
    /// accumulators. Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.param_grads() {
            let t = self.get_mut(id);
            let (_, acc) = t.data_and_grad_mut();
            let acc = acc.ok_or_else(|| Error::invalid("parameter without gradient buffer"))?;
            add_into(acc, g);
        }
        Ok(())
    }
}
