use rand::Rng;

use crate::error::{mismatch, Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

/// Additive offset written at masked logits before a softmax.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
        /// Inner tanh values, reused by the backward pass.
        t: Vec<f64>,
    },
    Tanh {
        x: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    MaskedFill {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive applications for one forward evaluation.
///
/// Nodes are appended in evaluation order, so the record is acyclic by
/// construction and reverse insertion order is a valid backward schedule.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Layer-norm variance offset.
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Trainable leaf; [`Graph::backward`] returns its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    /// `a (.., k) x b (k, n) -> (.., n)`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b }, needs)
    }

    /// Batched product: `a (batch, m, k) x b (batch, k, n) -> (batch, m, n)`,
    /// or with `trans_b`, `b` is stored `(batch, n, k)` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        par::for_each_chunk_mut(&mut out, m * n, |i, c| {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let bv = if trans_b {
                MatRef::transposed(bi, k)
            } else {
                MatRef::row_major(bi, n)
            };
            gemm(m, k, n, MatRef::row_major(ai, k), bv, 0.0, c);
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "bmm",
            Tensor::new([batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            needs,
        )
    }

    /// Elementwise sum. `b` may have fewer axes than `a` as long as its shape
    /// is a suffix of `a`'s; it is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data();
        let period = bd.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(period) {
            chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
        }
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|x| x * c).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, c }, needs)
    }

    /// Normalizes each innermost row to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                format!("row width {d}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Softmax over the innermost axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x }, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| fast_tanh(GELU_C * (v + GELU_K * v * v * v)))
            .collect();
        let out = xv.data().iter().zip(&t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        let t = if needs { t } else { Vec::new() };
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu { x, t }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.tanh()).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push("tanh", Tensor::new(shape, out)?, Op::Tanh { x }, needs)
    }

    /// Gathers rows of `table (rows, d)`; output shape `(indices.len(), d)`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(mismatch("embedding", format!("table shape {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            "embedding",
            Tensor::new([indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Concatenates along the innermost axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", format!("{:?} vs leading {lead:?}", s)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Columns `start..start + len` of the innermost axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(mismatch("slice", format!("{start}..{} of width {d}", start + len)));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x, start }, needs)
    }

    /// Adds [`MASK_FILL`] wherever `mask` is true. `mask` has one flag per
    /// element of `x`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(mismatch(
                "masked_fill",
                format!("mask of {} for {} values", mask.len(), xv.numel()),
            ));
        }
        let out = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { v + MASK_FILL } else { *v })
            .collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push("masked_fill", Tensor::new(shape, out)?, Op::MaskedFill { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape { x }, needs)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x, keep }, needs)
    }

    /// Masked mean squared error.
    ///
    /// Each innermost row of `pred` is compared to the same row of `target`;
    /// the squared error is averaged over the row, weighted by
    /// `row_weights[r]`, and divided by the total weight. A zero total weight
    /// yields a loss of zero with zero gradient.
    pub fn mse(&mut self, pred: Var, target: &Tensor, row_weights: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(mismatch(
                "mean_squared_error",
                format!("{:?} vs {:?}", pv.shape(), target.shape()),
            ));
        }
        let d = pv.last_dim();
        if row_weights.len() != pv.rows() {
            return Err(mismatch(
                "mean_squared_error",
                format!("{} weights for {} rows", row_weights.len(), pv.rows()),
            ));
        }
        let denom: f64 = row_weights.iter().sum();
        let mut loss = 0.0;
        if denom > 0.0 {
            for (r, &w) in row_weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let se: f64 = pv.data()[r * d..(r + 1) * d]
                    .iter()
                    .zip(&target.data()[r * d..(r + 1) * d])
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum();
                loss += w * se / d as f64;
            }
            loss /= denom;
        }
        let needs = self.needs(pred);
        self.push(
            "mean_squared_error",
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights: row_weights.to_vec(),
                denom,
            },
            needs,
        )
    }

    /// Reverse-mode pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let mut result = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if !t.is_finite() {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Some(t)
                }
                _ => None,
            };
            result.push(t);
        }
        Ok(Gradients { grads: result })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                if self.needs(*a) {
                    let ga = slot(grads, *a, av.numel());
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::transposed(bv.data(), n),
                        1.0,
                        ga,
                    );
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g, n),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                let (ad, bd) = (av.data(), bv.data());
                if self.needs(*a) {
                    let ga = slot(grads, *a, av.numel());
                    par::for_each_chunk_mut(ga, m * k, |i, c| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // dA = G * B'^T where B' is the effective right operand
                        let bt = if *trans_b {
                            MatRef::row_major(bi, k)
                        } else {
                            MatRef::transposed(bi, n)
                        };
                        gemm(m, n, k, MatRef::row_major(gi, n), bt, 1.0, c);
                    });
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    par::for_each_chunk_mut(gb, k * n, |i, c| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // stored (n, k): G^T * A
                            gemm(n, m, k, MatRef::transposed(gi, n), MatRef::row_major(ai, k), 1.0, c);
                        } else {
                            gemm(k, m, n, MatRef::transposed(ai, k), MatRef::row_major(gi, n), 1.0, c);
                        }
                    });
                }
                let _ = batch;
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let period = self.value(*b).numel();
                    let gb = slot(grads, *b, period);
                    for chunk in g.chunks(period) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, y)| *a += c * y);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += row[j] * xhat[r * d + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, row) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = row[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = slot(grads, *x, g.len());
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Gelu { x, t } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = t[i];
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Embedding { table, indices } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let gt = slot(grads, *table, tv.numel());
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let d = self.value(*x).last_dim();
                let len = node.value.last_dim();
                let gx = slot(grads, *x, self.value(*x).numel());
                for (r, row) in g.chunks(len).enumerate() {
                    for j in 0..len {
                        gx[r * d + start + j] += row[j];
                    }
                }
            }
            Op::MaskedFill { x } | Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Dropout { x, keep } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * keep[i];
                }
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let pv = self.value(*pred);
                let d = pv.last_dim();
                let gp = slot(grads, *pred, pv.numel());
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = g[0] * 2.0 * w / (d as f64 * denom);
                    for j in 0..d {
                        let i = r * d + j;
                        gp[i] += c * (pv.data()[i] - target[i]);
                    }
                }
            }
        }
    }
}

fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` into the gradient of `v`, copying it when the slot is empty.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(gx) => gx.iter_mut().zip(g).for_each(|(a, y)| *a += y),
        empty => *empty = Some(g.to_vec()),
    }
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` if `v` is not a parameter or
    /// the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf, or zeros of its shape when the output
    /// does not depend on it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}
