//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node to the [`Tape`]; node inputs always precede the
//! node itself, so [`Tape::backward`] is a single reverse sweep. Gradients
//! are accumulated in tape order, which makes the sweep bit-reproducible.
//!
//! Tensors are treated as 2-D `[rows × cols]` views over their last
//! dimension unless an op says otherwise.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sentinel in a gather map meaning "write zero".
pub const GATHER_ZERO: u32 = u32::MAX;

/// Target specification for [`Tape::cross_entropy`].
#[derive(Debug, Clone)]
pub enum CeTarget<T: Scalar> {
    /// One class index per row.
    Index(Vec<usize>),
    /// One probability row per logits row.
    Soft(Tensor<T>),
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        target: CeTarget<T>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        map: Vec<u32>,
    },
    PoolMean {
        x: Var,
        geom: Grid,
        factor: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Sum(..) => "sum",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::PoolMean { .. } => "pool_mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Attention { .. } => "attention",
        }
    }
}

/// Spatial layout of a row-major feature map: rows ordered `(batch, y, x)`,
/// features along columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(batch: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            height,
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn check_divisible(&self, f: usize, op: &'static str) -> Result<()> {
        if f == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::shape(
                op,
                format!("{}x{} not divisible by {f}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse-mode gradients for every node that influenced the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` is off the path.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Borrowed gradient buffer, `None` when `v` is off the loss path.
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

const GELU_ALPHA: f64 = 1.702;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded ops, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[.., C] + bias[C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {c} columns", vb.numel()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if c.len() != vx.numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for {} elements", c.len(), vx.numel()),
            ));
        }
        let data = vx.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// `x · sigmoid(1.702 x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let a = T::from_f64(GELU_ALPHA);
        let out = self.value(x).map(|v| v * sigmoid(a * v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = crate::tensor::softmax_lastdim(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        vx.ensure_finite("log_softmax input")?;
        let c = vx.cols();
        let mut data = vec![T::zero(); vx.numel()];
        for (src, dst) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            kernels::log_softmax(src, dst);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Per-row normalization over the last dimension followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("affine of {}/{} for {d} features", vg.numel(), vb.numel()),
            ));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let src = vx.row(r);
            let mean = src.iter().copied().sum::<T>() * inv_d;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
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

    /// Mean over rows of `weight_r · (−Σ_c target_rc · log softmax(logits)_rc)`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        target: CeTarget<T>,
        weights: Option<Vec<T>>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        vl.ensure_finite("cross_entropy logits")?;
        let (rows, c) = (vl.rows(), vl.cols());
        match &target {
            CeTarget::Index(idx) => {
                if idx.len() != rows {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("{} targets for {rows} rows", idx.len()),
                    ));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
                    return Err(Error::Index {
                        what: "class",
                        index: bad,
                        bound: c,
                    });
                }
            }
            CeTarget::Soft(t) => {
                if t.numel() != rows * c {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("soft target of {:?} for {rows}x{c}", t.shape()),
                    ));
                }
                for r in 0..rows {
                    let s: f64 = t.data()[r * c..(r + 1) * c].iter().map(|v| v.to_f64()).sum();
                    if (s - 1.0).abs() > 1e-5 {
                        return Err(Error::contract(format!(
                            "soft target row {r} sums to {s}"
                        )));
                    }
                }
            }
        }
        if let Some(w) = &weights {
            if w.len() != rows {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} weights for {rows} rows", w.len()),
                ));
            }
        }
        let mut logp = vec![T::zero(); rows * c];
        let mut total = T::zero();
        for r in 0..rows {
            let lp = &mut logp[r * c..(r + 1) * c];
            kernels::log_softmax(vl.row(r), lp);
            let nll = match &target {
                CeTarget::Index(idx) => -lp[idx[r]],
                CeTarget::Soft(t) => -t.data()[r * c..(r + 1) * c]
                    .iter()
                    .zip(lp.iter())
                    .map(|(&tv, &l)| tv * l)
                    .sum::<T>(),
            };
            let w = weights.as_ref().map_or(T::one(), |w| w[r]);
            total += w * nll;
        }
        let probs = logp.into_iter().map(T::exp).collect();
        let out = Tensor::scalar(total / T::from_f64(rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                target,
                weights,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `out.flat[i] = x.flat[map[i]]`, or zero where `map[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, map: Vec<u32>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.numel();
        if let Some(&bad) = map.iter().find(|&&m| m != GATHER_ZERO && m as usize >= n) {
            return Err(Error::Index {
                what: "gather source",
                index: bad as usize,
                bound: n,
            });
        }
        let data = map
            .iter()
            .map(|&m| {
                if m == GATHER_ZERO {
                    T::zero()
                } else {
                    vx.data()[m as usize]
                }
            })
            .collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, map }, rg))
    }

    /// Folds each `f×f` spatial patch into the feature dimension:
    /// `[B·H·W × C] → [B·(H/f)·(W/f) × f·f·C]`.
    pub fn space_to_depth(&mut self, x: Var, geom: Grid, f: usize) -> Result<Var> {
        geom.check_divisible(f, "space_to_depth")?;
        let c = self.spatial_cols(x, geom, "space_to_depth")?;
        let (oh, ow) = (geom.height / f, geom.width / f);
        let oc = f * f * c;
        let mut map = Vec::with_capacity(geom.rows() * c);
        for b in 0..geom.batch {
            for y in 0..oh {
                for xx in 0..ow {
                    for dy in 0..f {
                        for dx in 0..f {
                            let src =
                                (b * geom.height + y * f + dy) * geom.width + xx * f + dx;
                            map.extend((0..c).map(|ch| (src * c + ch) as u32));
                        }
                    }
                }
            }
        }
        self.gather(x, map, [geom.batch * oh * ow, oc])
    }

    /// Concatenates each position's 3×3 neighbourhood (zero padded):
    /// `[B·H·W × C] → [B·H·W × 9·C]`.
    pub fn neighborhood3(&mut self, x: Var, geom: Grid) -> Result<Var> {
        let c = self.spatial_cols(x, geom, "neighborhood3")?;
        let (h, w) = (geom.height as isize, geom.width as isize);
        let mut map = Vec::with_capacity(geom.rows() * 9 * c);
        for b in 0..geom.batch {
            for y in 0..h {
                for xx in 0..w {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sy >= h || sx < 0 || sx >= w {
                                map.extend(std::iter::repeat_n(GATHER_ZERO, c));
                            } else {
                                let src = (b * geom.height) as isize * w + sy * w + sx;
                                map.extend((0..c).map(|ch| (src as usize * c + ch) as u32));
                            }
                        }
                    }
                }
            }
        }
        self.gather(x, map, [geom.rows(), 9 * c])
    }

    /// Nearest-neighbour upsampling by `f`: `[B·H·W × C] → [B·fH·fW × C]`.
    pub fn upsample(&mut self, x: Var, geom: Grid, f: usize) -> Result<Var> {
        let c = self.spatial_cols(x, geom, "upsample")?;
        if f == 0 {
            return Err(Error::shape("upsample", "factor 0"));
        }
        let (oh, ow) = (geom.height * f, geom.width * f);
        let mut map = Vec::with_capacity(geom.rows() * f * f * c);
        for b in 0..geom.batch {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = (b * geom.height + y / f) * geom.width + xx / f;
                    map.extend((0..c).map(|ch| (src * c + ch) as u32));
                }
            }
        }
        self.gather(x, map, [geom.batch * oh * ow, c])
    }

    /// Mean over each `f×f` patch: `[B·H·W × C] → [B·(H/f)·(W/f) × C]`.
    pub fn pool_mean(&mut self, x: Var, geom: Grid, f: usize) -> Result<Var> {
        geom.check_divisible(f, "pool_mean")?;
        let c = self.spatial_cols(x, geom, "pool_mean")?;
        let vx = self.value(x);
        let (oh, ow) = (geom.height / f, geom.width / f);
        let inv = T::one() / T::from_f64((f * f) as f64);
        let mut out = vec![T::zero(); geom.batch * oh * ow * c];
        for b in 0..geom.batch {
            for y in 0..geom.height {
                for xx in 0..geom.width {
                    let src = (b * geom.height + y) * geom.width + xx;
                    let dst = (b * oh + y / f) * ow + xx / f;
                    for ch in 0..c {
                        out[dst * c + ch] += vx.data()[src * c + ch] * inv;
                    }
                }
            }
        }
        let out = Tensor::new([geom.batch * oh * ow, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::PoolMean {
                x,
                geom,
                factor: f,
            },
            rg,
        ))
    }

    fn spatial_cols(&self, x: Var, geom: Grid, op: &'static str) -> Result<usize> {
        let vx = self.value(x);
        if vx.rows() != geom.rows() {
            return Err(Error::shape(
                op,
                format!("{} rows for grid {geom:?}", vx.rows()),
            ));
        }
        Ok(vx.cols())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new([rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new([rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let vt = self.value(table);
        let (n, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "table row",
                index: bad,
                bound: n,
            });
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new([idx.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows { table, idx }, rg))
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[batch·seq × 3D]` holding the query, key and value
    /// projections side by side; the result is `[batch·seq × D]` with heads
    /// concatenated. Attention never crosses sequence boundaries.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        if v.rows() != batch * seq || v.cols() % 3 != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?} for batch {batch} x seq {seq}", v.shape()),
            ));
        }
        let d = v.cols() / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut out = vec![T::zero(); batch * seq * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let (q, k, vv) = split_head(v.data(), b, h, seq, d, dh);
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                kernels::matmul_bt_acc(&q, &k, p, seq, dh, seq);
                for row in p.chunks_mut(seq) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    kernels::softmax_in_place(row);
                }
                let mut o = vec![T::zero(); seq * dh];
                kernels::matmul_acc(p, &vv, &mut o, seq, seq, dh);
                for t in 0..seq {
                    out[(b * seq + t) * d + h * dh..][..dh].copy_from_slice(&o[t * dh..][..dh]);
                }
            }
        }
        let out = Tensor::new([batch * seq, d], out)?;
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights saved by an [`Tape::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.backward_node(node, g, lo);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_bt_acc(g, vb.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(va.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        kernels::axpy(T::one(), g, d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, d);
                }
                if let Some(d) = self.slot(grads, *b) {
                    kernels::axpy(-T::one(), g, d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *dv += gv * bv;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *dv += gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, d);
                }
                if let Some(d) = self.slot(grads, *bias) {
                    let c = d.len();
                    for row in g.chunks(c) {
                        kernels::axpy(T::one(), row, d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::axpy(*s, g, d);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((dv, &gv), &cv) in d.iter_mut().zip(g).zip(c) {
                        *dv += gv * cv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    let a = T::from_f64(GELU_ALPHA);
                    for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(vx.data()) {
                        let s = sigmoid(a * xv);
                        *dv += gv * (s + a * xv * s * (T::one() - s));
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let gsum: T = gr.iter().copied().sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += gv - yv.exp() * gsum;
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
                let vg = self.value(*gamma).data().to_vec();
                let dim = vg.len();
                if let Some(d) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((dv, &gv), &hv) in d.iter_mut().zip(gr).zip(hr) {
                            *dv += gv * hv;
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for gr in g.chunks(dim) {
                        kernels::axpy(T::one(), gr, d);
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let inv_d = T::one() / T::from_f64(dim as f64);
                    let mut dxhat = vec![T::zero(); dim];
                    for (r, (gr, hr)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            dxhat[j] = gr[j] * vg[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let dr = &mut d[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dr[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let rows = probs.len() / c;
                if let Some(d) = self.slot(grads, *logits) {
                    let base = g[0] / T::from_f64(rows as f64);
                    for r in 0..rows {
                        let w = weights.as_ref().map_or(T::one(), |w| w[r]) * base;
                        if w == T::zero() {
                            continue;
                        }
                        let pr = &probs[r * c..(r + 1) * c];
                        let dr = &mut d[r * c..(r + 1) * c];
                        match target {
                            CeTarget::Index(idx) => {
                                for j in 0..c {
                                    dr[j] += w * pr[j];
                                }
                                dr[idx[r]] -= w;
                            }
                            CeTarget::Soft(t) => {
                                let tr = &t.data()[r * c..(r + 1) * c];
                                let ts: T = tr.iter().copied().sum();
                                for j in 0..c {
                                    dr[j] += w * (pr[j] * ts - tr[j]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, d);
                }
            }
            Op::Gather { x, map } => {
                if let Some(d) = self.slot(grads, *x) {
                    for (&m, &gv) in map.iter().zip(g) {
                        if m != GATHER_ZERO {
                            d[m as usize] += gv;
                        }
                    }
                }
            }
            Op::PoolMean { x, geom, factor } => {
                let f = *factor;
                if let Some(d) = self.slot(grads, *x) {
                    let c = d.len() / geom.rows();
                    let (oh, ow) = (geom.height / f, geom.width / f);
                    let inv = T::one() / T::from_f64((f * f) as f64);
                    for b in 0..geom.batch {
                        for y in 0..geom.height {
                            for xx in 0..geom.width {
                                let src = (b * geom.height + y) * geom.width + xx;
                                let dst = (b * oh + y / f) * ow + xx / f;
                                for ch in 0..c {
                                    d[src * c + ch] += g[dst * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if let Some(d) = self.slot(grads, p) {
                        for (dr, gr) in d.chunks_mut(pc).zip(g.chunks(total)) {
                            kernels::axpy(T::one(), &gr[offset..offset + pc], dr);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(d) = self.slot(grads, p) {
                        kernels::axpy(T::one(), &g[offset..offset + n], d);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, idx } => {
                let dcols = self.value(*table).cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(
                            T::one(),
                            &g[r * dcols..(r + 1) * dcols],
                            &mut d[i * dcols..(i + 1) * dcols],
                        );
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let v = self.value(*qkv);
                let (seq, heads) = (*seq, *heads);
                let d = v.cols() / 3;
                let dh = d / heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let Some(dq) = self.slot(grads, *qkv) else {
                    return;
                };
                for b in 0..*batch {
                    for h in 0..heads {
                        let (q, k, vv) = split_head(v.data(), b, h, seq, d, dh);
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let mut go = vec![T::zero(); seq * dh];
                        for t in 0..seq {
                            go[t * dh..][..dh].copy_from_slice(&g[(b * seq + t) * d + h * dh..][..dh]);
                        }
                        let mut dv = vec![T::zero(); seq * dh];
                        kernels::matmul_at_acc(p, &go, &mut dv, seq, seq, dh);
                        let mut ds = vec![T::zero(); seq * seq];
                        kernels::matmul_bt_acc(&go, &vv, &mut ds, seq, dh, seq);
                        for (dr, pr) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        let mut dqh = vec![T::zero(); seq * dh];
                        kernels::matmul_acc(&ds, &k, &mut dqh, seq, seq, dh);
                        let mut dkh = vec![T::zero(); seq * dh];
                        kernels::matmul_at_acc(&ds, &q, &mut dkh, seq, seq, dh);
                        for t in 0..seq {
                            let row = &mut dq[(b * seq + t) * 3 * d..][..3 * d];
                            kernels::axpy(T::one(), &dqh[t * dh..][..dh], &mut row[h * dh..][..dh]);
                            kernels::axpy(T::one(), &dkh[t * dh..][..dh], &mut row[d + h * dh..][..dh]);
                            kernels::axpy(T::one(), &dv[t * dh..][..dh], &mut row[2 * d + h * dh..][..dh]);
                        }
                    }
                }
            }
        }
    }
}

/// Copies one head's query, key and value blocks out of a packed qkv buffer.
fn split_head<T: Scalar>(
    qkv: &[T],
    b: usize,
    h: usize,
    seq: usize,
    d: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut q = Vec::with_capacity(seq * dh);
    let mut k = Vec::with_capacity(seq * dh);
    let mut v = Vec::with_capacity(seq * dh);
    for t in 0..seq {
        let row = &qkv[(b * seq + t) * 3 * d..][..3 * d];
        q.extend_from_slice(&row[h * dh..][..dh]);
        k.extend_from_slice(&row[d + h * dh..][..dh]);
        v.extend_from_slice(&row[2 * d + h * dh..][..dh]);
    }
    (q, k, v)
}
