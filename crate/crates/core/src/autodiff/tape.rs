//! Tape-based reverse-mode differentiation over whole arrays.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse and returns the gradient of a scalar loss with respect to every
//! parameter that took part in the forward pass.

use rand::Rng as _;

use super::array::gemm;
use super::{Array, Gradients, ParamId, ParamStore, Rng, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        cols: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    // `None` only for parameter leaves, whose value lives in the store.
    value: Option<Array>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.needs(*p));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Array::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose2()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Element-wise sum of two arrays of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an array whose last axis is `n`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(a).rows_cols();
        let vb = self.value(bias);
        if vb.len() != cols {
            return Err(mismatch(
                "add_bias",
                format!("bias of {} for rows of {}", vb.len(), cols),
            ));
        }
        let mut value = self.value(a).clone();
        let b = vb.data();
        for r in 0..rows {
            for (x, bb) in value.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *x += bb;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Array::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let (_, cols) = value.rows_cols();
        if cols > 0 {
            for row in value.data_mut().chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(mismatch("layer_norm", format!("affine params must have length {cols}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let h = (row[c] - mean) * istd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Array::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Same-length 1-D convolution with zero padding.
    ///
    /// `x` is `C_in×T`, `w` is `C_out×C_in×k` with odd `k`, `b` has length
    /// `C_out`. Output position `t` reads inputs at `t + (j - (k-1)/2)·dilation`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, t_len) = self.value(x).dims2()?;
        let (c_out, wc, k) = match self.value(w).shape() {
            [a, b, c] => (*a, *b, *c),
            other => return Err(mismatch("conv1d", format!("kernel shape {other:?}"))),
        };
        if wc != c_in {
            return Err(mismatch("conv1d", format!("kernel expects {wc} channels, input has {c_in}")));
        }
        if k % 2 == 0 {
            return Err(mismatch("conv1d", format!("kernel size {k} must be odd")));
        }
        if dilation == 0 {
            return Err(TensorError::InvalidArgument("dilation must be positive".into()));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(mismatch("conv1d", "bias length".into()));
            }
        }
        let cols = im2col(self.value(x).data(), c_in, t_len, k, dilation);
        let mut out = vec![0.0; c_out * t_len];
        gemm(c_out, c_in * k, t_len, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            for (o, row) in out.chunks_mut(t_len).enumerate() {
                let bias = self.value(b).data()[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Array::from_vec(&[c_out, t_len], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                cols,
            },
            &parents,
        ))
    }

    /// Inverted dropout. `rng = None` is evaluation mode (identity).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Array::from_vec(self.value(x).shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean of a 2-D array over `axis`. Axis 0 yields `1×cols`, axis 1 yields `rows×1`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        let v = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in v.chunks(c) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Array::from_vec(&[1, c], out)?
            }
            1 => {
                let out = v.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
                Array::from_vec(&[r, 1], out)?
            }
            _ => return Err(TensorError::InvalidArgument(format!("axis {axis} for a 2-D array"))),
        };
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Columns `start..end` of a 2-D array.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for row in v.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Array::from_vec(&[r, w], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(mismatch("concat_cols", "row counts differ".into()));
            }
            total += c;
        }
        let rows = rows.ok_or_else(|| TensorError::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.value(p).dims2()?;
            for (r, row) in self.value(p).data().chunks(c).enumerate() {
                out[r * total + offset..r * total + offset + c].copy_from_slice(row);
            }
            offset += c;
        }
        let value = Array::from_vec(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut cols = None;
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *cols.get_or_insert(c) != c {
                return Err(mismatch("concat_rows", "column counts differ".into()));
            }
            total += r;
            out.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| TensorError::InvalidArgument("nothing to concatenate".into()))?;
        let value = Array::from_vec(&[total, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (b, n) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(mismatch("cross_entropy", format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::InvalidTarget { target: t, classes: n });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Array::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::NoTape);
        }
        let loss_shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(loss_shape, 1.0));
        let mut out = Gradients {
            params: vec![None; self.params.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    if self.needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, false);
                        accumulate(&mut grads, *a, Array::from_vec(&[m, k], ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, false);
                        accumulate(&mut grads, *b, Array::from_vec(&[k, n], gb)?);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose2()?),
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(a, bias) => {
                    if self.needs(*bias) {
                        let (_, cols) = g.rows_cols();
                        let mut gb = vec![0.0; cols];
                        for row in g.data().chunks(cols) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Array::from_vec(&shape, gb)?);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, Array::from_vec(&shape, ga)?);
                    accumulate(&mut grads, *b, Array::from_vec(&shape, gb)?);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Array::from_vec(g.shape(), data)?);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let (_, cols) = y.rows_cols();
                    let mut gx = vec![0.0; y.len()];
                    for ((gx, gy), yr) in gx.chunks_mut(cols).zip(g.data().chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[c] = yr[c] * (gy[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Array::from_vec(y.shape(), gx)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.rows_cols();
                    let gam = self.value(*gamma).data();
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gy = &g.data()[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            gg[c] += gy[c] * xh[c];
                            gbeta[c] += gy[c];
                            let d = gy[c] * gam[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = gy[c] * gam[c];
                            gx[r * cols + c] = inv_std[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *gamma, Array::from_vec(&gshape, gg)?);
                    accumulate(&mut grads, *beta, Array::from_vec(&bshape, gbeta)?);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, Array::from_vec(g.shape(), gx)?);
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    dilation,
                    cols,
                } => {
                    let (c_in, t_len) = self.value(*x).dims2()?;
                    let wshape = self.value(*w).shape().to_vec();
                    let (c_out, k) = (wshape[0], wshape[2]);
                    if self.needs(*w) {
                        let mut gw = vec![0.0; c_out * c_in * k];
                        gemm(c_out, t_len, c_in * k, g.data(), false, cols, true, &mut gw, false);
                        accumulate(&mut grads, *w, Array::from_vec(&wshape, gw)?);
                    }
                    if let Some(b) = b {
                        let gb = g.data().chunks(t_len).map(|row| row.iter().sum()).collect();
                        accumulate(&mut grads, *b, Array::from_vec(&[c_out], gb)?);
                    }
                    if self.needs(*x) {
                        let mut gcols = vec![0.0; c_in * k * t_len];
                        gemm(c_in * k, c_out, t_len, self.value(*w).data(), true, g.data(), false, &mut gcols, false);
                        let gx = col2im(&gcols, c_in, t_len, k, *dilation);
                        accumulate(&mut grads, *x, Array::from_vec(&[c_in, t_len], gx)?);
                    }
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, Array::from_vec(g.shape(), data)?);
                }
                Op::MeanAxis { x, axis } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut gx = vec![0.0; r * c];
                    if *axis == 0 {
                        for row in gx.chunks_mut(c) {
                            for (o, gv) in row.iter_mut().zip(g.data()) {
                                *o = gv / r as f64;
                            }
                        }
                    } else {
                        for (row, gv) in gx.chunks_mut(c).zip(g.data()) {
                            row.iter_mut().for_each(|o| *o = gv / c as f64);
                        }
                    }
                    accumulate(&mut grads, *x, Array::from_vec(&[r, c], gx)?);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let (_, w) = g.dims2()?;
                    let mut gx = vec![0.0; r * c];
                    for (row, gr) in gx.chunks_mut(c).zip(g.data().chunks(w)) {
                        row[*start..*start + w].copy_from_slice(gr);
                    }
                    accumulate(&mut grads, *x, Array::from_vec(&[r, c], gx)?);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = self.value(p).dims2()?;
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for row in g.data().chunks(total) {
                                gp.extend_from_slice(&row[offset..offset + c]);
                            }
                            accumulate(&mut grads, p, Array::from_vec(&[rows, c], gp)?);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let (_, cols) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (r, _) = self.value(p).dims2()?;
                        if self.needs(p) {
                            let gp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                            accumulate(&mut grads, p, Array::from_vec(&[r, cols], gp)?);
                        }
                        offset += r;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Array::full(&shape, g.data()[0]));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (b, n) = self.value(*logits).dims2()?;
                    let scale = g.data()[0] / b as f64;
                    let mut gl = probs.clone();
                    for (row, &t) in gl.chunks_mut(n).zip(targets) {
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads, *logits, Array::from_vec(&[b, n], gl)?);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &[f64], c_in: usize, t_len: usize, k: usize, dilation: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut cols = vec![0.0; c_in * k * t_len];
    for ci in 0..c_in {
        let src = &x[ci * t_len..(ci + 1) * t_len];
        for j in 0..k {
            let offset = (j as isize - half) * dilation as isize;
            let dst = &mut cols[(ci * k + j) * t_len..(ci * k + j + 1) * t_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let s = t as isize + offset;
                if s >= 0 && (s as usize) < t_len {
                    *d = src[s as usize];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c_in: usize, t_len: usize, k: usize, dilation: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut x = vec![0.0; c_in * t_len];
    for ci in 0..c_in {
        for j in 0..k {
            let offset = (j as isize - half) * dilation as isize;
            let src = &cols[(ci * k + j) * t_len..(ci * k + j + 1) * t_len];
            for (t, v) in src.iter().enumerate() {
                let s = t as isize + offset;
                if s >= 0 && (s as usize) < t_len {
                    x[ci * t_len + s as usize] += v;
                }
            }
        }
    }
    x
}
