//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Tape`] owns every node of the define-by-run graph: values are stored
//! in an arena, ops record their input ids, and one reverse sweep over the
//! arena populates gradients. The tape is rebuilt from scratch every
//! iteration; nothing is cached across steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Handle to a node in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// C = A · Bᵀ with A: m×k, B: n×k.
    MatmulNt { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    L2Normalize { x: Var, inv_norms: Vec<f64> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    ConcatRows { parts: Vec<Var> },
    LogSumExp { x: Var },
    PickCols { x: Var, cols: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    RowScale { x: Var, w: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Define-by-run tape holding values, ops, and (after `backward`) gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf (parameter or constant) node.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf data length must match shape"
        );
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (self.value(a), self.value(b));
            mat_mul_into(da, db, &mut out, m, k, n);
        }
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (self.value(a), self.value(b));
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += da[i * k + p] * db[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatmulNt { a, b }))
    }

    /// Cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(CoreError::KernelTooLarge { kh, kw, h, w });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        {
            let din = self.value(input);
            let dk = self.value(kernel);
            conv2d_forward(din, dk, &mut out, n, c, h, w, f, kh, kw, oh, ow, stride, padding);
        }
        Ok(self.push(
            vec![n, f, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Biased per-channel moments of a 2-D (over rows) or 4-D (over N,H,W)
    /// tensor; the nn layer uses these to drive batch_norm and running stats.
    pub fn channel_moments(&self, x: Var) -> (Vec<f64>, Vec<f64>) {
        let shape = self.shape(x).to_vec();
        channel_moments_of(self.value(x), &shape)
    }

    /// Normalize per channel with the supplied moments, then apply affine
    /// gamma/beta. In train mode the moments must be this batch's moments
    /// (the backward pass accounts for their dependence on `x`); in eval
    /// mode they are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        train: bool,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = bn_channels(&shape);
        if train && bn_reduce_count(&shape) < 2 {
            return Err(CoreError::DegenerateBatch {
                n: bn_reduce_count(&shape),
            });
        }
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(CoreError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = vec![0.0; numel(&shape)];
        {
            let dx = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for_each_channel(&shape, |i, ch| {
                out[i] = g[ch] * (dx[i] - mean[ch]) * inv_std[ch] + b[ch];
            });
        }
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                train,
            },
        ))
    }

    /// Row-wise L2 normalization of a 2-D tensor.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        const EPS_NORM: f64 = 1e-12;
        let shape = self.shape(x).to_vec();
        debug_assert_eq!(shape.len(), 2);
        let (n, d) = (shape[0], shape[1]);
        let mut inv_norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        {
            let dx = self.value(x);
            for i in 0..n {
                let row = &dx[i * d..(i + 1) * d];
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                if norm < EPS_NORM {
                    return Err(CoreError::ZeroVector { row: i, norm });
                }
                inv_norms[i] = 1.0 / norm;
                for j in 0..d {
                    out[i * d + j] = row[j] * inv_norms[i];
                }
            }
        }
        Ok(self.push(shape, out, Op::L2Normalize { x, inv_norms }))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c })
    }

    /// Broadcast-add a length-D bias row to an N×D tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if shape.len() != 2 || self.value(b).len() != d {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(x).to_vec();
        {
            let bias = self.value(b);
            for (i, v) in data.iter_mut().enumerate() {
                *v += bias[i % d];
            }
        }
        Ok(self.push(shape, data, Op::AddBias { x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu { x })
    }

    /// N×C×H×W → N×C average over the spatial dims.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        {
            let dx = self.value(x);
            for i in 0..n * c {
                out[i] = dx[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
        }
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { x }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let m = self.value(x).iter().sum::<f64>() / len as f64;
        self.push(vec![1], vec![m], Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        self.push(vec![1], vec![s], Op::SumAll { x })
    }

    /// Concatenate 2-D tensors along the row (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(
            vec![rows, d],
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row-wise log-sum-exp of an N×D tensor, stabilized by max subtraction.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "log_sum_exp",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let mut out = vec![0.0; n];
        {
            let dx = self.value(x);
            for i in 0..n {
                out[i] = lse_row(&dx[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(vec![n], out, Op::LogSumExp { x }))
    }

    /// Pick one column per row: out[i] = x[i, cols[i]].
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        if cols.len() != n || cols.iter().any(|&c| c >= d) {
            return Err(CoreError::Internal(alloc::format!(
                "pick_cols: {} labels for {} rows of width {}",
                cols.len(),
                n,
                d
            )));
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.value(x)[i * d + c])
            .collect();
        Ok(self.push(
            vec![n],
            data,
            Op::PickCols {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Gather rows of a 2-D tensor by index (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        if idx.iter().any(|&i| i >= n) {
            return Err(CoreError::Internal(alloc::format!(
                "gather_rows: index out of range for {} rows",
                n
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.value(x)[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiply each row of an N×D tensor by a constant per-row weight.
    pub fn row_scale(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        if w.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "row_scale",
                lhs: shape,
                rhs: vec![w.len()],
            });
        }
        let mut data = self.value(x).to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] *= w[i];
            }
        }
        Ok(self.push(
            shape,
            data,
            Op::RowScale {
                x,
                w: w.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all reachable nodes
    /// are accumulated additively; read them with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CoreError::Internal("backward on empty tape".into()));
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(CoreError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.adjoint(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn adjoint(&mut self, i: usize, g: &[f64]) {
        // Ops only reference earlier nodes, so split borrows by index.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                {
                    let va = self.value(a);
                    let vb = self.value(b);
                    // dA = G·Bᵀ
                    for i0 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i0 * n + j] * vb[p * n + j];
                            }
                            da[i0 * k + p] = acc;
                        }
                    }
                    // dB = Aᵀ·G
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i0 in 0..m {
                                acc += va[i0 * k + p] * g[i0 * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                {
                    let va = self.value(a);
                    let vb = self.value(b);
                    // C = A·Bᵀ → dA = G·B, dB = Gᵀ·A
                    for i0 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i0 * n + j] * vb[j * k + p];
                            }
                            da[i0 * k + p] = acc;
                        }
                    }
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i0 in 0..m {
                                acc += g[i0 * n + j] * va[i0 * k + p];
                            }
                            db[j * k + p] = acc;
                        }
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (input, kernel, stride, padding) = (*input, *kernel, *stride, *padding);
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let so = self.nodes[i].shape.clone();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = (so[2], so[3]);
                let mut din = vec![0.0; n * c * h * w];
                let mut dk = vec![0.0; f * c * kh * kw];
                {
                    let vin = self.value(input);
                    let vk = self.value(kernel);
                    for b0 in 0..n {
                        for fo in 0..f {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[((b0 * f + fo) * oh + oy) * ow + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - padding as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let ii = ((b0 * c + ci) * h + iy as usize) * w
                                                    + ix as usize;
                                                let ki = ((fo * c + ci) * kh + ky) * kw + kx;
                                                din[ii] += go * vk[ki];
                                                dk[ki] += go * vin[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(input, &din);
                self.add_grad(kernel, &dk);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let shape = self.shape(x).to_vec();
                let channels = bn_channels(&shape);
                let m = bn_reduce_count(&shape) as f64;
                let vx = self.value(x).to_vec();
                let vg = self.value(gamma).to_vec();

                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut sum_g = vec![0.0; channels];
                let mut sum_g_xhat = vec![0.0; channels];
                for_each_channel(&shape, |idx, ch| {
                    let xhat = (vx[idx] - mean[ch]) * inv_std[ch];
                    dgamma[ch] += g[idx] * xhat;
                    dbeta[ch] += g[idx];
                    sum_g[ch] += g[idx];
                    sum_g_xhat[ch] += g[idx] * xhat;
                });
                let mut dx = vec![0.0; vx.len()];
                if train {
                    for_each_channel(&shape, |idx, ch| {
                        let xhat = (vx[idx] - mean[ch]) * inv_std[ch];
                        dx[idx] = vg[ch] * inv_std[ch] / m
                            * (m * g[idx] - sum_g[ch] - xhat * sum_g_xhat[ch]);
                    });
                } else {
                    for_each_channel(&shape, |idx, ch| {
                        dx[idx] = g[idx] * vg[ch] * inv_std[ch];
                    });
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::L2Normalize { x, inv_norms } => {
                let x = *x;
                let inv_norms = inv_norms.clone();
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let y = self.nodes[i].data.clone();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) * inv_norms[r];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let gc = g.to_vec();
                self.add_grad(a, &gc);
                self.add_grad(b, &gc);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let gc = g.to_vec();
                let neg: Vec<f64> = gc.iter().map(|v| -v).collect();
                self.add_grad(a, &gc);
                self.add_grad(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(x, &dx);
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let d = self.value(b).len();
                let mut db = vec![0.0; d];
                for (idx, &gi) in g.iter().enumerate() {
                    db[idx % d] += gi;
                }
                let gc = g.to_vec();
                self.add_grad(x, &gc);
                self.add_grad(b, &db);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let s = self.shape(x).to_vec();
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; numel(&s)];
                for i0 in 0..s[0] * s[1] {
                    let gi = g[i0] / hw as f64;
                    for j in 0..hw {
                        dx[i0 * hw + j] = gi;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let len = self.value(x).len();
                let dx = vec![g[0] / len as f64; len];
                self.add_grad(x, &dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let len = self.value(x).len();
                let dx = vec![g[0]; len];
                self.add_grad(x, &dx);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = numel(self.shape(p));
                    let slice = g[offset..offset + n].to_vec();
                    self.add_grad(p, &slice);
                    offset += n;
                }
            }
            Op::LogSumExp { x } => {
                let x = *x;
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let vx = self.value(x).to_vec();
                let y = self.nodes[i].data.clone();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..d {
                        dx[r * d + j] = g[r] * libm::exp(vx[r * d + j] - y[r]);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::PickCols { x, cols } => {
                let x = *x;
                let cols = cols.clone();
                let d = self.shape(x)[1];
                let mut dx = vec![0.0; numel(self.shape(x))];
                for (r, &c) in cols.iter().enumerate() {
                    dx[r * d + c] += g[r];
                }
                self.add_grad(x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let d = self.shape(x)[1];
                let mut dx = vec![0.0; numel(self.shape(x))];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[r * d + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::RowScale { x, w } => {
                let x = *x;
                let w = w.clone();
                let d = self.shape(x)[1];
                let mut dx = vec![0.0; numel(self.shape(x))];
                for r in 0..w.len() {
                    for j in 0..d {
                        dx[r * d + j] = g[r * d + j] * w[r];
                    }
                }
                self.add_grad(x, &dx);
            }
        }
    }
}

fn lse_row(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

fn mat_mul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for b0 in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[((b0 * c + ci) * h + iy as usize) * w + ix as usize]
                                    * kernel[((fo * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b0 * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

/// Channel count for batch-norm: axis 1 of a 4-D tensor, axis 1 of a 2-D one.
fn bn_channels(shape: &[usize]) -> usize {
    shape[1]
}

/// Number of elements reduced per channel.
fn bn_reduce_count(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        4 => shape[0] * shape[2] * shape[3],
        _ => panic!("batch_norm supports 2-D and 4-D tensors"),
    }
}

fn for_each_channel(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    match shape.len() {
        2 => {
            let (n, d) = (shape[0], shape[1]);
            for i in 0..n {
                for ch in 0..d {
                    f(i * d + ch, ch);
                }
            }
        }
        4 => {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let hw = h * w;
            for i in 0..n {
                for ch in 0..c {
                    for s in 0..hw {
                        f((i * c + ch) * hw + s, ch);
                    }
                }
            }
        }
        _ => panic!("batch_norm supports 2-D and 4-D tensors"),
    }
}

/// Biased per-channel mean and variance of raw data with the given shape.
pub(crate) fn channel_moments_of(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let channels = bn_channels(shape);
    let m = bn_reduce_count(shape) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for_each_channel(shape, |idx, ch| mean[ch] += data[idx]);
    for v in mean.iter_mut() {
        *v /= m;
    }
    for_each_channel(shape, |idx, ch| {
        let d = data[idx] - mean[ch];
        var[ch] += d * d;
    });
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}
