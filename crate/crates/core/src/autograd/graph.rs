use std::sync::Arc;

use super::kernels;
use super::{AutogradError, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPoolTo1 {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
        piece: u64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the index order is always a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(AutogradError::Dimension(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Shared tensors are not copied.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.push_arc(value.into(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| {
            AutogradError::Dimension(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape(v)
            ))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner extents differ: [{m},{k}] x [{k2},{n}]"));
        }
        let out = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[i, j] + row[j]` for a matrix `x` and a length-`n` vector `row`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row")?;
        if self.value(row).len() != n {
            return dim_err(format!(
                "add_row: row of length {} for matrix [{m},{n}]",
                self.value(row).len()
            ));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|x| x * factor).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), rg)
    }

    /// Cross-correlation of `x[C_in,H,W]` with `w[C_out,C_in,kh,kw]` plus bias `b[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = self.conv_geometry(x, w, b, stride, pad)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geo,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![geo.c_out, geo.h_out, geo.w_out], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    fn conv_geometry(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<kernels::ConvGeometry> {
        let (c_in, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return dim_err(format!("conv2d input must be [C,H,W], got {s:?}")),
        };
        let (c_out, c_in_w, kh, kw) = match self.shape(w) {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            s => return dim_err(format!("conv2d weight must be [O,I,kh,kw], got {s:?}")),
        };
        if c_in != c_in_w {
            return dim_err(format!(
                "conv2d: input has {c_in} channels, weight expects {c_in_w}"
            ));
        }
        if self.value(b).len() != c_out {
            return dim_err(format!(
                "conv2d: bias of length {} for {c_out} output channels",
                self.value(b).len()
            ));
        }
        if stride == 0 {
            return Err(AutogradError::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < kh || span_w < kw {
            return dim_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"
            ));
        }
        Ok(kernels::ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    /// Per-channel maximum over the spatial extent of `x[C,H,W]`, returning `[C]`.
    pub fn adaptive_max_pool_to_1(&mut self, x: Var) -> Result<Var> {
        let (c, hw) = match self.shape(x) {
            [c, h, w] => (*c, h * w),
            s => return dim_err(format!("max pool input must be [C,H,W], got {s:?}")),
        };
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &data[ch * hw..(ch + 1) * hw];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                // strict comparison keeps the first occurrence on ties
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(ch * hw + best);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c], out),
            Op::MaxPoolTo1 { x, argmax },
            rg,
        ))
    }

    /// Row-wise layer normalization of `x[m,n]` with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return dim_err(format!("layer_norm: affine parameters must have length {n}"));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
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

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return dim_err(format!("slice_cols {start}..{} of {n} columns", start + len));
        }
        let out = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return dim_err(format!("slice_rows {start}..{} of {m} rows", start + len));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutogradError::Dimension("concat_cols of nothing".into()))?;
        let (m, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.mat(p, "concat_cols")?;
            if mi != m {
                return dim_err(format!("concat_cols: row counts {m} and {mi} differ"));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutogradError::Dimension("concat_rows of nothing".into()))?;
        let (_, n) = self.mat(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (mi, ni) = self.mat(p, "concat_rows")?;
            if ni != n {
                return dim_err(format!("concat_rows: column counts {n} and {ni} differ"));
            }
            rows += mi;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `x·Wᵀ`-free affine map: `x[m,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Scalar node with externally supplied value and local gradients.
    /// `piece` identifies the smooth region the value was computed in.
    pub fn custom_scalar(
        &mut self,
        inputs: &[Var],
        value: f64,
        grads: Vec<Tensor>,
        piece: u64,
    ) -> Result<Var> {
        if inputs.len() != grads.len() {
            return dim_err("custom_scalar: one gradient per input required".into());
        }
        for (&v, gt) in inputs.iter().zip(&grads) {
            if self.shape(v) != gt.shape() {
                return dim_err(format!(
                    "custom_scalar: gradient shape {:?} for input {:?}",
                    gt.shape(),
                    self.shape(v)
                ));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
                piece,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AutogradError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, &Tensor::full(self.shape(loss), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return dim_err(format!(
                "seed shape {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            ));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        work[out.0] = Some(seed.data().to_vec());
        for idx in (0..=out.0).rev() {
            let Some(up) = work[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                match &mut self.grads[idx] {
                    Some(g) => g
                        .data_mut()
                        .iter_mut()
                        .zip(&up)
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::from_parts(shape, up)),
                }
                continue;
            }
            self.propagate(idx, &up, &mut work);
        }
        Ok(())
    }

    fn accumulate(&self, work: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut work[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, up: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.rg(*a) {
                    let da = kernels::mm_a_bt(up, self.value(*b).data(), m, n, k);
                    self.accumulate(work, *a, da);
                }
                if self.rg(*b) {
                    let db = kernels::mm_at_b(self.value(*a).data(), up, m, k, n);
                    self.accumulate(work, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                self.accumulate(work, *a, kernels::transpose(up, n, m));
            }
            Op::Add(a, b) => {
                self.accumulate(work, *a, up.to_vec());
                self.accumulate(work, *b, up.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(work, *a, up.to_vec());
                self.accumulate(work, *b, up.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    self.accumulate(work, *a, up.iter().zip(vb).map(|(u, y)| u * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(work, *b, up.iter().zip(va).map(|(u, x)| u * x).collect());
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(work, *x, up.to_vec());
                if self.rg(*row) {
                    let n = self.value(*row).len();
                    let mut dr = vec![0.0; n];
                    for chunk in up.chunks_exact(n) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(work, *row, dr);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(work, *a, up.iter().map(|u| u * f).collect());
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let g = up
                    .iter()
                    .zip(va)
                    .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                self.accumulate(work, *a, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geo = self
                    .conv_geometry(*x, *w, *b, *stride, *pad)
                    .expect("geometry validated at record time");
                let grads = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    up,
                    &geo,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = grads.dx {
                    self.accumulate(work, *x, dx);
                }
                if let Some(dw) = grads.dw {
                    self.accumulate(work, *w, dw);
                }
                self.accumulate(work, *b, grads.db);
            }
            Op::MaxPoolTo1 { x, argmax } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (&pos, &u) in argmax.iter().zip(up) {
                    g[pos] += u;
                }
                self.accumulate(work, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let row_up = &up[i * n..(i + 1) * n];
                    let row_hat = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let d = row_up[j] * gd[j];
                        mean_d += d;
                        mean_dh += d * row_hat[j];
                        dg[j] += row_up[j] * row_hat[j];
                        db[j] += row_up[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let d = row_up[j] * gd[j];
                        dx[i * n + j] = rstd[i] * (d - mean_d - row_hat[j] * mean_dh);
                    }
                }
                self.accumulate(work, *x, dx);
                self.accumulate(work, *gamma, dg);
                self.accumulate(work, *beta, db);
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = self.value(*x).dims2().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, ur), dr) in y
                    .chunks_exact(n)
                    .zip(up.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (ur[j] - dot);
                    }
                }
                self.accumulate(work, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let len = node.value.dims2().unwrap().1;
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + len]
                        .copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                self.accumulate(work, *x, g);
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let mut g = vec![0.0; m * n];
                g[start * n..start * n + up.len()].copy_from_slice(up);
                self.accumulate(work, *x, g);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(m * w);
                        for i in 0..m {
                            g.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(work, p, g);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(work, p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(x) => self.accumulate(work, *x, up.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(work, *x, vec![up[0]; n]);
            }
            Op::Custom { inputs, grads, .. } => {
                for (&v, gt) in inputs.iter().zip(grads) {
                    self.accumulate(work, v, gt.data().iter().map(|g| g * up[0]).collect());
                }
            }
        }
    }

    /// Fingerprint of every discrete choice made during the forward pass
    /// (ReLU gates, pooling winners, custom pieces). Two evaluations with equal
    /// signatures lie in the same smooth region of the recorded function.
    pub fn piece_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        h.write_u8(u8::from(v > 0.0));
                    }
                }
                Op::MaxPoolTo1 { argmax, .. } => {
                    for &i in argmax {
                        h.write_u64(i as u64);
                    }
                }
                Op::Custom { piece, .. } => h.write_u64(*piece),
                _ => {}
            }
        }
        h.finish()
    }
}

/// 64-bit FNV-1a; stable across runs and platforms.
#[derive(Clone, Copy)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_u8(&mut self, b: u8) {
        self.0 ^= u64::from(b);
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn write_u64(&mut self, v: u64) {
        v.to_le_bytes().iter().for_each(|&b| self.write_u8(b));
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}
