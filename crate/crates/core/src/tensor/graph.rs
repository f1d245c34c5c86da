use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor; it is differentiated iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Adds a tensor that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn tensor_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `[M,K] × [K,N] → [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[K]` bias to every row of `[N,K]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if self.shape(bias) != [k] {
            return Err(Error::shape(format!(
                "row bias {:?} for rows of width {k}",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let t = Tensor::new(&[n, k], out)?;
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    /// Row-wise log-softmax of `[N,C]` with max shifting.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// Picks `x[n, idx[n]]` from `[N,C]`, giving `[N]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if idx.len() != n {
            return Err(Error::shape(format!("gather: {} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("gather index {bad} outside 0..{c}")));
        }
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &i)| d[r * c + i]).collect();
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(t, Op::Gather(x, idx.to_vec()), &[x]))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kH,kW]` plus `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} for {cout} output channels",
                self.shape(bias)
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            pad: padding,
            stride,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.data(input), n, self.data(weight), self.data(bias), cout, &geom);
        let t = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2x2 needs even extents, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample2x_nearest(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.data(input);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[plane * h2 * w2 + y * w2 + xx] = x[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(t, Op::Upsample(input), &[input]))
    }

    /// Per-channel batch normalization.
    ///
    /// In [`NormMode::Train`] the batch statistics are used and the updated
    /// running statistics are returned; the caller owns the state.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &RunningStats,
        mode: NormMode,
    ) -> Result<(Var, Option<RunningStats>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batchnorm affine params must be [{c}]")));
        }
        if state.mean.len() != c || state.var.len() != c {
            return Err(Error::shape(format!("batchnorm running stats must have {c} channels")));
        }
        let m = n * h * w;
        if mode == NormMode::Train && m < 2 {
            return Err(Error::invalid("batchnorm in train mode needs N·H·W ≥ 2"));
        }
        let x = self.data(input);
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            NormMode::Train => {
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        mean[ch] += x[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        let mu = mean[ch];
                        var[ch] += x[off..off + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
            }
            NormMode::Eval => {
                mean.copy_from_slice(&state.mean);
                var.copy_from_slice(&state.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let updated = (mode == NormMode::Train).then(|| {
            let unbias = m as f64 / (m as f64 - 1.0);
            RunningStats {
                mean: state
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v)
                    .collect(),
                var: state
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                    .collect(),
            }
        });
        let t = Tensor::new(&[n, c, h, w], out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            &[input, gamma, beta],
        );
        Ok((v, updated))
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(v)
                )));
            }
            total_c += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let t = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(t, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Reverse sweep from a scalar; gradients accumulate into every
    /// `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if needs(v) {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len(v)]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * xb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * xa[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / xb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= g[k] * xa[k] / (xb[k] * xb[k]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Relu(x) => {
                let xin = self.data(*x);
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        if xin[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..gx.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = len(*x) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| kernels::gemm(m, n, k, g, false, xb, true, 1.0, ga));
                acc(*b, &mut |gb| kernels::gemm(k, m, n, xa, true, g, false, 1.0, gb));
            }
            Op::AddRowBias(x, bias) => {
                let k = len(*bias);
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(k) {
                        add_into(gb, row);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = self.value(*x).dims2()?.1;
                acc(*x, &mut |gx| {
                    for ((gx_row, g_row), y_row) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = g_row.iter().sum();
                        for j in 0..c {
                            gx_row[j] += g_row[j] - y_row[j].exp() * s;
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                let c = self.value(*x).dims2()?.1;
                acc(*x, &mut |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let n = self.shape(*input)[0];
                let cout = self.shape(*weight)[0];
                let mut take = |v: Var| needs(v).then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; len(v)]));
                let mut di = take(*input);
                let mut dw = take(*weight);
                let mut db = take(*bias);
                kernels::conv2d_backward(
                    self.data(*input),
                    n,
                    self.data(*weight),
                    cout,
                    geom,
                    g,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(*input, di), (*weight, dw), (*bias, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |gx| {
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += g[k];
                }
            }),
            Op::Upsample(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &mut |gx| {
                    for (plane, gp) in g.chunks(h2 * w2).enumerate() {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[plane * h * w + (y / 2) * w + xx / 2] += gp[y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.data(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                acc(*gamma, &mut |gg| add_into(gg, &sum_dy_xhat));
                acc(*beta, &mut |gb| add_into(gb, &sum_dy));
                acc(*input, &mut |gx| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + hw {
                                gx[k] += if *batch_stats {
                                    scale * (g[k] - sum_dy[ch] / m - xhat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::Concat(inputs) => {
                let (n, total_c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    acc(v, &mut |gv| {
                        for s in 0..n {
                            let src = &g[(s * total_c + offset) * hw..(s * total_c + offset + c) * hw];
                            add_into(&mut gv[s * c * hw..(s + 1) * c * hw], src);
                        }
                    });
                    offset += c;
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.leaf(t(&[1, 1, 3, 3], &k));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn pointwise_kernel_with_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = g.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.leaf(t(&[1], &[1.0]));
        let y = g.conv2d(x, w, b, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn conv_rejects_bad_args() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Shape(_))));
        let w2 = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, w2, b, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn maxpool_basics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.maxpool2x2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_cell() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = g.maxpool2x2(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_and_sums_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 1, 1], &[5.0]));
        let y = g.upsample2x_nearest(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[5.0; 4]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn pool_then_upsample_on_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 4, 6], 1.5));
        let p = g.maxpool2x2(x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));
        let u = g.upsample2x_nearest(p).unwrap();
        assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn batchnorm_constant_and_zero_gamma() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 1, 3, 3], 4.2));
        let gamma = g.leaf(Tensor::full(&[1], 1.0));
        let beta = g.leaf(Tensor::zeros(&[1]));
        let rs = RunningStats::new(1);
        let (y, _) = g.batchnorm2d(x, gamma, beta, &rs, NormMode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-2));

        let r = g.leaf(t(&[1, 2, 2, 1], &[0.3, -1.0, 2.0, 8.0]));
        let g0 = g.leaf(Tensor::zeros(&[2]));
        let b = g.leaf(t(&[2], &[0.7, -0.2]));
        let (y, _) = g.batchnorm2d(r, g0, b, &RunningStats::new(2), NormMode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, 0.7, -0.2, -0.2]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_stats() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 11) as f64) * 0.7 - 2.0).collect();
        let x = g.leaf(t(&[2, 3, 4, 4], &data));
        let gamma = g.leaf(Tensor::full(&[3], 1.0));
        let beta = g.leaf(Tensor::zeros(&[3]));
        let rs = RunningStats::new(3);
        let (y, upd) = g.batchnorm2d(x, gamma, beta, &rs, NormMode::Train).unwrap();
        let out = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| out[(s * 3 + ch) * 16..(s * 3 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() <= 1e-9);
            // ε inflates the denominator slightly.
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
        assert_ne!(upd.unwrap(), rs);
        let (_, none) = g.batchnorm2d(x, gamma, beta, &rs, NormMode::Eval).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn batchnorm_rejects_single_element_batch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        let gm = g.leaf(Tensor::full(&[1], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        assert!(g.batchnorm2d(x, gm, b, &RunningStats::new(1), NormMode::Train).is_err());
        assert!(g.batchnorm2d(x, gm, b, &RunningStats::new(1), NormMode::Eval).is_ok());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        // a second sweep accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn leaves_without_requires_grad_get_nothing() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn concat_stacks_channels() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1, 1, 2], &[1., 2., 3., 4.]));
        let b = g.leaf(t(&[2, 2, 1, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
    }
}
