//! Tape-based reverse-mode differentiation over a fixed set of fused kernels.
//!
//! A [`Graph`] records every kernel application as a node holding its output
//! value and whatever the backward pass needs. Nodes are appended in
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use super::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("embedding id {id} out of range for a table of {vocab} rows")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("{op}: expected {expected} input channels, got {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },
    #[error("max pooling needs even spatial dims, got {rows}x{cols}")]
    OddDims { rows: usize, cols: usize },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("weighted cross-entropy: every cell is masked")]
    AllMasked,
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> KernelError {
    KernelError::Shape { op, detail: detail.into() }
}

/// Batch statistics of one batch-normalization call in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed (running) statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embedding { table: Var, ids: Vec<usize> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool, gates: Vec<f64>, cells: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, start: usize },
    PairFeatures { u: Var, h: Var, w: Var },
    PadStack { inputs: Vec<Var> },
    Conv3x3 { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Deconv2 { x: Var, w: Var, b: Var },
    ChannelsLast { x: Var },
    Linear { x: Var, w: Var, b: Var },
    WeightedCe { logits: Var, targets: Vec<usize>, coef: Vec<f64>, probs: Vec<f64> },
    Sum { x: Var },
    Dot { x: Var, coeffs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Row gather `table[ids]`; gradients scatter-add into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, KernelError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (vocab, width) = (t.dim(0), t.dim(1));
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(KernelError::IdOutOfRange { id, vocab });
            }
            out.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let needs = self.needs(table);
        Ok(self.push(Tensor::new(&[ids.len(), width], out), Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// One LSTM direction over `x: [L, E]` with gate order (input, forget,
    /// cell, output). `w_ih: [4H, E]`, `w_hh: [4H, H]`, `bias: [4H]`.
    /// Returns hidden states `[L, H]` at their original positions.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var, KernelError> {
        let (xv, wi, wh, bv) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(bias));
        if xv.rank() != 2 || wi.rank() != 2 || wh.rank() != 2 {
            return Err(shape_err("lstm", "x, w_ih and w_hh must be 2-D"));
        }
        let (len, e) = (xv.dim(0), xv.dim(1));
        let h = wh.dim(1);
        if wi.shape() != [4 * h, e] || wh.shape() != [4 * h, h] || bv.shape() != [4 * h] {
            return Err(shape_err(
                "lstm",
                format!("x {:?}, w_ih {:?}, w_hh {:?}, bias {:?}", xv.shape(), wi.shape(), wh.shape(), bv.shape()),
            ));
        }
        let (xd, wid, whd, bd) = (xv.data(), wi.data(), wh.data(), bv.data());
        let mut gates = vec![0.0; len * 4 * h];
        let mut cells = vec![0.0; len * h];
        let mut out = vec![0.0; len * h];
        let mut prev: Option<usize> = None;
        let mut z = vec![0.0; 4 * h];
        for s in 0..len {
            let t = if reverse { len - 1 - s } else { s };
            let xt = &xd[t * e..(t + 1) * e];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = bd[r];
                let row = &wid[r * e..(r + 1) * e];
                for k in 0..e {
                    acc += row[k] * xt[k];
                }
                if let Some(p) = prev {
                    let hp = &out[p * h..(p + 1) * h];
                    let row = &whd[r * h..(r + 1) * h];
                    for k in 0..h {
                        acc += row[k] * hp[k];
                    }
                }
                *zr = acc;
            }
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                let c_prev = prev.map_or(0.0, |p| cells[p * h + j]);
                let c = f * c_prev + i * g;
                let base = t * 4 * h;
                gates[base + j] = i;
                gates[base + h + j] = f;
                gates[base + 2 * h + j] = g;
                gates[base + 3 * h + j] = o;
                cells[t * h + j] = c;
                out[t * h + j] = o * c.tanh();
            }
            prev = Some(t);
        }
        let needs = [x, w_ih, w_hh, bias].iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&[len, h], out), Op::Lstm { x, w_ih, w_hh, bias, reverse, gates, cells }, needs))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, KernelError> {
        let first = self.value(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.dim(axis) * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.dim(0) {
            return Err(shape_err("narrow", format!("rows {start}..{} of {:?}", start + len, t.shape())));
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data), Op::Narrow { x, start }, needs))
    }

    /// Word-pair relevance features between context states `u: [M, K]` and
    /// utterance states `h: [N, K]`, laid out channel-first as `[K + 2, M, N]`:
    /// element-wise product, cosine similarity, then the bilinear form
    /// `h_n · W · u_m` with `w: [K, K]`. The cosine of a zero vector is 0.
    pub fn pair_features(&mut self, u: Var, h: Var, w: Var) -> Result<Var, KernelError> {
        let (uv, hv, wv) = (self.value(u), self.value(h), self.value(w));
        if uv.rank() != 2 || hv.rank() != 2 || uv.dim(1) != hv.dim(1) || wv.shape() != [uv.dim(1), uv.dim(1)] {
            return Err(shape_err(
                "pair_features",
                format!("u {:?}, h {:?}, w {:?}", uv.shape(), hv.shape(), wv.shape()),
            ));
        }
        let (m_len, n_len, k) = (uv.dim(0), hv.dim(0), uv.dim(1));
        let (ud, hd, wd) = (uv.data(), hv.data(), wv.data());
        let plane = m_len * n_len;
        let mut out = vec![0.0; (k + 2) * plane];
        let wu = mat_vecs(wd, k, ud, m_len);
        let unorm: Vec<f64> = (0..m_len).map(|m| norm(&ud[m * k..(m + 1) * k])).collect();
        let hnorm: Vec<f64> = (0..n_len).map(|n| norm(&hd[n * k..(n + 1) * k])).collect();
        for m in 0..m_len {
            let um = &ud[m * k..(m + 1) * k];
            for n in 0..n_len {
                let hn = &hd[n * k..(n + 1) * k];
                let cell = m * n_len + n;
                let mut dot = 0.0;
                for c in 0..k {
                    let p = hn[c] * um[c];
                    out[c * plane + cell] = p;
                    dot += p;
                }
                let denom = unorm[m] * hnorm[n];
                out[k * plane + cell] = if denom > 0.0 { dot / denom } else { 0.0 };
                out[(k + 1) * plane + cell] = dot_slice(hn, &wu[m * k..(m + 1) * k]);
            }
        }
        let needs = [u, h, w].iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&[k + 2, m_len, n_len], out), Op::PairFeatures { u, h, w }, needs))
    }

    /// Zero-pads each `[C, Mi, Ni]` input to `[C, rows, cols]` and stacks
    /// them into `[B, C, rows, cols]`.
    pub fn pad_stack(&mut self, inputs: &[Var], rows: usize, cols: usize) -> Result<Var, KernelError> {
        let channels =
            inputs.first().map(|&v| self.value(v).dim(0)).ok_or_else(|| shape_err("pad_stack", "no inputs"))?;
        let mut out = vec![0.0; inputs.len() * channels * rows * cols];
        for (b, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            if t.rank() != 3 || t.dim(0) != channels || t.dim(1) > rows || t.dim(2) > cols {
                return Err(shape_err(
                    "pad_stack",
                    format!("{:?} does not fit [{channels}, {rows}, {cols}]", t.shape()),
                ));
            }
            let (m_len, n_len) = (t.dim(1), t.dim(2));
            for c in 0..channels {
                for m in 0..m_len {
                    let src = &t.data()[(c * m_len + m) * n_len..(c * m_len + m + 1) * n_len];
                    let dst = ((b * channels + c) * rows + m) * cols;
                    out[dst..dst + n_len].copy_from_slice(src);
                }
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(&[inputs.len(), channels, rows, cols], out),
            Op::PadStack { inputs: inputs.to_vec() },
            needs,
        ))
    }

    /// 3×3 convolution with zero "same" padding. `x: [B, Ci, H, W]`,
    /// `w: [Co, Ci, 3, 3]`, `b: [Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != 3 || wv.dim(3) != 3 {
            return Err(shape_err("conv3x3", format!("x {:?}, w {:?}", xv.shape(), wv.shape())));
        }
        let (batch, ci, rows, cols) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let co = wv.dim(0);
        if wv.dim(1) != ci {
            return Err(KernelError::ChannelMismatch { op: "conv3x3", expected: wv.dim(1), got: ci });
        }
        if bv.shape() != [co] {
            return Err(shape_err("conv3x3", format!("bias {:?} for {co} output channels", bv.shape())));
        }
        let plane = rows * cols;
        let mut out = vec![0.0; batch * co * plane];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for bi in 0..batch {
            for o in 0..co {
                let dst = &mut out[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                dst.fill(bd[o]);
                for i in 0..ci {
                    let src = &xd[(bi * ci + i) * plane..(bi * ci + i + 1) * plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wk = wd[((o * ci + i) * 3 + ky) * 3 + kx];
                            if wk == 0.0 {
                                continue;
                            }
                            for_each_shifted(rows, cols, ky, kx, |d, s, len| {
                                for (dv, sv) in dst[d..d + len].iter_mut().zip(&src[s..s + len]) {
                                    *dv += wk * sv;
                                }
                            });
                        }
                    }
                }
            }
        }
        let needs = [x, w, b].iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&[batch, co, rows, cols], out), Op::Conv3x3 { x, w, b }, needs))
    }

    /// Per-channel batch normalization over batch and spatial dims of
    /// `x: [B, C, H, W]`. In training mode the batch statistics are returned
    /// so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>), KernelError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() != 4 {
            return Err(shape_err("batch_norm", format!("x must be 4-D, got {:?}", xv.shape())));
        }
        let (batch, ch, rows, cols) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if gv.shape() != [ch] || bv.shape() != [ch] {
            return Err(KernelError::ChannelMismatch { op: "batch_norm", expected: gv.numel(), got: ch });
        }
        let plane = rows * cols;
        let count = (batch * plane) as f64;
        let xd = xv.data();
        let channel_values =
            |c: usize| (0..batch).flat_map(move |bi| xd[(bi * ch + c) * plane..(bi * ch + c + 1) * plane].iter());
        let (means, vars, stats) = match mode {
            BnMode::Train => {
                let mut means = vec![0.0; ch];
                let mut vars = vec![0.0; ch];
                for c in 0..ch {
                    let mean = channel_values(c).sum::<f64>() / count;
                    let var = channel_values(c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                    means[c] = mean;
                    vars[c] = var;
                }
                let unbiased = vars.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect();
                let stats = BnStats { mean: means.clone(), var: unbiased };
                (means, vars, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(KernelError::ChannelMismatch { op: "batch_norm", expected: mean.len(), got: ch });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * plane;
                for p in base..base + plane {
                    let nx = (xd[p] - means[c]) * inv_std[c];
                    xhat[p] = nx;
                    out[p] = gv.data()[c] * nx + bv.data()[c];
                }
            }
        }
        let needs = [x, gamma, beta].iter().any(|&v| self.needs(v));
        let training = matches!(mode, BnMode::Train);
        let var = self.push(
            Tensor::new(&[batch, ch, rows, cols], out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
            needs,
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), data);
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// 2×2 max pooling with stride 2 over `[B, C, H, W]`; ties go to the
    /// first cell of the window in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, KernelError> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(shape_err("maxpool2", format!("x must be 4-D, got {:?}", t.shape())));
        }
        let (batch, ch, rows, cols) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(KernelError::OddDims { rows, cols });
        }
        let (orows, ocols) = (rows / 2, cols / 2);
        let mut out = Vec::with_capacity(batch * ch * orows * ocols);
        let mut argmax = Vec::with_capacity(out.capacity());
        let d = t.data();
        for plane in 0..batch * ch {
            let base = plane * rows * cols;
            for y in 0..orows {
                for xx in 0..ocols {
                    let mut best = base + 2 * y * cols + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * cols + 2 * xx + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[batch, ch, orows, ocols], out), Op::MaxPool2 { x, argmax }, needs))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2.
    /// `x: [B, Ci, H, W]`, `w: [Ci, Co, 2, 2]`, `b: [Co]` → `[B, Co, 2H, 2W]`.
    pub fn deconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != 2 || wv.dim(3) != 2 {
            return Err(shape_err("deconv2", format!("x {:?}, w {:?}", xv.shape(), wv.shape())));
        }
        let (batch, ci, rows, cols) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if wv.dim(0) != ci {
            return Err(KernelError::ChannelMismatch { op: "deconv2", expected: wv.dim(0), got: ci });
        }
        let co = wv.dim(1);
        if bv.shape() != [co] {
            return Err(shape_err("deconv2", format!("bias {:?} for {co} output channels", bv.shape())));
        }
        let (orows, ocols) = (2 * rows, 2 * cols);
        let mut out = vec![0.0; batch * co * orows * ocols];
        let (xd, wd) = (xv.data(), wv.data());
        for bi in 0..batch {
            for o in 0..co {
                let dst = &mut out[(bi * co + o) * orows * ocols..(bi * co + o + 1) * orows * ocols];
                dst.fill(bv.data()[o]);
                for i in 0..ci {
                    let src = &xd[(bi * ci + i) * rows * cols..(bi * ci + i + 1) * rows * cols];
                    let k = &wd[(i * co + o) * 4..(i * co + o + 1) * 4];
                    for y in 0..rows {
                        for xx in 0..cols {
                            let v = src[y * cols + xx];
                            let top = 2 * y * ocols + 2 * xx;
                            dst[top] += v * k[0];
                            dst[top + 1] += v * k[1];
                            dst[top + ocols] += v * k[2];
                            dst[top + ocols + 1] += v * k[3];
                        }
                    }
                }
            }
        }
        let needs = [x, w, b].iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&[batch, co, orows, ocols], out), Op::Deconv2 { x, w, b }, needs))
    }

    /// `[B, C, H, W]` → `[B·H·W, C]`, one row per cell.
    pub fn channels_last(&mut self, x: Var) -> Result<Var, KernelError> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(shape_err("channels_last", format!("x must be 4-D, got {:?}", t.shape())));
        }
        let (batch, ch, rows, cols) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let plane = rows * cols;
        let mut out = vec![0.0; t.numel()];
        for bi in 0..batch {
            for c in 0..ch {
                for p in 0..plane {
                    out[(bi * plane + p) * ch + c] = t.data()[(bi * ch + c) * plane + p];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[batch * plane, ch], out), Op::ChannelsLast { x }, needs))
    }

    /// Affine map over the last axis: `x: [..., A]`, `w: [A, B]`, `b: [B]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() == 0 || wv.rank() != 2 {
            return Err(shape_err("linear", format!("x {:?}, w {:?}", xv.shape(), wv.shape())));
        }
        let a = *xv.shape().last().unwrap_or(&0);
        if wv.dim(0) != a {
            return Err(shape_err("linear", format!("inner dims differ: x {:?}, w {:?}", xv.shape(), wv.shape())));
        }
        let out_dim = wv.dim(1);
        if bv.shape() != [out_dim] {
            return Err(shape_err("linear", format!("bias {:?} for {out_dim} outputs", bv.shape())));
        }
        let rows = xv.numel().checked_div(a).unwrap_or(0);
        let mut out = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            let xr = &xv.data()[r * a..(r + 1) * a];
            let mut acc = bv.data().to_vec();
            for (k, &xk) in xr.iter().enumerate() {
                let wr = &wv.data()[k * out_dim..(k + 1) * out_dim];
                for (o, wo) in acc.iter_mut().zip(wr) {
                    *o += xk * wo;
                }
            }
            out.extend(acc);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank checked") = out_dim;
        let needs = [x, w, b].iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, needs))
    }

    /// Mean over unmasked rows of `weights[target] · −log softmax(logits)[target]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        mask: &[bool],
    ) -> Result<Var, KernelError> {
        if mask.len() != targets.len() {
            return Err(shape_err("weighted_cross_entropy", "mask and targets differ in length"));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(KernelError::AllMasked);
        }
        let scale: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / active as f64 } else { 0.0 }).collect();
        self.weighted_cross_entropy_scaled(logits, targets, weights, &scale)
    }

    /// `Σ_k scale[k] · weights[target_k] · −log softmax(logits_k)[target_k]`.
    /// Rows with zero scale contribute nothing (and need no valid target).
    pub fn weighted_cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        scale: &[f64],
    ) -> Result<Var, KernelError> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dim(0) != targets.len() || scale.len() != targets.len() || lv.dim(1) != weights.len() {
            return Err(shape_err(
                "weighted_cross_entropy",
                format!("logits {:?}, {} targets, {} weights", lv.shape(), targets.len(), weights.len()),
            ));
        }
        let classes = lv.dim(1);
        let mut probs = vec![0.0; lv.numel()];
        let mut coef = vec![0.0; targets.len()];
        let mut loss = 0.0;
        for (k, (&t, &s)) in targets.iter().zip(scale).enumerate() {
            let row = &lv.data()[k * classes..(k + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..classes {
                probs[k * classes + c] = (row[c] - max).exp() / z;
            }
            if s == 0.0 {
                continue;
            }
            if t >= classes {
                return Err(shape_err("weighted_cross_entropy", format!("target {t} out of {classes} classes")));
            }
            coef[k] = s * weights[t];
            loss += coef[k] * (z.ln() + max - row[t]);
        }
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedCe { logits, targets: targets.to_vec(), coef, probs }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// `Σ coeffs[i] · x[i]`; a cheap random projection for gradient checks.
    pub fn dot(&mut self, x: Var, coeffs: &[f64]) -> Result<Var, KernelError> {
        let t = self.value(x);
        if t.numel() != coeffs.len() {
            return Err(shape_err("dot", format!("{} values vs {} coefficients", t.numel(), coeffs.len())));
        }
        let s = dot_slice(t.data(), coeffs);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, coeffs: coeffs.to_vec() }, needs))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds parameter gradients of `grads` into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[idx]) {
                for (a, b) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Embedding { table, ids } => {
                if !self.needs(*table) {
                    return;
                }
                let width = self.value(*table).dim(1);
                let dt = accumulate(grads, *table, numel(*table));
                for (l, &id) in ids.iter().enumerate() {
                    for k in 0..width {
                        dt[id * width + k] += g[l * width + k];
                    }
                }
            }
            Op::Lstm { x, w_ih, w_hh, bias, reverse, gates, cells } => {
                self.lstm_backward(node, g, grads, [*x, *w_ih, *w_hh, *bias], *reverse, gates, cells);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = self.value(v).dim(*axis) * inner;
                        if self.needs(v) {
                            let dv = accumulate(grads, v, numel(v));
                            for (a, b) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[offset..offset + chunk]) {
                                *a += b;
                            }
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Narrow { x, start } => {
                if !self.needs(*x) {
                    return;
                }
                let row: usize = node.value.shape()[1..].iter().product();
                let dx = accumulate(grads, *x, numel(*x));
                for (a, b) in dx[start * row..start * row + g.len()].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::PairFeatures { u, h, w } => self.pair_features_backward(g, grads, *u, *h, *w),
            Op::PadStack { inputs } => {
                let s = node.value.shape();
                let (channels, rows, cols) = (s[1], s[2], s[3]);
                for (b, &v) in inputs.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let t = self.value(v);
                    let (m_len, n_len) = (t.dim(1), t.dim(2));
                    let dv = accumulate(grads, v, t.numel());
                    for c in 0..channels {
                        for m in 0..m_len {
                            let src = ((b * channels + c) * rows + m) * cols;
                            let dst = (c * m_len + m) * n_len;
                            for (a, bb) in dv[dst..dst + n_len].iter_mut().zip(&g[src..src + n_len]) {
                                *a += bb;
                            }
                        }
                    }
                }
            }
            Op::Conv3x3 { x, w, b } => self.conv_backward(g, grads, *x, *w, *b),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let s = node.value.shape();
                let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
                let gd = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let base = (bi * ch + c) * plane;
                        for p in base..base + plane {
                            dgamma[c] += g[p] * xhat[p];
                            dbeta[c] += g[p];
                        }
                    }
                }
                if self.needs(*x) {
                    let count = (batch * plane) as f64;
                    let dx = accumulate(grads, *x, numel(*x));
                    for c in 0..ch {
                        // With batch statistics the mean and variance depend on x too.
                        let (sum_d, sum_dx) =
                            if *training { (dbeta[c] * gd[c], dgamma[c] * gd[c]) } else { (0.0, 0.0) };
                        for bi in 0..batch {
                            let base = (bi * ch + c) * plane;
                            for p in base..base + plane {
                                let dxhat = g[p] * gd[c];
                                dx[p] += if *training {
                                    inv_std[c] / count * (count * dxhat - sum_d - xhat[p] * sum_dx)
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    add_into(accumulate(grads, *gamma, ch), &dgamma);
                }
                if self.needs(*beta) {
                    add_into(accumulate(grads, *beta, ch), &dbeta);
                }
            }
            Op::Relu { x } => {
                if !self.needs(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let dx = accumulate(grads, *x, xv.len());
                for ((a, &b), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *a += b;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if !self.needs(*x) {
                    return;
                }
                let dx = accumulate(grads, *x, numel(*x));
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
            }
            Op::Deconv2 { x, w, b } => self.deconv_backward(g, grads, *x, *w, *b),
            Op::ChannelsLast { x } => {
                if !self.needs(*x) {
                    return;
                }
                let s = self.value(*x).shape().to_vec();
                let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
                let dx = accumulate(grads, *x, numel(*x));
                for bi in 0..batch {
                    for c in 0..ch {
                        for p in 0..plane {
                            dx[(bi * ch + c) * plane + p] += g[(bi * plane + p) * ch + c];
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (a, out_dim) = (wv.dim(0), wv.dim(1));
                let rows = xv.numel().checked_div(a).unwrap_or(0);
                if self.needs(*x) {
                    let dx = accumulate(grads, *x, xv.numel());
                    for r in 0..rows {
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        for k in 0..a {
                            dx[r * a + k] += dot_slice(&wv.data()[k * out_dim..(k + 1) * out_dim], gr);
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = accumulate(grads, *w, wv.numel());
                    for r in 0..rows {
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        for k in 0..a {
                            let xk = xv.data()[r * a + k];
                            for (d, gv) in dw[k * out_dim..(k + 1) * out_dim].iter_mut().zip(gr) {
                                *d += xk * gv;
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let db = accumulate(grads, *b, out_dim);
                    for r in 0..rows {
                        add_into(db, &g[r * out_dim..(r + 1) * out_dim]);
                    }
                }
            }
            Op::WeightedCe { logits, targets, coef, probs } => {
                if !self.needs(*logits) {
                    return;
                }
                let classes = self.value(*logits).dim(1);
                let dl = accumulate(grads, *logits, probs.len());
                for (k, (&t, &cf)) in targets.iter().zip(coef).enumerate() {
                    if cf == 0.0 {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dl[k * classes + c] += g[0] * cf * (probs[k * classes + c] - onehot);
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    for a in accumulate(grads, *x, numel(*x)).iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Dot { x, coeffs } => {
                if self.needs(*x) {
                    for (a, c) in accumulate(grads, *x, coeffs.len()).iter_mut().zip(coeffs) {
                        *a += g[0] * c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        [x, w_ih, w_hh, bias]: [Var; 4],
        reverse: bool,
        gates: &[f64],
        cells: &[f64],
    ) {
        let (xv, wi, wh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        let (len, e) = (xv.dim(0), xv.dim(1));
        let h = wh.dim(1);
        let hs = node.value.data();
        let mut dx = vec![0.0; len * e];
        let mut dwi = vec![0.0; wi.numel()];
        let mut dwh = vec![0.0; wh.numel()];
        let mut db = vec![0.0; 4 * h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let pos = |s: usize| if reverse { len - 1 - s } else { s };
        for s in (0..len).rev() {
            let t = pos(s);
            let prev = s.checked_sub(1).map(pos);
            let base = t * 4 * h;
            for j in 0..h {
                let (i, f, gg, o) =
                    (gates[base + j], gates[base + h + j], gates[base + 2 * h + j], gates[base + 3 * h + j]);
                let c = cells[t * h + j];
                let tc = c.tanh();
                let dh = g[t * h + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                let c_prev = prev.map_or(0.0, |p| cells[p * h + j]);
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            add_into(&mut db, &dz);
            let xt = &xv.data()[t * e..(t + 1) * e];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                for k in 0..e {
                    dwi[r * e + k] += dzr * xt[k];
                    dx[t * e + k] += dzr * wi.data()[r * e + k];
                }
            }
            dh_next.fill(0.0);
            if let Some(p) = prev {
                let hp = &hs[p * h..(p + 1) * h];
                for (r, &dzr) in dz.iter().enumerate() {
                    if dzr == 0.0 {
                        continue;
                    }
                    for k in 0..h {
                        dwh[r * h + k] += dzr * hp[k];
                        dh_next[k] += dzr * wh.data()[r * h + k];
                    }
                }
            }
        }
        for (v, d) in [(x, dx), (w_ih, dwi), (w_hh, dwh), (bias, db)] {
            if self.needs(v) {
                add_into(accumulate(grads, v, d.len()), &d);
            }
        }
    }

    fn pair_features_backward(&self, g: &[f64], grads: &mut [Option<Vec<f64>>], u: Var, h: Var, w: Var) {
        let (uv, hv, wv) = (self.value(u), self.value(h), self.value(w));
        let (m_len, n_len, k) = (uv.dim(0), hv.dim(0), uv.dim(1));
        let (ud, hd, wd) = (uv.data(), hv.data(), wv.data());
        let plane = m_len * n_len;
        let mut du = vec![0.0; ud.len()];
        let mut dh = vec![0.0; hd.len()];
        let mut dw = vec![0.0; wd.len()];
        let wu = mat_vecs(wd, k, ud, m_len);
        let wt = transpose(wd, k);
        let hw = mat_vecs(&wt, k, hd, n_len);
        let unorm: Vec<f64> = (0..m_len).map(|m| norm(&ud[m * k..(m + 1) * k])).collect();
        let hnorm: Vec<f64> = (0..n_len).map(|n| norm(&hd[n * k..(n + 1) * k])).collect();
        // gb_u[n, j] = Σ_m gb[m, n] · u[m, j], used for dW = Hᵀ · gb_u.
        let mut gb_u = vec![0.0; n_len * k];
        for m in 0..m_len {
            let um = &ud[m * k..(m + 1) * k];
            for n in 0..n_len {
                let hn = &hd[n * k..(n + 1) * k];
                let cell = m * n_len + n;
                for c in 0..k {
                    let gc = g[c * plane + cell];
                    du[m * k + c] += gc * hn[c];
                    dh[n * k + c] += gc * um[c];
                }
                let gcos = g[k * plane + cell];
                let denom = unorm[m] * hnorm[n];
                if gcos != 0.0 && denom > 0.0 {
                    let cos = dot_slice(hn, um) / denom;
                    let (uu, hh) = (unorm[m] * unorm[m], hnorm[n] * hnorm[n]);
                    for c in 0..k {
                        dh[n * k + c] += gcos * (um[c] / denom - cos * hn[c] / hh);
                        du[m * k + c] += gcos * (hn[c] / denom - cos * um[c] / uu);
                    }
                }
                let gb = g[(k + 1) * plane + cell];
                if gb != 0.0 {
                    for c in 0..k {
                        dh[n * k + c] += gb * wu[m * k + c];
                        du[m * k + c] += gb * hw[n * k + c];
                        gb_u[n * k + c] += gb * um[c];
                    }
                }
            }
        }
        for n in 0..n_len {
            for i in 0..k {
                let hni = hd[n * k + i];
                if hni == 0.0 {
                    continue;
                }
                for j in 0..k {
                    dw[i * k + j] += hni * gb_u[n * k + j];
                }
            }
        }
        for (v, d) in [(u, du), (h, dh), (w, dw)] {
            if self.needs(v) {
                add_into(accumulate(grads, v, d.len()), &d);
            }
        }
    }

    fn conv_backward(&self, g: &[f64], grads: &mut [Option<Vec<f64>>], x: Var, w: Var, b: Var) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, ci, rows, cols) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let co = wv.dim(0);
        let plane = rows * cols;
        let (xd, wd) = (xv.data(), wv.data());
        let need_x = self.needs(x);
        let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
        let mut dw = vec![0.0; wd.len()];
        let mut db = vec![0.0; co];
        for bi in 0..batch {
            for o in 0..co {
                let go = &g[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                db[o] += go.iter().sum::<f64>();
                for i in 0..ci {
                    let src = &xd[(bi * ci + i) * plane..(bi * ci + i + 1) * plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                            let wk = wd[widx];
                            let mut acc = 0.0;
                            for_each_shifted(rows, cols, ky, kx, |d, s, len| {
                                acc += dot_slice(&go[d..d + len], &src[s..s + len]);
                            });
                            dw[widx] += acc;
                            if need_x && wk != 0.0 {
                                let dxp = &mut dx[(bi * ci + i) * plane..(bi * ci + i + 1) * plane];
                                for_each_shifted(rows, cols, ky, kx, |d, s, len| {
                                    for (a, gv) in dxp[s..s + len].iter_mut().zip(&go[d..d + len]) {
                                        *a += wk * gv;
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            add_into(accumulate(grads, x, dx.len()), &dx);
        }
        if self.needs(w) {
            add_into(accumulate(grads, w, dw.len()), &dw);
        }
        if self.needs(b) {
            add_into(accumulate(grads, b, co), &db);
        }
    }

    fn deconv_backward(&self, g: &[f64], grads: &mut [Option<Vec<f64>>], x: Var, w: Var, b: Var) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, ci, rows, cols) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let co = wv.dim(1);
        let (orows, ocols) = (2 * rows, 2 * cols);
        let (xd, wd) = (xv.data(), wv.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; wd.len()];
        let mut db = vec![0.0; co];
        for bi in 0..batch {
            for o in 0..co {
                let go = &g[(bi * co + o) * orows * ocols..(bi * co + o + 1) * orows * ocols];
                db[o] += go.iter().sum::<f64>();
                for i in 0..ci {
                    let src = &xd[(bi * ci + i) * rows * cols..(bi * ci + i + 1) * rows * cols];
                    let k = &wd[(i * co + o) * 4..(i * co + o + 1) * 4];
                    let mut dk = [0.0; 4];
                    for y in 0..rows {
                        for xx in 0..cols {
                            let top = 2 * y * ocols + 2 * xx;
                            let quad = [go[top], go[top + 1], go[top + ocols], go[top + ocols + 1]];
                            let v = src[y * cols + xx];
                            dx[(bi * ci + i) * rows * cols + y * cols + xx] += dot_slice(&quad, k);
                            for q in 0..4 {
                                dk[q] += v * quad[q];
                            }
                        }
                    }
                    add_into(&mut dw[(i * co + o) * 4..(i * co + o + 1) * 4], &dk);
                }
            }
        }
        for (v, d) in [(x, dx), (w, dw), (b, db)] {
            if self.needs(v) {
                add_into(accumulate(grads, v, d.len()), &d);
            }
        }
    }
}

/// Visits the row segments of a 3×3 same-padded shift: `f(dst_offset,
/// src_offset, len)` for every output row with a valid source row.
#[inline]
fn for_each_shifted(rows: usize, cols: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
    let y0 = (-dy).max(0) as usize;
    let y1 = (rows as isize - dy).min(rows as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (cols as isize - dx).min(cols as isize).max(0) as usize;
    if x1 <= x0 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        f(y * cols + x0, sy * cols + sx, x1 - x0);
    }
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot_slice(a, a).sqrt()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Rows `r` of `vs` (count × k) mapped through the k×k matrix: `out[r] = W · vs[r]`.
fn mat_vecs(w: &[f64], k: usize, vs: &[f64], count: usize) -> Vec<f64> {
    let mut out = vec![0.0; count * k];
    for r in 0..count {
        let v = &vs[r * k..(r + 1) * k];
        for i in 0..k {
            out[r * k + i] = dot_slice(&w[i * k..(i + 1) * k], v);
        }
    }
    out
}

fn transpose(w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[j * k + i] = w[i * k + j];
        }
    }
    out
}
