//! Tape-based reverse-mode differentiation.
//!
//! Ops record themselves on the tape as they execute; `backward` replays the
//! record in reverse, accumulating gradients into every reachable node. Nodes
//! are append-only, so an op's inputs always precede its output and a single
//! reverse sweep visits each op exactly once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel minibatch statistics produced by a train-mode norm op.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum OpKind {
    Add,
    Mul,
    Scale(f64),
    Sum,
    Relu,
    Softmax,
    LogSoftmax,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Dense,
    CrossEntropy {
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
    },
    BatchNorm {
        mode: NormMode,
        bypass: Option<Vec<bool>>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool,
    SliceCols {
        start: usize,
        len: usize,
    },
    Pick {
        row: usize,
        col: usize,
    },
}

#[derive(Debug)]
struct OpRecord {
    kind: OpKind,
    inputs: Vec<TensorId>,
    output: TensorId,
}

/// Outcome of a backward sweep.
#[derive(Debug)]
pub struct BackwardReport {
    /// `requires_grad` leaves that the loss does not depend on; their
    /// gradients stay zero.
    pub disconnected: Vec<TensorId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<OpRecord>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Put a tensor on the tape as a leaf (input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        id
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.leaf(t.with_grad())
    }

    /// Leaf that never receives a gradient (stop-gradient / detached value).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Gradient of a node after `backward`; zeros if never touched.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.clear_grad();
        }
        self.backward_done = false;
    }

    fn push_op(&mut self, kind: OpKind, inputs: Vec<TensorId>, out: Tensor, op: &'static str) -> Result<TensorId> {
        if !out.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut out = out;
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad());
        out.set_requires_grad(requires);
        let output = TensorId(self.nodes.len());
        self.nodes.push(out);
        self.ops.push(OpRecord { kind, inputs, output });
        Ok(output)
    }

    // ------------------------------------------------------------------
    // Elementwise and reduction ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push_op(OpKind::Add, vec![a, b], out, "add")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push_op(OpKind::Mul, vec![a, b], out, "mul")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = &self.nodes[a.0];
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push_op(OpKind::Scale(c), vec![a], out, "scale")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[a.0].data().iter().sum();
        self.push_op(OpKind::Sum, vec![a], Tensor::scalar(total), "sum")
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.nodes[a.0];
        // max(0, NaN) would silently swallow the NaN; refuse it instead.
        if !ta.all_finite() {
            return Err(Error::NonFinite { op: "relu" });
        }
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push_op(OpKind::Relu, vec![a], out, "relu")
    }

    // ------------------------------------------------------------------
    // Row-wise ops over [N, K]
    // ------------------------------------------------------------------

    fn rows_cols(&self, a: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.nodes[a.0].shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected [N, K], got {:?}", shape),
            });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, k) = self.rows_cols(a, "softmax")?;
        let data = softmax_rows(self.nodes[a.0].data(), n, k);
        let out = Tensor::new(&[n, k], data)?;
        self.push_op(OpKind::Softmax, vec![a], out, "softmax")
    }

    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, k) = self.rows_cols(a, "log_softmax")?;
        let data = log_softmax_rows(self.nodes[a.0].data(), n, k);
        let out = Tensor::new(&[n, k], data)?;
        self.push_op(OpKind::LogSoftmax, vec![a], out, "log_softmax")
    }

    /// Mean over the batch of `-log_softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = self.rows_cols(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} logit rows vs {} labels", n, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lsm = log_softmax_rows(self.nodes[logits.0].data(), n, k);
        let probs: Vec<f64> = lsm.iter().map(|v| v.exp()).collect();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -lsm[i * k + l])
            .sum::<f64>()
            / n as f64;
        self.push_op(
            OpKind::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
            "cross_entropy",
        )
    }

    /// Mean over the batch of `KL(softmax(p) || softmax(q))`.
    pub fn kl_divergence(&mut self, p_logits: TensorId, q_logits: TensorId) -> Result<TensorId> {
        let (n, k) = self.rows_cols(p_logits, "kl_divergence")?;
        if self.nodes[p_logits.0].shape() != self.nodes[q_logits.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[p_logits.0].shape(),
                    self.nodes[q_logits.0].shape()
                ),
            });
        }
        let lsm_p = log_softmax_rows(self.nodes[p_logits.0].data(), n, k);
        let lsm_q = log_softmax_rows(self.nodes[q_logits.0].data(), n, k);
        let p_probs: Vec<f64> = lsm_p.iter().map(|v| v.exp()).collect();
        let q_probs: Vec<f64> = lsm_q.iter().map(|v| v.exp()).collect();
        let total: f64 = (0..n * k).map(|i| p_probs[i] * (lsm_p[i] - lsm_q[i])).sum();
        let out = Tensor::scalar(total / n as f64);
        self.push_op(
            OpKind::KlDivergence { p_probs, q_probs },
            vec![p_logits, q_logits],
            out,
            "kl_divergence",
        )
    }

    // ------------------------------------------------------------------
    // Linear algebra ops
    // ------------------------------------------------------------------

    /// `input[N,D] . weight[D,K] + bias[K]`.
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.nodes[input.0].shape().to_vec();
        let ws = self.nodes[weight.0].shape().to_vec();
        let bs = self.nodes[bias.0].shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                detail: format!("input {:?}, weight {:?}, bias {:?}", xs, ws, bs),
            });
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let x = self.nodes[input.0].data();
        let w = self.nodes[weight.0].data();
        let b = self.nodes[bias.0].data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let orow = &mut out[i * k..(i + 1) * k];
            orow.copy_from_slice(b);
            for j in 0..d {
                let xv = x[i * d + j];
                let wrow = &w[j * k..(j + 1) * k];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let out = Tensor::new(&[n, k], out)?;
        self.push_op(OpKind::Dense, vec![input, weight, bias], out, "dense")
    }

    /// Cross-correlation of `input[N,C,H,W]` with `kernel[F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.nodes[input.0].shape().to_vec();
        let ks = self.nodes[kernel.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, kernel {:?}", xs, ks),
            });
        }
        if xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs kernel channels {}", xs[1], ks[1]),
            });
        }
        if stride < 1 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding),
            });
        }
        let oh = conv_extent(h, kh, padding, stride)?;
        let ow = conv_extent(w, kw, padding, stride)?;
        let x = self.nodes[input.0].data();
        let kd = self.nodes[kernel.0].data();

        // im2col + matmul, one image at a time through reusable scratch; the
        // naive loop survives as `conv2d_reference` and an equivalence
        // property pins the two paths together.
        let kdim = c * kh * kw;
        let spatial = oh * ow;
        let mut out = vec![0.0; n * f * spatial];
        CONV_SCRATCH.with(|scratch| {
            let scratch = &mut *scratch.borrow_mut();
            // Kernel transposed to [kdim, F] so the matmul inner axis is
            // contiguous.
            let kt = resize_zeroed(&mut scratch.kernel_t, kdim * f);
            for fi in 0..f {
                for ki in 0..kdim {
                    kt[ki * f + fi] = kd[fi * kdim + ki];
                }
            }
            for ni in 0..n {
                let image = &x[ni * c * h * w..(ni + 1) * c * h * w];
                let patches = resize_zeroed(&mut scratch.patches, spatial * kdim);
                im2col(image, c, h, w, kh, kw, oh, ow, stride, padding, patches);
                let rows_out = resize_zeroed(&mut scratch.rows, spatial * f);
                matmul_acc(patches, &scratch.kernel_t, rows_out, spatial, kdim, f);
                // [OH*OW, F] -> [F, OH, OW]
                let obase = ni * f * spatial;
                for s in 0..spatial {
                    for fi in 0..f {
                        out[obase + fi * spatial + s] = rows_out[s * f + fi];
                    }
                }
            }
        });
        let out = Tensor::new(&[n, f, oh, ow], out)?;
        self.push_op(OpKind::Conv2d { stride, padding }, vec![input, kernel], out, "conv2d")
    }

    /// Batch (or conditional batch) normalization over `[N,C,H,W]` or `[N,C]`.
    ///
    /// `deltas` carries per-sample affine offsets `(dgamma[N,C], dbeta[N,C])`
    /// plus bypass flags; a bypassed sample uses plain `gamma`/`beta` with no
    /// addition, so an all-bypassed call is arithmetically identical to the
    /// plain call. Train mode returns the per-channel minibatch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        deltas: Option<(TensorId, TensorId, &[bool])>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: NormMode,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        let xs = self.nodes[input.0].shape().to_vec();
        let (n, c, spatial) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("expected [N,C] or [N,C,H,W], got {:?}", xs),
                })
            }
        };
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("{} shape {:?}, expected [{}]", name, self.nodes[id.0].shape(), c),
                });
            }
        }
        if let Some((dg, db, bypass)) = &deltas {
            for (name, id) in [("delta_gamma", *dg), ("delta_beta", *db)] {
                if self.nodes[id.0].shape() != [n, c] {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        detail: format!("{} shape {:?}, expected [{}, {}]", name, self.nodes[id.0].shape(), n, c),
                    });
                }
            }
            if bypass.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("{} bypass flags for batch of {}", bypass.len(), n),
                });
            }
        }
        let m = n * spatial;
        if mode == NormMode::Train && m < 2 {
            return Err(Error::BatchTooSmall { elements: m });
        }

        let x = self.nodes[input.0].data();
        let (mean, var) = match mode {
            NormMode::Train => channel_stats(x, n, c, spatial),
            NormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (mu, inv) = (mean[ci], inv_std[ci]);
                for s in 0..spatial {
                    xhat[base + s] = (x[base + s] - mu) * inv;
                }
            }
        }

        let g = self.nodes[gamma.0].data();
        let b = self.nodes[beta.0].data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            let use_delta = match &deltas {
                Some((_, _, bypass)) => !bypass[ni],
                None => false,
            };
            for ci in 0..c {
                let (ge, be) = if use_delta {
                    let (dg, db, _) = deltas.as_ref().unwrap();
                    (
                        g[ci] + self.nodes[dg.0].data()[ni * c + ci],
                        b[ci] + self.nodes[db.0].data()[ni * c + ci],
                    )
                } else {
                    (g[ci], b[ci])
                };
                let base = (ni * c + ci) * spatial;
                for s in 0..spatial {
                    out[base + s] = ge * xhat[base + s] + be;
                }
            }
        }

        let stats = match mode {
            NormMode::Train => Some(BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            NormMode::Eval => None,
        };
        let mut inputs = vec![input, gamma, beta];
        let bypass = deltas.map(|(dg, db, bp)| {
            inputs.push(dg);
            inputs.push(db);
            bp.to_vec()
        });
        let out = Tensor::new(&xs, out)?;
        let id = self.push_op(
            OpKind::BatchNorm {
                mode,
                bypass,
                xhat,
                inv_std,
            },
            inputs,
            out,
            "batch_norm",
        )?;
        Ok((id, stats))
    }

    /// `[N,C,H,W] -> [N,C]`, mean over the spatial grid.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let xs = self.nodes[input.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected [N,C,H,W], got {:?}", xs),
            });
        }
        let (n, c, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        let x = self.nodes[input.0].data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = x[i * spatial..(i + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        }
        let out = Tensor::new(&[n, c], out)?;
        self.push_op(OpKind::GlobalAvgPool, vec![input], out, "global_avg_pool")
    }

    /// Column slice of a `[N,K]` tensor: columns `[start, start+len)`.
    pub fn slice_cols(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, k) = self.rows_cols(input, "slice_cols")?;
        if start + len > k {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns [{}, {}) out of 0..{}", start, start + len, k),
            });
        }
        let x = self.nodes[input.0].data();
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&x[i * k + start..i * k + start + len]);
        }
        let out = Tensor::new(&[n, len], out)?;
        self.push_op(OpKind::SliceCols { start, len }, vec![input], out, "slice_cols")
    }

    /// Single element of a `[N,K]` tensor as a scalar.
    pub fn pick(&mut self, input: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let (n, k) = self.rows_cols(input, "pick")?;
        if row >= n || col >= k {
            return Err(Error::ShapeMismatch {
                op: "pick",
                detail: format!("({}, {}) out of [{}, {}]", row, col, n, k),
            });
        }
        let v = self.nodes[input.0].data()[row * k + col];
        self.push_op(OpKind::Pick { row, col }, vec![input], Tensor::scalar(v), "pick")
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates the `grad` slot of every
    /// node the loss depends on; reports `requires_grad` leaves it does not.
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardReport> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let loss_t = &self.nodes[loss.0];
        if loss_t.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_t.shape().to_vec(),
            });
        }

        // Reachability: which nodes the loss depends on.
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        for op in self.ops.iter().rev() {
            if reachable[op.output.0] {
                for i in &op.inputs {
                    reachable[i.0] = true;
                }
            }
        }

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.ops.len()).rev() {
            if !reachable[self.ops[idx].output.0] {
                continue;
            }
            self.backward_op(idx, &mut grads);
        }

        let mut disconnected = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad() && !reachable[i] {
                disconnected.push(TensorId(i));
            }
            if reachable[i] {
                node.grad_mut().copy_from_slice(&grads[i]);
            }
        }
        self.backward_done = true;
        Ok(BackwardReport { disconnected })
    }

    fn backward_op(&self, idx: usize, grads: &mut [Vec<f64>]) {
        let op = &self.ops[idx];
        let out = op.output.0;
        // Inputs strictly precede the output, so this split is always valid.
        let (gin, gout) = grads.split_at_mut(out);
        let g = &gout[0];
        match &op.kind {
            OpKind::Add => {
                for &inp in &op.inputs {
                    for (d, s) in gin[inp.0].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            OpKind::Mul => {
                let (a, b) = (op.inputs[0].0, op.inputs[1].0);
                let (va, vb) = (self.nodes[a].data(), self.nodes[b].data());
                for i in 0..g.len() {
                    gin[a][i] += g[i] * vb[i];
                }
                for i in 0..g.len() {
                    gin[b][i] += g[i] * va[i];
                }
            }
            OpKind::Scale(c) => {
                let a = op.inputs[0].0;
                for (d, s) in gin[a].iter_mut().zip(g) {
                    *d += s * c;
                }
            }
            OpKind::Sum => {
                let a = op.inputs[0].0;
                let gv = g[0];
                for d in gin[a].iter_mut() {
                    *d += gv;
                }
            }
            OpKind::Relu => {
                // Subgradient 1 at exactly zero: an all-zero activation plane
                // (zeroed images through zero-initialized affine layers) must
                // still pass gradient, or that configuration can never leave
                // its saddle.
                let a = op.inputs[0].0;
                let x = self.nodes[a].data();
                for i in 0..g.len() {
                    if x[i] >= 0.0 {
                        gin[a][i] += g[i];
                    }
                }
            }
            OpKind::Softmax => {
                let a = op.inputs[0].0;
                let y = self.nodes[out].data();
                let k = self.nodes[out].shape()[1];
                for (row, grow) in g.chunks(k).enumerate() {
                    let yrow = &y[row * k..(row + 1) * k];
                    let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                    let drow = &mut gin[a][row * k..(row + 1) * k];
                    for j in 0..k {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            OpKind::LogSoftmax => {
                let a = op.inputs[0].0;
                let y = self.nodes[out].data();
                let k = self.nodes[out].shape()[1];
                for (row, grow) in g.chunks(k).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    let yrow = &y[row * k..(row + 1) * k];
                    let drow = &mut gin[a][row * k..(row + 1) * k];
                    for j in 0..k {
                        drow[j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
            OpKind::CrossEntropy { labels, probs } => {
                let a = op.inputs[0].0;
                let gv = g[0];
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gv / n as f64;
                let da = &mut gin[a];
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        da[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
            OpKind::KlDivergence { p_probs, q_probs } => {
                let (p, q) = (op.inputs[0].0, op.inputs[1].0);
                let n = self.nodes[p].shape()[0];
                let k = self.nodes[p].shape()[1];
                let gv = g[0];
                let scale = gv / n as f64;
                for row in 0..n {
                    let pr = &p_probs[row * k..(row + 1) * k];
                    let qr = &q_probs[row * k..(row + 1) * k];
                    // t_j = log p_j - log q_j; row KL = sum_j p_j t_j
                    let mut row_kl = 0.0;
                    for j in 0..k {
                        row_kl += pr[j] * (pr[j].ln() - qr[j].ln());
                    }
                    let dp = &mut gin[p][row * k..(row + 1) * k];
                    for j in 0..k {
                        let t = pr[j].ln() - qr[j].ln();
                        dp[j] += scale * pr[j] * (t - row_kl);
                    }
                    let dq = &mut gin[q][row * k..(row + 1) * k];
                    for j in 0..k {
                        dq[j] += scale * (qr[j] - pr[j]);
                    }
                }
            }
            OpKind::Dense => {
                let (xi, wi, bi) = (op.inputs[0].0, op.inputs[1].0, op.inputs[2].0);
                let x = self.nodes[xi].data();
                let w = self.nodes[wi].data();
                let n = self.nodes[xi].shape()[0];
                let d = self.nodes[xi].shape()[1];
                let k = self.nodes[wi].shape()[1];
                for i in 0..n {
                    let grow = &g[i * k..(i + 1) * k];
                    let dxrow = &mut gin[xi][i * d..(i + 1) * d];
                    for j in 0..d {
                        let wrow = &w[j * k..(j + 1) * k];
                        dxrow[j] += grow.iter().zip(wrow).map(|(gv, wv)| gv * wv).sum::<f64>();
                    }
                }
                for i in 0..n {
                    let grow = &g[i * k..(i + 1) * k];
                    for j in 0..d {
                        let xv = x[i * d + j];
                        let dwrow = &mut gin[wi][j * k..(j + 1) * k];
                        for (dw, gv) in dwrow.iter_mut().zip(grow) {
                            *dw += xv * gv;
                        }
                    }
                }
                let db = &mut gin[bi];
                for i in 0..n {
                    for (dbv, gv) in db.iter_mut().zip(&g[i * k..(i + 1) * k]) {
                        *dbv += gv;
                    }
                }
            }
            OpKind::Conv2d { stride, padding } => {
                self.conv2d_backward(op, g, gin, *stride, *padding);
            }
            OpKind::BatchNorm {
                mode,
                bypass,
                xhat,
                inv_std,
            } => {
                self.batch_norm_backward(op, g, gin, *mode, bypass.as_deref(), xhat, inv_std);
            }
            OpKind::GlobalAvgPool => {
                let a = op.inputs[0].0;
                let xs = self.nodes[a].shape();
                let spatial = xs[2] * xs[3];
                let da = &mut gin[a];
                for i in 0..g.len() {
                    let gv = g[i] / spatial as f64;
                    for d in da[i * spatial..(i + 1) * spatial].iter_mut() {
                        *d += gv;
                    }
                }
            }
            OpKind::SliceCols { start, len } => {
                let a = op.inputs[0].0;
                let k = self.nodes[a].shape()[1];
                let n = self.nodes[a].shape()[0];
                let da = &mut gin[a];
                for i in 0..n {
                    for j in 0..*len {
                        da[i * k + start + j] += g[i * len + j];
                    }
                }
            }
            OpKind::Pick { row, col } => {
                let a = op.inputs[0].0;
                let k = self.nodes[a].shape()[1];
                gin[a][row * k + col] += g[0];
            }
        }
    }

    fn conv2d_backward(&self, op: &OpRecord, g: &[f64], gin: &mut [Vec<f64>], stride: usize, padding: usize) {
        let (xi, ki) = (op.inputs[0].0, op.inputs[1].0);
        let xs = self.nodes[xi].shape();
        let ks = self.nodes[ki].shape();
        let os = self.nodes[op.output.0].shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (os[2], os[3]);
        let x = self.nodes[xi].data();
        let kd = self.nodes[ki].data();
        let kdim = c * kh * kw;
        let spatial = oh * ow;

        CONV_SCRATCH.with(|scratch| {
            let scratch = &mut *scratch.borrow_mut();
            for ni in 0..n {
                let image = &x[ni * c * h * w..(ni + 1) * c * h * w];
                // Grad plane gathered to [OH*OW, F] and its transpose.
                let g_rows = resize_zeroed(&mut scratch.rows, spatial * f);
                let g_t = resize_zeroed(&mut scratch.rows_t, f * spatial);
                for fi in 0..f {
                    let src = &g[(ni * f + fi) * spatial..(ni * f + fi + 1) * spatial];
                    for (s, gv) in src.iter().enumerate() {
                        g_rows[s * f + fi] = *gv;
                        g_t[fi * spatial + s] = *gv;
                    }
                }

                // dK[f, kidx] += sum_s gT[f, s] * patches[s, kidx]
                let patches = resize_zeroed(&mut scratch.patches, spatial * kdim);
                im2col(image, c, h, w, kh, kw, oh, ow, stride, padding, patches);
                matmul_acc(&scratch.rows_t, &scratch.patches, &mut gin[ki], f, spatial, kdim);

                // dPatches[s, kidx] = sum_f g_rows[s, f] * kernel[f, kidx],
                // scattered back onto this image's grid.
                let d_patches = resize_zeroed(&mut scratch.d_patches, spatial * kdim);
                matmul_acc(&scratch.rows, kd, d_patches, spatial, f, kdim);
                let dx = &mut gin[xi][ni * c * h * w..(ni + 1) * c * h * w];
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let row = (ohi * ow + owi) * kdim;
                        for ci in 0..c {
                            let xbase = ci * h * w;
                            for khi in 0..kh {
                                let ih = (ohi * stride + khi) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let pbase = row + (ci * kh + khi) * kw;
                                let xrow_base = xbase + ih as usize * w;
                                for kwi in 0..kw {
                                    let iw = (owi * stride + kwi) as isize - padding as isize;
                                    if iw >= 0 && iw < w as isize {
                                        dx[xrow_base + iw as usize] += scratch.d_patches[pbase + kwi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        op: &OpRecord,
        g: &[f64],
        gin: &mut [Vec<f64>],
        mode: NormMode,
        bypass: Option<&[bool]>,
        xhat: &[f64],
        inv_std: &[f64],
    ) {
        let (xi, gi, bi) = (op.inputs[0].0, op.inputs[1].0, op.inputs[2].0);
        let xs = self.nodes[xi].shape();
        let (n, c, spatial) = if xs.len() == 2 {
            (xs[0], xs[1], 1)
        } else {
            (xs[0], xs[1], xs[2] * xs[3])
        };
        let m = (n * spatial) as f64;
        let gamma = self.nodes[gi].data();
        let has_deltas = op.inputs.len() == 5;
        let dg_data = if has_deltas {
            Some(self.nodes[op.inputs[3].0].data())
        } else {
            None
        };

        // Effective per-sample scale: gamma plus delta unless bypassed.
        let eff_gamma = |ni: usize, ci: usize| -> f64 {
            match (dg_data, bypass) {
                (Some(dg), Some(bp)) if !bp[ni] => gamma[ci] + dg[ni * c + ci],
                _ => gamma[ci],
            }
        };

        // Affine parameter grads.
        for ni in 0..n {
            let active = match bypass {
                Some(bp) => !bp[ni],
                None => false,
            };
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for s in 0..spatial {
                    sum_g += g[base + s];
                    sum_gx += g[base + s] * xhat[base + s];
                }
                gin[gi][ci] += sum_gx;
                gin[bi][ci] += sum_g;
                if has_deltas && active {
                    gin[op.inputs[3].0][ni * c + ci] += sum_gx;
                    gin[op.inputs[4].0][ni * c + ci] += sum_g;
                }
            }
        }

        // Input grads.
        match mode {
            NormMode::Eval => {
                let dx = &mut gin[xi];
                for ni in 0..n {
                    for ci in 0..c {
                        let scale = eff_gamma(ni, ci) * inv_std[ci];
                        let base = (ni * c + ci) * spatial;
                        for s in 0..spatial {
                            dx[base + s] += g[base + s] * scale;
                        }
                    }
                }
            }
            NormMode::Train => {
                // Batch statistics depend on x, so fold their paths in:
                // dx_i = inv_std * (dxhat_i - mean(dxhat) - xhat_i * mean(dxhat*xhat))
                for ci in 0..c {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * spatial;
                        let ge = eff_gamma(ni, ci);
                        for s in 0..spatial {
                            let dxh = g[base + s] * ge;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[base + s];
                        }
                    }
                    let mean_dxhat = sum_dxhat / m;
                    let mean_dxhat_xhat = sum_dxhat_xhat / m;
                    let inv = inv_std[ci];
                    let dx = &mut gin[xi];
                    for ni in 0..n {
                        let base = (ni * c + ci) * spatial;
                        let ge = eff_gamma(ni, ci);
                        for s in 0..spatial {
                            let dxh = g[base + s] * ge;
                            dx[base + s] += inv * (dxh - mean_dxhat - xhat[base + s] * mean_dxhat_xhat);
                        }
                    }
                }
            }
        }
    }
}

fn conv_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    let span = input + 2 * padding - kernel;
    if span % stride != 0 {
        return Err(Error::InexactConvExtent {
            input,
            kernel,
            padding,
            stride,
        });
    }
    Ok(span / stride + 1)
}

/// Reusable buffers for the conv kernels; one set per thread, grow-only.
#[derive(Default)]
struct ConvScratch {
    kernel_t: Vec<f64>,
    patches: Vec<f64>,
    rows: Vec<f64>,
    rows_t: Vec<f64>,
    d_patches: Vec<f64>,
}

thread_local! {
    static CONV_SCRATCH: std::cell::RefCell<ConvScratch> = std::cell::RefCell::new(ConvScratch::default());
}

/// Reuse a scratch vector: resize to `len` and zero it, keeping capacity.
fn resize_zeroed(buf: &mut Vec<f64>, len: usize) -> &mut [f64] {
    buf.clear();
    buf.resize(len, 0.0);
    &mut buf[..]
}

/// Patch matrix `[OH*OW, C*KH*KW]` for one image, zero padded, row per
/// output position; `patches` must already be zeroed.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    patches: &mut [f64],
) {
    let kdim = c * kh * kw;
    for ohi in 0..oh {
        for owi in 0..ow {
            let row = (ohi * ow + owi) * kdim;
            for ci in 0..c {
                let xbase = ci * h * w;
                for khi in 0..kh {
                    let ih = (ohi * stride + khi) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = row + (ci * kh + khi) * kw;
                    let iw0 = (owi * stride) as isize - padding as isize;
                    // kw values are contiguous in x; clip and copy.
                    let lo = (-iw0).max(0) as usize;
                    let hi = kw.min(((w as isize) - iw0).max(0) as usize);
                    if lo < hi {
                        let src = xbase + ih as usize * w + (iw0 + lo as isize) as usize;
                        patches[dst + lo..dst + hi].copy_from_slice(&x[src..src + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// `out[i, j] += sum_k a[i, k] * b[k, j]`, all row-major. The inner loop runs
/// over contiguous rows of `b` and `out` so it vectorizes; zero entries of
/// `a` (padding, masked activations) are skipped outright.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Direct nested-loop cross-correlation: the reference path the optimized
/// kernel is equivalence-tested against.
pub fn conv2d_reference(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = conv_extent(h, kh, padding, stride)?;
    let ow = conv_extent(w, kw, padding, stride)?;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = (owi * stride + kwi) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + ih as usize) * w + iw as usize]
                                    * kernel.data()[((fi * c + ci) * kh + khi) * kw + kwi];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + ohi) * ow + owi] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, f, oh, ow], out)
}

/// Per-channel mean and population variance over `(N, spatial)`.
fn channel_stats(x: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            mean[ci] += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let mu = mean[ci];
            var[ci] += x[base..base + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

fn softmax_rows(x: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for j in 0..k {
            orow[j] = (row[j] - max).exp();
            sum += orow[j];
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for j in 0..k {
            out[i * k + j] = row[j] - logsum;
        }
    }
    out
}
