//! The recorded computation graph: eager forward, tape-replay backward.

use super::{cast, numel, Scalar, Tensor};
use crate::error::{bail, err_fmt, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    /// inputs: [x: B×Ci×H×W, kernels: B×Co×Ci×K×K]
    Conv2dPerInstance { stride: usize, pad: usize },
    /// inputs: [kernel: Co×Ci×K×K]; replicates along a new batch axis
    BroadcastBatch { batch: usize },
    /// inputs: [lambda: B×M, static: Co×Ci×K×K, template_0, .., template_{M-1}]
    AssembleKernel,
    /// inputs: [template: Co×Ci×a×b] with (a,b) one of (K,K),(1,1),(K,1),(1,K)
    PadTemplate { k: usize },
    /// inputs: [x: B×C×H×W, bias: C]
    AddChannelBias,
    /// inputs: [x: B×C×H×W]; per-instance, per-channel standardization
    ChannelNorm,
    Relu,
    /// 2×2 average pooling with stride 2, trailing odd row/column dropped
    AvgPool2,
    /// inputs: [x: B×C×H×W] -> B×C
    GlobalAvgPool,
    /// inputs: [x: B×D, w: D×C, bias: C]
    Linear,
    /// softmax over the last axis
    Softmax,
    /// inputs: [logits: B×C]; mean over the batch of -log softmax[label]
    CrossEntropy { labels: Vec<usize> },
    /// output row i = input row map[i]
    GatherRows { map: Vec<usize> },
    /// output[b][m] = input[b][perm_b(m)], perms flattened row-major
    PermuteWithinRows { perms: Vec<usize> },
    /// eta·a + (1-eta)·b
    Mix { eta: S },
    Add,
    Mul,
    Scale { factor: S },
    /// sum of all elements -> scalar
    Sum,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2dPerInstance { .. } => "conv2d_per_instance",
            Op::BroadcastBatch { .. } => "broadcast_batch",
            Op::AssembleKernel => "assemble_kernel",
            Op::PadTemplate { .. } => "pad_template",
            Op::AddChannelBias => "add_channel_bias",
            Op::ChannelNorm => "channel_norm",
            Op::Relu => "relu",
            Op::AvgPool2 => "avg_pool2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
            Op::PermuteWithinRows { .. } => "permute_within_rows",
            Op::Mix { .. } => "mix",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum => "sum",
        }
    }
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    value: Vec<S>,
    /// Op-specific stash needed by backward (norm statistics, softmax rows).
    saved: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// A single forward computation, recorded for one backward sweep.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// reverse topological order and backward visits each node exactly once.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Valid output ranges per kernel tap, hoisted out of the convolution
/// inner loops so they run branch-free over contiguous rows.
struct ConvGeometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, oh: usize, ow: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { h, w, oh, ow, stride, pad }
    }

    /// Outputs oy with `0 <= oy·stride + ky − pad < h`.
    fn oy_range(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > ky {
            (self.pad - ky).div_ceil(self.stride)
        } else {
            0
        };
        let hi = match (self.h - 1 + self.pad).checked_sub(ky) {
            Some(top) => (top / self.stride + 1).min(self.oh),
            None => 0,
        };
        lo.min(hi)..hi
    }

    /// Outputs ox with `0 <= ox·stride + kx − pad < w`.
    fn ox_bounds(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = match (self.w - 1 + self.pad).checked_sub(kx) {
            Some(right) => (right / self.stride + 1).min(self.ow),
            None => 0,
        };
        (lo.min(hi), hi)
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(err_fmt!(Dim, "{what}: expected rank-2 tensor, got {shape:?}")),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(err_fmt!(Dim, "{what}: expected rank-4 tensor, got {shape:?}")),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            bail!(Contract, "scalar_value on tensor of shape {:?}", node.shape);
        }
        Ok(node.value[0])
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).unwrap()
    }

    /// Adds the node's gradient into `target.grad`.
    pub fn accumulate_grad_into(&self, v: Var, target: &mut Tensor<S>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Var> {
        if data.len() != numel(shape) {
            bail!(Dim, "leaf data length {} mismatches shape {shape:?}", data.len());
        }
        if !data.iter().all(|v| v.is_finite()) {
            bail!(Numeric, "leaf tensor contains non-finite values");
        }
        Ok(self.push(Op::Leaf, vec![], shape.to_vec(), data, vec![], requires_grad))
    }

    fn push(
        &mut self,
        op: Op<S>,
        inputs: Vec<Var>,
        shape: Vec<usize>,
        value: Vec<S>,
        saved: Vec<S>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            saved,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        op: Op<S>,
        inputs: Vec<Var>,
        shape: Vec<usize>,
        value: Vec<S>,
        saved: Vec<S>,
    ) -> Result<Var> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            bail!(Numeric, "{} produced non-finite value {bad}", op.name());
        }
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs, shape, value, saved, requires))
    }

    // ── forward operations ──────────────────────────────────────────────

    /// 2-D cross-correlation where every batch element carries its own
    /// kernel set. `x: B×Ci×H×W`, `kernels: B×Co×Ci×K×K`.
    #[allow(clippy::needless_range_loop)] // strided row access
    pub fn conv2d_per_instance(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, ci, h, w) = dims4(self.shape(x), "conv input")?;
        let kshape = self.shape(kernels);
        let (kb, co, kci, kh, kw) = match kshape {
            [a, b, c, d, e] => (*a, *b, *c, *d, *e),
            _ => bail!(Dim, "conv kernels: expected rank-5 tensor, got {kshape:?}"),
        };
        if kb != b {
            bail!(Dim, "conv: kernel batch {kb} does not match input batch {b}");
        }
        if kci != ci {
            bail!(Dim, "conv: kernel channels {kci} do not match input channels {ci}");
        }
        if kh != kw {
            bail!(Dim, "conv: kernels must be square, got {kh}×{kw}");
        }
        if stride == 0 {
            bail!(Dim, "conv: stride must be positive");
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            bail!(Dim, "conv: padded input {h}×{w} (+{pad}) smaller than kernel {k}");
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let xv = self.value(x);
        let kv = self.value(kernels);
        let mut out = vec![S::zero(); b * co * oh * ow];
        let geom = ConvGeometry::new(h, w, oh, ow, stride, pad);
        for bi in 0..b {
            for o in 0..co {
                let obase = ((bi * co + o) * oh) * ow;
                for c in 0..ci {
                    let xc = &xv[((bi * ci + c) * h) * w..][..h * w];
                    let kc = &kv[(((bi * co + o) * ci + c) * k) * k..][..k * k];
                    for ky in 0..k {
                        let krow = &kc[ky * k..ky * k + k];
                        for oy in geom.oy_range(ky) {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xc[iy * w..iy * w + w];
                            let orow = &mut out[obase + oy * ow..obase + oy * ow + ow];
                            for (kx, &kval) in krow.iter().enumerate() {
                                let (lo, hi) = geom.ox_bounds(kx);
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] = orow[ox] + kval * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.record(
            Op::Conv2dPerInstance { stride, pad },
            vec![x, kernels],
            vec![b, co, oh, ow],
            out,
            vec![],
        )
    }

    /// Replicates a shared kernel `Co×Ci×K×K` across a batch axis.
    pub fn broadcast_batch(&mut self, kernel: Var, batch: usize) -> Result<Var> {
        let (co, ci, kh, kw) = dims4(self.shape(kernel), "broadcast_batch kernel")?;
        let per = co * ci * kh * kw;
        let kv = self.value(kernel);
        let mut out = Vec::with_capacity(batch * per);
        for _ in 0..batch {
            out.extend_from_slice(kv);
        }
        self.record(
            Op::BroadcastBatch { batch },
            vec![kernel],
            vec![batch, co, ci, kh, kw],
            out,
            vec![],
        )
    }

    /// Per-instance kernel: `out[b] = static + Σ_m λ[b,m]·templates[m]`.
    /// Templates must already be padded to the dense `Co×Ci×K×K` shape.
    pub fn assemble_kernel(&mut self, lambda: Var, static_kernel: Var, templates: &[Var]) -> Result<Var> {
        let (b, m) = dims2(self.shape(lambda), "assemble_kernel coefficients")?;
        if m != templates.len() {
            bail!(
                Dim,
                "assemble_kernel: {} coefficient columns but {} templates",
                m,
                templates.len()
            );
        }
        let (co, ci, kh, kw) = dims4(self.shape(static_kernel), "assemble_kernel static")?;
        for (i, t) in templates.iter().enumerate() {
            if self.shape(*t) != [co, ci, kh, kw] {
                bail!(
                    Dim,
                    "assemble_kernel: template {i} shape {:?} differs from static {:?}",
                    self.shape(*t),
                    [co, ci, kh, kw]
                );
            }
        }
        let per = co * ci * kh * kw;
        let lv = self.value(lambda).to_vec();
        let sv = self.value(static_kernel).to_vec();
        let mut out = vec![S::zero(); b * per];
        for bi in 0..b {
            let dst = &mut out[bi * per..(bi + 1) * per];
            dst.copy_from_slice(&sv);
            for (mi, t) in templates.iter().enumerate() {
                let c = lv[bi * m + mi];
                for (d, tvx) in dst.iter_mut().zip(self.nodes[t.0].value.iter()) {
                    *d = *d + c * *tvx;
                }
            }
        }
        let mut inputs = vec![lambda, static_kernel];
        inputs.extend_from_slice(templates);
        self.record(Op::AssembleKernel, inputs, vec![b, co, ci, kh, kw], out, vec![])
    }

    /// Zero-pads an asymmetric template onto the central criss-cross of a
    /// dense `K×K` kernel: 1×1 to the center cell, K×1 to the center
    /// column, 1×K to the center row. A dense template passes through.
    pub fn pad_template(&mut self, template: Var, k: usize) -> Result<Var> {
        let (co, ci, th, tw) = dims4(self.shape(template), "pad_template")?;
        let legal = (th == k && tw == k)
            || (th == 1 && tw == 1)
            || (th == k && tw == 1)
            || (th == 1 && tw == k);
        if !legal {
            bail!(
                Dim,
                "pad_template: {th}×{tw} is not one of the legal patterns for K={k}"
            );
        }
        let mid = k / 2;
        let tv = self.value(template);
        let mut out = vec![S::zero(); co * ci * k * k];
        for oc in 0..co {
            for c in 0..ci {
                let src = ((oc * ci + c) * th) * tw;
                let dst = ((oc * ci + c) * k) * k;
                for y in 0..th {
                    for x in 0..tw {
                        let dy = if th == k { y } else { mid };
                        let dx = if tw == k { x } else { mid };
                        out[dst + dy * k + dx] = tv[src + y * tw + x];
                    }
                }
            }
        }
        self.record(Op::PadTemplate { k }, vec![template], vec![co, ci, k, k], out, vec![])
    }

    /// Adds a per-output-channel bias to a `B×C×H×W` map.
    #[allow(clippy::needless_range_loop)]
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "add_channel_bias input")?;
        if self.shape(bias) != [c] {
            bail!(
                Dim,
                "add_channel_bias: bias shape {:?} does not match {c} channels",
                self.shape(bias)
            );
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let hw = h * w;
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let add = bv[ci];
                out.extend(xv[base..base + hw].iter().map(|v| *v + add));
            }
        }
        self.record(Op::AddChannelBias, vec![x, bias], vec![b, c, h, w], out, vec![])
    }

    /// Per-instance channel standardization (group count = channels): each
    /// `(b, c)` spatial slice is centered and scaled to unit variance. No
    /// running statistics, so averaged weights need no refresh.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "channel_norm input")?;
        let hw = h * w;
        if hw == 0 {
            bail!(Dim, "channel_norm: empty spatial extent");
        }
        let eps = cast::<S>(eps);
        let n = cast::<S>(hw as f64);
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        let mut saved = vec![S::zero(); b * c]; // inverse stddev per (b, c)
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let slice = &xv[base..base + hw];
                let mean = slice.iter().copied().sum::<S>() / n;
                let var = slice
                    .iter()
                    .map(|v| (*v - mean) * (*v - mean))
                    .sum::<S>()
                    / n;
                let inv = S::one() / (var + eps).sqrt();
                saved[bi * c + ci] = inv;
                for (o, v) in out[base..base + hw].iter_mut().zip(slice) {
                    *o = (*v - mean) * inv;
                }
            }
        }
        self.record(
            Op::ChannelNorm,
            vec![x],
            vec![b, c, h, w],
            out,
            saved,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|v| v.max(S::zero())).collect();
        self.record(Op::Relu, vec![x], shape, out, vec![])
    }

    /// 2×2 mean pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "avg_pool2 input")?;
        if h < 2 || w < 2 {
            bail!(Dim, "avg_pool2: spatial extent {h}×{w} is smaller than the window");
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = cast::<S>(0.25);
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = bc * h * w;
            let dst = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = src + (2 * oy) * w + 2 * ox;
                    out[dst + oy * ow + ox] =
                        (xv[i] + xv[i + 1] + xv[i + w] + xv[i + w + 1]) * quarter;
                }
            }
        }
        self.record(Op::AvgPool2, vec![x], vec![b, c, oh, ow], out, vec![])
    }

    /// Mean over all spatial positions: `B×C×H×W -> B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "global_avg_pool input")?;
        let hw = h * w;
        if hw == 0 {
            bail!(Dim, "global_avg_pool: empty spatial extent");
        }
        let n = cast::<S>(hw as f64);
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * hw;
            *o = xv[base..base + hw].iter().copied().sum::<S>() / n;
        }
        self.record(Op::GlobalAvgPool, vec![x], vec![b, c], out, vec![])
    }

    /// `x·w + bias` with `x: B×D`, `w: D×C`, `bias: C`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (b, d) = dims2(self.shape(x), "linear input")?;
        let (wd, c) = dims2(self.shape(w), "linear weights")?;
        if wd != d {
            bail!(Dim, "linear: input width {d} does not match weight rows {wd}");
        }
        if self.shape(bias) != [c] {
            bail!(
                Dim,
                "linear: bias shape {:?} does not match {c} outputs",
                self.shape(bias)
            );
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = bv[ci];
                for di in 0..d {
                    acc = acc + xv[bi * d + di] * wv[di * c + ci];
                }
                out[bi * c + ci] = acc;
            }
        }
        self.record(Op::Linear, vec![x, w, bias], vec![b, c], out, vec![])
    }

    /// Softmax over the last axis; rows land on the probability simplex.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape
            .last()
            .ok_or_else(|| err_fmt!(Dim, "softmax: scalar input has no axis"))?;
        if m == 0 {
            bail!(Dim, "softmax: empty last axis");
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        for (row_out, row_in) in out.chunks_mut(m).zip(xv.chunks(m)) {
            let max = row_in.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (*v - max).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        self.record(Op::Softmax, vec![x], shape, out, vec![])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits), "cross_entropy logits")?;
        if labels.len() != b {
            bail!(Dim, "cross_entropy: {} labels for batch of {b}", labels.len());
        }
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            bail!(Index, "cross_entropy: label {bad} out of range for {c} classes");
        }
        let xv = self.value(logits);
        // Saved: softmax rows, reused by backward.
        let mut soft = vec![S::zero(); b * c];
        let mut total = S::zero();
        for bi in 0..b {
            let row = &xv[bi * c..(bi + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (o, v) in soft[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                *o = (*v - max).exp();
                sum = sum + *o;
            }
            for o in soft[bi * c..(bi + 1) * c].iter_mut() {
                *o = *o / sum;
            }
            let lse = max + sum.ln();
            total = total + (lse - row[labels[bi]]);
        }
        let mean = total / cast::<S>(b as f64);
        self.record(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            vec![],
            vec![mean],
            soft,
        )
    }

    /// Row gather: output row `i` is input row `map[i]`. Gradient scatters
    /// back to the source rows, which is exactly the exchange routing.
    pub fn gather_rows(&mut self, x: Var, map: &[usize]) -> Result<Var> {
        let (b, m) = dims2(self.shape(x), "gather_rows input")?;
        if map.len() != b {
            bail!(Dim, "gather_rows: map length {} for batch of {b}", map.len());
        }
        if let Some(bad) = map.iter().find(|i| **i >= b) {
            bail!(Contract, "gather_rows: source row {bad} out of range for batch {b}");
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * m];
        for (i, src) in map.iter().enumerate() {
            out[i * m..(i + 1) * m].copy_from_slice(&xv[src * m..(src + 1) * m]);
        }
        self.record(
            Op::GatherRows { map: map.to_vec() },
            vec![x],
            vec![b, m],
            out,
            vec![],
        )
    }

    /// Per-row column permutation: `output[b][m] = input[b][perms[b*M+m]]`.
    /// Every row of `perms` must be a bijection on `0..M`.
    pub fn permute_within_rows(&mut self, x: Var, perms: &[usize]) -> Result<Var> {
        let (b, m) = dims2(self.shape(x), "permute_within_rows input")?;
        if perms.len() != b * m {
            bail!(
                Dim,
                "permute_within_rows: expected {b}×{m} permutation entries, got {}",
                perms.len()
            );
        }
        let mut seen = vec![false; m];
        for row in perms.chunks(m) {
            seen.iter_mut().for_each(|s| *s = false);
            for &p in row {
                if p >= m || seen[p] {
                    bail!(Contract, "permute_within_rows: row {row:?} is not a permutation of 0..{m}");
                }
                seen[p] = true;
            }
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); b * m];
        for bi in 0..b {
            for mi in 0..m {
                out[bi * m + mi] = xv[bi * m + perms[bi * m + mi]];
            }
        }
        self.record(
            Op::PermuteWithinRows {
                perms: perms.to_vec(),
            },
            vec![x],
            vec![b, m],
            out,
            vec![],
        )
    }

    /// Convex combination `eta·a + (1-eta)·b`.
    pub fn mix(&mut self, a: Var, b: Var, eta: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&eta) {
            bail!(Contract, "mix: eta {eta} outside [0, 1]");
        }
        if self.shape(a) != self.shape(b) {
            bail!(
                Dim,
                "mix: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        let eta_s = cast::<S>(eta);
        let one_m = S::one() - eta_s;
        let shape = self.shape(a).to_vec();
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| eta_s * *x + one_m * *y)
            .collect();
        self.record(Op::Mix { eta: eta_s }, vec![a, b], shape, out, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dim,
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        let shape = self.shape(a).to_vec();
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        self.record(Op::Add, vec![a, b], shape, out, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dim,
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        let shape = self.shape(a).to_vec();
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        self.record(Op::Mul, vec![a, b], shape, out, vec![])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = cast::<S>(factor);
        let shape = self.shape(x).to_vec();
        let out = self.value(x).iter().map(|v| *v * f).collect();
        self.record(Op::Scale { factor: f }, vec![x], shape, out, vec![])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum::<S>();
        self.record(Op::Sum, vec![x], vec![], vec![total], vec![])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate by summation
    /// on every node with `requires_grad`; read them via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            bail!(
                Contract,
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape
            );
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    node.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn input_grad<'a>(
        nodes: &[Node<S>],
        grads: &'a mut [Option<Vec<S>>],
        v: Var,
    ) -> Option<&'a mut Vec<S>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]))
    }

    #[allow(clippy::needless_range_loop)] // strided row access throughout
    fn apply_backward(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2dPerInstance { stride, pad } => {
                let x = node.inputs[0];
                let kern = node.inputs[1];
                let (b, ci, h, w) = dims4(&nodes[x.0].shape, "conv input")?;
                let k = nodes[kern.0].shape[3];
                let co = nodes[kern.0].shape[1];
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let xv = &nodes[x.0].value;
                let kv = &nodes[kern.0].value;
                let want_x = nodes[x.0].requires_grad;
                let want_k = nodes[kern.0].requires_grad;
                let mut gx = if want_x { vec![S::zero(); xv.len()] } else { vec![] };
                let mut gk = if want_k { vec![S::zero(); kv.len()] } else { vec![] };
                let geom = ConvGeometry::new(h, w, oh, ow, *stride, *pad);
                for bi in 0..b {
                    for o in 0..co {
                        let gbase = ((bi * co + o) * oh) * ow;
                        for c in 0..ci {
                            let xoff = ((bi * ci + c) * h) * w;
                            let koff = (((bi * co + o) * ci + c) * k) * k;
                            for ky in 0..k {
                                for oy in geom.oy_range(ky) {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &g[gbase + oy * ow..gbase + oy * ow + ow];
                                    let xrow = &xv[xoff + iy * w..xoff + iy * w + w];
                                    for kx in 0..k {
                                        let (lo, hi) = geom.ox_bounds(kx);
                                        if want_k {
                                            let mut acc = S::zero();
                                            for ox in lo..hi {
                                                acc = acc + grow[ox] * xrow[ox * stride + kx - pad];
                                            }
                                            let ki = koff + ky * k + kx;
                                            gk[ki] = gk[ki] + acc;
                                        }
                                        if want_x {
                                            let kval = kv[koff + ky * k + kx];
                                            let gxrow = &mut gx[xoff + iy * w..xoff + iy * w + w];
                                            for ox in lo..hi {
                                                let ix = ox * stride + kx - pad;
                                                gxrow[ix] = gxrow[ix] + kval * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    if let Some(dst) = Self::input_grad(nodes, grads, x) {
                        for (d, s) in dst.iter_mut().zip(&gx) {
                            *d = *d + *s;
                        }
                    }
                }
                if want_k {
                    if let Some(dst) = Self::input_grad(nodes, grads, kern) {
                        for (d, s) in dst.iter_mut().zip(&gk) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::BroadcastBatch { batch } => {
                let kern = node.inputs[0];
                let per = nodes[kern.0].value.len();
                if let Some(dst) = Self::input_grad(nodes, grads, kern) {
                    for bi in 0..*batch {
                        for (d, s) in dst.iter_mut().zip(&g[bi * per..(bi + 1) * per]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::AssembleKernel => {
                let lambda = node.inputs[0];
                let stat = node.inputs[1];
                let templates = &node.inputs[2..];
                let (b, m) = dims2(&nodes[lambda.0].shape, "assemble coefficients")?;
                let per = nodes[stat.0].value.len();
                let lv = &nodes[lambda.0].value;
                if nodes[lambda.0].requires_grad {
                    let mut gl = vec![S::zero(); b * m];
                    for bi in 0..b {
                        let grow = &g[bi * per..(bi + 1) * per];
                        for (mi, t) in templates.iter().enumerate() {
                            let tv = &nodes[t.0].value;
                            let mut acc = S::zero();
                            for (gg, tt) in grow.iter().zip(tv) {
                                acc = acc + *gg * *tt;
                            }
                            gl[bi * m + mi] = acc;
                        }
                    }
                    if let Some(dst) = Self::input_grad(nodes, grads, lambda) {
                        for (d, s) in dst.iter_mut().zip(&gl) {
                            *d = *d + *s;
                        }
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, stat) {
                    for bi in 0..b {
                        for (d, s) in dst.iter_mut().zip(&g[bi * per..(bi + 1) * per]) {
                            *d = *d + *s;
                        }
                    }
                }
                for (mi, t) in templates.iter().enumerate() {
                    if let Some(dst) = Self::input_grad(nodes, grads, *t) {
                        for bi in 0..b {
                            let c = lv[bi * m + mi];
                            for (d, s) in dst.iter_mut().zip(&g[bi * per..(bi + 1) * per]) {
                                *d = *d + c * *s;
                            }
                        }
                    }
                }
            }
            Op::PadTemplate { k } => {
                let t = node.inputs[0];
                let (co, ci, th, tw) = dims4(&nodes[t.0].shape, "pad_template input")?;
                let mid = k / 2;
                if let Some(dst) = Self::input_grad(nodes, grads, t) {
                    for oc in 0..co {
                        for c in 0..ci {
                            let src = ((oc * ci + c) * th) * tw;
                            let out = ((oc * ci + c) * k) * k;
                            for y in 0..th {
                                for x in 0..tw {
                                    let dy = if th == *k { y } else { mid };
                                    let dx = if tw == *k { x } else { mid };
                                    dst[src + y * tw + x] =
                                        dst[src + y * tw + x] + g[out + dy * k + dx];
                                }
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias => {
                let x = node.inputs[0];
                let bias = node.inputs[1];
                let (b, c, h, w) = dims4(&node.shape, "add_channel_bias output")?;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d = *d + *s;
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, bias) {
                    let hw = h * w;
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = S::zero();
                            for v in &g[base..base + hw] {
                                acc = acc + *v;
                            }
                            dst[ci] = dst[ci] + acc;
                        }
                    }
                }
            }
            Op::ChannelNorm => {
                let x = node.inputs[0];
                let (b, c, h, w) = dims4(&node.shape, "channel_norm output")?;
                let hw = h * w;
                let n = cast::<S>(hw as f64);
                let y = &node.value;
                let inv = &node.saved;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bc in 0..b * c {
                        let base = bc * hw;
                        let grow = &g[base..base + hw];
                        let yrow = &y[base..base + hw];
                        let mut gmean = S::zero();
                        let mut gymean = S::zero();
                        for (gg, yy) in grow.iter().zip(yrow) {
                            gmean = gmean + *gg;
                            gymean = gymean + *gg * *yy;
                        }
                        gmean = gmean / n;
                        gymean = gymean / n;
                        let iv = inv[bc];
                        for ((d, gg), yy) in dst[base..base + hw].iter_mut().zip(grow).zip(yrow) {
                            *d = *d + iv * (*gg - gmean - *yy * gymean);
                        }
                    }
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                let xv = &nodes[x.0].value;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for ((d, s), v) in dst.iter_mut().zip(g).zip(xv) {
                        if *v > S::zero() {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::AvgPool2 => {
                let x = node.inputs[0];
                let (b, c, h, w) = dims4(&nodes[x.0].shape, "avg_pool2 input")?;
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let quarter = cast::<S>(0.25);
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bc in 0..b * c {
                        let src = bc * oh * ow;
                        let out = bc * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let share = g[src + oy * ow + ox] * quarter;
                                let i = out + (2 * oy) * w + 2 * ox;
                                dst[i] = dst[i] + share;
                                dst[i + 1] = dst[i + 1] + share;
                                dst[i + w] = dst[i + w] + share;
                                dst[i + w + 1] = dst[i + w + 1] + share;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool => {
                let x = node.inputs[0];
                let (b, c, h, w) = dims4(&nodes[x.0].shape, "global_avg_pool input")?;
                let hw = h * w;
                let n = cast::<S>(hw as f64);
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bc in 0..b * c {
                        let share = g[bc] / n;
                        for d in dst[bc * hw..(bc + 1) * hw].iter_mut() {
                            *d = *d + share;
                        }
                    }
                }
            }
            Op::Linear => {
                let x = node.inputs[0];
                let w = node.inputs[1];
                let bias = node.inputs[2];
                let (b, d) = dims2(&nodes[x.0].shape, "linear input")?;
                let c = node.shape[1];
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bi in 0..b {
                        for di in 0..d {
                            let mut acc = S::zero();
                            for ci in 0..c {
                                acc = acc + g[bi * c + ci] * wv[di * c + ci];
                            }
                            dst[bi * d + di] = dst[bi * d + di] + acc;
                        }
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, w) {
                    for di in 0..d {
                        for ci in 0..c {
                            let mut acc = S::zero();
                            for bi in 0..b {
                                acc = acc + xv[bi * d + di] * g[bi * c + ci];
                            }
                            dst[di * c + ci] = dst[di * c + ci] + acc;
                        }
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, bias) {
                    for bi in 0..b {
                        for ci in 0..c {
                            dst[ci] = dst[ci] + g[bi * c + ci];
                        }
                    }
                }
            }
            Op::Softmax => {
                let x = node.inputs[0];
                let m = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for ((drow, grow), yrow) in
                        dst.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m))
                    {
                        let mut dot = S::zero();
                        for (gg, yy) in grow.iter().zip(yrow) {
                            dot = dot + *gg * *yy;
                        }
                        for ((d, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + *yy * (*gg - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { labels } => {
                let x = node.inputs[0];
                let b = nodes[x.0].shape[0];
                let c = nodes[x.0].shape[1];
                let soft = &node.saved;
                let scale = g[0] / cast::<S>(b as f64);
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let ind = if ci == labels[bi] { S::one() } else { S::zero() };
                            dst[bi * c + ci] =
                                dst[bi * c + ci] + scale * (soft[bi * c + ci] - ind);
                        }
                    }
                }
            }
            Op::GatherRows { map } => {
                let x = node.inputs[0];
                let m = node.shape[1];
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for (i, src) in map.iter().enumerate() {
                        for (d, s) in dst[src * m..(src + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::PermuteWithinRows { perms } => {
                let x = node.inputs[0];
                let (b, m) = dims2(&node.shape, "permute output")?;
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for bi in 0..b {
                        for mi in 0..m {
                            let src = bi * m + perms[bi * m + mi];
                            dst[src] = dst[src] + g[bi * m + mi];
                        }
                    }
                }
            }
            Op::Mix { eta } => {
                let a = node.inputs[0];
                let b = node.inputs[1];
                let one_m = S::one() - *eta;
                if let Some(dst) = Self::input_grad(nodes, grads, a) {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d = *d + *eta * *s;
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, b) {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d = *d + one_m * *s;
                    }
                }
            }
            Op::Add => {
                for input in &node.inputs {
                    if let Some(dst) = Self::input_grad(nodes, grads, *input) {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::Mul => {
                let a = node.inputs[0];
                let b = node.inputs[1];
                let av = nodes[a.0].value.clone();
                let bv = nodes[b.0].value.clone();
                if let Some(dst) = Self::input_grad(nodes, grads, a) {
                    for ((d, s), v) in dst.iter_mut().zip(g).zip(&bv) {
                        *d = *d + *s * *v;
                    }
                }
                if let Some(dst) = Self::input_grad(nodes, grads, b) {
                    for ((d, s), v) in dst.iter_mut().zip(g).zip(&av) {
                        *d = *d + *s * *v;
                    }
                }
            }
            Op::Scale { factor } => {
                let x = node.inputs[0];
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d = *d + *factor * *s;
                    }
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                if let Some(dst) = Self::input_grad(nodes, grads, x) {
                    for d in dst.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t<S: Scalar>(shape: &[usize], data: &[f64]) -> Tensor<S> {
        Tensor::from_vec(shape, data.iter().map(|v| cast::<S>(*v)).collect()).unwrap()
    }

    /// Quadruple-nested-loop reference convolution, independent of the
    /// graph implementation.
    fn conv_reference(
        x: &[f64],
        k: &[f64],
        (b, ci, h, w): (usize, usize, usize, usize),
        (co, ksz): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - ksz) / stride + 1;
        let ow = (w + 2 * pad - ksz) / stride + 1;
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..ksz {
                                for kx in 0..ksz {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k[(((bi * co + o) * ci + c) * ksz + ky) * ksz + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f64 {
        // Tiny deterministic generator for test fixtures.
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_scalar_product_case() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t(&[1, 1, 1, 1], &[3.0])).unwrap();
        let k = g.leaf(&[1, 1, 1, 1, 1], vec![-0.5], false).unwrap();
        let y = g.conv2d_per_instance(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &[-1.5]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (0..2 * 5 * 5).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = g.leaf(&[1, 2, 5, 5], xs.clone(), false).unwrap();
        // one output channel per input channel, delta at the center
        let mut kv = vec![0.0; 2 * 2 * 3 * 3];
        kv[4] = 1.0; // out 0 reads channel 0
        kv[3 * 9 + 4] = 1.0; // out 1 reads channel 1
        let k = g.leaf(&[1, 2, 2, 3, 3], kv, false).unwrap();
        let y = g.conv2d_per_instance(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 5, 5]);
        for (a, b) in g.value(y).iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut state = 7u64;
        let (b, ci, h, w, co, k) = (2, 2, 5, 5, 3, 3);
        let xs: Vec<f64> = (0..b * ci * h * w).map(|_| lcg(&mut state)).collect();
        let ks: Vec<f64> = (0..b * co * ci * k * k).map(|_| lcg(&mut state)).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(&[b, ci, h, w], xs.clone(), false).unwrap();
            let kk = g.leaf(&[b, co, ci, k, k], ks.clone(), false).unwrap();
            let y = g.conv2d_per_instance(x, kk, stride, pad).unwrap();
            let want = conv_reference(&xs, &ks, (b, ci, h, w), (co, k), stride, pad);
            for (a, bb) in g.value(y).iter().zip(&want) {
                assert!((a - bb).abs() < 1e-6, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn conv_is_linear_in_kernels() {
        let mut state = 11u64;
        let xs: Vec<f64> = (0..2 * 4 * 4).map(|_| lcg(&mut state)).collect();
        let k1: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| lcg(&mut state)).collect();
        let k2: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| lcg(&mut state)).collect();
        let (a, b) = (0.7, -1.3);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 2, 4, 4], xs, false).unwrap();
        let v1 = g.leaf(&[1, 2, 2, 3, 3], k1, false).unwrap();
        let v2 = g.leaf(&[1, 2, 2, 3, 3], k2, false).unwrap();
        let s1 = g.scale(v1, a).unwrap();
        let s2 = g.scale(v2, b).unwrap();
        let ksum = g.add(s1, s2).unwrap();
        let lhs = g.conv2d_per_instance(x, ksum, 1, 1).unwrap();
        let y1 = g.conv2d_per_instance(x, v1, 1, 1).unwrap();
        let y2 = g.conv2d_per_instance(x, v2, 1, 1).unwrap();
        let y1s = g.scale(y1, a).unwrap();
        let y2s = g.scale(y2, b).unwrap();
        let rhs = g.add(y1s, y2s).unwrap();
        for (l, r) in g.value(lhs).iter().zip(g.value(rhs)) {
            assert!((l - r).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_per_instance_equals_singleton_batches_bitwise() {
        let mut state = 23u64;
        let (b, ci, h, w, co, k) = (3, 2, 4, 4, 2, 3);
        let xs: Vec<f64> = (0..b * ci * h * w).map(|_| lcg(&mut state)).collect();
        let ks: Vec<f64> = (0..b * co * ci * k * k).map(|_| lcg(&mut state)).collect();

        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[b, ci, h, w], xs.clone(), false).unwrap();
        let kk = g.leaf(&[b, co, ci, k, k], ks.clone(), false).unwrap();
        let y = g.conv2d_per_instance(x, kk, 1, 1).unwrap();
        let batched = g.value(y).to_vec();

        let per = batched.len() / b;
        for bi in 0..b {
            let mut g1 = Graph::<f64>::new();
            let x1 = g1
                .leaf(&[1, ci, h, w], xs[bi * ci * h * w..(bi + 1) * ci * h * w].to_vec(), false)
                .unwrap();
            let k1 = g1
                .leaf(
                    &[1, co, ci, k, k],
                    ks[bi * co * ci * k * k..(bi + 1) * co * ci * k * k].to_vec(),
                    false,
                )
                .unwrap();
            let y1 = g1.conv2d_per_instance(x1, k1, 1, 1).unwrap();
            assert_eq!(g1.value(y1), &batched[bi * per..(bi + 1) * per], "instance {bi}");
        }
    }

    #[test]
    fn conv_rejects_mismatched_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2, 3, 5, 5], vec![0.0; 150], false).unwrap();
        let k = g.leaf(&[1, 4, 3, 3, 3], vec![0.0; 108], false).unwrap();
        assert!(matches!(
            g.conv2d_per_instance(x, k, 1, 1),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 4], vec![0.0; 4], false).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x2 = g.leaf(&[1, 4], vec![(2.0f64).ln(), 0.0, 0.0, 0.0], false).unwrap();
        let y2 = g.softmax(x2).unwrap();
        let got = g.value(y2);
        for (a, b) in got.iter().zip(&[0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut state = 3u64;
        let logits: Vec<f64> = (0..12).map(|_| 3.0 * lcg(&mut state)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 17.25).collect();
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[3, 4], logits, false).unwrap();
        let b = g.leaf(&[3, 4], shifted, false).unwrap();
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        for (x, y) in g.value(ya).iter().zip(g.value(yb)) {
            assert!((x - y).abs() < 1e-7);
        }
        // rows sum to one
        for row in g.value(ya).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    /// Independent log-sum-exp cross-entropy, coded directly from the
    /// definition.
    fn ce_reference(logits: &[f64], labels: &[usize], c: usize) -> f64 {
        let b = labels.len();
        let mut total = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            let row = &logits[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / b as f64
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[2, 7], vec![0.0; 14], false).unwrap();
        let l = g.cross_entropy(x, &[3, 6]).unwrap();
        assert!((g.scalar_value(l).unwrap() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_vanishes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 3], vec![1e6, 0.0, 0.0], false).unwrap();
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.scalar_value(l).unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_reference_formula() {
        let mut state = 99u64;
        let logits: Vec<f64> = (0..4 * 5).map(|_| 2.0 * lcg(&mut state)).collect();
        let labels = [0usize, 3, 2, 4];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[4, 5], logits.clone(), false).unwrap();
        let l = g.cross_entropy(x, &labels).unwrap();
        let want = ce_reference(&logits, &labels, 5);
        assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 3], vec![0.0; 3], false).unwrap();
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y), &[2.5]);

        let c = g.leaf(&[2, 3, 2, 2], vec![0.75; 24], false).unwrap();
        let yc = g.global_avg_pool(c).unwrap();
        for v in g.value(yc) {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_gradient_spreads_uniformly() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 1, 2, 3], vec![1.0; 6], true).unwrap();
        let y = g.global_avg_pool(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let grads = g.grad(x).unwrap();
        let total: f64 = grads.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for v in grads {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_simple_product() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&[1], vec![2.0], true).unwrap();
        let x = g.leaf(&[1], vec![3.0], false).unwrap();
        let y = g.mul(w, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let u = g.leaf(&[2], vec![5.0, 5.0], true).unwrap();
        let l = g.sum(w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
        assert!(g.grad(u).is_none());
        let _ = u;
    }

    #[test]
    fn two_path_gradients_accumulate() {
        // loss = sum(w*x) + sum(w*z): the w gradient is x + z.
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&[2], vec![1.0, -1.0], true).unwrap();
        let x = g.leaf(&[2], vec![2.0, 3.0], false).unwrap();
        let z = g.leaf(&[2], vec![10.0, 20.0], false).unwrap();
        let p1 = g.mul(w, x).unwrap();
        let p2 = g.mul(w, z).unwrap();
        let s1 = g.sum(p1).unwrap();
        let s2 = g.sum(p2).unwrap();
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[12.0, 23.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            g.leaf(&[1], vec![f64::NAN], false),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn pad_template_point_and_column() {
        let mut g = Graph::<f64>::new();
        let point = g.leaf(&[1, 1, 1, 1], vec![5.0], false).unwrap();
        let p = g.pad_template(point, 3).unwrap();
        assert_eq!(g.value(p), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);

        let col = g.leaf(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0], false).unwrap();
        let pc = g.pad_template(col, 3).unwrap();
        assert_eq!(g.value(pc), &[0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0]);

        let row = g.leaf(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0], false).unwrap();
        let pr = g.pad_template(row, 3).unwrap();
        assert_eq!(g.value(pr), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);

        let dense_data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let dense = g.leaf(&[1, 1, 3, 3], dense_data.clone(), false).unwrap();
        let pd = g.pad_template(dense, 3).unwrap();
        assert_eq!(g.value(pd), dense_data.as_slice());
    }

    #[test]
    fn pad_template_rejects_illegal_shape() {
        let mut g = Graph::<f64>::new();
        let bad = g.leaf(&[1, 1, 2, 3], vec![0.0; 6], false).unwrap();
        assert!(matches!(g.pad_template(bad, 3), Err(Error::Dim(_))));
    }

    #[test]
    fn gather_rows_roundtrip_is_bitwise() {
        let mut state = 5u64;
        let data: Vec<f64> = (0..5 * 4).map(|_| lcg(&mut state)).collect();
        let map = [3usize, 0, 4, 1, 2];
        let mut inverse = [0usize; 5];
        for (i, &m) in map.iter().enumerate() {
            inverse[m] = i;
        }
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[5, 4], data.clone(), false).unwrap();
        let fwd = g.gather_rows(x, &map).unwrap();
        let back = g.gather_rows(fwd, &inverse).unwrap();
        assert_eq!(g.value(back), data.as_slice());
    }

    #[test]
    fn permute_within_rows_preserves_multiset() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 4], vec![0.7, 0.1, 0.1, 0.1], false).unwrap();
        let y = g.permute_within_rows(x, &[1, 2, 3, 0]).unwrap();
        assert_eq!(g.value(y), &[0.1, 0.1, 0.1, 0.7]);
    }

    #[test]
    fn permute_rejects_non_bijection() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1, 3], vec![1.0, 2.0, 3.0], false).unwrap();
        assert!(matches!(
            g.permute_within_rows(x, &[0, 0, 2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&[1, 4], vec![1.0, 0.0, 0.0, 0.0], false).unwrap();
        let b = g.leaf(&[1, 4], vec![0.0, 1.0, 0.0, 0.0], false).unwrap();
        let full = g.mix(a, b, 1.0).unwrap();
        assert_eq!(g.value(full), g.value(a));
        let none = g.mix(a, b, 0.0).unwrap();
        assert_eq!(g.value(none), g.value(b));
        let half = g.mix(a, b, 0.5).unwrap();
        assert_eq!(g.value(half), &[0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(g.mix(a, b, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_norm_standardizes_rows() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false)
            .unwrap();
        let y = g.channel_norm(x, 1e-5).unwrap();
        let out = g.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
