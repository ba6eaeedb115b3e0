//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Every forward pass builds a fresh [`Graph`]. Parameters enter as leaves
//! copied out of a [`ParamStore`]; inputs enter as non-differentiable leaves.
//! After computing a scalar loss outside the tape, seed the output gradient
//! with [`Graph::backward`] and collect parameter gradients.

use super::params::{ParamId, ParamStore};
use super::Tensor;

const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    k_t: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.in_ch * self.k_t * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Pointwise { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Frame { x: Var, kernel: usize, stride: usize },
    OverlapAdd { x: Var, stride: usize },
    Relu(Var),
    Sigmoid(Var),
    Prelu { x: Var, a: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    GlobalLayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Upsample { x: Var, ratio: usize },
    /// Convolution over per-image patch matrices. `x` is `None` for conv3d
    /// on raw video, whose input never needs a gradient.
    Conv { x: Option<Var>, w: Var, b: Var, cols: Vec<f32>, geom: ConvGeom, images: usize },
    PoolSeq { x: Var, batch: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update produced by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

pub struct Graph {
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
    training: bool,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the debug assertions above bound every access; callers pass
    // slices sized from the same dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), bn_updates: Vec::new(), training }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Adds a parameter leaf. Frozen parameters and buffers carry no gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// `[B, Cin, T] x [Cout, Cin] (+ [Cout]) -> [B, Cout, T]`
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "pointwise expects [B, C, T]");
        assert_eq!(ws[1], xs[1], "pointwise channel mismatch");
        let (bsz, cin, t) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let mut out = Tensor::zeros(&[bsz, cout, t]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let o = out.data_mut();
            if let Some(b) = b {
                let bv = self.value(b).data();
                for bi in 0..bsz {
                    for co in 0..cout {
                        o[(bi * cout + co) * t..(bi * cout + co + 1) * t].fill(bv[co]);
                    }
                }
            }
            for bi in 0..bsz {
                gemm(
                    cout,
                    cin,
                    t,
                    wv,
                    cin,
                    1,
                    &xv[bi * cin * t..],
                    t,
                    1,
                    if b.is_some() { 1.0 } else { 0.0 },
                    &mut o[bi * cout * t..],
                    t,
                );
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Pointwise { x, w, b }, needs)
    }

    /// Depthwise "same" convolution along time: `w` is `[C, K]` with odd `K`.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[0], xs[1]);
        assert!(ws[1] % 2 == 1, "depthwise kernel must be odd");
        let (bsz, c, t) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(&[bsz, c, t]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let o = out.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    let row = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    let orow = &mut o[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    if let Some(bv) = bv {
                        orow.fill(bv[ci]);
                    }
                    for ki in 0..k {
                        let wk = wv[ci * k + ki];
                        let shift = (ki as isize - half) * dilation as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((t as isize) - shift.max(0)).max(0) as usize;
                        for ti in lo..hi.max(lo) {
                            orow[ti] += wk * row[(ti as isize + shift) as usize];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Depthwise { x, w, b, dilation }, needs)
    }

    /// Slices `[B, n]` into overlapping frames `[B, kernel, T]`, `T = (n - kernel) / stride + 1`.
    pub fn frame(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, n) = (xs[0], xs[1]);
        assert!(n >= kernel);
        let t = (n - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, kernel, t]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for bi in 0..bsz {
                for ki in 0..kernel {
                    for ti in 0..t {
                        o[(bi * kernel + ki) * t + ti] = xv[bi * n + ti * stride + ki];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Frame { x, kernel, stride }, needs)
    }

    /// Overlap-adds frames `[B, K, T]` into `[B, len]`; samples past `len` are dropped.
    pub fn overlap_add(&mut self, x: Var, stride: usize, len: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, k, t) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[bsz, len]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for bi in 0..bsz {
                for ki in 0..k {
                    for ti in 0..t {
                        let pos = ti * stride + ki;
                        if pos < len {
                            o[bi * len + pos] += xv[(bi * k + ki) * t + ti];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::OverlapAdd { x, stride }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// PReLU with a single learnable slope `a` of shape `[1]`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Var {
        let slope = self.value(a).data()[0];
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let needs = self.needs(x) || self.needs(a);
        self.push(out, Op::Prelu { x, a }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(o, v)| *o += v);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(o, v)| *o *= v);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// Channel concatenation of `[B, C1, T]` and `[B, C2, T]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[2], "concat time mismatch");
        let (bsz, ca, cb, t) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Tensor::zeros(&[bsz, ca + cb, t]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let o = out.data_mut();
            for bi in 0..bsz {
                let dst = &mut o[bi * (ca + cb) * t..(bi + 1) * (ca + cb) * t];
                dst[..ca * t].copy_from_slice(&av[bi * ca * t..(bi + 1) * ca * t]);
                dst[ca * t..].copy_from_slice(&bv[bi * cb * t..(bi + 1) * cb * t]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    /// Global layer norm over channels and time of each example.
    pub fn global_layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, t) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&xs);
        let mut stats = Vec::with_capacity(bsz);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let be = self.value(beta).data();
            let o = out.data_mut();
            let n = (c * t) as f64;
            for bi in 0..bsz {
                let seg = &xv[bi * c * t..(bi + 1) * c * t];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
                let (mean, inv) = (mean as f32, inv as f32);
                stats.push((mean, inv));
                for ci in 0..c {
                    for ti in 0..t {
                        let idx = bi * c * t + ci * t + ti;
                        o[idx] = g[ci] * (xv[idx] - mean) * inv + be[ci];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GlobalLayerNorm { x, gamma, beta, stats }, needs)
    }

    /// Batch norm over batch and time. Training graphs use batch statistics
    /// and record a running-statistics update; others use the stored buffers.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, t) = (xs[0], xs[1], xs[2]);
        // Frozen layers always behave as in inference.
        let batch_stats = self.training && store.is_trainable_group_of(running.0);
        let (mean, inv_std) = if batch_stats {
            let xv = self.value(x).data();
            let n = (bsz * t) as f64;
            let mut mean = vec![0f32; c];
            let mut var = vec![0f32; c];
            for ci in 0..c {
                let mut s = 0f64;
                for bi in 0..bsz {
                    s += xv[(bi * c + ci) * t..(bi * c + ci + 1) * t].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / n;
                let mut ss = 0f64;
                for bi in 0..bsz {
                    ss += xv[(bi * c + ci) * t..(bi * c + ci + 1) * t]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
                mean[ci] = m as f32;
                var[ci] = (ss / n) as f32;
            }
            let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            self.bn_updates.push(BnUpdate {
                mean_id: running.0,
                var_id: running.1,
                batch_mean: mean.clone(),
                batch_var: var,
            });
            (mean, inv)
        } else {
            let mean = store.value(running.0).data().to_vec();
            let inv: Vec<f32> = store.value(running.1).data().iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            (mean, inv)
        };
        let mut out = Tensor::zeros(&xs);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let be = self.value(beta).data();
            let o = out.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    let base = (bi * c + ci) * t;
                    for ti in 0..t {
                        o[base + ti] = g[ci] * (xv[base + ti] - mean[ci]) * inv_std[ci] + be[ci];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, needs)
    }

    /// Linear interpolation along time by an integer factor, then truncation
    /// or edge padding to exactly `out_len` frames.
    pub fn upsample(&mut self, x: Var, ratio: usize, out_len: usize) -> Var {
        assert!(ratio >= 1);
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, l) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[bsz, c, out_len]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for j in 0..out_len {
                let (i0, i1, f) = interp_source(j, ratio, l);
                for row in 0..bsz * c {
                    o[row * out_len + j] = xv[row * l + i0] + f * (xv[row * l + i1] - xv[row * l + i0]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x, ratio }, needs)
    }

    /// 3-D convolution of single-channel video `[B, T, H, W]` with weights
    /// `[Cout, k_t * k * k]`, temporal stride 1, spatial stride `stride` and
    /// "same" padding. Output is per frame: `[B * T, Cout, Ho, Wo]`.
    pub fn conv3d(&mut self, video: &Tensor, w: Var, b: Var, k_t: usize, k: usize, stride: usize) -> Var {
        let vs = video.shape();
        assert_eq!(vs.len(), 4, "video must be [B, T, H, W]");
        let (bsz, t, h, wd) = (vs[0], vs[1], vs[2], vs[3]);
        let geom = ConvGeom {
            in_ch: 1,
            in_h: h,
            in_w: wd,
            k_t,
            k,
            stride,
            out_h: (h + 2 * (k / 2) - k) / stride + 1,
            out_w: (wd + 2 * (k / 2) - k) / stride + 1,
        };
        let images = bsz * t;
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![0f32; images * rows * ncol];
        let vv = video.data();
        let (pt, ps) = ((k_t / 2) as isize, (k / 2) as isize);
        for bi in 0..bsz {
            for ti in 0..t {
                let img = bi * t + ti;
                let cbase = img * rows * ncol;
                for dt in 0..k_t {
                    let st = ti as isize + dt as isize - pt;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    let frame = &vv[(bi * t + st as usize) * h * wd..];
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (dt * k + ki) * k + kj;
                            let dst = &mut cols[cbase + r * ncol..cbase + (r + 1) * ncol];
                            fill_patch_row(dst, frame, h, wd, &geom, ki, kj, ps);
                        }
                    }
                }
            }
        }
        let wv = self.value(w).data();
        let cout = self.value(w).dim(0);
        assert_eq!(self.value(w).dim(1), rows);
        let mut out = Tensor::zeros(&[images, cout, geom.out_h, geom.out_w]);
        conv_forward(&cols, wv, self.value(b).data(), out.data_mut(), images, cout, rows, ncol);
        let needs = self.needs(w) || self.needs(b);
        let cols = if needs { cols } else { Vec::new() };
        self.push(out, Op::Conv { x: None, w, b, cols, geom, images }, needs)
    }

    /// 2-D convolution of `[N, Cin, H, W]` with weights `[Cout, Cin * k * k]`,
    /// stride `stride` and padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (images, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let geom = ConvGeom {
            in_ch: cin,
            in_h: h,
            in_w: wd,
            k_t: 1,
            k,
            stride,
            out_h: (h + 2 * (k / 2) - k) / stride + 1,
            out_w: (wd + 2 * (k / 2) - k) / stride + 1,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![0f32; images * rows * ncol];
        {
            let xv = self.value(x).data();
            let ps = (k / 2) as isize;
            for img in 0..images {
                let cbase = img * rows * ncol;
                for ci in 0..cin {
                    let plane = &xv[(img * cin + ci) * h * wd..];
                    for ki in 0..k {
                        for kj in 0..k {
                            let r = (ci * k + ki) * k + kj;
                            let dst = &mut cols[cbase + r * ncol..cbase + (r + 1) * ncol];
                            fill_patch_row(dst, plane, h, wd, &geom, ki, kj, ps);
                        }
                    }
                }
            }
        }
        let cout = self.value(w).dim(0);
        assert_eq!(self.value(w).dim(1), rows);
        let mut out = Tensor::zeros(&[images, cout, geom.out_h, geom.out_w]);
        conv_forward(&cols, self.value(w).data(), self.value(b).data(), out.data_mut(), images, cout, rows, ncol);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if needs { cols } else { Vec::new() };
        self.push(out, Op::Conv { x: Some(x), w, b, cols, geom, images }, needs)
    }

    /// Global spatial average pooling of `[B * T, C, H, W]` into a sequence `[B, C, T]`.
    pub fn pool_to_sequence(&mut self, x: Var, batch: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (images, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(images % batch, 0);
        let t = images / batch;
        let mut out = Tensor::zeros(&[batch, c, t]);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for img in 0..images {
                let (bi, ti) = (img / t, img % t);
                for ci in 0..c {
                    let s: f32 = xv[(img * c + ci) * hw..(img * c + ci + 1) * hw].iter().sum();
                    o[(bi * c + ci) * t + ti] = s / hw as f32;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::PoolSeq { x, batch }, needs)
    }

    /// Runs reverse accumulation from `out` seeded with `grad`.
    pub fn backward(&mut self, out: Var, grad: Tensor) {
        assert_eq!(self.value(out).shape(), grad.shape());
        self.nodes[out.0].grad = Some(grad);
        for i in (0..=out.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = node.grad.as_ref() else { continue };
            backward_node(before, &node.op, &node.value, gy);
            if !matches!(node.op, Op::Param(_)) {
                node.grad = None;
            }
        }
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let Op::Param(id) = node.op {
                if let Some(g) = node.grad.take() {
                    out.push((id, g));
                }
            }
        }
        out
    }
}

/// Source indices and weight for output frame `j` of a linear upsampler.
fn interp_source(j: usize, ratio: usize, len: usize) -> (usize, usize, f32) {
    let jj = j.min(len * ratio - 1);
    let pos = ((jj as f64 + 0.5) / ratio as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (pos - i0 as f64) as f32)
}

#[allow(clippy::too_many_arguments)]
fn fill_patch_row(dst: &mut [f32], plane: &[f32], h: usize, w: usize, g: &ConvGeom, ki: usize, kj: usize, pad: isize) {
    for oh in 0..g.out_h {
        let ih = (oh * g.stride) as isize + ki as isize - pad;
        if ih < 0 || ih >= h as isize {
            continue;
        }
        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
        for ow in 0..g.out_w {
            let iw = (ow * g.stride) as isize + kj as isize - pad;
            if iw >= 0 && iw < w as isize {
                dst[oh * g.out_w + ow] = src[iw as usize];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(cols: &[f32], w: &[f32], b: &[f32], out: &mut [f32], images: usize, cout: usize, rows: usize, ncol: usize) {
    for img in 0..images {
        let o = &mut out[img * cout * ncol..(img + 1) * cout * ncol];
        for co in 0..cout {
            o[co * ncol..(co + 1) * ncol].fill(b[co]);
        }
        gemm(cout, rows, ncol, w, rows, 1, &cols[img * rows * ncol..], ncol, 1, 1.0, o, ncol);
    }
}

fn take_grad(nodes: &mut [Node], v: Var) -> Option<Tensor> {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
}

fn put_grad(nodes: &mut [Node], v: Var, g: Tensor) {
    nodes[v.0].grad = Some(g);
}

/// Accumulate into the gradient of `v`, if it needs one.
fn with_grad(nodes: &mut [Node], v: Var, f: impl FnOnce(&[Node], &mut [f32])) {
    if let Some(mut g) = take_grad(nodes, v) {
        f(nodes, g.data_mut());
        put_grad(nodes, v, g);
    }
}

fn backward_node(nodes: &mut [Node], op: &Op, y: &Tensor, gy: &Tensor) {
    let gyv = gy.data();
    match *op {
        Op::Leaf | Op::Param(_) => {}
        Op::Pointwise { x, w, b } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, cin, t) = (xs[0], xs[1], xs[2]);
            let cout = nodes[w.0].value.dim(0);
            if let Some(b) = b {
                with_grad(nodes, b, |_, gb| {
                    for bi in 0..bsz {
                        for co in 0..cout {
                            gb[co] += gyv[(bi * cout + co) * t..(bi * cout + co + 1) * t].iter().sum::<f32>();
                        }
                    }
                });
            }
            with_grad(nodes, w, |nodes, gw| {
                let xv = nodes[x.0].value.data();
                for bi in 0..bsz {
                    gemm(cout, t, cin, &gyv[bi * cout * t..], t, 1, &xv[bi * cin * t..], 1, t, 1.0, gw, cin);
                }
            });
            with_grad(nodes, x, |nodes, gx| {
                let wv = nodes[w.0].value.data();
                for bi in 0..bsz {
                    gemm(cin, cout, t, wv, 1, cin, &gyv[bi * cout * t..], t, 1, 1.0, &mut gx[bi * cin * t..], t);
                }
            });
        }
        Op::Depthwise { x, w, b, dilation } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, c, t) = (xs[0], xs[1], xs[2]);
            let k = nodes[w.0].value.dim(1);
            let half = (k / 2) as isize;
            let range = |ki: usize| {
                let shift = (ki as isize - half) * dilation as isize;
                let lo = (-shift).max(0) as usize;
                let hi = ((t as isize) - shift.max(0)).max(0) as usize;
                (shift, lo, hi.max(lo))
            };
            if let Some(b) = b {
                with_grad(nodes, b, |_, gb| {
                    for bi in 0..bsz {
                        for ci in 0..c {
                            gb[ci] += gyv[(bi * c + ci) * t..(bi * c + ci + 1) * t].iter().sum::<f32>();
                        }
                    }
                });
            }
            with_grad(nodes, w, |nodes, gw| {
                let xv = nodes[x.0].value.data();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let row = &xv[(bi * c + ci) * t..];
                        let g = &gyv[(bi * c + ci) * t..];
                        for ki in 0..k {
                            let (shift, lo, hi) = range(ki);
                            let mut s = 0f32;
                            for ti in lo..hi {
                                s += g[ti] * row[(ti as isize + shift) as usize];
                            }
                            gw[ci * k + ki] += s;
                        }
                    }
                }
            });
            with_grad(nodes, x, |nodes, gx| {
                let wv = nodes[w.0].value.data();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ki in 0..k {
                            let wk = wv[ci * k + ki];
                            let (shift, lo, hi) = range(ki);
                            for ti in lo..hi {
                                gx[base + (ti as isize + shift) as usize] += wk * gyv[base + ti];
                            }
                        }
                    }
                }
            });
        }
        Op::Frame { x, kernel, stride } => {
            let n = nodes[x.0].value.dim(1);
            let (bsz, t) = (y.dim(0), y.dim(2));
            with_grad(nodes, x, |_, gx| {
                for bi in 0..bsz {
                    for ki in 0..kernel {
                        for ti in 0..t {
                            gx[bi * n + ti * stride + ki] += gyv[(bi * kernel + ki) * t + ti];
                        }
                    }
                }
            });
        }
        Op::OverlapAdd { x, stride } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, k, t) = (xs[0], xs[1], xs[2]);
            let len = y.dim(1);
            with_grad(nodes, x, |_, gx| {
                for bi in 0..bsz {
                    for ki in 0..k {
                        for ti in 0..t {
                            let pos = ti * stride + ki;
                            if pos < len {
                                gx[(bi * k + ki) * t + ti] += gyv[bi * len + pos];
                            }
                        }
                    }
                }
            });
        }
        Op::Relu(x) => {
            let yv = y.data();
            with_grad(nodes, x, |_, gx| {
                for i in 0..gyv.len() {
                    if yv[i] > 0.0 {
                        gx[i] += gyv[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let yv = y.data();
            with_grad(nodes, x, |_, gx| {
                for i in 0..gyv.len() {
                    gx[i] += gyv[i] * yv[i] * (1.0 - yv[i]);
                }
            });
        }
        Op::Prelu { x, a } => {
            let slope = nodes[a.0].value.data()[0];
            with_grad(nodes, a, |nodes, ga| {
                let xv = nodes[x.0].value.data();
                let mut s = 0f32;
                for i in 0..gyv.len() {
                    if xv[i] < 0.0 {
                        s += gyv[i] * xv[i];
                    }
                }
                ga[0] += s;
            });
            with_grad(nodes, x, |nodes, gx| {
                // Gradient taken out of the node, so the value is still readable.
                let xv = nodes[x.0].value.data();
                for i in 0..gyv.len() {
                    gx[i] += if xv[i] < 0.0 { slope * gyv[i] } else { gyv[i] };
                }
            });
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                with_grad(nodes, v, |_, g| g.iter_mut().zip(gyv).for_each(|(g, d)| *g += d));
            }
        }
        Op::Mul(a, b) => {
            with_grad(nodes, a, |nodes, ga| {
                let bv = nodes[b.0].value.data();
                for i in 0..gyv.len() {
                    ga[i] += gyv[i] * bv[i];
                }
            });
            with_grad(nodes, b, |nodes, gb| {
                let av = nodes[a.0].value.data();
                for i in 0..gyv.len() {
                    gb[i] += gyv[i] * av[i];
                }
            });
        }
        Op::Concat(a, b) => {
            let s = nodes[a.0].value.shape().to_vec();
            let (bsz, ca, t) = (s[0], s[1], s[2]);
            let cb = nodes[b.0].value.dim(1);
            let ctot = ca + cb;
            with_grad(nodes, a, |_, ga| {
                for bi in 0..bsz {
                    let src = &gyv[bi * ctot * t..bi * ctot * t + ca * t];
                    ga[bi * ca * t..(bi + 1) * ca * t].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            });
            with_grad(nodes, b, |_, gb| {
                for bi in 0..bsz {
                    let src = &gyv[bi * ctot * t + ca * t..(bi + 1) * ctot * t];
                    gb[bi * cb * t..(bi + 1) * cb * t].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                }
            });
        }
        Op::GlobalLayerNorm { x, gamma, beta, ref stats } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, c, t) = (xs[0], xs[1], xs[2]);
            let xhat = |xv: &[f32], idx: usize, bi: usize| (xv[idx] - stats[bi].0) * stats[bi].1;
            with_grad(nodes, gamma, |nodes, gg| {
                let xv = nodes[x.0].value.data();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let mut s = 0f32;
                        for ti in 0..t {
                            let idx = (bi * c + ci) * t + ti;
                            s += gyv[idx] * xhat(xv, idx, bi);
                        }
                        gg[ci] += s;
                    }
                }
            });
            with_grad(nodes, beta, |_, gb| {
                for bi in 0..bsz {
                    for ci in 0..c {
                        gb[ci] += gyv[(bi * c + ci) * t..(bi * c + ci + 1) * t].iter().sum::<f32>();
                    }
                }
            });
            with_grad(nodes, x, |nodes, gx| {
                let xv = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                let n = (c * t) as f64;
                for bi in 0..bsz {
                    let mut m1 = 0f64;
                    let mut m2 = 0f64;
                    for ci in 0..c {
                        for ti in 0..t {
                            let idx = (bi * c + ci) * t + ti;
                            let d = (gyv[idx] * g[ci]) as f64;
                            m1 += d;
                            m2 += d * xhat(xv, idx, bi) as f64;
                        }
                    }
                    let (m1, m2) = ((m1 / n) as f32, (m2 / n) as f32);
                    let inv = stats[bi].1;
                    for ci in 0..c {
                        for ti in 0..t {
                            let idx = (bi * c + ci) * t + ti;
                            gx[idx] += inv * (gyv[idx] * g[ci] - m1 - xhat(xv, idx, bi) * m2);
                        }
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, ref mean, ref inv_std, batch_stats } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, c, t) = (xs[0], xs[1], xs[2]);
            let mut dg = vec![0f64; c];
            let mut db = vec![0f64; c];
            {
                let xv = nodes[x.0].value.data();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            let xh = (xv[base + ti] - mean[ci]) * inv_std[ci];
                            dg[ci] += (gyv[base + ti] * xh) as f64;
                            db[ci] += gyv[base + ti] as f64;
                        }
                    }
                }
            }
            with_grad(nodes, gamma, |_, gg| gg.iter_mut().zip(&dg).for_each(|(a, b)| *a += *b as f32));
            with_grad(nodes, beta, |_, gb| gb.iter_mut().zip(&db).for_each(|(a, b)| *a += *b as f32));
            with_grad(nodes, x, |nodes, gx| {
                let xv = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                let n = (bsz * t) as f32;
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        let inv = inv_std[ci];
                        if batch_stats {
                            let m1 = db[ci] as f32 * g[ci] / n;
                            let m2 = dg[ci] as f32 * g[ci] / n;
                            for ti in 0..t {
                                let xh = (xv[base + ti] - mean[ci]) * inv;
                                gx[base + ti] += inv * (gyv[base + ti] * g[ci] - m1 - xh * m2);
                            }
                        } else {
                            for ti in 0..t {
                                gx[base + ti] += gyv[base + ti] * g[ci] * inv;
                            }
                        }
                    }
                }
            });
        }
        Op::Upsample { x, ratio } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (bsz, c, l) = (xs[0], xs[1], xs[2]);
            let out_len = y.dim(2);
            with_grad(nodes, x, |_, gx| {
                for j in 0..out_len {
                    let (i0, i1, f) = interp_source(j, ratio, l);
                    for row in 0..bsz * c {
                        let d = gyv[row * out_len + j];
                        gx[row * l + i0] += (1.0 - f) * d;
                        gx[row * l + i1] += f * d;
                    }
                }
            });
        }
        Op::Conv { x, w, b, ref cols, geom, images } => {
            let cout = nodes[w.0].value.dim(0);
            let (rows, ncol) = (geom.rows(), geom.cols());
            with_grad(nodes, b, |_, gb| {
                for img in 0..images {
                    for co in 0..cout {
                        let base = (img * cout + co) * ncol;
                        gb[co] += gyv[base..base + ncol].iter().sum::<f32>();
                    }
                }
            });
            with_grad(nodes, w, |_, gw| {
                for img in 0..images {
                    gemm(cout, ncol, rows, &gyv[img * cout * ncol..], ncol, 1, &cols[img * rows * ncol..], 1, ncol, 1.0, gw, rows);
                }
            });
            if let Some(x) = x {
                with_grad(nodes, x, |nodes, gx| {
                    let wv = nodes[w.0].value.data();
                    let mut dcols = vec![0f32; rows * ncol];
                    let (h, wd, k) = (geom.in_h, geom.in_w, geom.k);
                    let pad = (k / 2) as isize;
                    for img in 0..images {
                        gemm(rows, cout, ncol, wv, 1, rows, &gyv[img * cout * ncol..], ncol, 1, 0.0, &mut dcols, ncol);
                        for ci in 0..geom.in_ch {
                            let plane = &mut gx[(img * geom.in_ch + ci) * h * wd..(img * geom.in_ch + ci + 1) * h * wd];
                            for ki in 0..k {
                                for kj in 0..k {
                                    let r = (ci * k + ki) * k + kj;
                                    let src = &dcols[r * ncol..(r + 1) * ncol];
                                    for oh in 0..geom.out_h {
                                        let ih = (oh * geom.stride) as isize + ki as isize - pad;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for ow in 0..geom.out_w {
                                            let iw = (ow * geom.stride) as isize + kj as isize - pad;
                                            if iw >= 0 && iw < wd as isize {
                                                plane[ih as usize * wd + iw as usize] += src[oh * geom.out_w + ow];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::PoolSeq { x, batch } => {
            let xs = nodes[x.0].value.shape().to_vec();
            let (images, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
            let t = images / batch;
            with_grad(nodes, x, |_, gx| {
                for img in 0..images {
                    let (bi, ti) = (img / t, img % t);
                    for ci in 0..c {
                        let d = gyv[(bi * c + ci) * t + ti] / hw as f32;
                        gx[(img * c + ci) * hw..(img * c + ci + 1) * hw].iter_mut().for_each(|g| *g += d);
                    }
                }
            });
        }
    }
}
