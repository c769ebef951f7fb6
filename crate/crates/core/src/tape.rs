//! Reverse-mode autodiff on an append-only tape.
//!
//! Each differentiable op records its inputs and enough cached state to run
//! its backward rule. `backward` walks the tape once in reverse execution
//! order, so every op's adjoint is applied exactly once. All arithmetic is
//! f64 with fixed iteration order: the same inputs produce bit-identical
//! outputs and gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k]·[k,n] -> [m,n]
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// [g,m,k]·[g,k,n] -> [g,m,n]
    Bmm { a: usize, b: usize, g: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// x[.., d] + v[d]
    AddRowVec { a: usize, v: usize, d: usize },
    Gelu { a: usize },
    SoftmaxLastDim { a: usize, d: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, d: usize, eps: f64 },
    Conv3d { x: usize, k: usize, bias: usize, stride: [usize; 3] },
    Mse { a: usize, b: usize },
    SumAll { a: usize },
    Reshape { a: usize },
    /// [a,b,d] -> [b,a,d]
    Transpose01 { a: usize, d0: usize, d1: usize, d2: usize },
    /// [g,m,n] -> [g,n,m]
    TransposeLast2 { a: usize, g: usize, m: usize, n: usize },
    /// [b,l,d] -> [b*h, l, d/h]
    HeadsSplit { a: usize, b: usize, l: usize, d: usize, h: usize },
    /// inverse of HeadsSplit
    HeadsMerge { a: usize, b: usize, l: usize, dh: usize, h: usize },
    /// [t,n,d] -> [t,d], mean over axis 1
    MeanAxis1 { a: usize, t: usize, n: usize, d: usize },
    /// [t,d] -> [t,n,d]
    RepeatAxis1 { a: usize, t: usize, n: usize, d: usize },
    /// per-position dot over the last axis: [t,n,d]x[t,n,d] -> [t,n]
    DotLastDim { a: usize, b: usize, d: usize },
    /// out[t] = in[t-1], zeros at t = 0
    ShiftFrames { a: usize, t: usize, nd: usize },
    /// masked (t,n) positions replaced by an embedding vector
    MaskReplace { a: usize, emb: usize, mask: Vec<bool>, d: usize },
    /// pad along axis 0 to `to` frames by repeating the last frame
    PadFramesRepeat { a: usize, t: usize, to: usize, nd: usize },
    /// repeat each frame r times along axis 0, truncate to `target`
    UpsampleFrames { a: usize, f: usize, r: usize, target: usize, nd: usize },
    /// mean of the selected flat indices -> scalar
    GatherMean { a: usize, idx: Vec<usize> },
    /// cross entropy of softmax(logits) against a fixed distribution
    SoftmaxCe { a: usize, target: Vec<f64>, prob: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite output of {op:?}"
        );
        self.nodes.push(Node { op, shape, data, grad: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node holds a valid tensor")
    }

    /// Gradient buffer of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, m, k, n }, vec![m, n], out))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            matmul_into(
                &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Op::Bmm { a: a.0, b: b.0, g, m, k, n }, vec![g, m, n], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape("add", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape("sub", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, shape, out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale { a: a.0, c }, shape, out)
    }

    pub fn add_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let d = *self.nodes[a.0].shape.last().unwrap();
        if self.nodes[v.0].shape != [d] {
            return Err(Error::shape(
                "add_rowvec",
                format!("{:?} + {:?}", self.nodes[a.0].shape, self.nodes[v.0].shape),
            ));
        }
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.nodes[v.0].data[i % d])
            .collect();
        Ok(self.push(Op::AddRowVec { a: a.0, v: v.0, d }, shape, out))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        self.push(Op::Gelu { a: a.0 }, shape, out)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        self.push(Op::SoftmaxLastDim { a: a.0, d }, shape, out)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.nodes[a.0].shape.last().unwrap();
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.nodes[a.0].shape, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            ));
        }
        let shape = self.nodes[a.0].shape.clone();
        let numel = self.nodes[a.0].data.len();
        let mut out = vec![0.0; numel];
        for (xs, os) in self.nodes[a.0].data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                os[j] = (xs[j] - mean) * inv * self.nodes[gamma.0].data[j]
                    + self.nodes[beta.0].data[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, d, eps },
            shape,
            out,
        ))
    }

    /// Valid (no padding) strided 3D convolution.
    /// x: [T,H,W,Cin], kernel: [kT,kH,kW,Cin,Cout], bias: [Cout].
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Var, stride: [usize; 3]) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if sx.len() != 4 || sk.len() != 5 || sx[3] != sk[3] {
            return Err(Error::shape("conv3d", format!("input {sx:?}, kernel {sk:?}")));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Usage(format!("conv3d stride must be >= 1, got {stride:?}")));
        }
        for ax in 0..3 {
            if sk[ax] > sx[ax] {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel {sk:?} larger than input {sx:?} on axis {ax}"),
                ));
            }
        }
        let cout = sk[4];
        if self.nodes[bias.0].shape != [cout] {
            return Err(Error::shape(
                "conv3d",
                format!("bias {:?}, expected [{cout}]", self.nodes[bias.0].shape),
            ));
        }
        let os: Vec<usize> = (0..3).map(|ax| (sx[ax] - sk[ax]) / stride[ax] + 1).collect();
        let out_shape = vec![os[0], os[1], os[2], cout];
        let mut out = vec![0.0; os[0] * os[1] * os[2] * cout];
        let (cin, kt, kh, kw) = (sx[3], sk[0], sk[1], sk[2]);
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut o = 0;
        for ot in 0..os[0] {
            for oh in 0..os[1] {
                for ow in 0..os[2] {
                    for co in 0..cout {
                        let mut acc = bd[co];
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let xi = (((ot * stride[0] + dt) * sx[1]
                                        + (oh * stride[1] + dh))
                                        * sx[2]
                                        + (ow * stride[2] + dw))
                                        * cin;
                                    let ki = (((dt * kh + dh) * kw + dw) * cin) * cout + co;
                                    for ci in 0..cin {
                                        acc += xd[xi + ci] * kd[ki + ci * cout];
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
        Ok(self.push(Op::Conv3d { x: x.0, k: kernel.0, bias: bias.0, stride }, out_shape, out))
    }

    /// Mean squared error -> scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape("mse", format!("{sa:?} vs {sb:?}")));
        }
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::Mse { a: a.0, b: b.0 }, vec![1], vec![s / n]);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::SumAll { a: a.0 }, vec![1], vec![s])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            ));
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(Op::Reshape { a: a.0 }, shape, data))
    }

    /// [a,b,d] -> [b,a,d]
    pub fn transpose01(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("transpose01", format!("{s:?}")));
        }
        let (d0, d1, d2) = (s[0], s[1], s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let from = (i * d1 + j) * d2;
                let to = (j * d0 + i) * d2;
                out[to..to + d2].copy_from_slice(&src[from..from + d2]);
            }
        }
        Ok(self.push(Op::Transpose01 { a: a.0, d0, d1, d2 }, vec![d1, d0, d2], out))
    }

    /// [g,m,n] -> [g,n,m]
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("transpose_last2", format!("{s:?}")));
        }
        let (g, m, n) = (s[0], s[1], s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for i in 0..g {
            for r in 0..m {
                for c in 0..n {
                    out[(i * n + c) * m + r] = src[(i * m + r) * n + c];
                }
            }
        }
        Ok(self.push(Op::TransposeLast2 { a: a.0, g, m, n }, vec![g, n, m], out))
    }

    /// [b,l,d] -> [b*h, l, d/h]
    pub fn heads_split(&mut self, a: Var, h: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 || s[2] % h != 0 {
            return Err(Error::shape("heads_split", format!("{s:?} with {h} heads")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / h;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for li in 0..l {
                    let from = (bi * l + li) * d + hi * dh;
                    let to = (((bi * h + hi) * l) + li) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(Op::HeadsSplit { a: a.0, b, l, d, h }, vec![b * h, l, dh], out))
    }

    /// [b*h, l, dh] -> [b, l, h*dh]
    pub fn heads_merge(&mut self, a: Var, h: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 || s[0] % h != 0 {
            return Err(Error::shape("heads_merge", format!("{s:?} with {h} heads")));
        }
        let (bh, l, dh) = (s[0], s[1], s[2]);
        let b = bh / h;
        let d = h * dh;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for li in 0..l {
                    let from = (((bi * h + hi) * l) + li) * dh;
                    let to = (bi * l + li) * d + hi * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.push(Op::HeadsMerge { a: a.0, b, l, dh, h }, vec![b, l, d], out))
    }

    /// [t,n,d] -> [t,d]
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("mean_axis1", format!("{s:?}")));
        }
        let (t, n, d) = (s[0], s[1], s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            for ni in 0..n {
                let base = (ti * n + ni) * d;
                for di in 0..d {
                    out[ti * d + di] += src[base + di];
                }
            }
            for di in 0..d {
                out[ti * d + di] /= n as f64;
            }
        }
        Ok(self.push(Op::MeanAxis1 { a: a.0, t, n, d }, vec![t, d], out))
    }

    /// [t,d] -> [t,n,d]
    pub fn repeat_axis1(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::shape("repeat_axis1", format!("{s:?}")));
        }
        let (t, d) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; t * n * d];
        for ti in 0..t {
            for ni in 0..n {
                out[(ti * n + ni) * d..(ti * n + ni + 1) * d]
                    .copy_from_slice(&src[ti * d..(ti + 1) * d]);
            }
        }
        Ok(self.push(Op::RepeatAxis1 { a: a.0, t, n, d }, vec![t, n, d], out))
    }

    /// [t,n,d] x [t,n,d] -> [t,n]
    pub fn dot_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb || sa.len() != 3 {
            return Err(Error::shape("dot_lastdim", format!("{sa:?} vs {sb:?}")));
        }
        let (t, n, d) = (sa[0], sa[1], sa[2]);
        let mut out = vec![0.0; t * n];
        for i in 0..t * n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.nodes[a.0].data[i * d + j] * self.nodes[b.0].data[i * d + j];
            }
            out[i] = acc;
        }
        Ok(self.push(Op::DotLastDim { a: a.0, b: b.0, d }, vec![t, n], out))
    }

    /// out[0] = 0, out[t] = in[t-1] for a rank-3 [t,n,d] input.
    pub fn shift_frames(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("shift_frames", format!("{s:?}")));
        }
        let (t, nd) = (s[0], s[1] * s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        if t > 1 {
            out[nd..].copy_from_slice(&src[..(t - 1) * nd]);
        }
        Ok(self.push(Op::ShiftFrames { a: a.0, t, nd }, s, out))
    }

    /// Replace masked (t,n) positions of a [t,n,d] grid with `emb` [d].
    pub fn mask_replace(&mut self, a: Var, mask: &[bool], emb: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::shape("mask_replace", format!("{s:?}")));
        }
        let (t, n, d) = (s[0], s[1], s[2]);
        if mask.len() != t * n {
            return Err(Error::shape(
                "mask_replace",
                format!("mask length {} for {t}x{n} grid", mask.len()),
            ));
        }
        if self.nodes[emb.0].shape != [d] {
            return Err(Error::shape(
                "mask_replace",
                format!("embedding {:?}, expected [{d}]", self.nodes[emb.0].shape),
            ));
        }
        let mut out = self.nodes[a.0].data.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * d..(i + 1) * d].copy_from_slice(&self.nodes[emb.0].data);
            }
        }
        Ok(self.push(Op::MaskReplace { a: a.0, emb: emb.0, mask: mask.to_vec(), d }, s, out))
    }

    /// Pad a [t,n,d] grid to `to` frames by repeating the last frame.
    pub fn pad_frames_repeat(&mut self, a: Var, to: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 || to < s[0] {
            return Err(Error::shape("pad_frames_repeat", format!("{s:?} -> {to} frames")));
        }
        let (t, nd) = (s[0], s[1] * s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(to * nd);
        out.extend_from_slice(src);
        for _ in t..to {
            out.extend_from_slice(&src[(t - 1) * nd..]);
        }
        Ok(self.push(
            Op::PadFramesRepeat { a: a.0, t, to, nd },
            vec![to, s[1], s[2]],
            out,
        ))
    }

    /// Repeat each of f frames r times along axis 0, truncated to `target`.
    pub fn upsample_frames(&mut self, a: Var, r: usize, target: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 || target > s[0] * r || target == 0 {
            return Err(Error::shape(
                "upsample_frames",
                format!("{s:?} x{r} -> {target} frames"),
            ));
        }
        let (f, nd) = (s[0], s[1] * s[2]);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(target * nd);
        for t in 0..target {
            let from = (t / r) * nd;
            out.extend_from_slice(&src[from..from + nd]);
        }
        Ok(self.push(
            Op::UpsampleFrames { a: a.0, f, r, target, nd },
            vec![target, s[1], s[2]],
            out,
        ))
    }

    /// Mean of the values at `idx` (flat indices) -> scalar.
    pub fn gather_mean(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::Usage("gather_mean over empty index set".into()));
        }
        let n = self.nodes[a.0].data.len();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Usage(format!("gather_mean index out of range (len {n})")));
        }
        let s: f64 = idx.iter().map(|&i| self.nodes[a.0].data[i]).sum();
        let v = s / idx.len() as f64;
        Ok(self.push(Op::GatherMean { a: a.0, idx: idx.to_vec() }, vec![1], vec![v]))
    }

    /// Cross entropy of softmax(logits) against a fixed target distribution.
    pub fn softmax_ce(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let n = self.nodes[logits.0].data.len();
        if target.len() != n {
            return Err(Error::shape(
                "softmax_ce",
                format!("logits len {n}, target len {}", target.len()),
            ));
        }
        let mut prob = self.nodes[logits.0].data.clone();
        softmax_row(&mut prob);
        let loss: f64 = prob
            .iter()
            .zip(target)
            .map(|(p, t)| if *t > 0.0 { -t * p.max(1e-300).ln() } else { 0.0 })
            .sum();
        Ok(self.push(
            Op::SoftmaxCe { a: logits.0, target: target.to_vec(), prob },
            vec![1],
            vec![loss],
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills every node's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.data.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let a_data = self.nodes[a].data.clone();
                    let b_data = self.nodes[b].data.clone();
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += grad[r * n + c] * b_data[p * n + c];
                            }
                            self.nodes[a].grad[r * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += a_data[r * k + p] * grad[r * n + c];
                            }
                            self.nodes[b].grad[p * n + c] += acc;
                        }
                    }
                }
                Op::Bmm { a, b, g, m, k, n } => {
                    let a_data = self.nodes[a].data.clone();
                    let b_data = self.nodes[b].data.clone();
                    for bi in 0..g {
                        let go = &grad[bi * m * n..(bi + 1) * m * n];
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += go[r * n + c] * b_data[bi * k * n + p * n + c];
                                }
                                self.nodes[a].grad[bi * m * k + r * k + p] += acc;
                            }
                        }
                        for p in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += a_data[bi * m * k + r * k + p] * go[r * n + c];
                                }
                                self.nodes[b].grad[bi * k * n + p * n + c] += acc;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    axpy(&mut self.nodes[a].grad, &grad, 1.0);
                    axpy(&mut self.nodes[b].grad, &grad, 1.0);
                }
                Op::Sub { a, b } => {
                    axpy(&mut self.nodes[a].grad, &grad, 1.0);
                    axpy(&mut self.nodes[b].grad, &grad, -1.0);
                }
                Op::Scale { a, c } => {
                    axpy(&mut self.nodes[a].grad, &grad, c);
                }
                Op::AddRowVec { a, v, d } => {
                    axpy(&mut self.nodes[a].grad, &grad, 1.0);
                    for (j, g) in grad.iter().enumerate() {
                        self.nodes[v].grad[j % d] += g;
                    }
                }
                Op::Gelu { a } => {
                    let a_data = self.nodes[a].data.clone();
                    for (j, g) in grad.iter().enumerate() {
                        self.nodes[a].grad[j] += g * gelu_bwd(a_data[j]);
                    }
                }
                Op::SoftmaxLastDim { a, d } => {
                    let out = self.nodes[i].data.clone();
                    for (row, (os, gs)) in out.chunks(d).zip(grad.chunks(d)).enumerate() {
                        let dot: f64 = os.iter().zip(gs).map(|(o, g)| o * g).sum();
                        for j in 0..d {
                            self.nodes[a].grad[row * d + j] += os[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { a, gamma, beta, d, eps } => {
                    let x_data = self.nodes[a].data.clone();
                    let gamma_data = self.nodes[gamma].data.clone();
                    let rows = x_data.len() / d;
                    for r in 0..rows {
                        let xs = &x_data[r * d..(r + 1) * d];
                        let gs = &grad[r * d..(r + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var =
                            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|x| (x - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            self.nodes[gamma].grad[j] += gs[j] * xhat[j];
                            self.nodes[beta].grad[j] += gs[j];
                            dxhat[j] = gs[j] * gamma_data[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum();
                        let df = d as f64;
                        for j in 0..d {
                            self.nodes[a].grad[r * d + j] += inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::Conv3d { x, k, bias, stride } => {
                    let sx = self.nodes[x].shape.clone();
                    let sk = self.nodes[k].shape.clone();
                    let so = self.nodes[i].shape.clone();
                    let x_data = self.nodes[x].data.clone();
                    let k_data = self.nodes[k].data.clone();
                    let (cin, cout) = (sx[3], sk[4]);
                    let (kt, kh, kw) = (sk[0], sk[1], sk[2]);
                    let mut o = 0;
                    for ot in 0..so[0] {
                        for oh in 0..so[1] {
                            for ow in 0..so[2] {
                                for co in 0..cout {
                                    let g = grad[o];
                                    o += 1;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    self.nodes[bias].grad[co] += g;
                                    for dt in 0..kt {
                                        for dh in 0..kh {
                                            for dw in 0..kw {
                                                let xi = (((ot * stride[0] + dt) * sx[1]
                                                    + (oh * stride[1] + dh))
                                                    * sx[2]
                                                    + (ow * stride[2] + dw))
                                                    * cin;
                                                let ki =
                                                    (((dt * kh + dh) * kw + dw) * cin) * cout + co;
                                                for ci in 0..cin {
                                                    self.nodes[k].grad[ki + ci * cout] +=
                                                        g * x_data[xi + ci];
                                                    self.nodes[x].grad[xi + ci] +=
                                                        g * k_data[ki + ci * cout];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let a_data = self.nodes[a].data.clone();
                    let b_data = self.nodes[b].data.clone();
                    let n = a_data.len() as f64;
                    let g = grad[0] * 2.0 / n;
                    for j in 0..a_data.len() {
                        let diff = a_data[j] - b_data[j];
                        self.nodes[a].grad[j] += g * diff;
                        self.nodes[b].grad[j] -= g * diff;
                    }
                }
                Op::SumAll { a } => {
                    let g = grad[0];
                    for v in self.nodes[a].grad.iter_mut() {
                        *v += g;
                    }
                }
                Op::Reshape { a } => {
                    axpy(&mut self.nodes[a].grad, &grad, 1.0);
                }
                Op::Transpose01 { a, d0, d1, d2 } => {
                    for i0 in 0..d0 {
                        for j0 in 0..d1 {
                            let from = (j0 * d0 + i0) * d2;
                            let to = (i0 * d1 + j0) * d2;
                            for c in 0..d2 {
                                self.nodes[a].grad[to + c] += grad[from + c];
                            }
                        }
                    }
                }
                Op::TransposeLast2 { a, g, m, n } => {
                    for i0 in 0..g {
                        for r in 0..m {
                            for c in 0..n {
                                self.nodes[a].grad[(i0 * m + r) * n + c] +=
                                    grad[(i0 * n + c) * m + r];
                            }
                        }
                    }
                }
                Op::HeadsSplit { a, b, l, d, h } => {
                    let dh = d / h;
                    for bi in 0..b {
                        for hi in 0..h {
                            for li in 0..l {
                                let to = (bi * l + li) * d + hi * dh;
                                let from = (((bi * h + hi) * l) + li) * dh;
                                for c in 0..dh {
                                    self.nodes[a].grad[to + c] += grad[from + c];
                                }
                            }
                        }
                    }
                }
                Op::HeadsMerge { a, b, l, dh, h } => {
                    let d = h * dh;
                    for bi in 0..b {
                        for hi in 0..h {
                            for li in 0..l {
                                let to = (((bi * h + hi) * l) + li) * dh;
                                let from = (bi * l + li) * d + hi * dh;
                                for c in 0..dh {
                                    self.nodes[a].grad[to + c] += grad[from + c];
                                }
                            }
                        }
                    }
                }
                Op::MeanAxis1 { a, t, n, d } => {
                    for ti in 0..t {
                        for ni in 0..n {
                            for di in 0..d {
                                self.nodes[a].grad[(ti * n + ni) * d + di] +=
                                    grad[ti * d + di] / n as f64;
                            }
                        }
                    }
                }
                Op::RepeatAxis1 { a, t, n, d } => {
                    for ti in 0..t {
                        for ni in 0..n {
                            for di in 0..d {
                                self.nodes[a].grad[ti * d + di] += grad[(ti * n + ni) * d + di];
                            }
                        }
                    }
                }
                Op::DotLastDim { a, b, d } => {
                    let a_data = self.nodes[a].data.clone();
                    let b_data = self.nodes[b].data.clone();
                    for (i0, g) in grad.iter().enumerate() {
                        for j in 0..d {
                            self.nodes[a].grad[i0 * d + j] += g * b_data[i0 * d + j];
                            self.nodes[b].grad[i0 * d + j] += g * a_data[i0 * d + j];
                        }
                    }
                }
                Op::ShiftFrames { a, t, nd } => {
                    if t > 1 {
                        for j in 0..(t - 1) * nd {
                            self.nodes[a].grad[j] += grad[nd + j];
                        }
                    }
                }
                Op::MaskReplace { a, emb, mask, d } => {
                    for (p, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..d {
                                self.nodes[emb].grad[c] += grad[p * d + c];
                            }
                        } else {
                            for c in 0..d {
                                self.nodes[a].grad[p * d + c] += grad[p * d + c];
                            }
                        }
                    }
                }
                Op::PadFramesRepeat { a, t, to, nd } => {
                    for j in 0..t * nd {
                        self.nodes[a].grad[j] += grad[j];
                    }
                    for p in t..to {
                        for j in 0..nd {
                            self.nodes[a].grad[(t - 1) * nd + j] += grad[p * nd + j];
                        }
                    }
                }
                Op::UpsampleFrames { a, f: _, r, target, nd } => {
                    for t0 in 0..target {
                        let from = (t0 / r) * nd;
                        for j in 0..nd {
                            self.nodes[a].grad[from + j] += grad[t0 * nd + j];
                        }
                    }
                }
                Op::GatherMean { a, idx } => {
                    let g = grad[0] / idx.len() as f64;
                    for &j in &idx {
                        self.nodes[a].grad[j] += g;
                    }
                }
                Op::SoftmaxCe { a, target, prob } => {
                    let g = grad[0];
                    for j in 0..prob.len() {
                        self.nodes[a].grad[j] += g * (prob[j] - target[j]);
                    }
                }
            }
            self.nodes[i].grad = grad;
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                or[c] += av * br[c];
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// tanh-approximation GELU.
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
