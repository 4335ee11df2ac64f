//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! op kind, its input variables and its output tensor. [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients into per-node buffers
//! that can be read back with [`Tape::grad`]. A tape is single-use: after
//! backward it refuses further work until a fresh forward pass is recorded.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Real, Tensor};

/// Variance floor added to mixed statistics inside [`Tape::switch_norm`].
pub const NORM_EPS: Real = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Saved statistics for the switchable-norm backward pass.
#[derive(Debug, Clone)]
struct SnSaved {
    mu_in: Vec<Real>,
    v_in: Vec<Real>,
    mu_ln: Real,
    v_ln: Real,
    /// softmax(lambda): mixing weights for (instance, layer) statistics.
    w: [Real; 2],
    /// Mixed per-channel mean.
    m: Vec<Real>,
    /// Per-channel 1/sqrt(mixed variance + eps).
    r: Vec<Real>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: Real,
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        c0: usize,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    BilinearUpsample {
        x: Var,
    },
    SwitchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        lambda: Var,
        saved: SnSaved,
    },
    SoftmaxRows {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose2 {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    DscLoss {
        pred: Var,
        label: Var,
        smooth: Real,
        /// Per-channel (intersection, sum) totals from the forward pass.
        terms: Vec<(Real, Real)>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// True when some leaf under this node requires gradients.
    needs_grad: bool,
}

/// Records a forward pass and replays it in reverse for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enters a tensor onto the tape. Gradients flow into it when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Forward output of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to node `v`.
    /// Nodes the loss never reached get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.done {
            return Err(Error::State(
                "gradients requested before backward ran".into(),
            ));
        }
        let node = &self.nodes[v.0];
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; node.value.numel()],
        };
        Tensor::new(node.value.shape.clone(), data)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn guard_live(&self) -> Result<()> {
        if self.done {
            return Err(Error::State(
                "tape already consumed by backward; record a fresh forward pass".into(),
            ));
        }
        Ok(())
    }

    fn rank3<'a>(&'a self, v: Var, what: &str) -> Result<&'a Tensor> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 3 {
            return Err(Error::Shape(format!(
                "{what} must be C x H x W, got {:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    fn rank2<'a>(&'a self, v: Var, what: &str) -> Result<&'a Tensor> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what} must be rank 2, got {:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    /// Direct 2D convolution with zero padding.
    ///
    /// Accumulation order per output element is fixed (bias, then ascending
    /// input channel, kernel row, kernel column) so results are bitwise
    /// reproducible.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.guard_live()?;
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be >= 1".into()));
        }
        let x = self.rank3(input, "conv2d input")?;
        let k = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        if k.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be Cout x Cin x kh x kw, got {:?}",
                k.shape
            )));
        }
        let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (cout, kcin, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if b.shape != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                b.shape
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x.data[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        let value = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            value,
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.guard_live()?;
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape.clone(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Relu { x }, value, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.guard_live()?;
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| math::sigmoid(v)).collect();
        let value = Tensor::new(t.shape.clone(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Sigmoid { x }, value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard_live()?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "add needs matching shapes, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard_live()?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "mul needs matching shapes, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, value, needs))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        self.guard_live()?;
        let t = &self.nodes[x.0].value;
        let data = t.data.iter().map(|&v| c * v).collect();
        let value = Tensor::new(t.shape.clone(), data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, c }, value, needs))
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.guard_live()?;
        if xs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.rank3(xs[0], "concat input")?;
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut channels = 0;
        for &v in xs {
            let t = self.rank3(v, "concat input")?;
            if t.shape[1] != h || t.shape[2] != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {}x{} vs {}x{}",
                    t.shape[1], t.shape[2], h, w
                )));
            }
            channels += t.shape[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &v in xs {
            data.extend_from_slice(&self.nodes[v.0].value.data);
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(vec![channels, h, w], data)?;
        Ok(self.push(Op::ConcatChannels { xs: xs.to_vec() }, value, needs))
    }

    /// Channel range `[c0, c1)` of a rank-3 tensor.
    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank3(x, "slice input")?;
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        if c0 >= c1 || c1 > c {
            return Err(Error::Shape(format!(
                "channel range {c0}..{c1} invalid for {c} channels"
            )));
        }
        let data = t.data[c0 * h * w..c1 * h * w].to_vec();
        let needs = self.needs(x);
        let value = Tensor::new(vec![c1 - c0, h, w], data)?;
        Ok(self.push(Op::SliceChannels { x, c0 }, value, needs))
    }

    /// Adaptive average pooling to `th x tw`; cells tile the input exactly.
    pub fn adaptive_avg_pool(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank3(x, "pool input")?;
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        if th == 0 || tw == 0 || th > h || tw > w {
            return Err(Error::Shape(format!(
                "pool target {th}x{tw} outside input {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * th * tw];
        for ch in 0..c {
            for oy in 0..th {
                let y0 = oy * h / th;
                let y1 = ((oy + 1) * h).div_ceil(th);
                for ox in 0..tw {
                    let x0 = ox * w / tw;
                    let x1 = ((ox + 1) * w).div_ceil(tw);
                    let mut acc = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += t.data[(ch * h + iy) * w + ix];
                        }
                    }
                    out[(ch * th + oy) * tw + ox] = acc / ((y1 - y0) * (x1 - x0)) as Real;
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![c, th, tw], out)?;
        Ok(self.push(Op::AdaptiveAvgPool { x }, value, needs))
    }

    /// Bilinear resampling to `th x tw` (half-pixel centers). Constant inputs
    /// stay bitwise constant.
    pub fn bilinear_upsample(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank3(x, "upsample input")?;
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        if th == 0 || tw == 0 {
            return Err(Error::Shape("upsample target must be positive".into()));
        }
        let mut out = vec![0.0; c * th * tw];
        for ch in 0..c {
            for oy in 0..th {
                let (y0, y1, fy) = Self::lerp_coords(oy, h, th);
                for ox in 0..tw {
                    let (x0, x1, fx) = Self::lerp_coords(ox, w, tw);
                    let v00 = t.data[(ch * h + y0) * w + x0];
                    let v01 = t.data[(ch * h + y0) * w + x1];
                    let v10 = t.data[(ch * h + y1) * w + x0];
                    let v11 = t.data[(ch * h + y1) * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out[(ch * th + oy) * tw + ox] = top + fy * (bot - top);
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![c, th, tw], out)?;
        Ok(self.push(Op::BilinearUpsample { x }, value, needs))
    }

    /// Source interpolation pattern for output index `o` mapping `n` -> `tn`.
    fn lerp_coords(o: usize, n: usize, tn: usize) -> (usize, usize, Real) {
        let src = (o as Real + 0.5) * (n as Real / tn as Real) - 0.5;
        let src = src.clamp(0.0, (n - 1) as Real);
        let i0 = math::floor(src) as usize;
        let i0 = i0.min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as Real)
    }

    /// Normalization over a learnable softmax mix of instance and layer
    /// statistics, then per-channel affine. `lambda` holds the two mixing
    /// logits; `gamma`/`beta` are per-channel.
    pub fn switch_norm(&mut self, x: Var, gamma: Var, beta: Var, lambda: Var) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank3(x, "norm input")?;
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let n_in = (h * w) as Real;
        let n_ln = (c * h * w) as Real;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let l = &self.nodes[lambda.0].value;
        if g.shape != [c] || b.shape != [c] {
            return Err(Error::Shape(format!(
                "norm affine must be [{c}], got gamma {:?} beta {:?}",
                g.shape, b.shape
            )));
        }
        if l.shape != [2] {
            return Err(Error::Shape(format!(
                "norm mixing logits must be [2], got {:?}",
                l.shape
            )));
        }

        let mut mu_in = vec![0.0; c];
        let mut v_in = vec![0.0; c];
        for ch in 0..c {
            let plane = &t.data[ch * h * w..(ch + 1) * h * w];
            let mu: Real = plane.iter().sum::<Real>() / n_in;
            let var: Real = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<Real>() / n_in;
            mu_in[ch] = mu;
            v_in[ch] = var;
        }
        let mu_ln: Real = t.data.iter().sum::<Real>() / n_ln;
        let v_ln: Real = t.data.iter().map(|&v| (v - mu_ln) * (v - mu_ln)).sum::<Real>() / n_ln;

        let lmax = if l.data[0] > l.data[1] { l.data[0] } else { l.data[1] };
        let e0 = math::exp(l.data[0] - lmax);
        let e1 = math::exp(l.data[1] - lmax);
        let w0 = e0 / (e0 + e1);
        let w1 = e1 / (e0 + e1);

        let mut m = vec![0.0; c];
        let mut r = vec![0.0; c];
        for ch in 0..c {
            m[ch] = w0 * mu_in[ch] + w1 * mu_ln;
            r[ch] = 1.0 / math::sqrt(w0 * v_in[ch] + w1 * v_ln + NORM_EPS);
        }

        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let xhat = (t.data[ch * h * w + i] - m[ch]) * r[ch];
                out[ch * h * w + i] = g.data[ch] * xhat + b.data[ch];
            }
        }
        let needs =
            self.needs(x) || self.needs(gamma) || self.needs(beta) || self.needs(lambda);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            Op::SwitchNorm {
                x,
                gamma,
                beta,
                lambda,
                saved: SnSaved {
                    mu_in,
                    v_in,
                    mu_ln,
                    v_ln,
                    w: [w0, w1],
                    m,
                    r,
                },
            },
            value,
            needs,
        ))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank2(x, "softmax input")?;
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for row in 0..rows {
            let src = &t.data[row * cols..(row + 1) * cols];
            let max = src.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (i, &v) in src.iter().enumerate() {
                let e = math::exp(v - max);
                out[row * cols + i] = e;
                sum += e;
            }
            for v in &mut out[row * cols..(row + 1) * cols] {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::SoftmaxRows { x }, value, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard_live()?;
        let ta = self.rank2(a, "matmul lhs")?;
        let tb = self.rank2(b, "matmul rhs")?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let (n2, p) = (tb.shape[0], tb.shape[1]);
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for kk in 0..n {
                let av = ta.data[i * n + kk];
                for j in 0..p {
                    out[i * p + j] += av * tb.data[kk * p + j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(Op::MatMul { a, b }, value, needs))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        self.guard_live()?;
        let t = self.rank2(x, "transpose input")?;
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose2 { x }, value, needs))
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.guard_live()?;
        let t = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                t.shape, shape
            )));
        }
        let value = Tensor::new(shape, t.data.clone())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, value, needs))
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.guard_live()?;
        let t = &self.nodes[x.0].value;
        let mean = t.data.iter().sum::<Real>() / t.numel() as Real;
        let needs = self.needs(x);
        let value = Tensor::new(vec![1], vec![mean])?;
        Ok(self.push(Op::MeanAll { x }, value, needs))
    }

    /// Smoothed soft-Dice loss, averaged over channels:
    /// `1 - mean_i (2*sum(Y_i*P_i) + s) / (sum(Y_i) + sum(P_i) + s)`.
    pub fn dsc_loss(&mut self, pred: Var, label: Var, smooth: Real) -> Result<Var> {
        self.guard_live()?;
        let p = self.rank3(pred, "loss prediction")?;
        let y = self.rank3(label, "loss label")?;
        if p.shape != y.shape {
            return Err(Error::Shape(format!(
                "loss shapes differ: {:?} vs {:?}",
                p.shape, y.shape
            )));
        }
        let (c, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
        let mut terms = Vec::with_capacity(c);
        let mut acc = 0.0;
        for ch in 0..c {
            let pp = &p.data[ch * h * w..(ch + 1) * h * w];
            let yy = &y.data[ch * h * w..(ch + 1) * h * w];
            let inter: Real = pp.iter().zip(yy).map(|(a, b)| a * b).sum();
            let total: Real = pp.iter().sum::<Real>() + yy.iter().sum::<Real>();
            terms.push((inter, total));
            acc += 1.0 - (2.0 * inter + smooth) / (total + smooth);
        }
        let needs = self.needs(pred) || self.needs(label);
        let value = Tensor::new(vec![1], vec![acc / c as Real])?;
        Ok(self.push(
            Op::DscLoss {
                pred,
                label,
                smooth,
                terms,
            },
            value,
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// the loss depends on; a second call without a fresh forward fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::State(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Real>>], v: Var, idx: usize, add: Real) {
        if let Some(buf) = grads[v.0].as_mut() {
            buf[idx] += add;
        }
    }

    /// Ensures a gradient buffer exists for `v` when it participates in the
    /// backward pass at all.
    fn ensure(&self, grads: &mut [Option<Vec<Real>>], v: Var) -> bool {
        if !self.nodes[v.0].needs_grad {
            return false;
        }
        if grads[v.0].is_none() {
            grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        true
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (cout, _, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
                let out = &self.nodes[i].value;
                let (oh, ow) = (out.shape[1], out.shape[2]);
                let want_x = self.ensure(grads, *input);
                let want_k = self.ensure(grads, *kernel);
                let want_b = self.ensure(grads, *bias);
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(co * oh + oy) * ow + ox];
                            if want_b {
                                self.accumulate(grads, *bias, co, go);
                            }
                            if !want_x && !want_k {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                        if want_k {
                                            self.accumulate(
                                                grads,
                                                *kernel,
                                                ki,
                                                go * x.data[xi],
                                            );
                                        }
                                        if want_x {
                                            self.accumulate(grads, *input, xi, go * k.data[ki]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.ensure(grads, *x) {
                    let t = &self.nodes[x.0].value;
                    for (idx, &v) in t.data.iter().enumerate() {
                        if v > 0.0 {
                            self.accumulate(grads, *x, idx, g[idx]);
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.ensure(grads, *x) {
                    let y = &self.nodes[i].value;
                    for (idx, &s) in y.data.iter().enumerate() {
                        self.accumulate(grads, *x, idx, g[idx] * s * (1.0 - s));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.ensure(grads, *v) {
                        for (idx, &gv) in g.iter().enumerate() {
                            self.accumulate(grads, *v, idx, gv);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.ensure(grads, *a) {
                    let tb = &self.nodes[b.0].value;
                    for (idx, &gv) in g.iter().enumerate() {
                        self.accumulate(grads, *a, idx, gv * tb.data[idx]);
                    }
                }
                if self.ensure(grads, *b) {
                    let ta = &self.nodes[a.0].value;
                    for (idx, &gv) in g.iter().enumerate() {
                        self.accumulate(grads, *b, idx, gv * ta.data[idx]);
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.ensure(grads, *x) {
                    for (idx, &gv) in g.iter().enumerate() {
                        self.accumulate(grads, *x, idx, c * gv);
                    }
                }
            }
            Op::ConcatChannels { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let n = self.nodes[v.0].value.numel();
                    if self.ensure(grads, v) {
                        for idx in 0..n {
                            self.accumulate(grads, v, idx, g[offset + idx]);
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceChannels { x, c0 } => {
                if self.ensure(grads, *x) {
                    let t = &self.nodes[x.0].value;
                    let plane = t.shape[1] * t.shape[2];
                    let base = c0 * plane;
                    for (idx, &gv) in g.iter().enumerate() {
                        self.accumulate(grads, *x, base + idx, gv);
                    }
                }
            }
            Op::AdaptiveAvgPool { x } => {
                if self.ensure(grads, *x) {
                    let t = &self.nodes[x.0].value;
                    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                    let out = &self.nodes[i].value;
                    let (th, tw) = (out.shape[1], out.shape[2]);
                    for ch in 0..c {
                        for oy in 0..th {
                            let y0 = oy * h / th;
                            let y1 = ((oy + 1) * h).div_ceil(th);
                            for ox in 0..tw {
                                let x0 = ox * w / tw;
                                let x1 = ((ox + 1) * w).div_ceil(tw);
                                let share = g[(ch * th + oy) * tw + ox]
                                    / ((y1 - y0) * (x1 - x0)) as Real;
                                for iy in y0..y1 {
                                    for ix in x0..x1 {
                                        self.accumulate(
                                            grads,
                                            *x,
                                            (ch * h + iy) * w + ix,
                                            share,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BilinearUpsample { x } => {
                if self.ensure(grads, *x) {
                    let t = &self.nodes[x.0].value;
                    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                    let out = &self.nodes[i].value;
                    let (th, tw) = (out.shape[1], out.shape[2]);
                    for ch in 0..c {
                        for oy in 0..th {
                            let (y0, y1, fy) = Self::lerp_coords(oy, h, th);
                            for ox in 0..tw {
                                let (x0, x1, fx) = Self::lerp_coords(ox, w, tw);
                                let gv = g[(ch * th + oy) * tw + ox];
                                let base = ch * h * w;
                                self.accumulate(
                                    grads,
                                    *x,
                                    base + y0 * w + x0,
                                    gv * (1.0 - fy) * (1.0 - fx),
                                );
                                self.accumulate(grads, *x, base + y0 * w + x1, gv * (1.0 - fy) * fx);
                                self.accumulate(grads, *x, base + y1 * w + x0, gv * fy * (1.0 - fx));
                                self.accumulate(grads, *x, base + y1 * w + x1, gv * fy * fx);
                            }
                        }
                    }
                }
            }
            Op::SwitchNorm {
                x,
                gamma,
                beta,
                lambda,
                saved,
            } => {
                let t = &self.nodes[x.0].value;
                let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                let plane = h * w;
                let n_in = plane as Real;
                let n_ln = (c * plane) as Real;
                let gm = &self.nodes[gamma.0].value;
                let want_x = self.ensure(grads, *x);
                let want_g = self.ensure(grads, *gamma);
                let want_b = self.ensure(grads, *beta);
                let want_l = self.ensure(grads, *lambda);

                // dm[c] = dL/d(mixed mean), ds[c] = dL/d(mixed variance).
                let mut dm = vec![0.0; c];
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    let rr = saved.r[ch];
                    for idx in 0..plane {
                        let flat = ch * plane + idx;
                        let dxh = g[flat] * gm.data[ch];
                        let xc = t.data[flat] - saved.m[ch];
                        dm[ch] -= dxh * rr;
                        ds[ch] -= dxh * xc * 0.5 * rr * rr * rr;
                        if want_g {
                            self.accumulate(grads, *gamma, ch, g[flat] * xc * rr);
                        }
                        if want_b {
                            self.accumulate(grads, *beta, ch, g[flat]);
                        }
                    }
                }
                let dm_sum: Real = dm.iter().sum();
                let ds_sum: Real = ds.iter().sum();

                if want_x {
                    let (w0, w1) = (saved.w[0], saved.w[1]);
                    for ch in 0..c {
                        let rr = saved.r[ch];
                        for idx in 0..plane {
                            let flat = ch * plane + idx;
                            let xv = t.data[flat];
                            let mut dx = g[flat] * gm.data[ch] * rr;
                            dx += dm[ch] * w0 / n_in + dm_sum * w1 / n_ln;
                            dx += ds[ch] * w0 * 2.0 * (xv - saved.mu_in[ch]) / n_in
                                + ds_sum * w1 * 2.0 * (xv - saved.mu_ln) / n_ln;
                            self.accumulate(grads, *x, flat, dx);
                        }
                    }
                }
                if want_l {
                    let mut dw0 = 0.0;
                    let mut dw1 = 0.0;
                    for ch in 0..c {
                        dw0 += dm[ch] * saved.mu_in[ch] + ds[ch] * saved.v_in[ch];
                    }
                    dw1 += dm_sum * saved.mu_ln + ds_sum * saved.v_ln;
                    // softmax backward over the two logits
                    let dot = saved.w[0] * dw0 + saved.w[1] * dw1;
                    self.accumulate(grads, *lambda, 0, saved.w[0] * (dw0 - dot));
                    self.accumulate(grads, *lambda, 1, saved.w[1] * (dw1 - dot));
                }
            }
            Op::SoftmaxRows { x } => {
                if self.ensure(grads, *x) {
                    let y = &self.nodes[i].value;
                    let (rows, cols) = (y.shape[0], y.shape[1]);
                    for row in 0..rows {
                        let ys = &y.data[row * cols..(row + 1) * cols];
                        let gs = &g[row * cols..(row + 1) * cols];
                        let dot: Real = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            self.accumulate(
                                grads,
                                *x,
                                row * cols + j,
                                ys[j] * (gs[j] - dot),
                            );
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let p = tb.shape[1];
                if self.ensure(grads, *a) {
                    for i2 in 0..m {
                        for j in 0..p {
                            let gv = g[i2 * p + j];
                            for kk in 0..n {
                                self.accumulate(grads, *a, i2 * n + kk, gv * tb.data[kk * p + j]);
                            }
                        }
                    }
                }
                if self.ensure(grads, *b) {
                    for i2 in 0..m {
                        for j in 0..p {
                            let gv = g[i2 * p + j];
                            for kk in 0..n {
                                self.accumulate(grads, *b, kk * p + j, gv * ta.data[i2 * n + kk]);
                            }
                        }
                    }
                }
            }
            Op::Transpose2 { x } => {
                if self.ensure(grads, *x) {
                    let t = &self.nodes[x.0].value;
                    let (m, n) = (t.shape[0], t.shape[1]);
                    for i2 in 0..m {
                        for j in 0..n {
                            self.accumulate(grads, *x, i2 * n + j, g[j * m + i2]);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.ensure(grads, *x) {
                    for (idx, &gv) in g.iter().enumerate() {
                        self.accumulate(grads, *x, idx, gv);
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.ensure(grads, *x) {
                    let n = self.nodes[x.0].value.numel() as Real;
                    for idx in 0..self.nodes[x.0].value.numel() {
                        self.accumulate(grads, *x, idx, g[0] / n);
                    }
                }
            }
            Op::DscLoss {
                pred,
                label,
                smooth,
                terms,
            } => {
                let p = &self.nodes[pred.0].value;
                let y = &self.nodes[label.0].value;
                let (c, h, w) = (p.shape[0], p.shape[1], p.shape[2]);
                let plane = h * w;
                let coef = g[0] / c as Real;
                let want_p = self.ensure(grads, *pred);
                let want_y = self.ensure(grads, *label);
                for ch in 0..c {
                    let (inter, total) = terms[ch];
                    let num = 2.0 * inter + smooth;
                    let den = total + smooth;
                    for idx in 0..plane {
                        let flat = ch * plane + idx;
                        if want_p {
                            let d = (num - 2.0 * y.data[flat] * den) / (den * den);
                            self.accumulate(grads, *pred, flat, coef * d);
                        }
                        if want_y {
                            let d = (num - 2.0 * p.data[flat] * den) / (den * den);
                            self.accumulate(grads, *label, flat, coef * d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
