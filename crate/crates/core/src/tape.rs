//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation executed through a [`Tape`] appends one node holding its
//! output value and enough information to compute the adjoints of its
//! inputs. [`Tape::backward`] walks the nodes once in reverse insertion
//! order, which is a valid reverse topological order because a node can only
//! reference nodes recorded before it.
//!
//! A tape is built fresh for every forward pass and discarded afterwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabiliser in the denominator of the mean-centred cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside `bce`.
pub const PROB_CLAMP: f64 = 1e-7;
/// Variance stabiliser of the per-channel spatial normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sliding-window geometry for [`Tape::extract_patches`] and [`Tape::pack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// A `k x k` window centred on every pixel, zero padded at the border.
    Square(usize),
    /// A `1 x W` window covering one full row, no padding.
    Row,
}

impl Window {
    /// Interprets a `win_h x win_w` request against a map of width `map_w`.
    pub fn from_dims(win_h: usize, win_w: usize, map_w: usize) -> Result<Self> {
        if win_h == win_w && win_h % 2 == 1 {
            Ok(Window::Square(win_h))
        } else if win_h == 1 && win_w == map_w {
            Ok(Window::Row)
        } else {
            Err(Error::UnsupportedWindow {
                op: "extract_patches",
                win_h,
                win_w,
                map_w,
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    /// Output positions `[lo, hi)` along one axis for which kernel tap `t`
    /// reads inside an input of length `len`.
    fn valid(&self, t: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        let hi = if len + p < t + 1 {
            0
        } else {
            ((len - 1 + p - t) / s + 1).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Softmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ExtractPatches {
        input: Var,
        window: Window,
    },
    Pack {
        input: Var,
        window: Window,
    },
    GlobalAvgPool(Var),
    InstanceNorm {
        input: Var,
        scale: Var,
        offset: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowCosine(Var, Var),
    Bce {
        p: Var,
        label: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Records an input value. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, shaped like `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), data.clone()).expect("grad shape"))
    }

    /// Sign of every recorded ReLU input, in recording order. Two evaluations
    /// with equal patterns lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Clears gradients so that `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Product of an `M x N` and an `N x P` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_rank("matmul", 2)?;
        y.expect_rank("matmul", 2)?;
        let (m, n, p) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        if y.shape()[0] != n {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("inner dimensions {:?} x {:?} disagree", x.shape(), y.shape()),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(x.data(), y.data(), &mut out, m, n, p);
        let out = Tensor::new(vec![m, p], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B x M x K] x [B x K x P] -> [B x M x P]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_rank("bmm", 3)?;
        y.expect_rank("bmm", 3)?;
        let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let p = y.shape()[2];
        if y.shape()[0] != bs || y.shape()[1] != k {
            return Err(Error::Dimension {
                op: "bmm",
                detail: format!("cannot multiply {:?} by {:?}", x.shape(), y.shape()),
            });
        }
        let mut out = vec![0.0; bs * m * p];
        for i in 0..bs {
            gemm_acc(
                &x.data()[i * m * k..(i + 1) * m * k],
                &y.data()[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let out = Tensor::new(vec![bs, m, p], out)?;
        Ok(self.push(out, Op::Bmm(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if !(shape.len() == 2 || shape.len() == 3) {
            return Err(Error::Dimension {
                op: "transpose",
                detail: format!("expected rank 2 or 3, got {shape:?}"),
            });
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = x.numel() / (m * n).max(1);
        let out = transpose_batched(x.data(), batch, m, n);
        let mut new_shape = shape.clone();
        new_shape.swap(r - 2, r - 1);
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::TransposeLast2(a), &[a]))
    }

    /// Softmax over the last axis, computed after subtracting each slice's max.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or(Error::Dimension {
            op: "softmax",
            detail: "scalar input has no last dimension".into(),
        })?;
        if d == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                detail: "empty last dimension".into(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// 2-D convolution of a `C_in x H x W` map with `C_out x C_in x k x k`
    /// kernels and a `C_out` bias, zero padded.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (x, kt, bt) = (self.value(input), self.value(kernel), self.value(bias));
        x.expect_rank("conv2d", 3)?;
        kt.expect_rank("conv2d", 4)?;
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kc, k, k2) = (kt.shape()[0], kt.shape()[1], kt.shape()[2], kt.shape()[3]);
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![c_out, c_in, k, k2],
                got: kt.shape().to_vec(),
            });
        }
        if k != k2 || stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("need square kernels and positive stride, got {k}x{k2} stride {stride}"),
            });
        }
        if bt.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![c_out],
                got: bt.shape().to_vec(),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let out = conv_forward(x.data(), kt.data(), bt.data(), &geom);
        let out = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Sliding-window patch extraction from a `C x H x W` map.
    ///
    /// `Square(k)` yields `[H*W, C, k*k]`, one zero-padded patch centred on
    /// each pixel in row-major order. `Row` yields `[H, C, W]`, one patch per
    /// row.
    pub fn extract_patches(&mut self, input: Var, window: Window) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("extract_patches", 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out = match window {
            Window::Square(k) => {
                if k % 2 == 0 || k == 0 {
                    return Err(Error::UnsupportedWindow {
                        op: "extract_patches",
                        win_h: k,
                        win_w: k,
                        map_w: w,
                    });
                }
                let mut out = vec![0.0; h * w * c * k * k];
                square_patch_indices(c, h, w, k, |dst, src| out[dst] = x.data()[src]);
                Tensor::new(vec![h * w, c, k * k], out)?
            }
            Window::Row => {
                let mut out = vec![0.0; c * h * w];
                for i in 0..h {
                    for ch in 0..c {
                        let src = (ch * h + i) * w;
                        let dst = (i * c + ch) * w;
                        out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
                    }
                }
                Tensor::new(vec![h, c, w], out)?
            }
        };
        Ok(self.push(out, Op::ExtractPatches { input, window }, &[input]))
    }

    /// Inverse of the sliding-window extraction: packs per-position feature
    /// vectors back into a `C x H x W` map.
    ///
    /// `Square(_)` takes `[H*W, C]` (or `[H*W, C, 1]`), one vector per pixel.
    /// `Row` takes `[H, C, W]`, one `C x W` block per row.
    pub fn pack(&mut self, input: Var, window: Window, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = match window {
            Window::Square(_) => {
                let ok = (shape.len() == 2 || (shape.len() == 3 && shape[2] == 1))
                    && shape[0] == h * w;
                if !ok {
                    return Err(Error::Dimension {
                        op: "pack",
                        detail: format!("expected [{}, C] per-pixel vectors, got {shape:?}", h * w),
                    });
                }
                let c = shape[1];
                let out = transpose_batched(x.data(), 1, h * w, c);
                Tensor::new(vec![c, h, w], out)?
            }
            Window::Row => {
                if shape.len() != 3 || shape[0] != h || shape[2] != w {
                    return Err(Error::Dimension {
                        op: "pack",
                        detail: format!("expected [{h}, C, {w}] row blocks, got {shape:?}"),
                    });
                }
                let c = shape[1];
                let mut out = vec![0.0; c * h * w];
                for i in 0..h {
                    for ch in 0..c {
                        let src = (i * c + ch) * w;
                        let dst = (ch * h + i) * w;
                        out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
                    }
                }
                Tensor::new(vec![c, h, w], out)?
            }
        };
        Ok(self.push(out, Op::Pack { input, window }, &[input]))
    }

    /// Per-channel spatial mean of a `C x H x W` map.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("global_avg_pool", 3)?;
        let c = x.shape()[0];
        let hw = x.shape()[1] * x.shape()[2];
        if hw == 0 {
            return Err(Error::Dimension {
                op: "global_avg_pool",
                detail: "empty spatial extent".into(),
            });
        }
        let out = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// Per-channel normalisation over spatial positions followed by a
    /// learnable per-channel scale and offset.
    pub fn instance_norm(&mut self, input: Var, scale: Var, offset: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("instance_norm", 3)?;
        let c = x.shape()[0];
        let hw = x.shape()[1] * x.shape()[2];
        for v in [scale, offset] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "instance_norm",
                    expected: vec![c],
                    got: self.shape(v).to_vec(),
                });
            }
        }
        let (gamma, beta) = (self.value(scale).data(), self.value(offset).data());
        let mut normalized = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let src = &x.data()[ch * hw..(ch + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for (i, &v) in src.iter().enumerate() {
                let n = (v - mean) * is;
                normalized[ch * hw + i] = n;
                out[ch * hw + i] = gamma[ch] * n + beta[ch];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                scale,
                offset,
                normalized,
                inv_std,
            },
            &[input, scale, offset],
        ))
    }

    /// Mean-centred cosine similarity between matching rows of two `N x D`
    /// matrices, giving an `N` vector.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let x = self.value(a);
        x.expect_rank("row_cosine", 2)?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if d < 2 {
            return Err(Error::Dimension {
                op: "row_cosine",
                detail: format!("vectors need at least 2 entries, got {d}"),
            });
        }
        let y = self.value(b);
        let out = (0..n)
            .map(|i| {
                let r = i * d..(i + 1) * d;
                CosineParts::new(&x.data()[r.clone()], &y.data()[r]).sim()
            })
            .collect();
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push(out, Op::RowCosine(a, b), &[a, b]))
    }

    /// Binary cross-entropy of a probability against a 0/1 label, with the
    /// probability clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        if label != 0.0 && label != 1.0 {
            return Err(Error::InvalidLabel(label));
        }
        let x = self.value(p);
        if !x.is_scalar() {
            return Err(Error::Dimension {
                op: "bce",
                detail: format!("expected a single probability, got shape {:?}", x.shape()),
            });
        }
        let q = x.item().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -(label * q.ln() + (1.0 - label) * (1.0 - q).ln());
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, label }, &[p]))
    }

    /// Propagates adjoints from a scalar `loss` to every recorded value that
    /// requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let numel = |v: Var| nodes[v.0].value.numel();

    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(a) {
                add_into(grad_buf(grads, a, g.len()), g, 1.0);
            }
            if wants(b) {
                add_into(grad_buf(grads, b, g.len()), g, sign);
            }
        }
        &Op::Mul(a, b) => {
            for (dst, other) in [(a, b), (b, a)] {
                if wants(dst) {
                    let o = val(other).data();
                    let buf = grad_buf(grads, dst, g.len());
                    for ((d, &gv), &ov) in buf.iter_mut().zip(g).zip(o) {
                        *d += gv * ov;
                    }
                }
            }
        }
        &Op::Scale(a, f) => add_into(grad_buf(grads, a, g.len()), g, f),
        &Op::AddScalar(a) | &Op::Reshape(a) => add_into(grad_buf(grads, a, g.len()), g, 1.0),
        &Op::Relu(a) => {
            let x = val(a).data();
            let buf = grad_buf(grads, a, g.len());
            for ((d, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                if xv > 0.0 {
                    *d += gv;
                }
            }
        }
        &Op::Sigmoid(a) => {
            let buf = grad_buf(grads, a, g.len());
            for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                *d += gv * y * (1.0 - y);
            }
        }
        &Op::Sum(a) | &Op::Mean(a) => {
            let n = numel(a);
            let scale = if matches!(nodes[i].op, Op::Mean(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            for d in grad_buf(grads, a, n) {
                *d += scale;
            }
        }
        &Op::MatMul(a, b) => {
            let (x, y) = (val(a), val(b));
            let (m, n, p) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            if wants(a) {
                let yt = transpose_batched(y.data(), 1, n, p);
                gemm_acc(g, &yt, grad_buf(grads, a, m * n), m, p, n);
            }
            if wants(b) {
                let xt = transpose_batched(x.data(), 1, m, n);
                gemm_acc(&xt, g, grad_buf(grads, b, n * p), n, m, p);
            }
        }
        &Op::Bmm(a, b) => {
            let (x, y) = (val(a), val(b));
            let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let p = y.shape()[2];
            if wants(a) {
                let yt = transpose_batched(y.data(), bs, k, p);
                let buf = grad_buf(grads, a, bs * m * k);
                for t in 0..bs {
                    gemm_acc(
                        &g[t * m * p..(t + 1) * m * p],
                        &yt[t * p * k..(t + 1) * p * k],
                        &mut buf[t * m * k..(t + 1) * m * k],
                        m,
                        p,
                        k,
                    );
                }
            }
            if wants(b) {
                let xt = transpose_batched(x.data(), bs, m, k);
                let buf = grad_buf(grads, b, bs * k * p);
                for t in 0..bs {
                    gemm_acc(
                        &xt[t * k * m..(t + 1) * k * m],
                        &g[t * m * p..(t + 1) * m * p],
                        &mut buf[t * k * p..(t + 1) * k * p],
                        k,
                        m,
                        p,
                    );
                }
            }
        }
        &Op::TransposeLast2(a) => {
            let s = out.shape();
            let r = s.len();
            let (m, n) = (s[r - 2], s[r - 1]);
            let batch = out.numel() / (m * n).max(1);
            let back = transpose_batched(g, batch, m, n);
            add_into(grad_buf(grads, a, g.len()), &back, 1.0);
        }
        &Op::Softmax(a) => {
            let d = *out.shape().last().expect("softmax rank");
            let buf = grad_buf(grads, a, g.len());
            for ((dst, gs), ys) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                let dot: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                for ((dv, &gv), &y) in dst.iter_mut().zip(gs).zip(ys) {
                    *dv += y * (gv - dot);
                }
            }
        }
        &Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            if wants(input) {
                let buf = grad_buf(grads, input, numel(input));
                conv_backward_input(g, val(kernel).data(), &geom, buf);
            }
            if wants(kernel) {
                let buf = grad_buf(grads, kernel, numel(kernel));
                conv_backward_kernel(g, val(input).data(), &geom, buf);
            }
            if wants(bias) {
                let hw = geom.h_out * geom.w_out;
                let buf = grad_buf(grads, bias, geom.c_out);
                for (d, gc) in buf.iter_mut().zip(g.chunks(hw)) {
                    *d += gc.iter().sum::<f64>();
                }
            }
        }
        &Op::ExtractPatches { input, window } => {
            let s = val(input).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let buf = grad_buf(grads, input, c * h * w);
            match window {
                Window::Square(k) => square_patch_indices(c, h, w, k, |dst, src| buf[src] += g[dst]),
                Window::Row => {
                    for r in 0..h {
                        for ch in 0..c {
                            let dst = (ch * h + r) * w;
                            let src = (r * c + ch) * w;
                            add_into(&mut buf[dst..dst + w], &g[src..src + w], 1.0);
                        }
                    }
                }
            }
        }
        &Op::Pack { input, window } => {
            let s = out.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let buf = grad_buf(grads, input, c * h * w);
            match window {
                Window::Square(_) => {
                    let back = transpose_batched(g, 1, c, h * w);
                    add_into(buf, &back, 1.0);
                }
                Window::Row => {
                    for r in 0..h {
                        for ch in 0..c {
                            let src = (ch * h + r) * w;
                            let dst = (r * c + ch) * w;
                            add_into(&mut buf[dst..dst + w], &g[src..src + w], 1.0);
                        }
                    }
                }
            }
        }
        &Op::GlobalAvgPool(a) => {
            let s = val(a).shape();
            let hw = s[1] * s[2];
            let buf = grad_buf(grads, a, s[0] * hw);
            for (dst, &gc) in buf.chunks_mut(hw).zip(g) {
                for d in dst {
                    *d += gc / hw as f64;
                }
            }
        }
        Op::InstanceNorm {
            input,
            scale,
            offset,
            normalized,
            inv_std,
        } => {
            let (input, scale, offset) = (*input, *scale, *offset);
            let c = inv_std.len();
            let hw = g.len() / c;
            let gamma = val(scale).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gn = vec![0.0; c];
            for ch in 0..c {
                for j in ch * hw..(ch + 1) * hw {
                    sum_g[ch] += g[j];
                    sum_gn[ch] += g[j] * normalized[j];
                }
            }
            if wants(offset) {
                add_into(grad_buf(grads, offset, c), &sum_g, 1.0);
            }
            if wants(scale) {
                add_into(grad_buf(grads, scale, c), &sum_gn, 1.0);
            }
            if wants(input) {
                let buf = grad_buf(grads, input, c * hw);
                let n = hw as f64;
                for ch in 0..c {
                    let f = gamma[ch] * inv_std[ch] / n;
                    for j in ch * hw..(ch + 1) * hw {
                        buf[j] += f * (n * g[j] - sum_g[ch] - normalized[j] * sum_gn[ch]);
                    }
                }
            }
        }
        &Op::RowCosine(a, b) => {
            let (x, y) = (val(a), val(b));
            let d = x.shape()[1];
            let mut ga = vec![0.0; x.numel()];
            let mut gb = vec![0.0; x.numel()];
            for (r, &gr) in g.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let parts = CosineParts::new(&x.data()[span.clone()], &y.data()[span.clone()]);
                parts.grad_into(gr, &mut ga[span.clone()], &mut gb[span]);
            }
            if wants(a) {
                add_into(grad_buf(grads, a, ga.len()), &ga, 1.0);
            }
            if wants(b) {
                add_into(grad_buf(grads, b, gb.len()), &gb, 1.0);
            }
        }
        &Op::Bce { p, label } => {
            let q = val(p).item();
            let d = if q <= PROB_CLAMP || q >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                -(label / q - (1.0 - label) / (1.0 - q))
            };
            grad_buf(grads, p, 1)[0] += g[0] * d;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x p`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_batched(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = x[off + i * n + j];
            }
        }
    }
    out
}

/// Calls `f(dst, src)` for every in-bounds entry of the centred `k x k`
/// patch layout `[H*W, C, k*k]`; padded entries are skipped.
fn square_patch_indices(c: usize, h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize)) {
    let r = (k / 2) as isize;
    for i in 0..h {
        for j in 0..w {
            let pos = i * w + j;
            for ch in 0..c {
                let base = (pos * c + ch) * k * k;
                for dy in 0..k {
                    let y = i as isize + dy as isize - r;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let x = j as isize + dx as isize - r;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        f(base + dy * k + dx, (ch * h + y as usize) * w + x as usize);
                    }
                }
            }
        }
    }
}

fn conv_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * hw_out];
    for co in 0..g.c_out {
        out[co * hw_out..(co + 1) * hw_out].fill(bias[co]);
    }
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let in_row = &input[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        let out_row = &mut out[(co * g.h_out + oy) * g.w_out..][..g.w_out];
                        if g.stride == 1 {
                            let src = &in_row[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                            for (o, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(gout: &[f64], kernel: &[f64], g: &ConvGeom, din: &mut [f64]) {
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let g_row = &gout[(co * g.h_out + oy) * g.w_out..][..g.w_out];
                        let d_row = &mut din[(ci * g.h + iy) * g.w..][..g.w];
                        if g.stride == 1 {
                            let dst = &mut d_row[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                            for (d, &gv) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                d_row[ox * g.stride + kx - g.pad] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(gout: &[f64], input: &[f64], g: &ConvGeom, dk: &mut [f64]) {
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.w_out);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let g_row = &gout[(co * g.h_out + oy) * g.w_out..][..g.w_out];
                        let in_row = &input[(ci * g.h + iy) * g.w..][..g.w];
                        if g.stride == 1 {
                            let src = &in_row[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                            acc += g_row[ox_lo..ox_hi]
                                .iter()
                                .zip(src)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += g_row[ox] * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    dk[((co * g.c_in + ci) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}

/// Intermediate quantities of the mean-centred cosine similarity of two
/// equal-length vectors.
pub(crate) struct CosineParts {
    xc: Vec<f64>,
    yc: Vec<f64>,
    dot: f64,
    nx: f64,
    ny: f64,
}

impl CosineParts {
    pub(crate) fn new(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
        let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
        let dot = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
        let nx = xc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = yc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { xc, yc, dot, nx, ny }
    }

    fn denom(&self) -> f64 {
        self.nx * self.ny + COSINE_EPS
    }

    pub(crate) fn sim(&self) -> f64 {
        self.dot / self.denom()
    }

    /// Accumulates `upstream * d sim / d x` and `... / d y`.
    fn grad_into(&self, upstream: f64, gx: &mut [f64], gy: &mut [f64]) {
        let den = self.denom();
        let s = self.dot;
        // Partial derivatives with respect to the centred vectors; the
        // centring projection is applied afterwards by removing the mean.
        let one_side = |own: &[f64], other: &[f64], n_own: f64, n_other: f64, out: &mut [f64]| {
            let radial = if n_own > 0.0 {
                s * n_other / (n_own * den * den)
            } else {
                0.0
            };
            let tmp: Vec<f64> = own
                .iter()
                .zip(other)
                .map(|(&o, &t)| t / den - radial * o)
                .collect();
            let mean = tmp.iter().sum::<f64>() / tmp.len() as f64;
            for (d, v) in out.iter_mut().zip(tmp) {
                *d += upstream * (v - mean);
            }
        };
        one_side(&self.xc, &self.yc, self.nx, self.ny, gx);
        one_side(&self.yc, &self.xc, self.ny, self.nx, gy);
    }
}
