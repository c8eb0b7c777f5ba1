use crate::error::{Error, Result};

use super::{NdArray, Real};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        // im2col buffer; empty for 1x1/stride-1/no-pad kernels, which read `x`
        // directly, and for stride-1 "same" kernels, which use the direct path.
        cols: Vec<T>,
        same: bool,
    },
    OneHotConv {
        cells: Vec<u16>,
        height: usize,
        width: usize,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softplus {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        s: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    CornerPool {
        x: Var,
        down_arg: Vec<u32>,
        right_arg: Vec<u32>,
    },
    SelectChannels {
        x: Var,
        channels: Vec<usize>,
    },
    Crop {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
        scale: T,
    },
    BceLogits {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    Laplace {
        mu: Var,
        b_raw: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        b_min: T,
    },
    WeightedL1 {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph. Nodes are stored in creation order, which
/// is a topological order, so the backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    let relu = if x > T::ZERO { x } else { T::ZERO };
    relu + (T::ONE + (-x.abs()).exp()).ln()
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::ZERO {
        T::ONE
    } else if x < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::shape(format!(
            "kernel {k} does not fit input extent {size} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn parameter(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of a `C_in x H x W` input with `C_out x C_in x k x k`
    /// kernels and an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::shape(format!("conv kernel must be 4-D, got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv channel mismatch: input has {cin}, kernel expects {wcin}"
            )));
        }
        if kh != kw {
            return Err(Error::shape("conv kernels must be square"));
        }
        let k = kh;
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv bias length must equal output channels"));
            }
        }
        let ho = out_extent(h, k, stride, pad)?;
        let wo = out_extent(wd, k, stride, pad)?;
        let n = ho * wo;
        let ckk = cin * k * k;

        let direct = k == 1 && stride == 1 && pad == 0;
        let same = !direct && stride == 1 && k % 2 == 1 && pad == (k - 1) / 2;
        let cols = if direct || same {
            Vec::new()
        } else {
            im2col(self.value(x).data(), cin, h, wd, k, stride, pad, ho, wo)
        };

        let mut out = vec![T::ZERO; cout * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, row) in out.chunks_mut(n).enumerate() {
                row.fill(bias[co]);
            }
        }
        if same {
            super::direct::forward(self.value(x).data(), cin, h, wd, self.value(w).data(), cout, k, &mut out);
        } else {
            let src: &[T] = if direct { self.value(x).data() } else { &cols };
            T::gemm(
                cout,
                ckk,
                n,
                T::ONE,
                self.value(w).data(),
                (ckk, 1),
                src,
                (n, 1),
                T::ONE,
                &mut out,
                (n, 1),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = NdArray::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
                same,
            },
            rg,
        ))
    }

    /// Stride-1 "same" convolution applied to the one-hot encoding of an
    /// index grid without materializing the one-hot stack. Equivalent to
    /// `conv2d(one_hot(cells), w, b, 1, (k - 1) / 2)`.
    pub fn one_hot_conv2d(
        &mut self,
        cells: &[u16],
        height: usize,
        width: usize,
        w: Var,
        b: Option<Var>,
    ) -> Result<Var> {
        if cells.len() != height * width {
            return Err(Error::shape("cell grid does not match its extent"));
        }
        let ws = self.value(w).shape().to_vec();
        let [cout, classes, k, k2] = ws[..] else {
            return Err(Error::shape(format!("conv kernel must be 4-D, got {ws:?}")));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("one-hot conv needs an odd square kernel"));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::shape(format!(
                "cell index {bad} outside kernel's {classes} input channels"
            )));
        }
        let pad = (k - 1) / 2;
        // kernel reordered to [class][ky][kx][cout] so each tap is a contiguous run
        let wt = transpose_kernel_to_tap_major(self.value(w).data(), cout, classes * k * k);
        let hw = height * width;
        let mut out = vec![T::ZERO; cout * hw];
        let mut acc = vec![T::ZERO; cout];
        for y in 0..height {
            for x in 0..width {
                match b {
                    Some(b) => acc.copy_from_slice(self.value(b).data()),
                    None => acc.fill(T::ZERO),
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let c = cells[sy as usize * width + sx as usize] as usize;
                        let tap = ((c * k + ky) * k + kx) * cout;
                        for (a, &wv) in acc.iter_mut().zip(&wt[tap..tap + cout]) {
                            *a += wv;
                        }
                    }
                }
                let p = y * width + x;
                for (co, &a) in acc.iter().enumerate() {
                    out[co * hw + p] = a;
                }
            }
        }
        let rg = self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = NdArray::from_vec(&[cout, height, width], out)?;
        Ok(self.push(
            value,
            Op::OneHotConv {
                cells: cells.to_vec(),
                height,
                width,
                w,
                b,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first cell in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let value = NdArray::from_vec(&[c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        let (c, h, w) = self.value(x).dims3()?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                let row = &src[ch * h * w + (oy / factor) * w..][..w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let rg = self.rg(x);
        let value = NdArray::from_vec(&[c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let value = NdArray::from_vec(v.shape(), data).expect("same length");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > T::ZERO { a } else { T::ZERO }, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(
            x,
            move |a| if a > T::ZERO { a } else { a * s },
            Op::LeakyRelu { x, slope: s },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    /// Softmax over the leading axis, independently at each trailing position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.first().ok_or_else(|| Error::shape("softmax of a 0-d array"))?;
        let n = self.value(x).len() / c.max(1);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for p in 0..n {
            let mut m = src[p];
            for ch in 1..c {
                m = m.max(src[ch * n + p]);
            }
            let mut z = T::ZERO;
            for ch in 0..c {
                let e = (src[ch * n + p] - m).exp();
                out[ch * n + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * n + p] = out[ch * n + p] / z;
            }
        }
        let rg = self.rg(x);
        let value = NdArray::from_vec(&shape, out)?;
        Ok(self.push(value, Op::SoftmaxChannels { x }, rg))
    }

    /// Concatenate along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.value(v).shape();
            if s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat trailing extents differ: {:?} vs {tail:?}",
                    &s[1..]
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&v| self.rg(v));
        let value = NdArray::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = NdArray::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(x, move |a| a * s, Op::ScalarMul { x, s })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::ZERO,
            &mut out,
            (n, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        let value = NdArray::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let value = NdArray::from_vec(&[c, r], transpose(self.value(x).data(), r, c))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Sum of the downward suffix max (rows `i..H`) and the rightward suffix
    /// max (columns `j..W`) at every location, per channel.
    pub fn corner_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (down, right, down_arg, right_arg) = corner_pool_forward(self.value(x).data(), c, h, w);
        let out = down.iter().zip(&right).map(|(&a, &b)| a + b).collect();
        let rg = self.rg(x);
        let value = NdArray::from_vec(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Op::CornerPool {
                x,
                down_arg,
                right_arg,
            },
            rg,
        ))
    }

    pub fn select_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(channels.len() * hw);
        for &ch in channels {
            if ch >= c {
                return Err(Error::shape(format!("channel {ch} out of {c}")));
            }
            data.extend_from_slice(&src[ch * hw..(ch + 1) * hw]);
        }
        let value = NdArray::from_vec(&[channels.len(), h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectChannels {
                x,
                channels: channels.to_vec(),
            },
            rg,
        ))
    }

    /// Keep the top-left `height x width` window of every channel.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if height > h || width > w {
            return Err(Error::shape(format!("crop {height}x{width} exceeds {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                data.extend_from_slice(&src[ch * h * w + y * w..][..width]);
            }
        }
        let value = NdArray::from_vec(&[c, height, width], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Crop { x }, rg))
    }

    /// Scalar `sum_i x_i * weights_i`.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot_const weight length mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(NdArray::scalar(s), Op::DotConst { x, weights }, rg))
    }

    /// Mean over cells of the softmax cross-entropy of `C x H x W` logits
    /// against per-cell class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        let n = h * w;
        if targets.len() != n {
            return Err(Error::shape("cross-entropy target extent mismatch"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::shape(format!("target class {t} outside {c} logits")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::ZERO; c * n];
        let mut total = T::ZERO;
        for p in 0..n {
            let mut m = src[p];
            for ch in 1..c {
                m = m.max(src[ch * n + p]);
            }
            let mut z = T::ZERO;
            for ch in 0..c {
                let e = (src[ch * n + p] - m).exp();
                probs[ch * n + p] = e;
                z += e;
            }
            let t = targets[p] as usize;
            total += z.ln() - (src[t * n + p] - m);
            for ch in 0..c {
                probs[ch * n + p] = probs[ch * n + p] / z;
            }
        }
        let scale = T::ONE / T::from_f64(n.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            NdArray::scalar(total * scale),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// `sum_i w_i * BCE(sigmoid(x_i), t_i)` computed from logits.
    pub fn bce_logits(&mut self, x: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("bce target/weight length mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(&weights))
            .map(|(&a, (&t, &wt))| wt * (softplus(a) - t * a))
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            NdArray::scalar(s),
            Op::BceLogits {
                x,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// Laplace negative log-likelihood `sum_i w_i * (|t_i - mu_i| / b_i + ln(2 b_i))`
    /// with `b_i = max(softplus(b_raw_i), b_min)`.
    pub fn laplace(
        &mut self,
        mu: Var,
        b_raw: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        b_min: f64,
    ) -> Result<Var> {
        let n = self.value(mu).len();
        if self.value(b_raw).len() != n || targets.len() != n || weights.len() != n {
            return Err(Error::shape("laplace operand length mismatch"));
        }
        let b_min = T::from_f64(b_min);
        let two = T::from_f64(2.0);
        let mut s = T::ZERO;
        for i in 0..n {
            let wt = weights[i];
            if wt == T::ZERO {
                continue;
            }
            let b = softplus(self.value(b_raw).data()[i]).max(b_min);
            let r = (targets[i] - self.value(mu).data()[i]).abs();
            s += wt * (r / b + (two * b).ln());
        }
        let rg = self.rg(mu) || self.rg(b_raw);
        Ok(self.push(
            NdArray::scalar(s),
            Op::Laplace {
                mu,
                b_raw,
                targets,
                weights,
                b_min,
            },
            rg,
        ))
    }

    /// `sum_i w_i * |x_i - t_i|`.
    pub fn weighted_l1(&mut self, x: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("l1 target/weight length mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(&weights))
            .map(|(&a, (&t, &wt))| wt * (a - t).abs())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            NdArray::scalar(s),
            Op::WeightedL1 {
                x,
                targets,
                weights,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar node. Gradients of earlier calls are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(NdArray::full(self.value(loss).shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut NdArray<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(self.grads[v.0].get_or_insert_with(|| NdArray::zeros(shape)))
    }

    fn backward_node(&mut self, i: usize, g: &NdArray<T>) {
        // Ops are moved out while their inputs' gradients are written, then restored.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
                same,
            } => {
                if *same {
                    self.same_conv_backward(i, g, *x, *w, *b);
                } else {
                    self.conv2d_backward(i, g, *x, *w, *b, *stride, *pad, cols);
                }
            }
            Op::OneHotConv {
                cells,
                height,
                width,
                w,
                b,
            } => {
                let ws = self.value(*w).shape().to_vec();
                let (cout, classes, k) = (ws[0], ws[1], ws[2]);
                let pad = (k - 1) / 2;
                let hw = height * width;
                let gd = g.data();
                if let Some(gb) = b.and_then(|b| self.acc(b)) {
                    for (co, slot) in gb.data_mut().iter_mut().enumerate() {
                        *slot += gd[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                if let Some(gw) = self.acc(*w) {
                    let mut gt = vec![T::ZERO; classes * k * k * cout];
                    let mut gpix = vec![T::ZERO; cout];
                    for y in 0..*height {
                        for x in 0..*width {
                            let p = y * width + x;
                            for (co, slot) in gpix.iter_mut().enumerate() {
                                *slot = gd[co * hw + p];
                            }
                            for ky in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                if sy < 0 || sy >= *height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let sx = x as isize + kx as isize - pad as isize;
                                    if sx < 0 || sx >= *width as isize {
                                        continue;
                                    }
                                    let c = cells[sy as usize * width + sx as usize] as usize;
                                    let tap = ((c * k + ky) * k + kx) * cout;
                                    for (a, &gv) in gt[tap..tap + cout].iter_mut().zip(&gpix) {
                                        *a += gv;
                                    }
                                }
                            }
                        }
                    }
                    // back to [cout][class][ky][kx]
                    let taps = classes * k * k;
                    for (t, row) in gt.chunks(cout).enumerate() {
                        for (co, &v) in row.iter().enumerate() {
                            gw.data_mut()[co * taps + t] += v;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.acc(*x) {
                    let d = gx.data_mut();
                    for (&a, &gv) in argmax.iter().zip(g.data()) {
                        d[a as usize] += gv;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let f = *factor;
                let (c, h, w) = self.value(*x).dims3().expect("3-d");
                if let Some(gx) = self.acc(*x) {
                    let (ho, wo) = (h * f, w * f);
                    let d = gx.data_mut();
                    let gd = g.data();
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                d[ch * h * w + (oy / f) * w + ox / f] += gd[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                // the output is positive exactly where the input is
                let ys = std::mem::take(&mut self.nodes[i].value);
                if let Some(gx) = self.acc(*x) {
                    for ((d, &a), &gv) in gx.data_mut().iter_mut().zip(ys.data()).zip(g.data()) {
                        if a > T::ZERO {
                            *d += gv;
                        }
                    }
                }
                self.nodes[i].value = ys;
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                let xs = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for ((d, &a), &gv) in gx.data_mut().iter_mut().zip(&xs).zip(g.data()) {
                        *d += if a > T::ZERO { gv } else { gv * s };
                    }
                }
            }
            Op::Softplus { x } => {
                let xs = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for ((d, &a), &gv) in gx.data_mut().iter_mut().zip(&xs).zip(g.data()) {
                        *d += gv * sigmoid(a);
                    }
                }
            }
            Op::SoftmaxChannels { x } => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.shape()[0];
                let n = y.len() / c.max(1);
                if let Some(gx) = self.acc(*x) {
                    let gd = g.data();
                    let d = gx.data_mut();
                    for p in 0..n {
                        let dot: T = (0..c).map(|ch| gd[ch * n + p] * y[ch * n + p]).sum();
                        for ch in 0..c {
                            let idx = ch * n + p;
                            d[idx] += y[idx] * (gd[idx] - dot);
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let mut off = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    if let Some(gx) = self.acc(v) {
                        for (d, &gv) in gx.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(*a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.add_assign(g);
                }
            }
            Op::ScalarMul { x, s } => {
                let s = *s;
                if let Some(gx) = self.acc(*x) {
                    for (d, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * s;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("2-d");
                let n = self.value(*b).shape()[1];
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    // dA = G * B^T
                    T::gemm(m, n, k, T::ONE, g.data(), (n, 1), &bv, (1, n), T::ONE, ga.data_mut(), (k, 1));
                }
                if let Some(gb) = self.acc(*b) {
                    // dB = A^T * G
                    T::gemm(k, m, n, T::ONE, &av, (1, k), g.data(), (n, 1), T::ONE, gb.data_mut(), (n, 1));
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.value(*x).dims2().expect("2-d");
                if let Some(gx) = self.acc(*x) {
                    // g is c x r
                    let t = transpose(g.data(), c, r);
                    for (d, v) in gx.data_mut().iter_mut().zip(t) {
                        *d += v;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(*x) {
                    for (d, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::Crop { x } => {
                let (c, h, w) = self.value(*x).dims3().expect("3-d");
                let (_, ch_, cw) = g.dims3().expect("3-d");
                if let Some(gx) = self.acc(*x) {
                    let d = gx.data_mut();
                    for ch in 0..c {
                        for y in 0..ch_ {
                            for xx in 0..cw {
                                d[ch * h * w + y * w + xx] += g.data()[(ch * ch_ + y) * cw + xx];
                            }
                        }
                    }
                }
            }
            Op::CornerPool {
                x,
                down_arg,
                right_arg,
            } => {
                if let Some(gx) = self.acc(*x) {
                    let d = gx.data_mut();
                    for ((&a, &b), &gv) in down_arg.iter().zip(right_arg).zip(g.data()) {
                        d[a as usize] += gv;
                        d[b as usize] += gv;
                    }
                }
            }
            Op::SelectChannels { x, channels } => {
                let (_, h, w) = self.value(*x).dims3().expect("3-d");
                let hw = h * w;
                if let Some(gx) = self.acc(*x) {
                    let d = gx.data_mut();
                    for (j, &ch) in channels.iter().enumerate() {
                        for (dv, &gv) in d[ch * hw..(ch + 1) * hw].iter_mut().zip(&g.data()[j * hw..(j + 1) * hw]) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::DotConst { x, weights } => {
                let gs = g.item();
                if let Some(gx) = self.acc(*x) {
                    for (d, &wv) in gx.data_mut().iter_mut().zip(weights) {
                        *d += gs * wv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let gs = g.item() * *scale;
                let n = targets.len();
                if let Some(gx) = self.acc(*logits) {
                    let d = gx.data_mut();
                    for (idx, (dv, &p)) in d.iter_mut().zip(probs).enumerate() {
                        *dv += gs * p;
                        let (ch, cell) = (idx / n, idx % n);
                        if targets[cell] as usize == ch {
                            *dv -= gs;
                        }
                    }
                }
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                let gs = g.item();
                let xs = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for (j, d) in gx.data_mut().iter_mut().enumerate() {
                        *d += gs * weights[j] * (sigmoid(xs[j]) - targets[j]);
                    }
                }
            }
            Op::Laplace {
                mu,
                b_raw,
                targets,
                weights,
                b_min,
            } => {
                let gs = g.item();
                let mus = self.value(*mu).data().to_vec();
                let raws = self.value(*b_raw).data().to_vec();
                let mut gmu = vec![T::ZERO; mus.len()];
                let mut graw = vec![T::ZERO; mus.len()];
                for j in 0..mus.len() {
                    let wt = weights[j];
                    if wt == T::ZERO {
                        continue;
                    }
                    let sp = softplus(raws[j]);
                    let clamped = sp <= *b_min;
                    let b = sp.max(*b_min);
                    let diff = mus[j] - targets[j];
                    gmu[j] = gs * wt * sign(diff) / b;
                    if !clamped {
                        let db = -diff.abs() / (b * b) + T::ONE / b;
                        graw[j] = gs * wt * db * sigmoid(raws[j]);
                    }
                }
                if let Some(gx) = self.acc(*mu) {
                    for (d, v) in gx.data_mut().iter_mut().zip(gmu) {
                        *d += v;
                    }
                }
                if let Some(gx) = self.acc(*b_raw) {
                    for (d, v) in gx.data_mut().iter_mut().zip(graw) {
                        *d += v;
                    }
                }
            }
            Op::WeightedL1 {
                x,
                targets,
                weights,
            } => {
                let gs = g.item();
                let xs = self.value(*x).data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for (j, d) in gx.data_mut().iter_mut().enumerate() {
                        *d += gs * weights[j] * sign(xs[j] - targets[j]);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn same_conv_backward(&mut self, i: usize, g: &NdArray<T>, x: Var, w: Var, b: Option<Var>) {
        let (cout, h, wd) = self.nodes[i].value.dims3().expect("3-d");
        let cin = self.value(x).shape()[0];
        let k = self.value(w).shape()[2];
        let n = h * wd;
        let gd = g.data();
        if let Some(gb) = b.and_then(|b| self.acc(b)) {
            for (co, slot) in gb.data_mut().iter_mut().enumerate() {
                *slot += gd[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        if self.rg(w) {
            let xv = std::mem::take(&mut self.nodes[x.0].value);
            let gw = self.acc(w).expect("requires grad");
            super::direct::backward_weight(gd, cout, h, wd, xv.data(), cin, k, gw.data_mut());
            self.nodes[x.0].value = xv;
        }
        if self.rg(x) {
            let wv = std::mem::take(&mut self.nodes[w.0].value);
            let gx = self.acc(x).expect("requires grad");
            super::direct::backward_input(gd, cout, h, wd, wv.data(), cin, k, gx.data_mut());
            self.nodes[w.0].value = wv;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        i: usize,
        g: &NdArray<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[T],
    ) {
        let (cout, ho, wo) = self.nodes[i].value.dims3().expect("3-d");
        let n = ho * wo;
        let (cin, h, wd) = self.value(x).dims3().expect("3-d");
        let k = self.value(w).shape()[2];
        let ckk = cin * k * k;
        let gd = g.data();

        if let Some(gb) = b.and_then(|b| self.acc(b)) {
            for (co, slot) in gb.data_mut().iter_mut().enumerate() {
                *slot += gd[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        if self.rg(w) {
            let xdata;
            let src: &[T] = if cols.is_empty() {
                xdata = self.value(x).data().to_vec();
                &xdata
            } else {
                cols
            };
            let gw = self.acc(w).expect("requires grad");
            // dW = G * cols^T
            T::gemm(cout, n, ckk, T::ONE, gd, (n, 1), src, (1, n), T::ONE, gw.data_mut(), (ckk, 1));
        }
        if self.rg(x) {
            let wv = self.value(w).data().to_vec();
            let mut dcols = vec![T::ZERO; ckk * n];
            // dcols = W^T * G
            T::gemm(ckk, cout, n, T::ONE, &wv, (1, ckk), gd, (n, 1), T::ZERO, &mut dcols, (n, 1));
            let gx = self.acc(x).expect("requires grad");
            if cols.is_empty() {
                gx.data_mut().iter_mut().zip(&dcols).for_each(|(d, &v)| *d += v);
            } else {
                col2im_add(&dcols, gx.data_mut(), cin, h, wd, k, stride, pad, ho, wo);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::ZERO; cin * k * k * n];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[c * h * w + sy as usize * w..][..w];
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[oy * wo + ox] = srow[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    dcols: &[T],
    dst: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let n = ho * wo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let srcrow = &dcols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[c * h * w + sy as usize * w..][..w];
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] += srcrow[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn transpose_kernel_to_tap_major<T: Real>(w: &[T], cout: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for co in 0..cout {
        for t in 0..taps {
            out[t * cout + co] = w[co * taps + t];
        }
    }
    out
}

/// Reverse cumulative max along rows (downward) and columns (rightward).
/// Returns `(down, right, down_argmax, right_argmax)` with flat source indices;
/// ties resolve to the position nearest the query cell.
pub(crate) fn corner_pool_forward<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<u32>, Vec<u32>) {
    let len = c * h * w;
    let mut down = vec![T::ZERO; len];
    let mut right = vec![T::ZERO; len];
    let mut down_arg = vec![0u32; len];
    let mut right_arg = vec![0u32; len];
    for ch in 0..c {
        let base = ch * h * w;
        for x in 0..w {
            let mut best = base + (h - 1) * w + x;
            for y in (0..h).rev() {
                let i = base + y * w + x;
                if src[i] >= src[best] {
                    best = i;
                }
                down[i] = src[best];
                down_arg[i] = best as u32;
            }
        }
        for y in 0..h {
            let mut best = base + y * w + w - 1;
            for x in (0..w).rev() {
                let i = base + y * w + x;
                if src[i] >= src[best] {
                    best = i;
                }
                right[i] = src[best];
                right_arg[i] = best as u32;
            }
        }
    }
    (down, right, down_arg, right_arg)
}
