//! Layer vocabulary: dense, 3x3 convolution, 2x2 average pooling, nearest 2x
//! upsampling, SiLU, group normalization and channel concatenation.
//!
//! Image tensors are `[N, C, H, W]`. Each `backward` takes the input that was
//! given to `forward` plus the gradient of the output, accumulates parameter
//! gradients, and returns the gradient of the input.

use super::{shape_err, Parameter, Result, Scalar, SeededRng, Tensor};

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Parameter<T>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                rng.uniform_tensor(&[outputs, inputs], bound),
            ),
            bias: bias.then(|| {
                Parameter::new(format!("{name}.bias"), rng.uniform_tensor(&[outputs], bound))
            }),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = x.dims2("dense")?;
        let (o, i) = (self.outputs(), self.inputs());
        if f != i {
            return Err(shape_err("dense", format!("input {:?}, weight [{o}, {i}]", x.shape())));
        }
        let w = self.weight.value.data();
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let xr = &x.data()[r * i..(r + 1) * i];
            for k in 0..o {
                let wk = &w[k * i..(k + 1) * i];
                let mut acc = T::zero();
                for (a, b) in xr.iter().zip(wk) {
                    acc += *a * *b;
                }
                if let Some(b) = &self.bias {
                    acc += b.value.data()[k];
                }
                out[r * o + k] = acc;
            }
        }
        Tensor::new(vec![n, o], out)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, i) = x.dims2("dense backward")?;
        let o = self.outputs();
        if grad_out.shape() != [n, o] {
            return Err(shape_err(
                "dense backward",
                format!("grad {:?}, expected [{n}, {o}]", grad_out.shape()),
            ));
        }
        let g = grad_out.data();
        let mut gin = vec![T::zero(); n * i];
        {
            let w = self.weight.value.data();
            let gw = self.weight.grad.data_mut();
            for r in 0..n {
                let xr = &x.data()[r * i..(r + 1) * i];
                let gr = &mut gin[r * i..(r + 1) * i];
                for k in 0..o {
                    let gk = g[r * o + k];
                    for j in 0..i {
                        gw[k * i + j] += gk * xr[j];
                        gr[j] += gk * w[k * i + j];
                    }
                }
            }
        }
        if let Some(b) = &mut self.bias {
            let gb = b.grad.data_mut();
            for r in 0..n {
                for k in 0..o {
                    gb[k] += g[r * o + k];
                }
            }
        }
        Tensor::new(vec![n, i], gin)
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weight `[out, in, 3, 3]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / ((inputs * 9) as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                rng.uniform_tensor(&[outputs, inputs, 3, 3], bound),
            ),
            bias: Parameter::new(format!("{name}.bias"), rng.uniform_tensor(&[outputs], bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4("conv2d")?;
        if c != self.inputs() {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", x.shape(), self.weight.value.shape()),
            ));
        }
        let oc = self.outputs();
        let hw = h * w;
        let bias = self.bias.value.data();
        let mut cols = vec![T::zero(); c * 9 * hw];
        let mut out = vec![T::zero(); n * oc * hw];
        for b in 0..n {
            im2col(&x.data()[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
            let dst = &mut out[b * oc * hw..(b + 1) * oc * hw];
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bias[o]);
            }
            T::gemm(oc, c * 9, hw, self.weight.value.data(), false, &cols, false, T::one(), dst);
        }
        Tensor::new(vec![n, oc, h, w], out)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4("conv2d backward")?;
        let oc = self.outputs();
        if c != self.inputs() || grad_out.shape() != [n, oc, h, w] {
            return Err(shape_err(
                "conv2d backward",
                format!("grad {:?}, input {:?}", grad_out.shape(), x.shape()),
            ));
        }
        let hw = h * w;
        let mut cols = vec![T::zero(); c * 9 * hw];
        let mut gcols = vec![T::zero(); c * 9 * hw];
        let mut gin = vec![T::zero(); n * c * hw];
        for b in 0..n {
            let g = &grad_out.data()[b * oc * hw..(b + 1) * oc * hw];
            for (o, plane) in g.chunks(hw).enumerate() {
                self.bias.grad.data_mut()[o] += plane.iter().copied().sum();
            }
            im2col(&x.data()[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
            T::gemm(oc, hw, c * 9, g, false, &cols, true, T::one(), self.weight.grad.data_mut());
            T::gemm(c * 9, oc, hw, self.weight.value.data(), true, g, false, T::zero(), &mut gcols);
            col2im_add(&gcols, c, h, w, &mut gin[b * c * hw..(b + 1) * c * hw]);
        }
        Tensor::new(vec![n, c, h, w], gin)
    }
}

/// Unfolds one `[C, H, W]` image into `[C * 9, H * W]` patch columns, row
/// `(i * 3 + ky) * 3 + kx` holding input channel `i` shifted by the kernel
/// offset, zero outside the image.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for i in 0..c {
        let inp = &x[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (xlo, xhi) = valid_range(w, dx);
                let row = &mut cols[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                row.fill(T::zero());
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let sx = (xlo as isize + dx) as usize;
                    row[y * w + xlo..y * w + xhi].copy_from_slice(&inp[sy * w + sx..sy * w + sx + (xhi - xlo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `gin`.
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, gin: &mut [T]) {
    let hw = h * w;
    for i in 0..c {
        let dst = &mut gin[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (xlo, xhi) = valid_range(w, dx);
                let row = &cols[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let sx = (xlo as isize + dx) as usize;
                    for (d, g) in dst[sy * w + sx..].iter_mut().zip(&row[y * w + xlo..y * w + xhi]) {
                        *d += *g;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub eps: f64,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            groups,
            eps: 1e-5,
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4("group_norm")?;
        if c != self.gamma.value.len() {
            return Err(shape_err(
                "group_norm",
                format!("input {:?}, {} channels configured", x.shape(), self.gamma.value.len()),
            ));
        }
        Ok((n, c, h * w))
    }

    /// Mean and reciprocal standard deviation for every (batch, group).
    fn stats(&self, x: &Tensor<T>, n: usize, c: usize, hw: usize) -> Vec<(T, T)> {
        let cg = c / self.groups;
        let m = T::lit((cg * hw) as f64);
        let mut out = Vec::with_capacity(n * self.groups);
        for b in 0..n {
            for g in 0..self.groups {
                let start = (b * c + g * cg) * hw;
                let slice = &x.data()[start..start + cg * hw];
                let mean = slice.iter().copied().sum::<T>() / m;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                out.push((mean, T::one() / (var + T::lit(self.eps)).sqrt()));
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, hw) = self.check(x)?;
        let cg = c / self.groups;
        let stats = self.stats(x, n, c, hw);
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let (mean, rstd) = stats[b * self.groups + ch / cg];
                let plane = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for v in plane {
                    *v = gamma[ch] * (*v - mean) * rstd + beta[ch];
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, hw) = self.check(x)?;
        x.same_shape(grad_out, "group_norm backward")?;
        let cg = c / self.groups;
        let m = T::lit((cg * hw) as f64);
        let stats = self.stats(x, n, c, hw);
        let gamma = self.gamma.value.data().to_vec();
        let mut gin = vec![T::zero(); x.len()];
        for b in 0..n {
            for g in 0..self.groups {
                let (mean, rstd) = stats[b * self.groups + g];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ch in g * cg..(g + 1) * cg {
                    let base = (b * c + ch) * hw;
                    let mut dgamma = T::zero();
                    let mut dbeta = T::zero();
                    for k in 0..hw {
                        let xhat = (x.data()[base + k] - mean) * rstd;
                        let go = grad_out.data()[base + k];
                        dgamma += go * xhat;
                        dbeta += go;
                        let dxhat = go * gamma[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    self.gamma.grad.data_mut()[ch] += dgamma;
                    self.beta.grad.data_mut()[ch] += dbeta;
                }
                for ch in g * cg..(g + 1) * cg {
                    let base = (b * c + ch) * hw;
                    for k in 0..hw {
                        let xhat = (x.data()[base + k] - mean) * rstd;
                        let dxhat = grad_out.data()[base + k] * gamma[ch];
                        gin[base + k] =
                            rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), gin)
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.same_shape(grad_out, "silu backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("avg_pool2", format!("odd spatial size {:?}", x.shape())));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + cc + d) * quarter;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(x_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4("avg_pool2 backward")?;
    if x_shape != [n, c, oh * 2, ow * 2] {
        return Err(shape_err(
            "avg_pool2 backward",
            format!("grad {:?}, input {x_shape:?}", grad_out.shape()),
        ));
    }
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::lit(0.25);
    let mut gin = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = g[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gin)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("upsample2")?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4("upsample2 backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err("upsample2 backward", format!("{:?}", grad_out.shape())));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut gin = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gin[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += g[y * ow + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gin)
}

/// Concatenates two `[N, C, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for k in 0..n {
        out.extend_from_slice(&a.data()[k * sa..(k + 1) * sa]);
        out.extend_from_slice(&b.data()[k * sb..(k + 1) * sb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`]: splits after the first `ca` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if ca > c {
        return Err(shape_err("split_channels", format!("{ca} of {:?}", x.shape())));
    }
    let cb = c - ca;
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for k in 0..n {
        let base = k * (sa + sb);
        a.extend_from_slice(&x.data()[base..base + sa]);
        b.extend_from_slice(&x.data()[base + sa..base + sa + sb]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], a)?,
        Tensor::new(vec![n, cb, h, w], b)?,
    ))
}

/// Adds a per-(sample, channel) offset `e: [N, C]` to every pixel of `x`.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("add_channel_bias")?;
    if e.shape() != [n, c] {
        return Err(shape_err(
            "add_channel_bias",
            format!("x {:?}, e {:?}", x.shape(), e.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (p, &off) in e.data().iter().enumerate() {
        for v in &mut out[p * hw..(p + 1) * hw] {
            *v += off;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of [`add_channel_bias`] with respect to `e`; the gradient with
/// respect to `x` is `grad_out` itself.
pub fn add_channel_bias_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad_out.dims4("add_channel_bias backward")?;
    let hw = h * w;
    let data = (0..n * c)
        .map(|p| grad_out.data()[p * hw..(p + 1) * hw].iter().copied().sum())
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.same_shape(target, "mse")?;
    let n = T::lit(pred.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss += d * d;
        grad.push(T::lit(2.0) * d / n);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}
