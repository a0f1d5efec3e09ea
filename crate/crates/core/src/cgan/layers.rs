//! Network building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! forward call must be followed by at most one matching `backward`. Parameter
//! gradients accumulate until [`Param::zero_grad`] is called.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;

/// Channel-major feature map (C x H x W) for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks two maps of equal spatial size along the channel axis.
    pub fn concat(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`Tensor::concat`]: the first `first_channels` channels, then the rest.
    pub fn split(self, first_channels: usize) -> (Tensor<F>, Tensor<F>) {
        let n = first_channels * self.spatial();
        let mut data = self.data;
        let rest = data.split_off(n);
        (
            Tensor::from_vec(first_channels, self.height, self.width, data),
            Tensor::from_vec(
                self.channels - first_channels,
                self.height,
                self.width,
                rest,
            ),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A named trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    /// Zero-mean Gaussian initialization.
    pub fn gaussian(
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut p.value {
            *v = F::of(normal.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Geometry shared by convolution and transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const DOWN: ConvGeometry = ConvGeometry {
        kernel: 4,
        stride: 2,
        padding: 1,
    };
    pub const FLAT: ConvGeometry = ConvGeometry {
        kernel: 4,
        stride: 1,
        padding: 1,
    };

    /// Output side of a convolution over an input of side `n`.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output side of the transposed convolution over an input of side `n`.
    pub fn transposed_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Unfolds `image` (C x H x W) into columns of shape
/// `[C * k * k, out_h * out_w]` for a convolution producing `out_h x out_w`.
fn im2col<F: Scalar>(
    image: &[F],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (out_h, out_w): (usize, usize),
) -> Vec<F> {
    let k = g.kernel;
    let n_out = out_h * out_w;
    let mut cols = vec![F::zero(); c * k * k * n_out];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image, summing overlaps.
fn col2im<F: Scalar>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (out_h, out_w): (usize, usize),
) -> Vec<F> {
    let k = g.kernel;
    let n_out = out_h * out_w;
    let mut image = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut image[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
    image
}

fn add_bias<F: Scalar>(data: &mut [F], bias: &[F], spatial: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut data[c * spatial..(c + 1) * spatial] {
            *v += *b;
        }
    }
}

fn accumulate_bias_grad<F: Scalar>(grad: &mut [F], dy: &[F], spatial: usize) {
    for (c, g) in grad.iter_mut().enumerate() {
        let mut s = F::zero();
        for v in &dy[c * spatial..(c + 1) * spatial] {
            s += *v;
        }
        *g += s;
    }
}

/// 2-D convolution. Weight layout `[out, in * k * k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    cache: Option<(Vec<F>, (usize, usize, usize), (usize, usize))>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = geometry.kernel;
        Conv2d {
            in_channels,
            out_channels,
            geometry,
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![out_channels, in_channels, k, k],
                super::INIT_STD,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels])),
            cache: None,
        }
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geometry.conv_out(h)?, self.geometry.conv_out(w)?))
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self
            .output_shape(x.height, x.width)
            .expect("input smaller than kernel");
        let cols = im2col(&x.data, x.shape(), self.geometry, (oh, ow));
        let kk = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        let mut out = vec![F::zero(); self.out_channels * oh * ow];
        F::gemm(
            self.out_channels,
            kk,
            oh * ow,
            &self.weight.value,
            false,
            &cols,
            false,
            F::zero(),
            &mut out,
        );
        if let Some(b) = &self.bias {
            add_bias(&mut out, &b.value, oh * ow);
        }
        self.cache = Some((cols, x.shape(), (oh, ow)));
        Tensor::from_vec(self.out_channels, oh, ow, out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor<F>, input_grad: bool) -> Option<Tensor<F>> {
        let (cols, in_shape, (oh, ow)) = self.cache.take().expect("conv backward without forward");
        assert_eq!(dy.shape(), (self.out_channels, oh, ow), "conv grad shape");
        let kk = self.in_channels * self.geometry.kernel * self.geometry.kernel;
        F::gemm(
            self.out_channels,
            oh * ow,
            kk,
            &dy.data,
            false,
            &cols,
            true,
            F::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(&mut b.grad, &dy.data, oh * ow);
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![F::zero(); kk * oh * ow];
        F::gemm(
            kk,
            self.out_channels,
            oh * ow,
            &self.weight.value,
            true,
            &dy.data,
            false,
            F::zero(),
            &mut dcols,
        );
        let dx = col2im(&dcols, in_shape, self.geometry, (oh, ow));
        Some(Tensor::from_vec(in_shape.0, in_shape.1, in_shape.2, dx))
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Transposed 2-D convolution (fractionally strided). Weight layout `[in, out * k * k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = geometry.kernel;
        ConvTranspose2d {
            in_channels,
            out_channels,
            geometry,
            weight: Param::gaussian(
                format!("{name}.weight"),
                vec![in_channels, out_channels, k, k],
                super::INIT_STD,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.channels, self.in_channels, "deconv input channels");
        let g = self.geometry;
        let (oh, ow) = (g.transposed_out(x.height), g.transposed_out(x.width));
        let kk = self.out_channels * g.kernel * g.kernel;
        let mut cols = vec![F::zero(); kk * x.spatial()];
        F::gemm(
            kk,
            self.in_channels,
            x.spatial(),
            &self.weight.value,
            true,
            &x.data,
            false,
            F::zero(),
            &mut cols,
        );
        let mut out = col2im(
            &cols,
            (self.out_channels, oh, ow),
            g,
            (x.height, x.width),
        );
        if let Some(b) = &self.bias {
            add_bias(&mut out, &b.value, oh * ow);
        }
        self.cache = Some(x.clone());
        Tensor::from_vec(self.out_channels, oh, ow, out)
    }

    pub fn backward(&mut self, dy: &Tensor<F>, input_grad: bool) -> Option<Tensor<F>> {
        let x = self.cache.take().expect("deconv backward without forward");
        let g = self.geometry;
        let kk = self.out_channels * g.kernel * g.kernel;
        let dcols = im2col(&dy.data, dy.shape(), g, (x.height, x.width));
        F::gemm(
            self.in_channels,
            x.spatial(),
            kk,
            &x.data,
            false,
            &dcols,
            true,
            F::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(&mut b.grad, &dy.data, dy.spatial());
        }
        if !input_grad {
            return None;
        }
        let mut dx = vec![F::zero(); x.data.len()];
        F::gemm(
            self.in_channels,
            kk,
            x.spatial(),
            &self.weight.value,
            false,
            &dcols,
            false,
            F::zero(),
            &mut dx,
        );
        Some(Tensor::from_vec(x.channels, x.height, x.width, dx))
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Per-sample, per-channel normalization without learned scale or shift.
#[derive(Debug, Clone, Default)]
pub struct InstanceNorm<F> {
    cache: Option<(Tensor<F>, Vec<F>)>,
}

pub const NORM_EPS: f64 = 1e-5;

impl<F: Scalar> InstanceNorm<F> {
    pub fn new() -> Self {
        InstanceNorm { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let n = x.spatial();
        let inv_n = F::of(1.0 / n as f64);
        let mut out = x.clone();
        let mut inv_stds = Vec::with_capacity(x.channels);
        for c in 0..x.channels {
            let slice = &mut out.data[c * n..(c + 1) * n];
            let mean = slice.iter().fold(F::zero(), |a, v| a + *v) * inv_n;
            let var = slice
                .iter()
                .fold(F::zero(), |a, v| a + (*v - mean) * (*v - mean))
                * inv_n;
            let inv_std = F::one() / (var + F::of(NORM_EPS)).sqrt();
            for v in slice.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
            inv_stds.push(inv_std);
        }
        self.cache = Some((out.clone(), inv_stds));
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (y, inv_stds) = self.cache.take().expect("norm backward without forward");
        let n = y.spatial();
        let inv_n = F::of(1.0 / n as f64);
        let mut dx = dy.clone();
        for (c, inv_std) in inv_stds.into_iter().enumerate() {
            let ys = &y.data[c * n..(c + 1) * n];
            let g = &mut dx.data[c * n..(c + 1) * n];
            let mean_g = g.iter().fold(F::zero(), |a, v| a + *v) * inv_n;
            let mean_gy = g
                .iter()
                .zip(ys)
                .fold(F::zero(), |a, (gv, yv)| a + *gv * *yv)
                * inv_n;
            for (gv, yv) in g.iter_mut().zip(ys) {
                *gv = inv_std * (*gv - mean_g - *yv * mean_gy);
            }
        }
        dx
    }
}

/// Leaky rectifier; slope 0 gives the plain rectifier.
#[derive(Debug, Clone)]
pub struct LeakyRelu<F> {
    pub slope: f64,
    cache: Option<Vec<bool>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let slope = F::of(self.slope);
        let mut out = x.clone();
        let mut positive = Vec::with_capacity(x.data.len());
        for v in &mut out.data {
            let pos = *v > F::zero();
            positive.push(pos);
            if !pos {
                *v *= slope;
            }
        }
        self.cache = Some(positive);
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let positive = self.cache.take().expect("relu backward without forward");
        let slope = F::of(self.slope);
        let mut dx = dy.clone();
        for (g, pos) in dx.data.iter_mut().zip(positive) {
            if !pos {
                *g *= slope;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh<F> {
    cache: Option<Vec<F>>,
}

impl<F: Scalar> Tanh<F> {
    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.cache = Some(out.data.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let y = self.cache.take().expect("tanh backward without forward");
        let mut dx = dy.clone();
        for (g, yv) in dx.data.iter_mut().zip(y) {
            *g *= F::one() - yv * yv;
        }
        dx
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout<F> {
    pub rate: f64,
    cache: Option<Vec<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, cache: None }
    }

    /// With `rng == None` the layer is the identity.
    pub fn forward(&mut self, x: &Tensor<F>, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
        let Some(rng) = rng.filter(|_| self.rate > 0.0) else {
            self.cache = None;
            return x.clone();
        };
        let keep = F::of(1.0 / (1.0 - self.rate));
        let mask: Vec<F> = (0..x.data.len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = x.clone();
        for (v, m) in out.data.iter_mut().zip(&mask) {
            *v *= *m;
        }
        self.cache = Some(mask);
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        match self.cache.take() {
            None => dy.clone(),
            Some(mask) => {
                let mut dx = dy.clone();
                for (g, m) in dx.data.iter_mut().zip(mask) {
                    *g *= m;
                }
                dx
            }
        }
    }
}
