//! U-Net generator: a strided-convolution encoder down to a bottleneck and a
//! mirrored transposed-convolution decoder, with encoder level `k` concatenated
//! onto the decoder input at level `k`.
//!
//! Layer pattern per level (`D` = depth, `ngf` = base channels, level width
//! `ngf * min(2^k, 8)`):
//!
//! - encoder 0: conv
//! - encoder 1..D-2: leaky relu, conv, norm
//! - encoder D-1 (innermost): leaky relu, conv
//! - decoder D-1: relu, deconv, norm
//! - decoder D-2..1: relu, deconv, norm, dropout on the three levels nearest the bottleneck
//! - decoder 0: relu, deconv, tanh

use rand_chacha::ChaCha8Rng;

use super::layers::{
    Conv2d, ConvGeometry, ConvTranspose2d, Dropout, InstanceNorm, LeakyRelu, Param, Tanh, Tensor,
};
use super::scalar::Scalar;
use super::GeneratorConfig;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
struct DownLevel<F> {
    act: Option<LeakyRelu<F>>,
    conv: Conv2d<F>,
    norm: Option<InstanceNorm<F>>,
}

impl<F: Scalar> DownLevel<F> {
    fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut h = match &mut self.act {
            Some(a) => a.forward(x),
            None => x.clone(),
        };
        h = self.conv.forward(&h);
        if let Some(n) = &mut self.norm {
            h = n.forward(&h);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<F>, input_grad: bool) -> Option<Tensor<F>> {
        let mut g = match &mut self.norm {
            Some(n) => n.backward(dy),
            None => dy.clone(),
        };
        g = self.conv.backward(&g, input_grad)?;
        Some(match &mut self.act {
            Some(a) => a.backward(&g),
            None => g,
        })
    }
}

#[derive(Debug, Clone)]
struct UpLevel<F> {
    act: LeakyRelu<F>,
    deconv: ConvTranspose2d<F>,
    norm: Option<InstanceNorm<F>>,
    dropout: Option<Dropout<F>>,
    tanh: Option<Tanh<F>>,
}

impl<F: Scalar> UpLevel<F> {
    fn forward(&mut self, x: &Tensor<F>, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
        let mut h = self.act.forward(x);
        h = self.deconv.forward(&h);
        if let Some(n) = &mut self.norm {
            h = n.forward(&h);
        }
        if let Some(d) = &mut self.dropout {
            h = d.forward(&h, rng);
        }
        if let Some(t) = &mut self.tanh {
            h = t.forward(&h);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let mut g = dy.clone();
        if let Some(t) = &mut self.tanh {
            g = t.backward(&g);
        }
        if let Some(d) = &mut self.dropout {
            g = d.backward(&g);
        }
        if let Some(n) = &mut self.norm {
            g = n.backward(&g);
        }
        g = self
            .deconv
            .backward(&g, true)
            .expect("input gradient requested");
        self.act.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub struct UNetGenerator<F> {
    config: GeneratorConfig,
    down: Vec<DownLevel<F>>,
    up: Vec<UpLevel<F>>,
    /// Encoder channel counts, cached at construction.
    widths: Vec<usize>,
}

/// Number of decoder levels next to the bottleneck that carry dropout.
pub const DROPOUT_LEVELS: usize = 3;

impl<F: Scalar> UNetGenerator<F> {
    /// Builds the network; `config` must already be validated.
    pub fn new(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let depth = config.depth;
        let widths: Vec<usize> = (0..depth).map(|k| config.level_width(k)).collect();
        let mut down = Vec::with_capacity(depth);
        for k in 0..depth {
            let (cin, cout) = if k == 0 {
                (super::IMAGE_CHANNELS, widths[0])
            } else {
                (widths[k - 1], widths[k])
            };
            let inner = k == depth - 1;
            let normed = k != 0 && !inner;
            down.push(DownLevel {
                act: (k != 0).then(|| LeakyRelu::new(LEAKY_SLOPE)),
                // A bias directly before instance norm is cancelled by the mean subtraction.
                conv: Conv2d::new(
                    &format!("gen.down{k}.conv"),
                    cin,
                    cout,
                    ConvGeometry::DOWN,
                    !normed,
                    rng,
                ),
                norm: normed.then(InstanceNorm::new),
            });
        }
        let mut up: Vec<Option<UpLevel<F>>> = (0..depth).map(|_| None).collect();
        for k in (0..depth).rev() {
            let cin = if k == depth - 1 {
                widths[k]
            } else {
                2 * widths[k]
            };
            let cout = if k == 0 {
                super::IMAGE_CHANNELS
            } else {
                widths[k - 1]
            };
            let outer = k == 0;
            let dropout = k >= 1
                && k + 1 < depth
                && depth - 1 - k <= DROPOUT_LEVELS
                && config.dropout_rate > 0.0;
            up[k] = Some(UpLevel {
                act: LeakyRelu::new(0.0),
                deconv: ConvTranspose2d::new(
                    &format!("gen.up{k}.deconv"),
                    cin,
                    cout,
                    ConvGeometry::DOWN,
                    outer,
                    rng,
                ),
                norm: (!outer).then(InstanceNorm::new),
                dropout: dropout.then(|| Dropout::new(config.dropout_rate)),
                tanh: outer.then(Tanh::default),
            });
        }
        UNetGenerator {
            config: config.clone(),
            down,
            up: up.into_iter().map(|u| u.expect("every level built")).collect(),
            widths,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Decoder levels that apply dropout.
    pub fn dropout_levels(&self) -> Vec<usize> {
        (0..self.up.len())
            .filter(|&k| self.up[k].dropout.is_some())
            .collect()
    }

    /// Shapes of the encoder outputs, outermost first.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut side = self.config.input_size;
        self.widths
            .iter()
            .map(|&c| {
                side /= 2;
                (c, side, side)
            })
            .collect()
    }

    /// Shapes of the decoder outputs, bottleneck first.
    pub fn decoder_shapes(&self) -> Vec<(usize, usize, usize)> {
        let depth = self.config.depth;
        let bottleneck = self.config.input_size >> depth;
        (0..depth)
            .rev()
            .map(|k| {
                let c = if k == 0 {
                    super::IMAGE_CHANNELS
                } else {
                    self.widths[k - 1]
                };
                let side = bottleneck << (depth - k);
                (c, side, side)
            })
            .collect()
    }

    /// Runs the network. Dropout is active iff `dropout_rng` is provided.
    pub fn forward(
        &mut self,
        x: &Tensor<F>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<F> {
        let size = self.config.input_size;
        assert_eq!(
            x.shape(),
            (super::IMAGE_CHANNELS, size, size),
            "generator input shape"
        );
        let depth = self.config.depth;
        let mut skips: Vec<Tensor<F>> = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in &mut self.down {
            h = level.forward(&h);
            skips.push(h.clone());
        }
        let mut d = self.up[depth - 1].forward(&skips[depth - 1], dropout_rng.as_deref_mut());
        for k in (0..depth - 1).rev() {
            let joined = Tensor::concat(&skips[k], &d);
            d = self.up[k].forward(&joined, dropout_rng.as_deref_mut());
        }
        d
    }

    /// Backpropagates `dy` (gradient of the loss with respect to the output),
    /// accumulating parameter gradients. The input gradient is not computed.
    pub fn backward(&mut self, dy: &Tensor<F>) {
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor<F>>> = (0..depth).map(|_| None).collect();
        let mut g = dy.clone();
        for k in 0..depth - 1 {
            let joined = self.up[k].backward(&g);
            let (skip, rest) = joined.split(self.widths[k]);
            skip_grads[k] = Some(skip);
            g = rest;
        }
        let inner = self.up[depth - 1].backward(&g);
        skip_grads[depth - 1] = Some(inner);

        for k in (0..depth).rev() {
            let grad = skip_grads[k].take().expect("encoder gradient present");
            let input = self.down[k].backward(&grad, k > 0);
            if let Some(input) = input {
                match &mut skip_grads[k - 1] {
                    Some(acc) => acc.add_assign(&input),
                    slot => *slot = Some(input),
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for level in &self.down {
            out.extend(level.conv.params());
        }
        for level in self.up.iter().rev() {
            out.extend(level.deconv.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for level in &mut self.down {
            out.extend(level.conv.params_mut());
        }
        for level in self.up.iter_mut().rev() {
            out.extend(level.deconv.params_mut());
        }
        out
    }
}
