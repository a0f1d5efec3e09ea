//! Patch discriminator: scores overlapping patches of the channel-stacked
//! (condition, candidate) pair and reports a grid of logits plus their mean.

use rand_chacha::ChaCha8Rng;

use super::generator::LEAKY_SLOPE;
use super::layers::{Conv2d, ConvGeometry, InstanceNorm, LeakyRelu, Param, Tensor};
use super::scalar::Scalar;
use super::DiscriminatorConfig;

#[derive(Debug, Clone)]
struct Block<F> {
    conv: Conv2d<F>,
    norm: Option<InstanceNorm<F>>,
    act: Option<LeakyRelu<F>>,
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator<F> {
    config: DiscriminatorConfig,
    blocks: Vec<Block<F>>,
}

/// Logit grid and its arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores<F> {
    pub logits: Tensor<F>,
    pub mean: F,
}

impl<F: Scalar> PatchDiscriminator<F> {
    pub fn new(config: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let ndf = config.base_channels;
        let width = |n: usize| ndf * (1usize << n.min(3));
        let mut blocks = Vec::new();
        blocks.push(Block {
            conv: Conv2d::new(
                "disc.block0.conv",
                2 * super::IMAGE_CHANNELS,
                ndf,
                ConvGeometry::DOWN,
                true,
                rng,
            ),
            norm: None,
            act: Some(LeakyRelu::new(LEAKY_SLOPE)),
        });
        for n in 1..config.patch_levels {
            blocks.push(Block {
                conv: Conv2d::new(
                    &format!("disc.block{n}.conv"),
                    width(n - 1),
                    width(n),
                    ConvGeometry::DOWN,
                    false,
                    rng,
                ),
                norm: Some(InstanceNorm::new()),
                act: Some(LeakyRelu::new(LEAKY_SLOPE)),
            });
        }
        let last = config.patch_levels;
        blocks.push(Block {
            conv: Conv2d::new(
                &format!("disc.block{last}.conv"),
                width(last - 1),
                width(last),
                ConvGeometry::FLAT,
                false,
                rng,
            ),
            norm: Some(InstanceNorm::new()),
            act: Some(LeakyRelu::new(LEAKY_SLOPE)),
        });
        blocks.push(Block {
            conv: Conv2d::new(
                "disc.head.conv",
                width(last),
                1,
                ConvGeometry::FLAT,
                true,
                rng,
            ),
            norm: None,
            act: None,
        });
        PatchDiscriminator {
            config: config.clone(),
            blocks,
        }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Side of the logit grid for a square input of side `input_size`, or
    /// `None` when the input is too small for the configured depth.
    pub fn grid_size(&self, input_size: usize) -> Option<usize> {
        self.blocks
            .iter()
            .try_fold(input_size, |side, b| b.conv.geometry.conv_out(side))
            .filter(|&s| s > 0)
    }

    pub fn forward(&mut self, condition: &Tensor<F>, candidate: &Tensor<F>) -> PatchScores<F> {
        assert_eq!(condition.shape(), candidate.shape(), "discriminator input shapes");
        let mut h = Tensor::concat(condition, candidate);
        for block in &mut self.blocks {
            h = block.conv.forward(&h);
            if let Some(n) = &mut block.norm {
                h = n.forward(&h);
            }
            if let Some(a) = &mut block.act {
                h = a.forward(&h);
            }
        }
        let total = h.data.iter().fold(F::zero(), |a, v| a + *v);
        let mean = total / F::of(h.data.len() as f64);
        PatchScores { logits: h, mean }
    }

    /// Backpropagates the gradient on the logit grid. Returns the gradient
    /// with respect to the candidate image when `candidate_grad` is set.
    pub fn backward(&mut self, dlogits: &Tensor<F>, candidate_grad: bool) -> Option<Tensor<F>> {
        let mut g = dlogits.clone();
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(a) = &mut block.act {
                g = a.backward(&g);
            }
            if let Some(n) = &mut block.norm {
                g = n.backward(&g);
            }
            let need_input = i > 0 || candidate_grad;
            match block.conv.backward(&g, need_input) {
                Some(next) => g = next,
                None => return None,
            }
        }
        let (_condition, candidate) = g.split(super::IMAGE_CHANNELS);
        Some(candidate)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.blocks.iter().flat_map(|b| b.conv.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.conv.params_mut())
            .collect()
    }
}
