//! Conditional GAN for image-to-image growth prediction.
//!
//! The generator maps an early-stage image to a later-stage image; its only
//! source of randomness is dropout in the decoder. The discriminator sees the
//! condition image stacked with either the real or the generated later-stage
//! image and scores overlapping patches. Training alternates one
//! discriminator step and one generator step on
//! `adversarial + lambda_l1 * L1`.

mod checkpoint;
mod discriminator;
mod generator;
pub mod layers;
pub mod loss;
mod optim;
pub mod scalar;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use discriminator::{PatchDiscriminator, PatchScores};
pub use generator::{UNetGenerator, DROPOUT_LEVELS};
pub use layers::{Param, Tensor};
pub use loss::{loss_cgan, loss_l1, Role};
pub use optim::{learning_rate_at, Adam};
pub use scalar::Scalar;
pub use train::{
    load_training_pairs, train, write_history_csv, EpochStats, Generated, StepLosses, TrainOptions,
    Trainer,
    HISTORY_HEADER,
};

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::preprocess::{AugmentConfig, FlipSet};

pub const IMAGE_CHANNELS: usize = 3;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub base_channels: usize,
    /// Encoder (and decoder) levels; each halves the spatial size.
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_size: 256,
            base_channels: 64,
            depth: 8,
            dropout_rate: 0.5,
        }
    }
}

impl GeneratorConfig {
    /// Channel count of encoder level `k`.
    pub fn level_width(&self, k: usize) -> usize {
        self.base_channels * (1usize << k.min(3))
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth >= usize::BITS as usize {
            return Err(Error::Config(format!(
                "generator depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("generator base_channels must be positive".into()));
        }
        let bottleneck = self.bottleneck_size();
        if bottleneck == 0 || bottleneck << self.depth != self.input_size {
            return Err(Error::Config(format!(
                "input size {} is not 2^{} times a positive bottleneck size",
                self.input_size, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Number of stride-2 convolution blocks before the two stride-1 heads.
    pub patch_levels: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            patch_levels: 3,
            base_channels: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_levels == 0 {
            return Err(Error::Config("patch_levels must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config(
                "discriminator base_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Side of the logit grid for square inputs of side `input_size`.
    pub fn grid_size(&self, input_size: usize) -> Option<usize> {
        let mut side = input_size;
        for _ in 0..self.patch_levels {
            side = layers::ConvGeometry::DOWN.conv_out(side)?;
        }
        for _ in 0..2 {
            side = layers::ConvGeometry::FLAT.conv_out(side)?;
        }
        (side > 0).then_some(side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// The learning rate is constant for the first half and decays linearly
    /// to zero over the second half.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_l1: 100.0,
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 160,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_l1 must be non-negative, got {}",
                self.lambda_l1
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Named bundles of the experiment configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Field cauliflower: 256 px, 160 epochs.
    Cauliflower,
    /// Laboratory rosettes: 256 px, 40 epochs.
    Rosette,
    /// Desk-scale synthetic data: 64 px, 20 epochs, narrow networks.
    Synthetic,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cauliflower" => Ok(Profile::Cauliflower),
            "rosette" => Ok(Profile::Rosette),
            "synthetic" => Ok(Profile::Synthetic),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected cauliflower, rosette or synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl Profile {
    pub fn setup(self) -> ModelSetup {
        match self {
            Profile::Cauliflower | Profile::Rosette => ModelSetup {
                generator: GeneratorConfig::default(),
                discriminator: DiscriminatorConfig::default(),
                train: TrainConfig {
                    epochs: if self == Profile::Cauliflower { 160 } else { 40 },
                    ..TrainConfig::default()
                },
                augment: AugmentConfig::default(),
            },
            Profile::Synthetic => ModelSetup {
                generator: GeneratorConfig {
                    input_size: 64,
                    base_channels: 16,
                    depth: 6,
                    dropout_rate: 0.5,
                },
                discriminator: DiscriminatorConfig {
                    patch_levels: 3,
                    base_channels: 16,
                },
                train: TrainConfig {
                    epochs: 20,
                    learning_rate: 2e-4,
                    ..TrainConfig::default()
                },
                augment: AugmentConfig {
                    target_size: 64,
                    random_crop: false,
                    flips: FlipSet {
                        horizontal: true,
                        vertical: true,
                    },
                    ..AugmentConfig::default()
                },
            },
        }
    }
}

pub fn to_tensor<F: Scalar>(img: &ImageTensor) -> Tensor<F> {
    Tensor::from_vec(
        IMAGE_CHANNELS,
        img.height(),
        img.width(),
        img.data().iter().map(|v| F::of(f64::from(*v))).collect(),
    )
}

pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> ImageTensor {
    assert_eq!(t.channels, IMAGE_CHANNELS, "image tensors carry 3 channels");
    ImageTensor::from_clamped(
        t.height,
        t.width,
        t.data.iter().map(|v| v.as_f64() as f32).collect(),
    )
    .expect("non-empty tensor")
}

/// Generator, discriminator, their configurations and the training history.
#[derive(Debug, Clone)]
pub struct GanModel<F: Scalar = f32> {
    pub generator: UNetGenerator<F>,
    pub discriminator: PatchDiscriminator<F>,
    pub train_config: TrainConfig,
    pub history: Vec<EpochStats>,
}

impl<F: Scalar> GanModel<F> {
    /// Builds a freshly initialized model; weights are drawn from a stream
    /// seeded by `train_config.seed`.
    pub fn new(
        generator: &GeneratorConfig,
        discriminator: &DiscriminatorConfig,
        train_config: &TrainConfig,
    ) -> Result<Self> {
        generator.validate()?;
        discriminator.validate()?;
        train_config.validate()?;
        if discriminator.grid_size(generator.input_size).is_none() {
            return Err(Error::Config(format!(
                "{} px inputs are too small for {} discriminator levels",
                generator.input_size, discriminator.patch_levels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        Ok(GanModel {
            generator: UNetGenerator::new(generator, &mut rng),
            discriminator: PatchDiscriminator::new(discriminator, &mut rng),
            train_config: train_config.clone(),
            history: Vec::new(),
        })
    }

    pub fn from_setup(setup: &ModelSetup) -> Result<Self> {
        Self::new(&setup.generator, &setup.discriminator, &setup.train)
    }

    pub fn input_size(&self) -> usize {
        self.generator.config().input_size
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        let size = self.input_size();
        if x.shape() != (size, size, IMAGE_CHANNELS) {
            return Err(Error::Shape(format!(
                "model expects {size}x{size}x3 input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Maps an input image to a prediction. Passing an RNG keeps dropout
    /// active, giving a stochastic prediction; `None` is deterministic.
    pub fn generator_forward(
        &mut self,
        x: &ImageTensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ImageTensor> {
        self.check_input(x)?;
        let out = self.generator.forward(&to_tensor(x), dropout_rng);
        Ok(from_tensor(&out))
    }

    pub fn discriminator_forward(
        &mut self,
        x: &ImageTensor,
        y: &ImageTensor,
    ) -> Result<PatchScores<F>> {
        self.check_input(x)?;
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "discriminator inputs differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(self.discriminator.forward(&to_tensor(x), &to_tensor(y)))
    }

    /// Converts the parameters to another precision, keeping configs and history.
    pub fn cast<G: Scalar>(&self) -> GanModel<G> {
        let mut out = GanModel::<G>::new(
            self.generator.config(),
            self.discriminator.config(),
            &self.train_config,
        )
        .expect("configs already validated");
        let src = self.generator.params().into_iter().chain(self.discriminator.params());
        let dst = out
            .generator
            .params_mut()
            .into_iter()
            .chain(out.discriminator.params_mut());
        for (s, d) in src.zip(dst) {
            debug_assert_eq!(s.name, d.name);
            for (dv, sv) in d.value.iter_mut().zip(&s.value) {
                *dv = G::of(sv.as_f64());
            }
        }
        out.history = self.history.clone();
        out
    }
}

/// Seed of the dropout stream used for prediction `index`.
fn prediction_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the generator over `inputs`, preserving order. Stochastic predictions
/// draw dropout masks from a per-input stream derived from `seed`, so results
/// do not depend on scheduling.
pub fn predict<F: Scalar>(
    model: &GanModel<F>,
    inputs: &[ImageTensor],
    stochastic: bool,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    for x in inputs {
        model.check_input(x)?;
    }
    inputs
        .par_iter()
        .enumerate()
        .map_init(
            || model.generator.clone(),
            |generator, (i, x)| {
                let mut rng = ChaCha8Rng::seed_from_u64(prediction_seed(seed, i));
                let out = generator.forward(&to_tensor(x), stochastic.then_some(&mut rng));
                Ok(from_tensor(&out))
            },
        )
        .collect()
}

/// Writes predictions as 8-bit PNGs named after `names`.
pub fn save_predictions(
    dir: &std::path::Path,
    names: &[String],
    images: &[ImageTensor],
) -> Result<()> {
    if names.len() != images.len() {
        return Err(Error::Validation(format!(
            "{} names for {} predictions",
            names.len(),
            images.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, img) in names.iter().zip(images) {
        img.save_png(&dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_tensor::{byte_to_unit, unit_to_byte};

    fn tiny_setup(size: usize, depth: usize) -> (GeneratorConfig, DiscriminatorConfig, TrainConfig) {
        (
            GeneratorConfig {
                input_size: size,
                base_channels: 4,
                depth,
                dropout_rate: 0.5,
            },
            DiscriminatorConfig {
                patch_levels: 2,
                base_channels: 4,
            },
            TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
    }

    fn ramp(size: usize) -> ImageTensor {
        let n = 3 * size * size;
        ImageTensor::new(
            size,
            size,
            (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut g = GeneratorConfig::default();
        assert!(g.validate().is_ok());
        g.input_size = 200;
        assert!(g.validate().is_err());
        g = GeneratorConfig {
            dropout_rate: 1.0,
            ..GeneratorConfig::default()
        };
        assert!(g.validate().is_err());
        assert!(DiscriminatorConfig {
            patch_levels: 0,
            base_channels: 8
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda_l1: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn deterministic_forward_repeats_and_stays_in_range() {
        let (g, d, t) = tiny_setup(32, 5);
        let mut model = GanModel::<f32>::new(&g, &d, &t).unwrap();
        let x = ramp(32);
        let a = model.generator_forward(&x, None).unwrap();
        let b = model.generator_forward(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn stochastic_forward_differs() {
        let (g, d, t) = tiny_setup(32, 5);
        let mut model = GanModel::<f32>::new(&g, &d, &t).unwrap();
        let x = ramp(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut any_diff = false;
        for _ in 0..10 {
            let a = model.generator_forward(&x, Some(&mut rng)).unwrap();
            let b = model.generator_forward(&x, Some(&mut rng)).unwrap();
            any_diff |= a != b;
        }
        assert!(any_diff);
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let (g, d, t) = tiny_setup(32, 5);
        let mut model = GanModel::<f32>::new(&g, &d, &t).unwrap();
        assert!(matches!(
            model.generator_forward(&ramp(16), None),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            model.discriminator_forward(&ramp(32), &ramp(16)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn patch_mean_is_grid_mean_and_zero_weights_give_bias() {
        let (g, d, t) = tiny_setup(32, 5);
        let mut model = GanModel::<f64>::new(&g, &d, &t).unwrap();
        let scores = model.discriminator_forward(&ramp(32), &ramp(32)).unwrap();
        let n = scores.logits.data.len() as f64;
        let mean: f64 = scores.logits.data.iter().sum::<f64>() / n;
        assert!((scores.mean - mean).abs() < 1e-6);

        for p in model.discriminator.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let head_bias = model
            .discriminator
            .params_mut()
            .into_iter()
            .last()
            .unwrap();
        assert_eq!(head_bias.name, "disc.head.conv.bias");
        head_bias.value[0] = 0.375;
        let scores = model.discriminator_forward(&ramp(32), &ramp(32)).unwrap();
        assert!(scores.logits.data.iter().all(|v| *v == 0.375));
    }

    #[test]
    fn predict_preserves_order_and_handles_empty() {
        let (g, d, t) = tiny_setup(16, 4);
        let model = GanModel::<f32>::new(&g, &d, &t).unwrap();
        assert!(predict(&model, &[], true, 0).unwrap().is_empty());
        let inputs: Vec<ImageTensor> = (0..4)
            .map(|i| ImageTensor::filled(16, 16, -0.5 + 0.25 * i as f32))
            .collect();
        let batch = predict(&model, &inputs, false, 0).unwrap();
        let mut single = model.clone();
        for (x, y) in inputs.iter().zip(&batch) {
            assert_eq!(&single.generator_forward(x, None).unwrap(), y);
        }
        let s1 = predict(&model, &inputs, true, 7).unwrap();
        let s2 = predict(&model, &inputs, true, 7).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn stored_prediction_bytes_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(1, 2, vec![1.0, -1.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        save_predictions(dir.path(), &["p.png".into()], std::slice::from_ref(&img)).unwrap();
        let back = image::open(dir.path().join("p.png")).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(0, 0).0, [255, 128, 255]);
        assert_eq!(back.get_pixel(1, 0).0, [0, 128, 0]);
    }

    #[test]
    fn profiles_are_valid() {
        for p in [Profile::Cauliflower, Profile::Rosette, Profile::Synthetic] {
            let s = p.setup();
            s.generator.validate().unwrap();
            s.discriminator.validate().unwrap();
            s.train.validate().unwrap();
            s.augment.validate().unwrap();
            assert_eq!(s.train.lambda_l1, 100.0);
            assert_eq!(s.train.batch_size, 1);
            assert_eq!(s.augment.target_size, s.generator.input_size);
        }
        assert_eq!(Profile::Cauliflower.setup().train.epochs, 160);
        assert_eq!(Profile::Cauliflower.setup().train.learning_rate, 1e-4);
        assert_eq!(Profile::Rosette.setup().train.epochs, 40);
        assert!(Profile::Synthetic.setup().train.epochs <= 20);
    }
}
