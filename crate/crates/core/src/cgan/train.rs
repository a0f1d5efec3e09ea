//! Alternating discriminator / generator optimization.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Param, Tensor};
use super::loss::{bce_with_logits, l1_with_grad, loss_l1};
use super::optim::{learning_rate_at, Adam};
use super::scalar::Scalar;
use super::{checkpoint, to_tensor, GanModel, TrainConfig};
use crate::datamodel::PairManifest;
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::preprocess::{augment_pair, load_and_pad, AugmentConfig};

pub const HISTORY_HEADER: &str = "epoch,loss_d,loss_g_adv,loss_g_l1,lr";

// Independent ChaCha streams under the training seed; stream 0 initializes weights.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Mean losses over one epoch plus the number of optimizer updates applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
    pub lr: f64,
    pub d_updates: u64,
    pub g_updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic checkpoints; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many epochs (0 = final epoch only).
    pub checkpoint_interval: usize,
}

fn zero_grads<F: Scalar>(params: Vec<&mut Param<F>>) {
    for p in params {
        p.zero_grad();
    }
}

fn scaled<F: Scalar>(mut t: Tensor<F>, s: F) -> Tensor<F> {
    t.data.iter_mut().for_each(|v| *v *= s);
    t
}

fn finite<F: Scalar>(what: &str, v: F) -> Result<F> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({v:?})")))
    }
}

/// Optimizer state and the dropout stream for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    adam_g: Adam<F>,
    adam_d: Adam<F>,
    lambda_l1: F,
    dropout_rng: ChaCha8Rng,
}

/// A generated image together with the dropout stream state that produced it,
/// so the generator pass can be replayed for backpropagation.
#[derive(Debug, Clone)]
pub struct Generated<F> {
    pub image: Tensor<F>,
    replay: ChaCha8Rng,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(config: &TrainConfig) -> Self {
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Trainer {
            adam_g: Adam::new(config.beta1, config.beta2),
            adam_d: Adam::new(config.beta1, config.beta2),
            lambda_l1: F::of(config.lambda_l1),
            dropout_rng,
        }
    }

    /// (discriminator, generator) update counts.
    pub fn updates(&self) -> (u64, u64) {
        (self.adam_d.steps(), self.adam_g.steps())
    }

    /// Generator forward pass with dropout active.
    pub fn generate(&mut self, model: &mut GanModel<F>, xs: &[&Tensor<F>]) -> Vec<Generated<F>> {
        xs.iter()
            .map(|x| {
                let replay = self.dropout_rng.clone();
                let image = model.generator.forward(x, Some(&mut self.dropout_rng));
                Generated { image, replay }
            })
            .collect()
    }

    /// One discriminator update on real pairs and generated candidates.
    /// Returns the mean discriminator loss.
    pub fn discriminator_step(
        &mut self,
        model: &mut GanModel<F>,
        batch: &[(Tensor<F>, Tensor<F>)],
        fakes: &[Generated<F>],
        lr: f64,
    ) -> Result<F> {
        zero_grads(model.discriminator.params_mut());
        let inv = F::one() / F::of(batch.len() as f64);
        let mut total = F::zero();
        for ((x, y), fake) in batch.iter().zip(fakes) {
            total += model.backprop_discriminator(x, y, &fake.image, inv);
        }
        let loss = finite("discriminator loss", total * inv)?;
        self.adam_d.step(model.discriminator.params_mut(), lr);
        Ok(loss)
    }

    /// One generator update on `adversarial + lambda_l1 * L1` against the
    /// current discriminator. Discriminator gradients are discarded.
    ///
    /// For single-sample batches the generator activations cached by
    /// [`Trainer::generate`] are reused, so the two calls must be adjacent.
    pub fn generator_step(
        &mut self,
        model: &mut GanModel<F>,
        batch: &[(Tensor<F>, Tensor<F>)],
        fakes: &[Generated<F>],
        lr: f64,
    ) -> Result<(F, F)> {
        zero_grads(model.generator.params_mut());
        let inv = F::one() / F::of(batch.len() as f64);
        let (mut adv, mut l1) = (F::zero(), F::zero());
        for ((x, y), fake) in batch.iter().zip(fakes) {
            if batch.len() > 1 {
                let mut replay = fake.replay.clone();
                model.generator.forward(x, Some(&mut replay));
            }
            let (a, l) = model.backprop_generator(x, y, &fake.image, self.lambda_l1, inv)?;
            adv += a;
            l1 += l;
        }
        let adv = finite("generator adversarial loss", adv * inv)?;
        let l1 = finite("generator L1 loss", l1 * inv)?;
        self.adam_g.step(model.generator.params_mut(), lr);
        zero_grads(model.discriminator.params_mut());
        Ok((adv, l1))
    }

    /// Discriminator step followed by generator step on one batch.
    pub fn step(
        &mut self,
        model: &mut GanModel<F>,
        batch: &[(Tensor<F>, Tensor<F>)],
        lr: f64,
    ) -> Result<StepLosses> {
        let xs: Vec<&Tensor<F>> = batch.iter().map(|(x, _)| x).collect();
        let fakes = self.generate(model, &xs);
        let loss_d = self.discriminator_step(model, batch, &fakes, lr)?;
        let (adv, l1) = self.generator_step(model, batch, &fakes, lr)?;
        Ok(StepLosses {
            loss_d: loss_d.as_f64(),
            loss_g_adv: adv.as_f64(),
            loss_g_l1: l1.as_f64(),
        })
    }
}

impl<F: Scalar> GanModel<F> {
    /// Accumulates `scale` times the gradient of the discriminator loss on one
    /// (real, generated) pair into the discriminator parameters.
    fn backprop_discriminator(
        &mut self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        fake: &Tensor<F>,
        scale: F,
    ) -> F {
        let disc = &mut self.discriminator;
        let real = disc.forward(x, y);
        let (l_real, g_real) = bce_with_logits(&real.logits, true);
        disc.backward(&scaled(g_real, scale), false);
        let gen = disc.forward(x, fake);
        let (l_fake, g_fake) = bce_with_logits(&gen.logits, false);
        disc.backward(&scaled(g_fake, scale), false);
        l_real + l_fake
    }

    /// Accumulates `scale` times the gradient of `adversarial + lambda * L1`
    /// into the generator parameters. The generator's cached activations must
    /// come from the forward pass that produced `fake`.
    fn backprop_generator(
        &mut self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        fake: &Tensor<F>,
        lambda: F,
        scale: F,
    ) -> Result<(F, F)> {
        let scores = self.discriminator.forward(x, fake);
        let (l_adv, g_adv) = bce_with_logits(&scores.logits, true);
        let mut grad = self
            .discriminator
            .backward(&g_adv, true)
            .expect("candidate gradient requested");
        let (l_l1, g_l1) = l1_with_grad(y, fake)?;
        for (g, r) in grad.data.iter_mut().zip(&g_l1.data) {
            *g = (*g + lambda * *r) * scale;
        }
        self.generator.backward(&grad);
        Ok((l_adv, l_l1))
    }

    /// Deterministic (dropout-free) generator objective
    /// `adversarial + lambda * L1` for one pair.
    pub fn generator_objective(&mut self, x: &Tensor<F>, y: &Tensor<F>, lambda: F) -> Result<F> {
        let fake = self.generator.forward(x, None);
        let scores = self.discriminator.forward(x, &fake);
        let (adv, _) = bce_with_logits(&scores.logits, true);
        Ok(adv + lambda * loss_l1(y, &fake)?)
    }

    /// Like [`GanModel::generator_objective`], also replacing the generator
    /// gradients with the objective's gradient. Discriminator gradients are
    /// left zeroed.
    pub fn generator_objective_grad(
        &mut self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        lambda: F,
    ) -> Result<F> {
        zero_grads(self.generator.params_mut());
        let fake = self.generator.forward(x, None);
        let (adv, l1) = self.backprop_generator(x, y, &fake, lambda, F::one())?;
        zero_grads(self.discriminator.params_mut());
        Ok(adv + lambda * l1)
    }

    /// Discriminator loss on the real pair `(x, y)` and the candidate `fake`.
    pub fn discriminator_objective(&mut self, x: &Tensor<F>, y: &Tensor<F>, fake: &Tensor<F>) -> F {
        let real = self.discriminator.forward(x, y);
        let gen = self.discriminator.forward(x, fake);
        bce_with_logits(&real.logits, true).0 + bce_with_logits(&gen.logits, false).0
    }

    /// Like [`GanModel::discriminator_objective`], also replacing the
    /// discriminator gradients with the loss gradient.
    pub fn discriminator_objective_grad(
        &mut self,
        x: &Tensor<F>,
        y: &Tensor<F>,
        fake: &Tensor<F>,
    ) -> F {
        zero_grads(self.discriminator.params_mut());
        self.backprop_discriminator(x, y, fake, F::one())
    }
}

fn resolve(root: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads every pair of the manifest, padded to square, resolving relative
/// image paths against `root`.
pub fn load_training_pairs(
    manifest: &PairManifest,
    root: &Path,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    manifest
        .pairs
        .iter()
        .map(|p| {
            let a = load_and_pad(&resolve(root, &p.input.image_path))?;
            let b = load_and_pad(&resolve(root, &p.reference.image_path))?;
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "pair {} -> {}: image shapes differ ({:?} vs {:?})",
                    p.input.image_path,
                    p.reference.image_path,
                    a.shape(),
                    b.shape()
                )));
            }
            Ok((a, b))
        })
        .collect()
}

/// Trains `model` for `model.train_config.epochs` epochs over `pairs`,
/// replacing its history. Each epoch visits every pair once in a shuffled
/// order, applying one shared augmentation per pair.
pub fn train<F: Scalar>(
    model: &mut GanModel<F>,
    pairs: &[(ImageTensor, ImageTensor)],
    augment: &AugmentConfig,
    options: &TrainOptions,
) -> Result<Vec<EpochStats>> {
    let config = model.train_config.clone();
    config.validate()?;
    augment.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    if augment.target_size != model.input_size() {
        return Err(Error::Config(format!(
            "augmentation target size {} differs from model input size {}",
            augment.target_size,
            model.input_size()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed);
    augment_rng.set_stream(AUGMENT_STREAM);

    let mut trainer = Trainer::<F>::new(&config);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    model.history.clear();
    for epoch in 0..config.epochs {
        let lr = learning_rate_at(&config, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_d, mut sum_adv, mut sum_l1) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        let before = trainer.updates();
        for (s, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (a, b) = augment_pair(&pairs[i].0, &pairs[i].1, augment, &mut augment_rng)?;
                batch.push((to_tensor::<F>(&a), to_tensor::<F>(&b)));
            }
            let losses = trainer.step(model, &batch, lr).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, step {s}: {msg}; training aborted"))
                }
                other => other,
            })?;
            sum_d += losses.loss_d;
            sum_adv += losses.loss_g_adv;
            sum_l1 += losses.loss_g_l1;
            steps += 1;
        }
        let after = trainer.updates();
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            loss_d: sum_d / n,
            loss_g_adv: sum_adv / n,
            loss_g_l1: sum_l1 / n,
            lr,
            d_updates: after.0 - before.0,
            g_updates: after.1 - before.1,
        };
        log::info!(
            "epoch {}/{}: loss_d {:.4} loss_g_adv {:.4} loss_g_l1 {:.4} lr {:.2e}",
            epoch + 1,
            config.epochs,
            stats.loss_d,
            stats.loss_g_adv,
            stats.loss_g_l1,
            lr
        );
        model.history.push(stats);

        if let Some(dir) = &options.checkpoint_dir {
            let last = epoch + 1 == config.epochs;
            let periodic =
                options.checkpoint_interval > 0 && (epoch + 1) % options.checkpoint_interval == 0;
            if last || periodic {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                checkpoint::save_checkpoint(
                    &dir.join(format!("epoch_{:04}.ckpt", epoch + 1)),
                    &model.cast::<f32>(),
                )?;
            }
        }
    }
    Ok(model.history.clone())
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.loss_d, h.loss_g_adv, h.loss_g_l1, h.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::{DiscriminatorConfig, GeneratorConfig};
    use super::*;

    fn tiny_model(epochs: usize) -> GanModel<f32> {
        GanModel::new(
            &GeneratorConfig {
                input_size: 16,
                base_channels: 4,
                depth: 4,
                dropout_rate: 0.5,
            },
            &DiscriminatorConfig {
                patch_levels: 2,
                base_channels: 4,
            },
            &TrainConfig {
                epochs,
                seed: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap()
    }

    fn pairs(n: usize) -> Vec<(ImageTensor, ImageTensor)> {
        (0..n)
            .map(|i| {
                let v = -0.8 + 0.3 * i as f32;
                (ImageTensor::filled(16, 16, v), ImageTensor::filled(16, 16, -v))
            })
            .collect()
    }

    #[test]
    fn one_epoch_counts_updates() {
        let mut model = tiny_model(1);
        let history = train(
            &mut model,
            &pairs(2),
            &AugmentConfig::resize_only(16),
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].d_updates, 2);
        assert_eq!(history[0].g_updates, 2);
        assert!(history[0].loss_d.is_finite());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut model = tiny_model(2);
        let err = train(
            &mut model,
            &[],
            &AugmentConfig::resize_only(16),
            &TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn target_size_must_match_model() {
        let mut model = tiny_model(2);
        let err = train(
            &mut model,
            &pairs(1),
            &AugmentConfig::resize_only(8),
            &TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_input_aborts_with_step() {
        let mut model = tiny_model(2);
        for p in model.discriminator.params_mut() {
            p.value.iter_mut().for_each(|v| *v = f32::NAN);
        }
        let err = train(
            &mut model,
            &pairs(2),
            &AugmentConfig::resize_only(16),
            &TrainOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("epoch 0, step 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batches_larger_than_one_train() {
        let mut model = tiny_model(2);
        model.train_config.batch_size = 2;
        let history = train(
            &mut model,
            &pairs(3),
            &AugmentConfig::resize_only(16),
            &TrainOptions::default(),
        )
        .unwrap();
        assert_eq!(history[0].d_updates, 2);
        assert!(history.iter().all(|h| h.loss_g_l1.is_finite()));
    }

    #[test]
    fn checkpoints_and_history_csv_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(2);
        let options = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            checkpoint_interval: 1,
        };
        let history = train(&mut model, &pairs(1), &AugmentConfig::resize_only(16), &options)
            .unwrap();
        assert!(dir.path().join("epoch_0001.ckpt").exists());
        assert!(dir.path().join("epoch_0002.ckpt").exists());
        let csv_path = dir.path().join("history.csv");
        write_history_csv(&csv_path, &history).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(HISTORY_HEADER));
        assert_eq!(lines.count(), 2);
    }
}
