mod common;

use std::collections::BTreeSet;

use growthcast::analytics::{fit_line, stage_statistics};
use growthcast::cgan::{
    to_tensor, DiscriminatorConfig, GanModel, GeneratorConfig, Tensor, TrainConfig, Trainer,
};
use growthcast::datamodel::{load_manifest, manifest_counts, save_manifest, ImagePair, PairManifest, Treatment};
use growthcast::fid::{frechet_distance, GaussianStats};
use growthcast::image_tensor::ImageTensor;
use growthcast::pairing::{build_pairs, PairingConfig};
use growthcast::preprocess::{augment_pair, AugmentConfig};
use growthcast::synthcrop::random_scene;
use growthcast::traits::{extract_traits, segment_baseline, BaselineConfig, TraitRecord};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn pair_set(m: &PairManifest) -> BTreeSet<(String, String)> {
    m.pairs
        .iter()
        .map(|p| (p.input.image_path.clone(), p.reference.image_path.clone()))
        .collect()
}

fn pairing(h: u32) -> PairingConfig {
    PairingConfig {
        horizon: h,
        ..PairingConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairing_matches_brute_force(seed in any::<u64>(), n in 20usize..300, h in 1u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, n, 5);
        let out = build_pairs(&records, &pairing(h)).unwrap();
        prop_assert_eq!(pair_set(&out.manifest), brute_force_pairs(&records, &pairing(h)));
    }

    #[test]
    fn pairing_ignores_record_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, 200, 5);
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        let a = build_pairs(&records, &pairing(2)).unwrap().manifest;
        let b = build_pairs(&shuffled, &pairing(2)).unwrap().manifest;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn counts_sum_to_pair_total(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, 250, 5);
        let m = build_pairs(&records, &pairing(1)).unwrap().manifest;
        let table = manifest_counts(&m);
        prop_assert_eq!(table.total(), m.len());
        let by_hand = tally(&m.pairs.iter().map(|p| (p.input.stage, p.reference.stage, p.input.treatment)).collect::<Vec<_>>());
        for ((from, to, t), n) in &by_hand {
            prop_assert_eq!(table.get((*from, *to), *t), *n);
        }
        let cols: usize = table.treatments().iter().map(|t| table.column_total(*t)).sum();
        prop_assert_eq!(cols, m.len());
    }

    #[test]
    fn manifest_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, 120, 4);
        let m = build_pairs(&records, &pairing(1)).unwrap().manifest;
        let dir = tempfile::tempdir().unwrap();
        save_manifest(dir.path(), &m).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        prop_assert_eq!(&back, &m);
        let dir2 = tempfile::tempdir().unwrap();
        save_manifest(dir2.path(), &back).unwrap();
        for f in ["records.csv", "pairs.jsonl", "manifest.json"] {
            prop_assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn augmentation_moves_both_images_identically(seed in any::<u64>(), side in 40usize..90) {
        // Both images carry the same coordinate grid in R and G and differ in B,
        // so equal R/G planes after augmentation mean equal displacement fields.
        let (h, w) = (side, side + 13);
        let grid = |blue: f32| {
            let mut img = ImageTensor::filled(h, w, blue);
            for y in 0..h {
                for x in 0..w {
                    img.set(0, y, x, x as f32 / w as f32 * 2.0 - 1.0);
                    img.set(1, y, x, y as f32 / h as f32 * 2.0 - 1.0);
                }
            }
            img
        };
        let config = AugmentConfig { target_size: 32, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = augment_pair(&grid(-0.5), &grid(0.7), &config, &mut rng).unwrap();
        prop_assert_eq!(a.shape(), (32, 32, 3));
        prop_assert_eq!(a.plane(0), b.plane(0));
        prop_assert_eq!(a.plane(1), b.plane(1));
    }

    #[test]
    fn regression_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1000.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.8 * x + 20.0 + rng.random_range(-50.0..50.0)).collect();
        let base = fit_line(&xs, &ys).unwrap();
        let sx: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let sy: Vec<f64> = ys.iter().map(|y| y * c).collect();
        let scaled = fit_line(&sx, &sy).unwrap();
        prop_assert!((scaled.slope - base.slope).abs() <= 1e-9 * base.slope.abs().max(1.0));
        prop_assert!((scaled.intercept - c * base.intercept).abs() <= 1e-7 * (c * base.intercept).abs().max(1.0));
        prop_assert!((scaled.r_squared - base.r_squared).abs() <= 1e-9);
    }

    #[test]
    fn pooled_mean_is_weighted_treatment_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<TraitRecord> = (0..80).map(|i| trait_record(i, rng.random_range(0..3), Treatment::DESIGNED[rng.random_range(0..4)], rng.random_range(0..5000))).collect();
        let pooled = stage_statistics(&records, false).unwrap();
        let split = stage_statistics(&records, true).unwrap();
        for p in &pooled {
            let parts: Vec<_> = split.iter().filter(|s| s.stage == p.stage).collect();
            let n: usize = parts.iter().map(|s| s.n).sum();
            let weighted = parts.iter().map(|s| s.mean_area_px * s.n as f64).sum::<f64>() / n as f64;
            prop_assert_eq!(n, p.n);
            prop_assert!((weighted - p.mean_area_px).abs() < 1e-9 * p.mean_area_px.max(1.0));
        }
        prop_assert_eq!(split, brute_stage_stats(&records, true));
    }

    #[test]
    fn fid_is_symmetric_and_translation_invariant(seed in any::<u64>(), d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_gaussian(&mut rng, d);
        let b = random_gaussian(&mut rng, d);
        let ab = frechet_distance(&a, &b).unwrap().value;
        let ba = frechet_distance(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        let shift = DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
        let a2 = GaussianStats { mean: &a.mean + &shift, ..a.clone() };
        let b2 = GaussianStats { mean: &b.mean + &shift, ..b.clone() };
        let shifted = frechet_distance(&a2, &b2).unwrap().value;
        prop_assert!((shifted - ab).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
    }
}

fn trait_record(i: usize, stage: u32, treatment: Treatment, area: u64) -> TraitRecord {
    TraitRecord {
        source_image: format!("im{i}.png"),
        stage,
        treatment,
        area_px: area,
        center_x: 10.0,
        center_y: 10.0,
        width_px: 3,
        height_px: 3,
        score: 1.0,
        height_unreliable: false,
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianStats {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    GaussianStats {
        mean: DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0)),
        cov: &a * a.transpose() + DMatrix::identity(d, d) * 0.1,
        count: 100,
    }
}

#[test]
fn fid_matches_commuting_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [2usize, 8, 64] {
        let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..4.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..4.0)).collect();
        let g = |m: &[f64], v: &[f64]| GaussianStats {
            mean: DVector::from_column_slice(m),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            count: 10,
        };
        let got = frechet_distance(&g(&m1, &v1), &g(&m2, &v2)).unwrap().value;
        assert!((got - diagonal_fid(&m1, &v1, &m2, &v2)).abs() < 1e-8, "d={d}");
    }
}

#[test]
fn extracted_traits_equal_mask_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..10 {
        let (img, _) = random_scene(&mut rng, 96, 3, (200.0, 900.0));
        let inst = segment_baseline(&img, &BaselineConfig::default());
        let meta = growthcast::datamodel::ImageRecord {
            image_path: format!("scene{k}.png"),
            plot_id: "p".into(),
            stage: 2,
            easting_m: 0.0,
            northing_m: 0.0,
            treatment: Treatment::DryUnfertilized,
            split: growthcast::datamodel::Split::Test,
        };
        let traits = extract_traits(&inst, &meta);
        assert_eq!(traits.len(), inst.len());
        for (t, i) in traits.iter().zip(&inst) {
            let w = walk_mask(i);
            assert_eq!(t.area_px, w.area);
            assert_eq!((t.center_x, t.center_y), w.center);
            assert_eq!((t.width_px, t.height_px), (w.width, w.height));
        }
    }
}

#[test]
fn segmentation_areas_survive_half_turn() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let (img, _) = random_scene(&mut rng, 80, 4, (120.0, 600.0));
        let turned = growthcast::preprocess::rotate_180(&img);
        let areas = |i: &ImageTensor| {
            let mut v: Vec<usize> = segment_baseline(i, &BaselineConfig::default())
                .iter()
                .map(|p| p.area())
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(areas(&img), areas(&turned));
    }
}

#[test]
fn generator_preserves_shape_across_sizes() {
    for size in [64usize, 128, 256] {
        let model = GanModel::<f32>::new(
            &GeneratorConfig {
                input_size: size,
                base_channels: 4,
                depth: (size.trailing_zeros() as usize).min(8),
                ..GeneratorConfig::default()
            },
            &DiscriminatorConfig {
                patch_levels: 3,
                base_channels: 4,
            },
            &TrainConfig::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let x = random_image(&mut rng, size);
        let mut m = model.clone();
        let y = m.generator_forward(&x, None).unwrap();
        assert_eq!(y.shape(), x.shape());
        let grid = m.discriminator_forward(&x, &y).unwrap().logits.height;
        // Three stride-2 levels, then two stride-1 k4 p1 convolutions.
        let expected = (size / 8 - 1) - 1;
        assert_eq!(grid, expected, "size {size}");
    }
}

fn param_digest(ps: Vec<&growthcast::cgan::Param<f64>>) -> Vec<u64> {
    ps.iter()
        .map(|p| {
            p.value
                .iter()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3))
        })
        .collect()
}

#[test]
fn each_step_updates_only_its_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = toy_model(100.0, 21);
    let batch: Vec<(Tensor<f64>, Tensor<f64>)> = (0..2)
        .map(|_| (to_tensor(&random_image(&mut rng, 16)), to_tensor(&random_image(&mut rng, 16))))
        .collect();
    let mut trainer = Trainer::new(&model.train_config);
    let xs: Vec<&Tensor<f64>> = batch.iter().map(|(x, _)| x).collect();
    let fakes = trainer.generate(&mut model, &xs);

    let (g0, d0) = (param_digest(model.generator.params()), param_digest(model.discriminator.params()));
    trainer.discriminator_step(&mut model, &batch, &fakes, 1e-3).unwrap();
    let (g1, d1) = (param_digest(model.generator.params()), param_digest(model.discriminator.params()));
    assert_eq!(g0, g1, "discriminator step touched the generator");
    assert!(d0.iter().zip(&d1).all(|(a, b)| a != b), "every discriminator tensor moves");

    trainer.generator_step(&mut model, &batch, &fakes, 1e-3).unwrap();
    let (g2, d2) = (param_digest(model.generator.params()), param_digest(model.discriminator.params()));
    assert_eq!(d1, d2, "generator step touched the discriminator");
    assert!(g1.iter().zip(&g2).any(|(a, b)| a != b));
    assert_eq!(trainer.updates(), (1, 1));
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(ImageTensor, ImageTensor)> = (0..3)
        .map(|_| (random_image(&mut rng, 16), random_image(&mut rng, 16)))
        .collect();
    let augment = AugmentConfig {
        target_size: 16,
        ..AugmentConfig::default()
    };
    let run = || {
        let mut m = toy_model(100.0, 9);
        m.train_config.batch_size = 2;
        growthcast::cgan::train(&mut m, &pairs, &augment, &Default::default()).unwrap();
        (param_digest(m.generator.params()), param_digest(m.discriminator.params()), m.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn harvested_plants_leave_no_pairs_across_their_gap() {
    let dir = tempfile::tempdir().unwrap();
    let config = growthcast::synthcrop::SynthConfig {
        n_plants: 24,
        harvest_prob: 0.5,
        seed: 2,
        ..Default::default()
    };
    let ds = growthcast::synthcrop::generate_dataset(&config, dir.path()).unwrap();
    let raw = build_pairs(&ds.records, &pairing(2)).unwrap().manifest;
    let cleaned = growthcast::pairing::clean_pairs(&raw, &ds.visibility(), Default::default()).unwrap();
    let keep = |p: &ImagePair| {
        present_per_log(&ds.harvest_log, &p.input.plot_id, p.input.stage)
            == present_per_log(&ds.harvest_log, &p.reference.plot_id, p.reference.stage)
    };
    let expected: Vec<&ImagePair> = raw.pairs.iter().filter(|p| keep(p)).collect();
    assert_eq!(cleaned.pairs.iter().collect::<Vec<_>>(), expected);
    assert!(!ds.harvest_log.is_empty());
    assert!(cleaned.len() < raw.len());
}
