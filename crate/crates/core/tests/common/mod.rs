//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use growthcast::cgan::{
    to_tensor, DiscriminatorConfig, GanModel, GeneratorConfig, Tensor, TrainConfig,
};
use std::collections::{BTreeMap, BTreeSet, HashMap};

use growthcast::analytics::StageStats;
use growthcast::datamodel::{ImageRecord, Split, Treatment};
use growthcast::image_tensor::ImageTensor;
use growthcast::pairing::PairingConfig;
use growthcast::traits::{PlantInstance, TraitRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let data = (0..3 * size * size)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    ImageTensor::new(size, size, data).unwrap()
}

/// Toy network for finite-difference checks: 16 px, four U-Net levels,
/// two patch levels, dropout disabled.
pub fn toy_model(lambda_l1: f64, seed: u64) -> GanModel<f64> {
    GanModel::new(
        &GeneratorConfig {
            input_size: 16,
            base_channels: 4,
            depth: 4,
            dropout_rate: 0.0,
        },
        &DiscriminatorConfig {
            patch_levels: 2,
            base_channels: 4,
        },
        &TrainConfig {
            lambda_l1,
            epochs: 2,
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub network: &'static str,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-7);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares backpropagated gradients of the generator objective
/// (`adversarial + lambda * L1`) and of the discriminator loss against
/// central differences, on `per_network` randomly chosen parameters of each
/// network.
pub fn gradient_check(seed: u64, lambda_l1: f64, per_network: usize, eps: f64) -> Vec<GradSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = toy_model(lambda_l1, seed);
    let x: Tensor<f64> = to_tensor(&random_image(&mut rng, 16));
    let y: Tensor<f64> = to_tensor(&random_image(&mut rng, 16));
    let mut out = Vec::new();

    model.generator_objective_grad(&x, &y, lambda_l1).unwrap();
    let picks = pick(&mut rng, &model.generator.params().iter().map(|p| p.len()).collect::<Vec<_>>(), per_network);
    for (pi, ei) in picks {
        let analytic = model.generator.params()[pi].grad[ei];
        let at = |delta: f64, m: &mut GanModel<f64>| {
            let orig = m.generator.params()[pi].value[ei];
            m.generator.params_mut()[pi].value[ei] = orig + delta;
            let v = m.generator_objective(&x, &y, lambda_l1).unwrap();
            m.generator.params_mut()[pi].value[ei] = orig;
            v
        };
        let numeric = (at(eps, &mut model) - at(-eps, &mut model)) / (2.0 * eps);
        out.push(GradSample {
            network: "generator",
            analytic,
            numeric,
        });
    }

    let fake = model.generator.forward(&x, None);
    model.discriminator_objective_grad(&x, &y, &fake);
    let picks = pick(&mut rng, &model.discriminator.params().iter().map(|p| p.len()).collect::<Vec<_>>(), per_network);
    for (pi, ei) in picks {
        let analytic = model.discriminator.params()[pi].grad[ei];
        let at = |delta: f64, m: &mut GanModel<f64>| {
            let orig = m.discriminator.params()[pi].value[ei];
            m.discriminator.params_mut()[pi].value[ei] = orig + delta;
            let v = m.discriminator_objective(&x, &y, &fake);
            m.discriminator.params_mut()[pi].value[ei] = orig;
            v
        };
        let numeric = (at(eps, &mut model) - at(-eps, &mut model)) / (2.0 * eps);
        out.push(GradSample {
            network: "discriminator",
            analytic,
            numeric,
        });
    }
    out
}

/// Distinct (parameter, element) picks, covering every parameter tensor first.
fn pick(rng: &mut ChaCha8Rng, lens: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (pi, &len) in lens.iter().enumerate() {
        let e = rng.random_range(0..len);
        seen.insert((pi, e));
        out.push((pi, e));
    }
    let total: usize = lens.iter().sum();
    while out.len() < n.min(total) {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= lens[pi] {
            flat -= lens[pi];
            pi += 1;
        }
        if seen.insert((pi, flat)) {
            out.push((pi, flat));
        }
    }
    out
}

/// Records on a small field: plots on a 5 cm grid, revisited at every stage
/// with a few centimetres of position noise, plus decoys from a neighbouring
/// plot id at the same spot.
pub fn random_records(rng: &mut ChaCha8Rng, n: usize, stages: u32) -> Vec<ImageRecord> {
    let plots = (n / stages as usize).max(1);
    (0..n)
        .map(|i| {
            let plot = rng.random_range(0..plots);
            let stage = rng.random_range(0..stages);
            let decoy = rng.random_bool(0.1);
            ImageRecord {
                image_path: format!("img{i:05}.png"),
                plot_id: if decoy { format!("q{plot}") } else { format!("p{plot}") },
                stage,
                easting_m: (plot % 20) as f64 * 0.05 + rng.random_range(-0.015..0.015),
                northing_m: (plot / 20) as f64 * 0.05 + rng.random_range(-0.015..0.015),
                treatment: Treatment::DESIGNED[plot % 4],
                split: if plot % 5 == 4 { Split::Test } else { Split::Train },
            }
        })
        .collect()
}

/// O(n^2) pairing: for every record, the nearest same-plot record exactly
/// `horizon` stages later within the threshold, ties to the smaller path.
pub fn brute_force_pairs(records: &[ImageRecord], config: &PairingConfig) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for a in records {
        let mut best: Option<(f64, &ImageRecord)> = None;
        for b in records {
            if b.plot_id != a.plot_id || b.stage != a.stage + config.horizon {
                continue;
            }
            let d = ((a.easting_m - b.easting_m).powi(2) + (a.northing_m - b.northing_m).powi(2)).sqrt();
            if d > config.distance_threshold_m {
                continue;
            }
            best = match best {
                Some((bd, bb)) if bd < d || (bd == d && bb.image_path < b.image_path) => Some((bd, bb)),
                _ => Some((d, b)),
            };
        }
        if let Some((_, b)) = best {
            out.insert((a.image_path.clone(), b.image_path.clone()));
        }
    }
    out
}

/// Plant presence implied by a harvest log: present up to and including the
/// logged stage.
pub fn present_per_log(log: &[(String, u32)], plot: &str, stage: u32) -> bool {
    log.iter().find(|(p, _)| p == plot).map_or(true, |(_, h)| stage <= *h)
}

/// Frechet distance of two diagonal Gaussians, whose covariances commute.
pub fn diagonal_fid(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let ds: f64 = v1.iter().zip(v2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    dm + ds
}

/// Least squares through the uncentered normal equations, solved by
/// Cramer's rule: returns (slope, intercept, r_squared).
pub fn normal_equations(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    let mean = sy / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    (slope, intercept, 1.0 - ss_res / ss_tot)
}

/// Per (stage, treatment) mean and population std, aggregated by hand.
pub fn brute_stage_stats(records: &[TraitRecord], by_treatment: bool) -> Vec<StageStats> {
    let mut keys: Vec<(u32, Option<Treatment>)> = records
        .iter()
        .map(|r| (r.stage, by_treatment.then_some(r.treatment)))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(stage, t)| {
            let xs: Vec<f64> = records
                .iter()
                .filter(|r| r.stage == stage && (t.is_none() || Some(r.treatment) == t))
                .map(|r| r.area_px as f64)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            StageStats {
                stage,
                treatment: t,
                mean_area_px: mean,
                std_area_px: var.sqrt(),
                n: xs.len(),
            }
        })
        .collect()
}

/// Traits of one instance recomputed by walking its mask.
pub struct WalkedTraits {
    pub area: u64,
    pub center: (f64, f64),
    pub width: u64,
    pub height: u64,
}

pub fn walk_mask(inst: &PlantInstance) -> WalkedTraits {
    let m = &inst.mask;
    let (mut area, mut x0, mut y0, mut x1, mut y1) = (0u64, usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.bits[y * m.width + x] {
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    WalkedTraits {
        area,
        center: ((x0 + x1 + 1) as f64 / 2.0, (y0 + y1 + 1) as f64 / 2.0),
        width: (x1 + 1 - x0) as u64,
        height: (y1 + 1 - y0) as u64,
    }
}

/// Index of each plant's ground-truth mask to the segmented instance
/// overlapping it most, if any.
pub fn match_instances(truth: &[growthcast::traits::Mask], found: &[PlantInstance]) -> Vec<Option<usize>> {
    truth
        .iter()
        .map(|t| {
            let mut overlaps: HashMap<usize, usize> = HashMap::new();
            for (j, f) in found.iter().enumerate() {
                let n = t.bits.iter().zip(&f.mask.bits).filter(|(a, b)| **a && **b).count();
                if n > 0 {
                    overlaps.insert(j, n);
                }
            }
            overlaps.into_iter().max_by_key(|(j, n)| (*n, usize::MAX - j)).map(|(j, _)| j)
        })
        .collect()
}

/// Counts per (input stage, reference stage, treatment) by direct tally.
pub fn tally(pairs: &[(u32, u32, Treatment)]) -> BTreeMap<(u32, u32, Treatment), usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        *m.entry(*p).or_default() += 1;
    }
    m
}
