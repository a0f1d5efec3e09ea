//! Procedural plant time series with exact ground truth.
//!
//! Each plot holds one rosette photographed from above at every stage. The
//! rosette's leaves sit at golden-angle offsets; new leaves appear as it
//! grows, and its overall scale is solved so the rendered foreground pixel
//! count matches `a * multiplier * vigor * exp(b * t)` (clipped at
//! `max_area`). Camera positions carry Gaussian jitter, which moves both the
//! plant and the soil texture in the frame.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_records, ImageRecord, Split, Treatment, RECORDS_FILE};
use crate::error::{Error, Result};
use crate::image_tensor::{save_mask_png, ImageTensor};
use crate::traits::Mask;

pub const IMAGES_DIR: &str = "images";
pub const HARVEST_LOG_FILE: &str = "harvest_log.csv";
pub const TRUTH_FILE: &str = "truth.csv";

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthLaw {
    /// Area in pixels at stage 0 for multiplier 1 and vigor 1.
    pub a: f64,
    /// Exponential rate per stage.
    pub b: f64,
    pub max_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_plants: usize,
    pub stages: u32,
    pub image_size: usize,
    pub growth: GrowthLaw,
    /// Multipliers for i+f+, i+f-, i-f+, i-f-, in that order.
    pub multipliers: [f64; 4],
    /// Standard deviation of the camera position error per axis, metres.
    pub jitter_m: f64,
    /// Ground sampling distance, metres per pixel.
    pub gsd_m: f64,
    /// Distance between neighbouring plots, metres.
    pub spacing_m: f64,
    /// Log-space standard deviation of per-plant vigor.
    pub vigor_sigma: f64,
    /// Probability that a plant is harvested before the last stage.
    pub harvest_prob: f64,
    /// Every `test_every`-th group of four consecutive plants is held out.
    pub test_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_plants: 120,
            stages: 6,
            image_size: 64,
            growth: GrowthLaw {
                a: 120.0,
                b: 0.4,
                max_area: 0.35 * 64.0 * 64.0,
            },
            multipliers: [1.0, 0.8, 0.65, 0.5],
            jitter_m: 0.006,
            gsd_m: 0.005,
            spacing_m: 0.5,
            vigor_sigma: 0.1,
            harvest_prob: 0.1,
            test_every: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.multipliers;
        if !(m[0] > m[1] && m[1] > m[2] && m[2] > m[3] && m[3] > 0.0) {
            return Err(Error::Config(format!(
                "treatment multipliers must be positive and strictly decreasing, got {m:?}"
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("synthetic image_size must be at least 16".into()));
        }
        let g = &self.growth;
        if !(g.a > 0.0 && g.b.is_finite() && g.max_area > 0.0) {
            return Err(Error::Config("growth law needs a > 0, finite b and max_area > 0".into()));
        }
        if g.max_area > 0.6 * (self.image_size * self.image_size) as f64 {
            return Err(Error::Config(format!(
                "max_area {} does not fit a {}px frame",
                g.max_area, self.image_size
            )));
        }
        if !(self.gsd_m > 0.0 && self.spacing_m > 0.0 && self.jitter_m >= 0.0 && self.vigor_sigma >= 0.0) {
            return Err(Error::Config(
                "gsd_m and spacing_m must be positive; jitter_m and vigor_sigma non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.harvest_prob) {
            return Err(Error::Config("harvest_prob must lie in [0, 1]".into()));
        }
        if self.test_every == 0 {
            return Err(Error::Config("test_every must be positive".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self, t: Treatment) -> f64 {
        match t {
            Treatment::IrrigatedFertilized => self.multipliers[0],
            Treatment::IrrigatedUnfertilized => self.multipliers[1],
            Treatment::DryFertilized => self.multipliers[2],
            Treatment::DryUnfertilized => self.multipliers[3],
            Treatment::Unspecified => 1.0,
        }
    }

    /// Ground-truth area of a plant with the given multiplier and vigor.
    pub fn target_area(&self, multiplier: f64, vigor: f64, stage: u32) -> f64 {
        let g = &self.growth;
        (g.a * multiplier * vigor * (g.b * f64::from(stage)).exp()).min(g.max_area)
    }

    fn plants_per_row(&self) -> usize {
        (self.n_plants as f64).sqrt().ceil().max(1.0) as usize
    }
}

/// Identity of plant `i`: plot id, treatment and split are fixed by index.
pub fn plant_identity(config: &SynthConfig, i: usize) -> (String, Treatment, Split) {
    let treatment = Treatment::DESIGNED[i % 4];
    let split = if (i / 4) % config.test_every == config.test_every - 1 {
        Split::Test
    } else {
        Split::Train
    };
    (format!("plot{i:04}"), treatment, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub angle: f64,
    /// Relative length; older leaves are longer.
    pub length: f64,
    /// Width over length.
    pub aspect: f64,
    /// Brightness offset of this leaf's green.
    pub shade: f64,
}

/// Rosette geometry independent of size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rosette {
    pub leaves: Vec<Leaf>,
    pub disc_radius: f64,
    pub color_seed: u64,
}

impl Rosette {
    /// Random rosette with `max_leaves` leaves in emergence order.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_leaves: usize) -> Self {
        let phase = rng.random_range(0.0..2.0 * PI);
        let leaves = (0..max_leaves)
            .map(|j| Leaf {
                angle: phase + j as f64 * GOLDEN_ANGLE,
                length: (1.0 - 0.045 * j as f64) * rng.random_range(0.9..1.05),
                aspect: rng.random_range(0.38..0.52),
                shade: rng.random_range(-0.06..0.06),
            })
            .collect();
        Rosette {
            leaves,
            disc_radius: 0.22,
            color_seed: rng.random(),
        }
    }

    /// Number of leaves visible at a stage.
    pub fn leaves_at(&self, stage: u32) -> usize {
        (4 + (stage as usize * 4) / 5).min(self.leaves.len())
    }

    /// Index of the leaf (or `usize::MAX` for the central disc) covering the
    /// point at offset (dx, dy) from the plant center, for overall scale `s`.
    fn hit(&self, n_leaves: usize, s: f64, dx: f64, dy: f64) -> Option<usize> {
        if dx * dx + dy * dy <= (self.disc_radius * s).powi(2) {
            return Some(usize::MAX);
        }
        // Younger leaves lie on top.
        for j in (0..n_leaves).rev() {
            let leaf = &self.leaves[j];
            let half = 0.55 * s * leaf.length;
            let (sin, cos) = leaf.angle.sin_cos();
            let (px, py) = (dx - half * cos, dy - half * sin);
            let u = px * cos + py * sin;
            let v = -px * sin + py * cos;
            let b = half * leaf.aspect;
            if (u / half).powi(2) + (v / b).powi(2) <= 1.0 {
                return Some(j);
            }
        }
        None
    }
}

/// One rosette placed in a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedPlant {
    pub rosette: Rosette,
    pub n_leaves: usize,
    pub center: (f64, f64),
    pub scale: f64,
}

fn rasterize(plant: &PlacedPlant, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    let reach = 1.2 * plant.scale + 1.0;
    let (cx, cy) = plant.center;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(size);
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if plant.rosette.hit(plant.n_leaves, plant.scale, dx, dy).is_some() {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Scale whose rasterized mask covers as close to `target` pixels as the
/// grid allows.
pub fn solve_scale(rosette: &Rosette, n_leaves: usize, center: (f64, f64), size: usize, target: f64) -> f64 {
    let count = |s: f64| {
        rasterize(
            &PlacedPlant {
                rosette: rosette.clone(),
                n_leaves,
                center,
                scale: s,
            },
            size,
        )
        .count() as f64
    };
    let (mut lo, mut hi) = (0.0, size as f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (count(lo) - target).abs() <= (count(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, a: i64, b: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(a as u64 ^ splitmix(b as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash_unit(seed, ix, iy);
    let v10 = hash_unit(seed, ix + 1, iy);
    let v01 = hash_unit(seed, ix, iy + 1);
    let v11 = hash_unit(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// Soil colour at world pixel coordinates (wx, wy).
fn soil(seed: u64, wx: f64, wy: f64) -> [f64; 3] {
    let coarse = value_noise(seed, wx, wy, 18.0) - 0.5;
    let fine = value_noise(seed ^ 0x5EED, wx, wy, 5.0) - 0.5;
    let brightness = 1.0 + 0.22 * coarse + 0.1 * fine;
    let grain = |k: i64| 0.03 * (hash_unit(seed ^ 0xC0FFEE, wx.floor() as i64 * 3 + k, wy.floor() as i64) - 0.5);
    [
        0.46 * brightness + grain(0),
        0.34 * brightness + grain(1),
        0.23 * brightness + grain(2),
    ]
}

fn leaf_color(rosette: &Rosette, leaf: usize, dx: f64, dy: f64, scale: f64) -> [f64; 3] {
    let (shade, base) = if leaf == usize::MAX {
        (0.04, [0.34, 0.64, 0.24])
    } else {
        (rosette.leaves[leaf].shade, [0.2, 0.52, 0.15])
    };
    // Slightly lighter towards leaf tips.
    let r = (dx * dx + dy * dy).sqrt() / scale.max(1.0);
    let tip = 0.06 * r.min(1.2);
    let speck = 0.02 * (hash_unit(rosette.color_seed, (dx * 7.0) as i64, (dy * 7.0) as i64) - 0.5);
    [
        base[0] + shade * 0.6 + tip * 0.5 + speck,
        base[1] + shade + tip + speck,
        base[2] + shade * 0.4 + tip * 0.3 + speck,
    ]
}

/// Renders plants over soil. `world_offset` is the frame's displacement in
/// pixels relative to the soil texture. Later plants occlude earlier ones;
/// the returned masks hold each plant's visible pixels.
pub fn render_scene(size: usize, plants: &[PlacedPlant], soil_seed: u64, world_offset: (f64, f64)) -> (ImageTensor, Vec<Mask>) {
    let mut img = ImageTensor::filled(size, size, 0.0);
    let mut masks = vec![Mask::new(size, size); plants.len()];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = soil(soil_seed, px + world_offset.0, py + world_offset.1);
            let mut owner = None;
            for (k, p) in plants.iter().enumerate() {
                let (dx, dy) = (px - p.center.0, py - p.center.1);
                if let Some(leaf) = p.rosette.hit(p.n_leaves, p.scale, dx, dy) {
                    color = leaf_color(&p.rosette, leaf, dx, dy, p.scale);
                    owner = Some(k);
                }
            }
            if let Some(k) = owner {
                masks[k].set(x, y, true);
            }
            for (c, v) in color.iter().enumerate() {
                img.set(c, y, x, (2.0 * v.clamp(0.0, 1.0) - 1.0) as f32);
            }
        }
    }
    (img, masks)
}

/// Per-plant quantities fixed for the whole time series.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantProfile {
    pub index: usize,
    pub plot_id: String,
    pub treatment: Treatment,
    pub split: Split,
    pub vigor: f64,
    pub rosette: Rosette,
    /// Last stage at which the plant is present, if it is harvested early.
    pub harvest_stage: Option<u32>,
    pub easting_m: f64,
    pub northing_m: f64,
    pub soil_seed: u64,
    /// Camera position error (east, north) per stage, metres.
    pub jitter: Vec<(f64, f64)>,
}

pub fn plant_profile(config: &SynthConfig, i: usize) -> PlantProfile {
    let (plot_id, treatment, split) = plant_identity(config, i);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64 + 1);
    let vigor = LogNormal::new(0.0, config.vigor_sigma)
        .expect("valid sigma")
        .sample(&mut rng);
    let rosette = Rosette::random(&mut rng, 12);
    let harvest_stage = (config.stages >= 2 && rng.random_bool(config.harvest_prob))
        .then(|| rng.random_range(1..config.stages));
    let jitter_dist = Normal::new(0.0, config.jitter_m.max(f64::MIN_POSITIVE)).expect("valid jitter");
    let jitter = (0..config.stages)
        .map(|_| {
            if config.jitter_m == 0.0 {
                (0.0, 0.0)
            } else {
                (jitter_dist.sample(&mut rng), jitter_dist.sample(&mut rng))
            }
        })
        .collect();
    let per_row = config.plants_per_row();
    PlantProfile {
        index: i,
        plot_id,
        treatment,
        split,
        vigor,
        rosette,
        harvest_stage,
        easting_m: (i % per_row) as f64 * config.spacing_m,
        northing_m: (i / per_row) as f64 * config.spacing_m,
        soil_seed: rng.random(),
        jitter,
    }
}

/// Ground truth of one rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub image_path: String,
    pub plot_id: String,
    pub stage: u32,
    pub target_area: f64,
    pub mask_area: usize,
    pub visible: bool,
    /// Plant displacement from the frame center, pixels.
    pub offset_x: f64,
    pub offset_y: f64,
}

/// Renders plant `profile` at `stage`: image, ground-truth mask and record.
pub fn render_frame(config: &SynthConfig, profile: &PlantProfile, stage: u32) -> (ImageTensor, Mask, FrameTruth) {
    let size = config.image_size;
    let (je, jn) = profile.jitter[stage as usize];
    // Camera east of the plant puts the plant left of center; north is up.
    let offset = (-je / config.gsd_m, jn / config.gsd_m);
    let center = (size as f64 / 2.0 + offset.0, size as f64 / 2.0 + offset.1);
    let present = profile.harvest_stage.map_or(true, |h| stage <= h);
    let target = config.target_area(config.multiplier(profile.treatment), profile.vigor, stage);
    let n_leaves = profile.rosette.leaves_at(stage);
    let plants: Vec<PlacedPlant> = if present {
        let scale = solve_scale(&profile.rosette, n_leaves, center, size, target);
        vec![PlacedPlant {
            rosette: profile.rosette.clone(),
            n_leaves,
            center,
            scale,
        }]
    } else {
        Vec::new()
    };
    let (img, masks) = render_scene(size, &plants, profile.soil_seed, (-offset.0, -offset.1));
    let mask = masks.into_iter().next().unwrap_or_else(|| Mask::new(size, size));
    let truth = FrameTruth {
        image_path: frame_path(&profile.plot_id, stage),
        plot_id: profile.plot_id.clone(),
        stage,
        target_area: if present { target } else { 0.0 },
        mask_area: mask.count(),
        visible: present,
        offset_x: offset.0,
        offset_y: offset.1,
    };
    (img, mask, truth)
}

pub fn frame_path(plot_id: &str, stage: u32) -> String {
    format!("{IMAGES_DIR}/{plot_id}_s{stage:02}.png")
}

/// Path of the ground-truth mask for an image path: `x.png` -> `x.mask.png`.
pub fn mask_path(image_path: &str) -> String {
    match image_path.strip_suffix(".png") {
        Some(stem) => format!("{stem}.mask.png"),
        None => format!("{image_path}.mask.png"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<ImageRecord>,
    pub truth: Vec<FrameTruth>,
    /// (plot id, last stage present) for harvested plants.
    pub harvest_log: Vec<(String, u32)>,
}

impl SynthDataset {
    /// Plant presence per image path, for pair cleaning.
    pub fn visibility(&self) -> std::collections::HashMap<String, bool> {
        self.truth
            .iter()
            .map(|t| (t.image_path.clone(), t.visible))
            .collect()
    }
}

/// Writes `records.csv`, images with `.mask.png` ground truth,
/// `harvest_log.csv` and `truth.csv` under `out_dir`.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<SynthDataset> {
    config.validate()?;
    let images = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let per_plant: Vec<Result<(Vec<ImageRecord>, Vec<FrameTruth>, Option<(String, u32)>)>> = (0..config.n_plants)
        .into_par_iter()
        .map(|i| {
            let profile = plant_profile(config, i);
            let mut records = Vec::new();
            let mut truths = Vec::new();
            for stage in 0..config.stages {
                let (img, mask, truth) = render_frame(config, &profile, stage);
                img.save_png(&out_dir.join(&truth.image_path))?;
                save_mask_png(
                    &out_dir.join(mask_path(&truth.image_path)),
                    mask.width,
                    mask.height,
                    &mask.bits,
                )?;
                let (je, jn) = profile.jitter[stage as usize];
                records.push(ImageRecord {
                    image_path: truth.image_path.clone(),
                    plot_id: profile.plot_id.clone(),
                    stage,
                    easting_m: profile.easting_m + je,
                    northing_m: profile.northing_m + jn,
                    treatment: profile.treatment,
                    split: profile.split,
                });
                truths.push(truth);
            }
            Ok((records, truths, profile.harvest_stage.map(|h| (profile.plot_id.clone(), h))))
        })
        .collect();
    let mut dataset = SynthDataset {
        records: Vec::new(),
        truth: Vec::new(),
        harvest_log: Vec::new(),
    };
    for item in per_plant {
        let (r, t, h) = item?;
        dataset.records.extend(r);
        dataset.truth.extend(t);
        dataset.harvest_log.extend(h);
    }
    save_records(&out_dir.join(RECORDS_FILE), &dataset.records)?;
    write_harvest_log(&out_dir.join(HARVEST_LOG_FILE), &dataset.harvest_log)?;
    write_truth(&out_dir.join(TRUTH_FILE), &dataset.truth)?;
    Ok(dataset)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| Error::Validation(format!("writing {}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("writing {}: {e}", path.display())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_harvest_log(path: &Path, log: &[(String, u32)]) -> Result<()> {
    write_csv(path, log, &["plot_id", "harvest_stage"])
}

pub fn read_harvest_log(path: &Path) -> Result<Vec<(String, u32)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                column: "harvest_stage".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_truth(path: &Path, truth: &[FrameTruth]) -> Result<()> {
    write_csv(
        path,
        truth,
        &[
            "image_path",
            "plot_id",
            "stage",
            "target_area",
            "mask_area",
            "visible",
            "offset_x",
            "offset_y",
        ],
    )
}

/// Randomly placed, non-touching rosettes in one frame, for segmentation
/// checks. Returns the image and one ground-truth mask per plant.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, size: usize, n_plants: usize, areas: (f64, f64)) -> (ImageTensor, Vec<Mask>) {
    let mut placed: Vec<PlacedPlant> = Vec::new();
    let mut footprints: Vec<Mask> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_plants && attempts < 200 {
        attempts += 1;
        let rosette = Rosette::random(rng, 12);
        let n_leaves = rng.random_range(4..=10);
        let margin = 0.15 * size as f64;
        let center = (
            rng.random_range(margin..size as f64 - margin),
            rng.random_range(margin..size as f64 - margin),
        );
        let target = rng.random_range(areas.0..=areas.1);
        let scale = solve_scale(&rosette, n_leaves, center, size, target);
        let plant = PlacedPlant {
            rosette,
            n_leaves,
            center,
            scale,
        };
        let fp = rasterize(&plant, size);
        // A 3x3 closing bridges gaps of up to two pixels, so keep three.
        let grown = grow(&fp, 3);
        if footprints.iter().any(|f| f.bits.iter().zip(&grown.bits).any(|(a, b)| *a && *b)) {
            continue;
        }
        footprints.push(fp);
        placed.push(plant);
    }
    let seed = rng.random();
    render_scene(size, &placed, seed, (0.0, 0.0))
}

fn grow(m: &Mask, r: usize) -> Mask {
    let mut out = Mask::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) {
                for ny in y.saturating_sub(r)..=(y + r).min(m.height - 1) {
                    for nx in x.saturating_sub(r)..=(x + r).min(m.width - 1) {
                        out.set(nx, ny, true);
                    }
                }
            }
        }
    }
    out
}
