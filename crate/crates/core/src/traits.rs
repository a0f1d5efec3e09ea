//! Plant instances and the traits derived from them.
//!
//! Rows of plants run vertically in the frame, so width is measured along x
//! and height along y. Bounding boxes are half-open: a mask covering columns
//! 5..=14 has `x_min = 5`, `x_max = 15` and width 10.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageRecord, Treatment};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

pub const TRAIT_COLUMNS: [&str; 9] = [
    "source_image",
    "stage",
    "treatment",
    "area_px",
    "center_x",
    "center_y",
    "width_px",
    "height_px",
    "score",
];

pub const DEFAULT_CENTER_FRACTION: f64 = 1.0 / 3.0;

/// Binary raster in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight half-open bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert(BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + 1,
                        y_max: y + 1,
                    });
                    b.x_min = b.x_min.min(x);
                    b.x_max = b.x_max.max(x + 1);
                    b.y_max = y + 1;
                }
            }
        }
        bb
    }

    pub fn rotate_180(&self) -> Mask {
        let mut bits = self.bits.clone();
        bits.reverse();
        Mask { bits, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantInstance {
    pub mask: Mask,
    pub bbox: BBox,
    pub score: f64,
}

impl PlantInstance {
    /// Wraps a non-empty mask, deriving its tight bounding box.
    pub fn from_mask(mask: Mask, score: f64) -> Option<Self> {
        let bbox = mask.bbox()?;
        Some(PlantInstance { mask, bbox, score })
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitRecord {
    pub source_image: String,
    pub stage: u32,
    pub treatment: Treatment,
    pub area_px: u64,
    pub center_x: f64,
    pub center_y: f64,
    pub width_px: u64,
    pub height_px: u64,
    pub score: f64,
    /// Set when the bounding box intersects another instance's, since the
    /// extent along the row then includes overlap errors.
    pub height_unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub min_area: usize,
    pub fallback_threshold: f64,
    /// Otsu is rejected when between-class variance over total variance is below this.
    pub min_variance_ratio: f64,
    /// Otsu is also rejected when its two class means are closer than this.
    pub min_class_separation: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            min_area: 50,
            fallback_threshold: 0.1,
            min_variance_ratio: 0.05,
            min_class_separation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Program run once per image with the PNG path appended to `args`.
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Baseline(BaselineConfig),
    External(ExternalConfig),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Baseline(BaselineConfig::default())
    }
}

/// `2G - R - B` on channels rescaled to [0, 1], row-major.
pub fn excess_green(img: &ImageTensor) -> Vec<f32> {
    let to01 = |v: f32| (v + 1.0) / 2.0;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| 2.0 * to01(g[i]) - to01(r[i]) - to01(b[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    /// Between-class over total variance.
    pub variance_ratio: f64,
    pub class_separation: f64,
}

const OTSU_BINS: usize = 512;
const EXG_RANGE: (f64, f64) = (-2.0, 2.0);

/// Otsu's threshold over a fixed-range histogram of excess-green values.
/// Values strictly above the threshold belong to the upper class.
pub fn otsu_threshold(values: &[f32]) -> OtsuResult {
    let (lo, hi) = EXG_RANGE;
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = vec![0u64; OTSU_BINS];
    for &v in values {
        let b = ((f64::from(v) - lo) / width).floor().clamp(0.0, (OTSU_BINS - 1) as f64) as usize;
        hist[b] += 1;
    }
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let n: u64 = hist.iter().sum();
    let total_sum: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * center(b)).sum();
    let mean = if n > 0 { total_sum / n as f64 } else { 0.0 };
    let total_var: f64 = if n > 0 {
        hist.iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * (center(b) - mean).powi(2))
            .sum::<f64>()
            / n as f64
    } else {
        0.0
    };

    let mut best = OtsuResult {
        threshold: mean,
        variance_ratio: 0.0,
        class_separation: 0.0,
    };
    let mut best_between = -1.0;
    let (mut w0, mut s0) = (0u64, 0.0);
    for b in 0..OTSU_BINS - 1 {
        w0 += hist[b];
        s0 += hist[b] as f64 * center(b);
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = s0 / w0 as f64;
        let m1 = (total_sum - s0) / w1 as f64;
        let p0 = w0 as f64 / n as f64;
        let between = p0 * (1.0 - p0) * (m1 - m0).powi(2);
        if between > best_between {
            best_between = between;
            best = OtsuResult {
                threshold: lo + (b + 1) as f64 * width,
                variance_ratio: if total_var > 0.0 { between / total_var } else { 0.0 },
                class_separation: m1 - m0,
            };
        }
    }
    best
}

/// Threshold used by the baseline segmenter: Otsu, or the fixed fallback
/// when the histogram shows no usable second mode.
pub fn baseline_threshold(values: &[f32], config: &BaselineConfig) -> f64 {
    let otsu = otsu_threshold(values);
    if otsu.variance_ratio < config.min_variance_ratio
        || otsu.class_separation < config.min_class_separation
    {
        config.fallback_threshold
    } else {
        otsu.threshold
    }
}

/// 3x3 erosion; pixels outside the frame are ignored.
fn erode(m: &Mask) -> Mask {
    morph(m, true)
}

/// 3x3 dilation; pixels outside the frame are ignored.
fn dilate(m: &Mask) -> Mask {
    morph(m, false)
}

fn morph(m: &Mask, erode: bool) -> Mask {
    let (w, h) = (m.width, m.height);
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            'win: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = m.get(nx, ny);
                    if erode && !v {
                        acc = false;
                        break 'win;
                    }
                    if !erode && v {
                        acc = true;
                        break 'win;
                    }
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

pub fn morphological_open(m: &Mask) -> Mask {
    dilate(&erode(m))
}

pub fn morphological_close(m: &Mask) -> Mask {
    erode(&dilate(m))
}

/// 8-connected components, each a list of row-major pixel indices, ordered
/// by their first pixel in raster order.
pub fn connected_components(m: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (m.width, m.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !m.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if m.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Excess-green threshold, 3x3 open then close, connected components,
/// small components dropped.
pub fn segment_baseline(image: &ImageTensor, config: &BaselineConfig) -> Vec<PlantInstance> {
    let (w, h) = (image.width(), image.height());
    let exg = excess_green(image);
    let t = baseline_threshold(&exg, config);
    let raw = Mask::from_bits(w, h, exg.iter().map(|v| f64::from(*v) > t).collect())
        .expect("image-sized mask");
    let cleaned = morphological_close(&morphological_open(&raw));
    connected_components(&cleaned)
        .into_iter()
        .filter(|c| c.len() >= config.min_area)
        .filter_map(|c| {
            let mut mask = Mask::new(w, h);
            for i in c {
                mask.bits[i] = true;
            }
            PlantInstance::from_mask(mask, 1.0)
        })
        .collect()
}

/// Run lengths of a row-major mask, alternating background and foreground
/// and starting with a (possibly empty) background run.
pub fn encode_rle(mask: &Mask) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for &b in &mask.bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(runs: &[u64], width: usize, height: usize) -> Result<Mask> {
    let total: u64 = runs.iter().sum();
    if total != (width * height) as u64 {
        return Err(Error::Backend(format!(
            "mask_rle covers {total} pixels, image has {}",
            width * height
        )));
    }
    let mut bits = Vec::with_capacity(width * height);
    for (i, &len) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat(i % 2 == 1).take(len as usize));
    }
    Mask::from_bits(width, height, bits)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceJson {
    pub bbox: [i64; 4],
    pub score: f64,
    pub mask_rle: Vec<u64>,
}

impl InstanceJson {
    pub fn from_instance(inst: &PlantInstance) -> Self {
        let b = inst.bbox;
        InstanceJson {
            bbox: [b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64],
            score: inst.score,
            mask_rle: encode_rle(&inst.mask),
        }
    }
}

/// Parses an external backend's instance list. The bounding box is
/// recomputed from the mask; a disagreeing reported box is only logged.
pub fn parse_instances(text: &str, width: usize, height: usize) -> Result<Vec<PlantInstance>> {
    let items: Vec<InstanceJson> = serde_json::from_str(text)
        .map_err(|e| Error::Backend(format!("instance JSON does not match schema: {e}")))?;
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            if !(0.0..=1.0).contains(&item.score) {
                return Err(Error::Backend(format!(
                    "instance {i}: score {} outside [0, 1]",
                    item.score
                )));
            }
            let mask = decode_rle(&item.mask_rle, width, height)?;
            let inst = PlantInstance::from_mask(mask, item.score)
                .ok_or_else(|| Error::Backend(format!("instance {i}: empty mask")))?;
            let b = inst.bbox;
            let tight = [b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64];
            if tight != item.bbox {
                log::warn!(
                    "instance {i}: reported bbox {:?} differs from mask extent {:?}",
                    item.bbox,
                    tight
                );
            }
            Ok(inst)
        })
        .collect()
}

fn segment_external(image: &ImageTensor, config: &ExternalConfig) -> Result<Vec<PlantInstance>> {
    let file = tempfile::Builder::new()
        .suffix(".png")
        .tempfile()
        .map_err(|e| Error::Backend(format!("cannot create temporary image: {e}")))?;
    image.save_png(file.path())?;
    let output = Command::new(&config.program)
        .args(&config.args)
        .arg(file.path())
        .output()
        .map_err(|e| Error::Backend(format!("cannot run `{}`: {e}", config.program)))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(Error::Backend(format!(
            "`{}` exited with {}: {}",
            config.program,
            output.status,
            stderr.lines().next().unwrap_or("").trim()
        )));
    }
    let text = String::from_utf8(output.stdout)
        .map_err(|_| Error::Backend(format!("`{}` wrote non-UTF-8 output", config.program)))?;
    parse_instances(&text, image.width(), image.height())
}

pub fn segment(image: &ImageTensor, backend: &Backend) -> Result<Vec<PlantInstance>> {
    match backend {
        Backend::Baseline(c) => Ok(segment_baseline(image, c)),
        Backend::External(c) => segment_external(image, c),
    }
}

/// Segments many images in parallel, preserving order.
pub fn segment_all(images: &[ImageTensor], backend: &Backend) -> Result<Vec<Vec<PlantInstance>>> {
    images.par_iter().map(|img| segment(img, backend)).collect()
}

pub fn extract_traits(instances: &[PlantInstance], meta: &ImageRecord) -> Vec<TraitRecord> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let (cx, cy) = inst.bbox.center();
            let overlapped = instances
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && o.bbox.intersects(&inst.bbox));
            TraitRecord {
                source_image: meta.image_path.clone(),
                stage: meta.stage,
                treatment: meta.treatment,
                area_px: inst.area() as u64,
                center_x: cx,
                center_y: cy,
                width_px: inst.bbox.width() as u64,
                height_px: inst.bbox.height() as u64,
                score: inst.score,
                height_unreliable: overlapped,
            }
        })
        .collect()
}

/// Keeps records whose center lies in the centered square window of side
/// `fraction * image_size` (borders inclusive).
pub fn select_center_plants(records: &[TraitRecord], image_size: usize, fraction: f64) -> Result<Vec<TraitRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "center fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mid = image_size as f64 / 2.0;
    let half = fraction * image_size as f64 / 2.0;
    Ok(records
        .iter()
        .filter(|r| (r.center_x - mid).abs() <= half && (r.center_y - mid).abs() <= half)
        .cloned()
        .collect())
}

pub fn write_traits_csv(path: &Path, records: &[TraitRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Validation(format!("writing traits: {e}"));
    w.write_record(TRAIT_COLUMNS).map_err(io)?;
    for r in records {
        w.write_record([
            r.source_image.clone(),
            r.stage.to_string(),
            r.treatment.code().to_string(),
            r.area_px.to_string(),
            r.center_x.to_string(),
            r.center_y.to_string(),
            r.width_px.to_string(),
            r.height_px.to_string(),
            r.score.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("writing traits: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_traits_csv(path: &Path) -> Result<Vec<TraitRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != TRAIT_COLUMNS {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected header {}", TRAIT_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let parse_err = |c: usize, m: String| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            column: TRAIT_COLUMNS[c].to_string(),
            message: m,
        };
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|e| parse_err(c, e.to_string()))
        };
        let int = |c: usize| -> Result<u64> {
            field(c)
                .parse::<u64>()
                .map_err(|e| parse_err(c, e.to_string()))
        };
        out.push(TraitRecord {
            source_image: field(0).to_string(),
            stage: field(1)
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err(1, e.to_string()))?,
            treatment: field(2)
                .parse()
                .map_err(|e: String| parse_err(2, e))?,
            area_px: int(3)?,
            center_x: num(4)?,
            center_y: num(5)?,
            width_px: int(6)?,
            height_px: int(7)?,
            score: num(8)?,
            height_unreliable: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Split;

    fn meta() -> ImageRecord {
        ImageRecord {
            image_path: "img.png".into(),
            plot_id: "p1".into(),
            stage: 4,
            easting_m: 0.0,
            northing_m: 0.0,
            treatment: Treatment::IrrigatedFertilized,
            split: Split::Test,
        }
    }

    fn square(size: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::new(size, size);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    fn image_with(size: usize, fg: &Mask) -> ImageTensor {
        // Brown soil, green foreground.
        let mut img = ImageTensor::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let (r, g, b) = if fg.get(x, y) {
                    (0.2, 0.6, 0.15)
                } else {
                    (0.45, 0.32, 0.2)
                };
                img.set(0, y, x, 2.0 * r - 1.0);
                img.set(1, y, x, 2.0 * g - 1.0);
                img.set(2, y, x, 2.0 * b - 1.0);
            }
        }
        img
    }

    #[test]
    fn square_traits() {
        let inst = PlantInstance::from_mask(square(32, 5, 5, 10), 0.9).unwrap();
        let t = extract_traits(&[inst], &meta());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].area_px, 100);
        assert_eq!((t[0].center_x, t[0].center_y), (10.0, 10.0));
        assert_eq!((t[0].width_px, t[0].height_px), (10, 10));
        assert!(!t[0].height_unreliable);
        assert!(extract_traits(&[], &meta()).is_empty());
    }

    #[test]
    fn overlapping_boxes_flag_height() {
        let a = PlantInstance::from_mask(square(32, 2, 2, 10), 1.0).unwrap();
        let b = PlantInstance::from_mask(square(32, 8, 8, 10), 1.0).unwrap();
        let c = PlantInstance::from_mask(square(32, 25, 25, 5), 1.0).unwrap();
        let t = extract_traits(&[a, b, c], &meta());
        assert!(t[0].height_unreliable && t[1].height_unreliable);
        assert!(!t[2].height_unreliable);
    }

    #[test]
    fn baseline_finds_one_square_and_nothing_on_soil() {
        let fg = square(64, 20, 20, 16);
        let found = segment_baseline(&image_with(64, &fg), &BaselineConfig::default());
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].mask, fg);
        let empty = segment_baseline(&image_with(64, &Mask::new(64, 64)), &BaselineConfig::default());
        assert!(empty.is_empty());
    }

    #[test]
    fn two_plants_give_disjoint_instances() {
        let mut fg = square(64, 4, 4, 12);
        for (i, b) in square(64, 40, 40, 14).bits.iter().enumerate() {
            fg.bits[i] |= *b;
        }
        let found = segment_baseline(&image_with(64, &fg), &BaselineConfig::default());
        assert_eq!(found.len(), 2);
        assert!(found[0]
            .mask
            .bits
            .iter()
            .zip(&found[1].mask.bits)
            .all(|(a, b)| !(a & b)));
        let mut areas: Vec<usize> = found.iter().map(|i| i.area()).collect();
        areas.sort();
        assert_eq!(areas, vec![144, 196]);
    }

    #[test]
    fn small_components_are_dropped() {
        let fg = square(32, 10, 10, 6); // 36 px < 50
        assert!(segment_baseline(&image_with(32, &fg), &BaselineConfig::default()).is_empty());
    }

    #[test]
    fn open_removes_specks_and_close_fills_holes() {
        let mut m = square(16, 4, 4, 6);
        m.set(0, 15, true);
        let opened = morphological_open(&m);
        assert!(!opened.get(0, 15));
        assert_eq!(opened.count(), 36);
        let mut holed = square(16, 4, 4, 6);
        holed.set(6, 6, false);
        assert_eq!(morphological_close(&holed).count(), 36);
    }

    #[test]
    fn eight_connectivity_joins_diagonals() {
        let mut m = Mask::new(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(3, 3, true);
        let comps = connected_components(&m);
        assert_eq!(comps, vec![vec![0, 5], vec![15]]);
    }

    #[test]
    fn rle_round_trip_and_leading_zero_run() {
        let m = Mask::from_bits(3, 2, vec![true, true, false, false, true, true]).unwrap();
        let runs = encode_rle(&m);
        assert_eq!(runs, vec![0, 2, 2, 2]);
        assert_eq!(decode_rle(&runs, 3, 2).unwrap(), m);
        assert!(matches!(decode_rle(&runs, 3, 3), Err(Error::Backend(_))));
    }

    #[test]
    fn parse_instances_validates_schema() {
        let m = square(8, 2, 2, 3);
        let inst = PlantInstance::from_mask(m.clone(), 0.75).unwrap();
        let text = serde_json::to_string(&vec![InstanceJson::from_instance(&inst)]).unwrap();
        assert_eq!(parse_instances(&text, 8, 8).unwrap(), vec![inst]);
        assert!(parse_instances("[]", 8, 8).unwrap().is_empty());
        assert!(matches!(
            parse_instances("{\"not\": \"a list\"}", 8, 8),
            Err(Error::Backend(_))
        ));
        let bad_score = text.replace("0.75", "1.5");
        assert!(matches!(parse_instances(&bad_score, 8, 8), Err(Error::Backend(_))));
    }

    #[test]
    fn missing_external_program_is_backend_error() {
        let backend = Backend::External(ExternalConfig {
            program: "/nonexistent/segmenter".into(),
            args: vec![],
        });
        let img = ImageTensor::filled(8, 8, 0.0);
        assert!(matches!(segment(&img, &backend), Err(Error::Backend(_))));
    }

    #[test]
    fn center_selection() {
        let mk = |x: f64, y: f64| TraitRecord {
            source_image: "a".into(),
            stage: 0,
            treatment: Treatment::Unspecified,
            area_px: 1,
            center_x: x,
            center_y: y,
            width_px: 1,
            height_px: 1,
            score: 1.0,
            height_unreliable: false,
        };
        let recs = vec![mk(32.0, 32.0), mk(0.0, 0.0), mk(44.0, 32.0)];
        let kept = select_center_plants(&recs, 64, DEFAULT_CENTER_FRACTION).unwrap();
        assert_eq!(kept, vec![recs[0].clone()]);
        assert_eq!(select_center_plants(&recs[..1], 64, 0.01).unwrap().len(), 1);
        assert!(select_center_plants(&recs, 64, 0.0).is_err());
    }

    #[test]
    fn traits_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traits.csv");
        let inst = PlantInstance::from_mask(square(32, 5, 5, 10), 0.5).unwrap();
        let recs = extract_traits(&[inst], &meta());
        write_traits_csv(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAIT_COLUMNS.join(","));
        assert_eq!(read_traits_csv(&path).unwrap(), recs);
    }
}
