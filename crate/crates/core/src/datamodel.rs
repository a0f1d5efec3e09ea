//! Domain records shared by every stage of the pipeline, plus the on-disk
//! manifest formats.
//!
//! A manifest directory holds three files:
//!
//! - `records.csv`: one observation per row, columns
//!   `image_path,plot_id,stage,easting_m,northing_m,treatment,split`
//! - `pairs.jsonl`: one aligned pair per line,
//!   `{"input": <image_path>, "reference": <image_path>, "horizon": <int>}`
//! - `manifest.json`: horizon, distance threshold and stage unit (optional on read)

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.csv";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MANIFEST_META_FILE: &str = "manifest.json";

pub const RECORD_COLUMNS: [&str; 7] = [
    "image_path",
    "plot_id",
    "stage",
    "easting_m",
    "northing_m",
    "treatment",
    "split",
];

/// Plot id used for images where no plant could be attributed to a plot.
pub const UNKNOWN_PLOT: &str = "unknown";

pub const DEFAULT_DISTANCE_THRESHOLD_M: f64 = 0.02;

/// Field management condition: irrigation (i) and fertilization (f), each on (+) or off (-).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Treatment {
    #[serde(rename = "i+f+")]
    IrrigatedFertilized,
    #[serde(rename = "i+f-")]
    IrrigatedUnfertilized,
    #[serde(rename = "i-f+")]
    DryFertilized,
    #[serde(rename = "i-f-")]
    DryUnfertilized,
    /// The dataset carries no treatment design.
    #[serde(rename = "none")]
    Unspecified,
}

impl Treatment {
    /// The four designed treatments, in decreasing expected vigor.
    pub const DESIGNED: [Treatment; 4] = [
        Treatment::IrrigatedFertilized,
        Treatment::IrrigatedUnfertilized,
        Treatment::DryFertilized,
        Treatment::DryUnfertilized,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Treatment::IrrigatedFertilized => "i+f+",
            Treatment::IrrigatedUnfertilized => "i+f-",
            Treatment::DryFertilized => "i-f+",
            Treatment::DryUnfertilized => "i-f-",
            Treatment::Unspecified => "none",
        }
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Treatment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "i+f+" => Ok(Treatment::IrrigatedFertilized),
            "i+f-" => Ok(Treatment::IrrigatedUnfertilized),
            "i-f+" => Ok(Treatment::DryFertilized),
            "i-f-" => Ok(Treatment::DryUnfertilized),
            "none" => Ok(Treatment::Unspecified),
            other => Err(format!(
                "unknown treatment `{other}` (expected i+f+, i+f-, i-f+, i-f- or none)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

/// Unit of the integer stage index. Metadata only; never used in arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageUnit {
    #[default]
    Week,
    Day,
}

/// One geo-referenced observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    pub plot_id: String,
    pub stage: u32,
    pub easting_m: f64,
    pub northing_m: f64,
    pub treatment: Treatment,
    pub split: Split,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_path.is_empty() {
            return Err(Error::Validation("record with empty image_path".into()));
        }
        if !self.easting_m.is_finite() || !self.northing_m.is_finite() {
            return Err(Error::Validation(format!(
                "record {}: non-finite coordinates",
                self.image_path
            )));
        }
        Ok(())
    }

    /// Planar distance between image centers, in metres.
    pub fn ground_distance(&self, other: &ImageRecord) -> f64 {
        (self.easting_m - other.easting_m).hypot(self.northing_m - other.northing_m)
    }
}

/// An early-stage image (domain A) aligned with a later image of the same scene (domain B).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub input: ImageRecord,
    pub reference: ImageRecord,
    pub horizon: u32,
}

impl ImagePair {
    pub fn new(input: ImageRecord, reference: ImageRecord) -> Result<Self> {
        if reference.stage <= input.stage {
            return Err(Error::Validation(format!(
                "pair {} -> {}: reference stage {} is not after input stage {}",
                input.image_path, reference.image_path, reference.stage, input.stage
            )));
        }
        let pair = ImagePair {
            horizon: reference.stage - input.stage,
            input,
            reference,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.reference.validate()?;
        let name = || format!("{} -> {}", self.input.image_path, self.reference.image_path);
        if self.horizon == 0
            || i64::from(self.reference.stage) - i64::from(self.input.stage)
                != i64::from(self.horizon)
        {
            return Err(Error::Validation(format!(
                "pair {}: stages {} -> {} do not match horizon {}",
                name(),
                self.input.stage,
                self.reference.stage,
                self.horizon
            )));
        }
        if self.input.plot_id != self.reference.plot_id {
            return Err(Error::Validation(format!(
                "pair {}: plot ids differ ({} vs {})",
                name(),
                self.input.plot_id,
                self.reference.plot_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub horizon: u32,
    pub distance_threshold_m: f64,
    #[serde(default)]
    pub stage_unit: StageUnit,
}

/// Aligned cross-time pairs sharing one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub pairs: Vec<ImagePair>,
    pub horizon: u32,
    pub distance_threshold_m: f64,
    pub stage_unit: StageUnit,
}

impl PairManifest {
    pub fn empty(horizon: u32, distance_threshold_m: f64) -> Self {
        PairManifest {
            pairs: Vec::new(),
            horizon,
            distance_threshold_m,
            stage_unit: StageUnit::default(),
        }
    }

    pub fn new(pairs: Vec<ImagePair>, horizon: u32, distance_threshold_m: f64) -> Result<Self> {
        let manifest = PairManifest {
            pairs,
            horizon,
            distance_threshold_m,
            stage_unit: StageUnit::default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold_m > 0.0) {
            return Err(Error::Validation(format!(
                "distance threshold must be positive, got {}",
                self.distance_threshold_m
            )));
        }
        let mut seen = HashSet::new();
        for pair in &self.pairs {
            pair.validate()?;
            if pair.horizon != self.horizon {
                return Err(Error::Validation(format!(
                    "pair {} -> {}: horizon {} differs from manifest horizon {}",
                    pair.input.image_path, pair.reference.image_path, pair.horizon, self.horizon
                )));
            }
            if !seen.insert((&pair.input.image_path, &pair.reference.image_path)) {
                return Err(Error::Validation(format!(
                    "pair {} -> {}: duplicate entry",
                    pair.input.image_path, pair.reference.image_path
                )));
            }
        }
        Ok(())
    }

    /// Pairs whose input record belongs to `split`.
    pub fn filter_split(&self, split: Split) -> PairManifest {
        PairManifest {
            pairs: self
                .pairs
                .iter()
                .filter(|p| p.input.split == split)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Distinct records referenced by the pairs, sorted by image path.
    pub fn records(&self) -> Vec<ImageRecord> {
        let mut by_path: BTreeMap<&str, &ImageRecord> = BTreeMap::new();
        for pair in &self.pairs {
            by_path.insert(&pair.input.image_path, &pair.input);
            by_path.insert(&pair.reference.image_path, &pair.reference);
        }
        by_path.into_values().cloned().collect()
    }

    pub fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            horizon: self.horizon,
            distance_threshold_m: self.distance_threshold_m,
            stage_unit: self.stage_unit,
        }
    }
}

fn parse_field<T: FromStr>(
    path: &Path,
    row: usize,
    column: &str,
    raw: &str,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: format!("`{raw}`: {e}"),
    })
}

/// Reads a records CSV. Rows are numbered from 1 for the first data row.
pub fn load_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(0, "<header>", e.to_string()))?
        .clone();
    let header: Vec<&str> = headers.iter().collect();
    if header != RECORD_COLUMNS {
        return Err(parse_err(
            0,
            "<header>",
            format!(
                "expected columns `{}`, found `{}`",
                RECORD_COLUMNS.join(","),
                header.join(",")
            ),
        ));
    }

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| parse_err(row_no, "<row>", e.to_string()))?;
        if row.len() != RECORD_COLUMNS.len() {
            return Err(parse_err(
                row_no,
                "<row>",
                format!("expected {} fields, found {}", RECORD_COLUMNS.len(), row.len()),
            ));
        }
        let stage: i64 = parse_field(path, row_no, "stage", &row[2])?;
        if stage < 0 || stage > i64::from(u32::MAX) {
            return Err(parse_err(row_no, "stage", format!("stage {stage} out of range")));
        }
        let record = ImageRecord {
            image_path: row[0].to_string(),
            plot_id: row[1].to_string(),
            stage: stage as u32,
            easting_m: parse_field(path, row_no, "easting_m", &row[3])?,
            northing_m: parse_field(path, row_no, "northing_m", &row[4])?,
            treatment: parse_field(path, row_no, "treatment", &row[5])?,
            split: parse_field(path, row_no, "split", &row[6])?,
        };
        if record.image_path.is_empty() {
            return Err(parse_err(row_no, "image_path", "empty image path".into()));
        }
        if !record.easting_m.is_finite() {
            return Err(parse_err(row_no, "easting_m", "non-finite coordinate".into()));
        }
        if !record.northing_m.is_finite() {
            return Err(parse_err(row_no, "northing_m", "non-finite coordinate".into()));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    writer.write_record(RECORD_COLUMNS).map_err(csv_err)?;
    for r in records {
        writer
            .write_record([
                r.image_path.as_str(),
                r.plot_id.as_str(),
                &r.stage.to_string(),
                &r.easting_m.to_string(),
                &r.northing_m.to_string(),
                r.treatment.code(),
                r.split.as_str(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    input: String,
    reference: String,
    horizon: u32,
}

/// Resolves the directory and pairs file for a manifest given either the
/// directory itself or the path of its `pairs.jsonl`.
fn manifest_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(PAIRS_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    }
}

/// Loads a manifest from a directory (or the path of its `pairs.jsonl`); the
/// records file is expected next to the pairs file.
pub fn load_manifest(path: &Path) -> Result<PairManifest> {
    let (dir, pairs_path) = manifest_paths(path);
    let records = load_records(&dir.join(RECORDS_FILE))?;
    let meta_path = dir.join(MANIFEST_META_FILE);
    let meta: Option<ManifestMeta> = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    let mut by_path: HashMap<&str, &ImageRecord> = HashMap::with_capacity(records.len());
    for r in &records {
        if by_path.insert(&r.image_path, r).is_some() {
            return Err(Error::Validation(format!(
                "records file lists {} more than once",
                r.image_path
            )));
        }
    }

    let file = File::open(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
    let mut pairs = Vec::new();
    let mut horizon = meta.as_ref().map(|m| m.horizon);
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|e| Error::io(&pairs_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: pairs_path.clone(),
            row,
            column: format!("col {}", e.column()),
            message: e.to_string(),
        })?;
        let lookup = |key: &str, column: &str| {
            by_path.get(key).copied().cloned().ok_or_else(|| Error::Parse {
                path: pairs_path.clone(),
                row,
                column: column.to_string(),
                message: format!("`{key}` not found in {RECORDS_FILE}"),
            })
        };
        let input = lookup(&entry.input, "input")?;
        let reference = lookup(&entry.reference, "reference")?;
        let pair = ImagePair {
            input,
            reference,
            horizon: entry.horizon,
        };
        pair.validate()?;
        horizon.get_or_insert(entry.horizon);
        pairs.push(pair);
    }

    let manifest = PairManifest {
        pairs,
        horizon: horizon.unwrap_or(1),
        distance_threshold_m: meta
            .as_ref()
            .map_or(DEFAULT_DISTANCE_THRESHOLD_M, |m| m.distance_threshold_m),
        stage_unit: meta.map(|m| m.stage_unit).unwrap_or_default(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes `records.csv`, `pairs.jsonl` and `manifest.json` into `dir`.
pub fn save_manifest(dir: &Path, manifest: &PairManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_records(&dir.join(RECORDS_FILE), &manifest.records())?;

    let pairs_path = dir.join(PAIRS_FILE);
    let file = File::create(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
    let mut out = BufWriter::new(file);
    for pair in &manifest.pairs {
        let line = serde_json::to_string(&PairLine {
            input: pair.input.image_path.clone(),
            reference: pair.reference.image_path.clone(),
            horizon: pair.horizon,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(&pairs_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&pairs_path, e))?;

    let meta_path = dir.join(MANIFEST_META_FILE);
    let meta = serde_json::to_string_pretty(&manifest.meta())?;
    std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Pair counts by stage transition and treatment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountTable {
    pub cells: BTreeMap<(u32, u32), BTreeMap<Treatment, usize>>,
}

impl CountTable {
    pub fn get(&self, transition: (u32, u32), treatment: Treatment) -> usize {
        self.cells
            .get(&transition)
            .and_then(|row| row.get(&treatment))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_total(&self, transition: (u32, u32)) -> usize {
        self.cells.get(&transition).map_or(0, |row| row.values().sum())
    }

    pub fn column_total(&self, treatment: Treatment) -> usize {
        self.cells
            .values()
            .filter_map(|row| row.get(&treatment))
            .sum()
    }

    pub fn total(&self) -> usize {
        self.cells.values().flat_map(|row| row.values()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn treatments(&self) -> Vec<Treatment> {
        let set: std::collections::BTreeSet<Treatment> = self
            .cells
            .values()
            .flat_map(|row| row.keys().copied())
            .collect();
        set.into_iter().collect()
    }

    /// `from_stage,to_stage,<treatment>...,total`, one row per transition.
    pub fn to_csv(&self) -> String {
        let treatments = self.treatments();
        let mut out = String::from("from_stage,to_stage");
        for t in &treatments {
            out.push(',');
            out.push_str(t.code());
        }
        out.push_str(",total\n");
        for (&(from, to), row) in &self.cells {
            out.push_str(&format!("{from},{to}"));
            for t in &treatments {
                out.push_str(&format!(",{}", row.get(t).copied().unwrap_or(0)));
            }
            out.push_str(&format!(",{}\n", self.row_total((from, to))));
        }
        out
    }
}

pub fn manifest_counts(manifest: &PairManifest) -> CountTable {
    let mut table = CountTable::default();
    for pair in &manifest.pairs {
        *table
            .cells
            .entry((pair.input.stage, pair.reference.stage))
            .or_default()
            .entry(pair.input.treatment)
            .or_default() += 1;
    }
    table
}
