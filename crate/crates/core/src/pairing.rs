//! Aligned cross-time pair construction from geo-referenced records, and the
//! cleaning rules applied before training.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    ImagePair, ImageRecord, PairManifest, StageUnit, DEFAULT_DISTANCE_THRESHOLD_M,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningRules {
    /// Drop pairs where the plant is absent in the input but present in the reference.
    pub drop_appearing: bool,
    /// Drop pairs where the plant is present in the input but gone from the reference.
    pub drop_disappearing: bool,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            drop_appearing: true,
            drop_disappearing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub distance_threshold_m: f64,
    pub horizon: u32,
    pub cleaning: CleaningRules,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            distance_threshold_m: DEFAULT_DISTANCE_THRESHOLD_M,
            horizon: 3,
            cleaning: CleaningRules::default(),
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold_m > 0.0 && self.distance_threshold_m.is_finite()) {
            return Err(Error::Config(format!(
                "distance threshold must be positive, got {}",
                self.distance_threshold_m
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingOutcome {
    pub manifest: PairManifest,
    pub warnings: Vec<String>,
}

type Cell = (i64, i64);

fn cell_of(record: &ImageRecord, size: f64) -> Cell {
    (
        (record.easting_m / size).floor() as i64,
        (record.northing_m / size).floor() as i64,
    )
}

/// Pairs each record with the nearest record of the same plot exactly
/// `horizon` stages later whose image center lies within the distance threshold. Ties on distance go
/// to the lexicographically smaller image path. Output is sorted by input
/// stage, then input path, so the result does not depend on input order.
pub fn build_pairs(records: &[ImageRecord], config: &PairingConfig) -> Result<PairingOutcome> {
    config.validate()?;
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if !seen.insert(r.image_path.as_str()) {
            return Err(Error::Validation(format!(
                "record {} appears more than once",
                r.image_path
            )));
        }
    }

    let mut warnings = Vec::new();
    let mut by_stage: BTreeMap<u32, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        by_stage.entry(r.stage).or_default().push(r);
    }
    let empty = |warnings| PairingOutcome {
        manifest: PairManifest {
            stage_unit: StageUnit::default(),
            ..PairManifest::empty(config.horizon, config.distance_threshold_m)
        },
        warnings,
    };
    if by_stage.len() < 2 {
        warnings.push(format!(
            "records span {} distinct stage(s); at least two are needed to form pairs",
            by_stage.len()
        ));
        return Ok(empty(warnings));
    }

    // Bucket each stage on a grid whose cells are one threshold wide, so every
    // candidate within the threshold sits in the 3x3 neighbourhood of a cell.
    let cell_size = config.distance_threshold_m;
    let grids: HashMap<u32, HashMap<Cell, Vec<&ImageRecord>>> = by_stage
        .iter()
        .map(|(&stage, rs)| {
            let mut grid: HashMap<Cell, Vec<&ImageRecord>> = HashMap::new();
            for r in rs {
                grid.entry(cell_of(r, cell_size)).or_default().push(r);
            }
            (stage, grid)
        })
        .collect();

    let mut pairs = Vec::new();
    for (&stage, inputs) in &by_stage {
        let Some(target_stage) = stage.checked_add(config.horizon) else {
            continue;
        };
        let Some(grid) = grids.get(&target_stage) else {
            continue;
        };
        for input in inputs {
            let (cx, cy) = cell_of(input, cell_size);
            let mut best: Option<(f64, &ImageRecord)> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for cand in bucket {
                        let d = input.ground_distance(cand);
                        if d > config.distance_threshold_m || cand.plot_id != input.plot_id {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bd, b)) => d < bd || (d == bd && cand.image_path < b.image_path),
                        };
                        if better {
                            best = Some((d, cand));
                        }
                    }
                }
            }
            if let Some((_, reference)) = best {
                pairs.push(ImagePair::new((*input).clone(), reference.clone())?);
            }
        }
    }
    pairs.sort_by(|a, b| {
        (a.input.stage, &a.input.image_path).cmp(&(b.input.stage, &b.input.image_path))
    });

    let manifest = PairManifest::new(pairs, config.horizon, config.distance_threshold_m)?;
    Ok(PairingOutcome { manifest, warnings })
}

/// Removes pairs whose plant appears or disappears between the two stages,
/// according to `rules`. Pairs with the plant visible in both images are kept.
pub fn clean_pairs(
    manifest: &PairManifest,
    visibility: &HashMap<String, bool>,
    rules: CleaningRules,
) -> Result<PairManifest> {
    let visible = |path: &str| {
        visibility
            .get(path)
            .copied()
            .ok_or_else(|| Error::Validation(format!("no visibility entry for image {path}")))
    };
    let mut kept = Vec::with_capacity(manifest.pairs.len());
    for pair in &manifest.pairs {
        let input = visible(&pair.input.image_path)?;
        let reference = visible(&pair.reference.image_path)?;
        let appearing = !input && reference;
        let disappearing = input && !reference;
        if (appearing && rules.drop_appearing) || (disappearing && rules.drop_disappearing) {
            continue;
        }
        kept.push(pair.clone());
    }
    Ok(PairManifest {
        pairs: kept,
        ..manifest.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Split, Treatment};

    fn rec(path: &str, plot: &str, stage: u32, e: f64, n: f64) -> ImageRecord {
        ImageRecord {
            image_path: path.into(),
            plot_id: plot.into(),
            stage,
            easting_m: e,
            northing_m: n,
            treatment: Treatment::IrrigatedFertilized,
            split: Split::Train,
        }
    }

    fn config(h: u32) -> PairingConfig {
        PairingConfig {
            horizon: h,
            ..PairingConfig::default()
        }
    }

    #[test]
    fn centers_one_centimetre_apart_pair() {
        let rs = [rec("a", "p", 1, 10.0, 5.0), rec("b", "p", 4, 10.01, 5.0)];
        let out = build_pairs(&rs, &config(3)).unwrap();
        assert_eq!(out.manifest.len(), 1);
        assert_eq!(out.manifest.pairs[0].input.image_path, "a");
    }

    #[test]
    fn centers_three_centimetres_apart_do_not_pair() {
        let rs = [rec("a", "p", 1, 10.0, 5.0), rec("b", "p", 4, 10.03, 5.0)];
        assert!(build_pairs(&rs, &config(3)).unwrap().manifest.is_empty());
    }

    #[test]
    fn distance_equal_to_threshold_is_included() {
        let rs = [rec("a", "p", 0, 0.0, 0.0), rec("b", "p", 1, 0.0, 0.015625)];
        let cfg = PairingConfig {
            distance_threshold_m: 0.015625,
            ..config(1)
        };
        assert_eq!(build_pairs(&rs, &cfg).unwrap().manifest.len(), 1);
    }

    #[test]
    fn wrong_stage_gap_does_not_pair() {
        let rs = [rec("a", "p", 1, 0.0, 0.0), rec("b", "p", 3, 0.0, 0.0)];
        assert!(build_pairs(&rs, &config(3)).unwrap().manifest.is_empty());
    }

    #[test]
    fn single_stage_yields_empty_manifest_and_warning() {
        let rs = [rec("a", "p", 2, 0.0, 0.0), rec("b", "q", 2, 1.0, 0.0)];
        let out = build_pairs(&rs, &config(1)).unwrap();
        assert!(out.manifest.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn nearest_candidate_wins_and_ties_break_by_path() {
        let rs = [
            rec("in", "p", 0, 0.0, 0.0),
            rec("far", "p", 1, 0.015, 0.0),
            rec("near", "p", 1, 0.005, 0.0),
        ];
        let out = build_pairs(&rs, &config(1)).unwrap();
        assert_eq!(out.manifest.pairs[0].reference.image_path, "near");

        let rs = [
            rec("in", "p", 0, 0.0, 0.0),
            rec("z", "p", 1, 0.01, 0.0),
            rec("y", "p", 1, -0.01, 0.0),
        ];
        let out = build_pairs(&rs, &config(1)).unwrap();
        assert_eq!(out.manifest.pairs[0].reference.image_path, "y");
    }

    #[test]
    fn duplicate_record_paths_are_rejected() {
        let rs = [rec("a", "p", 0, 0.0, 0.0), rec("a", "p", 1, 0.0, 0.0)];
        assert!(build_pairs(&rs, &config(1)).is_err());
    }

    #[test]
    fn appearing_plant_is_removed_when_rule_set() {
        let rs = [rec("a", "p", 0, 0.0, 0.0), rec("b", "p", 1, 0.0, 0.0)];
        let manifest = build_pairs(&rs, &config(1)).unwrap().manifest;
        let vis: HashMap<String, bool> = [("a".into(), false), ("b".into(), true)].into();
        let cleaned = clean_pairs(&manifest, &vis, CleaningRules::default()).unwrap();
        assert!(cleaned.is_empty());
        let keep = CleaningRules {
            drop_appearing: false,
            drop_disappearing: true,
        };
        assert_eq!(clean_pairs(&manifest, &vis, keep).unwrap().len(), 1);
    }

    #[test]
    fn visible_in_both_is_retained_and_missing_entry_errors() {
        let rs = [rec("a", "p", 0, 0.0, 0.0), rec("b", "p", 1, 0.0, 0.0)];
        let manifest = build_pairs(&rs, &config(1)).unwrap().manifest;
        let vis: HashMap<String, bool> = [("a".into(), true), ("b".into(), true)].into();
        assert_eq!(clean_pairs(&manifest, &vis, CleaningRules::default()).unwrap().len(), 1);

        let partial: HashMap<String, bool> = [("a".into(), true)].into();
        match clean_pairs(&manifest, &partial, CleaningRules::default()) {
            Err(Error::Validation(msg)) => assert!(msg.contains('b')),
            other => panic!("expected error, got {other:?}"),
        }
    }
}
