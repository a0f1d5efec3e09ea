//! End-to-end run over a synthetic dataset: generate, pair, clean, train,
//! predict the held-out plants, segment, and report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{render_report, stage_statistics, PairedObservation, ReportInput, ReportSummary};
use crate::cgan::{
    predict, save_checkpoint, save_predictions, train, write_history_csv, GanModel, ModelSetup,
    Profile, TrainOptions,
};
use crate::datamodel::{manifest_counts, save_manifest, ImagePair, ImageRecord, PairManifest, Split, Treatment};
use crate::error::{Error, Result};
use crate::fid::{evaluate_fid, fid_between, FidReport, RandomProjection};
use crate::image_tensor::ImageTensor;
use crate::pairing::{build_pairs, clean_pairs, PairingConfig};
use crate::preprocess::load_and_pad;
use crate::synthcrop::{generate_dataset, SynthConfig};
use crate::traits::{
    extract_traits, segment_all, select_center_plants, write_traits_csv, Backend, TraitRecord,
    DEFAULT_CENTER_FRACTION,
};

pub const DATA_DIR: &str = "data";
pub const PAIRS_DIR: &str = "pairs";
pub const MODEL_DIR: &str = "model";
pub const GENERATED_DIR: &str = "generated";
pub const TRAITS_DIR: &str = "traits";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub pairing: PairingConfig,
    pub model: ModelSetup,
    pub backend: Backend,
    pub center_fraction: f64,
    pub fid_seed: u64,
    /// Keep dropout active at prediction time, seeded per image.
    pub stochastic: bool,
}

impl ExperimentConfig {
    /// Synthetic profile with every seed derived from `seed`.
    pub fn synthetic(seed: u64) -> Self {
        let mut model = Profile::Synthetic.setup();
        model.train.seed = seed;
        ExperimentConfig {
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            pairing: PairingConfig::default(),
            model,
            backend: Backend::default(),
            center_fraction: DEFAULT_CENTER_FRACTION,
            fid_seed: seed,
            stochastic: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: ReportSummary,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub observations: Vec<PairedObservation>,
    /// Mean generated area per treatment at the last predicted stage.
    pub final_stage_generated: BTreeMap<Treatment, f64>,
    pub final_stage_reference: BTreeMap<Treatment, f64>,
    pub final_stage: u32,
    pub fid: FidReport,
    pub wrong_stage_fid: f64,
    pub summary_path: PathBuf,
}

impl ExperimentOutcome {
    /// True when generated means follow the designed treatment order.
    pub fn treatment_order_holds(&self) -> bool {
        let means: Vec<Option<&f64>> = Treatment::DESIGNED
            .iter()
            .map(|t| self.final_stage_generated.get(t))
            .collect();
        means.windows(2).all(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => a > b,
            _ => false,
        })
    }
}

/// The plant of interest in a frame: the largest instance whose center lies
/// in the central window. A frame without one yields a zero-area record.
pub fn primary_plant(
    records: &[TraitRecord],
    meta: &ImageRecord,
    image_size: usize,
    center_fraction: f64,
) -> Result<TraitRecord> {
    let central = select_center_plants(records, image_size, center_fraction)?;
    Ok(central
        .into_iter()
        .max_by_key(|r| r.area_px)
        .unwrap_or_else(|| TraitRecord {
            source_image: meta.image_path.clone(),
            stage: meta.stage,
            treatment: meta.treatment,
            area_px: 0,
            center_x: image_size as f64 / 2.0,
            center_y: image_size as f64 / 2.0,
            width_px: 0,
            height_px: 0,
            score: 0.0,
            height_unreliable: false,
        }))
}

fn plant_records(
    images: &[ImageTensor],
    metas: &[ImageRecord],
    backend: &Backend,
    center_fraction: f64,
) -> Result<Vec<TraitRecord>> {
    let instances = segment_all(images, backend)?;
    instances
        .iter()
        .zip(images.iter().zip(metas))
        .map(|(inst, (img, meta))| {
            let all = extract_traits(inst, meta);
            primary_plant(&all, meta, img.width().max(img.height()), center_fraction)
        })
        .collect()
}

fn load_images(root: &Path, records: &[&ImageRecord]) -> Result<Vec<ImageTensor>> {
    records
        .iter()
        .map(|r| load_and_pad(&root.join(&r.image_path)))
        .collect()
}

fn split_manifest(manifest: &PairManifest, split: Split) -> Vec<&ImagePair> {
    manifest
        .pairs
        .iter()
        .filter(|p| p.input.split == split)
        .collect()
}

fn means_at(records: &[TraitRecord], stage: u32) -> BTreeMap<Treatment, f64> {
    let mut sums: BTreeMap<Treatment, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stage == stage) {
        let e = sums.entry(r.treatment).or_default();
        e.0 += r.area_px as f64;
        e.1 += 1;
    }
    sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
}

/// Runs the whole experiment under `out_dir`. Every artifact, including
/// `report/summary.json`, is a function of `config` alone.
pub fn run_synthetic_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let data_dir = out_dir.join(DATA_DIR);
    log::info!("generating {} synthetic plants", config.synth.n_plants);
    let dataset = generate_dataset(&config.synth, &data_dir)?;

    let outcome = build_pairs(&dataset.records, &config.pairing)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let manifest = clean_pairs(&outcome.manifest, &dataset.visibility(), config.pairing.cleaning)?;
    save_manifest(&out_dir.join(PAIRS_DIR), &manifest)?;
    let counts_path = out_dir.join(PAIRS_DIR).join("counts.csv");
    std::fs::write(&counts_path, manifest_counts(&manifest).to_csv())
        .map_err(|e| Error::io(&counts_path, e))?;

    let train_set = split_manifest(&manifest, Split::Train);
    let test_set = split_manifest(&manifest, Split::Test);
    if train_set.is_empty() || test_set.len() < 2 {
        return Err(Error::Validation(format!(
            "{} training and {} test pairs; need at least 1 and 2",
            train_set.len(),
            test_set.len()
        )));
    }
    log::info!("{} training pairs, {} test pairs", train_set.len(), test_set.len());

    let train_inputs = load_images(&data_dir, &train_set.iter().map(|p| &p.input).collect::<Vec<_>>())?;
    let train_refs = load_images(&data_dir, &train_set.iter().map(|p| &p.reference).collect::<Vec<_>>())?;
    let pairs: Vec<(ImageTensor, ImageTensor)> = train_inputs.into_iter().zip(train_refs.iter().cloned()).collect();

    let mut model = GanModel::<f32>::from_setup(&config.model)?;
    let model_dir = out_dir.join(MODEL_DIR);
    let options = TrainOptions {
        checkpoint_dir: Some(model_dir.clone()),
        checkpoint_interval: 0,
    };
    let history = train(&mut model, &pairs, &config.model.augment, &options)?;
    write_history_csv(&model_dir.join("history.csv"), &history)?;
    save_checkpoint(&model_dir.join("final.ckpt"), &model)?;

    let test_inputs = load_images(&data_dir, &test_set.iter().map(|p| &p.input).collect::<Vec<_>>())?;
    let test_refs = load_images(&data_dir, &test_set.iter().map(|p| &p.reference).collect::<Vec<_>>())?;
    let generated = predict(&model, &test_inputs, config.stochastic, config.model.train.seed)?;
    let names: Vec<String> = test_set
        .iter()
        .map(|p| {
            Path::new(&p.reference.image_path)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.reference.image_path.clone())
        })
        .collect();
    save_predictions(&out_dir.join(GENERATED_DIR), &names, &generated)?;

    // Generated images inherit the metadata of the reference they predict.
    let ref_metas: Vec<ImageRecord> = test_set.iter().map(|p| p.reference.clone()).collect();
    let gen_metas: Vec<ImageRecord> = ref_metas
        .iter()
        .zip(&names)
        .map(|(m, n)| ImageRecord {
            image_path: format!("{GENERATED_DIR}/{n}"),
            ..m.clone()
        })
        .collect();
    let reference_traits = plant_records(&test_refs, &ref_metas, &config.backend, config.center_fraction)?;
    let generated_traits = plant_records(&generated, &gen_metas, &config.backend, config.center_fraction)?;
    let traits_dir = out_dir.join(TRAITS_DIR);
    std::fs::create_dir_all(&traits_dir).map_err(|e| Error::io(&traits_dir, e))?;
    write_traits_csv(&traits_dir.join("reference.csv"), &reference_traits)?;
    write_traits_csv(&traits_dir.join("generated.csv"), &generated_traits)?;

    let observations: Vec<PairedObservation> = reference_traits
        .iter()
        .zip(&generated_traits)
        .map(|(r, g)| PairedObservation {
            reference_area_px: r.area_px as f64,
            generated_area_px: g.area_px as f64,
            stage: r.stage,
            treatment: r.treatment,
        })
        .collect();

    let provider = RandomProjection::with_seed(config.fid_seed);
    let fid = evaluate_fid(&provider, &test_refs, &generated, &train_refs)?;
    let wrong_stage = fid_between(&provider, &test_refs, &test_inputs)?;

    let mut training_pairs_per_stage: BTreeMap<u32, usize> = test_set
        .iter()
        .map(|p| (p.reference.stage, 0))
        .collect();
    for p in &train_set {
        *training_pairs_per_stage.entry(p.reference.stage).or_default() += 1;
    }
    let input = ReportInput {
        observations: observations.clone(),
        reference_stats: stage_statistics(&reference_traits, true)?,
        generated_stats: stage_statistics(&generated_traits, true)?,
        fid: Some(fid.clone()),
        wrong_stage_fid: Some(wrong_stage.value),
        training_pairs_per_stage,
        center_fraction: Some(config.center_fraction),
    };
    let report_dir = out_dir.join(REPORT_DIR);
    let summary = render_report(&report_dir, &input)?;

    let final_stage = reference_traits.iter().map(|r| r.stage).max().unwrap_or(0);
    Ok(ExperimentOutcome {
        summary,
        train_pairs: train_set.len(),
        test_pairs: test_set.len(),
        final_stage_generated: means_at(&generated_traits, final_stage),
        final_stage_reference: means_at(&reference_traits, final_stage),
        final_stage,
        observations,
        fid,
        wrong_stage_fid: wrong_stage.value,
        summary_path: report_dir.join(crate::analytics::SUMMARY_FILE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ImageRecord {
        ImageRecord {
            image_path: "a.png".into(),
            plot_id: "p".into(),
            stage: 4,
            easting_m: 0.0,
            northing_m: 0.0,
            treatment: Treatment::DryFertilized,
            split: Split::Test,
        }
    }

    fn rec(area: u64, cx: f64) -> TraitRecord {
        TraitRecord {
            source_image: "a.png".into(),
            stage: 4,
            treatment: Treatment::DryFertilized,
            area_px: area,
            center_x: cx,
            center_y: 32.0,
            width_px: 5,
            height_px: 5,
            score: 1.0,
            height_unreliable: false,
        }
    }

    #[test]
    fn primary_plant_prefers_largest_central_instance() {
        let rs = [rec(100, 30.0), rec(300, 34.0), rec(900, 5.0)];
        let p = primary_plant(&rs, &meta(), 64, DEFAULT_CENTER_FRACTION).unwrap();
        assert_eq!(p.area_px, 300);
    }

    #[test]
    fn empty_frame_gives_zero_area() {
        let p = primary_plant(&[rec(900, 5.0)], &meta(), 64, DEFAULT_CENTER_FRACTION).unwrap();
        assert_eq!(p.area_px, 0);
        assert_eq!(p.stage, 4);
    }

    #[test]
    fn treatment_order_needs_every_treatment() {
        let outcome_means = |v: &[(Treatment, f64)]| v.iter().copied().collect::<BTreeMap<_, _>>();
        let mut o = ExperimentOutcome {
            summary: serde_json::from_str(
                r#"{"std_divisor":"n","overall":null,"regressions":{},"annotations":{},"skipped":{},
                "reference_stats":[],"generated_stats":[],"stages_without_training_pairs":[],
                "fid":null,"wrong_stage_fid":null,"center_fraction":null}"#,
            )
            .unwrap(),
            train_pairs: 0,
            test_pairs: 0,
            observations: vec![],
            final_stage_generated: BTreeMap::new(),
            final_stage_reference: BTreeMap::new(),
            final_stage: 5,
            fid: FidReport {
                fid_rg: 0.0,
                fid_rt: 0.0,
                fid_gt: 0.0,
                n_r: 0,
                n_g: 0,
                n_t: 0,
                regularized: false,
            },
            wrong_stage_fid: 0.0,
            summary_path: PathBuf::new(),
        };
        let [a, b, c, d] = Treatment::DESIGNED;
        o.final_stage_generated = outcome_means(&[(a, 4.0), (b, 3.0), (c, 2.0), (d, 1.0)]);
        assert!(o.treatment_order_holds());
        o.final_stage_generated = outcome_means(&[(a, 4.0), (b, 3.0), (c, 2.0)]);
        assert!(!o.treatment_order_holds());
        o.final_stage_generated = outcome_means(&[(a, 4.0), (b, 2.0), (c, 3.0), (d, 1.0)]);
        assert!(!o.treatment_order_holds());
    }
}
