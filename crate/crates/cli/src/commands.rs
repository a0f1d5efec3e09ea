use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use growthcast::analytics::{render_report, stage_statistics, PairedObservation, ReportInput};
use growthcast::cgan::{
    load_checkpoint, load_training_pairs, predict, save_checkpoint, save_predictions, train,
    write_history_csv, GanModel, ModelSetup, Profile, TrainOptions,
};
use growthcast::datamodel::{
    load_manifest, load_records, manifest_counts, save_manifest, save_records, ImageRecord, Split,
    Treatment, UNKNOWN_PLOT,
};
use growthcast::fid::{evaluate_fid, FidReport, RandomProjection};
use growthcast::image_tensor::ImageTensor;
use growthcast::pairing::{build_pairs, clean_pairs, PairingConfig};
use growthcast::pipeline::{primary_plant, run_synthetic_experiment, ExperimentConfig};
use growthcast::preprocess::load_and_pad;
use growthcast::synthcrop::{generate_dataset, GrowthLaw, SynthConfig};
use growthcast::traits::{
    extract_traits, read_traits_csv, segment_all, write_traits_csv, Backend, BaselineConfig,
    ExternalConfig, TraitRecord,
};
use growthcast::Error;

use crate::config::{parse_config_text, RunConfig, RUN_CONFIG_FILE};
use crate::CliError;

pub const LOG_FILE: &str = "growthcast.log";

type Job<'a> = Box<dyn FnOnce(&Path) -> Result<(), CliError> + 'a>;

/// Validates the configuration for `command` and, unless `dry_run`, runs it
/// with every output under `out`.
pub fn run(command: &str, config: &RunConfig, dry_run: bool) -> Result<(), CliError> {
    let job: Job = match command {
        "synth" => synth(config)?,
        "pair" => pair(config)?,
        "train" => train_cmd(config)?,
        "predict" => predict_cmd(config)?,
        "segment" => segment_cmd(config)?,
        "evaluate" => evaluate_cmd(config)?,
        "report" => report_cmd(config)?,
        "experiment" => experiment(config)?,
        other => return Err(CliError::Config(format!("unknown command `{other}`"))),
    };
    if dry_run {
        print!("{}", config.to_text());
        return Ok(());
    }
    let out = config.path("out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join(RUN_CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    log_line(&out, &format!("start {command}"))?;
    job(&out)?;
    log_line(&out, &format!("done {command}"))
}

fn log_line(out: &Path, msg: &str) -> Result<(), CliError> {
    let path = out.join(LOG_FILE);
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "unix_time={secs} {msg}").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn synth_config(config: &RunConfig) -> Result<SynthConfig, CliError> {
    let size: usize = config.get("synth.image_size")?;
    let c = SynthConfig {
        n_plants: config.get("synth.n_plants")?,
        stages: config.get("synth.stages")?,
        image_size: size,
        growth: GrowthLaw {
            max_area: 0.35 * (size * size) as f64,
            ..SynthConfig::default().growth
        },
        harvest_prob: config.get("synth.harvest_prob")?,
        seed: config.get("seed")?,
        ..SynthConfig::default()
    };
    c.validate()?;
    Ok(c)
}

fn synth(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let c = synth_config(config)?;
    Ok(Box::new(move |out| {
        let ds = generate_dataset(&c, out)?;
        println!("{} images of {} plants written to {}", ds.records.len(), c.n_plants, out.display());
        Ok(())
    }))
}

fn read_visibility(path: &Path) -> Result<HashMap<String, bool>, CliError> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format(e.to_string()))?;
    let header = rdr.headers().map_err(|e| format(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format(format!("missing column `{name}`")))
    };
    let (ip, vis) = (col("image_path")?, col("visible")?);
    let mut out = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| format(e.to_string()))?;
        let v = row[vis].parse::<bool>().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            column: "visible".into(),
            message: e.to_string(),
        })?;
        out.insert(row[ip].to_string(), v);
    }
    Ok(out)
}

fn pair(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let records_path = config.path("pair.records")?;
    let pairing = PairingConfig {
        horizon: config.get("pair.horizon")?,
        distance_threshold_m: config.get("pair.threshold")?,
        ..PairingConfig::default()
    };
    pairing.validate()?;
    let visibility = config.raw("pair.visibility").map(PathBuf::from);
    Ok(Box::new(move |out| {
        let records = load_records(&records_path)?;
        let outcome = build_pairs(&records, &pairing)?;
        for w in &outcome.warnings {
            log::warn!("{w}");
        }
        let mut manifest = outcome.manifest;
        if let Some(v) = visibility {
            let before = manifest.len();
            manifest = clean_pairs(&manifest, &read_visibility(&v)?, pairing.cleaning)?;
            log::info!("cleaning dropped {} of {before} pairs", before - manifest.len());
        }
        save_manifest(out, &manifest)?;
        let counts = manifest_counts(&manifest).to_csv();
        let path = out.join("counts.csv");
        std::fs::write(&path, &counts).map_err(|e| Error::io(&path, e))?;
        print!("{counts}");
        Ok(())
    }))
}

/// Directory that image paths of a manifest are relative to: the explicit
/// key, else the directory of the records file the manifest was built from.
fn data_root(config: &RunConfig, root_key: &str, pairs_dir: &Path) -> Result<PathBuf, CliError> {
    if let Some(root) = config.raw(root_key) {
        return Ok(PathBuf::from(root));
    }
    let recorded = pairs_dir.join(RUN_CONFIG_FILE);
    let text = std::fs::read_to_string(&recorded).map_err(|_| {
        CliError::Config(format!(
            "`{root_key}` is unset and {} does not say where the images live",
            recorded.display()
        ))
    })?;
    let values = parse_config_text(&text, &recorded.display().to_string())?;
    let records = values.get("pair.records").ok_or_else(|| {
        CliError::Config(format!("{} has no pair.records entry", recorded.display()))
    })?;
    Ok(Path::new(records)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default())
}

fn model_setup(config: &RunConfig) -> Result<ModelSetup, CliError> {
    let profile: Profile = config.require("train.profile")?.parse()?;
    let mut setup = profile.setup();
    if let Some(e) = config.get_opt("train.epochs")? {
        setup.train.epochs = e;
    }
    if let Some(v) = config.get_opt("train.learning_rate")? {
        setup.train.learning_rate = v;
    }
    if let Some(v) = config.get_opt("train.lambda_l1")? {
        setup.train.lambda_l1 = v;
    }
    if let Some(v) = config.get_opt("train.batch_size")? {
        setup.train.batch_size = v;
    }
    setup.train.seed = config.get("seed")?;
    setup.generator.validate()?;
    setup.discriminator.validate()?;
    setup.train.validate()?;
    setup.augment.validate()?;
    Ok(setup)
}

fn train_cmd(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let setup = model_setup(config)?;
    let pairs_dir = config.path("train.pairs")?;
    let interval: usize = config.get("train.checkpoint_interval")?;
    Ok(Box::new(move |out| {
        let manifest = load_manifest(&pairs_dir)?.filter_split(Split::Train);
        let root = data_root(config, "train.data_root", &pairs_dir)?;
        let pairs = load_training_pairs(&manifest, &root)?;
        let mut model = GanModel::<f32>::from_setup(&setup)?;
        let options = TrainOptions {
            checkpoint_dir: Some(out.join("checkpoints")),
            checkpoint_interval: interval,
        };
        let history = train(&mut model, &pairs, &setup.augment, &options)?;
        write_history_csv(&out.join("history.csv"), &history)?;
        save_checkpoint(&out.join("model.ckpt"), &model)?;
        println!(
            "trained {} epochs on {} pairs; model at {}",
            history.len(),
            pairs.len(),
            out.join("model.ckpt").display()
        );
        Ok(())
    }))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".png") && !name.ends_with(".mask.png")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", dir.display())).into());
    }
    Ok(files)
}

fn file_name(path: &str) -> String {
    Path::new(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImageTensor>, CliError> {
    Ok(paths.iter().map(|p| load_and_pad(p)).collect::<growthcast::Result<_>>()?)
}

fn predict_cmd(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let model_path = config.path("predict.model")?;
    let stochastic: bool = config.get("predict.stochastic")?;
    let seed: u64 = config.get("seed")?;
    let images = config.raw("predict.images").map(PathBuf::from);
    let split = match config.require("predict.split")? {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Config(format!("predict.split must be train or test, got `{other}`"))),
    };
    let pairs_dir = match &images {
        Some(_) => None,
        None => Some(config.path("predict.pairs")?),
    };
    Ok(Box::new(move |out| {
        let model = load_checkpoint(&model_path)?;
        let (inputs, names) = match (&images, &pairs_dir) {
            (Some(dir), _) => {
                let files = png_files(dir)?;
                let names = files.iter().map(|p| file_name(&p.to_string_lossy())).collect();
                (load_all(&files)?, names)
            }
            (None, Some(pairs_dir)) => {
                let manifest = load_manifest(pairs_dir)?.filter_split(split);
                let root = data_root(config, "predict.data_root", pairs_dir)?;
                let inputs: Vec<PathBuf> = manifest.pairs.iter().map(|p| root.join(&p.input.image_path)).collect();
                let refs: Vec<PathBuf> = manifest.pairs.iter().map(|p| root.join(&p.reference.image_path)).collect();
                let names: Vec<String> = manifest.pairs.iter().map(|p| file_name(&p.reference.image_path)).collect();
                // References are exported next to the predictions so that
                // evaluate and segment can address both as directories.
                save_predictions(&out.join("reference"), &names, &load_all(&refs)?)?;
                let records: Vec<ImageRecord> = manifest
                    .pairs
                    .iter()
                    .zip(&names)
                    .map(|(p, n)| ImageRecord {
                        image_path: n.clone(),
                        ..p.reference.clone()
                    })
                    .collect();
                save_records(&out.join("records.csv"), &records)?;
                (load_all(&inputs)?, names)
            }
            (None, None) => unreachable!("one input source is always configured"),
        };
        let generated = predict(&model, &inputs, stochastic, seed)?;
        save_predictions(&out.join("generated"), &names, &generated)?;
        println!("{} predictions written to {}", generated.len(), out.join("generated").display());
        Ok(())
    }))
}

fn backend(config: &RunConfig) -> Result<Backend, CliError> {
    match config.require("segment.backend")? {
        "baseline" => Ok(Backend::Baseline(BaselineConfig {
            min_area: config.get("segment.min_area")?,
            ..BaselineConfig::default()
        })),
        "external" => Ok(Backend::External(ExternalConfig {
            program: config.require("segment.program")?.to_string(),
            args: config
                .raw("segment.args")
                .map(|a| a.split_whitespace().map(String::from).collect())
                .unwrap_or_default(),
        })),
        other => Err(CliError::Config(format!(
            "segment.backend must be baseline or external, got `{other}`"
        ))),
    }
}

fn segment_cmd(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let backend = backend(config)?;
    let dir = config.path("segment.images")?;
    let records_path = config.raw("segment.records").map(PathBuf::from);
    Ok(Box::new(move |out| {
        let files = png_files(&dir)?;
        let by_name: HashMap<String, ImageRecord> = match &records_path {
            Some(p) => load_records(p)?
                .into_iter()
                .map(|r| (file_name(&r.image_path), r))
                .collect(),
            None => HashMap::new(),
        };
        let images = load_all(&files)?;
        let instances = segment_all(&images, &backend)?;
        let mut traits = Vec::new();
        for (file, inst) in files.iter().zip(&instances) {
            let name = file_name(&file.to_string_lossy());
            let meta = by_name.get(&name).cloned().unwrap_or_else(|| ImageRecord {
                image_path: name.clone(),
                plot_id: UNKNOWN_PLOT.into(),
                stage: 0,
                easting_m: 0.0,
                northing_m: 0.0,
                treatment: Treatment::Unspecified,
                split: Split::Test,
            });
            traits.extend(extract_traits(inst, &meta));
        }
        write_traits_csv(&out.join("traits.csv"), &traits)?;
        println!("{} instances in {} images", traits.len(), files.len());
        Ok(())
    }))
}

/// Seed of the built-in embedding: `random-projection` uses the run seed,
/// `random-projection:<seed>` pins its own.
fn fid_seed(config: &RunConfig) -> Result<u64, CliError> {
    let model = config.require("fid.model")?;
    match model.split_once(':') {
        None if model == "random-projection" => config.get("seed"),
        Some(("random-projection", s)) => s
            .parse()
            .map_err(|e| CliError::Config(format!("fid.model seed `{s}`: {e}"))),
        _ => Err(CliError::Config(format!(
            "fid.model `{model}` is not available; only the random-projection stub is built in"
        ))),
    }
}

fn evaluate_cmd(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let provider = RandomProjection::with_seed(fid_seed(config)?);
    let generated = config.path("evaluate.generated")?;
    let test = config.path("evaluate.reference_test")?;
    let train_ref = config.path("evaluate.reference_train")?;
    Ok(Box::new(move |out| {
        let load = |d: &Path| load_all(&png_files(d)?);
        let report = evaluate_fid(&provider, &load(&test)?, &load(&generated)?, &load(&train_ref)?)?;
        let mut value = serde_json::to_value(&report).map_err(Error::from)?;
        value["verdict"] = report.verdict().into();
        let text = serde_json::to_string_pretty(&value).map_err(Error::from)? + "\n";
        let path = out.join("fid.json");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        print!("{text}");
        Ok(())
    }))
}

/// One primary-plant record per source image, keyed by file name.
fn primaries(
    records: &[TraitRecord],
    image_size: usize,
    fraction: f64,
) -> Result<BTreeMap<String, TraitRecord>, CliError> {
    let mut by_image: BTreeMap<String, Vec<TraitRecord>> = BTreeMap::new();
    for r in records {
        by_image.entry(file_name(&r.source_image)).or_default().push(r.clone());
    }
    by_image
        .into_iter()
        .map(|(name, rs)| {
            let first = &rs[0];
            let meta = ImageRecord {
                image_path: first.source_image.clone(),
                plot_id: UNKNOWN_PLOT.into(),
                stage: first.stage,
                easting_m: 0.0,
                northing_m: 0.0,
                treatment: first.treatment,
                split: Split::Test,
            };
            Ok((name, primary_plant(&rs, &meta, image_size, fraction)?))
        })
        .collect()
}

fn report_cmd(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let reference = config.path("report.reference_traits")?;
    let generated = config.path("report.generated_traits")?;
    let fid_path = config.raw("report.fid").map(PathBuf::from);
    let image_size: usize = config.get("report.image_size")?;
    let fraction = match config.require("report.center_fraction")? {
        "none" => None,
        _ => {
            let f: f64 = config.get("report.center_fraction")?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(CliError::Config(format!("report.center_fraction must lie in (0, 1], got {f}")));
            }
            Some(f)
        }
    };
    Ok(Box::new(move |out| {
        let f = fraction.unwrap_or(1.0);
        let refs = primaries(&read_traits_csv(&reference)?, image_size, f)?;
        let gens = primaries(&read_traits_csv(&generated)?, image_size, f)?;
        let mut observations = Vec::new();
        for (name, r) in &refs {
            match gens.get(name) {
                Some(g) => observations.push(PairedObservation {
                    reference_area_px: r.area_px as f64,
                    generated_area_px: g.area_px as f64,
                    stage: r.stage,
                    treatment: r.treatment,
                }),
                None => log::warn!("{name}: no generated counterpart"),
            }
        }
        let fid: Option<FidReport> = match &fid_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(serde_json::from_str(&text).map_err(Error::from)?)
            }
            None => None,
        };
        let ref_list: Vec<TraitRecord> = refs.into_values().collect();
        let gen_list: Vec<TraitRecord> = gens.into_values().collect();
        let input = ReportInput {
            observations,
            reference_stats: stage_statistics(&ref_list, true)?,
            generated_stats: stage_statistics(&gen_list, true)?,
            fid,
            wrong_stage_fid: None,
            training_pairs_per_stage: BTreeMap::new(),
            center_fraction: fraction,
        };
        let summary = render_report(out, &input)?;
        match summary.overall {
            Some(r) => println!("R2 {:.3}, slope {:.3}, intercept {:.1}, n {}", r.r_squared, r.slope, r.intercept, r.n),
            None => println!("no overall regression (too few or degenerate observations)"),
        }
        Ok(())
    }))
}

fn experiment(config: &RunConfig) -> Result<Job<'_>, CliError> {
    let seed: u64 = config.get("seed")?;
    let mut exp = ExperimentConfig::synthetic(seed);
    exp.synth.n_plants = config.get("synth.n_plants")?;
    exp.synth.stages = config.get("synth.stages")?;
    exp.synth.harvest_prob = config.get("synth.harvest_prob")?;
    if let Some(e) = config.get_opt("train.epochs")? {
        exp.model.train.epochs = e;
    }
    exp.fid_seed = fid_seed(config)?;
    exp.stochastic = config.get("predict.stochastic")?;
    exp.synth.validate()?;
    exp.model.train.validate()?;
    Ok(Box::new(move |out| {
        let o = run_synthetic_experiment(&exp, out)?;
        let r2 = o.summary.overall.map(|r| r.r_squared).unwrap_or(f64::NAN);
        println!(
            "R2 {r2:.3}; treatment order {}; FID(r,g) {:.4} vs wrong-stage {:.4}; summary at {}",
            if o.treatment_order_holds() { "holds" } else { "violated" },
            o.fid.fid_rg,
            o.wrong_stage_fid,
            o.summary_path.display()
        );
        Ok(())
    }))
}
