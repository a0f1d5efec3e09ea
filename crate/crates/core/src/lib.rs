pub mod cgan;
pub mod datamodel;
pub mod error;
pub mod image_tensor;
pub mod pairing;
pub mod preprocess;
pub mod fid;
pub mod traits;
pub mod analytics;
pub mod synthcrop;
pub mod pipeline;

pub use analytics::{fit_line, fit_regression, render_report, stage_statistics, ReportSummary};
pub use cgan::{GanModel, Profile, TrainConfig};
pub use datamodel::{load_manifest, save_manifest, ImagePair, ImageRecord, PairManifest, Split, Treatment};
pub use error::{Error, ErrorKind, Result};
pub use fid::{frechet_distance, EmbeddingProvider, GaussianStats, RandomProjection};
pub use image_tensor::ImageTensor;
pub use pairing::{build_pairs, clean_pairs, PairingConfig};
pub use pipeline::{run_synthetic_experiment, ExperimentConfig, ExperimentOutcome};
pub use traits::{PlantInstance, TraitRecord};
