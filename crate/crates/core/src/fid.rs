//! Fréchet distance between Gaussian fits of embedded image sets.
//!
//! `d² = |μa - μb|² + Tr(Σa) + Tr(Σb) - 2 Tr((Σa^½ Σb Σa^½)^½)`, evaluated
//! with symmetric eigendecompositions so both square roots stay real.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::preprocess::{pad_to_square, resize_bilinear};

/// Added to both covariance diagonals when either is numerically singular.
pub const REGULARIZATION: f64 = 1e-6;
const SINGULAR_EIGENVALUE: f64 = 1e-10;
/// Eigenvalues down to this are treated as round-off and clamped to zero.
const NEGATIVE_TOLERANCE: f64 = -1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (n - 1) covariance, symmetrized.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 embeddings to fit a Gaussian, got {n}"
        )));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::Validation("embeddings are empty".into()));
    }
    if let Some(i) = features.iter().position(|f| f.len() != d) {
        return Err(Error::Shape(format!(
            "embedding {i} has dimension {}, expected {d}",
            features[i].len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let x = DMatrix::from_fn(n, d, |r, c| features[r][c]);
    let mean = DVector::from_fn(d, |c, _| x.column(c).mean());
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean,
        cov,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetDistance {
    pub value: f64,
    /// True when the covariances were regularized before the matrix roots.
    pub regularized: bool,
}

fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))
}

fn clamp_eigenvalues(values: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v)
            } else if v >= NEGATIVE_TOLERANCE {
                Ok(0.0)
            } else {
                Err(Error::Numeric(format!(
                    "{what} has eigenvalue {v:e}, below tolerance"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ea = sym_eigen(a)?;
    let la = clamp_eigenvalues(&ea.eigenvalues, "covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&la.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let m = &sqrt_a * b * &sqrt_a;
    let em = sym_eigen(&m)?;
    let lm = clamp_eigenvalues(&em.eigenvalues, "covariance product")?;
    Ok(lm.iter().map(|v| v.sqrt()).sum())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen(m)?.eigenvalues.min())
}

fn distance_with(a: &GaussianStats, ca: &DMatrix<f64>, b: &GaussianStats, cb: &DMatrix<f64>) -> Result<f64> {
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(ca, cb)?;
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between two Gaussians. Singular covariances get
/// `REGULARIZATION * I` added to both; a failed evaluation is retried once
/// with regularization before reporting a numeric error.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<FrechetDistance> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "Gaussian dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let ridge = DMatrix::<f64>::identity(a.dim(), a.dim()) * REGULARIZATION;
    let singular = min_eigenvalue(&a.cov)? < SINGULAR_EIGENVALUE
        || min_eigenvalue(&b.cov)? < SINGULAR_EIGENVALUE;
    if !singular {
        if let Ok(value) = distance_with(a, &a.cov, b, &b.cov) {
            return Ok(FrechetDistance {
                value,
                regularized: false,
            });
        }
    }
    let value = distance_with(a, &(&a.cov + &ridge), b, &(&b.cov + &ridge))?;
    Ok(FrechetDistance {
        value,
        regularized: true,
    })
}

/// Maps an image to a fixed-length feature vector.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Deterministic stand-in for a pretrained feature extractor: images are
/// padded, resized to `input_size` and multiplied by a seeded Gaussian
/// matrix. Distances are only comparable between runs using the same seed
/// and dimensions.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    input_size: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl RandomProjection {
    pub const DEFAULT_INPUT_SIZE: usize = 32;
    pub const DEFAULT_DIM: usize = 32;

    pub fn new(seed: u64, input_size: usize, dim: usize) -> Result<Self> {
        if input_size == 0 || dim == 0 {
            return Err(Error::Config(
                "projection input size and dimension must be positive".into(),
            ));
        }
        let inputs = 3 * input_size * input_size;
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(RandomProjection {
            input_size,
            dim,
            weights,
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(seed, Self::DEFAULT_INPUT_SIZE, Self::DEFAULT_DIM).expect("valid defaults")
    }
}

impl EmbeddingProvider for RandomProjection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let s = self.input_size;
        let small = resize_bilinear(&pad_to_square(image), s, s);
        let pixels = small.data();
        Ok(self
            .weights
            .chunks_exact(pixels.len())
            .map(|row| {
                row.iter()
                    .zip(pixels)
                    .map(|(w, p)| w * f64::from(*p))
                    .sum()
            })
            .collect())
    }
}

pub fn embed_all(provider: &dyn EmbeddingProvider, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| provider.embed(img)).collect()
}

pub fn fid_between(
    provider: &dyn EmbeddingProvider,
    a: &[ImageTensor],
    b: &[ImageTensor],
) -> Result<FrechetDistance> {
    let ga = fit_gaussian(&embed_all(provider, a)?)?;
    let gb = fit_gaussian(&embed_all(provider, b)?)?;
    frechet_distance(&ga, &gb)
}

/// Pairwise distances between test references (r), generated images (g)
/// and training references (t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid_rg: f64,
    pub fid_rt: f64,
    pub fid_gt: f64,
    pub n_r: usize,
    pub n_g: usize,
    pub n_t: usize,
    pub regularized: bool,
}

impl FidReport {
    pub fn verdict(&self) -> &'static str {
        if self.fid_rg < self.fid_rt {
            "FID(r,g) < FID(r,t): generated distribution closer to test-reference than training is"
        } else {
            "FID(r,g) >= FID(r,t): training distribution at least as close to test-reference as generated is"
        }
    }
}

pub fn evaluate_fid(
    provider: &dyn EmbeddingProvider,
    test_reference: &[ImageTensor],
    generated: &[ImageTensor],
    train_reference: &[ImageTensor],
) -> Result<FidReport> {
    let r = fit_gaussian(&embed_all(provider, test_reference)?)?;
    let g = fit_gaussian(&embed_all(provider, generated)?)?;
    let t = fit_gaussian(&embed_all(provider, train_reference)?)?;
    let rg = frechet_distance(&r, &g)?;
    let rt = frechet_distance(&r, &t)?;
    let gt = frechet_distance(&g, &t)?;
    Ok(FidReport {
        fid_rg: rg.value,
        fid_rt: rt.value,
        fid_gt: gt.value,
        n_r: r.count,
        n_g: g.count,
        n_t: t.count,
        regularized: rg.regularized || rt.regularized || gt.regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(mean: &[f64], var: &[f64]) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            count: 10,
        }
    }

    #[test]
    fn unit_gaussians_one_apart() {
        let a = diag(&[0.0], &[1.0]);
        let b = diag(&[1.0], &[1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d.value - 1.0).abs() < 1e-9);
        assert!(!d.regularized);
    }

    #[test]
    fn diagonal_closed_form() {
        let a = diag(&[1.0, -2.0, 0.5], &[4.0, 0.25, 9.0]);
        let b = diag(&[0.0, 0.0, 0.5], &[1.0, 1.0, 1.0]);
        let expected = 1.0 + 4.0 + (2.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2) + (3.0f64 - 1.0).powi(2);
        assert!((frechet_distance(&a, &b).unwrap().value - expected).abs() < 1e-9);
    }

    #[test]
    fn singular_covariances_are_regularized() {
        let a = diag(&[0.0, 0.0], &[1.0, 0.0]);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.regularized);
        assert!(d.value.abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = diag(&[0.0], &[1.0]);
        let b = diag(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn fit_matches_hand_computation() {
        let f = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 8.0]];
        let g = fit_gaussian(&f).unwrap();
        assert_eq!(g.mean.as_slice(), &[3.0, 4.0]);
        // Deviations (-2,-2), (0,-2), (2,4).
        assert!((g.cov[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((g.cov[(1, 1)] - 12.0).abs() < 1e-12);
        assert!((g.cov[(0, 1)] - 6.0).abs() < 1e-12);
        assert!(fit_gaussian(&f[..1]).is_err());
        assert!(fit_gaussian(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn projection_is_deterministic_and_sized() {
        let p = RandomProjection::with_seed(3);
        let img = ImageTensor::filled(20, 30, 0.25);
        let a = p.embed(&img).unwrap();
        assert_eq!(a.len(), p.dim());
        assert_eq!(a, RandomProjection::with_seed(3).embed(&img).unwrap());
        assert_ne!(a, RandomProjection::with_seed(4).embed(&img).unwrap());
    }

    #[test]
    fn verdict_follows_comparison() {
        let mut r = FidReport {
            fid_rg: 1.0,
            fid_rt: 2.0,
            fid_gt: 3.0,
            n_r: 2,
            n_g: 2,
            n_t: 2,
            regularized: false,
        };
        assert!(r.verdict().starts_with("FID(r,g) < FID(r,t)"));
        r.fid_rg = 5.0;
        assert!(r.verdict().starts_with("FID(r,g) >= FID(r,t)"));
    }
}
