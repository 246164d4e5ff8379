use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BcflError, Result};

/// Jitter added to a covariance whose Cholesky factorization fails.
pub const COV_JITTER: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-12;

/// A multivariate normal density with full covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityRepr", into = "DensityRepr")]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct DensityRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl From<GaussianDensity> for DensityRepr {
    fn from(g: GaussianDensity) -> Self {
        DensityRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: g.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<DensityRepr> for GaussianDensity {
    type Error = BcflError;

    fn try_from(r: DensityRepr) -> Result<Self> {
        let d = r.mean.len();
        if r.covariance.len() != d || r.covariance.iter().any(|row| row.len() != d) {
            return Err(BcflError::contract("covariance must be dim x dim"));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| r.covariance[i][j]);
        GaussianDensity::new(DVector::from_vec(r.mean), cov)
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization, retrying once with `COV_JITTER * I` added.
pub(crate) fn cholesky_jittered(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).or_else(|| {
        let n = m.nrows();
        Cholesky::new(m + DMatrix::identity(n, n) * COV_JITTER)
    })
}

impl GaussianDensity {
    /// Validates shape, symmetry and positive definiteness. The stored
    /// covariance is the symmetric part of `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(BcflError::contract("density dimension must be positive"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(BcflError::contract(format!(
                "covariance is {}x{}, expected {d}x{d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(BcflError::contract("density has non-finite entries"));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(BcflError::contract("covariance is not symmetric"));
        }
        let cov = symmetrize(&cov);
        if Cholesky::new(cov.clone()).is_none() {
            return Err(BcflError::contract("covariance is not positive definite"));
        }
        Ok(GaussianDensity { mean, cov })
    }

    /// Symmetrizes, then adds jitter if the factorization fails.
    pub(crate) fn from_conditioned(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let cov = symmetrize(&cov);
        if Cholesky::new(cov.clone()).is_some() {
            return Self::new(mean, cov);
        }
        let d = cov.nrows();
        Self::new(mean, cov + DMatrix::identity(d, d) * COV_JITTER)
    }

    /// Builds a density from precision and precision-weighted mean.
    pub fn from_information(precision: &DMatrix<f64>, info_mean: &DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(symmetrize(precision))
            .ok_or_else(|| BcflError::contract("precision is not positive definite"))?;
        let mean = chol.solve(info_mean);
        let cov = chol.inverse();
        Self::from_conditioned(mean, cov)
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::isotropic(DVector::from_element(1, mean), variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> DMatrix<f64> {
        // Positive definiteness is checked at construction.
        let chol = cholesky_jittered(&self.cov).expect("covariance validated at construction");
        symmetrize(&chol.inverse())
    }

    /// `(precision, precision * mean)`.
    pub fn information(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.precision();
        let h = &p * &self.mean;
        (p, h)
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let chol = cholesky_jittered(&self.cov).expect("covariance validated at construction");
        let diff = x - &self.mean;
        let z = chol.l().solve_lower_triangular(&diff).expect("triangular factor is invertible");
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (self.dim() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let chol = cholesky_jittered(&self.cov).expect("covariance validated at construction");
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + chol.l() * z
    }

    /// Draws `n` equally weighted samples.
    pub fn draw_samples<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleSet> {
        let samples = (0..n).map(|_| self.sample(rng)).collect();
        SampleSet::new(samples, vec![1.0 / n as f64; n])
    }
}

/// Weighted point cloud approximating a density.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl SampleSet {
    pub fn new(samples: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(BcflError::contract("sample set must be nonempty"));
        }
        if samples.len() != weights.len() {
            return Err(BcflError::contract("sample and weight counts differ"));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(BcflError::contract("samples differ in dimension"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(BcflError::contract("sample weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BcflError::contract(format!("sample weights sum to {total}")));
        }
        Ok(SampleSet { samples, weights })
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
