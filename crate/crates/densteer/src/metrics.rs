//! Distribution-matching metrics and Monte Carlo checks of the
//! linearization error analysis.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::gmm::GmmDistribution;

/// Norm used when scoring pointwise drift-approximation errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorNorm {
    One,
    Two,
}

impl ErrorNorm {
    fn apply(self, v: &DVector<f64>) -> f64 {
        match self {
            ErrorNorm::One => v.iter().map(|e| e.abs()).sum(),
            ErrorNorm::Two => v.norm(),
        }
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct ErrorEstimate {
    pub mean: f64,
    pub std_error: f64,
}

fn estimate_from(values: &[f64]) -> ErrorEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ErrorEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// Paired Monte Carlo comparison of the two drift approximations.
///
/// `diff` scores per-sample `err_single - err_blended`, so a positive
/// mean says the blended approximation is the better one.
#[derive(Debug, Clone)]
pub struct LinearizationErrors {
    pub single: ErrorEstimate,
    pub blended: ErrorEstimate,
    pub diff: ErrorEstimate,
    pub samples: usize,
}

/// Sliced 2-Wasserstein distance between two sample clouds.
///
/// Averages exact 1-D squared W2 costs over `projections` random unit
/// directions and returns the square root. When the sets have unequal
/// sizes the larger one is thinned to the smaller size by taking evenly
/// strided indices, so the value is deterministic for a given seed.
/// For 1-D inputs the projection loop is skipped and the exact sorted
/// pairing distance is returned regardless of `projections`.
pub fn sliced_w2(
    samples_a: &[DVector<f64>],
    samples_b: &[DVector<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::Invalid {
            what: "sample set",
            why: "both sets must be non-empty".into(),
        });
    }
    let dim = samples_a[0].len();
    for x in samples_a.iter().chain(samples_b.iter()) {
        if x.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample has dimension {}, expected {}",
                x.len(),
                dim
            )));
        }
    }
    if projections == 0 {
        return Err(Error::Invalid {
            what: "projections",
            why: "must be at least 1".into(),
        });
    }

    let count = samples_a.len().min(samples_b.len());
    let a = thin(samples_a, count);
    let b = thin(samples_b, count);

    if dim == 1 {
        let pa: Vec<f64> = a.iter().map(|x| x[0]).collect();
        let pb: Vec<f64> = b.iter().map(|x| x[0]).collect();
        return Ok(w2_1d_squared(pa, pb).sqrt());
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let direction = random_unit(&mut rng, dim);
        let pa: Vec<f64> = a.iter().map(|x| direction.dot(x)).collect();
        let pb: Vec<f64> = b.iter().map(|x| direction.dot(x)).collect();
        total += w2_1d_squared(pa, pb);
    }
    Ok((total / projections as f64).sqrt())
}

fn thin(samples: &[DVector<f64>], count: usize) -> Vec<&DVector<f64>> {
    let n = samples.len();
    (0..count).map(|i| &samples[i * n / count]).collect()
}

fn random_unit(rng: &mut ChaCha12Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Exact squared 1-D W2 by pairing order statistics.
fn w2_1d_squared(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Unbiased sample mean and covariance.
pub fn empirical_moments(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::Invalid {
            what: "sample set",
            why: "moment estimation needs at least 2 samples".into(),
        });
    }
    let dim = samples[0].len();
    for x in samples {
        if x.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample has dimension {}, expected {}",
                x.len(),
                dim
            )));
        }
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for x in samples {
        mean += x;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in samples {
        let d = x - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    Ok((mean, crate::linalg::symmetrize(&cov)))
}

/// Trace decomposition of the mixture spread, normalized by the
/// problem-dependent constant (reported with C = 1).
///
/// Returns `(tr of the full mixture covariance, weighted sum of
/// component covariance traces)`. The first value bounds the error of a
/// single global linearization, the second the error of the per
/// component blend; the first always dominates because the between
/// component spread is nonnegative.
pub fn theorem1_bounds(gmm: &GmmDistribution) -> (f64, f64) {
    let total = gmm.covariance().trace();
    let within = gmm
        .components()
        .iter()
        .map(|c| c.weight() * c.covariance().trace())
        .sum();
    (total, within)
}

/// Posterior component weights at `x`, computed in the log domain.
/// When every component underflows the mass collapses onto the nearest
/// component mean.
fn posterior_weights(gmm: &GmmDistribution, x: &DVector<f64>) -> Result<Vec<f64>> {
    let logs = gmm.weighted_log_densities(x)?;
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; logs.len()];
    if !peak.is_finite() {
        let nearest = gmm
            .components()
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (x - a.mean()).norm();
                let db = (x - b.mean()).norm();
                da.partial_cmp(&db).expect("finite distances")
            })
            .map(|(i, _)| i)
            .expect("mixture is non-empty");
        weights[nearest] = 1.0;
        return Ok(weights);
    }
    let mut total = 0.0;
    for (w, l) in weights.iter_mut().zip(logs.iter()) {
        *w = (l - peak).exp();
        total += *w;
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

struct PointLinearization {
    point: DVector<f64>,
    drift: DVector<f64>,
    jacobian: DMatrix<f64>,
}

impl PointLinearization {
    fn build(model: &dyn Dynamics, t: f64, point: &DVector<f64>) -> Result<Self> {
        Ok(PointLinearization {
            point: point.clone(),
            drift: model.drift(t, point)?,
            jacobian: model.jacobian(t, point)?,
        })
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.drift + &self.jacobian * (x - &self.point)
    }
}

/// Monte Carlo comparison of the drift linearized once at the mixture
/// mean against the posterior-weighted blend of per-component
/// linearizations, with expectations taken under the mixture itself.
pub fn linearization_error_mc(
    model: &dyn Dynamics,
    t: f64,
    gmm: &GmmDistribution,
    samples: usize,
    seed: u64,
    norm: ErrorNorm,
) -> Result<LinearizationErrors> {
    if samples == 0 {
        return Err(Error::Invalid {
            what: "samples",
            why: "must be at least 1".into(),
        });
    }
    let global = PointLinearization::build(model, t, &gmm.mean())?;
    let locals: Vec<PointLinearization> = gmm
        .components()
        .iter()
        .map(|c| PointLinearization::build(model, t, c.mean()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut err_single = Vec::with_capacity(samples);
    let mut err_blended = Vec::with_capacity(samples);
    let mut diffs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = gmm.draw(&mut rng);
        let f = model.drift(t, &x)?;
        let weights = posterior_weights(gmm, &x)?;
        let mut blended = DVector::zeros(f.len());
        for (w, local) in weights.iter().zip(locals.iter()) {
            if *w > 0.0 {
                blended += *w * local.eval(&x);
            }
        }
        let e_single = norm.apply(&(&f - global.eval(&x)));
        let e_blended = norm.apply(&(&f - blended));
        err_single.push(e_single);
        err_blended.push(e_blended);
        diffs.push(e_single - e_blended);
    }

    Ok(LinearizationErrors {
        single: estimate_from(&err_single),
        blended: estimate_from(&err_blended),
        diff: estimate_from(&diffs),
        samples,
    })
}

/// Expected error of a single linearization anchored at `point`, with
/// the expectation taken under `gmm`. Supports checking that anchoring
/// at a component mean is the best choice among candidate points.
pub fn point_linearization_error_mc(
    model: &dyn Dynamics,
    t: f64,
    gmm: &GmmDistribution,
    point: &DVector<f64>,
    samples: usize,
    seed: u64,
    norm: ErrorNorm,
) -> Result<ErrorEstimate> {
    if samples == 0 {
        return Err(Error::Invalid {
            what: "samples",
            why: "must be at least 1".into(),
        });
    }
    let lin = PointLinearization::build(model, t, point)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let errors: Vec<f64> = (0..samples)
        .map(|_| {
            let x = gmm.draw(&mut rng);
            let f = model.drift(t, &x)?;
            Ok(norm.apply(&(&f - lin.eval(&x))))
        })
        .collect::<Result<_>>()?;
    Ok(estimate_from(&errors))
}
