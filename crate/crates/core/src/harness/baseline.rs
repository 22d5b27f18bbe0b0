use nalgebra::{DMatrix, DVector};

use crate::error::{FedError, Result};
use crate::federation::ClientShard;
use crate::model::{mean_gradient, Family, ModelSpec, Sample};

/// Gradient-norm tolerance for declaring a baseline fit converged.
const TOLERANCE: f64 = 1e-6;

/// A non-private reference estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub theta: DVector<f64>,
    /// Norm of the mean gradient at `theta`.
    pub grad_norm: f64,
    pub converged: bool,
}

fn fit(spec: &ModelSpec, samples: &[Sample], k: usize, eta: f64) -> Result<BaselineFit> {
    if samples.is_empty() {
        return Err(FedError::Empty("samples"));
    }
    let d = spec.d;
    let theta = if spec.family == Family::Linear {
        // Least squares through the normal equations.
        let mut xtx = DMatrix::<f64>::zeros(d, d);
        let mut xty = DVector::<f64>::zeros(d);
        for s in samples {
            let x = DVector::from_column_slice(&s.x);
            xtx += &x * x.transpose();
            xty += x * s.y;
        }
        xtx.cholesky()
            .ok_or_else(|| FedError::SolveFailed("design matrix is rank deficient".into()))?
            .solve(&xty)
    } else {
        let mut theta = DVector::zeros(d);
        for _ in 0..k {
            let g = mean_gradient(spec, &theta, samples)?;
            if g.norm() < TOLERANCE {
                break;
            }
            theta.axpy(-eta, &g, 1.0);
            if !theta.norm().is_finite() {
                return Err(FedError::Diverged {
                    iteration: k,
                    norm: theta.norm(),
                });
            }
        }
        theta
    };
    let grad_norm = mean_gradient(spec, &theta, samples)?.norm();
    Ok(BaselineFit {
        converged: grad_norm < TOLERANCE,
        theta,
        grad_norm,
    })
}

/// Pooled non-private fit on the whole dataset: exact least squares for the
/// linear family, `k` gradient steps of size `eta` otherwise.
pub fn centralized_baseline(dataset: &[Sample], spec: &ModelSpec, k: usize, eta: f64) -> Result<BaselineFit> {
    fit(spec, dataset, k, eta)
}

/// Independent non-private fit on each client, in client order.
pub fn local_fit_baseline(shards: &[ClientShard], spec: &ModelSpec, k: usize, eta: f64) -> Result<Vec<BaselineFit>> {
    shards
        .iter()
        .map(|s| {
            if s.samples.is_empty() {
                return Err(FedError::Empty("shard"));
            }
            fit(spec, &s.samples, k, eta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::testutil::{dataset, shards};

    #[test]
    fn linear_baseline_solves_normal_equations() {
        let (spec, data) = dataset(Family::Linear, 3, 200, 1);
        let fit = centralized_baseline(&data, &spec, 0, 0.0).unwrap();
        assert!(fit.grad_norm < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn logistic_baseline_converges_with_enough_steps() {
        let (spec, data) = dataset(Family::Logistic, 3, 400, 2);
        let fit = centralized_baseline(&data, &spec, 20_000, 1.0).unwrap();
        assert!(fit.converged, "grad norm {}", fit.grad_norm);
        let short = centralized_baseline(&data, &spec, 2, 0.1).unwrap();
        assert!(!short.converged);
    }

    #[test]
    fn local_fits_follow_client_order() {
        let (spec, data) = dataset(Family::Linear, 2, 90, 3);
        let sh = shards(&data, 3, 1);
        let fits = local_fit_baseline(&sh, &spec, 0, 0.0).unwrap();
        assert_eq!(fits.len(), 3);
        for (f, s) in fits.iter().zip(&sh) {
            assert_eq!(f.theta, centralized_baseline(&s.samples, &spec, 0, 0.0).unwrap().theta);
        }
        let empty = vec![ClientShard::new(0, Vec::new(), 0)];
        assert!(local_fit_baseline(&empty, &spec, 1, 0.1).is_err());
    }
}
