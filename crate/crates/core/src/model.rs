//! Generalized linear model losses with canonical links, their derivatives, and the
//! synthetic data generator used by the simulation studies.
//!
//! Every covariate vector carries the intercept in position 0 (`x[0] == 1`).

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::seed;

/// Largest linear predictor fed to `exp` in the Poisson family.
pub const EXP_CAP: f64 = 30.0;

static EXP_CAP_HITS: AtomicU64 = AtomicU64::new(0);

/// Number of times a Poisson linear predictor has been capped at [`EXP_CAP`] in this
/// process.
pub fn exp_cap_hits() -> u64 {
    EXP_CAP_HITS.load(Ordering::Relaxed)
}

fn capped_exp(eta: f64) -> f64 {
    if eta > EXP_CAP {
        EXP_CAP_HITS.fetch_add(1, Ordering::Relaxed);
        EXP_CAP.exp()
    } else {
        eta.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Bernoulli response, logit link.
    Logistic,
    /// Poisson response, log link.
    Poisson,
    /// Gaussian response, identity link (least squares).
    Linear,
}

impl Family {
    /// Inverse link evaluated at the linear predictor.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Logistic => sigmoid(eta),
            Family::Poisson => capped_exp(eta),
            Family::Linear => eta,
        }
    }

    /// Second derivative of the loss with respect to the linear predictor.
    pub fn curvature(self, eta: f64) -> f64 {
        match self {
            Family::Logistic => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
            Family::Poisson => capped_exp(eta),
            Family::Linear => 1.0,
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// A GLM family together with its dimension and the curvature constants of the
/// population loss (strong convexity `tau1`, smoothness `tau2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub d: usize,
    pub tau1: f64,
    pub tau2: f64,
}

impl ModelSpec {
    pub fn new(family: Family, d: usize, tau1: f64, tau2: f64) -> Result<Self> {
        let spec = ModelSpec {
            family,
            d,
            tau1,
            tau2,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default curvature constants for covariates drawn as in [`generate_dataset`]
    /// with variance `sigma_c^2`.
    ///
    /// * logistic: `tau1 = 0.05`, `tau2 = 0.25 E||x||^2`
    /// * linear: `tau1`, `tau2` the extreme eigenvalues of `E[x x^T] = diag(1, sigma_c^2, ...)`
    /// * Poisson: `tau1 = 0.05`, `tau2 = E||x||^2`
    pub fn with_defaults(family: Family, d: usize, sigma_c: f64) -> Result<Self> {
        if d == 0 {
            return Err(FedError::invalid("d", "must be at least 1"));
        }
        let s2 = sigma_c * sigma_c;
        let expected_sq_norm = 1.0 + (d as f64 - 1.0) * s2;
        let (tau1, tau2) = match family {
            Family::Logistic => (0.05, 0.25 * expected_sq_norm),
            Family::Linear if d == 1 => (1.0, 1.0),
            Family::Linear => (s2.min(1.0), s2.max(1.0)),
            Family::Poisson => (0.05, expected_sq_norm),
        };
        ModelSpec::new(family, d, tau1, tau2.max(tau1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(FedError::invalid("d", "must be at least 1"));
        }
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(FedError::invalid("tau1", format!("must be positive, got {}", self.tau1)));
        }
        if !(self.tau2 >= self.tau1 && self.tau2.is_finite()) {
            return Err(FedError::invalid(
                "tau2",
                format!("must satisfy tau1 <= tau2, got tau1={} tau2={}", self.tau1, self.tau2),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Sample { x, y }
    }

    pub fn dot(&self, theta: &DVector<f64>) -> f64 {
        self.x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn x_norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Checks the response against the family's support.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        check_dim(spec, self.x.len())?;
        let ok = match spec.family {
            Family::Logistic => self.y == 0.0 || self.y == 1.0,
            Family::Poisson => self.y >= 0.0 && self.y.fract() == 0.0,
            Family::Linear => self.y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FedError::invalid(
                "y",
                format!("{} is outside the support of the {:?} family", self.y, spec.family),
            ))
        }
    }
}

/// The population minimiser the estimators target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrueParameter {
    pub theta0: Vec<f64>,
}

impl TrueParameter {
    pub fn new(theta0: Vec<f64>) -> Result<Self> {
        if theta0.is_empty() {
            return Err(FedError::Empty("theta0"));
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(FedError::invalid("theta0", "entries must be finite"));
        }
        Ok(TrueParameter { theta0 })
    }

    /// The documented default `(0.5, -0.3, 0.2, 0.5, -0.3, 0.2, ...)`.
    pub fn cyclic_default(d: usize) -> Self {
        const PATTERN: [f64; 3] = [0.5, -0.3, 0.2];
        TrueParameter {
            theta0: (0..d).map(|j| PATTERN[j % 3]).collect(),
        }
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta0)
    }
}

fn check_dim(spec: &ModelSpec, got: usize) -> Result<()> {
    if got != spec.d {
        Err(FedError::DimensionMismatch {
            expected: spec.d,
            got,
        })
    } else {
        Ok(())
    }
}

fn check_inputs(spec: &ModelSpec, theta: &DVector<f64>, s: &Sample) -> Result<()> {
    check_dim(spec, theta.len())?;
    check_dim(spec, s.x.len())
}

/// Negative log-likelihood of one sample.
pub fn loss(spec: &ModelSpec, theta: &DVector<f64>, s: &Sample) -> Result<f64> {
    check_inputs(spec, theta, s)?;
    let eta = s.dot(theta);
    Ok(match spec.family {
        Family::Logistic => softplus(eta) - s.y * eta,
        Family::Poisson => capped_exp(eta) - s.y * eta,
        Family::Linear => 0.5 * (s.y - eta).powi(2),
    })
}

/// Derivative of the loss with respect to the linear predictor. The full gradient
/// is this scalar times `x`.
#[inline]
pub fn residual(family: Family, theta: &DVector<f64>, s: &Sample) -> f64 {
    family.mean(s.dot(theta)) - s.y
}

pub fn gradient(spec: &ModelSpec, theta: &DVector<f64>, s: &Sample) -> Result<DVector<f64>> {
    check_inputs(spec, theta, s)?;
    let r = residual(spec.family, theta, s);
    Ok(DVector::from_iterator(spec.d, s.x.iter().map(|v| r * v)))
}

/// Hessian of the loss at a single sample.
pub fn hessian(spec: &ModelSpec, theta: &DVector<f64>, s: &Sample) -> Result<DMatrix<f64>> {
    check_inputs(spec, theta, s)?;
    let w = spec.family.curvature(s.dot(theta));
    let x = DVector::from_column_slice(&s.x);
    Ok(&x * x.transpose() * w)
}

/// `(1/n) sum_j hess rho(x_j, theta)`.
pub fn hessian_avg(spec: &ModelSpec, theta: &DVector<f64>, samples: &[Sample]) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(FedError::Empty("samples"));
    }
    check_dim(spec, theta.len())?;
    let d = spec.d;
    let mut h = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        check_dim(spec, s.x.len())?;
        let w = spec.family.curvature(s.dot(theta));
        for a in 0..d {
            let wa = w * s.x[a];
            for b in a..d {
                h[(a, b)] += wa * s.x[b];
            }
        }
    }
    let n = samples.len() as f64;
    for a in 0..d {
        for b in a..d {
            let v = h[(a, b)] / n;
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Ok(h)
}

/// Average loss over a sample set.
pub fn empirical_loss(spec: &ModelSpec, theta: &DVector<f64>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(FedError::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += loss(spec, theta, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Unclipped mean gradient over a sample set.
pub fn mean_gradient(spec: &ModelSpec, theta: &DVector<f64>, samples: &[Sample]) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(FedError::Empty("samples"));
    }
    check_dim(spec, theta.len())?;
    let mut g = DVector::zeros(spec.d);
    for s in samples {
        check_dim(spec, s.x.len())?;
        let r = residual(spec.family, theta, s);
        for (gj, xj) in g.iter_mut().zip(&s.x) {
            *gj += r * xj;
        }
    }
    Ok(g / samples.len() as f64)
}

/// Draws `n` i.i.d. samples: covariates `N(0, sigma_c^2)` behind an intercept
/// column of ones, responses from the family's canonical-link model at `theta0`.
pub fn generate_dataset(
    spec: &ModelSpec,
    theta0: &TrueParameter,
    n: usize,
    sigma_c: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(FedError::invalid("N", "must be at least 1"));
    }
    if !(sigma_c > 0.0 && sigma_c.is_finite()) {
        return Err(FedError::invalid("sigma_c", format!("must be positive, got {sigma_c}")));
    }
    check_dim(spec, theta0.theta0.len())?;
    let theta = theta0.as_vector();
    let covariate = Normal::new(0.0, sigma_c).map_err(|e| FedError::invalid("sigma_c", e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::rng_from(seed::derive(seed, &[seed::tag::DATA]));

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = Vec::with_capacity(spec.d);
        x.push(1.0);
        for _ in 1..spec.d {
            x.push(covariate.sample(&mut rng));
        }
        let mut s = Sample::new(x, 0.0);
        let eta = s.dot(&theta);
        s.y = match spec.family {
            Family::Logistic => {
                let p = sigmoid(eta);
                if Bernoulli::new(p).expect("p in [0,1]").sample(&mut rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => {
                let lambda = capped_exp(eta);
                if lambda <= 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng).floor()
                }
            }
            Family::Linear => eta + noise.sample(&mut rng),
        };
        out.push(s);
    }
    Ok(out)
}

/// Draws a vector of `d` independent standard normals.
pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)))
}
