//! Closed-form error rates. The constants in the bounds are not explicit, so
//! every curve here is meaningful up to constants only.

use serde::{Deserialize, Serialize};

use crate::algorithms::Algorithm;
use crate::error::{FedError, Result};

/// Free constants of the error bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConstants {
    /// Clip bound scale: `B = c_b * sqrt(d v log N)`.
    pub c_b: f64,
    /// Generic constant `C` of the upper bounds.
    pub c: f64,
    /// Non-private branch constant of the lower bound.
    pub c1: f64,
    /// Private branch constant of the lower bound.
    pub c2: f64,
    /// Stand-in for `trace(Sigma)`; `None` means `d`.
    pub trace_sigma_proxy: Option<f64>,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        TheoryConstants {
            c_b: 1.0,
            c: 1.0,
            c1: 1.0,
            c2: 1.0,
            trace_sigma_proxy: None,
        }
    }
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_b", self.c_b), ("c", self.c), ("c1", self.c1), ("c2", self.c2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FedError::invalid(name, "must be positive"));
            }
        }
        match self.trace_sigma_proxy {
            Some(t) if !(t > 0.0 && t.is_finite()) => Err(FedError::invalid("trace_sigma_proxy", "must be positive")),
            _ => Ok(()),
        }
    }

    fn trace(&self, d: usize) -> f64 {
        self.trace_sigma_proxy.unwrap_or(d as f64)
    }
}

/// Problem size and tuning that the upper bounds depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct RateInputs {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub mu: f64,
    pub k: usize,
    pub r: usize,
    pub tau1: f64,
    pub tau2: f64,
}

impl RateInputs {
    fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(FedError::Empty("sizes"));
        }
        if self.sizes.contains(&0) {
            return Err(FedError::invalid("sizes", "must be positive"));
        }
        if self.d == 0 {
            return Err(FedError::invalid("d", "must be positive"));
        }
        if !(self.mu > 0.0) {
            return Err(FedError::invalid("mu", "must be positive"));
        }
        if self.k == 0 || self.r == 0 {
            return Err(FedError::invalid("K", "K and R must be positive"));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(FedError::invalid("tau1", "curvature bounds must be positive"));
        }
        if self.tau1 >= 3.0 * self.tau2 {
            return Err(FedError::invalid("tau1", "contraction factor needs tau1 < 3 tau2"));
        }
        Ok(())
    }

    fn total(&self) -> f64 {
        self.sizes.iter().sum::<usize>() as f64
    }

    /// `d v log N`.
    fn dim_log(&self) -> f64 {
        (self.d as f64).max(self.total().ln())
    }

    /// `log(3 tau2 / (3 tau2 - tau1))`.
    fn contraction_log(&self) -> f64 {
        (3.0 * self.tau2 / (3.0 * self.tau2 - self.tau1)).ln()
    }
}

/// `(sum_i (T/n_i + a/(mu^2 n_i^2))^-1)^-1`, the common shape of the near-optimal bounds.
fn harmonic_rate(sizes: &[usize], trace: f64, a: f64, mu: f64) -> f64 {
    let inv: f64 = sizes
        .iter()
        .map(|&n| {
            let n = n as f64;
            1.0 / (trace / n + a / (mu * mu * n * n))
        })
        .sum();
    1.0 / inv
}

/// Upper bound on the mean squared error of `algorithm`.
///
/// FedSGD, FedHybrid and FedNewton use their displayed closed forms; FedAvg uses
/// the one-round bound when `r == 1` and the multi-round bound otherwise. The
/// approximate-Newton variant has no bound.
pub fn upper_bound(algorithm: Algorithm, inputs: &RateInputs, tc: &TheoryConstants) -> Result<f64> {
    inputs.validate()?;
    tc.validate()?;
    let n_total = inputs.total();
    let m = inputs.sizes.len() as f64;
    let d = inputs.d as f64;
    let mu = inputs.mu;
    let mu2 = mu * mu;
    let dl = inputs.dim_log();
    let lg = inputs.contraction_log();
    let trace = tc.trace(inputs.d);
    let cb2 = tc.c_b * tc.c_b;
    let lead = 1.0 / (inputs.tau1 * inputs.tau1);
    let k = inputs.k as f64;
    let r = inputs.r as f64;
    Ok(match algorithm {
        Algorithm::FedSgd => {
            let a = 2.0 * cb2 * d * dl * (d * n_total).ln() / lg;
            17.0 * lead * harmonic_rate(&inputs.sizes, trace, a, mu)
        }
        Algorithm::FedHybrid => {
            let a = 2.0 * cb2 * d * dl * m.ln() / lg;
            17.0 * lead * harmonic_rate(&inputs.sizes, trace, a, mu)
        }
        Algorithm::FedAvg if inputs.r == 1 => {
            let first = 16.0 * lead * (trace / n_total + 2.0 * m * cb2 * k * d * dl / (mu2 * n_total * n_total));
            let inner: f64 = m * trace + inputs.sizes.iter().map(|&n| cb2 * k * d * dl / (mu2 * n as f64)).sum::<f64>();
            first + tc.c * inner * inner / (n_total * n_total)
        }
        Algorithm::FedAvg => {
            let first = 16.0 * lead * (trace / n_total + 2.0 * m * tc.c * r * k * d * dl / (mu2 * n_total * n_total));
            let inner: f64 = m * trace + inputs.sizes.iter().map(|&n| r * k * d * dl / (mu2 * n as f64)).sum::<f64>();
            first + tc.c * inner * inner / (n_total * n_total)
        }
        Algorithm::FedNewton => tc.c * trace * lead / n_total + tc.c * m * d * dl / (mu2 * n_total * n_total),
        Algorithm::ApproxNewton => {
            return Err(FedError::invalid("algorithm", "no closed-form bound for the approximate-Newton variant"));
        }
    })
}

/// Value of the minimax lower bound with, per client, whether the privacy
/// branch of the minimum is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub value: f64,
    pub privacy_branch: Vec<bool>,
}

/// `d / sum_i min(c1 n_i, c2 n_i^2 mu^2 log(1/mu) / d)` for `0 < mu < 1`.
pub fn minimax_lower_bound(sizes: &[usize], d: usize, mu: f64, tc: &TheoryConstants) -> Result<LowerBound> {
    tc.validate()?;
    if sizes.is_empty() {
        return Err(FedError::Empty("sizes"));
    }
    if sizes.contains(&0) || d == 0 {
        return Err(FedError::invalid("sizes", "sizes and d must be positive"));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(FedError::invalid("mu", "lower bound stated for mu<1"));
    }
    let d = d as f64;
    let mut denom = 0.0;
    let mut privacy_branch = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let n = n as f64;
        let plain = tc.c1 * n;
        let private = tc.c2 * n * n * mu * mu * (1.0 / mu).ln() / d;
        privacy_branch.push(private < plain);
        denom += plain.min(private);
    }
    Ok(LowerBound {
        value: d / denom,
        privacy_branch,
    })
}

/// Least-squares slope of `log(mse)` against `log(x)`.
pub fn rate_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(FedError::invalid("points", "need at least 3 points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(FedError::invalid("points", "coordinates must be positive and finite"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * n {
        return Err(FedError::invalid("points", "x values are degenerate"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn inputs(sizes: Vec<usize>, mu: f64) -> RateInputs {
        RateInputs {
            sizes,
            d: 5,
            mu,
            k: 50,
            r: 2,
            tau1: 0.5,
            tau2: 1.0,
        }
    }

    const BOUNDED: [Algorithm; 4] = Algorithm::CORE;

    #[test]
    fn lower_bound_hand_value() {
        let lb = minimax_lower_bound(&[10, 10], 2, 0.5, &TheoryConstants::default()).unwrap();
        let per_client = 100.0 * 0.25 * 2f64.ln() / 2.0;
        assert_relative_eq!(lb.value, 2.0 / (2.0 * per_client), epsilon = 1e-12);
        assert!((lb.value - 0.11542).abs() < 1e-4);
        assert_eq!(lb.privacy_branch, vec![true, true]);
    }

    #[test]
    fn lower_bound_domain() {
        let tc = TheoryConstants::default();
        assert!(minimax_lower_bound(&[10], 2, 1.0, &tc).is_err());
        assert!(minimax_lower_bound(&[10], 2, 0.0, &tc).is_err());
        assert!(minimax_lower_bound(&[], 2, 0.5, &tc).is_err());
    }

    #[test]
    fn lower_bound_branch_switch() {
        // Privacy branch active iff mu^2 log(1/mu) < d / n (with c1 = c2 = 1).
        let tc = TheoryConstants::default();
        let d = 4;
        for &n in &[5usize, 50, 500, 5000] {
            for &mu in &[0.01, 0.05, 0.2, 0.5, 0.9] {
                let lb = minimax_lower_bound(&[n], d, mu, &tc).unwrap();
                let expected = mu * mu * (1.0 / mu).ln() < d as f64 / n as f64;
                assert_eq!(lb.privacy_branch[0], expected, "n={n} mu={mu}");
            }
        }
    }

    #[test]
    fn lower_bound_monotone_where_privacy_term_increases() {
        // mu^2 log(1/mu) increases on (0, e^{-1/2}] only.
        let tc = TheoryConstants::default();
        let grid: Vec<f64> = (1..=60).map(|i| i as f64 * (-0.5f64).exp() / 60.0).collect();
        let values: Vec<f64> = grid.iter().map(|&mu| minimax_lower_bound(&[40, 90], 3, mu, &tc).unwrap().value).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let a = minimax_lower_bound(&[40, 90], 3, 0.7, &tc).unwrap().value;
        let b = minimax_lower_bound(&[40, 90], 3, 0.95, &tc).unwrap().value;
        assert!(b > a, "the bound rises again as mu approaches 1");
    }

    proptest! {
        #[test]
        fn lower_bound_non_increasing_in_sizes(n1 in 1usize..2000, n2 in 1usize..2000, extra in 1usize..500, mu in 0.01f64..0.99) {
            let tc = TheoryConstants::default();
            let a = minimax_lower_bound(&[n1, n2], 3, mu, &tc).unwrap().value;
            let b = minimax_lower_bound(&[n1 + extra, n2], 3, mu, &tc).unwrap().value;
            prop_assert!(b <= a * (1.0 + 1e-12));
        }

        #[test]
        fn upper_bounds_non_increasing_in_mu(n in 50usize..2000, m in 2usize..20, mu in 0.1f64..10.0, factor in 1.0f64..10.0) {
            let tc = TheoryConstants::default();
            for alg in BOUNDED {
                let a = upper_bound(alg, &inputs(vec![n; m], mu), &tc).unwrap();
                let b = upper_bound(alg, &inputs(vec![n; m], mu * factor), &tc).unwrap();
                prop_assert!(b <= a * (1.0 + 1e-12), "{alg}");
            }
        }

        #[test]
        fn upper_bounds_non_increasing_in_one_size(sizes in proptest::collection::vec(100usize..400, 2..12), idx in 0usize..12, extra in 1usize..300, mu in 0.2f64..8.0) {
            // Size ratios stay below 7; for wilder imbalance the log N factors can win.
            let tc = TheoryConstants::default();
            let i = idx % sizes.len();
            let mut bigger = sizes.clone();
            bigger[i] += extra;
            for alg in BOUNDED {
                let a = upper_bound(alg, &inputs(sizes.clone(), mu), &tc).unwrap();
                let b = upper_bound(alg, &inputs(bigger.clone(), mu), &tc).unwrap();
                prop_assert!(b <= a * (1.0 + 1e-12), "{alg}: {a} -> {b}");
            }
        }
    }

    #[test]
    fn fedsgd_equal_sizes_matches_closed_form() {
        // With n_i = N/m the harmonic form collapses to T/N + a m/(mu^2 N^2).
        let tc = TheoryConstants::default();
        for (m, n, mu) in [(4usize, 100usize, 1.0), (10, 55, 0.3), (1, 1000, 5.0)] {
            let inp = inputs(vec![n; m], mu);
            let nn = (m * n) as f64;
            let d: f64 = 5.0;
            let dl = d.max(nn.ln());
            let lg = (3.0f64 / 2.5).ln();
            let expect = 17.0 / 0.25 * (d / nn + 2.0 * m as f64 * d * dl * (d * nn).ln() / (mu * mu * nn * nn * lg));
            assert_relative_eq!(upper_bound(Algorithm::FedSgd, &inp, &tc).unwrap(), expect, max_relative = 1e-9);
        }
    }

    #[test]
    fn non_private_limits() {
        let tc = TheoryConstants::default();
        let sizes = vec![80, 120, 300];
        let nn = 500.0;
        let lead = 1.0 / 0.25;
        let big = inputs(sizes.clone(), 1e12);
        assert_relative_eq!(upper_bound(Algorithm::FedSgd, &big, &tc).unwrap(), 17.0 * lead * 5.0 / nn, max_relative = 1e-9);
        assert_relative_eq!(upper_bound(Algorithm::FedHybrid, &big, &tc).unwrap(), 17.0 * lead * 5.0 / nn, max_relative = 1e-9);
        assert_relative_eq!(upper_bound(Algorithm::FedNewton, &big, &tc).unwrap(), lead * 5.0 / nn, max_relative = 1e-9);
        let avg = 16.0 * lead * 5.0 / nn + (3.0 * 5.0f64).powi(2) / (nn * nn);
        assert_relative_eq!(upper_bound(Algorithm::FedAvg, &big, &tc).unwrap(), avg, max_relative = 1e-9);
    }

    #[test]
    fn fedavg_exceeds_fedsgd_with_many_clients() {
        let tc = TheoryConstants::default();
        for nn in [10_000usize, 100_000] {
            let m = (nn as f64).powf(0.6).round() as usize;
            let n = nn / m;
            let inp = inputs(vec![n; m], 1.0);
            let gap = upper_bound(Algorithm::FedAvg, &inp, &tc).unwrap() - upper_bound(Algorithm::FedSgd, &inp, &tc).unwrap();
            assert!(gap > 0.0, "N={nn}: gap {gap}");
        }
    }

    #[test]
    fn fednewton_bound_ignores_iterations() {
        let tc = TheoryConstants::default();
        let mut a = inputs(vec![100, 200], 2.0);
        let mut b = a.clone();
        a.k = 1;
        a.r = 1;
        b.k = 1000;
        b.r = 7;
        assert_eq!(upper_bound(Algorithm::FedNewton, &a, &tc).unwrap(), upper_bound(Algorithm::FedNewton, &b, &tc).unwrap());
    }

    #[test]
    fn contraction_requires_tau1_below_three_tau2() {
        let mut inp = inputs(vec![100], 1.0);
        inp.tau1 = 3.0;
        assert!(upper_bound(Algorithm::FedSgd, &inp, &TheoryConstants::default()).is_err());
        assert!(upper_bound(Algorithm::ApproxNewton, &inputs(vec![10], 1.0), &TheoryConstants::default()).is_err());
    }

    #[test]
    fn calibrated_lower_bound_stays_below_fedsgd_bound() {
        // Calibrate c1 so the non-private terms agree exactly, and c2 so the private
        // effective sizes agree at (smallest N, largest mu) of the grid.
        let (tau1, tau2, d) = (0.5f64, 1.0f64, 5usize);
        let mu0: f64 = 0.6;
        let n0 = 20 * 2;
        let df = d as f64;
        let dl0 = df.max((n0 as f64).ln());
        let a0 = 2.0 * df * dl0 * (df * n0 as f64).ln() / (3.0 * tau2 / (3.0 * tau2 - tau1)).ln();
        let tc = TheoryConstants {
            c1: tau1 * tau1 / 17.0,
            c2: tau1 * tau1 / 17.0 * df * df / (a0 * (1.0 / mu0).ln()),
            ..TheoryConstants::default()
        };
        for m in [2usize, 5, 20, 80] {
            for n in [20usize, 50, 200, 1000] {
                for mu in [0.05, 0.1, 0.3, 0.6] {
                    let inp = RateInputs {
                        sizes: vec![n; m],
                        d,
                        mu,
                        k: 50,
                        r: 1,
                        tau1,
                        tau2,
                    };
                    let ub = upper_bound(Algorithm::FedSgd, &inp, &tc).unwrap();
                    let lb = minimax_lower_bound(&inp.sizes, d, mu, &tc).unwrap().value;
                    assert!(lb <= ub * (1.0 + 1e-9), "m={m} n={n} mu={mu}: {lb} > {ub}");
                }
            }
        }
    }

    #[test]
    fn slope_recovers_power_laws() {
        let xs = [10.0, 20.0, 40.0, 80.0, 160.0];
        let p1: Vec<(f64, f64)> = xs.iter().map(|&x| (x, 3.0 / x)).collect();
        assert!((rate_slope(&p1).unwrap() + 1.0).abs() < 1e-9);
        let p2: Vec<(f64, f64)> = xs.iter().map(|&x| (x, 0.5 / (x * x))).collect();
        assert!((rate_slope(&p2).unwrap() + 2.0).abs() < 1e-9);
        let wobble = [1.02, 0.97, 1.01, 0.99, 1.03];
        let p3: Vec<(f64, f64)> = xs.iter().zip(wobble).map(|(&x, w)| (x, w / x)).collect();
        assert!((rate_slope(&p3).unwrap() + 1.0).abs() < 0.1);
        assert!(rate_slope(&p1[..2]).is_err());
        assert!(rate_slope(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
    }
}
