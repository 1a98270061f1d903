//! Utility functions and their conjugate window machinery.
//!
//! A utility `U` (increasing, strictly concave on `(0, inf)`) induces the
//! window potential
//!
//! ```text
//! G(m) = -max_l { U(e^l) - m*l }
//! ```
//!
//! whose derivative inverts the utility gradient: `exp(G'(m)) = Lambda` at
//! `m = Lambda * U'(Lambda)`. Everything the controller does — the injection
//! rate `g^(c)`, the potential `G^(c)`, the conjugate `G*` — derives from
//! this transform.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Hard bracket for searches in log-rate space; `e^700` is still finite.
const LAMBDA_BOUND: f64 = 700.0;
/// Golden-section terminates when the bracket is narrower than this.
const GOLDEN_TOL: f64 = 1e-10;

/// Utility of a route's transfer rate.
#[derive(Clone)]
pub enum Utility {
    /// `U(x) = w * x^(1-alpha) / (1-alpha)`, requires `alpha > 1`, `w > 0`.
    AlphaFair { alpha: f64, weight: f64 },
    /// Arbitrary strictly increasing, strictly concave function handle.
    /// Callers are expected to gate it through
    /// [`Utility::check_exponential_concavity`] before analysis.
    Tabulated(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Utility::AlphaFair { alpha, weight } => f
                .debug_struct("AlphaFair")
                .field("alpha", alpha)
                .field("weight", weight)
                .finish(),
            Utility::Tabulated(_) => f.write_str("Tabulated(..)"),
        }
    }
}

impl Utility {
    /// Weighted fairness utility; rejects the unsupported `alpha <= 1` regime.
    pub fn alpha_fair(alpha: f64, weight: f64) -> Result<Utility> {
        if !(alpha > 1.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "alpha must be finite and > 1, got {alpha}"
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::Domain(format!(
                "weight must be finite and > 0, got {weight}"
            )));
        }
        Ok(Utility::AlphaFair { alpha, weight })
    }

    pub fn tabulated(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Utility {
        Utility::Tabulated(Arc::new(f))
    }

    /// `U(rate)`.
    pub fn value(&self, rate: f64) -> Result<f64> {
        if !(rate > 0.0) {
            return Err(Error::Domain(format!(
                "utility argument must be > 0, got {rate}"
            )));
        }
        Ok(match self {
            Utility::AlphaFair { alpha, weight } => weight * rate.powf(1.0 - alpha) / (1.0 - alpha),
            Utility::Tabulated(f) => f(rate),
        })
    }

    /// `U'(rate)`; closed form for the fair family, central difference with a
    /// step scaled to the argument otherwise.
    pub fn prime(&self, rate: f64) -> Result<f64> {
        if !(rate > 0.0) {
            return Err(Error::Domain(format!(
                "utility argument must be > 0, got {rate}"
            )));
        }
        Ok(match self {
            Utility::AlphaFair { alpha, weight } => weight * rate.powf(-alpha),
            Utility::Tabulated(f) => {
                let h = 1e-6 * rate;
                (f(rate + h) - f(rate - h)) / (2.0 * h)
            }
        })
    }

    /// Numerically witnesses strict concavity of `l -> U(e^l)` on a grid:
    /// every interior second difference must be `<= -tol`.
    pub fn check_exponential_concavity(&self, grid: &[f64], tol: f64) -> bool {
        if grid.len() < 3 {
            return false;
        }
        let vals: Vec<f64> = match grid.iter().map(|&l| self.value(l.exp())).collect() {
            Ok(v) => v,
            Err(_) => return false,
        };
        for k in 1..vals.len() - 1 {
            let d2 = vals[k + 1] - 2.0 * vals[k] + vals[k - 1];
            if !(d2 <= -tol) {
                return false;
            }
        }
        true
    }

    /// Concavity gate with the default grid (121 points on `[-6, 6]`).
    pub fn is_exponentially_concave(&self) -> bool {
        self.check_exponential_concavity(&default_concavity_grid(), DEFAULT_CONCAVITY_TOL)
    }

    /// Window potential `G(m) = -max_l { U(e^l) - m*l }`.
    ///
    /// Closed form for the fair family with `G(0) = 0` by the continuity of
    /// `x log x`; golden-section maximization over an expanding bracket
    /// otherwise.
    pub fn g_value(&self, m: f64) -> Result<f64> {
        if !(m >= 0.0) {
            return Err(Error::Domain(format!(
                "window argument must be >= 0, got {m}"
            )));
        }
        match self {
            Utility::AlphaFair { alpha, weight } => {
                if m == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(m / (1.0 - alpha) * ((m / weight).ln() - 1.0))
                }
            }
            Utility::Tabulated(_) => {
                let f = |l: f64| self.value(l.exp()).unwrap_or(f64::NEG_INFINITY) - m * l;
                let (lo, hi) = expand_bracket(&f, -8.0, 8.0);
                Ok(-golden_max(&f, lo, hi).1)
            }
        }
    }

    /// Conjugate `G*(l) = max_{m>=0} { G(m) - l*m }`, computed by direct
    /// maximization so that the identity `G*(l) = -U(e^l)` stays a check on
    /// `G` rather than a restatement of it.
    pub fn g_conjugate(&self, l: f64) -> f64 {
        let f = |m: f64| self.g_value(m).unwrap_or(f64::NEG_INFINITY) - l * m;
        // G is concave with G'(0+) = +inf, so the maximizer is interior or 0;
        // grow the right edge until the objective turns down.
        let mut hi = 1.0;
        while f(hi) >= f(0.75 * hi) && hi < 1e12 {
            hi *= 2.0;
        }
        golden_max(&f, 0.0, hi).1
    }

    /// Derivative of the window potential.
    pub fn g_prime(&self, m: f64) -> Result<f64> {
        if !(m > 0.0) {
            return Err(Error::Domain(format!(
                "window argument must be > 0, got {m}"
            )));
        }
        match self {
            Utility::AlphaFair { alpha, weight } => Ok((m / weight).ln() / (1.0 - alpha)),
            Utility::Tabulated(_) => {
                let h = (1e-6 * m).min(0.5 * m);
                Ok((self.g_value(m + h)? - self.g_value(m - h)?) / (2.0 * h))
            }
        }
    }

    /// Inverse of `U'`; monotone bisection for tabulated utilities.
    pub fn inv_prime(&self, target: f64) -> Result<f64> {
        if !(target > 0.0) {
            return Err(Error::Domain(format!(
                "inverse gradient target must be > 0, got {target}"
            )));
        }
        match self {
            Utility::AlphaFair { alpha, weight } => Ok((weight / target).powf(1.0 / alpha)),
            Utility::Tabulated(_) => {
                // U' is strictly decreasing; expand until the target is bracketed.
                let mut lo = 1e-12;
                let mut hi = 1.0;
                while self.prime(hi)? > target && hi < 1e15 {
                    hi *= 2.0;
                }
                while self.prime(lo)? < target && lo > 1e-300 {
                    lo /= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.prime(mid)? > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if (hi - lo) <= 1e-12 * hi.max(1.0) {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

pub const DEFAULT_CONCAVITY_TOL: f64 = 1e-14;

/// 121 uniformly spaced log-rate points on `[-6, 6]`.
pub fn default_concavity_grid() -> Vec<f64> {
    lambda_grid(-6.0, 6.0, 121)
}

/// Uniform grid helper for the concavity check.
pub fn lambda_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

/// Grow `[lo, hi]` until the target function turns down at both edges (or the
/// hard bound is hit), so a concave maximizer is bracketed.
fn expand_bracket(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let step = |x: f64| (x.abs() * 0.5).max(1.0);
    while f(hi) >= f(hi - step(hi) * 0.01) && hi < LAMBDA_BOUND {
        hi = (hi + step(hi)).min(LAMBDA_BOUND);
    }
    while f(lo) >= f(lo + step(lo) * 0.01) && lo > -LAMBDA_BOUND {
        lo = (lo - step(lo)).max(-LAMBDA_BOUND);
    }
    (lo, hi)
}

/// Golden-section maximization of a strictly concave function on `[lo, hi]`.
/// Returns `(argmax, max)`. The width target is relative to the bracket
/// magnitude so it stays reachable in floating point.
pub(crate) fn golden_max(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let tol = GOLDEN_TOL * (1.0 + lo.abs().max(hi.abs()));
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iters = 0;
    while hi - lo > tol && iters < 300 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
        iters += 1;
    }
    let mid = 0.5 * (lo + hi);
    (mid, f(mid))
}
