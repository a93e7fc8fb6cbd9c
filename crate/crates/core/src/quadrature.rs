//! Closed Newton–Cotes rules on equally spaced nodes.
//!
//! Weights are obtained by integrating each Lagrange basis polynomial exactly
//! in rational arithmetic over nodes `0, 1, .., K`, so that
//! `∫_0^T v(t) dt ≈ (T/K) Σ_k w^k v(kT/K)`. Order zero is the left-endpoint
//! rule `T · v(0)`.

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest supported order; beyond it equally spaced interpolation oscillates.
pub const MAX_ORDER: usize = 8;

pub type Rational = Ratio<i128>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("order {0} exceeds the maximum of {MAX_ORDER}")]
    OrderTooHigh(usize),
    #[error("order {order} needs {expected} samples, got {got}")]
    SampleCount { order: usize, expected: usize, got: usize },
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("error at T = {t} is below round-off; no convergence slope can be fitted")]
    BelowRoundoff { t: f64 },
}

/// Newton–Cotes coefficients of one order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcWeights {
    order: usize,
    /// `(numerator, denominator)` in lowest terms.
    exact: Vec<(i128, i128)>,
    weights: Vec<f64>,
}

/// Dense polynomial with rational coefficients, lowest degree first.
fn poly_mul_linear(poly: &[Rational], root: Rational) -> Vec<Rational> {
    // (p(s)) * (s - root)
    let mut out = vec![Rational::zero(); poly.len() + 1];
    for (i, c) in poly.iter().enumerate() {
        out[i + 1] += *c;
        out[i] -= *c * root;
    }
    out
}

fn integrate_poly(poly: &[Rational], upper: Rational) -> Rational {
    // ∫_0^upper p(s) ds via Horner on the antiderivative.
    poly.iter()
        .enumerate()
        .rev()
        .fold(Rational::zero(), |acc, (i, c)| (acc + *c / Rational::from_integer(i as i128 + 1)) * upper)
}

/// Exact weights `w^k = ∫_0^K L_k(s) ds` for nodes `0..=K`.
pub fn lagrange_weights(order: usize) -> Result<Vec<Rational>, QuadratureError> {
    if order > MAX_ORDER {
        return Err(QuadratureError::OrderTooHigh(order));
    }
    if order == 0 {
        return Ok(vec![Rational::one()]);
    }
    let upper = Rational::from_integer(order as i128);
    let weights = (0..=order)
        .map(|k| {
            let mut basis = vec![Rational::one()];
            let mut denom = Rational::one();
            for j in (0..=order).filter(|&j| j != k) {
                basis = poly_mul_linear(&basis, Rational::from_integer(j as i128));
                denom *= Rational::from_integer(k as i128 - j as i128);
            }
            integrate_poly(&basis, upper) / denom
        })
        .collect();
    Ok(weights)
}

impl NcWeights {
    pub fn new(order: usize) -> Result<Self, QuadratureError> {
        let exact = lagrange_weights(order)?;
        let weights = exact.iter().map(|r| r.to_f64().expect("small rational")).collect();
        Ok(Self {
            order,
            exact: exact.iter().map(|r| (*r.numer(), *r.denom())).collect(),
            weights,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn exact(&self) -> Vec<Rational> {
        self.exact.iter().map(|&(n, d)| Rational::new(n, d)).collect()
    }

    /// Spacing factor in front of the weighted sum: `T/K`, or `T` for order 0.
    pub fn step(&self, duration: f64) -> f64 {
        if self.order == 0 {
            duration
        } else {
            duration / self.order as f64
        }
    }

    /// Multipliers `c_k` such that the rule reads `Σ_k c_k v^k`.
    pub fn scaled(&self, duration: f64) -> Vec<f64> {
        let h = self.step(duration);
        self.weights.iter().map(|w| w * h).collect()
    }

    /// Applies the rule to `K+1` equally spaced samples over `[0, duration]`.
    pub fn integrate(&self, values: &[f64], duration: f64) -> Result<f64, QuadratureError> {
        if values.len() != self.order + 1 {
            return Err(QuadratureError::SampleCount {
                order: self.order,
                expected: self.order + 1,
                got: values.len(),
            });
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(QuadratureError::Duration(duration));
        }
        let h = self.step(duration);
        Ok(h * self.weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Shorthand for `NcWeights::new(order)`.
pub fn nc_weights(order: usize) -> Result<NcWeights, QuadratureError> {
    NcWeights::new(order)
}

/// Samples `f` at the `K+1` nodes of `[start, start + duration]` and applies the rule.
pub fn integrate_fn(
    weights: &NcWeights,
    f: impl Fn(f64) -> f64,
    start: f64,
    duration: f64,
) -> Result<f64, QuadratureError> {
    let k = weights.order();
    let values: Vec<f64> = if k == 0 {
        vec![f(start)]
    } else {
        (0..=k).map(|i| f(start + duration * i as f64 / k as f64)).collect()
    };
    weights.integrate(&values, duration)
}

/// Absolute single-window error of the order-`K` rule against an exact
/// antiderivative.
pub fn window_error(
    weights: &NcWeights,
    f: impl Fn(f64) -> f64,
    antiderivative: impl Fn(f64) -> f64,
    start: f64,
    duration: f64,
) -> Result<f64, QuadratureError> {
    let estimate = integrate_fn(weights, f, start, duration)?;
    Ok((estimate - (antiderivative(start + duration) - antiderivative(start))).abs())
}

/// Measured convergence exponent of the single-window rule: the least-squares
/// slope of `log|error(T)|` against `log T` for `T ∈ {T0, T0/2, T0/4, T0/8}`
/// on windows starting at `start`.
pub fn empirical_order(
    f: impl Fn(f64) -> f64,
    antiderivative: impl Fn(f64) -> f64,
    order: usize,
    start: f64,
    t0: f64,
) -> Result<f64, QuadratureError> {
    let weights = NcWeights::new(order)?;
    let mut points = Vec::with_capacity(4);
    for i in 0..4 {
        let t = t0 / f64::powi(2.0, i);
        let err = window_error(&weights, &f, &antiderivative, start, t)?;
        let scale = antiderivative(start + t).abs().max(antiderivative(start).abs()).max(1.0);
        if err <= 64.0 * f64::EPSILON * scale {
            return Err(QuadratureError::BelowRoundoff { t });
        }
        points.push((t.ln(), err.ln()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}
