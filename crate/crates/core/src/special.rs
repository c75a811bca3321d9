//! Modified Bessel functions `I_ν`, `K_ν` of real order and positive argument.

use std::f64::consts::PI;

use crate::{Error, Result};

const SERIES_SWITCH: f64 = 30.0;
const K_SERIES_SWITCH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesselKind {
    I,
    K,
}

pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

fn check(nu: f64, x: f64) -> Result<()> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("Bessel argument must be positive, got {x}")));
    }
    if nu == nu.round() {
        return Err(Error::Domain(format!("integer Bessel order {nu} is not supported")));
    }
    Ok(())
}

/// `I_ν(x)` or `K_ν(x)` for non-integer `ν` and `x > 0`.
pub fn bessel_eval(kind: BesselKind, nu: f64, x: f64) -> Result<f64> {
    check(nu, x)?;
    Ok(match kind {
        BesselKind::I => i_scaled_unchecked(nu, x) * x.exp(),
        BesselKind::K => k_scaled_unchecked(nu, x) * (-x).exp(),
    })
}

/// `e^{−x} I_ν(x)`.
pub fn bessel_i_scaled(nu: f64, x: f64) -> Result<f64> {
    check(nu, x)?;
    Ok(i_scaled_unchecked(nu, x))
}

/// `e^{x} K_ν(x)`.
pub fn bessel_k_scaled(nu: f64, x: f64) -> Result<f64> {
    check(nu, x)?;
    Ok(k_scaled_unchecked(nu, x))
}

fn i_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = (0.5 * x).powf(nu) / gamma(nu + 1.0);
    let mut sum = term;
    for k in 1..500 {
        let kf = k as f64;
        term *= q / (kf * (kf + nu));
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `√(2πx) e^{−x} I_ν(x) ≈ Σ (−1)^k a_k(ν) / x^k`.
fn i_asymptotic_scaled(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let kf = k as f64;
        let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum / (2.0 * PI * x).sqrt()
}

pub(crate) fn i_scaled_unchecked(nu: f64, x: f64) -> f64 {
    if x <= SERIES_SWITCH {
        i_series(nu, x) * (-x).exp()
    } else {
        i_asymptotic_scaled(nu, x)
    }
}

/// `∫₀^∞ e^{−x(cosh t − 1)} cosh(νt) dt` by the trapezoid rule, which converges
/// geometrically for this entire integrand.
fn k_integral_scaled(nu: f64, x: f64) -> f64 {
    let step = 0.02;
    let mut sum = 0.5;
    let mut k = 1;
    loop {
        let t = k as f64 * step;
        let term = (-x * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
        k += 1;
    }
    sum * step
}

pub(crate) fn k_scaled_unchecked(nu: f64, x: f64) -> f64 {
    if x <= K_SERIES_SWITCH {
        let k = PI * (i_series(-nu, x) - i_series(nu, x)) / (2.0 * (nu * PI).sin());
        k * x.exp()
    } else {
        k_integral_scaled(nu, x)
    }
}

/// `w^s I_{−s}(w)` including the limit `2^s/Γ(1−s)` at `w = 0`, scaled by `e^{−w}`.
pub fn regular_i_neg_scaled(s: f64, w: f64) -> f64 {
    if w <= SERIES_SWITCH {
        let q = 0.25 * w * w;
        let mut term = 2f64.powf(s) / gamma(1.0 - s);
        let mut sum = term;
        for k in 1..500 {
            let kf = k as f64;
            term *= q / (kf * (kf - s));
            sum += term;
            if term.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        sum * (-w).exp()
    } else {
        w.powf(s) * i_asymptotic_scaled(-s, w)
    }
}
