//! Quadrature of the Balakrishnan integral
//! `H^s u = −(s/Γ(1−s)) ∫₀^∞ (P_τ u − u) τ^{−1−s} dτ`, an oracle independent of the
//! closed-form branch power.
//!
//! On a mode the semigroup `P_τ` acts as `e^{−(λ+iσ)τ}` (heat flow composed with the
//! time shift). The integral runs on log-spaced nodes with trapezoid weights in
//! `log τ`; the lattice sums beyond both ends are added in closed form.
//!
//! For `|σ| ≫ λ` the integrand oscillates long before it decays, which aliases on a
//! log-spaced lattice. The ray is therefore rotated to `τ = r e^{−iψ}` with
//! `ψ = arg(ω)/2` (Cauchy; the integrand decays throughout the swept sector), so the
//! exponent `ωτ` has argument `arg(ω)/2` and decays at rate at least `|ω|/√2`.

use num_complex::Complex64;

use crate::spacetime::SpaceTimeField;
use crate::special::gamma;
use crate::spectral::EigenBasis;
use crate::{fractional, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalakrishnanQuad {
    pub nodes: usize,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for BalakrishnanQuad {
    fn default() -> Self {
        BalakrishnanQuad { nodes: 400, tau_min: 1e-8, tau_max: 1e4 }
    }
}

impl BalakrishnanQuad {
    fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_max > self.tau_min) || self.nodes < 2 {
            return Err(Error::Domain(format!(
                "quadrature range [{}, {}] with {} nodes is not a positive interval",
                self.tau_min, self.tau_max, self.nodes
            )));
        }
        Ok(())
    }
}

/// `e^{−ωτ} − 1` without cancellation for small `τ`.
fn semigroup_minus_one(lambda: f64, sigma: f64, tau: f64) -> Complex64 {
    let decay = (-lambda * tau).exp_m1();
    let (sn, cs) = (sigma * tau).sin_cos();
    let half = (0.5 * sigma * tau).sin();
    Complex64::new(decay * cs - 2.0 * half * half, -(decay + 1.0) * sn)
}

/// Scalar symbol of the quadrature at `ω = λ + iσ`.
pub fn balakrishnan_multiplier(lambda: f64, sigma: f64, s: f64, quad: &BalakrishnanQuad) -> Result<Complex64> {
    quad.validate()?;
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Domain(format!("fractional order must lie in (0, 1), got {s}")));
    }
    if lambda < 0.0 {
        return Err(Error::Domain(format!("spectral parameter must be nonnegative, got {lambda}")));
    }
    let psi = 0.5 * sigma.atan2(lambda);
    // ω' = ω e^{−iψ}; τ^{−s} on the rotated ray contributes e^{isψ}
    let omega = Complex64::from_polar(lambda.hypot(sigma), psi);
    let (lambda, sigma) = (omega.re, omega.im);
    let u0 = quad.tau_min.ln();
    let h = (quad.tau_max.ln() - u0) / (quad.nodes - 1) as f64;
    let mut sum = Complex64::new(0.0, 0.0);
    // left lattice tail: Σ_{j≥1} (e^{−ωτ}−1) τ^{−s} at τ = e^{u0 − jh}, expanded in powers of ωτ
    let mut coef = Complex64::new(1.0, 0.0);
    for p in 1..40 {
        coef *= -omega / p as f64;
        let pf = p as f64 - s;
        let r = (-pf * h).exp();
        let term = coef * (pf * u0).exp() * r / (1.0 - r);
        sum += term;
        if term.norm() < 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    let mut j = 0usize;
    loop {
        let u = u0 + j as f64 * h;
        let tau = u.exp();
        if j >= quad.nodes && lambda * tau > 60.0 {
            break;
        }
        if j > quad.nodes * 64 {
            return Err(Error::NotConverged(vec![sum.norm()]));
        }
        sum += semigroup_minus_one(lambda, sigma, tau) * (-s * u).exp();
        j += 1;
    }
    // right lattice tail where the semigroup has decayed: Σ −τ^{−s}
    let u_end = u0 + j as f64 * h;
    sum -= Complex64::new((-s * u_end).exp() / (1.0 - (-s * h).exp()), 0.0);
    Ok(sum * h * (-s / gamma(1.0 - s)) * Complex64::from_polar(1.0, s * psi))
}

/// `H^s u` through the Balakrishnan quadrature.
pub fn balakrishnan_apply(
    u: &SpaceTimeField,
    basis: &EigenBasis,
    s: f64,
    quad: &BalakrishnanQuad,
) -> Result<SpaceTimeField> {
    let nt = u.axis.nodes;
    let mut table = Vec::with_capacity(basis.len() * nt);
    for &lam in &basis.values {
        for m in 0..nt {
            table.push(balakrishnan_multiplier(lam, u.axis.sigma(m), s, quad)?);
        }
    }
    fractional::apply_indexed(u, basis, |k, m| table[k * nt + m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fractional::fractional_power;

    #[test]
    fn symbol_matches_branch_power() {
        let q = BalakrishnanQuad::default();
        for s in [0.3, 0.5, 0.8] {
            for (l, sg) in [(1.0, 0.0), (0.6, 1.5), (2.0, -3.0), (25.0, 10.0)] {
                let b = balakrishnan_multiplier(l, sg, s, &q).unwrap();
                let p = fractional_power(l, sg, s, false).unwrap();
                assert!((b - p).norm() <= 1e-7 * p.norm(), "s={s} λ={l} σ={sg}: {b} vs {p}");
            }
        }
    }

    #[test]
    fn time_constant_mode_gives_real_power() {
        let q = BalakrishnanQuad::default();
        let b = balakrishnan_multiplier(2.5, 0.0, 0.4, &q).unwrap();
        assert!((b.re - 2.5f64.powf(0.4)).abs() < 1e-8 && b.im.abs() < 1e-14);
    }

    #[test]
    fn bad_range_rejected() {
        let q = BalakrishnanQuad { nodes: 400, tau_min: 0.0, tau_max: 1.0 };
        assert!(balakrishnan_multiplier(1.0, 0.0, 0.5, &q).is_err());
    }
}
