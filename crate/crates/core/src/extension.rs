//! Extension of space-time fields to `z > 0` and the weighted Neumann trace.
//!
//! With `ω = λ + iσ` and `β = ωz²/4` the extension multiplier is `J(s, β)/Γ(s)` where
//! `J(ν, β) = ∫₀^∞ p^{ν−1} e^{−p−β/p} dp` (the τ-integral after `τ = z²/4p`).
//! Differentiating under the integral gives `z^a ∂_z m = −ω z^{2−2s} J(s−1, β) / (2Γ(s))`.

use num_complex::Complex64;

use crate::fractional::{from_spectral, to_spectral};
use crate::quadrature::{exp_sinh, tanh_sinh};
use crate::spacetime::SpaceTimeField;
use crate::special::{gamma, regular_i_neg_scaled};
use crate::spectral::{heat_kernel, EigenBasis};
use crate::{Error, Result};

const J_TOL: f64 = 1e-10;
const J_CAP: usize = 1 << 16;

fn check_order(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Domain(format!("fractional order must lie in (0, 1), got {s}")));
    }
    Ok(())
}

/// `2^{−a} Γ(s)/Γ(1−s)` with `a = 1 − 2s`.
pub fn neumann_constant(s: f64) -> f64 {
    2f64.powf(2.0 * s - 1.0) * gamma(s) / gamma(1.0 - s)
}

/// `J(ν, β)` for `Re β > 0` (or `β = 0`, `ν > 0`).
///
/// The ray of integration is rotated to `arg p = arg(β)/2`, which balances the two
/// exponentials so both decay at rate `cos(arg β / 2)`; the integral is then a
/// trapezoid sum in `u = log r`, halved until successive sums agree to `1e-10`.
pub fn j_integral(nu: f64, beta: Complex64) -> Result<Complex64> {
    if beta == Complex64::new(0.0, 0.0) {
        if nu > 0.0 {
            return Ok(Complex64::new(gamma(nu), 0.0));
        }
        return Err(Error::Domain(format!("J({nu}, 0) diverges")));
    }
    if !(beta.re > 0.0) {
        return Err(Error::Domain(format!("J integral needs Re β > 0, got β = {beta}")));
    }
    let psi = 0.5 * beta.arg();
    let c = psi.cos();
    let rot = Complex64::from_polar(1.0, psi);
    let brot = Complex64::from_polar(beta.norm(), beta.arg() - psi);
    let b = beta.norm();
    // real part of the exponent: νu − c e^u − c b e^{−u}, concave in u
    let phi = |u: f64| nu * u - c * u.exp() - c * b * (-u).exp();
    // stable root of c p² − ν p − c b = 0; the textbook form cancels when ν < 0 and b is tiny
    let disc = (nu * nu + 4.0 * c * c * b).sqrt();
    let pstar = if nu >= 0.0 { (nu + disc) / (2.0 * c) } else { 2.0 * c * b / (disc - nu) };
    let ustar = pstar.ln();
    let top = phi(ustar);
    let reach = |dir: f64| {
        let mut d = 1.0;
        while phi(ustar + dir * d) > top - 50.0 {
            d *= 1.5;
        }
        ustar + dir * d
    };
    let (lo, hi) = (reach(-1.0), reach(1.0));
    let f = |u: f64| -> Complex64 {
        let r = u.exp();
        let e = Complex64::new(nu * u, 0.0) - rot * r - brot / r;
        e.exp()
    };
    let mut n = 64usize;
    let mut h = (hi - lo) / n as f64;
    let mut sum = (f(lo) + f(hi)) * 0.5;
    for j in 1..n {
        sum += f(lo + j as f64 * h);
    }
    let mut value = sum * h;
    loop {
        if n >= J_CAP {
            return Err(Error::NotConverged(vec![nu, beta.re, beta.im]));
        }
        for j in 0..n {
            sum += f(lo + (j as f64 + 0.5) * h);
        }
        n *= 2;
        h *= 0.5;
        let next = sum * h;
        let change = (next - value).norm();
        value = next;
        if change <= J_TOL * value.norm() {
            break;
        }
    }
    Ok(value * Complex64::from_polar(1.0, nu * psi))
}

/// `J(ν, β)` on the unrotated real ray by exp-sinh quadrature, used as a cross-check.
pub fn j_integral_de(nu: f64, beta: Complex64) -> Complex64 {
    let f = |p: f64| -> Complex64 {
        let e = Complex64::new((nu - 1.0) * p.ln() - p, 0.0) - beta / p;
        e.exp()
    };
    let re = exp_sinh(|p| f(p).re, 1e-13).value;
    let im = exp_sinh(|p| f(p).im, 1e-13).value;
    Complex64::new(re, im)
}

fn check_args(lambda: f64, z: f64, s: f64) -> Result<()> {
    check_order(s)?;
    if !(z > 0.0) {
        return Err(Error::Domain(format!("extension level must be positive, got {z}")));
    }
    if lambda < 0.0 {
        return Err(Error::Domain(format!("spectral parameter must be nonnegative, got {lambda}")));
    }
    Ok(())
}

/// Coefficient of `U(·, z)` on the mode `(λ, σ)`; tends to 1 as `z → 0⁺`.
pub fn extension_multiplier(lambda: f64, sigma: f64, z: f64, s: f64) -> Result<Complex64> {
    check_args(lambda, z, s)?;
    if lambda == 0.0 && sigma == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let beta = Complex64::new(lambda, sigma) * (0.25 * z * z);
    Ok(j_integral(s, beta)? / gamma(s))
}

/// `∂_z m(λ, σ, z)`.
pub fn extension_multiplier_dz(lambda: f64, sigma: f64, z: f64, s: f64) -> Result<Complex64> {
    check_args(lambda, z, s)?;
    if lambda == 0.0 && sigma == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let omega = Complex64::new(lambda, sigma);
    let beta = omega * (0.25 * z * z);
    Ok(-omega * (0.5 * z / gamma(s)) * j_integral(s - 1.0, beta)?)
}

/// Multiplier of the weighted Neumann trace `−c_s^N z^a ∂_z U`, which tends to `(λ+iσ)^s`.
pub fn neumann_multiplier(lambda: f64, sigma: f64, z: f64, s: f64) -> Result<Complex64> {
    check_args(lambda, z, s)?;
    if lambda == 0.0 && sigma == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let omega = Complex64::new(lambda, sigma);
    let beta = omega * (0.25 * z * z);
    let scale = neumann_constant(s) * z.powf(2.0 - 2.0 * s) / (2.0 * gamma(s));
    Ok(omega * scale * j_integral(s - 1.0, beta)?)
}

/// `U(x, t, z)` sampled at the listed levels.
#[derive(Debug, Clone)]
pub struct ExtensionField {
    pub s: f64,
    pub a: f64,
    pub z_levels: Vec<f64>,
    pub levels: Vec<SpaceTimeField>,
}

impl ExtensionField {
    pub fn neumann_constant(&self) -> f64 {
        neumann_constant(self.s)
    }
}

fn per_level(
    u: &SpaceTimeField,
    basis: &EigenBasis,
    mult: impl Fn(f64, f64) -> Result<Complex64>,
) -> Result<SpaceTimeField> {
    let mut c = to_spectral(u, basis)?;
    let nt = c.axis.nodes;
    for k in 0..c.n_modes {
        for m in 0..nt {
            let v = &mut c.data[k * nt + m];
            if *v != Complex64::new(0.0, 0.0) {
                *v *= mult(basis.values[k], c.axis.sigma(m))?;
            }
        }
    }
    from_spectral(&c, basis, u)
}

/// Extends `u` to each level in `z_levels` (positive, strictly increasing).
pub fn extend(u: &SpaceTimeField, basis: &EigenBasis, z_levels: &[f64], s: f64) -> Result<ExtensionField> {
    check_order(s)?;
    if z_levels.is_empty() {
        return Err(Error::Domain("no extension levels given".into()));
    }
    if z_levels[0] <= 0.0 || z_levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("extension levels must be positive and strictly increasing".into()));
    }
    let mut levels = Vec::with_capacity(z_levels.len());
    for &z in z_levels {
        levels.push(per_level(u, basis, |l, sg| extension_multiplier(l, sg, z, s))?);
    }
    Ok(ExtensionField { s, a: 1.0 - 2.0 * s, z_levels: z_levels.to_vec(), levels })
}

/// `−c_s^N z^a ∂_z U(·, z)`; approaches `H^s u` as `z → 0⁺`.
pub fn neumann_trace(u: &SpaceTimeField, basis: &EigenBasis, z: f64, s: f64) -> Result<SpaceTimeField> {
    check_order(s)?;
    if !(z > 0.0) {
        return Err(Error::Domain(format!("extension level must be positive, got {z}")));
    }
    per_level(u, basis, |l, sg| neumann_multiplier(l, sg, z, s))
}

/// `∫₀^M z^a (‖U‖² + ‖A^{1/2}∇_x U‖² + ‖∂_z U‖²) dz` summed spectrally. Modes whose
/// weight is below `1e-14` of the largest are skipped.
pub fn weighted_energy(u: &SpaceTimeField, basis: &EigenBasis, s: f64, z_max: f64) -> Result<f64> {
    check_order(s)?;
    if !(z_max > 0.0) {
        return Err(Error::Domain("energy height must be positive".into()));
    }
    let a = 1.0 - 2.0 * s;
    let c = to_spectral(u, basis)?;
    let nt = c.axis.nodes;
    let top = c.data.iter().fold(0.0f64, |m, v| m.max(v.norm_sqr()));
    let mut total = 0.0;
    for k in 0..c.n_modes {
        let lam = basis.values[k];
        for mi in 0..nt {
            let w = c.data[k * nt + mi].norm_sqr();
            if w == 0.0 || w < 1e-14 * top {
                continue;
            }
            let sg = c.axis.sigma(mi);
            let fail = std::cell::RefCell::new(None);
            let r = tanh_sinh(
                |z, _, _| match (extension_multiplier(lam, sg, z, s), extension_multiplier_dz(lam, sg, z, s)) {
                    (Ok(m), Ok(d)) => z.powf(a) * ((1.0 + lam) * m.norm_sqr() + d.norm_sqr()),
                    (Err(e), _) | (_, Err(e)) => {
                        fail.borrow_mut().get_or_insert(e);
                        0.0
                    }
                },
                0.0,
                z_max,
                1e-8,
            );
            if let Some(e) = fail.into_inner() {
                return Err(e);
            }
            total += w * r.value;
        }
    }
    Ok(total * c.weight())
}

/// Fundamental solution of `∂²_x + (a/x)∂_x` on the half-line with weight `x^a`.
///
/// The product `w^s I_{−s}(w) e^{−(x²+y²)/4t}` is evaluated as
/// `[e^{−w} w^s I_{−s}(w)]·e^{−(x−y)²/4t}` so that nothing overflows.
pub fn bessel_heat_kernel_pa(x: f64, y: f64, t: f64, a: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    if !(a > -1.0 && a < 1.0) {
        return Err(Error::Domain(format!("weight exponent must lie in (−1, 1), got {a}")));
    }
    if x < 0.0 || y < 0.0 {
        return Err(Error::Domain("half-line arguments must be nonnegative".into()));
    }
    let s = 0.5 * (1.0 - a);
    let w = x * y / (2.0 * t);
    let g = (-(x - y) * (x - y) / (4.0 * t)).exp();
    Ok((2.0 * t).powf(-0.5 * (1.0 + a)) * regular_i_neg_scaled(s, w) * g)
}

/// `𝒢(Y, X, t) = p(y, x, t)·p_a(x₊, y₊, t)` with the discrete spatial heat kernel.
pub fn fundamental_solution_g(
    basis: &EigenBasis,
    y: (usize, f64),
    x: (usize, f64),
    t: f64,
    a: f64,
) -> Result<f64> {
    Ok(heat_kernel(basis, y.0, x.0, t)? * bessel_heat_kernel_pa(x.1, y.1, t, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use crate::elliptic::{assemble_elliptic, Boundary};
    use crate::fractional::{apply_hs, hs_norm, single_mode};
    use crate::grid::{build_grid, desk_1d};
    use crate::spacetime::TimeAxis;
    use crate::special::{bessel_eval, BesselKind};
    use crate::spectral::eigendecompose;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn k_closed(s: f64, lam: f64, z: f64) -> f64 {
        let r = z * lam.sqrt();
        2.0 / gamma(s) * (0.5 * r).powf(s) * bessel_eval(BesselKind::K, s, r).unwrap()
    }

    #[test]
    fn real_frequency_matches_bessel_form() {
        for s in [0.3, 0.5, 0.75] {
            for (lam, z) in [(0.2, 0.5), (1.0, 1.0), (40.0, 0.3), (3.0, 1e-3)] {
                let m = extension_multiplier(lam, 0.0, z, s).unwrap();
                assert!((m.re - k_closed(s, lam, z)).abs() < 1e-8 && m.im.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn half_order_is_harmonic_extension() {
        for (lam, z) in [(0.3, 0.7), (2.0, 2.0), (9.0, 0.1)] {
            let m = extension_multiplier(lam, 0.0, z, 0.5).unwrap();
            assert!((m.re - (-z * f64::sqrt(lam)).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn two_quadratures_agree() {
        let beta = Complex64::new(1.0, 1.0) * 0.25;
        let a = j_integral(0.5, beta).unwrap();
        let b = j_integral_de(0.5, beta);
        assert!((a - b).norm() < 1e-9 * a.norm(), "{a} {b}");
        let a = j_integral(-0.4, Complex64::new(0.3, 2.0)).unwrap();
        let b = j_integral_de(-0.4, Complex64::new(0.3, 2.0));
        assert!((a - b).norm() < 1e-9 * a.norm(), "{a} {b}");
    }

    #[test]
    fn boundary_attainment() {
        for s in [0.3, 0.5, 0.7] {
            let m = extension_multiplier(1.0, 0.5, 1e-6, s).unwrap();
            let lead = (0.5e-6f64).powf(2.0 * s) * gamma(1.0 - s) / gamma(1.0 + s) * 1.2;
            assert!((m - 1.0).norm() <= lead.max(1e-10));
        }
        assert!(extension_multiplier(1.0, 0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn neumann_multiplier_limit_and_closed_form() {
        // σ = 0: −c z^a ∂_z m = λ^s · 2(r/2)^{1−s} K_{1−s}(r)/Γ(1−s), r = z√λ
        for s in [0.3, 0.6] {
            for (lam, z) in [(0.5, 0.2), (4.0, 1.0)] {
                let r = z * f64::sqrt(lam);
                let expect = lam.powf(s) * 2.0 * (0.5 * r).powf(1.0 - s) * bessel_eval(BesselKind::K, 1.0 - s, r).unwrap()
                    / gamma(1.0 - s);
                let got = neumann_multiplier(lam, 0.0, z, s).unwrap();
                assert!((got.re - expect).abs() < 1e-8 * expect);
            }
            let w = Complex64::new(2.0, 3.0);
            let lim = neumann_multiplier(2.0, 3.0, 1e-7, s).unwrap();
            assert!((lim - w.powf(s)).norm() < 1e-3 * w.norm().powf(s));
        }
    }

    #[test]
    fn single_mode_trace() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let op = assemble_elliptic(&g, &CoefficientField::identity(), Boundary::Dirichlet);
        let b = eigendecompose(&op, &g, "t", 4096).unwrap();
        let ax = TimeAxis::new(16, 1.0, 2.0).unwrap();
        let like = SpaceTimeField::zeros(&g, ax);
        let u = single_mode(&b, &like, 0, 0);
        let s = 0.3;
        let tr = neumann_trace(&u, &b, 2f64.powi(-10), s).unwrap();
        let expect = u.scaled(Complex64::new(b.values[0].powf(s), 0.0));
        assert!(tr.sub(&expect).max_abs() <= 1e-4 * expect.max_abs());
    }

    #[test]
    fn zero_field_and_errors() {
        let g = build_grid(&desk_1d(15)).unwrap();
        let op = assemble_elliptic(&g, &CoefficientField::identity(), Boundary::Dirichlet);
        let b = eigendecompose(&op, &g, "t", 4096).unwrap();
        let ax = TimeAxis::new(8, 1.0, 2.0).unwrap();
        let u = SpaceTimeField::zeros(&g, ax);
        assert_eq!(extend(&u, &b, &[0.5], 0.4).unwrap().levels[0].max_abs(), 0.0);
        assert_eq!(neumann_trace(&u, &b, 0.5, 0.4).unwrap().max_abs(), 0.0);
        assert!(extend(&u, &b, &[], 0.4).is_err());
        assert!(neumann_trace(&u, &b, 0.0, 0.4).is_err());
    }

    #[test]
    fn extension_of_smooth_field_converges() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let op = assemble_elliptic(&g, &CoefficientField::identity(), Boundary::Dirichlet);
        let b = eigendecompose(&op, &g, "t", 4096).unwrap();
        let ax = TimeAxis::new(16, 4.0, 2.0).unwrap();
        let u = SpaceTimeField::from_real(&g, ax, |x, t| (PI * x[0] / 8.0).cos() * (1.0 + 0.3 * (PI * t / 8.0).cos()));
        let s = 0.5;
        let ext = extend(&u, &b, &[1e-6], s).unwrap();
        let err = hs_norm(&ext.levels[0].sub(&u), &b, s).unwrap() / hs_norm(&u, &b, s).unwrap();
        assert!(err <= 1e-6, "{err}");
        let hs = apply_hs(&u, &b, s, false).unwrap();
        let tr = neumann_trace(&u, &b, 2f64.powi(-10), s).unwrap();
        let rel = hs_norm(&tr.sub(&hs), &b, -s).unwrap() / hs_norm(&hs, &b, -s).unwrap();
        assert!(rel <= 1e-2, "{rel}");
    }

    #[test]
    fn pa_reduces_at_zero_weight() {
        for (x, y, t) in [(0.5, 0.8, 0.1), (0.0, 1.0, 1.0), (2.0, 2.5, 0.3), (30.0, 31.0, 0.05)] {
            let p = bessel_heat_kernel_pa(x, y, t, 0.0).unwrap();
            let e = ((-(x - y) * (x - y) / (4.0 * t)).exp() + (-(x + y) * (x + y) / (4.0 * t)).exp())
                / (4.0 * PI * t).sqrt();
            assert!((p - e).abs() <= 1e-10 * e.max(1e-300));
        }
    }

    #[test]
    fn pa_unit_mass() {
        for a in [-0.4, 0.0, 0.4] {
            for (x, t) in [(0.5, 0.1), (1.0, 1.0)] {
                let m = tanh_sinh(|_, y, _| y.powf(a) * bessel_heat_kernel_pa(x, y, t, a).unwrap(), 0.0, 40.0, 1e-12);
                assert!((m.value - 1.0).abs() <= 1e-6, "a={a} x={x} t={t}: {}", m.value);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn multiplier_is_contraction(lam in 0.01f64..100.0, sg in -50.0f64..50.0, z in 1e-3f64..3.0, s in 0.1f64..0.9) {
            let m = extension_multiplier(lam, sg, z, s).unwrap();
            prop_assert!(m.norm() <= 1.0 + 1e-10);
        }

        #[test]
        fn pa_symmetric(x in 0.0f64..5.0, y in 0.01f64..5.0, t in 0.01f64..3.0, a in -0.9f64..0.9) {
            let p = bessel_heat_kernel_pa(x, y, t, a).unwrap();
            let q = bessel_heat_kernel_pa(y, x, t, a).unwrap();
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1e-300));
        }
    }
}
