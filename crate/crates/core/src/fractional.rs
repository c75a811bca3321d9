//! Spectral calculus for `H^s = (∂t − div(A∇))^s` on the padded periodic window.
//!
//! Coefficients are `ĉ_{k,m} = h^d Σ_x v_k(x) · Δt Σ_n u(x, t_n) e^{−2πi mn/N}`; the
//! multiplier of slot `(k, m)` is `(λ_k + iσ_m)^s`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::spacetime::{SpaceTimeField, TimeAxis};
use crate::spectral::EigenBasis;
use crate::{Error, Result};

/// `ĉ_{k,m}` stored as `data[k·N + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoefficients {
    pub n_modes: usize,
    pub axis: TimeAxis,
    pub data: Vec<Complex64>,
}

impl SpectralCoefficients {
    pub fn get(&self, k: usize, m: usize) -> Complex64 {
        self.data[k * self.axis.nodes + m]
    }

    /// Transform weight `1/(2T_pad)` turning `Σ|ĉ|²` into the L² norm squared.
    pub fn weight(&self) -> f64 {
        1.0 / (2.0 * self.axis.t_pad())
    }
}

fn check(u: &SpaceTimeField, basis: &EigenBasis) -> Result<()> {
    if u.n_space != basis.n_nodes() {
        return Err(Error::Mismatch(format!(
            "field has {} nodes but the basis has {}",
            u.n_space,
            basis.n_nodes()
        )));
    }
    if (u.cell - basis.cell).abs() > 1e-14 * basis.cell {
        return Err(Error::Mismatch("field and basis use different grid spacings".into()));
    }
    Ok(())
}

fn time_fft(u: &SpaceTimeField, inverse: bool) -> Vec<Complex64> {
    let n = u.axis.nodes;
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let mut data = u.data.clone();
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    data
}

fn split(rows: usize, cols: usize, data: &[Complex64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let re = DMatrix::from_fn(rows, cols, |i, m| data[i * cols + m].re);
    let im = DMatrix::from_fn(rows, cols, |i, m| data[i * cols + m].im);
    (re, im)
}

fn join(re: &DMatrix<f64>, im: &DMatrix<f64>, scale: f64) -> Vec<Complex64> {
    let (rows, cols) = re.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for m in 0..cols {
            out.push(Complex64::new(re[(i, m)], im[(i, m)]) * scale);
        }
    }
    out
}

/// Fourier transform in time composed with the eigen-expansion in space.
pub fn to_spectral(u: &SpaceTimeField, basis: &EigenBasis) -> Result<SpectralCoefficients> {
    check(u, basis)?;
    let nt = u.axis.nodes;
    let hat = time_fft(u, false);
    let (re, im) = split(u.n_space, nt, &hat);
    let cre = basis.vectors.tr_mul(&re);
    let cim = basis.vectors.tr_mul(&im);
    Ok(SpectralCoefficients {
        n_modes: basis.len(),
        axis: u.axis,
        data: join(&cre, &cim, basis.cell * u.axis.dt()),
    })
}

/// Exact inverse of [`to_spectral`]; `like` supplies the grid metadata.
pub fn from_spectral(c: &SpectralCoefficients, basis: &EigenBasis, like: &SpaceTimeField) -> Result<SpaceTimeField> {
    check(like, basis)?;
    if c.n_modes != basis.len() || c.axis != like.axis {
        return Err(Error::Mismatch("coefficients do not match the basis or time window".into()));
    }
    let nt = c.axis.nodes;
    let (cre, cim) = split(c.n_modes, nt, &c.data);
    let re = &basis.vectors * cre;
    let im = &basis.vectors * cim;
    let mut out = like.zeros_like();
    out.data = join(&re, &im, 1.0);
    let inv = FftPlanner::new().plan_fft_inverse(nt);
    let scale = 1.0 / (nt as f64 * c.axis.dt());
    for row in out.data.chunks_mut(nt) {
        inv.process(row);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Principal branch `|λ+iσ|^s e^{isθ}`, `θ = atan2(σ, λ)`; `adjoint` uses `λ − iσ`.
pub fn fractional_power(lambda: f64, sigma: f64, s: f64, adjoint: bool) -> Result<Complex64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::Domain(format!("spectral parameter must be nonnegative, got {lambda}")));
    }
    if !(0.0..=2.0).contains(&s) {
        return Err(Error::Domain(format!("exponent {s} outside [0, 2]")));
    }
    Ok(power_unchecked(lambda, if adjoint { -sigma } else { sigma }, s))
}

pub(crate) fn power_unchecked(lambda: f64, sigma: f64, s: f64) -> Complex64 {
    if s == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    if lambda == 0.0 && sigma == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let r = lambda.hypot(sigma).powf(s);
    let th = s * sigma.atan2(lambda);
    Complex64::new(r * th.cos(), r * th.sin())
}

/// Multiplies every coefficient by `mult(λ_k, σ_m)` and transforms back.
pub fn apply_multiplier(
    u: &SpaceTimeField,
    basis: &EigenBasis,
    mult: impl Fn(f64, f64) -> Complex64,
) -> Result<SpaceTimeField> {
    let axis = u.axis;
    apply_indexed(u, basis, |k, m| mult(basis.values[k], axis.sigma(m)))
}

/// Multiplies coefficient `(k, m)` by `mult(k, m)` and transforms back.
pub fn apply_indexed(
    u: &SpaceTimeField,
    basis: &EigenBasis,
    mult: impl Fn(usize, usize) -> Complex64,
) -> Result<SpaceTimeField> {
    let mut c = to_spectral(u, basis)?;
    let nt = c.axis.nodes;
    for k in 0..c.n_modes {
        for m in 0..nt {
            c.data[k * nt + m] *= mult(k, m);
        }
    }
    from_spectral(&c, basis, u)
}

/// `H^s u` (or `H_*^s u` with `adjoint`), `0 < s ≤ 1`.
pub fn apply_hs(u: &SpaceTimeField, basis: &EigenBasis, s: f64, adjoint: bool) -> Result<SpaceTimeField> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Domain(format!("fractional order must lie in (0, 1], got {s}")));
    }
    let sign = if adjoint { -1.0 } else { 1.0 };
    apply_multiplier(u, basis, |l, sg| power_unchecked(l, sign * sg, s))
}

/// `(Σ (1+|λ+iσ|²)^{r/2} |ĉ|² / (2T_pad))^{1/2}`, `|r| ≤ 2`.
pub fn hs_norm(u: &SpaceTimeField, basis: &EigenBasis, r: f64) -> Result<f64> {
    if r.abs() > 2.0 {
        return Err(Error::Domain(format!("norm order {r} outside [−2, 2]")));
    }
    let c = to_spectral(u, basis)?;
    Ok(weighted_sum(&c, basis, |l, sg| (1.0 + l * l + sg * sg).powf(r / 2.0)).sqrt())
}

/// `Σ |λ+iσ|^s |ĉ|² / (2T_pad)`, the squared homogeneous seminorm.
pub fn hs_seminorm_sq(u: &SpaceTimeField, basis: &EigenBasis, s: f64) -> Result<f64> {
    let c = to_spectral(u, basis)?;
    Ok(weighted_sum(&c, basis, |l, sg| l.hypot(sg).powf(s)))
}

fn weighted_sum(c: &SpectralCoefficients, basis: &EigenBasis, w: impl Fn(f64, f64) -> f64) -> f64 {
    let nt = c.axis.nodes;
    let mut acc = 0.0;
    for k in 0..c.n_modes {
        for m in 0..nt {
            acc += w(basis.values[k], c.axis.sigma(m)) * c.data[k * nt + m].norm_sqr();
        }
    }
    acc * c.weight()
}

/// Multiplication by the indicator of `[−T, T]`.
pub fn time_cutoff(u: &SpaceTimeField, horizon: f64) -> Result<SpaceTimeField> {
    if horizon > u.axis.t_pad() {
        return Err(Error::Domain(format!("cutoff {horizon} exceeds the padded window {}", u.axis.t_pad())));
    }
    let mut out = u.clone();
    let tol = 1e-9 * u.axis.dt();
    for n in 0..u.axis.nodes {
        if u.axis.time(n).abs() > horizon + tol {
            for i in 0..u.n_space {
                out.set(i, n, Complex64::new(0.0, 0.0));
            }
        }
    }
    Ok(out)
}

/// `u(x, −t)` on the periodic window.
pub fn reverse_time(u: &SpaceTimeField) -> SpaceTimeField {
    let mut out = u.clone();
    for i in 0..u.n_space {
        for n in 0..u.axis.nodes {
            out.set(i, u.axis.reversed(n), u.get(i, n));
        }
    }
    out
}

/// Field `v_k(x) e^{iσ_m t}` for a single slot.
pub fn single_mode(basis: &EigenBasis, like: &SpaceTimeField, k: usize, m: usize) -> SpaceTimeField {
    let mut out = like.zeros_like();
    let nt = like.axis.nodes;
    for i in 0..like.n_space {
        for n in 0..nt {
            let phase = 2.0 * PI * (m as f64) * (n as f64) / nt as f64;
            out.set(i, n, Complex64::from_polar(basis.vectors[(i, k)], phase));
        }
    }
    out
}
