//! Symmetric coefficient fields `A(x)` with declared ellipticity and Lipschitz bounds.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::Grid;
use crate::{Error, Result};

/// A symmetric 2×2 sample; in 1D only `[0][0]` is used.
pub type Sym2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Preset {
    Identity,
    /// `(1 + amplitude·sin(frequency·x₁))·I`.
    Sinusoidal { amplitude: f64, frequency: f64 },
    /// Scalar ramp from `left` to `right` across `(−width, width)` on the first axis.
    Piecewise { left: f64, right: f64, width: f64 },
}

type CustomFn = Arc<dyn Fn([f64; 2]) -> Sym2 + Send + Sync>;

#[derive(Clone)]
enum Source {
    Preset(Preset),
    Custom { name: String, f: CustomFn },
}

/// Coefficient field with its declared constants `Λ` and `K`.
#[derive(Clone)]
pub struct CoefficientField {
    source: Source,
    /// Declared ellipticity constant `Λ`.
    pub lambda: f64,
    /// Declared Lipschitz constant `K`.
    pub lipschitz: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.source {
            Source::Preset(p) => format!("{p:?}"),
            Source::Custom { name, .. } => format!("Custom({name})"),
        };
        f.debug_struct("CoefficientField")
            .field("source", &name)
            .field("lambda", &self.lambda)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl CoefficientField {
    pub fn identity() -> Self {
        Self::from_preset(Preset::Identity, 1.0 + 1e-12, 0.0)
    }

    pub fn from_preset(preset: Preset, lambda: f64, lipschitz: f64) -> Self {
        CoefficientField { source: Source::Preset(preset), lambda, lipschitz }
    }

    /// Preset with declared constants derived from its closed form.
    pub fn preset_with_bounds(preset: Preset) -> Self {
        let (lambda, lip) = match &preset {
            Preset::Identity => (1.0 + 1e-12, 0.0),
            Preset::Sinusoidal { amplitude, frequency } => {
                let a = amplitude.abs();
                ((1.0 + a).max(1.0 / (1.0 - a)), a * frequency.abs())
            }
            Preset::Piecewise { left, right, width } => {
                let lo = left.min(*right);
                let hi = left.max(*right);
                (hi.max(1.0 / lo).max(1.0 + 1e-12), (right - left).abs() / (2.0 * width))
            }
        };
        // small slack so that sampled values sitting exactly on the bound pass
        Self::from_preset(preset, lambda * (1.0 + 1e-12), lip * (1.0 + 1e-9) + 1e-14)
    }

    pub fn custom(
        name: &str,
        lambda: f64,
        lipschitz: f64,
        f: impl Fn([f64; 2]) -> Sym2 + Send + Sync + 'static,
    ) -> Self {
        CoefficientField {
            source: Source::Custom { name: name.to_string(), f: Arc::new(f) },
            lambda,
            lipschitz,
        }
    }

    pub fn preset(&self) -> Option<&Preset> {
        match &self.source {
            Source::Preset(p) => Some(p),
            Source::Custom { .. } => None,
        }
    }

    /// Evaluates `A(x)`.
    pub fn eval(&self, x: [f64; 2]) -> Sym2 {
        match &self.source {
            Source::Preset(Preset::Identity) => [[1.0, 0.0], [0.0, 1.0]],
            Source::Preset(Preset::Sinusoidal { amplitude, frequency }) => {
                let c = 1.0 + amplitude * (frequency * x[0]).sin();
                [[c, 0.0], [0.0, c]]
            }
            Source::Preset(Preset::Piecewise { left, right, width }) => {
                let r = ((x[0] + width) / (2.0 * width)).clamp(0.0, 1.0);
                let c = left + (right - left) * r;
                [[c, 0.0], [0.0, c]]
            }
            Source::Custom { f, .. } => f(x),
        }
    }

    /// Hash of the sampled field on the cell midpoints of `grid`.
    pub fn hash_on(&self, grid: &Grid) -> String {
        let mut hasher = Sha256::new();
        for x in cell_midpoints(grid) {
            let a = self.eval(x);
            for v in [a[0][0], a[0][1], a[1][0], a[1][1]] {
                hasher.update(v.to_le_bytes());
            }
        }
        // face samples differ from cell centres, include them too
        for (x, _) in face_midpoints(grid) {
            let a = self.eval(x);
            hasher.update(a[0][0].to_le_bytes());
            hasher.update(a[1][1].to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Cell midpoints: `n+1` per axis, including the half-cells next to the box wall.
pub fn cell_midpoints(grid: &Grid) -> Vec<[f64; 2]> {
    let m = grid.n + 1;
    let c = |i: usize| -grid.half_width + (i as f64 + 0.5) * grid.h;
    if grid.dim == 1 {
        (0..m).map(|i| [c(i), 0.0]).collect()
    } else {
        let mut out = Vec::with_capacity(m * m);
        for j in 0..m {
            for i in 0..m {
                out.push([c(i), c(j)]);
            }
        }
        out
    }
}

/// Face midpoints with the axis normal to the face.
pub fn face_midpoints(grid: &Grid) -> Vec<([f64; 2], usize)> {
    let c = |i: usize| -grid.half_width + (i as f64 + 0.5) * grid.h;
    if grid.dim == 1 {
        (0..=grid.n).map(|i| ([c(i), 0.0], 0)).collect()
    } else {
        let mut out = Vec::new();
        for j in 0..grid.n {
            for i in 0..=grid.n {
                out.push(([c(i), grid.axis_coord(j)], 0));
            }
        }
        for j in 0..=grid.n {
            for i in 0..grid.n {
                out.push(([grid.axis_coord(i), c(j)], 1));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientReport {
    pub lambda_observed: f64,
    pub lipschitz_observed: f64,
    pub pass: bool,
}

fn sym_eigs(a: &Sym2, dim: usize) -> (f64, f64) {
    if dim == 1 {
        return (a[0][0], a[0][0]);
    }
    let tr = 0.5 * (a[0][0] + a[1][1]);
    let d = (0.25 * (a[0][0] - a[1][1]).powi(2) + a[0][1] * a[0][1]).sqrt();
    (tr - d, tr + d)
}

fn diff_norm(a: &Sym2, b: &Sym2, dim: usize) -> f64 {
    let d = [[a[0][0] - b[0][0], a[0][1] - b[0][1]], [a[1][0] - b[1][0], a[1][1] - b[1][1]]];
    let (lo, hi) = sym_eigs(&d, dim);
    lo.abs().max(hi.abs())
}

/// Observed ellipticity and Lipschitz constants on all cell midpoints and adjacent
/// cell pairs.
pub fn validate_coefficients(a: &CoefficientField, grid: &Grid) -> Result<CoefficientReport> {
    let pts = cell_midpoints(grid);
    let samples: Vec<Sym2> = pts.iter().map(|&x| a.eval(x)).collect();
    let mut lam: f64 = 1.0;
    for (x, s) in pts.iter().zip(&samples) {
        let loc = || format!("({:.6}, {:.6})", x[0], x[1]);
        if grid.dim == 2 {
            let scale = s[0][1].abs().max(s[1][0].abs()).max(1.0);
            if (s[0][1] - s[1][0]).abs() > 1e-14 * scale {
                return Err(Error::Coefficient { location: loc(), reason: "non-symmetric sample".into() });
            }
        }
        let (lo, hi) = sym_eigs(s, grid.dim);
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(Error::Coefficient {
                location: loc(),
                reason: format!("not positive definite (smallest eigenvalue {lo:.3e})"),
            });
        }
        lam = lam.max(hi).max(1.0 / lo);
    }
    let m = grid.n + 1;
    let mut lip: f64 = 0.0;
    if grid.dim == 1 {
        for i in 0..m - 1 {
            lip = lip.max(diff_norm(&samples[i], &samples[i + 1], 1) / grid.h);
        }
    } else {
        for j in 0..m {
            for i in 0..m {
                let k = i + m * j;
                if i + 1 < m {
                    lip = lip.max(diff_norm(&samples[k], &samples[k + 1], 2) / grid.h);
                }
                if j + 1 < m {
                    lip = lip.max(diff_norm(&samples[k], &samples[k + m], 2) / grid.h);
                }
            }
        }
    }
    let pass = lam <= a.lambda && lip <= a.lipschitz;
    Ok(CoefficientReport { lambda_observed: lam, lipschitz_observed: lip, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, desk_1d};

    #[test]
    fn identity_constants() {
        let g = build_grid(&desk_1d(63)).unwrap();
        let r = validate_coefficients(&CoefficientField::identity(), &g).unwrap();
        assert_eq!(r.lambda_observed, 1.0);
        assert_eq!(r.lipschitz_observed, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn sinusoidal_constants() {
        let g = build_grid(&desk_1d(63)).unwrap();
        let a = CoefficientField::from_preset(Preset::Sinusoidal { amplitude: 0.5, frequency: 1.0 }, 2.0, 0.5);
        let r = validate_coefficients(&a, &g).unwrap();
        assert!(r.lambda_observed <= 2.0);
        // direct evaluation over all adjacent pairs: the difference quotient is an
        // average of 0.5·cos, bounded by 0.5
        let pts = cell_midpoints(&g);
        let mut k: f64 = 0.0;
        for w in pts.windows(2) {
            let d = 0.5 * ((w[1][0]).sin() - (w[0][0]).sin()).abs() / g.h;
            k = k.max(d);
        }
        assert!((r.lipschitz_observed - k).abs() < 1e-14);
        assert!(r.lipschitz_observed <= 0.5);
        assert!(r.pass);
    }

    #[test]
    fn negative_eigenvalue_is_hard_error() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let a = CoefficientField::custom("dip", 2.0, 1.0, |x| {
            let c = if (x[0] - 0.125).abs() < 1e-9 { -1.0 } else { 1.0 };
            [[c, 0.0], [0.0, c]]
        });
        let err = validate_coefficients(&a, &g).unwrap_err().to_string();
        assert!(err.contains("not positive definite"), "{err}");
    }

    #[test]
    fn declared_bound_violation_fails_report() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let a = CoefficientField::from_preset(Preset::Sinusoidal { amplitude: 0.5, frequency: 1.0 }, 1.2, 0.5);
        let r = validate_coefficients(&a, &g).unwrap();
        assert!(!r.pass);
    }
}
