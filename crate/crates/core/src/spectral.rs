//! Dense eigendecomposition of the discrete operator and the heat semigroup.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::elliptic::{Boundary, DiscreteElliptic};
use crate::grid::Grid;
use crate::{Error, Result};

pub const DEFAULT_EIGEN_CAP: usize = 4096;

/// Eigenpairs of `−div(A∇)`, orthonormal in the grid inner product `h^d Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` holds `v_k` at every node.
    pub vectors: DMatrix<f64>,
    /// Grid weight `h^d`.
    pub cell: f64,
    pub boundary: Boundary,
    /// Hash of grid and coefficients this basis belongs to.
    pub hash: String,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.vectors.nrows()
    }

    /// Coefficients `c_k = h^d Σ_x v_k(x) u(x)`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        let u = DVector::from_column_slice(u);
        (self.vectors.tr_mul(&u) * self.cell).iter().copied().collect()
    }

    /// `Σ_k c_k v_k`.
    pub fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(c);
        (&self.vectors * c).iter().copied().collect()
    }

    pub fn gram_error(&self) -> f64 {
        let g = self.vectors.tr_mul(&self.vectors) * self.cell;
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Full eigendecomposition; `hash` identifies the grid and coefficients.
pub fn eigendecompose(op: &DiscreteElliptic, grid: &Grid, hash: &str, cap: usize) -> Result<EigenBasis> {
    if op.n > cap {
        return Err(Error::SizeCap { size: op.n, cap });
    }
    if op.n != grid.len() {
        return Err(Error::Mismatch(format!("operator has {} rows, grid has {} nodes", op.n, grid.len())));
    }
    let eig = SymmetricEigen::new(op.to_dense());
    let mut order: Vec<usize> = (0..op.n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let cell = grid.cell();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = 1.0 / cell.sqrt();
    let mut values = Vec::with_capacity(op.n);
    let mut vectors = DMatrix::zeros(op.n, op.n);
    for (k, &src) in order.iter().enumerate() {
        let mut lam = eig.eigenvalues[src];
        if lam.abs() <= 1e-12 * top {
            lam = 0.0;
        }
        values.push(lam);
        let col = eig.eigenvectors.column(src);
        let peak = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let first = col.iter().find(|v| v.abs() > 1e-6 * peak).copied().unwrap_or(1.0);
        let sign = if first < 0.0 { -scale } else { scale };
        for r in 0..op.n {
            vectors[(r, k)] = col[r] * sign;
        }
    }
    Ok(EigenBasis { values, vectors, cell, boundary: op.boundary, hash: hash.to_string() })
}

/// `e^{−τL} u` through eigen-coefficients.
pub fn apply_semigroup(basis: &EigenBasis, u: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("semigroup time must be nonnegative, got {tau}")));
    }
    if u.len() != basis.n_nodes() {
        return Err(Error::Mismatch(format!("field has {} nodes, basis {}", u.len(), basis.n_nodes())));
    }
    let mut c = basis.project(u);
    for (ck, lam) in c.iter_mut().zip(&basis.values) {
        *ck *= (-lam * tau).exp();
    }
    Ok(basis.synthesize(&c))
}

/// `p(x, y, τ) = Σ_k e^{−λ_k τ} v_k(x) v_k(y)` for node indices `x`, `y`.
pub fn heat_kernel(basis: &EigenBasis, x: usize, y: usize, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("semigroup time must be nonnegative, got {tau}")));
    }
    let v = &basis.vectors;
    let mut acc = 0.0;
    for k in 0..basis.len() {
        acc += (-basis.values[k] * tau).exp() * (v[(x, k)] * v[(y, k)]);
    }
    Ok(acc)
}

/// Smallest `N₀ ≥ 1` with
/// `N₀⁻¹ τ^{−d/2} e^{−N₀|x−y|²/τ} ≤ p(x,y,τ) ≤ N₀ τ^{−d/2} e^{−|x−y|²/(N₀τ)}`
/// on every sample.
pub fn gaussian_bound_constant(basis: &EigenBasis, grid: &Grid, samples: &[(usize, usize, f64)]) -> Result<f64> {
    let mut worst: f64 = 1.0;
    for &(x, y, tau) in samples {
        let p = heat_kernel(basis, x, y, tau)?;
        let (cx, cy) = (grid.coords(x), grid.coords(y));
        let r2 = (cx[0] - cy[0]).powi(2) + (cx[1] - cy[1]).powi(2);
        let pre = tau.powf(-(grid.dim as f64) / 2.0);
        let holds = |n0: f64| {
            let upper = n0 * pre * (-r2 / (n0 * tau)).exp();
            let lower = pre * (-n0 * r2 / tau).exp() / n0;
            p <= upper && p >= lower
        };
        if p <= 0.0 {
            return Err(Error::Domain(format!("heat kernel not positive at ({x}, {y}, {tau})")));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while !holds(hi.exp()) {
            lo = hi;
            hi *= 2.0;
            if hi > 200.0 {
                return Err(Error::Domain("no finite Gaussian constant found".into()));
            }
        }
        if holds(1.0) {
            continue;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if holds(mid.exp()) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        worst = worst.max(hi.exp());
    }
    Ok(worst)
}
