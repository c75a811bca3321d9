//! Flux-form finite-difference discretization of `−div(A∇)` on the node grid.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Dirichlet,
    Neumann,
}

impl Boundary {
    pub fn tag(&self) -> &'static str {
        match self {
            Boundary::Dirichlet => "dirichlet",
            Boundary::Neumann => "neumann",
        }
    }
}

/// Sparse symmetric matrix in compressed-row form.
#[derive(Debug, Clone)]
pub struct DiscreteElliptic {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub boundary: Boundary,
}

impl DiscreteElliptic {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * u[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.row_ptr[r]..self.row_ptr[r + 1])
            .find(|&k| self.cols[k] == c)
            .map(|k| self.vals[k])
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.cols[k])] = self.vals[k];
            }
        }
        m
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                worst = worst.max((self.vals[k] - self.get(self.cols[k], r)).abs());
            }
        }
        worst
    }
}

struct Builder {
    rows: Vec<BTreeMap<usize, f64>>,
}

impl Builder {
    fn add(&mut self, r: usize, c: usize, v: f64) {
        *self.rows[r].entry(c).or_insert(0.0) += v;
    }

    /// Adds `weight·(Σ cᵢ u_{nᵢ})·(Σ dⱼ u_{mⱼ})` symmetrised into the quadratic form,
    /// skipping ghost nodes (`None`), which carry zero Dirichlet values.
    fn add_product(&mut self, weight: f64, left: &[(Option<usize>, f64)], right: &[(Option<usize>, f64)]) {
        for &(a, ca) in left {
            for &(b, cb) in right {
                if let (Some(a), Some(b)) = (a, b) {
                    let v = 0.5 * weight * ca * cb;
                    self.add(a, b, v);
                    self.add(b, a, v);
                }
            }
        }
    }

    fn finish(self, boundary: Boundary) -> DiscreteElliptic {
        let n = self.rows.len();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in self.rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        DiscreteElliptic { n, row_ptr, cols, vals, boundary }
    }
}

/// Assembles the conservative stencil from the discrete energy
/// `Σ_faces a_ii (Δu)² + Σ_cells 2 a₁₂ (Δ̄₁u)(Δ̄₂u)`, scaled by `h⁻²`.
///
/// Diagonal coefficients are sampled at face midpoints, the off-diagonal entry at
/// cell centres with cell-averaged differences. Dirichlet ghosts are zero; with Neumann
/// the wall faces and wall cells are dropped.
pub fn assemble_elliptic(grid: &Grid, a: &CoefficientField, boundary: Boundary) -> DiscreteElliptic {
    let n = grid.n;
    let total = grid.len();
    let mut b = Builder { rows: vec![BTreeMap::new(); total] };
    let scale = 1.0 / (grid.h * grid.h);
    let half = |i: isize| -grid.half_width + (i as f64 + 1.5) * grid.h;
    let node = |idx: [isize; 2]| -> Option<usize> {
        let inside = |v: isize| v >= 0 && (v as usize) < n;
        if grid.dim == 1 {
            inside(idx[0]).then(|| idx[0] as usize)
        } else {
            (inside(idx[0]) && inside(idx[1])).then(|| idx[0] as usize + n * idx[1] as usize)
        }
    };
    let neumann = boundary == Boundary::Neumann;
    if grid.dim == 1 {
        for i in -1..n as isize {
            let (l, r) = (node([i, 0]), node([i + 1, 0]));
            if neumann && (l.is_none() || r.is_none()) {
                continue;
            }
            let c = a.eval([half(i), 0.0])[0][0] * scale;
            let d = [(r, 1.0), (l, -1.0)];
            b.add_product(c, &d, &d);
        }
    } else {
        let ni = n as isize;
        for j in -1..=ni {
            for i in -1..=ni {
                // x-face between (i, j) and (i+1, j)
                if (0..ni).contains(&j) && i < ni {
                    let (l, r) = (node([i, j]), node([i + 1, j]));
                    if !(neumann && (l.is_none() || r.is_none())) {
                        let c = a.eval([half(i), grid.axis_coord(j as usize)])[0][0] * scale;
                        let d = [(r, 1.0), (l, -1.0)];
                        b.add_product(c, &d, &d);
                    }
                }
                // y-face between (i, j) and (i, j+1)
                if (0..ni).contains(&i) && j < ni {
                    let (l, r) = (node([i, j]), node([i, j + 1]));
                    if !(neumann && (l.is_none() || r.is_none())) {
                        let c = a.eval([grid.axis_coord(i as usize), half(j)])[1][1] * scale;
                        let d = [(r, 1.0), (l, -1.0)];
                        b.add_product(c, &d, &d);
                    }
                }
                // cell with lower-left corner (i, j)
                if i < ni && j < ni {
                    let corners = [node([i, j]), node([i + 1, j]), node([i, j + 1]), node([i + 1, j + 1])];
                    if neumann && corners.iter().any(|c| c.is_none()) {
                        continue;
                    }
                    let a12 = a.eval([half(i), half(j)])[0][1];
                    if a12 == 0.0 {
                        continue;
                    }
                    let [c00, c10, c01, c11] = corners;
                    let dx = [(c10, 0.5), (c00, -0.5), (c11, 0.5), (c01, -0.5)];
                    let dy = [(c01, 0.5), (c00, -0.5), (c11, 0.5), (c10, -0.5)];
                    b.add_product(2.0 * a12 * scale, &dx, &dy);
                }
            }
        }
    }
    b.finish(boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Preset;
    use crate::grid::{build_grid, desk_1d, GridSpec, Region};
    use nalgebra::SymmetricEigen;

    #[test]
    fn identity_dirichlet_is_tridiagonal() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let op = assemble_elliptic(&g, &CoefficientField::identity(), Boundary::Dirichlet);
        let h2 = g.h * g.h;
        for i in 0..31 {
            assert!((op.get(i, i) - 2.0 / h2).abs() < 1e-12);
            if i + 1 < 31 {
                assert!((op.get(i, i + 1) + 1.0 / h2).abs() < 1e-12);
            }
        }
        assert_eq!(op.vals.len(), 31 * 3 - 2);
    }

    #[test]
    fn neumann_rows_sum_to_zero() {
        let g = build_grid(&desk_1d(31)).unwrap();
        let a = CoefficientField::preset_with_bounds(Preset::Sinusoidal { amplitude: 0.3, frequency: 2.0 });
        let op = assemble_elliptic(&g, &a, Boundary::Neumann);
        let ones = vec![1.0; 31];
        assert!(op.apply(&ones).iter().all(|v| v.abs() < 1e-10));
    }

    fn grid2d() -> Grid {
        build_grid(&GridSpec {
            dim: 2,
            half_width: 2.0,
            nodes: 12,
            omega: Region::Rect([[-0.5, 0.5], [-0.5, 0.5]]),
            w1: Region::Rect([[-1.6, -1.0], [-0.5, 0.5]]),
            w2: Region::Rect([[1.0, 1.6], [-0.5, 0.5]]),
        })
        .unwrap()
    }

    fn anisotropic() -> CoefficientField {
        CoefficientField::custom("aniso", 3.0, 1.0, |x| {
            let d = 1.0 + 0.3 * x[0].sin();
            let o = 0.2 * (0.5 * x[1]).cos();
            [[d, o], [o, 1.2]]
        })
    }

    #[test]
    fn variable_tensor_is_symmetric_and_definite() {
        let g = grid2d();
        for bc in [Boundary::Dirichlet, Boundary::Neumann] {
            let op = assemble_elliptic(&g, &anisotropic(), bc);
            assert!(op.max_asymmetry() < 1e-14 * op.get(0, 0).abs());
            let e = SymmetricEigen::new(op.to_dense()).eigenvalues;
            let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
            match bc {
                Boundary::Dirichlet => assert!(min > 0.0),
                Boundary::Neumann => {
                    assert!(min.abs() < 1e-10);
                    let ones = vec![1.0; g.len()];
                    assert!(op.apply(&ones).iter().all(|v| v.abs() < 1e-10));
                }
            }
        }
    }

    #[test]
    fn diagonal_tensor_gives_five_point_stencil() {
        let g = grid2d();
        let op = assemble_elliptic(&g, &CoefficientField::identity(), Boundary::Dirichlet);
        let h2 = g.h * g.h;
        let c = g.flat_index([5, 5]);
        assert!((op.get(c, c) - 4.0 / h2).abs() < 1e-12);
        assert!((op.get(c, c + 1) + 1.0 / h2).abs() < 1e-12);
        assert!((op.get(c, c + 12) + 1.0 / h2).abs() < 1e-12);
        assert_eq!(op.get(c, c + 13), 0.0);
    }
}
