//! Galerkin solver for the initial-exterior problems
//! `(H^s + ⟨b,∇⟩ + q − λ) u = F` in `Q = Ω × (−T, T)`, `u = f` outside `Ω`, and for
//! their adjoints.
//!
//! Trial and test functions are node indicators on `Ω × {t_n : |t_n| < T}`; the slot at
//! `t = −T` is excluded, which realizes the zero initial state. The Galerkin matrix is
//! `w·(P_Q H^s P_Qᵀ + diag q + D_b − λ)` with quadrature weight `w = h^d Δt`.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::fractional::{apply_hs, hs_seminorm_sq, power_unchecked};
use crate::grid::Grid;
use crate::krylov::{gmres, GmresOptions};
use crate::spacetime::{SpaceTimeField, TimeAxis};
use crate::spectral::EigenBasis;
use crate::{Error, Result};

/// Largest system factorized directly.
pub const DENSE_CAP: usize = 4096;
/// Condition estimate above which a solve is refused.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Relative margin `σ_min/σ_max` required by the eigenvalue check.
pub const MARGIN_THRESHOLD: f64 = 1e-8;

/// Grid, eigenbasis, time window and the induced unknowns.
pub struct Discretization {
    pub grid: Grid,
    pub basis: EigenBasis,
    pub axis: TimeAxis,
    /// `(node, slot)` of every unknown, node-major.
    pub dofs: Vec<(usize, usize)>,
    slot_of: Vec<Option<usize>>,
    kernels: Mutex<HashMap<u64, Arc<DMatrix<f64>>>>,
    pub dense_cap: usize,
    pub gmres: GmresOptions,
}

impl std::fmt::Debug for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discretization")
            .field("nodes", &self.grid.len())
            .field("modes", &self.basis.len())
            .field("axis", &self.axis)
            .field("dofs", &self.dofs.len())
            .finish()
    }
}

impl Discretization {
    pub fn new(grid: Grid, basis: EigenBasis, axis: TimeAxis) -> Result<Self> {
        if basis.n_nodes() != grid.len() {
            return Err(Error::Mismatch("basis and grid sizes differ".into()));
        }
        let slots = axis.interior();
        let mut dofs = Vec::new();
        let mut slot_of = vec![None; grid.len() * axis.nodes];
        for &i in &grid.omega.nodes {
            for &n in &slots {
                slot_of[i * axis.nodes + n] = Some(dofs.len());
                dofs.push((i, n));
            }
        }
        Ok(Discretization {
            grid,
            basis,
            axis,
            dofs,
            slot_of,
            kernels: Mutex::new(HashMap::new()),
            dense_cap: DENSE_CAP,
            gmres: GmresOptions::default(),
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    /// Space-time quadrature weight `h^d Δt`.
    pub fn weight(&self) -> f64 {
        self.grid.cell() * self.axis.dt()
    }

    pub fn dof(&self, node: usize, slot: usize) -> Option<usize> {
        self.slot_of[node * self.axis.nodes + slot]
    }

    pub fn zero_field(&self) -> SpaceTimeField {
        SpaceTimeField::zeros(&self.grid, self.axis)
    }

    pub fn field_from(&self, f: impl Fn([f64; 2], f64) -> f64) -> SpaceTimeField {
        SpaceTimeField::from_real(&self.grid, self.axis, f)
    }

    /// Real parts at the unknowns.
    pub fn restrict(&self, u: &SpaceTimeField) -> Vec<f64> {
        self.dofs.iter().map(|&(i, n)| u.get(i, n).re).collect()
    }

    /// Field equal to `v` on the unknowns and zero elsewhere.
    pub fn embed(&self, v: &[f64]) -> SpaceTimeField {
        let mut out = self.zero_field();
        for (&(i, n), &x) in self.dofs.iter().zip(v) {
            out.set(i, n, Complex64::new(x, 0.0));
        }
        out
    }

    /// Whether `(node, slot)` lies in the closed cylinder `Ω̄ × [−T, T]`.
    pub fn in_q(&self, node: usize, slot: usize) -> bool {
        self.grid.omega.contains(node) && self.axis.time(slot).abs() <= self.axis.horizon + 1e-9 * self.axis.dt()
    }

    /// `P_Q H^s P_Qᵀ`, cached per order. The adjoint block is its transpose.
    pub fn kernel(&self, s: f64) -> Result<Arc<DMatrix<f64>>> {
        if let Some(k) = self.kernels.lock().unwrap().get(&s.to_bits()) {
            return Ok(k.clone());
        }
        let k = Arc::new(self.build_kernel(s)?);
        self.kernels.lock().unwrap().insert(s.to_bits(), k.clone());
        Ok(k)
    }

    fn build_kernel(&self, s: f64) -> Result<DMatrix<f64>> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Domain(format!("fractional order must lie in (0, 1], got {s}")));
        }
        let nt = self.axis.nodes;
        let nm = self.basis.len();
        // g_k(j) = N⁻¹ Σ_m (λ_k + iσ_m)^s e^{2πi mj/N}
        let inv = FftPlanner::new().plan_fft_inverse(nt);
        let mut g = DMatrix::<f64>::zeros(nm, nt);
        let mut row = vec![Complex64::new(0.0, 0.0); nt];
        for k in 0..nm {
            for (m, r) in row.iter_mut().enumerate() {
                *r = power_unchecked(self.basis.values[k], self.axis.sigma(m), s);
            }
            inv.process(&mut row);
            for j in 0..nt {
                g[(k, j)] = row[j].re / nt as f64;
            }
        }
        let omega = &self.grid.omega.nodes;
        let p = omega.len();
        let vo = DMatrix::from_fn(p, nm, |a, k| self.basis.vectors[(omega[a], k)]);
        let cell = self.grid.cell();
        // blocks[j] = cell · V_Ω diag(g(·, j)) V_Ωᵀ
        let mut blocks = Vec::with_capacity(nt);
        for j in 0..nt {
            let scaled = DMatrix::from_fn(p, nm, |a, k| vo[(a, k)] * g[(k, j)]);
            blocks.push(&scaled * vo.transpose() * cell);
        }
        let slots = self.axis.interior();
        let ns = slots.len();
        let n = self.n_dofs();
        let mut kmat = DMatrix::zeros(n, n);
        for a in 0..p {
            for b in 0..p {
                for (ia, &na) in slots.iter().enumerate() {
                    for (ib, &nb) in slots.iter().enumerate() {
                        let j = (na + nt - nb) % nt;
                        kmat[(a * ns + ia, b * ns + ib)] = blocks[j][(a, b)];
                    }
                }
            }
        }
        Ok(kmat)
    }
}

/// Data of one initial-exterior problem. All fields are real and indexed `node·N + slot`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub s: f64,
    pub potential: Vec<f64>,
    pub drift: Option<Vec<[f64; 2]>>,
    /// Exterior data `f`; values on `Ω` are ignored by the solution.
    pub exterior: SpaceTimeField,
    /// Interior source `F`.
    pub source: SpaceTimeField,
    /// Coercivity shift used by the diagnostics (not by the solve).
    pub mu: f64,
    pub lambda_shift: f64,
}

impl ProblemSpec {
    /// Zero data for order `s`.
    pub fn new(disc: &Discretization, s: f64) -> Self {
        let len = disc.grid.len() * disc.axis.nodes;
        ProblemSpec {
            s,
            potential: vec![0.0; len],
            drift: None,
            exterior: disc.zero_field(),
            source: disc.zero_field(),
            mu: 0.0,
            lambda_shift: 0.0,
        }
    }

    /// Sets `q(x, t)` on the closed cylinder and zero elsewhere.
    pub fn with_potential(mut self, disc: &Discretization, q: impl Fn([f64; 2], f64) -> f64) -> Self {
        self.potential = field_on_q(disc, |x, t| q(x, t));
        self
    }

    pub fn with_drift(mut self, disc: &Discretization, b: impl Fn([f64; 2], f64) -> [f64; 2]) -> Self {
        let nt = disc.axis.nodes;
        let mut out = vec![[0.0; 2]; disc.grid.len() * nt];
        for i in 0..disc.grid.len() {
            for n in 0..nt {
                if disc.in_q(i, n) {
                    out[i * nt + n] = b(disc.grid.coords(i), disc.axis.time(n));
                }
            }
        }
        self.drift = Some(out);
        self
    }

    pub fn validate(&self, disc: &Discretization) -> Result<()> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(Error::Config(format!("fractional order must lie in (0, 1), got {}", self.s)));
        }
        if self.drift.is_some() && self.s <= 0.5 {
            return Err(Error::Config(format!(
                "drift terms need s > 1/2 for well-posedness, got s = {}",
                self.s
            )));
        }
        let nt = disc.axis.nodes;
        let len = disc.grid.len() * nt;
        if self.potential.len() != len || self.drift.as_ref().is_some_and(|b| b.len() != len) {
            return Err(Error::Mismatch("coefficient arrays do not match the grid".into()));
        }
        for (name, f) in [("exterior data", &self.exterior), ("source", &self.source)] {
            f.compatible(&disc.zero_field())?;
            if !f.is_real(1e-10 * f.max_abs().max(1.0)) {
                return Err(Error::Config(format!("{name} must be real-valued")));
            }
        }
        let window = |n: usize| disc.axis.time(n).abs() < disc.axis.horizon - 1e-9 * disc.axis.dt();
        for i in 0..disc.grid.len() {
            for n in 0..nt {
                let k = i * nt + n;
                let inside = disc.in_q(i, n);
                let drift_nz = self.drift.as_ref().is_some_and(|b| b[k] != [0.0; 2]);
                if !inside && (self.potential[k] != 0.0 || drift_nz || self.source.data[k].re != 0.0) {
                    return Err(Error::Config(format!(
                        "potential, drift and source must vanish outside Q (node {i}, t = {:.4})",
                        disc.axis.time(n)
                    )));
                }
                if !window(n) && self.exterior.data[k].re != 0.0 {
                    return Err(Error::Config(format!(
                        "exterior data must vanish for t outside (−T, T) (node {i}, t = {:.4})",
                        disc.axis.time(n)
                    )));
                }
            }
        }
        if !self.potential.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("potential has non-finite values".into()));
        }
        Ok(())
    }
}

fn field_on_q(disc: &Discretization, f: impl Fn([f64; 2], f64) -> f64) -> Vec<f64> {
    let nt = disc.axis.nodes;
    let mut out = vec![0.0; disc.grid.len() * nt];
    for i in 0..disc.grid.len() {
        for n in 0..nt {
            if disc.in_q(i, n) {
                out[i * nt + n] = f(disc.grid.coords(i), disc.axis.time(n));
            }
        }
    }
    out
}

/// `(b·∇u)` with centered differences; neighbours outside the box count as zero.
pub fn apply_drift(grid: &Grid, b: &[[f64; 2]], u: &SpaceTimeField) -> SpaceTimeField {
    let nt = u.axis.nodes;
    let mut out = u.zeros_like();
    let inv = 0.5 / grid.h;
    for i in 0..grid.len() {
        for axis in 0..grid.dim {
            let fwd = grid.neighbor(i, axis, true);
            let bwd = grid.neighbor(i, axis, false);
            for n in 0..nt {
                let c = b[i * nt + n][axis];
                if c == 0.0 {
                    continue;
                }
                let up = fwd.map(|j| u.get(j, n)).unwrap_or_default();
                let dn = bwd.map(|j| u.get(j, n)).unwrap_or_default();
                let k = i * nt + n;
                out.data[k] += (up - dn) * (c * inv);
            }
        }
    }
    out
}

/// Transpose of [`apply_drift`]: `−∇·(b u)` with centered differences.
pub fn apply_drift_adjoint(grid: &Grid, b: &[[f64; 2]], u: &SpaceTimeField) -> SpaceTimeField {
    let nt = u.axis.nodes;
    let mut out = u.zeros_like();
    let inv = 0.5 / grid.h;
    for i in 0..grid.len() {
        for axis in 0..grid.dim {
            let fwd = grid.neighbor(i, axis, true);
            let bwd = grid.neighbor(i, axis, false);
            for n in 0..nt {
                let up = fwd.map(|j| u.get(j, n) * b[j * nt + n][axis]).unwrap_or_default();
                let dn = bwd.map(|j| u.get(j, n) * b[j * nt + n][axis]).unwrap_or_default();
                out.data[i * nt + n] -= (up - dn) * inv;
            }
        }
    }
    out
}

fn drift_block(disc: &Discretization, b: &[[f64; 2]]) -> Vec<(usize, usize, f64)> {
    let nt = disc.axis.nodes;
    let inv = 0.5 / disc.grid.h;
    let mut out = Vec::new();
    for (row, &(i, n)) in disc.dofs.iter().enumerate() {
        for axis in 0..disc.grid.dim {
            let c = b[i * nt + n][axis];
            if c == 0.0 {
                continue;
            }
            for (fwd, sign) in [(true, 1.0), (false, -1.0)] {
                if let Some(col) = disc.grid.neighbor(i, axis, fwd).and_then(|j| disc.dof(j, n)) {
                    out.push((row, col, sign * c * inv));
                }
            }
        }
    }
    out
}

/// Galerkin matrix of the forward (or adjoint) problem.
pub fn galerkin_matrix(disc: &Discretization, spec: &ProblemSpec, adjoint: bool) -> Result<DMatrix<f64>> {
    let k = disc.kernel(spec.s)?;
    let mut m = if adjoint { k.transpose() } else { (*k).clone() };
    let nt = disc.axis.nodes;
    for (d, &(i, n)) in disc.dofs.iter().enumerate() {
        m[(d, d)] += spec.potential[i * nt + n] - spec.lambda_shift;
    }
    if let Some(b) = &spec.drift {
        for (r, c, v) in drift_block(disc, b) {
            if adjoint {
                m[(c, r)] += v;
            } else {
                m[(r, c)] += v;
            }
        }
    }
    m *= disc.weight();
    Ok(m)
}

/// Applies `(H^s + ⟨b,∇⟩ + q − λ)` (or its adjoint) to a full field.
pub fn apply_operator(disc: &Discretization, spec: &ProblemSpec, u: &SpaceTimeField, adjoint: bool) -> Result<SpaceTimeField> {
    let mut out = apply_hs(u, &disc.basis, spec.s, adjoint)?;
    for (k, v) in out.data.iter_mut().enumerate() {
        *v += u.data[k] * (spec.potential[k] - spec.lambda_shift);
    }
    if let Some(b) = &spec.drift {
        let d = if adjoint { apply_drift_adjoint(&disc.grid, b, u) } else { apply_drift(&disc.grid, b, u) };
        out.axpy(Complex64::new(1.0, 0.0), &d);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct WeakSolution {
    /// `u = v + f` on the whole padded window.
    pub u: SpaceTimeField,
    /// `‖M v − r‖ / ‖r‖` of the Galerkin system.
    pub residual: f64,
    /// `σ_max/σ_min` of the Galerkin matrix (direct solves only).
    pub condition: Option<f64>,
    pub iterations: usize,
}

/// Extreme singular values of a square matrix from power and inverse iteration.
pub fn extreme_singular_values(m: &DMatrix<f64>) -> (f64, f64) {
    let n = m.nrows();
    let start = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    let mut x = start.normalize();
    let mut smax = 0.0;
    for _ in 0..200 {
        let y = m.tr_mul(&(m * &x));
        let est = y.norm().sqrt();
        x = y / (est * est).max(1e-300);
        if (est - smax).abs() <= 1e-8 * est {
            smax = est;
            break;
        }
        smax = est;
    }
    let lu = m.clone().lu();
    if !lu.is_invertible() {
        return (0.0, smax);
    }
    let lt = lu.l().transpose();
    let ut = lu.u().transpose();
    let p = lu.p().clone();
    let solve_t = |y: &DVector<f64>| -> Option<DVector<f64>> {
        let w1 = ut.solve_lower_triangular(y)?;
        let mut w2 = lt.solve_upper_triangular(&w1)?;
        p.inv_permute_rows(&mut w2);
        Some(w2)
    };
    let mut x = start.normalize();
    let mut inv_est = 0.0;
    for _ in 0..100 {
        let Some(y) = lu.solve(&x) else { return (0.0, smax) };
        let Some(z) = solve_t(&y) else { return (0.0, smax) };
        let est = z.norm().sqrt();
        if !est.is_finite() {
            return (0.0, smax);
        }
        x = z / (est * est);
        if (est - inv_est).abs() <= 1e-8 * est {
            inv_est = est;
            break;
        }
        inv_est = est;
    }
    (1.0 / inv_est, smax)
}

fn lifted_rhs(disc: &Discretization, spec: &ProblemSpec, data: &SpaceTimeField, adjoint: bool) -> Result<Vec<f64>> {
    // only the exterior part of the data enters the lifting
    let mut lift = data.clone();
    for &i in &disc.grid.omega.nodes {
        for n in 0..disc.axis.nodes {
            lift.set(i, n, Complex64::new(0.0, 0.0));
        }
    }
    let op = apply_operator(disc, spec, &lift, adjoint)?;
    let w = disc.weight();
    Ok(disc
        .dofs
        .iter()
        .map(|&(i, n)| {
            let src = if adjoint { 0.0 } else { spec.source.get(i, n).re };
            w * (src - op.get(i, n).re)
        })
        .collect())
}

enum Backend {
    Dense { lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, matrix: DMatrix<f64>, condition: f64 },
    Iterative { diag: Vec<f64> },
}

/// A forward or adjoint problem with its Galerkin system factorized once, for
/// repeated solves with different exterior data.
pub struct PreparedProblem<'a> {
    disc: &'a Discretization,
    spec: ProblemSpec,
    adjoint: bool,
    backend: Backend,
}

impl<'a> PreparedProblem<'a> {
    pub fn new(disc: &'a Discretization, spec: &ProblemSpec, adjoint: bool) -> Result<Self> {
        let mut check = spec.clone();
        check.exterior = disc.zero_field();
        if adjoint {
            check.source = disc.zero_field();
        }
        check.validate(disc)?;
        let backend = if disc.n_dofs() <= disc.dense_cap {
            let matrix = galerkin_matrix(disc, spec, adjoint)?;
            let (smin, smax) = extreme_singular_values(&matrix);
            let condition = smax / smin;
            if !(condition <= CONDITION_LIMIT) {
                return Err(Error::NearSingular(condition));
            }
            Backend::Dense { lu: matrix.clone().lu(), matrix, condition }
        } else {
            let k = disc.kernel(spec.s)?;
            let nt = disc.axis.nodes;
            let w = disc.weight();
            let diag = disc
                .dofs
                .iter()
                .enumerate()
                .map(|(d, &(i, t))| w * (k[(d, d)] + spec.potential[i * nt + t] - spec.lambda_shift))
                .collect();
            Backend::Iterative { diag }
        };
        Ok(PreparedProblem { disc, spec: spec.clone(), adjoint, backend })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn condition(&self) -> Option<f64> {
        match &self.backend {
            Backend::Dense { condition, .. } => Some(*condition),
            Backend::Iterative { .. } => None,
        }
    }

    /// Solves with exterior data `data`; the interior source of the spec is used for
    /// forward problems only.
    pub fn solve(&self, data: &SpaceTimeField) -> Result<WeakSolution> {
        let disc = self.disc;
        let mut check = self.spec.clone();
        check.exterior = data.clone();
        check.validate(disc)?;
        let rhs = lifted_rhs(disc, &self.spec, data, self.adjoint)?;
        let rnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (v, iterations, residual) = match &self.backend {
            Backend::Dense { lu, matrix, .. } => {
                let b = DVector::from_column_slice(&rhs);
                let x = lu.solve(&b).ok_or(Error::NearSingular(f64::INFINITY))?;
                let res = if rnorm == 0.0 { 0.0 } else { (matrix * &x - &b).norm() / rnorm };
                (x.as_slice().to_vec(), 0, res)
            }
            Backend::Iterative { diag } => {
                let w = disc.weight();
                let apply = |v: &[f64]| -> Vec<f64> {
                    let field = disc.embed(v);
                    match apply_operator(disc, &self.spec, &field, self.adjoint) {
                        Ok(out) => disc.restrict(&out).into_iter().map(|x| x * w).collect(),
                        Err(_) => vec![f64::NAN; v.len()],
                    }
                };
                let r = gmres(apply, &rhs, diag, &disc.gmres)?;
                let res = *r.history.last().unwrap_or(&0.0);
                (r.x, r.iterations, res)
            }
        };
        let mut u = disc.embed(&v);
        add_exterior(disc, &mut u, data);
        Ok(WeakSolution { u, residual, condition: self.condition(), iterations })
    }
}

/// Weak solution of the forward problem with exterior data `spec.exterior`.
pub fn solve_forward(disc: &Discretization, spec: &ProblemSpec) -> Result<WeakSolution> {
    PreparedProblem::new(disc, spec, false)?.solve(&spec.exterior)
}

/// Solution of the adjoint (future-exterior) problem with exterior data `g`.
pub fn solve_adjoint(disc: &Discretization, spec: &ProblemSpec, g: &SpaceTimeField) -> Result<WeakSolution> {
    PreparedProblem::new(disc, spec, true)?.solve(g)
}

fn add_exterior(disc: &Discretization, u: &mut SpaceTimeField, f: &SpaceTimeField) {
    for i in 0..disc.grid.len() {
        if disc.grid.omega.contains(i) {
            continue;
        }
        for n in 0..disc.axis.nodes {
            let k = u.idx(i, n);
            u.data[k] += f.data[k];
        }
    }
}

/// `B(u, v) = ⟨H^{s/2}u, H_*^{s/2}v⟩ + ∫ q u v + ∫ ⟨b,∇u⟩ v`.
pub fn bilinear_form(disc: &Discretization, spec: &ProblemSpec, u: &SpaceTimeField, v: &SpaceTimeField) -> Result<Complex64> {
    if spec.drift.is_some() && spec.s <= 0.5 {
        return Err(Error::Config(format!("drift terms need s > 1/2 for well-posedness, got s = {}", spec.s)));
    }
    u.compatible(v)?;
    let hu = apply_hs(u, &disc.basis, 0.5 * spec.s, false)?;
    let hv = apply_hs(v, &disc.basis, 0.5 * spec.s, true)?;
    let mut total = hu.pair(&hv);
    let w = u.weight();
    let qsum: Complex64 = (0..u.data.len()).map(|k| u.data[k] * v.data[k] * spec.potential[k]).sum();
    total += qsum * w;
    if let Some(b) = &spec.drift {
        total += apply_drift(&disc.grid, b, u).pair(v);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenCheck {
    pub pass: bool,
    /// `σ_min/σ_max` of the Galerkin matrix.
    pub margin: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Probes whether the shifted problem is uniquely solvable on the grid.
pub fn check_eigenvalue_condition(disc: &Discretization, spec: &ProblemSpec) -> Result<EigenCheck> {
    let m = galerkin_matrix(disc, spec, false)?;
    let (smin, smax) = extreme_singular_values(&m);
    let margin = if smax > 0.0 { smin / smax } else { 0.0 };
    Ok(EigenCheck { pass: margin > MARGIN_THRESHOLD, margin, sigma_min: smin, sigma_max: smax })
}

/// Smallest `μ` making `Re B(w,w) + μ‖w‖²` dominate `cos(sπ/2)·Σ|λ+iσ|^s|ŵ|²`.
///
/// Without drift this is `‖min(q, 0)‖_∞`. With drift the symmetric part of the
/// centered difference block is bounded by Gershgorin, `Σ_j ½|b_i − b_j||D_ij|`,
/// and `‖q‖_∞` is added.
pub fn coercivity_shift_bound(disc: &Discretization, spec: &ProblemSpec) -> f64 {
    let neg = spec.potential.iter().fold(0.0f64, |m, &q| m.max(-q));
    let Some(b) = &spec.drift else { return neg };
    let nt = disc.axis.nodes;
    let inv = 0.5 / disc.grid.h;
    let qmax = spec.potential.iter().fold(0.0f64, |m, &q| m.max(q.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..disc.grid.len() {
        for n in 0..nt {
            let mut row = 0.0;
            for axis in 0..disc.grid.dim {
                for fwd in [true, false] {
                    if let Some(j) = disc.grid.neighbor(i, axis, fwd) {
                        row += 0.5 * (b[i * nt + n][axis] - b[j * nt + n][axis]).abs() * inv;
                    }
                }
            }
            worst = worst.max(row);
        }
    }
    worst + qmax
}

/// `(Re B(w,w) + μ‖w‖², cos(sπ/2)·Σ|λ+iσ|^s|ŵ|²)` for the coercivity witness.
pub fn coercivity_sides(disc: &Discretization, spec: &ProblemSpec, w: &SpaceTimeField) -> Result<(f64, f64)> {
    let b = bilinear_form(disc, spec, w, w)?;
    let l2 = w.l2_norm();
    let lhs = b.re + spec.mu * l2 * l2;
    let rhs = (FRAC_PI_2 * spec.s).cos() * hs_seminorm_sq(w, &disc.basis, spec.s)?;
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientField, Preset};
    use crate::elliptic::{assemble_elliptic, Boundary};
    use crate::fractional::reverse_time;
    use crate::grid::{build_grid, desk_1d};
    use crate::spectral::eigendecompose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(nodes: usize, nt: usize) -> Discretization {
        let g = build_grid(&desk_1d(nodes)).unwrap();
        let a = CoefficientField::preset_with_bounds(Preset::Sinusoidal { amplitude: 0.2, frequency: 1.0 });
        let b = eigendecompose(&assemble_elliptic(&g, &a, Boundary::Dirichlet), &g, "t", 4096).unwrap();
        Discretization::new(g, b, TimeAxis::new(nt, 1.0, 2.0).unwrap()).unwrap()
    }

    fn bump(t: f64) -> f64 {
        if t.abs() < 0.9 {
            (1.0 - (t / 0.9).powi(2)).powi(3)
        } else {
            0.0
        }
    }

    fn exterior(disc: &Discretization, seed: u64) -> SpaceTimeField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp: Vec<f64> = (0..disc.grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1 = disc.grid.w1.clone();
        let mut f = disc.field_from(|_, t| bump(t));
        for i in 0..disc.grid.len() {
            let scale = if w1.contains(i) { amp[i] } else { 0.0 };
            for n in 0..disc.axis.nodes {
                let v = f.get(i, n) * scale;
                f.set(i, n, v);
            }
        }
        f
    }

    #[test]
    fn zero_data_gives_zero() {
        let disc = desk(31, 32);
        let spec = ProblemSpec::new(&disc, 0.5);
        let sol = solve_forward(&disc, &spec).unwrap();
        assert_eq!(sol.u.max_abs(), 0.0);
    }

    #[test]
    fn manufactured_solution_is_recovered() {
        let disc = desk(31, 32);
        let s = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let amp: Vec<f64> = (0..disc.grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let support = |i: usize| disc.grid.omega.contains(i) || disc.grid.w1.contains(i);
        let mut ustar = disc.field_from(|_, t| bump(t));
        for i in 0..disc.grid.len() {
            let c = if support(i) { amp[i] } else { 0.0 };
            for n in 0..disc.axis.nodes {
                let v = ustar.get(i, n) * c;
                ustar.set(i, n, v);
            }
        }
        let mut spec = ProblemSpec::new(&disc, s).with_potential(&disc, |x, t| 0.5 + x[0] * t);
        let op = apply_operator(&disc, &spec, &ustar, false).unwrap();
        let mut f = ustar.clone();
        for &i in &disc.grid.omega.nodes {
            for n in 0..disc.axis.nodes {
                f.set(i, n, Complex64::new(0.0, 0.0));
            }
        }
        let mut src = disc.zero_field();
        for &(i, n) in &disc.dofs {
            src.set(i, n, op.get(i, n));
        }
        spec.exterior = f;
        spec.source = src;
        let sol = solve_forward(&disc, &spec).unwrap();
        assert!(sol.u.sub(&ustar).max_abs() <= 1e-8 * ustar.max_abs());
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn adjoint_is_time_reversed_forward() {
        let disc = desk(31, 32);
        let g = exterior(&disc, 5);
        let q = |x: [f64; 2], t: f64| 0.3 + 0.2 * x[0] + 0.1 * t;
        let spec_rev = ProblemSpec::new(&disc, 0.4).with_potential(&disc, |x, t| q(x, -t));
        let adj = solve_adjoint(&disc, &spec_rev, &g).unwrap();
        let mut spec = ProblemSpec::new(&disc, 0.4).with_potential(&disc, q);
        spec.exterior = reverse_time(&g);
        let fwd = solve_forward(&disc, &spec).unwrap();
        let rev = reverse_time(&fwd.u);
        assert!(adj.u.sub(&rev).max_abs() <= 1e-10 * rev.max_abs());
    }

    #[test]
    fn linear_and_local_in_exterior_data() {
        let disc = desk(31, 32);
        let base = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |x, _| 1.0 + x[0]);
        let (f1, f2) = (exterior(&disc, 1), exterior(&disc, 2));
        let solve = |f: &SpaceTimeField| {
            let mut sp = base.clone();
            sp.exterior = f.clone();
            solve_forward(&disc, &sp).unwrap().u
        };
        let mut combo = f1.scaled(Complex64::new(2.0, 0.0));
        combo.axpy(Complex64::new(-0.5, 0.0), &f2);
        let mut expect = solve(&f1).scaled(Complex64::new(2.0, 0.0));
        expect.axpy(Complex64::new(-0.5, 0.0), &solve(&f2));
        assert!(solve(&combo).sub(&expect).max_abs() <= 1e-12 * expect.max_abs());
        // values of f on Ω do not matter
        let mut touched = f1.clone();
        let i = disc.grid.omega.nodes[3];
        touched.set(i, disc.axis.nodes / 2, Complex64::new(7.0, 0.0));
        assert!(solve(&touched).sub(&solve(&f1)).max_abs() <= 1e-12 * solve(&f1).max_abs());
    }

    #[test]
    fn iterative_path_matches_direct() {
        let mut disc = desk(31, 32);
        let mut spec = ProblemSpec::new(&disc, 0.7).with_potential(&disc, |x, _| 0.5 * x[0]);
        spec.exterior = exterior(&disc, 9);
        let direct = solve_forward(&disc, &spec).unwrap();
        disc.dense_cap = 0;
        let iter = solve_forward(&disc, &spec).unwrap();
        assert!(iter.iterations > 0 && iter.condition.is_none());
        assert!(iter.u.sub(&direct.u).max_abs() <= 1e-8 * direct.u.max_abs());
    }

    #[test]
    fn transpose_solve_in_probe() {
        let m = DMatrix::from_fn(5, 5, |i, j| if i == j { 3.0 + i as f64 } else { (i as f64 - j as f64) * 0.3 });
        let (smin, smax) = extreme_singular_values(&m);
        let sv = m.clone().svd(false, false).singular_values;
        let (lo, hi) = (sv.min(), sv.max());
        assert!((smin - lo).abs() < 1e-6 * lo && (smax - hi).abs() < 1e-6 * hi);
    }

    #[test]
    fn half_power_split_and_duality() {
        let disc = desk(31, 32);
        let spec = ProblemSpec::new(&disc, 0.5);
        let (u, v) = (exterior(&disc, 11), exterior(&disc, 12));
        let b = bilinear_form(&disc, &spec, &u, &v).unwrap();
        let direct = apply_hs(&u, &disc.basis, 0.5, false).unwrap().pair(&v);
        assert!((b - direct).norm() <= 1e-12 * direct.norm().max(1e-300));
    }

    #[test]
    fn drift_needs_large_order_and_is_transposed() {
        let disc = desk(31, 32);
        let spec = ProblemSpec::new(&disc, 0.4).with_drift(&disc, |_, _| [1.0, 0.0]);
        assert!(spec.validate(&disc).unwrap_err().to_string().contains("s > 1/2"));
        let spec = ProblemSpec::new(&disc, 0.75).with_drift(&disc, |x, t| [x[0].cos() + t, 0.0]);
        let b = spec.drift.as_ref().unwrap();
        let (u, v) = (exterior(&disc, 1), disc.field_from(|x, t| (x[0] * t).sin()));
        let l = apply_drift(&disc.grid, b, &u).pair(&v);
        let r = u.pair(&apply_drift_adjoint(&disc.grid, b, &v));
        assert!((l - r).norm() <= 1e-12 * l.norm().max(1.0));
    }

    #[test]
    fn shift_bound_examples() {
        let disc = desk(31, 32);
        assert_eq!(coercivity_shift_bound(&disc, &ProblemSpec::new(&disc, 0.5).with_potential(&disc, |_, _| 1.0)), 0.0);
        assert_eq!(coercivity_shift_bound(&disc, &ProblemSpec::new(&disc, 0.5).with_potential(&disc, |_, _| -2.0)), 2.0);
    }

    #[test]
    fn nonnegative_potential_passes_eigen_check() {
        let disc = desk(31, 32);
        let spec = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |x, _| x[0] * x[0]);
        let c = check_eigenvalue_condition(&disc, &spec).unwrap();
        assert!(c.pass && c.margin > 1e-4);
    }

    #[test]
    fn coercivity_witness_holds_with_shift() {
        let disc = desk(31, 32);
        let mut spec = ProblemSpec::new(&disc, 0.6).with_potential(&disc, |x, t| -1.5 + x[0] * t);
        spec.mu = coercivity_shift_bound(&disc, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let v: Vec<f64> = (0..disc.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = disc.embed(&v);
            let (lhs, rhs) = coercivity_sides(&disc, &spec, &w).unwrap();
            assert!(lhs >= rhs * (1.0 - 1e-12), "{lhs} < {rhs}");
        }
    }

    #[test]
    fn tuned_potential_closes_the_margin() {
        let disc = desk(31, 32);
        let k = disc.kernel(0.5).unwrap();
        let eig = k.complex_eigenvalues();
        let mu = eig
            .iter()
            .filter(|z| z.im.abs() <= 1e-9 * z.norm())
            .map(|z| z.re)
            .next()
            .expect("a real eigenvalue");
        let margin = |eps: f64| {
            let spec = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |_, _| -mu + eps);
            check_eigenvalue_condition(&disc, &spec).unwrap()
        };
        let m: Vec<f64> = [1e-2, 1e-4, 1e-6].iter().map(|&e| margin(e).margin).collect();
        assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
        assert!(!margin(1e-12).pass);
        let spec = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |_, _| -mu);
        let mut spec = spec;
        spec.exterior = exterior(&disc, 4);
        assert!(matches!(solve_forward(&disc, &spec), Err(Error::NearSingular(_))));
    }
}
