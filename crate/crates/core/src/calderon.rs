//! Exterior measurements: the DN map on atom bases, the integral identity relating two
//! coefficient sets, Runge approximation by exterior-controlled solutions, and recovery
//! of `q` and `(b, q)` from DN data.
//!
//! Exterior atoms are node indicators on `W × (−T, T)`; the trace-space representative
//! is the one supported on exterior nodes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::forward::{apply_drift, apply_operator, Discretization, PreparedProblem, ProblemSpec};
use crate::grid::Mask;
use crate::spacetime::SpaceTimeField;
use crate::{Error, Result};

/// One exterior basis function.
#[derive(Debug, Clone)]
pub struct Atom {
    pub label: String,
    pub field: SpaceTimeField,
}

/// Node indicators on `mask × (−T, T)`, keeping every `node_stride`-th node and every
/// `slot_stride`-th time slot.
pub fn indicator_atoms(disc: &Discretization, mask: &Mask, node_stride: usize, slot_stride: usize) -> Vec<Atom> {
    let slots = disc.axis.interior();
    let mut out = Vec::new();
    for &i in mask.nodes.iter().step_by(node_stride.max(1)) {
        for &n in slots.iter().step_by(slot_stride.max(1)) {
            let mut f = disc.zero_field();
            f.set(i, n, Complex64::new(1.0, 0.0));
            let x = disc.grid.coords(i);
            out.push(Atom { label: format!("{}@({:.4},{:.4};{:.4})", mask.name, x[0], x[1], disc.axis.time(n)), field: f });
        }
    }
    out
}

/// Digest of the coefficients of a problem.
pub fn spec_hash(spec: &ProblemSpec) -> String {
    let mut h = Sha256::new();
    h.update(spec.s.to_le_bytes());
    h.update(spec.lambda_shift.to_le_bytes());
    for q in &spec.potential {
        h.update(q.to_le_bytes());
    }
    if let Some(b) = &spec.drift {
        for v in b {
            h.update(v[0].to_le_bytes());
            h.update(v[1].to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// `D[j, i] = B(u_{f_i}, g_j)`.
#[derive(Debug, Clone)]
pub struct DnMatrix {
    pub data: DMatrix<Complex64>,
    pub inputs: Vec<Atom>,
    pub tests: Vec<Atom>,
    pub spec_hash: String,
}

impl DnMatrix {
    pub fn real_part(&self) -> DMatrix<f64> {
        self.data.map(|z| z.re)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn pair_tests(op: &SpaceTimeField, tests: &[Atom]) -> Vec<Complex64> {
    tests.iter().map(|g| op.pair(&g.field)).collect()
}

/// Forward solutions `u_{f_i}` for every input atom.
pub fn input_solutions(disc: &Discretization, spec: &ProblemSpec, inputs: &[Atom]) -> Result<Vec<SpaceTimeField>> {
    let prepared = PreparedProblem::new(disc, spec, false)?;
    inputs
        .iter()
        .enumerate()
        .map(|(c, a)| prepared.solve(&a.field).map(|s| s.u).map_err(|e| Error::Column { column: c, source: Box::new(e) }))
        .collect()
}

/// Adjoint solutions `u*_{g_j}` for every test atom.
pub fn test_solutions(disc: &Discretization, spec: &ProblemSpec, tests: &[Atom]) -> Result<Vec<SpaceTimeField>> {
    let prepared = PreparedProblem::new(disc, spec, true)?;
    tests
        .iter()
        .enumerate()
        .map(|(c, a)| prepared.solve(&a.field).map(|s| s.u).map_err(|e| Error::Column { column: c, source: Box::new(e) }))
        .collect()
}

fn dn_from_solutions(disc: &Discretization, spec: &ProblemSpec, sols: &[SpaceTimeField], tests: &[Atom]) -> Result<DMatrix<Complex64>> {
    let mut data = DMatrix::zeros(tests.len(), sols.len());
    for (i, u) in sols.iter().enumerate() {
        let op = apply_operator(disc, spec, u, false)?;
        for (j, v) in pair_tests(&op, tests).into_iter().enumerate() {
            data[(j, i)] = v;
        }
    }
    Ok(data)
}

/// One forward solve per input atom; entries pair `(H^s + ⟨b,∇⟩ + q)u` with the test atoms.
pub fn assemble_dn(disc: &Discretization, spec: &ProblemSpec, inputs: &[Atom], tests: &[Atom]) -> Result<DnMatrix> {
    let sols = input_solutions(disc, spec, inputs)?;
    Ok(DnMatrix {
        data: dn_from_solutions(disc, spec, &sols, tests)?,
        inputs: inputs.to_vec(),
        tests: tests.to_vec(),
        spec_hash: spec_hash(spec),
    })
}

/// Both sides of the integral identity and their relative mismatch.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCheck {
    /// `⟨(Λ₁ − Λ₂)f, g⟩`.
    pub lhs: f64,
    /// `∫(q₁ − q₂) u₁ u₂* + ∫⟨b₁ − b₂, ∇u₁⟩ u₂*`.
    pub rhs: f64,
    /// `|lhs − rhs|` over the largest of `|lhs|`, `|rhs|` and the two pairings
    /// `⟨Λᵢf, g⟩` whose difference forms `lhs`; near-equal data would otherwise divide
    /// rounding error by an almost vanishing difference.
    pub residual: f64,
}

fn same_setting(a: &ProblemSpec, b: &ProblemSpec) -> Result<()> {
    if a.s != b.s || a.lambda_shift != b.lambda_shift || a.potential.len() != b.potential.len() {
        return Err(Error::Mismatch("problems differ in order, shift or grid".into()));
    }
    Ok(())
}

fn drift_or_zero(spec: &ProblemSpec) -> Vec<[f64; 2]> {
    spec.drift.clone().unwrap_or_else(|| vec![[0.0; 2]; spec.potential.len()])
}

/// Residual of the identity for problems 1 and 2 with exterior data `f`, `g`.
pub fn alessandrini_residual(
    disc: &Discretization,
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    f: &SpaceTimeField,
    g: &SpaceTimeField,
) -> Result<IdentityCheck> {
    same_setting(spec1, spec2)?;
    let u1 = PreparedProblem::new(disc, spec1, false)?.solve(f)?.u;
    let u2 = PreparedProblem::new(disc, spec2, false)?.solve(f)?.u;
    let v2 = PreparedProblem::new(disc, spec2, true)?.solve(g)?.u;
    let (p1, p2) = (apply_operator(disc, spec1, &u1, false)?.pair(g), apply_operator(disc, spec2, &u2, false)?.pair(g));
    let lhs = p1 - p2;
    let w = disc.weight();
    let mut rhs = 0.0;
    for k in 0..u1.data.len() {
        rhs += w * (spec1.potential[k] - spec2.potential[k]) * u1.data[k].re * v2.data[k].re;
    }
    if spec1.drift.is_some() || spec2.drift.is_some() {
        let (b1, b2) = (drift_or_zero(spec1), drift_or_zero(spec2));
        let db: Vec<[f64; 2]> = b1.iter().zip(&b2).map(|(x, y)| [x[0] - y[0], x[1] - y[1]]).collect();
        rhs += apply_drift(&disc.grid, &db, &u1).pair(&v2).re;
    }
    let scale = lhs.re.abs().max(rhs.abs()).max(p1.re.abs()).max(p2.re.abs());
    let residual = if scale == 0.0 { 0.0 } else { (lhs.re - rhs).abs() / scale };
    Ok(IdentityCheck { lhs: lhs.re, rhs, residual })
}

/// The linear map `c ↦ (u_f − f)|_Q` over atom coefficients, with its SVD.
pub struct RungeSystem<'a> {
    disc: &'a Discretization,
    inputs: Vec<Atom>,
    solutions: Vec<SpaceTimeField>,
    u: DMatrix<f64>,
    sv: Vec<f64>,
    vt: DMatrix<f64>,
}

/// Tikhonov fit of a target on `Q`.
#[derive(Debug, Clone)]
pub struct RungeFit {
    pub coefficients: Vec<f64>,
    /// `Σ c_i f_i`.
    pub exterior: SpaceTimeField,
    /// `u_f` on the whole window.
    pub solution: SpaceTimeField,
    /// `‖(u_f − f)|_Q − φ‖ / ‖φ‖`.
    pub residual: f64,
    pub epsilon: f64,
}

impl<'a> RungeSystem<'a> {
    pub fn new(disc: &'a Discretization, spec: &ProblemSpec, inputs: &[Atom]) -> Result<Self> {
        let solutions = input_solutions(disc, spec, inputs)?;
        Ok(Self::from_solutions(disc, inputs, solutions))
    }

    pub fn from_solutions(disc: &'a Discretization, inputs: &[Atom], solutions: Vec<SpaceTimeField>) -> Self {
        let cols: Vec<Vec<f64>> = solutions.iter().map(|u| disc.restrict(u)).collect();
        let r = DMatrix::from_fn(disc.n_dofs(), cols.len(), |d, i| cols[i][d]);
        let svd = r.svd(true, true);
        RungeSystem {
            disc,
            inputs: inputs.to_vec(),
            solutions,
            u: svd.u.unwrap_or_else(|| DMatrix::zeros(0, 0)),
            sv: svd.singular_values.as_slice().to_vec(),
            vt: svd.v_t.unwrap_or_else(|| DMatrix::zeros(0, 0)),
        }
    }

    pub fn solutions(&self) -> &[SpaceTimeField] {
        &self.solutions
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sv
    }

    /// Minimizes `‖(u_f − f)|_Q − φ‖² + ε‖c‖²` over the atom coefficients `c` (for node
    /// indicators `‖c‖` is the L² norm of `f` up to the common quadrature weight).
    pub fn fit(&self, target: &SpaceTimeField, epsilon: f64) -> Result<RungeFit> {
        if !(epsilon > 0.0) {
            return Err(Error::Domain(format!(
                "Tikhonov weight must be positive (an unregularized fit is ill-posed), got {epsilon}"
            )));
        }
        let disc = self.disc;
        let phi = disc.restrict(target);
        // parts of the target off the unknowns are unreachable
        let mut off = 0.0;
        let mut total = 0.0;
        for &i in &disc.grid.omega.nodes {
            for n in 0..disc.axis.nodes {
                let v = target.get(i, n).re;
                total += v * v;
                if disc.dof(i, n).is_none() {
                    off += v * v;
                }
            }
        }
        let phi_v = DVector::from_column_slice(&phi);
        let proj = self.u.tr_mul(&phi_v);
        let mut c = DVector::zeros(self.inputs.len());
        let mut resid_sq = phi_v.norm_squared() - proj.norm_squared();
        for (k, &sk) in self.sv.iter().enumerate() {
            let filt = sk / (sk * sk + epsilon);
            let damp = epsilon / (sk * sk + epsilon);
            resid_sq += (damp * proj[k]).powi(2);
            c += self.vt.row(k).transpose() * (filt * proj[k]);
        }
        let coefficients: Vec<f64> = c.as_slice().to_vec();
        let mut exterior = disc.zero_field();
        let mut solution = disc.zero_field();
        for (ci, (a, u)) in coefficients.iter().zip(self.inputs.iter().zip(&self.solutions)) {
            exterior.axpy(Complex64::new(*ci, 0.0), &a.field);
            solution.axpy(Complex64::new(*ci, 0.0), u);
        }
        let residual = if total == 0.0 { 0.0 } else { ((resid_sq.max(0.0) + off) / total).sqrt() };
        Ok(RungeFit { coefficients, exterior, solution, residual, epsilon })
    }
}

/// Exterior data whose solution approximates `target` on `Q` (one-shot form of
/// [`RungeSystem::fit`]).
pub fn runge_approximate(
    disc: &Discretization,
    spec: &ProblemSpec,
    target: &SpaceTimeField,
    inputs: &[Atom],
    epsilon: f64,
) -> Result<RungeFit> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "Tikhonov weight must be positive (an unregularized fit is ill-posed), got {epsilon}"
        )));
    }
    RungeSystem::new(disc, spec, inputs)?.fit(target, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryMode {
    Linearized,
    FixedPoint,
    Constructive,
}

impl RecoveryMode {
    pub fn tag(&self) -> &'static str {
        match self {
            RecoveryMode::Linearized => "linearized",
            RecoveryMode::FixedPoint => "fixed-point",
            RecoveryMode::Constructive => "constructive",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecoveryOptions {
    /// Tikhonov weight relative to the largest squared singular value.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Relative misfit decrease below which iteration stops.
    pub stall: f64,
    /// Tikhonov weight of the Runge fits (constructive mode).
    pub runge_epsilon: f64,
    /// First weight of the iterative modes, reduced tenfold per step down to
    /// `epsilon_floor`. Linearized mode uses `epsilon`.
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
}

impl RecoveryOptions {
    fn epsilon_at(&self, k: usize) -> f64 {
        (self.epsilon_start * 0.1f64.powi(k as i32)).max(self.epsilon_floor)
    }
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { epsilon: 1e-8, max_iter: 12, stall: 1e-3, runge_epsilon: 1e-5, epsilon_start: 1e-4, epsilon_floor: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    /// Recovered potential, indexed like [`ProblemSpec::potential`].
    pub potential: Vec<f64>,
    pub drift: Option<Vec<[f64; 2]>>,
    /// `‖D_obs − D(q̂)‖ / ‖D_obs − D(q₀)‖` per iterate, starting at 1.
    pub misfit: Vec<f64>,
    pub epsilon: f64,
    pub mode: RecoveryMode,
    /// Number of singular values above the regularization floor.
    pub effective_rank: usize,
}

/// Tikhonov solve of `S x ≈ r` through the normal equations; returns `x` and the
/// effective rank.
pub fn tikhonov(s: &DMatrix<f64>, r: &DVector<f64>, eps_rel: f64) -> (DVector<f64>, usize) {
    let gram = s.tr_mul(s);
    let rhs = s.tr_mul(r);
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let alpha = eps_rel * top;
    let coef = eig.eigenvectors.tr_mul(&rhs);
    let mut x = DVector::zeros(s.ncols());
    let mut rank = 0;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > alpha {
            rank += 1;
        }
        let lam = ev.max(0.0);
        x += eig.eigenvectors.column(k) * (coef[k] / (lam + alpha));
    }
    if top == 0.0 {
        return (DVector::zeros(s.ncols()), 0);
    }
    (x, rank)
}

fn check_data(disc: &Discretization, observed: &DnMatrix, spec0: &ProblemSpec) -> Result<()> {
    if observed.data.nrows() != observed.tests.len() || observed.data.ncols() != observed.inputs.len() {
        return Err(Error::Mismatch("DN matrix shape does not match its bases".into()));
    }
    if spec0.potential.len() != disc.grid.len() * disc.axis.nodes {
        return Err(Error::Mismatch("reference problem lives on another grid".into()));
    }
    Ok(())
}

/// Restricted solution values (`dofs × atoms`).
fn dof_matrix(disc: &Discretization, sols: &[SpaceTimeField]) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = sols.iter().map(|u| disc.restrict(u)).collect();
    DMatrix::from_fn(disc.n_dofs(), cols.len(), |d, i| cols[i][d])
}

/// Centered gradient component `axis` of each solution at the unknowns.
fn gradient_matrix(disc: &Discretization, sols: &[SpaceTimeField], axis: usize) -> DMatrix<f64> {
    let nt = disc.axis.nodes;
    let mut b = vec![[0.0; 2]; disc.grid.len() * nt];
    for v in b.iter_mut() {
        v[axis] = 1.0;
    }
    let cols: Vec<Vec<f64>> = sols.iter().map(|u| disc.restrict(&apply_drift(&disc.grid, &b, u))).collect();
    DMatrix::from_fn(disc.n_dofs(), cols.len(), |d, i| cols[i][d])
}

/// Linearized sensitivity rows `(j, i)`: `w · a(d, i) · v(d, j)` over unknowns `d`.
fn sensitivity(w: f64, a: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, ni, nj) = (a.nrows(), a.ncols(), v.ncols());
    DMatrix::from_fn(ni * nj, p, |row, d| {
        let (j, i) = (row / ni, row % ni);
        w * a[(d, i)] * v[(d, j)]
    })
}

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    let (nj, ni) = (m.nrows(), m.ncols());
    DVector::from_fn(nj * ni, |row, _| m[(row / ni, row % ni)])
}

fn scatter(disc: &Discretization, values: &[f64]) -> Vec<f64> {
    let nt = disc.axis.nodes;
    let mut out = vec![0.0; disc.grid.len() * nt];
    for (&(i, n), v) in disc.dofs.iter().zip(values) {
        out[i * nt + n] = *v;
    }
    out
}

fn gather(disc: &Discretization, field: &[f64]) -> Vec<f64> {
    let nt = disc.axis.nodes;
    disc.dofs.iter().map(|&(i, n)| field[i * nt + n]).collect()
}

struct LinearState {
    dn: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    sols: Vec<SpaceTimeField>,
}

fn linear_state(disc: &Discretization, spec: &ProblemSpec, observed: &DnMatrix) -> Result<LinearState> {
    let sols = input_solutions(disc, spec, &observed.inputs)?;
    let adj = test_solutions(disc, spec, &observed.tests)?;
    let dn = dn_from_solutions(disc, spec, &sols, &observed.tests)?.map(|z| z.re);
    Ok(LinearState { dn, u: dof_matrix(disc, &sols), v: dof_matrix(disc, &adj), sols })
}

/// Recovers `q` on `Q` from DN data, starting from the reference problem `spec0`.
///
/// Linearized mode solves the identity with both solutions taken from `spec0`;
/// fixed-point mode refreshes them with the current iterate and backtracks so that the
/// misfit never increases.
pub fn recover_potential(
    disc: &Discretization,
    observed: &DnMatrix,
    spec0: &ProblemSpec,
    mode: RecoveryMode,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    check_data(disc, observed, spec0)?;
    if mode == RecoveryMode::Constructive {
        return Err(Error::Config("constructive mode applies to the drift problem".into()));
    }
    let obs = observed.real_part();
    let w = disc.weight();
    let mut spec = spec0.clone();
    let mut state = linear_state(disc, &spec, observed)?;
    let base = (&obs - &state.dn).norm();
    let mut misfit = vec![1.0];
    let mut rank = 0;
    let iterations = if mode == RecoveryMode::Linearized { 1 } else { opts.max_iter };
    for it in 0..iterations {
        if base == 0.0 {
            break;
        }
        let current = *misfit.last().unwrap();
        let s = sensitivity(w, &state.u, &state.v);
        let r = flatten(&(&obs - &state.dn));
        let eps = if mode == RecoveryMode::Linearized { opts.epsilon } else { opts.epsilon_at(it) };
        let (dq, rk) = tikhonov(&s, &r, eps);
        rank = rk;
        let step = scatter(disc, dq.as_slice());
        if mode == RecoveryMode::Linearized {
            for (q, d) in spec.potential.iter_mut().zip(&step) {
                *q += d;
            }
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let mut trial = spec.clone();
            for (q, d) in trial.potential.iter_mut().zip(&step) {
                *q += scale * d;
            }
            if let Ok(st) = linear_state(disc, &trial, observed) {
                let m = (&obs - &st.dn).norm() / base;
                if m <= current {
                    accepted = Some((trial, st, m));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, st, m)) = accepted else { break };
        spec = trial;
        state = st;
        misfit.push(m);
        if current - m <= opts.stall * current || m <= 1e-12 {
            break;
        }
    }
    if mode == RecoveryMode::Linearized && base > 0.0 {
        let st = linear_state(disc, &spec, observed)?;
        misfit.push((&obs - &st.dn).norm() / base);
    }
    Ok(RecoveryResult {
        potential: spec.potential,
        drift: spec0.drift.clone(),
        misfit,
        epsilon: opts.epsilon,
        mode,
        effective_rank: rank,
    })
}

fn time_bump(disc: &Discretization, centre: f64, width: f64, profile: impl Fn([f64; 2]) -> f64) -> SpaceTimeField {
    let horizon = disc.axis.horizon;
    disc.field_from(|x, t| {
        if t.abs() < horizon {
            profile(x) * (-((t - centre) / width).powi(2)).exp()
        } else {
            0.0
        }
    })
}

type Fitted = (Vec<f64>, Vec<Vec<f64>>, DVector<f64>);

/// Rows of the identity for Runge-fitted inputs `ψ̃_k` paired with every test:
/// `Σ_d w [δq ψ̃_k + Σ_a δb_a ∂_a ψ̃_k](d) v(d, j) = ⟨ΔΛ f_k, g_j⟩`.
fn constructive_rows(disc: &Discretization, state: &LinearState, delta: &DMatrix<f64>, inputs: &[Atom], runge_eps: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = disc.grid.dim;
    let p = disc.n_dofs();
    let w = disc.weight();
    let nj = state.v.ncols();
    let system = RungeSystem::from_solutions(disc, inputs, state.sols.clone());
    let slots = disc.axis.interior();
    let width = 2.0 * disc.axis.dt();
    let mut fitted: Vec<Fitted> = Vec::new();
    // ψ = χ_k(t) has no spatial gradient; ψ = x_a χ_k(t) has ∇ψ = e_a χ_k
    let profiles: Vec<Box<dyn Fn([f64; 2]) -> f64>> =
        std::iter::once(Box::new(|_: [f64; 2]| 1.0) as Box<dyn Fn([f64; 2]) -> f64>)
            .chain((0..dim).map(|a| Box::new(move |x: [f64; 2]| x[a]) as Box<dyn Fn([f64; 2]) -> f64>))
            .collect();
    for profile in &profiles {
        for &n in &slots {
            let target = time_bump(disc, disc.axis.time(n), width, profile);
            let fit = system.fit(&target, runge_eps)?;
            let vals = disc.restrict(&fit.solution);
            let grads = (0..dim)
                .map(|a| gradient_matrix(disc, std::slice::from_ref(&fit.solution), a).column(0).as_slice().to_vec())
                .collect();
            fitted.push((vals, grads, delta * DVector::from_column_slice(&fit.coefficients)));
        }
    }
    let rows = fitted.len() * nj;
    let a = DMatrix::from_fn(rows, p * (dim + 1), |row, col| {
        let (k, j) = (row / nj, row % nj);
        let (block, d) = (col / p, col % p);
        let e = &fitted[k];
        let c = if block == 0 { e.0[d] } else { e.1[block - 1][d] };
        w * c * state.v[(d, j)]
    });
    let r = DVector::from_fn(rows, |row, _| fitted[row / nj].2[row % nj]);
    Ok((a, r))
}

/// Recovers `(b, q)` from DN data of the drift problem.
///
/// Constructive mode follows the uniqueness argument: Runge fits of targets
/// `ψ_k = χ_k(t)` (no spatial gradient, so the drift pairing drops up to the fit error)
/// and `x_a χ_k(t)` (gradient `e_a χ_k`) are paired with every test solution through the
/// integral identity. The exact fitted `ψ̃` and `∇ψ̃` enter the equations, which are
/// solved for `(δq, δb)` together. Fixed-point mode is a joint Gauss–Newton iteration on
/// the whole DN misfit. Both iterative modes refresh the solutions with the current
/// iterate and backtrack so the misfit never increases; linearized mode takes one step.
pub fn recover_drift_and_potential(
    disc: &Discretization,
    observed: &DnMatrix,
    spec0: &ProblemSpec,
    mode: RecoveryMode,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    check_data(disc, observed, spec0)?;
    if spec0.s <= 0.5 {
        return Err(Error::Config(format!("drift terms need s > 1/2 for well-posedness, got s = {}", spec0.s)));
    }
    let dim = disc.grid.dim;
    let obs = observed.real_part();
    let w = disc.weight();
    let p = disc.n_dofs();
    let mut spec = spec0.clone();
    if spec.drift.is_none() {
        spec.drift = Some(vec![[0.0; 2]; spec.potential.len()]);
    }
    let mut state = linear_state(disc, &spec, observed)?;
    let base = (&obs - &state.dn).norm();
    let mut misfit = vec![1.0];
    let mut rank = 0;
    let apply_update = |spec: &mut ProblemSpec, x: &DVector<f64>, scale: f64| {
        for (q, d) in spec.potential.iter_mut().zip(scatter(disc, x.rows(0, p).as_slice())) {
            *q += scale * d;
        }
        let b = spec.drift.as_mut().unwrap();
        for a in 0..dim {
            for (v, d) in b.iter_mut().zip(scatter(disc, x.rows((a + 1) * p, p).as_slice())) {
                v[a] += scale * d;
            }
        }
    };
    let iterations = if mode == RecoveryMode::Linearized { 1 } else { opts.max_iter };
    for it in 0..iterations {
        if base == 0.0 {
            break;
        }
        let current = *misfit.last().unwrap();
        let eps = if mode == RecoveryMode::Linearized { opts.epsilon } else { opts.epsilon_at(it) };
        let delta = &obs - &state.dn;
        let (s, r) = match mode {
            RecoveryMode::Constructive => constructive_rows(disc, &state, &delta, &observed.inputs, opts.runge_epsilon)?,
            RecoveryMode::Linearized | RecoveryMode::FixedPoint => {
                let mut blocks = vec![sensitivity(w, &state.u, &state.v)];
                for a in 0..dim {
                    blocks.push(sensitivity(w, &gradient_matrix(disc, &state.sols, a), &state.v));
                }
                let rows = blocks[0].nrows();
                (DMatrix::from_fn(rows, p * (dim + 1), |r, c| blocks[c / p][(r, c % p)]), flatten(&delta))
            }
        };
        let (x, rk) = tikhonov(&s, &r, eps);
        rank = rk;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let mut trial = spec.clone();
            apply_update(&mut trial, &x, scale);
            if let Ok(st) = linear_state(disc, &trial, observed) {
                let m = (&obs - &st.dn).norm() / base;
                if mode == RecoveryMode::Linearized || m <= current {
                    accepted = Some((trial, st, m));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, st, m)) = accepted else { break };
        spec = trial;
        state = st;
        misfit.push(m);
        if current - m <= opts.stall * current || m <= 1e-12 {
            break;
        }
    }
    Ok(RecoveryResult {
        potential: spec.potential,
        drift: spec.drift,
        misfit,
        epsilon: opts.epsilon,
        mode,
        effective_rank: rank,
    })
}

/// Relative discrete L²(Q) error of `estimate` against `truth` over the unknowns.
pub fn relative_error_on_q(disc: &Discretization, estimate: &[f64], truth: &[f64]) -> f64 {
    let (e, t) = (gather(disc, estimate), gather(disc, truth));
    let num: f64 = e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = t.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Drift component `axis` as a flat array.
pub fn drift_component(b: &[[f64; 2]], axis: usize) -> Vec<f64> {
    b.iter().map(|v| v[axis]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientField;
    use crate::elliptic::{assemble_elliptic, Boundary};
    use crate::forward::bilinear_form;
    use crate::fractional::apply_hs;
    use crate::grid::{build_grid, desk_1d};
    use crate::spacetime::TimeAxis;
    use crate::spectral::eigendecompose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn desk(nodes: usize, nt: usize) -> Discretization {
        let g = build_grid(&desk_1d(nodes)).unwrap();
        let a = CoefficientField::identity();
        let b = eigendecompose(&assemble_elliptic(&g, &a, Boundary::Dirichlet), &g, "t", 4096).unwrap();
        Discretization::new(g, b, TimeAxis::new(nt, 1.0, 2.0).unwrap()).unwrap()
    }

    fn random_potential(disc: &Discretization, rng: &mut ChaCha8Rng, amp: f64) -> ProblemSpec {
        let c: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        ProblemSpec::new(disc, 0.5).with_potential(disc, move |x, t| amp * (c[0] + c[1] * x[0] + c[2] * t))
    }

    fn random_exterior(disc: &Discretization, mask: &Mask, rng: &mut ChaCha8Rng) -> SpaceTimeField {
        let mut f = disc.zero_field();
        for &i in &mask.nodes {
            for n in disc.axis.interior() {
                f.set(i, n, Complex64::new(rng.random_range(-1.0..1.0), 0.0));
            }
        }
        f
    }

    #[test]
    fn atoms_cover_patch_and_window() {
        let disc = desk(32, 16);
        let atoms = indicator_atoms(&disc, &disc.grid.w1, 1, 1);
        assert_eq!(atoms.len(), disc.grid.w1.len() * disc.axis.interior().len());
        assert_eq!(indicator_atoms(&disc, &disc.grid.w1, 2, 3).len(), disc.grid.w1.len().div_ceil(2) * 3);
        assert!(atoms[0].label.starts_with("w1@"));
    }

    #[test]
    fn dn_entries_match_pairings() {
        let disc = desk(32, 16);
        let inputs = indicator_atoms(&disc, &disc.grid.w1, 3, 2);
        let tests = indicator_atoms(&disc, &disc.grid.w2, 3, 2);
        let spec = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |x, _| 0.3 + x[0]);
        let dn = assemble_dn(&disc, &spec, &inputs, &tests).unwrap();
        let u = solve_forward_u(&disc, &spec, &inputs[1].field);
        let hu = apply_hs(&u, &disc.basis, 0.5, false).unwrap();
        for (j, g) in tests.iter().enumerate() {
            let direct = hu.pair(&g.field);
            let b = bilinear_form(&disc, &spec, &u, &g.field).unwrap();
            let scale = dn.norm();
            assert!((dn.data[(j, 1)] - direct).norm() <= 1e-12 * scale);
            assert!((dn.data[(j, 1)] - b).norm() <= 1e-12 * scale);
        }
    }

    fn solve_forward_u(disc: &Discretization, spec: &ProblemSpec, f: &SpaceTimeField) -> SpaceTimeField {
        PreparedProblem::new(disc, spec, false).unwrap().solve(f).unwrap().u
    }

    #[test]
    fn dn_ignores_values_inside_omega_and_is_adjoint_consistent() {
        let disc = desk(32, 16);
        let inputs = indicator_atoms(&disc, &disc.grid.w1, 3, 2);
        let tests = indicator_atoms(&disc, &disc.grid.w2, 3, 2);
        let spec = ProblemSpec::new(&disc, 0.6).with_potential(&disc, |x, t| 0.5 * x[0] * t + 0.2);
        let dn = assemble_dn(&disc, &spec, &inputs, &tests).unwrap();
        let mut touched = inputs.clone();
        let i = disc.grid.omega.nodes[2];
        touched[0].field.set(i, disc.axis.nodes / 2, Complex64::new(3.0, 0.0));
        let dn2 = assemble_dn(&disc, &spec, &touched, &tests).unwrap();
        let col = |d: &DnMatrix| d.data.column(0).into_owned();
        assert!((col(&dn) - col(&dn2)).norm() <= 1e-12 * dn.norm());
        // ⟨Λ f, g⟩ = B(f, u*_g)
        let prepared = PreparedProblem::new(&disc, &spec, true).unwrap();
        for (j, g) in tests.iter().enumerate().step_by(3) {
            let v = prepared.solve(&g.field).unwrap().u;
            for (i, f) in inputs.iter().enumerate().step_by(4) {
                let b = bilinear_form(&disc, &spec, &f.field, &v).unwrap();
                assert!((dn.data[(j, i)] - b).norm() <= 1e-10 * dn.norm(), "{} vs {}", dn.data[(j, i)], b);
            }
        }
    }

    #[test]
    fn identity_residuals_vanish() {
        let disc = desk(32, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (w1, w2) = (disc.grid.w1.clone(), disc.grid.w2.clone());
        for _ in 0..5 {
            let (s1, s2) = (random_potential(&disc, &mut rng, 0.4), random_potential(&disc, &mut rng, 0.4));
            let (f, g) = (random_exterior(&disc, &w1, &mut rng), random_exterior(&disc, &w2, &mut rng));
            let same = alessandrini_residual(&disc, &s1, &s1, &f, &g).unwrap();
            assert!(same.lhs.abs() <= 1e-12 * same.rhs.abs().max(1.0) && same.rhs == 0.0);
            let c = alessandrini_residual(&disc, &s1, &s2, &f, &g).unwrap();
            assert!(c.residual <= 1e-8, "{c:?}");
            assert!(c.lhs.abs() > 0.0);
        }
        let d1 = ProblemSpec::new(&disc, 0.75).with_drift(&disc, |x, t| [0.3 * x[0].cos() + 0.1 * t, 0.0]);
        let d2 = ProblemSpec::new(&disc, 0.75).with_potential(&disc, |x, _| 0.2 * x[0]).with_drift(&disc, |x, _| [-0.2 * x[0], 0.0]);
        let (f, g) = (random_exterior(&disc, &w1, &mut rng), random_exterior(&disc, &w2, &mut rng));
        let c = alessandrini_residual(&disc, &d1, &d2, &f, &g).unwrap();
        assert!(c.residual <= 1e-8, "{c:?}");
        let other = ProblemSpec::new(&disc, 0.6);
        assert!(alessandrini_residual(&disc, &d1, &other, &f, &g).is_err());
    }

    #[test]
    fn runge_fit_basics() {
        let disc = desk(32, 16);
        let mut inputs = indicator_atoms(&disc, &disc.grid.w1, 1, 1);
        inputs.extend(indicator_atoms(&disc, &disc.grid.w2, 1, 1));
        let spec = ProblemSpec::new(&disc, 0.5);
        let sys = RungeSystem::new(&disc, &spec, &inputs).unwrap();
        let zero = sys.fit(&disc.zero_field(), 1e-8).unwrap();
        assert_eq!(zero.residual, 0.0);
        assert!(zero.coefficients.iter().all(|&c| c == 0.0));
        assert!(matches!(sys.fit(&disc.zero_field(), 0.0), Err(Error::Domain(_))));
        let target = disc.field_from(|x, t| if x[0].abs() < 1.0 && t.abs() < 1.0 { (1.0 - x[0] * x[0]) * (1.0 - t * t) } else { 0.0 });
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let fit = sys.fit(&target, eps).unwrap();
            assert!(fit.residual <= last);
            last = fit.residual;
            // reported residual matches the achieved field
            let mut num = 0.0;
            let mut den = 0.0;
            for &i in &disc.grid.omega.nodes {
                for n in 0..disc.axis.nodes {
                    let t = target.get(i, n).re;
                    let got = if disc.dof(i, n).is_some() { fit.solution.get(i, n).re } else { 0.0 };
                    num += (got - t).powi(2);
                    den += t * t;
                }
            }
            assert!(((num / den).sqrt() - fit.residual).abs() <= 1e-8);
        }
    }

    #[test]
    fn tikhonov_recovers_well_posed_systems() {
        let s = DMatrix::from_fn(6, 3, |i, j| ((i + 1) as f64).powi(j as i32));
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (got, rank) = tikhonov(&s, &(&s * &x), 1e-14);
        assert_eq!(rank, 3);
        assert!((got - x).norm() < 1e-6);
    }

    #[test]
    fn recovery_from_reference_data_is_trivial() {
        let disc = desk(32, 16);
        let inputs = indicator_atoms(&disc, &disc.grid.w1, 2, 1);
        let tests = indicator_atoms(&disc, &disc.grid.w2, 2, 1);
        let spec0 = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |x, _| 0.1 * x[0]);
        let dn = assemble_dn(&disc, &spec0, &inputs, &tests).unwrap();
        let r = recover_potential(&disc, &dn, &spec0, RecoveryMode::FixedPoint, &RecoveryOptions::default()).unwrap();
        assert_eq!(r.potential, spec0.potential);
        let spec0 = ProblemSpec::new(&disc, 0.75).with_drift(&disc, |x, _| [0.1 * x[0], 0.0]);
        let dn = assemble_dn(&disc, &spec0, &inputs, &tests).unwrap();
        let r = recover_drift_and_potential(&disc, &dn, &spec0, RecoveryMode::Constructive, &RecoveryOptions::default()).unwrap();
        assert_eq!(r.drift, spec0.drift);
        let bad = ProblemSpec::new(&disc, 0.4);
        assert!(recover_drift_and_potential(&disc, &dn, &bad, RecoveryMode::Constructive, &RecoveryOptions::default()).is_err());
    }

    #[test]
    fn linearized_recovery_on_coarse_desk() {
        let disc = desk(32, 16);
        let inputs = indicator_atoms(&disc, &disc.grid.w1, 1, 1);
        let tests = indicator_atoms(&disc, &disc.grid.w2, 1, 1);
        let truth = ProblemSpec::new(&disc, 0.5).with_potential(&disc, |x, _| 1e-3 * (PI * x[0]).sin());
        let dn = assemble_dn(&disc, &truth, &inputs, &tests).unwrap();
        let spec0 = ProblemSpec::new(&disc, 0.5);
        let r = recover_potential(&disc, &dn, &spec0, RecoveryMode::Linearized, &RecoveryOptions::default()).unwrap();
        let err = relative_error_on_q(&disc, &r.potential, &truth.potential);
        assert!(err < 0.05, "{err}");
        assert!(r.misfit[1] < 0.01);
    }

    #[test]
    fn drift_changes_the_data() {
        let disc = desk(32, 16);
        let inputs = indicator_atoms(&disc, &disc.grid.w1, 3, 2);
        let tests = indicator_atoms(&disc, &disc.grid.w2, 3, 2);
        let base = ProblemSpec::new(&disc, 0.75).with_potential(&disc, |x, _| 0.2 * x[0]);
        let d0 = assemble_dn(&disc, &base, &inputs, &tests).unwrap();
        for (k, db) in [0.05, -0.02, 1e-3].into_iter().enumerate() {
            // a drift perturbation paired with any potential change still moves the data
            let pert = base.clone().with_drift(&disc, move |x, t| [db * (1.0 + x[0] * (k as f64 + t)), 0.0]);
            let d1 = assemble_dn(&disc, &pert, &inputs, &tests).unwrap();
            assert!((&d1.data - &d0.data).norm() > 1e-8 * d0.norm());
        }
    }
}
