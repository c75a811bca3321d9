//! Numeric checks of the analytic ingredients behind unique continuation for the
//! extension problem: the Carleman weight ODE, a logarithmic inequality, a Gaussian
//! Hardy inequality, the Carleman functionals and monotonicity/doubling diagnostics.
//!
//! Everything here works in `n = 1` horizontal dimension, so points of the upper
//! half-space are `X = (x, y)` with `y > 0` and weight `y^a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::extension::ExtensionField;
use crate::grid::Grid;
use crate::quadrature::{gauss_jacobi, gauss_legendre};
use crate::{Error, Result};

/// Largest constant the bisections will accept.
pub const N_CAP: f64 = 1e3;

/// `θ(t) = t^{1/2} (log 1/t)^{3/2}` on `(0, 1)`, extended by zero.
pub fn theta(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        t.sqrt() * (-t.ln()).powf(1.5)
    }
}

/// Parameters of the Carleman estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanSetup {
    pub alpha: f64,
    pub delta: f64,
    /// Horizontal dimension.
    pub n: usize,
    pub a: f64,
}

impl CarlemanSetup {
    pub fn new(alpha: f64, delta: f64, a: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(a > -1.0 && a < 1.0) {
            return Err(Error::Domain(format!("weight exponent must lie in (−1, 1), got {a}")));
        }
        Ok(CarlemanSetup { alpha, delta, n: 1, a })
    }

    /// `λ = α/δ²`.
    pub fn lambda(&self) -> f64 {
        self.alpha / (self.delta * self.delta)
    }

    /// Largest admissible lower time limit `1/(5λ)`.
    pub fn c_max(&self) -> f64 {
        0.2 / self.lambda()
    }

    /// `μ = (n − 1 + a)/2`.
    pub fn mu(&self) -> f64 {
        0.5 * (self.n as f64 - 1.0 + self.a)
    }

    /// `G = t^{−(n+1+a)/2} e^{−|X|²/4t}` as a function of `|X|²`.
    pub fn gaussian(&self, r2: f64, t: f64) -> f64 {
        t.powf(-0.5 * (self.n as f64 + 1.0 + self.a)) * (-r2 / (4.0 * t)).exp()
    }
}

/// Solution of the weight ODE on a time grid.
#[derive(Debug, Clone)]
pub struct CarlemanWeight {
    pub lambda: f64,
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub dsigma: Vec<f64>,
    /// `log(tσ'/σ)`.
    log_rho: Vec<f64>,
    /// `log(σ/t)`.
    log_ratio: Vec<f64>,
}

impl CarlemanWeight {
    /// Start of integration, `10⁻⁸/λ`.
    pub fn t_start(lambda: f64) -> f64 {
        1e-8 / lambda
    }

    /// `(σ, σ')` at any `t` inside the grid by cubic Hermite interpolation in `log t`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let (lo, hi) = (self.t[0], *self.t.last().unwrap());
        if !(t >= lo * (1.0 - 1e-12) && t <= hi * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("time {t:e} outside the weight grid [{lo:e}, {hi:e}]")));
        }
        if self.t.len() == 1 {
            return Ok((self.sigma[0], self.dsigma[0]));
        }
        let u = t.ln();
        let k = self.t.partition_point(|&tk| tk <= t).clamp(1, self.t.len() - 1);
        let (u0, u1) = (self.t[k - 1].ln(), self.t[k].ln());
        let hh = u1 - u0;
        let s = (u - u0) / hh;
        let (h00, h10, h01, h11) = (
            2.0 * s.powi(3) - 3.0 * s * s + 1.0,
            s.powi(3) - 2.0 * s * s + s,
            -2.0 * s.powi(3) + 3.0 * s * s,
            s.powi(3) - s * s,
        );
        let herm = |y0: f64, y1: f64, d0: f64, d1: f64| h00 * y0 + h10 * hh * d0 + h01 * y1 + h11 * hh * d1;
        let lr = herm(
            self.log_rho[k - 1],
            self.log_rho[k],
            -theta(self.lambda * self.t[k - 1]),
            -theta(self.lambda * self.t[k]),
        );
        let ll = herm(
            self.log_ratio[k - 1],
            self.log_ratio[k],
            self.log_rho[k - 1].exp() - 1.0,
            self.log_rho[k].exp() - 1.0,
        );
        let sigma = t * ll.exp();
        Ok((sigma, (lr + ll).exp()))
    }
}

/// Log-spaced grid from `10⁻⁸/λ` to `1/λ`.
pub fn log_grid(lambda: f64, points: usize) -> Vec<f64> {
    let (a, b) = (CarlemanWeight::t_start(lambda).ln(), (1.0 / lambda).ln());
    (0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect()
}

// Dormand–Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrates `d/dt log(σ/(tσ')) = θ(λt)/t` from `t₀ = 10⁻⁸/λ` with `σ ≈ t`, `σ' ≈ 1`.
///
/// In log-time `u = log t` the state `(log ρ, log(σ/t))` with `ρ = tσ'/σ` obeys
/// `d log ρ/du = −θ(λe^u)` and `d log(σ/t)/du = ρ − 1`.
pub fn solve_sigma_ode(lambda: f64, t_grid: &[f64]) -> Result<CarlemanWeight> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let t0 = CarlemanWeight::t_start(lambda);
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("time grid must be nonempty and strictly increasing".into()));
    }
    if t_grid[0] < t0 * (1.0 - 1e-12) || *t_grid.last().unwrap() > (1.0 + 1e-12) / lambda {
        return Err(Error::Domain(format!("time grid must lie in [{t0:e}, 1/λ]")));
    }
    let rhs = |u: f64, y: [f64; 2]| [-theta(lambda * u.exp()), y[0].exp() - 1.0];
    let (rtol, atol) = (1e-12, 1e-14);
    let mut u = t0.ln();
    let mut y = [0.0, 0.0];
    let mut h: f64 = 1e-3;
    let mut out = Vec::with_capacity(t_grid.len());
    for &tg in t_grid {
        let target = tg.ln().max(t0.ln());
        let mut steps = 0usize;
        while u < target - 1e-15 {
            steps += 1;
            if steps > 1_000_000 || h < 1e-14 {
                return Err(Error::NotConverged(vec![u.exp()]));
            }
            let hs = h.min(target - u);
            let mut k = [[0.0; 2]; 7];
            for i in 0..7 {
                let mut yi = y;
                for (j, kj) in k.iter().enumerate().take(i) {
                    yi[0] += hs * DP_A[i][j] * kj[0];
                    yi[1] += hs * DP_A[i][j] * kj[1];
                }
                k[i] = rhs(u + DP_C[i] * hs, yi);
            }
            let ynew = [
                y[0] + hs * (0..6).map(|j| DP_A[6][j] * k[j][0]).sum::<f64>(),
                y[1] + hs * (0..6).map(|j| DP_A[6][j] * k[j][1]).sum::<f64>(),
            ];
            let mut err: f64 = 0.0;
            for c in 0..2 {
                let e = hs * (0..7).map(|j| DP_E[j] * k[j][c]).sum::<f64>();
                let sc = atol + rtol * ynew[c].abs().max(y[c].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() {
                h *= 0.2;
                continue;
            }
            if err <= 1.0 {
                u += hs;
                y = ynew;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = hs * fac;
        }
        out.push(y);
    }
    let log_rho: Vec<f64> = out.iter().map(|y| y[0]).collect();
    let log_ratio: Vec<f64> = out.iter().map(|y| y[1]).collect();
    let sigma: Vec<f64> = t_grid.iter().zip(&log_ratio).map(|(t, l)| t * l.exp()).collect();
    let dsigma: Vec<f64> = log_rho.iter().zip(&log_ratio).map(|(r, l)| (r + l).exp()).collect();
    Ok(CarlemanWeight { lambda, t: t_grid.to_vec(), sigma, dsigma, log_rho, log_ratio })
}

/// Three-point derivative on a nonuniform grid, one-sided at the ends.
pub fn fd_nonuniform(t: &[f64], f: &[f64]) -> Vec<f64> {
    let n = t.len();
    assert!(n >= 3 && f.len() == n);
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        d[i] = -h2 / (h1 * (h1 + h2)) * f[i - 1] + (h2 - h1) / (h1 * h2) * f[i] + h1 / (h2 * (h1 + h2)) * f[i + 1];
    }
    let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
    d[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * f[0] + (h1 + h2) / (h1 * h2) * f[1] - h1 / (h2 * (h1 + h2)) * f[2];
    let (h1, h2) = (t[n - 2] - t[n - 3], t[n - 1] - t[n - 2]);
    d[n - 1] = h2 / (h1 * (h1 + h2)) * f[n - 3] - (h1 + h2) / (h1 * h2) * f[n - 2]
        + (h1 + 2.0 * h2) / (h2 * (h1 + h2)) * f[n - 1];
    d
}

/// Outcome of the four weight properties.
#[derive(Debug, Clone)]
pub struct SigmaReport {
    /// Smallest `N ≤ N_CAP` for which all properties hold on the grid.
    pub n_rep: Option<f64>,
    /// Relative slack `(bound − value)/bound` minimised over the grid, per property, at `n_rep`.
    pub margins: [f64; 4],
    /// `σ ≤ t` and `σ' ≤ 1` hold on the grid (these do not depend on `N`).
    pub upper_bounds_hold: bool,
    /// Rate inside the bound of property (4), `θ(γt)/t`.
    pub gamma: f64,
}

struct SigmaDemands {
    lower1: Vec<f64>,
    lower2: Vec<f64>,
    p3: Vec<f64>,
    p4: Vec<f64>,
    theta4: Vec<f64>,
}

fn sigma_demands(w: &CarlemanWeight, gamma: f64) -> SigmaDemands {
    let t = &w.t;
    let lower1: Vec<f64> = w.sigma.iter().zip(t).map(|(s, t)| s / t).collect();
    let lower2 = w.dsigma.clone();
    // σ log(σ/(σ't)) = −σ log ρ and σ log(σ/σ') = σ(log t − log ρ)
    let f1: Vec<f64> = w.sigma.iter().zip(&w.log_rho).map(|(s, r)| -s * r).collect();
    let f2: Vec<f64> = (0..t.len()).map(|i| w.sigma[i] * (t[i].ln() - w.log_rho[i])).collect();
    let (d1, d2) = (fd_nonuniform(t, &f1), fd_nonuniform(t, &f2));
    let p3: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a.abs() + b.abs()).collect();
    let l: Vec<f64> = w.log_rho.iter().map(|r| -r).collect();
    let dl = fd_nonuniform(t, &l);
    let g: Vec<f64> = dl.iter().zip(&w.dsigma).map(|(d, s)| d / s).collect();
    let dg = fd_nonuniform(t, &g);
    let p4: Vec<f64> = dg.iter().zip(&w.sigma).map(|(d, s)| (s * d).abs()).collect();
    let theta4: Vec<f64> = t.iter().map(|&t| theta(gamma * t) / t).collect();
    SigmaDemands { lower1, lower2, p3, p4, theta4 }
}

fn sigma_slacks(d: &SigmaDemands, n: f64) -> [f64; 4] {
    let e = (-n).exp();
    let mut m = [f64::INFINITY; 4];
    for i in 0..d.p3.len() {
        m[0] = m[0].min((d.lower1[i] - e) / d.lower1[i]);
        m[1] = m[1].min((d.lower2[i] - e) / d.lower2[i]);
        let b3 = 3.0 * n;
        m[2] = m[2].min((b3 - d.p3[i]) / b3);
        let b4 = 3.0 * n * n.exp() * d.theta4[i];
        m[3] = m[3].min(if b4 > 0.0 { (b4 - d.p4[i]) / b4 } else if d.p4[i] == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    m
}

/// Finds the smallest `N` with the four properties on the grid by bisection. The rate
/// inside property (4) is taken as `γ = λ/e`, which keeps the bound positive up to `λt = 1`.
pub fn check_sigma_properties(w: &CarlemanWeight) -> Result<SigmaReport> {
    if w.t.len() < 3 {
        return Err(Error::Domain("need at least three grid points".into()));
    }
    let gamma = w.lambda / std::f64::consts::E;
    let d = sigma_demands(w, gamma);
    let upper_bounds_hold = d.lower1.iter().all(|&r| r <= 1.0 + 1e-12) && d.lower2.iter().all(|&r| r <= 1.0 + 1e-12);
    let ok = |n: f64| sigma_slacks(&d, n).iter().all(|&m| m >= 0.0);
    if !upper_bounds_hold || !ok(N_CAP) {
        return Ok(SigmaReport { n_rep: None, margins: sigma_slacks(&d, N_CAP), upper_bounds_hold, gamma });
    }
    let (mut lo, mut hi) = (0.0, N_CAP);
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SigmaReport { n_rep: Some(hi), margins: sigma_slacks(&d, hi), upper_bounds_hold, gamma })
}

/// Checks `θ(λt)/t ≥ λ` for grid points with `λt ≤ 1/3`; returns (violations, smallest ratio).
pub fn large_rate_check(w: &CarlemanWeight) -> (usize, f64) {
    let mut viol = 0;
    let mut worst = f64::INFINITY;
    for &t in &w.t {
        if w.lambda * t <= 1.0 / 3.0 {
            let r = theta(w.lambda * t) / t / w.lambda;
            worst = worst.min(r);
            if r < 1.0 {
                viol += 1;
            }
        }
    }
    (viol, worst)
}

/// Generic pass/fail summary of a sampled inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub check: String,
    pub samples: usize,
    pub skipped: usize,
    pub violations: usize,
    /// Relative slack per accepted sample.
    pub margins: Vec<f64>,
    pub constants: Vec<(String, f64)>,
    pub seed: Option<u64>,
}

impl InequalityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.skipped < self.samples
    }

    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `y^m e^{−y} / (ε + (log 1/ε)^m e^{−y})`.
pub fn log_ratio(m: f64, y: f64, eps: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    let l = (1.0 / eps).ln();
    y.powf(m) / (eps * y.exp() + l.powf(m))
}

/// Empirical constant of the logarithmic inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct LogInequality {
    pub m: f64,
    pub c_m: f64,
    /// `(y, ε)` where the supremum was found.
    pub argmax: (f64, f64),
    pub dense_points: usize,
    pub violations: usize,
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Default grids: `y ∈ [0, 200]` and `ε` log-spaced in `[10⁻⁸, 1 − 10⁻⁶]`.
pub fn log_inequality_grids(ny: usize, neps: usize) -> (Vec<f64>, Vec<f64>) {
    let y = (0..ny).map(|i| 200.0 * i as f64 / (ny - 1) as f64).collect();
    let (a, b) = (1e-8f64.ln(), (1.0f64 - 1e-6).ln());
    let e = (0..neps).map(|i| (a + (b - a) * i as f64 / (neps - 1) as f64).exp()).collect();
    (y, e)
}

fn refine(v: &[f64], k: usize, log: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity((v.len() - 1) * k + 1);
    for w in v.windows(2) {
        for j in 0..k {
            let s = j as f64 / k as f64;
            out.push(if log { (w[0].ln() * (1.0 - s) + w[1].ln() * s).exp() } else { w[0] * (1.0 - s) + w[1] * s });
        }
    }
    out.push(*v.last().unwrap());
    out
}

/// Supremum of [`log_ratio`] over the grid, with each `ε`-row maximised exactly in `y`
/// (the ratio is unimodal in `y`), then validated on a grid four times denser.
pub fn log_inequality_constant(m: f64, y_grid: &[f64], eps_grid: &[f64]) -> Result<LogInequality> {
    if !(m > 0.0) {
        return Err(Error::Domain(format!("exponent m must be positive, got {m}")));
    }
    if y_grid.len() < 3 || eps_grid.len() < 2 {
        return Err(Error::Domain("grids too small".into()));
    }
    if eps_grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) || y_grid.iter().any(|&y| y < 0.0) {
        return Err(Error::Domain("need y ≥ 0 and 0 < ε < 1".into()));
    }
    let row_max = |eps: f64, ys: &[f64]| -> (f64, f64) {
        let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
        for (i, &y) in ys.iter().enumerate() {
            let v = log_ratio(m, y, eps);
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        let (a, b) = (ys[bi.saturating_sub(1)], ys[(bi + 1).min(ys.len() - 1)]);
        let (y, v) = golden_max(|y| log_ratio(m, y, eps), a, b);
        if v > bv {
            (y, v)
        } else {
            (ys[bi], bv)
        }
    };
    let mut c_m = f64::NEG_INFINITY;
    let mut argmax = (0.0, 0.0);
    for &eps in eps_grid {
        let (y, v) = row_max(eps, y_grid);
        if v > c_m {
            c_m = v;
            argmax = (y, eps);
        }
    }
    let dy = refine(y_grid, 4, false);
    let de = refine(eps_grid, 4, true);
    let mut violations = 0;
    for &eps in &de {
        for &y in &dy {
            if log_ratio(m, y, eps) > c_m * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }
    Ok(LogInequality { m, c_m, argmax, dense_points: dy.len() * de.len(), violations })
}

/// One Gaussian-times-quadratic term of a Hardy test function:
/// `P((X − c)/w) e^{−|X − c|²/2w²}` with `P` in the monomials `1, ξ, η, ξ², ξη, η²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpTerm {
    pub center: [f64; 2],
    pub width: f64,
    pub poly: [f64; 6],
}

impl BumpTerm {
    fn poly_at(&self, xi: f64, eta: f64) -> f64 {
        let p = &self.poly;
        p[0] + p[1] * xi + p[2] * eta + p[3] * xi * xi + p[4] * xi * eta + p[5] * eta * eta
    }
}

/// Sum of bump terms, evaluated on tensor grids with separable exponentials.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpSum {
    pub terms: Vec<BumpTerm>,
}

impl BumpSum {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let (xi, eta) = ((x[0] - t.center[0]) / t.width, (x[1] - t.center[1]) / t.width);
                t.poly_at(xi, eta) * (-0.5 * (xi * xi + eta * eta)).exp()
            })
            .sum()
    }

    fn random(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let k = rng.random_range(1..=5);
        let terms = (0..k)
            .map(|_| {
                let center = [rng.random_range(-2.0..2.0) * scale, rng.random_range(0.0..2.0) * scale];
                let width = rng.random_range(0.3..1.2) * scale;
                let mut poly = [0.0; 6];
                for p in poly.iter_mut() {
                    *p = rng.random_range(-1.0..1.0);
                }
                BumpTerm { center, width, poly }
            })
            .collect();
        BumpSum { terms }
    }
}

/// Composite rule on `[lo, hi]` with `panels` Gauss–Legendre panels of `order` points.
fn composite(lo: f64, hi: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(order);
    let mut x = Vec::with_capacity(panels * order);
    let mut w = Vec::with_capacity(panels * order);
    let hp = (hi - lo) / panels as f64;
    for p in 0..panels {
        let c = lo + (p as f64 + 0.5) * hp;
        for (xi, wi) in gx.iter().zip(&gw) {
            x.push(c + 0.5 * hp * xi);
            w.push(0.5 * hp * wi);
        }
    }
    (x, w)
}

/// Rule for `∫₀^R y^a f(y) dy`: Gauss–Jacobi on the first panel, Gauss–Legendre (with
/// `y^a` folded into the weights) on the rest.
fn weighted_half_line(r: f64, a: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let hp = r / panels as f64;
    let (jx, jw) = gauss_jacobi(order, a);
    let mut x: Vec<f64> = jx.iter().map(|v| v * hp).collect();
    let mut w: Vec<f64> = jw.iter().map(|v| v * hp.powf(a + 1.0)).collect();
    if panels > 1 {
        let (gx, gw) = composite(hp, r, panels - 1, order);
        for (xi, wi) in gx.into_iter().zip(gw) {
            w.push(wi * xi.powf(a));
            x.push(xi);
        }
    }
    (x, w)
}

/// Both sides of the Gaussian Hardy inequality for one test function, plus the change of
/// the gradient integral when the finite-difference step doubles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardySides {
    pub lhs: f64,
    pub rhs: f64,
    pub fd_change: f64,
}

/// `∫ y^a h² (|X|²/8b) e^{−|X|²/4b}` against
/// `2b ∫ y^a |∇h|² e^{−|X|²/4b} + ((n+1+a)/2) ∫ y^a h² e^{−|X|²/4b}` on the upper half-plane.
/// Gradients use fourth-order central differences.
pub fn hardy_sides(h: &BumpSum, b: f64, a: f64, panels: usize, order: usize, richardson: bool) -> HardySides {
    let r = 8.0 * b.sqrt();
    let (xs, wx) = composite(-r, r, 2 * panels, order);
    let (ys, wy) = weighted_half_line(r, a, panels, order);
    let min_w = h.terms.iter().map(|t| t.width).fold(f64::INFINITY, f64::min);
    let step = 1e-3 * if min_w.is_finite() { min_w } else { 1.0 };
    const OFF: [f64; 7] = [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0];
    // separable factors: e[term][offset][node]
    let table = |coords: &[f64], axis: usize| -> Vec<Vec<Vec<(f64, f64)>>> {
        h.terms
            .iter()
            .map(|t| {
                OFF.iter()
                    .map(|o| {
                        coords
                            .iter()
                            .map(|&c| {
                                let z = (c + o * step - t.center[axis]) / t.width;
                                (z, (-0.5 * z * z).exp())
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let tx = table(&xs, 0);
    let ty = table(&ys, 1);
    let value = |i: usize, ox: usize, j: usize, oy: usize| -> f64 {
        h.terms
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let (xi, ex) = tx[k][ox][i];
                let (eta, ey) = ty[k][oy][j];
                t.poly_at(xi, eta) * ex * ey
            })
            .sum()
    };
    let d1 = |f: &dyn Fn(usize) -> f64, wide: bool| -> f64 {
        // offsets indexed into OFF: −2:1 −1:2 0:3 1:4 2:5 (±4 at 0, 6)
        if wide {
            (f(0) - 8.0 * f(1) + 8.0 * f(5) - f(6)) / (24.0 * step)
        } else {
            (f(1) - 8.0 * f(2) + 8.0 * f(4) - f(5)) / (12.0 * step)
        }
    };
    let (mut l, mut g, mut g2, mut m0) = (0.0, 0.0, 0.0, 0.0);
    for (j, (&y, &wyj)) in ys.iter().zip(&wy).enumerate() {
        for (i, (&x, &wxi)) in xs.iter().zip(&wx).enumerate() {
            let r2 = x * x + y * y;
            let ww = wxi * wyj * (-r2 / (4.0 * b)).exp();
            if ww == 0.0 {
                continue;
            }
            let hv = value(i, 3, j, 3);
            let fx = |o: usize| value(i, o, j, 3);
            let fy = |o: usize| value(i, 3, j, o);
            let (hx, hy) = (d1(&fx, false), d1(&fy, false));
            l += ww * hv * hv * r2 / (8.0 * b);
            m0 += ww * hv * hv;
            g += ww * (hx * hx + hy * hy);
            if richardson {
                let (hx2, hy2) = (d1(&fx, true), d1(&fy, true));
                g2 += ww * (hx2 * hx2 + hy2 * hy2);
            }
        }
    }
    let n = 1.0;
    HardySides {
        lhs: l,
        rhs: 2.0 * b * g + 0.5 * (n + 1.0 + a) * m0,
        fd_change: if richardson && g > 0.0 { (g2 - g).abs() / g } else { 0.0 },
    }
}

/// Random battery for the Hardy inequality. Each sample is integrated at two quadrature
/// orders and skipped if they differ by more than `10⁻⁶` relative.
pub fn hardy_check(samples: usize, b: f64, n: usize, a: f64, seed: u64) -> Result<InequalityReport> {
    if !(b > 0.0) {
        return Err(Error::Domain(format!("b must be positive, got {b}")));
    }
    if !(a > -1.0 && a < 1.0) {
        return Err(Error::Domain(format!("a must lie in (−1, 1), got {a}")));
    }
    if n != 1 {
        return Err(Error::Domain(format!("only n = 1 is supported, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = InequalityReport {
        check: format!("hardy(b={b}, a={a})"),
        samples,
        skipped: 0,
        violations: 0,
        margins: Vec::with_capacity(samples),
        constants: Vec::new(),
        seed: Some(seed),
    };
    let mut worst_fd: f64 = 0.0;
    for _ in 0..samples {
        let h = BumpSum::random(&mut rng, b.sqrt());
        let coarse = hardy_sides(&h, b, a, 4, 16, false);
        let fine = hardy_sides(&h, b, a, 4, 24, true);
        let conv = |p: f64, q: f64| (p - q).abs() <= 1e-6 * q.abs().max(1e-300);
        if !conv(coarse.lhs, fine.lhs) || !conv(coarse.rhs, fine.rhs) {
            rep.skipped += 1;
            continue;
        }
        worst_fd = worst_fd.max(fine.fd_change);
        if fine.lhs > fine.rhs * (1.0 + 1e-12) {
            rep.violations += 1;
        }
        rep.margins.push((fine.rhs - fine.lhs) / fine.rhs);
    }
    rep.constants.push(("max_lhs_over_rhs".into(), 1.0 - rep.worst_margin()));
    rep.constants.push(("fd_richardson_change".into(), worst_fd));
    Ok(rep)
}

/// Test function `w = e^{−|X|²/2ρ²} φ(|X|/R) χ(λt)`, even in `y` so its weighted
/// Neumann derivative vanishes. `φ ≡ 1` on `[0, 1/2]` and vanishes beyond 1; `χ ≡ 1` on
/// `[0, 1/4]` and vanishes beyond `0.32 < 1/3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanTest {
    pub width: f64,
    pub radius: f64,
    /// Overall amplitude; zero gives the trivial function.
    pub amplitude: f64,
}

const CHI_FLAT: f64 = 0.25;
const CHI_END: f64 = 0.32;

/// `C^∞` step from 0 (`s ≤ 0`) to 1 (`s ≥ 1`).
fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let (p, q) = ((-1.0 / s).exp(), (-1.0 / (1.0 - s)).exp());
        p / (p + q)
    }
}

impl CarlemanTest {
    pub fn spatial(&self, x: [f64; 2]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let r = r2.sqrt() / self.radius;
        self.amplitude * (-0.5 * r2 / (self.width * self.width)).exp() * (1.0 - smooth_step(2.0 * r - 1.0))
    }

    pub fn temporal(&self, lambda: f64, t: f64) -> f64 {
        1.0 - smooth_step((lambda * t - CHI_FLAT) / (CHI_END - CHI_FLAT))
    }

    pub fn value(&self, lambda: f64, x: [f64; 2], t: f64) -> f64 {
        self.spatial(x) * self.temporal(lambda, t)
    }
}

/// Individual integrals of the Carleman estimate, all multiplied by `σ(c)^{2α}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanTerms {
    /// `α² ∫ y^a σ^{−2α} w² G`.
    pub lhs_zero: f64,
    /// `α ∫ y^a σ^{1−2α} |∇w|² G`.
    pub lhs_grad: f64,
    /// `∫ σ^{1−2α} y^{−a} |H̃w|² G`.
    pub rhs_operator: f64,
    /// `log₁₀` of the sup-term `α^{α} sup_t ∫ y^a (w² + t|∇w|²)` (exponent constant 1).
    pub sup_term_log10: f64,
    /// `−c ∫ y^a |∇w(c)|² G(c) + α ∫ y^a w(c)² G(c)`.
    pub boundary: f64,
    /// `(lhs_zero + lhs_grad) / (rhs_operator + sup term + boundary)`.
    pub ratio: f64,
    /// Relative change of `rhs_operator` when the difference step doubles.
    pub fd_change: f64,
    /// Relative change of the ratio under one quadrature refinement.
    pub quad_change: f64,
}

/// Coefficient matrix `A(X, t)` for the Carleman functionals.
pub type MatrixField<'a> = &'a dyn Fn([f64; 2], f64) -> [[f64; 2]; 2];

fn check_matrix(coeff: MatrixField, radius: f64, t_end: f64) -> Result<()> {
    let id = coeff([0.0, 0.0], 0.0);
    let close = |p: f64, q: f64| (p - q).abs() <= 1e-12;
    if !(close(id[0][0], 1.0) && close(id[1][1], 1.0) && close(id[0][1], 0.0) && close(id[1][0], 0.0)) {
        return Err(Error::Coefficient { location: "(0, 0; 0)".into(), reason: "A(0, 0) must be the identity".into() });
    }
    for i in 0..=8 {
        for j in 0..=4 {
            let x = [radius * (i as f64 / 4.0 - 1.0), radius * j as f64 / 4.0];
            for t in [0.0, t_end] {
                let m = coeff(x, t);
                if !(close(m[1][0], 0.0) && close(m[0][1], 0.0) && close(m[1][1], 1.0)) {
                    return Err(Error::Coefficient {
                        location: format!("({}, {}; {t})", x[0], x[1]),
                        reason: "the last row and column of A must be (0, 1)".into(),
                    });
                }
                if !(m[0][0] > 0.0) {
                    return Err(Error::Coefficient {
                        location: format!("({}, {}; {t})", x[0], x[1]),
                        reason: "A is not positive definite".into(),
                    });
                }
            }
        }
    }
    Ok(())
}

struct CarlemanPass {
    lhs_zero: f64,
    lhs_grad: f64,
    rhs_op: f64,
    rhs_op_wide: f64,
    boundary: f64,
    sup_log10: f64,
}

fn carleman_pass(
    test: &CarlemanTest,
    setup: &CarlemanSetup,
    weight: &CarlemanWeight,
    coeff: MatrixField,
    c: f64,
    space: usize,
    time: usize,
) -> Result<CarlemanPass> {
    let lam = setup.lambda();
    let (alpha, a) = (setup.alpha, setup.a);
    let t_end = CHI_END / lam;
    let hx = 1e-3 * test.width.min(test.radius);
    let ht = 1e-3 / lam;
    let (xg, xw) = gauss_legendre(space);
    let (yg, yw) = gauss_jacobi(space, a);
    let w = |x: [f64; 2], t: f64| test.value(lam, x, t);
    let a11 = |x: [f64; 2], t: f64| coeff(x, t)[0][0];
    let d1 = |f: &dyn Fn(f64) -> f64, h: f64| (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
    let d2 = |f: &dyn Fn(f64) -> f64, h: f64| {
        (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h) - f(2.0 * h)) / (12.0 * h * h)
    };
    // gradient and the bracket w_t + ∂x(a11 ∂x w) + ∂yy w + (a/y) ∂y w
    let local = |x: [f64; 2], t: f64, h: f64| -> (f64, f64) {
        let fx = |o: f64| w([x[0] + o, x[1]], t);
        let fy = |o: f64| w([x[0], x[1] + o], t);
        let ft = |o: f64| w(x, t + o);
        let (wx, wy) = (d1(&fx, h), d1(&fy, h));
        let (wxx, wyy) = (d2(&fx, h), d2(&fy, h));
        let wt = d1(&ft, ht);
        let ax = |o: f64| a11([x[0] + o, x[1]], t);
        let k = wt + a11(x, t) * wxx + d1(&ax, h) * wx + wyy + a / x[1] * wy;
        (wx * wx + wy * wy, k)
    };
    // spatial integrals (∫y^a w²G, ∫y^a|∇w|²G, ∫y^a K²G at h, at 2h)
    let slice = |t: f64| -> [f64; 4] {
        let l = (12.0 * t.sqrt()).min(test.radius);
        let mut acc = [0.0; 4];
        for (yj, wj) in yg.iter().zip(&yw) {
            let y = l * yj;
            let wyj = wj * l.powf(a + 1.0);
            for (xi, wi) in xg.iter().zip(&xw) {
                let x = l * xi;
                let p = [x, y];
                let gw = wyj * wi * l * setup.gaussian(x * x + y * y, t);
                let wv = w(p, t);
                let (g2, k) = local(p, t, hx);
                let (_, k2) = local(p, t, 2.0 * hx);
                acc[0] += gw * wv * wv;
                acc[1] += gw * g2;
                acc[2] += gw * k * k;
                acc[3] += gw * k2 * k2;
            }
        }
        acc
    };
    let (sc, _) = weight.eval(c)?;
    let (log_sc, s_end) = (sc.ln(), (t_end / c).ln());
    // time panels in s = log(t/c), doubling from width 1/(2α)
    let mut breaks = vec![0.0];
    let mut width = 0.5 / alpha;
    while *breaks.last().unwrap() < s_end {
        let next = (breaks.last().unwrap() + width).min(s_end);
        breaks.push(next);
        width *= 2.0;
    }
    let (tg, tw) = gauss_legendre(time);
    let (mut l0, mut l1, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0);
    let mut sup_vals: Vec<f64> = Vec::new();
    for pw in breaks.windows(2) {
        let (m, hw) = (0.5 * (pw[0] + pw[1]), 0.5 * (pw[1] - pw[0]));
        for (gi, gwi) in tg.iter().zip(&tw) {
            let t = c * (m + hw * gi).exp();
            let (sg, _) = weight.eval(t)?;
            let e = (-2.0 * alpha * (sg.ln() - log_sc)).exp();
            let dt = hw * gwi * t;
            let acc = slice(t);
            l0 += dt * e * acc[0];
            l1 += dt * e * sg * acc[1];
            r0 += dt * e * sg * acc[2];
            r1 += dt * e * sg * acc[3];
            sup_vals.push(t);
        }
    }
    let b = slice(c);
    // sup over t ≥ c of ∫ y^a (w² + t |∇w|²) on the whole support
    let (xf, wxf) = composite(-test.radius, test.radius, 8, space);
    let (yf, wyf) = weighted_half_line(test.radius, a, 4, space);
    let (mut m_w, mut m_g) = (0.0, 0.0);
    for (y, wy) in yf.iter().zip(&wyf) {
        for (x, wx) in xf.iter().zip(&wxf) {
            let p = [*x, *y];
            let v = test.spatial(p);
            let fx = |o: f64| test.spatial([p[0] + o, p[1]]);
            let fy = |o: f64| test.spatial([p[0], p[1] + o]);
            let (gx, gy) = (d1(&fx, hx), d1(&fy, hx));
            m_w += wx * wy * v * v;
            m_g += wx * wy * (gx * gx + gy * gy);
        }
    }
    let sup = sup_vals
        .iter()
        .chain(std::iter::once(&c))
        .map(|&t| test.temporal(lam, t).powi(2) * (m_w + t * m_g))
        .fold(0.0, f64::max);
    let sup_log10 = if sup > 0.0 { (alpha * alpha.ln() + 2.0 * alpha * log_sc + sup.ln()) / std::f64::consts::LN_10 } else { f64::NEG_INFINITY };
    Ok(CarlemanPass {
        lhs_zero: alpha * alpha * l0,
        lhs_grad: alpha * l1,
        rhs_op: r0,
        rhs_op_wide: r1,
        boundary: -c * b[1] + alpha * b[0],
        sup_log10,
    })
}

/// Evaluates the integrals of the Carleman estimate for one test function and reports
/// the ratio of the left side to the right side without its implicit constant. The
/// operator term uses fourth-order differences.
pub fn carleman_functionals(
    test: &CarlemanTest,
    setup: &CarlemanSetup,
    weight: &CarlemanWeight,
    coeff: MatrixField,
    c: f64,
) -> Result<CarlemanTerms> {
    let lam = setup.lambda();
    if (weight.lambda - lam).abs() > 1e-12 * lam {
        return Err(Error::Mismatch(format!("weight solved for λ = {} but the setup has λ = {lam}", weight.lambda)));
    }
    if !(test.radius > 0.0 && test.radius < 4.0 && test.width > 0.0) {
        return Err(Error::Domain(format!(
            "test function support radius {} must lie in (0, 4) and width {} must be positive",
            test.radius, test.width
        )));
    }
    if !(c > 0.0 && c <= setup.c_max() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("lower time limit {c:e} must lie in (0, 1/(5λ)]")));
    }
    check_matrix(coeff, test.radius, CHI_END / lam)?;
    let base = carleman_pass(test, setup, weight, coeff, c, 32, 16)?;
    let fine = carleman_pass(test, setup, weight, coeff, c, 48, 24)?;
    let ratio_of = |p: &CarlemanPass| {
        let sup = 10f64.powf(p.sup_log10);
        let den = p.rhs_op + sup + p.boundary;
        let num = p.lhs_zero + p.lhs_grad;
        if num == 0.0 && den == 0.0 {
            0.0
        } else {
            num / den
        }
    };
    let (rb, rf) = (ratio_of(&base), ratio_of(&fine));
    Ok(CarlemanTerms {
        lhs_zero: fine.lhs_zero,
        lhs_grad: fine.lhs_grad,
        rhs_operator: fine.rhs_op,
        sup_term_log10: fine.sup_log10,
        boundary: fine.boundary,
        ratio: rf,
        fd_change: if fine.rhs_op > 0.0 { (fine.rhs_op_wide - fine.rhs_op).abs() / fine.rhs_op } else { 0.0 },
        quad_change: if rf != 0.0 { (rb - rf).abs() / rf.abs() } else { 0.0 },
    })
}

/// Extension levels and weights for `∫₀^{z_max} z^a f(z) dz` (Gauss–Jacobi).
pub fn z_rule(a: f64, z_max: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_jacobi(n, a);
    (x.iter().map(|v| v * z_max).collect(), w.iter().map(|v| v * z_max.powf(a + 1.0)).collect())
}

/// Monotonicity constant, the ratio `θ` and the three doubling ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublingReport {
    /// `∫_{B₄⁺×[0,16]} z^a U² / ∫_{B₁⁺} z^a U(·,0)²`.
    pub theta: f64,
    /// Minimal `N` from the bisection.
    pub n_min: f64,
    /// `1/(N log(Nθ))` at `n_min`.
    pub horizon: f64,
    /// Backward times checked against the monotonicity conclusion.
    pub times_checked: usize,
    pub radii: Vec<f64>,
    /// `∫_{B_{2r}⁺} z^a U(·,0)² / ∫_{B_r⁺} z^a U(·,0)²`.
    pub ratio_i: Vec<f64>,
    /// `∫_{B_{2r}⁺×[0,4r²)} z^a U² / (r² ∫_{B_r⁺} z^a U(·,0)²)`.
    pub ratio_ii: Vec<f64>,
    /// `∫_{B_{2r}⁺×[0,4r²)} z^a U² / ∫_{B_r⁺×[0,r²)} z^a U²`.
    pub ratio_iii: Vec<f64>,
    /// `(Nθ)^N`.
    pub bound_i: f64,
    /// `exp(N log(Nθ) log(N log(Nθ)))`, applicable when `r ≤ 1/√(N log(Nθ))`.
    pub bound_long: f64,
    /// Per radius: ratio (i) within its bound; (ii) and (iii) within theirs or not applicable.
    pub within: Vec<[bool; 3]>,
}

/// Ball integrals over backward time slots.
struct BallData<'a> {
    u: &'a ExtensionField,
    grid: &'a Grid,
    zw: &'a [f64],
}

impl BallData<'_> {
    fn integral(&self, r: f64, slot: usize) -> f64 {
        let cell = self.grid.cell();
        let mut acc = 0.0;
        for (lvl, (&z, &w)) in self.u.levels.iter().zip(self.u.z_levels.iter().zip(self.zw)) {
            for node in 0..self.grid.len() {
                let x = self.grid.coords(node);
                let x2 = x[0] * x[0] + if self.grid.dim == 2 { x[1] * x[1] } else { 0.0 };
                if x2 + z * z < r * r {
                    acc += cell * w * lvl.get(node, slot).norm_sqr();
                }
            }
        }
        acc
    }
}

/// Monotonicity and doubling diagnostics for an extension field.
///
/// Backward time is `t = τ(t0_slot) − τ`; slots with `0 ≤ t ≤ 16` are used. The minimal
/// `N` is the smallest value with `N log(Nθ) ≥ 1` and
/// `N ∫_{B₂⁺} z^a U(·,t)² ≥ ∫_{B₁⁺} z^a U(·,0)²` for every slot with `t ≤ 1/(N log(Nθ))`.
pub fn monotonicity_and_doubling_check(
    u: &ExtensionField,
    grid: &Grid,
    z_weights: &[f64],
    t0_slot: usize,
    radii: &[f64],
) -> Result<DoublingReport> {
    if u.levels.is_empty() || z_weights.len() != u.z_levels.len() {
        return Err(Error::Mismatch("one quadrature weight per extension level is required".into()));
    }
    let axis = u.levels[0].axis;
    if t0_slot >= axis.nodes {
        return Err(Error::Domain(format!("slot {t0_slot} outside the time axis")));
    }
    if u.levels.iter().any(|l| l.n_space != grid.len()) {
        return Err(Error::Mismatch("extension levels do not match the grid".into()));
    }
    let data = BallData { u, grid, zw: z_weights };
    let tau0 = axis.time(t0_slot);
    let dt = axis.dt();
    // (slot, backward time), ordered by increasing backward time
    let slots: Vec<(usize, f64)> = (0..=t0_slot)
        .rev()
        .map(|k| (k, tau0 - axis.time(k)))
        .filter(|&(_, t)| t <= 16.0 + 1e-12)
        .collect();
    let i1 = data.integral(1.0, t0_slot);
    if !(i1 > 0.0) {
        return Err(Error::Domain("nondegeneracy assumption violated: ∫_{B₁⁺} z^a U(·,0)² = 0".into()));
    }
    let theta = slots.iter().map(|&(k, _)| dt * data.integral(4.0, k)).sum::<f64>() / i1;
    let i2: Vec<f64> = slots.iter().map(|&(k, _)| data.integral(2.0, k)).collect();
    let nlog = |n: f64| n * (n * theta).ln();
    let feasible = |n: f64| {
        let hz = nlog(n);
        hz >= 1.0 && slots.iter().zip(&i2).all(|(&(_, t), &v)| t > 1.0 / hz || n * v >= i1)
    };
    let mut hi = 1.0f64;
    while !feasible(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::NotConverged(vec![hi]));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let n = hi;
    let hz = nlog(n);
    let horizon = 1.0 / hz;
    let times_checked = slots.iter().filter(|&&(_, t)| t <= horizon).count();
    let bound_i = (n * theta).powf(n);
    let bound_long = (hz * hz.ln()).exp();
    let span = |r: f64, tmax: f64| -> f64 {
        slots.iter().filter(|&&(_, t)| t < tmax).map(|&(k, _)| dt * data.integral(r, k)).sum()
    };
    let (mut ri, mut rii, mut riii, mut within) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &r in radii {
        let base = data.integral(r, t0_slot);
        let big = data.integral(2.0 * r, t0_slot);
        let long = span(2.0 * r, 4.0 * r * r);
        let short = span(r, r * r);
        let (a, b, c) = (big / base, long / (r * r * base), long / short);
        let applies = r <= 1.0 / hz.sqrt();
        within.push([a <= bound_i, !applies || b <= bound_long, !applies || c <= bound_long]);
        ri.push(a);
        rii.push(b);
        riii.push(c);
    }
    Ok(DoublingReport {
        theta,
        n_min: n,
        horizon,
        times_checked,
        radii: radii.to_vec(),
        ratio_i: ri,
        ratio_ii: rii,
        ratio_iii: riii,
        bound_i,
        bound_long,
        within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, desk_1d};
    use crate::spacetime::{SpaceTimeField, TimeAxis};
    use crate::special::gamma;

    /// `Γ(5/2, x)` in closed form.
    fn upper_gamma_52(x: f64) -> f64 {
        0.75 * std::f64::consts::PI.sqrt() * libm::erfc(x.sqrt()) + (-x).exp() * x.sqrt() * (x + 1.5)
    }

    #[test]
    fn theta_vanishes_at_one() {
        assert_eq!(theta(1.0), 0.0);
        assert!((theta(0.25) - 0.5 * 4f64.ln().powf(1.5)).abs() < 1e-15);
    }

    #[test]
    fn sigma_matches_incomplete_gamma_oracle() {
        // log ρ(t) = −∫_{t₀}^t θ(λτ)/τ dτ = −2^{5/2}[Γ(5/2, v/2) − Γ(5/2, v₀/2)], v = log 1/(λt)
        let lam = 5000.0;
        let w = solve_sigma_ode(lam, &log_grid(lam, 200)).unwrap();
        let v0 = (1e8f64).ln();
        for (i, &t) in w.t.iter().enumerate() {
            let v = (1.0 / (lam * t)).ln().max(0.0);
            let exact = -(2f64.powf(2.5)) * (upper_gamma_52(0.5 * v) - upper_gamma_52(0.5 * v0));
            assert!((w.log_rho[i] - exact).abs() < 1e-9, "t={t}: {} vs {exact}", w.log_rho[i]);
        }
    }

    #[test]
    fn sigma_starts_like_t_and_stays_below() {
        let lam = 2000.0;
        let w = solve_sigma_ode(lam, &log_grid(lam, 400)).unwrap();
        assert!((w.sigma[0] / w.t[0] - 1.0).abs() < 1e-12);
        assert!(w.sigma.iter().zip(&w.t).all(|(s, t)| s <= t));
        assert!(w.sigma.windows(2).all(|p| p[1] > p[0]));
        assert!(w.dsigma.iter().all(|&d| d > 0.0 && d <= 1.0));
    }

    #[test]
    fn hermite_eval_reproduces_finer_solve() {
        let lam = 1000.0;
        let coarse = solve_sigma_ode(lam, &log_grid(lam, 300)).unwrap();
        let t: Vec<f64> = (1..20).map(|k| k as f64 * 0.05 / lam).collect();
        let fine = solve_sigma_ode(lam, &t).unwrap();
        for (i, &ti) in t.iter().enumerate() {
            let (s, ds) = coarse.eval(ti).unwrap();
            assert!((s / fine.sigma[i] - 1.0).abs() < 1e-8);
            assert!((ds / fine.dsigma[i]).ln().abs() < 1e-5, "t={ti}: {ds} vs {}", fine.dsigma[i]);
        }
        assert!(coarse.eval(2.0 / lam).is_err());
    }

    #[test]
    fn grid_outside_range_rejected() {
        assert!(solve_sigma_ode(10.0, &[1e-12, 1e-3]).is_err());
        assert!(solve_sigma_ode(10.0, &[1e-3, 1.0]).is_err());
        assert!(solve_sigma_ode(10.0, &[1e-3, 1e-3]).is_err());
    }

    #[test]
    fn sigma_properties_give_finite_stable_constant() {
        let lam = 5000.0;
        let a = check_sigma_properties(&solve_sigma_ode(lam, &log_grid(lam, 1000)).unwrap()).unwrap();
        let b = check_sigma_properties(&solve_sigma_ode(lam, &log_grid(lam, 2000)).unwrap()).unwrap();
        let (na, nb) = (a.n_rep.unwrap(), b.n_rep.unwrap());
        assert!(na <= N_CAP && (na / nb - 1.0).abs() < 0.1, "{na} {nb}");
        assert!(a.upper_bounds_hold && a.margins.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn large_rate_holds() {
        let lam = 300.0;
        let w = solve_sigma_ode(lam, &log_grid(lam, 500)).unwrap();
        let (v, worst) = large_rate_check(&w);
        assert_eq!(v, 0);
        assert!(worst >= 3f64.sqrt() * 3f64.ln().powf(1.5) * 0.999);
    }

    #[test]
    fn fd_is_exact_on_quadratics() {
        let t = [0.0, 0.1, 0.3, 0.35, 0.9];
        let f: Vec<f64> = t.iter().map(|x| 3.0 * x * x - x + 2.0).collect();
        for (d, x) in fd_nonuniform(&t, &f).iter().zip(t) {
            assert!((d - (6.0 * x - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_ratio_zero_at_origin() {
        for eps in [1e-7, 0.1, 0.9] {
            assert_eq!(log_ratio(1.0, 0.0, eps), 0.0);
        }
    }

    #[test]
    fn log_constant_validates_and_grows_with_m() {
        let (y, e) = log_inequality_grids(801, 81);
        let cs: Vec<LogInequality> = [0.5, 1.0, 1.5].iter().map(|&m| log_inequality_constant(m, &y, &e).unwrap()).collect();
        for c in &cs {
            assert_eq!(c.violations, 0, "m={}", c.m);
            assert!(c.c_m.is_finite() && c.c_m > 0.0);
        }
        assert!(cs[0].c_m < cs[1].c_m && cs[1].c_m < cs[2].c_m);
        assert!(log_inequality_constant(0.0, &y, &e).is_err());
    }

    #[test]
    fn hardy_gaussian_matches_closed_form() {
        for (b, a) in [(1.0, 0.4), (0.5, -0.4)] {
            let h = BumpSum { terms: vec![BumpTerm { center: [0.0, 0.0], width: (4.0 * b as f64).sqrt(), poly: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0] }] };
            let s = hardy_sides(&h, b, a, 4, 24, true);
            let m0 = 0.5 * (2.0 * b as f64).powf(0.5 * (a + 1.0)) * gamma(0.5 * (a + 1.0));
            let base = (2.0 * std::f64::consts::PI * b).sqrt() * m0 * (a + 2.0);
            assert!((s.lhs / (base / 8.0) - 1.0).abs() < 1e-8, "{} {}", s.lhs, base / 8.0);
            assert!((s.rhs / (base * 0.625) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn hardy_zero_function() {
        let s = hardy_sides(&BumpSum { terms: vec![] }, 1.0, 0.2, 2, 8, true);
        assert_eq!((s.lhs, s.rhs), (0.0, 0.0));
    }

    #[test]
    fn hardy_battery_small() {
        for a in [-0.4, 0.4] {
            let r = hardy_check(40, 1.0, 1, a, 11).unwrap();
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.margins.len() + r.skipped, 40);
        }
        assert!(hardy_check(1, 1.0, 2, 0.0, 1).is_err());
    }

    fn identity(_: [f64; 2], _: f64) -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, 1.0]]
    }

    #[test]
    fn carleman_zero_function_gives_zero_terms() {
        let setup = CarlemanSetup::new(50.0, 0.1, 0.0).unwrap();
        let lam = setup.lambda();
        let w = solve_sigma_ode(lam, &log_grid(lam, 400)).unwrap();
        let test = CarlemanTest { width: 0.5, radius: 1.0, amplitude: 0.0 };
        let r = carleman_functionals(&test, &setup, &w, &identity, setup.c_max()).unwrap();
        assert_eq!((r.lhs_zero, r.lhs_grad, r.rhs_operator, r.boundary, r.ratio), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn carleman_rejects_bad_support_and_matrix() {
        let setup = CarlemanSetup::new(50.0, 0.1, 0.2).unwrap();
        let lam = setup.lambda();
        let w = solve_sigma_ode(lam, &log_grid(lam, 400)).unwrap();
        let big = CarlemanTest { width: 0.5, radius: 4.5, amplitude: 1.0 };
        assert!(carleman_functionals(&big, &setup, &w, &identity, setup.c_max()).is_err());
        let ok = CarlemanTest { width: 0.5, radius: 1.0, amplitude: 1.0 };
        let skew = |_: [f64; 2], _: f64| [[1.0, 0.1], [0.1, 1.0]];
        assert!(matches!(
            carleman_functionals(&ok, &setup, &w, &skew, setup.c_max()),
            Err(Error::Coefficient { .. })
        ));
    }

    #[test]
    fn constant_field_gives_measure_ratio() {
        let grid = build_grid(&desk_1d(63)).unwrap();
        let axis = TimeAxis::new(16, 1.0, 2.0).unwrap();
        let one = SpaceTimeField::from_real(&grid, axis, |_, _| 1.0);
        let (levels, weights) = z_rule(0.2, 4.0, 24);
        let u = ExtensionField { s: 0.4, a: 0.2, z_levels: levels.clone(), levels: vec![one; levels.len()] };
        let t0 = axis.nodes - 1;
        let r = monotonicity_and_doubling_check(&u, &grid, &weights, t0, &[0.25, 0.5]).unwrap();
        let data = BallData { u: &u, grid: &grid, zw: &weights };
        let (i1, i2) = (data.integral(1.0, t0), data.integral(2.0, t0));
        // N log(Nθ) = 1 or N = I₁/I₂, whichever is larger
        let n_log = {
            let (mut lo, mut hi) = (1.0 / r.theta, 10.0);
            for _ in 0..200 {
                let m = 0.5 * (lo + hi);
                if m * (m * r.theta).ln() >= 1.0 {
                    hi = m
                } else {
                    lo = m
                }
            }
            hi
        };
        let expect = (i1 / i2).max(n_log);
        assert!((r.n_min / expect - 1.0).abs() < 1e-9, "{} vs {expect}", r.n_min);
        assert!(r.ratio_i.iter().all(|v| v.is_finite() && *v > 1.0));
    }

    #[test]
    fn vanishing_field_reported() {
        let grid = build_grid(&desk_1d(31)).unwrap();
        let axis = TimeAxis::new(8, 1.0, 2.0).unwrap();
        let zero = SpaceTimeField::zeros(&grid, axis);
        let (levels, weights) = z_rule(0.0, 4.0, 4);
        let u = ExtensionField { s: 0.5, a: 0.0, z_levels: levels, levels: vec![zero; 4] };
        assert!(matches!(monotonicity_and_doubling_check(&u, &grid, &weights, 7, &[0.5]), Err(Error::Domain(_))));
    }
}
