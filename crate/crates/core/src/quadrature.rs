//! Gauss–Legendre rules and double-exponential quadrature on finite and half-infinite
//! intervals.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `∫_a^b f` with an `n`-point Gauss–Legendre rule.
pub fn gauss_integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    rule.0.iter().zip(&rule.1).map(|(x, w)| w * f(c + r * x)).sum::<f64>() * r
}

/// Estimate and the change over the last halving of the step.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
}

const DE_TMAX: f64 = 4.0;
const DE_LEVELS: usize = 12;

/// Tanh-sinh rule on `(a, b)`. The integrand receives `(x, x − a, b − x)` so that
/// endpoint singularities can be evaluated without cancellation.
pub fn tanh_sinh(f: impl Fn(f64, f64, f64) -> f64, a: f64, b: f64, tol: f64) -> QuadResult {
    let half = 0.5 * (b - a);
    let node = |t: f64| -> f64 {
        let u = FRAC_PI_2 * t.sinh();
        let w = FRAC_PI_2 * t.cosh() / u.cosh().powi(2);
        // distances to the endpoints: (b−a)/(1+e^{∓2u})
        let da = (b - a) / (1.0 + (-2.0 * u).exp());
        let db = (b - a) / (1.0 + (2.0 * u).exp());
        if da <= 0.0 || db <= 0.0 || !w.is_finite() {
            return 0.0;
        }
        let x = if da < db { a + da } else { b - db };
        half * w * f(x, da, db)
    };
    let mut step = 1.0;
    let mut sum = node(0.0);
    let mut k = 1;
    while k as f64 * step <= DE_TMAX {
        let t = k as f64 * step;
        sum += node(t) + node(-t);
        k += 1;
    }
    let mut value = sum * step;
    let mut error = f64::INFINITY;
    for _ in 0..DE_LEVELS {
        step *= 0.5;
        let mut k = 1;
        while k as f64 * step <= DE_TMAX {
            let t = k as f64 * step;
            sum += node(t) + node(-t);
            k += 2;
        }
        let next = sum * step;
        error = (next - value).abs();
        value = next;
        if error <= tol * value.abs() {
            break;
        }
    }
    QuadResult { value, error }
}

/// Exp-sinh rule on `(0, ∞)`, `x = e^{(π/2) sinh t}`.
pub fn exp_sinh(f: impl Fn(f64) -> f64, tol: f64) -> QuadResult {
    let tmax = 6.0;
    let node = |t: f64| -> f64 {
        let x = (FRAC_PI_2 * t.sinh()).exp();
        if x == 0.0 || !x.is_finite() {
            return 0.0;
        }
        let v = f(x) * FRAC_PI_2 * t.cosh() * x;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mut step = 0.5;
    let mut sum = node(0.0);
    let mut k = 1;
    while k as f64 * step <= tmax {
        let t = k as f64 * step;
        sum += node(t) + node(-t);
        k += 1;
    }
    let mut value = sum * step;
    let mut error = f64::INFINITY;
    for _ in 0..DE_LEVELS {
        step *= 0.5;
        let mut k = 1;
        while k as f64 * step <= tmax {
            let t = k as f64 * step;
            sum += node(t) + node(-t);
            k += 2;
        }
        let next = sum * step;
        error = (next - value).abs();
        value = next;
        if error <= tol * value.abs() {
            break;
        }
    }
    QuadResult { value, error }
}

/// Nodes and weights of the `n`-point rule for `∫₀^1 y^a f(y) dy`, `a > −1`
/// (Golub–Welsch on the Jacobi matrix of the weight `(1+x)^a` on `[−1, 1]`).
pub fn gauss_jacobi(n: usize, a: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(a > -1.0 && n > 0, "weight exponent must exceed −1");
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let s = 2.0 * kf + a;
        jm[(k, k)] = if k == 0 { a / (a + 2.0) } else { a * a / (s * (s + 2.0)) };
        if k + 1 < n {
            let k1 = kf + 1.0;
            let s1 = 2.0 * k1 + a;
            let b = (4.0 * k1 * k1 * (k1 + a) * (k1 + a) / (s1 * s1 * (s1 + 1.0) * (s1 - 1.0))).sqrt();
            jm[(k, k + 1)] = b;
            jm[(k + 1, k)] = b;
        }
    }
    let eig = jm.symmetric_eigen();
    // total mass of (1+x)^a on [−1, 1]
    let mu0 = 2f64.powf(a + 1.0) / (a + 1.0);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let scale = 0.5f64.powf(a + 1.0);
    pairs.into_iter().map(|(x, w)| (0.5 * (1.0 + x), w * scale)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::gamma;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_exactness() {
        for n in [1, 2, 5, 12, 31] {
            let rule = gauss_legendre(n);
            assert_relative_eq!(rule.1.iter().sum::<f64>(), 2.0, max_relative = 1e-14);
            for p in 0..(2 * n) {
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                let got = gauss_integrate(|x| x.powi(p as i32), -1.0, 1.0, &rule);
                assert!((got - exact).abs() < 1e-13, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn tanh_sinh_endpoint_singularity() {
        // ∫₀¹ x^{−0.6} dx = 2.5
        let r = tanh_sinh(|_, da, _| da.powf(-0.6), 0.0, 1.0, 1e-12);
        assert_relative_eq!(r.value, 2.5, max_relative = 1e-10);
        // ∫₀^π sin = 2
        let r = tanh_sinh(|x, _, _| x.sin(), 0.0, PI, 1e-13);
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-13);
    }

    #[test]
    fn exp_sinh_gamma_integrals() {
        for s in [0.3, 0.7, 1.5] {
            let r = exp_sinh(|x| x.powf(s - 1.0) * (-x).exp(), 1e-12);
            assert_relative_eq!(r.value, gamma(s), max_relative = 1e-10);
        }
    }

    #[test]
    fn jacobi_rule_integrates_weighted_monomials() {
        for a in [-0.6, -0.4, 0.0, 0.4] {
            let (x, w) = gauss_jacobi(12, a);
            for p in 0..20 {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(p)).sum();
                let exact = 1.0 / (a + 1.0 + p as f64);
                assert!((q - exact).abs() < 1e-13, "a={a} p={p}: {q} vs {exact}");
            }
        }
    }
}
