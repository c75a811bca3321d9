//! Restarted GMRES with right diagonal preconditioning for real nonsymmetric systems.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    pub rtol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions { rtol: 1e-10, restart: 60, max_iter: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct GmresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual after every inner step.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` where `apply` computes `A v`; `diag` is used as the right
/// preconditioner `A D⁻¹ (D x) = b`.
pub fn gmres(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], diag: &[f64], opts: &GmresOptions) -> Result<GmresResult> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    if bnorm == 0.0 {
        return Ok(GmresResult { x, iterations: 0, history });
    }
    let inv: Vec<f64> = diag.iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv).map(|(a, b)| a * b).collect() };
    let mut iterations = 0;
    loop {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        if beta <= opts.rtol * bnorm {
            history.push(beta / bnorm);
            return Ok(GmresResult { x, iterations, history });
        }
        let m = opts.restart;
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut hcol: Vec<Vec<f64>> = Vec::new();
        let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        let mut g = vec![beta];
        let mut k_used = 0;
        for k in 0..m {
            let mut w = apply(&precond(&v[k]));
            let mut h = vec![0.0; k + 2];
            for (j, vj) in v.iter().enumerate() {
                h[j] = dot(&w, vj);
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= h[j] * vi;
                }
            }
            h[k + 1] = norm(&w);
            for j in 0..k {
                let t = cs[j] * h[j] + sn[j] * h[j + 1];
                h[j + 1] = -sn[j] * h[j] + cs[j] * h[j + 1];
                h[j] = t;
            }
            let d = h[k].hypot(h[k + 1]);
            let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (h[k] / d, h[k + 1] / d) };
            cs.push(c);
            sn.push(s);
            h[k] = d;
            g.push(-s * g[k]);
            g[k] *= c;
            let hk1 = std::mem::take(&mut h[k + 1]);
            hcol.push(h);
            k_used = k + 1;
            iterations += 1;
            let res = g[k + 1].abs() / bnorm;
            history.push(res);
            if res <= opts.rtol || hk1 == 0.0 || iterations >= opts.max_iter {
                break;
            }
            v.push(w.iter().map(|wi| wi / hk1).collect());
        }
        // back substitution on the triangular Hessenberg factor
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= hcol[j][i] * y[j];
            }
            y[i] = acc / hcol[i][i];
        }
        let mut z = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for (zi, vi) in z.iter_mut().zip(&v[j]) {
                *zi += yj * vi;
            }
        }
        for (xi, zi) in x.iter_mut().zip(precond(&z)) {
            *xi += zi;
        }
        if iterations >= opts.max_iter {
            let ax = apply(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            if norm(&r) <= opts.rtol * bnorm {
                return Ok(GmresResult { x, iterations, history });
            }
            return Err(Error::NotConverged(history));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solves_nonsymmetric_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 80;
        let a = DMatrix::from_fn(n, n, |i, j| {
            let base: f64 = rng.random_range(-0.3..0.3) / (n as f64).sqrt();
            if i == j {
                2.0 + i as f64 * 0.1 + base
            } else {
                base
            }
        });
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        let r = gmres(|v| (&a * DVector::from_column_slice(v)).as_slice().to_vec(), &b, &diag, &GmresOptions::default())
            .unwrap();
        let exact = a.lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let err = (DVector::from_column_slice(&r.x) - exact).norm();
        assert!(err < 1e-8, "{err}");
        assert!(*r.history.last().unwrap() <= 1e-10);
    }

    #[test]
    fn reports_non_convergence() {
        // rotation-like matrix stalls GMRES(1)
        let apply = |v: &[f64]| vec![-v[1], v[0]];
        let opts = GmresOptions { rtol: 1e-12, restart: 1, max_iter: 5 };
        let err = gmres(apply, &[1.0, 0.0], &[1.0, 1.0], &opts).unwrap_err();
        assert!(matches!(err, Error::NotConverged(h) if h.len() == 5));
    }
}
