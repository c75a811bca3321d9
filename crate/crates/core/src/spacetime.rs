//! Uniform time axis on the padded window and complex fields on grid × time.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::{Error, Result};

/// Time nodes `t_n = −T_pad + nΔt`, `n = 0..N`, with `T_pad = κT` and `Δt = 2T_pad/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub nodes: usize,
    pub horizon: f64,
    pub padding: f64,
}

impl TimeAxis {
    pub fn new(nodes: usize, horizon: f64, padding: f64) -> Result<Self> {
        if !nodes.is_power_of_two() || nodes < 4 {
            return Err(Error::Config(format!("time node count must be a power of two ≥ 4, got {nodes}")));
        }
        if !(padding >= 2.0) {
            return Err(Error::Config(format!("padding factor must be at least 2, got {padding}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(TimeAxis { nodes, horizon, padding })
    }

    pub fn t_pad(&self) -> f64 {
        self.padding * self.horizon
    }

    pub fn dt(&self) -> f64 {
        2.0 * self.t_pad() / self.nodes as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        -self.t_pad() + n as f64 * self.dt()
    }

    /// Signed frequency index of FFT slot `m`; the Nyquist slot maps to 0.
    pub fn freq_index(&self, m: usize) -> i64 {
        let n = self.nodes;
        if 2 * m == n {
            0
        } else if 2 * m < n {
            m as i64
        } else {
            m as i64 - n as i64
        }
    }

    /// `σ_m = π m / T_pad` with the Nyquist slot at zero frequency.
    pub fn sigma(&self, m: usize) -> f64 {
        std::f64::consts::PI * self.freq_index(m) as f64 / self.t_pad()
    }

    /// Time slots strictly inside `(−T, T)`.
    pub fn interior(&self) -> Vec<usize> {
        let tol = 1e-9 * self.dt();
        (0..self.nodes)
            .filter(|&n| self.time(n).abs() < self.horizon - tol)
            .collect()
    }

    /// Time slots in the closed window `[−T, T]`.
    pub fn window(&self) -> Vec<usize> {
        let tol = 1e-9 * self.dt();
        (0..self.nodes)
            .filter(|&n| self.time(n).abs() <= self.horizon + tol)
            .collect()
    }

    /// Slot of `−t` under the periodic reversal `n ↦ (N − n) mod N`.
    pub fn reversed(&self, n: usize) -> usize {
        (self.nodes - n) % self.nodes
    }
}

/// Values at `nodes × time` stored space-major: `data[i·N + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub n_space: usize,
    pub axis: TimeAxis,
    /// Spatial quadrature weight `h^d`.
    pub cell: f64,
    pub grid_hash: String,
    pub data: Vec<Complex64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: &Grid, axis: TimeAxis) -> Self {
        SpaceTimeField {
            n_space: grid.len(),
            axis,
            cell: grid.cell(),
            grid_hash: grid.hash(),
            data: vec![Complex64::new(0.0, 0.0); grid.len() * axis.nodes],
        }
    }

    /// Samples `f(x, t)` at every node.
    pub fn from_fn(grid: &Grid, axis: TimeAxis, f: impl Fn([f64; 2], f64) -> Complex64) -> Self {
        let mut out = Self::zeros(grid, axis);
        for i in 0..grid.len() {
            let x = grid.coords(i);
            for n in 0..axis.nodes {
                out.data[i * axis.nodes + n] = f(x, axis.time(n));
            }
        }
        out
    }

    pub fn from_real(grid: &Grid, axis: TimeAxis, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        Self::from_fn(grid, axis, |x, t| Complex64::new(f(x, t), 0.0))
    }

    pub fn zeros_like(&self) -> Self {
        SpaceTimeField { data: vec![Complex64::new(0.0, 0.0); self.data.len()], ..self.clone() }
    }

    pub fn n_time(&self) -> usize {
        self.axis.nodes
    }

    pub fn idx(&self, node: usize, slot: usize) -> usize {
        node * self.axis.nodes + slot
    }

    pub fn get(&self, node: usize, slot: usize) -> Complex64 {
        self.data[self.idx(node, slot)]
    }

    pub fn set(&mut self, node: usize, slot: usize, v: Complex64) {
        let k = self.idx(node, slot);
        self.data[k] = v;
    }

    /// Space-time quadrature weight `h^d Δt`.
    pub fn weight(&self) -> f64 {
        self.cell * self.axis.dt()
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.data.iter().all(|v| v.im.abs() <= tol)
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.re).collect()
    }

    pub fn with_real(&self, values: &[f64]) -> Self {
        SpaceTimeField { data: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(), ..self.clone() }
    }

    pub fn l2_norm(&self) -> f64 {
        (self.weight() * self.data.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// Bilinear pairing `h^d Δt Σ a b` (no conjugation).
    pub fn pair(&self, other: &SpaceTimeField) -> Complex64 {
        let s: Complex64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum();
        s * self.weight()
    }

    pub fn compatible(&self, other: &SpaceTimeField) -> Result<()> {
        if self.n_space != other.n_space || self.axis != other.axis || self.grid_hash != other.grid_hash {
            return Err(Error::Mismatch("space-time fields live on different grids or windows".into()));
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: Complex64, x: &SpaceTimeField) {
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: Complex64) -> Self {
        SpaceTimeField { data: self.data.iter().map(|v| v * alpha).collect(), ..self.clone() }
    }

    pub fn sub(&self, other: &SpaceTimeField) -> Self {
        SpaceTimeField { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(), ..self.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Largest modulus on slots with `t ≤ −T`.
    pub fn causal_violation(&self) -> f64 {
        let tol = 1e-9 * self.axis.dt();
        let mut worst: f64 = 0.0;
        for n in 0..self.axis.nodes {
            if self.axis.time(n) <= -self.axis.horizon + tol {
                for i in 0..self.n_space {
                    worst = worst.max(self.get(i, n).norm());
                }
            }
        }
        worst
    }

    const MAGIC: &'static [u8; 8] = b"FPCSTF01";

    /// Binary layout: magic, `n_space`, `N`, `T`, `κ`, `h^d`, hash length + bytes,
    /// then `(re, im)` pairs, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.n_space as u64).to_le_bytes())?;
        w.write_all(&(self.axis.nodes as u64).to_le_bytes())?;
        w.write_all(&self.axis.horizon.to_le_bytes())?;
        w.write_all(&self.axis.padding.to_le_bytes())?;
        w.write_all(&self.cell.to_le_bytes())?;
        w.write_all(&(self.grid_hash.len() as u64).to_le_bytes())?;
        w.write_all(self.grid_hash.as_bytes())?;
        for v in &self.data {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("space-time field: {m}"));
        let io = |e: std::io::Error| bad(&e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad header"));
        }
        let mut b8 = [0u8; 8];
        let mut u = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_space = u(r)? as usize;
        let nodes = u(r)? as usize;
        let horizon = f64::from_bits(u(r)?);
        let padding = f64::from_bits(u(r)?);
        let cell = f64::from_bits(u(r)?);
        let hlen = u(r)? as usize;
        if hlen > 4096 || n_space.saturating_mul(nodes) > 1 << 28 {
            return Err(bad("implausible dimensions"));
        }
        let mut hash = vec![0u8; hlen];
        r.read_exact(&mut hash).map_err(io)?;
        let axis = TimeAxis::new(nodes, horizon, padding)?;
        let mut data = Vec::with_capacity(n_space * nodes);
        for _ in 0..n_space * nodes {
            let re = f64::from_bits(u(r)?);
            let im = f64::from_bits(u(r)?);
            data.push(Complex64::new(re, im));
        }
        Ok(SpaceTimeField {
            n_space,
            axis,
            cell,
            grid_hash: String::from_utf8(hash).map_err(|_| bad("hash not utf-8"))?,
            data,
        })
    }

    /// CSV rows `x,t,re,im` in 1D and `x,y,t,re,im` in 2D.
    pub fn write_csv(&self, grid: &Grid, w: &mut impl Write, config_hash: &str) -> std::io::Result<()> {
        writeln!(w, "# config_hash={config_hash}")?;
        if grid.dim == 1 {
            writeln!(w, "x [length],t [time],re,im")?;
        } else {
            writeln!(w, "x [length],y [length],t [time],re,im")?;
        }
        for i in 0..self.n_space {
            let x = grid.coords(i);
            for n in 0..self.axis.nodes {
                let v = self.get(i, n);
                if grid.dim == 1 {
                    writeln!(w, "{:e},{:e},{:e},{:e}", x[0], self.axis.time(n), v.re, v.im)?;
                } else {
                    writeln!(w, "{:e},{:e},{:e},{:e},{:e}", x[0], x[1], self.axis.time(n), v.re, v.im)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, desk_1d};

    #[test]
    fn axis_layout() {
        let ax = TimeAxis::new(128, 1.0, 2.0).unwrap();
        assert_eq!(ax.dt(), 4.0 / 128.0);
        assert_eq!(ax.time(0), -2.0);
        assert_eq!(ax.interior().len(), 63);
        assert_eq!(ax.window().len(), 65);
        assert_eq!(ax.sigma(64), 0.0);
        assert_eq!(ax.freq_index(127), -1);
        assert_eq!(ax.reversed(0), 0);
        assert!((ax.time(ax.reversed(40)) + ax.time(40)).abs() < 1e-14);
        assert!(TimeAxis::new(100, 1.0, 2.0).is_err());
        assert!(TimeAxis::new(64, 1.0, 1.5).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let g = build_grid(&desk_1d(15)).unwrap();
        let ax = TimeAxis::new(16, 1.0, 2.0).unwrap();
        let f = SpaceTimeField::from_fn(&g, ax, |x, t| Complex64::new(x[0] * t, x[0] - t));
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let back = SpaceTimeField::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(f, back);
        buf[0] = b'X';
        assert!(SpaceTimeField::read_from(&mut buf.as_slice()).is_err());
    }
}
