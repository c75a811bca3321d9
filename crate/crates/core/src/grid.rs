//! Uniform node grids on the truncation box `[-L, L]^d` with region masks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// A region given either as an open sub-box or as explicit node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Open interval `(a, b)` on the first axis (1D grids).
    Interval([f64; 2]),
    /// Open rectangle `(a, b) × (c, d)` (2D grids).
    Rect([[f64; 2]; 2]),
    /// Explicit flat node indices.
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub nodes: usize,
    pub omega: Region,
    pub w1: Region,
    pub w2: Region,
}

/// Node membership for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub name: String,
    pub nodes: Vec<usize>,
    pub member: Vec<bool>,
}

impl Mask {
    fn from_nodes(name: &str, mut nodes: Vec<usize>, total: usize) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let mut member = vec![false; total];
        for &i in &nodes {
            member[i] = true;
        }
        Mask { name: name.to_string(), nodes, member }
    }

    pub fn contains(&self, node: usize) -> bool {
        self.member[node]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub half_width: f64,
    /// Nodes per axis.
    pub n: usize,
    pub h: f64,
    pub omega: Mask,
    pub w1: Mask,
    pub w2: Mask,
    /// Nodes outside all three regions.
    pub buffer: Mask,
    spec: GridSpec,
}

impl Grid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Total number of nodes `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid quadrature weight `h^d`.
    pub fn cell(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Coordinate of the `i`-th node along an axis.
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 1.0) * self.h
    }

    /// Per-axis indices of a flat node index.
    pub fn multi_index(&self, node: usize) -> [usize; 2] {
        if self.dim == 1 {
            [node, 0]
        } else {
            [node % self.n, node / self.n]
        }
    }

    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] + self.n * idx[1]
        }
    }

    /// Physical coordinates; the second entry is zero in 1D.
    pub fn coords(&self, node: usize) -> [f64; 2] {
        let [i, j] = self.multi_index(node);
        if self.dim == 1 {
            [self.axis_coord(i), 0.0]
        } else {
            [self.axis_coord(i), self.axis_coord(j)]
        }
    }

    /// Neighbour along `axis` at offset `±1`, or `None` outside the box.
    pub fn neighbor(&self, node: usize, axis: usize, forward: bool) -> Option<usize> {
        let mut idx = self.multi_index(node);
        if forward {
            if idx[axis] + 1 >= self.n {
                return None;
            }
            idx[axis] += 1;
        } else {
            if idx[axis] == 0 {
                return None;
            }
            idx[axis] -= 1;
        }
        Some(self.flat_index(idx))
    }

    /// Stable identifier of the grid geometry and masks.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        hasher.update(self.half_width.to_le_bytes());
        hasher.update((self.n as u64).to_le_bytes());
        for mask in [&self.omega, &self.w1, &self.w2] {
            hasher.update((mask.nodes.len() as u64).to_le_bytes());
            for &i in &mask.nodes {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn mask(&self, name: &str) -> Option<&Mask> {
        match name {
            "omega" => Some(&self.omega),
            "w1" => Some(&self.w1),
            "w2" => Some(&self.w2),
            "buffer" => Some(&self.buffer),
            _ => None,
        }
    }
}

fn region_nodes(
    region: &Region,
    name: &str,
    dim: usize,
    n: usize,
    coord: impl Fn(usize) -> [f64; 2],
    tol: f64,
) -> Result<Vec<usize>> {
    let total = n.pow(dim as u32);
    let inside = |x: f64, iv: [f64; 2]| x > iv[0] + tol && x < iv[1] - tol;
    match region {
        Region::Interval(iv) => {
            if dim != 1 {
                return Err(Error::Config(format!("mask {name}: interval given on a {dim}D grid")));
            }
            Ok((0..total).filter(|&i| inside(coord(i)[0], *iv)).collect())
        }
        Region::Rect(r) => {
            if dim != 2 {
                return Err(Error::Config(format!("mask {name}: rectangle given on a {dim}D grid")));
            }
            Ok((0..total)
                .filter(|&i| {
                    let x = coord(i);
                    inside(x[0], r[0]) && inside(x[1], r[1])
                })
                .collect())
        }
        Region::Indices(ix) => {
            if let Some(bad) = ix.iter().find(|&&i| i >= total) {
                return Err(Error::Config(format!("mask {name}: node index {bad} outside the grid")));
            }
            Ok(ix.clone())
        }
    }
}

/// Builds a grid and validates that the masks are disjoint, pairwise separated by at
/// least one node and do not touch the outer boundary.
pub fn build_grid(spec: &GridSpec) -> Result<Grid> {
    if spec.dim != 1 && spec.dim != 2 {
        return Err(Error::Config(format!("dimension must be 1 or 2, got {}", spec.dim)));
    }
    if spec.nodes < 4 {
        return Err(Error::Config(format!("nodes per axis must be at least 4, got {}", spec.nodes)));
    }
    if !(spec.half_width > 0.0) {
        return Err(Error::Config("box half-width must be positive".into()));
    }
    let n = spec.nodes;
    let h = 2.0 * spec.half_width / (n as f64 + 1.0);
    let total = n.pow(spec.dim as u32);
    let ax = |i: usize| -spec.half_width + (i as f64 + 1.0) * h;
    let coord = |node: usize| {
        if spec.dim == 1 {
            [ax(node), 0.0]
        } else {
            [ax(node % n), ax(node / n)]
        }
    };
    let tol = 1e-9 * h;
    let named = [("omega", &spec.omega), ("w1", &spec.w1), ("w2", &spec.w2)];
    let mut masks = Vec::new();
    for (name, region) in named {
        let nodes = region_nodes(region, name, spec.dim, n, coord, tol)?;
        masks.push(Mask::from_nodes(name, nodes, total));
    }
    let multi = |node: usize| -> [usize; 2] {
        if spec.dim == 1 {
            [node, 0]
        } else {
            [node % n, node / n]
        }
    };
    for m in &masks {
        for &node in &m.nodes {
            let idx = multi(node);
            let on_edge = (0..spec.dim).any(|a| idx[a] == 0 || idx[a] == n - 1);
            if on_edge {
                return Err(Error::Config(format!("mask {} touches the outer boundary", m.name)));
            }
        }
    }
    for a in 0..masks.len() {
        for b in a + 1..masks.len() {
            let (ma, mb) = (&masks[a], &masks[b]);
            if ma.nodes.iter().any(|&i| mb.member[i]) {
                return Err(Error::Config(format!("overlapping masks: {} and {}", ma.name, mb.name)));
            }
            for &i in &ma.nodes {
                let ia = multi(i);
                for &j in &mb.nodes {
                    let jb = multi(j);
                    let cheb = (0..spec.dim)
                        .map(|d| ia[d].abs_diff(jb[d]))
                        .max()
                        .unwrap_or(0);
                    if cheb < 2 {
                        return Err(Error::Config(format!(
                            "masks {} and {} touching (nodes {i} and {j})",
                            ma.name, mb.name
                        )));
                    }
                }
            }
        }
    }
    let buffer: Vec<usize> = (0..total).filter(|&i| masks.iter().all(|m| !m.member[i])).collect();
    let mut it = masks.into_iter();
    Ok(Grid {
        dim: spec.dim,
        half_width: spec.half_width,
        n,
        h,
        omega: it.next().unwrap(),
        w1: it.next().unwrap(),
        w2: it.next().unwrap(),
        buffer: Mask::from_nodes("buffer", buffer, total),
        spec: spec.clone(),
    })
}

/// The 1D layout used by most desk experiments: `L = 4`, `Ω = (−1, 1)`,
/// `W₁ = (−3.5, −1.25)`, `W₂ = (1.25, 3.5)`.
pub fn desk_1d(nodes: usize) -> GridSpec {
    GridSpec {
        dim: 1,
        half_width: 4.0,
        nodes,
        omega: Region::Interval([-1.0, 1.0]),
        w1: Region::Interval([-3.5, -1.25]),
        w2: Region::Interval([1.25, 3.5]),
    }
}
