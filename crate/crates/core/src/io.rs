//! Experiment configuration, the eigenbasis cache, CSV reports and the pipelines the
//! command-line tool runs.
//!
//! Configurations are TOML. Coefficient-like inputs (`q`, `b`, exterior data, targets) are
//! closed-form expressions over a small grammar:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | name | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Names: `x`, `y`, `t`, `pi`, and the indicators `ind_q` (of `Ω × (−T, T)`), `ind_w1`,
//! `ind_w2`. Functions: `sin`, `cos`, `exp`, `sqrt`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calderon::{
    assemble_dn, drift_component, indicator_atoms, recover_drift_and_potential, recover_potential,
    relative_error_on_q, Atom, RecoveryMode, RecoveryOptions, RungeSystem,
};
use crate::coefficients::{CoefficientField, Preset};
use crate::elliptic::{assemble_elliptic, Boundary};
use crate::extension::extend;
use crate::forward::{solve_adjoint, solve_forward, Discretization, ProblemSpec, DENSE_CAP};
use crate::grid::{build_grid, desk_1d, Grid, GridSpec};
use crate::lab;
use crate::spacetime::{SpaceTimeField, TimeAxis};
use crate::spectral::{eigendecompose, EigenBasis};
use crate::{Complex64, Error, Result};

// ---------------------------------------------------------------------------
// expressions

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    X,
    Y,
    T,
    IndQ,
    IndW1,
    IndW2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

/// Evaluation point of an expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: [f64; 2],
    pub t: f64,
    pub in_q: bool,
    pub in_w1: bool,
    pub in_w2: bool,
}

/// A parsed closed-form expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at column {}", self.pos + 1))
    }

    fn skip(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    let exp_sign = (c == b'+' || c == b'-') && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                text.parse::<f64>().map(Node::Num).map_err(|_| {
                    self.pos = start;
                    self.err(&format!("bad number '{text}'"))
                })
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let func = match name {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(f) = func {
                    if self.peek() != Some(b'(') {
                        return Err(self.err(&format!("'{name}' needs an argument in parentheses")));
                    }
                    return Ok(Node::Call(f, Box::new(self.atom()?)));
                }
                let var = match name {
                    "x" => Var::X,
                    "y" => Var::Y,
                    "t" => Var::T,
                    "ind_q" => Var::IndQ,
                    "ind_w1" => Var::IndW1,
                    "ind_w2" => Var::IndW2,
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    _ => {
                        self.pos = start;
                        return Err(self.err(&format!("unknown name '{name}'")));
                    }
                };
                Ok(Node::Var(var))
            }
            Some(c) => Err(self.err(&format!("unexpected '{}'", c as char))),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

fn eval_node(n: &Node, p: &Point) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    match n {
        Node::Num(v) => *v,
        Node::Var(Var::X) => p.x[0],
        Node::Var(Var::Y) => p.x[1],
        Node::Var(Var::T) => p.t,
        Node::Var(Var::IndQ) => ind(p.in_q),
        Node::Var(Var::IndW1) => ind(p.in_w1),
        Node::Var(Var::IndW2) => ind(p.in_w2),
        Node::Neg(a) => -eval_node(a, p),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval_node(a, p), eval_node(b, p));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => a.powf(b),
            }
        }
        Node::Call(f, a) => {
            let a = eval_node(a, p);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Sqrt => a.sqrt(),
            }
        }
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser { src: source.as_bytes(), pos: 0 };
        let root = p.expr()?;
        if p.peek().is_some() {
            return Err(p.err("trailing input"));
        }
        Ok(Expr { source: source.to_string(), root })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, p: &Point) -> f64 {
        eval_node(&self.root, p)
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Assemble,
    Forward,
    Adjoint,
    Dn,
    Recover,
    Extend,
    Runge,
    Verify,
}

impl Pipeline {
    pub fn tag(&self) -> &'static str {
        match self {
            Pipeline::Assemble => "assemble",
            Pipeline::Forward => "forward",
            Pipeline::Adjoint => "adjoint",
            Pipeline::Dn => "dn",
            Pipeline::Recover => "recover",
            Pipeline::Extend => "extend",
            Pipeline::Runge => "runge",
            Pipeline::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridConfig {
    /// The standard 1D layout with the given node count.
    Desk1d { nodes: usize },
    Custom(GridSpec),
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        match self {
            GridConfig::Desk1d { nodes } => desk_1d(*nodes),
            GridConfig::Custom(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub nodes: usize,
    pub horizon: f64,
    #[serde(default = "default_padding")]
    pub padding: f64,
}

fn default_padding() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    /// One expression per spatial axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<String>>,
    /// Exterior data, sampled on the exterior cylinder and zero elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exterior: Option<String>,
    /// Interior source, sampled on `Q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default)]
    pub lambda_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_cap")]
    pub dense_cap: usize,
    #[serde(default = "default_rtol")]
    pub gmres_rtol: f64,
}

fn default_cap() -> usize {
    DENSE_CAP
}

fn default_rtol() -> f64 {
    1e-10
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { dense_cap: default_cap(), gmres_rtol: default_rtol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnConfig {
    #[serde(default = "default_w1")]
    pub inputs: String,
    #[serde(default = "default_w2")]
    pub tests: String,
    #[serde(default = "one")]
    pub node_stride: usize,
    #[serde(default = "one")]
    pub slot_stride: usize,
}

fn default_w1() -> String {
    "w1".into()
}

fn default_w2() -> String {
    "w2".into()
}

fn one() -> usize {
    1
}

impl Default for DnConfig {
    fn default() -> Self {
        DnConfig { inputs: default_w1(), tests: default_w2(), node_stride: 1, slot_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverConfig {
    /// `linearized`, `fixed_point` or `constructive`.
    pub mode: String,
    /// Potential used to synthesize the data.
    pub q_true: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_true: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

impl RecoverConfig {
    fn mode(&self) -> Result<RecoveryMode> {
        match self.mode.as_str() {
            "linearized" => Ok(RecoveryMode::Linearized),
            "fixed_point" => Ok(RecoveryMode::FixedPoint),
            "constructive" => Ok(RecoveryMode::Constructive),
            m => Err(Error::Config(format!(
                "recover.mode: unknown mode '{m}' (expected linearized, fixed_point or constructive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungeConfig {
    pub target: String,
    pub epsilons: Vec<f64>,
    #[serde(default = "both_patches")]
    pub masks: Vec<String>,
}

fn both_patches() -> Vec<String> {
    vec!["w1".into(), "w2".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendConfig {
    pub z_levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_hardy_samples")]
    pub hardy_samples: usize,
    #[serde(default = "unit")]
    pub hardy_b: f64,
    #[serde(default = "default_hardy_a")]
    pub hardy_a: Vec<f64>,
    #[serde(default = "default_log_m")]
    pub log_m: Vec<f64>,
    #[serde(default = "default_alphas")]
    pub carleman_alpha: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_sigma_points")]
    pub sigma_points: usize,
}

fn default_hardy_samples() -> usize {
    200
}

fn unit() -> f64 {
    1.0
}

fn default_hardy_a() -> Vec<f64> {
    vec![-0.4, 0.4]
}

fn default_log_m() -> Vec<f64> {
    vec![0.5, 1.0, 1.5]
}

fn default_alphas() -> Vec<f64> {
    vec![50.0, 100.0, 200.0, 400.0]
}

fn default_delta() -> f64 {
    0.1
}

fn default_sigma_points() -> usize {
    1000
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            hardy_samples: default_hardy_samples(),
            hardy_b: 1.0,
            hardy_a: default_hardy_a(),
            log_m: default_log_m(),
            carleman_alpha: default_alphas(),
            delta: default_delta(),
            sigma_points: default_sigma_points(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    #[serde(default)]
    pub seed: u64,
    /// Directory of the eigenbasis cache; no caching when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<String>,
    pub grid: GridConfig,
    #[serde(default = "identity_preset")]
    pub coefficients: Preset,
    pub time: TimeConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub dn: DnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recover: Option<RecoverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runge: Option<RungeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extend: Option<ExtendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

fn identity_preset() -> Preset {
    Preset::Identity
}

fn check_expr(path: &str, src: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::Config(format!("{path}: {e}")))
}

fn check_vector(path: &str, v: &[String], dim: usize) -> Result<Vec<Expr>> {
    if v.len() < dim || v.len() > 2 {
        return Err(Error::Config(format!("{path}: expected {dim} component(s), got {}", v.len())));
    }
    v.iter().enumerate().map(|(k, s)| check_expr(&format!("{path}[{k}]"), s)).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Checks every rule that does not need the eigenbasis. Messages start with the key path.
    pub fn validate(&self) -> Result<Grid> {
        let grid = build_grid(&self.grid.spec()).map_err(|e| Error::Config(format!("grid: {e}")))?;
        TimeAxis::new(self.time.nodes, self.time.horizon, self.time.padding)
            .map_err(|e| Error::Config(format!("time: {e}")))?;
        let p = &self.problem;
        if !(p.s > 0.0 && p.s < 1.0) {
            return Err(Error::Config(format!("problem.s: fractional order must lie in (0, 1), got {}", p.s)));
        }
        for (key, v) in [("problem.q", &p.q), ("problem.exterior", &p.exterior), ("problem.source", &p.source)] {
            if let Some(src) = v {
                check_expr(key, src)?;
            }
        }
        if let Some(b) = &p.b {
            check_vector("problem.b", b, grid.dim)?;
            if p.s <= 0.5 {
                return Err(Error::Config(format!(
                    "problem.b: drift terms need s > 1/2 for well-posedness, got s = {}",
                    p.s
                )));
            }
        }
        if self.solver.dense_cap == 0 || !(self.solver.gmres_rtol > 0.0) {
            return Err(Error::Config("solver: dense_cap and gmres_rtol must be positive".into()));
        }
        for (key, name) in [("dn.inputs", &self.dn.inputs), ("dn.tests", &self.dn.tests)] {
            if grid.mask(name).is_none() {
                return Err(Error::Config(format!("{key}: unknown mask '{name}'")));
            }
        }
        let need = |section: &str, present: bool| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("{section}: section required by pipeline '{}'", self.pipeline.tag())))
            }
        };
        if let Some(r) = &self.recover {
            let mode = r.mode()?;
            check_expr("recover.q_true", &r.q_true)?;
            if let Some(b) = &r.b_true {
                check_vector("recover.b_true", b, grid.dim)?;
            }
            if (r.b_true.is_some() || mode == RecoveryMode::Constructive) && p.s <= 0.5 {
                return Err(Error::Config(format!(
                    "recover.b_true: drift terms need s > 1/2 for well-posedness, got s = {}",
                    p.s
                )));
            }
            if let Some(e) = r.epsilon {
                if !(e > 0.0) {
                    return Err(Error::Config(format!("recover.epsilon: must be positive, got {e}")));
                }
            }
        }
        if let Some(r) = &self.runge {
            check_expr("runge.target", &r.target)?;
            if r.epsilons.is_empty() || r.epsilons.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config("runge.epsilons: need at least one positive value".into()));
            }
            for (k, m) in r.masks.iter().enumerate() {
                if grid.mask(m).is_none() {
                    return Err(Error::Config(format!("runge.masks[{k}]: unknown mask '{m}'")));
                }
            }
        }
        if let Some(e) = &self.extend {
            if e.z_levels.is_empty() || e.z_levels[0] <= 0.0 || e.z_levels.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("extend.z_levels: need positive, strictly increasing levels".into()));
            }
        }
        if let Some(v) = &self.verify {
            if !(v.hardy_b > 0.0) {
                return Err(Error::Config(format!("verify.hardy_b: must be positive, got {}", v.hardy_b)));
            }
            if let Some(a) = v.hardy_a.iter().find(|a| !(**a > -1.0 && **a < 1.0)) {
                return Err(Error::Config(format!("verify.hardy_a: entries must lie in (−1, 1), got {a}")));
            }
            if let Some(m) = v.log_m.iter().find(|m| !(**m > 0.0)) {
                return Err(Error::Config(format!("verify.log_m: entries must be positive, got {m}")));
            }
            if !(v.delta > 0.0 && v.delta < 1.0) {
                return Err(Error::Config(format!("verify.delta: must lie in (0, 1), got {}", v.delta)));
            }
            if v.sigma_points < 3 {
                return Err(Error::Config("verify.sigma_points: need at least 3".into()));
            }
        }
        match self.pipeline {
            Pipeline::Recover => need("recover", self.recover.is_some())?,
            Pipeline::Runge => need("runge", self.runge.is_some())?,
            Pipeline::Extend => need("extend", self.extend.is_some())?,
            _ => {}
        }
        Ok(grid)
    }
}

// ---------------------------------------------------------------------------
// eigenbasis cache

const CACHE_MAGIC: &[u8; 8] = b"FPCEIGEN";
/// Bumped whenever the cache layout or the eigensolver changes.
pub const CACHE_VERSION: u32 = 1;

/// Cache key of the basis for a grid, coefficient field and boundary condition.
pub fn basis_key(grid: &Grid, coeff: &CoefficientField, boundary: Boundary) -> String {
    let mut h = Sha256::new();
    h.update(grid.hash().as_bytes());
    h.update(coeff.hash_on(grid).as_bytes());
    h.update(boundary.tag().as_bytes());
    hex::encode(&h.finalize()[..16])
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("basis-{key}.bin"))
}

/// Writes `basis` under its hash. The layout is magic, version, key, sizes, cell,
/// boundary, values and column-major vectors, all little-endian.
pub fn cache_store(dir: impl AsRef<Path>, basis: &EigenBasis) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = cache_path(dir, &basis.hash);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(basis.hash.len() as u64).to_le_bytes())?;
        w.write_all(basis.hash.as_bytes())?;
        w.write_all(&(basis.vectors.nrows() as u64).to_le_bytes())?;
        w.write_all(&(basis.values.len() as u64).to_le_bytes())?;
        w.write_all(&basis.cell.to_le_bytes())?;
        w.write_all(&[matches!(basis.boundary, Boundary::Neumann) as u8])?;
        for v in &basis.values {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in basis.vectors.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_basis(bytes: &[u8], key: &str) -> std::result::Result<EigenBasis, String> {
    let mut r = bytes;
    let mut take = |n: usize| -> std::result::Result<Vec<u8>, String> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| "truncated file".to_string())?;
        Ok(buf)
    };
    if take(8)?.as_slice() != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(format!("version {version} does not match {CACHE_VERSION}"));
    }
    let u64_at = |take: &mut dyn FnMut(usize) -> std::result::Result<Vec<u8>, String>| {
        take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    };
    let klen = u64_at(&mut take)? as usize;
    if klen > 256 {
        return Err("implausible key".into());
    }
    let stored = String::from_utf8(take(klen)?).map_err(|_| "key not utf-8".to_string())?;
    if stored != key {
        return Err("key mismatch".into());
    }
    let rows = u64_at(&mut take)? as usize;
    let modes = u64_at(&mut take)? as usize;
    if rows.saturating_mul(modes) > 1 << 26 {
        return Err("implausible dimensions".into());
    }
    let cell = f64::from_bits(u64_at(&mut take)?);
    let boundary = if take(1)?[0] == 1 { Boundary::Neumann } else { Boundary::Dirichlet };
    let values = (0..modes).map(|_| u64_at(&mut take).map(f64::from_bits)).collect::<std::result::Result<Vec<_>, _>>()?;
    let flat = (0..rows * modes).map(|_| u64_at(&mut take).map(f64::from_bits)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(EigenBasis { values, vectors: DMatrix::from_vec(rows, modes, flat), cell, boundary, hash: stored })
}

/// Loads the basis stored under `key`. Absent, stale or corrupt files are misses; corrupt
/// and version-mismatched files also log a warning.
pub fn cache_load(dir: impl AsRef<Path>, key: &str) -> Option<EigenBasis> {
    let path = cache_path(dir.as_ref(), key);
    let bytes = fs::read(&path).ok()?;
    match read_basis(&bytes, key) {
        Ok(b) => Some(b),
        Err(msg) => {
            log::warn!("ignoring cache file {}: {msg}", path.display());
            None
        }
    }
}

/// Assembles the Dirichlet eigenbasis, going through the cache when `cache_dir` is set.
pub fn assemble_basis(grid: &Grid, coeff: &CoefficientField, cap: usize, cache_dir: Option<&Path>) -> Result<EigenBasis> {
    let key = basis_key(grid, coeff, Boundary::Dirichlet);
    if let Some(dir) = cache_dir {
        if let Some(b) = cache_load(dir, &key) {
            return Ok(b);
        }
    }
    let op = assemble_elliptic(grid, coeff, Boundary::Dirichlet);
    let basis = eigendecompose(&op, grid, &key, cap)?;
    if let Some(dir) = cache_dir {
        cache_store(dir, &basis)?;
    }
    Ok(basis)
}

// ---------------------------------------------------------------------------
// reports

/// One CSV table. Cells are preformatted strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|v| fmt_num(*v)).collect());
    }

    pub fn push_cells(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// Shortest round-trip scientific formatting.
pub fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub summary: Vec<String>,
}

/// Writes every table as `<name>.csv` (first line `# config_hash=...`, then the header) and
/// the summary as `summary.txt`. Returns the written paths.
pub fn emit_report(dir: impl AsRef<Path>, report: &Report, config_hash: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for t in &report.tables {
        let path = dir.join(format!("{}.csv", t.name));
        let mut text = format!("# config_hash={config_hash}\n{}\n", t.columns.join(","));
        for r in &t.rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    let path = dir.join("summary.txt");
    let mut text = format!("config_hash={config_hash}\n");
    for line in &report.summary {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(out)
}

fn field_table(name: &str, grid: &Grid, u: &SpaceTimeField) -> Table {
    let mut t = if grid.dim == 1 {
        Table::new(name, &["x [length]", "t [time]", "re", "im"])
    } else {
        Table::new(name, &["x [length]", "y [length]", "t [time]", "re", "im"])
    };
    for i in 0..u.n_space {
        let x = grid.coords(i);
        for n in 0..u.axis.nodes {
            let v = u.get(i, n);
            if grid.dim == 1 {
                t.push(&[x[0], u.axis.time(n), v.re, v.im]);
            } else {
                t.push(&[x[0], x[1], u.axis.time(n), v.re, v.im]);
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// manifest and pipelines

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seed: u64,
    /// Requested worker count; the pipelines themselves run single-threaded.
    pub threads: usize,
    pub outputs: Vec<OutputFile>,
    pub timings: Vec<StageTiming>,
    /// `ok` or the error that aborted the run.
    pub status: String,
}

/// Overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub pipeline: Option<Pipeline>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

struct Stages {
    timings: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let r = f();
        self.timings.push(StageTiming { stage: name.into(), seconds: start.elapsed().as_secs_f64() });
        r
    }
}

fn point(disc: &Discretization, node: usize, slot: usize) -> Point {
    Point {
        x: disc.grid.coords(node),
        t: disc.axis.time(slot),
        in_q: disc.in_q(node, slot),
        in_w1: disc.grid.w1.contains(node),
        in_w2: disc.grid.w2.contains(node),
    }
}

/// Samples `e` where `keep` holds and leaves zeros elsewhere.
fn sample(disc: &Discretization, e: &Expr, keep: impl Fn(usize, usize) -> bool) -> SpaceTimeField {
    let mut f = disc.zero_field();
    for i in 0..disc.grid.len() {
        for n in 0..disc.axis.nodes {
            if keep(i, n) {
                f.set(i, n, Complex64::new(e.eval(&point(disc, i, n)), 0.0));
            }
        }
    }
    f
}

fn in_exterior_window(disc: &Discretization, node: usize, slot: usize) -> bool {
    !disc.grid.omega.contains(node) && disc.axis.time(slot).abs() < disc.axis.horizon - 1e-9 * disc.axis.dt()
}

fn build_spec(disc: &Discretization, s: f64, q: Option<&str>, b: Option<&[String]>, cfg: &ProblemConfig) -> Result<ProblemSpec> {
    let mut spec = ProblemSpec::new(disc, s);
    spec.lambda_shift = cfg.lambda_shift;
    if let Some(src) = q {
        let e = Expr::parse(src)?;
        let f = sample(disc, &e, |i, n| disc.in_q(i, n));
        spec.potential = f.real_part();
    }
    if let Some(bs) = b {
        let es: Vec<Expr> = bs.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()?;
        let nt = disc.axis.nodes;
        let mut drift = vec![[0.0; 2]; disc.grid.len() * nt];
        for i in 0..disc.grid.len() {
            for n in 0..nt {
                if disc.in_q(i, n) {
                    let p = point(disc, i, n);
                    for (k, e) in es.iter().enumerate() {
                        drift[i * nt + n][k] = e.eval(&p);
                    }
                }
            }
        }
        spec.drift = Some(drift);
    }
    if let Some(src) = &cfg.exterior {
        spec.exterior = sample(disc, &Expr::parse(src)?, |i, n| in_exterior_window(disc, i, n));
    }
    if let Some(src) = &cfg.source {
        spec.source = sample(disc, &Expr::parse(src)?, |i, n| disc.in_q(i, n));
    }
    Ok(spec)
}

fn atoms_for(disc: &Discretization, name: &str, dn: &DnConfig) -> Result<Vec<Atom>> {
    let mask = disc.grid.mask(name).ok_or_else(|| Error::Config(format!("unknown mask '{name}'")))?;
    Ok(indicator_atoms(disc, mask, dn.node_stride, dn.slot_stride))
}

fn execute(cfg: &ExperimentConfig, grid: Grid, seed: u64, stages: &mut Stages) -> Result<Report> {
    let coeff = CoefficientField::preset_with_bounds(cfg.coefficients.clone());
    let mut report = Report::default();
    if cfg.pipeline == Pipeline::Verify {
        return stages.run("verify", || verify(cfg.verify.clone().unwrap_or_default(), seed));
    }
    let cache = cfg.cache_dir.as_ref().map(PathBuf::from);
    let basis = stages.run("assemble", || assemble_basis(&grid, &coeff, cfg.solver.dense_cap, cache.as_deref()))?;
    let axis = TimeAxis::new(cfg.time.nodes, cfg.time.horizon, cfg.time.padding)?;
    if cfg.pipeline == Pipeline::Assemble {
        let mut t = Table::new("eigenvalues", &["k", "lambda [1/length^2]"]);
        for (k, v) in basis.values.iter().enumerate() {
            t.push(&[k as f64, *v]);
        }
        report.summary.push(format!("modes={} basis_hash={}", basis.len(), basis.hash));
        report.tables.push(t);
        return Ok(report);
    }
    let mut disc = Discretization::new(grid, basis, axis)?;
    disc.dense_cap = cfg.solver.dense_cap;
    disc.gmres.rtol = cfg.solver.gmres_rtol;
    let p = &cfg.problem;
    let spec = build_spec(&disc, p.s, p.q.as_deref(), p.b.as_deref(), p)?;
    match cfg.pipeline {
        Pipeline::Forward | Pipeline::Extend => {
            let sol = stages.run("forward", || solve_forward(&disc, &spec))?;
            report.summary.push(format!("residual={:e}", sol.residual));
            if let Some(c) = sol.condition {
                report.summary.push(format!("condition={c:e}"));
            }
            if cfg.pipeline == Pipeline::Forward {
                report.tables.push(field_table("solution", &disc.grid, &sol.u));
            } else {
                let z = &cfg.extend.as_ref().unwrap().z_levels;
                let ext = stages.run("extend", || extend(&sol.u, &disc.basis, z, p.s))?;
                let mut t = Table::new("extension", &["z [length]", "x [length]", "y [length]", "t [time]", "re", "im"]);
                for (zl, lvl) in ext.z_levels.iter().zip(&ext.levels) {
                    for i in 0..lvl.n_space {
                        let x = disc.grid.coords(i);
                        for n in 0..lvl.axis.nodes {
                            let v = lvl.get(i, n);
                            t.push(&[*zl, x[0], x[1], lvl.axis.time(n), v.re, v.im]);
                        }
                    }
                }
                report.tables.push(t);
            }
        }
        Pipeline::Adjoint => {
            let g = spec.exterior.clone();
            let sol = stages.run("adjoint", || solve_adjoint(&disc, &spec, &g))?;
            report.summary.push(format!("residual={:e}", sol.residual));
            report.tables.push(field_table("adjoint", &disc.grid, &sol.u));
        }
        Pipeline::Dn => {
            let inputs = atoms_for(&disc, &cfg.dn.inputs, &cfg.dn)?;
            let tests = atoms_for(&disc, &cfg.dn.tests, &cfg.dn)?;
            let dn = stages.run("dn", || assemble_dn(&disc, &spec, &inputs, &tests))?;
            let mut t = Table::new("dn", &["test", "input", "re", "im"]);
            for j in 0..dn.data.nrows() {
                for i in 0..dn.data.ncols() {
                    let v = dn.data[(j, i)];
                    t.push(&[j as f64, i as f64, v.re, v.im]);
                }
            }
            let mut a = Table::new("atoms", &["role", "index", "label"]);
            for (role, list) in [("input", &dn.inputs), ("test", &dn.tests)] {
                for (k, atom) in list.iter().enumerate() {
                    a.push_cells(vec![role.into(), k.to_string(), atom.label.clone()]);
                }
            }
            report.summary.push(format!("dn_norm={:e} spec_hash={}", dn.norm(), dn.spec_hash));
            report.tables.push(t);
            report.tables.push(a);
        }
        Pipeline::Recover => {
            let rc = cfg.recover.as_ref().unwrap();
            let mode = rc.mode()?;
            let truth = build_spec(&disc, p.s, Some(&rc.q_true), rc.b_true.as_deref(), p)?;
            let inputs = atoms_for(&disc, &cfg.dn.inputs, &cfg.dn)?;
            let tests = atoms_for(&disc, &cfg.dn.tests, &cfg.dn)?;
            let observed = stages.run("data", || assemble_dn(&disc, &truth, &inputs, &tests))?;
            let mut opts = RecoveryOptions::default();
            if let Some(e) = rc.epsilon {
                opts.epsilon = e;
            }
            if let Some(m) = rc.max_iter {
                opts.max_iter = m;
            }
            let joint = rc.b_true.is_some() || mode == RecoveryMode::Constructive;
            let res = stages.run("recover", || {
                if joint {
                    recover_drift_and_potential(&disc, &observed, &spec, mode, &opts)
                } else {
                    recover_potential(&disc, &observed, &spec, mode, &opts)
                }
            })?;
            let nt = disc.axis.nodes;
            let mut t = Table::new("q_hat", &["x [length]", "y [length]", "t [time]", "q_hat", "q_true"]);
            for &(i, n) in &disc.dofs {
                let x = disc.grid.coords(i);
                t.push(&[x[0], x[1], disc.axis.time(n), res.potential[i * nt + n], truth.potential[i * nt + n]]);
            }
            let mut m = Table::new("misfit", &["iteration", "relative misfit"]);
            for (k, v) in res.misfit.iter().enumerate() {
                m.push(&[k as f64, *v]);
            }
            report.summary.push(format!("mode={} rank={}", res.mode.tag(), res.effective_rank));
            let q_err = relative_error_on_q(&disc, &res.potential, &truth.potential);
            report.summary.push(format!("q_relative_error={q_err:e}"));
            if let (Some(est), Some(tb)) = (&res.drift, &truth.drift) {
                let (e0, t0) = (drift_component(est, 0), drift_component(tb, 0));
                report.summary.push(format!("b_relative_error={:e}", relative_error_on_q(&disc, &e0, &t0)));
                let mut d = Table::new("b_hat", &["x [length]", "y [length]", "t [time]", "b1_hat", "b1_true"]);
                for &(i, n) in &disc.dofs {
                    let x = disc.grid.coords(i);
                    d.push(&[x[0], x[1], disc.axis.time(n), e0[i * nt + n], t0[i * nt + n]]);
                }
                report.tables.push(d);
            }
            report.tables.push(t);
            report.tables.push(m);
        }
        Pipeline::Runge => {
            let rc = cfg.runge.as_ref().unwrap();
            let mut inputs = Vec::new();
            for name in &rc.masks {
                inputs.extend(atoms_for(&disc, name, &cfg.dn)?);
            }
            let target = sample(&disc, &Expr::parse(&rc.target)?, |i, n| disc.in_q(i, n));
            let sys = stages.run("runge_system", || RungeSystem::new(&disc, &spec, &inputs))?;
            let mut t = Table::new("runge", &["epsilon", "relative residual"]);
            for &e in &rc.epsilons {
                let fit = sys.fit(&target, e)?;
                t.push(&[e, fit.residual]);
            }
            report.summary.push(format!("atoms={}", inputs.len()));
            report.tables.push(t);
        }
        Pipeline::Assemble | Pipeline::Verify => unreachable!(),
    }
    Ok(report)
}

/// Inequality batteries.
fn verify(v: VerifyConfig, seed: u64) -> Result<Report> {
    let mut report = Report::default();
    let mut hardy = Table::new("hardy_margins", &["a", "sample", "relative margin"]);
    for (k, &a) in v.hardy_a.iter().enumerate() {
        let r = lab::hardy_check(v.hardy_samples, v.hardy_b, 1, a, seed.wrapping_add(k as u64))?;
        for (i, m) in r.margins.iter().enumerate() {
            hardy.push(&[a, i as f64, *m]);
        }
        report.summary.push(format!(
            "hardy a={a}: samples={} skipped={} violations={} worst_margin={:e}",
            r.samples,
            r.skipped,
            r.violations,
            r.worst_margin()
        ));
    }
    let mut logt = Table::new("log_inequality", &["m", "C_m", "argmax y", "argmax eps", "violations"]);
    let (y, e) = lab::log_inequality_grids(2001, 201);
    for &m in &v.log_m {
        let r = lab::log_inequality_constant(m, &y, &e)?;
        logt.push(&[m, r.c_m, r.argmax.0, r.argmax.1, r.violations as f64]);
    }
    let mut sig = Table::new("sigma", &["lambda", "points", "N_rep", "margin1", "margin2", "margin3", "margin4"]);
    let mut carl = Table::new(
        "carleman",
        &["alpha", "lhs_zero", "lhs_grad", "rhs_operator", "boundary", "sup_term_log10", "ratio", "quad_change"],
    );
    let test = lab::CarlemanTest { width: 0.5, radius: 1.0, amplitude: 1.0 };
    let identity = |_: [f64; 2], _: f64| [[1.0, 0.0], [0.0, 1.0]];
    for &alpha in &v.carleman_alpha {
        let setup = lab::CarlemanSetup::new(alpha, v.delta, 0.0)?;
        let lam = setup.lambda();
        let w = lab::solve_sigma_ode(lam, &lab::log_grid(lam, v.sigma_points))?;
        let s = lab::check_sigma_properties(&w)?;
        let m = s.margins;
        sig.push(&[lam, v.sigma_points as f64, s.n_rep.unwrap_or(f64::NAN), m[0], m[1], m[2], m[3]]);
        let c = lab::carleman_functionals(&test, &setup, &w, &identity, setup.c_max())?;
        carl.push(&[alpha, c.lhs_zero, c.lhs_grad, c.rhs_operator, c.boundary, c.sup_term_log10, c.ratio, c.quad_change]);
    }
    report.tables.extend([hardy, logt, sig, carl]);
    Ok(report)
}

/// Runs the pipeline named in the configuration at `config_path` and writes its outputs
/// and `manifest.json` into `out_dir`. A failing stage still writes the manifest.
pub fn run_experiment(config_path: impl AsRef<Path>, out_dir: impl AsRef<Path>, opts: &RunOptions) -> Result<RunManifest> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(p) = opts.pipeline {
        cfg.pipeline = p;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    run_config(&cfg, out_dir, opts.threads.unwrap_or(1))
}

/// [`run_experiment`] on an already parsed configuration.
pub fn run_config(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>, threads: usize) -> Result<RunManifest> {
    let out_dir = out_dir.as_ref();
    if threads == 0 {
        return Err(Error::Config("threads: must be at least 1".into()));
    }
    let grid = cfg.validate()?;
    let config_hash = cfg.hash()?;
    let mut manifest = RunManifest {
        pipeline: cfg.pipeline.tag().into(),
        config_hash: config_hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix: unix_now(),
        finished_unix: 0,
        seed: cfg.seed,
        threads,
        outputs: Vec::new(),
        timings: Vec::new(),
        status: "ok".into(),
    };
    let mut stages = Stages { timings: Vec::new() };
    let result = execute(cfg, grid, cfg.seed, &mut stages).and_then(|report| {
        let mut paths = emit_report(out_dir, &report, &config_hash)?;
        let cfg_path = out_dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
        paths.push(cfg_path);
        Ok(paths)
    });
    manifest.timings = stages.timings;
    manifest.finished_unix = unix_now();
    let outcome = match result {
        Ok(paths) => {
            for p in paths {
                let sha256 = sha256_file(&p)?;
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                manifest.outputs.push(OutputFile { path: name, sha256 });
            }
            Ok(())
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            Err(e)
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    outcome.map(|_| manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, t: f64) -> Point {
        Point { x: [x, 0.5], t, in_q: true, in_w1: false, in_w2: true }
    }

    #[test]
    fn expressions_follow_precedence() {
        let cases = [
            ("1 + 2*3", 7.0),
            ("2^3^2", 512.0),
            ("-2^2", -4.0),
            ("(1+2)*3 - 4/2", 7.0),
            ("sin(pi/2) + cos(0) + exp(0) + sqrt(4)", 5.0),
            ("x*t + y", 2.0 * 3.0 + 0.5),
            ("ind_q + 2*ind_w1 + 4*ind_w2", 5.0),
            ("1.5e-1*10", 1.5),
        ];
        for (src, want) in cases {
            let v = Expr::parse(src).unwrap().eval(&pt(2.0, 3.0));
            assert!((v - want).abs() < 1e-12, "{src}: {v}");
        }
    }

    #[test]
    fn expression_errors_carry_column() {
        let e = Expr::parse("1 + foo").unwrap_err().to_string();
        assert!(e.contains("unknown name 'foo'") && e.contains("column 5"), "{e}");
        assert!(Expr::parse("sin x").is_err());
        assert!(Expr::parse("(1 + 2").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    const FORWARD: &str = r#"
pipeline = "forward"
seed = 3

[grid]
kind = "desk1d"
nodes = 31

[time]
nodes = 16
horizon = 1.0

[problem]
s = 0.5
q = "0.2*cos(x)"
exterior = "exp(-4*(x+2.5)^2)*ind_w1"
"#;

    #[test]
    fn config_round_trip_is_fixed_point() {
        let c = ExperimentConfig::from_toml(FORWARD).unwrap();
        let text = c.to_toml().unwrap();
        let c2 = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c, c2);
        assert_eq!(text, c2.to_toml().unwrap());
    }

    #[test]
    fn drift_with_small_order_is_rejected_with_key_path() {
        let text = FORWARD.replace("s = 0.5", "s = 0.4\nb = [\"0.1\"]");
        let err = ExperimentConfig::from_toml(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("problem.b") && err.contains("s > 1/2"), "{err}");
    }

    #[test]
    fn validation_names_offending_keys() {
        let bad_mask = format!("{FORWARD}\n[dn]\ninputs = \"w3\"\n");
        let err = ExperimentConfig::from_toml(&bad_mask).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("dn.inputs"), "{err}");
        let bad_expr = FORWARD.replace("0.2*cos(x)", "0.2*cosh(x)");
        let err = ExperimentConfig::from_toml(&bad_expr).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("problem.q"), "{err}");
        let bad_s = FORWARD.replace("s = 0.5", "s = 1.5");
        let err = ExperimentConfig::from_toml(&bad_s).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("problem.s"), "{err}");
        let missing = FORWARD.replace("\"forward\"", "\"runge\"");
        let err = ExperimentConfig::from_toml(&missing).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("runge"), "{err}");
        assert!(ExperimentConfig::from_toml(&format!("{FORWARD}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn forward_run_is_deterministic() {
        let cfg = ExperimentConfig::from_toml(FORWARD).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = run_config(&cfg, d1.path(), 1).unwrap();
        let m2 = run_config(&cfg, d2.path(), 1).unwrap();
        assert_eq!(m1.status, "ok");
        assert_eq!(m1.outputs, m2.outputs);
        assert!(m1.outputs.iter().any(|o| o.path == "solution.csv"));
        let text = fs::read_to_string(d1.path().join("solution.csv")).unwrap();
        assert!(text.starts_with(&format!("# config_hash={}\nx [length],t [time],re,im\n", m1.config_hash)));
        assert!(d1.path().join("manifest.json").exists());
    }

    #[test]
    fn failing_stage_writes_partial_manifest() {
        // an eigensolve cap below the grid size aborts the assemble stage
        let text = format!("{FORWARD}\n[solver]\ndense_cap = 8\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let d = tempfile::tempdir().unwrap();
        assert!(run_config(&cfg, d.path(), 1).is_err());
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(d.path().join("manifest.json")).unwrap()).unwrap();
        assert!(m.status.starts_with("failed"));
        assert_eq!(m.timings[0].stage, "assemble");
    }

    fn desk_basis(amplitude: f64) -> (Grid, CoefficientField, EigenBasis) {
        let g = build_grid(&desk_1d(15)).unwrap();
        let c = CoefficientField::preset_with_bounds(Preset::Sinusoidal { amplitude, frequency: 1.0 });
        let b = assemble_basis(&g, &c, 4096, None).unwrap();
        (g, c, b)
    }

    #[test]
    fn cache_round_trip_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let (g, c, b) = desk_basis(0.2);
        cache_store(dir.path(), &b).unwrap();
        assert_eq!(cache_load(dir.path(), &b.hash).unwrap(), b);
        let (_, c2, _) = desk_basis(0.3);
        assert!(cache_load(dir.path(), &basis_key(&g, &c2, Boundary::Dirichlet)).is_none());
        assert_eq!(basis_key(&g, &c, Boundary::Dirichlet), b.hash);
        // version bump
        let path = cache_path(dir.path(), &b.hash);
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = bytes[8].wrapping_add(1);
        fs::write(&path, &bytes).unwrap();
        assert!(cache_load(dir.path(), &b.hash).is_none());
        // truncation
        bytes[8] = bytes[8].wrapping_sub(1);
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(cache_load(dir.path(), &b.hash).is_none());
        // assemble through the cache recomputes and restores the file
        let again = assemble_basis(&g, &c, 4096, Some(dir.path())).unwrap();
        assert_eq!(again, b);
        assert_eq!(cache_load(dir.path(), &b.hash).unwrap(), b);
    }

    #[test]
    fn empty_table_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let rep = Report { tables: vec![Table::new("empty", &["a", "b"])], summary: vec![] };
        let paths = emit_report(dir.path(), &rep, "abc").unwrap();
        assert_eq!(fs::read_to_string(&paths[0]).unwrap(), "# config_hash=abc\na,b\n");
    }
}
