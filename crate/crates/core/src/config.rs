//! TOML run configuration shared by the command-line entry points.
//!
//! A file holds a command-independent block (`k`, `k0`, `r00`, `loss`,
//! `seed`) and one optional table per command. Unknown keys are rejected
//! and validation errors name the offending field.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::linmodel::LossSpec;
use crate::quadrature::{QuadratureRule, RuleKind};
use crate::simulator::NewtonOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub k0: usize,
    /// `R00`, row by row.
    pub r00: Vec<Vec<f64>>,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub seed: u64,
    pub theory: Option<TheoryBlock>,
    pub spectrum: Option<SpectrumBlock>,
    pub simulate: Option<SimulateBlock>,
    pub compare: Option<CompareBlock>,
}

/// Either an explicit list or `lo`, `hi`, `points` with optional log spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range(RangeGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    #[serde(default)]
    pub log: bool,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::List(v) => v.clone(),
            Grid::Range(r) if r.points == 1 => vec![r.lo],
            Grid::Range(r) => (0..r.points)
                .map(|i| {
                    let t = i as f64 / (r.points - 1) as f64;
                    if r.log {
                        (r.lo.ln() + t * (r.hi.ln() - r.lo.ln())).exp()
                    } else {
                        r.lo + t * (r.hi - r.lo)
                    }
                })
                .collect(),
        }
    }

    fn validate(&self, field: &str, allow_zero: bool) -> Result<()> {
        if let Grid::Range(r) = self {
            if r.points == 0 {
                return config_err(&format!("{field}.points"), "must be at least 1");
            }
            if !(r.hi >= r.lo) {
                return config_err(&format!("{field}.hi"), "must not be below lo");
            }
            if r.log && !(r.lo > 0.0) {
                return config_err(&format!("{field}.lo"), "log spacing needs lo > 0");
            }
        }
        let values = self.values();
        if values.is_empty() {
            return config_err(field, "must not be empty");
        }
        for (i, v) in values.iter().enumerate() {
            let ok = v.is_finite() && if allow_zero { *v >= 0.0 } else { *v > 0.0 };
            if !ok {
                let want = if allow_zero { "finite and nonnegative" } else { "finite and positive" };
                return config_err(&format!("{field}[{i}]"), &format!("must be {want}, got {v}"));
            }
        }
        Ok(())
    }
}

/// Gaussian quadrature selection. Without `kind`, tensor Hermite is used up
/// to dimension 4 and a quasi-random rule above.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub kind: Option<RuleKind>,
    /// Nodes per dimension of tensor rules.
    pub order: Option<usize>,
    /// Node count of sampled rules.
    pub count: Option<usize>,
}

impl QuadratureSpec {
    pub fn build(&self, dim: usize, seed: u64, default_order: usize, default_count: usize) -> Result<QuadratureRule> {
        let kind = self.kind.unwrap_or(if dim <= 4 { RuleKind::TensorHermite } else { RuleKind::QuasiRandom });
        match kind {
            RuleKind::TensorHermite => QuadratureRule::tensor_hermite(dim, self.order.unwrap_or(default_order)),
            RuleKind::QuasiRandom => QuadratureRule::quasi_random(dim, self.count.unwrap_or(default_count), seed),
            RuleKind::PseudoRandom => QuadratureRule::pseudo_random(dim, self.count.unwrap_or(default_count), seed),
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.order == Some(0) {
            return config_err(&format!("{field}.order"), "must be at least 1");
        }
        if self.count == Some(0) {
            return config_err(&format!("{field}.count"), "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub max_iterations: Option<usize>,
    /// Residual bound for the `converged` flag.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryBlock {
    pub alpha: Grid,
    pub lambda: Grid,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub solver: SolverBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumBlock {
    pub alpha: Grid,
    pub lambda: Grid,
    /// `[lo, hi]`; defaults to a window covering the support.
    pub window: Option<[f64; 2]>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Rule for the critical point.
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    /// Rule discretizing the curvature law; coarser by default.
    #[serde(default)]
    pub curvature: QuadratureSpec,
    #[serde(default)]
    pub solver: SolverBlock,
}

fn default_points() -> usize {
    400
}

fn default_gamma() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub d: Vec<usize>,
    /// Sample ratios; `n = round(α d)`.
    pub alpha: Grid,
    pub lambda: Grid,
    pub trials: usize,
    /// Also record Hessian eigenvalues at each minimizer.
    #[serde(default)]
    pub spectrum: bool,
    /// Required for `λ = 0`, where the minimizer may not exist.
    #[serde(default)]
    pub existence_risk: bool,
    #[serde(default)]
    pub newton: NewtonOptions,
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    /// Theory CSV.
    pub theory: PathBuf,
    /// Simulation summary CSV, or any CSV with the theory columns.
    pub simulation: PathBuf,
    /// Density CSV for the spectral distance.
    pub density: Option<PathBuf>,
    #[serde(default)]
    pub gates: Gates,
}

/// Tolerances checked by `compare`; absent entries are not gated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    pub train: Option<f64>,
    pub test: Option<f64>,
    pub class: Option<f64>,
    pub est: Option<f64>,
    pub w1: Option<f64>,
}

impl Gates {
    pub fn enabled(&self) -> bool {
        self.train.is_some() || self.test.is_some() || self.class.is_some() || self.est.is_some() || self.w1.is_some()
    }
}

fn config_err<T>(field: &str, message: &str) -> Result<T> {
    Err(Error::Config {
        field: field.into(),
        message: message.into(),
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: e.span().map_or_else(|| "<root>".into(), |s| field_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn r00_matrix(&self) -> DMatrix<f64> {
        let k0 = self.r00.len();
        DMatrix::from_fn(k0, k0, |i, j| self.r00[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return config_err("k", "must be at least 1");
        }
        if self.k0 == 0 {
            return config_err("k0", "must be at least 1");
        }
        if self.r00.len() != self.k0 {
            return config_err("r00", &format!("has {} rows, expected k0 = {}", self.r00.len(), self.k0));
        }
        for (i, row) in self.r00.iter().enumerate() {
            if row.len() != self.k0 {
                return config_err(&format!("r00[{i}]"), &format!("has {} entries, expected k0 = {}", row.len(), self.k0));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return config_err(&format!("r00[{i}][{j}]"), "must be finite");
            }
        }
        let r00 = self.r00_matrix();
        let asym = (&r00 - r00.transpose()).amax();
        if asym > 1e-12 * (1.0 + r00.amax()) {
            return config_err("r00", &format!("must be symmetric (asymmetry {asym:.3e})"));
        }
        if !(min_eigenvalue(&r00) > 0.0) {
            return config_err("r00", "must be positive definite");
        }
        if let Err(e) = self.loss.build(self.k, self.k0) {
            return config_err("loss", &e.to_string());
        }
        if let Some(t) = &self.theory {
            t.alpha.validate("theory.alpha", false)?;
            t.lambda.validate("theory.lambda", true)?;
            t.quadrature.validate("theory.quadrature")?;
            validate_solver(&t.solver, "theory.solver")?;
        }
        if let Some(s) = &self.spectrum {
            s.alpha.validate("spectrum.alpha", false)?;
            s.lambda.validate("spectrum.lambda", true)?;
            s.quadrature.validate("spectrum.quadrature")?;
            s.curvature.validate("spectrum.curvature")?;
            validate_solver(&s.solver, "spectrum.solver")?;
            if s.points < 2 {
                return config_err("spectrum.points", "must be at least 2");
            }
            if !(s.gamma > 0.0 && s.gamma.is_finite()) {
                return config_err("spectrum.gamma", "must be finite and positive");
            }
            if let Some([lo, hi]) = s.window {
                if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                    return config_err("spectrum.window", "needs finite lo < hi");
                }
            }
        }
        if let Some(s) = &self.simulate {
            if s.d.is_empty() {
                return config_err("simulate.d", "must not be empty");
            }
            for (i, &d) in s.d.iter().enumerate() {
                if d < self.k0 {
                    return config_err(&format!("simulate.d[{i}]"), &format!("must be at least k0 = {}", self.k0));
                }
            }
            s.alpha.validate("simulate.alpha", false)?;
            s.lambda.validate("simulate.lambda", true)?;
            if s.trials == 0 {
                return config_err("simulate.trials", "must be at least 1");
            }
            if s.lambda.values().contains(&0.0) && !s.existence_risk {
                return config_err("simulate.existence_risk", "lambda = 0 requires existence_risk = true");
            }
            if s.test_size == Some(0) {
                return config_err("simulate.test_size", "must be at least 1");
            }
            let nw = &s.newton;
            if !(nw.tol > 0.0) {
                return config_err("simulate.newton.tol", "must be positive");
            }
            if !(nw.nonexistence_norm > 0.0) {
                return config_err("simulate.newton.nonexistence_norm", "must be positive");
            }
        }
        if let Some(c) = &self.compare {
            let g = &c.gates;
            for (name, v) in [("train", g.train), ("test", g.test), ("class", g.class), ("est", g.est), ("w1", g.w1)] {
                if let Some(v) = v {
                    if !(v >= 0.0) {
                        return config_err(&format!("compare.gates.{name}"), "must be nonnegative");
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, in hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_solver(s: &SolverBlock, field: &str) -> Result<()> {
    if s.max_iterations == Some(0) {
        return config_err(&format!("{field}.max_iterations"), "must be at least 1");
    }
    if let Some(t) = s.tolerance {
        if !(t > 0.0) {
            return config_err(&format!("{field}.tolerance"), "must be positive");
        }
    }
    Ok(())
}

/// Best-effort dotted key path of the TOML entry containing byte `offset`.
fn field_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if pos > offset {
            break;
        }
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "<root>".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Seed of sweep cell `index`, independent of the order cells are run in.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "k = 2\nk0 = 2\nr00 = [[1.0, 0.5], [0.5, 1.0]]\n";

    #[test]
    fn parses_theory_block_with_log_grid() {
        let text = format!("{BASE}[theory]\nalpha = [3.0, 5.0]\nlambda = {{ lo = 1e-3, hi = 10.0, points = 5, log = true }}\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        let l = cfg.theory.unwrap().lambda.values();
        assert_eq!(l.len(), 5);
        assert!((l[0] - 1e-3).abs() < 1e-15 && (l[4] - 10.0).abs() < 1e-12);
        assert!((l[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let text = format!("{BASE}[theory]\nalpha = [3.0]\nlambda = [0.1]\nlamda = 2\n");
        match RunConfig::from_toml(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "theory.lamda");
                assert!(message.contains("lamda"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_alpha_is_rejected() {
        let text = format!("{BASE}[theory]\nalpha = []\nlambda = [0.1]\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config { field, .. }) if field == "theory.alpha"));
    }

    #[test]
    fn r00_shape_must_match_k0() {
        let text = "k = 3\nk0 = 3\nr00 = [[1.0, 0.5], [0.5, 1.0]]\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config { field, .. }) if field == "r00"));
        let text = "k = 2\nk0 = 2\nr00 = [[1.0, 0.5], [0.5]]\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config { field, .. }) if field == "r00[1]"));
    }

    #[test]
    fn zero_lambda_needs_existence_flag() {
        let text = format!("{BASE}[simulate]\nd = [50]\nalpha = [3.0]\nlambda = [0.0]\ntrials = 2\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config { field, .. }) if field == "simulate.existence_risk"));
        let ok = format!("{text}existence_risk = true\n");
        assert!(RunConfig::from_toml(&ok).is_ok());
    }

    #[test]
    fn non_pd_r00_is_rejected() {
        let text = "k = 2\nk0 = 2\nr00 = [[1.0, 2.0], [2.0, 1.0]]\n";
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config { field, .. }) if field == "r00"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn cell_seeds_differ() {
        assert_ne!(cell_seed(0, 0), cell_seed(0, 1));
        assert_eq!(cell_seed(7, 3), cell_seed(7, 3));
    }
}
