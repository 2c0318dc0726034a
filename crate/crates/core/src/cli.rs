//! Command runners behind the `theory`, `spectrum`, `simulate` and `compare`
//! subcommands, and the CSV files they exchange.
//!
//! Every CSV begins with `#meta config_hash=<hex> seed=<u64> version=<semver>`
//! followed by a header row. Cells of a sweep run in parallel and are
//! written in sweep order, so output bytes do not depend on the thread count.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::asymptotics::{predicted_observables, predicted_spectrum, solve_critical_point, SolverOptions};
use crate::config::{cell_seed, RunConfig, SolverBlock};
use crate::error::{Error, Result};
use crate::linmodel::LossModel;
use crate::quadrature::RuleDescriptor;
use crate::simulator::{aggregate, run_trial, ExperimentConfig, TrialOutcome};
use crate::spectrum::{default_window, linear_grid, w1_distance};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const THEORY_HEADER: [&str; 10] = [
    "alpha", "lambda", "train_loss", "test_loss", "class_error", "est_error", "resid1", "resid2", "converged", "diverged",
];
pub const DENSITY_HEADER: [&str; 6] = ["x", "density", "gamma", "alpha", "lambda", "mass"];
pub const TRIALS_HEADER: [&str; 7] = ["trial", "train_loss", "test_loss", "class_error", "est_error", "grad_norm", "newton_iters"];
pub const EIGENVALUES_HEADER: [&str; 2] = ["trial", "eig"];
pub const SIMULATION_HEADER: [&str; 16] = [
    "alpha",
    "lambda",
    "d",
    "n",
    "fitted",
    "nonexistent",
    "train_loss",
    "train_loss_std",
    "test_loss",
    "test_loss_std",
    "class_error",
    "class_error_std",
    "est_error",
    "est_error_std",
    "trials_file",
    "eigenvalues_file",
];
pub const COMPARE_HEADER: [&str; 8] = ["alpha", "lambda", "d", "rel_err_train", "rel_err_test", "abs_err_class", "rel_err_est", "w1_spectrum"];

/// Provenance written as the first line of every CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Meta {
    pub fn of(cfg: &RunConfig) -> Self {
        Meta {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: VERSION.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("#meta config_hash={} seed={} version={}", self.config_hash, self.seed, self.version)
    }
}

/// Shortest round-trip form, in exponent notation outside `[1e-4, 1e6)`.
fn fmt(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e6).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Writes `#meta`, the header, then `rows`.
pub fn write_csv(path: &Path, meta: &Meta, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", meta.line())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A CSV read back by column name; the `#meta` line is skipped.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| Error::Parse {
            path: self.path.display().to_string(),
            line: 2,
            message: format!("missing column `{name}`"),
        })
    }

    /// Cell `col` of data row `row` as a float; empty cells are `None`.
    fn float(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let s = self.rows[row][col].trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| Error::Parse {
            path: self.path.display().to_string(),
            // meta line, header, then data
            line: row + 3,
            message: format!("`{s}` in column `{}` is not a number", self.header[col]),
        })
    }
}

fn solver_options(block: &SolverBlock) -> SolverOptions {
    let mut opts = SolverOptions::default();
    if let Some(n) = block.max_iterations {
        opts.max_iterations = n;
    }
    opts.tolerance = block.tolerance;
    opts
}

fn cells(alpha: &[f64], lambda: &[f64]) -> Vec<(f64, f64)> {
    alpha.iter().flat_map(|&a| lambda.iter().map(move |&l| (a, l))).collect()
}

fn block<'a, T>(b: &'a Option<T>, name: &str) -> Result<&'a T> {
    b.as_ref().ok_or_else(|| Error::Config {
        field: name.into(),
        message: "section is required for this command".into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRow {
    pub alpha: f64,
    pub lambda: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub class_error: Option<f64>,
    pub est_error: f64,
    pub resid1: f64,
    pub resid2: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl TheoryRow {
    fn record(&self) -> Vec<String> {
        vec![
            fmt(self.alpha),
            fmt(self.lambda),
            fmt(self.train_loss),
            fmt(self.test_loss),
            fmt_opt(self.class_error),
            fmt(self.est_error),
            fmt(self.resid1),
            fmt(self.resid2),
            self.converged.to_string(),
            self.diverged.to_string(),
        ]
    }
}

/// Outcome of a command: files written and cells that failed numerically.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub failed_cells: usize,
    /// Gate violations of `compare`, one message each.
    pub violations: Vec<String>,
    /// Join keys present in only one input of `compare`.
    pub missing: Vec<String>,
}

#[derive(Debug, Serialize)]
struct TheorySidecar<'a> {
    rule: RuleDescriptor,
    seed: u64,
    k: usize,
    k0: usize,
    r00: &'a [Vec<f64>],
    loss: &'a crate::linmodel::LossSpec,
    config_hash: String,
    version: &'static str,
    divergence_rule: &'static str,
}

/// One row per `(α, λ)` cell, `α`-major. Divergent cells are reported with
/// `diverged = true` and NaN observables; solver failures count as failed
/// cells and are written the same way with both flags false.
pub fn cmd_theory(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let tb = block(&cfg.theory, "theory")?;
    let loss = cfg.loss.build(cfg.k, cfg.k0)?;
    let r00 = cfg.r00_matrix();
    let rule = tb.quadrature.build(cfg.k + cfg.k0, cfg.seed, 24, 1 << 16)?;
    let opts = solver_options(&tb.solver);
    let grid = cells(&tb.alpha.values(), &tb.lambda.values());
    info!("theory: {} cells, {} quadrature nodes", grid.len(), rule.len());
    let rows: Vec<(TheoryRow, bool)> = grid
        .par_iter()
        .map(|&(alpha, lambda)| {
            let nan_row = |converged: bool, diverged: bool, r1: f64, r2: f64| TheoryRow {
                alpha,
                lambda,
                train_loss: f64::NAN,
                test_loss: f64::NAN,
                class_error: loss.predict_class(&vec![0.0; cfg.k]).map(|_| f64::NAN),
                est_error: f64::NAN,
                resid1: r1,
                resid2: r2,
                converged,
                diverged,
            };
            let sol = match solve_critical_point(loss.as_ref(), alpha, lambda, &r00, &rule, &opts) {
                Ok(s) => s,
                Err(e) => {
                    warn!("theory cell alpha={alpha} lambda={lambda}: {e}");
                    return (nan_row(false, false, f64::NAN, f64::NAN), true);
                }
            };
            if sol.diverged {
                info!("theory cell alpha={alpha} lambda={lambda}: diverged after {} iterations", sol.iterations);
                return (nan_row(false, true, sol.residual1, sol.residual2), false);
            }
            match predicted_observables(loss.as_ref(), &sol, &rule) {
                Ok(obs) => (
                    TheoryRow {
                        alpha,
                        lambda,
                        train_loss: obs.train_loss,
                        test_loss: obs.test_loss,
                        class_error: obs.classification_error,
                        est_error: obs.estimation_error,
                        resid1: sol.residual1,
                        resid2: sol.residual2,
                        converged: sol.converged,
                        diverged: false,
                    },
                    false,
                ),
                Err(e) => {
                    warn!("theory cell alpha={alpha} lambda={lambda}: {e}");
                    (nan_row(false, false, sol.residual1, sol.residual2), true)
                }
            }
        })
        .collect();
    std::fs::create_dir_all(out)?;
    let meta = Meta::of(cfg);
    let csv_path = out.join("theory.csv");
    write_csv(&csv_path, &meta, &THEORY_HEADER, &rows.iter().map(|(r, _)| r.record()).collect::<Vec<_>>())?;
    let sidecar = TheorySidecar {
        rule: rule.descriptor(),
        seed: cfg.seed,
        k: cfg.k,
        k0: cfg.k0,
        r00: &cfg.r00,
        loss: &cfg.loss,
        config_hash: meta.config_hash.clone(),
        version: VERSION,
        divergence_rule: "heuristic: Tr R11 > 1e6 Tr R00 with 50 consecutive increases",
    };
    let json_path = out.join("theory.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n")?;
    Ok(Report {
        files: vec![csv_path, json_path],
        failed_cells: rows.iter().filter(|(_, failed)| *failed).count(),
        ..Report::default()
    })
}

/// Predicted Hessian spectral density per `(α, λ)` cell, stacked in one CSV.
pub fn cmd_spectrum(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let sb = block(&cfg.spectrum, "spectrum")?;
    let loss = cfg.loss.build(cfg.k, cfg.k0)?;
    let r00 = cfg.r00_matrix();
    let rule = sb.quadrature.build(cfg.k + cfg.k0, cfg.seed, 24, 1 << 16)?;
    let coarse = sb.curvature.build(cfg.k + cfg.k0, cfg.seed, 10, 1 << 12)?;
    let opts = solver_options(&sb.solver);
    let grid = cells(&sb.alpha.values(), &sb.lambda.values());
    let results: Vec<Option<Vec<Vec<String>>>> = grid
        .par_iter()
        .map(|&(alpha, lambda)| match spectrum_cell(loss.as_ref(), alpha, lambda, &r00, sb, &rule, &coarse, &opts) {
            Ok(rows) => Some(rows),
            Err(e) => {
                warn!("spectrum cell alpha={alpha} lambda={lambda}: {e}");
                None
            }
        })
        .collect();
    std::fs::create_dir_all(out)?;
    let path = out.join("density.csv");
    let rows: Vec<Vec<String>> = results.iter().flatten().flatten().cloned().collect();
    write_csv(&path, &Meta::of(cfg), &DENSITY_HEADER, &rows)?;
    Ok(Report {
        files: vec![path],
        failed_cells: results.iter().filter(|r| r.is_none()).count(),
        ..Report::default()
    })
}

#[allow(clippy::too_many_arguments)]
fn spectrum_cell(
    loss: &dyn LossModel,
    alpha: f64,
    lambda: f64,
    r00: &nalgebra::DMatrix<f64>,
    sb: &crate::config::SpectrumBlock,
    rule: &crate::quadrature::QuadratureRule,
    coarse: &crate::quadrature::QuadratureRule,
    opts: &SolverOptions,
) -> Result<Vec<Vec<String>>> {
    let sol = solve_critical_point(loss, alpha, lambda, r00, rule, opts)?;
    if sol.diverged {
        return Err(Error::Numerical("critical point diverged; no spectrum".into()));
    }
    let [lo, hi] = match sb.window {
        Some(w) => w,
        None => {
            let (_, cm) = crate::asymptotics::law_nu_opt(loss, &sol.r, &sol.s, coarse)?;
            let (lo, hi) = default_window(&cm, alpha, lambda);
            [lo, hi]
        }
    };
    let x = linear_grid(lo, hi, sb.points);
    let dens = predicted_spectrum(loss, &sol, &x, sb.gamma, coarse)?;
    Ok(dens
        .grid
        .iter()
        .zip(&dens.density)
        .map(|(x, y)| vec![fmt(*x), fmt(*y), fmt(dens.gamma), fmt(alpha), fmt(lambda), fmt(dens.mass)])
        .collect())
}

/// Finite-n experiments over the `(d, α, λ)` grid. Each cell writes its
/// trial CSV (and eigenvalue CSV when requested); `simulation.csv` indexes
/// them with per-cell means and sample standard deviations.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let sb = block(&cfg.simulate, "simulate")?;
    let meta = Meta::of(cfg);
    std::fs::create_dir_all(out)?;
    let mut report = Report::default();
    let mut summary = Vec::new();
    let alphas = sb.alpha.values();
    let lambdas = sb.lambda.values();
    let mut index = 0;
    for &d in &sb.d {
        for &(alpha, lambda) in &cells(&alphas, &lambdas) {
            let n = ((alpha * d as f64).round() as usize).max(1);
            let ecfg = ExperimentConfig {
                n,
                d,
                k: cfg.k,
                k0: cfg.k0,
                lambda,
                r00: cfg.r00_matrix(),
                loss: cfg.loss.clone(),
                trials: sb.trials,
                seed: cell_seed(cfg.seed, index),
                newton: sb.newton.clone(),
                test_size: sb.test_size,
                spectrum: sb.spectrum,
                existence_risk: sb.existence_risk,
            };
            index += 1;
            ecfg.validate()?;
            info!("simulate: d={d} n={n} lambda={lambda}, {} trials", sb.trials);
            let outcomes: Vec<Result<TrialOutcome>> = (0..sb.trials).into_par_iter().map(|t| run_trial(&ecfg, t)).collect();
            let stem = format!("d{d}_a{alpha}_l{lambda}");
            let mut trial_rows = Vec::new();
            let mut eig_rows = Vec::new();
            let mut metrics = Vec::new();
            let mut nonexistent = 0;
            for (t, o) in outcomes.into_iter().enumerate() {
                match o {
                    Ok(TrialOutcome::Fitted(m)) => {
                        trial_rows.push(vec![
                            m.trial.to_string(),
                            fmt(m.train_loss),
                            fmt(m.test_loss),
                            fmt_opt(m.class_error),
                            fmt(m.est_error),
                            fmt(m.grad_norm),
                            m.newton_iterations.to_string(),
                        ]);
                        eig_rows.extend(m.eigenvalues.iter().map(|e| vec![m.trial.to_string(), fmt(*e)]));
                        metrics.push(m);
                    }
                    Ok(TrialOutcome::Nonexistent(r)) => {
                        nonexistent += 1;
                        info!("{stem} trial {t}: minimizer does not exist (norm {:.3e} after {} iterations)", r.norm_trace.last().copied().unwrap_or(0.0), r.iterations);
                    }
                    Err(e) => {
                        report.failed_cells += 1;
                        warn!("{stem} trial {t}: {e}");
                    }
                }
            }
            let trials_file = format!("trials_{stem}.csv");
            write_csv(&out.join(&trials_file), &meta, &TRIALS_HEADER, &trial_rows)?;
            report.files.push(out.join(&trials_file));
            let eig_file = if sb.spectrum {
                let f = format!("eigenvalues_{stem}.csv");
                write_csv(&out.join(&f), &meta, &EIGENVALUES_HEADER, &eig_rows)?;
                report.files.push(out.join(&f));
                f
            } else {
                String::new()
            };
            let nan = f64::NAN;
            let (tr, te, ce, ee) = match aggregate(&metrics, 0.01) {
                Ok(s) => (
                    (s.train_loss.mean, s.train_loss.std),
                    (s.test_loss.mean, s.test_loss.std),
                    s.class_error.map(|c| (c.mean, c.std)),
                    (s.est_error.mean, s.est_error.std),
                ),
                Err(_) => ((nan, nan), (nan, nan), None, (nan, nan)),
            };
            summary.push(vec![
                fmt(alpha),
                fmt(lambda),
                d.to_string(),
                n.to_string(),
                metrics.len().to_string(),
                nonexistent.to_string(),
                fmt(tr.0),
                fmt(tr.1),
                fmt(te.0),
                fmt(te.1),
                fmt_opt(ce.map(|c| c.0)),
                fmt_opt(ce.map(|c| c.1)),
                fmt(ee.0),
                fmt(ee.1),
                trials_file,
                eig_file,
            ]);
        }
    }
    let path = out.join("simulation.csv");
    write_csv(&path, &meta, &SIMULATION_HEADER, &summary)?;
    report.files.push(path);
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
struct Observed {
    train: Option<f64>,
    test: Option<f64>,
    class: Option<f64>,
    est: Option<f64>,
}

fn read_observed(t: &Table, row: usize) -> Result<Observed> {
    let get = |name: &str| -> Result<Option<f64>> {
        match t.column(name) {
            Some(c) => t.float(row, c),
            None => Ok(None),
        }
    };
    Ok(Observed {
        train: get("train_loss")?,
        test: get("test_loss")?,
        class: get("class_error")?,
        est: get("est_error")?,
    })
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) || a == b
}

fn key(alpha: f64, lambda: f64) -> String {
    format!("(alpha={alpha}, lambda={lambda})")
}

/// Joins simulation rows to theory rows on `(α, λ)` and reports relative
/// errors. Keys found in only one input are listed in [`Report::missing`].
pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let cb = block(&cfg.compare, "compare")?;
    let theory = Table::read(&cb.theory)?;
    let sim = Table::read(&cb.simulation)?;
    let (ta, tl) = (theory.require("alpha")?, theory.require("lambda")?);
    let (sa, sl) = (sim.require("alpha")?, sim.require("lambda")?);
    let sd = sim.column("d");
    let se = sim.column("eigenvalues_file");

    let mut theory_keys = Vec::with_capacity(theory.rows.len());
    for i in 0..theory.rows.len() {
        let a = theory.float(i, ta)?.unwrap_or(f64::NAN);
        let l = theory.float(i, tl)?.unwrap_or(f64::NAN);
        theory_keys.push((a, l));
    }
    let density = match &cb.density {
        Some(p) => Some(read_density(p)?),
        None => None,
    };

    let mut report = Report::default();
    let mut matched = vec![false; theory.rows.len()];
    let mut rows = Vec::new();
    for i in 0..sim.rows.len() {
        let a = sim.float(i, sa)?.unwrap_or(f64::NAN);
        let l = sim.float(i, sl)?.unwrap_or(f64::NAN);
        let Some(j) = theory_keys.iter().position(|&(ta, tl)| same(ta, a) && same(tl, l)) else {
            warn!("{} in {} has no theory row", key(a, l), sim.path.display());
            report.missing.push(key(a, l));
            continue;
        };
        matched[j] = true;
        let th = read_observed(&theory, j)?;
        let ob = read_observed(&sim, i)?;
        let rel = |o: Option<f64>, t: Option<f64>| match (o, t) {
            (Some(o), Some(t)) => Some(((o - t) / t).abs()),
            _ => None,
        };
        let rel_train = rel(ob.train, th.train);
        let rel_test = rel(ob.test, th.test);
        let abs_class = match (ob.class, th.class) {
            (Some(o), Some(t)) => Some((o - t).abs()),
            _ => None,
        };
        let rel_est = rel(ob.est, th.est);
        let w1 = match (&density, se) {
            (Some(dens), Some(c)) if !sim.rows[i][c].is_empty() => {
                match dens.iter().find(|(da, dl, _, _)| same(*da, a) && same(*dl, l)) {
                    Some((_, _, grid, values)) => {
                        let base = cb.simulation.parent().unwrap_or(Path::new("."));
                        let eig = read_eigenvalues(&base.join(&sim.rows[i][c]))?;
                        Some(w1_distance(&eig, grid, values)?)
                    }
                    None => {
                        warn!("{} has eigenvalues but no density cell", key(a, l));
                        None
                    }
                }
            }
            _ => None,
        };
        let g = &cb.gates;
        let mut gate = |name: &str, value: Option<f64>, tol: Option<f64>| {
            if let Some(tol) = tol {
                match value {
                    Some(v) if v <= tol => {}
                    Some(v) => report.violations.push(format!("{} {name} = {v:.4e} exceeds {tol:.4e}", key(a, l))),
                    None => report.violations.push(format!("{} {name} unavailable", key(a, l))),
                }
            }
        };
        gate("rel_err_train", rel_train, g.train);
        gate("rel_err_test", rel_test, g.test);
        gate("abs_err_class", abs_class, g.class);
        gate("rel_err_est", rel_est, g.est);
        gate("w1_spectrum", w1, g.w1);
        let d = sd.map(|c| sim.rows[i][c].clone()).unwrap_or_default();
        rows.push(vec![fmt(a), fmt(l), d, fmt_opt(rel_train), fmt_opt(rel_test), fmt_opt(abs_class), fmt_opt(rel_est), fmt_opt(w1)]);
    }
    for (j, m) in matched.iter().enumerate() {
        if !m {
            let (a, l) = theory_keys[j];
            warn!("{} in {} has no simulation row", key(a, l), theory.path.display());
            report.missing.push(key(a, l));
        }
    }
    if cb.gates.enabled() {
        let missing: Vec<String> = report.missing.iter().map(|m| format!("{m} missing from one input")).collect();
        report.violations.extend(missing);
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("compare.csv");
    write_csv(&path, &Meta::of(cfg), &COMPARE_HEADER, &rows)?;
    report.files.push(path);
    Ok(report)
}

type DensityCell = (f64, f64, Vec<f64>, Vec<f64>);

/// Density CSV grouped by `(α, λ)` in file order.
pub fn read_density(path: &Path) -> Result<Vec<DensityCell>> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = ["x", "density", "alpha", "lambda"].iter().map(|c| t.require(c)).collect::<Result<_>>()?;
    let mut out: Vec<DensityCell> = Vec::new();
    let mut at: HashMap<(u64, u64), usize> = HashMap::new();
    for i in 0..t.rows.len() {
        let v: Vec<f64> = cols.iter().map(|&c| t.float(i, c).map(|v| v.unwrap_or(f64::NAN))).collect::<Result<_>>()?;
        let slot = *at.entry((v[2].to_bits(), v[3].to_bits())).or_insert_with(|| {
            out.push((v[2], v[3], Vec::new(), Vec::new()));
            out.len() - 1
        });
        out[slot].2.push(v[0]);
        out[slot].3.push(v[1]);
    }
    Ok(out)
}

pub fn read_eigenvalues(path: &Path) -> Result<Vec<f64>> {
    let t = Table::read(path)?;
    let c = t.require("eig")?;
    (0..t.rows.len()).map(|i| t.float(i, c).map(|v| v.unwrap_or(f64::NAN))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theory_cfg(extra: &str) -> RunConfig {
        let text = format!("k = 2\nk0 = 2\nr00 = [[1.0, 0.5], [0.5, 1.0]]\n{extra}");
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn number_format_roundtrips() {
        for v in [0.0, 1.5, -2.25e-13, 3.0e9, 1e-4, 0.1 + 0.2, f64::MIN_POSITIVE] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt(9.924e-13), "9.924e-13");
        assert_eq!(fmt(f64::NAN), "NaN");
    }

    #[test]
    fn meta_line_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = theory_cfg("");
        let path = dir.path().join("t.csv");
        write_csv(&path, &Meta::of(&cfg), &["a", "b"], &[vec!["1".into(), "".into()], vec!["2.5".into(), "x".into()]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("#meta config_hash={} seed=0 version={VERSION}\na,b\n", cfg.hash())));
        let t = Table::read(&path).unwrap();
        assert_eq!(t.header, vec!["a", "b"]);
        assert_eq!(t.float(1, 0).unwrap(), Some(2.5));
        assert_eq!(t.float(0, 1).unwrap(), None);
        match t.float(1, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn compare_against_itself_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let th = dir.path().join("theory.csv");
        let cfg = theory_cfg("");
        let rows = vec![
            TheoryRow {
                alpha: 3.0,
                lambda: 0.1,
                train_loss: 0.5,
                test_loss: 0.7,
                class_error: Some(0.3),
                est_error: 1.2,
                resid1: 1e-9,
                resid2: 1e-9,
                converged: true,
                diverged: false,
            }
            .record(),
        ];
        write_csv(&th, &Meta::of(&cfg), &THEORY_HEADER, &rows).unwrap();
        let cfg = theory_cfg(&format!(
            "[compare]\ntheory = {:?}\nsimulation = {:?}\n[compare.gates]\ntrain = 0.0\ntest = 0.0\nclass = 0.0\nest = 0.0\n",
            th, th
        ));
        let rep = cmd_compare(&cfg, dir.path()).unwrap();
        assert!(rep.violations.is_empty() && rep.missing.is_empty());
        let t = Table::read(&dir.path().join("compare.csv")).unwrap();
        assert_eq!(t.rows.len(), 1);
        for c in 3..7 {
            assert_eq!(t.float(0, c).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn compare_reports_partial_join() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = theory_cfg("");
        let meta = Meta::of(&cfg);
        let row = |a: f64| vec![fmt(a), "0.1".into(), "1".into(), "1".into(), "".into(), "1".into(), "0".into(), "0".into(), "true".into(), "false".into()];
        let th = dir.path().join("th.csv");
        let sim = dir.path().join("sim.csv");
        write_csv(&th, &meta, &THEORY_HEADER, &[row(3.0), row(5.0)]).unwrap();
        write_csv(&sim, &meta, &THEORY_HEADER, &[row(3.0), row(7.0)]).unwrap();
        let cfg = theory_cfg(&format!("[compare]\ntheory = {th:?}\nsimulation = {sim:?}\n"));
        let rep = cmd_compare(&cfg, dir.path()).unwrap();
        assert_eq!(rep.missing.len(), 2);
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn compare_gate_flags_violation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = theory_cfg("");
        let meta = Meta::of(&cfg);
        let row = |train: &str| vec!["3".into(), "0.1".into(), train.into(), "1".into(), "".into(), "1".into(), "0".into(), "0".into(), "true".into(), "false".into()];
        let th = dir.path().join("th.csv");
        let sim = dir.path().join("sim.csv");
        write_csv(&th, &meta, &THEORY_HEADER, &[row("1.0")]).unwrap();
        write_csv(&sim, &meta, &THEORY_HEADER, &[row("1.05")]).unwrap();
        let cfg = theory_cfg(&format!("[compare]\ntheory = {th:?}\nsimulation = {sim:?}\n[compare.gates]\ntrain = 0.03\n"));
        let rep = cmd_compare(&cfg, dir.path()).unwrap();
        assert_eq!(rep.violations.len(), 1);
    }

    #[test]
    fn missing_section_is_config_error() {
        let cfg = theory_cfg("");
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_theory(&cfg, dir.path()), Err(Error::Config { field, .. }) if field == "theory"));
    }
}
