//! Finite-n experiments: Gaussian designs, Newton-based regularized ERM,
//! empirical observables, Hessian spectra, and random-feature ingestion.
//!
//! Parameters are flattened coordinate-major: entry `(a, c)` of the d×k
//! matrix Θ sits at index `a·k + c`, so the Hessian is
//! `(1/n) Σ_i (x_i x_iᵀ) ⊗ ∇²ℓ_i + λ I`.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_inv_sqrt, symmetrize};
use crate::linmodel::{build_theta0, LossModel, LossSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonOptions {
    /// Stop when `‖∇R̂‖_F ≤ tol`.
    pub tol: f64,
    pub max_iterations: usize,
    /// `‖Θ‖_F` beyond which a still-decreasing objective means no minimizer.
    pub nonexistence_norm: f64,
    /// Hessian condition estimate above which a gradient step is taken.
    pub max_condition: f64,
    /// Relative Newton step length required, with the gradient test, for
    /// convergence.
    pub step_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-9,
            max_iterations: 200,
            nonexistence_norm: 1e3,
            max_condition: 1e12,
            step_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub k0: usize,
    pub lambda: f64,
    pub r00: DMatrix<f64>,
    pub loss: LossSpec,
    pub trials: usize,
    pub seed: u64,
    pub newton: NewtonOptions,
    /// Test-set size; defaults to `max(10⁴, 10 n)`.
    pub test_size: Option<usize>,
    /// Whether to compute Hessian eigenvalues at the minimizer.
    pub spectrum: bool,
    /// Acknowledges that with `λ = 0` the minimizer may not exist.
    pub existence_risk: bool,
}

impl ExperimentConfig {
    pub fn new(n: usize, d: usize, lambda: f64, r00: DMatrix<f64>, trials: usize, seed: u64) -> Self {
        let k0 = r00.nrows();
        ExperimentConfig {
            n,
            d,
            k: k0,
            k0,
            lambda,
            r00,
            loss: LossSpec::Multinomial,
            trials,
            seed,
            newton: NewtonOptions::default(),
            test_size: None,
            spectrum: false,
            existence_risk: lambda == 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    pub fn test_size(&self) -> usize {
        self.test_size.unwrap_or(10_000.max(10 * self.n))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if self.n == 0 || self.d == 0 {
            return bad("n", format!("need n >= 1 and d >= 1, got n={}, d={}", self.n, self.d));
        }
        if self.trials == 0 {
            return bad("trials", "need at least one trial".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", format!("must be finite and nonnegative, got {}", self.lambda));
        }
        if self.lambda == 0.0 && !self.existence_risk {
            return bad("lambda", "lambda = 0 requires existence_risk = true".into());
        }
        if self.r00.shape() != (self.k0, self.k0) {
            return bad("r00", format!("shape {:?} does not match k0 = {}", self.r00.shape(), self.k0));
        }
        if self.d < self.k0 {
            return bad("d", format!("need d >= k0 = {}", self.k0));
        }
        if min_eigenvalue(&symmetrize(&self.r00)) <= 0.0 {
            return bad("r00", "must be positive definite".into());
        }
        self.loss
            .build(self.k, self.k0)
            .map(|_| ())
            .map_err(|e| Error::Config { field: "loss".into(), message: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub class_error: Option<f64>,
    /// `‖Θ̂ − Θ0‖²_F` (over the shared leading columns when k ≠ k0).
    pub est_error: f64,
    pub grad_norm: f64,
    /// Sorted eigenvalues of `∇²R̂(Θ̂)`, when requested.
    pub eigenvalues: Vec<f64>,
    pub newton_iterations: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonexistenceReport {
    pub trial: usize,
    pub iterations: usize,
    pub norm_trace: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TrialOutcome {
    Fitted(TrialMetrics),
    Nonexistent(NonexistenceReport),
}

impl TrialOutcome {
    pub fn metrics(&self) -> Option<&TrialMetrics> {
        match self {
            TrialOutcome::Fitted(m) => Some(m),
            TrialOutcome::Nonexistent(_) => None,
        }
    }
}

/// Independent random streams of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Truth = 0,
    Design = 1,
    Responses = 2,
    Test = 3,
}

/// Counter-based stream for `(seed, trial, lane)`.
pub fn trial_rng(seed: u64, trial: usize, lane: Lane) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((trial as u64) << 2) | lane as u64);
    rng
}

/// A sampled data set: rows of `x` with flattened responses.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    /// n × q row-major responses.
    pub y: Vec<f64>,
    pub q: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn response(&self, i: usize) -> &[f64] {
        &self.y[i * self.q..(i + 1) * self.q]
    }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(n, d, &data)
}

/// Draws `n` labelled samples with `x ~ N(0, I_d)` and `y ~ p(· | Θ0ᵀx)`.
pub fn sample_dataset(
    loss: &dyn LossModel,
    theta0: &DMatrix<f64>,
    n: usize,
    design: &mut ChaCha8Rng,
    responses: &mut ChaCha8Rng,
) -> Dataset {
    let d = theta0.nrows();
    let x = gaussian_rows(design, n, d);
    let v0 = &x * theta0;
    let q = loss.response_dim();
    let mut y = Vec::with_capacity(n * q);
    let mut w = vec![0.0; loss.latent_dim()];
    for i in 0..n {
        w.iter_mut().for_each(|u| *u = responses.random::<f64>());
        let row: Vec<f64> = v0.row(i).iter().copied().collect();
        y.extend(loss.sample_response(&row, &w));
    }
    Dataset { x, y, q }
}

struct Evaluation {
    value: f64,
    grad: DVector<f64>,
    /// n × k gradients and n × k² Hessians of the per-sample losses.
    hess: Vec<f64>,
}

fn evaluate(loss: &dyn LossModel, data: &Dataset, theta: &DMatrix<f64>, lambda: f64, second: bool) -> Evaluation {
    let (n, d, k) = (data.n(), theta.nrows(), theta.ncols());
    let v = &data.x * theta;
    let mut u = DMatrix::<f64>::zeros(n, k);
    let mut hess = if second { vec![0.0; n * k * k] } else { Vec::new() };
    let mut g = vec![0.0; k];
    let mut h = vec![0.0; k * k];
    let mut vi = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..k {
            vi[c] = v[(i, c)];
        }
        total += loss.eval(&vi, data.response(i), &mut g, &mut h);
        for c in 0..k {
            u[(i, c)] = g[c];
        }
        if second {
            hess[i * k * k..(i + 1) * k * k].copy_from_slice(&h);
        }
    }
    let nf = n as f64;
    let gm = data.x.transpose() * u / nf + theta * lambda;
    let grad = DVector::from_iterator(d * k, (0..d).flat_map(|a| (0..k).map(move |c| (a, c))).map(|ac| gm[ac]));
    Evaluation {
        value: total / nf + 0.5 * lambda * theta.norm_squared(),
        grad,
        hess,
    }
}

/// `(1/n) Σ_i (x_i x_iᵀ) ⊗ H_i + λ I` in coordinate-major order.
fn assemble_hessian(x: &DMatrix<f64>, hess: &[f64], k: usize, lambda: f64) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut out = DMatrix::<f64>::zeros(d * k, d * k);
    let mut scaled = x.clone();
    for c in 0..k {
        for e in c..k {
            for i in 0..n {
                let w = hess[i * k * k + c * k + e] / n as f64;
                for a in 0..d {
                    scaled[(i, a)] = x[(i, a)] * w;
                }
            }
            let block = x.transpose() * &scaled;
            for a in 0..d {
                for b in 0..d {
                    let v = block[(a, b)];
                    out[(a * k + c, b * k + e)] = v;
                    out[(b * k + e, a * k + c)] = v;
                }
            }
        }
    }
    for i in 0..d * k {
        out[(i, i)] += lambda;
    }
    out
}

fn unflatten(p: &DVector<f64>, d: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, k, p.as_slice())
}

/// Outcome of a regularized ERM solve.
#[derive(Debug, Clone)]
pub enum Fit {
    Converged {
        theta: DMatrix<f64>,
        grad_norm: f64,
        iterations: usize,
        loss_trace: Vec<f64>,
    },
    /// `‖Θ‖_F` crossed the threshold while the objective kept decreasing.
    Nonexistent {
        iterations: usize,
        norm_trace: Vec<f64>,
        loss_trace: Vec<f64>,
    },
}

/// Minimizes `R̂(Θ) = (1/n) Σ ℓ(Θᵀx_i, y_i) + (λ/2)‖Θ‖²_F` by damped Newton
/// with Armijo backtracking, falling back to gradient steps when the
/// Hessian is ill-conditioned.
pub fn fit_erm(loss: &dyn LossModel, data: &Dataset, lambda: f64, opts: &NewtonOptions) -> Result<Fit> {
    let (d, k) = (data.x.ncols(), loss.dim());
    let mut theta = DMatrix::<f64>::zeros(d, k);
    let mut loss_trace = Vec::new();
    let mut norm_trace = Vec::new();
    let mut ev = evaluate(loss, data, &theta, lambda, true);
    for it in 0..=opts.max_iterations {
        loss_trace.push(ev.value);
        norm_trace.push(theta.norm());
        let gnorm = ev.grad.norm();
        if !ev.value.is_finite() || !gnorm.is_finite() {
            return Err(Error::Newton { iterations: it, grad_norm: gnorm, loss_trace });
        }
        let decreasing = loss_trace.windows(2).rev().take(3).all(|w| w[1] < w[0]);
        if theta.norm() > opts.nonexistence_norm && decreasing {
            return Ok(Fit::Nonexistent {
                iterations: it,
                norm_trace,
                loss_trace,
            });
        }
        let h = assemble_hessian(&data.x, &ev.hess, k, lambda);
        let step = h.cholesky().and_then(|ch| {
            let diag = ch.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            ((hi / lo).powi(2) <= opts.max_condition).then(|| -ch.solve(&ev.grad))
        });
        // on separable data the gradient vanishes along a diverging path, so a
        // small gradient also needs a small Newton step
        let settled = match &step {
            Some(p) => p.norm() <= opts.step_tol * (1.0 + theta.norm()),
            None => lambda > 0.0,
        };
        if gnorm <= opts.tol && settled {
            return Ok(Fit::Converged {
                theta,
                grad_norm: gnorm,
                iterations: it,
                loss_trace,
            });
        }
        if it == opts.max_iterations {
            break;
        }
        let p = step.unwrap_or_else(|| -&ev.grad);
        let slope = p.dot(&ev.grad);
        let dir = unflatten(&p, d, k);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &dir * t;
            let ec = evaluate(loss, data, &cand, lambda, false);
            // rounding bound of the n-term loss sum; a full step that halves
            // the gradient is accepted within it
            let slack = data.n() as f64 * f64::EPSILON * (1.0 + ev.value.abs());
            if ec.value <= ev.value + 1e-4 * t * slope || (t == 1.0 && ec.value <= ev.value + slack && ec.grad.norm() <= 0.5 * gnorm) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let Some(mut cand) = accepted else {
            return Err(Error::Newton { iterations: it, grad_norm: gnorm, loss_trace });
        };
        if t == 1.0 {
            // expansion along recession directions, where the objective keeps
            // decreasing past the unit step
            let mut best = evaluate(loss, data, &cand, lambda, false).value;
            let mut tt = 2.0;
            while tt <= 1024.0 {
                let next = &theta + &dir * tt;
                let v = evaluate(loss, data, &next, lambda, false).value;
                let noise = data.n() as f64 * f64::EPSILON * best.abs();
                if !(v < best - noise && v <= best + 1e-4 * (tt / 2.0) * slope) {
                    break;
                }
                best = v;
                cand = next;
                tt *= 2.0;
            }
        }
        theta = cand;
        ev = evaluate(loss, data, &theta, lambda, true);
    }
    let gnorm = ev.grad.norm();
    Err(Error::Newton {
        iterations: opts.max_iterations,
        grad_norm: gnorm,
        loss_trace,
    })
}

/// Sorted eigenvalues of `∇²R̂(Θ)`.
pub fn hessian_esd(loss: &dyn LossModel, data: &Dataset, theta: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
    let ev = evaluate(loss, data, theta, lambda, true);
    let h = assemble_hessian(&data.x, &ev.hess, loss.dim(), lambda);
    let mut eig: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    if eig.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Hessian eigensolver returned non-finite values".into()));
    }
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// `Tr(Θ̂ᵀΘ̂) − 2 Σ_{i<min(k,k0)} (Θ̂ᵀΘ0)_ii + Tr(Θ0ᵀΘ0)`.
pub fn estimation_error(theta: &DMatrix<f64>, theta0: &DMatrix<f64>) -> f64 {
    let m = theta.ncols().min(theta0.ncols());
    let cross: f64 = (0..m).map(|i| theta.column(i).dot(&theta0.column(i))).sum();
    theta.norm_squared() - 2.0 * cross + theta0.norm_squared()
}

/// Test loss and classification error of `Θ̂` on fresh samples.
pub fn test_metrics(
    loss: &dyn LossModel,
    theta: &DMatrix<f64>,
    theta0: &DMatrix<f64>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Option<f64>) {
    let d = theta.nrows();
    let mut x = vec![0.0; d];
    let mut w = vec![0.0; loss.latent_dim()];
    let (mut total, mut wrong, mut classified) = (0.0, 0usize, false);
    for _ in 0..size {
        x.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        w.iter_mut().for_each(|u| *u = rng.random::<f64>());
        let xv = DVector::from_column_slice(&x);
        let v: Vec<f64> = (theta.transpose() * &xv).iter().copied().collect();
        let v0: Vec<f64> = (theta0.transpose() * &xv).iter().copied().collect();
        let y = loss.sample_response(&v0, &w);
        total += loss.value(&v, &y);
        if let (Some(a), Some(b)) = (loss.response_class(&y), loss.predict_class(&v)) {
            classified = true;
            wrong += usize::from(a != b);
        }
    }
    let m = size as f64;
    (total / m, classified.then_some(wrong as f64 / m))
}

/// One seeded trial of the synthetic experiment.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutcome> {
    let start = Instant::now();
    let loss = cfg.loss.build(cfg.k, cfg.k0)?;
    let loss = loss.as_ref();
    let theta0 = build_theta0(&cfg.r00, cfg.d, trial_rng(cfg.seed, trial, Lane::Truth).next_u64())?;
    let data = sample_dataset(
        loss,
        &theta0,
        cfg.n,
        &mut trial_rng(cfg.seed, trial, Lane::Design),
        &mut trial_rng(cfg.seed, trial, Lane::Responses),
    );
    let fit = fit_erm(loss, &data, cfg.lambda, &cfg.newton)?;
    let (theta, grad_norm, iterations) = match fit {
        Fit::Converged {
            theta,
            grad_norm,
            iterations,
            ..
        } => (theta, grad_norm, iterations),
        Fit::Nonexistent {
            iterations,
            norm_trace,
            loss_trace,
        } => {
            return Ok(TrialOutcome::Nonexistent(NonexistenceReport {
                trial,
                iterations,
                norm_trace,
                loss_trace,
            }))
        }
    };
    let train = evaluate(loss, &data, &theta, 0.0, false).value;
    let (test_loss, class_error) = test_metrics(loss, &theta, &theta0, cfg.test_size(), &mut trial_rng(cfg.seed, trial, Lane::Test));
    let eigenvalues = if cfg.spectrum {
        hessian_esd(loss, &data, &theta, cfg.lambda)?
    } else {
        Vec::new()
    };
    Ok(TrialOutcome::Fitted(TrialMetrics {
        trial,
        train_loss: train,
        test_loss,
        class_error,
        est_error: estimation_error(&theta, &theta0),
        grad_norm,
        eigenvalues,
        newton_iterations: iterations,
        wall_time: start.elapsed().as_secs_f64(),
    }))
}

/// All trials of `cfg`, run in parallel and returned in trial order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub trials: usize,
    pub train_loss: FieldStats,
    pub test_loss: FieldStats,
    pub class_error: Option<FieldStats>,
    pub est_error: FieldStats,
    pub grad_norm: FieldStats,
    pub histogram: Option<Histogram>,
}

fn stats(values: impl Iterator<Item = f64>) -> FieldStats {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    FieldStats { mean, std }
}

/// Means and sample standard deviations per field, plus a histogram of the
/// pooled eigenvalues with the given bin width.
pub fn aggregate(metrics: &[TrialMetrics], bin_width: f64) -> Result<Summary> {
    if metrics.is_empty() {
        return Err(Error::Argument("aggregate needs at least one trial".into()));
    }
    let mut sorted: Vec<&TrialMetrics> = metrics.iter().collect();
    sorted.sort_by_key(|m| m.trial);
    let class_error = sorted
        .iter()
        .map(|m| m.class_error)
        .collect::<Option<Vec<f64>>>()
        .map(|v| stats(v.into_iter()));
    let pooled: Vec<f64> = sorted.iter().flat_map(|m| m.eigenvalues.iter().copied()).collect();
    let histogram = if pooled.is_empty() {
        None
    } else {
        if !(bin_width > 0.0) {
            return Err(Error::Argument(format!("bin width must be positive, got {bin_width}")));
        }
        let lo = (pooled.iter().cloned().fold(f64::INFINITY, f64::min) / bin_width).floor() * bin_width;
        let hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bins = (((hi - lo) / bin_width).floor() as usize) + 1;
        let mut counts = vec![0usize; bins];
        for v in &pooled {
            counts[(((v - lo) / bin_width) as usize).min(bins - 1)] += 1;
        }
        Some(Histogram { lo, width: bin_width, counts })
    };
    Ok(Summary {
        trials: sorted.len(),
        train_loss: stats(sorted.iter().map(|m| m.train_loss)),
        test_loss: stats(sorted.iter().map(|m| m.test_loss)),
        class_error,
        est_error: stats(sorted.iter().map(|m| m.est_error)),
        grad_norm: stats(sorted.iter().map(|m| m.grad_norm)),
        histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

/// Headerless CSV of reals, one sample per row.
pub fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    let Some((_, first)) = rows.first() else {
        return Err(parse_error(path, 1, "no rows"));
    };
    let width = first.len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for (line, fields) in &rows {
        if fields.len() != width {
            return Err(parse_error(path, *line, format!("expected {width} fields, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| parse_error(path, *line, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(path, *line, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), width, &data))
}

/// One-column file of nonnegative integer labels.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_rows(path)?
        .into_iter()
        .map(|(line, fields)| {
            if fields.len() != 1 {
                return Err(parse_error(path, line, format!("expected one label, found {} fields", fields.len())));
            }
            fields[0].parse().map_err(|_| parse_error(path, line, format!("not a label: {:?}", fields[0])))
        })
        .collect()
}

/// Seeded d×d0 layer with entries `N(0, 1/d0)`.
pub fn random_layer(d: usize, d0: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / d0 as f64).sqrt()).expect("positive scale");
    let data: Vec<f64> = (0..d * d0).map(|_| normal.sample(&mut rng)).collect();
    DMatrix::from_row_slice(d, d0, &data)
}

/// Standardizes raw rows, applies `σ(W z)`, then whitens with the inverse
/// square root of the empirical second moment (covariance if `centering`).
pub fn feature_map(raw: &DMatrix<f64>, layer: &DMatrix<f64>, activation: Activation, centering: bool) -> Result<DMatrix<f64>> {
    let (n, d0) = raw.shape();
    if layer.ncols() != d0 {
        return Err(Error::Dimension(format!("layer expects {} inputs, rows have {d0}", layer.ncols())));
    }
    let mut z = raw.clone();
    for j in 0..d0 {
        let col = z.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        z.column_mut(j).iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    let mut xbar = (z * layer.transpose()).map(|v| activation.apply(v));
    whiten(&mut xbar, centering)?;
    Ok(xbar)
}

/// In-place `x_i ← Σ̂^{-1/2} x_i` with `Σ̂ = N⁻¹ Σ x_i x_iᵀ`.
pub fn whiten(x: &mut DMatrix<f64>, centering: bool) -> Result<()> {
    let (n, d) = x.shape();
    if centering {
        for j in 0..d {
            let mean = x.column(j).mean();
            x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
        }
    }
    let second = symmetrize(&(x.transpose() * &*x / n as f64));
    let root = sym_inv_sqrt(&second).map_err(|_| Error::Rank(format!("second moment of {n} rows in dimension {d} is singular")))?;
    *x = &*x * root;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IngestedData {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
}

pub fn ingest_features(
    path: &Path,
    labels_path: &Path,
    d: usize,
    activation: Activation,
    seed: u64,
    centering: bool,
) -> Result<IngestedData> {
    let raw = read_features(path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != raw.nrows() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            raw.nrows(),
            labels.len()
        )));
    }
    let layer = random_layer(d, raw.ncols(), seed);
    Ok(IngestedData {
        x: feature_map(&raw, &layer, activation, centering)?,
        labels,
    })
}

/// One-hot responses for classes `0..=k` (class 0 is the reference).
pub fn labels_to_responses(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; labels.len() * k];
    for (i, &c) in labels.iter().enumerate() {
        if c > k {
            return Err(Error::Argument(format!("label {c} at row {i} exceeds k = {k}")));
        }
        if c > 0 {
            y[i * k + c - 1] = 1.0;
        }
    }
    Ok(y)
}

/// Full-data minimizer taken as the truth, with `R00 = Θ0ᵀΘ0`.
pub fn estimate_truth(loss: &dyn LossModel, data: &Dataset, lambda: f64, opts: &NewtonOptions) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match fit_erm(loss, data, lambda, opts)? {
        Fit::Converged { theta, .. } => {
            let r00 = symmetrize(&(theta.transpose() * &theta));
            Ok((theta, r00))
        }
        Fit::Nonexistent { iterations, .. } => Err(Error::Numerical(format!(
            "full-data minimizer does not exist (norm threshold crossed after {iterations} iterations)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{symmetric_r00, MultinomialLoss, SquaredLoss};

    fn small_data(loss: &dyn LossModel, n: usize, d: usize, seed: u64) -> (Dataset, DMatrix<f64>) {
        let theta0 = build_theta0(&symmetric_r00(loss.truth_dim(), 1.0), d, seed).unwrap();
        let data = sample_dataset(
            loss,
            &theta0,
            n,
            &mut trial_rng(seed, 0, Lane::Design),
            &mut trial_rng(seed, 0, Lane::Responses),
        );
        (data, theta0)
    }

    #[test]
    fn ridge_matches_linear_solve() {
        let loss = SquaredLoss::new(2, 0.3);
        let (data, _) = small_data(&loss, 80, 10, 4);
        let lambda = 0.1;
        let Fit::Converged { theta, .. } = fit_erm(&loss, &data, lambda, &NewtonOptions::default()).unwrap() else {
            panic!("ridge must converge");
        };
        let n = data.n() as f64;
        let y = DMatrix::from_row_slice(data.n(), 2, &data.y);
        let a = data.x.transpose() * &data.x / n + DMatrix::identity(10, 10) * lambda;
        let direct = a.lu().solve(&(data.x.transpose() * y / n)).unwrap();
        assert!((theta - direct).amax() < 1e-8);
    }

    #[test]
    fn heavy_ridge_bound() {
        let loss = MultinomialLoss::multinomial(2);
        let (data, _) = small_data(&loss, 60, 20, 9);
        let lambda = 1e3;
        let Fit::Converged { theta, .. } = fit_erm(&loss, &data, lambda, &NewtonOptions::default()).unwrap() else {
            panic!();
        };
        assert!(theta.norm_squared() <= 2.0 * 3f64.ln() / lambda);
    }

    #[test]
    fn identity_curvature_gives_kronecker_copies() {
        let loss = SquaredLoss::new(2, 0.0);
        let (data, _) = small_data(&loss, 30, 6, 2);
        let theta = DMatrix::zeros(6, 2);
        let eig = hessian_esd(&loss, &data, &theta, 0.25).unwrap();
        let gram = data.x.transpose() * &data.x / 30.0;
        let mut base: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|v| v + 0.25).collect();
        base.sort_by(f64::total_cmp);
        for (i, b) in base.iter().enumerate() {
            assert!((eig[2 * i] - b).abs() < 1e-12 && (eig[2 * i + 1] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_shift_is_exact() {
        let loss = MultinomialLoss::multinomial(2);
        let (data, theta0) = small_data(&loss, 40, 8, 5);
        let a = hessian_esd(&loss, &data, &theta0, 0.0).unwrap();
        let b = hessian_esd(&loss, &data, &theta0, 0.3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + 0.3 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kronecker_ordering_does_not_change_spectrum() {
        // class-major ordering: index c·d + a, i.e. Σ_i H_i ⊗ (x_i x_iᵀ)
        let loss = MultinomialLoss::multinomial(2);
        let (data, theta0) = small_data(&loss, 25, 5, 8);
        let ours = hessian_esd(&loss, &data, &theta0, 0.0).unwrap();
        let (n, d, k) = (25, 5, 2);
        let v = &data.x * &theta0;
        let mut h = DMatrix::<f64>::zeros(d * k, d * k);
        let mut g = vec![0.0; k];
        let mut hi = vec![0.0; k * k];
        for i in 0..n {
            let vi = [v[(i, 0)], v[(i, 1)]];
            loss.eval(&vi, data.response(i), &mut g, &mut hi);
            for c in 0..k {
                for e in 0..k {
                    for a in 0..d {
                        for b in 0..d {
                            h[(c * d + a, e * d + b)] += hi[c * k + e] * data.x[(i, a)] * data.x[(i, b)] / n as f64;
                        }
                    }
                }
            }
        }
        let mut other: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        other.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&other) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let loss = MultinomialLoss::multinomial(2);
        let (data, theta0) = small_data(&loss, 30, 4, 3);
        let ev = evaluate(&loss, &data, &theta0, 0.2, true);
        let h = assemble_hessian(&data.x, &ev.hess, 2, 0.2);
        let eps = 1e-6;
        for idx in 0..8 {
            let (a, c) = (idx / 2, idx % 2);
            let mut p = theta0.clone();
            p[(a, c)] += eps;
            let mut m = theta0.clone();
            m[(a, c)] -= eps;
            let ep = evaluate(&loss, &data, &p, 0.2, false);
            let em = evaluate(&loss, &data, &m, 0.2, false);
            assert!(((ep.value - em.value) / (2.0 * eps) - ev.grad[idx]).abs() < 1e-7);
            for j in 0..8 {
                assert!(((ep.grad[j] - em.grad[j]) / (2.0 * eps) - h[(j, idx)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn trial_is_deterministic() {
        let mut cfg = ExperimentConfig::new(250, 50, 0.1, symmetric_r00(2, 1.0), 1, 17);
        cfg.spectrum = true;
        let a = run_trial(&cfg, 0).unwrap();
        let b = run_trial(&cfg, 0).unwrap();
        let (TrialOutcome::Fitted(a), TrialOutcome::Fitted(b)) = (a, b) else {
            panic!()
        };
        assert!(a.grad_norm <= 1e-8);
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert!(a.eigenvalues[0] >= 0.1 - 1e-8);
    }

    #[test]
    fn aggregate_basics() {
        let m = TrialMetrics {
            trial: 0,
            train_loss: 0.5,
            test_loss: 0.7,
            class_error: Some(0.2),
            est_error: 1.0,
            grad_norm: 1e-10,
            eigenvalues: vec![0.1, 0.25],
            newton_iterations: 5,
            wall_time: 0.0,
        };
        let one = aggregate(std::slice::from_ref(&m), 0.1).unwrap();
        assert_eq!(one.test_loss, FieldStats { mean: 0.7, std: 0.0 });
        let two = aggregate(&[m.clone(), TrialMetrics { trial: 1, ..m.clone() }], 0.1).unwrap();
        assert_eq!(two.train_loss.std, 0.0);
        assert_eq!(two.histogram.unwrap().counts.iter().sum::<usize>(), 4);
        assert!(aggregate(&[], 0.1).is_err());
    }

    #[test]
    fn whitening_gives_identity_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = gaussian_rows(&mut rng, 400, 6) * DMatrix::from_fn(6, 6, |i, j| if i <= j { 1.0 } else { 0.2 });
        let layer = DMatrix::identity(6, 6);
        let x = feature_map(&raw, &layer, Activation::Identity, false).unwrap();
        let m = x.transpose() * &x / 400.0;
        assert!((m - DMatrix::identity(6, 6)).amax() < 1e-10);
        let x = feature_map(&raw, &random_layer(4, 6, 3), Activation::Tanh, false).unwrap();
        assert!((x.transpose() * &x / 400.0 - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn ingestion_reports_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.csv");
        let l = dir.path().join("y.csv");
        std::fs::write(&f, "1,2\n3,oops\n").unwrap();
        std::fs::write(&l, "0\n1\n").unwrap();
        match ingest_features(&f, &l, 2, Activation::Tanh, 0, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&f, "1,2\n3,4\n5,6\n").unwrap();
        assert!(matches!(ingest_features(&f, &l, 2, Activation::Tanh, 0, false), Err(Error::Dimension(_))));
    }
}
