//! Critical-point system for `(R, S)` and the asymptotic observables.
//!
//! Gaussian nodes `(z1, z0) ~ N(0, I_{k+k0})` are colored as
//! `g = K z1 + M z0`, `g0 = R00^{1/2} z0`, so that `(g, g0) ~ N(0, R)` with
//! `R/R00 = K²` and `R10 = M R00^{1/2}`. The truth scores `g0` do not depend
//! on the iterate, which lets the label law of every node be computed once.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, max_abs, min_eigenvalue, sym_inv_sqrt, sym_inverse, sym_sqrt, symmetrize};
use crate::linmodel::{EffectiveNoise, LossModel, NoiseFactor, OverlapMatrix};
use crate::prox::{prox_in_place, ProxWorkspace};
use crate::quadrature::{QuadratureRule, RuleDescriptor, CHUNK};
use crate::spectrum::{spectral_density, CurvatureMeasure, SpectralDensity};

/// Expectations under `ν^opt` at a given `(K, M, S)`, with `u = ∇ℓ(v, y)`,
/// `H = ∇²ℓ(v, y)` and `v = Prox(g; S)`.
#[derive(Debug, Clone)]
pub struct Moments {
    /// `E[u uᵀ]`.
    pub c: DMatrix<f64>,
    /// `E[H (I + S H)⁻¹]`, symmetrized.
    pub a_bar: DMatrix<f64>,
    pub e_uz1: DMatrix<f64>,
    pub e_uz0: DMatrix<f64>,
    /// `E[u vᵀ]`.
    pub e_uv: DMatrix<f64>,
    /// `E[u g0ᵀ]`.
    pub e_ug0: DMatrix<f64>,
    /// `E[ℓ(v, y)]`.
    pub train_loss: f64,
    /// `E[Mor(g; S)]`.
    pub envelope: f64,
    /// `E[ℓ(g, y)]`.
    pub test_loss: f64,
    /// `P(predicted class of g ≠ class of y)`, for classification losses.
    pub class_error: Option<f64>,
    /// Row-major `T[i,a,b,j] = E[B_ia u_b u_j]` with `B = H(I+SH)⁻¹`, when requested.
    pub t_buu: Option<Vec<f64>>,
    pub max_prox_residual: f64,
}

#[derive(Debug, Clone)]
struct Acc {
    c: Vec<f64>,
    a: Vec<f64>,
    uz1: Vec<f64>,
    uz0: Vec<f64>,
    uv: Vec<f64>,
    ug0: Vec<f64>,
    t: Vec<f64>,
    train: f64,
    env: f64,
    test: f64,
    err: f64,
    res: f64,
}

impl Acc {
    fn new(k: usize, k0: usize, t: bool) -> Self {
        Acc {
            c: vec![0.0; k * k],
            a: vec![0.0; k * k],
            uz1: vec![0.0; k * k],
            uz0: vec![0.0; k * k0],
            uv: vec![0.0; k * k],
            ug0: vec![0.0; k * k0],
            t: if t { vec![0.0; k * k * k * k] } else { Vec::new() },
            train: 0.0,
            env: 0.0,
            test: 0.0,
            err: 0.0,
            res: 0.0,
        }
    }

    fn add(&mut self, o: Acc) {
        let pairs = [
            (&mut self.c, o.c),
            (&mut self.a, o.a),
            (&mut self.uz1, o.uz1),
            (&mut self.uz0, o.uz0),
            (&mut self.uv, o.uv),
            (&mut self.ug0, o.ug0),
            (&mut self.t, o.t),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.train += o.train;
        self.env += o.env;
        self.test += o.test;
        self.err += o.err;
        self.res = self.res.max(o.res);
    }
}

/// Discretized law `ν^opt` over a fixed quadrature rule, with per-node label
/// laws cached and prox warm starts carried between evaluations.
pub struct NuOpt<'a> {
    loss: &'a dyn LossModel,
    rule: &'a QuadratureRule,
    k: usize,
    k0: usize,
    q: usize,
    per_node: usize,
    r00: DMatrix<f64>,
    g0: Vec<f64>,
    responses: Vec<f64>,
    probs: Vec<f64>,
    classes: Vec<Option<usize>>,
    warm: Vec<f64>,
    warm_valid: bool,
}

impl<'a> NuOpt<'a> {
    pub fn new(loss: &'a dyn LossModel, rule: &'a QuadratureRule, r00: &DMatrix<f64>) -> Result<Self> {
        let (k, k0) = (loss.dim(), loss.truth_dim());
        if r00.shape() != (k0, k0) {
            return Err(Error::Dimension(format!(
                "R00 is {:?} but the loss has k0 = {k0}",
                r00.shape()
            )));
        }
        if rule.dim != k + k0 {
            return Err(Error::Dimension(format!(
                "quadrature dimension {} differs from k + k0 = {}",
                rule.dim,
                k + k0
            )));
        }
        let r00h = sym_sqrt(r00);
        let n = rule.len();
        let q = loss.response_dim();
        let mut g0 = vec![0.0; n * k0];
        let mut responses = Vec::new();
        let mut probs = Vec::new();
        let mut classes = Vec::new();
        let mut per_node = None;
        for i in 0..n {
            let z0 = &rule.point(i)[k..];
            let row = &mut g0[i * k0..(i + 1) * k0];
            for a in 0..k0 {
                row[a] = (0..k0).map(|b| r00h[(a, b)] * z0[b]).sum();
            }
            let law = loss.response_law(row);
            match per_node {
                None => per_node = Some(law.len()),
                Some(c) if c != law.len() => {
                    return Err(Error::Argument("response law size varies across nodes".into()))
                }
                _ => {}
            }
            for (y, p) in law {
                classes.push(loss.response_class(&y));
                responses.extend(y);
                probs.push(p * rule.weight(i));
            }
        }
        let per_node = per_node.unwrap_or(1);
        Ok(NuOpt {
            loss,
            rule,
            k,
            k0,
            q,
            per_node,
            r00: r00.clone(),
            g0,
            responses,
            probs,
            classes,
            warm: vec![0.0; n * per_node * k],
            warm_valid: false,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.k, self.k0)
    }

    pub fn r00(&self) -> &DMatrix<f64> {
        &self.r00
    }

    fn center(&self, kmat: &DMatrix<f64>, m: &DMatrix<f64>, i: usize, g: &mut [f64]) {
        let z = self.rule.point(i);
        let (z1, z0) = z.split_at(self.k);
        for a in 0..self.k {
            let mut v = 0.0;
            for b in 0..self.k {
                v += kmat[(a, b)] * z1[b];
            }
            for b in 0..self.k0 {
                v += m[(a, b)] * z0[b];
            }
            g[a] = v;
        }
    }

    /// Solves every prox and accumulates [`Moments`]. `third` additionally
    /// accumulates `E[B_ia u_b u_j]` for the inner saddle Newton.
    pub fn moments(&mut self, kmat: &DMatrix<f64>, m: &DMatrix<f64>, s: &EffectiveNoise, third: bool) -> Result<Moments> {
        let (k, k0, q, per) = (self.k, self.k0, self.q, self.per_node);
        let nf = s.factor();
        let n = self.rule.len();
        let warm_valid = self.warm_valid;
        let mut warm = std::mem::take(&mut self.warm);
        let this = &*self;
        let partials: Vec<Result<Acc>> = warm
            .par_chunks_mut(CHUNK * per * k)
            .enumerate()
            .map(|(c, wbuf)| {
                let mut acc = Acc::new(k, k0, third);
                let mut ws = ProxWorkspace::new(k);
                let mut g = vec![0.0; k];
                let mut jac = vec![0.0; k * k];
                let mut b = vec![0.0; k * k];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    this.center(kmat, m, i, &mut g);
                    for j in 0..per {
                        let idx = i * per + j;
                        let x = &mut wbuf[((i - c * CHUNK) * per + j) * k..][..k];
                        if !warm_valid {
                            x.copy_from_slice(&g);
                        }
                        let y = &this.responses[idx * q..(idx + 1) * q];
                        this.accumulate(&mut acc, &nf, &mut ws, i, idx, y, &g, x, &mut jac, &mut b, third)
                            .map_err(|e| match e {
                                Error::Convergence { iterations, residual, .. } => Error::Convergence {
                                    what: format!("prox at quadrature node {i}"),
                                    iterations,
                                    residual,
                                },
                                other => other,
                            })?;
                    }
                }
                Ok(acc)
            })
            .collect();
        self.warm = warm;
        let mut total = Acc::new(k, k0, third);
        for p in partials {
            match p {
                Ok(a) => total.add(a),
                Err(e) => {
                    self.warm_valid = false;
                    return Err(e);
                }
            }
        }
        self.warm_valid = true;
        let mat = |v: &[f64], cols: usize| DMatrix::from_row_slice(k, cols, v);
        let classification = self.classes.first().is_some_and(|c| c.is_some());
        Ok(Moments {
            c: symmetrize(&mat(&total.c, k)),
            a_bar: symmetrize(&mat(&total.a, k)),
            e_uz1: mat(&total.uz1, k),
            e_uz0: mat(&total.uz0, k0),
            e_uv: mat(&total.uv, k),
            e_ug0: mat(&total.ug0, k0),
            train_loss: total.train,
            envelope: total.env,
            test_loss: total.test,
            class_error: classification.then_some(total.err),
            t_buu: third.then_some(total.t),
            max_prox_residual: total.res,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        acc: &mut Acc,
        nf: &NoiseFactor,
        ws: &mut ProxWorkspace,
        i: usize,
        idx: usize,
        y: &[f64],
        g: &[f64],
        x: &mut [f64],
        jac: &mut [f64],
        b: &mut [f64],
        third: bool,
    ) -> Result<()> {
        let (k, k0) = (self.k, self.k0);
        let stats = match prox_in_place(self.loss, y, g, nf, x, ws) {
            Ok(s) => s,
            Err(_) => {
                x.copy_from_slice(g);
                prox_in_place(self.loss, y, g, nf, x, ws)?
            }
        };
        let w = self.probs[idx];
        if w == 0.0 {
            return Ok(());
        }
        ws.jacobian_into(nf, jac)?;
        let u = &ws.grad;
        let h = &ws.hess;
        for r in 0..k {
            for c in 0..k {
                b[r * k + c] = (0..k).map(|t| h[r * k + t] * jac[t * k + c]).sum();
            }
        }
        let z = self.rule.point(i);
        let (z1, z0) = z.split_at(k);
        let g0 = &self.g0[i * k0..(i + 1) * k0];
        for r in 0..k {
            let wu = w * u[r];
            for c in 0..k {
                acc.c[r * k + c] += wu * u[c];
                acc.a[r * k + c] += w * b[r * k + c];
                acc.uz1[r * k + c] += wu * z1[c];
                acc.uv[r * k + c] += wu * x[c];
            }
            for c in 0..k0 {
                acc.uz0[r * k0 + c] += wu * z0[c];
                acc.ug0[r * k0 + c] += wu * g0[c];
            }
        }
        if third {
            for ii in 0..k {
                for a in 0..k {
                    let wb = w * b[ii * k + a];
                    for bb in 0..k {
                        let wbu = wb * u[bb];
                        for j in 0..k {
                            acc.t[((ii * k + a) * k + bb) * k + j] += wbu * u[j];
                        }
                    }
                }
            }
        }
        acc.train += w * stats.loss;
        acc.env += w * stats.envelope;
        acc.test += w * self.loss.value(g, y);
        if let (Some(truth), Some(pred)) = (self.classes[idx], self.loss.predict_class(g)) {
            if truth != pred {
                acc.err += w;
            }
        }
        acc.res = acc.res.max(stats.residual / (1.0 + linalg::norm2(g)));
        Ok(())
    }

    /// Atoms `(v, g0, y, weight)` of `ν^opt` and the law of `∇²ℓ(v, y)`.
    pub fn atoms(&mut self, kmat: &DMatrix<f64>, m: &DMatrix<f64>, s: &EffectiveNoise) -> Result<(Vec<NuAtom>, CurvatureMeasure)> {
        let (k, k0, q, per) = (self.k, self.k0, self.q, self.per_node);
        let nf = s.factor();
        let mut ws = ProxWorkspace::new(k);
        let mut g = vec![0.0; k];
        let mut atoms = Vec::with_capacity(self.probs.len());
        let mut mats = Vec::with_capacity(self.probs.len() * k * k);
        let mut weights = Vec::with_capacity(self.probs.len());
        for i in 0..self.rule.len() {
            self.center(kmat, m, i, &mut g);
            for j in 0..per {
                let idx = i * per + j;
                let y = &self.responses[idx * q..(idx + 1) * q];
                let mut x = g.clone();
                prox_in_place(self.loss, y, &g, &nf, &mut x, &mut ws)?;
                mats.extend_from_slice(&ws.hess);
                weights.push(self.probs[idx]);
                atoms.push(NuAtom {
                    v: x,
                    v0: self.g0[i * k0..(i + 1) * k0].to_vec(),
                    y: y.to_vec(),
                    weight: self.probs[idx],
                });
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        // symmetrize rounding in the stored Hessians
        for a in mats.chunks_mut(k * k) {
            for r in 0..k {
                for c in (r + 1)..k {
                    let v = 0.5 * (a[r * k + c] + a[c * k + r]);
                    a[r * k + c] = v;
                    a[c * k + r] = v;
                }
            }
        }
        let cm = CurvatureMeasure::from_flat(k, mats, weights)?;
        Ok((atoms, cm))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuAtom {
    pub v: Vec<f64>,
    pub v0: Vec<f64>,
    pub y: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relaxation factor on each update.
    pub relaxation: f64,
    /// Residual at which the iteration stops early.
    pub stop_tolerance: f64,
    /// Residual bound required for the `converged` flag; `None` picks the
    /// rule-dependent default.
    pub tolerance: Option<f64>,
    /// Divergence when `Tr R11 > factor · Tr R00` ...
    pub divergence_factor: f64,
    /// ... after this many consecutive increases of `Tr R11`.
    pub divergence_window: usize,
    /// Starting point `(K, M, S)`.
    pub init: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 3000,
            relaxation: 0.5,
            stop_tolerance: 1e-12,
            tolerance: None,
            divergence_factor: 1e6,
            divergence_window: 50,
            init: None,
        }
    }
}

impl SolverOptions {
    fn tolerance_for(&self, rule: &QuadratureRule) -> f64 {
        self.tolerance.unwrap_or(if rule.is_monte_carlo() {
            3.0 / (rule.len() as f64).sqrt()
        } else {
            1e-7
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticSolution {
    #[serde(skip)]
    pub r: OverlapMatrix,
    #[serde(skip)]
    pub s: EffectiveNoise,
    #[serde(skip)]
    pub kmat: DMatrix<f64>,
    #[serde(skip)]
    pub m: DMatrix<f64>,
    pub alpha: f64,
    pub lambda: f64,
    /// `max |α E[uuᵀ] − S⁻¹ (R/R00) S⁻¹|`.
    pub residual1: f64,
    /// `max |E[u (v, g0)ᵀ] + λ (R11, R10)|`.
    pub residual2: f64,
    pub quadrature: RuleDescriptor,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    /// `Tr R11` per iteration.
    pub norm_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
}

impl AsymptoticSolution {
    pub fn residual(&self) -> f64 {
        self.residual1.max(self.residual2)
    }
}

fn initial_km(k: usize, k0: usize, r00: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let r00h = sym_sqrt(r00);
    let m = DMatrix::from_fn(k, k0, |i, j| if i < k0 { 0.5 * r00h[(i, j)] } else { 0.0 });
    (DMatrix::identity(k, k) * 0.5, m)
}

/// The two residuals of the critical-point equations at `(K, M, S)`.
pub fn equation_residuals(
    mo: &Moments,
    kmat: &DMatrix<f64>,
    m: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r00: &DMatrix<f64>,
    alpha: f64,
    lambda: f64,
) -> Result<(f64, f64)> {
    let sinv = sym_inverse(s)?;
    let k2 = kmat * kmat;
    let r1 = max_abs(&(&mo.c * alpha - &sinv * &k2 * &sinv));
    let r11 = &k2 + m * m.transpose();
    let r10 = m * sym_sqrt(r00);
    let r2a = max_abs(&(&mo.e_uv + r11 * lambda));
    let r2b = max_abs(&(&mo.e_ug0 + r10 * lambda));
    Ok((r1, r2a.max(r2b)))
}

fn relax_k(kmat: &DMatrix<f64>, k2_new: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    sym_sqrt(&(kmat * kmat * (1.0 - eta) + k2_new * eta))
}

/// Solves the critical-point system by a Stein-preconditioned fixed point:
///
/// `S ← (α(E[H(I+SH)⁻¹] + λI))⁻¹`, `M ← M − αS(E[u z0ᵀ] + λM)`,
/// `K² ← α S E[uuᵀ] S`,
///
/// each relaxed by `options.relaxation`. At a fixed point the first equation
/// holds exactly and the second through Gaussian integration by parts; the
/// reported residuals are evaluated on the original equations. Works for
/// `λ = 0`; nonexistence shows up as sustained growth of `Tr R11`.
pub fn solve_critical_point(
    loss: &dyn LossModel,
    alpha: f64,
    lambda: f64,
    r00: &DMatrix<f64>,
    rule: &QuadratureRule,
    options: &SolverOptions,
) -> Result<AsymptoticSolution> {
    if !(alpha > 0.0) || !(lambda >= 0.0) {
        return Err(Error::Argument(format!("need alpha > 0 and lambda >= 0, got {alpha}, {lambda}")));
    }
    if !loss.is_convex() {
        return Err(Error::Argument("the critical-point solver requires a convex loss".into()));
    }
    if lambda == 0.0 && options.init.is_none() {
        // unregularized: the saddle is primary, the fixed point verifies
        match saddle_solve(loss, alpha, lambda, r00, rule) {
            Ok(sp) => {
                let mut law = NuOpt::new(loss, rule, r00)?;
                let sn = EffectiveNoise::new(sp.s.clone())?;
                let mo = law.moments(&sp.kmat, &sp.m, &sn, false)?;
                let res = equation_residuals(&mo, &sp.kmat, &sp.m, &sp.s, r00, alpha, lambda)?;
                let tr = (&sp.kmat * &sp.kmat + &sp.m * sp.m.transpose()).trace();
                let converged = res.0.max(res.1) <= options.tolerance_for(rule);
                return finish(
                    &sp.kmat,
                    &sp.m,
                    &sp.s,
                    r00,
                    alpha,
                    lambda,
                    res,
                    rule,
                    converged,
                    false,
                    sp.outer_iterations,
                    vec![tr],
                    vec![res.0.max(res.1)],
                );
            }
            Err(e) => log::debug!("saddle path failed ({e}); running the fixed point"),
        }
    }
    let mut law = NuOpt::new(loss, rule, r00)?;
    let (k, k0) = law.dims();
    let (mut kmat, mut m, mut s) = match &options.init {
        Some((a, b, c)) => (a.clone(), b.clone(), c.clone()),
        None => {
            let (a, b) = initial_km(k, k0, r00);
            (a, b, DMatrix::identity(k, k))
        }
    };
    let eta = options.relaxation;
    let tr00 = r00.trace();
    let tol = options.tolerance_for(rule);
    let mut norm_trace = Vec::new();
    let mut residual_trace = Vec::new();
    let mut increases = 0usize;
    let mut best: Option<(f64, usize)> = None;
    for it in 0..options.max_iterations {
        let sn = EffectiveNoise::new(symmetrize(&s))?;
        let mo = match law.moments(&kmat, &m, &sn, false) {
            Ok(mo) => mo,
            Err(e) if e.is_numerical() && increases > 0 => {
                return Err(indeterminate(it, &residual_trace, &norm_trace, e));
            }
            Err(e) => return Err(e),
        };
        let (r1, r2) = equation_residuals(&mo, &kmat, &m, &s, r00, alpha, lambda)?;
        let r11 = &kmat * &kmat + &m * m.transpose();
        let tr = r11.trace();
        if let Some(&last) = norm_trace.last() {
            increases = if tr > last { increases + 1 } else { 0 };
        }
        norm_trace.push(tr);
        residual_trace.push(r1.max(r2));
        log::trace!("critical point it {it}: res1 {r1:.3e} res2 {r2:.3e} Tr R11 {tr:.6e}");

        if tr > options.divergence_factor * tr00 && increases >= options.divergence_window {
            return finish(&kmat, &m, &s, r00, alpha, lambda, (r1, r2), rule, false, true, it + 1, norm_trace, residual_trace);
        }
        let res = r1.max(r2);
        if res <= options.stop_tolerance {
            return finish(&kmat, &m, &s, r00, alpha, lambda, (r1, r2), rule, res <= tol, false, it + 1, norm_trace, residual_trace);
        }
        // stagnation at the quadrature floor
        match best {
            Some((b, at)) if res >= b => {
                if it - at >= 40 && res <= tol {
                    return finish(&kmat, &m, &s, r00, alpha, lambda, (r1, r2), rule, true, false, it + 1, norm_trace, residual_trace);
                }
            }
            _ => best = Some((res, it)),
        }

        let shift = &mo.a_bar + DMatrix::identity(k, k) * lambda;
        let s_new = match sym_inverse(&(shift * alpha)) {
            Ok(v) => v,
            Err(e) if increases > 0 => return Err(indeterminate(it, &residual_trace, &norm_trace, e)),
            Err(e) => return Err(e),
        };
        let m_new = &m - &s_new * (&mo.e_uz0 + &m * lambda) * alpha;
        let k2_new = symmetrize(&(&s_new * &mo.c * &s_new * alpha));
        s = symmetrize(&(&s * (1.0 - eta) + s_new * eta));
        m = &m * (1.0 - eta) + m_new * eta;
        kmat = relax_k(&kmat, &k2_new, eta);
        if !kmat.iter().chain(m.iter()).chain(s.iter()).all(|v| v.is_finite()) {
            let e = Error::Numerical("non-finite iterate".into());
            return Err(indeterminate(it, &residual_trace, &norm_trace, e));
        }
    }
    let (Some(&last_residual), Some(&last_norm)) = (residual_trace.last(), norm_trace.last()) else {
        return Err(Error::Argument("max_iterations must be positive".into()));
    };
    Err(Error::Indeterminate {
        iterations: options.max_iterations,
        last_residual,
        last_norm,
        residual_trace,
        norm_trace,
    })
}

fn indeterminate(it: usize, res: &[f64], norm: &[f64], cause: Error) -> Error {
    log::warn!("critical point iteration stopped at {it}: {cause}");
    Error::Indeterminate {
        iterations: it,
        last_residual: res.last().copied().unwrap_or(f64::NAN),
        last_norm: norm.last().copied().unwrap_or(f64::NAN),
        residual_trace: res.to_vec(),
        norm_trace: norm.to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    kmat: &DMatrix<f64>,
    m: &DMatrix<f64>,
    s: &DMatrix<f64>,
    r00: &DMatrix<f64>,
    alpha: f64,
    lambda: f64,
    res: (f64, f64),
    rule: &QuadratureRule,
    converged: bool,
    diverged: bool,
    iterations: usize,
    norm_trace: Vec<f64>,
    residual_trace: Vec<f64>,
) -> Result<AsymptoticSolution> {
    let kabs = sym_sqrt(&(kmat * kmat));
    Ok(AsymptoticSolution {
        r: OverlapMatrix::from_km(&kabs, m, r00)?,
        s: EffectiveNoise::new(symmetrize(s))?,
        kmat: kabs,
        m: m.clone(),
        alpha,
        lambda,
        residual1: res.0,
        residual2: res.1,
        quadrature: rule.descriptor(),
        converged,
        diverged,
        iterations,
        norm_trace,
        residual_trace,
    })
}

/// Re-evaluates both equation residuals of a solution under another rule.
pub fn evaluate_residuals(
    loss: &dyn LossModel,
    sol: &AsymptoticSolution,
    rule: &QuadratureRule,
) -> Result<(f64, f64)> {
    let mut law = NuOpt::new(loss, rule, &sol.r.r00)?;
    let mo = law.moments(&sol.kmat, &sol.m, &sol.s, false)?;
    equation_residuals(&mo, &sol.kmat, &sol.m, sol.s.matrix(), &sol.r.r00, sol.alpha, sol.lambda)
}

/// Atoms of `ν^opt` for overlap `r` and noise `s`, plus the curvature law.
pub fn law_nu_opt(
    loss: &dyn LossModel,
    r: &OverlapMatrix,
    s: &EffectiveNoise,
    rule: &QuadratureRule,
) -> Result<(Vec<NuAtom>, CurvatureMeasure)> {
    let mut law = NuOpt::new(loss, rule, &r.r00)?;
    let (kmat, m) = r.km();
    law.atoms(&kmat, &m, s)
}

/// `G(K, M; S) = E[Mor(g; S)] − Tr(S⁻¹K²)/(2α) + λ Tr(K² + MMᵀ)/2`.
pub fn saddle_objective(mo: &Moments, kmat: &DMatrix<f64>, m: &DMatrix<f64>, s: &DMatrix<f64>, alpha: f64, lambda: f64) -> Result<f64> {
    let k2 = kmat * kmat;
    let sinv = sym_inverse(s)?;
    Ok(mo.envelope - (&sinv * &k2).trace() / (2.0 * alpha) + 0.5 * lambda * (k2.trace() + (m * m.transpose()).trace()))
}

/// Cap on `S` used when the inner supremum is not attained (`E[uuᵀ] = 0`).
pub const S_CAP: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub kmat: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// `Risk(K, M) = sup_S G(K, M; S)` at the minimizer.
    pub value: f64,
    /// `G` re-evaluated at the returned inner maximizer.
    pub inner_value: f64,
    pub gradient_norm: f64,
    pub outer_iterations: usize,
}

const INNER_ITERATIONS: usize = 30;
/// Moment passes allowed to one saddle solve.
const PASS_BUDGET: usize = 400;

struct Saddle<'l, 'a> {
    law: &'l mut NuOpt<'a>,
    alpha: f64,
    lambda: f64,
    s: DMatrix<f64>,
    evaluations: usize,
    bound: f64,
}

impl Saddle<'_, '_> {
    /// Maximizes `S ↦ G(K, M; S)` by Newton on `α S E[uuᵀ] S = K²`, warm-started.
    fn inner(&mut self, kmat: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(f64, Moments)> {
        let k = kmat.nrows();
        let k2 = symmetrize(&(kmat * kmat));
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
        let cap = DMatrix::identity(k, k) * S_CAP;
        let mut last_res = f64::INFINITY;
        for it in 0..INNER_ITERATIONS {
            if self.evaluations >= PASS_BUDGET {
                return Err(Error::convergence("saddle pass budget", self.evaluations, last_res));
            }
            self.evaluations += 1;
            let sn = EffectiveNoise::new(self.s.clone())?;
            let mo = self.law.moments(kmat, m, &sn, true)?;
            if max_abs(&mo.c) < 1e-300 || min_eigenvalue(&k2) <= 1e-300 {
                // G is nondecreasing in S; the supremum sits at the cap
                self.s = cap.clone();
                let sn = EffectiveNoise::new(self.s.clone())?;
                let mo = self.law.moments(kmat, m, &sn, false)?;
                let g = saddle_objective(&mo, kmat, m, &self.s, self.alpha, self.lambda)?;
                return Ok((g, mo));
            }
            let phi = symmetrize(&(&self.s * &mo.c * &self.s * self.alpha)) - &k2;
            let res = max_abs(&phi);
            if res <= 1e-13 * (1.0 + max_abs(&k2)) || (it > 3 && res >= last_res && res < 1e-10) {
                let g = saddle_objective(&mo, kmat, m, &self.s, self.alpha, self.lambda)?;
                return Ok((g, mo));
            }
            last_res = res;
            // dΦ[D] = α(D C S + S C D + S dC[D] S), dC[D] = −E[B D u uᵀ + u uᵀ D Bᵀ]
            let t = mo.t_buu.as_ref().expect("requested");
            let np = pairs.len();
            let mut jac = DMatrix::<f64>::zeros(np, np);
            for (col, &(a, b)) in pairs.iter().enumerate() {
                let mut d = DMatrix::<f64>::zeros(k, k);
                d[(a, b)] = 1.0;
                d[(b, a)] = 1.0;
                // X_ij = E[(B D u)_i u_j] = Σ_{a,b} D_ab T[i,a,b,j]
                let mut x = DMatrix::<f64>::zeros(k, k);
                for i in 0..k {
                    for j in 0..k {
                        let mut v = t[((i * k + a) * k + b) * k + j];
                        if a != b {
                            v += t[((i * k + b) * k + a) * k + j];
                        }
                        x[(i, j)] = v;
                    }
                }
                let dc = -(&x + x.transpose());
                let dphi = (&d * &mo.c * &self.s + &self.s * &mo.c * &d + &self.s * dc * &self.s) * self.alpha;
                for (row, &(i, j)) in pairs.iter().enumerate() {
                    jac[(row, col)] = dphi[(i, j)];
                }
            }
            let rhs = nalgebra::DVector::from_iterator(np, pairs.iter().map(|&(i, j)| -phi[(i, j)]));
            let step = jac.lu().solve(&rhs);
            let mut next = None;
            if let Some(step) = step {
                let mut d = DMatrix::<f64>::zeros(k, k);
                for (idx, &(a, b)) in pairs.iter().enumerate() {
                    d[(a, b)] = step[idx];
                    d[(b, a)] = step[idx];
                }
                let mut tt = 1.0;
                while tt > 1e-3 {
                    let cand = &self.s + &d * tt;
                    if min_eigenvalue(&cand) > 0.0 {
                        next = Some(symmetrize(&cand));
                        break;
                    }
                    tt *= 0.5;
                }
            }
            self.s = match next {
                Some(s) => s,
                None => {
                    // fixed-point fallback S = K (K αC K)^{-1/2} K
                    let inner = symmetrize(&(kmat * &mo.c * kmat * self.alpha));
                    let fp = kmat * sym_inv_sqrt(&inner)? * kmat;
                    symmetrize(&((&self.s + fp) * 0.5))
                }
            };
        }
        Err(Error::convergence("inner maximization over S", INNER_ITERATIONS, last_res))
    }

    fn unpack(&self, theta: &[f64], k: usize, k0: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut kmat = DMatrix::zeros(k, k);
        let mut idx = 0;
        for a in 0..k {
            for b in a..k {
                kmat[(a, b)] = theta[idx];
                kmat[(b, a)] = theta[idx];
                idx += 1;
            }
        }
        let m = DMatrix::from_row_slice(k, k0, &theta[idx..]);
        (kmat, m)
    }

    /// `Risk(K, M)` and its gradient in the packed coordinates.
    fn eval(&mut self, theta: &[f64], k: usize, k0: usize) -> Result<(f64, Vec<f64>)> {
        let (kmat, m) = self.unpack(theta, k, k0);
        let norm = (&kmat * &kmat).trace() + (&m * m.transpose()).trace();
        if norm > self.bound {
            return Err(Error::Numerical(format!("Tr R11 = {norm:.3e} exceeds the divergence bound")));
        }
        let (val, mo) = self.inner(&kmat, &m)?;
        let sinv = sym_inverse(&self.s)?;
        let gk = symmetrize(&mo.e_uz1) - (&sinv * &kmat + &kmat * &sinv) / (2.0 * self.alpha) + &kmat * self.lambda;
        let gk = if max_abs(&mo.c) < 1e-300 {
            // inner supremum at infinity: the S⁻¹ term vanishes in the limit
            symmetrize(&mo.e_uz1) + &kmat * self.lambda
        } else {
            gk
        };
        let gm = &mo.e_uz0 + &m * self.lambda;
        let mut grad = Vec::with_capacity(theta.len());
        for a in 0..k {
            for b in a..k {
                grad.push(if a == b { gk[(a, a)] } else { gk[(a, b)] + gk[(b, a)] });
            }
        }
        for a in 0..k {
            for b in 0..k0 {
                grad.push(gm[(a, b)]);
            }
        }
        Ok((val, grad))
    }
}

/// Min over `(K, M)` of `sup_S G(K, M; S)`: BFGS outside, Newton inside.
pub fn saddle_solve(
    loss: &dyn LossModel,
    alpha: f64,
    lambda: f64,
    r00: &DMatrix<f64>,
    rule: &QuadratureRule,
) -> Result<SaddleSolution> {
    let mut law = NuOpt::new(loss, rule, r00)?;
    let (k, k0) = law.dims();
    let (k_init, m_init) = initial_km(k, k0, r00);
    let mut theta: Vec<f64> = Vec::new();
    for a in 0..k {
        for b in a..k {
            theta.push(k_init[(a, b)]);
        }
    }
    theta.extend(linalg::to_row_major(&m_init));
    let n = theta.len();
    let mut sp = Saddle {
        law: &mut law,
        alpha,
        lambda,
        s: DMatrix::identity(k, k),
        evaluations: 0,
        bound: 1e6 * r00.trace(),
    };
    let (mut f, mut g) = sp.eval(&theta, k, k0)?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let gtol = 1e-10;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it;
        let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        log::trace!("saddle it {it}: value {f:.12e} gradient {gnorm:.3e} passes {}", sp.evaluations);
        if gnorm <= gtol {
            break;
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut p = -(&hinv * &gv);
        if p.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            p = -gv.clone();
        }
        let slope = p.dot(&gv);
        let s_save = sp.s.clone();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(p.iter()).map(|(a, b)| a + t * b).collect();
            match sp.eval(&cand, k, k0) {
                Err(e) if sp.evaluations >= PASS_BUDGET => return Err(e),
                Ok((fc, gc)) if fc <= f + 1e-4 * t * slope || (fc <= f + 1e-14 * (1.0 + f.abs()) && t == 1.0) => {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                _ => {
                    sp.s = s_save.clone();
                    t *= 0.5;
                }
            }
        }
        let Some((cand, fc, gc)) = accepted else {
            return Err(Error::convergence("saddle outer line search", it, gnorm));
        };
        let sv = nalgebra::DVector::from_iterator(n, cand.iter().zip(&theta).map(|(a, b)| a - b));
        let yv = nalgebra::DVector::from_iterator(n, gc.iter().zip(&g).map(|(a, b)| a - b));
        let sy = sv.dot(&yv);
        if sy > 1e-300 {
            if it == 0 {
                hinv = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &sv * yv.transpose() * rho;
            let right = &i - &yv * sv.transpose() * rho;
            hinv = &left * &hinv * &right + &sv * sv.transpose() * rho;
        }
        theta = cand;
        f = fc;
        g = gc;
    }
    let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if gnorm > 1e-7 {
        return Err(Error::convergence("saddle outer minimization", iterations, gnorm));
    }
    let (kmat, m) = sp.unpack(&theta, k, k0);
    let sn = EffectiveNoise::new(sp.s.clone())?;
    let mo = sp.law.moments(&kmat, &m, &sn, false)?;
    let inner_value = saddle_objective(&mo, &kmat, &m, &sp.s, alpha, lambda)?;
    log::debug!("saddle: {} outer iterations, {} moment passes", iterations, sp.evaluations);
    Ok(SaddleSolution {
        kmat: sym_sqrt(&(&kmat * &kmat)),
        m,
        s: sp.s.clone(),
        value: f,
        inner_value,
        gradient_norm: gnorm,
        outer_iterations: iterations,
    })
}

/// `M(S) = log det(C S² K⁻²)/(2α) − Tr(S K⁻² S C)/2 + k log(αe)/(2α)` with
/// `C = E[∇ℓ∇ℓᵀ]` and `K² = R/R00`.
pub fn m_functional(c: &DMatrix<f64>, r: &OverlapMatrix, s: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let k = c.nrows() as f64;
    check_gradient_moment(c)?;
    let k2inv = sym_inverse(&r.schur())?;
    let ld = |a: &DMatrix<f64>| -> Result<f64> {
        let ch = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("log-det argument".into()))?;
        Ok(2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    };
    let s_sym = symmetrize(s);
    let logdet = ld(c)? + 2.0 * ld(&s_sym)? + ld(&k2inv)?;
    let tr = (&s_sym * &k2inv * &s_sym * c).trace();
    Ok(logdet / (2.0 * alpha) - 0.5 * tr + k * (alpha.ln() + 1.0) / (2.0 * alpha))
}

/// Maximizer of [`m_functional`]: `α^{-1/2} K (K⁻¹ C⁻¹ K⁻¹)^{1/2} K`.
pub fn s_opt_closed_form(c: &DMatrix<f64>, r: &OverlapMatrix, alpha: f64) -> Result<DMatrix<f64>> {
    check_gradient_moment(c)?;
    let kmat = sym_sqrt(&r.schur());
    let kinv = sym_inverse(&r.schur()).map(|x| sym_sqrt(&x))?;
    let cinv = sym_inverse(c)?;
    let mid = sym_sqrt(&symmetrize(&(&kinv * cinv * &kinv)));
    Ok(symmetrize(&(&kmat * mid * &kmat)) / alpha.sqrt())
}

fn check_gradient_moment(c: &DMatrix<f64>) -> Result<()> {
    let lo = min_eigenvalue(c);
    if lo <= 1e-14 * (1.0 + max_abs(c)) {
        return Err(Error::Rank(format!("E[∇ℓ∇ℓᵀ] is singular (min eigenvalue {lo:.3e})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictedObservables {
    /// `E[ℓ(v, y)]` under `ν^opt`, penalty excluded.
    pub train_loss: f64,
    /// `E[ℓ(g, y)]` with `(g, g0) ~ N(0, R)`.
    pub test_loss: f64,
    pub classification_error: Option<f64>,
    /// `Tr R11 − 2 Tr R10 + Tr R00`.
    pub estimation_error: f64,
    /// `Risk(K, M) = G` at the solution, penalty included.
    pub risk: f64,
    #[serde(skip)]
    pub moments: Moments,
}

pub fn predicted_observables(
    loss: &dyn LossModel,
    sol: &AsymptoticSolution,
    rule: &QuadratureRule,
) -> Result<PredictedObservables> {
    let mut law = NuOpt::new(loss, rule, &sol.r.r00)?;
    let mo = law.moments(&sol.kmat, &sol.m, &sol.s, false)?;
    let risk = saddle_objective(&mo, &sol.kmat, &sol.m, sol.s.matrix(), sol.alpha, sol.lambda)?;
    Ok(PredictedObservables {
        train_loss: mo.train_loss,
        test_loss: mo.test_loss,
        classification_error: mo.class_error,
        estimation_error: sol.r.estimation_error(),
        risk,
        moments: mo,
    })
}

/// Predicted Hessian spectral density: the curvature law of `ν^opt` under
/// `rule` pushed through the Stieltjes fixed point and shifted by λ.
pub fn predicted_spectrum(
    loss: &dyn LossModel,
    sol: &AsymptoticSolution,
    grid: &[f64],
    gamma: f64,
    rule: &QuadratureRule,
) -> Result<SpectralDensity> {
    let (_, cm) = law_nu_opt(loss, &sol.r, &sol.s, rule)?;
    spectral_density(&cm, sol.alpha, sol.lambda, grid, gamma)
}

/// Maximum deviation of `r11` and `s` from the span of `{I, 𝟙𝟙ᵀ}`.
pub fn exchange_symmetry_defect(sol: &AsymptoticSolution) -> f64 {
    fn defect(a: &DMatrix<f64>) -> f64 {
        let k = a.nrows();
        let diag: Vec<f64> = (0..k).map(|i| a[(i, i)]).collect();
        let off: Vec<f64> = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| a[ij]).collect();
        let spread = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if v.is_empty() { 0.0 } else { hi - lo }
        };
        spread(&diag).max(spread(&off))
    }
    defect(&sol.r.r11).max(defect(sol.s.matrix())).max(defect(&sol.r.r10))
}
