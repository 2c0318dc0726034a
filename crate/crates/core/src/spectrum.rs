//! Matrix-valued Stieltjes transform of the limiting Hessian spectrum.
//!
//! For a law of PSD curvature matrices `W`, the map
//! `F_z(S) = (E[(I + W S)⁻¹ W] − z I)⁻¹` has a unique fixed point
//! `F_z(S) = α S` with `Im S ≻ 0`; `(1/k) Tr(α S)` is the Stieltjes
//! transform of the loss-Hessian spectrum. A ridge penalty shifts it by λ.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, min_eigenvalue};
use crate::quadrature::ordered_reduce;

const MAX_DAMPED_STEPS: usize = 10_000;
const MAX_NEWTON_STEPS: usize = 60;
const RESIDUAL_TOL: f64 = 1e-10;

/// Weighted law of k×k PSD curvature matrices, stored flat row-major.
#[derive(Debug, Clone)]
pub struct CurvatureMeasure {
    k: usize,
    mats: Vec<f64>,
    weights: Vec<f64>,
    bound: f64,
}

impl CurvatureMeasure {
    pub fn new(k: usize, atoms: &[(DMatrix<f64>, f64)]) -> Result<Self> {
        let mut mats = Vec::with_capacity(atoms.len() * k * k);
        let mut weights = Vec::with_capacity(atoms.len());
        for (w, p) in atoms {
            if w.shape() != (k, k) {
                return Err(Error::Dimension(format!("atom of shape {:?}, expected {k}x{k}", w.shape())));
            }
            mats.extend(linalg::to_row_major(w));
            weights.push(*p);
        }
        CurvatureMeasure::from_flat(k, mats, weights)
    }

    /// Builds a measure from row-major matrices; validates symmetry, PSD-ness
    /// and total weight.
    pub fn from_flat(k: usize, mats: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if k == 0 || mats.len() != weights.len() * k * k || weights.is_empty() {
            return Err(Error::Dimension("curvature atoms do not match weights".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Argument("curvature weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("curvature weights sum to {total}")));
        }
        let mut bound: f64 = 0.0;
        for a in mats.chunks(k * k) {
            let w = DMatrix::from_row_slice(k, k, a);
            let scale = linalg::max_abs(&w);
            if linalg::max_abs(&(&w - w.transpose())) > 1e-12 * scale.max(1.0) {
                return Err(Error::Argument("curvature atom is not symmetric".into()));
            }
            let ev = linalg::eigenvalues(&w);
            if ev.min() < -1e-12 * scale.max(1.0) {
                return Err(Error::Argument(format!("curvature atom has eigenvalue {:.3e}", ev.min())));
            }
            bound = bound.max(ev.max());
        }
        Ok(CurvatureMeasure { k, mats, weights, bound })
    }

    /// All mass on a single matrix.
    pub fn point_mass(w: DMatrix<f64>) -> Result<Self> {
        let k = w.nrows();
        CurvatureMeasure::new(k, &[(w, 1.0)])
    }

    /// `k = 1`, constant curvature `c`.
    pub fn scalar(c: f64) -> Result<Self> {
        CurvatureMeasure::point_mass(DMatrix::from_element(1, 1, c))
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Largest operator norm over the atoms.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn atom(&self, i: usize) -> (&[f64], f64) {
        let kk = self.k * self.k;
        (&self.mats[i * kk..(i + 1) * kk], self.weights[i])
    }

    /// `E[A]` and, if requested, `T[p,a,b,q] = E[A_pa A_bq]` with
    /// `A = (I + W S)⁻¹ W`.
    fn resolvent_moments(&self, s: &[C64], second: bool) -> Result<(Vec<C64>, Vec<C64>)> {
        let k = self.k;
        let kk = k * k;
        let width = kk + if second { kk * kk } else { 0 };
        let zero = C64::new(0.0, 0.0);
        let (acc, bad) = ordered_reduce(
            self.len(),
            || (vec![zero; width], false),
            |(acc, bad), i| {
                let (w, p) = self.atom(i);
                if p == 0.0 {
                    return;
                }
                let mut m = vec![zero; kk];
                let mut a: Vec<C64> = w.iter().map(|&x| C64::new(x, 0.0)).collect();
                for r in 0..k {
                    for c in 0..k {
                        let mut v = if r == c { C64::new(1.0, 0.0) } else { zero };
                        for t in 0..k {
                            v += w[r * k + t] * s[t * k + c];
                        }
                        m[r * k + c] = v;
                    }
                }
                if !complex_solve(&mut m, &mut a, k, k) {
                    *bad = true;
                    return;
                }
                for (e, &x) in acc.iter_mut().zip(&a) {
                    *e += x * p;
                }
                if second {
                    let t = &mut acc[kk..];
                    for pi in 0..k {
                        for ai in 0..k {
                            let apa = a[pi * k + ai] * p;
                            for bi in 0..k {
                                for qi in 0..k {
                                    t[((pi * k + ai) * k + bi) * k + qi] += apa * a[bi * k + qi];
                                }
                            }
                        }
                    }
                }
            },
            |(acc, bad), (other, b)| {
                for (x, y) in acc.iter_mut().zip(other) {
                    *x += y;
                }
                *bad |= b;
            },
        );
        if bad {
            return Err(Error::Numerical("singular resolvent I + W S".into()));
        }
        let t = acc[kk..].to_vec();
        let mut e = acc;
        e.truncate(kk);
        Ok((e, t))
    }

    /// `E[log det(I + W Q)]` for real PD `Q`.
    fn mean_log_det(&self, q: &[f64]) -> Result<f64> {
        let k = self.k;
        let (sum, bad) = ordered_reduce(
            self.len(),
            || (0.0f64, false),
            |(acc, bad), i| {
                let (w, p) = self.atom(i);
                let mut m = vec![0.0; k * k];
                for r in 0..k {
                    for c in 0..k {
                        let mut v = if r == c { 1.0 } else { 0.0 };
                        for t in 0..k {
                            v += w[r * k + t] * q[t * k + c];
                        }
                        m[r * k + c] = v;
                    }
                }
                let det = DMatrix::from_row_slice(k, k, &m).determinant();
                if det > 0.0 {
                    *acc += p * det.ln();
                } else {
                    *bad = true;
                }
            },
            |(a, b), (x, y)| {
                *a += x;
                *b |= y;
            },
        );
        if bad {
            return Err(Error::Numerical("det(I + W Q) is not positive".into()));
        }
        Ok(sum)
    }

    /// `E[A]` and `E[A ⊗ A]` at a real PD `Q`, for the log-potential Newton.
    fn real_moments(&self, q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let qc: Vec<C64> = q.iter().map(|&x| C64::new(x, 0.0)).collect();
        let (e, t) = self.resolvent_moments(&qc, true)?;
        Ok((e.iter().map(|c| c.re).collect(), t.iter().map(|c| c.re).collect()))
    }
}

/// Gaussian elimination with partial pivoting: solves `M X = B` in place
/// (`B` is k×ncols). Returns false on a zero pivot.
fn complex_solve(m: &mut [C64], b: &mut [C64], k: usize, ncols: usize) -> bool {
    for col in 0..k {
        let mut piv = col;
        let mut best = m[col * k + col].norm();
        for r in (col + 1)..k {
            let v = m[r * k + col].norm();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > 0.0) {
            return false;
        }
        if piv != col {
            for c in 0..k {
                m.swap(col * k + c, piv * k + c);
            }
            for c in 0..ncols {
                b.swap(col * ncols + c, piv * ncols + c);
            }
        }
        let inv = m[col * k + col].inv();
        for r in (col + 1)..k {
            let f = m[r * k + col] * inv;
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            for c in col..k {
                let v = m[col * k + c];
                m[r * k + c] -= f * v;
            }
            for c in 0..ncols {
                let v = b[col * ncols + c];
                b[r * ncols + c] -= f * v;
            }
        }
    }
    for col in (0..k).rev() {
        let inv = m[col * k + col].inv();
        for c in 0..ncols {
            let mut v = b[col * ncols + c];
            for t in (col + 1)..k {
                v -= m[col * k + t] * b[t * ncols + c];
            }
            b[col * ncols + c] = v * inv;
        }
    }
    true
}

fn to_flat(s: &DMatrix<C64>) -> Vec<C64> {
    let k = s.nrows();
    (0..k * k).map(|i| s[(i / k, i % k)]).collect()
}

fn from_flat(k: usize, s: &[C64]) -> DMatrix<C64> {
    DMatrix::from_row_slice(k, k, s)
}

fn invert(m: DMatrix<C64>) -> Result<DMatrix<C64>> {
    m.try_inverse()
        .ok_or_else(|| Error::Numerical("E[A] − zI is singular".into()))
}

/// `F_z(S) = (E[(I + W S)⁻¹ W] − z I)⁻¹`.
pub fn f_map(s: &DMatrix<C64>, z: C64, cm: &CurvatureMeasure) -> Result<DMatrix<C64>> {
    let k = cm.dim();
    if s.shape() != (k, k) {
        return Err(Error::Dimension("S does not match the curvature dimension".into()));
    }
    let (ea, _) = cm.resolvent_moments(&to_flat(s), false)?;
    invert(from_flat(k, &ea) - DMatrix::identity(k, k) * z)
}

/// `Im S = (S − S*)/(2i)`.
pub fn imag_part(s: &DMatrix<C64>) -> DMatrix<f64> {
    let h = s - s.adjoint();
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        let v = h[(i, j)] / C64::new(0.0, 2.0);
        v.re
    })
}

fn op_norm(m: &DMatrix<C64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Symmetric part, to remove rounding drift of a complex-symmetric iterate.
fn csym(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.transpose()) * C64::new(0.5, 0.0)
}

#[derive(Debug, Clone)]
pub struct MatrixStieltjes {
    pub z: C64,
    pub s: DMatrix<C64>,
    /// `‖F_z(S) − α S‖_op`.
    pub residual: f64,
    pub iterations: usize,
}

impl MatrixStieltjes {
    /// `(1/k) Tr(α S)`, the scalar Stieltjes transform.
    pub fn stieltjes(&self, alpha: f64) -> C64 {
        self.s.trace() * alpha / self.s.nrows() as f64
    }
}

struct Stieltjes<'a> {
    z: C64,
    alpha: f64,
    cm: &'a CurvatureMeasure,
}

impl Stieltjes<'_> {
    fn residual(&self, s: &DMatrix<C64>) -> Result<(DMatrix<C64>, f64)> {
        let g = f_map(s, self.z, self.cm)? - s * C64::new(self.alpha, 0.0);
        let r = g.norm();
        Ok((g, r))
    }

    fn tolerance(&self, s: &DMatrix<C64>) -> f64 {
        // Frobenius bounds on both sides keep this at or below the op-norm target
        RESIDUAL_TOL * self.alpha * s.norm() / (s.nrows() as f64).sqrt()
    }

    /// Newton on `F_z(S) − αS = 0` over complex symmetric `S`.
    fn newton(&self, mut s: DMatrix<C64>, iters: &mut usize) -> Result<Option<DMatrix<C64>>> {
        let k = self.cm.dim();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
        let m = pairs.len();
        let (mut g, mut r) = self.residual(&s)?;
        for _ in 0..MAX_NEWTON_STEPS {
            if r <= self.tolerance(&s) {
                return Ok(Some(s));
            }
            *iters += 1;
            let (ea, t) = self.cm.resolvent_moments(&to_flat(&s), true)?;
            let f = invert(from_flat(k, &ea) - DMatrix::identity(k, k) * self.z)?;
            let mut jac = DMatrix::<C64>::zeros(m, m);
            for (col, &(a, b)) in pairs.iter().enumerate() {
                // E[A E_ab A] for the symmetric basis element E_ab
                let mut inner = DMatrix::<C64>::zeros(k, k);
                for p in 0..k {
                    for q in 0..k {
                        let mut v = t[((p * k + a) * k + b) * k + q];
                        if a != b {
                            v += t[((p * k + b) * k + a) * k + q];
                        }
                        inner[(p, q)] = v;
                    }
                }
                let d = &f * inner * &f;
                for (row, &(i, j)) in pairs.iter().enumerate() {
                    let mut v = d[(i, j)];
                    if (i, j) == (a, b) {
                        v -= self.alpha;
                    }
                    jac[(row, col)] = v;
                }
            }
            let rhs = DVector::from_iterator(m, pairs.iter().map(|&(i, j)| -g[(i, j)]));
            let step = match jac.lu().solve(&rhs) {
                Some(x) => x,
                None => return Ok(None),
            };
            let mut dmat = DMatrix::<C64>::zeros(k, k);
            for (idx, &(a, b)) in pairs.iter().enumerate() {
                dmat[(a, b)] = step[idx];
                dmat[(b, a)] = step[idx];
            }
            let mut t_step = 1.0;
            let mut accepted = false;
            while t_step > 1e-4 {
                let cand = csym(&(&s + &dmat * C64::new(t_step, 0.0)));
                if min_eigenvalue(&imag_part(&cand)) > 0.0 {
                    if let Ok((gc, rc)) = self.residual(&cand) {
                        if rc < r || rc <= self.tolerance(&cand) {
                            s = cand;
                            g = gc;
                            r = rc;
                            accepted = true;
                            break;
                        }
                    }
                }
                t_step *= 0.5;
            }
            if !accepted {
                return Ok(if r <= self.tolerance(&s) { Some(s) } else { None });
            }
        }
        Ok(if r <= self.tolerance(&s) { Some(s) } else { None })
    }

    /// `S ← ½S + ½F_z(S)/α`, which stays in the upper half-plane.
    fn damped(&self, mut s: DMatrix<C64>, steps: usize, iters: &mut usize) -> Result<DMatrix<C64>> {
        let half = C64::new(0.5, 0.0);
        for _ in 0..steps {
            *iters += 1;
            let f = f_map(&s, self.z, self.cm)?;
            s = csym(&(&s * half + f * C64::new(0.5 / self.alpha, 0.0)));
        }
        Ok(s)
    }
}

/// Solves `F_z(S) = αS` with `Im S ≻ 0`, warm-started from `init` if given.
///
/// Newton from the start point; if that stalls, blocks of damped fixed-point
/// steps followed by renewed Newton attempts, up to 10 000 damped steps.
pub fn solve_stieltjes(
    z: C64,
    cm: &CurvatureMeasure,
    alpha: f64,
    init: Option<&DMatrix<C64>>,
) -> Result<MatrixStieltjes> {
    if !(z.im > 0.0) {
        return Err(Error::Argument(format!("Im z must be positive, got {z}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Argument("alpha must be positive".into()));
    }
    let k = cm.dim();
    let cold = DMatrix::<C64>::identity(k, k) * (-1.0 / (alpha * z));
    let start = match init {
        Some(s0) if s0.shape() == (k, k) && min_eigenvalue(&imag_part(s0)) > 0.0 => csym(s0),
        _ => cold.clone(),
    };
    let solver = Stieltjes { z, alpha, cm };
    let mut iterations = 0;
    let mut s = start;
    let mut damped = 0;
    loop {
        if let Some(sol) = solver.newton(s.clone(), &mut iterations)? {
            let (g, _) = solver.residual(&sol)?;
            let residual = op_norm(&g);
            return Ok(MatrixStieltjes {
                z,
                residual,
                s: sol,
                iterations,
            });
        }
        if damped >= MAX_DAMPED_STEPS {
            let (_, r) = solver.residual(&s)?;
            return Err(Error::convergence(format!("Stieltjes fixed point at z = {z}"), iterations, r));
        }
        let block = if damped == 0 { 50 } else { 500 };
        if damped == 0 && init.is_some() {
            s = cold.clone();
        }
        s = solver.damped(s, block, &mut iterations)?;
        damped += block;
    }
}

/// Gridded approximation of the spectral law `μ_MP ⊞ δ_λ`.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// Trapezoid integral of the density over the grid.
    pub mass: f64,
}

impl SpectralDensity {
    /// Wasserstein-1 distance between the gridded density (normalized to unit
    /// mass) and the empirical law of `samples`.
    pub fn w1_to_samples(&self, samples: &[f64]) -> Result<f64> {
        w1_distance(samples, &self.grid, &self.density)
    }

    /// Indices of strict local maxima of the density whose height exceeds
    /// `rel` times the global maximum.
    pub fn modes(&self, rel: f64) -> Vec<usize> {
        let top = self.density.iter().cloned().fold(0.0, f64::max);
        let d = &self.density;
        (1..d.len().saturating_sub(1))
            .filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1] && d[i] > rel * top)
            .collect()
    }
}

/// `(1/(kπ)) Im Tr(α S_⋆(x − λ + iγ))` on `grid`, continued along the grid
/// with warm starts.
pub fn spectral_density(
    cm: &CurvatureMeasure,
    alpha: f64,
    lambda: f64,
    grid: &[f64],
    gamma: f64,
) -> Result<SpectralDensity> {
    if !(gamma > 0.0) {
        return Err(Error::Argument("gamma must be positive".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("grid must be strictly increasing".into()));
    }
    let k = cm.dim() as f64;
    let mut density = Vec::with_capacity(grid.len());
    let mut prev: Option<DMatrix<C64>> = None;
    for &x in grid {
        let z = C64::new(x - lambda, gamma);
        let sol = solve_stieltjes(z, cm, alpha, prev.as_ref()).map_err(|e| match e {
            Error::Convergence { iterations, residual, .. } => Error::Convergence {
                what: format!("spectral density at x = {x}"),
                iterations,
                residual,
            },
            other => other,
        })?;
        let dens = (sol.s.trace() * alpha).im / (k * std::f64::consts::PI);
        density.push(dens);
        prev = Some(sol.s);
    }
    let mass = grid
        .windows(2)
        .zip(density.windows(2))
        .map(|(x, d)| 0.5 * (d[0] + d[1]) * (x[1] - x[0]))
        .sum();
    Ok(SpectralDensity {
        grid: grid.to_vec(),
        density,
        gamma,
        alpha,
        lambda,
        mass,
    })
}

/// Evenly spaced grid with `n` points on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Grid window `[λ − 1, λ + 𝔎(1 + α^{-1/2})² + 1]` that covers the support.
pub fn default_window(cm: &CurvatureMeasure, alpha: f64, lambda: f64) -> (f64, f64) {
    let edge = cm.bound() * (1.0 + alpha.powf(-0.5)).powi(2);
    (lambda - 1.0, lambda + edge + 1.0)
}

/// `K_z(Q) = −αz Tr Q + α E[log det(I + W Q)] − log det Q − k(log α + 1)`
/// at real `z = x`.
pub fn log_potential(q: &DMatrix<f64>, cm: &CurvatureMeasure, alpha: f64, x: f64) -> Result<f64> {
    let k = cm.dim();
    if q.shape() != (k, k) {
        return Err(Error::Dimension("Q does not match the curvature dimension".into()));
    }
    let chol = q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Q".into()))?;
    let logdet_q = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let eld = cm.mean_log_det(&linalg::to_row_major(q))?;
    Ok(-alpha * x * q.trace() + alpha * eld - logdet_q - k as f64 * (alpha.ln() + 1.0))
}

/// Minimizes `K_{−λ}` over `Q ≻ 0` by Newton on the free entries of `Q`
/// with step halving. Returns the minimum and the minimizer.
pub fn min_log_potential(cm: &CurvatureMeasure, alpha: f64, lambda: f64) -> Result<(f64, DMatrix<f64>)> {
    let k = cm.dim();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
    let m = pairs.len();
    let z = -lambda;
    let mut q = DMatrix::<f64>::identity(k, k) / (alpha * lambda.max(1e-3) + cm.bound());
    let mut val = log_potential(&q, cm, alpha, z)?;
    for it in 0..200 {
        let qf = linalg::to_row_major(&q);
        let (ea, t) = cm.real_moments(&qf)?;
        let qinv = linalg::sym_inverse(&q)?;
        // gradient matrix G = αλ I + α E[A] − Q⁻¹
        let gmat = DMatrix::from_fn(k, k, |i, j| {
            alpha * ea[i * k + j] - qinv[(i, j)] + if i == j { alpha * lambda } else { 0.0 }
        });
        let grad = DVector::from_iterator(
            m,
            pairs.iter().map(|&(a, b)| if a == b { gmat[(a, a)] } else { 2.0 * gmat[(a, b)] }),
        );
        let scale = 1.0 + qinv.norm();
        if grad.amax() <= 1e-13 * scale {
            return Ok((val, q));
        }
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for (col, &(a, b)) in pairs.iter().enumerate() {
            // Hessian action: −α E[A E_ab A] + Q⁻¹ E_ab Q⁻¹
            let mut e = DMatrix::<f64>::zeros(k, k);
            e[(a, b)] = 1.0;
            e[(b, a)] = 1.0;
            let qeq = &qinv * &e * &qinv;
            for (row, &(i, j)) in pairs.iter().enumerate() {
                let mut v = t[((i * k + a) * k + b) * k + j];
                if a != b {
                    v += t[((i * k + b) * k + a) * k + j];
                }
                let h = -alpha * v + qeq[(i, j)];
                hess[(row, col)] = if i == j { h } else { 2.0 * h };
            }
        }
        let hess = linalg::symmetrize(&hess);
        let step = match hess.clone().cholesky() {
            Some(c) => -c.solve(&grad),
            None => -&grad,
        };
        let mut dq = DMatrix::<f64>::zeros(k, k);
        for (idx, &(a, b)) in pairs.iter().enumerate() {
            dq[(a, b)] = step[idx];
            dq[(b, a)] = step[idx];
        }
        let slope = grad.dot(&step);
        let mut tt = 1.0;
        loop {
            let cand = &q + &dq * tt;
            if min_eigenvalue(&cand) > 0.0 {
                if let Ok(v) = log_potential(&cand, cm, alpha, z) {
                    if v <= val + 1e-4 * tt * slope || (v <= val + 1e-15 * (1.0 + val.abs()) && tt == 1.0) {
                        q = cand;
                        val = v;
                        break;
                    }
                }
            }
            tt *= 0.5;
            if tt < 1e-12 {
                if grad.amax() <= 1e-9 * scale {
                    return Ok((val, q));
                }
                return Err(Error::convergence("log-potential minimization", it, grad.amax()));
            }
        }
    }
    Err(Error::convergence("log-potential minimization", 200, f64::NAN))
}

/// First Wasserstein distance between an empirical sample and a density
/// tabulated on an increasing grid (trapezoidal CDF, renormalized).
pub fn w1_distance(samples: &[f64], grid: &[f64], density: &[f64]) -> Result<f64> {
    if grid.len() < 2 || grid.len() != density.len() || samples.is_empty() {
        return Err(Error::Argument("w1 needs a grid of at least two points and samples".into()));
    }
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (density[i] + density[i - 1]).max(0.0) * (grid[i] - grid[i - 1]);
    }
    let mass = cdf[grid.len() - 1];
    if !(mass > 0.0) {
        return Err(Error::Numerical("density has no mass on the grid".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    // ∫ |F_emp − F| over the union of the grid and the sample range
    let lo = grid[0].min(s[0]);
    let hi = grid[grid.len() - 1].max(s[s.len() - 1]);
    let mut points: Vec<f64> = grid.iter().copied().chain(s.iter().copied()).filter(|v| *v >= lo && *v <= hi).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let f_theory = |x: f64| -> f64 {
        if x <= grid[0] {
            return 0.0;
        }
        if x >= grid[grid.len() - 1] {
            return 1.0;
        }
        let j = grid.partition_point(|g| *g <= x);
        let (x0, x1) = (grid[j - 1], grid[j]);
        let t = (x - x0) / (x1 - x0);
        (cdf[j - 1] + t * (cdf[j] - cdf[j - 1])) / mass
    };
    let mut total = 0.0;
    let mut idx = 0usize;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        while idx < s.len() && s[idx] <= a {
            idx += 1;
        }
        let fe = idx as f64 / m;
        // F_theory is piecewise linear between consecutive points
        let (fa, fb) = (f_theory(a) - fe, f_theory(b) - fe);
        total += if fa * fb >= 0.0 {
            0.5 * (fa.abs() + fb.abs()) * (b - a)
        } else {
            let r = fa.abs() / (fa.abs() + fb.abs());
            0.5 * (fa.abs() * r + fb.abs() * (1.0 - r)) * (b - a)
        };
    }
    Ok(total)
}
