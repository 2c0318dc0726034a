//! Loss families, the label model, ground-truth construction and the block
//! overlap matrix shared by the theory and simulation layers.
//!
//! A loss is written as `ℓ(v, y)` with `v ∈ R^k` the fitted scores and `y`
//! a response vector drawn from a law that depends on the truth scores
//! `v0 ∈ R^{k0}` and a latent uniform vector `w`. Families with discrete
//! responses expose their full response law so that expectations over labels
//! can be taken exactly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, max_abs, min_eigenvalue, sym_inv_sqrt, sym_sqrt, symmetrize};
use crate::quadrature::hermite_rule_1d;

/// Second-moment matrix of (estimator, truth) projections,
/// `R = [[R11, R10], [R01, R00]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub r11: DMatrix<f64>,
    pub r10: DMatrix<f64>,
    pub r00: DMatrix<f64>,
}

impl OverlapMatrix {
    pub fn new(r11: DMatrix<f64>, r10: DMatrix<f64>, r00: DMatrix<f64>) -> Result<Self> {
        let k = r11.nrows();
        let k0 = r00.nrows();
        if r11.ncols() != k || r00.ncols() != k0 || r10.shape() != (k, k0) {
            return Err(Error::Dimension(format!(
                "overlap blocks have shapes {:?}, {:?}, {:?}",
                r11.shape(),
                r10.shape(),
                r00.shape()
            )));
        }
        let r = OverlapMatrix { r11, r10, r00 };
        if min_eigenvalue(&r.r00) <= 0.0 {
            return Err(Error::NotPositiveDefinite("R00 must be positive definite".into()));
        }
        let full = r.full();
        let scale = 1.0 + max_abs(&full);
        if max_abs(&(&full - full.transpose())) > 1e-10 * scale {
            return Err(Error::Argument("overlap matrix is not symmetric".into()));
        }
        if min_eigenvalue(&r.schur()) < -1e-9 * scale {
            return Err(Error::NotPositiveDefinite(
                "Schur complement R/R00 has a negative eigenvalue".into(),
            ));
        }
        Ok(r)
    }

    /// Builds `R` from the saddle parametrization `(K, M)`:
    /// `R/R00 = K²`, `R10 = M R00^{1/2}`.
    pub fn from_km(kmat: &DMatrix<f64>, m: &DMatrix<f64>, r00: &DMatrix<f64>) -> Result<Self> {
        let r00h = sym_sqrt(r00);
        let r11 = symmetrize(&(kmat * kmat + m * m.transpose()));
        let r10 = m * &r00h;
        OverlapMatrix::new(r11, r10, r00.clone())
    }

    pub fn k(&self) -> usize {
        self.r11.nrows()
    }

    pub fn k0(&self) -> usize {
        self.r00.nrows()
    }

    pub fn full(&self) -> DMatrix<f64> {
        let (k, k0) = (self.k(), self.k0());
        let mut out = DMatrix::zeros(k + k0, k + k0);
        out.view_mut((0, 0), (k, k)).copy_from(&self.r11);
        out.view_mut((0, k), (k, k0)).copy_from(&self.r10);
        out.view_mut((k, 0), (k0, k)).copy_from(&self.r10.transpose());
        out.view_mut((k, k), (k0, k0)).copy_from(&self.r00);
        out
    }

    /// `R/R00 = R11 − R10 R00⁻¹ R01`.
    pub fn schur(&self) -> DMatrix<f64> {
        let inv = linalg::sym_inverse(&self.r00).expect("R00 validated as PD");
        symmetrize(&(&self.r11 - &self.r10 * inv * self.r10.transpose()))
    }

    /// `(K, M) = ((R/R00)^{1/2}, R10 R00^{-1/2})`.
    pub fn km(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let kmat = sym_sqrt(&self.schur());
        let m = &self.r10 * sym_inv_sqrt(&self.r00).expect("R00 validated as PD");
        (kmat, m)
    }

    /// `‖Θ − Θ0‖²_F = Tr R11 − 2 Tr R10 + Tr R00` when `k = k0`. For `k ≠ k0`
    /// the truth is embedded in (or truncated to) the first `min(k, k0)` columns.
    pub fn estimation_error(&self) -> f64 {
        let c = self.k().min(self.k0());
        let tr10: f64 = (0..c).map(|i| self.r10[(i, i)]).sum();
        let tr00: f64 = (0..c).map(|i| self.r00[(i, i)]).sum();
        self.r11.trace() - 2.0 * tr10 + tr00
    }
}

/// The k×k matrix `S ≻ 0` weighting the proximal map.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNoise(DMatrix<f64>);

impl EffectiveNoise {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(Error::Dimension("effective noise must be square".into()));
        }
        let scale = max_abs(&s).max(f64::MIN_POSITIVE);
        if max_abs(&(&s - s.transpose())) > 1e-12 * scale {
            return Err(Error::Argument("effective noise is not symmetric".into()));
        }
        let s = symmetrize(&s);
        if min_eigenvalue(&s) <= 0.0 {
            return Err(Error::NotPositiveDefinite("effective noise must be PD".into()));
        }
        Ok(EffectiveNoise(s))
    }

    pub fn scaled_identity(k: usize, c: f64) -> Result<Self> {
        EffectiveNoise::new(DMatrix::identity(k, k) * c)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Row-major lower Cholesky factor `L` with `S = L Lᵀ`.
    pub fn factor(&self) -> NoiseFactor {
        let k = self.dim();
        let mut l = linalg::to_row_major(&self.0);
        let ok = linalg::cholesky_in_place(&mut l, k);
        debug_assert!(ok, "validated PD matrix must factor");
        for i in 0..k {
            for j in (i + 1)..k {
                l[i * k + j] = 0.0;
            }
        }
        NoiseFactor {
            k,
            s: linalg::to_row_major(&self.0),
            l,
        }
    }
}

/// Cached factorization of an [`EffectiveNoise`] for the prox inner loop.
#[derive(Debug, Clone)]
pub struct NoiseFactor {
    pub k: usize,
    /// `S`, row-major.
    pub s: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    pub l: Vec<f64>,
}

/// A convex per-sample loss `ℓ(v, y)` together with its response model.
pub trait LossModel: Send + Sync {
    fn name(&self) -> &str;
    /// Score dimension `k`.
    fn dim(&self) -> usize;
    /// Truth-index dimension `k0`.
    fn truth_dim(&self) -> usize;
    /// Length of the encoded response vector.
    fn response_dim(&self) -> usize;
    /// Number of uniform latents consumed by [`LossModel::sample_response`].
    fn latent_dim(&self) -> usize;

    /// Returns `ℓ(v, y)` and writes the gradient (length k) and the row-major
    /// Hessian (k×k) in `v`.
    fn eval(&self, v: &[f64], y: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64;

    fn value(&self, v: &[f64], y: &[f64]) -> f64 {
        let k = self.dim();
        let mut g = vec![0.0; k];
        let mut h = vec![0.0; k * k];
        self.eval(v, y, &mut g, &mut h)
    }

    /// Draws a response given truth scores and latent uniforms in `[0, 1)`.
    /// Deterministic in `(v0, w)`.
    fn sample_response(&self, v0: &[f64], w: &[f64]) -> Vec<f64>;

    /// Weighted responses representing the law of `y | v0`: exact for
    /// discrete families, a Gauss–Hermite discretization otherwise.
    fn response_law(&self, v0: &[f64]) -> Vec<(Vec<f64>, f64)>;

    /// Class index encoded by a response, for classification families.
    fn response_class(&self, _y: &[f64]) -> Option<usize> {
        None
    }

    /// Predicted class from fitted scores, for classification families.
    fn predict_class(&self, _v: &[f64]) -> Option<usize> {
        None
    }

    fn is_convex(&self) -> bool {
        true
    }

    /// Upper bound on `‖∇²ℓ‖_op` over all arguments, when one exists.
    fn curvature_bound(&self) -> Option<f64> {
        None
    }
}

/// Exponential family `P(dy | η) ∝ exp(ηᵀτ(y) − a(η)) ν0(dy)`, represented
/// through the law of its sufficient statistic `t = τ(y)`.
pub trait ExpFamily: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Returns `a(η)` and writes `∇a(η)` and row-major `∇²a(η)`.
    fn cumulant(&self, eta: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64;
    /// Support of `τ(y)` under `η`, in a fixed order, with probabilities.
    fn stat_law(&self, eta: &[f64]) -> Vec<(Vec<f64>, f64)>;
    /// Curvature bounds `a1 ≤ λ(∇²a) ≤ a2`.
    fn curvature_bounds(&self) -> (f64, f64);

    /// Inverse-CDF draw over the support order of [`ExpFamily::stat_law`].
    fn sample_stat(&self, eta: &[f64], u: f64) -> Vec<f64> {
        let law = self.stat_law(eta);
        let mut acc = 0.0;
        let last = law.len() - 1;
        for (i, (t, p)) in law.iter().enumerate() {
            acc += p;
            if u < acc || i == last {
                return t.clone();
            }
        }
        unreachable!("non-empty support")
    }

    fn stat_class(&self, _t: &[f64]) -> Option<usize> {
        None
    }

    fn predict_class(&self, _v: &[f64]) -> Option<usize> {
        None
    }

    /// `a(η) − ηᵀt` with its gradient and Hessian in `η`.
    fn nll(&self, eta: &[f64], t: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let a = self.cumulant(eta, grad, hess);
        let mut dot = 0.0;
        for j in 0..grad.len() {
            grad[j] -= t[j];
            dot += eta[j] * t[j];
        }
        a - dot
    }
}

/// Multinomial regression with `k + 1` classes and reference class
/// `e_0 = 0`: `a(v) = log(1 + Σ_j e^{v_j})`.
#[derive(Debug, Clone)]
pub struct Multinomial {
    k: usize,
}

impl Multinomial {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "multinomial needs at least two classes");
        Multinomial { k }
    }

    pub fn classes(&self) -> usize {
        self.k + 1
    }

    /// Class probabilities `(p_1, …, p_k)` and the log-partition `a(v)`,
    /// shifted by `max(0, v_1, …, v_k)`.
    pub fn probabilities(v: &[f64], p: &mut [f64]) -> f64 {
        let m = v.iter().fold(0.0f64, |m, &x| m.max(x));
        let base = (-m).exp();
        let mut denom = base;
        for (pj, &vj) in p.iter_mut().zip(v) {
            *pj = (vj - m).exp();
            denom += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= denom;
        }
        m + denom.ln()
    }

    /// `(p_0, p_1, …, p_k)` with `p_0 = 1 − Σ p_j`.
    pub fn class_probabilities(v: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; v.len() + 1];
        let m = v.iter().fold(0.0f64, |m, &x| m.max(x));
        let base = (-m).exp();
        let mut denom = base;
        p[0] = base;
        for (j, &vj) in v.iter().enumerate() {
            p[j + 1] = (vj - m).exp();
            denom += p[j + 1];
        }
        for pj in p.iter_mut() {
            *pj /= denom;
        }
        p
    }

    pub fn one_hot(&self, class: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.k];
        if class > 0 {
            y[class - 1] = 1.0;
        }
        y
    }

    /// Inverse-CDF class draw over `(p_0, …, p_k)`.
    pub fn sample_class(v0: &[f64], u: f64) -> usize {
        let p = Multinomial::class_probabilities(v0);
        let mut acc = 0.0;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                return j;
            }
        }
        p.len() - 1
    }

    /// Argmax over `{0, v_1, …, v_k}`, ties to the lowest index.
    pub fn argmax_class(v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = 0.0;
        for (j, &vj) in v.iter().enumerate() {
            if vj > best_score {
                best = j + 1;
                best_score = vj;
            }
        }
        best
    }
}

impl ExpFamily for Multinomial {
    fn name(&self) -> &str {
        "multinomial"
    }

    fn dim(&self) -> usize {
        self.k
    }

    fn cumulant(&self, eta: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let k = self.k;
        let a = Multinomial::probabilities(eta, grad);
        for i in 0..k {
            for j in 0..k {
                hess[i * k + j] = -grad[i] * grad[j];
            }
            hess[i * k + i] += grad[i];
        }
        a
    }

    // Evaluated relative to the observed class, so tiny losses and
    // residuals keep full relative precision.
    fn nll(&self, eta: &[f64], t: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let k = self.k;
        let one_hot = t.iter().all(|&x| x == 0.0 || x == 1.0) && t.iter().sum::<f64>() <= 1.0;
        let target = if one_hot { self.stat_class(t) } else { None };
        let Some(target) = target else {
            let a = self.cumulant(eta, grad, hess);
            let dot: f64 = eta.iter().zip(t).map(|(e, y)| e * y).sum();
            for j in 0..k {
                grad[j] -= t[j];
            }
            return a - dot;
        };
        let w = |c: usize| if c == 0 { 0.0 } else { eta[c - 1] };
        let wt = w(target);
        let m = (0..=k).filter(|&c| c != target).map(|c| w(c) - wt).fold(0.0f64, f64::max);
        // q[c] ∝ exp(w_c − w_t − m), the target entry holds exp(−m)
        let mut q = vec![0.0; k + 1];
        let mut others = 0.0;
        for (c, qc) in q.iter_mut().enumerate() {
            if c == target {
                *qc = (-m).exp();
            } else {
                *qc = (w(c) - wt - m).exp();
                others += *qc;
            }
        }
        let denom = q[target] + others;
        let value = if m > 0.0 { m + denom.ln() } else { others.ln_1p() };
        for qc in q.iter_mut() {
            *qc /= denom;
        }
        let rest = others / denom;
        for j in 0..k {
            let c = j + 1;
            grad[j] = if c == target { -rest } else { q[c] };
        }
        for i in 0..k {
            for j in 0..k {
                hess[i * k + j] = -q[i + 1] * q[j + 1];
            }
            let c = i + 1;
            let comp = if c == target { rest } else { 1.0 - q[c] };
            hess[i * k + i] = q[c] * comp;
        }
        value
    }

    fn stat_law(&self, eta: &[f64]) -> Vec<(Vec<f64>, f64)> {
        Multinomial::class_probabilities(eta)
            .into_iter()
            .enumerate()
            .map(|(j, p)| (self.one_hot(j), p))
            .collect()
    }

    fn curvature_bounds(&self) -> (f64, f64) {
        (0.0, 0.5)
    }

    fn sample_stat(&self, eta: &[f64], u: f64) -> Vec<f64> {
        self.one_hot(Multinomial::sample_class(eta, u))
    }

    fn stat_class(&self, t: &[f64]) -> Option<usize> {
        Some(t.iter().position(|&x| x > 0.5).map_or(0, |j| j + 1))
    }

    fn predict_class(&self, v: &[f64]) -> Option<usize> {
        Some(Multinomial::argmax_class(v))
    }
}

/// Independent binomial counts with `trials` draws per coordinate:
/// `a(η) = trials · Σ_j log(1 + e^{η_j})`.
#[derive(Debug, Clone)]
pub struct Binomial {
    k: usize,
    trials: u32,
}

impl Binomial {
    pub fn new(k: usize, trials: u32) -> Self {
        assert!(k >= 1 && trials >= 1);
        Binomial { k, trials }
    }

    fn coordinate_pmf(&self, eta: f64) -> Vec<f64> {
        let m = self.trials as u64;
        let p = 1.0 / (1.0 + (-eta).exp());
        let q = 1.0 - p;
        (0..=m)
            .map(|j| {
                let c = statrs::function::factorial::binomial(m, j);
                c * p.powi(j as i32) * q.powi((m - j) as i32)
            })
            .collect()
    }
}

impl ExpFamily for Binomial {
    fn name(&self) -> &str {
        "binomial"
    }

    fn dim(&self) -> usize {
        self.k
    }

    fn cumulant(&self, eta: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let k = self.k;
        let m = self.trials as f64;
        hess.iter_mut().for_each(|h| *h = 0.0);
        let mut a = 0.0;
        for j in 0..k {
            let e = eta[j];
            // log(1 + e^x) without overflow
            a += m * (e.max(0.0) + (-e.abs()).exp().ln_1p());
            let s = 1.0 / (1.0 + (-e).exp());
            grad[j] = m * s;
            hess[j * k + j] = m * s * (1.0 - s);
        }
        a
    }

    fn stat_law(&self, eta: &[f64]) -> Vec<(Vec<f64>, f64)> {
        let pmfs: Vec<Vec<f64>> = eta.iter().map(|&e| self.coordinate_pmf(e)).collect();
        let per = self.trials as usize + 1;
        let total = per.pow(self.k as u32);
        let mut out = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut t = vec![0.0; self.k];
            let mut p = 1.0;
            for j in 0..self.k {
                let c = rem % per;
                rem /= per;
                t[j] = c as f64;
                p *= pmfs[j][c];
            }
            out.push((t, p));
        }
        out
    }

    fn curvature_bounds(&self) -> (f64, f64) {
        (0.0, self.trials as f64 / 4.0)
    }
}

/// Negative log-likelihood `ℓ(v, t) = a(v) − vᵀt` of an exponential family.
#[derive(Debug, Clone)]
pub struct ExpFamilyLoss<F> {
    family: F,
}

impl<F: ExpFamily> ExpFamilyLoss<F> {
    pub fn new(family: F) -> Self {
        ExpFamilyLoss { family }
    }

    pub fn family(&self) -> &F {
        &self.family
    }
}

/// Multinomial cross-entropy, the main loss of this crate.
pub type MultinomialLoss = ExpFamilyLoss<Multinomial>;

impl MultinomialLoss {
    pub fn multinomial(k: usize) -> Self {
        ExpFamilyLoss::new(Multinomial::new(k))
    }
}

impl<F: ExpFamily> LossModel for ExpFamilyLoss<F> {
    fn name(&self) -> &str {
        self.family.name()
    }

    fn dim(&self) -> usize {
        self.family.dim()
    }

    fn truth_dim(&self) -> usize {
        self.family.dim()
    }

    fn response_dim(&self) -> usize {
        self.family.dim()
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn eval(&self, v: &[f64], y: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        self.family.nll(v, y, grad, hess)
    }

    fn sample_response(&self, v0: &[f64], w: &[f64]) -> Vec<f64> {
        self.family.sample_stat(v0, w[0])
    }

    fn response_law(&self, v0: &[f64]) -> Vec<(Vec<f64>, f64)> {
        self.family.stat_law(v0)
    }

    fn response_class(&self, y: &[f64]) -> Option<usize> {
        self.family.stat_class(y)
    }

    fn predict_class(&self, v: &[f64]) -> Option<usize> {
        self.family.predict_class(v)
    }

    fn curvature_bound(&self) -> Option<f64> {
        Some(self.family.curvature_bounds().1)
    }
}

/// Square loss `ℓ(v, y) = ½‖v − y‖²` with `y = v0 + σ ξ`, `ξ ~ N(0, I_k)`.
#[derive(Debug, Clone)]
pub struct SquaredLoss {
    k: usize,
    noise_sd: f64,
    /// Gauss–Hermite nodes per dimension used for the response law.
    noise_nodes: usize,
}

impl SquaredLoss {
    pub fn new(k: usize, noise_sd: f64) -> Self {
        SquaredLoss {
            k,
            noise_sd,
            noise_nodes: 8,
        }
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }
}

impl LossModel for SquaredLoss {
    fn name(&self) -> &str {
        "squared"
    }

    fn dim(&self) -> usize {
        self.k
    }

    fn truth_dim(&self) -> usize {
        self.k
    }

    fn response_dim(&self) -> usize {
        self.k
    }

    fn latent_dim(&self) -> usize {
        if self.noise_sd > 0.0 {
            self.k
        } else {
            0
        }
    }

    fn eval(&self, v: &[f64], y: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let k = self.k;
        let mut val = 0.0;
        hess.iter_mut().for_each(|h| *h = 0.0);
        for j in 0..k {
            let r = v[j] - y[j];
            grad[j] = r;
            val += 0.5 * r * r;
            hess[j * k + j] = 1.0;
        }
        val
    }

    fn sample_response(&self, v0: &[f64], w: &[f64]) -> Vec<f64> {
        if self.noise_sd == 0.0 {
            return v0.to_vec();
        }
        let normal = statrs::distribution::Normal::standard();
        v0.iter()
            .zip(w)
            .map(|(&m, &u)| {
                let u = u.clamp(1e-300, 1.0 - 1e-16);
                m + self.noise_sd * statrs::distribution::ContinuousCDF::inverse_cdf(&normal, u)
            })
            .collect()
    }

    fn response_law(&self, v0: &[f64]) -> Vec<(Vec<f64>, f64)> {
        if self.noise_sd == 0.0 {
            return vec![(v0.to_vec(), 1.0)];
        }
        let (x, w) = hermite_rule_1d(self.noise_nodes);
        let per = x.len();
        let total = per.pow(self.k as u32);
        (0..total)
            .map(|mut idx| {
                let mut y = v0.to_vec();
                let mut p = 1.0;
                for yj in y.iter_mut() {
                    let c = idx % per;
                    idx /= per;
                    *yj += self.noise_sd * x[c];
                    p *= w[c];
                }
                (y, p)
            })
            .collect()
    }

    fn curvature_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `ℓ ≡ 0`; the degenerate case of pure ridge.
#[derive(Debug, Clone)]
pub struct ZeroLoss {
    k: usize,
    k0: usize,
}

impl ZeroLoss {
    pub fn new(k: usize, k0: usize) -> Self {
        ZeroLoss { k, k0 }
    }
}

impl LossModel for ZeroLoss {
    fn name(&self) -> &str {
        "zero"
    }

    fn dim(&self) -> usize {
        self.k
    }

    fn truth_dim(&self) -> usize {
        self.k0
    }

    fn response_dim(&self) -> usize {
        0
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn eval(&self, _v: &[f64], _y: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        0.0
    }

    fn sample_response(&self, _v0: &[f64], _w: &[f64]) -> Vec<f64> {
        Vec::new()
    }

    fn response_law(&self, _v0: &[f64]) -> Vec<(Vec<f64>, f64)> {
        vec![(Vec::new(), 1.0)]
    }

    fn curvature_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Multinomial label draw: inverse CDF over `(p_0(v0), …, p_k(v0))`.
/// Returns the one-hot encoding with `e_0 = 0`.
pub fn sample_label(spec: &Multinomial, v0: &[f64], u: f64) -> Vec<f64> {
    spec.one_hot(Multinomial::sample_class(v0, u))
}

/// `(value, grad, hess)` of the multinomial cross-entropy `a(v) − vᵀy`.
pub fn multinomial_value_grad_hess(v: &[f64], y: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let k = v.len();
    let loss = MultinomialLoss::multinomial(k);
    let mut g = vec![0.0; k];
    let mut h = vec![0.0; k * k];
    let val = loss.eval(v, y, &mut g, &mut h);
    (val, DVector::from_vec(g), DMatrix::from_row_slice(k, k, &h))
}

/// The symmetric-class overlap `R00^s(c) = c·(I + ½(𝟙𝟙ᵀ − I))`.
pub fn symmetric_r00(k: usize, c: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { c } else { 0.5 * c })
}

/// Ground truth `Θ0 = Q R00^{1/2}` with `Q` a seeded random d×k0 frame with
/// orthonormal columns, so that `Θ0ᵀΘ0 = R00`.
pub fn build_theta0(r00: &DMatrix<f64>, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    let k0 = r00.nrows();
    if r00.ncols() != k0 {
        return Err(Error::Dimension("R00 must be square".into()));
    }
    if d < k0 {
        return Err(Error::Dimension(format!("need d >= k0, got d={d}, k0={k0}")));
    }
    if min_eigenvalue(r00) <= 0.0 {
        return Err(Error::NotPositiveDefinite("R00 must be positive definite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: DMatrix<f64> = DMatrix::from_fn(d, k0, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    Ok(q * sym_sqrt(r00))
}

/// Loss family selector used by configuration files.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    #[default]
    Multinomial,
    Binomial { trials: u32 },
    Squared { noise_sd: f64 },
}

impl LossSpec {
    pub fn build(&self, k: usize, k0: usize) -> Result<Box<dyn LossModel>> {
        if k == 0 || k0 == 0 {
            return Err(Error::Argument("k and k0 must be positive".into()));
        }
        if k != k0 {
            return Err(Error::Dimension(format!("{self:?} needs k = k0, got k={k}, k0={k0}")));
        }
        Ok(match *self {
            LossSpec::Multinomial => Box::new(MultinomialLoss::multinomial(k)),
            LossSpec::Binomial { trials } => {
                if trials == 0 {
                    return Err(Error::Argument("binomial trials must be positive".into()));
                }
                Box::new(ExpFamilyLoss::new(Binomial::new(k, trials)))
            }
            LossSpec::Squared { noise_sd } => {
                if !(noise_sd >= 0.0) {
                    return Err(Error::Argument("noise_sd must be nonnegative".into()));
                }
                Box::new(SquaredLoss::new(k, noise_sd))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fd_check(loss: &dyn LossModel, v: &[f64], y: &[f64]) -> (f64, f64) {
        let k = loss.dim();
        let mut g = vec![0.0; k];
        let mut h = vec![0.0; k * k];
        loss.eval(v, y, &mut g, &mut h);
        let eps = 1e-5;
        let mut gerr: f64 = 0.0;
        let mut herr: f64 = 0.0;
        let scale_g = 1.0 + linalg::norm2(&g);
        let scale_h = 1.0 + h.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..k {
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[i] += eps;
            vm[i] -= eps;
            let mut gp = vec![0.0; k];
            let mut gm = vec![0.0; k];
            let mut scratch = vec![0.0; k * k];
            let fp = loss.eval(&vp, y, &mut gp, &mut scratch);
            let fm = loss.eval(&vm, y, &mut gm, &mut scratch);
            gerr = gerr.max(((fp - fm) / (2.0 * eps) - g[i]).abs() / scale_g);
            for j in 0..k {
                herr = herr.max(((gp[j] - gm[j]) / (2.0 * eps) - h[j * k + i]).abs() / scale_h);
            }
        }
        (gerr, herr)
    }

    #[test]
    fn multinomial_at_origin() {
        let (val, g, h) = multinomial_value_grad_hess(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((val - 3f64.ln()).abs() < 1e-15);
        assert!((g[0] - (1.0 / 3.0 - 1.0)).abs() < 1e-15);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((h[(0, 0)] - 2.0 / 9.0).abs() < 1e-15);
        assert!((h[(0, 1)] + 1.0 / 9.0).abs() < 1e-15);
        assert!((h[(1, 1)] - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn multinomial_large_scores_stay_finite() {
        let (val, g, h) = multinomial_value_grad_hess(&[1000.0, 1000.0], &[0.0, 0.0]);
        // log(1 + 2e^1000) = 1000 + log(2 + e^-1000) = 1000 + ln 2 in f64
        assert_eq!(val, 1000.0 + 2f64.ln());
        assert!(g.iter().all(|x| x.is_finite()));
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!(h.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn multinomial_k1_is_logistic() {
        for &t in &[-30.0, -2.0, 0.0, 0.7, 25.0] {
            let (val, _, _) = multinomial_value_grad_hess(&[t], &[0.0]);
            let logistic = if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            };
            assert!((val - logistic).abs() < 1e-14 * (1.0 + logistic.abs()));
        }
    }

    #[test]
    fn sample_label_cells() {
        let spec = Multinomial::new(2);
        assert_eq!(sample_label(&spec, &[0.0, 0.0], 0.10), vec![0.0, 0.0]);
        assert_eq!(sample_label(&spec, &[0.0, 0.0], 0.99), vec![0.0, 1.0]);
        let p = Multinomial::class_probabilities(&[50.0, 0.0]);
        assert!(p[1] > 1.0 - 1e-10);
        assert_eq!(sample_label(&spec, &[50.0, 0.0], 0.5), vec![1.0, 0.0]);
    }

    #[test]
    fn sample_label_frequencies_match_probabilities() {
        let spec = Multinomial::new(3);
        let v0 = [0.3, -0.8, 1.1];
        let p = Multinomial::class_probabilities(&v0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let u: f64 = rng.random();
            let y = sample_label(&spec, &v0, u);
            counts[spec.stat_class(&y).unwrap()] += 1;
        }
        for j in 0..4 {
            let freq = counts[j] as f64 / n as f64;
            let se = (p[j] * (1.0 - p[j]) / n as f64).sqrt();
            assert!((freq - p[j]).abs() < 4.0 * se, "class {j}: {freq} vs {}", p[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let losses: Vec<Box<dyn LossModel>> = vec![
            Box::new(MultinomialLoss::multinomial(3)),
            Box::new(ExpFamilyLoss::new(Binomial::new(2, 3))),
            Box::new(SquaredLoss::new(2, 0.5)),
        ];
        for loss in &losses {
            for _ in 0..100 {
                let k = loss.dim();
                let v: Vec<f64> = (0..k).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let v0: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let w: Vec<f64> = (0..loss.latent_dim()).map(|_| rng.random()).collect();
                let y = loss.sample_response(&v0, &w);
                let (gerr, herr) = fd_check(loss.as_ref(), &v, &y);
                assert!(gerr < 1e-6, "{}: grad err {gerr}", loss.name());
                assert!(herr < 1e-5, "{}: hess err {herr}", loss.name());
            }
        }
    }

    #[test]
    fn multinomial_hessian_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..4).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let (_, _, h) = multinomial_value_grad_hess(&v, &[0.0; 4]);
            assert!(min_eigenvalue(&h) >= -1e-12);
            let p = Multinomial::class_probabilities(&v);
            for i in 0..4 {
                let row: f64 = (0..4).map(|j| h[(i, j)]).sum();
                assert!(row <= p[i + 1] + 1e-15);
            }
        }
    }

    #[test]
    fn multinomial_permutation_equivariance() {
        let v = [0.4, -1.3, 2.2];
        let y = [0.0, 1.0, 0.0];
        let perm = [2usize, 0, 1];
        let (_, g, h) = multinomial_value_grad_hess(&v, &y);
        let vp: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let (_, gp, hp) = multinomial_value_grad_hess(&vp, &yp);
        for a in 0..3 {
            assert!((gp[a] - g[perm[a]]).abs() <= 1e-15);
            for b in 0..3 {
                assert!((hp[(a, b)] - h[(perm[a], perm[b])]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn exp_family_curvature_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fams: Vec<Box<dyn ExpFamily>> = vec![Box::new(Multinomial::new(3)), Box::new(Binomial::new(2, 4))];
        for fam in &fams {
            let k = fam.dim();
            let (a1, a2) = fam.curvature_bounds();
            for _ in 0..200 {
                let eta: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let mut g = vec![0.0; k];
                let mut h = vec![0.0; k * k];
                fam.cumulant(&eta, &mut g, &mut h);
                let ev = linalg::eigenvalues(&DMatrix::from_row_slice(k, k, &h));
                assert!(ev.min() >= a1 - 1e-12 && ev.max() <= a2 + 1e-12);
                let law = fam.stat_law(&eta);
                let total: f64 = law.iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
                // mean of the sufficient statistic is ∇a
                for j in 0..k {
                    let mean: f64 = law.iter().map(|(t, p)| t[j] * p).sum();
                    assert!((mean - g[j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn theta0_reproduces_r00() {
        let th = build_theta0(&DMatrix::identity(2, 2), 4, 1).unwrap();
        assert!((th.transpose() * &th - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        let r = symmetric_r00(2, 1.0);
        let th = build_theta0(&r, 250, 9).unwrap();
        assert!((th.transpose() * &th - &r).amax() < 1e-12);
        let again = build_theta0(&r, 250, 9).unwrap();
        assert_eq!(th, again);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(build_theta0(&bad, 10, 0).is_err());
        assert!(matches!(build_theta0(&r, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn overlap_km_roundtrip() {
        let r00 = symmetric_r00(2, 1.0);
        let kmat = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.6]);
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.3, 0.4]);
        let r = OverlapMatrix::from_km(&kmat, &m, &r00).unwrap();
        let (k2, m2) = r.km();
        assert!((k2 - kmat).amax() < 1e-12);
        assert!((m2 - m).amax() < 1e-12);
        let same = OverlapMatrix::new(r00.clone(), r00.clone(), r00.clone()).unwrap();
        assert!(same.estimation_error().abs() < 1e-14);
    }
}
