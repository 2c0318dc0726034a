//! Discretizations of the standard Gaussian on `R^m`, and an ordered
//! parallel reduction used for every expectation over their nodes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Product weights below this are dropped from tensor rules.
pub const PRUNE_WEIGHT: f64 = 1e-16;

/// Work unit of [`ordered_reduce`]; fixed so sums do not depend on threads.
pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    TensorHermite,
    QuasiRandom,
    PseudoRandom,
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RuleKind::TensorHermite => "tensor-hermite",
            RuleKind::QuasiRandom => "quasi-random",
            RuleKind::PseudoRandom => "pseudo-random",
        })
    }
}

/// Weighted nodes for `N(0, I_dim)`, stored flat.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub kind: RuleKind,
    pub dim: usize,
    pub seed: u64,
    /// Nodes per dimension for tensor rules; requested count otherwise.
    pub order: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

/// Compact description of a rule, stored next to results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleDescriptor {
    pub kind: RuleKind,
    pub dim: usize,
    pub order: usize,
    pub count: usize,
    pub seed: u64,
}

/// Gauss–Hermite rule for the standard normal (probabilists' weight),
/// by Golub–Welsch on the Jacobi matrix followed by Newton polishing of the
/// nodes. Weights sum to one.
pub fn hermite_rule_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut x: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    // Newton on the normalized recurrence; weights from 1 / Σ φ_j(x)².
    let mut w = vec![0.0; n];
    for (xi, wi) in x.iter_mut().zip(w.iter_mut()) {
        for _ in 0..3 {
            let (p, dp, _) = normalized_hermite(n, *xi);
            *xi -= p / dp;
        }
        let (_, _, sumsq) = normalized_hermite(n, *xi);
        *wi = 1.0 / sumsq;
    }
    // symmetrize to remove rounding asymmetry
    for i in 0..n / 2 {
        let a = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -a;
        x[n - 1 - i] = a;
        let b = 0.5 * (w[i] + w[n - 1 - i]);
        w[i] = b;
        w[n - 1 - i] = b;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (x, w)
}

/// Orthonormal probabilists' Hermite `φ_n(x)`, its derivative, and
/// `Σ_{j<n} φ_j(x)²`.
fn normalized_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    let mut sumsq = 1.0 + x * x;
    if n == 1 {
        return (p1, 1.0, 1.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = (x * p1 - (jf - 1.0).sqrt() * p0) / jf.sqrt();
        p0 = p1;
        p1 = p2;
        if j < n {
            sumsq += p1 * p1;
        }
    }
    // φ_n' = √n φ_{n-1}
    (p1, (n as f64).sqrt() * p0, sumsq)
}

impl QuadratureRule {
    /// Tensor product of `order`-point Hermite rules, pruned below
    /// [`PRUNE_WEIGHT`] and renormalized.
    pub fn tensor_hermite(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::Argument("tensor rule needs dim, order >= 1".into()));
        }
        let total = (order as u128).pow(dim as u32);
        if total > 50_000_000 {
            return Err(Error::Argument(format!(
                "tensor rule with {order}^{dim} nodes is too large"
            )));
        }
        let (x, w) = hermite_rule_1d(order);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut digits = vec![0usize; dim];
        for _ in 0..total {
            let wt: f64 = digits.iter().map(|&d| w[d]).product();
            if wt >= PRUNE_WEIGHT {
                points.extend(digits.iter().map(|&d| x[d]));
                weights.push(wt);
            }
            for d in digits.iter_mut() {
                *d += 1;
                if *d < order {
                    break;
                }
                *d = 0;
            }
        }
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= sum);
        Ok(QuadratureRule {
            kind: RuleKind::TensorHermite,
            dim,
            seed: 0,
            order,
            points,
            weights,
        })
    }

    /// Randomly shifted Halton points pushed through the normal quantile.
    pub fn quasi_random(dim: usize, count: usize, seed: u64) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(Error::Argument("quasi-random rule needs dim, count >= 1".into()));
        }
        let primes = first_primes(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let normal = Normal::standard();
        let mut points = Vec::with_capacity(dim * count);
        for i in 0..count {
            for (j, &p) in primes.iter().enumerate() {
                let u = (radical_inverse(i as u64 + 1, p) + shift[j]).fract();
                let u = u.clamp(1e-300, 1.0 - 1e-16);
                points.push(normal.inverse_cdf(u));
            }
        }
        Ok(QuadratureRule {
            kind: RuleKind::QuasiRandom,
            dim,
            seed,
            order: count,
            points,
            weights: vec![1.0 / count as f64; count],
        })
    }

    pub fn pseudo_random(dim: usize, count: usize, seed: u64) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(Error::Argument("pseudo-random rule needs dim, count >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..dim * count).map(|_| rng.sample(StandardNormal)).collect();
        Ok(QuadratureRule {
            kind: RuleKind::PseudoRandom,
            dim,
            seed,
            order: count,
            points,
            weights: vec![1.0 / count as f64; count],
        })
    }

    /// 24-point tensor Hermite up to dimension 4, 2¹⁶ quasi-random points above.
    pub fn default_for(dim: usize, seed: u64) -> Result<Self> {
        if dim <= 4 {
            QuadratureRule::tensor_hermite(dim, 24)
        } else {
            QuadratureRule::quasi_random(dim, 1 << 16, seed)
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn is_monte_carlo(&self) -> bool {
        self.kind != RuleKind::TensorHermite
    }

    pub fn descriptor(&self) -> RuleDescriptor {
        RuleDescriptor {
            kind: self.kind,
            dim: self.dim,
            order: self.order,
            count: self.len(),
            seed: self.seed,
        }
    }

    /// `max |E[z zᵀ] − I|` under the rule.
    pub fn second_moment_defect(&self) -> f64 {
        let m = self.dim;
        let acc = ordered_reduce(
            self.len(),
            || vec![0.0; m * m],
            |acc, i| {
                let z = self.point(i);
                let w = self.weight(i);
                for a in 0..m {
                    for b in 0..m {
                        acc[a * m + b] += w * z[a] * z[b];
                    }
                }
            },
            add_into,
        );
        let mut err: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                let target = if a == b { 1.0 } else { 0.0 };
                err = err.max((acc[a * m + b] - target).abs());
            }
        }
        err
    }

    /// Tolerance on [`QuadratureRule::second_moment_defect`] appropriate to the kind.
    pub fn moment_tolerance(&self) -> f64 {
        if self.is_monte_carlo() {
            3.0 / (self.len() as f64).sqrt()
        } else {
            1e-10
        }
    }
}

/// Elementwise `acc += other`.
pub fn add_into(acc: &mut Vec<f64>, other: Vec<f64>) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Folds `body` over `0..n` in fixed chunks of [`CHUNK`] indices in parallel,
/// then combines the per-chunk accumulators sequentially in index order.
/// The result is bit-identical for any thread count.
pub fn ordered_reduce<A, I, F, C>(n: usize, init: I, body: F, combine: C) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    C: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                body(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        combine(&mut total, p);
    }
    total
}

/// Fallible variant of [`ordered_reduce`]; the error of the lowest failing
/// chunk is returned.
pub fn try_ordered_reduce<A, I, F, C>(n: usize, init: I, body: F, combine: C) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
    C: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Result<A>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                body(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for p in partials {
        combine(&mut total, p?);
    }
    Ok(total)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if (2..c).take_while(|d| d * d <= c).all(|d| c % d != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}
