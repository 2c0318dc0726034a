//! Matrix-weighted proximal operators.
//!
//! For `S ≻ 0` and a convex loss, `Prox(z; S) = argmin_x ½(x−z)ᵀS⁻¹(x−z) + ℓ(x, y)`
//! and the Moreau envelope is the attained minimum. The solver works in the
//! coordinates `L⁻¹(x − z)` with `S = LLᵀ`, so `S⁻¹` is never formed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{
    backward_subst_t, cholesky_in_place, forward_subst, lower_mul, lower_t_mul, norm2,
};
use crate::linmodel::{EffectiveNoise, LossModel, NoiseFactor};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone)]
pub struct ProxResult {
    pub x: Vec<f64>,
    pub envelope: f64,
    /// `(I + S ∇²ℓ(x))⁻¹`.
    pub jac: DMatrix<f64>,
    /// `‖z − x − S ∇ℓ(x)‖`.
    pub residual: f64,
    pub iterations: usize,
}

/// Outcome of one call to [`prox_in_place`].
#[derive(Debug, Clone, Copy)]
pub struct ProxStats {
    pub envelope: f64,
    pub loss: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Scratch buffers for [`prox_in_place`]. After a successful call `grad`,
/// `hess` hold `∇ℓ`, `∇²ℓ` at the returned point.
#[derive(Debug, Clone)]
pub struct ProxWorkspace {
    k: usize,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    chol: Vec<f64>,
    r: Vec<f64>,
    rhs: Vec<f64>,
    dx: Vec<f64>,
    xn: Vec<f64>,
    gn: Vec<f64>,
    hn: Vec<f64>,
    col: Vec<f64>,
}

impl ProxWorkspace {
    pub fn new(k: usize) -> Self {
        ProxWorkspace {
            k,
            grad: vec![0.0; k],
            hess: vec![0.0; k * k],
            chol: vec![0.0; k * k],
            r: vec![0.0; k],
            rhs: vec![0.0; k],
            dx: vec![0.0; k],
            xn: vec![0.0; k],
            gn: vec![0.0; k],
            hn: vec![0.0; k * k],
            col: vec![0.0; k],
        }
    }

    /// Factors `I + LᵀHL` for the current Hessian into `chol`.
    fn factor_system(&mut self, l: &[f64]) -> Result<()> {
        let k = self.k;
        // hl = H L, then chol = Lᵀ (H L) + I
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                for p in j..k {
                    s += self.hess[i * k + p] * l[p * k + j];
                }
                self.hn[i * k + j] = s;
            }
        }
        for i in 0..k {
            for j in 0..=i {
                let mut s = 0.0;
                for p in i..k {
                    s += l[p * k + i] * self.hn[p * k + j];
                }
                self.chol[i * k + j] = s + if i == j { 1.0 } else { 0.0 };
                self.chol[j * k + i] = self.chol[i * k + j];
            }
        }
        if cholesky_in_place(&mut self.chol, k) {
            Ok(())
        } else {
            Err(Error::Numerical("I + LᵀHL is not positive definite".into()))
        }
    }

    /// Writes the prox Jacobian `(I + SH)⁻¹ = L (I + LᵀHL)⁻¹ L⁻¹` (row-major)
    /// at the point of the last successful solve.
    pub fn jacobian_into(&mut self, nf: &NoiseFactor, out: &mut [f64]) -> Result<()> {
        let k = self.k;
        self.factor_system(&nf.l)?;
        for j in 0..k {
            self.col.iter_mut().for_each(|c| *c = 0.0);
            self.col[j] = 1.0;
            forward_subst(&nf.l, k, &mut self.col);
            forward_subst(&self.chol, k, &mut self.col);
            backward_subst_t(&self.chol, k, &mut self.col);
            lower_mul(&nf.l, k, &self.col, &mut self.rhs);
            for i in 0..k {
                out[i * k + j] = self.rhs[i];
            }
        }
        Ok(())
    }
}

/// Damped Newton solve of the prox subproblem. `x` holds the start point on
/// entry (use `z` for a cold start) and the minimizer on exit.
pub fn prox_in_place(
    loss: &dyn LossModel,
    y: &[f64],
    z: &[f64],
    nf: &NoiseFactor,
    x: &mut [f64],
    ws: &mut ProxWorkspace,
) -> Result<ProxStats> {
    let k = nf.k;
    let l = &nf.l;
    let tol = 1e-12 * (1.0 + norm2(z));
    let mut val = loss.eval(x, y, &mut ws.grad, &mut ws.hess);
    let mut last_residual = f64::INFINITY;
    for it in 0..=MAX_ITERATIONS {
        for i in 0..k {
            ws.r[i] = x[i] - z[i];
        }
        let residual = first_order_residual(&nf.s, k, &ws.r, &ws.grad);
        // rounding floor of x − z + S g at the current magnitudes
        let s_max = nf.s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = 64.0 * f64::EPSILON * (norm2(x) + norm2(z) + k as f64 * s_max * (1.0 + norm2(y)));
        let tol = tol.max(floor);
        forward_subst(l, k, &mut ws.r);
        let phi = 0.5 * ws.r.iter().map(|v| v * v).sum::<f64>() + val;
        if !phi.is_finite() {
            return Err(Error::Numerical("prox objective is not finite".into()));
        }
        if residual <= tol || (it > 0 && residual >= last_residual && residual <= 1e2 * tol) {
            return Ok(ProxStats {
                envelope: phi,
                loss: val,
                residual,
                iterations: it,
            });
        }
        if it == MAX_ITERATIONS {
            break;
        }
        last_residual = residual;

        lower_t_mul(l, k, &ws.grad, &mut ws.rhs);
        for i in 0..k {
            ws.rhs[i] += ws.r[i];
        }
        ws.factor_system(l)?;
        ws.dx.copy_from_slice(&ws.rhs);
        forward_subst(&ws.chol, k, &mut ws.dx);
        backward_subst_t(&ws.chol, k, &mut ws.dx);
        let decrement: f64 = ws.rhs.iter().zip(&ws.dx).map(|(a, b)| a * b).sum();
        lower_mul(l, k, &ws.dx, &mut ws.col);
        for i in 0..k {
            ws.dx[i] = -ws.col[i];
        }

        let mut t = 1.0;
        loop {
            for i in 0..k {
                ws.xn[i] = x[i] + t * ws.dx[i];
                ws.r[i] = ws.xn[i] - z[i];
            }
            let vn = loss.eval(&ws.xn, y, &mut ws.gn, &mut ws.hn);
            forward_subst(l, k, &mut ws.r);
            let phin = 0.5 * ws.r.iter().map(|v| v * v).sum::<f64>() + vn;
            let slack = 1e-14 * (1.0 + phi.abs());
            // the loss value can lose digits to cancellation; a halved
            // first-order residual on the full step is accepted regardless
            let full_ok = t == 1.0
                && (phin <= phi + slack || {
                    for i in 0..k {
                        ws.col[i] = ws.xn[i] - z[i];
                    }
                    first_order_residual(&nf.s, k, &ws.col, &ws.gn) <= 0.5 * residual
                });
            if phin <= phi - 1e-4 * t * decrement || full_ok {
                x.copy_from_slice(&ws.xn);
                std::mem::swap(&mut ws.grad, &mut ws.gn);
                std::mem::swap(&mut ws.hess, &mut ws.hn);
                val = vn;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // no further progress is representable
                if residual <= 1e2 * tol {
                    val = loss.eval(x, y, &mut ws.grad, &mut ws.hess);
                    return Ok(ProxStats {
                        envelope: phi,
                        loss: val,
                        residual,
                        iterations: it,
                    });
                }
                return Err(Error::convergence("prox line search", it, residual));
            }
        }
    }
    Err(Error::convergence("prox Newton", MAX_ITERATIONS, last_residual))
}

/// `‖(x − z) + S g‖`.
fn first_order_residual(s: &[f64], k: usize, xmz: &[f64], g: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..k {
        let mut v = xmz[i];
        for j in 0..k {
            v += s[i * k + j] * g[j];
        }
        acc += v * v;
    }
    acc.sqrt()
}

/// Proximal point, envelope and Jacobian at `z` for response `y`.
pub fn prox(loss: &dyn LossModel, y: &[f64], z: &[f64], s: &EffectiveNoise) -> Result<ProxResult> {
    let k = loss.dim();
    if z.len() != k || s.dim() != k {
        return Err(Error::Dimension(format!(
            "prox: loss dim {k}, z len {}, S dim {}",
            z.len(),
            s.dim()
        )));
    }
    let nf = s.factor();
    let mut ws = ProxWorkspace::new(k);
    let mut x = z.to_vec();
    let stats = prox_in_place(loss, y, z, &nf, &mut x, &mut ws)?;
    let mut jac = vec![0.0; k * k];
    ws.jacobian_into(&nf, &mut jac)?;
    Ok(ProxResult {
        x,
        envelope: stats.envelope,
        jac: DMatrix::from_row_slice(k, k, &jac),
        residual: stats.residual,
        iterations: stats.iterations,
    })
}

/// `(I + S ∇²ℓ(x))⁻¹` at an arbitrary point `x`.
pub fn prox_jacobian(loss: &dyn LossModel, y: &[f64], x: &[f64], s: &EffectiveNoise) -> Result<DMatrix<f64>> {
    let k = loss.dim();
    let nf = s.factor();
    let mut ws = ProxWorkspace::new(k);
    loss.eval(x, y, &mut ws.grad, &mut ws.hess);
    let mut jac = vec![0.0; k * k];
    ws.jacobian_into(&nf, &mut jac)?;
    Ok(DMatrix::from_row_slice(k, k, &jac))
}

/// Max relative error between `∇_z env = S⁻¹(z − prox(z))` and central
/// differences of the envelope.
pub fn moreau_grad_check(loss: &dyn LossModel, y: &[f64], z: &[f64], s: &EffectiveNoise) -> Result<f64> {
    let k = loss.dim();
    let p = prox(loss, y, z, s)?;
    let diff: Vec<f64> = z.iter().zip(&p.x).map(|(a, b)| a - b).collect();
    let analytic = s
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("S".into()))?
        .solve(&nalgebra::DVector::from_vec(diff));
    let scale = 1.0 + analytic.norm();
    let mut err: f64 = 0.0;
    for i in 0..k {
        let h = 1e-5 * (1.0 + z[i].abs());
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[i] += h;
        zm[i] -= h;
        let fp = prox(loss, y, &zp, s)?.envelope;
        let fm = prox(loss, y, &zm, s)?.envelope;
        err = err.max(((fp - fm) / (2.0 * h) - analytic[i]).abs() / scale);
    }
    Ok(err)
}
