//! Predicted spectral density of the empirical-risk Hessian at the
//! unregularized minimizer. With more samples the bulk splits in two.
//!
//! cargo run --release --example hessian_spectrum [alpha]

use erm_asymptotics::asymptotics::{predicted_spectrum, solve_critical_point, SolverOptions};
use erm_asymptotics::linmodel::{symmetric_r00, MultinomialLoss};
use erm_asymptotics::quadrature::QuadratureRule;
use erm_asymptotics::spectrum::linear_grid;

fn main() -> erm_asymptotics::Result<()> {
    let alpha: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20.0);
    let loss = MultinomialLoss::multinomial(2);
    let rule = QuadratureRule::tensor_hermite(4, 24)?;
    let sol = solve_critical_point(&loss, alpha, 0.0, &symmetric_r00(2, 1.0), &rule, &SolverOptions::default())?;
    let grid = linear_grid(-0.05, 0.6, 131);
    let dens = predicted_spectrum(&loss, &sol, &grid, 1e-3, &QuadratureRule::tensor_hermite(4, 10)?)?;
    let top = dens.density.iter().cloned().fold(0.0, f64::max);
    for (x, v) in grid.iter().zip(&dens.density).step_by(2) {
        println!("{x:>7.3} {v:>8.4} {}", "#".repeat((60.0 * v / top) as usize));
    }
    let modes: Vec<f64> = dens.modes(0.05).iter().map(|&i| grid[i]).collect();
    println!("alpha = {alpha}: mass {:.4}, modes at {modes:.3?}", dens.mass);
    Ok(())
}
