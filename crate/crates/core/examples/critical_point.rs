//! Solves the critical-point system for three-class multinomial regression
//! and checks it against the saddle formulation.
//!
//! cargo run --release --example critical_point

use erm_asymptotics::asymptotics::{
    exchange_symmetry_defect, predicted_observables, saddle_solve, solve_critical_point, SolverOptions,
};
use erm_asymptotics::linmodel::{symmetric_r00, MultinomialLoss};
use erm_asymptotics::quadrature::QuadratureRule;

fn main() -> erm_asymptotics::Result<()> {
    let loss = MultinomialLoss::multinomial(2);
    let rule = QuadratureRule::tensor_hermite(4, 24)?;
    let r00 = symmetric_r00(2, 1.0);
    let (alpha, lambda) = (3.0, 0.1);

    let sol = solve_critical_point(&loss, alpha, lambda, &r00, &rule, &SolverOptions::default())?;
    println!("converged = {} after {} iterations", sol.converged, sol.iterations);
    println!("residuals = {:.2e}, {:.2e}", sol.residual1, sol.residual2);
    println!("R11 = {:.6}R10 = {:.6}S = {:.6}", sol.r.r11, sol.r.r10, sol.s.matrix());
    println!("exchange symmetry defect = {:.1e}", exchange_symmetry_defect(&sol));

    let obs = predicted_observables(&loss, &sol, &rule)?;
    println!("train loss {:.5}", obs.train_loss);
    println!("test loss  {:.5}", obs.test_loss);
    println!("class err  {:.5}", obs.classification_error.unwrap_or(f64::NAN));
    println!("est error  {:.5}", obs.estimation_error);

    let sp = saddle_solve(&loss, alpha, lambda, &r00, &rule)?;
    println!(
        "saddle: value {:.8}, |K diff| {:.1e}, |M diff| {:.1e}",
        sp.value,
        (&sp.kmat - &sol.kmat).amax(),
        (&sp.m - &sol.m).amax()
    );
    Ok(())
}
