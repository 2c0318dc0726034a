//! Predicted errors along a regularization path at a fixed sample ratio.
//! The test loss has an interior minimum in λ.
//!
//! cargo run --release --example lambda_sweep [alpha]

use erm_asymptotics::asymptotics::{predicted_observables, solve_critical_point, SolverOptions};
use erm_asymptotics::linmodel::{symmetric_r00, MultinomialLoss};
use erm_asymptotics::quadrature::QuadratureRule;

fn main() -> erm_asymptotics::Result<()> {
    let alpha: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3.0);
    let loss = MultinomialLoss::multinomial(2);
    let rule = QuadratureRule::tensor_hermite(4, 16)?;
    let r00 = symmetric_r00(2, 1.0);
    println!("alpha = {alpha}");
    println!("{:>9} {:>9} {:>9} {:>9} {:>9}", "lambda", "train", "test", "class", "est");
    let mut opts = SolverOptions::default();
    // continuation from large λ, where the problem is best conditioned
    for i in (0..9).rev() {
        let lambda = 10f64.powf(-2.0 + 0.5 * i as f64);
        let sol = solve_critical_point(&loss, alpha, lambda, &r00, &rule, &opts)?;
        let obs = predicted_observables(&loss, &sol, &rule)?;
        println!(
            "{lambda:>9.4} {:>9.5} {:>9.5} {:>9.5} {:>9.5}",
            obs.train_loss,
            obs.test_loss,
            obs.classification_error.unwrap_or(f64::NAN),
            obs.estimation_error
        );
        opts.init = Some((sol.kmat.clone(), sol.m.clone(), sol.s.matrix().clone()));
    }
    Ok(())
}
