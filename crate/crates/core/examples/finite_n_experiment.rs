//! Finite-n ERM trials next to the asymptotic prediction.
//!
//! cargo run --release --example finite_n_experiment

use erm_asymptotics::asymptotics::{predicted_observables, solve_critical_point, SolverOptions};
use erm_asymptotics::linmodel::{symmetric_r00, MultinomialLoss};
use erm_asymptotics::quadrature::QuadratureRule;
use erm_asymptotics::simulator::{aggregate, run_experiment, ExperimentConfig};

fn main() -> erm_asymptotics::Result<()> {
    let (alpha, lambda, d) = (5.0, 0.1, 100);
    let r00 = symmetric_r00(2, 1.0);
    let loss = MultinomialLoss::multinomial(2);
    let rule = QuadratureRule::tensor_hermite(4, 16)?;
    let sol = solve_critical_point(&loss, alpha, lambda, &r00, &rule, &SolverOptions::default())?;
    let th = predicted_observables(&loss, &sol, &rule)?;

    let cfg = ExperimentConfig::new((alpha * d as f64) as usize, d, lambda, r00, 20, 1);
    let outcomes = run_experiment(&cfg)?;
    let metrics: Vec<_> = outcomes.iter().filter_map(|o| o.metrics().cloned()).collect();
    let s = aggregate(&metrics, 0.01)?;
    let class = s.class_error.as_ref().map_or(f64::NAN, |c| c.mean);
    println!("{:<12} {:>10} {:>18}", "", "theory", "simulation");
    println!("{:<12} {:>10.5} {:>10.5} ± {:.4}", "train loss", th.train_loss, s.train_loss.mean, s.train_loss.std);
    println!("{:<12} {:>10.5} {:>10.5} ± {:.4}", "test loss", th.test_loss, s.test_loss.mean, s.test_loss.std);
    println!("{:<12} {:>10.5} {:>10.5}", "class error", th.classification_error.unwrap_or(f64::NAN), class);
    println!("{:<12} {:>10.5} {:>10.5} ± {:.4}", "est error", th.estimation_error, s.est_error.mean, s.est_error.std);
    Ok(())
}
