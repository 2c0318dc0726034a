//! Gaussian rules used for expectations over (g, g0): tensor Gauss–Hermite
//! and quasi-random, with their second-moment defects.
//!
//! cargo run --release --example quadrature_rules

use erm_asymptotics::quadrature::{hermite_rule_1d, QuadratureRule};

fn main() -> erm_asymptotics::Result<()> {
    let (x, w) = hermite_rule_1d(5);
    println!("5-point Hermite nodes   {x:.6?}");
    println!("5-point Hermite weights {w:.6?}");
    for rule in [
        QuadratureRule::tensor_hermite(4, 8)?,
        QuadratureRule::tensor_hermite(4, 24)?,
        QuadratureRule::quasi_random(4, 1 << 14, 7)?,
        QuadratureRule::pseudo_random(4, 1 << 14, 7)?,
    ] {
        // E[g1^4] = 3 for a standard normal
        let m4: f64 = (0..rule.len()).map(|i| rule.weight(i) * rule.point(i)[0].powi(4)).sum();
        println!(
            "{:<15} order {:>5} nodes {:>6}: second-moment defect {:.1e} (tolerance {:.1e}), E[g^4] = {m4:.6}",
            rule.kind.to_string(),
            rule.order,
            rule.len(),
            rule.second_moment_defect(),
            rule.moment_tolerance()
        );
    }
    Ok(())
}
