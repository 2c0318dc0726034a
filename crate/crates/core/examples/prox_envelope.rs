//! Proximal point, Moreau envelope and prox Jacobian of the multinomial loss.
//!
//! cargo run --release --example prox_envelope

use erm_asymptotics::linmodel::{EffectiveNoise, MultinomialLoss};
use erm_asymptotics::prox::{moreau_grad_check, prox};
use nalgebra::DMatrix;

fn main() -> erm_asymptotics::Result<()> {
    let loss = MultinomialLoss::multinomial(2);
    let s = EffectiveNoise::new(DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]))?;
    // observed class 1 of {0, 1, 2}
    let y = [1.0, 0.0];
    for z in [[0.0, 0.0], [2.0, -1.0], [-3.0, 4.0]] {
        let p = prox(&loss, &y, &z, &s)?;
        println!("z = {z:?}");
        println!("  x        = [{:.6}, {:.6}] after {} Newton steps", p.x[0], p.x[1], p.iterations);
        println!("  envelope = {:.6}, residual = {:.1e}", p.envelope, p.residual);
        println!("  jacobian = {:.5}", p.jac);
        println!("  envelope gradient vs differences: {:.1e}", moreau_grad_check(&loss, &y, &z, &s)?);
    }
    Ok(())
}
