//! Spectral density for constant unit curvature, which is Marchenko–Pastur,
//! against its closed form; then the same law shifted by a ridge.
//!
//! cargo run --release --example marchenko_pastur

use erm_asymptotics::spectrum::{linear_grid, spectral_density, CurvatureMeasure};

fn main() -> erm_asymptotics::Result<()> {
    let alpha = 2.0;
    let y: f64 = 1.0 / alpha;
    let (a, b) = ((1.0 - y.sqrt()).powi(2), (1.0 + y.sqrt()).powi(2));
    let exact = |x: f64| {
        if x <= a || x >= b {
            0.0
        } else {
            ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * y * x)
        }
    };
    let cm = CurvatureMeasure::scalar(1.0)?;
    let grid = linear_grid(0.0, 3.2, 33);
    let plain = spectral_density(&cm, alpha, 0.0, &grid, 1e-3)?;
    let ridge = spectral_density(&cm, alpha, 0.5, &grid, 1e-3)?;
    println!("{:>6} {:>10} {:>10} {:>12}", "x", "density", "exact", "ridge 0.5");
    for i in 0..grid.len() {
        println!("{:>6.2} {:>10.5} {:>10.5} {:>12.5}", grid[i], plain.density[i], exact(grid[i]), ridge.density[i]);
    }
    println!("mass on grid: {:.4} (ridge {:.4})", plain.mass, ridge.mass);
    Ok(())
}
