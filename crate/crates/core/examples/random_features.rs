//! Ingestion path for real data: raw rows go through a random layer and a
//! whitening step, then the full-data fit plays the role of the truth.
//! Writes a synthetic raw dataset to a temporary directory first.
//!
//! cargo run --release --example random_features

use std::io::Write;

use erm_asymptotics::linmodel::MultinomialLoss;
use erm_asymptotics::simulator::{estimate_truth, ingest_features, labels_to_responses, Activation, Dataset, NewtonOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("erm-rf-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (features, labels) = (dir.join("x.csv"), dir.join("y.csv"));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d0) = (1500, 8);
    let mut fx = std::fs::File::create(&features)?;
    let mut fy = std::fs::File::create(&labels)?;
    for _ in 0..n {
        let class = rng.random_range(0..3usize);
        let row: Vec<String> = (0..d0)
            .map(|j| {
                let shift = if j == class { 1.5 } else { 0.0 };
                format!("{:.6}", shift + rng.random::<f64>() - 0.5)
            })
            .collect();
        writeln!(fx, "{}", row.join(","))?;
        writeln!(fy, "{class}")?;
    }

    let d = 40;
    let data = ingest_features(&features, &labels, d, Activation::Tanh, 11, false)?;
    let second = data.x.transpose() * &data.x / n as f64;
    println!("features {}x{}, |E[xx^T] - I| = {:.1e}", data.x.nrows(), data.x.ncols(), (second - nalgebra::DMatrix::identity(d, d)).amax());

    let k = 2;
    let ds = Dataset {
        x: data.x.clone(),
        y: labels_to_responses(&data.labels, k)?,
        q: k,
    };
    let loss = MultinomialLoss::multinomial(k);
    let (theta0, r00) = estimate_truth(&loss, &ds, 1e-3, &NewtonOptions::default())?;
    println!("estimated truth: |Theta0| = {:.4}", theta0.norm());
    println!("R00 = {:.4}", r00);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
