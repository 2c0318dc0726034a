//! Drives the theory and simulation commands from an inline configuration,
//! then joins them, as the `erm-asym` binary does from a file.
//!
//! cargo run --release --example run_config

use erm_asymptotics::cli::{cmd_compare, cmd_simulate, cmd_theory, Table};
use erm_asymptotics::config::RunConfig;

fn main() -> erm_asymptotics::Result<()> {
    let out = std::env::temp_dir().join(format!("erm-run-{}", std::process::id()));
    let text = format!(
        r#"
k = 2
k0 = 2
r00 = [[1.0, 0.5], [0.5, 1.0]]
seed = 3

[theory]
alpha = [5.0]
lambda = [0.3, 1.0]
quadrature = {{ kind = "tensor-hermite", order = 12 }}

[simulate]
d = [60]
alpha = [5.0]
lambda = [0.3, 1.0]
trials = 5
test_size = 2000

[compare]
theory = {th:?}
simulation = {sim:?}
"#,
        th = out.join("theory.csv"),
        sim = out.join("simulation.csv"),
    );
    let cfg = RunConfig::from_toml(&text)?;
    cmd_theory(&cfg, &out)?;
    cmd_simulate(&cfg, &out)?;
    let report = cmd_compare(&cfg, &out)?;
    for f in &report.files {
        let t = Table::read(f)?;
        println!("{}", f.display());
        println!("  {}", t.header.join(", "));
        for r in &t.rows {
            println!("  {}", r.join(", "));
        }
    }
    std::fs::remove_dir_all(&out)?;
    Ok(())
}
