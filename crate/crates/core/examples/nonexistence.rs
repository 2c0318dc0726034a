//! Without regularization the minimizer fails to exist when samples are
//! few and the signal is strong: the data become separable, Newton drives
//! the norm past the threshold while the loss keeps decreasing, and the
//! asymptotic solver sees Tr R11 blow up.
//!
//! cargo run --release --example nonexistence

use erm_asymptotics::linmodel::symmetric_r00;
use erm_asymptotics::simulator::{run_trial, ExperimentConfig, TrialOutcome};

fn main() -> erm_asymptotics::Result<()> {
    let d = 100;
    for (alpha, c) in [(1.2, 50.0), (3.0, 1.0)] {
        let cfg = ExperimentConfig::new((alpha * d as f64) as usize, d, 0.0, symmetric_r00(2, c), 10, 3);
        let mut missing = 0;
        for t in 0..cfg.trials {
            match run_trial(&cfg, t)? {
                TrialOutcome::Nonexistent(r) => {
                    missing += 1;
                    if missing == 1 {
                        let norms: Vec<String> = r.norm_trace.iter().map(|v| format!("{v:.1}")).collect();
                        println!("  trial {t}: norm trace {}", norms.join(" "));
                    }
                }
                TrialOutcome::Fitted(_) => {}
            }
        }
        println!("alpha = {alpha}, r00 = {c} x symmetric_r00(2, 1): minimizer missing in {missing}/{} trials", cfg.trials);
    }
    Ok(())
}
