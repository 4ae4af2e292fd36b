//! Trains the full model on the pets preset and prints the evaluation report.

use spl::config::ExperimentConfig;
use spl::trainer::train;

fn main() -> spl::Result<()> {
    let cfg = ExperimentConfig::preset("pets")?;
    let ds = cfg.dataset.generate()?.dataset;
    let run = train(&ds, &cfg.train)?;
    for row in run.log.iter().step_by(20) {
        println!(
            "step {:>4}  recon {:.4}  kl {:.3}  guide {:.4}",
            row.step, row.loss.recon, row.loss.kl, row.loss.guide
        );
    }
    println!("{}", serde_json::to_string_pretty(&run.report).unwrap());
    Ok(())
}
