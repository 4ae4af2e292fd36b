//! Runs the 18-cell guide x flow x conditioning grid on the four-type preset
//! at one seed and prints accuracy and active units per cell.

use spl::config::{ablation_grid, ExperimentConfig};
use spl::trainer::train;

fn main() -> spl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::preset("ufp4")?;
    cfg.override_seed(seed);
    let ds = cfg.dataset.generate()?.dataset;
    for comps in ablation_grid() {
        let mut t = cfg.train.clone();
        t.components = Some(comps);
        match train(&ds, &t) {
            Ok(run) => println!(
                "{:<34} acc {:.4}  AU {:.3}",
                comps.label(),
                run.report.accuracy,
                run.report.au_fraction
            ),
            Err(f) => println!("{:<34} failed: {}", comps.label(), f.error),
        }
    }
    Ok(())
}
