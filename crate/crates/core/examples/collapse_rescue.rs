//! BTL, VPL and SPL on the four-type preset at one seed: VPL's posterior
//! collapses (no active units) while SPL keeps the latent in use.

use spl::config::ExperimentConfig;
use spl::model::Variant;
use spl::trainer::train;

fn main() -> spl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::preset("ufp4")?;
    cfg.override_seed(seed);
    let ds = cfg.dataset.generate()?.dataset;
    println!("{:<8} {:>8} {:>6} {:>8} {:>8}", "variant", "accuracy", "AU", "cos(mu)", "rmse_mu");
    for v in [Variant::Btl, Variant::Vpl, Variant::Spl] {
        let mut t = cfg.train.clone();
        t.variant = v;
        let r = train(&ds, &t)?.report;
        println!(
            "{:<8} {:>8.4} {:>6.3} {:>8.3} {:>8.4}",
            v.name(),
            r.accuracy,
            r.au_fraction,
            r.mean_cos_mu_swap,
            r.rmse_mu_swap
        );
    }
    Ok(())
}
