//! Trains a matched P-IAF / IAF pair on pets and checks the swap-error bounds
//! on 2000 draws from each.

use spl::boundlab::{build_pair, compare_models, run_lab};
use spl::config::ExperimentConfig;
use spl::synthpref::AnnotatorSample;

fn main() -> spl::Result<()> {
    let cfg = ExperimentConfig::preset("pets")?;
    let ds = cfg.dataset.generate()?.dataset;
    let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
    let mut spec = cfg.boundlab.clone();
    spec.n_draws = 2000;
    let [(piaf, _), (iaf, _)] = build_pair(&ds, &cfg.train, 0, false)?;
    for m in [&piaf, &iaf] {
        let r = run_lab(m, &eval, &spec)?;
        println!(
            "{}\n  L_r ~ {:.4}  lemma 1: {:.4} (x{} {:.4})  lemma 2: {:.4}  step lemma {:?}: {:.4}",
            r.model,
            r.l_r_hat.estimate,
            r.lemma1.rate,
            spec.inflation,
            r.lemma1.rate_inflated,
            r.lemma2.rate,
            r.steps.lemma,
            r.steps.rate
        );
    }
    let c = compare_models(&piaf, &iaf, &eval, &spec, 0)?;
    println!(
        "mean |dp|: piaf {:.5}, iaf {:.5} (iaf leak terms per step {:.4?} / {:.4?})",
        c.piaf_mean_abs_delta_p, c.iaf_mean_abs_delta_p, c.iaf_leak_mu, c.iaf_leak_sigma
    );
    Ok(())
}
