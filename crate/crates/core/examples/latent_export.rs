//! Trains on pets and writes the held-out posterior means plus their 2-D PCA
//! projection to `target/latents.csv` and `target/latents_pca.csv`.

use std::path::Path;

use spl::config::ExperimentConfig;
use spl::metrics::export_latents;
use spl::synthpref::AnnotatorSample;
use spl::trainer::train;

fn main() -> spl::Result<()> {
    let cfg = ExperimentConfig::preset("pets")?;
    let ds = cfg.dataset.generate()?.dataset;
    let run = train(&ds, &cfg.train)?;
    let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
    let pca = export_latents(&run.model, &eval, Path::new("target/latents.csv"))?;
    for label in ds.type_labels() {
        let pts: Vec<&Vec<f64>> = eval
            .iter()
            .zip(&pca.coords)
            .filter(|(s, _)| s.type_label == label)
            .map(|(_, c)| c)
            .collect();
        let n = pts.len() as f64;
        let cx = pts.iter().map(|c| c[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|c| c[1]).sum::<f64>() / n;
        println!("type {label}: {} users, PCA centroid ({cx:.3}, {cy:.3})", pts.len());
    }
    println!("explained variance {:?}", pca.explained);
    Ok(())
}
