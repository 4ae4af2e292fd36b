//! Generates the pets, two-type and four-type datasets and writes them under
//! `target/datasets/`.

use std::path::Path;

use spl::synthpref::{gen_pets, gen_ufp, save_dataset, PetsConfig, UfpConfig};

fn main() -> spl::Result<()> {
    let root = Path::new("target/datasets");
    let sets = [
        ("pets", gen_pets(&PetsConfig::default())?),
        ("ufp2", gen_ufp(&UfpConfig { n_types: 2, ..UfpConfig::default() })?),
        ("ufp4", gen_ufp(&UfpConfig::default())?),
    ];
    for (name, g) in &sets {
        let ds = &g.dataset;
        let dir = root.join(name);
        save_dataset(&dir, ds)?;
        let mut per_type = vec![0usize; ds.n_types];
        for &t in &g.train_types {
            per_type[t] += 1;
        }
        println!(
            "{name}: {} train / {} eval users, {} pairs, users per type {per_type:?} -> {}",
            ds.train.len(),
            ds.eval.len(),
            ds.total_pairs(),
            dir.display()
        );
    }
    Ok(())
}
