//! Compares reverse-mode gradients of a small model loss against central
//! differences, one line per parameter tensor.

use spl::model::{Model, ModelConfig, Noise, Variant};
use spl::numcore::{Graph, Tensor};
use spl::objective::{batch_loss, LossConfig};
use spl::synthpref::{gen_pets, AnnotatorSample, PetsConfig};

fn main() -> spl::Result<()> {
    let ds = gen_pets(&PetsConfig {
        n_train: 4,
        n_eval: 2,
        pairs_per_user: 4,
        embedding_dim: 6,
        noise_sd: 0.2,
        ..PetsConfig::default()
    })?
    .dataset;
    let cfg = ModelConfig {
        embedding_dim: 6,
        latent_dim: 3,
        context_dim: 2,
        encoder_hidden: 8,
        flow_hidden: 6,
        decoder_hidden: 8,
        mu_init_gain: 1.0,
        logvar_init_gain: 1.0,
        ..ModelConfig::default()
    };
    let mut model = Model::for_variant(cfg, Variant::Spl, 3)?;
    // Move away from the identity init so every network has a gradient.
    for id in model.store.ids().collect::<Vec<_>>() {
        for (i, v) in model.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i as f64 * 0.7).sin());
        }
    }
    let batch: Vec<&AnnotatorSample> = ds.train.iter().take(2).collect();
    let eps = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 0.1, 0.8, -0.4])?;
    let lc = LossConfig {
        beta: 0.2,
        lambda_guide: 0.5,
        eta: 1.0,
        eps_cos: 1e-8,
    };
    let loss = |m: &Model| -> spl::Result<f64> {
        let mut g = Graph::new();
        let lv = batch_loss(&mut g, m, &batch, Some(Noise::coupled(eps.clone())), &lc, 1.0)?;
        Ok(g.scalar(lv.total))
    };

    let mut g = Graph::new();
    let lv = batch_loss(&mut g, &model, &batch, Some(Noise::coupled(eps.clone())), &lc, 1.0)?;
    let grads = g.backward(lv.total)?;
    let mut an = model.store.clone();
    an.zero_grad();
    an.accumulate(&g, &grads);

    let h = 1e-5;
    for id in model.active_params() {
        let mut worst = 0.0f64;
        for k in 0..model.store.value(id).len() {
            let orig = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + h;
            let up = loss(&model)?;
            model.store.value_mut(id).data_mut()[k] = orig - h;
            let down = loss(&model)?;
            model.store.value_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = an.grad(id).data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        println!("{:<20} max rel err {worst:.2e}", an.name(id));
    }
    Ok(())
}
