//! Training losses: reconstruction, Monte-Carlo KL, swap guidance, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{log_q_zk, std_normal_log_pdf, FlowedLatent};
use crate::model::{ForwardOptions, ForwardVars, Model, Noise};
use crate::numcore::{cosine, Graph, Tensor, Var};
use crate::synthpref::AnnotatorSample;
use crate::vencoder::BasePosterior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_guide: f64,
    pub eta: f64,
    pub eps_cos: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 3e-6,
            lambda_guide: 1e-5,
            eta: 0.1,
            eps_cos: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda_guide >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::config("beta, lambda_guide and eta must be non-negative"));
        }
        if !(self.eps_cos > 0.0) {
            return Err(Error::config("eps_cos must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub guide: f64,
    pub total: f64,
    pub beta_eff: f64,
}

/// `½(1 + cos(μ, μ_swap)) + η·½(1 − cos(ℓ, ℓ_swap))`.
pub fn guidance_loss(post: &BasePosterior, post_swap: &BasePosterior, eta: f64, eps_cos: f64) -> f64 {
    0.5 * (1.0 + cosine(&post.mu, &post_swap.mu, eps_cos)) + eta * 0.5 * (1.0 - cosine(&post.logvar, &post_swap.logvar, eps_cos))
}

/// Single-draw estimate `log q(z_K) − log N(z_K; 0, I)`.
pub fn kl_mc(flowed: &FlowedLatent, base: &BasePosterior) -> f64 {
    log_q_zk(flowed, base) - std_normal_log_pdf(flowed.z_k())
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn gaussian_kl(base: &BasePosterior) -> f64 {
    0.5 * base
        .mu
        .iter()
        .zip(&base.logvar)
        .map(|(m, l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}

/// Per-row guidance values `[rows, 1]`.
pub fn guidance_rows(g: &mut Graph, mu: Var, mu_s: Var, lv: Var, lv_s: Var, eta: f64, eps: f64) -> Result<Var> {
    let cm = g.row_cosine(mu, mu_s, eps)?;
    let cm = g.add_scalar(cm, 1.0)?;
    let cm = g.scale(cm, 0.5)?;
    let cl = g.row_cosine(lv, lv_s, eps)?;
    let cl = g.scale(cl, -0.5 * eta)?;
    let cl = g.add_scalar(cl, 0.5 * eta)?;
    g.add(cm, cl)
}

/// Per-row KL estimates `[rows, 1]` from the base noise and the flowed latent.
///
/// With `z_0 = μ + σ ⊙ ε` the base log-density is `−½ Σ (log 2π + ℓ + ε²)`,
/// so the estimate reduces to `½ Σ (z_K² − ℓ − ε²) − log det`.
pub fn kl_rows(g: &mut Graph, z_k: Var, logvar: Var, eps: Option<Var>, logdet: Option<Var>) -> Result<Var> {
    let zz = g.square(z_k)?;
    let mut inner = g.sub(zz, logvar)?;
    if let Some(e) = eps {
        let ee = g.square(e)?;
        inner = g.sub(inner, ee)?;
    }
    let s = g.row_sum(inner)?;
    let mut kl = g.scale(s, 0.5)?;
    if let Some(ld) = logdet {
        kl = g.sub(kl, ld)?;
    }
    Ok(kl)
}

/// Loss graph of one batch.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
    pub guide: Option<Var>,
    pub forward: ForwardVars,
    pub beta_eff: f64,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon: g.scalar(self.recon),
            kl: self.kl.map(|v| g.scalar(v)).unwrap_or(0.0),
            guide: self.guide.map(|v| g.scalar(v)).unwrap_or(0.0),
            total: g.scalar(self.total),
            beta_eff: self.beta_eff,
        }
    }
}

/// Batch objective: means over annotators of `recon + β_eff·kl + λ·guide`,
/// with `recon` averaged over each annotator's pairs.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    samples: &[&AnnotatorSample],
    noise: Option<Noise>,
    cfg: &LossConfig,
    kl_multiplier: f64,
) -> Result<LossVars> {
    let opts = ForwardOptions { noise, swap_flow: false };
    let fw = model.forward(g, samples, &opts).map_err(|e| e.within("forward"))?;

    let recon = (|| {
        let ll = g.log_sigmoid(fw.margins)?;
        let nll = g.neg(ll)?;
        let per_user = g.segment_mean(nll, fw.pair_offsets.clone())?;
        g.mean(per_user)
    })()
    .map_err(|e| e.within("recon"))?;

    let beta_eff = cfg.beta * kl_multiplier;
    let mut total = recon;
    let mut kl = None;
    let mut guide = None;
    if let (Some(post), Some(flow)) = (fw.post, &fw.flow) {
        let k = (|| {
            let rows = kl_rows(g, flow.z_k(), post.logvar, fw.eps, flow.logdet)?;
            g.mean(rows)
        })()
        .map_err(|e| e.within("kl"))?;
        let weighted = g.scale(k, beta_eff)?;
        total = g.add(total, weighted)?;
        kl = Some(k);
        if model.comps.guide {
            let ps = fw.post_swap.expect("guide needs the swap branch");
            let gl = (|| {
                let rows = guidance_rows(g, post.mu, ps.mu, post.logvar, ps.logvar, cfg.eta, cfg.eps_cos)?;
                g.mean(rows)
            })()
            .map_err(|e| e.within("guide"))?;
            let weighted = g.scale(gl, cfg.lambda_guide)?;
            total = g.add(total, weighted)?;
            guide = Some(gl);
        }
    }
    Ok(LossVars {
        total,
        recon,
        kl,
        guide,
        forward: fw,
        beta_eff,
    })
}

/// Objective of a single annotator sample under base noise `eps` (coupled swap branch).
pub fn elbo_loss(model: &Model, sample: &AnnotatorSample, eps: &[f64], cfg: &LossConfig, kl_multiplier: f64) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let noise = Noise::coupled(Tensor::row(eps.to_vec()));
    let lv = batch_loss(&mut g, model, &[sample], Some(noise), cfg, kl_multiplier)?;
    Ok(lv.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowKind;
    use crate::model::{Components, ModelConfig, Variant};
    use crate::numcore::ParamStore;
    use crate::rewarddec::Conditioning;
    use crate::rng::{normal_vec, stream};
    use crate::synthpref::{gen_pets, PetsConfig};
    use rand::Rng;

    fn post(mu: Vec<f64>, logvar: Vec<f64>) -> BasePosterior {
        BasePosterior {
            mu,
            logvar,
            context: vec![],
        }
    }

    #[test]
    fn guidance_cases() {
        let p = post(vec![0.3, -1.0], vec![0.2, 0.5]);
        let mirrored = post(vec![-0.3, 1.0], vec![0.2, 0.5]);
        assert!(guidance_loss(&p, &mirrored, 0.1, 1e-8).abs() < 1e-7);
        assert!((guidance_loss(&p, &p, 0.1, 1e-8) - 1.0).abs() < 1e-7);
        let a = post(vec![1.0, 0.0], vec![1.0, 0.0]);
        let b = post(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!((guidance_loss(&a, &b, 0.1, 1e-8) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn guidance_graph_matches_pointwise() {
        let mut rng = stream(6, "guide", 0);
        let vals: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, 5)).collect();
        let mut g = Graph::new();
        let v: Vec<Var> = vals.iter().map(|x| g.constant(Tensor::row(x.clone()))).collect();
        let r = guidance_rows(&mut g, v[0], v[1], v[2], v[3], 0.1, 1e-8).unwrap();
        let want = guidance_loss(&post(vals[0].clone(), vals[2].clone()), &post(vals[1].clone(), vals[3].clone()), 0.1, 1e-8);
        assert!((g.scalar(r) - want).abs() < 1e-14);
    }

    #[test]
    fn kl_is_zero_mean_when_posterior_is_prior() {
        let base = post(vec![0.0; 3], vec![0.0; 3]);
        let mut rng = stream(1, "klzero", 0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = normal_vec(&mut rng, 3);
                let z = crate::vencoder::sample_z0(&base, &eps);
                kl_mc(
                    &FlowedLatent {
                        z_path: vec![z],
                        logdet_sum: 0.0,
                    },
                    &base,
                )
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12, "identical densities cancel per draw, got {mean}");
    }

    #[test]
    fn kl_matches_closed_form() {
        let mut rng = stream(2, "klcf", 0);
        for _ in 0..5 {
            let d = rng.random_range(1..5);
            let base = post(normal_vec(&mut rng, d), normal_vec(&mut rng, d).iter().map(|v| 0.5 * v).collect());
            let n = 10_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let eps = normal_vec(&mut rng, d);
                    let z = crate::vencoder::sample_z0(&base, &eps);
                    kl_mc(
                        &FlowedLatent {
                            z_path: vec![z],
                            logdet_sum: 0.0,
                        },
                        &base,
                    )
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - gaussian_kl(&base)).abs() < 3.0 * se + 1e-12);
        }
    }

    fn tiny() -> (ModelConfig, Vec<AnnotatorSample>) {
        let g = gen_pets(&PetsConfig {
            n_train: 4,
            n_eval: 2,
            pairs_per_user: 3,
            embedding_dim: 5,
            noise_sd: 0.3,
            ..PetsConfig::default()
        })
        .unwrap();
        (
            ModelConfig {
                embedding_dim: 5,
                latent_dim: 3,
                context_dim: 2,
                encoder_hidden: 6,
                flow_hidden: 5,
                decoder_hidden: 4,
                mu_init_gain: 1.0,
                logvar_init_gain: 1.0,
                ..ModelConfig::default()
            },
            g.dataset.train,
        )
    }

    #[test]
    fn zero_margins_give_ln2() {
        let (cfg, samples) = tiny();
        let mut m = Model::for_variant(cfg, Variant::Btl, 0).unwrap();
        let id = m.store.find("dec.l2.w").unwrap();
        m.store.value_mut(id).fill(0.0);
        let lb = elbo_loss(&m, &samples[0], &[0.0; 3], &LossConfig::default(), 1.0).unwrap();
        assert!((lb.recon - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn recon_is_the_pair_nll_of_each_margin() {
        let (cfg, samples) = tiny();
        let m = Model::for_variant(cfg, Variant::Btl, 0).unwrap();
        let s = &samples[0];
        let pairs: Vec<&crate::synthpref::PreferencePair> = s.pairs.iter().collect();
        let margins = m.decoder.margins(&m.store, &pairs, None).unwrap();
        let expect = margins.iter().map(|&x| crate::rewarddec::pair_nll(x)).sum::<f64>() / margins.len() as f64;
        let lb = elbo_loss(&m, s, &[0.0; 3], &LossConfig::default(), 1.0).unwrap();
        assert!((lb.recon - expect).abs() < 1e-12);
        assert!(margins.iter().any(|x| x.abs() > 1e-3));
    }

    #[test]
    fn unweighted_total_is_recon() {
        let (cfg, samples) = tiny();
        let m = Model::for_variant(cfg, Variant::Spl, 0).unwrap();
        let lc = LossConfig {
            beta: 0.0,
            lambda_guide: 0.0,
            ..LossConfig::default()
        };
        let lb = elbo_loss(&m, &samples[0], &[0.3, -0.1, 0.8], &lc, 1.0).unwrap();
        assert_eq!(lb.total, lb.recon);
    }

    #[test]
    fn identity_flow_adds_no_kl() {
        let (cfg, samples) = tiny();
        let lc = LossConfig::default();
        let eps = [0.1, 0.7, -1.2];
        let flat = Model::new(
            cfg.clone(),
            Components {
                guide: false,
                flow: FlowKind::None,
                cond: Conditioning::Film,
            },
            4,
        )
        .unwrap();
        let flowed = Model::new(
            cfg,
            Components {
                guide: false,
                flow: FlowKind::Piaf,
                cond: Conditioning::Film,
            },
            4,
        )
        .unwrap();
        let a = elbo_loss(&flat, &samples[1], &eps, &lc, 1.0).unwrap();
        let b = elbo_loss(&flowed, &samples[1], &eps, &lc, 1.0).unwrap();
        assert_eq!(a.kl, b.kl);
    }

    pub(crate) fn perturb_all(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = stream(seed, "perturb-all", 0);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (cfg, samples) = tiny();
        let lc = LossConfig {
            beta: 0.3,
            lambda_guide: 0.7,
            eta: 0.4,
            eps_cos: 1e-8,
        };
        for variant in [Variant::Spl, Variant::SplIaf, Variant::VplIaf] {
            let mut m = Model::for_variant(cfg.clone(), variant, 9).unwrap();
            perturb_all(&mut m.store, 9, 0.4);
            let batch: Vec<&AnnotatorSample> = samples.iter().take(2).collect();
            let eps = Tensor::matrix(2, 3, vec![0.2, -0.5, 1.1, 0.9, 0.0, -0.3]).unwrap();
            let loss = |m: &Model| {
                let mut g = Graph::new();
                let lv = batch_loss(&mut g, m, &batch, Some(Noise::coupled(eps.clone())), &lc, 0.5).unwrap();
                (g, lv)
            };
            let (g, lv) = loss(&m);
            let grads = g.backward(lv.total).unwrap();
            let mut st = m.store.clone();
            st.zero_grad();
            st.accumulate(&g, &grads);
            let h = 1e-5;
            for id in m.active_params() {
                let n = m.store.value(id).len();
                for k in (0..n).step_by(n / 3 + 1) {
                    let orig = m.store.value(id).data()[k];
                    m.store.value_mut(id).data_mut()[k] = orig + h;
                    let (gp, lp) = loss(&m);
                    m.store.value_mut(id).data_mut()[k] = orig - h;
                    let (gm, lm) = loss(&m);
                    m.store.value_mut(id).data_mut()[k] = orig;
                    let fd = (gp.scalar(lp.total) - gm.scalar(lm.total)) / (2.0 * h);
                    let an = st.grad(id).data()[k];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "{variant:?} {}[{k}]: fd {fd} an {an}", st.name(id));
                }
            }
        }
    }

    #[test]
    fn numeric_failure_names_the_term() {
        let (cfg, samples) = tiny();
        let mut m = Model::for_variant(cfg, Variant::Vpl, 0).unwrap();
        let id = m.store.find("enc.mu.b").unwrap();
        m.store.value_mut(id).fill(1e200);
        let r = elbo_loss(&m, &samples[0], &[0.0; 3], &LossConfig::default(), 1.0);
        match r {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "kl/square"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
