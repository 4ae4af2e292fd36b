//! Permutation-invariant set encoder producing the Gaussian base posterior.
//!
//! Each pair `(e_w, e_l)` goes through a two-layer tanh MLP, the pair features
//! are mean-pooled per annotator, and three linear heads emit the mean `μ`,
//! the log-variance `ℓ` (clamped) and the flow context `c`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::stream;
use crate::synthpref::AnnotatorSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub logvar_clamp: f64,
    /// Init gain of the `μ` head. Small values start the posterior near the prior mean.
    pub mu_init_gain: f64,
    pub logvar_init_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            hidden: 64,
            latent_dim: 16,
            context_dim: 8,
            logvar_clamp: 8.0,
            mu_init_gain: 0.01,
            logvar_init_gain: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub context: Vec<f64>,
}

impl BasePosterior {
    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }
}

/// Graph handles for a batch of posteriors, one row per annotator.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
    pub context: Var,
}

/// Stacked pair inputs `[e_w; e_l]` for several annotators.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x: Tensor,
    pub offsets: Rc<[usize]>,
}

impl PairBatch {
    /// Rows of `samples` in order, optionally with every pair reversed.
    pub fn build(samples: &[&AnnotatorSample], swapped: bool) -> Self {
        Self::build_branches(samples, &[swapped])
    }

    /// One segment per `(branch, sample)`, branches outermost.
    pub fn build_branches(samples: &[&AnnotatorSample], branches: &[bool]) -> Self {
        let de = samples
            .first()
            .and_then(|s| s.embedding_dim())
            .unwrap_or(0);
        let n_pairs: usize = samples.iter().map(|s| s.pairs.len()).sum();
        let mut data = Vec::with_capacity(branches.len() * n_pairs * 2 * de);
        let mut offsets = vec![0usize];
        for &swapped in branches {
            for s in samples {
                for p in &s.pairs {
                    let (a, b) = if swapped { (&p.e_l, &p.e_w) } else { (&p.e_w, &p.e_l) };
                    data.extend_from_slice(a);
                    data.extend_from_slice(b);
                }
                offsets.push(offsets.last().unwrap() + s.pairs.len());
            }
        }
        let rows = *offsets.last().unwrap();
        Self {
            x: Tensor::matrix(rows, 2 * de, data).expect("sized"),
            offsets: offsets.into(),
        }
    }

    pub fn n_segments(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    l1: Linear,
    l2: Linear,
    mu: Linear,
    logvar: Linear,
    ctx: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.embedding_dim == 0 || cfg.hidden == 0 || cfg.latent_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !(cfg.logvar_clamp > 0.0) {
            return Err(Error::config("logvar_clamp must be positive"));
        }
        let mut rng = stream(seed, "init/encoder", 0);
        let (de, h) = (cfg.embedding_dim, cfg.hidden);
        let l1 = Linear::new(store, "enc.l1", 2 * de, h, true, Init::Scaled(1.0), &mut rng);
        let l2 = Linear::new(store, "enc.l2", h, h, true, Init::Scaled(1.0), &mut rng);
        let mu = Linear::new(store, "enc.mu", h, cfg.latent_dim, true, Init::Scaled(cfg.mu_init_gain), &mut rng);
        let logvar = Linear::new(
            store,
            "enc.logvar",
            h,
            cfg.latent_dim,
            true,
            Init::Scaled(cfg.logvar_init_gain),
            &mut rng,
        );
        let ctx = Linear::new(store, "enc.ctx", h, cfg.context_dim.max(1), true, Init::Scaled(1.0), &mut rng);
        Ok(Self {
            cfg,
            l1,
            l2,
            mu,
            logvar,
            ctx,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.l1, &self.l2, &self.mu, &self.logvar, &self.ctx]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    /// Posteriors for every segment of `batch`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &PairBatch) -> Result<PosteriorVars> {
        let want = 2 * self.cfg.embedding_dim;
        if batch.x.cols() != want {
            return Err(Error::config(format!(
                "encoder expects embedding dim {}, got {}",
                self.cfg.embedding_dim,
                batch.x.cols() / 2
            )));
        }
        let x = g.constant(batch.x.clone());
        let h = self.l1.forward(g, store, x)?;
        let h = g.tanh(h)?;
        let h = self.l2.forward(g, store, h)?;
        let h = g.tanh(h)?;
        let pooled = g.segment_mean(h, batch.offsets.clone())?;
        let mu = self.mu.forward(g, store, pooled)?;
        let lv = self.logvar.forward(g, store, pooled)?;
        let lv = g.clamp(lv, -self.cfg.logvar_clamp, self.cfg.logvar_clamp)?;
        let context = self.ctx.forward(g, store, pooled)?;
        Ok(PosteriorVars { mu, logvar: lv, context })
    }

    /// Encodes several annotators in one pass.
    pub fn encode_many(&self, store: &ParamStore, samples: &[&AnnotatorSample], swapped: bool) -> Result<Vec<BasePosterior>> {
        for s in samples {
            if s.pairs.is_empty() {
                return Err(Error::config(format!("user {} has no pairs", s.user_id)));
            }
        }
        let batch = PairBatch::build(samples, swapped);
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &batch)?;
        Ok(read_posteriors(&g, v))
    }

    pub fn encode(&self, store: &ParamStore, sample: &AnnotatorSample) -> Result<BasePosterior> {
        Ok(self.encode_many(store, &[sample], false)?.remove(0))
    }

    /// The sample's posterior and that of its swap annotator, under the same parameters.
    pub fn encode_both(&self, store: &ParamStore, sample: &AnnotatorSample) -> Result<(BasePosterior, BasePosterior)> {
        let batch = PairBatch::build_branches(&[sample], &[false, true]);
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &batch)?;
        let mut posts = read_posteriors(&g, v);
        let swap = posts.pop().unwrap();
        Ok((posts.pop().unwrap(), swap))
    }
}

pub fn read_posteriors(g: &Graph, v: PosteriorVars) -> Vec<BasePosterior> {
    let (mu, lv, c) = (g.value(v.mu), g.value(v.logvar), g.value(v.context));
    (0..mu.rows())
        .map(|i| BasePosterior {
            mu: mu.row_slice(i).to_vec(),
            logvar: lv.row_slice(i).to_vec(),
            context: c.row_slice(i).to_vec(),
        })
        .collect()
}

/// Reparameterized draw `μ + exp(ℓ/2) ⊙ ε`.
pub fn sample_z0(post: &BasePosterior, eps: &[f64]) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.logvar)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect()
}

/// Graph form of [`sample_z0`] over rows.
pub fn sample_z0_graph(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let sd = g.exp(half)?;
    let noise = g.mul(sd, eps)?;
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use crate::synthpref::{gen_pets, swap, PetsConfig, PreferencePair};
    use rand::seq::SliceRandom;

    fn setup() -> (ParamStore, Encoder, Vec<AnnotatorSample>) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            EncoderConfig {
                embedding_dim: 6,
                hidden: 8,
                latent_dim: 4,
                context_dim: 3,
                mu_init_gain: 1.0,
                logvar_init_gain: 30.0,
                ..EncoderConfig::default()
            },
            11,
        )
        .unwrap();
        let g = gen_pets(&PetsConfig {
            n_train: 4,
            n_eval: 2,
            noise_sd: 0.5,
            embedding_dim: 6,
            ..PetsConfig::default()
        })
        .unwrap();
        (store, enc, g.dataset.train)
    }

    #[test]
    fn permutation_invariance_is_bit_exact() {
        let (store, enc, samples) = setup();
        let s = &samples[0];
        let base = enc.encode(&store, s).unwrap();
        let mut rng = stream(1, "perm", 0);
        for _ in 0..5 {
            let mut p = s.clone();
            p.pairs.shuffle(&mut rng);
            assert_eq!(enc.encode(&store, &p).unwrap(), base);
        }
    }

    #[test]
    fn duplication_invariance() {
        let (store, enc, samples) = setup();
        let s = &samples[1];
        let mut d = s.clone();
        d.pairs.extend(s.pairs.clone());
        let a = enc.encode(&store, s).unwrap();
        let b = enc.encode(&store, &d).unwrap();
        for (x, y) in a.mu.iter().chain(&a.logvar).zip(b.mu.iter().chain(&b.logvar)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logvar_respects_clamp() {
        let (store, enc, samples) = setup();
        for s in &samples {
            let p = enc.encode(&store, s).unwrap();
            assert!(p.logvar.iter().all(|l| l.abs() <= 8.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (store, enc, _) = setup();
        let bad = AnnotatorSample {
            user_id: "x".into(),
            type_label: "A".into(),
            pairs: vec![PreferencePair {
                e_w: vec![0.0; 5],
                e_l: vec![0.0; 5],
            }],
        };
        assert!(matches!(enc.encode(&store, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn both_branches_match_separate_calls() {
        let (store, enc, samples) = setup();
        let s = &samples[2];
        let (a, b) = enc.encode_both(&store, s).unwrap();
        assert_eq!(a, enc.encode(&store, s).unwrap());
        assert_eq!(b, enc.encode(&store, &swap(s)).unwrap());
        let (c, _) = enc.encode_both(&store, &swap(&swap(s))).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn reparameterization_cases() {
        let post = BasePosterior {
            mu: vec![0.5, -1.0, 2.0],
            logvar: vec![0.0, 0.0, 0.0],
            context: vec![],
        };
        assert_eq!(sample_z0(&post, &[0.0; 3]), post.mu);
        assert_eq!(sample_z0(&post, &[0.0, 1.0, 0.0]), vec![0.5, 0.0, 2.0]);
        let mut rng = stream(2, "mirror", 0);
        let p = BasePosterior {
            mu: normal_vec(&mut rng, 5),
            logvar: normal_vec(&mut rng, 5),
            context: vec![],
        };
        let eps = normal_vec(&mut rng, 5);
        let mirrored = BasePosterior {
            mu: p.mu.iter().map(|m| -m).collect(),
            ..p.clone()
        };
        let neg: Vec<f64> = eps.iter().map(|e| -e).collect();
        let z = sample_z0(&p, &eps);
        let zs = sample_z0(&mirrored, &neg);
        for (a, b) in z.iter().zip(&zs) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn reparameterization_gradients() {
        let mut rng = stream(3, "reparam", 0);
        let mu = normal_vec(&mut rng, 4);
        let lv = normal_vec(&mut rng, 4);
        let eps = normal_vec(&mut rng, 4);
        let mut g = Graph::new();
        let m = g.input(Tensor::row(mu.clone()));
        let l = g.input(Tensor::row(lv.clone()));
        let e = g.constant(Tensor::row(eps.clone()));
        let z = sample_z0_graph(&mut g, m, l, e).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(m).unwrap().data().iter().all(|&v| v == 1.0));
        for j in 0..4 {
            let expect = 0.5 * (0.5 * lv[j]).exp() * eps[j];
            assert!((grads.get(l).unwrap().data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_flow_through_both_branches() {
        // d/dθ of sum(μ) + sum(μ_swap), against central differences.
        let (mut store, enc, samples) = setup();
        let batch = PairBatch::build_branches(&[&samples[0]], &[false, true]);
        let loss_of = |store: &ParamStore, want_grad: bool| {
            let mut g = Graph::new();
            let v = enc.forward(&mut g, store, &batch).unwrap();
            let s1 = g.sum(v.mu).unwrap();
            let s2 = g.sum(v.context).unwrap();
            let s2 = g.scale(s2, 0.3).unwrap();
            let s = g.add(s1, s2).unwrap();
            let val = g.scalar(s);
            if want_grad {
                let gr = g.backward(s).unwrap();
                let mut st = store.clone();
                st.zero_grad();
                st.accumulate(&g, &gr);
                (val, Some(st))
            } else {
                (val, None)
            }
        };
        let (_, with) = loss_of(&store, true);
        let with = with.unwrap();
        let h = 1e-5;
        for id in enc.params() {
            for k in (0..store.value(id).len()).step_by(7) {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + h;
                let (fp, _) = loss_of(&store, false);
                store.value_mut(id).data_mut()[k] = orig - h;
                let (fm, _) = loss_of(&store, false);
                store.value_mut(id).data_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = with.grad(id).data()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{}[{k}]: {fd} vs {an}", store.name(id));
            }
        }
    }
}
