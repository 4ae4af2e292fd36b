//! Latent-conditioned reward decoder and the Bradley-Terry preference probability.
//!
//! Three conditioning modes: FiLM modulation `γ(z) ⊙ e + β(z)` of the input
//! embedding with `γ = 1 + Δγ`, plain concatenation `[e; z]`, and none. In
//! every mode the reward head is a one-hidden-layer tanh MLP, and every mode
//! starts latent-blind: the FiLM heads and the latent rows of the concat input
//! layer are zero at init.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::numcore::{log_sigmoid, sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::stream;
use crate::synthpref::PreferencePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Film,
    Concat,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            latent_dim: 16,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub mode: Conditioning,
    gamma: Linear,
    beta: Linear,
    l1: Linear,
    l2: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, mode: Conditioning, seed: u64) -> Result<Self> {
        if cfg.embedding_dim == 0 || cfg.hidden == 0 || cfg.latent_dim == 0 {
            return Err(Error::config("decoder dimensions must be positive"));
        }
        let mut rng = stream(seed, "init/decoder", 0);
        let (de, d, h) = (cfg.embedding_dim, cfg.latent_dim, cfg.hidden);
        let gamma = Linear::new(store, "dec.film_gamma", d, de, true, Init::Zeros, &mut rng);
        let beta = Linear::new(store, "dec.film_beta", d, de, true, Init::Zeros, &mut rng);
        let mut l1 = Linear::new(store, "dec.l1", de, h, true, Init::Scaled(1.0), &mut rng);
        if mode == Conditioning::Concat {
            // Latent rows appended after the embedding rows, zero at init.
            let mut data = store.value(l1.w).data().to_vec();
            data.extend(std::iter::repeat(0.0).take(d * h));
            store.replace(l1.w, Tensor::matrix(de + d, h, data)?);
            l1.fan_in = de + d;
        }
        let l2 = Linear::new(store, "dec.l2", h, 1, true, Init::Scaled(1.0), &mut rng);
        Ok(Self {
            cfg,
            mode,
            gamma,
            beta,
            l1,
            l2,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if self.mode == Conditioning::Film {
            out.extend(self.gamma.params());
            out.extend(self.beta.params());
        }
        out.extend(self.l1.params());
        out.extend(self.l2.params());
        out
    }

    pub fn film_params(&self) -> Vec<ParamId> {
        self.gamma.params().into_iter().chain(self.beta.params()).collect()
    }

    /// Modulated embedding rows. `z` must have one row per row of `e`.
    pub fn modulate(&self, g: &mut Graph, store: &ParamStore, e: Var, z: Option<Var>) -> Result<Var> {
        match (self.mode, z) {
            (Conditioning::None, _) => Ok(e),
            (_, None) => Err(Error::config(format!(
                "{:?} conditioning needs a latent",
                self.mode
            ))),
            (Conditioning::Concat, Some(z)) => g.concat_cols(e, z),
            (Conditioning::Film, Some(z)) => {
                let dg = self.gamma.forward(g, store, z)?;
                let gamma = g.add_scalar(dg, 1.0)?;
                let shift = self.beta.forward(g, store, z)?;
                let scaled = g.mul(gamma, e)?;
                g.add(scaled, shift)
            }
        }
    }

    /// Rewards `[rows, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var, z: Option<Var>) -> Result<Var> {
        let x = self.modulate(g, store, e, z)?;
        let h = self.l1.forward(g, store, x)?;
        let h = g.tanh(h)?;
        self.l2.forward(g, store, h)
    }

    fn point_graph(&self, g: &mut Graph, e: &[f64], z: Option<&[f64]>) -> (Var, Option<Var>) {
        let ev = g.constant(Tensor::row(e.to_vec()));
        let zv = z.map(|z| g.constant(Tensor::row(z.to_vec())));
        (ev, zv)
    }

    pub fn modulate_point(&self, store: &ParamStore, e: &[f64], z: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (ev, zv) = self.point_graph(&mut g, e, z);
        let out = self.modulate(&mut g, store, ev, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn reward(&self, store: &ParamStore, e: &[f64], z: Option<&[f64]>) -> Result<f64> {
        let mut g = Graph::new();
        let (ev, zv) = self.point_graph(&mut g, e, z);
        let r = self.forward(&mut g, store, ev, zv)?;
        Ok(g.scalar(r))
    }

    /// `r(e_w, z) - r(e_l, z)`.
    pub fn margin(&self, store: &ParamStore, pair: &PreferencePair, z: Option<&[f64]>) -> Result<f64> {
        Ok(self.reward(store, &pair.e_w, z)? - self.reward(store, &pair.e_l, z)?)
    }

    pub fn btl_prob(&self, store: &ParamStore, pair: &PreferencePair, z: Option<&[f64]>) -> Result<f64> {
        Ok(sigmoid(self.margin(store, pair, z)?))
    }

    /// Margins of many pairs, each under its own latent.
    pub fn margins(&self, store: &ParamStore, pairs: &[&PreferencePair], z: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let de = pairs[0].e_w.len();
        let mut rows = Vec::with_capacity(2 * pairs.len() * de);
        for p in pairs {
            rows.extend_from_slice(&p.e_w);
        }
        for p in pairs {
            rows.extend_from_slice(&p.e_l);
        }
        let e = g.constant(Tensor::matrix(2 * pairs.len(), de, rows)?);
        let zv = match z {
            Some(z) => {
                let d = z[0].len();
                let mut data = Vec::with_capacity(2 * z.len() * d);
                for _ in 0..2 {
                    for row in z {
                        data.extend_from_slice(row);
                    }
                }
                Some(g.constant(Tensor::matrix(2 * z.len(), d, data)?))
            }
            None => None,
        };
        let r = self.forward(&mut g, store, e, zv)?;
        let r = g.value(r).data();
        let n = pairs.len();
        Ok((0..n).map(|i| r[i] - r[n + i]).collect())
    }
}

/// `-log σ(margin)`.
pub fn pair_nll(margin: f64) -> f64 {
    -log_sigmoid(margin)
}
