//! The assembled preference model: encoder, flow and decoder, wired per variant.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{FlowConfig, FlowCtx, FlowKind, FlowStack, FlowVars};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rewarddec::{Conditioning, Decoder, DecoderConfig};
use crate::synthpref::AnnotatorSample;
use crate::vencoder::{sample_z0_graph, Encoder, EncoderConfig, PairBatch, PosteriorVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Btl,
    Vpl,
    VplIaf,
    SplIaf,
    Spl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Btl, Variant::Vpl, Variant::VplIaf, Variant::SplIaf, Variant::Spl];

    pub fn components(self) -> Components {
        let (guide, flow, cond) = match self {
            Variant::Btl => (false, FlowKind::None, Conditioning::None),
            Variant::Vpl => (false, FlowKind::None, Conditioning::Concat),
            Variant::VplIaf => (false, FlowKind::Iaf, Conditioning::Concat),
            Variant::SplIaf => (true, FlowKind::Iaf, Conditioning::Film),
            Variant::Spl => (true, FlowKind::Piaf, Conditioning::Film),
        };
        Components { guide, flow, cond }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Btl => "btl",
            Variant::Vpl => "vpl",
            Variant::VplIaf => "vpl_iaf",
            Variant::SplIaf => "spl_iaf",
            Variant::Spl => "spl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

/// Which parts of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub guide: bool,
    pub flow: FlowKind,
    pub cond: Conditioning,
}

impl Components {
    /// The encoder runs unless nothing would consume its output.
    pub fn uses_encoder(&self) -> bool {
        self.guide || self.flow != FlowKind::None || self.cond != Conditioning::None
    }

    /// The swap branch is needed for the guidance loss and for context splitting.
    pub fn uses_swap_branch(&self) -> bool {
        self.guide || self.flow == FlowKind::Piaf
    }

    pub fn label(&self) -> String {
        let flow = match self.flow {
            FlowKind::None => "none",
            FlowKind::Iaf => "iaf",
            FlowKind::Piaf => "piaf",
        };
        let cond = match self.cond {
            Conditioning::Film => "film",
            Conditioning::Concat => "concat",
            Conditioning::None => "none",
        };
        format!("guide={}/flow={flow}/cond={cond}", if self.guide { "on" } else { "off" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub flow_hidden: usize,
    pub decoder_hidden: usize,
    pub flow_steps: usize,
    pub s_max: f64,
    pub logvar_clamp: f64,
    pub mu_init_gain: f64,
    pub logvar_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            latent_dim: 16,
            context_dim: 8,
            encoder_hidden: 64,
            flow_hidden: 32,
            decoder_hidden: 64,
            flow_steps: 2,
            s_max: 2.0,
            logvar_clamp: 8.0,
            mu_init_gain: 0.01,
            logvar_init_gain: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub comps: Components,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub flow: FlowStack,
    pub decoder: Decoder,
}

/// Base noise for one forward pass, one row per annotator.
#[derive(Clone, Debug)]
pub struct Noise {
    pub eps: Tensor,
    /// Noise of the swap branch; `None` means opposite coupling (`-eps`).
    pub eps_swap: Option<Tensor>,
}

impl Noise {
    pub fn coupled(eps: Tensor) -> Self {
        Self { eps, eps_swap: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// `None` evaluates at the posterior mean.
    pub noise: Option<Noise>,
    /// Also push the swap branch through the flow.
    pub swap_flow: bool,
}

/// Every graph quantity of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub post: Option<PosteriorVars>,
    pub post_swap: Option<PosteriorVars>,
    pub ctx: Option<FlowCtx>,
    pub flow: Option<FlowVars>,
    pub flow_swap: Option<FlowVars>,
    pub eps: Option<Var>,
    /// `[pairs, 1]`.
    pub margins: Var,
    pub pair_offsets: Rc<[usize]>,
    pub n_samples: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, comps: Components, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                embedding_dim: cfg.embedding_dim,
                hidden: cfg.encoder_hidden,
                latent_dim: cfg.latent_dim,
                context_dim: cfg.context_dim,
                logvar_clamp: cfg.logvar_clamp,
                mu_init_gain: cfg.mu_init_gain,
                logvar_init_gain: cfg.logvar_init_gain,
            },
            seed,
        )?;
        let flow = FlowStack::new(
            &mut store,
            FlowConfig {
                latent_dim: cfg.latent_dim,
                context_dim: cfg.context_dim,
                hidden: cfg.flow_hidden,
                steps: cfg.flow_steps,
                s_max: cfg.s_max,
            },
            comps.flow,
            seed,
        )?;
        let decoder = Decoder::new(
            &mut store,
            DecoderConfig {
                embedding_dim: cfg.embedding_dim,
                latent_dim: cfg.latent_dim,
                hidden: cfg.decoder_hidden,
            },
            comps.cond,
            seed,
        )?;
        Ok(Self {
            cfg,
            comps,
            store,
            encoder,
            flow,
            decoder,
        })
    }

    pub fn for_variant(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        Self::new(cfg, variant.components(), seed)
    }

    /// Parameters the active components can reach.
    pub fn active_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if self.comps.uses_encoder() {
            out.extend(self.encoder.params());
        }
        if self.flow.is_active() {
            out.extend(self.flow.params());
        }
        out.extend(self.decoder.params());
        out
    }

    /// Batched forward pass over whole annotator samples.
    pub fn forward(&self, g: &mut Graph, samples: &[&AnnotatorSample], opts: &ForwardOptions) -> Result<ForwardVars> {
        if samples.is_empty() {
            return Err(Error::NoSamples);
        }
        let de = self.cfg.embedding_dim;
        for s in samples {
            if s.pairs.is_empty() {
                return Err(Error::config(format!("user {} has no pairs", s.user_id)));
            }
            if s.embedding_dim() != Some(de) {
                return Err(Error::config(format!(
                    "user {}: embedding dim {:?}, model expects {de}",
                    s.user_id,
                    s.embedding_dim()
                )));
            }
        }
        let b = samples.len();
        let d = self.cfg.latent_dim;
        let mut out = ForwardVars {
            post: None,
            post_swap: None,
            ctx: None,
            flow: None,
            flow_swap: None,
            eps: None,
            margins: g.constant(Tensor::zeros(&[1, 1])),
            pair_offsets: Rc::from(vec![0usize]),
            n_samples: b,
        };

        let mut z_k = None;
        if self.comps.uses_encoder() {
            let swap = self.comps.uses_swap_branch() || opts.swap_flow;
            let branches: &[bool] = if swap { &[false, true] } else { &[false] };
            let batch = PairBatch::build_branches(samples, branches);
            let all = self.encoder.forward(g, &self.store, &batch)?;
            let (post, post_swap) = if swap {
                let first: Rc<[usize]> = (0..b).collect();
                let second: Rc<[usize]> = (b..2 * b).collect();
                let pick = |g: &mut Graph, idx: &Rc<[usize]>| -> Result<PosteriorVars> {
                    Ok(PosteriorVars {
                        mu: g.gather_rows(all.mu, idx.clone())?,
                        logvar: g.gather_rows(all.logvar, idx.clone())?,
                        context: g.gather_rows(all.context, idx.clone())?,
                    })
                };
                (pick(g, &first)?, Some(pick(g, &second)?))
            } else {
                (all, None)
            };
            let eps = match &opts.noise {
                Some(n) => {
                    if n.eps.rows() != b || n.eps.cols() != d {
                        return Err(Error::config(format!(
                            "noise shape {:?}, expected [{b}, {d}]",
                            n.eps.shape()
                        )));
                    }
                    Some(g.constant(n.eps.clone()))
                }
                None => None,
            };
            let z0 = match eps {
                Some(e) => sample_z0_graph(g, post.mu, post.logvar, e)?,
                None => post.mu,
            };
            let ctx = match (self.comps.flow, post_swap) {
                (FlowKind::Piaf, Some(ps)) => FlowCtx::split(g, post.context, ps.context)?,
                (_, Some(ps)) if opts.swap_flow => FlowCtx::split(g, post.context, ps.context)?,
                _ => FlowCtx::full(post.context),
            };
            let flow = self.flow.forward(g, &self.store, z0, &ctx)?;
            z_k = Some(flow.z_k());

            if opts.swap_flow {
                let ps = post_swap.expect("swap branch encoded");
                let eps_s = match &opts.noise {
                    Some(Noise { eps_swap: Some(es), .. }) => Some(g.constant(es.clone())),
                    Some(_) => Some(g.neg(eps.unwrap())?),
                    None => None,
                };
                let z0s = match eps_s {
                    Some(e) => sample_z0_graph(g, ps.mu, ps.logvar, e)?,
                    None => ps.mu,
                };
                let sctx = FlowCtx {
                    c: Some(ps.context),
                    c_d: match ctx.c_d {
                        Some(cd) => Some(g.neg(cd)?),
                        None => None,
                    },
                    c_s: ctx.c_s,
                };
                out.flow_swap = Some(self.flow.forward(g, &self.store, z0s, &sctx)?);
            }
            out.post = Some(post);
            out.post_swap = post_swap;
            out.ctx = Some(ctx);
            out.flow = Some(flow);
            out.eps = eps;
        }

        let (margins, offsets) = self.pair_margins(g, samples, z_k)?;
        out.margins = margins;
        out.pair_offsets = offsets;
        Ok(out)
    }

    /// Margins `[pairs, 1]` of every pair in `samples` when annotator `i`
    /// uses latent row `i` of `z` (ignored by a latent-blind decoder), plus
    /// per-annotator pair offsets.
    pub fn pair_margins(&self, g: &mut Graph, samples: &[&AnnotatorSample], z: Option<Var>) -> Result<(Var, Rc<[usize]>)> {
        let de = self.cfg.embedding_dim;
        // Rewards for [all winners; all losers], each under its annotator's latent.
        let n_pairs: usize = samples.iter().map(|s| s.pairs.len()).sum();
        let mut rows = Vec::with_capacity(2 * n_pairs * de);
        let mut owner = Vec::with_capacity(2 * n_pairs);
        let mut offsets = vec![0usize];
        for (i, s) in samples.iter().enumerate() {
            for p in &s.pairs {
                rows.extend_from_slice(&p.e_w);
                owner.push(i);
            }
            offsets.push(offsets.last().unwrap() + s.pairs.len());
        }
        for (i, s) in samples.iter().enumerate() {
            for p in &s.pairs {
                rows.extend_from_slice(&p.e_l);
                owner.push(i);
            }
        }
        let e = g.constant(Tensor::matrix(2 * n_pairs, de, rows)?);
        let z_rows = match (self.comps.cond, z) {
            (Conditioning::None, _) | (_, None) => None,
            (_, Some(z)) => Some(g.gather_rows(z, owner.into())?),
        };
        let r = self.decoder.forward(g, &self.store, e, z_rows)?;
        let rw = g.gather_rows(r, (0..n_pairs).collect())?;
        let rl = g.gather_rows(r, (n_pairs..2 * n_pairs).collect())?;
        Ok((g.sub(rw, rl)?, offsets.into()))
    }
}
