//! Inverse autoregressive flows over the base latent.
//!
//! Each step computes `z_k = shift(z_{k-1}) + σ(z_{k-1}) ⊙ z_{k-1}` where the
//! shift and scale come from two separate single-hidden-layer masked
//! autoregressive networks. Output `j` depends only on inputs that precede `j`
//! in the step's ordering, so the Jacobian is triangular with diagonal `σ`.
//! Orderings alternate between natural and reversed from step to step.
//!
//! The two flow kinds differ only in which context each network receives:
//! the plain flow feeds the full context `c` to both, the preferential flow
//! feeds the swap-reversal part `c_d` to the shift and the swap-invariant part
//! `c_s` to the scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::stream;
use crate::vencoder::BasePosterior;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    None,
    Iaf,
    Piaf,
}

/// Which part of the context a network reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Full,
    Reversal,
    Invariant,
    Blind,
}

impl FlowKind {
    /// `(shift routing, scale routing)`.
    pub fn routing(self) -> (Routing, Routing) {
        match self {
            FlowKind::Iaf => (Routing::Full, Routing::Full),
            FlowKind::Piaf => (Routing::Reversal, Routing::Invariant),
            FlowKind::None => (Routing::Blind, Routing::Blind),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            context_dim: 8,
            hidden: 32,
            steps: 2,
            s_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSplit {
    pub c_d: Vec<f64>,
    pub c_s: Vec<f64>,
}

impl ContextSplit {
    /// The split seen by the swap annotator: `(-c_d, c_s)`.
    pub fn mirrored(&self) -> Self {
        Self {
            c_d: self.c_d.iter().map(|v| -v).collect(),
            c_s: self.c_s.clone(),
        }
    }

    pub fn full(&self) -> Vec<f64> {
        self.c_d.iter().zip(&self.c_s).map(|(a, b)| a + b).collect()
    }
}

pub fn context_decompose(c: &[f64], c_swap: &[f64]) -> Result<ContextSplit> {
    if c.len() != c_swap.len() {
        return Err(Error::config(format!(
            "context dims differ: {} vs {}",
            c.len(),
            c_swap.len()
        )));
    }
    Ok(ContextSplit {
        c_d: c.iter().zip(c_swap).map(|(a, b)| 0.5 * (a - b)).collect(),
        c_s: c.iter().zip(c_swap).map(|(a, b)| 0.5 * (a + b)).collect(),
    })
}

/// Context rows on a graph. `c` is needed by full routing, `c_d`/`c_s` by the split routings.
#[derive(Clone, Copy, Debug)]
pub struct FlowCtx {
    pub c: Option<Var>,
    pub c_d: Option<Var>,
    pub c_s: Option<Var>,
}

impl FlowCtx {
    pub fn full(c: Var) -> Self {
        Self {
            c: Some(c),
            c_d: None,
            c_s: None,
        }
    }

    /// Decomposes `c` against `c_swap` on the graph.
    pub fn split(g: &mut Graph, c: Var, c_swap: Var) -> Result<Self> {
        let diff = g.sub(c, c_swap)?;
        let sum = g.add(c, c_swap)?;
        Ok(Self {
            c: Some(c),
            c_d: Some(g.scale(diff, 0.5)?),
            c_s: Some(g.scale(sum, 0.5)?),
        })
    }

    fn pick(&self, routing: Routing) -> Result<Option<Var>> {
        let v = match routing {
            Routing::Blind => return Ok(None),
            Routing::Full => self.c,
            Routing::Reversal => self.c_d,
            Routing::Invariant => self.c_s,
        };
        v.map(Some)
            .ok_or_else(|| Error::config(format!("flow context for {routing:?} routing not supplied")))
    }
}

/// Rank (1-based) of each dimension at step `k`.
pub fn ordering(d: usize, k: usize) -> Vec<usize> {
    if k % 2 == 0 {
        (1..=d).collect()
    } else {
        (1..=d).rev().collect()
    }
}

fn made_masks(d: usize, hidden: usize, rank: &[usize]) -> (Tensor, Tensor) {
    let deg: Vec<usize> = (0..hidden).map(|h| h % d.saturating_sub(1).max(1) + 1).collect();
    let mut m_in = vec![0.0; d * hidden];
    let mut m_out = vec![0.0; hidden * d];
    for i in 0..d {
        for h in 0..hidden {
            if deg[h] >= rank[i] {
                m_in[i * hidden + h] = 1.0;
            }
        }
    }
    for h in 0..hidden {
        for j in 0..d {
            if rank[j] > deg[h] {
                m_out[h * d + j] = 1.0;
            }
        }
    }
    (
        Tensor::matrix(d, hidden, m_in).expect("sized"),
        Tensor::matrix(hidden, d, m_out).expect("sized"),
    )
}

#[derive(Clone, Debug, PartialEq)]
struct AutoregNet {
    input: Linear,
    context: Linear,
    output: Linear,
    routing: Routing,
}

impl AutoregNet {
    fn new(store: &mut ParamStore, name: &str, cfg: &FlowConfig, routing: Routing, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let (d, h, dc) = (cfg.latent_dim, cfg.hidden, cfg.context_dim.max(1));
        Self {
            input: Linear::new(store, &format!("{name}.in"), d, h, true, Init::Scaled(1.0), rng),
            context: Linear::new(store, &format!("{name}.ctx"), dc, h, false, Init::Scaled(1.0), rng),
            output: Linear::new(store, &format!("{name}.out"), h, d, true, Init::Zeros, rng),
            routing,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, ctx: &FlowCtx, masks: &(Tensor, Tensor)) -> Result<Var> {
        let mut pre = self.input.forward_masked(g, store, z, &masks.0)?;
        if let Some(c) = ctx.pick(self.routing)? {
            let cp = self.context.forward(g, store, c)?;
            pre = g.add(pre, cp)?;
        }
        let h = g.tanh(pre)?;
        self.output.forward_masked(g, store, h, &masks.1)
    }

    fn params(&self) -> Vec<ParamId> {
        [&self.input, &self.context, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep {
    shift: AutoregNet,
    scale: AutoregNet,
    rank: Vec<usize>,
    masks: (Tensor, Tensor),
}

/// Graph outputs of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub z: Var,
    pub shift: Var,
    pub sigma: Var,
    /// `[rows, 1]`.
    pub logdet: Var,
}

impl FlowStep {
    pub fn rank(&self) -> &[usize] {
        &self.rank
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, ctx: &FlowCtx, s_max: f64) -> Result<StepVars> {
        let shift = self.shift.forward(g, store, z, ctx, &self.masks)?;
        let s = self.scale.forward(g, store, z, ctx, &self.masks)?;
        let t = g.tanh(s)?;
        let log_sigma = g.scale(t, s_max)?;
        let sigma = g.exp(log_sigma)?;
        let moved = g.mul(sigma, z)?;
        let z_next = g.add(shift, moved)?;
        let logdet = g.row_sum(log_sigma)?;
        Ok(StepVars {
            z: z_next,
            shift,
            sigma,
            logdet,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    pub cfg: FlowConfig,
    pub kind: FlowKind,
    pub steps: Vec<FlowStep>,
}

/// Latent trajectory `z_0 … z_K` and `Σ_k Σ_j log σ_k^j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowedLatent {
    pub z_path: Vec<Vec<f64>>,
    pub logdet_sum: f64,
}

impl FlowedLatent {
    pub fn z0(&self) -> &[f64] {
        &self.z_path[0]
    }

    pub fn z_k(&self) -> &[f64] {
        self.z_path.last().expect("path has z0")
    }
}

/// Row-wise flow result on a graph.
#[derive(Clone, Debug)]
pub struct FlowVars {
    pub z_path: Vec<Var>,
    pub steps: Vec<StepVars>,
    /// `[rows, 1]`, or `None` when there are no steps.
    pub logdet: Option<Var>,
}

impl FlowVars {
    pub fn z_k(&self) -> Var {
        *self.z_path.last().unwrap()
    }
}

impl FlowStack {
    /// Builds `cfg.steps` identity-initialized steps. The weights depend only
    /// on the seed, not on `kind`.
    pub fn new(store: &mut ParamStore, cfg: FlowConfig, kind: FlowKind, seed: u64) -> Result<Self> {
        if cfg.latent_dim == 0 || cfg.hidden == 0 {
            return Err(Error::config("flow dimensions must be positive"));
        }
        if !(cfg.s_max > 0.0) {
            return Err(Error::config("s_max must be positive"));
        }
        let (rs, rc) = kind.routing();
        let mut rng = stream(seed, "init/flow", 0);
        let steps = (0..cfg.steps)
            .map(|k| {
                let rank = ordering(cfg.latent_dim, k);
                FlowStep {
                    shift: AutoregNet::new(store, &format!("flow{k}.shift"), &cfg, rs, &mut rng),
                    scale: AutoregNet::new(store, &format!("flow{k}.scale"), &cfg, rc, &mut rng),
                    masks: made_masks(cfg.latent_dim, cfg.hidden, &rank),
                    rank,
                }
            })
            .collect();
        Ok(Self { cfg, kind, steps })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.steps
            .iter()
            .flat_map(|s| s.shift.params().into_iter().chain(s.scale.params()))
            .collect()
    }

    /// Parameters of the shift networks only.
    pub fn shift_params(&self) -> Vec<ParamId> {
        self.steps.iter().flat_map(|s| s.shift.params()).collect()
    }

    pub fn is_active(&self) -> bool {
        self.kind != FlowKind::None && !self.steps.is_empty()
    }

    /// Changes the context routing of every step, keeping the weights.
    pub fn set_routing(&mut self, shift: Routing, scale: Routing) {
        for s in &mut self.steps {
            s.shift.routing = shift;
            s.scale.routing = scale;
        }
    }

    pub fn routing(&self) -> Option<(Routing, Routing)> {
        self.steps.first().map(|s| (s.shift.routing, s.scale.routing))
    }

    /// Applies every step (none if the kind is `None`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z0: Var, ctx: &FlowCtx) -> Result<FlowVars> {
        let mut out = FlowVars {
            z_path: vec![z0],
            steps: Vec::new(),
            logdet: None,
        };
        if !self.is_active() {
            return Ok(out);
        }
        let mut z = z0;
        for step in &self.steps {
            let sv = step.forward(g, store, z, ctx, self.cfg.s_max)?;
            out.logdet = Some(match out.logdet {
                None => sv.logdet,
                Some(acc) => g.add(acc, sv.logdet)?,
            });
            z = sv.z;
            out.z_path.push(z);
            out.steps.push(sv);
        }
        Ok(out)
    }

    fn ctx_on(&self, g: &mut Graph, split: &ContextSplit) -> FlowCtx {
        let cd = g.constant(Tensor::row(split.c_d.clone()));
        let cs = g.constant(Tensor::row(split.c_s.clone()));
        let c = g.constant(Tensor::row(split.full()));
        FlowCtx {
            c: Some(c),
            c_d: Some(cd),
            c_s: Some(cs),
        }
    }

    /// `(shift, σ)` of step `k` at a single point. Full routing sees `c_d + c_s`.
    pub fn step_nets(&self, store: &ParamStore, k: usize, z: &[f64], split: &ContextSplit) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::row(z.to_vec()));
        let ctx = self.ctx_on(&mut g, split);
        let sv = self.steps[k].forward(&mut g, store, zv, &ctx, self.cfg.s_max)?;
        Ok((g.value(sv.shift).data().to_vec(), g.value(sv.sigma).data().to_vec()))
    }

    /// Single-point flow evaluation.
    pub fn run(&self, store: &ParamStore, z0: &[f64], split: &ContextSplit) -> Result<FlowedLatent> {
        let mut path = vec![z0.to_vec()];
        let mut logdet = 0.0;
        if self.is_active() {
            for k in 0..self.steps.len() {
                let z = path.last().unwrap();
                let (shift, sigma) = self.step_nets(store, k, z, split)?;
                logdet += sigma.iter().map(|s| s.ln()).sum::<f64>();
                let next = shift.iter().zip(&sigma).zip(z).map(|((m, s), z)| m + s * z).collect();
                path.push(next);
            }
        }
        Ok(FlowedLatent {
            z_path: path,
            logdet_sum: logdet,
        })
    }

    /// Inverts step `k` by solving one coordinate at a time in the step's ordering.
    pub fn invert_step(&self, store: &ParamStore, k: usize, z_next: &[f64], split: &ContextSplit) -> Result<Vec<f64>> {
        let rank = &self.steps[k].rank;
        let mut order: Vec<usize> = (0..z_next.len()).collect();
        order.sort_by_key(|&i| rank[i]);
        let mut z = vec![0.0; z_next.len()];
        for &j in &order {
            let (shift, sigma) = self.step_nets(store, k, &z, split)?;
            z[j] = (z_next[j] - shift[j]) / sigma[j];
        }
        Ok(z)
    }

    pub fn invert(&self, store: &ParamStore, z_k: &[f64], split: &ContextSplit) -> Result<Vec<f64>> {
        let mut z = z_k.to_vec();
        if self.is_active() {
            for k in (0..self.steps.len()).rev() {
                z = self.invert_step(store, k, &z, split)?;
            }
        }
        Ok(z)
    }
}

pub fn gaussian_log_pdf(x: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((x, m), l)| -0.5 * (LN_2PI + l + (x - m) * (x - m) * (-l).exp()))
        .sum()
}

pub fn std_normal_log_pdf(x: &[f64]) -> f64 {
    x.iter().map(|x| -0.5 * (LN_2PI + x * x)).sum()
}

/// Density of the flowed latent: base log-density of `z_0` minus the log-determinant.
pub fn log_q_zk(flowed: &FlowedLatent, base: &BasePosterior) -> f64 {
    gaussian_log_pdf(flowed.z0(), &base.mu, &base.logvar) - flowed.logdet_sum
}
