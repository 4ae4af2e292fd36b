//! Monte-Carlo checks of the swap-probability error bounds.
//!
//! Every draw uses opposite coupling: the original branch starts from
//! `μ + σ ⊙ ε` and the swap branch from `μ_s − σ_s ⊙ ε`. The swap branch runs
//! the flow on the mirrored context split `(−c_d, c_s)`.
//!
//! Lipschitz constants are estimated empirically (largest finite-difference
//! ratio and largest Jacobian norm over sampled points). Such estimates are
//! lower bounds on the true constants, so the lemma checks report
//! satisfaction rates, with an inflation factor applied to the estimates.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{context_decompose, ContextSplit, FlowKind, Routing};
use crate::model::{Model, Variant};
use crate::numcore::{l2, sigmoid};
use crate::rewarddec::Conditioning;
use crate::rng::{normal_vec, stream};
use crate::synthpref::{AnnotatorSample, Dataset, PreferencePair};
use crate::trainer::{train, TrainConfig};
use crate::vencoder::{sample_z0, BasePosterior};

/// Relative slack for comparisons that are equalities in exact arithmetic.
const ROUNDING: f64 = 1e-12;

fn le(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + ROUNDING * (1.0 + rhs.abs())
}

/// Where the base posteriors of a draw come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSource {
    /// Random `(μ, ℓ)` with the swap branch set to `(−μ, ℓ)`.
    Mirrored,
    /// Independent random posteriors for both branches.
    Independent,
    /// The model's encoder applied to an annotator and its swap annotator.
    Encoder,
}

/// The log-variance bound used in the Lemma-2 constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllMax {
    /// A fixed bound, normally the encoder's log-variance clamp.
    Clamp(f64),
    /// `max(‖ℓ‖∞, ‖ℓ_s‖∞)` of each draw.
    PerDraw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSampleSpec {
    pub n_draws: usize,
    pub base: BaseSource,
    /// Half-width of the box for synthetic means.
    pub mu_box: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Half-width of the box for synthetic contexts.
    pub context_box: f64,
    /// Base noise is clipped to `[−eps_box, eps_box]`.
    pub eps_box: f64,
    pub lipschitz_pairs: usize,
    /// A Jacobian norm is taken at every `grad_every`-th sampled pair.
    pub grad_every: usize,
    /// Relative margin added around the observed latent ranges.
    pub box_margin: f64,
    pub inflation: f64,
    /// Noise draws per posterior pair for the Lemma-2 expectation.
    pub lemma2_eps_draws: usize,
    pub ell_max: EllMax,
    pub seed: u64,
}

impl Default for BoundSampleSpec {
    fn default() -> Self {
        Self {
            n_draws: 10_000,
            base: BaseSource::Encoder,
            mu_box: 3.0,
            logvar_min: -4.0,
            logvar_max: 2.0,
            context_box: 2.0,
            eps_box: 4.0,
            lipschitz_pairs: 2000,
            grad_every: 20,
            box_margin: 0.2,
            inflation: 2.0,
            lemma2_eps_draws: 64,
            ell_max: EllMax::Clamp(8.0),
            seed: 0,
        }
    }
}

impl BoundSampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 100 {
            return Err(Error::config(format!("boundlab.n_draws must be at least 100, got {}", self.n_draws)));
        }
        let reals = [
            ("mu_box", self.mu_box),
            ("context_box", self.context_box),
            ("eps_box", self.eps_box),
            ("box_margin", self.box_margin),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("boundlab.{name} must be finite and non-negative")));
            }
        }
        if !(self.logvar_min.is_finite() && self.logvar_max.is_finite() && self.logvar_min <= self.logvar_max) {
            return Err(Error::config("boundlab.logvar_min..logvar_max must be a finite range"));
        }
        if !(self.inflation.is_finite() && self.inflation >= 1.0) {
            return Err(Error::config("boundlab.inflation must be at least 1"));
        }
        if self.lipschitz_pairs == 0 || self.grad_every == 0 || self.lemma2_eps_draws == 0 {
            return Err(Error::config("boundlab sample counts must be positive"));
        }
        if let EllMax::Clamp(v) = self.ell_max {
            if !v.is_finite() {
                return Err(Error::config("boundlab.ell_max clamp must be finite"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned sampling box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    /// Smallest origin-centred box holding every row, widened by `margin`.
    /// Symmetric so that it also holds the negated rows.
    pub fn symmetric_cover<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>, margin: f64) -> Self {
        let mut m = vec![0.0f64; dim];
        for r in rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a = a.max(v.abs());
            }
        }
        let half: Vec<f64> = m.iter().map(|v| (v * (1.0 + margin)).max(1e-3)).collect();
        Self {
            lo: half.iter().map(|v| -v).collect(),
            hi: half,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }
}

/// One draw: a preference pair, both base posteriors and the base noise.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundDraw {
    pub user: usize,
    pub pair: usize,
    pub post: BasePosterior,
    pub post_swap: BasePosterior,
    pub eps: Vec<f64>,
}

/// Flow trace of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `z_0 ..= z_K`.
    pub path: Vec<Vec<f64>>,
    /// `σ_1 ..= σ_K`.
    pub sigmas: Vec<Vec<f64>>,
}

impl Trace {
    pub fn z_k(&self) -> &[f64] {
        self.path.last().expect("trace holds z_0")
    }
}

/// All δ quantities of one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawEval {
    /// `Δr(z_K)` on the original pair.
    pub margin: f64,
    /// `Δr(z_{K,swap})` on the original pair.
    pub margin_swap: f64,
    pub delta_p: f64,
    /// `|Δr(z_K) + Δr(−z_K)|`.
    pub delta_r: f64,
    /// `‖δ_{z,k}‖` for `k = 0 ..= K`.
    pub dz_norms: Vec<f64>,
    pub trace: Trace,
    pub trace_swap: Trace,
    pub split: ContextSplit,
}

impl DrawEval {
    pub fn dz_k(&self) -> f64 {
        *self.dz_norms.last().unwrap()
    }
}

fn latent<'a>(model: &Model, z: &'a [f64]) -> Option<&'a [f64]> {
    (model.comps.cond != Conditioning::None).then_some(z)
}

fn margin_at(model: &Model, pair: &PreferencePair, z: &[f64]) -> Result<f64> {
    model.decoder.margin(&model.store, pair, latent(model, z))
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `σ(Δr(z_K)) − σ(−Δr(z_{K,swap}))`, both margins on the original pair.
pub fn delta_p(model: &Model, pair: &PreferencePair, z_k: &[f64], z_k_swap: &[f64]) -> Result<f64> {
    Ok(swap_error(margin_at(model, pair, z_k)?, margin_at(model, pair, z_k_swap)?))
}

/// `σ(m) − σ(−m_swap)` for margins `m = Δr(z_K)`, `m_swap = Δr(z_{K,swap})`.
pub fn swap_error(margin: f64, margin_swap: f64) -> f64 {
    sigmoid(margin) - sigmoid(-margin_swap)
}

/// `|Δr(z) + Δr(−z)|`: how far the margin is from being odd in `z`.
pub fn delta_r(model: &Model, pair: &PreferencePair, z: &[f64]) -> Result<f64> {
    Ok((margin_at(model, pair, z)? + margin_at(model, pair, &neg(z))?).abs())
}

/// Runs the flow from `z0`, keeping every intermediate latent and scale.
pub fn trace_flow(model: &Model, z0: &[f64], split: &ContextSplit) -> Result<Trace> {
    let mut t = Trace {
        path: vec![z0.to_vec()],
        sigmas: Vec::new(),
    };
    if model.flow.is_active() {
        for k in 0..model.flow.steps.len() {
            let z = t.path.last().unwrap();
            let (shift, sigma) = model.flow.step_nets(&model.store, k, z, split)?;
            let next = shift.iter().zip(&sigma).zip(z).map(|((m, s), z)| m + s * z).collect();
            t.path.push(next);
            t.sigmas.push(sigma);
        }
    }
    Ok(t)
}

pub fn evaluate_draw(model: &Model, pair: &PreferencePair, draw: &BoundDraw) -> Result<DrawEval> {
    let z0 = sample_z0(&draw.post, &draw.eps);
    let z0_swap = sample_z0(&draw.post_swap, &neg(&draw.eps));
    let split = context_decompose(&draw.post.context, &draw.post_swap.context)?;
    let trace = trace_flow(model, &z0, &split)?;
    let trace_swap = trace_flow(model, &z0_swap, &split.mirrored())?;
    let margin = margin_at(model, pair, trace.z_k())?;
    let margin_swap = margin_at(model, pair, trace_swap.z_k())?;
    let margin_neg = margin_at(model, pair, &neg(trace.z_k()))?;
    let dz_norms = trace
        .path
        .iter()
        .zip(&trace_swap.path)
        .map(|(a, b)| l2(&add(a, b)))
        .collect();
    Ok(DrawEval {
        margin,
        margin_swap,
        delta_p: swap_error(margin, margin_swap),
        delta_r: (margin + margin_neg).abs(),
        dz_norms,
        trace,
        trace_swap,
        split,
    })
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Draws for a model. Pairs always come from `samples`; the posteriors
/// follow `spec.base`.
pub fn sample_draws(model: &Model, samples: &[&AnnotatorSample], spec: &BoundSampleSpec) -> Result<Vec<BoundDraw>> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let (d, dc) = (model.cfg.latent_dim, model.cfg.context_dim);
    let encoded = match spec.base {
        BaseSource::Encoder => Some((
            model.encoder.encode_many(&model.store, samples, false)?,
            model.encoder.encode_many(&model.store, samples, true)?,
        )),
        _ => None,
    };
    let mut out = Vec::with_capacity(spec.n_draws);
    for i in 0..spec.n_draws {
        let mut rng = stream(spec.seed, "bound/draw", i as u64);
        let user = rng.random_range(0..samples.len());
        let n_pairs = samples[user].pairs.len();
        if n_pairs == 0 {
            return Err(Error::config(format!("user {} has no pairs", samples[user].user_id)));
        }
        let pair = rng.random_range(0..n_pairs);
        let eps = normal_vec(&mut rng, d)
            .into_iter()
            .map(|e| e.clamp(-spec.eps_box, spec.eps_box))
            .collect();
        let (post, post_swap) = match &encoded {
            Some((a, b)) => (a[user].clone(), b[user].clone()),
            None => {
                let random_post = |rng: &mut ChaCha8Rng| BasePosterior {
                    mu: uniform_vec(rng, d, -spec.mu_box, spec.mu_box),
                    logvar: uniform_vec(rng, d, spec.logvar_min, spec.logvar_max),
                    context: uniform_vec(rng, dc, -spec.context_box, spec.context_box),
                };
                let post = random_post(&mut rng);
                let mut swap = random_post(&mut rng);
                if spec.base == BaseSource::Mirrored {
                    swap.mu = neg(&post.mu);
                    swap.logvar = post.logvar.clone();
                }
                (post, swap)
            }
        };
        out.push(BoundDraw {
            user,
            pair,
            post,
            post_swap,
            eps,
        });
    }
    Ok(out)
}

/// Maps `f` over `items` on scoped threads; output order matches input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    if workers <= 1 || items.len() < 64 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_draws(model: &Model, samples: &[&AnnotatorSample], draws: &[BoundDraw]) -> Result<Vec<DrawEval>> {
    par_map(draws, |d| evaluate_draw(model, &samples[d.user].pairs[d.pair], d))
}

// ---------------------------------------------------------------------------
// Lipschitz estimation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Net {
    Shift,
    Scale,
}

/// The argument that varies while the others stay fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Z,
    Cd,
    Cs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzTarget {
    /// `z ↦ Δr(z)`, maximized over pairs too.
    Reward,
    /// The shift or scale of flow step `step` (0-based) in one argument.
    Step { step: usize, net: Net, arg: Arg },
}

/// A lower bound on a Lipschitz constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub target: LipschitzTarget,
    pub estimate: f64,
    /// Largest `‖f(a) − f(b)‖ / ‖a − b‖`.
    pub ratio_max: f64,
    /// Largest spectral norm of a finite-difference Jacobian.
    pub grad_max: f64,
    pub n_pairs: usize,
}

fn spectral_norm(rows: usize, cols: usize, jac: Vec<f64>) -> f64 {
    if rows == 1 || cols == 1 {
        return l2(&jac);
    }
    let m = DMatrix::from_row_slice(rows, cols, &jac);
    m.singular_values().max()
}

/// Central-difference Jacobian norm of `f` at `x`.
fn jacobian_norm(f: &impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64]) -> Result<f64> {
    let mut cols = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-5 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let up = f(&probe)?;
        probe[j] = x[j] - h;
        let down = f(&probe)?;
        probe[j] = x[j];
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let rows = cols.first().map_or(0, |c| c.len());
    let mut jac = Vec::with_capacity(rows * x.len());
    for i in 0..rows {
        for c in &cols {
            jac.push(c[i]);
        }
    }
    Ok(spectral_norm(rows, x.len(), jac))
}

/// Lipschitz search where each sampled pair first draws a context `C`
/// (the fixed arguments) and then two points `a`, `b` to compare.
///
/// Pair `i` depends only on `(seed, tag, i)`, so a run with more pairs sees a
/// superset of the points and the estimate never decreases with `n_pairs`.
pub fn lipschitz_search<C>(
    n_pairs: usize,
    grad_every: usize,
    seed: u64,
    tag: &str,
    sample: impl Fn(&mut ChaCha8Rng) -> (C, Vec<f64>, Vec<f64>),
    f: impl Fn(&C, &[f64]) -> Result<Vec<f64>>,
) -> Result<(f64, f64)> {
    let (mut ratio_max, mut grad_max) = (0.0f64, 0.0f64);
    for i in 0..n_pairs {
        let mut rng = stream(seed, tag, i as u64);
        let (ctx, a, b) = sample(&mut rng);
        let dist = l2(&sub(&a, &b));
        if dist > 0.0 {
            let r = l2(&sub(&f(&ctx, &a)?, &f(&ctx, &b)?)) / dist;
            ratio_max = ratio_max.max(r);
        }
        if i % grad_every == 0 {
            grad_max = grad_max.max(jacobian_norm(&|x: &[f64]| f(&ctx, x), &a)?);
        }
    }
    Ok((ratio_max, grad_max))
}

/// Lipschitz estimate of a plain function over a box.
pub fn estimate_lipschitz(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    domain: &DomainBox,
    n_pairs: usize,
    grad_every: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    lipschitz_search(
        n_pairs,
        grad_every,
        seed,
        "bound/lipschitz",
        |rng| ((), domain.sample(rng), domain.sample(rng)),
        |_, x| f(x),
    )
}

/// Sampling boxes derived from the latents and contexts a model produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabBoxes {
    pub z_final: DomainBox,
    /// Box of `z_{k−1}` for step `k`, indexed from 0.
    pub z_steps: Vec<DomainBox>,
    pub c_d: DomainBox,
    pub c_s: DomainBox,
}

impl LabBoxes {
    pub fn from_evals(model: &Model, evals: &[DrawEval], margin: f64) -> Self {
        let (d, dc) = (model.cfg.latent_dim, model.cfg.context_dim);
        let both = |k: usize| {
            evals
                .iter()
                .flat_map(move |e| [e.trace.path[k].as_slice(), e.trace_swap.path[k].as_slice()])
        };
        let k_max = evals.first().map_or(0, |e| e.trace.path.len() - 1);
        Self {
            z_final: DomainBox::symmetric_cover(d, both(k_max), margin),
            z_steps: (0..k_max).map(|k| DomainBox::symmetric_cover(d, both(k), margin)).collect(),
            c_d: DomainBox::symmetric_cover(dc, evals.iter().map(|e| e.split.c_d.as_slice()), margin),
            c_s: DomainBox::symmetric_cover(dc, evals.iter().map(|e| e.split.c_s.as_slice()), margin),
        }
    }
}

struct StepPoint {
    z: Vec<f64>,
    c_d: Vec<f64>,
    c_s: Vec<f64>,
}

impl StepPoint {
    fn with(&self, arg: Arg, x: &[f64]) -> (Vec<f64>, ContextSplit) {
        let mut z = self.z.clone();
        let mut split = ContextSplit {
            c_d: self.c_d.clone(),
            c_s: self.c_s.clone(),
        };
        match arg {
            Arg::Z => z = x.to_vec(),
            Arg::Cd => split.c_d = x.to_vec(),
            Arg::Cs => split.c_s = x.to_vec(),
        }
        (z, split)
    }
}

/// Estimates the Lipschitz constant of `target` over `boxes`. Reward
/// estimates maximize over `pairs` as well.
pub fn estimate_l(
    model: &Model,
    target: LipschitzTarget,
    boxes: &LabBoxes,
    pairs: &[&PreferencePair],
    spec: &BoundSampleSpec,
) -> Result<LipschitzEstimate> {
    let (ratio_max, grad_max) = match target {
        LipschitzTarget::Reward => {
            if pairs.is_empty() {
                return Err(Error::NoSamples);
            }
            if model.comps.cond == Conditioning::None {
                (0.0, 0.0)
            } else {
                lipschitz_search(
                    spec.lipschitz_pairs,
                    spec.grad_every,
                    spec.seed,
                    "bound/lipschitz/reward",
                    |rng| {
                        let p = rng.random_range(0..pairs.len());
                        (p, boxes.z_final.sample(rng), boxes.z_final.sample(rng))
                    },
                    |&p, z| Ok(vec![margin_at(model, pairs[p], z)?]),
                )?
            }
        }
        LipschitzTarget::Step { step, net, arg } => {
            if step >= boxes.z_steps.len() || !model.flow.is_active() {
                return Err(Error::config(format!("no flow step {step} to estimate")));
            }
            let arg_box = match arg {
                Arg::Z => &boxes.z_steps[step],
                Arg::Cd => &boxes.c_d,
                Arg::Cs => &boxes.c_s,
            };
            lipschitz_search(
                spec.lipschitz_pairs,
                spec.grad_every,
                spec.seed,
                &format!("bound/lipschitz/step{step}/{net:?}/{arg:?}"),
                |rng| {
                    let pt = StepPoint {
                        z: boxes.z_steps[step].sample(rng),
                        c_d: boxes.c_d.sample(rng),
                        c_s: boxes.c_s.sample(rng),
                    };
                    (pt, arg_box.sample(rng), arg_box.sample(rng))
                },
                |pt, x| {
                    let (z, split) = pt.with(arg, x);
                    let (shift, sigma) = model.flow.step_nets(&model.store, step, &z, &split)?;
                    Ok(match net {
                        Net::Shift => shift,
                        Net::Scale => sigma,
                    })
                },
            )?
        }
    };
    Ok(LipschitzEstimate {
        target,
        estimate: ratio_max.max(grad_max),
        ratio_max,
        grad_max,
        n_pairs: spec.lipschitz_pairs,
    })
}

// ---------------------------------------------------------------------------
// Lemma checks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub n: usize,
    pub l_r: f64,
    pub inflation: f64,
    /// Fraction with `|δ_p| ≤ ¼|Δr(z_K) + Δr(z_{K,swap})|` (no Lipschitz step).
    pub rate_margin_step: f64,
    /// `|δ_p| ≤ ¼ δ_r + ¼ L_r ‖δ_{z,K}‖` at the raw estimate.
    pub rate: f64,
    /// Same with `inflation · L_r`.
    pub rate_inflated: f64,
    /// `|δ_p| ≤ ¼ δ_r + L_r ‖δ_{z,K}‖`, the variant without the second ¼.
    pub rate_loose: f64,
}

pub fn lemma1_rhs(e: &DrawEval, l_r: f64) -> f64 {
    0.25 * e.delta_r + 0.25 * l_r * e.dz_k()
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn check_lemma1(evals: &[DrawEval], l_r: f64, inflation: f64) -> Lemma1Report {
    let count = |pred: &dyn Fn(&DrawEval) -> bool| evals.iter().filter(|e| pred(e)).count();
    let n = evals.len();
    Lemma1Report {
        n,
        l_r,
        inflation,
        rate_margin_step: rate(count(&|e| le(e.delta_p.abs(), 0.25 * (e.margin + e.margin_swap).abs())), n),
        rate: rate(count(&|e| le(e.delta_p.abs(), lemma1_rhs(e, l_r))), n),
        rate_inflated: rate(count(&|e| le(e.delta_p.abs(), lemma1_rhs(e, inflation * l_r))), n),
        rate_loose: rate(count(&|e| le(e.delta_p.abs(), 0.25 * e.delta_r + l_r * e.dz_k())), n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub n: usize,
    pub eps_draws: usize,
    pub ell_max: EllMax,
    pub rate: f64,
    pub mean_lhs: f64,
    pub mean_rhs: f64,
    /// Largest `lhs / rhs` over draws with a positive right side.
    pub max_ratio: f64,
}

/// `(E‖δ_{z,0}‖, ‖μ+μ_s‖ + ½ exp(ℓ_max/2) ‖ℓ−ℓ_s‖)`, the expectation taken
/// over `eps_rows` with opposite coupling.
pub fn lemma2_sides(post: &BasePosterior, post_swap: &BasePosterior, eps_rows: &[Vec<f64>], ell_max: EllMax) -> (f64, f64) {
    let mu_sum = add(&post.mu, &post_swap.mu);
    let dsig = sub(&post.sigma(), &post_swap.sigma());
    let lhs = eps_rows
        .iter()
        .map(|eps| {
            let dz: Vec<f64> = mu_sum.iter().zip(&dsig).zip(eps).map(|((m, s), e)| m + s * e).collect();
            l2(&dz)
        })
        .sum::<f64>()
        / eps_rows.len() as f64;
    let lmax = match ell_max {
        EllMax::Clamp(v) => v,
        EllMax::PerDraw => inf_norm(&post.logvar).max(inf_norm(&post_swap.logvar)),
    };
    let rhs = l2(&mu_sum) + 0.5 * (lmax / 2.0).exp() * l2(&sub(&post.logvar, &post_swap.logvar));
    (lhs, rhs)
}

pub fn check_lemma2(pairs: &[(BasePosterior, BasePosterior)], eps_draws: usize, ell_max: EllMax, seed: u64) -> Lemma2Report {
    let sides: Vec<(f64, f64)> = pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let mut rng = stream(seed, "bound/lemma2", i as u64);
            let rows: Vec<Vec<f64>> = (0..eps_draws).map(|_| normal_vec(&mut rng, a.mu.len())).collect();
            lemma2_sides(a, b, &rows, ell_max)
        })
        .collect();
    let n = sides.len();
    let mean = |f: fn(&(f64, f64)) -> f64| if n == 0 { 0.0 } else { sides.iter().map(f).sum::<f64>() / n as f64 };
    Lemma2Report {
        n,
        eps_draws,
        ell_max,
        rate: rate(sides.iter().filter(|(l, r)| le(*l, *r)).count(), n),
        mean_lhs: mean(|s| s.0),
        mean_rhs: mean(|s| s.1),
        max_ratio: sides
            .iter()
            .filter(|(_, r)| *r > 0.0)
            .map(|(l, r)| l / r)
            .fold(0.0, f64::max),
    }
}

/// Constants of one flow step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConstants {
    /// Largest `‖σ_k‖∞` seen on either branch.
    pub rho: f64,
    pub l_mu_z: LipschitzEstimate,
    pub l_sigma_z: LipschitzEstimate,
    pub l_mu_cs: LipschitzEstimate,
    pub l_sigma_cd: LipschitzEstimate,
}

pub fn step_constants(
    model: &Model,
    evals: &[DrawEval],
    boxes: &LabBoxes,
    spec: &BoundSampleSpec,
) -> Result<Vec<StepConstants>> {
    let steps = boxes.z_steps.len();
    (0..steps)
        .map(|k| {
            let rho = evals
                .iter()
                .flat_map(|e| [inf_norm(&e.trace.sigmas[k]), inf_norm(&e.trace_swap.sigmas[k])])
                .fold(0.0, f64::max);
            let est = |net, arg| estimate_l(model, LipschitzTarget::Step { step: k, net, arg }, boxes, &[], spec);
            Ok(StepConstants {
                rho,
                l_mu_z: est(Net::Shift, Arg::Z)?,
                l_sigma_z: est(Net::Scale, Arg::Z)?,
                l_mu_cs: est(Net::Shift, Arg::Cs)?,
                l_sigma_cd: est(Net::Scale, Arg::Cd)?,
            })
        })
        .collect()
}

/// Which per-step lemma applies to the model's routing.
pub fn step_lemma(model: &Model) -> Option<u8> {
    match model.flow.is_active().then(|| model.flow.routing()).flatten() {
        Some((Routing::Reversal, Routing::Invariant)) => Some(3),
        Some(_) => Some(4),
        None => None,
    }
}

/// Both sides of the per-step mismatch recursion at step `k` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub lhs: f64,
    pub rhs: f64,
    pub reversal_violation: f64,
    pub invariant_violation: f64,
    pub leak_mu: f64,
    pub leak_sigma: f64,
}

pub fn step_terms(model: &Model, e: &DrawEval, k: usize, c: &StepConstants, inflation: f64) -> Result<StepTerms> {
    let z = &e.trace.path[k - 1];
    let zn = neg(z);
    let dz_prev = e.dz_norms[k - 1];
    let zn_norm = l2(z);
    let nets = |z: &[f64], split: &ContextSplit| model.flow.step_nets(&model.store, k - 1, z, split);
    let lemma3 = step_lemma(model) == Some(3);
    let (at, at_swap, sc, sc_swap) = if lemma3 {
        let m = e.split.mirrored();
        (e.split.clone(), m.clone(), e.split.clone(), m)
    } else {
        let zero = vec![0.0; e.split.c_d.len()];
        let only_d = ContextSplit {
            c_d: e.split.c_d.clone(),
            c_s: zero.clone(),
        };
        let only_s = ContextSplit {
            c_d: zero,
            c_s: e.split.c_s.clone(),
        };
        (only_d.clone(), only_d.mirrored(), only_s.clone(), only_s.mirrored())
    };
    let reversal_violation = l2(&add(&nets(z, &at)?.0, &nets(&zn, &at_swap)?.0));
    let invariant_violation = inf_norm(&sub(&nets(z, &sc)?.1, &nets(&zn, &sc_swap)?.1)) * zn_norm;
    let (leak_mu, leak_sigma) = if lemma3 {
        (0.0, 0.0)
    } else {
        (
            2.0 * inflation * c.l_mu_cs.estimate * l2(&e.split.c_s),
            2.0 * inflation * c.l_sigma_cd.estimate * l2(&e.split.c_d) * zn_norm,
        )
    };
    let growth = c.rho + inflation * c.l_mu_z.estimate + inflation * c.l_sigma_z.estimate * zn_norm;
    Ok(StepTerms {
        lhs: e.dz_norms[k],
        rhs: growth * dz_prev + reversal_violation + invariant_violation + leak_mu + leak_sigma,
        reversal_violation,
        invariant_violation,
        leak_mu,
        leak_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBoundReport {
    pub lemma: Option<u8>,
    pub n_checks: usize,
    pub rate: f64,
    pub max_ratio: f64,
    /// Mean leak terms per step at the raw estimates (zero for Lemma 3).
    pub mean_leak_mu: Vec<f64>,
    pub mean_leak_sigma: Vec<f64>,
}

pub fn check_steps(model: &Model, evals: &[DrawEval], consts: &[StepConstants], inflation: f64) -> Result<StepBoundReport> {
    let k_max = consts.len();
    let per_draw: Vec<Vec<(StepTerms, StepTerms)>> = par_map(evals, |e| {
        (1..=k_max)
            .map(|k| Ok((step_terms(model, e, k, &consts[k - 1], inflation)?, step_terms(model, e, k, &consts[k - 1], 1.0)?)))
            .collect()
    })?;
    let mut hits = 0;
    let mut n = 0;
    let mut max_ratio = 0.0f64;
    let mut leak_mu = vec![0.0; k_max];
    let mut leak_sigma = vec![0.0; k_max];
    for d in &per_draw {
        for (k, (t, raw)) in d.iter().enumerate() {
            n += 1;
            hits += le(t.lhs, t.rhs) as usize;
            if t.rhs > 0.0 {
                max_ratio = max_ratio.max(t.lhs / t.rhs);
            }
            leak_mu[k] += raw.leak_mu;
            leak_sigma[k] += raw.leak_sigma;
        }
    }
    let m = evals.len().max(1) as f64;
    Ok(StepBoundReport {
        lemma: step_lemma(model),
        n_checks: n,
        rate: rate(hits, n),
        max_ratio,
        mean_leak_mu: leak_mu.iter().map(|v| v / m).collect(),
        mean_leak_sigma: leak_sigma.iter().map(|v| v / m).collect(),
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Per-draw row of the optional CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub user: usize,
    pub pair: usize,
    pub delta_p: f64,
    pub delta_r: f64,
    pub dz_k: f64,
    pub lemma1_rhs: f64,
    pub lemma2_lhs: f64,
    pub lemma2_rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub model: String,
    pub flow: FlowKind,
    pub base: BaseSource,
    pub n_draws: usize,
    pub l_r_hat: LipschitzEstimate,
    pub mean_abs_delta_p: f64,
    pub max_abs_delta_p: f64,
    pub mean_delta_r: f64,
    pub mean_dz_k: f64,
    pub lemma1: Lemma1Report,
    pub lemma2: Lemma2Report,
    pub steps: StepBoundReport,
    pub step_constants: Vec<StepConstants>,
    #[serde(skip)]
    pub draws: Vec<DrawRecord>,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

/// All checks for one model.
pub fn run_lab(model: &Model, samples: &[&AnnotatorSample], spec: &BoundSampleSpec) -> Result<BoundReport> {
    spec.validate()?;
    let draws = sample_draws(model, samples, spec)?;
    let evals = evaluate_draws(model, samples, &draws)?;
    let boxes = LabBoxes::from_evals(model, &evals, spec.box_margin);
    let pairs: Vec<&PreferencePair> = samples.iter().flat_map(|s| &s.pairs).collect();
    let l_r_hat = estimate_l(model, LipschitzTarget::Reward, &boxes, &pairs, spec)?;
    let lemma1 = check_lemma1(&evals, l_r_hat.estimate, spec.inflation);
    let posts: Vec<(BasePosterior, BasePosterior)> = draws.iter().map(|d| (d.post.clone(), d.post_swap.clone())).collect();
    let lemma2 = check_lemma2(&posts, spec.lemma2_eps_draws, spec.ell_max, spec.seed);
    let step_constants = step_constants(model, &evals, &boxes, spec)?;
    let steps = check_steps(model, &evals, &step_constants, spec.inflation)?;
    let records = draws
        .iter()
        .zip(&evals)
        .enumerate()
        .map(|(i, (d, e))| {
            let mut rng = stream(spec.seed, "bound/lemma2", i as u64);
            let rows: Vec<Vec<f64>> = (0..spec.lemma2_eps_draws).map(|_| normal_vec(&mut rng, d.post.mu.len())).collect();
            let (l2l, l2r) = lemma2_sides(&d.post, &d.post_swap, &rows, spec.ell_max);
            DrawRecord {
                user: d.user,
                pair: d.pair,
                delta_p: e.delta_p,
                delta_r: e.delta_r,
                dz_k: e.dz_k(),
                lemma1_rhs: lemma1_rhs(e, l_r_hat.estimate),
                lemma2_lhs: l2l,
                lemma2_rhs: l2r,
            }
        })
        .collect();
    Ok(BoundReport {
        model: model.comps.label(),
        flow: model.comps.flow,
        base: spec.base,
        n_draws: evals.len(),
        mean_abs_delta_p: mean(evals.iter().map(|e| e.delta_p.abs())),
        max_abs_delta_p: evals.iter().map(|e| e.delta_p.abs()).fold(0.0, f64::max),
        mean_delta_r: mean(evals.iter().map(|e| e.delta_r)),
        mean_dz_k: mean(evals.iter().map(|e| e.dz_k())),
        l_r_hat,
        lemma1,
        lemma2,
        steps,
        step_constants,
        draws: records,
    })
}

pub fn write_draws_csv(path: &Path, records: &[DrawRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// P-IAF against IAF

/// Mean `|δ_p|` over every pair of every annotator, one noise draw per
/// annotator.
pub fn mean_abs_delta_p(model: &Model, samples: &[&AnnotatorSample], seed: u64) -> Result<(f64, Vec<DrawEval>)> {
    let post = model.encoder.encode_many(&model.store, samples, false)?;
    let post_swap = model.encoder.encode_many(&model.store, samples, true)?;
    let mut jobs = Vec::new();
    for (u, s) in samples.iter().enumerate() {
        let eps = normal_vec(&mut stream(seed, "bound/eval", u as u64), model.cfg.latent_dim);
        for p in 0..s.pairs.len() {
            jobs.push(BoundDraw {
                user: u,
                pair: p,
                post: post[u].clone(),
                post_swap: post_swap[u].clone(),
                eps: eps.clone(),
            });
        }
    }
    let evals = evaluate_draws(model, samples, &jobs)?;
    Ok((mean(evals.iter().map(|e| e.delta_p.abs())), evals))
}

/// Leak magnitudes `2L̂^{c_s}_μ‖c_s‖` and `2L̂^{c_d}_σ‖c_d‖‖z_{k−1}‖`
/// averaged over `evals`, one entry per step.
pub fn leak_magnitudes(model: &Model, evals: &[DrawEval], spec: &BoundSampleSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if !model.flow.is_active() {
        return Ok((Vec::new(), Vec::new()));
    }
    let boxes = LabBoxes::from_evals(model, evals, spec.box_margin);
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for k in 0..boxes.z_steps.len() {
        let est = |net, arg| estimate_l(model, LipschitzTarget::Step { step: k, net, arg }, &boxes, &[], spec);
        let l_mu = est(Net::Shift, Arg::Cs)?.estimate;
        let l_sigma = est(Net::Scale, Arg::Cd)?.estimate;
        mu.push(mean(evals.iter().map(|e| 2.0 * l_mu * l2(&e.split.c_s))));
        sigma.push(mean(evals.iter().map(|e| 2.0 * l_sigma * l2(&e.split.c_d) * l2(&e.trace.path[k]))));
    }
    Ok((mu, sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub piaf_mean_abs_delta_p: f64,
    pub iaf_mean_abs_delta_p: f64,
    pub iaf_leak_mu: Vec<f64>,
    pub iaf_leak_sigma: Vec<f64>,
    pub piaf_accuracy: Option<f64>,
    pub iaf_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub trained: bool,
    pub seeds: Vec<SeedComparison>,
    /// Seeds where P-IAF's mean `|δ_p|` is at most IAF's.
    pub piaf_not_worse: usize,
}

pub fn compare_models(piaf: &Model, iaf: &Model, samples: &[&AnnotatorSample], spec: &BoundSampleSpec, seed: u64) -> Result<SeedComparison> {
    let (p, _) = mean_abs_delta_p(piaf, samples, spec.seed)?;
    let (i, evals) = mean_abs_delta_p(iaf, samples, spec.seed)?;
    let (iaf_leak_mu, iaf_leak_sigma) = leak_magnitudes(iaf, &evals, spec)?;
    Ok(SeedComparison {
        seed,
        piaf_mean_abs_delta_p: p,
        iaf_mean_abs_delta_p: i,
        iaf_leak_mu,
        iaf_leak_sigma,
        piaf_accuracy: None,
        iaf_accuracy: None,
    })
}

/// `spl` and `spl_iaf` with matched settings for one seed, trained on `ds`
/// unless `untrained`. Returns each model with its eval accuracy when trained.
pub fn build_pair(ds: &Dataset, cfg: &TrainConfig, seed: u64, untrained: bool) -> Result<[(Model, Option<f64>); 2]> {
    let build = |variant: Variant| -> Result<(Model, Option<f64>)> {
        let mut c = cfg.clone();
        c.variant = variant;
        c.components = None;
        c.seed = seed;
        if untrained {
            Ok((Model::for_variant(c.model.clone(), variant, seed)?, None))
        } else {
            let run = train(ds, &c)?;
            Ok((run.model, Some(run.report.accuracy)))
        }
    };
    Ok([build(Variant::Spl)?, build(Variant::SplIaf)?])
}

pub fn summarize_comparison(seeds: Vec<SeedComparison>, trained: bool) -> ComparisonReport {
    let piaf_not_worse = seeds
        .iter()
        .filter(|c| c.piaf_mean_abs_delta_p <= c.iaf_mean_abs_delta_p)
        .count();
    ComparisonReport {
        trained,
        seeds,
        piaf_not_worse,
    }
}

/// Compares P-IAF and IAF models per seed on the eval split of `ds`.
pub fn compare_piaf_iaf(
    ds: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    spec: &BoundSampleSpec,
    untrained: bool,
) -> Result<ComparisonReport> {
    let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
    let mut out = Vec::new();
    for &seed in seeds {
        let [(piaf, pa), (iaf, ia)] = build_pair(ds, cfg, seed, untrained)?;
        let mut cmp = compare_models(&piaf, &iaf, &eval, spec, seed)?;
        cmp.piaf_accuracy = pa;
        cmp.iaf_accuracy = ia;
        out.push(cmp);
    }
    Ok(summarize_comparison(out, !untrained))
}
