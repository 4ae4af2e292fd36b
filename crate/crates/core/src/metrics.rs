//! Evaluation diagnostics: preference accuracy, active units, swap mirroring,
//! the posterior-vs-prior log-likelihood gap and a PCA projection for latent
//! export.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, Noise};
use crate::numcore::{cosine, log_sigmoid, Graph, Tensor};
use crate::rewarddec::Conditioning;
use crate::rng::{normal_vec, stream};
use crate::synthpref::AnnotatorSample;
use crate::vencoder::BasePosterior;

/// A run whose final AU fraction is at or below this counts as collapsed.
pub const COLLAPSE_AU: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Variance threshold for an active latent dimension.
    pub au_threshold: f64,
    /// Posterior and prior draws per pair for the log-likelihood gap.
    pub logp_draws: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            au_threshold: 0.005,
            logp_draws: 8,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.au_threshold > 0.0) || !self.au_threshold.is_finite() {
            return Err(Error::config(format!(
                "metrics.au_threshold must be positive, got {}",
                self.au_threshold
            )));
        }
        if self.logp_draws == 0 {
            return Err(Error::config("metrics.logp_draws must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub active_units: usize,
    pub au_fraction: f64,
    pub rmse_mu_swap: f64,
    pub rmse_logvar_swap: f64,
    pub mean_cos_mu_swap: f64,
    pub mean_cos_logvar_swap: f64,
    pub logp_gap: f64,
    pub logp_gap_se: f64,
    pub n_users: usize,
    pub n_pairs: usize,
    pub collapsed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorStats {
    pub rmse_mu: f64,
    pub rmse_logvar: f64,
    pub mean_cos_mu: f64,
    pub mean_cos_logvar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub mean: f64,
    /// Standard error across annotators.
    pub se: f64,
    pub n: usize,
}

/// Dimension `u` is active when the sample variance of `μ_u` over the rows
/// strictly exceeds `delta`. Returns the count and the fraction of dims.
pub fn active_units(mus: &[Vec<f64>], delta: f64) -> Result<(usize, f64)> {
    let n = mus.len();
    if n < 2 {
        return Err(Error::UndefinedVariance(n));
    }
    let d = mus[0].len();
    if d == 0 {
        return Ok((0, 0.0));
    }
    let mut count = 0;
    for u in 0..d {
        let mean = mus.iter().map(|m| m[u]).sum::<f64>() / n as f64;
        let var = mus.iter().map(|m| (m[u] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var > delta {
            count += 1;
        }
    }
    Ok((count, count as f64 / d as f64))
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len().max(1) as f64).sqrt()
}

/// Per-user RMSE and cosine between original and swap posteriors, averaged
/// over users.
pub fn swap_mirror_stats(post: &[BasePosterior], post_swap: &[BasePosterior], eps_cos: f64) -> MirrorStats {
    let n = post.len().min(post_swap.len());
    if n == 0 {
        return MirrorStats {
            rmse_mu: 0.0,
            rmse_logvar: 0.0,
            mean_cos_mu: 0.0,
            mean_cos_logvar: 0.0,
        };
    }
    let mut s = [0.0; 4];
    for (a, b) in post.iter().zip(post_swap) {
        s[0] += rmse(&a.mu, &b.mu);
        s[1] += rmse(&a.logvar, &b.logvar);
        s[2] += cosine(&a.mu, &b.mu, eps_cos);
        s[3] += cosine(&a.logvar, &b.logvar, eps_cos);
    }
    let n = n as f64;
    MirrorStats {
        rmse_mu: s[0] / n,
        rmse_logvar: s[1] / n,
        mean_cos_mu: s[2] / n,
        mean_cos_logvar: s[3] / n,
    }
}

/// Fraction of positive margins, ties counting one half.
pub fn accuracy(margins: &[f64]) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    let hits: f64 = margins
        .iter()
        .map(|&m| if m > 0.0 { 1.0 } else if m == 0.0 { 0.5 } else { 0.0 })
        .sum();
    hits / margins.len() as f64
}

fn mean_se(values: &[f64]) -> GapEstimate {
    let n = values.len();
    if n == 0 {
        return GapEstimate { mean: 0.0, se: 0.0, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    GapEstimate { mean, se, n }
}

fn per_user_mean(values: &[f64], offsets: &[usize]) -> Vec<f64> {
    offsets
        .windows(2)
        .map(|w| values[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}

/// Mean over annotators of the average gap
/// `log σ(Δr(z_post)) − log σ(Δr(ε))` over their pairs, with `z_post` a
/// posterior sample pushed through the flow and `ε ~ N(0, I)` a prior draw.
/// Both terms average `draws` samples. A latent-blind model gives exactly 0.
pub fn logp_gap(model: &Model, samples: &[&AnnotatorSample], draws: usize, seed: u64) -> Result<GapEstimate> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let blind = !model.comps.uses_encoder() || model.comps.cond == Conditioning::None;
    if blind {
        return Ok(GapEstimate {
            mean: 0.0,
            se: 0.0,
            n: samples.len(),
        });
    }
    let b = samples.len();
    let d = model.cfg.latent_dim;
    let n_pairs: usize = samples.iter().map(|s| s.pairs.len()).sum();
    let mut post_ll = vec![0.0; n_pairs];
    let mut prior_ll = vec![0.0; n_pairs];
    let mut offsets = Vec::new();
    for j in 0..draws {
        let mut rng = stream(seed, "eval/logp_post", j as u64);
        let eps = Tensor::matrix(b, d, normal_vec(&mut rng, b * d))?;
        let mut g = Graph::new();
        let opts = ForwardOptions {
            noise: Some(Noise::coupled(eps)),
            swap_flow: false,
        };
        let fw = model.forward(&mut g, samples, &opts)?;
        for (acc, &m) in post_ll.iter_mut().zip(g.value(fw.margins).data()) {
            *acc += log_sigmoid(m) / draws as f64;
        }
        offsets = fw.pair_offsets.to_vec();

        let mut rng = stream(seed, "eval/logp_prior", j as u64);
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(b, d, normal_vec(&mut rng, b * d))?);
        let (margins, _) = model.pair_margins(&mut g, samples, Some(z))?;
        for (acc, &m) in prior_ll.iter_mut().zip(g.value(margins).data()) {
            *acc += log_sigmoid(m) / draws as f64;
        }
    }
    let gap: Vec<f64> = post_ll.iter().zip(&prior_ll).map(|(a, b)| a - b).collect();
    Ok(mean_se(&per_user_mean(&gap, &offsets)))
}

/// Deterministic evaluation at the posterior mean (`ε = 0`). Both encoder
/// branches are always computed so every latent variant reports mirroring.
pub fn evaluate(model: &Model, samples: &[&AnnotatorSample], cfg: &MetricConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut g = Graph::new();
    let fw = model.forward(&mut g, samples, &ForwardOptions::default())?;
    let margins = g.value(fw.margins).data().to_vec();
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::numeric("eval", "non-finite margin"));
    }
    let acc = accuracy(&margins);

    let (active, au, mirror) = if model.comps.uses_encoder() {
        let post = model.encoder.encode_many(&model.store, samples, false)?;
        let post_swap = model.encoder.encode_many(&model.store, samples, true)?;
        let mus: Vec<Vec<f64>> = post.iter().map(|p| p.mu.clone()).collect();
        let (count, frac) = active_units(&mus, cfg.au_threshold)?;
        (count, frac, swap_mirror_stats(&post, &post_swap, 1e-8))
    } else {
        (0, 0.0, swap_mirror_stats(&[], &[], 1e-8))
    };
    let gap = logp_gap(model, samples, cfg.logp_draws, cfg.seed)?;
    Ok(MetricsReport {
        accuracy: acc,
        active_units: active,
        au_fraction: au,
        rmse_mu_swap: mirror.rmse_mu,
        rmse_logvar_swap: mirror.rmse_logvar,
        mean_cos_mu_swap: mirror.mean_cos_mu,
        mean_cos_logvar_swap: mirror.mean_cos_logvar,
        logp_gap: gap.mean,
        logp_gap_se: gap.se,
        n_users: samples.len(),
        n_pairs: margins.len(),
        collapsed: au <= COLLAPSE_AU,
    })
}

/// Latents `z_K` at `ε = 0` of every sample, row per sample.
pub fn mean_latents(model: &Model, samples: &[&AnnotatorSample]) -> Result<Vec<Vec<f64>>> {
    if !model.comps.uses_encoder() {
        return Err(Error::config("the btl variant has no latent to export"));
    }
    let mut g = Graph::new();
    let fw = model.forward(&mut g, samples, &ForwardOptions::default())?;
    let z = g.value(fw.flow.expect("latent path").z_k());
    Ok((0..z.rows()).map(|r| z.row_slice(r).to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Projected rows, `k` columns each.
    pub coords: Vec<Vec<f64>>,
    /// Variance along each of the `k` directions, non-increasing.
    pub explained: Vec<f64>,
}

/// Projects centered rows onto their top-`k` principal directions.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    if n < k.max(1) {
        return Err(Error::config(format!("pca needs at least {k} rows, got {n}")));
    }
    let d = rows[0].len();
    if k > d {
        return Err(Error::config(format!("pca with k = {k} on {d}-dimensional data")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (x.transpose() * &x) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = &order[..k];
    let coords = (0..n)
        .map(|i| {
            top.iter()
                .map(|&c| (0..d).map(|j| x[(i, j)] * eig.eigenvectors[(j, c)]).sum())
                .collect()
        })
        .collect();
    let explained = top.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
    Ok(Pca { coords, explained })
}

/// Writes `user_id,type_label,z_1..z_d` and a sibling `*_pca.csv` with the
/// 2-D projection.
pub fn export_latents(model: &Model, samples: &[&AnnotatorSample], path: &Path) -> Result<Pca> {
    let z = mean_latents(model, samples)?;
    let d = model.cfg.latent_dim;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["user_id".to_string(), "type_label".to_string()];
    header.extend((1..=d).map(|i| format!("z_{i}")));
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for (s, row) in samples.iter().zip(&z) {
        let mut rec = vec![s.user_id.clone(), s.type_label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let pca = pca_project(&z, 2.min(d))?;
    let pca_path = path.with_file_name(format!(
        "{}_pca.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("latents")
    ));
    let mut w = csv::Writer::from_path(&pca_path).map_err(|e| Error::io(&pca_path, e.into()))?;
    w.write_record(["user_id", "type_label", "pc_1", "pc_2"])
        .map_err(|e| Error::io(&pca_path, e.into()))?;
    for (s, c) in samples.iter().zip(&pca.coords) {
        let pc2 = c.get(1).copied().unwrap_or(0.0);
        w.write_record([s.user_id.clone(), s.type_label.clone(), c[0].to_string(), pc2.to_string()])
            .map_err(|e| Error::io(&pca_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&pca_path, e))?;
    let mut f = std::fs::File::create(path.with_file_name("pca_explained.json")).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(&pca.explained).expect("vector of floats")).map_err(|e| Error::io(path, e))?;
    Ok(pca)
}
