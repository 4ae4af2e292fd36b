//! The `spl` command line: dataset generation, training, evaluation, sweeps,
//! the bound lab and latent export.
//!
//! Every command writes under `--out DIR`: a verbatim copy of the config
//! (`config.json`), the config after seed and flag overrides
//! (`resolved_config.json`), its artifacts and a `manifest.json` listing them
//! with the hash of the resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundlab::{
    build_pair, check_lemma2, compare_models, run_lab, sample_draws, summarize_comparison, write_draws_csv,
    BoundReport, ComparisonReport, Lemma2Report,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{export_latents, MetricsReport};
use crate::model::{Components, Model, Variant};
use crate::synthpref::{load_dataset, save_dataset, AnnotatorSample, Dataset};
use crate::trainer::{self, model_from_checkpoint, save_log_csv, train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "spl", version, about = "Swap-guided variational preference learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: pets, ufp2 or ufp4.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config, after SPL_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the {model × β × seed} grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cells trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip cells that already have a result file.
        #[arg(long)]
        resume: bool,
    },
    /// Monte-Carlo checks of the swap-error bounds.
    Boundlab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// P-IAF checkpoint to examine.
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// IAF checkpoint to compare against `--checkpoint`.
        #[arg(long, requires = "checkpoint")]
        checkpoint_iaf: Option<PathBuf>,
        /// Use freshly initialized models instead of training.
        #[arg(long)]
        untrained: bool,
        /// Run a single lemma check (1 or 2).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        lemma: Option<u8>,
        #[arg(long)]
        draws: Option<usize>,
        /// Also write one CSV row per draw.
        #[arg(long)]
        per_draw: bool,
    },
    /// Write posterior-mean latents and their PCA projection.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Output directory plus the artifacts written so far.
pub struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Path of an artifact, recorded in the manifest.
    pub fn artifact(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.artifact(rel)?;
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.artifacts.sort();
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.train.seed,
            artifacts: self.artifacts.clone(),
        };
        self.write_json("manifest.json", &manifest).map(|_| ())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

/// Loads the config named by `common`, applies SPL_SEED and `--seed`, and
/// copies it into the output directory.
fn resolve(common: &Common) -> Result<(ExperimentConfig, RunDir)> {
    let (mut cfg, verbatim) = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => {
            let c = ExperimentConfig::preset(name)?;
            let text = c.to_json();
            (c, text)
        }
        (None, None) => {
            let c = ExperimentConfig::default();
            let text = c.to_json();
            (c, text)
        }
    };
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let root = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut dir = RunDir::create(&root)?;
    dir.write("config.json", verbatim.as_bytes())?;
    Ok((cfg, dir))
}

fn apply_flags(cfg: &mut ExperimentConfig, flags: &TrainFlags) {
    if let Some(v) = flags.variant {
        cfg.train.variant = v;
        cfg.train.components = None;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = flags.beta {
        cfg.train.loss.beta = b;
        cfg.sweep.betas = vec![b];
    }
}

fn finalize(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    cfg.validate()?;
    dir.write_json("resolved_config.json", cfg).map(|_| ())
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => load_dataset(dir),
        None => Ok(cfg.dataset.generate()?.dataset),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_users: usize,
    pub eval_users: usize,
    pub pairs: usize,
    pub n_types: usize,
    pub types: Vec<String>,
}

pub fn summarize(ds: &Dataset) -> DatasetSummary {
    DatasetSummary {
        train_users: ds.train.len(),
        eval_users: ds.eval.len(),
        pairs: ds.total_pairs(),
        n_types: ds.n_types,
        types: ds.type_labels(),
    }
}

fn write_metrics_csv(dir: &mut RunDir, rel: &str, report: &MetricsReport) -> Result<()> {
    let path = dir.artifact(rel)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    w.serialize(report).map_err(|e| Error::io(&path, e.into()))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let (cfg, mut dir) = resolve(common)?;
    finalize(&cfg, &mut dir)?;
    let ds = cfg.dataset.generate()?.dataset;
    for rel in ["dataset/train.jsonl", "dataset/eval.jsonl"] {
        dir.artifact(rel)?;
    }
    save_dataset(&dir.root.join("dataset"), &ds)?;
    let s = summarize(&ds);
    println!(
        "{} train users, {} eval users, {} pairs, {} types ({})",
        s.train_users,
        s.eval_users,
        s.pairs,
        s.n_types,
        s.types.join(", ")
    );
    dir.write_json("dataset_summary.json", &s)?;
    dir.finish("generate", &cfg)
}

fn cmd_train(common: &Common, flags: &TrainFlags, data: Option<&Path>) -> Result<()> {
    let (mut cfg, mut dir) = resolve(common)?;
    apply_flags(&mut cfg, flags);
    finalize(&cfg, &mut dir)?;
    let ds = dataset(&cfg, data)?;
    match train(&ds, &cfg.train) {
        Ok(run) => {
            run.checkpoint.save(&dir.artifact("checkpoint.bin")?)?;
            save_log_csv(&dir.artifact("log.csv")?, &run.log)?;
            dir.write_json("report.json", &run.report)?;
            write_metrics_csv(&mut dir, "metrics.csv", &run.report)?;
            println!(
                "{}: accuracy {:.4}, au_fraction {:.3}, cos(mu) {:.3}, cos(logvar) {:.3}",
                cfg.train.components().label(),
                run.report.accuracy,
                run.report.au_fraction,
                run.report.mean_cos_mu_swap,
                run.report.mean_cos_logvar_swap
            );
            dir.finish("train", &cfg)
        }
        Err(fail) => {
            if let Some(ckpt) = &fail.last_good {
                ckpt.save(&dir.artifact("last_good.bin")?)?;
            }
            save_log_csv(&dir.artifact("log.csv")?, &fail.log)?;
            dir.finish("train", &cfg)?;
            Err(fail.error)
        }
    }
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, mut dir) = resolve(common)?;
    finalize(&cfg, &mut dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = dataset(&cfg, data)?;
    let report = trainer::evaluate(&ckpt, &ds.eval)?;
    dir.write_json("eval_report.json", &report)?;
    write_metrics_csv(&mut dir, "metrics.csv", &report)?;
    println!("accuracy {:.4}, au_fraction {:.3}", report.accuracy, report.au_fraction);
    dir.finish("eval", &cfg)
}

/// One sweep cell and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub components: Components,
    pub beta: f64,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub cfg: TrainConfig,
}

impl Cell {
    pub fn file_name(&self) -> String {
        let safe: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
            .collect();
        format!("{safe}__beta{:e}__seed{}.json", self.cfg.loss.beta, self.cfg.seed)
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for (label, variant, components) in cfg.sweep.models() {
        for &beta in &cfg.sweep.betas {
            for seed in cfg.seeds_or_train() {
                let mut t = cfg.train.clone();
                t.variant = variant;
                t.components = components;
                t.loss.beta = beta;
                t.seed = seed;
                out.push(Cell {
                    label: label.clone(),
                    cfg: t,
                });
            }
        }
    }
    out
}

fn run_cell(cell: &Cell, ds: &Dataset) -> CellResult {
    let (report, error) = match train(ds, &cell.cfg) {
        Ok(run) => (Some(run.report), None),
        Err(f) => (None, Some(f.error.to_string())),
    };
    CellResult {
        label: cell.label.clone(),
        components: cell.cfg.components(),
        beta: cell.cfg.loss.beta,
        seed: cell.cfg.seed,
        report,
        error,
    }
}

/// Runs every cell of the sweep, `jobs` at a time. With `data` absent each
/// seed trains on a dataset generated with that seed. Cell results go to
/// `cells/` as they finish; with `resume`, existing ones are reused.
pub fn run_sweep(cfg: &ExperimentConfig, data: Option<&Dataset>, dir: &mut RunDir, jobs: usize, resume: bool) -> Result<Vec<CellResult>> {
    let cells = sweep_cells(cfg);
    let mut datasets: BTreeMap<u64, Dataset> = BTreeMap::new();
    if data.is_none() {
        for seed in cfg.seeds_or_train() {
            datasets.insert(seed, cfg.dataset.with_seed(seed).generate()?.dataset);
        }
    }
    let mut paths = Vec::with_capacity(cells.len());
    for c in &cells {
        paths.push(dir.artifact(&format!("cells/{}", c.file_name()))?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("--jobs: {e}")))?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .zip(paths.par_iter())
            .map(|(cell, path)| {
                if resume {
                    if let Ok(text) = std::fs::read_to_string(path) {
                        if let Ok(done) = serde_json::from_str::<CellResult>(&text) {
                            return Ok(done);
                        }
                    }
                }
                let ds = data.unwrap_or_else(|| &datasets[&cell.cfg.seed]);
                let r = run_cell(cell, ds);
                let text = serde_json::to_string_pretty(&r).expect("cell serializes");
                std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
                Ok(r)
            })
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Serialize)]
struct CellRow<'a> {
    label: &'a str,
    beta: f64,
    seed: u64,
    status: &'a str,
    accuracy: Option<f64>,
    au_fraction: Option<f64>,
    rmse_mu_swap: Option<f64>,
    rmse_logvar_swap: Option<f64>,
    mean_cos_mu_swap: Option<f64>,
    mean_cos_logvar_swap: Option<f64>,
    logp_gap: Option<f64>,
    error: Option<&'a str>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

pub const GRID_METRICS: [&str; 6] = [
    "accuracy",
    "au_fraction",
    "rmse_mu_swap",
    "mean_cos_mu_swap",
    "mean_cos_logvar_swap",
    "logp_gap",
];

fn metric(r: &MetricsReport, name: &str) -> f64 {
    match name {
        "accuracy" => r.accuracy,
        "au_fraction" => r.au_fraction,
        "rmse_mu_swap" => r.rmse_mu_swap,
        "mean_cos_mu_swap" => r.mean_cos_mu_swap,
        "mean_cos_logvar_swap" => r.mean_cos_logvar_swap,
        "logp_gap" => r.logp_gap,
        _ => unreachable!("unknown grid metric {name}"),
    }
}

/// Writes `cells.csv` (one row per cell) and `grid.csv` (one row per
/// model and β, mean and sd over the seeds that finished).
pub fn write_sweep_tables(dir: &mut RunDir, results: &[CellResult]) -> Result<()> {
    let path = dir.artifact("cells.csv")?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    for r in results {
        let m = r.report.as_ref();
        w.serialize(CellRow {
            label: &r.label,
            beta: r.beta,
            seed: r.seed,
            status: if m.is_some() { "ok" } else { "failed" },
            accuracy: m.map(|m| m.accuracy),
            au_fraction: m.map(|m| m.au_fraction),
            rmse_mu_swap: m.map(|m| m.rmse_mu_swap),
            rmse_logvar_swap: m.map(|m| m.rmse_logvar_swap),
            mean_cos_mu_swap: m.map(|m| m.mean_cos_mu_swap),
            mean_cos_logvar_swap: m.map(|m| m.mean_cos_logvar_swap),
            logp_gap: m.map(|m| m.logp_gap),
            error: r.error.as_deref(),
        })
        .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.artifact("grid.csv")?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let mut header = vec!["label".to_string(), "beta".into(), "n_ok".into(), "n_failed".into()];
    for m in GRID_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header).map_err(|e| Error::io(&path, e.into()))?;
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in results {
        if !keys.iter().any(|(l, b)| *l == r.label && *b == r.beta) {
            keys.push((r.label.clone(), r.beta));
        }
    }
    for (label, beta) in keys {
        let group: Vec<&CellResult> = results.iter().filter(|r| r.label == label && r.beta == beta).collect();
        let ok: Vec<&MetricsReport> = group.iter().filter_map(|r| r.report.as_ref()).collect();
        let mut rec = vec![label, beta.to_string(), ok.len().to_string(), (group.len() - ok.len()).to_string()];
        for m in GRID_METRICS {
            let vals: Vec<f64> = ok.iter().map(|r| metric(r, m)).collect();
            let (mean, sd) = mean_sd(&vals);
            rec.push(mean.to_string());
            rec.push(sd.to_string());
        }
        w.write_record(&rec).map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn cmd_sweep(common: &Common, flags: &TrainFlags, data: Option<&Path>, jobs: usize, resume: bool) -> Result<()> {
    let (mut cfg, mut dir) = resolve(common)?;
    apply_flags(&mut cfg, flags);
    if let Some(v) = flags.variant {
        cfg.sweep.variants = vec![v];
        cfg.sweep.ablation = false;
    }
    finalize(&cfg, &mut dir)?;
    let ds = data.map(load_dataset).transpose()?;
    let results = run_sweep(&cfg, ds.as_ref(), &mut dir, jobs, resume)?;
    write_sweep_tables(&mut dir, &results)?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    println!("{} cells, {} failed", results.len(), failed);
    dir.finish("sweep", &cfg)
}

/// Everything the bound lab command reports.
#[derive(Debug, Serialize, Deserialize)]
pub struct BoundlabOutput {
    pub n_draws: usize,
    pub labs: Vec<BoundReport>,
    pub comparison: Option<ComparisonReport>,
    pub lemma2: Option<Lemma2Report>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_boundlab(
    common: &Common,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    checkpoint_iaf: Option<&Path>,
    untrained: bool,
    lemma: Option<u8>,
    draws: Option<usize>,
    per_draw: bool,
) -> Result<()> {
    let (mut cfg, mut dir) = resolve(common)?;
    if let Some(n) = draws {
        cfg.boundlab.n_draws = n;
    }
    finalize(&cfg, &mut dir)?;
    let ds = dataset(&cfg, data)?;
    let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
    let spec = &cfg.boundlab;

    // The models to examine, P-IAF first, and per-seed comparisons.
    let mut models: Vec<Model> = Vec::new();
    let mut comparisons = Vec::new();
    if let Some(p) = checkpoint {
        models.push(model_from_checkpoint(&Checkpoint::load(p)?)?);
        if let Some(q) = checkpoint_iaf {
            models.push(model_from_checkpoint(&Checkpoint::load(q)?)?);
            comparisons.push(compare_models(&models[0], &models[1], &eval, spec, cfg.train.seed)?);
        }
    } else {
        for (i, seed) in cfg.seeds_or_train().into_iter().enumerate() {
            let [(piaf, pa), (iaf, ia)] = build_pair(&ds, &cfg.train, seed, untrained)?;
            let mut c = compare_models(&piaf, &iaf, &eval, spec, seed)?;
            c.piaf_accuracy = pa;
            c.iaf_accuracy = ia;
            comparisons.push(c);
            if i == 0 {
                models = vec![piaf, iaf];
            }
        }
    }

    let mut out = BoundlabOutput {
        n_draws: spec.n_draws,
        labs: Vec::new(),
        comparison: (!comparisons.is_empty()).then(|| summarize_comparison(comparisons, checkpoint.is_some() || !untrained)),
        lemma2: None,
    };
    if lemma == Some(2) {
        let draws = sample_draws(&models[0], &eval, spec)?;
        let posts: Vec<_> = draws.into_iter().map(|d| (d.post, d.post_swap)).collect();
        let rep = check_lemma2(&posts, spec.lemma2_eps_draws, spec.ell_max, spec.seed);
        println!("lemma 2: {} draws, satisfaction {:.4}", rep.n, rep.rate);
        out.lemma2 = Some(rep);
    } else {
        for m in &models {
            let rep = run_lab(m, &eval, spec)?;
            println!(
                "{}: {} draws, L_r_hat {:.4}, lemma 1 {:.4} (x{} {:.4}), lemma 2 {:.4}, steps {:.4}, mean |dp| {:.5}",
                rep.model,
                rep.n_draws,
                rep.l_r_hat.estimate,
                rep.lemma1.rate,
                spec.inflation,
                rep.lemma1.rate_inflated,
                rep.lemma2.rate,
                rep.steps.rate,
                rep.mean_abs_delta_p
            );
            if per_draw {
                let name = format!("draws_{}.csv", serde_json::to_value(rep.flow).unwrap().as_str().unwrap());
                write_draws_csv(&dir.artifact(&name)?, &rep.draws)?;
            }
            out.labs.push(rep);
        }
    }
    if let Some(c) = &out.comparison {
        for s in &c.seeds {
            println!(
                "seed {}: mean |dp| piaf {:.5}, iaf {:.5}",
                s.seed, s.piaf_mean_abs_delta_p, s.iaf_mean_abs_delta_p
            );
        }
    }
    dir.write_json("bound_report.json", &out)?;
    dir.finish("boundlab", &cfg)
}

fn cmd_export(common: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, mut dir) = resolve(common)?;
    finalize(&cfg, &mut dir)?;
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let ds = dataset(&cfg, data)?;
    let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
    for rel in ["latents_pca.csv", "pca_explained.json"] {
        dir.artifact(rel)?;
    }
    let pca = export_latents(&model, &eval, &dir.artifact("latents.csv")?)?;
    println!("{} users, explained variance {:?}", eval.len(), pca.explained);
    dir.finish("export-latents", &cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train { common, flags, data } => cmd_train(common, flags, data.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(common, checkpoint, data.as_deref()),
        Command::Sweep {
            common,
            flags,
            data,
            jobs,
            resume,
        } => cmd_sweep(common, flags, data.as_deref(), *jobs, *resume),
        Command::Boundlab {
            common,
            data,
            checkpoint,
            checkpoint_iaf,
            untrained,
            lemma,
            draws,
            per_draw,
        } => cmd_boundlab(
            common,
            data.as_deref(),
            checkpoint.as_deref(),
            checkpoint_iaf.as_deref(),
            *untrained,
            *lemma,
            *draws,
            *per_draw,
        ),
        Command::ExportLatents {
            common,
            checkpoint,
            data,
        } => cmd_export(common, checkpoint, data.as_deref()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
