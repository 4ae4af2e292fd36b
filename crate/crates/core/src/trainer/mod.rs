//! Training loop over whole annotator samples, evaluation and checkpointing.
//!
//! Each step draws one batch of annotators from the epoch's shuffled order,
//! encodes both branches when the variant needs them, samples the base latent
//! with per-step noise, runs the flow and decoder and takes one AdamW step on
//! `recon + β·kl + λ·guide`.

mod checkpoint;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, SCHEMA};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricConfig, MetricsReport};
use crate::model::{Components, Model, ModelConfig, Noise, Variant};
use crate::numcore::{AdamW, Graph, ParamId, Schedule, Tensor};
use crate::objective::{batch_loss, LossBreakdown, LossConfig};
use crate::rng::{normal_vec, stream};
use crate::synthpref::{AnnotatorSample, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Overrides the variant's component table (ablation grid).
    pub components: Option<Components>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub metrics: MetricConfig,
    pub epochs: usize,
    /// Annotators per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// KL cycle length in steps; `None` uses one cycle over the whole run.
    pub kl_period: Option<usize>,
    pub seed: u64,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Spl,
            components: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            metrics: MetricConfig::default(),
            epochs: 2,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-3,
            warmup_fraction: 0.03,
            kl_period: None,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn components(&self) -> Components {
        self.components.unwrap_or_else(|| self.variant.components())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.metrics.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction must lie in [0, 1)"));
        }
        if self.kl_period == Some(0) {
            return Err(Error::config("train.kl_period must be positive"));
        }
        Ok(())
    }
}

/// One metric-log row; `eval` is present on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub eval: Option<MetricsReport>,
}

pub const LOG_COLUMNS: [&str; 12] = [
    "step",
    "recon",
    "kl",
    "guide",
    "total",
    "beta_eff",
    "lr",
    "eval_acc",
    "eval_au",
    "rmse_mu_swap",
    "rmse_logvar_swap",
    "logp_gap",
];

pub fn write_log_csv<W: std::io::Write>(out: W, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::io("metric log", e.into());
    w.write_record(LOG_COLUMNS).map_err(err)?;
    for r in rows {
        let l = &r.loss;
        let mut rec = vec![
            r.step.to_string(),
            l.recon.to_string(),
            l.kl.to_string(),
            l.guide.to_string(),
            l.total.to_string(),
            l.beta_eff.to_string(),
            r.lr.to_string(),
        ];
        match &r.eval {
            Some(e) => rec.extend([
                e.accuracy.to_string(),
                e.au_fraction.to_string(),
                e.rmse_mu_swap.to_string(),
                e.rmse_logvar_swap.to_string(),
                e.logp_gap.to_string(),
            ]),
            None => rec.extend(std::iter::repeat(String::new()).take(5)),
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("metric log", e))
}

pub fn save_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log_csv(std::io::BufWriter::new(f), rows).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub report: MetricsReport,
}

/// An aborted run: the error plus the last checkpoint whose parameters were
/// all finite (`None` when the failure happened before the first step).
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Checkpoint>,
    pub log: Vec<LogRow>,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    opt: AdamW,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    lr_schedule: Schedule,
    kl_schedule: Schedule,
    active: Vec<ParamId>,
    order: Option<(usize, Vec<usize>)>,
    pub log: Vec<LogRow>,
}

fn check_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if ds.embedding_dim != cfg.model.embedding_dim {
        return Err(Error::config(format!(
            "dataset embedding dim {} does not match model.embedding_dim {}",
            ds.embedding_dim, cfg.model.embedding_dim
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::NoSamples);
    }
    if ds.eval.len() < 2 {
        return Err(Error::UndefinedVariance(ds.eval.len()));
    }
    Ok(())
}

impl Trainer {
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        check_dataset(&cfg, ds)?;
        let model = Model::new(cfg.model.clone(), cfg.components(), cfg.seed)?;
        Self::with_model(cfg, model, ds)
    }

    fn with_model(cfg: TrainConfig, model: Model, ds: &Dataset) -> Result<Self> {
        let opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay)?;
        let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.epochs;
        let active = model.active_params();
        Ok(Self {
            lr_schedule: Schedule::lr(total_steps, cfg.warmup_fraction),
            kl_schedule: Schedule::kl(cfg.kl_period.unwrap_or(total_steps)),
            cfg,
            model,
            opt,
            step: 0,
            steps_per_epoch,
            total_steps,
            active,
            order: None,
            log: Vec::new(),
        })
    }

    /// Continues a checkpointed run on the same dataset.
    pub fn resume(ckpt: &Checkpoint, ds: &Dataset) -> Result<Self> {
        let cfg = ckpt.config.clone();
        cfg.validate()?;
        check_dataset(&cfg, ds)?;
        let model = model_from_checkpoint(ckpt)?;
        let mut t = Self::with_model(cfg, model, ds)?;
        t.opt
            .restore(ckpt.optimizer_steps, ckpt.first_moments.clone(), ckpt.second_moments.clone())?;
        t.step = ckpt.step as usize;
        if t.step > t.total_steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint step {} exceeds the run length {}",
                t.step, t.total_steps
            )));
        }
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.opt.moments();
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step as u64,
            optimizer_steps: self.opt.steps_taken(),
            params: self
                .model
                .store
                .ids()
                .map(|id| (self.model.store.name(id).to_string(), self.model.store.value(id).clone()))
                .collect(),
            first_moments: m.to_vec(),
            second_moments: v.to_vec(),
        }
    }

    fn batch_indices(&mut self, n_train: usize) -> Vec<usize> {
        let epoch = self.step / self.steps_per_epoch;
        let idx = self.step % self.steps_per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..n_train).collect();
            order.shuffle(&mut stream(self.cfg.seed, "epoch", epoch as u64));
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().unwrap().1;
        let lo = idx * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(n_train);
        order[lo..hi].to_vec()
    }

    /// Base noise of step `step`, one row per annotator of the batch.
    pub fn step_noise(&self, step: usize, rows: usize) -> Noise {
        let d = self.model.cfg.latent_dim;
        let mut rng = stream(self.cfg.seed, "noise", step as u64);
        Noise::coupled(Tensor::matrix(rows, d, normal_vec(&mut rng, rows * d)).expect("noise shape"))
    }

    /// One optimizer step. Parameters are left untouched when the loss or
    /// any gradient is non-finite.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<LossBreakdown> {
        let idx = self.batch_indices(ds.train.len());
        let batch: Vec<&AnnotatorSample> = idx.iter().map(|&i| &ds.train[i]).collect();
        let noise = self.model.comps.uses_encoder().then(|| self.step_noise(self.step, batch.len()));
        let kl_mult = self.kl_schedule.value(self.step);
        let lr_mult = self.lr_schedule.value(self.step);

        let mut g = Graph::new();
        let lv = batch_loss(&mut g, &self.model, &batch, noise, &self.cfg.loss, kl_mult)?;
        let loss = lv.breakdown(&g);
        if !loss.total.is_finite() {
            return Err(Error::numeric(
                "train",
                format!("non-finite loss at step {}: {loss:?}", self.step),
            ));
        }
        let grads = g.backward(lv.total)?;
        self.model.store.zero_grad();
        self.model.store.accumulate(&g, &grads);
        for &id in &self.active {
            if !self.model.store.grad(id).is_finite() {
                return Err(Error::numeric(
                    "train",
                    format!("non-finite gradient for {} at step {}", self.model.store.name(id), self.step),
                ));
            }
        }
        self.opt.step_params(&mut self.model.store, &self.active, lr_mult)?;
        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            loss,
            lr: self.cfg.lr * lr_mult,
            eval: None,
        });
        Ok(loss)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<MetricsReport> {
        let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
        metrics::evaluate(&self.model, &eval, &self.cfg.metrics)
    }

    /// Trains until `stop_step` (or the end of the run), evaluating on the
    /// configured cadence.
    pub fn run_until(&mut self, ds: &Dataset, stop_step: usize) -> std::result::Result<(), TrainFailure> {
        let stop = stop_step.min(self.total_steps);
        while self.step < stop {
            let last_good = self.checkpoint();
            let outcome = self.train_step(ds).and_then(|_| {
                let due = (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0)
                    || self.step == self.total_steps;
                if due {
                    let report = self.evaluate(ds)?;
                    self.log.last_mut().expect("row for this step").eval = Some(report);
                }
                Ok(())
            });
            if let Err(error) = outcome {
                return Err(TrainFailure {
                    error,
                    last_good: Some(last_good),
                    log: std::mem::take(&mut self.log),
                });
            }
        }
        Ok(())
    }

    pub fn finish(mut self, ds: &Dataset) -> std::result::Result<TrainRun, TrainFailure> {
        self.run_until(ds, self.total_steps)?;
        let report = match self.log.last().and_then(|r| r.eval.clone()) {
            Some(r) => r,
            None => self.evaluate(ds).map_err(|error| TrainFailure {
                error,
                last_good: Some(self.checkpoint()),
                log: self.log.clone(),
            })?,
        };
        Ok(TrainRun {
            checkpoint: self.checkpoint(),
            model: self.model,
            log: self.log,
            report,
        })
    }
}

/// Full training run.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> std::result::Result<TrainRun, TrainFailure> {
    let trainer = Trainer::new(cfg.clone(), ds).map_err(|error| TrainFailure {
        error,
        last_good: None,
        log: Vec::new(),
    })?;
    trainer.finish(ds)
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let cfg = &ckpt.config;
    let mut model = Model::new(cfg.model.clone(), cfg.components(), cfg.seed)?;
    if ckpt.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for (name, value) in &ckpt.params {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if model.store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        model.store.replace(id, value.clone());
    }
    Ok(model)
}

/// Deterministic evaluation of a checkpoint on `samples`.
pub fn evaluate(ckpt: &Checkpoint, samples: &[AnnotatorSample]) -> Result<MetricsReport> {
    let model = model_from_checkpoint(ckpt)?;
    let refs: Vec<&AnnotatorSample> = samples.iter().collect();
    metrics::evaluate(&model, &refs, &ckpt.config.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpref::{gen_pets, PetsConfig};

    fn pets() -> Dataset {
        gen_pets(&PetsConfig {
            n_train: 24,
            n_eval: 8,
            embedding_dim: 8,
            noise_sd: 0.1,
            ..PetsConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            model: ModelConfig {
                embedding_dim: 8,
                latent_dim: 4,
                context_dim: 2,
                encoder_hidden: 8,
                flow_hidden: 8,
                decoder_hidden: 8,
                ..ModelConfig::default()
            },
            batch_size: 8,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn btl_never_touches_latent_params() {
        let ds = pets();
        let mut t = Trainer::new(cfg(Variant::Btl), &ds).unwrap();
        let before = t.model.store.clone();
        for _ in 0..3 {
            t.train_step(&ds).unwrap();
            for id in t.model.encoder.params().into_iter().chain(t.model.flow.params()) {
                assert!(t.model.store.grad(id).data().iter().all(|&g| g == 0.0));
                assert_eq!(t.model.store.value(id), before.value(id));
            }
        }
    }

    #[test]
    fn same_seed_same_log() {
        let ds = pets();
        let a = train(&ds, &cfg(Variant::Spl)).unwrap();
        let b = train(&ds, &cfg(Variant::Spl)).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_log_csv(&mut x, &a.log).unwrap();
        write_log_csv(&mut y, &b.log).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.log.len(), 6);
        assert!(a.log[1].eval.is_some() && a.log[0].eval.is_none());
    }

    #[test]
    fn variants_share_recon_at_init() {
        let ds = pets();
        let recon = |v: Variant| {
            let t = Trainer::new(cfg(v), &ds).unwrap();
            let batch: Vec<&AnnotatorSample> = ds.train[..8].iter().collect();
            let mut g = Graph::new();
            let lv = batch_loss(&mut g, &t.model, &batch, Some(t.step_noise(0, 8)), &t.cfg.loss, 1.0).unwrap();
            g.scalar(lv.recon)
        };
        let r = recon(Variant::Vpl);
        for v in [Variant::VplIaf, Variant::SplIaf, Variant::Spl] {
            assert_eq!(recon(v), r, "{v:?}");
        }
    }

    #[test]
    fn guidance_gradient_reaches_only_the_encoder() {
        let ds = pets();
        let mut c = cfg(Variant::Spl);
        c.loss.lambda_guide = 1.0;
        let t = Trainer::new(c, &ds).unwrap();
        let batch: Vec<&AnnotatorSample> = ds.train[..8].iter().collect();
        let mut g = Graph::new();
        let lv = batch_loss(&mut g, &t.model, &batch, Some(t.step_noise(0, 8)), &t.cfg.loss, 1.0).unwrap();
        let grads = g.backward(lv.guide.unwrap()).unwrap();
        let enc = t.model.encoder.params();
        let mut touched_encoder = false;
        for (id, var) in g.param_leaves() {
            let nz = grads.get(var).map(|t| t.data().iter().any(|&v| v != 0.0)).unwrap_or(false);
            if enc.contains(&id) {
                touched_encoder |= nz;
            } else {
                assert!(!nz, "{}", t.model.store.name(id));
            }
        }
        assert!(touched_encoder);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = pets();
        let mut a = Trainer::new(cfg(Variant::Spl), &ds).unwrap();
        a.run_until(&ds, 2).unwrap();
        let bytes = a.checkpoint().to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(restored, a.checkpoint());
        let mut b = Trainer::resume(&restored, &ds).unwrap();
        a.train_step(&ds).unwrap();
        b.train_step(&ds).unwrap();
        assert_eq!(a.model.store.values(), b.model.store.values());

        let full = train(&ds, &cfg(Variant::Spl)).unwrap();
        let mut c = Trainer::resume(&restored, &ds).unwrap();
        c.run_until(&ds, usize::MAX).unwrap();
        assert_eq!(&full.log[2..], &c.log[..]);
        assert_eq!(full.model.store.values(), c.model.store.values());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ds = pets();
        let t = Trainer::new(cfg(Variant::Vpl), &ds).unwrap();
        let bytes = t.checkpoint().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let ds = pets();
        let mut t = Trainer::new(cfg(Variant::Vpl), &ds).unwrap();
        t.run_until(&ds, 1).unwrap();
        let id = t.model.store.find("enc.mu.b").unwrap();
        t.model.store.value_mut(id).fill(1e200);
        let good = t.checkpoint();
        let fail = t.run_until(&ds, 3).unwrap_err();
        assert!(matches!(fail.error, Error::Numeric { .. }));
        assert_eq!(fail.last_good.unwrap(), good);
        assert_eq!(fail.log.len(), 1);
    }

    #[test]
    fn evaluate_is_repeatable() {
        let ds = pets();
        let run = train(&ds, &cfg(Variant::SplIaf)).unwrap();
        let a = evaluate(&run.checkpoint, &ds.eval).unwrap();
        let b = evaluate(&run.checkpoint, &ds.eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, run.report);
    }

    #[test]
    fn embedding_mismatch_is_a_config_error() {
        let ds = pets();
        let mut c = cfg(Variant::Spl);
        c.model.embedding_dim = 9;
        let f = train(&ds, &c).unwrap_err();
        assert!(matches!(f.error, Error::Config(_)));
        assert!(f.last_good.is_none());
    }
}
