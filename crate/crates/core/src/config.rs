//! Experiment configuration files and presets.
//!
//! A config is one JSON document. Every section has defaults, so `{}` is a
//! valid config, and unknown keys are rejected with the path of the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundlab::BoundSampleSpec;
use crate::error::{Error, Result};
use crate::model::{Components, Variant};
use crate::synthpref::{gen_pets, gen_ufp, Generated, PetsConfig, UfpConfig};
use crate::trainer::TrainConfig;

/// Environment variable that overrides every seed in the config.
pub const SEED_ENV: &str = "SPL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Pets(PetsConfig),
    Ufp(UfpConfig),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Pets(PetsConfig::default())
    }
}

impl DatasetSpec {
    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::Pets(c) => c.seed,
            DatasetSpec::Ufp(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::Pets(c) => c.seed = seed,
            DatasetSpec::Ufp(c) => c.seed = seed,
        }
        out
    }

    pub fn generate(&self) -> Result<Generated> {
        match self {
            DatasetSpec::Pets(c) => gen_pets(c),
            DatasetSpec::Ufp(c) => gen_ufp(c),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            DatasetSpec::Pets(c) => c.embedding_dim,
            DatasetSpec::Ufp(c) => c.embedding_dim,
        }
    }
}

/// The cells of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
    pub betas: Vec<f64>,
    /// Replaces `variants` with the full guide × flow × conditioning grid.
    pub ablation: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Btl, Variant::Vpl, Variant::Spl],
            betas: vec![3e-7, 3e-6, 3e-5],
            ablation: false,
        }
    }
}

impl SweepSpec {
    /// `(label, variant, components)` per model cell, in sweep order.
    pub fn models(&self) -> Vec<(String, Variant, Option<Components>)> {
        if self.ablation {
            ablation_grid()
                .into_iter()
                .map(|c| (c.label(), Variant::Spl, Some(c)))
                .collect()
        } else {
            self.variants.iter().map(|&v| (v.name().to_string(), v, None)).collect()
        }
    }
}

/// Every combination of guide on/off, flow none/iaf/piaf and conditioning
/// film/concat/none.
pub fn ablation_grid() -> Vec<Components> {
    use crate::flows::FlowKind;
    use crate::rewarddec::Conditioning;
    let mut out = Vec::new();
    for guide in [false, true] {
        for flow in [FlowKind::None, FlowKind::Iaf, FlowKind::Piaf] {
            for cond in [Conditioning::Film, Conditioning::Concat, Conditioning::None] {
                out.push(Components { guide, flow, cond });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub boundlab: BoundSampleSpec,
    pub sweep: SweepSpec,
    /// Default output directory when `--out` is not given.
    pub out_dir: Option<PathBuf>,
    /// Seeds for sweeps and multi-seed comparisons.
    pub seeds: Vec<u64>,
}

pub const PRESETS: [&str; 3] = ["pets", "ufp2", "ufp4"];

impl ExperimentConfig {
    /// Desk-scale defaults for the three synthetic benchmarks.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            seeds: vec![0, 1, 2],
            ..Self::default()
        };
        cfg.train.loss.beta = 3e-6;
        cfg.train.loss.eta = 1.0;
        match name {
            "pets" => {
                cfg.dataset = DatasetSpec::Pets(PetsConfig::default());
                cfg.train.lr = 2e-3;
                cfg.train.loss.lambda_guide = 5e-3;
            }
            "ufp2" | "ufp4" => {
                cfg.dataset = DatasetSpec::Ufp(UfpConfig {
                    n_types: if name == "ufp2" { 2 } else { 4 },
                    ..UfpConfig::default()
                });
                cfg.train.lr = 1.25e-3;
                cfg.train.loss.lambda_guide = 1.5e-3;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        cfg.train.model.embedding_dim = cfg.dataset.embedding_dim();
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every seed: dataset, training, metrics, bound lab and the seed list.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset = self.dataset.with_seed(seed);
        self.train.seed = seed;
        self.train.metrics.seed = seed;
        self.boundlab.seed = seed;
        self.seeds = vec![seed];
    }

    /// Applies `SPL_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}: expected an unsigned integer, got `{v}`")))?;
            self.override_seed(seed);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefix(e, "train"))?;
        self.boundlab.validate()?;
        if self.train.model.embedding_dim != self.dataset.embedding_dim() {
            return Err(Error::config(format!(
                "train.model.embedding_dim ({}) must match dataset.embedding_dim ({})",
                self.train.model.embedding_dim,
                self.dataset.embedding_dim()
            )));
        }
        if self.sweep.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::config("sweep.betas must be finite and non-negative"));
        }
        if self.sweep.betas.is_empty() || (!self.sweep.ablation && self.sweep.variants.is_empty()) {
            return Err(Error::config("sweep needs at least one beta and one model"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds_or_train(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Config(msg) if !msg.starts_with(section) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}
