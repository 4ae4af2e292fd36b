//! Synthetic pluralistic preference data.
//!
//! Two generators mirror the structure of the usual benchmarks at desk scale:
//!
//! * [`gen_pets`]: four items under a single shared prompt; two annotator types
//!   agree on the best (bird) and worst (rabbit) item but disagree on dog vs cat.
//! * [`gen_ufp`]: many prompts with several scored responses; each response
//!   carries one score per preference type and annotators of type `p` prefer
//!   the response with the higher score `p`.
//!
//! Annotator types are used only to decide winners and for evaluation; they are
//! never given to a model.

mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, normal_vec, stream};

pub use io::{load_dataset, load_split, save_dataset, save_split, DatasetMeta, SCHEMA_VERSION};

pub const SWAP_SUFFIX: &str = "_swap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Embedding of the chosen response.
    pub e_w: Vec<f64>,
    /// Embedding of the rejected response.
    pub e_l: Vec<f64>,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self {
            e_w: self.e_l.clone(),
            e_l: self.e_w.clone(),
        }
    }
}

/// One annotator's preference pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSample {
    pub user_id: String,
    /// Generating preference type. Evaluation only.
    #[serde(rename = "type")]
    pub type_label: String,
    pub pairs: Vec<PreferencePair>,
}

impl AnnotatorSample {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_fictitious(&self) -> bool {
        self.type_label.ends_with(SWAP_SUFFIX)
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.pairs.first().map(|p| p.e_w.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<AnnotatorSample>,
    pub eval: Vec<AnnotatorSample>,
    pub embedding_dim: usize,
    pub n_types: usize,
}

impl Dataset {
    pub fn total_pairs(&self) -> usize {
        self.train.iter().chain(&self.eval).map(|s| s.pairs.len()).sum()
    }

    /// Checks dimensions and that train and eval users are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for s in &self.train {
            ids.insert(s.user_id.as_str());
        }
        for s in &self.eval {
            if ids.contains(s.user_id.as_str()) {
                return Err(Error::config(format!("user {} is in both train and eval", s.user_id)));
            }
        }
        for s in self.train.iter().chain(&self.eval) {
            if s.pairs.is_empty() {
                return Err(Error::config(format!("user {} has no pairs", s.user_id)));
            }
            for p in &s.pairs {
                if p.e_w.len() != self.embedding_dim || p.e_l.len() != self.embedding_dim {
                    return Err(Error::config(format!(
                        "user {}: embedding dim {} != {}",
                        s.user_id,
                        p.e_w.len().max(p.e_l.len()),
                        self.embedding_dim
                    )));
                }
                if !p.e_w.iter().chain(&p.e_l).all(|v| v.is_finite()) {
                    return Err(Error::config(format!("user {}: non-finite embedding", s.user_id)));
                }
            }
        }
        Ok(())
    }

    /// Distinct type labels in first-seen order (train then eval).
    pub fn type_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.train.iter().chain(&self.eval) {
            if !out.contains(&s.type_label) {
                out.push(s.type_label.clone());
            }
        }
        out
    }
}

/// A scored item (a pet, or a response to a prompt).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub name: String,
    /// One true score per preference type.
    pub true_scores: Vec<f64>,
    pub base_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemBank {
    pub items: Vec<Item>,
    pub type_names: Vec<String>,
}

impl ItemBank {
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.items.iter().enumerate() {
            for b in &self.items[i + 1..] {
                let d = a
                    .base_embedding
                    .iter()
                    .zip(&b.base_embedding)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Which items produced each emitted pair: `(winner_id, loser_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub train: Vec<Vec<(usize, usize)>>,
    pub eval: Vec<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub bank: ItemBank,
    pub provenance: Provenance,
    /// Generating type index of every user, parallel to the splits.
    pub train_types: Vec<usize>,
    pub eval_types: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PetsConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub pairs_per_user: usize,
    pub noise_sd: f64,
    pub embedding_dim: usize,
}

impl Default for PetsConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_eval: 200,
            pairs_per_user: 8,
            noise_sd: 0.0,
            embedding_dim: 64,
        }
    }
}

pub const PET_NAMES: [&str; 4] = ["bird", "dog", "cat", "rabbit"];
pub const PET_TYPES: [&str; 2] = ["A", "B"];

fn check_balanced(n: usize, types: usize, what: &str) -> Result<()> {
    if n % types != 0 && types == 2 {
        return Err(Error::config(format!("{what} must be even for balanced types, got {n}")));
    }
    Ok(())
}

fn pets_bank(seed: u64, dim: usize) -> ItemBank {
    // Type A: bird > dog > cat > rabbit. Type B: bird > cat > dog > rabbit.
    let scores = [[3.0, 3.0], [2.0, 1.0], [1.0, 2.0], [0.0, 0.0]];
    let mut rng = stream(seed, "pets/bank", 0);
    let items = PET_NAMES
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (name, s))| Item {
            item_id: i,
            name: name.to_string(),
            true_scores: s.to_vec(),
            base_embedding: normal_vec(&mut rng, dim),
        })
        .collect();
    ItemBank {
        items,
        type_names: PET_TYPES.iter().map(|s| s.to_string()).collect(),
    }
}

fn noisy(base: &[f64], sd: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    if sd == 0.0 {
        return base.to_vec();
    }
    base.iter().map(|b| b + sd * normal(rng)).collect()
}

/// Two-type pets preference data.
pub fn gen_pets(cfg: &PetsConfig) -> Result<Generated> {
    if cfg.pairs_per_user < 1 {
        return Err(Error::config("pairs_per_user must be at least 1"));
    }
    if cfg.embedding_dim < 1 {
        return Err(Error::config("embedding_dim must be at least 1"));
    }
    if !(cfg.noise_sd >= 0.0) {
        return Err(Error::config("noise_sd must be non-negative"));
    }
    check_balanced(cfg.n_train, 2, "n_train")?;
    check_balanced(cfg.n_eval, 2, "n_eval")?;
    let bank = pets_bank(cfg.seed, cfg.embedding_dim);
    let item_pairs: Vec<(usize, usize)> = (0..4).flat_map(|a| (a + 1..4).map(move |b| (a, b))).collect();

    let make = |split: &str, global: usize, local: usize| {
        let ty = local % 2;
        let mut rng = stream(cfg.seed, "pets/user", global as u64);
        let mut pairs = Vec::with_capacity(cfg.pairs_per_user);
        let mut prov = Vec::with_capacity(cfg.pairs_per_user);
        for _ in 0..cfg.pairs_per_user {
            let (a, b) = item_pairs[rng.random_range(0..item_pairs.len())];
            let (w, l) = if bank.items[a].true_scores[ty] > bank.items[b].true_scores[ty] {
                (a, b)
            } else {
                (b, a)
            };
            pairs.push(PreferencePair {
                e_w: noisy(&bank.items[w].base_embedding, cfg.noise_sd, &mut rng),
                e_l: noisy(&bank.items[l].base_embedding, cfg.noise_sd, &mut rng),
            });
            prov.push((w, l));
        }
        let sample = AnnotatorSample {
            user_id: format!("pets-{split}-{local:05}"),
            type_label: PET_TYPES[ty].to_string(),
            pairs,
        };
        (sample, prov, ty)
    };

    let mut out = Generated {
        dataset: Dataset {
            train: Vec::new(),
            eval: Vec::new(),
            embedding_dim: cfg.embedding_dim,
            n_types: 2,
        },
        bank: bank.clone(),
        provenance: Provenance::default(),
        train_types: Vec::new(),
        eval_types: Vec::new(),
    };
    for u in 0..cfg.n_train {
        let (s, p, t) = make("train", u, u);
        out.dataset.train.push(s);
        out.provenance.train.push(p);
        out.train_types.push(t);
    }
    for u in 0..cfg.n_eval {
        let (s, p, t) = make("eval", cfg.n_train + u, u);
        out.dataset.eval.push(s);
        out.provenance.eval.push(p);
        out.eval_types.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UfpConfig {
    pub seed: u64,
    pub n_types: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub pairs_per_user: usize,
    /// Prompts in each annotator's survey pool.
    pub survey_size: usize,
    /// Per-response noise on the score channels of the embedding (fixed per
    /// response; the text does not reveal its scores exactly).
    pub score_noise_sd: f64,
    /// Per-occurrence embedding noise.
    pub emb_noise_sd: f64,
    pub embedding_dim: usize,
    pub n_prompts: usize,
    pub responses_per_prompt: usize,
    /// Scores are integers in `1..=score_levels`.
    pub score_levels: u32,
}

impl Default for UfpConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_types: 4,
            n_train: 2000,
            n_eval: 200,
            pairs_per_user: 8,
            survey_size: 16,
            score_noise_sd: 0.5,
            emb_noise_sd: 0.05,
            embedding_dim: 64,
            n_prompts: 1000,
            responses_per_prompt: 4,
            score_levels: 10,
        }
    }
}

pub const UFP_TYPES: [&str; 4] = ["helpfulness", "honesty", "instruction_following", "truthfulness"];

/// Random orthogonal matrix (row-major `n x n`) by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = normal_vec(rng, n);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn ufp_bank(cfg: &UfpConfig) -> ItemBank {
    let d = cfg.embedding_dim;
    let p = cfg.n_types;
    let mut rng = stream(cfg.seed, "ufp/bank", 0);
    let mixing = random_orthogonal(&mut rng, d);
    let levels = cfg.score_levels as f64;
    // Standardize integer scores uniform on 1..=L.
    let mean = (levels + 1.0) / 2.0;
    let sd = ((levels * levels - 1.0) / 12.0).sqrt().max(1e-12);
    let mut items = Vec::with_capacity(cfg.n_prompts * cfg.responses_per_prompt);
    for prompt in 0..cfg.n_prompts {
        let prompt_vec = normal_vec(&mut rng, d - p);
        for r in 0..cfg.responses_per_prompt {
            let scores: Vec<f64> = (0..p).map(|_| rng.random_range(1..=cfg.score_levels) as f64).collect();
            let mut latent = Vec::with_capacity(d);
            for s in &scores {
                latent.push((s - mean) / sd + cfg.score_noise_sd * normal(&mut rng));
            }
            for pv in &prompt_vec {
                latent.push(std::f64::consts::FRAC_1_SQRT_2 * (pv + normal(&mut rng)));
            }
            let base_embedding = mixing
                .iter()
                .map(|row| row.iter().zip(&latent).map(|(a, b)| a * b).sum())
                .collect();
            items.push(Item {
                item_id: items.len(),
                name: format!("prompt{prompt}/response{r}"),
                true_scores: scores,
                base_embedding,
            });
        }
    }
    ItemBank {
        items,
        type_names: UFP_TYPES[..p].iter().map(|s| s.to_string()).collect(),
    }
}

/// Winner under preference type `ty`: `Some(true)` if the first response wins,
/// `None` on a tie (such pairs are never emitted).
pub fn first_wins(first: &[f64], second: &[f64], ty: usize) -> Option<bool> {
    let (a, b) = (first[ty], second[ty]);
    if a == b {
        None
    } else {
        Some(a > b)
    }
}

/// Multi-type scored-response preference data.
pub fn gen_ufp(cfg: &UfpConfig) -> Result<Generated> {
    if cfg.n_types != 2 && cfg.n_types != 4 {
        return Err(Error::config(format!("n_types must be 2 or 4, got {}", cfg.n_types)));
    }
    if cfg.pairs_per_user < 1 {
        return Err(Error::config("pairs_per_user must be at least 1"));
    }
    if cfg.survey_size < cfg.pairs_per_user {
        return Err(Error::config(format!(
            "survey_size ({}) must be at least pairs_per_user ({})",
            cfg.survey_size, cfg.pairs_per_user
        )));
    }
    if cfg.n_prompts < cfg.survey_size {
        return Err(Error::config("n_prompts must be at least survey_size"));
    }
    if cfg.responses_per_prompt < 2 {
        return Err(Error::config("responses_per_prompt must be at least 2"));
    }
    if cfg.embedding_dim <= cfg.n_types {
        return Err(Error::config("embedding_dim must exceed n_types"));
    }
    if cfg.score_levels < 2 {
        return Err(Error::config("score_levels must be at least 2"));
    }
    let bank = ufp_bank(cfg);
    let rpp = cfg.responses_per_prompt;
    let mut out = Generated {
        dataset: Dataset {
            train: Vec::new(),
            eval: Vec::new(),
            embedding_dim: cfg.embedding_dim,
            n_types: cfg.n_types,
        },
        bank,
        provenance: Provenance::default(),
        train_types: Vec::new(),
        eval_types: Vec::new(),
    };

    let make = |bank: &ItemBank, split: &str, global: usize, local: usize| -> Result<_> {
        let ty = local % cfg.n_types;
        let mut rng = stream(cfg.seed, "ufp/user", global as u64);
        // Survey pool: distinct prompts, each with one candidate response pair.
        let prompts = rand::seq::index::sample(&mut rng, cfg.n_prompts, cfg.survey_size).into_vec();
        let mut pool: Vec<(usize, usize, usize)> = prompts
            .into_iter()
            .map(|pr| {
                let a = rng.random_range(0..rpp);
                let mut b = rng.random_range(0..rpp - 1);
                if b >= a {
                    b += 1;
                }
                (pr, a, b)
            })
            .collect();
        pool.shuffle(&mut rng);
        let mut pairs = Vec::with_capacity(cfg.pairs_per_user);
        let mut prov = Vec::with_capacity(cfg.pairs_per_user);
        let mut cursor = pool.into_iter();
        while pairs.len() < cfg.pairs_per_user {
            let Some((pr, mut a, mut b)) = cursor.next() else {
                return Err(Error::config(format!(
                    "survey pool of user {global} exhausted by ties; raise score_levels or survey_size"
                )));
            };
            let scores = |r: usize| &bank.items[pr * rpp + r].true_scores;
            let mut tries = 0;
            while first_wins(scores(a), scores(b), ty).is_none() && tries < 32 {
                a = rng.random_range(0..rpp);
                b = rng.random_range(0..rpp - 1);
                if b >= a {
                    b += 1;
                }
                tries += 1;
            }
            let Some(a_wins) = first_wins(scores(a), scores(b), ty) else {
                continue;
            };
            let (w, l) = if a_wins { (a, b) } else { (b, a) };
            let (wi, li) = (pr * rpp + w, pr * rpp + l);
            pairs.push(PreferencePair {
                e_w: noisy(&bank.items[wi].base_embedding, cfg.emb_noise_sd, &mut rng),
                e_l: noisy(&bank.items[li].base_embedding, cfg.emb_noise_sd, &mut rng),
            });
            prov.push((wi, li));
        }
        let sample = AnnotatorSample {
            user_id: format!("ufp{}-{split}-{local:05}", cfg.n_types),
            type_label: UFP_TYPES[ty].to_string(),
            pairs,
        };
        Ok((sample, prov, ty))
    };

    for u in 0..cfg.n_train {
        let (s, p, t) = make(&out.bank, "train", u, u)?;
        out.dataset.train.push(s);
        out.provenance.train.push(p);
        out.train_types.push(t);
    }
    for u in 0..cfg.n_eval {
        let (s, p, t) = make(&out.bank, "eval", cfg.n_train + u, u)?;
        out.dataset.eval.push(s);
        out.provenance.eval.push(p);
        out.eval_types.push(t);
    }
    Ok(out)
}

/// The fictitious annotator with every preference reversed.
pub fn swap(sample: &AnnotatorSample) -> AnnotatorSample {
    let flip = |s: &str| match s.strip_suffix(SWAP_SUFFIX) {
        Some(orig) => orig.to_string(),
        None => format!("{s}{SWAP_SUFFIX}"),
    };
    AnnotatorSample {
        user_id: flip(&sample.user_id),
        type_label: flip(&sample.type_label),
        pairs: sample.pairs.iter().map(PreferencePair::swapped).collect(),
    }
}

/// Training-pair positions `(sample, pair)` whose labels were flipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipMask {
    pub flipped: Vec<(usize, usize)>,
}

impl FlipMask {
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for &(s, p) in &self.flipped {
            let pair = &mut out.train[s].pairs[p];
            std::mem::swap(&mut pair.e_w, &mut pair.e_l);
        }
        out
    }
}

/// Flips exactly `round(flip_fraction · n)` of the `n` training pairs,
/// chosen uniformly without replacement. Evaluation pairs are left clean.
pub fn inject_label_noise(dataset: &Dataset, flip_fraction: f64, seed: u64) -> Result<(Dataset, FlipMask)> {
    if !(0.0..1.0).contains(&flip_fraction) {
        return Err(Error::config(format!("flip_fraction must be in [0, 1), got {flip_fraction}")));
    }
    let positions: Vec<(usize, usize)> = dataset
        .train
        .iter()
        .enumerate()
        .flat_map(|(s, smp)| (0..smp.pairs.len()).map(move |p| (s, p)))
        .collect();
    let k = (flip_fraction * positions.len() as f64).round() as usize;
    let mut rng = stream(seed, "label-noise", 0);
    let mut chosen: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, positions.len(), k)
        .into_iter()
        .map(|i| positions[i])
        .collect();
    chosen.sort_unstable();
    let mask = FlipMask { flipped: chosen };
    Ok((mask.apply(dataset), mask))
}

/// Keeps at most `n` pairs per annotator, chosen uniformly, for the fewer-pairs setting.
pub fn truncate_pairs(dataset: &Dataset, min_pairs: usize, max_pairs: usize, seed: u64) -> Result<Dataset> {
    if min_pairs < 1 || min_pairs > max_pairs {
        return Err(Error::config("need 1 <= min_pairs <= max_pairs"));
    }
    let mut out = dataset.clone();
    for (split, samples) in [("train", &mut out.train), ("eval", &mut out.eval)] {
        for (i, s) in samples.iter_mut().enumerate() {
            let mut rng = stream(seed, &format!("truncate/{split}"), i as u64);
            let n = rng.random_range(min_pairs..=max_pairs).min(s.pairs.len());
            let keep = rand::seq::index::sample(&mut rng, s.pairs.len(), n).into_vec();
            let mut keep_sorted = keep;
            keep_sorted.sort_unstable();
            s.pairs = keep_sorted.into_iter().map(|k| s.pairs[k].clone()).collect();
        }
    }
    Ok(out)
}
