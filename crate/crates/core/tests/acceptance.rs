//! End-to-end acceptance checks, one line per criterion.
//!
//! Thresholds are pinned below. The process exits 0 after reporting so the
//! workspace test run stays usable while a criterion is out of reach; set
//! `SPL_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails. Pass
//! criterion numbers as arguments (`cargo test --test acceptance -- 5 9`) to
//! run a subset.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use spl::boundlab::{build_pair, compare_models, run_lab, summarize_comparison};
use spl::config::{ExperimentConfig, PRESETS};
use spl::flows::{ContextSplit, FlowConfig, FlowCtx, FlowKind, FlowStack};
use spl::metrics::{MetricsReport, COLLAPSE_AU};
use spl::model::{Components, Model, ModelConfig, Noise, Variant};
use spl::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use spl::objective::{batch_loss, gaussian_kl, kl_mc, LossConfig};
use spl::rewarddec::{Conditioning, Decoder, DecoderConfig};
use spl::rng::{normal_vec, stream};
use spl::synthpref::{gen_pets, AnnotatorSample, Dataset, PetsConfig};
use spl::trainer::train;
use spl::vencoder::{sample_z0, BasePosterior, Encoder, EncoderConfig, PairBatch};

// Criterion 1.
const GRAD_CONFIGS: usize = 20;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding compare on an absolute scale of `GRAD_REL_TOL * GRAD_FLOOR`.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

// Criterion 2.
const DENSITY_CONFIGS: usize = 100;
const DENSITY_MAX_DIM: usize = 8;
const DENSITY_MAX_STEPS: usize = 2;
const LOGDET_REL_TOL: f64 = 1e-5;
const INVERSION_TOL: f64 = 1e-8;
const JACOBIAN_STEP: f64 = 1e-5;
const DENSITY_BUDGET: Duration = Duration::from_secs(120);

// Criterion 3.
const KL_POSTERIORS: usize = 20;
const KL_DRAWS: usize = 10_000;
const KL_SE: f64 = 3.0;
const KL_BUDGET: Duration = Duration::from_secs(60);

// Criterion 4.
const INIT_TOL: f64 = 1e-12;

// Criterion 5.
const PETS_ACC: f64 = 0.95;
const PETS_AU: f64 = 0.5;
const PETS_MAX_EPOCHS: usize = 2;
const PETS_BUDGET: Duration = Duration::from_secs(600);

// Criterion 6.
const BETAS: [f64; 3] = [3e-7, 3e-6, 3e-5];
const SEEDS: [u64; 3] = [0, 1, 2];
const SPL_RESCUE_AU: f64 = 0.3;
const ACC_MARGIN: f64 = 0.02;
const RESCUE_MIN_SEEDS: usize = 2;
const GRID_BUDGET: Duration = Duration::from_secs(45 * 60);

// Criterion 7.
const COS_MU_MAX: f64 = -0.9;
const COS_LOGVAR_MIN: f64 = 0.9;
const COLLAPSED_RMSE_MU: f64 = 0.01;

// Criterion 8.
const GAP_SE: f64 = 3.0;

// Criterion 9.
const LEMMA_DRAWS: usize = 10_000;
const LEMMA1_RATE: f64 = 0.99;
const LEMMA1_INFLATION: f64 = 2.0;
const LEMMA2_RATE: f64 = 1.0;
const PIAF_MIN_SEEDS: usize = 2;
const LEMMA_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn perturb(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols)).unwrap()
}

/// `Σ w ⊙ v` with a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, v: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv).unwrap();
    g.sum(p).unwrap()
}

/// Largest relative error between backprop and central differences over the
/// entries of `ids` (every entry of small tensors, 12 spread entries of
/// larger ones). Returns `(entries checked, worst error)`.
fn gradcheck(store: &mut ParamStore, ids: &[ParamId], loss: impl Fn(&ParamStore) -> (Graph, Var)) -> (usize, f64) {
    let (g, v) = loss(store);
    let grads = g.backward(v).unwrap();
    let mut an = store.clone();
    an.zero_grad();
    an.accumulate(&g, &grads);
    let (mut n, mut worst) = (0, 0.0f64);
    for &id in ids {
        let len = store.value(id).len();
        let step = (len / 12).max(1);
        for k in (0..len).step_by(step) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + GRAD_STEP;
            let (gp, vp) = loss(store);
            store.value_mut(id).data_mut()[k] = orig - GRAD_STEP;
            let (gm, vm) = loss(store);
            store.value_mut(id).data_mut()[k] = orig;
            let fd = (gp.scalar(vp) - gm.scalar(vm)) / (2.0 * GRAD_STEP);
            worst = worst.max(rel_err(an.grad(id).data()[k], fd, GRAD_FLOOR));
            n += 1;
        }
    }
    (n, worst)
}

fn grad_encoder(rng: &mut ChaCha8Rng, seed: u64) -> (usize, f64) {
    let cfg = EncoderConfig {
        embedding_dim: rng.random_range(2..=6),
        hidden: rng.random_range(2..=6),
        latent_dim: rng.random_range(1..=4),
        context_dim: rng.random_range(1..=3),
        logvar_clamp: 8.0,
        mu_init_gain: 1.0,
        logvar_init_gain: 1.0,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg.clone(), seed).unwrap();
    let ids = enc.params();
    perturb(&mut store, &ids, rng, 0.3);
    let segs = rng.random_range(1..=3);
    let mut offsets = vec![0usize];
    for _ in 0..segs {
        offsets.push(offsets.last().unwrap() + rng.random_range(1..=3));
    }
    let rows = *offsets.last().unwrap();
    let batch = PairBatch {
        x: random_matrix(rng, rows, 2 * cfg.embedding_dim),
        offsets: offsets.into(),
    };
    let w_mu = random_matrix(rng, segs, cfg.latent_dim);
    let w_lv = random_matrix(rng, segs, cfg.latent_dim);
    let w_c = random_matrix(rng, segs, cfg.context_dim);
    gradcheck(&mut store, &ids, |st| {
        let mut g = Graph::new();
        let p = enc.forward(&mut g, st, &batch).unwrap();
        let a = weighted_sum(&mut g, p.mu, &w_mu);
        let b = weighted_sum(&mut g, p.logvar, &w_lv);
        let c = weighted_sum(&mut g, p.context, &w_c);
        let ab = g.add(a, b).unwrap();
        let v = g.add(ab, c).unwrap();
        (g, v)
    })
}

fn grad_flow(rng: &mut ChaCha8Rng, seed: u64) -> (usize, f64) {
    let cfg = FlowConfig {
        latent_dim: rng.random_range(1..=5),
        context_dim: rng.random_range(1..=3),
        hidden: rng.random_range(2..=6),
        steps: rng.random_range(1..=2),
        s_max: 2.0,
    };
    let kind = if rng.random_bool(0.5) { FlowKind::Iaf } else { FlowKind::Piaf };
    let mut store = ParamStore::new();
    let flow = FlowStack::new(&mut store, cfg.clone(), kind, seed).unwrap();
    let ids = flow.params();
    perturb(&mut store, &ids, rng, 0.4);
    let rows = rng.random_range(1..=3);
    let z0 = random_matrix(rng, rows, cfg.latent_dim);
    let c = random_matrix(rng, rows, cfg.context_dim);
    let cs = random_matrix(rng, rows, cfg.context_dim);
    let w_z = random_matrix(rng, rows, cfg.latent_dim);
    let w_ld = random_matrix(rng, rows, 1);
    gradcheck(&mut store, &ids, |st| {
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let cv = g.constant(c.clone());
        let csv = g.constant(cs.clone());
        let ctx = FlowCtx::split(&mut g, cv, csv).unwrap();
        let fv = flow.forward(&mut g, st, z, &ctx).unwrap();
        let a = weighted_sum(&mut g, fv.z_k(), &w_z);
        let b = weighted_sum(&mut g, fv.logdet.unwrap(), &w_ld);
        let v = g.add(a, b).unwrap();
        (g, v)
    })
}

fn grad_decoder(rng: &mut ChaCha8Rng, seed: u64, mode: Conditioning) -> (usize, f64) {
    let cfg = DecoderConfig {
        embedding_dim: rng.random_range(2..=6),
        latent_dim: rng.random_range(1..=4),
        hidden: rng.random_range(2..=6),
    };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, cfg.clone(), mode, seed).unwrap();
    let ids = dec.params();
    perturb(&mut store, &ids, rng, 0.4);
    let rows = rng.random_range(1..=4);
    let e = random_matrix(rng, rows, cfg.embedding_dim);
    let z = random_matrix(rng, rows, cfg.latent_dim);
    let w = random_matrix(rng, rows, 1);
    gradcheck(&mut store, &ids, |st| {
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let zv = g.constant(z.clone());
        let r = dec.forward(&mut g, st, ev, Some(zv)).unwrap();
        let v = weighted_sum(&mut g, r, &w);
        (g, v)
    })
}

fn tiny_pets(seed: u64, n_train: usize, dim: usize) -> Dataset {
    gen_pets(&PetsConfig {
        seed,
        n_train,
        n_eval: 4,
        pairs_per_user: 3,
        noise_sd: 0.3,
        embedding_dim: dim,
    })
    .unwrap()
    .dataset
}

fn tiny_model_config(dim: usize) -> ModelConfig {
    ModelConfig {
        embedding_dim: dim,
        latent_dim: 3,
        context_dim: 2,
        encoder_hidden: 5,
        flow_hidden: 4,
        decoder_hidden: 4,
        mu_init_gain: 1.0,
        logvar_init_gain: 1.0,
        ..ModelConfig::default()
    }
}

fn grad_objective(rng: &mut ChaCha8Rng, seed: u64, variant: Variant) -> (usize, f64) {
    let ds = tiny_pets(seed, 4, 4);
    let mut model = Model::for_variant(tiny_model_config(4), variant, seed).unwrap();
    let ids = model.active_params();
    perturb(&mut model.store, &ids, rng, 0.3);
    let lc = LossConfig {
        beta: rng.random_range(0.05..1.0),
        lambda_guide: rng.random_range(0.05..1.0),
        eta: rng.random_range(0.0..1.0),
        eps_cos: 1e-8,
    };
    let kl_mult = rng.random_range(0.1..=1.0);
    let batch: Vec<&AnnotatorSample> = ds.train.iter().take(2).collect();
    let eps = random_matrix(rng, 2, model.cfg.latent_dim);
    let mut st = model.store.clone();
    gradcheck(&mut st, &ids, |st| {
        let mut m = model.clone();
        m.store = st.clone();
        let mut g = Graph::new();
        let lv = batch_loss(&mut g, &m, &batch, Some(Noise::coupled(eps.clone())), &lc, kl_mult).unwrap();
        (g, lv.total)
    })
}

fn criterion_1() -> Outcome {
    let mut rng = stream(101, "acceptance/grad", 0);
    let mut parts = Vec::new();
    let mut pass = true;
    let modules: [(&str, &dyn Fn(&mut ChaCha8Rng, u64) -> (usize, f64)); 4] = [
        ("encoder", &grad_encoder),
        ("flows", &grad_flow),
        ("decoder", &|r, s| {
            let mode = [Conditioning::Film, Conditioning::Concat, Conditioning::None][s as usize % 3];
            grad_decoder(r, s, mode)
        }),
        ("objective", &|r, s| grad_objective(r, s, Variant::ALL[s as usize % Variant::ALL.len()])),
    ];
    for (name, check) in modules {
        let (mut n, mut worst) = (0, 0.0f64);
        for c in 0..GRAD_CONFIGS {
            let (k, w) = check(&mut rng, c as u64);
            n += k;
            worst = worst.max(w);
        }
        pass &= worst < GRAD_REL_TOL && n > 0;
        parts.push(format!("{name} {GRAD_CONFIGS} cfgs/{n} entries max rel {worst:.1e}"));
    }
    Outcome::new(pass, parts.join(", "))
}

fn numeric_log_abs_det(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> f64 {
    let d = z.len();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[j] += JACOBIAN_STEP;
        zm[j] -= JACOBIAN_STEP;
        let (fp, fm) = (f(&zp), f(&zm));
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * JACOBIAN_STEP);
        }
    }
    jac.determinant().abs().ln()
}

fn criterion_2() -> Outcome {
    let mut rng = stream(102, "acceptance/density", 0);
    let (mut worst_ld, mut worst_inv) = (0.0f64, 0.0f64);
    for c in 0..DENSITY_CONFIGS {
        let d = rng.random_range(1..=DENSITY_MAX_DIM);
        let dc = rng.random_range(1..=4);
        let cfg = FlowConfig {
            latent_dim: d,
            context_dim: dc,
            hidden: rng.random_range(2..=8),
            steps: rng.random_range(1..=DENSITY_MAX_STEPS),
            s_max: 2.0,
        };
        let kind = if c % 2 == 0 { FlowKind::Piaf } else { FlowKind::Iaf };
        let mut store = ParamStore::new();
        let flow = FlowStack::new(&mut store, cfg, kind, c as u64).unwrap();
        let ids = flow.params();
        perturb(&mut store, &ids, &mut rng, 0.5);
        let split = ContextSplit {
            c_d: normal_vec(&mut rng, dc),
            c_s: normal_vec(&mut rng, dc),
        };
        let z0 = normal_vec(&mut rng, d);
        let out = flow.run(&store, &z0, &split).unwrap();
        let numeric = numeric_log_abs_det(|z| flow.run(&store, z, &split).unwrap().z_k().to_vec(), &z0);
        worst_ld = worst_ld.max(rel_err(out.logdet_sum, numeric, 1e-8));
        let back = flow.invert(&store, out.z_k(), &split).unwrap();
        let res = back.iter().zip(&z0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_inv = worst_inv.max(res);
    }
    Outcome::new(
        worst_ld < LOGDET_REL_TOL && worst_inv < INVERSION_TOL,
        format!("{DENSITY_CONFIGS} cfgs (d<={DENSITY_MAX_DIM}, K<={DENSITY_MAX_STEPS}): max log-det rel err {worst_ld:.1e}, max inversion residual {worst_inv:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = stream(103, "acceptance/kl", 0);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for _ in 0..KL_POSTERIORS {
        let d = rng.random_range(1..=8);
        let base = BasePosterior {
            mu: normal_vec(&mut rng, d),
            logvar: (0..d).map(|_| rng.random_range(-2.0..1.5)).collect(),
            context: vec![0.0; 2],
        };
        let mut store = ParamStore::new();
        let flow = FlowStack::new(
            &mut store,
            FlowConfig {
                latent_dim: d,
                context_dim: 2,
                steps: 0,
                ..FlowConfig::default()
            },
            FlowKind::Piaf,
            0,
        )
        .unwrap();
        let split = ContextSplit {
            c_d: vec![0.0; 2],
            c_s: vec![0.0; 2],
        };
        let draws: Vec<f64> = (0..KL_DRAWS)
            .map(|_| {
                let z0 = sample_z0(&base, &normal_vec(&mut rng, d));
                kl_mc(&flow.run(&store, &z0, &split).unwrap(), &base)
            })
            .collect();
        let n = KL_DRAWS as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let z = (mean - gaussian_kl(&base)).abs() / se;
        worst = worst.max(z);
        if z <= KL_SE {
            ok += 1;
        }
    }
    Outcome::new(
        ok == KL_POSTERIORS,
        format!("{ok}/{KL_POSTERIORS} posteriors within {KL_SE} SE over {KL_DRAWS} draws, worst {worst:.2} SE"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = stream(104, "acceptance/init", 0);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..5u64 {
        let ds = tiny_pets(seed, 12, 6);
        let mut cfg = tiny_model_config(6);
        cfg.mu_init_gain = 0.5;
        cfg.logvar_init_gain = 0.5;
        let spl = Model::for_variant(cfg.clone(), Variant::Spl, seed).unwrap();
        let vpl = Model::for_variant(cfg, Variant::Vpl, seed).unwrap();
        let lc = LossConfig {
            beta: 0.5,
            lambda_guide: 0.7,
            eta: 1.0,
            eps_cos: 1e-8,
        };
        for b in [1usize, 3, 6] {
            let batch: Vec<&AnnotatorSample> = ds.train.iter().skip(b).take(b).collect();
            let noise = Noise::coupled(random_matrix(&mut rng, b, 3));
            let mut g = Graph::new();
            let s = batch_loss(&mut g, &spl, &batch, Some(noise.clone()), &lc, 1.0).unwrap().breakdown(&g);
            let mut g = Graph::new();
            let v = batch_loss(&mut g, &vpl, &batch, Some(noise), &lc, 1.0).unwrap().breakdown(&g);
            worst = worst.max((s.recon + s.beta_eff * s.kl - v.total).abs());
            checks += 1;
        }
    }
    Outcome::new(
        worst <= INIT_TOL,
        format!("{checks} batches, max |(recon + beta*kl)_spl - total_vpl| = {worst:.1e}"),
    )
}

/// Trained-run results shared across criteria.
#[derive(Default)]
struct Runs {
    reports: RefCell<HashMap<String, MetricsReport>>,
    datasets: RefCell<HashMap<(String, u64), Dataset>>,
}

impl Runs {
    fn preset(name: &str) -> ExperimentConfig {
        ExperimentConfig::preset(name).unwrap()
    }

    fn dataset(&self, preset: &str, seed: u64) -> Dataset {
        let key = (preset.to_string(), seed);
        if let Some(ds) = self.datasets.borrow().get(&key) {
            return ds.clone();
        }
        let ds = Self::preset(preset).dataset.with_seed(seed).generate().unwrap().dataset;
        self.datasets.borrow_mut().insert(key, ds.clone());
        ds
    }

    /// The preset's training run with `comps`, β and seed (dataset seed = seed).
    fn report(&self, preset: &str, comps: Components, beta: f64, seed: u64) -> MetricsReport {
        let key = format!("{preset}/{}/{beta:e}/{seed}", comps.label());
        if let Some(r) = self.reports.borrow().get(&key) {
            return r.clone();
        }
        let mut cfg = Self::preset(preset).train;
        cfg.components = Some(comps);
        cfg.loss.beta = beta;
        cfg.seed = seed;
        let ds = self.dataset(preset, seed);
        let r = match train(&ds, &cfg) {
            Ok(run) => run.report,
            Err(f) => panic!("{key}: training failed: {}", f.error),
        };
        self.reports.borrow_mut().insert(key, r.clone());
        r
    }

    fn variant(&self, preset: &str, v: Variant, beta: f64, seed: u64) -> MetricsReport {
        self.report(preset, v.components(), beta, seed)
    }

    fn preset_beta(preset: &str) -> f64 {
        Self::preset(preset).train.loss.beta
    }
}

fn criterion_5(runs: &Runs) -> Outcome {
    let epochs = Runs::preset("pets").train.epochs;
    let beta = Runs::preset_beta("pets");
    let mut parts = Vec::new();
    let mut ok = 0;
    for seed in SEEDS {
        let r = runs.variant("pets", Variant::Spl, beta, seed);
        if r.accuracy >= PETS_ACC && r.au_fraction >= PETS_AU {
            ok += 1;
        }
        parts.push(format!("s{seed} acc {:.4} au {:.3}", r.accuracy, r.au_fraction));
    }
    Outcome::new(
        ok == SEEDS.len() && epochs <= PETS_MAX_EPOCHS,
        format!("{epochs} epochs; {}; {ok}/3 seeds pass", parts.join(", ")),
    )
}

fn criterion_6(runs: &Runs) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut collapse = false;
        let mut rescue = true;
        let mut cells = Vec::new();
        for beta in BETAS {
            let btl = runs.variant("ufp4", Variant::Btl, beta, seed);
            let vpl = runs.variant("ufp4", Variant::Vpl, beta, seed);
            let spl = runs.variant("ufp4", Variant::Spl, beta, seed);
            collapse |= vpl.au_fraction <= COLLAPSE_AU;
            rescue &= spl.au_fraction >= SPL_RESCUE_AU && spl.accuracy >= btl.accuracy + ACC_MARGIN;
            cells.push(format!(
                "b{beta:e}: vpl au {:.3} spl au {:.3} acc {:.4} vs btl {:.4}",
                vpl.au_fraction, spl.au_fraction, spl.accuracy, btl.accuracy
            ));
        }
        if collapse && rescue {
            ok += 1;
        }
        parts.push(format!("s{seed} [{}]", cells.join("; ")));
    }
    Outcome::new(
        ok >= RESCUE_MIN_SEEDS,
        format!("{ok}/3 seeds collapse+rescue (need {RESCUE_MIN_SEEDS}); {}", parts.join(" ")),
    )
}

fn collapsed_vpl(runs: &Runs) -> Vec<(String, MetricsReport)> {
    let mut out = Vec::new();
    for seed in SEEDS {
        for beta in BETAS {
            let r = runs.variant("ufp4", Variant::Vpl, beta, seed);
            if r.au_fraction <= COLLAPSE_AU {
                out.push((format!("ufp4 b{beta:e} s{seed}"), r));
            }
        }
    }
    out
}

fn criterion_7(runs: &Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for preset in PRESETS {
        let beta = Runs::preset_beta(preset);
        let (mut max_mu, mut min_lv) = (f64::NEG_INFINITY, f64::INFINITY);
        for seed in SEEDS {
            let r = runs.variant(preset, Variant::Spl, beta, seed);
            max_mu = max_mu.max(r.mean_cos_mu_swap);
            min_lv = min_lv.min(r.mean_cos_logvar_swap);
        }
        pass &= max_mu <= COS_MU_MAX && min_lv >= COS_LOGVAR_MIN;
        parts.push(format!("{preset} spl cos_mu max {max_mu:.3} cos_lv min {min_lv:.3}"));
    }
    let collapsed = collapsed_vpl(runs);
    let worst = collapsed.iter().map(|(_, r)| r.rmse_mu_swap).fold(0.0, f64::max);
    pass &= !collapsed.is_empty() && worst <= COLLAPSED_RMSE_MU;
    parts.push(format!("{} collapsed vpl runs, max rmse_mu_swap {worst:.4}", collapsed.len()));
    Outcome::new(pass, parts.join("; "))
}

fn criterion_8(runs: &Runs) -> Outcome {
    let beta = Runs::preset_beta("pets");
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let r = runs.variant("pets", Variant::Spl, beta, seed);
        pass &= r.logp_gap > GAP_SE * r.logp_gap_se;
        parts.push(format!("pets spl s{seed} gap {:.4}±{:.4}", r.logp_gap, r.logp_gap_se));
    }
    let collapsed = collapsed_vpl(runs);
    pass &= !collapsed.is_empty();
    for (name, r) in &collapsed {
        pass &= r.logp_gap.abs() < GAP_SE * r.logp_gap_se;
        parts.push(format!("vpl {name} gap {:.5}±{:.5}", r.logp_gap, r.logp_gap_se));
    }
    Outcome::new(pass, parts.join(", "))
}

fn criterion_9(runs: &Runs) -> Outcome {
    let cfg = Runs::preset("pets");
    let mut spec = cfg.boundlab.clone();
    spec.n_draws = LEMMA_DRAWS;
    spec.inflation = LEMMA1_INFLATION;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut comparisons = Vec::new();
    for seed in SEEDS {
        let ds = runs.dataset("pets", seed);
        let eval: Vec<&AnnotatorSample> = ds.eval.iter().collect();
        let [(piaf, _), (iaf, _)] = build_pair(&ds, &cfg.train, seed, false).unwrap();
        comparisons.push(compare_models(&piaf, &iaf, &eval, &spec, seed).unwrap());
        if seed == SEEDS[0] {
            for m in [&piaf, &iaf] {
                let rep = run_lab(m, &eval, &spec).unwrap();
                pass &= rep.n_draws == LEMMA_DRAWS
                    && rep.lemma2.rate >= LEMMA2_RATE
                    && rep.lemma1.rate_inflated >= LEMMA1_RATE;
                parts.push(format!(
                    "{:?}: lemma2 {:.4} lemma1(x{}) {:.4} (raw {:.4})",
                    rep.flow, rep.lemma2.rate, LEMMA1_INFLATION, rep.lemma1.rate_inflated, rep.lemma1.rate
                ));
            }
        }
    }
    for c in &comparisons {
        parts.push(format!(
            "s{} |dp| piaf {:.5} iaf {:.5}",
            c.seed, c.piaf_mean_abs_delta_p, c.iaf_mean_abs_delta_p
        ));
    }
    let summary = summarize_comparison(comparisons, true);
    pass &= summary.piaf_not_worse >= PIAF_MIN_SEEDS;
    parts.push(format!("piaf <= iaf in {}/3 seeds", summary.piaf_not_worse));
    Outcome::new(pass, parts.join(", "))
}

fn criterion_10(runs: &Runs) -> Outcome {
    let beta = Runs::preset_beta("ufp4");
    let full = Variant::Spl.components();
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut best_none = (f64::NEG_INFINITY, String::new());
        let mut full_acc = f64::NAN;
        for comps in spl::config::ablation_grid() {
            let r = runs.report("ufp4", comps, beta, seed);
            if comps == full {
                full_acc = r.accuracy;
            }
            if comps.flow == FlowKind::None && r.accuracy > best_none.0 {
                best_none = (r.accuracy, comps.label());
            }
        }
        if full_acc >= best_none.0 {
            ok += 1;
        }
        parts.push(format!("s{seed} full {full_acc:.4} vs best flow=none {:.4} ({})", best_none.0, best_none.1));
    }
    Outcome::new(ok == SEEDS.len(), format!("18 cells x 3 seeds; {}; {ok}/3", parts.join(", ")))
}

const TINY_CONFIG: &str = r#"{
  "dataset": {"kind": "pets", "n_train": 48, "n_eval": 12, "pairs_per_user": 4, "embedding_dim": 8},
  "train": {"epochs": 1, "batch_size": 8, "model": {"embedding_dim": 8, "latent_dim": 4, "context_dim": 2,
            "encoder_hidden": 8, "flow_hidden": 6, "decoder_hidden": 8}},
  "boundlab": {"n_draws": 200, "lipschitz_pairs": 100, "grad_every": 25, "lemma2_eps_draws": 8},
  "sweep": {"variants": ["btl", "vpl", "spl"], "betas": [3e-6, 3e-5]},
  "seeds": [0, 1]
}"#;

fn run_cli(args: &[&str]) -> i32 {
    spl::cli::main_with(std::iter::once("spl").chain(args.iter().copied()))
}

fn collect_files(root: &Path, out: &mut BTreeMap<String, Vec<u8>>, base: &Path) {
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(&p, out, base);
        } else {
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

fn cli_session(root: &Path, config: &Path) -> i32 {
    let c = config.to_str().unwrap();
    let o = |sub: &str| root.join(sub).to_string_lossy().into_owned();
    let (gen, tr, ev, sw, bl, ex) = (o("generate"), o("train"), o("eval"), o("sweep"), o("boundlab"), o("export"));
    let data = format!("{gen}/dataset");
    let ckpt = format!("{tr}/checkpoint.bin");
    let mut worst = 0;
    for args in [
        vec!["generate", "--config", c, "--seed", "3", "--out", &gen],
        vec!["train", "--config", c, "--seed", "3", "--data", &data, "--out", &tr],
        vec!["eval", "--config", c, "--seed", "3", "--data", &data, "--checkpoint", &ckpt, "--out", &ev],
        vec!["sweep", "--config", c, "--data", &data, "--jobs", "2", "--out", &sw],
        vec!["boundlab", "--config", c, "--seed", "3", "--data", &data, "--checkpoint", &ckpt, "--per-draw", "--out", &bl],
        vec!["export-latents", "--config", c, "--seed", "3", "--data", &data, "--checkpoint", &ckpt, "--out", &ex],
    ] {
        worst = worst.max(run_cli(&args));
    }
    worst
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let root = tmp.path().join(rep);
        let code = cli_session(&root, &config);
        if code != 0 {
            return Outcome::new(false, format!("a command exited with {code}"));
        }
        let mut files = BTreeMap::new();
        collect_files(&root, &mut files, &root);
        trees.push(files);
    }
    let csvs: Vec<&String> = trees[0].keys().filter(|k| k.ends_with(".csv")).collect();
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let csv_diff = differing.iter().filter(|k| k.ends_with(".csv")).count();
    Outcome::new(
        csv_diff == 0 && !csvs.is_empty() && trees[0].len() == trees[1].len(),
        format!(
            "6 commands twice: {} metric CSVs, {} files total, {} differ {:?}",
            csvs.len(),
            trees[0].len(),
            differing.len(),
            differing
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let runs = Runs::default();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Option<Duration>, Check)> = vec![
        (1, "gradient correctness", Some(GRAD_BUDGET), Box::new(criterion_1)),
        (2, "flow density", Some(DENSITY_BUDGET), Box::new(criterion_2)),
        (3, "KL oracle", Some(KL_BUDGET), Box::new(criterion_3)),
        (4, "VPL equivalence at init", None, Box::new(criterion_4)),
        (5, "pets analog", Some(PETS_BUDGET), Box::new(|| criterion_5(&runs))),
        (6, "collapse/rescue grid", Some(GRID_BUDGET), Box::new(|| criterion_6(&runs))),
        (7, "mirroring", None, Box::new(|| criterion_7(&runs))),
        (8, "logp gap diagnostic", None, Box::new(|| criterion_8(&runs))),
        (9, "lemma verification", Some(LEMMA_BUDGET), Box::new(|| criterion_9(&runs))),
        (10, "ablation wiring", None, Box::new(|| criterion_10(&runs))),
        (11, "determinism", None, Box::new(criterion_11)),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, budget, check) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let took = t.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = out.pass && in_time;
        let budget_note = budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(*id);
        }
    }
    println!("acceptance: {}/{ran} passed, failed {failed:?}", ran - failed.len());
    if !failed.is_empty() && std::env::var("SPL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
