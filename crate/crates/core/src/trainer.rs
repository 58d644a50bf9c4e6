//! Training on heterogeneous inputs with the loss computed on surrogate
//! pairs.
//!
//! The split at the heart of this module: [`InputPolicy`] decides what the
//! network *sees*, [`SurrogateMode`] decides what the loss *measures*. The
//! displacement predicted from the inputs is applied to the surrogates, so
//! supervision can come from cleaner, masked, same-modality, or label-map
//! observations of the same content while the network learns to accept the
//! inputs as they are. With identity surrogates this collapses to standard
//! unsupervised training, bit for bit.

use crate::error::{Error, Result};
use crate::grid::{labels_to_onehot, Grid};
use crate::losses::{surrogate_objective, tre_loss, LossConfig};
use crate::metrics::{mean_dice, mean_tre, ndv};
use crate::model::{derive_seed, regnet_init, ArchConfig, RegNet};
use crate::optim::AdamConfig;
use crate::synth::Pair;
use crate::tape::Tape;
use crate::warp::{warp_image, Interp};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputPolicy {
    /// The observed images, artifacts and all.
    Raw,
    /// The artifact-free observations.
    Clean,
    /// Images multiplied by their ROI masks.
    Masked,
    /// One coin flip per use of the pair: both sides masked or both raw.
    RandomMix,
    /// Fixed side masked, moving side raw; an input condition no
    /// single-policy training run ever sees.
    MixedPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateMode {
    /// Surrogates are the model inputs themselves.
    Identity,
    /// The artifact-free observations.
    BiasCorrected,
    /// Raw images multiplied by their ROI masks, regardless of what the
    /// model saw.
    Masked,
    /// The same-modality observations of both sides.
    PairedModality,
    /// One-hot label maps (pair with the Dice similarity).
    LabelMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValMetric {
    /// Mean foreground Dice of warped moving labels; higher is better.
    Dice,
    /// Mean landmark error in pixels; lower is better.
    Tre,
    /// The training objective itself averaged over validation pairs; lower
    /// is better. The only choice that needs no labels or landmarks at
    /// validation time, which is what makes it the honest selection rule
    /// for unsupervised training: a model whose loss rewards chasing
    /// artifacts gets no label-based safety net to pick its checkpoint.
    Loss,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub input_policy: InputPolicy,
    pub surrogates: SurrogateMode,
    /// Weight of the landmark-supervision term; 0 disables it.
    pub w_tre: f64,
    pub adam: AdamConfig,
    pub max_steps: usize,
    /// Stop after this many steps without a validation improvement.
    pub patience: usize,
    pub val_every: usize,
    pub val_metric: ValMetric,
    /// Input policy applied when validating and testing.
    pub val_policy: InputPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            input_policy: InputPolicy::Raw,
            surrogates: SurrogateMode::Identity,
            w_tre: 0.0,
            adam: AdamConfig::default(),
            max_steps: 5000,
            patience: 500,
            val_every: 50,
            val_metric: ValMetric::Dice,
            val_policy: InputPolicy::Raw,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub val: Option<f64>,
}

pub struct TrainOutcome {
    /// Network restored to the best validation checkpoint.
    pub net: RegNet,
    pub history: Vec<HistoryRow>,
    /// Best validation metric in its natural orientation.
    pub best_val: f64,
    pub best_step: usize,
    pub steps_run: usize,
}

fn masked_image(s: &crate::synth::Sample) -> Result<Grid> {
    s.image.zip(&s.mask, |v, m| v * m)
}

/// Resolves the images the model sees for one use of a pair. `RandomMix`
/// draws one coin from `rng` and applies it to both sides, so a mixed
/// masked/raw pair never appears under any training policy.
pub fn apply_input_policy(
    pair: &Pair,
    policy: InputPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Grid, Grid)> {
    Ok(match policy {
        InputPolicy::Raw => (pair.fixed.image.clone(), pair.moving.image.clone()),
        InputPolicy::Clean => (pair.fixed.clean.clone(), pair.moving.clean.clone()),
        InputPolicy::Masked => (masked_image(&pair.fixed)?, masked_image(&pair.moving)?),
        InputPolicy::RandomMix => {
            if rng.gen_bool(0.5) {
                (masked_image(&pair.fixed)?, masked_image(&pair.moving)?)
            } else {
                (pair.fixed.image.clone(), pair.moving.image.clone())
            }
        }
        InputPolicy::MixedPair => (masked_image(&pair.fixed)?, pair.moving.image.clone()),
    })
}

/// The grids the loss is computed on. Only `Identity` depends on what the
/// model actually saw.
pub fn build_surrogates(
    pair: &Pair,
    mode: SurrogateMode,
    inputs: &(Grid, Grid),
) -> Result<(Grid, Grid)> {
    Ok(match mode {
        SurrogateMode::Identity => (inputs.0.clone(), inputs.1.clone()),
        SurrogateMode::BiasCorrected | SurrogateMode::PairedModality => {
            (pair.fixed.clean.clone(), pair.moving.clean.clone())
        }
        SurrogateMode::Masked => (masked_image(&pair.fixed)?, masked_image(&pair.moving)?),
        SurrogateMode::LabelMaps => {
            let k = pair.num_labels + 1;
            (
                labels_to_onehot(&pair.fixed.labels, k)?,
                labels_to_onehot(&pair.moving.labels, k)?,
            )
        }
    })
}

/// One pair's loss under the surrogate construction, and the parameter
/// gradients when `with_grads` is set.
fn step_loss(
    net: &RegNet,
    pair: &Pair,
    inputs: &(Grid, Grid),
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Grid>>)> {
    let (sf, sm) = build_surrogates(pair, cfg.surrogates, inputs)?;
    let mut t = Tape::new();
    let f_in = t.input(inputs.0.clone())?;
    let m_in = t.input(inputs.1.clone())?;
    let (disp, param_nodes) = net.forward(&mut t, f_in, m_in)?;
    let sf_n = t.input(sf)?;
    let sm_n = t.input(sm)?;
    let mut loss = surrogate_objective(&mut t, sf_n, sm_n, disp, &cfg.loss)?;
    if cfg.w_tre != 0.0 {
        let tl = tre_loss(&mut t, disp, &pair.fixed_landmarks, &pair.moving_landmarks, (1.0, 1.0))?;
        let tw = t.mul_s(tl, cfg.w_tre)?;
        loss = t.add(loss, tw)?;
    }
    let lv = t.value(loss).scalar_value();
    if !lv.is_finite() {
        return Err(Error::non_finite("trainer", format!("loss {}", lv)));
    }
    if !with_grads {
        return Ok((lv, None));
    }
    t.backward(loss)?;
    let grads = param_nodes
        .iter()
        .zip(&net.params)
        .map(|(&n, p)| {
            t.take_grad(n)
                .unwrap_or_else(|| Grid::zeros(p.value.h(), p.value.w(), p.value.c()))
        })
        .collect();
    Ok((lv, Some(grads)))
}

/// Predicted displacement for one image pair.
pub fn predict(net: &RegNet, fixed: &Grid, moving: &Grid) -> Result<Grid> {
    let mut t = Tape::new();
    let f = t.input(fixed.clone())?;
    let m = t.input(moving.clone())?;
    let (disp, _) = net.forward(&mut t, f, m)?;
    Ok(t.value(disp).clone())
}

#[derive(Debug, Clone, Copy)]
pub struct PairEval {
    /// Task metric: Dice or TRE depending on the request.
    pub score: f64,
    /// Folded-area fraction of the predicted field.
    pub ndv: f64,
}

/// Runs the network over pairs under an input policy and measures the task
/// metric plus field regularity. `ValMetric::Loss` is rejected here: it
/// depends on the full training config, see [`validation_loss`].
pub fn evaluate(
    net: &RegNet,
    pairs: &[Pair],
    policy: InputPolicy,
    metric: ValMetric,
    seed: u64,
) -> Result<Vec<PairEval>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xEE));
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let inputs = apply_input_policy(pair, policy, &mut rng)?;
        let disp = predict(net, &inputs.0, &inputs.1)?;
        let score = match metric {
            ValMetric::Dice => {
                let warped = warp_image(&pair.moving.labels, &disp, Interp::Nearest)?;
                mean_dice(&pair.fixed.labels, &warped, pair.num_labels)?
            }
            ValMetric::Tre => mean_tre(
                &disp,
                &pair.fixed_landmarks,
                &pair.moving_landmarks,
                (1.0, 1.0),
            )?,
            ValMetric::Loss => {
                return Err(Error::invalid(
                    "evaluate",
                    "loss validation needs the training config, use validation_loss",
                ))
            }
        };
        out.push(PairEval { score, ndv: ndv(&disp)? });
    }
    Ok(out)
}

/// Mean training objective over pairs, inputs drawn under the validation
/// policy. The rng is re-seeded per call so a coin-flipping policy sees the
/// same coins at every validation, keeping scores comparable across steps.
pub fn validation_loss(net: &RegNet, pairs: &[Pair], cfg: &TrainConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("validation_loss", "need at least one pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xEE));
    let mut total = 0.0;
    for pair in pairs {
        let inputs = apply_input_policy(pair, cfg.val_policy, &mut rng)?;
        let (lv, _) = step_loss(net, pair, &inputs, cfg, false)?;
        total += lv;
    }
    Ok(total / pairs.len() as f64)
}

pub fn mean_score(evals: &[PairEval]) -> f64 {
    evals.iter().map(|e| e.score).sum::<f64>() / evals.len() as f64
}

/// Orientation-aware comparison: is `a` a better metric value than `b`?
fn improved(metric: ValMetric, a: f64, b: f64) -> bool {
    match metric {
        ValMetric::Dice => a > b,
        ValMetric::Tre | ValMetric::Loss => a < b,
    }
}

/// Trains on pairs sampled uniformly with replacement, validating every
/// `val_every` steps and keeping the best-validation weights. Stops early
/// once `patience` steps pass without improvement. A non-finite loss or a
/// non-finite value anywhere in the step aborts with `Diverged`.
pub fn train(
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::invalid("train", "need at least one training and validation pair"));
    }
    if cfg.max_steps == 0 || cfg.val_every == 0 {
        return Err(Error::invalid("train", "max_steps and val_every must be positive"));
    }
    let mut net = regnet_init(&cfg.arch, derive_seed(cfg.seed, 0x11))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x22));

    let mut history = Vec::new();
    let mut best_val = match cfg.val_metric {
        ValMetric::Dice => f64::NEG_INFINITY,
        ValMetric::Tre | ValMetric::Loss => f64::INFINITY,
    };
    let mut best_step = 0usize;
    let mut best_params: Option<Vec<Grid>> = None;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        steps_run = step;
        let pair = &train_pairs[rng.gen_range(0..train_pairs.len())];
        let inputs = apply_input_policy(pair, cfg.input_policy, &mut rng)?;
        let (lv, grads) = step_loss(&net, pair, &inputs, cfg, true).map_err(|e| match e {
            Error::NonFinite { .. } => {
                Error::Diverged { step, detail: "non-finite loss".into() }
            }
            other => other,
        })?;
        for (p, g) in net.params.iter_mut().zip(grads.expect("grads requested")) {
            p.adam_update(&g, &cfg.adam).map_err(|e| match e {
                Error::NonFinite { .. } => {
                    Error::Diverged { step, detail: "non-finite parameter update".into() }
                }
                other => other,
            })?;
        }

        let mut val = None;
        if step % cfg.val_every == 0 || step == cfg.max_steps {
            let score = match cfg.val_metric {
                ValMetric::Loss => validation_loss(&net, val_pairs, cfg)?,
                m => mean_score(&evaluate(&net, val_pairs, cfg.val_policy, m, cfg.seed)?),
            };
            val = Some(score);
            if best_params.is_none() || improved(cfg.val_metric, score, best_val) {
                best_val = score;
                best_step = step;
                best_params = Some(net.params.iter().map(|p| p.value.clone()).collect());
            }
        }
        history.push(HistoryRow { step, loss: lv, val });
        if best_params.is_some() && step - best_step >= cfg.patience {
            break;
        }
    }

    if let Some(best) = best_params {
        for (p, g) in net.params.iter_mut().zip(best) {
            p.value = g;
        }
    }
    Ok(TrainOutcome { net, history, best_val, best_step, steps_run })
}
