//! Adversarial training.
//!
//! One step, given covers `x` and messages `m`:
//!
//! 1. `x_wm = E(x, m)`; the batch is split into contiguous subsets, one per
//!    attack, and each subset's worst-case severity is found by exhaustive
//!    search over its grid (frozen random placements, no gradients).
//! 2. The discriminator takes one step on `A(x, x_wm)`.
//! 3. Encoder and decoder take one joint step on
//!    `J = L_D(m, D(N*(x_wm))) + λ_I·L_EI + λ_A·L_EA`, with the decoder loss
//!    pulled back through the attacks into the encoder.
//!
//! Normalization layers use batch statistics throughout a step; the decoder
//! sees each subset as its own batch because cropping changes the image size.

mod losses;
mod search;

pub use losses::{
    adversarial_loss, adversarial_loss_grad, decoder_loss, decoder_loss_grad, decoder_loss_sum,
    discriminator_loss, discriminator_loss_grad, image_loss, image_loss_grad, LOG_EPS,
};
pub use search::{argmax_severity, attacked_decoder_loss, harsher, worst_case_severity, worst_case_severity_with};

use std::time::{Duration, Instant};

use log::{debug, info};
use serde::Serialize;

use crate::attacks::{apply_with, AttackDraw, AttackOutput};
use crate::config::{AttackKind, AttackSpec, LossWeights, SearchScope, TrainConfig, TrainMode, TrainingConfig};
use crate::error::{Error, Result};
use crate::eval::identity_metrics;
use crate::ingest::{epoch_batches, sample_messages, ImageDataset};
use crate::models::{init_models, DecoderCache, EncoderCache, ModelBundle};
use crate::nn::optim::Optimizer;
use crate::nn::{NormMode, ParamStore};
use crate::rng::{make_rng, RngState};
use crate::tensor::{Real, Tensor};
use crate::types::{ImageBatch, ImageRole, MessageBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchOptions {
    pub mode: TrainMode,
    pub scope: SearchScope,
    /// Reuse the search's random placements for the gradient pass instead of
    /// drawing new ones.
    pub replay_draws: bool,
}

impl SearchOptions {
    pub fn from_config(t: &TrainingConfig) -> Self {
        SearchOptions {
            mode: t.mode,
            scope: t.search,
            replay_draws: t.replay_search_draws,
        }
    }
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions::from_config(&TrainingConfig::default())
    }
}

/// One attack application in the gradient pass: items `start..start + len`
/// get `kind` at `severity` with placements `draw`.
#[derive(Clone, Debug)]
pub struct PlannedAttack {
    pub kind: AttackKind,
    pub severity: f64,
    pub start: usize,
    pub len: usize,
    pub draw: AttackDraw,
}

/// Result of one severity search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub attack: AttackKind,
    pub start: usize,
    pub len: usize,
    pub severity: f64,
    /// `L_D` (mean over the searched items) at `severity` with the search draw.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct InnerMaxResult<T = f32> {
    pub outcomes: Vec<SearchOutcome>,
    /// Each searched group attacked at its `s*` with the search draw.
    pub attacked: Vec<ImageBatch<T>>,
}

/// A watermarked batch, its worst-case attack plan and the attacked
/// sub-batches for the gradient pass.
pub struct AttackedBatch<T = f32> {
    pub watermarked: ImageBatch<T>,
    pub plan: Vec<PlannedAttack>,
    pub attacked: Vec<AttackOutput<T>>,
    pub search: InnerMaxResult<T>,
    encoder_cache: EncoderCache<T>,
}

struct Unit {
    attack: usize,
    start: usize,
    len: usize,
}

fn split_units(attacks: &[AttackSpec], sizes: &[usize], b: usize, scope: SearchScope) -> Result<Vec<Unit>> {
    if attacks.is_empty() || attacks.len() != sizes.len() {
        return Err(Error::contract(format!(
            "{} subset sizes for {} attacks",
            sizes.len(),
            attacks.len()
        )));
    }
    if sizes.iter().sum::<usize>() != b {
        return Err(Error::contract(format!("subset sizes {sizes:?} do not sum to the batch size {b}")));
    }
    let mut units = Vec::new();
    let mut start = 0;
    for (i, &k) in sizes.iter().enumerate() {
        match scope {
            SearchScope::SubBatch if k > 0 => units.push(Unit { attack: i, start, len: k }),
            SearchScope::SubBatch => {}
            SearchScope::PerImage => units.extend((start..start + k).map(|s| Unit {
                attack: i,
                start: s,
                len: 1,
            })),
        }
        start += k;
    }
    Ok(units)
}

/// Encodes `cover`, searches every subset's worst-case severity and attacks
/// the subsets at those severities for the gradient pass.
pub fn build_attacked_batch<T: Real>(
    bundle: &ModelBundle<T>,
    cover: &ImageBatch<T>,
    m: &MessageBatch,
    attacks: &[AttackSpec],
    sizes: &[usize],
    opts: SearchOptions,
    rng: &mut RngState,
) -> Result<AttackedBatch<T>> {
    if opts.mode == TrainMode::FixedSeverity {
        if let Some(a) = attacks.iter().find(|a| a.severities().len() != 1) {
            return Err(Error::contract(format!("fixed-severity mode needs a single severity for `{}`", a.kind)));
        }
    }
    let b = cover.batch_size();
    let units = split_units(attacks, sizes, b, opts.scope)?;
    let (y, encoder_cache) = bundle.encoder.forward(cover.tensor(), &m.to_tensor(), NormMode::Batch)?;
    let x_wm = ImageBatch::new(y, ImageRole::Watermarked)?;
    let (h, w) = (x_wm.height(), x_wm.width());

    let search_draws: Vec<AttackDraw> = units
        .iter()
        .map(|u| AttackDraw::sample(attacks[u.attack].kind, u.len, h, w, rng))
        .collect();
    let mut outcomes = Vec::with_capacity(units.len());
    let mut searched = Vec::with_capacity(units.len());
    for (u, draw) in units.iter().zip(&search_draws) {
        let attack = &attacks[u.attack];
        let wm_u = x_wm.narrow(u.start, u.len);
        let cover_u = cover.narrow(u.start, u.len);
        let m_u = m.narrow(u.start, u.len);
        let (s, loss) = worst_case_severity_with(&bundle.decoder, attack, &wm_u, &cover_u, &m_u, draw, NormMode::Batch)?;
        searched.push(apply_with(attack.kind, &wm_u, &cover_u, s, draw)?.image);
        outcomes.push(SearchOutcome {
            attack: attack.kind,
            start: u.start,
            len: u.len,
            severity: s,
            loss: loss / u.len as f64,
        });
    }

    let mut plan = Vec::with_capacity(units.len());
    let mut attacked = Vec::with_capacity(units.len());
    for ((u, outcome), search_draw) in units.iter().zip(&outcomes).zip(search_draws) {
        let kind = attacks[u.attack].kind;
        let draw = if opts.replay_draws {
            search_draw
        } else {
            AttackDraw::sample(kind, u.len, h, w, rng)
        };
        let out = apply_with(
            kind,
            &x_wm.narrow(u.start, u.len),
            &cover.narrow(u.start, u.len),
            outcome.severity,
            &draw,
        )?;
        attacked.push(out);
        plan.push(PlannedAttack {
            kind,
            severity: outcome.severity,
            start: u.start,
            len: u.len,
            draw,
        });
    }
    Ok(AttackedBatch {
        watermarked: x_wm,
        plan,
        attacked,
        search: InnerMaxResult {
            outcomes,
            attacked: searched,
        },
        encoder_cache,
    })
}

/// Losses of the joint encoder/decoder objective and their parameter
/// gradients.
pub struct JointOutput<T = f32> {
    pub l_d: f64,
    pub l_ei: f64,
    pub l_ea: f64,
    pub j: f64,
    pub encoder_grads: ParamStore<T>,
    pub decoder_grads: ParamStore<T>,
    /// `∂J/∂x_wm`, the gradient the encoder's clamp passes straight through.
    pub watermark_grad: Tensor<T>,
    decoder_caches: Vec<DecoderCache<T>>,
}

#[allow(clippy::too_many_arguments)]
fn joint_pass<T: Real>(
    bundle: &ModelBundle<T>,
    cover: &ImageBatch<T>,
    m: &MessageBatch,
    x_wm: &ImageBatch<T>,
    encoder_cache: &EncoderCache<T>,
    plan: &[PlannedAttack],
    attacked: &[AttackOutput<T>],
    weights: LossWeights,
) -> Result<JointOutput<T>> {
    let b = cover.batch_size();
    let mut decoder_grads = bundle.decoder.params.zeros_like();
    let mut g_wm = Tensor::zeros(x_wm.tensor().shape());
    let per = g_wm.item_len();
    let mut ld_sum = 0.0;
    let mut decoder_caches = Vec::with_capacity(plan.len());
    for (p, out) in plan.iter().zip(attacked) {
        let m_u = m.narrow(p.start, p.len);
        let (values, cache) = bundle.decoder.forward(out.image.tensor(), NormMode::Batch)?;
        ld_sum += decoder_loss_sum(&m_u, &values)?;
        let g_values = decoder_loss_grad(&m_u, &values, 1.0 / b as f64);
        let g_attacked = bundle.decoder.backward(&cache, &g_values, &mut decoder_grads);
        let g_u = out.backward(&g_attacked);
        for (dst, &g) in g_wm.data_mut()[p.start * per..(p.start + p.len) * per].iter_mut().zip(g_u.data()) {
            *dst += g;
        }
        decoder_caches.push(cache);
    }
    let l_d = ld_sum / b as f64;

    let l_ei = image_loss(cover, x_wm)?;
    g_wm.axpy(T::lit(weights.lambda_image), &image_loss_grad(cover.tensor(), x_wm.tensor()))?;

    // scored inside the same [covers; watermarked] batch the discriminator
    // trains on, so its normalization statistics match
    let joined = Tensor::concat(&[cover.tensor(), x_wm.tensor()])?;
    let (probs, d_cache) = bundle.discriminator.forward(&joined, NormMode::Batch)?;
    let c_wm = &probs.data()[b..];
    let l_ea = adversarial_loss(c_wm);
    if weights.lambda_adv != 0.0 {
        // gradients w.r.t. the discriminator's own parameters are discarded
        let mut scratch = bundle.discriminator.params.zeros_like();
        let mut g_c = vec![T::zero(); b];
        g_c.extend(adversarial_loss_grad(c_wm));
        let g_in = bundle.discriminator.backward(&d_cache, &Tensor::from_vec(&[2 * b], g_c)?, &mut scratch);
        g_wm.axpy(T::lit(weights.lambda_adv), &g_in.narrow(b, b))?;
    }

    let mut encoder_grads = bundle.encoder.params.zeros_like();
    bundle.encoder.backward(encoder_cache, &g_wm, &mut encoder_grads);
    Ok(JointOutput {
        l_d,
        l_ei,
        l_ea,
        j: l_d + weights.lambda_image * l_ei + weights.lambda_adv * l_ea,
        encoder_grads,
        decoder_grads,
        watermark_grad: g_wm,
        decoder_caches,
    })
}

/// `J` and its encoder/decoder gradients for a given attack plan; the
/// deterministic function of the parameters that the training step descends.
pub fn joint_objective<T: Real>(
    bundle: &ModelBundle<T>,
    cover: &ImageBatch<T>,
    m: &MessageBatch,
    plan: &[PlannedAttack],
    weights: LossWeights,
) -> Result<JointOutput<T>> {
    let (y, encoder_cache) = bundle.encoder.forward(cover.tensor(), &m.to_tensor(), NormMode::Batch)?;
    let x_wm = ImageBatch::new(y, ImageRole::Watermarked)?;
    let attacked = plan
        .iter()
        .map(|p| {
            apply_with(
                p.kind,
                &x_wm.narrow(p.start, p.len),
                &cover.narrow(p.start, p.len),
                p.severity,
                &p.draw,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    joint_pass(bundle, cover, m, &x_wm, &encoder_cache, plan, &attacked, weights)
}

/// `A(x, x_wm)` and its gradient w.r.t. the discriminator parameters. Covers
/// and watermarked images are normalized as one batch.
pub fn discriminator_objective<T: Real>(
    bundle: &ModelBundle<T>,
    cover: &ImageBatch<T>,
    x_wm: &ImageBatch<T>,
) -> Result<(f64, ParamStore<T>, crate::models::DiscriminatorCache<T>)> {
    let b = cover.batch_size();
    let joined = Tensor::concat(&[cover.tensor(), x_wm.tensor()])?;
    let (probs, cache) = bundle.discriminator.forward(&joined, NormMode::Batch)?;
    let (c_cover, c_wm) = probs.data().split_at(b);
    let a = discriminator_loss(c_cover, c_wm)?;
    let (g_cover, g_wm) = discriminator_loss_grad(c_cover, c_wm);
    let g = Tensor::from_vec(&[2 * b], g_cover.into_iter().chain(g_wm).collect())?;
    let mut grads = bundle.discriminator.params.zeros_like();
    bundle.discriminator.backward(&cache, &g, &mut grads);
    Ok((a, grads, cache))
}

/// Update rules for the three networks.
#[derive(Clone, Debug)]
pub struct Optimizers<T = f32> {
    pub encoder: Optimizer<T>,
    pub decoder: Optimizer<T>,
    pub discriminator: Optimizer<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(t: &TrainingConfig, bundle: &ModelBundle<T>) -> Self {
        Optimizers {
            encoder: Optimizer::new(t.optimizer, t.lr_encoder, &bundle.encoder.params),
            decoder: Optimizer::new(t.optimizer, t.lr_decoder, &bundle.decoder.params),
            discriminator: Optimizer::new(t.optimizer, t.lr_discriminator, &bundle.discriminator.params),
        }
    }
}

/// Telemetry for one training step.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub l_d: f64,
    pub l_ei: f64,
    pub l_ea: f64,
    /// Discriminator loss before its update.
    pub a: f64,
    pub j: f64,
    pub severities: Vec<SearchOutcome>,
    /// Kept out of the serialized record so histories are reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

fn ensure_finite(step: u64, what: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: what.into() })
    }
}

/// One discriminator update followed by one joint encoder/decoder update.
pub fn train_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    optim: &mut Optimizers<T>,
    cover: &ImageBatch<T>,
    m: &MessageBatch,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<StepReport> {
    let started = Instant::now();
    let step = bundle.step;
    let t = &cfg.training;
    let batch = build_attacked_batch(
        bundle,
        cover,
        m,
        &cfg.attacks,
        &t.subset_sizes,
        SearchOptions::from_config(t),
        rng,
    )?;

    let (a, d_grads, d_cache) = discriminator_objective(bundle, cover, &batch.watermarked)?;
    ensure_finite(step, "discriminator loss", a)?;
    optim.discriminator.step(&mut bundle.discriminator.params, &d_grads);
    bundle.discriminator.update_running(&d_cache);

    let joint = joint_pass(
        bundle,
        cover,
        m,
        &batch.watermarked,
        &batch.encoder_cache,
        &batch.plan,
        &batch.attacked,
        t.loss_weights(),
    )?;
    ensure_finite(step, "decoder loss", joint.l_d)?;
    ensure_finite(step, "image loss", joint.l_ei)?;
    ensure_finite(step, "adversarial loss", joint.l_ea)?;
    optim.encoder.step(&mut bundle.encoder.params, &joint.encoder_grads);
    optim.decoder.step(&mut bundle.decoder.params, &joint.decoder_grads);
    bundle.encoder.update_running(&batch.encoder_cache);
    for cache in &joint.decoder_caches {
        bundle.decoder.update_running(cache);
    }
    if !bundle.all_finite() {
        return Err(Error::NonFinite { step, what: "parameters".into() });
    }
    bundle.step += 1;
    Ok(StepReport {
        step,
        epoch: 0,
        l_d: joint.l_d,
        l_ei: joint.l_ei,
        l_ea: joint.l_ea,
        a,
        j: joint.j,
        severities: batch.search.outcomes,
        wall_time: started.elapsed(),
    })
}

/// Per-epoch summary, evaluated without attacks on the held-out set.
#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_j: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_bit_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_psnr: Option<f64>,
}

/// Hooks for streaming training output (history files, checkpoints).
pub trait TrainObserver {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _summary: &EpochSummary, _bundle: &ModelBundle<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub history: Vec<StepReport>,
    pub epochs: Vec<EpochSummary>,
    pub stopped_early: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Whether the moving average of `J` over the last `window` steps moved by
/// less than `tol` (relative) against the window before it.
fn converged(history: &[StepReport], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let recent = mean(history[n - window..].iter().map(|r| r.j));
    let before = mean(history[n - 2 * window..n - window].iter().map(|r| r.j));
    (recent - before).abs() / before.abs().max(1e-12) < tol
}

/// Runs the configured number of epochs of [`train_step`].
///
/// Randomness is split from `training.seed` into independent streams for
/// initialization, data order, messages and attacks.
pub fn train(
    cfg: &TrainConfig,
    train_set: &ImageDataset,
    eval_set: Option<&ImageDataset>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let arch = &cfg.model;
    let t = &cfg.training;
    for ds in std::iter::once(train_set).chain(eval_set) {
        if ds.size() != (arch.image_height, arch.image_width) {
            return Err(Error::invalid(
                "model.image_size",
                format!(
                    "dataset images are {:?} but the model expects ({}, {})",
                    ds.size(),
                    arch.image_height,
                    arch.image_width
                ),
            ));
        }
    }
    let mut root = make_rng(t.seed);
    let mut init_rng = root.fork();
    let mut data_rng = root.fork();
    let mut message_rng = root.fork();
    let mut attack_rng = root.fork();

    let mut bundle: ModelBundle<f32> = init_models(arch, &mut init_rng)?;
    let mut optim = Optimizers::new(t, &bundle);
    let fixed_messages = if t.fresh_messages {
        None
    } else {
        Some(sample_messages(&mut message_rng, t.batch_size, arch.message_length)?)
    };
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..t.epochs {
        let order = epoch_batches(train_set.len(), t.batch_size, &mut data_rng)?;
        let steps = order.len();
        for idx in order {
            let cover = train_set.batch(&idx);
            let m = match &fixed_messages {
                Some(m) => m.clone(),
                None => sample_messages(&mut message_rng, t.batch_size, arch.message_length)?,
            };
            let mut report = train_step(&mut bundle, &mut optim, &cover, &m, &cfg, &mut attack_rng)?;
            report.epoch = epoch;
            debug!("step {} J={:.5} L_D={:.5}", report.step, report.j, report.l_d);
            observer.on_step(&report)?;
            history.push(report);
        }
        let (eval_bit_accuracy, eval_psnr) = match eval_set {
            Some(ds) => {
                let (acc, psnr) = identity_metrics(&bundle, ds, cfg.eval.seed, cfg.eval.batch_size)?;
                (Some(acc), Some(psnr))
            }
            None => (None, None),
        };
        let summary = EpochSummary {
            epoch,
            steps,
            mean_j: mean(history[history.len() - steps..].iter().map(|r| r.j)),
            eval_bit_accuracy,
            eval_psnr,
        };
        info!(
            "epoch {epoch}: mean J {:.5}{}",
            summary.mean_j,
            eval_bit_accuracy.map_or(String::new(), |a| format!(", bit accuracy {a:.4}"))
        );
        observer.on_epoch(&summary, &bundle)?;
        epochs.push(summary);
        if let Some(window) = t.early_stop_window {
            if converged(&history, window, t.early_stop_tol) {
                info!("stopping early after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        bundle,
        history,
        epochs,
        stopped_early,
    })
}
