//! Central finite-difference checks of the hand-written backward passes.
//!
//! Everything runs in f64. Errors are reported as
//! `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)` over all checked coordinates.

use crate::attacks::{apply_with, AttackDraw};
use crate::config::{ArchConfig, AttackKind, LossWeights};
use crate::error::{Error, Result};
use crate::ingest::sample_messages;
use crate::models::{Decoder, Discriminator, Encoder, ModelBundle};
use crate::nn::{NormMode, ParamStore};
use crate::rng::{make_rng, RngState};
use crate::tensor::Tensor;
use crate::trainer::{discriminator_objective, joint_objective, PlannedAttack};
use crate::types::{ImageBatch, ImageRole, MessageBatch};

const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.rel_error <= tol
    }
}

pub fn relative_error(fd: &[f64], analytic: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fd.iter().zip(analytic).map(|(a, b)| a - b).collect();
    let scale = norm(fd).max(norm(analytic));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn images(n: usize, h: usize, w: usize, role: ImageRole, rng: &mut RngState) -> ImageBatch<f64> {
    ImageBatch::new(Tensor::from_fn(&[n, 3, h, w], |_| rng.uniform_range(0.2, 0.8)), role).expect("in range")
}

/// Checks the pull-back of `kind` at `severity` on a `2 × 3 × h × w` batch
/// against `Σ r ⊙ N(x_wm)` for a random projection `r`. JPEG output pixels
/// that hit the clamp get zero weight.
pub fn check_attack(kind: AttackKind, severity: f64, h: usize, w: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = make_rng(seed);
    let x_wm = images(2, h, w, ImageRole::Watermarked, &mut rng);
    let cover = images(2, h, w, ImageRole::Cover, &mut rng);
    let draw = AttackDraw::sample(kind, 2, h, w, &mut rng);
    let out = apply_with(kind, &x_wm, &cover, severity, &draw)?;
    let clamped = out.clamped_pixels();
    let r = Tensor::from_fn(out.image.tensor().shape(), |i| match &clamped {
        Some(c) if c[i] => 0.0,
        _ => rng.uniform_range(-1.0, 1.0),
    });
    let analytic = out.backward(&r);
    let project = |x: &ImageBatch<f64>| -> Result<f64> {
        let y = apply_with(kind, x, &cover, severity, &draw)?;
        Ok(y.image.tensor().data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let mut fd = Vec::with_capacity(x_wm.tensor().len());
    for i in 0..x_wm.tensor().len() {
        let mut up = x_wm.tensor().clone();
        let mut dn = x_wm.tensor().clone();
        up.data_mut()[i] += STEP;
        dn.data_mut()[i] -= STEP;
        let fu = project(&ImageBatch::new(up, ImageRole::Watermarked)?)?;
        let fdn = project(&ImageBatch::new(dn, ImageRole::Watermarked)?)?;
        fd.push((fu - fdn) / (2.0 * STEP));
    }
    Ok(GradCheck {
        name: format!("{kind} {severity} input"),
        checked: fd.len(),
        rel_error: relative_error(&fd, analytic.data()),
    })
}

fn perturbed_fd(
    store: &mut ParamStore<f64>,
    mut eval: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut fd = Vec::with_capacity(store.numel());
    for t in 0..store.len() {
        for i in 0..store.tensors()[t].len() {
            let orig = store.tensors()[t].data()[i];
            store.tensors_mut()[t].data_mut()[i] = orig + STEP;
            let up = eval(store)?;
            store.tensors_mut()[t].data_mut()[i] = orig - STEP;
            let dn = eval(store)?;
            store.tensors_mut()[t].data_mut()[i] = orig;
            fd.push((up - dn) / (2.0 * STEP));
        }
    }
    Ok(fd)
}

fn flat(store: &ParamStore<f64>) -> Vec<f64> {
    store.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Checks the encoder, decoder and discriminator parameter gradients of the
/// training objectives on a freshly initialized model, with `kind` at
/// `severity` applied to the whole batch. Watermarked pixels that the encoder
/// clamps are excluded from the encoder's analytic gradient, since the clamp
/// is passed straight through during training.
pub fn check_networks(
    arch: &ArchConfig,
    kind: AttackKind,
    severity: f64,
    weights: LossWeights,
    batch: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    // the networks run at any side >= 8; only ingestion insists on 16
    let mut rng = make_rng(seed);
    let mut bundle = ModelBundle::<f64> {
        arch: arch.clone(),
        encoder: Encoder::new(arch, &mut rng),
        decoder: Decoder::new(arch, &mut rng),
        discriminator: Discriminator::new(arch, &mut rng),
        step: 0,
    };
    let (h, w) = (arch.image_height, arch.image_width);
    let cover = images(batch, h, w, ImageRole::Cover, &mut rng);
    let m: MessageBatch = sample_messages(&mut rng, batch, arch.message_length)?;
    let plan = vec![PlannedAttack {
        kind,
        severity,
        start: 0,
        len: batch,
        draw: AttackDraw::sample(kind, batch, h, w, &mut rng),
    }];
    let joint = joint_objective(&bundle, &cover, &m, &plan, weights)?;

    let (y, cache) = bundle.encoder.forward(cover.tensor(), &m.to_tensor(), NormMode::Batch)?;
    let open = joint
        .watermark_grad
        .zip_map(&y, |g, v| if v > 0.0 && v < 1.0 { g } else { 0.0 })?;
    let mut enc_grads = bundle.encoder.params.zeros_like();
    bundle.encoder.backward(&cache, &open, &mut enc_grads);
    let unclamped = y.data().iter().filter(|&&v| v > 0.0 && v < 1.0).count();
    if unclamped == 0 {
        return Err(Error::contract("every watermarked pixel is clamped"));
    }

    let mut checks = Vec::new();
    let mut enc = bundle.encoder.params.clone();
    let fd = perturbed_fd(&mut enc, |p| {
        let mut b = bundle.clone();
        b.encoder.params = p.clone();
        Ok(joint_objective(&b, &cover, &m, &plan, weights)?.j)
    })?;
    checks.push(GradCheck {
        name: format!("encoder params under {kind}"),
        checked: fd.len(),
        rel_error: relative_error(&fd, &flat(&enc_grads)),
    });

    let mut dec = bundle.decoder.params.clone();
    let fd = perturbed_fd(&mut dec, |p| {
        let mut b = bundle.clone();
        b.decoder.params = p.clone();
        Ok(joint_objective(&b, &cover, &m, &plan, weights)?.j)
    })?;
    checks.push(GradCheck {
        name: format!("decoder params under {kind}"),
        checked: fd.len(),
        rel_error: relative_error(&fd, &flat(&joint.decoder_grads)),
    });

    let x_wm = ImageBatch::new(y, ImageRole::Watermarked)?;
    let (_, d_grads, _) = discriminator_objective(&bundle, &cover, &x_wm)?;
    let mut disc = bundle.discriminator.params.clone();
    let fd = perturbed_fd(&mut disc, |p| {
        bundle.discriminator.params = p.clone();
        Ok(discriminator_objective(&bundle, &cover, &x_wm)?.0)
    })?;
    checks.push(GradCheck {
        name: "discriminator params".into(),
        checked: fd.len(),
        rel_error: relative_error(&fd, &flat(&d_grads)),
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blur_passes_and_empty_checks_fail() {
        let c = check_attack(AttackKind::GaussianBlur, 1.0, 8, 8, 0).unwrap();
        assert!(c.passes(1e-2), "{c:?}");
        assert!(!GradCheck { checked: 0, ..c }.passes(1e-2));
    }
}
