//! Differentiable image distortions, the uncertainty set of the inner
//! maximization.
//!
//! Every operator is a function of the watermarked batch at a fixed severity
//! and a fixed random draw, and exposes the transpose of its Jacobian through
//! [`AttackOutput::backward`] so decoder gradients reach the encoder.
//!
//! Randomized operators (crop, cropout, dropout) read their randomness from an
//! [`AttackDraw`]: uniforms sampled once from an [`RngState`]. A draw does not
//! depend on the severity, so the same draw can be replayed across every point
//! of a severity grid.

mod blur;
mod jpeg;

use crate::config::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};
use crate::types::{ImageBatch, ImageRole, MIN_SPATIAL};

pub use blur::{gaussian_kernel, kernel_size, reflect_index};
pub use jpeg::{dct_matrix, jpeg_keep_count, zigzag_order};

/// Severity-independent randomness for one application of an attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackDraw {
    /// Per-image `(u_top, u_left)` placement uniforms (crop, cropout).
    placements: Vec<(f64, f64)>,
    /// Per-pixel uniforms, `batch × h × w` (dropout).
    pixels: Vec<f64>,
}

impl AttackDraw {
    pub fn empty() -> Self {
        AttackDraw {
            placements: Vec::new(),
            pixels: Vec::new(),
        }
    }

    /// Samples what `kind` needs for a `batch × h × w` input.
    pub fn sample(kind: AttackKind, batch: usize, h: usize, w: usize, rng: &mut RngState) -> Self {
        match kind {
            AttackKind::Crop | AttackKind::Cropout => AttackDraw {
                placements: (0..batch).map(|_| (rng.uniform(), rng.uniform())).collect(),
                pixels: Vec::new(),
            },
            AttackKind::Dropout => AttackDraw {
                placements: Vec::new(),
                pixels: (0..batch * h * w).map(|_| rng.uniform()).collect(),
            },
            _ => AttackDraw::empty(),
        }
    }

    /// The draw restricted to items `start..start + len`.
    pub fn narrow(&self, start: usize, len: usize, h: usize, w: usize) -> Self {
        AttackDraw {
            placements: if self.placements.is_empty() {
                Vec::new()
            } else {
                self.placements[start..start + len].to_vec()
            },
            pixels: if self.pixels.is_empty() {
                Vec::new()
            } else {
                self.pixels[start * h * w..(start + len) * h * w].to_vec()
            },
        }
    }

    fn placement(&self, i: usize, kind: AttackKind) -> Result<(f64, f64)> {
        self.placements
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("draw has no placement for item {i} of `{kind}`")))
    }
}

#[derive(Clone, Debug)]
enum Trace {
    Identity,
    Crop {
        input_shape: [usize; 4],
        tops: Vec<usize>,
        lefts: Vec<usize>,
    },
    /// Keep-mask over `batch × h × w`, shared across channels.
    Blend { mask: Vec<bool> },
    Blur { sigma: f64 },
    Jpeg { keep: usize, in_range: Vec<bool> },
}

/// An attacked batch plus what is needed to pull gradients back through it.
#[derive(Clone, Debug)]
pub struct AttackOutput<T = f32> {
    pub image: ImageBatch<T>,
    pub kind: AttackKind,
    pub severity: f64,
    trace: Trace,
}

impl<T: Real> AttackOutput<T> {
    /// Gradient with respect to the watermarked input given the gradient with
    /// respect to the attacked output.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        assert_eq!(grad_out.shape(), self.image.tensor().shape(), "attack grad shape");
        match &self.trace {
            Trace::Identity => grad_out.clone(),
            Trace::Crop {
                input_shape,
                tops,
                lefts,
            } => {
                let [n, c, h, w] = *input_shape;
                let (_, _, sh, sw) = grad_out.dims4();
                let mut gx = Tensor::zeros(input_shape);
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..sh {
                            let src = ((i * c + ch) * sh + y) * sw;
                            let dst = ((i * c + ch) * h + tops[i] + y) * w + lefts[i];
                            gx.data_mut()[dst..dst + sw].copy_from_slice(&grad_out.data()[src..src + sw]);
                        }
                    }
                }
                gx
            }
            Trace::Blend { mask } => {
                let (n, c, h, w) = grad_out.dims4();
                let hw = h * w;
                Tensor::from_fn(&[n, c, h, w], |j| {
                    let (i, p) = (j / (c * hw), j % hw);
                    if mask[i * hw + p] {
                        grad_out.data()[j]
                    } else {
                        T::zero()
                    }
                })
            }
            Trace::Blur { sigma } => blur::blur_backward(grad_out, *sigma),
            Trace::Jpeg { keep, in_range } => {
                let mut g = grad_out.clone();
                g.data_mut().iter_mut().zip(in_range).for_each(|(v, &ok)| {
                    if !ok {
                        *v = T::zero()
                    }
                });
                jpeg::apply_block_projection(&g, *keep)
            }
        }
    }

    /// The binary keep-mask of a cropout/dropout application.
    pub fn keep_mask(&self) -> Option<&[bool]> {
        match &self.trace {
            Trace::Blend { mask } => Some(mask),
            _ => None,
        }
    }

    /// Pixels whose JPEG output hit the clamp (excluded from gradient checks).
    pub fn clamped_pixels(&self) -> Option<Vec<bool>> {
        match &self.trace {
            Trace::Jpeg { in_range, .. } => Some(in_range.iter().map(|v| !v).collect()),
            _ => None,
        }
    }
}

fn attacked<T: Real>(data: Tensor<T>) -> Result<ImageBatch<T>> {
    ImageBatch::clamped(data, ImageRole::Attacked)
}

pub fn identity<T: Real>(x_wm: &ImageBatch<T>) -> AttackOutput<T> {
    AttackOutput {
        image: x_wm.clone().with_role(ImageRole::Attacked),
        kind: AttackKind::Identity,
        severity: 0.0,
        trace: Trace::Identity,
    }
}

/// Side lengths of a crop keeping area fraction `p`.
pub fn crop_size(p: f64, h: usize, w: usize) -> Result<(usize, usize)> {
    AttackKind::Crop.check_severity(p)?;
    let side = |d: usize| ((p.sqrt() * d as f64) + 1e-9).floor() as usize;
    let (sh, sw) = (side(h).min(h), side(w).min(w));
    if sh < MIN_SPATIAL || sw < MIN_SPATIAL {
        return Err(Error::SeverityDomain {
            attack: "crop",
            severity: p,
            reason: format!("a {h}x{w} input would shrink to {sh}x{sw}, below {MIN_SPATIAL} pixels"),
        });
    }
    Ok((sh, sw))
}

fn offset(u: f64, room: usize) -> usize {
    ((u * (room + 1) as f64).floor() as usize).min(room)
}

/// Random square-area crop keeping area fraction `p`; the result is smaller.
pub fn crop<T: Real>(x_wm: &ImageBatch<T>, p: f64, rng: &mut RngState) -> Result<AttackOutput<T>> {
    let draw = AttackDraw::sample(AttackKind::Crop, x_wm.batch_size(), x_wm.height(), x_wm.width(), rng);
    crop_with(x_wm, p, &draw)
}

pub fn crop_with<T: Real>(x_wm: &ImageBatch<T>, p: f64, draw: &AttackDraw) -> Result<AttackOutput<T>> {
    let (n, c, h, w) = x_wm.tensor().dims4();
    let (sh, sw) = crop_size(p, h, w)?;
    let mut tops = Vec::with_capacity(n);
    let mut lefts = Vec::with_capacity(n);
    let mut out = Tensor::zeros(&[n, c, sh, sw]);
    for i in 0..n {
        let (ut, ul) = draw.placement(i, AttackKind::Crop)?;
        let (top, left) = (offset(ut, h - sh), offset(ul, w - sw));
        tops.push(top);
        lefts.push(left);
        for ch in 0..c {
            for y in 0..sh {
                let src = ((i * c + ch) * h + top + y) * w + left;
                let dst = ((i * c + ch) * sh + y) * sw;
                out.data_mut()[dst..dst + sw].copy_from_slice(&x_wm.tensor().data()[src..src + sw]);
            }
        }
    }
    Ok(AttackOutput {
        image: attacked(out)?,
        kind: AttackKind::Crop,
        severity: p,
        trace: Trace::Crop {
            input_shape: [n, c, h, w],
            tops,
            lefts,
        },
    })
}

fn blend<T: Real>(
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    mask: Vec<bool>,
    kind: AttackKind,
    severity: f64,
) -> Result<AttackOutput<T>> {
    let (n, c, h, w) = x_wm.tensor().dims4();
    let hw = h * w;
    let (wm, cover) = (x_wm.tensor().data(), x_cover.tensor().data());
    let out = Tensor::from_fn(&[n, c, h, w], |j| {
        let (i, p) = (j / (c * hw), j % hw);
        if mask[i * hw + p] {
            wm[j]
        } else {
            cover[j]
        }
    });
    Ok(AttackOutput {
        image: attacked(out)?,
        kind,
        severity,
        trace: Trace::Blend { mask },
    })
}

fn ensure_pair<T: Real>(x_wm: &ImageBatch<T>, x_cover: &ImageBatch<T>) -> Result<()> {
    x_wm.tensor().ensure_same_shape(x_cover.tensor())
}

/// Keeps watermarked pixels inside a random region of area fraction `p` and
/// restores cover pixels elsewhere.
pub fn cropout<T: Real>(
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    p: f64,
    rng: &mut RngState,
) -> Result<AttackOutput<T>> {
    let draw = AttackDraw::sample(AttackKind::Cropout, x_wm.batch_size(), x_wm.height(), x_wm.width(), rng);
    cropout_with(x_wm, x_cover, p, &draw)
}

pub fn cropout_with<T: Real>(
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    p: f64,
    draw: &AttackDraw,
) -> Result<AttackOutput<T>> {
    ensure_pair(x_wm, x_cover)?;
    AttackKind::Cropout.check_severity(p)?;
    let (n, _, h, w) = x_wm.tensor().dims4();
    let side = |d: usize| (((p.sqrt() * d as f64) + 1e-9).floor() as usize).clamp(1, d);
    let (sh, sw) = (side(h), side(w));
    let mut mask = vec![false; n * h * w];
    for i in 0..n {
        let (ut, ul) = draw.placement(i, AttackKind::Cropout)?;
        let (top, left) = (offset(ut, h - sh), offset(ul, w - sw));
        for y in top..top + sh {
            let row = (i * h + y) * w;
            mask[row + left..row + left + sw].fill(true);
        }
    }
    blend(x_wm, x_cover, mask, AttackKind::Cropout, p)
}

/// Keeps each watermarked pixel with probability `p`, otherwise restores the
/// cover pixel; the decision is shared across channels.
pub fn dropout<T: Real>(
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    p: f64,
    rng: &mut RngState,
) -> Result<AttackOutput<T>> {
    let draw = AttackDraw::sample(AttackKind::Dropout, x_wm.batch_size(), x_wm.height(), x_wm.width(), rng);
    dropout_with(x_wm, x_cover, p, &draw)
}

pub fn dropout_with<T: Real>(
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    p: f64,
    draw: &AttackDraw,
) -> Result<AttackOutput<T>> {
    ensure_pair(x_wm, x_cover)?;
    AttackKind::Dropout.check_severity(p)?;
    let (n, _, h, w) = x_wm.tensor().dims4();
    if draw.pixels.len() != n * h * w {
        return Err(Error::contract("dropout draw does not match the input size"));
    }
    let mask = draw.pixels.iter().map(|&u| u < p).collect();
    blend(x_wm, x_cover, mask, AttackKind::Dropout, p)
}

/// Separable Gaussian blur with reflect padding, kernel size `2⌈2σ⌉ + 1`.
pub fn gaussian_blur<T: Real>(x_wm: &ImageBatch<T>, sigma: f64) -> Result<AttackOutput<T>> {
    AttackKind::GaussianBlur.check_severity(sigma)?;
    let out = blur::blur_forward(x_wm.tensor(), sigma);
    Ok(AttackOutput {
        image: attacked(out)?,
        kind: AttackKind::GaussianBlur,
        severity: sigma,
        trace: Trace::Blur { sigma },
    })
}

/// Differentiable JPEG stand-in: per-channel 8×8 block DCT, zero every
/// coefficient at zigzag position `≥ ⌈64·q/100⌉`, inverse DCT, clamp.
pub fn jpeg_approx<T: Real>(x_wm: &ImageBatch<T>, quality: f64) -> Result<AttackOutput<T>> {
    AttackKind::Jpeg.check_severity(quality)?;
    let (_, _, h, w) = x_wm.tensor().dims4();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::contract(format!(
            "jpeg approximation needs sides that are multiples of 8, got {h}x{w}"
        )));
    }
    let keep = jpeg_keep_count(quality);
    let raw = jpeg::apply_block_projection(x_wm.tensor(), keep);
    let (lo, hi) = (T::zero(), T::one());
    let in_range = raw.data().iter().map(|&v| v >= lo && v <= hi).collect();
    Ok(AttackOutput {
        image: attacked(raw)?,
        kind: AttackKind::Jpeg,
        severity: quality,
        trace: Trace::Jpeg { keep, in_range },
    })
}

/// Applies `kind` at severity `s` with an explicit draw.
pub fn apply_with<T: Real>(
    kind: AttackKind,
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    s: f64,
    draw: &AttackDraw,
) -> Result<AttackOutput<T>> {
    kind.check_severity(s)?;
    match kind {
        AttackKind::Identity => Ok(identity(x_wm)),
        AttackKind::Crop => crop_with(x_wm, s, draw),
        AttackKind::Cropout => cropout_with(x_wm, x_cover, s, draw),
        AttackKind::Dropout => dropout_with(x_wm, x_cover, s, draw),
        AttackKind::GaussianBlur => gaussian_blur(x_wm, s),
        AttackKind::Jpeg => jpeg_approx(x_wm, s),
    }
}

/// `N(x_wm, s)`: dispatches on the spec's kind, drawing randomness from `rng`.
pub fn apply<T: Real>(
    spec: &AttackSpec,
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    s: f64,
    rng: &mut RngState,
) -> Result<AttackOutput<T>> {
    let draw = AttackDraw::sample(spec.kind, x_wm.batch_size(), x_wm.height(), x_wm.width(), rng);
    apply_with(spec.kind, x_wm, x_cover, s, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f64> {
        let mut rng = make_rng(seed);
        ImageBatch::new(Tensor::from_fn(&[n, 3, h, w], |_| rng.uniform()), ImageRole::Watermarked).unwrap()
    }

    #[test]
    fn identity_returns_input() {
        let x = random_batch(2, 16, 16, 1);
        let out = identity(&x);
        assert_eq!(out.image.tensor(), x.tensor());
        let g = Tensor::full(x.tensor().shape(), 0.3);
        assert_eq!(out.backward(&g), g);
    }

    #[test]
    fn crop_sizes() {
        let x = random_batch(2, 128, 128, 2);
        let mut rng = make_rng(0);
        assert_eq!(crop(&x, 1.0, &mut rng).unwrap().image.tensor(), x.tensor());
        assert_eq!(crop(&x, 0.25, &mut rng).unwrap().image.tensor().dims4(), (2, 3, 64, 64));
        assert_eq!(crop(&x, 0.1, &mut rng).unwrap().image.tensor().dims4(), (2, 3, 40, 40));
        let small = random_batch(1, 16, 16, 3);
        assert!(matches!(crop(&small, 0.1, &mut rng), Err(Error::SeverityDomain { .. })));
    }

    #[test]
    fn crop_backward_scatters_into_window() {
        let x = random_batch(1, 16, 16, 4);
        let out = crop(&x, 0.25, &mut make_rng(5)).unwrap();
        let g = out.backward(&Tensor::full(out.image.tensor().shape(), 1.0));
        assert_eq!(g.sum(), (3 * 8 * 8) as f64);
    }

    #[test]
    fn cropout_edges() {
        let x = random_batch(2, 64, 64, 6);
        let cover = random_batch(2, 64, 64, 7);
        let mut rng = make_rng(1);
        assert_eq!(cropout(&x, &cover, 1.0, &mut rng).unwrap().image.tensor(), x.tensor());
        let same = cropout(&x, &x, 0.4, &mut rng).unwrap();
        assert_eq!(same.image.tensor(), x.tensor());
        for size in [64usize, 128] {
            let x = random_batch(1, size, size, 8);
            let c = random_batch(1, size, size, 9);
            let out = cropout(&x, &c, 0.3, &mut rng).unwrap();
            let kept = out.keep_mask().unwrap().iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
            assert!((0.27..=0.33).contains(&kept), "kept fraction {kept}");
        }
        assert!(cropout(&x, &random_batch(2, 32, 32, 1), 0.5, &mut rng).is_err());
    }

    #[test]
    fn dropout_edges_and_concentration() {
        let x = random_batch(1, 128, 128, 10);
        let cover = random_batch(1, 128, 128, 11);
        let mut rng = make_rng(2);
        assert_eq!(dropout(&x, &cover, 1.0, &mut rng).unwrap().image.tensor(), x.tensor());
        assert_eq!(dropout(&x, &cover, 0.0, &mut rng).unwrap().image.tensor(), cover.tensor());
        let out = dropout(&x, &cover, 0.5, &mut rng).unwrap();
        let mask = out.keep_mask().unwrap();
        let kept = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((kept - 0.5).abs() <= 0.02, "kept fraction {kept}");
    }

    #[test]
    fn blend_is_exact_mask_mix() {
        let x = random_batch(2, 32, 32, 12);
        let cover = random_batch(2, 32, 32, 13);
        for kind in [AttackKind::Dropout, AttackKind::Cropout] {
            let out = apply_with(kind, &x, &cover, 0.6, &AttackDraw::sample(kind, 2, 32, 32, &mut make_rng(4))).unwrap();
            let mask = out.keep_mask().unwrap();
            for (j, &v) in out.image.tensor().data().iter().enumerate() {
                let (i, p) = (j / (3 * 1024), j % 1024);
                let m = if mask[i * 1024 + p] { 1.0 } else { 0.0 };
                assert_eq!(v, m * x.tensor().data()[j] + (1.0 - m) * cover.tensor().data()[j]);
            }
        }
    }

    #[test]
    fn replay_with_equal_rng_is_bit_identical() {
        let x = random_batch(2, 32, 32, 14);
        let cover = random_batch(2, 32, 32, 15);
        for spec in AttackSpec::reference_worst_case() {
            let s = spec.severities()[0];
            let a = apply(&spec, &x, &cover, s, &mut make_rng(99)).unwrap();
            let b = apply(&spec, &x, &cover, s, &mut make_rng(99)).unwrap();
            assert_eq!(a.image, b.image, "{}", spec.kind);
        }
    }

    #[test]
    fn apply_dispatch_and_domain() {
        let x = random_batch(1, 128, 128, 16);
        let cover = random_batch(1, 128, 128, 17);
        let mut rng = make_rng(3);
        let dropout = AttackSpec::fixed(AttackKind::Dropout, 0.5).unwrap();
        assert_eq!(apply(&dropout, &x, &cover, 1.0, &mut rng).unwrap().image.tensor(), x.tensor());
        let crop = AttackSpec::fixed(AttackKind::Crop, 0.5).unwrap();
        assert_eq!(apply(&crop, &x, &cover, 0.25, &mut rng).unwrap().image.height(), 64);
        assert_eq!(apply(&AttackSpec::identity(), &x, &cover, 7.0, &mut rng).unwrap().image.tensor(), x.tensor());
        assert!(matches!(apply(&crop, &x, &cover, 1.5, &mut rng), Err(Error::SeverityDomain { .. })));
        let jpeg = AttackSpec::fixed(AttackKind::Jpeg, 50.0).unwrap();
        assert!(apply(&jpeg, &x, &cover, 0.5, &mut rng).is_err());
    }

    #[test]
    fn jpeg_rejects_unaligned_sides() {
        let x = random_batch(1, 12, 16, 18);
        assert!(matches!(jpeg_approx(&x, 50.0), Err(Error::Contract(_))));
    }
}
