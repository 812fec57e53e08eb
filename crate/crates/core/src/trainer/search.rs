//! Exhaustive worst-case severity search.

use crate::attacks::{apply_with, AttackDraw};
use crate::config::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::models::Decoder;
use crate::nn::NormMode;
use crate::rng::RngState;
use crate::tensor::Real;
use crate::types::{ImageBatch, MessageBatch};

use super::losses::decoder_loss_sum;

/// Whether severity `a` is a harsher setting of `kind` than `b`.
pub fn harsher(kind: AttackKind, a: f64, b: f64) -> bool {
    if kind.lower_is_harsher() {
        a < b
    } else {
        a > b
    }
}

/// Evaluates `loss` at every grid value and returns `(s*, loss(s*))`, the
/// maximizer. Exact ties go to the harshest severity.
pub fn argmax_severity(kind: AttackKind, grid: &[f64], mut loss: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::contract(format!("empty severity grid for `{kind}`")));
    }
    let mut best: Option<(f64, f64)> = None;
    for &s in grid {
        let l = loss(s)?;
        if !l.is_finite() {
            return Err(Error::contract(format!("non-finite decoder loss for `{kind}` at {s}")));
        }
        best = match best {
            Some((bs, bl)) if l < bl || (l == bl && !harsher(kind, s, bs)) => Some((bs, bl)),
            _ => Some((s, l)),
        };
    }
    Ok(best.expect("grid is non-empty"))
}

/// Summed decoder loss `Σ ‖m − D(N(x_wm, s))‖²` over the sub-batch for one
/// severity and a fixed draw.
#[allow(clippy::too_many_arguments)]
pub fn attacked_decoder_loss<T: Real>(
    decoder: &Decoder<T>,
    kind: AttackKind,
    severity: f64,
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    m: &MessageBatch,
    draw: &AttackDraw,
    mode: NormMode,
) -> Result<f64> {
    let out = apply_with(kind, x_wm, x_cover, severity, draw)?;
    let (values, _) = decoder.forward(out.image.tensor(), mode)?;
    decoder_loss_sum(m, &values)
}

/// The harshest-loss severity of `attack` for this sub-batch, with the
/// random placements in `draw` shared by every grid point. Returns
/// `(s*, summed loss at s*)`.
#[allow(clippy::too_many_arguments)]
pub fn worst_case_severity_with<T: Real>(
    decoder: &Decoder<T>,
    attack: &AttackSpec,
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    m: &MessageBatch,
    draw: &AttackDraw,
    mode: NormMode,
) -> Result<(f64, f64)> {
    if x_wm.batch_size() == 0 {
        return Err(Error::contract("empty sub-batch"));
    }
    argmax_severity(attack.kind, &attack.severities(), |s| {
        attacked_decoder_loss(decoder, attack.kind, s, x_wm, x_cover, m, draw, mode)
    })
}

/// As [`worst_case_severity_with`], drawing the frozen placements from `rng`.
pub fn worst_case_severity<T: Real>(
    decoder: &Decoder<T>,
    attack: &AttackSpec,
    x_wm: &ImageBatch<T>,
    x_cover: &ImageBatch<T>,
    m: &MessageBatch,
    rng: &mut RngState,
) -> Result<(f64, f64)> {
    let draw = AttackDraw::sample(attack.kind, x_wm.batch_size(), x_wm.height(), x_wm.width(), rng);
    worst_case_severity_with(decoder, attack, x_wm, x_cover, m, &draw, NormMode::Batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_grid_returns_its_value() {
        let (s, l) = argmax_severity(AttackKind::Crop, &[0.3], |_| Ok(1.5)).unwrap();
        assert_eq!((s, l), (0.3, 1.5));
    }

    #[test]
    fn monotone_loss_picks_the_end() {
        let grid = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (s, _) = argmax_severity(AttackKind::GaussianBlur, &grid, |s| Ok(s * s)).unwrap();
        assert_eq!(s, 5.0);
        let (s, _) = argmax_severity(AttackKind::Dropout, &[0.3, 0.5, 0.9], |s| Ok(1.0 - s)).unwrap();
        assert_eq!(s, 0.3);
    }

    #[test]
    fn ties_break_toward_harsher() {
        let flat = |_| Ok(2.0);
        assert_eq!(argmax_severity(AttackKind::GaussianBlur, &[1.0, 2.0, 3.0], flat).unwrap().0, 3.0);
        assert_eq!(argmax_severity(AttackKind::Crop, &[0.1, 0.2, 0.3], flat).unwrap().0, 0.1);
        assert_eq!(argmax_severity(AttackKind::Jpeg, &[50.0, 60.0], flat).unwrap().0, 50.0);
        // a tie between two maxima, not the whole grid
        let bumpy = |s: f64| Ok(if s == 0.4 || s == 0.6 { 3.0 } else { 1.0 });
        assert_eq!(argmax_severity(AttackKind::Cropout, &[0.3, 0.4, 0.5, 0.6], bumpy).unwrap().0, 0.4);
    }

    #[test]
    fn empty_grid_and_nan_are_errors() {
        assert!(argmax_severity(AttackKind::Crop, &[], |_| Ok(0.0)).is_err());
        assert!(argmax_severity(AttackKind::Crop, &[0.5], |_| Ok(f64::NAN)).is_err());
    }
}
