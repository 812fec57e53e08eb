use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::types::{DecodedBatch, ImageBatch, MessageBatch};

/// Fraction of bits recovered after thresholding `m̂` at 0.5.
pub fn bit_accuracy<T: Real>(m: &MessageBatch, m_hat: &DecodedBatch<T>) -> Result<f64> {
    m_hat.ensure_matches(m)?;
    let hits = m
        .bits()
        .iter()
        .zip(m_hat.values().data())
        .filter(|(&b, &v)| (v >= T::lit(0.5)) == (b == 1))
        .count();
    Ok(hits as f64 / m.bits().len() as f64)
}

/// Per-image bit accuracy.
pub fn bit_accuracy_per_item<T: Real>(m: &MessageBatch, m_hat: &DecodedBatch<T>) -> Result<Vec<f64>> {
    m_hat.ensure_matches(m)?;
    let l = m.length();
    Ok((0..m.batch_size())
        .map(|i| {
            let row = &m_hat.values().data()[i * l..(i + 1) * l];
            m.row(i)
                .iter()
                .zip(row)
                .filter(|(&b, &v)| (v >= T::lit(0.5)) == (b == 1))
                .count() as f64
                / l as f64
        })
        .collect())
}

/// PSNR in dB per image on the 255 scale (no rounding). Identical images
/// give `f64::INFINITY`.
pub fn psnr<T: Real>(x: &ImageBatch<T>, x_wm: &ImageBatch<T>) -> Result<Vec<f64>> {
    if x.tensor().shape() != x_wm.tensor().shape() {
        return Err(Error::contract(format!(
            "psnr needs equal shapes, got {:?} and {:?}",
            x.tensor().shape(),
            x_wm.tensor().shape()
        )));
    }
    let per = x.tensor().item_len();
    Ok(x
        .tensor()
        .data()
        .chunks(per)
        .zip(x_wm.tensor().data().chunks(per))
        .map(|(a, b)| {
            let se: f64 = a
                .iter()
                .zip(b)
                .map(|(&p, &q)| {
                    let d = (p.as_f64() - q.as_f64()) * 255.0;
                    d * d
                })
                .sum();
            let mse = se / per as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (255.0f64 * 255.0 / mse).log10()
            }
        })
        .collect())
}

/// Mean over the finite entries; infinite if every entry is infinite.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::types::ImageRole;

    fn decoded(values: Vec<f64>, b: usize, l: usize) -> DecodedBatch<f64> {
        DecodedBatch::new(Tensor::from_vec(&[b, l], values).unwrap()).unwrap()
    }

    #[test]
    fn bit_accuracy_edges() {
        let m = MessageBatch::new((0..60).map(|i| (i % 3 == 0) as u8).collect(), 2, 30).unwrap();
        let same = decoded(m.bits().iter().map(|&b| b as f64).collect(), 2, 30);
        assert_eq!(bit_accuracy(&m, &same).unwrap(), 1.0);
        let flipped = decoded(m.bits().iter().map(|&b| 1.0 - b as f64).collect(), 2, 30);
        assert_eq!(bit_accuracy(&m, &flipped).unwrap(), 0.0);
        let half = decoded(
            m.bits()
                .iter()
                .enumerate()
                .map(|(i, &b)| if i % 30 < 15 { 1.0 - b as f64 } else { b as f64 })
                .collect(),
            2,
            30,
        );
        assert_eq!(bit_accuracy(&m, &half).unwrap(), 0.5);
        assert_eq!(bit_accuracy_per_item(&m, &half).unwrap(), vec![0.5, 0.5]);
        // threshold is inclusive
        let m1 = MessageBatch::parse_bits("10").unwrap();
        assert_eq!(bit_accuracy(&m1, &decoded(vec![0.5, 0.4999], 1, 2)).unwrap(), 1.0);
        assert!(bit_accuracy(&m1, &decoded(vec![0.5, 0.5, 0.5], 1, 3)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let x = ImageBatch::new(Tensor::<f64>::full(&[2, 3, 8, 8], 0.5), ImageRole::Cover).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), vec![f64::INFINITY; 2]);
        let y = ImageBatch::new(Tensor::<f64>::full(&[2, 3, 8, 8], 0.5 + 1.0 / 255.0), ImageRole::Watermarked)
            .unwrap();
        for v in psnr(&x, &y).unwrap() {
            assert!((v - 48.130_803_608_679_1).abs() < 1e-9);
        }
        assert_eq!(mean_psnr(&[f64::INFINITY, 30.0, 40.0]), 35.0);
        assert_eq!(mean_psnr(&[f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
