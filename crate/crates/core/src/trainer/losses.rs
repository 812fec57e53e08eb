//! The four training losses and their gradients.
//!
//! Scalars are accumulated in f64 regardless of the tensor precision.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::types::{DecodedBatch, ImageBatch, MessageBatch};

/// Floor applied to the arguments of both logarithms.
pub const LOG_EPS: f64 = 1e-7;

fn check_decoded<T: Real>(m: &MessageBatch, values: &Tensor<T>) -> Result<()> {
    let (b, l) = values.dims2();
    if b != m.batch_size() || l != m.length() {
        return Err(Error::contract(format!(
            "decoded shape ({b}, {l}) does not match message shape ({}, {})",
            m.batch_size(),
            m.length()
        )));
    }
    Ok(())
}

/// `Σ_items Σ_bits (m − m̂)²` over raw decoder outputs.
pub fn decoder_loss_sum<T: Real>(m: &MessageBatch, values: &Tensor<T>) -> Result<f64> {
    check_decoded(m, values)?;
    Ok(m.bits()
        .iter()
        .zip(values.data())
        .map(|(&b, &v)| {
            let d = b as f64 - v.as_f64();
            d * d
        })
        .sum())
}

/// `L_D`: mean over the batch of the per-item squared-error sum.
pub fn decoder_loss<T: Real>(m: &MessageBatch, m_hat: &DecodedBatch<T>) -> Result<f64> {
    Ok(decoder_loss_sum(m, m_hat.values())? / m.batch_size() as f64)
}

/// `scale · ∂/∂m̂ Σ (m − m̂)²`.
pub fn decoder_loss_grad<T: Real>(m: &MessageBatch, values: &Tensor<T>, scale: f64) -> Tensor<T> {
    let s = T::lit(2.0 * scale);
    Tensor::from_fn(values.shape(), |i| s * (values.data()[i] - T::lit(m.bits()[i] as f64)))
}

/// `L_EI`: mean squared error over every pixel and channel.
pub fn image_loss<T: Real>(x: &ImageBatch<T>, x_wm: &ImageBatch<T>) -> Result<f64> {
    x.tensor().ensure_same_shape(x_wm.tensor())?;
    let n = x.tensor().len() as f64;
    Ok(x.tensor()
        .data()
        .iter()
        .zip(x_wm.tensor().data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `∂L_EI / ∂x_wm`.
pub fn image_loss_grad<T: Real>(x: &Tensor<T>, x_wm: &Tensor<T>) -> Tensor<T> {
    let s = T::lit(2.0 / x.len() as f64);
    x_wm.zip_map(x, |w, c| s * (w - c)).expect("image and watermark shapes match")
}

fn log_floor(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

/// `d/dv log(max(v, ε))`; zero where the floor is active.
fn log_floor_grad(v: f64) -> f64 {
    if v < LOG_EPS {
        0.0
    } else {
        1.0 / v
    }
}

/// `L_EA = mean log(1 − C(x_wm))`, from the discriminator's probabilities.
pub fn adversarial_loss<T: Real>(c_wm: &[T]) -> f64 {
    c_wm.iter().map(|&c| log_floor(1.0 - c.as_f64())).sum::<f64>() / c_wm.len() as f64
}

/// `∂L_EA / ∂C(x_wm)` per image.
pub fn adversarial_loss_grad<T: Real>(c_wm: &[T]) -> Vec<T> {
    let n = c_wm.len() as f64;
    c_wm.iter()
        .map(|&c| T::lit(-log_floor_grad(1.0 - c.as_f64()) / n))
        .collect()
}

/// `A = mean [log(1 − C(x)) + log(C(x_wm))]`.
pub fn discriminator_loss<T: Real>(c_cover: &[T], c_wm: &[T]) -> Result<f64> {
    if c_cover.len() != c_wm.len() || c_cover.is_empty() {
        return Err(Error::contract("discriminator loss needs equal, non-empty batches"));
    }
    let total: f64 = c_cover
        .iter()
        .zip(c_wm)
        .map(|(&c, &w)| log_floor(1.0 - c.as_f64()) + log_floor(w.as_f64()))
        .sum();
    Ok(total / c_cover.len() as f64)
}

/// `(∂A/∂C(x), ∂A/∂C(x_wm))` per image.
pub fn discriminator_loss_grad<T: Real>(c_cover: &[T], c_wm: &[T]) -> (Vec<T>, Vec<T>) {
    let n = c_cover.len() as f64;
    let g_cover = c_cover
        .iter()
        .map(|&c| T::lit(-log_floor_grad(1.0 - c.as_f64()) / n))
        .collect();
    let g_wm = c_wm.iter().map(|&w| T::lit(log_floor_grad(w.as_f64()) / n)).collect();
    (g_cover, g_wm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;
    use crate::types::ImageRole;

    fn decoded(values: Vec<f64>, b: usize, l: usize) -> DecodedBatch<f64> {
        DecodedBatch::new(Tensor::from_vec(&[b, l], values).unwrap()).unwrap()
    }

    #[test]
    fn decoder_loss_values() {
        let ones = MessageBatch::new(vec![1; 60], 2, 30).unwrap();
        assert_eq!(decoder_loss(&ones, &decoded(vec![1.0; 60], 2, 30)).unwrap(), 0.0);
        assert_eq!(decoder_loss(&ones, &decoded(vec![0.0; 60], 2, 30)).unwrap(), 30.0);
        let mut v = vec![1.0; 30];
        v[7] = 0.5;
        assert_eq!(decoder_loss(&MessageBatch::new(vec![1; 30], 1, 30).unwrap(), &decoded(v, 1, 30)).unwrap(), 0.25);
        assert!(decoder_loss(&ones, &decoded(vec![0.0; 30], 1, 30)).is_err());
    }

    #[test]
    fn image_loss_values() {
        let mut rng = make_rng(1);
        let x = ImageBatch::new(Tensor::from_fn(&[2, 3, 8, 8], |_| 0.1 + 0.8 * rng.uniform()), ImageRole::Cover).unwrap();
        assert_eq!(image_loss(&x, &x).unwrap(), 0.0);
        let shifted = ImageBatch::new(x.tensor().map(|v| v + 0.1), ImageRole::Watermarked).unwrap();
        assert!((image_loss(&x, &shifted).unwrap() - 0.01).abs() < 1e-12);

        let y = ImageBatch::new(Tensor::from_fn(&[2, 3, 8, 8], |_| rng.uniform()), ImageRole::Watermarked).unwrap();
        let mut brute = 0.0;
        for i in 0..x.tensor().len() {
            brute += (x.tensor().data()[i] - y.tensor().data()[i]).powi(2);
        }
        assert!((image_loss(&x, &y).unwrap() - brute / 384.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_and_discriminator_closed_forms() {
        assert!((adversarial_loss(&[0.5f64]) - 0.5f64.ln()).abs() < 1e-12);
        assert!(adversarial_loss(&[1e-12f64]).abs() < 1e-9);
        assert_eq!(adversarial_loss(&[1.0 - 1e-7f64]), LOG_EPS.ln());
        assert!((discriminator_loss(&[0.5f64], &[0.5]).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!(discriminator_loss(&[0.0f64], &[0.0]).unwrap() < -16.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = [0.2f64, 0.7, 0.45];
        let w = [0.6f64, 0.1, 0.33];
        let h = 1e-6;
        let g = adversarial_loss_grad(&w);
        let (gc, gw) = discriminator_loss_grad(&c, &w);
        for i in 0..3 {
            let mut up = w;
            let mut dn = w;
            up[i] += h;
            dn[i] -= h;
            let fd = (adversarial_loss(&up) - adversarial_loss(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
            let fd = (discriminator_loss(&c, &up).unwrap() - discriminator_loss(&c, &dn).unwrap()) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
            let mut up = c;
            let mut dn = c;
            up[i] += h;
            dn[i] -= h;
            let fd = (discriminator_loss(&up, &w).unwrap() - discriminator_loss(&dn, &w).unwrap()) / (2.0 * h);
            assert!((fd - gc[i]).abs() < 1e-6);
        }
    }
}
