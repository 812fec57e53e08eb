//! Image and message batches passed between ingestion, attacks, models and
//! evaluation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest spatial side any network or crop output may have.
pub const MIN_SPATIAL: usize = 8;

/// Images come from JPEG-sized blocks: ingested sides are multiples of this.
pub const BLOCK: usize = 8;

/// Smallest ingested image side.
pub const MIN_INGEST_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageRole {
    Cover,
    Watermarked,
    Attacked,
}

/// `(batch, 3, height, width)` images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    data: Tensor<T>,
    role: ImageRole,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Tensor<T>, role: ImageRole) -> Result<Self> {
        check_image_shape(data.shape())?;
        let (lo, hi) = (T::zero(), T::one());
        if let Some(bad) = data.data().iter().find(|v| !(v.is_finite() && **v >= lo && **v <= hi)) {
            return Err(Error::contract(format!(
                "image value {bad} is not a finite number in [0, 1]"
            )));
        }
        Ok(ImageBatch { data, role })
    }

    /// Clamps every value into `[0, 1]` (non-finite values are rejected).
    pub fn clamped(mut data: Tensor<T>, role: ImageRole) -> Result<Self> {
        check_image_shape(data.shape())?;
        if !data.all_finite() {
            return Err(Error::contract("image contains non-finite values"));
        }
        let (lo, hi) = (T::zero(), T::one());
        data.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        Ok(ImageBatch { data, role })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn role(&self) -> ImageRole {
        self.role
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Items `start..start + len`.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        ImageBatch {
            data: self.data.narrow(start, len),
            role: self.role,
        }
    }

    pub fn select(&self, items: &[usize]) -> Self {
        ImageBatch {
            data: self.data.select(items),
            role: self.role,
        }
    }

    pub fn cast<U: Real>(&self) -> ImageBatch<U> {
        ImageBatch {
            data: self.data.cast(),
            role: self.role,
        }
    }
}

fn check_image_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "images must be (batch>0, 3, h, w), got {shape:?}"
        )));
    }
    if shape[2] < MIN_SPATIAL || shape[3] < MIN_SPATIAL {
        return Err(Error::contract(format!(
            "image sides must be at least {MIN_SPATIAL}, got {}x{}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// Checks the ingestion size rule: sides ≥ 16 and multiples of 8.
pub fn check_ingest_size(height: usize, width: usize) -> Result<()> {
    for (name, v) in [("height", height), ("width", width)] {
        if v < MIN_INGEST_SIDE || v % BLOCK != 0 {
            return Err(Error::invalid(
                format!("model.image_size.{name}"),
                format!("{v} must be >= {MIN_INGEST_SIDE} and a multiple of {BLOCK}"),
            ));
        }
    }
    Ok(())
}

/// Binary watermark messages, `(batch, length)`, entries exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageBatch {
    bits: Vec<u8>,
    batch: usize,
    length: usize,
}

impl MessageBatch {
    pub fn new(bits: Vec<u8>, batch: usize, length: usize) -> Result<Self> {
        if length == 0 || batch == 0 {
            return Err(Error::contract("message batch and length must be >= 1"));
        }
        if bits.len() != batch * length {
            return Err(Error::contract(format!(
                "{} bits do not fill a ({batch}, {length}) message batch",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::contract("message bits must be 0 or 1"));
        }
        Ok(MessageBatch {
            bits,
            batch,
            length,
        })
    }

    /// Parses a literal string of `0`/`1` characters as a single message.
    pub fn parse_bits(text: &str) -> Result<Self> {
        let bits = text
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::contract(format!(
                    "message characters must be '0' or '1', found {other:?}"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let len = bits.len();
        MessageBatch::new(bits, 1, len)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.length..(i + 1) * self.length]
    }

    pub fn narrow(&self, start: usize, len: usize) -> Self {
        MessageBatch {
            bits: self.bits[start * self.length..(start + len) * self.length].to_vec(),
            batch: len,
            length: self.length,
        }
    }

    pub fn select(&self, items: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(items.len() * self.length);
        for &i in items {
            bits.extend_from_slice(self.row(i));
        }
        MessageBatch {
            bits,
            batch: items.len(),
            length: self.length,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.batch, self.length], |i| {
            if self.bits[i] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn to_bit_string(&self, i: usize) -> String {
        self.row(i).iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

/// Raw decoder outputs `m̂`, `(batch, length)`, unconstrained reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBatch<T = f32> {
    values: Tensor<T>,
}

impl<T: Real> DecodedBatch<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::contract(format!(
                "decoded batch must be rank 2, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::contract("decoded batch contains non-finite values"));
        }
        Ok(DecodedBatch { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[1]
    }

    /// Hard bit decisions: a value of at least 0.5 decodes to 1.
    pub fn to_bits(&self) -> MessageBatch {
        let half = T::lit(0.5);
        let bits = self
            .values
            .data()
            .iter()
            .map(|&v| u8::from(v >= half))
            .collect();
        MessageBatch::new(bits, self.batch_size(), self.length()).expect("thresholded bits are binary")
    }

    pub fn ensure_matches(&self, m: &MessageBatch) -> Result<()> {
        if self.batch_size() != m.batch_size() || self.length() != m.length() {
            return Err(Error::contract(format!(
                "decoded shape ({}, {}) does not match message shape ({}, {})",
                self.batch_size(),
                self.length(),
                m.batch_size(),
                m.length()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_batch_rejects_out_of_range() {
        let t = Tensor::<f32>::full(&[1, 3, 8, 8], 1.5);
        assert!(ImageBatch::new(t.clone(), ImageRole::Cover).is_err());
        let c = ImageBatch::clamped(t, ImageRole::Cover).unwrap();
        assert!(c.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn image_batch_rejects_small_or_wrong_channels() {
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[1, 3, 4, 8]), ImageRole::Cover).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[1, 1, 8, 8]), ImageRole::Cover).is_err());
    }

    #[test]
    fn ingest_size_rule() {
        assert!(check_ingest_size(64, 64).is_ok());
        assert!(check_ingest_size(8, 64).is_err());
        assert!(check_ingest_size(60, 64).is_err());
    }

    #[test]
    fn message_parsing() {
        let m = MessageBatch::parse_bits("0110").unwrap();
        assert_eq!(m.bits(), &[0, 1, 1, 0]);
        assert_eq!(m.to_bit_string(0), "0110");
        assert!(MessageBatch::parse_bits("01x0").is_err());
        assert!(MessageBatch::new(vec![0, 2], 1, 2).is_err());
    }

    #[test]
    fn threshold_at_half() {
        let d = DecodedBatch::new(Tensor::from_vec(&[1, 4], vec![0.49f32, 0.5, -3.0, 2.0]).unwrap()).unwrap();
        assert_eq!(d.to_bits().bits(), &[0, 1, 0, 1]);
    }
}
