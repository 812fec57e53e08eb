//! Image datasets, message sampling and minibatch streaming.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::types::{check_ingest_size, ImageBatch, ImageRole, MessageBatch};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decoded images, all `(3, H, W)` in `[0, 1]`, in a fixed order.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    paths: Vec<PathBuf>,
    /// `(n, 3, H, W)`
    data: Tensor<f32>,
    split: Split,
}

impl ImageDataset {
    /// Wraps already-decoded images; used by tests and synthetic data.
    pub fn from_tensor(data: Tensor<f32>, split: Split) -> Result<Self> {
        let (n, _, h, w) = data.dims4();
        // validates channel count and range
        ImageBatch::new(data.clone(), ImageRole::Cover)?;
        check_ingest_size(h, w)?;
        Ok(ImageDataset {
            paths: (0..n).map(|i| PathBuf::from(format!("item{i:05}"))).collect(),
            data,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dims4();
        (h, w)
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn batch(&self, items: &[usize]) -> ImageBatch<f32> {
        ImageBatch::new(self.data.select(items), ImageRole::Cover).expect("dataset items are valid images")
    }

    /// Consecutive items `start..start + len`.
    pub fn range(&self, start: usize, len: usize) -> ImageBatch<f32> {
        ImageBatch::new(self.data.narrow(start, len), ImageRole::Cover).expect("dataset items are valid images")
    }
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_sources(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_file() {
        // manifest: one path per line, relative to the manifest's directory
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        let base = source.parent().unwrap_or(Path::new("."));
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect());
    }
    let entries = std::fs::read_dir(source).map_err(|e| Error::Ingest(format!("{}: {e}", source.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Decodes one file, center-crops it to the target aspect ratio and resizes
/// bilinearly to `(height, width)`. Returns CHW floats in `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (sw, sh) = rgb.dimensions();
    let target = width as f64 / height as f64;
    let (cw, ch) = if sw as f64 / sh as f64 > target {
        (((sh as f64 * target).round() as u32).max(1), sh)
    } else {
        (sw, ((sw as f64 / target).round() as u32).max(1))
    };
    let cropped = image::imageops::crop_imm(&rgb, (sw - cw) / 2, (sh - ch) / 2, cw, ch).to_image();
    let resized = if (cw, ch) == (width as u32, height as u32) {
        cropped
    } else {
        image::imageops::resize(&cropped, width as u32, height as u32, FilterType::Triangle)
    };
    let hw = height * width;
    let mut out = vec![0.0f32; 3 * hw];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Loads every image in `source` (a flat directory, or a manifest file
/// listing one path per line). Corrupt files are skipped with a warning.
pub fn load_image_dataset(
    source: &Path,
    split: Split,
    size: (usize, usize),
    limit: Option<usize>,
) -> Result<ImageDataset> {
    let (height, width) = size;
    check_ingest_size(height, width)?;
    let mut files = list_sources(source)?;
    if files.is_empty() {
        return Err(Error::Ingest(format!("{}: no image files", source.display())));
    }
    let mut paths = Vec::new();
    let mut data = Vec::new();
    for path in files.drain(..) {
        if limit.is_some_and(|l| paths.len() >= l) {
            break;
        }
        match load_image(&path, height, width) {
            Ok(pixels) => {
                data.extend(pixels);
                paths.push(path);
            }
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if paths.is_empty() {
        return Err(Error::Ingest(format!("{}: no decodable images", source.display())));
    }
    let data = Tensor::from_vec(&[paths.len(), 3, height, width], data)?;
    Ok(ImageDataset { paths, data, split })
}

/// `n` messages of `length` i.i.d. uniform bits.
pub fn sample_messages(rng: &mut RngState, n: usize, length: usize) -> Result<MessageBatch> {
    let bits = (0..n * length).map(|_| rng.bit()).collect();
    MessageBatch::new(bits, n, length)
}

/// Item indices for one epoch: a random permutation cut into `⌊n/b⌋` full
/// batches; the remainder is dropped.
pub fn epoch_batches(n: usize, b: usize, rng: &mut RngState) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > n {
        return Err(Error::invalid(
            "training.batch_size",
            format!("batch size {b} does not fit a dataset of {n} images"),
        ));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks_exact(b).map(<[usize]>::to_vec).collect())
}

/// One epoch of minibatches drawn from `dataset`.
pub fn minibatches<'a>(
    dataset: &'a ImageDataset,
    b: usize,
    rng: &mut RngState,
) -> Result<impl Iterator<Item = ImageBatch<f32>> + 'a> {
    let order = epoch_batches(dataset.len(), b, rng)?;
    Ok(order.into_iter().map(move |idx| dataset.batch(&idx)))
}
