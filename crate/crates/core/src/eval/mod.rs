//! Metrics, severity sweeps and model comparison.

mod metrics;
mod report;

pub use metrics::{bit_accuracy, bit_accuracy_per_item, mean_psnr, mean_std, psnr};
pub use report::{
    compare_models, write_plots, AttackSummary, ComparisonReport, RowComparison, SweepMeta, SweepRow, SweepTable,
};

use std::collections::BTreeMap;

use image::codecs::jpeg::JpegEncoder;

use crate::attacks::{apply_with, AttackDraw};
use crate::config::{AttackKind, AttackSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::ingest::{sample_messages, ImageDataset};
use crate::models::ModelBundle;
use crate::rng::make_rng;
use crate::tensor::Tensor;
use crate::types::{ImageBatch, ImageRole, MessageBatch};

/// Row label for JPEG evaluated with a real codec instead of the DCT
/// approximation.
pub const JPEG_CODEC: &str = "jpeg_codec";

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub model_id: String,
    pub seed: u64,
    pub batch_size: usize,
    /// Also evaluate JPEG rows through an actual encode/decode round trip.
    pub true_jpeg: bool,
}

fn check_bundle(bundle: &ModelBundle<f32>, dataset: &ImageDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    if !bundle.all_finite() {
        return Err(Error::contract("model parameters are not finite"));
    }
    Ok(())
}

/// Encodes the whole dataset in chunks with messages drawn from `seed`.
fn embed_all(
    bundle: &ModelBundle<f32>,
    dataset: &ImageDataset,
    seed: u64,
    batch_size: usize,
) -> Result<(MessageBatch, Vec<(ImageBatch<f32>, ImageBatch<f32>)>)> {
    let n = dataset.len();
    let messages = sample_messages(&mut make_rng(seed), n, bundle.arch.message_length)?;
    let mut chunks = Vec::new();
    for start in (0..n).step_by(batch_size.max(1)) {
        let len = batch_size.min(n - start);
        let cover = dataset.range(start, len);
        let wm = bundle.encode(&cover, &messages.narrow(start, len))?;
        chunks.push((cover, wm));
    }
    Ok((messages, chunks))
}

/// Mean bit accuracy and mean PSNR without any attack.
pub fn identity_metrics(bundle: &ModelBundle<f32>, dataset: &ImageDataset, seed: u64, batch_size: usize) -> Result<(f64, f64)> {
    check_bundle(bundle, dataset)?;
    let (messages, chunks) = embed_all(bundle, dataset, seed, batch_size)?;
    let mut accs = Vec::with_capacity(dataset.len());
    let mut psnrs = Vec::with_capacity(dataset.len());
    let mut start = 0;
    for (cover, wm) in &chunks {
        let m = messages.narrow(start, cover.batch_size());
        accs.extend(bit_accuracy_per_item(&m, &bundle.decode(wm)?)?);
        psnrs.extend(psnr(cover, wm)?);
        start += cover.batch_size();
    }
    Ok((mean_std(&accs).0, mean_psnr(&psnrs)))
}

/// JPEG encode/decode round trip at integer quality `q` through the image
/// crate's baseline encoder.
pub fn jpeg_codec_roundtrip(x: &ImageBatch<f32>, quality: f64) -> Result<ImageBatch<f32>> {
    let (n, _, h, w) = x.tensor().dims4();
    let q = quality.round().clamp(1.0, 100.0) as u8;
    let hw = h * w;
    let mut out = Vec::with_capacity(x.tensor().len());
    for i in 0..n {
        let img = &x.tensor().data()[i * 3 * hw..(i + 1) * 3 * hw];
        let mut rgb = vec![0u8; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                rgb[p * 3 + c] = (img[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, q)
            .encode(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Ingest(format!("jpeg encode: {e}")))?;
        let decoded = image::load_from_memory(&buf)
            .map_err(|e| Error::Ingest(format!("jpeg decode: {e}")))?
            .to_rgb8();
        let mut chw = vec![0.0f32; 3 * hw];
        for (p, px) in decoded.pixels().enumerate() {
            for c in 0..3 {
                chw[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        out.extend(chw);
    }
    ImageBatch::new(Tensor::from_vec(x.tensor().shape(), out)?, ImageRole::Attacked)
}

/// The rows a sweep over `attacks` produces, in canonical order: identity
/// first, then each attack's grid ascending, then codec JPEG rows.
pub fn sweep_rows(attacks: &[AttackSpec], true_jpeg: bool) -> Vec<(String, AttackKind, f64)> {
    let mut rows = vec![(AttackKind::Identity.name().to_string(), AttackKind::Identity, 0.0)];
    for a in attacks.iter().filter(|a| a.kind != AttackKind::Identity) {
        for s in a.severities() {
            rows.push((a.kind.name().to_string(), a.kind, s));
        }
    }
    if true_jpeg {
        for a in attacks.iter().filter(|a| a.kind == AttackKind::Jpeg) {
            for s in a.severities() {
                rows.push((JPEG_CODEC.to_string(), AttackKind::Jpeg, s));
            }
        }
    }
    rows
}

/// Bit accuracy of `bundle` on `dataset` for every severity of every
/// attack. Messages are sampled once per sweep from `opts.seed`; each row
/// draws its attack placements from its own stream derived from the seed.
pub fn severity_sweep(
    bundle: &ModelBundle<f32>,
    dataset: &ImageDataset,
    attacks: &[AttackSpec],
    opts: &SweepOptions,
) -> Result<SweepTable> {
    check_bundle(bundle, dataset)?;
    let (messages, chunks) = embed_all(bundle, dataset, opts.seed, opts.batch_size)?;
    let mut row_seeds = make_rng(opts.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut rows = Vec::new();
    for (label, kind, severity) in sweep_rows(attacks, opts.true_jpeg) {
        let mut rng = row_seeds.fork();
        let mut accs = Vec::with_capacity(dataset.len());
        let mut start = 0;
        for (cover, wm) in &chunks {
            let len = cover.batch_size();
            let attacked = if label == JPEG_CODEC {
                jpeg_codec_roundtrip(wm, severity)?
            } else {
                let draw = AttackDraw::sample(kind, len, wm.height(), wm.width(), &mut rng);
                apply_with(kind, wm, cover, severity, &draw)?.image
            };
            let m = messages.narrow(start, len);
            accs.extend(bit_accuracy_per_item(&m, &bundle.decode(&attacked)?)?);
            start += len;
        }
        let (mean, std) = mean_std(&accs);
        rows.push(SweepRow {
            model_id: opts.model_id.clone(),
            attack: label,
            severity,
            bit_acc_mean: mean,
            bit_acc_std: std,
            n: accs.len(),
        });
    }
    Ok(SweepTable {
        rows,
        meta: SweepMeta {
            model_id: opts.model_id.clone(),
            eval_seed: opts.seed,
            trained: BTreeMap::new(),
            extended_grids: false,
        },
    })
}

/// Severities a configuration trains on, per attack name.
pub fn trained_severities(cfg: &TrainConfig) -> BTreeMap<String, Vec<f64>> {
    cfg.attacks
        .iter()
        .filter(|a| a.kind != AttackKind::Identity)
        .map(|a| (a.kind.name().to_string(), a.severities()))
        .collect()
}

/// Sweep grids: each trained grid extended by one step beyond both ends
/// (within the attack's domain). Singleton training severities are swept
/// over the reference grid of their attack instead.
pub fn sweep_grids(attacks: &[AttackSpec], extend: bool) -> Vec<AttackSpec> {
    let reference = AttackSpec::reference_worst_case();
    attacks
        .iter()
        .filter(|a| a.kind != AttackKind::Identity)
        .map(|a| {
            let grid = match a.grid {
                Some(g) if g.len() == 1 => reference
                    .iter()
                    .find(|r| r.kind == a.kind)
                    .and_then(|r| r.grid)
                    .unwrap_or(g),
                Some(g) => g,
                None => unreachable!("non-identity attacks carry a grid"),
            };
            let grid = if extend { grid.extended(a.kind) } else { grid };
            AttackSpec::new(a.kind, Some(grid)).expect("extended grids stay in the attack's domain")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchConfig;
    use crate::ingest::Split;
    use crate::models::init_models;

    fn tiny() -> (ModelBundle<f32>, ImageDataset) {
        let arch = ArchConfig {
            image_height: 32,
            image_width: 32,
            message_length: 5,
            channels: 4,
            encoder_blocks: 1,
            encoder_post_blocks: 1,
            decoder_blocks: 1,
            discriminator_blocks: 1,
            discriminator_channels: 4,
            ..ArchConfig::default()
        };
        let bundle = init_models(&arch, &mut make_rng(1)).unwrap();
        let mut rng = make_rng(2);
        let ds = ImageDataset::from_tensor(Tensor::from_fn(&[5, 3, 32, 32], |_| rng.uniform() as f32), Split::Test).unwrap();
        (bundle, ds)
    }

    fn opts() -> SweepOptions {
        SweepOptions {
            model_id: "m".into(),
            seed: 3,
            batch_size: 2,
            true_jpeg: false,
        }
    }

    #[test]
    fn crop_sweep_has_identity_plus_grid_rows_and_is_deterministic() {
        let (bundle, ds) = tiny();
        let attacks = vec![AttackSpec::grid(AttackKind::Crop, 0.1, 0.8, 0.1).unwrap()];
        let t = severity_sweep(&bundle, &ds, &attacks, &opts()).unwrap();
        assert_eq!(t.rows.len(), 9);
        assert_eq!(t.rows[0].attack, "identity");
        assert!(t.rows.iter().all(|r| r.n == 5 && (0.0..=1.0).contains(&r.bit_acc_mean)));
        let again = severity_sweep(&bundle, &ds, &attacks, &opts()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn codec_rows_are_added_on_request() {
        let (bundle, ds) = tiny();
        let attacks = vec![AttackSpec::grid(AttackKind::Jpeg, 50.0, 100.0, 10.0).unwrap()];
        let t = severity_sweep(&bundle, &ds, &attacks, &SweepOptions { true_jpeg: true, ..opts() }).unwrap();
        assert_eq!(t.rows.len(), 13);
        assert_eq!(t.rows.iter().filter(|r| r.attack == JPEG_CODEC).count(), 6);
    }

    #[test]
    fn codec_roundtrip_is_close_at_high_quality() {
        let x = ImageBatch::new(Tensor::<f32>::full(&[1, 3, 16, 16], 0.4), ImageRole::Watermarked).unwrap();
        let y = jpeg_codec_roundtrip(&x, 95.0).unwrap();
        assert!(y.tensor().data().iter().all(|v| (v - 0.4).abs() < 3.0 / 255.0));
    }

    #[test]
    fn sweep_grids_extend_and_replace_singletons() {
        let grids = sweep_grids(
            &[
                AttackSpec::identity(),
                AttackSpec::grid(AttackKind::GaussianBlur, 1.0, 5.0, 1.0).unwrap(),
                AttackSpec::fixed(AttackKind::Dropout, 0.3).unwrap(),
            ],
            true,
        );
        assert_eq!(grids.len(), 2);
        // sigma 0 is outside the blur domain, so only the upper end grows
        assert_eq!(grids[0].severities(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dropout = grids[1].severities();
        assert_eq!((dropout[0], *dropout.last().unwrap(), dropout.len()), (0.2, 1.0, 9));
    }

    #[test]
    fn identity_metrics_are_in_range() {
        let (bundle, ds) = tiny();
        let (acc, p) = identity_metrics(&bundle, &ds, 0, 2).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(p > 0.0);
    }
}
