use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

use wmrobust_core::config::parse_attack_list;
use wmrobust_core::eval::{
    compare_models, identity_metrics, mean_psnr, psnr, severity_sweep, sweep_grids, trained_severities, write_plots,
    SweepOptions, SweepTable,
};
use wmrobust_core::ingest::{load_image, load_image_dataset, sample_messages, ImageDataset, Split};
use wmrobust_core::models::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointManifest, ModelBundle};
use wmrobust_core::rng::entropy_seed;
use wmrobust_core::trainer::{train as run_training, EpochSummary, StepReport, TrainObserver};
use wmrobust_core::types::check_ingest_size;
use wmrobust_core::{AttackSpec, Error, ImageBatch, ImageRole, MessageBatch, TrainConfig, TrainMode};

use crate::error::{CliError, CliResult};

/// `seed` if given, otherwise a fresh one from system entropy, printed so
/// the run can be repeated.
fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = entropy_seed();
        eprintln!("seed {s} (drawn from entropy; pass --seed {s} to repeat)");
        s
    })
}

fn require_path(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!("{}: no such file or directory", path.display())))
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn load_model(path: &Path) -> CliResult<(ModelBundle<f32>, CheckpointManifest)> {
    require_path(path)?;
    Ok(load_checkpoint(path)?)
}

fn manifest_config(m: &CheckpointManifest) -> CliResult<Option<TrainConfig>> {
    m.config
        .as_deref()
        .map(|text| TrainConfig::from_toml_str(text).map_err(|e| CliError::from(Error::Checkpoint(format!("embedded config: {e}")))))
        .transpose()
}

fn load_eval_set(bundle: &ModelBundle<f32>, data: &Path, limit: Option<usize>) -> CliResult<ImageDataset> {
    require_path(data)?;
    let size = (bundle.arch.image_height, bundle.arch.image_width);
    Ok(load_image_dataset(data, Split::Test, size, limit)?)
}

pub struct TrainRequest {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub attacks: Option<String>,
    pub mode: Option<TrainMode>,
    pub epochs: Option<usize>,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

/// Streams step and epoch records to the run directory.
struct RunWriter {
    dir: PathBuf,
    history: BufWriter<File>,
    timing: BufWriter<File>,
    epochs: BufWriter<File>,
    checkpoint_every: usize,
    seed: u64,
    config: TrainConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.into(), source: e }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, r: &StepReport) -> wmrobust_core::Result<()> {
        let line = serde_json::to_string(r).expect("step report serializes");
        writeln!(self.history, "{line}").map_err(io_err(&self.dir))?;
        let t = json!({"step": r.step, "wall_ms": r.wall_time.as_secs_f64() * 1e3});
        writeln!(self.timing, "{t}").map_err(io_err(&self.dir))
    }

    fn on_epoch(&mut self, s: &EpochSummary, bundle: &ModelBundle<f32>) -> wmrobust_core::Result<()> {
        let line = serde_json::to_string(s).expect("epoch summary serializes");
        writeln!(self.epochs, "{line}").map_err(io_err(&self.dir))?;
        for f in [&mut self.history, &mut self.timing, &mut self.epochs] {
            f.flush().map_err(io_err(&self.dir))?;
        }
        if self.checkpoint_every > 0 && (s.epoch + 1).is_multiple_of(self.checkpoint_every) {
            let path = self.dir.join("checkpoints").join(format!("epoch-{:04}.safetensors", s.epoch + 1));
            save_checkpoint(bundle, &path, self.seed, Some(&self.config))?;
        }
        Ok(())
    }
}

pub fn train(req: TrainRequest) -> CliResult<()> {
    let (mut cfg, file_has_attacks, file_has_seed) = match &req.config {
        Some(path) => {
            require_path(path)?;
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let raw: toml::Table = text.parse().unwrap_or_default();
            let has = |section: &str, key: Option<&str>| match key {
                None => raw.contains_key(section),
                Some(k) => raw.get(section).and_then(|s| s.get(k)).is_some(),
            };
            let flags = (has("attacks", None), has("training", Some("seed")));
            (TrainConfig::from_toml_str(&text)?, flags.0, flags.1)
        }
        None => (TrainConfig::default(), false, false),
    };
    if let Some(mode) = req.mode {
        cfg.training.mode = mode;
        if mode == TrainMode::FixedSeverity && !file_has_attacks && req.attacks.is_none() {
            cfg.attacks = AttackSpec::reference_fixed();
            cfg.training.subset_sizes.clear();
        }
    }
    if let Some(list) = &req.attacks {
        cfg.attacks = parse_attack_list(list)?;
        cfg.training.subset_sizes.clear();
    }
    if let Some(e) = req.epochs {
        cfg.training.epochs = e;
    }
    if let Some(l) = req.limit {
        cfg.data.train_limit = Some(l);
    }
    if let Some(d) = &req.data {
        cfg.data.train_dir = Some(d.clone());
    }
    cfg.training.seed = match req.seed {
        Some(s) => s,
        None if file_has_seed => cfg.training.seed,
        None => resolve_seed(None),
    };
    cfg.validate()?;

    let train_dir = cfg
        .data
        .train_dir
        .clone()
        .ok_or_else(|| CliError::usage("no training data: pass --data or set data.train_dir"))?;
    require_path(&train_dir)?;
    let size = (cfg.model.image_height, cfg.model.image_width);
    let train_set = load_image_dataset(&train_dir, Split::Train, size, cfg.data.train_limit)?;
    let eval_set = match &cfg.data.test_dir {
        Some(dir) => {
            require_path(dir)?;
            Some(load_image_dataset(dir, Split::Test, size, cfg.data.test_limit)?)
        }
        None => None,
    };
    info!(
        "training on {} images ({} eval), seed {}",
        train_set.len(),
        eval_set.as_ref().map_or(0, |d| d.len()),
        cfg.training.seed
    );

    let dir = req.out;
    write_file(&dir.join("config.toml"), &cfg.to_toml_string())?;
    let mut writer = RunWriter {
        history: create(&dir.join("history.jsonl"))?,
        timing: create(&dir.join("timing.jsonl"))?,
        epochs: create(&dir.join("epochs.jsonl"))?,
        dir: dir.clone(),
        checkpoint_every: cfg.training.checkpoint_every,
        seed: cfg.training.seed,
        config: cfg.clone(),
    };
    let outcome = run_training(&cfg, &train_set, eval_set.as_ref(), &mut writer).map_err(CliError::in_training)?;
    for f in [&mut writer.history, &mut writer.timing, &mut writer.epochs] {
        f.flush().map_err(io_err(&dir))?;
    }
    let model = dir.join("model.safetensors");
    save_checkpoint(&outcome.bundle, &model, cfg.training.seed, Some(&cfg))?;
    let last = outcome.epochs.last();
    let summary = json!({
        "checkpoint": model,
        "seed": cfg.training.seed,
        "steps": outcome.history.len(),
        "epochs": outcome.epochs.len(),
        "stopped_early": outcome.stopped_early,
        "param_count": outcome.bundle.param_count(),
        "final_mean_j": last.map(|e| e.mean_j),
        "eval_bit_accuracy": last.and_then(|e| e.eval_bit_accuracy),
        "eval_psnr": last.and_then(|e| e.eval_psnr),
    });
    write_file(&dir.join("summary.json"), &format!("{summary:#}\n"))?;
    println!("{summary}");
    Ok(())
}

pub fn evaluate(checkpoint: &Path, data: &Path, seed: Option<u64>, limit: Option<usize>) -> CliResult<()> {
    let (bundle, manifest) = load_model(checkpoint)?;
    let ds = load_eval_set(&bundle, data, limit)?;
    let seed = resolve_seed(seed);
    let batch = manifest_config(&manifest)?.map_or(16, |c| c.eval.batch_size);
    let (acc, psnr) = identity_metrics(&bundle, &ds, seed, batch)?;
    println!(
        "{}",
        json!({"checkpoint": checkpoint, "images": ds.len(), "seed": seed, "bit_accuracy": acc, "psnr_db": psnr})
    );
    Ok(())
}

pub struct SweepRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub attacks: Option<String>,
    pub seed: Option<u64>,
    pub limit: Option<usize>,
    pub true_jpeg: bool,
    pub model_id: Option<String>,
    pub plots: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn sweep(req: SweepRequest) -> CliResult<()> {
    let (bundle, manifest) = load_model(&req.checkpoint)?;
    let cfg = manifest_config(&manifest)?;
    let ds = load_eval_set(&bundle, &req.data, req.limit)?;
    let seed = resolve_seed(req.seed);
    let (attacks, extended) = match (&req.attacks, &cfg) {
        (Some(list), _) => (parse_attack_list(list)?, false),
        (None, Some(c)) => (sweep_grids(&c.attacks, c.eval.extend_grids), c.eval.extend_grids),
        (None, None) => (sweep_grids(&AttackSpec::reference_worst_case(), false), false),
    };
    let model_id = req.model_id.unwrap_or_else(|| {
        req.checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string()
    });
    let opts = SweepOptions {
        model_id: model_id.clone(),
        seed,
        batch_size: cfg.as_ref().map_or(16, |c| c.eval.batch_size),
        true_jpeg: req.true_jpeg || cfg.as_ref().is_some_and(|c| c.eval.true_jpeg),
    };
    let mut table = severity_sweep(&bundle, &ds, &attacks, &opts)?;
    table.meta.extended_grids = extended;
    if let Some(c) = &cfg {
        table.meta.trained = trained_severities(c);
    }
    let out = req.out.unwrap_or_else(|| default_root().join(format!("sweep-{model_id}.csv")));
    table.write(&out)?;
    if let Some(dir) = &req.plots {
        write_plots(std::slice::from_ref(&table), dir)?;
    }
    println!("{}", json!({"table": out, "rows": table.rows.len(), "seed": seed}));
    Ok(())
}

fn default_root() -> PathBuf {
    std::env::var_os("WMROBUST_OUT").map_or_else(|| PathBuf::from("wmrobust-out"), PathBuf::from)
}

pub fn compare(tables: &[PathBuf], out: &Path) -> CliResult<()> {
    let tables = tables
        .iter()
        .map(|p| {
            require_path(p)?;
            Ok(SweepTable::read(p)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = compare_models(&tables)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("comparison.json"), &(text + "\n"))?;
    write_plots(&tables, &out.join("plots"))?;
    for a in &report.attacks {
        println!(
            "{}",
            json!({
                "attack": a.attack,
                "worst_case": a.worst_case,
                "most_robust": a.most_robust,
                "overfit_gap": a.overfit_gap,
            })
        );
    }
    Ok(())
}

/// Loads an image at its own size, trimmed to whole 8×8 blocks.
fn load_single(path: &Path) -> CliResult<ImageBatch<f32>> {
    require_path(path)?;
    let (w, h) = image::image_dimensions(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let (h, w) = ((h as usize / 8) * 8, (w as usize / 8) * 8);
    check_ingest_size(h, w).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let pixels = load_image(path, h, w)?;
    let t = wmrobust_core::Tensor::from_vec(&[1, 3, h, w], pixels)?;
    Ok(ImageBatch::new(t, ImageRole::Cover)?)
}

fn to_rgb(x: &ImageBatch<f32>) -> image::RgbImage {
    let (_, _, h, w) = x.tensor().dims4();
    let hw = h * w;
    let d = x.tensor().data();
    image::RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let p = r as usize * w + c as usize;
        image::Rgb([0, 1, 2].map(|ch| (d[ch * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn embed(checkpoint: &Path, image_path: &Path, message: Option<&str>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let (bundle, _) = load_model(checkpoint)?;
    let l = bundle.arch.message_length;
    let m = match message {
        Some(bits) => {
            let m = MessageBatch::parse_bits(bits).map_err(|e| CliError::usage(e.to_string()))?;
            if m.length() != l {
                return Err(CliError::usage(format!("message has {} bits but the model embeds {l}", m.length())));
            }
            m
        }
        None => sample_messages(&mut wmrobust_core::make_rng(resolve_seed(seed)), 1, l)?,
    };
    let cover = load_single(image_path)?;
    let wm = bundle.encode(&cover, &m)?;
    let rgb = to_rgb(&wm);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    rgb.save(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    // PSNR of what was written, after 8-bit quantization
    let written = wmrobust_core::Tensor::from_fn(wm.tensor().shape(), |i| {
        (wm.tensor().data()[i] * 255.0).round().clamp(0.0, 255.0) / 255.0
    });
    let db = mean_psnr(&psnr(&cover, &ImageBatch::new(written, ImageRole::Watermarked)?)?);
    println!("{}", json!({"out": out, "message": m.to_bit_string(0), "psnr_db": db}));
    Ok(())
}

pub fn extract(checkpoint: &Path, image_path: &Path) -> CliResult<()> {
    let (bundle, _) = load_model(checkpoint)?;
    let x = load_single(image_path)?.with_role(ImageRole::Attacked);
    let decoded = bundle.decode(&x)?;
    println!("{}", decoded.to_bits().to_bit_string(0));
    println!("{}", json!(decoded.values().data()));
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> CliResult<()> {
    require_path(checkpoint)?;
    let m = inspect_checkpoint(checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
    Ok(())
}
