//! Training configuration: the TOML schema, defaults and validation.
//!
//! A config file has five sections, all optional:
//!
//! ```toml
//! [data]      # train_dir, test_dir, train_limit, test_limit
//! [model]     # image_height, image_width, message_length, channel widths, block counts
//! [[attacks]] # kind = "crop", min = 0.1, max = 0.8, step = 0.1   (or fixed = 0.3)
//! [training]  # batch_size, subset_sizes, epochs, learning rates, loss weights, mode, seed
//! [eval]      # seed, batch_size, true_jpeg, extend_grids
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_ingest_size, MIN_SPATIAL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Identity,
    Crop,
    Cropout,
    Dropout,
    GaussianBlur,
    Jpeg,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Identity,
        AttackKind::Crop,
        AttackKind::Cropout,
        AttackKind::Dropout,
        AttackKind::GaussianBlur,
        AttackKind::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::Crop => "crop",
            AttackKind::Cropout => "cropout",
            AttackKind::Dropout => "dropout",
            AttackKind::GaussianBlur => "gaussian_blur",
            AttackKind::Jpeg => "jpeg",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "identity" | "none" => AttackKind::Identity,
            "crop" => AttackKind::Crop,
            "cropout" => AttackKind::Cropout,
            "dropout" => AttackKind::Dropout,
            "gaussian_blur" | "blur" => AttackKind::GaussianBlur,
            "jpeg" => AttackKind::Jpeg,
            _ => return Err(Error::contract(format!("unknown attack kind `{name}`"))),
        })
    }

    /// Whether a smaller severity value is the harsher attack.
    pub fn lower_is_harsher(self) -> bool {
        matches!(
            self,
            AttackKind::Crop | AttackKind::Cropout | AttackKind::Dropout | AttackKind::Jpeg
        )
    }

    /// Checks `s` against the attack's legal severity domain.
    pub fn check_severity(self, s: f64) -> Result<()> {
        let reason = match self {
            AttackKind::Identity => return Ok(()),
            AttackKind::Crop | AttackKind::Cropout if !(s > 0.0 && s <= 1.0) => "area ratio must lie in (0, 1]",
            AttackKind::Dropout if !(0.0..=1.0).contains(&s) => "keep probability must lie in [0, 1]",
            AttackKind::GaussianBlur if !(s > 0.0 && s.is_finite()) => "sigma must be > 0",
            AttackKind::Jpeg if !(1.0..=100.0).contains(&s) => "quality must lie in [1, 100]",
            _ => return Ok(()),
        };
        Err(Error::SeverityDomain {
            attack: self.name(),
            severity: s,
            reason: reason.to_string(),
        })
    }

    /// Domain check for grid bounds, which is stricter for dropout (a grid of
    /// keep ratios lives in (0, 1]).
    fn check_grid_bound(self, s: f64) -> Result<()> {
        if self == AttackKind::Dropout && s <= 0.0 {
            return Err(Error::SeverityDomain {
                attack: self.name(),
                severity: s,
                reason: "grid keep ratios must lie in (0, 1]".into(),
            });
        }
        self.check_severity(s)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const MAX_GRID_POINTS: usize = 10_000;

/// Inclusive arithmetic grid `{min, min + step, …, max}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeverityGrid {
    min: f64,
    max: f64,
    step: f64,
}

impl SeverityGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) {
            return Err(Error::contract("grid bounds and step must be finite"));
        }
        if min > max {
            return Err(Error::contract(format!("grid min {min} exceeds max {max}")));
        }
        if step <= 0.0 {
            return Err(Error::contract(format!("grid step {step} must be > 0")));
        }
        let grid = SeverityGrid { min, max, step };
        let span = (max - min) / step;
        let n = span.round();
        if (span - n).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "grid max {max} is not reachable from {min} in steps of {step}"
            )));
        }
        if n as usize + 1 > MAX_GRID_POINTS {
            return Err(Error::contract("grid has too many points"));
        }
        Ok(grid)
    }

    pub fn singleton(s: f64) -> Result<Self> {
        SeverityGrid::new(s, s, 1.0)
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid values in ascending order.
    ///
    /// Values are enumerated as scaled integers whenever the bounds are short
    /// decimals, so a 0.1 step yields exactly `3.0 / 10.0` rather than an
    /// accumulated `0.1 + 0.1 + 0.1`.
    pub fn values(&self) -> Vec<f64> {
        let n = self.len();
        if let Some(scale) = decimal_scale(&[self.min, self.max, self.step]) {
            let lo = (self.min * scale).round() as i64;
            let st = (self.step * scale).round() as i64;
            (0..n as i64).map(|i| (lo + i * st) as f64 / scale).collect()
        } else {
            (0..n).map(|i| self.min + i as f64 * self.step).collect()
        }
    }

    pub fn contains(&self, s: f64) -> bool {
        self.values().iter().any(|&v| (v - s).abs() <= 1e-9 * v.abs().max(1.0))
    }

    /// The grid extended by one step beyond each end, dropping points that
    /// leave the attack's legal domain.
    pub fn extended(&self, kind: AttackKind) -> SeverityGrid {
        let mut lo = self.min;
        let mut hi = self.max;
        let (below, above) = (self.min - self.step, self.max + self.step);
        if kind.check_grid_bound(round_decimal(below)).is_ok() {
            lo = round_decimal(below);
        }
        if kind.check_grid_bound(round_decimal(above)).is_ok() {
            hi = round_decimal(above);
        }
        SeverityGrid { min: lo, max: hi, step: self.step }
    }
}

fn decimal_scale(xs: &[f64]) -> Option<f64> {
    (0..=9).map(|d| 10f64.powi(d)).find(|&scale| {
        xs.iter().all(|&x| {
            let y = x * scale;
            y.abs() < 9e15 && (y - y.round()).abs() <= 1e-7 * y.abs().max(1.0)
        })
    })
}

fn round_decimal(x: f64) -> f64 {
    match decimal_scale(&[x]) {
        Some(scale) => (x * scale).round() / scale,
        None => (x * 1e9).round() / 1e9,
    }
}

/// One distortion family with its severity grid (none for identity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttackEntry", into = "AttackEntry")]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub grid: Option<SeverityGrid>,
}

/// On-disk form of an attack: `kind` plus `{min, max, step}` or `{fixed}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackEntry {
    kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed: Option<f64>,
}

impl TryFrom<AttackEntry> for AttackSpec {
    type Error = Error;

    fn try_from(e: AttackEntry) -> Result<Self> {
        let grid = match (e.min, e.max, e.step, e.fixed) {
            (None, None, None, None) => None,
            (None, None, None, Some(s)) => Some(SeverityGrid::singleton(s)?),
            (Some(lo), Some(hi), Some(st), None) => Some(SeverityGrid::new(lo, hi, st)?),
            _ => {
                return Err(Error::contract(
                    "an attack takes either `fixed` or all of `min`, `max`, `step`",
                ))
            }
        };
        AttackSpec::new(e.kind, grid)
    }
}

impl From<AttackSpec> for AttackEntry {
    fn from(a: AttackSpec) -> Self {
        let mut e = AttackEntry {
            kind: a.kind,
            min: None,
            max: None,
            step: None,
            fixed: None,
        };
        if let Some(g) = a.grid {
            e.min = Some(g.min);
            e.max = Some(g.max);
            e.step = Some(g.step);
        }
        e
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind, grid: Option<SeverityGrid>) -> Result<Self> {
        match (kind, &grid) {
            (AttackKind::Identity, Some(_)) => {
                return Err(Error::contract("identity takes no severity grid"))
            }
            (AttackKind::Identity, None) => {}
            (_, None) => {
                return Err(Error::contract(format!("attack `{kind}` needs a severity grid")))
            }
            (_, Some(g)) => {
                kind.check_grid_bound(g.min)?;
                kind.check_grid_bound(g.max)?;
            }
        }
        Ok(AttackSpec { kind, grid })
    }

    pub fn identity() -> Self {
        AttackSpec {
            kind: AttackKind::Identity,
            grid: None,
        }
    }

    pub fn grid(kind: AttackKind, min: f64, max: f64, step: f64) -> Result<Self> {
        AttackSpec::new(kind, Some(SeverityGrid::new(min, max, step)?))
    }

    pub fn fixed(kind: AttackKind, s: f64) -> Result<Self> {
        AttackSpec::new(kind, Some(SeverityGrid::singleton(s)?))
    }

    /// Severity values to search over; identity has the single placeholder 0.
    pub fn severities(&self) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.values(),
            None => vec![0.0],
        }
    }

    /// The grid ranges used for worst-case training in the reference setup.
    pub fn reference_worst_case() -> Vec<AttackSpec> {
        use AttackKind::*;
        vec![
            AttackSpec::identity(),
            AttackSpec::grid(Crop, 0.1, 0.8, 0.1).unwrap(),
            AttackSpec::grid(Cropout, 0.3, 0.9, 0.1).unwrap(),
            AttackSpec::grid(Dropout, 0.3, 0.9, 0.1).unwrap(),
            AttackSpec::grid(GaussianBlur, 1.0, 5.0, 1.0).unwrap(),
            AttackSpec::grid(Jpeg, 50.0, 100.0, 10.0).unwrap(),
        ]
    }

    /// The single intensities used by the fixed-severity baseline. JPEG has
    /// no baseline intensity and is left out.
    pub fn reference_fixed() -> Vec<AttackSpec> {
        use AttackKind::*;
        vec![
            AttackSpec::identity(),
            AttackSpec::fixed(Crop, 0.3).unwrap(),
            AttackSpec::fixed(Cropout, 0.3).unwrap(),
            AttackSpec::fixed(Dropout, 0.3).unwrap(),
            AttackSpec::fixed(GaussianBlur, 2.0).unwrap(),
        ]
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.grid {
            None => write!(f, "{}", self.kind),
            Some(g) if g.len() == 1 => write!(f, "{}@{}", self.kind, g.min),
            Some(g) => write!(f, "{}={}:{}:{}", self.kind, g.min, g.max, g.step),
        }
    }
}

/// Parses a comma-separated attack list such as
/// `identity,crop=0.1:0.8:0.1,gaussian_blur@2`.
pub fn parse_attack_list(text: &str) -> Result<Vec<AttackSpec>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            if let Some((kind, s)) = item.split_once('@') {
                let s: f64 = s
                    .parse()
                    .map_err(|_| Error::contract(format!("bad severity in `{item}`")))?;
                AttackSpec::fixed(AttackKind::parse(kind)?, s)
            } else if let Some((kind, range)) = item.split_once('=') {
                let parts: Vec<f64> = range
                    .split(':')
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::contract(format!("bad grid in `{item}`")))?;
                match parts.as_slice() {
                    [lo, hi, st] => AttackSpec::grid(AttackKind::parse(kind)?, *lo, *hi, *st),
                    _ => Err(Error::contract(format!("grid `{item}` needs min:max:step"))),
                }
            } else {
                let kind = AttackKind::parse(item)?;
                if kind == AttackKind::Identity {
                    Ok(AttackSpec::identity())
                } else {
                    default_spec(kind)
                }
            }
        })
        .collect()
}

fn default_spec(kind: AttackKind) -> Result<AttackSpec> {
    AttackSpec::reference_worst_case()
        .into_iter()
        .find(|a| a.kind == kind)
        .ok_or_else(|| Error::contract(format!("no default grid for `{kind}`")))
}

/// Relative weights of the image-similarity and adversarial losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_image: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_image: 0.7,
            lambda_adv: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Each attack runs at the severity found by the inner maximization.
    #[default]
    WorstCase,
    /// Each attack runs at its single configured severity.
    FixedSeverity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchScope {
    /// One severity per attack subset, maximizing the subset-summed loss.
    #[default]
    SubBatch,
    /// One severity per image.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

/// Network shapes shared by encoder, decoder and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub message_length: usize,
    pub channels: usize,
    pub encoder_blocks: usize,
    pub encoder_post_blocks: usize,
    pub decoder_blocks: usize,
    pub discriminator_blocks: usize,
    pub discriminator_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_height: 128,
            image_width: 128,
            message_length: 30,
            channels: 64,
            encoder_blocks: 4,
            encoder_post_blocks: 2,
            decoder_blocks: 7,
            discriminator_blocks: 3,
            discriminator_channels: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        check_ingest_size(self.image_height, self.image_width)?;
        let positive = [
            ("model.message_length", self.message_length),
            ("model.channels", self.channels),
            ("model.encoder_blocks", self.encoder_blocks),
            ("model.encoder_post_blocks", self.encoder_post_blocks),
            ("model.decoder_blocks", self.decoder_blocks),
            ("model.discriminator_blocks", self.discriminator_blocks),
            ("model.discriminator_channels", self.discriminator_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("model.bn_momentum", "must lie in [0, 1]"));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::invalid("model.bn_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Images per attack subset; empty means an equal split.
    pub subset_sizes: Vec<usize>,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_discriminator: f64,
    pub lambda_image: f64,
    pub lambda_adv: f64,
    pub mode: TrainMode,
    pub search: SearchScope,
    /// Reuse the search's random placements for the gradient-carrying pass.
    pub replay_search_draws: bool,
    /// Sample new messages every step; `false` keeps one message batch for
    /// the whole run.
    pub fresh_messages: bool,
    /// Checkpoint every this many epochs (0: only the final checkpoint).
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_window: Option<usize>,
    pub early_stop_tol: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainingConfig {
            batch_size: 12,
            subset_sizes: Vec::new(),
            epochs: 10,
            optimizer: OptimizerKind::Sgd,
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            lr_discriminator: 1e-3,
            lambda_image: w.lambda_image,
            lambda_adv: w.lambda_adv,
            mode: TrainMode::WorstCase,
            search: SearchScope::SubBatch,
            replay_search_draws: false,
            fresh_messages: true,
            checkpoint_every: 0,
            early_stop_window: None,
            early_stop_tol: 1e-3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_image: self.lambda_image,
            lambda_adv: self.lambda_adv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub true_jpeg: bool,
    /// Sweep one grid step beyond each end of the training grids.
    pub extend_grids: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 1234,
            batch_size: 16,
            true_jpeg: false,
            extend_grids: true,
        }
    }
}

/// The file as written, before defaults that depend on other fields.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    model: ArchConfig,
    #[serde(default)]
    attacks: Option<Vec<AttackSpec>>,
    #[serde(default)]
    training: TrainingConfig,
    #[serde(default)]
    eval: EvalConfig,
}

/// Fully validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ArchConfig,
    pub attacks: Vec<AttackSpec>,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut cfg = TrainConfig {
            data: DataConfig::default(),
            model: ArchConfig::default(),
            attacks: AttackSpec::reference_worst_case(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.validate().expect("defaults are valid");
        cfg
    }
}

/// Splits `b` items into `k` near-equal parts, remainder to the earliest.
pub fn equal_split(b: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| b / k + usize::from(i < b % k)).collect()
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::ConfigSchema {
            path: ".".into(),
            message: e.to_string(),
        })?;
        let raw: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| Error::ConfigSchema {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        let mode = raw.training.mode;
        let mut cfg = TrainConfig {
            data: raw.data,
            model: raw.model,
            attacks: raw.attacks.unwrap_or_else(|| match mode {
                TrainMode::WorstCase => AttackSpec::reference_worst_case(),
                TrainMode::FixedSeverity => AttackSpec::reference_fixed(),
            }),
            training: raw.training,
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every invariant; fills in an equal subset split if none is set.
    pub fn validate(&mut self) -> Result<()> {
        self.model.validate()?;
        let t = &mut self.training;
        let k = self.attacks.len();
        if k == 0 {
            return Err(Error::invalid("attacks", "at least one attack is required"));
        }
        if t.batch_size < k {
            return Err(Error::invalid(
                "training.batch_size",
                format!("batch size {} is smaller than the {k} attacks", t.batch_size),
            ));
        }
        if t.subset_sizes.is_empty() {
            t.subset_sizes = equal_split(t.batch_size, k);
        }
        if t.subset_sizes.len() != k {
            return Err(Error::invalid(
                "training.subset_sizes",
                format!("{} sizes given for {k} attacks", t.subset_sizes.len()),
            ));
        }
        if t.subset_sizes.contains(&0) {
            return Err(Error::invalid("training.subset_sizes", "every subset needs >= 1 image"));
        }
        let total: usize = t.subset_sizes.iter().sum();
        if total != t.batch_size {
            return Err(Error::invalid(
                "training.subset_sizes",
                format!("sizes sum to {total} but batch_size is {}", t.batch_size),
            ));
        }
        for (field, v) in [
            ("training.lr_encoder", t.lr_encoder),
            ("training.lr_decoder", t.lr_decoder),
            ("training.lr_discriminator", t.lr_discriminator),
            ("training.lambda_image", t.lambda_image),
            ("training.lambda_adv", t.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("{v} must be finite and >= 0")));
            }
        }
        if t.early_stop_window == Some(0) {
            return Err(Error::invalid("training.early_stop_window", "must be >= 1"));
        }
        if !(t.early_stop_tol >= 0.0 && t.early_stop_tol.is_finite()) {
            return Err(Error::invalid("training.early_stop_tol", "must be finite and >= 0"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if t.mode == TrainMode::FixedSeverity {
                if let Some(g) = &a.grid {
                    if g.len() != 1 {
                        return Err(Error::invalid(
                            format!("attacks[{i}]"),
                            format!("fixed_severity mode needs one severity, `{}` has {}", a.kind, g.len()),
                        ));
                    }
                }
            }
            if a.kind == AttackKind::Crop {
                let lowest = a.grid.as_ref().map_or(1.0, |g| g.min());
                let side = (lowest.sqrt() * self.model.image_height.min(self.model.image_width) as f64)
                    .floor() as usize;
                if side < MIN_SPATIAL {
                    return Err(Error::invalid(
                        format!("attacks[{i}]"),
                        format!("crop ratio {lowest} leaves a {side}px side, below {MIN_SPATIAL}"),
                    ));
                }
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::invalid("eval.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_toml_str(&text)
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grids_validate_with_exact_values() {
        let specs = AttackSpec::reference_worst_case();
        let crop = specs[1].grid.unwrap().values();
        assert_eq!(crop, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        assert_eq!(specs[2].grid.unwrap().values(), vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(specs[3].grid.unwrap().len(), 7);
        assert_eq!(specs[4].grid.unwrap().values(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(specs[5].grid.unwrap().values(), vec![50.0, 60.0, 70.0, 80.0, 90.0, 100.0]);
    }

    #[test]
    fn grid_rejects_bad_bounds() {
        assert!(SeverityGrid::new(0.5, 0.1, 0.1).is_err());
        assert!(SeverityGrid::new(0.1, 0.5, 0.0).is_err());
        assert!(SeverityGrid::new(0.1, 0.55, 0.1).is_err());
        assert!(AttackSpec::grid(AttackKind::Crop, 0.0, 0.5, 0.1).is_err());
        assert!(AttackSpec::grid(AttackKind::Jpeg, 50.0, 110.0, 10.0).is_err());
        assert!(AttackSpec::grid(AttackKind::GaussianBlur, 0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn extension_respects_domain() {
        let crop = AttackSpec::reference_worst_case()[1].grid.unwrap();
        let ext = crop.extended(AttackKind::Crop);
        assert_eq!(ext.values().first(), Some(&0.1));
        assert_eq!(ext.values().last(), Some(&0.9));
        let jpeg = SeverityGrid::new(50.0, 100.0, 10.0).unwrap().extended(AttackKind::Jpeg);
        assert_eq!(jpeg.values(), vec![40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]);
    }

    #[test]
    fn subset_sum_must_match_batch() {
        let ok = "[training]\nbatch_size = 12\nsubset_sizes = [2, 2, 2, 2, 2, 2]\n";
        let cfg = TrainConfig::from_toml_str(ok).unwrap();
        assert_eq!(cfg.attacks.len(), 6);
        let bad = "[training]\nbatch_size = 12\nsubset_sizes = [3, 3, 3, 3, 3, 3]\n";
        match TrainConfig::from_toml_str(bad) {
            Err(Error::ConfigInvalid { field, .. }) => assert_eq!(field, "training.subset_sizes"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn omitted_weights_take_defaults() {
        let cfg = TrainConfig::from_toml_str("[training]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.training.lambda_image, 0.7);
        assert_eq!(cfg.training.lambda_adv, 0.001);
        let again = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn schema_errors_name_the_field() {
        match TrainConfig::from_toml_str("[training]\nbatch_size = \"x\"\n") {
            Err(Error::ConfigSchema { path, .. }) => assert_eq!(path, "training.batch_size"),
            other => panic!("expected schema error, got {other:?}"),
        }
        match TrainConfig::from_toml_str("[model]\nwidth = 3\n") {
            Err(Error::ConfigSchema { path, .. }) => assert!(path.starts_with("model"), "{path}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_mode_defaults_and_singletons() {
        let cfg = TrainConfig::from_toml_str("[training]\nmode = \"fixed_severity\"\n").unwrap();
        assert_eq!(cfg.attacks, AttackSpec::reference_fixed());
        assert_eq!(cfg.training.subset_sizes, vec![3, 3, 2, 2, 2]);
        let bad = "[training]\nmode = \"fixed_severity\"\n[[attacks]]\nkind = \"crop\"\nmin = 0.1\nmax = 0.3\nstep = 0.1\n";
        assert!(TrainConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn attack_entries_accept_fixed_and_grid() {
        let text = "[[attacks]]\nkind = \"identity\"\n[[attacks]]\nkind = \"gaussian_blur\"\nfixed = 2.0\n[[attacks]]\nkind = \"jpeg\"\nmin = 50\nmax = 100\nstep = 10\n";
        let cfg = TrainConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.attacks[1].severities(), vec![2.0]);
        assert_eq!(cfg.attacks[2].severities().len(), 6);
        assert!(TrainConfig::from_toml_str("[[attacks]]\nkind = \"crop\"\nmin = 0.1\n").is_err());
    }

    #[test]
    fn attack_list_parsing() {
        let list = parse_attack_list("identity, crop=0.2:0.6:0.2, gaussian_blur@2, jpeg").unwrap();
        assert_eq!(list.len(), 4);
        assert_eq!(list[1].severities(), vec![0.2, 0.4, 0.6]);
        assert_eq!(list[2].severities(), vec![2.0]);
        assert_eq!(list[3].severities().len(), 6);
        assert!(parse_attack_list("rotate").is_err());
    }

    #[test]
    fn equal_split_gives_remainder_to_front() {
        assert_eq!(equal_split(12, 6), vec![2; 6]);
        assert_eq!(equal_split(12, 5), vec![3, 3, 2, 2, 2]);
    }

    #[test]
    fn small_crop_ratio_rejected_for_small_images() {
        let text = "[model]\nimage_height = 16\nimage_width = 16\n[[attacks]]\nkind = \"crop\"\nmin = 0.1\nmax = 0.8\nstep = 0.1\n";
        assert!(TrainConfig::from_toml_str(text).is_err());
    }
}
