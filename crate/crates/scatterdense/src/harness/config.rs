//! Experiment configuration: key=value files, typed defaults, stable hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::decoder::{GateActivation, ModelConfig, ResidualMode, SkipMode};
use crate::encoder::EncoderMode;
use crate::error::{Error, Result};

/// Complete description of one run. Together with the seed it determines
/// every artifact bit-for-bit.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Scattering scales J.
    pub scales: usize,
    /// Orientations L.
    pub orientations: usize,
    /// Wavelet slant s in [0, 1].
    pub slant: f64,
    /// Bottleneck / decoder channel width.
    pub c_bn: usize,
    /// Gate network hidden channels.
    pub gate_hidden: usize,
    pub skip_mode: SkipMode,
    pub gating: bool,
    pub encoder_mode: EncoderMode,
    pub gate_activation: GateActivation,
    /// Phase total-variation weight.
    pub lambda_ptv: f64,
    /// Phase alignment weight.
    pub lambda_align: f64,
    /// Pool phase maps 2x before the alignment comparison.
    pub align_pool: bool,
    /// Noise std in [0, 1] pixel units.
    pub sigma: f64,
    /// Training patch extent (power of two; tiles cut from the images).
    pub patch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over the run.
    pub lr_cosine: bool,
    pub batch: usize,
    pub seed: u64,
    /// Image directory; synthetic images are generated when absent.
    pub dataset: Option<PathBuf>,
    pub train_images: usize,
    pub val_images: usize,
    /// Full image extent (power of two).
    pub image_size: usize,
    /// Fraction of the training images actually used.
    pub data_fraction: f64,
    /// Prediction anchor: input | lowpass | none.
    pub residual: ResidualMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scales: 3,
            orientations: 8,
            slant: 0.5,
            c_bn: 16,
            gate_hidden: 32,
            skip_mode: SkipMode::Polar,
            gating: true,
            encoder_mode: EncoderMode::Stride1,
            gate_activation: GateActivation::Sigmoid,
            lambda_ptv: 0.0,
            lambda_align: 0.0,
            align_pool: false,
            sigma: 25.0 / 255.0,
            patch_size: 32,
            steps: 500,
            lr: 2e-3,
            lr_cosine: true,
            batch: 1,
            seed: 0,
            dataset: None,
            train_images: 8,
            val_images: 2,
            image_size: 64,
            data_fraction: 1.0,
            residual: ResidualMode::Lowpass,
        }
    }
}

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "key {key}: expected a boolean, got {other:?}"
        ))),
    }
}

impl ExperimentConfig {
    /// Apply one `key=value` assignment. Unknown keys fail closed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "J" => self.scales = parse_key(key, value)?,
            "L" => self.orientations = parse_key(key, value)?,
            "slant" => self.slant = parse_key(key, value)?,
            "c_bn" => self.c_bn = parse_key(key, value)?,
            "gate_hidden" => self.gate_hidden = parse_key(key, value)?,
            "skip_mode" => self.skip_mode = value.parse()?,
            "gating" => self.gating = parse_bool(key, value)?,
            "encoder_mode" => {
                self.encoder_mode = match value {
                    "stride1" => EncoderMode::Stride1,
                    "invariant" => EncoderMode::Invariant,
                    other => {
                        return Err(Error::Config(format!(
                            "key encoder_mode: expected stride1|invariant, got {other:?}"
                        )))
                    }
                }
            }
            "gate_activation" => self.gate_activation = value.parse()?,
            "lambda_ptv" => self.lambda_ptv = parse_key(key, value)?,
            "lambda_align" => self.lambda_align = parse_key(key, value)?,
            "align_pool" => self.align_pool = parse_bool(key, value)?,
            "sigma" => self.sigma = parse_key(key, value)?,
            "patch_size" => self.patch_size = parse_key(key, value)?,
            "steps" => self.steps = parse_key(key, value)?,
            "lr" => self.lr = parse_key(key, value)?,
            "lr_cosine" => self.lr_cosine = parse_bool(key, value)?,
            "batch" => self.batch = parse_key(key, value)?,
            "seed" => self.seed = parse_key(key, value)?,
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "train_images" => self.train_images = parse_key(key, value)?,
            "val_images" => self.val_images = parse_key(key, value)?,
            "image_size" => self.image_size = parse_key(key, value)?,
            "data_fraction" => self.data_fraction = parse_key(key, value)?,
            "residual" => self.residual = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a key=value file ('#' comments, blank lines allowed) and apply
    /// overrides on top. An empty or missing-override file yields defaults.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("J must be >= 1".into()));
        }
        if self.orientations == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.slant) {
            return Err(Error::Config(format!(
                "slant must lie in [0, 1], got {}",
                self.slant
            )));
        }
        if !crate::fft::is_power_of_two(self.patch_size)
            || !crate::fft::is_power_of_two(self.image_size)
        {
            return Err(Error::Config(format!(
                "patch_size and image_size must be powers of two, got {} and {}",
                self.patch_size, self.image_size
            )));
        }
        if self.patch_size > self.image_size {
            return Err(Error::Config(format!(
                "patch_size {} exceeds image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.c_bn == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(0.0 < self.data_fraction && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.train_images == 0 || self.val_images == 0 {
            return Err(Error::Config("need at least one train and one val image".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn canonical(&self) -> String {
        let mut pairs = vec![
            ("J", self.scales.to_string()),
            ("L", self.orientations.to_string()),
            ("align_pool", self.align_pool.to_string()),
            ("batch", self.batch.to_string()),
            ("c_bn", self.c_bn.to_string()),
            ("data_fraction", format!("{}", self.data_fraction)),
            (
                "dataset",
                self.dataset
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("encoder_mode", self.encoder_mode.to_string()),
            ("gate_activation", self.gate_activation.to_string()),
            ("gate_hidden", self.gate_hidden.to_string()),
            ("gating", self.gating.to_string()),
            ("image_size", self.image_size.to_string()),
            ("lambda_align", format!("{}", self.lambda_align)),
            ("lambda_ptv", format!("{}", self.lambda_ptv)),
            ("lr", format!("{}", self.lr)),
            ("lr_cosine", self.lr_cosine.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("residual", self.residual.to_string()),
            ("seed", self.seed.to_string()),
            ("sigma", format!("{}", self.sigma)),
            ("skip_mode", self.skip_mode.to_string()),
            ("slant", format!("{}", self.slant)),
            ("steps", self.steps.to_string()),
            ("train_images", self.train_images.to_string()),
            ("val_images", self.val_images.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Stable hex digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The architecture this config describes (C_in is 1: grayscale).
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            c_in: 1,
            scales: self.scales,
            orientations: self.orientations,
            c_bn: self.c_bn,
            gate_hidden: self.gate_hidden,
            out_channels: 1,
            gating: self.gating,
            skip_mode: self.skip_mode,
            gate_activation: self.gate_activation,
            residual: self.residual,
        }
    }
}
