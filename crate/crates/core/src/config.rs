//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; unknown or repeated keys are rejected. The
//! resolved form written next to each run lists every key, so two runs with
//! equal resolved files are configured identically.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datapipe::Normalization;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, SupervisedKind, LOG_EPS};
use crate::segmentor::SegmentorConfig;

/// Which parts of the full model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_gating: bool,
    pub use_ads: bool,
    pub use_discriminator: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self { use_gating: true, use_ads: true, use_discriminator: true };
    /// Plain UNet trained with the supervised loss only.
    pub const NONE: Self = Self { use_gating: false, use_ads: false, use_discriminator: false };

    pub fn validate(&self) -> Result<()> {
        if self.use_ads && !self.use_discriminator {
            return Err(Error::Config("use_ads requires use_discriminator".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub data_root: String,
    /// Images, masks and scribbles are center-cropped or padded to this size; 0 keeps them as stored.
    pub image_size: usize,
    pub normalization: Normalization,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub num_classes: usize,
    pub input_channels: usize,
    pub depths: usize,
    pub encoder_filters: Vec<usize>,
    pub disc_filters: Vec<usize>,
    pub disc_compress_channels: usize,
    pub spectral_norm: bool,
    pub label_flip_prob: f64,
    pub instance_noise_sigma: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub epsilon: f64,
    pub supervised_loss: SupervisedKind,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lr_period: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub flags: AblationFlags,
    pub annotation_fraction: f64,
    pub annotators: usize,
    pub mixed_mask_fraction: f64,
    pub augment: bool,
    pub rotation_deg: f64,
    pub translation_frac: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub noise_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            data_root: String::new(),
            image_size: 224,
            normalization: Normalization::MedianIqr,
            split_seed: 0,
            train_fraction: 0.70,
            validation_fraction: 0.15,
            test_fraction: 0.15,
            num_classes: 4,
            input_channels: 1,
            depths: 4,
            encoder_filters: vec![32, 64, 128, 256, 512],
            disc_filters: vec![32, 64, 128, 256, 512],
            disc_compress_channels: 12,
            spectral_norm: true,
            label_flip_prob: 0.10,
            instance_noise_sigma: 0.2,
            a1: 0.1,
            a2: 0.2,
            a3: 0.2,
            epsilon: LOG_EPS,
            supervised_loss: SupervisedKind::Wpce,
            lr_min: 1e-5,
            lr_max: 1e-4,
            lr_period: 20.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.9,
            batch_size: 12,
            max_epochs: 1000,
            patience: 50,
            flags: AblationFlags::FULL,
            annotation_fraction: 1.0,
            annotators: 1,
            mixed_mask_fraction: 0.0,
            augment: true,
            rotation_deg: 15.0,
            translation_frac: 0.10,
            init_seed: 0,
            data_seed: 0,
            noise_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run_name" => self.run_name = v.to_string(),
            "data_root" => self.data_root = v.to_string(),
            "image_size" => self.image_size = parse(key, v)?,
            "normalization" => self.normalization = v.parse()?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "validation_fraction" => self.validation_fraction = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "input_channels" => self.input_channels = parse(key, v)?,
            "depths" => self.depths = parse(key, v)?,
            "encoder_filters" => self.encoder_filters = parse_list(key, v)?,
            "disc_filters" => self.disc_filters = parse_list(key, v)?,
            "disc_compress_channels" => self.disc_compress_channels = parse(key, v)?,
            "spectral_norm" => self.spectral_norm = parse_bool(key, v)?,
            "label_flip_prob" => self.label_flip_prob = parse(key, v)?,
            "instance_noise_sigma" => self.instance_noise_sigma = parse(key, v)?,
            "a1" => self.a1 = parse(key, v)?,
            "a2" => self.a2 = parse(key, v)?,
            "a3" => self.a3 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "supervised_loss" => self.supervised_loss = v.parse()?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "lr_period" => self.lr_period = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "use_gating" => self.flags.use_gating = parse_bool(key, v)?,
            "use_ads" => self.flags.use_ads = parse_bool(key, v)?,
            "use_discriminator" => self.flags.use_discriminator = parse_bool(key, v)?,
            "annotation_fraction" => self.annotation_fraction = parse(key, v)?,
            "annotators" => self.annotators = parse(key, v)?,
            "mixed_mask_fraction" => self.mixed_mask_fraction = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "rotation_deg" => self.rotation_deg = parse(key, v)?,
            "translation_frac" => self.translation_frac = parse(key, v)?,
            "init_seed" => self.init_seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "noise_seed" => self.noise_seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("run_name", self.run_name.clone());
        put("data_root", self.data_root.clone());
        put("image_size", self.image_size.to_string());
        put("normalization", self.normalization.to_string());
        put("split_seed", self.split_seed.to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("validation_fraction", self.validation_fraction.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("num_classes", self.num_classes.to_string());
        put("input_channels", self.input_channels.to_string());
        put("depths", self.depths.to_string());
        put("encoder_filters", join(&self.encoder_filters));
        put("disc_filters", join(&self.disc_filters));
        put("disc_compress_channels", self.disc_compress_channels.to_string());
        put("spectral_norm", self.spectral_norm.to_string());
        put("label_flip_prob", self.label_flip_prob.to_string());
        put("instance_noise_sigma", self.instance_noise_sigma.to_string());
        put("a1", self.a1.to_string());
        put("a2", self.a2.to_string());
        put("a3", self.a3.to_string());
        put("epsilon", self.epsilon.to_string());
        put("supervised_loss", self.supervised_loss.to_string());
        put("lr_min", self.lr_min.to_string());
        put("lr_max", self.lr_max.to_string());
        put("lr_period", self.lr_period.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("bn_momentum", self.bn_momentum.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("use_gating", self.flags.use_gating.to_string());
        put("use_ads", self.flags.use_ads.to_string());
        put("use_discriminator", self.flags.use_discriminator.to_string());
        put("annotation_fraction", self.annotation_fraction.to_string());
        put("annotators", self.annotators.to_string());
        put("mixed_mask_fraction", self.mixed_mask_fraction.to_string());
        put("augment", self.augment.to_string());
        put("rotation_deg", self.rotation_deg.to_string());
        put("translation_frac", self.translation_frac.to_string());
        put("init_seed", self.init_seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("noise_seed", self.noise_seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.segmentor_config().validate()?;
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !(self.annotation_fraction > 0.0 && self.annotation_fraction <= 1.0) {
            return Err(Error::Config("annotation_fraction must lie in (0, 1]".into()));
        }
        if !frac_ok(self.mixed_mask_fraction) || !frac_ok(self.label_flip_prob) {
            return Err(Error::Config("fractions and probabilities must lie in [0, 1]".into()));
        }
        let split = self.train_fraction + self.validation_fraction + self.test_fraction;
        if (split - 1.0).abs() > 1e-9 || [self.train_fraction, self.validation_fraction, self.test_fraction].iter().any(|f| !frac_ok(*f)) {
            return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
        }
        if self.batch_size == 0 || self.annotators == 0 {
            return Err(Error::Config("batch_size and annotators must be positive".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.lr_period > 0.0) {
            return Err(Error::Config("learning-rate schedule needs 0 <= lr_min <= lr_max and lr_period > 0".into()));
        }
        if self.flags.use_discriminator && self.disc_filters.len() != self.depths + 1 {
            return Err(Error::Config(format!("disc_filters needs depths + 1 = {} entries", self.depths + 1)));
        }
        if self.image_size % (1 << self.depths) != 0 {
            return Err(Error::IndivisibleShape { height: self.image_size, width: self.image_size, divisor: 1 << self.depths });
        }
        Ok(())
    }

    pub fn segmentor_config(&self) -> SegmentorConfig {
        SegmentorConfig {
            depths: self.depths,
            encoder_filters: self.encoder_filters.clone(),
            num_classes: self.num_classes,
            input_channels: self.input_channels,
            use_gating: self.flags.use_gating,
            use_ads: self.flags.use_ads,
            bn_momentum: self.bn_momentum as f32,
        }
    }

    pub fn discriminator_config(&self, input_size: (usize, usize)) -> DiscriminatorConfig {
        DiscriminatorConfig {
            depths: self.depths,
            filters: self.disc_filters.clone(),
            compress_channels: self.disc_compress_channels,
            num_classes: self.num_classes,
            input_size,
            use_ads: self.flags.use_ads,
            spectral_norm: self.spectral_norm,
            label_flip_prob: self.label_flip_prob,
            instance_noise_sigma: self.instance_noise_sigma,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { a0: 1.0, a1: self.a1, a2: self.a2, a3: self.a3 }
    }
}
