//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::densecrf::{CrfParams, DEFAULT_CONFIDENCE};
use crate::error::{invalid, Error, Result};
use crate::fusion::{default_radii, DEFAULT_RADIUS, DEFAULT_THRESHOLD};
use crate::netbuilder::{Architecture, BlockVariant};
use crate::patchseg::{DEFAULT_CRITERION, DEFAULT_PATCH_SIZE, PATCH_EPOCHS};
use crate::tensor::AdamConfig;

/// Environment variable consulted when neither a flag nor the config file
/// sets the seed.
pub const SEED_ENV: &str = "MSCC_SEED";

/// Channel schedule for the pixel network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Widths {
    /// The architecture's reference schedule.
    Full,
    /// Every reference width halved.
    Half,
    Explicit(Vec<usize>),
}

impl Widths {
    pub fn resolve(&self, arch: Architecture) -> Vec<usize> {
        let full = arch.default_widths();
        match self {
            Widths::Full => full.to_vec(),
            Widths::Half => full.iter().map(|w| (w / 2).max(1)).collect(),
            Widths::Explicit(v) => v.clone(),
        }
    }
}

impl FromStr for Widths {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Widths::Full),
            "half" => Ok(Widths::Half),
            list => list
                .split(',')
                .map(|w| parse_num::<usize>("widths", w))
                .collect::<Result<Vec<_>>>()
                .map(Widths::Explicit),
        }
    }
}

impl std::fmt::Display for Widths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Widths::Full => f.write_str("full"),
            Widths::Half => f.write_str("half"),
            Widths::Explicit(v) => f.write_str(&join(v)),
        }
    }
}

/// What the CRF receives from the pixel network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfInput {
    /// The thresholded mask with [`Config::confidence`].
    Binary,
    /// The raw probability map.
    Soft,
}

impl FromStr for CrfInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(CrfInput::Binary),
            "soft" => Ok(CrfInput::Soft),
            other => Err(invalid(format!("crf_input must be `binary` or `soft`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for CrfInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrfInput::Binary => "binary",
            CrfInput::Soft => "soft",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub image_size: usize,
    pub patch_size: usize,
    pub arch: Architecture,
    pub widths: Widths,
    pub pixel_lr: f64,
    pub pixel_epochs: usize,
    pub pixel_batch: usize,
    pub patch_lr: f64,
    pub patch_epochs: usize,
    pub patch_batch: usize,
    pub criterion: f64,
    /// Eight-fold dihedral augmentation of the pixel training pairs.
    pub augment: bool,
    pub crf: CrfParams,
    pub crf_input: CrfInput,
    pub confidence: f64,
    pub threshold: f64,
    pub radius: usize,
    pub radii: Vec<usize>,
    /// `None` defers to [`SEED_ENV`], then 0.
    pub seed: Option<u64>,
}

impl Default for Config {
    /// Desk scale: 64x64 images and a half-width mU-Net-B3.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: DEFAULT_PATCH_SIZE,
            arch: Architecture::MuNet(BlockVariant::BlockIII),
            widths: Widths::Half,
            pixel_lr: AdamConfig::PIXEL_LR,
            pixel_epochs: 50,
            pixel_batch: 4,
            patch_lr: AdamConfig::PATCH_LR,
            patch_epochs: PATCH_EPOCHS,
            patch_batch: 32,
            criterion: DEFAULT_CRITERION,
            augment: true,
            crf: CrfParams::default(),
            crf_input: CrfInput::Binary,
            confidence: DEFAULT_CONFIDENCE,
            threshold: DEFAULT_THRESHOLD,
            radius: DEFAULT_RADIUS,
            radii: default_radii(),
            seed: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| invalid(format!("`{key}`: cannot parse `{}`", v.trim())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(invalid(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Full scale: 256x256 images with full-width networks.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            widths: Widths::Full,
            ..Self::default()
        }
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "arch" => self.arch = v.parse()?,
            "widths" => self.widths = v.parse()?,
            "pixel_lr" => self.pixel_lr = parse_num(key, v)?,
            "pixel_epochs" => self.pixel_epochs = parse_num(key, v)?,
            "pixel_batch" => self.pixel_batch = parse_num(key, v)?,
            "patch_lr" => self.patch_lr = parse_num(key, v)?,
            "patch_epochs" => self.patch_epochs = parse_num(key, v)?,
            "patch_batch" => self.patch_batch = parse_num(key, v)?,
            "criterion" => self.criterion = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "crf_w1" => self.crf.w1 = parse_num(key, v)?,
            "crf_w2" => self.crf.w2 = parse_num(key, v)?,
            "crf_sigma_alpha" => self.crf.sigma_alpha = parse_num(key, v)?,
            "crf_sigma_beta" => self.crf.sigma_beta = parse_num(key, v)?,
            "crf_sigma_gamma" => self.crf.sigma_gamma = parse_num(key, v)?,
            "crf_iterations" => self.crf.num_iterations = parse_num(key, v)?,
            "crf_truncate" => self.crf.truncate = parse_bool(key, v)?,
            "crf_input" => self.crf_input = v.parse()?,
            "confidence" => self.confidence = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "radius" => self.radius = parse_num(key, v)?,
            "radii" => {
                self.radii = v
                    .split(',')
                    .map(|r| parse_num(key, r))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = Some(parse_num(key, v)?),
            other => return Err(invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(invalid("image_size and patch_size must be positive"));
        }
        if !self.image_size.is_multiple_of(16) || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid(format!(
                "image_size {} must be divisible by 16 and by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.widths.resolve(self.arch).len() != 5 || self.widths.resolve(self.arch).contains(&0) {
            return Err(invalid("widths need five positive entries"));
        }
        if self.pixel_batch == 0 || self.patch_batch == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        if !(self.pixel_lr > 0.0 && self.patch_lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.criterion >= 0.0 && self.criterion < 1.0) {
            return Err(invalid("criterion must lie in [0, 1)"));
        }
        if !(self.confidence > 0.5 && self.confidence < 1.0) {
            return Err(invalid("confidence must lie in (0.5, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid("threshold must lie in (0, 1)"));
        }
        if self.radii.is_empty() {
            return Err(invalid("radii must not be empty"));
        }
        self.crf.validate()
    }

    /// Flag, then config file, then [`SEED_ENV`], then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => parse_num(SEED_ENV, &v),
            Err(_) => Ok(0),
        }
    }

    /// Every key with its current value, in a form [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", self.image_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("arch", self.arch.to_string());
        kv("widths", self.widths.to_string());
        kv("pixel_lr", self.pixel_lr.to_string());
        kv("pixel_epochs", self.pixel_epochs.to_string());
        kv("pixel_batch", self.pixel_batch.to_string());
        kv("patch_lr", self.patch_lr.to_string());
        kv("patch_epochs", self.patch_epochs.to_string());
        kv("patch_batch", self.patch_batch.to_string());
        kv("criterion", self.criterion.to_string());
        kv("augment", self.augment.to_string());
        kv("crf_w1", self.crf.w1.to_string());
        kv("crf_w2", self.crf.w2.to_string());
        kv("crf_sigma_alpha", self.crf.sigma_alpha.to_string());
        kv("crf_sigma_beta", self.crf.sigma_beta.to_string());
        kv("crf_sigma_gamma", self.crf.sigma_gamma.to_string());
        kv("crf_iterations", self.crf.num_iterations.to_string());
        kv("crf_truncate", self.crf.truncate.to_string());
        kv("crf_input", self.crf_input.to_string());
        kv("confidence", self.confidence.to_string());
        kv("threshold", self.threshold.to_string());
        kv("radius", self.radius.to_string());
        kv("radii", join(&self.radii));
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = Config::default();
        assert_eq!(c.image_size, 64);
        assert_eq!(c.widths.resolve(c.arch), vec![8, 16, 32, 64, 128]);
        assert_eq!((c.pixel_lr, c.pixel_epochs), (1.5e-4, 50));
        assert_eq!((c.patch_lr, c.patch_epochs), (1e-4, 15));
        assert_eq!(c.radius, 26);
        assert_eq!(Config::full_scale().widths.resolve(Architecture::UNet), vec![64, 128, 256, 512, 1024]);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_round_trip() {
        let c = Config::parse("# desk run\nimage_size = 32\narch = b1 # trailing\nwidths = 4,8,16,32,64\nseed = 7\nradii = 0,2,4\n").unwrap();
        assert_eq!(c.image_size, 32);
        assert_eq!(c.arch, Architecture::MuNet(BlockVariant::BlockI));
        assert_eq!(c.widths, Widths::Explicit(vec![4, 8, 16, 32, 64]));
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.radii, vec![0, 2, 4]);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("colour = red").is_err());
        assert!(Config::parse("image_size").is_err());
        assert!(Config::parse("image_size = 40").is_err());
        assert!(Config::parse("image_size = 48\npatch_size = 32").is_err());
        assert!(Config::parse("augment = maybe").is_err());
        assert!(Config::parse("confidence = 0.5").is_err());
        assert!(Config::parse("widths = 1,2,3").is_err());
    }

    #[test]
    fn seed_precedence() {
        let c = Config {
            seed: Some(5),
            ..Config::default()
        };
        assert_eq!(c.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(c.resolve_seed(None).unwrap(), 5);
    }
}
