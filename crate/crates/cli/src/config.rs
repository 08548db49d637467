//! The TOML run configuration. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use attnpost_core::codec::{BuiltinDct, Codec, CodecSpec, ExternalCodec, Lossless};
use attnpost_core::metrics::LossConfig;
use attnpost_core::trainer::TrainConfig;
use attnpost_core::ModelConfig;

/// Target bit rate when none is configured.
pub const DEFAULT_TARGET_BPP: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_target")]
    pub target_bpp: f64,
    #[serde(default)]
    pub ensemble: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub codec: CodecChoice,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_target() -> f64 {
    DEFAULT_TARGET_BPP
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Text file with one image path per line.
    pub manifest: PathBuf,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    /// qp of the degraded training and validation inputs.
    pub qp: i32,
    /// Inclusive qp window searched by `rateplan`; defaults to the codec's
    /// ladder.
    pub qp_window: Option<[i32; 2]>,
}

fn default_ratio() -> f64 {
    0.9
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Start the reconstruction conv at zero so the untrained model is the
    /// identity map.
    pub zero_tail: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CodecChoice {
    Builtin,
    Lossless,
    External(CodecSpec),
}

impl Default for CodecChoice {
    fn default() -> Self {
        CodecChoice::Builtin
    }
}

impl CodecChoice {
    pub fn instantiate(&self, workdir: &Path) -> Result<Box<dyn Codec>> {
        Ok(match self {
            CodecChoice::Builtin => Box::new(BuiltinDct),
            CodecChoice::Lossless => Box::new(Lossless),
            CodecChoice::External(spec) => Box::new(ExternalCodec::new(spec.clone(), workdir)?),
        })
    }
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: AppConfig = toml::from_str(text)?;
        cfg.train.loss = cfg.loss.clone();
        cfg.train.seed = attnpost_core::seed::derive_seed(cfg.seed, "train");
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.manifest = base.join(&cfg.data.manifest);
        if let Some(out) = &cfg.output_dir {
            cfg.output_dir = Some(base.join(out));
        }
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = attnpost_core::seed::derive_seed(seed, "train");
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.target_bpp > 0.0) {
            bail!("target_bpp must be positive, got {}", self.target_bpp);
        }
        if !self.data.manifest.exists() {
            bail!("dataset manifest {} does not exist", self.data.manifest.display());
        }
        if let CodecChoice::External(spec) = &self.codec {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match (flag, &self.output_dir) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(p.clone()),
            (None, None) => bail!("no output directory: pass --out or set output_dir"),
        }
    }
}
