//! Experiment configuration as one strict JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{hex, BackboneConfig, PretrainConfig};
use crate::data::{class_tokens, Manifest};
use crate::dil::TrainConfig;
use crate::error::{Error, Result};
use crate::prompting::PromptConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Domain-stream manifest. Relative paths resolve against the directory
    /// of the config file.
    pub manifest: PathBuf,
    /// Output directory, resolved like `manifest`.
    pub out: PathBuf,
}

impl RunConfig {
    /// Parses and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt.validate(&self.backbone)?;
        self.train.validate()?;
        self.pretrain.validate()
    }

    /// Loads the manifest and checks that it fits the backbone.
    pub fn manifest(&self) -> Result<Manifest> {
        let m = Manifest::load(&self.manifest)?;
        if m.image_size != self.backbone.image_size || self.backbone.channels != 1 {
            return Err(Error::Config(format!(
                "manifest renders {0}x{0}x1 images, backbone expects {1}x{1}x{2}",
                m.image_size, self.backbone.image_size, self.backbone.channels
            )));
        }
        Ok(m)
    }

    pub fn labels(&self, classes: usize) -> Vec<Vec<usize>> {
        class_tokens(classes, self.backbone.label_tokens, self.backbone.vocab)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out.join("backbone.cppm")
    }
}

/// One `--sweep` axis: a config key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    CommonLen,
    ImageLen,
    TextLen,
    LayerStart,
    LayerEnd,
    K,
    Epochs,
    Lr,
}

impl SweepKey {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "L_C" | "common_len" => Self::CommonLen,
            "L_PI" | "image_len" => Self::ImageLen,
            "L_PT" | "text_len" => Self::TextLen,
            "layer_start" => Self::LayerStart,
            "layer_end" => Self::LayerEnd,
            "K" | "k" => Self::K,
            "epochs" => Self::Epochs,
            "lr" => Self::Lr,
            other => {
                return Err(Error::Usage(format!(
                    "unknown sweep key `{other}` (L_C, L_PI, L_PT, layer_start, layer_end, K, epochs, lr)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CommonLen => "L_C",
            Self::ImageLen => "L_PI",
            Self::TextLen => "L_PT",
            Self::LayerStart => "layer_start",
            Self::LayerEnd => "layer_end",
            Self::K => "K",
            Self::Epochs => "epochs",
            Self::Lr => "lr",
        }
    }
}

impl Sweep {
    /// Parses `KEY=V1,V2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("sweep `{spec}` is not KEY=V1,V2,...")))?;
        let key = SweepKey::parse(key.trim())?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Usage(format!("sweep value `{v}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Usage("sweep needs at least one value".into()));
        }
        if key != SweepKey::Lr && values.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Usage(format!(
                "{} takes non-negative integers",
                key.as_str()
            )));
        }
        Ok(Self { key, values })
    }

    /// A copy of `cfg` with `key` set to `value`, validated.
    pub fn apply(&self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut out = cfg.clone();
        let n = value as usize;
        match self.key {
            SweepKey::CommonLen => out.prompt.common_len = n,
            SweepKey::ImageLen => out.prompt.image_len = n,
            SweepKey::TextLen => out.prompt.text_len = n,
            SweepKey::LayerStart => out.prompt.layer_start = n,
            SweepKey::LayerEnd => out.prompt.layer_end = n,
            SweepKey::K => out.train.k = n,
            SweepKey::Epochs => out.train.epochs = n,
            SweepKey::Lr => out.train.lr = value,
        }
        out.validate()?;
        Ok(out)
    }

    /// Directory-friendly label for one setting, e.g. `L_PI=8`.
    pub fn label(&self, value: f64) -> String {
        format!("{}={}", self.key.as_str(), value)
    }
}
