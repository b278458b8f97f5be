//! Desk-scale dual encoder: a patch transformer for images and a small
//! transformer over class-name tokens, aligned contrastively and then frozen.

mod encoder;
mod params;
mod pretrain;
mod text;
mod vision;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use encoder::{
    attention, transformer_forward, AttentionTrace, KvExtension, KvPrefixes, PrefixVariant,
    LAYER_NORM_EPS,
};
pub use params::{
    LayerParams, LayerVars, Temperature, TextEncoderParams, TextVars, VisionEncoderParams,
    VisionVars,
};
pub use pretrain::{
    contrastive_pretrain, zero_shot_accuracy, zero_shot_image, zero_shot_text, PretrainConfig,
    PretrainReport,
};
pub use text::{encode_text, Labels};
pub use vision::{embed_patches, encode_image, image_cls, patchify, read_out_cls};

use crate::error::{Error, Result};
use crate::io::{self, NamedTensors};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Model width D.
    pub dim: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    /// Square image side, in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub vocab: usize,
    /// Maximum tokens per class name.
    pub label_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            vision_layers: 4,
            text_layers: 2,
            image_size: 16,
            channels: 1,
            patch: 4,
            vocab: 32,
            label_tokens: 2,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.vision_layers == 0 || self.text_layers == 0 {
            return bad("encoders need at least one layer".into());
        }
        if self.channels == 0 || self.vocab == 0 || self.label_tokens == 0 || self.mlp_ratio == 0 {
            return bad("channels, vocab, label_tokens and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// E_I, the number of image tokens.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Both towers plus the contrastive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vision: VisionEncoderParams,
    pub text: TextEncoderParams,
    pub temperature: Temperature,
}

/// Tape handles for a registered backbone.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub vision: VisionVars,
    pub text: TextVars,
    pub log_scale: crate::numerics::Var,
}

impl Backbone {
    /// Random initialization; every tensor starts frozen.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = VisionEncoderParams::init(&config, &mut rng);
        let text = TextEncoderParams::init(&config, &mut rng);
        Ok(Self {
            config,
            vision,
            text,
            temperature: Temperature::new(10.0),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vision.named();
        out.extend(self.text.named());
        out.push(("temperature/log_scale".into(), &self.temperature.log_scale));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.vision.tensors_mut();
        out.extend(self.text.tensors_mut());
        out.push(&mut self.temperature.log_scale);
        out
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.named().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Result<BackboneVars> {
        Ok(BackboneVars {
            vision: self.vision.register(tape)?,
            text: self.text.register(tape)?,
            log_scale: tape.leaf(&self.temperature.log_scale)?,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.temperature.logit_scale()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every tensor name and value, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            h.update(t.value_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.named())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::encode(&self.named())
    }

    /// Loads a parameter file written for `config`; every tensor's shape is
    /// checked against it. The result is frozen.
    pub fn load(path: &Path, config: BackboneConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, config)
    }

    pub fn from_bytes(bytes: &[u8], config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut named = NamedTensors::new(io::decode(bytes)?);
        // Reuse the initializer for the layout, then replace every tensor.
        let mut out = Self::init(config.clone(), 0)?;
        let names: Vec<(String, Vec<usize>)> = out
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.iter().zip(out.tensors_mut()) {
            *slot = named.take(name, shape)?;
        }
        if let Some(extra) = named.names().next() {
            return Err(Error::Data(format!(
                "unexpected tensor `{extra}` in backbone file"
            )));
        }
        out.freeze();
        Ok(out)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
