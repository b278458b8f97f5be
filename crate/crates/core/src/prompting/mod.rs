//! Common prompts appended to the image tokens, per-layer personalized
//! key/value prefixes, personalized text prompts, logits and loss.

mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use forward::{
    cls_attention, compose_image_input, image_features, image_forward, logits, loss, one_hot,
    plain_logits, predict, prefix_one_attention, split_prefix_attention, text_features,
    text_forward, zero_shot_logits,
};

use crate::backbone::{hex, BackboneConfig, KvPrefixes, PrefixVariant};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    SoftmaxCe,
    /// Independent sigmoid per class, summed and scaled by `1/(2n)`.
    PerClassBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// L_C, rows of the common prompt.
    pub common_len: usize,
    /// L_PI, prefix rows per prompted image layer.
    pub image_len: usize,
    /// L_PT, rows of the text prompt.
    pub text_len: usize,
    pub layer_start: usize,
    pub layer_end: usize,
    pub loss_mode: LossMode,
    pub prefix_variant: PrefixVariant,
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            common_len: 4,
            image_len: 8,
            text_len: 4,
            layer_start: 0,
            layer_end: 3,
            loss_mode: LossMode::SoftmaxCe,
            prefix_variant: PrefixVariant::PrefixOne,
            init_std: PROMPT_INIT_STD,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.layer_start > self.layer_end || self.layer_end >= backbone.vision_layers {
            return Err(Error::Config(format!(
                "insertion range [{}, {}] must satisfy 0 <= start <= end < {}",
                self.layer_start, self.layer_end, backbone.vision_layers
            )));
        }
        if self.prefix_variant == PrefixVariant::SplitPrefix && !self.image_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "split prefix needs an even image prompt length, got {}",
                self.image_len
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn prompted_layers(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_start..=self.layer_end
    }

    /// L_C·D + (end − start + 1)·L_PI·D + L_PT·D.
    pub fn trainable_param_count(&self, dim: usize) -> usize {
        let layers = self.layer_end - self.layer_start + 1;
        (self.common_len + layers * self.image_len + self.text_len) * dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonPrompt {
    pub values: Tensor,
}

impl CommonPrompt {
    pub fn init<R: Rng + ?Sized>(len: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            values: Tensor::randn(vec![len, dim], std, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prefix rows for each prompted image layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PersonalizedImagePrompts {
    pub layers: BTreeMap<usize, Tensor>,
}

impl PersonalizedImagePrompts {
    pub fn init<R: Rng + ?Sized>(cfg: &PromptConfig, dim: usize, rng: &mut R) -> Self {
        Self {
            layers: cfg
                .prompted_layers()
                .map(|l| {
                    (
                        l,
                        Tensor::randn(vec![cfg.image_len, dim], cfg.init_std, rng),
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedTextPrompt {
    pub values: Tensor,
}

/// Everything one domain contributes at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPromptSet {
    pub common: CommonPrompt,
    pub image: PersonalizedImagePrompts,
    pub text: PersonalizedTextPrompt,
}

/// Tape handles of a registered prompt set. Zero-row prompts are omitted.
#[derive(Debug, Clone, Default)]
pub struct PromptVars {
    pub common: Option<Var>,
    pub image: KvPrefixes,
    pub text: Option<Var>,
    /// `(var, slot)` for every registered tensor, in [`DomainPromptSet::tensors_mut`] order.
    slots: Vec<(Var, usize)>,
}

impl PromptVars {
    pub fn slots(&self) -> impl Iterator<Item = (Var, usize)> + '_ {
        self.slots.iter().copied()
    }
}

impl DomainPromptSet {
    /// Fresh personalized prompts around the given common prompt.
    pub fn fresh<R: Rng + ?Sized>(
        cfg: &PromptConfig,
        dim: usize,
        common: CommonPrompt,
        rng: &mut R,
    ) -> Self {
        let image = PersonalizedImagePrompts::init(cfg, dim, rng);
        let text = PersonalizedTextPrompt {
            values: Tensor::randn(vec![cfg.text_len, dim], cfg.init_std, rng),
        };
        Self {
            common,
            image,
            text,
        }
    }

    /// No rows anywhere: composes to the plain zero-shot pipeline.
    pub fn empty(dim: usize) -> Self {
        Self {
            common: CommonPrompt {
                values: Tensor::zeros(vec![0, dim]),
            },
            image: PersonalizedImagePrompts::default(),
            text: PersonalizedTextPrompt {
                values: Tensor::zeros(vec![0, dim]),
            },
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.common.values];
        out.extend(self.image.layers.values());
        out.push(&self.text.values);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.common.values];
        out.extend(self.image.layers.values_mut());
        out.push(&mut self.text.values);
        out
    }

    /// Names under `domain{s}/`.
    pub fn named(&self, domain: usize) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("domain{domain}/common"), &self.common.values)];
        for (l, t) in &self.image.layers {
            out.push((format!("domain{domain}/img/layer{l}"), t));
        }
        out.push((format!("domain{domain}/text"), &self.text.values));
        out
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors().iter().all(|t| !t.requires_grad())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over every value byte, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tensors().into_iter().enumerate() {
            h.update((i as u64).to_le_bytes());
            h.update(t.value_bytes());
        }
        hex(&h.finalize())
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Result<PromptVars> {
        let mut vars = PromptVars::default();
        let mut slot = 0;
        if !self.common.is_empty() {
            let v = tape.leaf(&self.common.values)?;
            vars.common = Some(v);
            vars.slots.push((v, slot));
        }
        slot += 1;
        for (&l, t) in &self.image.layers {
            if t.rows() > 0 {
                let v = tape.leaf(t)?;
                vars.image.insert(l, v);
                vars.slots.push((v, slot));
            }
            slot += 1;
        }
        if self.text.values.rows() > 0 {
            let v = tape.leaf(&self.text.values)?;
            vars.text = Some(v);
            vars.slots.push((v, slot));
        }
        Ok(vars)
    }
}
