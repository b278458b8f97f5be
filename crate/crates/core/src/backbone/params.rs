use rand::Rng;

use super::BackboneConfig;
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Declares a parameter struct, its tape-handle twin, and name/registration
/// helpers that all walk the fields in declaration order.
macro_rules! param_group {
    ($(#[$m:meta])* $name:ident, $vars:ident { $($field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: Tensor,)*
        }

        #[derive(Debug, Clone)]
        pub struct $vars {
            $(pub $field: Var,)*
        }

        impl $name {
            pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
                vec![$((format!("{prefix}{}", stringify!($field)), &self.$field),)*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field,)*]
            }

            pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Result<$vars> {
                Ok($vars { $($field: tape.leaf(&self.$field)?,)* })
            }
        }

        impl $vars {
            pub fn flat(&self) -> Vec<Var> {
                vec![$(self.$field,)*]
            }
        }
    };
}

param_group!(
    /// One pre-norm transformer block: attention projections, MLP and the two
    /// layer norms.
    LayerParams,
    LayerVars {
        ln1_gain,
        ln1_bias,
        w_q,
        b_q,
        w_k,
        b_k,
        w_v,
        b_v,
        w_o,
        b_o,
        ln2_gain,
        ln2_bias,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    }
);

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = dim * mlp_ratio;
        let w = |r: usize, c: usize, rng: &mut R| Tensor::randn(vec![r, c], INIT_STD, rng);
        Self {
            ln1_gain: Tensor::full(vec![1, dim], 1.0),
            ln1_bias: Tensor::zeros(vec![1, dim]),
            w_q: w(dim, dim, rng),
            b_q: Tensor::zeros(vec![1, dim]),
            w_k: w(dim, dim, rng),
            b_k: Tensor::zeros(vec![1, dim]),
            w_v: w(dim, dim, rng),
            b_v: Tensor::zeros(vec![1, dim]),
            w_o: w(dim, dim, rng),
            b_o: Tensor::zeros(vec![1, dim]),
            ln2_gain: Tensor::full(vec![1, dim], 1.0),
            ln2_bias: Tensor::zeros(vec![1, dim]),
            mlp_w1: w(dim, hidden, rng),
            mlp_b1: Tensor::zeros(vec![1, hidden]),
            mlp_w2: w(hidden, dim, rng),
            mlp_b2: Tensor::zeros(vec![1, dim]),
        }
    }
}

param_group!(
    /// Patch embedding, class token, positional table and final norm of the
    /// image tower. Transformer blocks live alongside in [`VisionEncoderParams`].
    VisionStem,
    VisionStemVars {
        patch_projection,
        patch_bias,
        positional_embedding,
        cls_token,
        ln_post_gain,
        ln_post_bias,
    }
);

param_group!(
    /// Token table, label-position table, class token, input projection and
    /// final norm of the text tower.
    TextStem,
    TextStemVars {
        vocab_embedding,
        positional_embedding,
        cls_token,
        input_projection,
        input_bias,
        ln_final_gain,
        ln_final_bias,
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderParams {
    pub stem: VisionStem,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct VisionVars {
    pub stem: VisionStemVars,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub stem: TextStem,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct TextVars {
    pub stem: TextStemVars,
    pub layers: Vec<LayerVars>,
}

impl VisionEncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let stem = VisionStem {
            patch_projection: Tensor::randn(vec![cfg.patch_width(), d], INIT_STD, rng),
            patch_bias: Tensor::zeros(vec![1, d]),
            positional_embedding: Tensor::randn(vec![cfg.num_patches() + 1, d], INIT_STD, rng),
            cls_token: Tensor::randn(vec![1, d], INIT_STD, rng),
            ln_post_gain: Tensor::full(vec![1, d], 1.0),
            ln_post_bias: Tensor::zeros(vec![1, d]),
        };
        let layers = (0..cfg.vision_layers)
            .map(|_| LayerParams::init(d, cfg.mlp_ratio, rng))
            .collect();
        Self { stem, layers }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.stem.named("vision/");
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("vision/layer{l}/")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.stem.tensors_mut();
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Result<VisionVars> {
        Ok(VisionVars {
            stem: self.stem.register(tape)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.register(tape))
                .collect::<Result<_>>()?,
        })
    }
}

impl VisionVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.stem.flat();
        for l in &self.layers {
            out.extend(l.flat());
        }
        out
    }
}

impl TextEncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let mut input_projection = Tensor::randn(vec![d, d], INIT_STD, rng);
        // Start near the identity so token identity survives the projection.
        for i in 0..d {
            input_projection.data_mut()[i * d + i] += 1.0;
        }
        let stem = TextStem {
            vocab_embedding: Tensor::randn(vec![cfg.vocab, d], 1.0, rng),
            positional_embedding: Tensor::randn(vec![cfg.label_tokens, d], INIT_STD, rng),
            cls_token: Tensor::randn(vec![1, d], INIT_STD, rng),
            input_projection,
            input_bias: Tensor::zeros(vec![1, d]),
            ln_final_gain: Tensor::full(vec![1, d], 1.0),
            ln_final_bias: Tensor::zeros(vec![1, d]),
        };
        let layers = (0..cfg.text_layers)
            .map(|_| LayerParams::init(d, cfg.mlp_ratio, rng))
            .collect();
        Self { stem, layers }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.stem.named("text/");
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("text/layer{l}/")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.stem.tensors_mut();
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Result<TextVars> {
        Ok(TextVars {
            stem: self.stem.register(tape)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.register(tape))
                .collect::<Result<_>>()?,
        })
    }
}

impl TextVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.stem.flat();
        for l in &self.layers {
            out.extend(l.flat());
        }
        out
    }
}

/// Contrastive temperature, stored as a log-scale so it stays positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub log_scale: Tensor,
}

impl Temperature {
    pub const MAX_SCALE: f64 = 100.0;

    pub fn new(scale: f64) -> Self {
        Self {
            log_scale: Tensor::full(vec![1, 1], scale.ln()),
        }
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_scale.data()[0].exp()
    }
}
