//! Pre-norm transformer stack with optional key/value prefixes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::LayerVars;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How a per-layer prompt is attached to self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixVariant {
    /// One shared block of rows extends both the key and the value inputs.
    #[default]
    PrefixOne,
    /// The first half of the rows extends the keys, the second half the values.
    SplitPrefix,
}

/// Extra rows fed into one attention call.
#[derive(Debug, Clone, Copy)]
pub enum KvExtension {
    None,
    Shared(Var),
    Split { key: Var, value: Var },
}

/// Per-layer prefix rows, keyed by layer index.
#[derive(Debug, Clone, Default)]
pub struct KvPrefixes {
    layers: BTreeMap<usize, Var>,
}

impl KvPrefixes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, prefix: Var) {
        self.layers.insert(layer, prefix);
    }

    pub fn get(&self, layer: usize) -> Option<Var> {
        self.layers.get(&layer).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.layers.keys().next_back().copied()
    }
}

/// Attention probabilities captured during a forward pass: `layers[l][h]` is
/// head `h`'s query×key matrix at layer `l`.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head attention where queries come only from `h` and keys/values may
/// be extended by prompt rows. Output has as many rows as `h`.
pub fn attention(
    tape: &mut Tape<'_>,
    h: Var,
    layer: &LayerVars,
    heads: usize,
    ext: KvExtension,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let (_, dim) = tape.dims(h);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "model width {dim} is not divisible by {heads} heads"
        )));
    }
    let (key_in, value_in) = match ext {
        KvExtension::None => (h, h),
        KvExtension::Shared(p) => {
            let kv = tape.concat_rows(&[h, p])?;
            (kv, kv)
        }
        KvExtension::Split { key, value } => {
            (tape.concat_rows(&[h, key])?, tape.concat_rows(&[h, value])?)
        }
    };
    let q = linear(tape, h, layer.w_q, layer.b_q)?;
    let k = linear(tape, key_in, layer.w_k, layer.b_k)?;
    let v = linear(tape, value_in, layer.w_v, layer.b_v)?;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs_out = Vec::new();
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, hd * dh, dh)?,
                tape.slice_cols(k, hd * dh, dh)?,
                tape.slice_cols(v, hd * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax_rows(scores)?;
        if trace.is_some() {
            probs_out.push(tape.to_tensor(p));
        }
        outs.push(tape.matmul(p, vh)?);
    }
    if let Some(t) = trace {
        *t = probs_out;
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, o, layer.w_o, layer.b_o)
}

/// Runs every block. Layers listed in `prefixes` attach their prompt rows to
/// attention according to `variant`; other layers run plain self-attention.
pub fn transformer_forward(
    tape: &mut Tape<'_>,
    tokens: Var,
    layers: &[LayerVars],
    heads: usize,
    prefixes: &KvPrefixes,
    variant: PrefixVariant,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    if let Some(l) = prefixes.max_layer() {
        if l >= layers.len() {
            return Err(Error::Config(format!(
                "prefix for layer {l} but the encoder has {} layers",
                layers.len()
            )));
        }
    }
    if let Some(t) = trace.as_deref_mut() {
        t.layers.clear();
    }
    let mut x = tokens;
    for (l, lv) in layers.iter().enumerate() {
        let ext = match prefixes.get(l) {
            None => KvExtension::None,
            Some(p) => extension_for(tape, p, variant)?,
        };
        let h = tape.layer_norm(x, lv.ln1_gain, lv.ln1_bias, LAYER_NORM_EPS)?;
        let mut probs = Vec::new();
        let a = attention(
            tape,
            h,
            lv,
            heads,
            ext,
            trace.is_some().then_some(&mut probs),
        )?;
        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(probs);
        }
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, lv.ln2_gain, lv.ln2_bias, LAYER_NORM_EPS)?;
        let h = linear(tape, h, lv.mlp_w1, lv.mlp_b1)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, lv.mlp_w2, lv.mlp_b2)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

fn extension_for(tape: &mut Tape<'_>, prefix: Var, variant: PrefixVariant) -> Result<KvExtension> {
    match variant {
        PrefixVariant::PrefixOne => Ok(KvExtension::Shared(prefix)),
        PrefixVariant::SplitPrefix => {
            let rows = tape.dims(prefix).0;
            if !rows.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "split prefix needs an even number of rows, got {rows}"
                )));
            }
            let key = tape.slice_rows(prefix, 0, rows / 2)?;
            let value = tape.slice_rows(prefix, rows / 2, rows / 2)?;
            Ok(KvExtension::Split { key, value })
        }
    }
}
