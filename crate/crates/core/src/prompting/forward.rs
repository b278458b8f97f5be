use super::{DomainPromptSet, LossMode, PromptVars};
use crate::backbone::{
    attention, embed_patches, encode_text, image_cls, read_out_cls, transformer_forward,
    zero_shot_image, AttentionTrace, Backbone, KvExtension, Labels, LayerVars, PrefixVariant,
    TextVars, VisionVars,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `[CLS; x_emb; P_C]`, or `[CLS; x_emb]` without a common prompt.
pub fn compose_image_input(
    tape: &mut Tape<'_>,
    x_emb: Var,
    cls: Var,
    common: Option<Var>,
) -> Result<Var> {
    match common {
        Some(p) => tape.concat_rows(&[cls, x_emb, p]),
        None => tape.concat_rows(&[cls, x_emb]),
    }
}

/// Attention whose keys and values both see `[h; prefix]`.
pub fn prefix_one_attention(
    tape: &mut Tape<'_>,
    h: Var,
    prefix: Option<Var>,
    layer: &LayerVars,
    heads: usize,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let ext = match prefix {
        Some(p) if tape.dims(p).0 > 0 => KvExtension::Shared(p),
        _ => KvExtension::None,
    };
    attention(tape, h, layer, heads, ext, trace)
}

/// Attention where the first half of `prefix` extends the keys and the second
/// half the values.
pub fn split_prefix_attention(
    tape: &mut Tape<'_>,
    h: Var,
    prefix: Option<Var>,
    layer: &LayerVars,
    heads: usize,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let ext = match prefix {
        Some(p) if tape.dims(p).0 > 0 => {
            let rows = tape.dims(p).0;
            if !rows.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "split prefix needs an even number of rows, got {rows}"
                )));
            }
            KvExtension::Split {
                key: tape.slice_rows(p, 0, rows / 2)?,
                value: tape.slice_rows(p, rows / 2, rows / 2)?,
            }
        }
        _ => KvExtension::None,
    };
    attention(tape, h, layer, heads, ext, trace)
}

/// Prompted image embedding: the class-token row after the last layer, 1×D,
/// unit length.
pub fn image_forward(
    tape: &mut Tape<'_>,
    bb: &Backbone,
    vv: &VisionVars,
    image: &[f32],
    prompts: &PromptVars,
    variant: PrefixVariant,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let emb = embed_patches(tape, &bb.config, vv, image)?;
    let cls = image_cls(tape, vv)?;
    let x = compose_image_input(tape, emb, cls, prompts.common)?;
    let h = transformer_forward(
        tape,
        x,
        &vv.layers,
        bb.config.heads,
        &prompts.image,
        variant,
        trace,
    )?;
    read_out_cls(tape, vv, h)
}

/// Class embeddings with the text prompt inserted, U×D.
pub fn text_forward(
    tape: &mut Tape<'_>,
    bb: &Backbone,
    tv: &TextVars,
    labels: &Labels,
    prompts: &PromptVars,
) -> Result<Var> {
    encode_text(tape, &bb.config, tv, labels, prompts.text)
}

/// `scale · F · Tᵀ` for image rows `F` (B×D) and class rows `T` (U×D).
pub fn logits(tape: &mut Tape<'_>, img: Var, text: Var, scale: f64) -> Result<Var> {
    let z = tape.matmul_nt(img, text)?;
    tape.scale(z, scale)
}

/// Row-major one-hot targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        y[r * classes + l] = 1.0;
    }
    y
}

/// Batch loss on logits `z` (n×U) against one-hot `y`.
pub fn loss(tape: &mut Tape<'_>, z: Var, y: &[f64], mode: LossMode) -> Result<Var> {
    let (n, u) = tape.dims(z);
    if y.len() != n * u {
        return Err(Error::dim("loss", &[n, u], &[y.len()]));
    }
    for (r, row) in y.chunks(u.max(1)).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("target row {r} is not one-hot")));
        }
    }
    match mode {
        LossMode::SoftmaxCe => tape.softmax_cross_entropy(z, y),
        LossMode::PerClassBce => {
            let s = tape.bce_with_logits(z, y)?;
            tape.scale(s, 1.0 / (2.0 * n as f64))
        }
    }
}

/// Class embeddings for a frozen prompt set.
pub fn text_features(bb: &Backbone, set: &DomainPromptSet, labels: &Labels) -> Result<Tensor> {
    let mut tape = Tape::new();
    let tv = bb.text.register(&mut tape)?;
    let pv = set.register(&mut tape)?;
    let t = text_forward(&mut tape, bb, &tv, labels, &pv)?;
    Ok(tape.to_tensor(t))
}

/// Prompted image embedding for a frozen prompt set, length D.
pub fn image_features(
    bb: &Backbone,
    set: &DomainPromptSet,
    image: &[f32],
    variant: PrefixVariant,
    trace: Option<&mut AttentionTrace>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vv = bb.vision.register(&mut tape)?;
    let pv = set.register(&mut tape)?;
    let f = image_forward(&mut tape, bb, &vv, image, &pv, variant, trace)?;
    Ok(tape.value(f).to_vec())
}

/// Class-token attention of every vision layer: one `heads × keys` matrix per
/// layer, where keys are the token sequence followed by any prefix rows.
pub fn cls_attention(
    bb: &Backbone,
    set: &DomainPromptSet,
    image: &[f32],
    variant: PrefixVariant,
) -> Result<Vec<Tensor>> {
    let mut trace = AttentionTrace::default();
    image_features(bb, set, image, variant, Some(&mut trace))?;
    trace
        .layers
        .iter()
        .map(|heads| {
            let cols = heads[0].cols();
            let data = heads.iter().flat_map(|p| p.row(0).to_vec()).collect();
            Tensor::new(vec![heads.len(), cols], data)
        })
        .collect()
}

/// `scale · T · f` without a tape.
pub fn plain_logits(text: &Tensor, feat: &[f64], scale: f64) -> Vec<f64> {
    (0..text.rows())
        .map(|j| {
            scale
                * text
                    .row(j)
                    .iter()
                    .zip(feat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

/// Logits of the prompt-free pipeline.
pub fn zero_shot_logits(bb: &Backbone, text: &Tensor, image: &[f32]) -> Result<Vec<f64>> {
    Ok(plain_logits(
        text,
        &zero_shot_image(bb, image)?,
        bb.logit_scale(),
    ))
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(z: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = j;
        }
    }
    best
}
