use super::encoder::{transformer_forward, KvPrefixes, PrefixVariant, LAYER_NORM_EPS};
use super::params::TextVars;
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Class-name token sequences, one per class.
pub type Labels = [Vec<usize>];

/// One row per class: mean over its tokens of (token embedding + position).
fn label_rows(
    tape: &mut Tape<'_>,
    cfg: &BackboneConfig,
    tv: &TextVars,
    labels: &Labels,
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for (j, seq) in labels.iter().enumerate() {
        if seq.is_empty() || seq.len() > cfg.label_tokens {
            return Err(Error::Data(format!(
                "class {j} has {} tokens, expected 1..={}",
                seq.len(),
                cfg.label_tokens
            )));
        }
        for (p, &tok) in seq.iter().enumerate() {
            if tok >= cfg.vocab {
                return Err(Error::Data(format!(
                    "token id {tok} of class {j} is outside the vocabulary of {}",
                    cfg.vocab
                )));
            }
            ids.push(tok);
            positions.push(p);
        }
    }
    let tok = tape.gather_rows(tv.stem.vocab_embedding, &ids)?;
    let pos = tape.gather_rows(tv.stem.positional_embedding, &positions)?;
    let tok = tape.add(tok, pos)?;
    let u = labels.len();
    let mut pool = vec![0.0; u * ids.len()];
    let mut col = 0;
    for (j, seq) in labels.iter().enumerate() {
        for _ in seq {
            pool[j * ids.len() + col] = 1.0 / seq.len() as f64;
            col += 1;
        }
    }
    let pool = tape.constant(u, ids.len(), pool)?;
    tape.matmul(pool, tok)
}

/// Encodes all classes jointly as `[CLS; prompt; labels]` and reads each
/// class's own position out of the final layer. Rows are unit length.
pub fn encode_text(
    tape: &mut Tape<'_>,
    cfg: &BackboneConfig,
    tv: &TextVars,
    labels: &Labels,
    prompt: Option<Var>,
) -> Result<Var> {
    let u = labels.len();
    if u < 2 {
        return Err(Error::Usage(format!("need at least two classes, got {u}")));
    }
    let y = label_rows(tape, cfg, tv, labels)?;
    let mut parts = vec![tv.stem.cls_token];
    let mut prompt_rows = 0;
    if let Some(p) = prompt {
        prompt_rows = tape.dims(p).0;
        parts.push(p);
    }
    parts.push(y);
    let e = tape.concat_rows(&parts)?;
    let e = tape.matmul(e, tv.stem.input_projection)?;
    let e = tape.add_row(e, tv.stem.input_bias)?;
    let h = transformer_forward(
        tape,
        e,
        &tv.layers,
        cfg.heads,
        &KvPrefixes::new(),
        PrefixVariant::PrefixOne,
        None,
    )?;
    let h = tape.layer_norm(
        h,
        tv.stem.ln_final_gain,
        tv.stem.ln_final_bias,
        LAYER_NORM_EPS,
    )?;
    let classes = tape.slice_rows(h, 1 + prompt_rows, u)?;
    tape.l2_normalize_rows(classes)
}
