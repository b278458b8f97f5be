use super::encoder::{
    transformer_forward, AttentionTrace, KvPrefixes, PrefixVariant, LAYER_NORM_EPS,
};
use super::params::VisionVars;
use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Cuts an `h×w×c` row-major image into non-overlapping `patch×patch` tiles,
/// one flattened tile per row, tiles in raster order.
pub fn patchify(image: &[f32], h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    if image.len() != h * w * c {
        return Err(Error::dim("patchify", &[h, w, c], &[image.len()]));
    }
    let (ph, pw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut data = Vec::with_capacity(ph * pw * width);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (py * patch + dy, px * patch + dx);
                    for ch in 0..c {
                        data.push(f64::from(image[(y * w + x) * c + ch]));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, width], data)
}

/// Linear patch embedding plus positional rows `1..=E_I`.
pub fn embed_patches(
    tape: &mut Tape<'_>,
    cfg: &BackboneConfig,
    vv: &VisionVars,
    image: &[f32],
) -> Result<Var> {
    let patches = patchify(
        image,
        cfg.image_size,
        cfg.image_size,
        cfg.channels,
        cfg.patch,
    )?;
    let (n, width) = (patches.rows(), patches.cols());
    let p = tape.constant(n, width, patches.into_data())?;
    let x = tape.matmul(p, vv.stem.patch_projection)?;
    let x = tape.add_row(x, vv.stem.patch_bias)?;
    let pos = tape.slice_rows(vv.stem.positional_embedding, 1, n)?;
    tape.add(x, pos)
}

/// Class token with its positional row.
pub fn image_cls(tape: &mut Tape<'_>, vv: &VisionVars) -> Result<Var> {
    let pos = tape.slice_rows(vv.stem.positional_embedding, 0, 1)?;
    tape.add(vv.stem.cls_token, pos)
}

/// Final norm, class-token row, unit length.
pub fn read_out_cls(tape: &mut Tape<'_>, vv: &VisionVars, h: Var) -> Result<Var> {
    let h = tape.layer_norm(
        h,
        vv.stem.ln_post_gain,
        vv.stem.ln_post_bias,
        LAYER_NORM_EPS,
    )?;
    let cls = tape.slice_rows(h, 0, 1)?;
    tape.l2_normalize_rows(cls)
}

/// Prompt-free image embedding (1×D, unit norm).
pub fn encode_image(
    tape: &mut Tape<'_>,
    cfg: &BackboneConfig,
    vv: &VisionVars,
    image: &[f32],
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let emb = embed_patches(tape, cfg, vv, image)?;
    let cls = image_cls(tape, vv)?;
    let x = tape.concat_rows(&[cls, emb])?;
    let h = transformer_forward(
        tape,
        x,
        &vv.layers,
        cfg.heads,
        &KvPrefixes::new(),
        PrefixVariant::PrefixOne,
        trace,
    )?;
    read_out_cls(tape, vv, h)
}
