use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::text::{encode_text, Labels};
use super::vision::encode_image;
use super::{Backbone, BackboneConfig, BackboneVars, Temperature};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape, Tensor, Var};
use crate::prompting::{plain_logits, predict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Step size for the log temperature, which needs to travel much further
    /// than the weights in a short run.
    #[serde(default = "default_temperature_lr")]
    pub temperature_lr: f64,
    pub batch: usize,
    pub seed: u64,
}

fn default_temperature_lr() -> f64 {
    0.05
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            temperature_lr: default_temperature_lr(),
            batch: 32,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if self.epochs == 0 || self.batch == 0 || !ok(self.lr) || !ok(self.temperature_lr) {
            return Err(Error::Config(
                "pretrain epochs and batch must be positive and learning rates finite and positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub logit_scale: f64,
    pub checksum: String,
}

/// Mean loss of one minibatch: image-to-text cross-entropy plus text-to-image
/// cross-entropy against the batch images of each present class, halved.
fn batch_loss<'a>(
    tape: &mut Tape<'a>,
    bb: &'a Backbone,
    data: &Dataset,
    idx: &[usize],
    labels: &Labels,
) -> Result<(Var, BackboneVars)> {
    let vars = bb.register(tape)?;
    let cfg = &bb.config;
    let u = labels.len();
    let text = encode_text(tape, cfg, &vars.text, labels, None)?;
    let feats = idx
        .iter()
        .map(|&i| encode_image(tape, cfg, &vars.vision, data.image(i), None))
        .collect::<Result<Vec<_>>>()?;
    let feats = tape.concat_rows(&feats)?;
    let scale = tape.exp(vars.log_scale)?;
    let i2t = tape.matmul_nt(feats, text)?;
    let i2t = tape.scale_by(i2t, scale)?;
    let t2i = tape.matmul_nt(text, feats)?;
    let t2i = tape.scale_by(t2i, scale)?;
    let b = idx.len();
    let mut one_hot = vec![0.0; b * u];
    let mut soft = vec![0.0; u * b];
    let mut per_class = vec![0usize; u];
    for (r, &i) in idx.iter().enumerate() {
        one_hot[r * u + data.labels[i]] = 1.0;
        per_class[data.labels[i]] += 1;
    }
    for (r, &i) in idx.iter().enumerate() {
        let c = data.labels[i];
        soft[c * b + r] = 1.0 / per_class[c] as f64;
    }
    let present = per_class.iter().filter(|&&n| n > 0).count() as f64;
    let l1 = tape.softmax_cross_entropy(i2t, &one_hot)?;
    // Rows of absent classes carry no target and contribute nothing; rescale so
    // the mean runs over present classes only.
    let l2 = tape.softmax_cross_entropy(t2i, &soft)?;
    let l2 = tape.scale(l2, u as f64 / present)?;
    let l = tape.add(l1, l2)?;
    Ok((tape.scale(l, 0.5)?, vars))
}

/// Symmetric contrastive training of both towers and the temperature from a
/// fresh initialization. The returned backbone is frozen.
pub fn contrastive_pretrain(
    base: &Dataset,
    config: &BackboneConfig,
    pcfg: &PretrainConfig,
    labels: &Labels,
) -> Result<(Backbone, PretrainReport)> {
    pcfg.validate()?;
    if base.is_empty() {
        return Err(Error::Data("empty pretraining set".into()));
    }
    if base.pixels_per_image() != config.pixels() || base.height != config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
            base.height,
            base.width,
            base.channels,
            config.image_size,
            config.image_size,
            config.channels
        )));
    }
    if labels.len() != base.num_classes || base.class_counts().contains(&0) {
        return Err(Error::Data("pretraining set must cover every class".into()));
    }
    let mut bb = Backbone::init(config.clone(), pcfg.seed)?;
    bb.set_trainable(true);
    let mut opt = Adam::new(pcfg.lr);
    let mut opt_temp = Adam::new(pcfg.temperature_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    let max_log = Temperature::MAX_SCALE.ln();
    for epoch in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(pcfg.batch) {
            let (loss, grads, vars) = {
                let mut tape = Tape::new();
                let (loss, vars) = batch_loss(&mut tape, &bb, base, chunk, labels)?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::Training {
                        detail: format!("non-finite contrastive loss in epoch {epoch}"),
                        seed: pcfg.seed,
                        config: serde_json::to_string(&(config, pcfg)).unwrap_or_default(),
                    });
                }
                (value, tape.backward(loss)?, vars)
            };
            let ids = vars
                .vision
                .flat()
                .into_iter()
                .chain(vars.text.flat())
                .chain([vars.log_scale])
                .collect::<Vec<_>>();
            let mut params = bb.tensors_mut();
            for (v, t) in ids.iter().zip(params.iter_mut()) {
                grads.accumulate_into(*v, t)?;
            }
            let (temp, weights) = params.split_last_mut().expect("temperature is last");
            opt.step(weights)?;
            opt_temp.step(std::slice::from_mut(temp))?;
            let s = &mut bb.temperature.log_scale.data_mut()[0];
            *s = s.min(max_log);
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / base.len() as f64);
    }
    bb.freeze();
    let report = PretrainReport {
        epoch_losses,
        logit_scale: bb.logit_scale(),
        checksum: bb.checksum(),
    };
    Ok((bb, report))
}

/// Class embeddings without prompts, `U×D`.
pub fn zero_shot_text(bb: &Backbone, labels: &Labels) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bb.text.register(&mut tape)?;
    let t = encode_text(&mut tape, &bb.config, &vars, labels, None)?;
    Ok(tape.to_tensor(t))
}

/// Prompt-free image embedding, length D.
pub fn zero_shot_image(bb: &Backbone, image: &[f32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = bb.vision.register(&mut tape)?;
    let f = encode_image(&mut tape, &bb.config, &vars, image, None)?;
    Ok(tape.value(f).to_vec())
}

/// Fraction of `data` classified correctly by the frozen backbone alone.
pub fn zero_shot_accuracy(bb: &Backbone, data: &Dataset, labels: &Labels) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let text = zero_shot_text(bb, labels)?;
    let hits = crate::par::install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                zero_shot_image(bb, data.image(i)).map(|f| {
                    usize::from(
                        predict(&plain_logits(&text, &f, bb.logit_scale())) == data.labels[i],
                    )
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}
