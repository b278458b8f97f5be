//! Sequential domain training, the prompt bank, the k-means domain selector
//! and accuracy bookkeeping.

mod eval;
pub mod kmeans;
mod pool;
mod strategy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use eval::{
    infer, AccuracyMatrix, Evaluator, RowEval, Selection, SelectorMode, StreamFeatures,
};
pub use kmeans::{kmeans, KMeans};
pub use pool::{
    build_feature_pool, extract_features, pool_domain, select_domain, FeaturePool, SelectorFeatures,
};
pub use strategy::{
    final_row_with_k, layer_grid, run_strategy, DilContext, LayerGrid, RunOutcome, StrategyId,
    Summary,
};

use crate::backbone::{Backbone, Labels};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{self, NamedTensors};
use crate::numerics::{Adam, Sgd, Tape, Var};
use crate::prompting::{
    image_forward, logits, loss, one_hot, text_forward, CommonPrompt, DomainPromptSet,
    PersonalizedImagePrompts, PersonalizedTextPrompt, PromptConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Centroids per domain in the feature pool.
    pub k: usize,
    pub kmeans_iters: usize,
    #[serde(default)]
    pub selector_features: SelectorFeatures,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

/// Update rule for prompt tensors. `lr` is shared; `momentum` only applies
/// to SGD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(cfg.lr, cfg.momentum)),
            OptimizerKind::Adam => Self::Adam(Adam::new(cfg.lr)),
        }
    }

    fn step(&mut self, params: &mut [&mut crate::numerics::Tensor]) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(params),
            Self::Adam(o) => o.step(params),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch: 16,
            k: 5,
            kmeans_iters: kmeans::DEFAULT_MAX_ITERS,
            selector_features: SelectorFeatures::PatchMean,
            seeds: vec![0, 1, 2],
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.k == 0 || self.kmeans_iters == 0 {
            return Err(Error::Config(
                "epochs, batch, k and kmeans_iters must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr > 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// The evolving common prompt plus one frozen snapshot per trained domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub evolving_common: CommonPrompt,
    snapshots: BTreeMap<usize, DomainPromptSet>,
}

const EVOLVING: &str = "evolving/common";

impl PromptBank {
    pub fn new<R: Rng + ?Sized>(cfg: &PromptConfig, dim: usize, rng: &mut R) -> Self {
        Self {
            evolving_common: CommonPrompt::init(cfg.common_len, dim, cfg.init_std, rng),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn snapshot(&self, domain: usize) -> Option<&DomainPromptSet> {
        self.snapshots.get(&domain)
    }

    pub fn snapshots(&self) -> &BTreeMap<usize, DomainPromptSet> {
        &self.snapshots
    }

    pub fn last_domain(&self) -> Option<usize> {
        self.snapshots.keys().next_back().copied()
    }

    /// Stores a frozen copy of `set` under a new domain id, which must exceed
    /// every existing id.
    pub fn append(&mut self, domain: usize, mut set: DomainPromptSet) -> Result<()> {
        if domain == 0 || self.last_domain().is_some_and(|last| domain <= last) {
            return Err(Error::Usage(format!(
                "domain {domain} cannot follow {:?}; snapshots are append-only",
                self.last_domain()
            )));
        }
        set.set_trainable(false);
        self.snapshots.insert(domain, set);
        Ok(())
    }

    pub fn checksums(&self) -> BTreeMap<usize, String> {
        self.snapshots
            .iter()
            .map(|(&s, set)| (s, set.checksum()))
            .collect()
    }

    pub fn named(&self) -> Vec<(String, &crate::numerics::Tensor)> {
        let mut out = vec![(EVOLVING.to_string(), &self.evolving_common.values)];
        for (&s, set) in &self.snapshots {
            out.extend(set.named(s));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let list = io::decode(bytes)?;
        let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
        let mut named = NamedTensors::new(list);
        let evolving_common = CommonPrompt {
            values: named
                .take_any(EVOLVING)
                .ok_or_else(|| Error::Data(format!("missing tensor `{EVOLVING}`")))?,
        };
        let mut domains: Vec<usize> = names
            .iter()
            .filter_map(|n| {
                n.strip_prefix("domain")?
                    .strip_suffix("/common")?
                    .parse()
                    .ok()
            })
            .collect();
        domains.sort_unstable();
        let mut bank = Self {
            evolving_common,
            snapshots: BTreeMap::new(),
        };
        for s in domains {
            let common = named
                .take_any(&format!("domain{s}/common"))
                .ok_or_else(|| Error::Data(format!("missing common prompt of domain {s}")))?;
            let text = named
                .take_any(&format!("domain{s}/text"))
                .ok_or_else(|| Error::Data(format!("missing text prompt of domain {s}")))?;
            let prefix = format!("domain{s}/img/layer");
            let layers: Vec<usize> = names
                .iter()
                .filter_map(|n| n.strip_prefix(&prefix)?.parse().ok())
                .collect();
            let mut image = PersonalizedImagePrompts::default();
            for l in layers {
                let t = named
                    .take_any(&format!("{prefix}{l}"))
                    .expect("listed name");
                image.layers.insert(l, t);
            }
            bank.append(
                s,
                DomainPromptSet {
                    common: CommonPrompt { values: common },
                    image,
                    text: PersonalizedTextPrompt { values: text },
                },
            )?;
        }
        if let Some(extra) = named.names().next() {
            return Err(Error::Data(format!(
                "unexpected tensor `{extra}` in prompt bank"
            )));
        }
        Ok(bank)
    }
}

/// Mean loss per epoch from [`fit_prompts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
}

/// One minibatch loss over the full prompted pipeline.
fn minibatch_loss<'a>(
    tape: &mut Tape<'a>,
    bb: &'a Backbone,
    set: &'a DomainPromptSet,
    data: &Dataset,
    idx: &[usize],
    labels: &Labels,
    pcfg: &PromptConfig,
) -> Result<(Var, crate::prompting::PromptVars)> {
    let vars = bb.register(tape)?;
    let pv = set.register(tape)?;
    let text = text_forward(tape, bb, &vars.text, labels, &pv)?;
    let feats = idx
        .iter()
        .map(|&i| {
            image_forward(
                tape,
                bb,
                &vars.vision,
                data.image(i),
                &pv,
                pcfg.prefix_variant,
                None,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let feats = tape.concat_rows(&feats)?;
    let z = logits(tape, feats, text, bb.logit_scale())?;
    let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let l = loss(tape, z, &one_hot(&ys, labels.len()), pcfg.loss_mode)?;
    Ok((l, pv))
}

/// Mean prompt-training loss of `set` on samples `idx` of `data`.
pub fn batch_loss(
    bb: &Backbone,
    set: &DomainPromptSet,
    data: &Dataset,
    idx: &[usize],
    labels: &Labels,
    pcfg: &PromptConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (l, _) = minibatch_loss(&mut tape, bb, set, data, idx, labels, pcfg)?;
    Ok(tape.value(l)[0])
}

/// Gradients keyed by position in [`DomainPromptSet::tensors`].
pub type SlotGradients = Vec<(usize, Vec<f64>)>;

/// Loss and its gradient for every non-empty tensor of `set`, keyed by the
/// tensor's position. `set` must be trainable.
pub fn batch_gradients(
    bb: &Backbone,
    set: &DomainPromptSet,
    data: &Dataset,
    idx: &[usize],
    labels: &Labels,
    pcfg: &PromptConfig,
) -> Result<(f64, SlotGradients)> {
    let mut tape = Tape::new();
    let (l, pv) = minibatch_loss(&mut tape, bb, set, data, idx, labels, pcfg)?;
    let grads = tape.backward(l)?;
    let per = pv
        .slots()
        .map(|(v, s)| {
            let g = grads.wrt(v).map(<[f64]>::to_vec);
            g.map(|g| (s, g))
                .ok_or_else(|| Error::Usage(format!("prompt tensor {s} received no gradient")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(l)[0], per))
}

/// Minibatch SGD on every non-empty tensor of `set`; the backbone only
/// supplies activations. `set` is left trainable.
#[allow(clippy::too_many_arguments)]
pub fn fit_prompts<R: Rng + ?Sized>(
    bb: &Backbone,
    set: &mut DomainPromptSet,
    data: &Dataset,
    labels: &Labels,
    pcfg: &PromptConfig,
    tcfg: &TrainConfig,
    seed: u64,
    rng: &mut R,
) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::Data(format!(
            "domain {} has no training samples",
            data.domain_id
        )));
    }
    if labels.len() != data.num_classes {
        return Err(Error::Data(format!(
            "{} class names for {} classes",
            labels.len(),
            data.num_classes
        )));
    }
    set.set_trainable(true);
    let mut opt = Optimizer::new(tcfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(tcfg.batch) {
            let (value, grads, pv) = {
                let mut tape = Tape::new();
                let (l, pv) = minibatch_loss(&mut tape, bb, set, data, chunk, labels, pcfg)?;
                let value = tape.value(l)[0];
                if !value.is_finite() {
                    return Err(Error::Training {
                        detail: format!(
                            "non-finite prompt loss in epoch {epoch} of domain {}",
                            data.domain_id
                        ),
                        seed,
                        config: serde_json::to_string(&(pcfg, tcfg)).unwrap_or_default(),
                    });
                }
                (value, tape.backward(l)?, pv)
            };
            let mut slots: Vec<_> = set.tensors_mut().into_iter().map(Some).collect();
            let mut params = Vec::new();
            for (v, slot) in pv.slots() {
                let t = slots[slot].take().expect("slots are distinct");
                grads.accumulate_into(v, t)?;
                params.push(t);
            }
            if !params.is_empty() {
                opt.step(&mut params)?;
            }
            total += value * chunk.len() as f64;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(FitReport { epoch_losses })
}

/// Trains domain `s`: fresh personalized prompts, the evolving common prompt
/// continued from its current state, then a frozen snapshot appended to the
/// bank. The evolving common prompt carries the trained values forward.
#[allow(clippy::too_many_arguments)]
pub fn train_domain<R: Rng + ?Sized>(
    s: usize,
    data: &Dataset,
    bank: &mut PromptBank,
    bb: &Backbone,
    labels: &Labels,
    pcfg: &PromptConfig,
    tcfg: &TrainConfig,
    seed: u64,
    rng: &mut R,
) -> Result<FitReport> {
    if let Some(last) = bank.last_domain() {
        if s <= last {
            return Err(Error::Usage(format!(
                "domain {s} already trained (last is {last})"
            )));
        }
    }
    let mut set = DomainPromptSet::fresh(pcfg, bb.config.dim, bank.evolving_common.clone(), rng);
    let report = fit_prompts(bb, &mut set, data, labels, pcfg, tcfg, seed, rng)?;
    set.set_trainable(false);
    bank.evolving_common = set.common.clone();
    bank.append(s, set)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
