use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{AccuracyMatrix, Evaluator, RowEval, SelectorMode, StreamFeatures};
use super::pool::{pool_domain, FeaturePool};
use super::{fit_prompts, train_domain, FitReport, PromptBank, TrainConfig};
use crate::backbone::{Backbone, Labels, PrefixVariant};
use crate::data::Stream;
use crate::error::{Error, Result};
use crate::prompting::{CommonPrompt, DomainPromptSet, PromptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    CpPrompt,
    CommonOnly,
    PersonalizedOnly,
    ZeroShot,
    SingleSharedContinual,
    SplitPrefixVariant,
}

impl StrategyId {
    pub const ALL: [StrategyId; 6] = [
        Self::CpPrompt,
        Self::CommonOnly,
        Self::PersonalizedOnly,
        Self::ZeroShot,
        Self::SingleSharedContinual,
        Self::SplitPrefixVariant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CpPrompt => "cp_prompt",
            Self::CommonOnly => "common_only",
            Self::PersonalizedOnly => "personalized_only",
            Self::ZeroShot => "zero_shot",
            Self::SingleSharedContinual => "single_shared_continual",
            Self::SplitPrefixVariant => "split_prefix_variant",
        }
    }

    /// The prompt configuration this strategy actually trains.
    pub fn prompt_config(self, base: &PromptConfig) -> PromptConfig {
        let mut cfg = base.clone();
        match self {
            Self::CpPrompt | Self::SingleSharedContinual => {}
            Self::CommonOnly => {
                cfg.image_len = 0;
                cfg.text_len = 0;
            }
            Self::PersonalizedOnly => cfg.common_len = 0,
            Self::ZeroShot => {
                cfg.common_len = 0;
                cfg.image_len = 0;
                cfg.text_len = 0;
            }
            Self::SplitPrefixVariant => cfg.prefix_variant = PrefixVariant::SplitPrefix,
        }
        cfg
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|id| id.as_str()).collect();
                Error::Usage(format!(
                    "unknown strategy `{s}` (one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for StrategyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Read-only inputs shared by every run on one stream.
#[derive(Clone, Copy)]
pub struct DilContext<'a> {
    pub backbone: &'a Backbone,
    pub stream: &'a Stream,
    pub labels: &'a Labels,
    pub features: &'a StreamFeatures,
}

/// Everything a strategy run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub strategy: StrategyId,
    pub seed: u64,
    pub prompt_config: PromptConfig,
    pub kmeans: AccuracyMatrix,
    pub oracle: AccuracyMatrix,
    /// k-means selector hit rate per domain after the last domain. Empty for
    /// strategies that do not select.
    pub selector_accuracy: Vec<f64>,
    pub bank: Option<PromptBank>,
    pub shared: Option<DomainPromptSet>,
    pub pool: FeaturePool,
    pub fits: Vec<FitReport>,
    /// Snapshot checksums recorded after each domain.
    pub snapshot_checksums: Vec<BTreeMap<usize, String>>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub trainable_param_count: usize,
    pub trainable_fraction: f64,
}

/// The per-run report written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: StrategyId,
    pub seed: u64,
    pub selector: SelectorMode,
    #[serde(rename = "AA")]
    pub aa: f64,
    #[serde(rename = "AF")]
    pub af: f64,
    pub selector_accuracy: Vec<f64>,
    pub trainable_param_count: usize,
    pub trainable_fraction: f64,
    pub config_hash: String,
}

impl RunOutcome {
    pub fn matrix(&self, mode: SelectorMode) -> &AccuracyMatrix {
        match mode {
            SelectorMode::Kmeans => &self.kmeans,
            SelectorMode::Oracle => &self.oracle,
        }
    }

    pub fn summary(&self, mode: SelectorMode, config_hash: &str) -> Summary {
        let m = self.matrix(mode);
        Summary {
            strategy: self.strategy,
            seed: self.seed,
            selector: mode,
            aa: m.average_accuracy(),
            af: m.average_forgetting(),
            selector_accuracy: self.selector_accuracy.clone(),
            trainable_param_count: self.trainable_param_count,
            trainable_fraction: self.trainable_fraction,
            config_hash: config_hash.to_string(),
        }
    }
}

fn pool_seed(seed: u64, domain: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(domain as u64)
}

/// Trains and evaluates `strategy` over the whole stream. Every domain is
/// evaluated after it is trained, under both selectors.
pub fn run_strategy(
    ctx: DilContext<'_>,
    strategy: StrategyId,
    base: &PromptConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let bb = ctx.backbone;
    let pcfg = strategy.prompt_config(base);
    pcfg.validate(&bb.config)?;
    tcfg.validate()?;
    if tcfg.selector_features != ctx.features.kind {
        return Err(Error::Usage(format!(
            "config selects on {:?} features but the stream cache holds {:?}",
            tcfg.selector_features, ctx.features.kind
        )));
    }
    let dim = bb.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let before = bb.checksum();
    let mut ev = Evaluator::new(
        bb,
        ctx.stream,
        ctx.labels,
        ctx.features,
        pcfg.prefix_variant,
    )?;
    let mut kmeans_m = AccuracyMatrix::new();
    let mut oracle_m = AccuracyMatrix::new();
    let mut selector_accuracy = Vec::new();
    let mut bank = None;
    let mut shared = None;
    let mut pool = FeaturePool::new(ctx.features.kind);
    let mut fits = Vec::new();
    let mut snapshot_checksums = Vec::new();
    let count = if strategy == StrategyId::ZeroShot {
        0
    } else {
        pcfg.trainable_param_count(dim)
    };

    for t in 1..=ctx.stream.domains.len() {
        let train = &ctx.stream.domains[t - 1].train;
        match strategy {
            StrategyId::ZeroShot => {
                let row = ev.zero_shot_row(t)?;
                kmeans_m.push_row(row.clone())?;
                oracle_m.push_row(row)?;
            }
            StrategyId::SingleSharedContinual => {
                let set = shared.get_or_insert_with(|| {
                    let common = CommonPrompt::init(pcfg.common_len, dim, pcfg.init_std, &mut rng);
                    DomainPromptSet::fresh(&pcfg, dim, common, &mut rng)
                });
                fits.push(fit_prompts(
                    bb, set, train, ctx.labels, &pcfg, tcfg, seed, &mut rng,
                )?);
                let row = ev.shared_row(t, set)?;
                kmeans_m.push_row(row.clone())?;
                oracle_m.push_row(row)?;
            }
            _ => {
                let b = bank.get_or_insert_with(|| PromptBank::new(&pcfg, dim, &mut rng));
                fits.push(train_domain(
                    t, train, b, bb, ctx.labels, &pcfg, tcfg, seed, &mut rng,
                )?);
                pool_domain(
                    &mut pool,
                    t,
                    &ctx.features.train[t - 1],
                    tcfg.k,
                    tcfg.kmeans_iters,
                    pool_seed(seed, t),
                )?;
                let RowEval {
                    kmeans,
                    oracle,
                    selector_accuracy: sel,
                } = ev.bank_row(t, b, &pool)?;
                kmeans_m.push_row(kmeans)?;
                oracle_m.push_row(oracle)?;
                selector_accuracy = sel;
                snapshot_checksums.push(b.checksums());
            }
        }
    }
    if let Some(s) = shared.as_mut() {
        s.set_trainable(false);
    }
    let total = bb.parameter_count() + count;
    Ok(RunOutcome {
        strategy,
        seed,
        prompt_config: pcfg,
        kmeans: kmeans_m,
        oracle: oracle_m,
        selector_accuracy,
        bank,
        shared,
        pool,
        fits,
        snapshot_checksums,
        backbone_checksum_before: before,
        backbone_checksum_after: bb.checksum(),
        trainable_param_count: count,
        trainable_fraction: count as f64 / total as f64,
    })
}

/// Rebuilds the feature pool with `k` centroids per domain and re-evaluates
/// the final row of a banked run. Prompts are not retrained.
pub fn final_row_with_k(
    ctx: DilContext<'_>,
    outcome: &RunOutcome,
    k: usize,
    kmeans_iters: usize,
) -> Result<RowEval> {
    let bank = outcome
        .bank
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("{} keeps no prompt bank", outcome.strategy)))?;
    let mut pool = FeaturePool::new(ctx.features.kind);
    let s = ctx.stream.domains.len();
    for t in 1..=s {
        pool_domain(
            &mut pool,
            t,
            &ctx.features.train[t - 1],
            k,
            kmeans_iters,
            pool_seed(outcome.seed, t),
        )?;
    }
    let mut ev = Evaluator::new(
        ctx.backbone,
        ctx.stream,
        ctx.labels,
        ctx.features,
        outcome.prompt_config.prefix_variant,
    )?;
    ev.bank_row(s, bank, &pool)
}

/// Final average accuracy for every insertion range `start <= end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub layers: usize,
    pub cells: BTreeMap<String, f64>,
}

impl LayerGrid {
    fn key(start: usize, end: usize) -> String {
        format!("{start}-{end}")
    }

    pub fn get(&self, start: usize, end: usize) -> Option<f64> {
        self.cells.get(&Self::key(start, end)).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Rows are start layers, columns end layers; the lower triangle is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("start\\end");
        for e in 0..self.layers {
            write!(out, ",{e}").unwrap();
        }
        out.push('\n');
        for s in 0..self.layers {
            write!(out, "{s}").unwrap();
            for e in 0..self.layers {
                match self.get(s, e) {
                    Some(a) => write!(out, ",{a:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs cp_prompt for every `0 <= start <= end < R`. Cells already present
/// in `known` (keyed by `(start, end)`) are taken as given.
pub fn layer_grid(
    ctx: DilContext<'_>,
    base: &PromptConfig,
    tcfg: &TrainConfig,
    seed: u64,
    mode: SelectorMode,
    known: &BTreeMap<(usize, usize), f64>,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<LayerGrid> {
    let r = ctx.backbone.config.vision_layers;
    let mut cells = BTreeMap::new();
    for start in 0..r {
        for end in start..r {
            let aa = match known.get(&(start, end)) {
                Some(&aa) => aa,
                None => {
                    let cfg = PromptConfig {
                        layer_start: start,
                        layer_end: end,
                        ..base.clone()
                    };
                    let out = run_strategy(ctx, StrategyId::CpPrompt, &cfg, tcfg, seed)?;
                    out.matrix(mode).average_accuracy()
                }
            };
            progress(start, end, aa);
            cells.insert(LayerGrid::key(start, end), aa);
        }
    }
    Ok(LayerGrid { layers: r, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for id in StrategyId::ALL {
            assert_eq!(id.as_str().parse::<StrategyId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(json, format!("\"{}\"", id.as_str()));
        }
        assert!("l2p".parse::<StrategyId>().is_err());
    }

    #[test]
    fn strategy_configs() {
        let base = PromptConfig::default();
        let c = StrategyId::CommonOnly.prompt_config(&base);
        assert_eq!((c.common_len, c.image_len, c.text_len), (4, 0, 0));
        let p = StrategyId::PersonalizedOnly.prompt_config(&base);
        assert_eq!((p.common_len, p.image_len, p.text_len), (0, 8, 4));
        let s = StrategyId::SplitPrefixVariant.prompt_config(&base);
        assert_eq!(s.prefix_variant, PrefixVariant::SplitPrefix);
        assert_eq!(StrategyId::CpPrompt.prompt_config(&base), base);
    }

    #[test]
    fn grid_csv_is_upper_triangular() {
        let mut cells = BTreeMap::new();
        for s in 0..3 {
            for e in s..3 {
                cells.insert(LayerGrid::key(s, e), 0.5);
            }
        }
        let g = LayerGrid { layers: 3, cells };
        assert_eq!(g.len(), 6);
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "start\\end,0,1,2");
        assert_eq!(lines[2], "1,,0.500000,0.500000");
        assert_eq!(lines[3], "2,,,0.500000");
    }
}
