use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, sq_dist};
use crate::backbone::{embed_patches, zero_shot_image, Backbone};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tape;

/// Prompt-free frozen features the domain selector clusters on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorFeatures {
    /// Mean of the patch embeddings, before any attention layer.
    #[default]
    PatchMean,
    /// The unit-length class-token readout used for classification.
    Cls,
}

impl SelectorFeatures {
    pub fn extract(self, bb: &Backbone, image: &[f32]) -> Result<Vec<f64>> {
        match self {
            Self::Cls => zero_shot_image(bb, image),
            Self::PatchMean => {
                let mut tape = Tape::new();
                let vv = bb.vision.register(&mut tape)?;
                let e = embed_patches(&mut tape, &bb.config, &vv, image)?;
                let d = bb.config.dim;
                let e = tape.value(e);
                let n = e.len() / d;
                let mut mean = vec![0.0; d];
                for row in e.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                Ok(mean)
            }
        }
    }
}

/// Per-domain centroids of selector features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturePool {
    pub kind: SelectorFeatures,
    domains: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl FeaturePool {
    pub fn new(kind: SelectorFeatures) -> Self {
        Self {
            kind,
            domains: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, domain: usize, centroids: Vec<Vec<f64>>) -> Result<()> {
        if centroids.is_empty() || centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "domain {domain} needs finite centroids"
            )));
        }
        self.domains.insert(domain, centroids);
        Ok(())
    }

    pub fn centroids(&self, domain: usize) -> Option<&[Vec<f64>]> {
        self.domains.get(&domain).map(Vec::as_slice)
    }

    pub fn k(&self, domain: usize) -> Option<usize> {
        self.domains.get(&domain).map(Vec::len)
    }

    pub fn domains(&self) -> impl Iterator<Item = usize> + '_ {
        self.domains.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Domain owning the nearest centroid. Domains are scanned in ascending
    /// order and only a strictly closer centroid replaces the current best, so
    /// ties go to the lower id.
    pub fn nearest_domain(&self, feature: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&s, cs) in &self.domains {
            for c in cs {
                let d = sq_dist(feature, c);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((s, d));
                }
            }
        }
        best.map(|(s, _)| s)
            .ok_or_else(|| Error::Usage("feature pool is empty".into()))
    }
}

/// Selector features of every image in `data`.
pub fn extract_features(
    bb: &Backbone,
    data: &Dataset,
    kind: SelectorFeatures,
) -> Result<Vec<Vec<f64>>> {
    crate::par::install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| kind.extract(bb, data.image(i)))
            .collect()
    })
}

/// Clusters precomputed features of domain `s` into `k` centroids.
pub fn pool_domain(
    pool: &mut FeaturePool,
    s: usize,
    features: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<()> {
    if k > features.len() {
        return Err(Error::Config(format!(
            "K = {k} exceeds the {} samples of domain {s}",
            features.len()
        )));
    }
    let km = kmeans(features, k, max_iters, seed)?;
    pool.insert(s, km.centroids)
}

/// Extracts features of `data` and stores `k` centroids under domain `s`.
pub fn build_feature_pool(
    pool: &mut FeaturePool,
    s: usize,
    data: &Dataset,
    bb: &Backbone,
    k: usize,
    seed: u64,
) -> Result<()> {
    let feats = extract_features(bb, data, pool.kind)?;
    pool_domain(pool, s, &feats, k, super::kmeans::DEFAULT_MAX_ITERS, seed)
}

pub fn select_domain(image: &[f32], pool: &FeaturePool, bb: &Backbone) -> Result<usize> {
    pool.nearest_domain(&pool.kind.extract(bb, image)?)
}
