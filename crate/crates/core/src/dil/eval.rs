use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pool::{extract_features, FeaturePool, SelectorFeatures};
use super::PromptBank;
use crate::backbone::{zero_shot_text, Backbone, Labels, PrefixVariant};
use crate::data::Stream;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompting::{image_features, plain_logits, predict, text_features, DomainPromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    /// Nearest k-means centroid over all trained domains.
    #[default]
    Kmeans,
    /// The test sample's true domain.
    Oracle,
}

impl FromStr for SelectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Usage(format!(
                "unknown selector `{other}` (kmeans|oracle)"
            ))),
        }
    }
}

impl SelectorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kmeans => "kmeans",
            Self::Oracle => "oracle",
        }
    }
}

/// `a[t][i]`: accuracy in `[0, 1]` on domain `i` after training through
/// domain `t`, for `i <= t`. Both indices are 1-based in the accessors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends row `t = len + 1`, which must hold exactly `t` entries.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Usage(format!(
                "row {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Data("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn domains(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows
            .get(t.checked_sub(1)?)?
            .get(i.checked_sub(1)?)
            .copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn final_row(&self) -> &[f64] {
        self.rows.last().map_or(&[], Vec::as_slice)
    }

    /// Mean of the last row.
    pub fn average_accuracy(&self) -> f64 {
        let last = self.final_row();
        if last.is_empty() {
            return 0.0;
        }
        last.iter().sum::<f64>() / last.len() as f64
    }

    /// Mean over `i < S` of `a[S][i] − max_{t ≥ i} a[t][i]`; zero when S = 1.
    pub fn average_forgetting(&self) -> f64 {
        let s = self.rows.len();
        if s < 2 {
            return 0.0;
        }
        let total: f64 = (0..s - 1)
            .map(|i| {
                let best = (i..s).map(|t| self.rows[t][i]).fold(f64::MIN, f64::max);
                self.rows[s - 1][i] - best
            })
            .sum();
        total / (s - 1) as f64
    }

    /// Rows are `t`, columns are `i`; cells with `i > t` are empty.
    pub fn to_csv(&self) -> String {
        let s = self.rows.len();
        let mut out = String::from("t");
        for i in 1..=s {
            write!(out, ",domain{i}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            write!(out, "{}", t + 1).unwrap();
            for i in 0..s {
                match row.get(i) {
                    Some(a) => write!(out, ",{a:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Prompt-free features of a stream, indexed by domain position (domain
/// id − 1): selector features of both splits plus the zero-shot readout of
/// every test image.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFeatures {
    pub kind: SelectorFeatures,
    pub train: Vec<Vec<Vec<f64>>>,
    pub test: Vec<Vec<Vec<f64>>>,
    pub zero_shot_test: Vec<Vec<Vec<f64>>>,
}

impl StreamFeatures {
    pub fn extract(bb: &Backbone, stream: &Stream, kind: SelectorFeatures) -> Result<Self> {
        let mut out = Self {
            kind,
            train: Vec::new(),
            test: Vec::new(),
            zero_shot_test: Vec::new(),
        };
        for d in &stream.domains {
            out.train.push(extract_features(bb, &d.train, kind)?);
            let cls = extract_features(bb, &d.test, SelectorFeatures::Cls)?;
            out.test.push(match kind {
                SelectorFeatures::Cls => cls.clone(),
                _ => extract_features(bb, &d.test, kind)?,
            });
            out.zero_shot_test.push(cls);
        }
        Ok(out)
    }
}

/// Which prompt set a test sample is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Route {
    ZeroShot,
    Snapshot(usize),
}

/// Evaluates test splits against a bank, remembering every
/// (domain, sample, snapshot) prediction. Snapshots and the backbone are
/// frozen, so a cached prediction never goes stale.
pub struct Evaluator<'a> {
    bb: &'a Backbone,
    stream: &'a Stream,
    labels: &'a Labels,
    features: &'a StreamFeatures,
    variant: PrefixVariant,
    texts: HashMap<usize, Tensor>,
    zero_text: Tensor,
    cache: HashMap<(usize, usize, Route), usize>,
}

/// One accuracy-matrix row for each selector, plus per-domain selector hit
/// rates of the k-means selector.
#[derive(Debug, Clone, PartialEq)]
pub struct RowEval {
    pub kmeans: Vec<f64>,
    pub oracle: Vec<f64>,
    pub selector_accuracy: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        bb: &'a Backbone,
        stream: &'a Stream,
        labels: &'a Labels,
        features: &'a StreamFeatures,
        variant: PrefixVariant,
    ) -> Result<Self> {
        if features.test.len() != stream.domains.len() {
            return Err(Error::Usage(
                "features were extracted from a different stream".into(),
            ));
        }
        Ok(Self {
            bb,
            stream,
            labels,
            features,
            variant,
            texts: HashMap::new(),
            zero_text: zero_shot_text(bb, labels)?,
            cache: HashMap::new(),
        })
    }

    fn fill(&mut self, bank: Option<&PromptBank>, keys: Vec<(usize, usize, Route)>) -> Result<()> {
        let mut missing: Vec<_> = keys
            .into_iter()
            .filter(|k| !self.cache.contains_key(k))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if let Some(bank) = bank {
            for &(_, _, r) in &missing {
                if let Route::Snapshot(s) = r {
                    if !self.texts.contains_key(&s) {
                        let set = snapshot(bank, s)?;
                        self.texts
                            .insert(s, text_features(self.bb, set, self.labels)?);
                    }
                }
            }
        }
        let scale = self.bb.logit_scale();
        let this = &*self;
        let preds = crate::par::install(|| {
            missing
                .par_iter()
                .map(|&(d, j, r)| match r {
                    Route::ZeroShot => Ok(predict(&plain_logits(
                        &this.zero_text,
                        &this.features.zero_shot_test[d - 1][j],
                        scale,
                    ))),
                    Route::Snapshot(s) => {
                        let set = snapshot(bank.expect("snapshot routes need a bank"), s)?;
                        let img = this.stream.domains[d - 1].test.image(j);
                        let f = image_features(this.bb, set, img, this.variant, None)?;
                        Ok(predict(&plain_logits(&this.texts[&s], &f, scale)))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;
        self.cache.extend(missing.into_iter().zip(preds));
        Ok(())
    }

    fn accuracy(&self, d: usize, route: impl Fn(usize) -> Route) -> f64 {
        let test = &self.stream.domains[d - 1].test;
        let hits = (0..test.len())
            .filter(|&j| self.cache[&(d, j, route(j))] == test.labels[j])
            .count();
        hits as f64 / test.len() as f64
    }

    /// Row `t` for a bank whose snapshots cover domains `1..=t`.
    pub fn bank_row(&mut self, t: usize, bank: &PromptBank, pool: &FeaturePool) -> Result<RowEval> {
        if pool.kind != self.features.kind {
            return Err(Error::Usage(format!(
                "pool clusters {:?} features but the stream cache holds {:?}",
                pool.kind, self.features.kind
            )));
        }
        let mut selected = Vec::with_capacity(t);
        let mut keys = Vec::new();
        for d in 1..=t {
            let feats = &self.features.test[d - 1];
            let sel = feats
                .iter()
                .map(|f| pool.nearest_domain(f))
                .collect::<Result<Vec<_>>>()?;
            for (j, &s) in sel.iter().enumerate() {
                keys.push((d, j, Route::Snapshot(s)));
                keys.push((d, j, Route::Snapshot(d)));
            }
            selected.push(sel);
        }
        self.fill(Some(bank), keys)?;
        let mut out = RowEval {
            kmeans: Vec::new(),
            oracle: Vec::new(),
            selector_accuracy: Vec::new(),
        };
        for d in 1..=t {
            let sel = &selected[d - 1];
            out.kmeans
                .push(self.accuracy(d, |j| Route::Snapshot(sel[j])));
            out.oracle.push(self.accuracy(d, |_| Route::Snapshot(d)));
            let hits = sel.iter().filter(|&&s| s == d).count();
            out.selector_accuracy.push(hits as f64 / sel.len() as f64);
        }
        Ok(out)
    }

    /// Row `t` for the frozen backbone alone.
    pub fn zero_shot_row(&mut self, t: usize) -> Result<Vec<f64>> {
        let keys = (1..=t)
            .flat_map(|d| {
                (0..self.features.test[d - 1].len()).map(move |j| (d, j, Route::ZeroShot))
            })
            .collect();
        self.fill(None, keys)?;
        Ok((1..=t)
            .map(|d| self.accuracy(d, |_| Route::ZeroShot))
            .collect())
    }

    /// Row `t` for one prompt set applied to every domain. Not cached, since
    /// the set changes between rows.
    pub fn shared_row(&self, t: usize, set: &DomainPromptSet) -> Result<Vec<f64>> {
        let text = text_features(self.bb, set, self.labels)?;
        let scale = self.bb.logit_scale();
        (1..=t)
            .map(|d| {
                let test = &self.stream.domains[d - 1].test;
                let hits = crate::par::install(|| {
                    (0..test.len())
                        .into_par_iter()
                        .map(|j| {
                            let f =
                                image_features(self.bb, set, test.image(j), self.variant, None)?;
                            Ok(usize::from(
                                predict(&plain_logits(&text, &f, scale)) == test.labels[j],
                            ))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
            })
            .collect()
    }
}

fn snapshot(bank: &PromptBank, s: usize) -> Result<&DomainPromptSet> {
    bank.snapshot(s)
        .ok_or_else(|| Error::Usage(format!("no snapshot for domain {s}")))
}

/// How [`infer`] picks a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Kmeans,
    Oracle(usize),
}

/// Classifies one image with the snapshot of the selected domain. Returns
/// `(class, domain)`.
pub fn infer(
    image: &[f32],
    bank: &PromptBank,
    pool: &FeaturePool,
    bb: &Backbone,
    labels: &Labels,
    selection: Selection,
    variant: PrefixVariant,
) -> Result<(usize, usize)> {
    let s = match selection {
        Selection::Kmeans => pool.nearest_domain(&pool.kind.extract(bb, image)?)?,
        Selection::Oracle(s) => s,
    };
    let set = snapshot(bank, s)?;
    let text = text_features(bb, set, labels)?;
    let f = image_features(bb, set, image, variant, None)?;
    Ok((predict(&plain_logits(&text, &f, bb.logit_scale())), s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new();
        for r in rows {
            m.push_row(r.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn single_domain_has_zero_forgetting() {
        let m = matrix(&[&[0.8]]);
        assert_eq!(m.average_accuracy(), 0.8);
        assert_eq!(m.average_forgetting(), 0.0);
    }

    #[test]
    fn forgetting_uses_the_best_history() {
        let m = matrix(&[&[0.9], &[0.7, 0.8], &[0.6, 0.85, 0.5]]);
        assert!((m.average_accuracy() - 0.65).abs() < 1e-12);
        // Domain 1: 0.6 − 0.9; domain 2: 0.85 − 0.85.
        assert!((m.average_forgetting() - (-0.15)).abs() < 1e-12);
        let flat = matrix(&[&[0.9], &[0.9, 0.8]]);
        assert_eq!(flat.average_forgetting(), 0.0);
    }

    #[test]
    fn rows_are_validated_and_csv_is_triangular() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        assert!(m.push_row(vec![1.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        m.push_row(vec![0.25, 1.0]).unwrap();
        assert_eq!(
            m.to_csv(),
            "t,domain1,domain2\n1,0.500000,\n2,0.250000,1.000000\n"
        );
        assert_eq!(m.get(2, 1), Some(0.25));
        assert_eq!(m.get(1, 2), None);
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(
            "oracle".parse::<SelectorMode>().unwrap(),
            SelectorMode::Oracle
        );
        assert!("nearest".parse::<SelectorMode>().is_err());
    }
}
