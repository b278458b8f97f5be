use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_base, generate_domain, Dataset, DomainTransform, GeneratorSpec, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub transform: DomainTransform,
    pub seed: u64,
}

/// The ordered domain stream plus the untransformed base corpus used for
/// pretraining. Domain ids are 1-based positions in `domains`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub image_size: usize,
    pub base: SplitCounts,
    pub base_seed: u64,
    pub domain_counts: SplitCounts,
    pub domains: Vec<DomainEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        let counts = SplitCounts {
            train_per_class: 200,
            test_per_class: 100,
        };
        let entry = |name: &str, transform, seed| DomainEntry {
            name: name.into(),
            transform,
            seed,
        };
        Self {
            classes: 5,
            image_size: 16,
            base: counts,
            base_seed: 7,
            domain_counts: counts,
            domains: vec![
                entry("noise", DomainTransform::AdditiveNoise { sigma: 0.3 }, 101),
                entry("inversion", DomainTransform::Inversion, 102),
                entry("stripes", DomainTransform::StripeMask { period: 2 }, 103),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
}

/// Materialized datasets for a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub base: DomainSplits,
    pub domains: Vec<DomainSplits>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("manifest lists no domains".into()));
        }
        for c in [self.base, self.domain_counts] {
            if c.train_per_class == 0 || c.test_per_class == 0 {
                return Err(Error::Config("per-class counts must be positive".into()));
            }
        }
        for d in &self.domains {
            d.transform.validate()?;
        }
        self.spec(1).map(|_| ())
    }

    fn spec(&self, per_class: usize) -> Result<GeneratorSpec> {
        let s = GeneratorSpec {
            classes: self.classes,
            per_class,
            image_size: self.image_size,
        };
        super::check_spec(&s)?;
        Ok(s)
    }

    pub fn base_split(&self, split: Split) -> Result<Dataset> {
        let n = match split {
            Split::Train => self.base.train_per_class,
            Split::Test => self.base.test_per_class,
        };
        generate_base(&self.spec(n)?, split, self.base_seed)
    }

    /// Generates one split of domain `id` (1-based).
    pub fn domain_split(&self, id: usize, split: Split) -> Result<Dataset> {
        let entry = id
            .checked_sub(1)
            .and_then(|i| self.domains.get(i))
            .ok_or_else(|| {
                Error::Usage(format!(
                    "no domain {id} in a stream of {}",
                    self.domains.len()
                ))
            })?;
        let n = match split {
            Split::Train => self.domain_counts.train_per_class,
            Split::Test => self.domain_counts.test_per_class,
        };
        generate_domain(
            &self.spec(n)?,
            &entry.transform,
            id as u32,
            split,
            entry.seed,
        )
    }

    pub fn materialize(&self) -> Result<Stream> {
        self.validate()?;
        let base = DomainSplits {
            name: "base".into(),
            train: self.base_split(Split::Train)?,
            test: self.base_split(Split::Test)?,
        };
        let domains = (1..=self.domains.len())
            .map(|id| {
                Ok(DomainSplits {
                    name: self.domains[id - 1].name.clone(),
                    train: self.domain_split(id, Split::Train)?,
                    test: self.domain_split(id, Split::Test)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Stream { base, domains })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let m = Manifest::default();
        let s = serde_json::to_string_pretty(&m).unwrap();
        let back: Manifest = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(Manifest::default()).unwrap();
        v["colour"] = serde_json::json!(true);
        assert!(serde_json::from_value::<Manifest>(v).is_err());
    }

    #[test]
    fn stream_has_one_based_ids_and_all_classes() {
        let mut m = Manifest::default();
        m.domain_counts = SplitCounts {
            train_per_class: 3,
            test_per_class: 2,
        };
        m.base = m.domain_counts;
        let s = m.materialize().unwrap();
        assert_eq!(s.domains.len(), 3);
        for (i, d) in s.domains.iter().enumerate() {
            assert_eq!(d.train.domain_id as usize, i + 1);
            assert_eq!(d.test.class_counts(), vec![2; 5]);
        }
        assert!(m.domain_split(0, Split::Train).is_err());
        assert!(m.domain_split(4, Split::Train).is_err());
    }
}
