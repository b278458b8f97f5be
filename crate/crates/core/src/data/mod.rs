//! Synthetic multi-domain image data: procedural class shapes, per-domain
//! pixel transforms, the `DILD` container and the stream manifest.

mod format;
mod manifest;
pub mod shapes;
mod transform;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use manifest::{DomainEntry, DomainSplits, Manifest, SplitCounts, Stream};
pub use transform::DomainTransform;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            t => Err(Error::Corruption(format!("unknown split tag {t}"))),
        }
    }
}

/// Images in `[0, 1]`, stored row-major `N×H×W×C`, with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub domain_id: u32,
    pub split: Split,
    pub labels: Vec<usize>,
    pub images: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Checks sizes, label range and pixel range.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.pixels_per_image() {
            return Err(Error::Data(format!(
                "{} pixels for {} images of {}x{}x{}",
                self.images.len(),
                self.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {l} outside {} classes",
                self.num_classes
            )));
        }
        if self.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `transform` to every image; labels are untouched.
    pub fn transformed(&self, transform: &DomainTransform, seed: u64) -> Result<Dataset> {
        transform.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        let n = self.pixels_per_image();
        for img in out.images.chunks_mut(n) {
            transform.apply(img, self.height, self.channels, &mut rng);
        }
        Ok(out)
    }
}

/// Shape of a generated split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
}

/// Class token sequences used as synthetic class names: class `j` gets tokens
/// `(j*T + t) mod V`.
pub fn class_tokens(classes: usize, tokens: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..classes)
        .map(|j| (0..tokens).map(|t| (j * tokens + t) % vocab).collect())
        .collect()
}

fn check_spec(spec: &GeneratorSpec) -> Result<()> {
    if spec.classes < 2 || spec.classes > shapes::PROTOTYPES.len() {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {}",
            shapes::PROTOTYPES.len(),
            spec.classes
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if spec.image_size < 8 {
        return Err(Error::Config(format!(
            "image_size must be >= 8, got {}",
            spec.image_size
        )));
    }
    Ok(())
}

/// Fresh jittered prototype samples; labels cycle through the classes so every
/// class count is equal.
pub fn generate_base(spec: &GeneratorSpec, split: Split, seed: u64) -> Result<Dataset> {
    check_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(split.tag()));
    let n = spec.classes * spec.per_class;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * spec.image_size * spec.image_size);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        images.extend(shapes::sample(class, spec.image_size, &mut rng));
    }
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        channels: 1,
        num_classes: spec.classes,
        domain_id: 0,
        split,
        labels,
        images,
    })
}

/// Fresh samples from the prototypes with `transform` applied.
pub fn generate_domain(
    spec: &GeneratorSpec,
    transform: &DomainTransform,
    domain_id: u32,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    let base = generate_base(spec, split, seed)?;
    let mut out = base.transformed(transform, seed ^ 0x5eed_0000 ^ u64::from(split.tag()))?;
    out.domain_id = domain_id;
    Ok(out)
}
