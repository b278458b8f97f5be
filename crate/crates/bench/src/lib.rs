//! Shared fixtures for the kernel benchmarks.

use cp_prompt::data::{class_tokens, generate_domain, GeneratorSpec};
use cp_prompt::{Backbone, BackboneConfig, Dataset, DomainTransform, Split};

/// Untrained default-size backbone, frozen, plus a small noisy domain and
/// its class token sequences.
pub fn fixture(per_class: usize) -> (Backbone, Dataset, Vec<Vec<usize>>) {
    let cfg = BackboneConfig::default();
    let mut bb = Backbone::init(cfg.clone(), 11).expect("default config is valid");
    bb.freeze();
    let spec = GeneratorSpec {
        classes: 5,
        per_class,
        image_size: cfg.image_size,
    };
    let data = generate_domain(
        &spec,
        &DomainTransform::AdditiveNoise { sigma: 0.3 },
        1,
        Split::Train,
        3,
    )
    .expect("valid spec");
    let labels = class_tokens(5, cfg.label_tokens, cfg.vocab);
    (bb, data, labels)
}
