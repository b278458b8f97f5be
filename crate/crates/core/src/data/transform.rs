use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A label-preserving pixel-space shift applied to every image of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainTransform {
    Identity,
    Inversion,
    AdditiveNoise {
        sigma: f32,
    },
    /// Box blur with an odd square kernel.
    Blur {
        kernel: usize,
    },
    /// Zeroes every row whose index is not a multiple of `period`.
    StripeMask {
        period: usize,
    },
    IntensityQuantize {
        levels: usize,
    },
}

impl DomainTransform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::AdditiveNoise { sigma } if !(sigma.is_finite() && sigma >= 0.0) => Err(
                Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")),
            ),
            Self::Blur { kernel } if kernel == 0 || kernel % 2 == 0 => Err(Error::Config(format!(
                "blur kernel must be odd, got {kernel}"
            ))),
            Self::StripeMask { period } if period < 2 => Err(Error::Config(format!(
                "stripe period must be >= 2, got {period}"
            ))),
            Self::IntensityQuantize { levels } if levels < 2 => Err(Error::Config(format!(
                "quantize levels must be >= 2, got {levels}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Inversion => "inversion",
            Self::AdditiveNoise { .. } => "additive_noise",
            Self::Blur { .. } => "blur",
            Self::StripeMask { .. } => "stripe_mask",
            Self::IntensityQuantize { .. } => "intensity_quantize",
        }
    }

    /// Transforms one `size×size×channels` image in place; output is clamped
    /// to `[0, 1]`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        img: &mut [f32],
        size: usize,
        channels: usize,
        rng: &mut R,
    ) {
        match *self {
            Self::Identity => {}
            Self::Inversion => img.iter_mut().for_each(|v| *v = 1.0 - *v),
            Self::AdditiveNoise { sigma } => {
                if sigma > 0.0 {
                    let n = Normal::new(0.0f32, sigma).expect("validated sigma");
                    img.iter_mut().for_each(|v| *v += n.sample(rng));
                }
            }
            Self::Blur { kernel } => {
                let r = (kernel / 2) as isize;
                let src = img.to_vec();
                let s = size as isize;
                for y in 0..s {
                    for x in 0..s {
                        for c in 0..channels {
                            let (mut acc, mut cnt) = (0.0f32, 0.0f32);
                            for yy in (y - r).max(0)..=(y + r).min(s - 1) {
                                for xx in (x - r).max(0)..=(x + r).min(s - 1) {
                                    acc += src[((yy * s + xx) as usize) * channels + c];
                                    cnt += 1.0;
                                }
                            }
                            img[((y * s + x) as usize) * channels + c] = acc / cnt;
                        }
                    }
                }
            }
            Self::StripeMask { period } => {
                let row = size * channels;
                for (y, chunk) in img.chunks_mut(row).enumerate() {
                    if y % period != 0 {
                        chunk.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            Self::IntensityQuantize { levels } => {
                let q = (levels - 1) as f32;
                img.iter_mut()
                    .for_each(|v| *v = (v.clamp(0.0, 1.0) * q).round() / q);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Vec<f32> {
        (0..16).map(|i| i as f32 / 15.0).collect()
    }

    #[test]
    fn inversion_and_quantize() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut img = ramp();
        DomainTransform::Inversion.apply(&mut img, 4, 1, &mut rng);
        assert_eq!(img[0], 1.0);
        assert_eq!(img[15], 0.0);
        let mut img = ramp();
        DomainTransform::IntensityQuantize { levels: 2 }.apply(&mut img, 4, 1, &mut rng);
        assert!(img.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn stripe_mask_keeps_period_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut img = vec![1.0f32; 16];
        DomainTransform::StripeMask { period: 2 }.apply(&mut img, 4, 1, &mut rng);
        assert_eq!(img, [[1.0; 4], [0.0; 4], [1.0; 4], [0.0; 4]].concat());
    }

    #[test]
    fn blur_preserves_constant_and_spreads_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flat = vec![0.5f32; 25];
        DomainTransform::Blur { kernel: 3 }.apply(&mut flat, 5, 1, &mut rng);
        assert!(flat.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let mut imp = vec![0.0f32; 25];
        imp[12] = 1.0;
        DomainTransform::Blur { kernel: 3 }.apply(&mut imp, 5, 1, &mut rng);
        assert!((imp[12] - 1.0 / 9.0).abs() < 1e-6);
        assert!((imp[6] - 1.0 / 9.0).abs() < 1e-6);
        assert_eq!(imp[0], 0.0);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let t = DomainTransform::AdditiveNoise { sigma: 2.0 };
        let run = |seed| {
            let mut img = ramp();
            t.apply(&mut img, 4, 1, &mut ChaCha8Rng::seed_from_u64(seed));
            img
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validation_and_serde() {
        assert!(DomainTransform::Blur { kernel: 2 }.validate().is_err());
        assert!(DomainTransform::StripeMask { period: 1 }
            .validate()
            .is_err());
        assert!(DomainTransform::AdditiveNoise { sigma: f32::NAN }
            .validate()
            .is_err());
        let t: DomainTransform =
            serde_json::from_str(r#"{"kind":"additive_noise","sigma":0.3}"#).unwrap();
        assert_eq!(t, DomainTransform::AdditiveNoise { sigma: 0.3 });
        assert!(serde_json::from_str::<DomainTransform>(r#"{"kind":"warp"}"#).is_err());
    }
}
