//! Stochastic augmentations that leave the instance identity (and hence
//! its label) unchanged: per-row scale jitter, additive Gaussian noise,
//! feature dropout, and optional rectangular occlusion for image rows.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, DataResult, MultiViewBatch};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Blanks a random `height x width` rectangle out of each row, treated as
/// an `img_rows x img_cols` image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Occlusion {
    pub img_rows: usize,
    pub img_cols: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub gaussian_noise_std: f64,
    /// Probability each feature is zeroed independently; must stay < 1.
    pub feature_dropout_prob: f64,
    /// Whole-row multiplier drawn uniformly from [lo, hi], 0 < lo <= 1 <= hi.
    pub scale_jitter: (f64, f64),
    pub occlude: Option<Occlusion>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            gaussian_noise_std: 0.1,
            feature_dropout_prob: 0.1,
            scale_jitter: (0.9, 1.1),
            occlude: None,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that returns the input untouched.
    pub fn identity() -> Self {
        Self {
            gaussian_noise_std: 0.0,
            feature_dropout_prob: 0.0,
            scale_jitter: (1.0, 1.0),
            occlude: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gaussian_noise_std == 0.0
            && self.feature_dropout_prob == 0.0
            && self.scale_jitter == (1.0, 1.0)
            && self.occlude.is_none()
    }

    pub fn validate(&self) -> DataResult<()> {
        if !(self.gaussian_noise_std >= 0.0 && self.gaussian_noise_std.is_finite()) {
            return Err(DataError::Invalid(format!(
                "gaussian_noise_std must be finite and >= 0, got {}",
                self.gaussian_noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_prob) {
            return Err(DataError::Invalid(format!(
                "feature_dropout_prob must be in [0,1), got {}",
                self.feature_dropout_prob
            )));
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(DataError::Invalid(format!(
                "scale_jitter must satisfy 0 < lo <= 1 <= hi, got ({lo}, {hi})"
            )));
        }
        if let Some(o) = &self.occlude {
            if o.height == 0 || o.width == 0 || o.height > o.img_rows || o.width > o.img_cols {
                return Err(DataError::Invalid(format!(
                    "occlusion {}x{} does not fit a {}x{} image",
                    o.height, o.width, o.img_rows, o.img_cols
                )));
            }
        }
        Ok(())
    }
}

fn augment_one<F: Scalar, R: Rng>(
    x: &Tensor<F>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> DataResult<Tensor<F>> {
    let (n, d) = (x.rows(), x.cols());
    if let Some(o) = &policy.occlude {
        if o.img_rows * o.img_cols != d {
            return Err(DataError::DimMismatch(format!(
                "occlusion expects {}x{}={} features, view has {d}",
                o.img_rows,
                o.img_cols,
                o.img_rows * o.img_cols
            )));
        }
    }
    let mut out = vec![0.0f64; n * d];
    let (lo, hi) = policy.scale_jitter;
    for i in 0..n {
        let src = x.row(i);
        let dst = &mut out[i * d..(i + 1) * d];
        let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        for (o, &s) in dst.iter_mut().zip(src) {
            *o = s.as_f64() * scale;
        }
        if policy.gaussian_noise_std > 0.0 {
            for o in dst.iter_mut() {
                *o += rng.sample::<f64, _>(StandardNormal) * policy.gaussian_noise_std;
            }
        }
        if policy.feature_dropout_prob > 0.0 {
            for o in dst.iter_mut() {
                if rng.gen::<f64>() < policy.feature_dropout_prob {
                    *o = 0.0;
                }
            }
        }
        if let Some(oc) = &policy.occlude {
            let r0 = rng.gen_range(0..=oc.img_rows - oc.height);
            let c0 = rng.gen_range(0..=oc.img_cols - oc.width);
            for r in r0..r0 + oc.height {
                for c in c0..c0 + oc.width {
                    dst[r * oc.img_cols + c] = 0.0;
                }
            }
        }
    }
    Ok(Tensor::from_f64_slice(&[n, d], &out).expect("augment shape"))
}

/// Draws two independently augmented copies of every view; row alignment
/// is untouched, so labels carry over unchanged.
pub fn augment<F: Scalar, R: Rng>(
    batch: &MultiViewBatch<F>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> DataResult<Vec<[Tensor<F>; 2]>> {
    policy.validate()?;
    batch
        .views
        .iter()
        .map(|x| {
            let a = augment_one(x, policy, rng)?;
            let b = augment_one(x, policy, rng)?;
            Ok([a, b])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn batch(n: usize, d: usize, seed: u64) -> MultiViewBatch<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        MultiViewBatch {
            views: vec![
                Tensor::randn(&[n, d], 1.0, &mut rng),
                Tensor::randn(&[n, d], 1.0, &mut rng),
            ],
            labels: None,
            gt_consistent: None,
            gt_specific: None,
            meta: None,
        }
    }

    #[test]
    fn identity_policy_returns_input_exactly() {
        let b = batch(6, 5, 0);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pairs = augment(&b, &AugmentationPolicy::identity(), &mut rng).unwrap();
        for (v, [a, c]) in b.views.iter().zip(&pairs) {
            assert_eq!(v.data(), a.data());
            assert_eq!(v.data(), c.data());
        }
    }

    #[test]
    fn full_dropout_rejected() {
        let p = AugmentationPolicy {
            feature_dropout_prob: 1.0,
            ..AugmentationPolicy::identity()
        };
        assert!(p.validate().is_err());
        let bad_scale = AugmentationPolicy {
            scale_jitter: (1.2, 1.5),
            ..AugmentationPolicy::identity()
        };
        assert!(bad_scale.validate().is_err());
    }

    #[test]
    fn noise_moment_matches_variance() {
        // E[(aug - x)^2] = noise_std^2 with every other knob off.
        let b = batch(100, 100, 2);
        let p = AugmentationPolicy {
            gaussian_noise_std: 0.1,
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pairs = augment(&b, &p, &mut rng).unwrap();
        let mut sq = 0.0;
        let mut count = 0usize;
        for (v, [a, _]) in b.views.iter().zip(&pairs) {
            for (&orig, &x) in v.data().iter().zip(a.data()) {
                sq += (x - orig) * (x - orig);
                count += 1;
            }
        }
        let mean_sq = sq / count as f64;
        assert!(
            (0.008..=0.012).contains(&mean_sq),
            "mean squared perturbation {mean_sq}"
        );
    }

    #[test]
    fn two_copies_differ_when_randomness_is_on() {
        let b = batch(8, 6, 4);
        let p = AugmentationPolicy {
            gaussian_noise_std: 0.05,
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pairs = augment(&b, &p, &mut rng).unwrap();
        for [a, c] in &pairs {
            assert_ne!(a.data(), c.data());
        }
    }

    #[test]
    fn rows_stay_aligned_under_augmentation() {
        // Tracer: feature 0 of row k holds k * 1e6; noise cannot move it
        // to another row's value.
        let n = 20;
        let mut data = vec![0.0f64; n * 4];
        for k in 0..n {
            data[k * 4] = k as f64 * 1e6;
        }
        let t = Tensor::new(&[n, 4], data).unwrap();
        let b = MultiViewBatch {
            views: vec![t.clone(), t],
            labels: None,
            gt_consistent: None,
            gt_specific: None,
            meta: None,
        };
        let p = AugmentationPolicy {
            gaussian_noise_std: 0.1,
            scale_jitter: (1.0, 1.0),
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let pairs = augment(&b, &p, &mut rng).unwrap();
        for [a, c] in &pairs {
            for k in 0..n {
                assert!((a.at2(k, 0) / 1e6).round() as usize == k);
                assert!((c.at2(k, 0) / 1e6).round() as usize == k);
            }
        }
    }

    #[test]
    fn occlusion_zeroes_a_rectangle() {
        let n = 5;
        let t = Tensor::<f64>::full(&[n, 16], 1.0);
        let b = MultiViewBatch {
            views: vec![t.clone(), t],
            labels: None,
            gt_consistent: None,
            gt_specific: None,
            meta: None,
        };
        let p = AugmentationPolicy {
            occlude: Some(Occlusion {
                img_rows: 4,
                img_cols: 4,
                height: 2,
                width: 2,
            }),
            ..AugmentationPolicy::identity()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let pairs = augment(&b, &p, &mut rng).unwrap();
        for [a, _] in &pairs {
            for k in 0..n {
                let zeros = a.row(k).iter().filter(|&&v| v == 0.0).count();
                assert_eq!(zeros, 4, "exactly one 2x2 rectangle blanked");
            }
        }
        // Occlusion dims must match the feature count.
        let bad = AugmentationPolicy {
            occlude: Some(Occlusion {
                img_rows: 3,
                img_cols: 3,
                height: 1,
                width: 1,
            }),
            ..AugmentationPolicy::identity()
        };
        assert!(augment(&b, &bad, &mut rng).is_err());
    }
}
