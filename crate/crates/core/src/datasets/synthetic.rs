//! Synthetic multi-view generator with known shared and view-specific
//! factors, so disentanglement can be measured against ground truth.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, DataResult, DatasetMeta, MultiViewBatch};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// Spread of instances around their class mean in shared-factor space.
const SHARED_JITTER_STD: f64 = 0.25;
/// Minimum pairwise class-mean distance, regardless of observation noise.
const BASE_SEPARATION: f64 = 4.0;
/// Target standard deviation of hidden pre-activations in the frozen map;
/// keeps tanh out of saturation so factors stay linearly recoverable.
const PREACT_STD: f64 = 0.6;
/// Components in each view's specific-factor mixture.
const MIX_COMPONENTS: usize = 3;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub views: usize,
    /// Shared (class-carrying) factor dim.
    pub d_s: usize,
    /// View-specific factor dim.
    pub d_p: usize,
    /// Observed dim per view.
    pub d_v: usize,
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Magnitude of a per-class offset added to specific factors. Zero
    /// keeps specifics statistically independent of the class.
    pub class_coupling: f64,
    /// Scales the specific-factor mixture (means and spread) relative to
    /// the shared structure.
    pub specific_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            views: 2,
            d_s: 4,
            d_p: 3,
            d_v: 20,
            n: 2000,
            noise_std: 0.05,
            seed: 0,
            class_coupling: 0.0,
            specific_spread: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> DataResult<()> {
        if self.classes < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.n < self.classes {
            return Err(DataError::Invalid(format!(
                "need at least one instance per class: n={} < classes={}",
                self.n, self.classes
            )));
        }
        if self.views < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 views, got {}",
                self.views
            )));
        }
        if self.d_s == 0 || self.d_p == 0 || self.d_v == 0 {
            return Err(DataError::Invalid("factor dims must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Invalid(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if !(self.class_coupling >= 0.0 && self.class_coupling.is_finite()) {
            return Err(DataError::Invalid(format!(
                "class_coupling must be finite and >= 0, got {}",
                self.class_coupling
            )));
        }
        if !(self.specific_spread > 0.0 && self.specific_spread.is_finite()) {
            return Err(DataError::Invalid(format!(
                "specific_spread must be finite and > 0, got {}",
                self.specific_spread
            )));
        }
        Ok(())
    }
}

fn normal_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect()
}

/// Generates the full dataset described by `spec`. Deterministic per seed
/// and identical across scalar precisions (all math runs in f64).
pub fn gen_synthetic<F: Scalar>(spec: &SyntheticSpec) -> DataResult<MultiViewBatch<F>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (c, v, d_s, d_p, d_v, n) = (
        spec.classes,
        spec.views,
        spec.d_s,
        spec.d_p,
        spec.d_v,
        spec.n,
    );

    // Class means, rescaled so the closest pair sits at least
    // max(6 * noise_std, BASE_SEPARATION) apart.
    let mut means = normal_mat(&mut rng, c, d_s, 1.0);
    let mut min_d2 = f64::INFINITY;
    for a in 0..c {
        for b in (a + 1)..c {
            let d2: f64 = (0..d_s)
                .map(|j| {
                    let diff = means[a * d_s + j] - means[b * d_s + j];
                    diff * diff
                })
                .sum();
            min_d2 = min_d2.min(d2);
        }
    }
    let target = (6.0 * spec.noise_std).max(BASE_SEPARATION);
    let min_d = min_d2.sqrt();
    if min_d < target {
        // min_d == 0 has probability zero under continuous draws.
        let scale = target / min_d.max(1e-9);
        for m in &mut means {
            *m *= scale;
        }
    }

    // Balanced labels, shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    // Shared factors: class mean + jitter.
    let mut s = vec![0.0f64; n * d_s];
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d_s {
            s[i * d_s + j] =
                means[y * d_s + j] + rng.sample::<f64, _>(StandardNormal) * SHARED_JITTER_STD;
        }
    }

    let mut views = Vec::with_capacity(v);
    let mut gt_specific = Vec::with_capacity(v);
    for _view in 0..v {
        // Per-view specific-factor mixture.
        let mix_means = normal_mat(&mut rng, MIX_COMPONENTS, d_p, 1.5 * spec.specific_spread);
        let comp_std = 0.5 * spec.specific_spread;
        // Unit-norm per-class offsets; only felt when class_coupling > 0,
        // drawn unconditionally so the stream layout is stable.
        let mut class_offsets = normal_mat(&mut rng, c, d_p, 1.0);
        for row in class_offsets.chunks_mut(d_p) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row {
                *x /= norm;
            }
        }

        let mut p = vec![0.0f64; n * d_p];
        for (i, &y) in labels.iter().enumerate() {
            let k = rng.gen_range(0..MIX_COMPONENTS);
            for j in 0..d_p {
                p[i * d_p + j] = mix_means[k * d_p + j]
                    + rng.sample::<f64, _>(StandardNormal) * comp_std
                    + spec.class_coupling * class_offsets[y * d_p + j];
            }
        }

        // Frozen one-hidden-layer map z = [s; p] -> x, calibrated so
        // pre-activations have zero mean / PREACT_STD std and observed
        // columns have unit std.
        let d_z = d_s + d_p;
        let hidden = (2 * d_z).max(8);
        let mut z = vec![0.0f64; n * d_z];
        for i in 0..n {
            z[i * d_z..i * d_z + d_s].copy_from_slice(&s[i * d_s..(i + 1) * d_s]);
            z[i * d_z + d_s..(i + 1) * d_z].copy_from_slice(&p[i * d_p..(i + 1) * d_p]);
        }

        let mut w1 = normal_mat(&mut rng, d_z, hidden, 1.0);
        let mut b1 = vec![0.0f64; hidden];
        let mut preact = vec![0.0f64; n * hidden];
        mat_mul(&z, &w1, &mut preact, n, d_z, hidden);
        for h in 0..hidden {
            let (mean, std) = col_stats(&preact, n, hidden, h);
            let g = PREACT_STD / std.max(1e-9);
            for r in 0..d_z {
                w1[r * hidden + h] *= g;
            }
            b1[h] = -mean * g;
        }
        preact.iter_mut().for_each(|x| *x = 0.0);
        mat_mul(&z, &w1, &mut preact, n, d_z, hidden);
        let mut hid = vec![0.0f64; n * hidden];
        for i in 0..n {
            for h in 0..hidden {
                hid[i * hidden + h] = (preact[i * hidden + h] + b1[h]).tanh();
            }
        }

        let mut w2 = normal_mat(&mut rng, hidden, d_v, 1.0);
        let mut x = vec![0.0f64; n * d_v];
        mat_mul(&hid, &w2, &mut x, n, hidden, d_v);
        for j in 0..d_v {
            let (_, std) = col_stats(&x, n, d_v, j);
            let g = 1.0 / std.max(1e-9);
            for r in 0..hidden {
                w2[r * d_v + j] *= g;
            }
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        mat_mul(&hid, &w2, &mut x, n, hidden, d_v);

        for xv in x.iter_mut() {
            *xv += rng.sample::<f64, _>(StandardNormal) * spec.noise_std;
        }

        views.push(Tensor::from_f64_slice(&[n, d_v], &x).expect("view shape"));
        gt_specific.push(Tensor::from_f64_slice(&[n, d_p], &p).expect("gt shape"));
    }

    let batch = MultiViewBatch {
        views,
        labels: Some(labels),
        gt_consistent: Some(Tensor::from_f64_slice(&[n, d_s], &s).expect("gt shape")),
        gt_specific: Some(gt_specific),
        meta: Some(DatasetMeta {
            kind: "synthetic".into(),
            version: 1,
            n,
            views: v,
            classes: c,
            dims: vec![d_v; v],
            seed: spec.seed,
        }),
    };
    batch.validate()?;
    Ok(batch)
}

fn mat_mul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn col_stats(m: &[f64], rows: usize, cols: usize, j: usize) -> (f64, f64) {
    let mut mean = 0.0;
    for i in 0..rows {
        mean += m[i * cols + j];
    }
    mean /= rows as f64;
    let mut var = 0.0;
    for i in 0..rows {
        let d = m[i * cols + j] - mean;
        var += d * d;
    }
    (mean, (var / rows as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{hungarian_acc, kmeans, linear_regression_r2, KMeansConfig};

    #[test]
    fn kmeans_on_raw_shared_factors_is_perfect() {
        let spec = SyntheticSpec::default(); // classes=4, n=2000, noise 0.05
        let batch = gen_synthetic::<f64>(&spec).unwrap();
        let s = batch.gt_consistent.as_ref().unwrap();
        let labels = batch.labels.as_ref().unwrap();
        let r = kmeans(s, spec.classes, &KMeansConfig::default(), 0).unwrap();
        let acc = hungarian_acc(&r.assignments, labels).unwrap();
        assert!(acc >= 0.999, "acc {acc}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            n: 300,
            ..Default::default()
        };
        let a = gen_synthetic::<f64>(&spec).unwrap();
        let b = gen_synthetic::<f64>(&spec).unwrap();
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.data(), vb.data());
        }
        assert_eq!(a.labels, b.labels);
        assert_eq!(
            a.gt_consistent.as_ref().unwrap().data(),
            b.gt_consistent.as_ref().unwrap().data()
        );
    }

    #[test]
    fn observed_views_linearly_predict_specific_factors() {
        let batch = gen_synthetic::<f64>(&SyntheticSpec::default()).unwrap();
        for (x, p) in batch.views.iter().zip(batch.gt_specific.as_ref().unwrap()) {
            let r2 = linear_regression_r2(x, p, 0.7, 1e-4, 0).unwrap();
            assert!(r2 >= 0.5, "r2 {r2}");
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let one_class = SyntheticSpec {
            classes: 1,
            ..Default::default()
        };
        assert!(gen_synthetic::<f64>(&one_class).is_err());
        let too_few = SyntheticSpec {
            classes: 10,
            n: 5,
            ..Default::default()
        };
        assert!(gen_synthetic::<f64>(&too_few).is_err());
        let one_view = SyntheticSpec {
            views: 1,
            ..Default::default()
        };
        assert!(gen_synthetic::<f64>(&one_view).is_err());
    }

    #[test]
    fn class_balance_within_ten_percent() {
        let spec = SyntheticSpec {
            classes: 3,
            n: 1000, // not divisible by 3
            ..Default::default()
        };
        let batch = gen_synthetic::<f64>(&spec).unwrap();
        let labels = batch.labels.unwrap();
        let per = 1000.0 / 3.0;
        for cls in 0..3 {
            let count = labels.iter().filter(|&&l| l == cls).count() as f64;
            assert!((count - per).abs() <= 0.1 * per, "class {cls}: {count}");
        }
    }

    #[test]
    fn class_mean_separation_scales_with_noise() {
        // Huge noise forces the 6-sigma separation rule to dominate.
        let spec = SyntheticSpec {
            noise_std: 5.0,
            n: 400,
            ..Default::default()
        };
        let batch = gen_synthetic::<f64>(&spec).unwrap();
        let s = batch.gt_consistent.unwrap();
        let labels = batch.labels.unwrap();
        let d_s = s.cols();
        // Empirical class means in shared-factor space.
        let mut sums = vec![0.0f64; spec.classes * d_s];
        let mut counts = vec![0usize; spec.classes];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for j in 0..d_s {
                sums[y * d_s + j] += s.at2(i, j);
            }
        }
        for y in 0..spec.classes {
            for j in 0..d_s {
                sums[y * d_s + j] /= counts[y] as f64;
            }
        }
        for a in 0..spec.classes {
            for b in (a + 1)..spec.classes {
                let d: f64 = (0..d_s)
                    .map(|j| (sums[a * d_s + j] - sums[b * d_s + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                // 6 * 5.0 = 30, minus sampling wiggle from the jitter.
                assert!(d >= 29.0, "classes {a},{b} separated by {d}");
            }
        }
    }

    #[test]
    fn precision_does_not_change_the_draw() {
        let spec = SyntheticSpec {
            n: 50,
            ..Default::default()
        };
        let a = gen_synthetic::<f64>(&spec).unwrap();
        let b = gen_synthetic::<f32>(&spec).unwrap();
        for (va, vb) in a.views.iter().zip(&b.views) {
            for (&x, &y) in va.data().iter().zip(vb.data()) {
                assert!((x - y as f64).abs() <= 1e-6);
            }
        }
    }
}
