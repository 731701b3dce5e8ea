//! Cluster accuracy under the best one-to-one label matching.

use super::{EvalError, EvalResult};

/// Fraction of points whose predicted cluster maps onto their true class
/// under the contingency-maximizing assignment. Both label sets may use
/// arbitrary ids; they are compacted internally.
pub fn hungarian_acc(pred: &[usize], truth: &[usize]) -> EvalResult<f64> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Invalid("empty label vectors".into()));
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let k = kp.max(kt);

    // Contingency counts, padded square.
    let mut w = vec![0i64; k * k];
    for (&a, &b) in p.iter().zip(&t) {
        w[a * k + b] += 1;
    }
    let matched = max_assignment(&w, k);
    Ok(matched as f64 / pred.len() as f64)
}

pub(crate) fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let out = labels
        .iter()
        .map(|l| ids.binary_search(l).unwrap())
        .collect();
    (out, ids.len())
}

/// Maximum-weight perfect matching on a k-by-k count matrix via the
/// potentials form of the Hungarian algorithm (minimize negated weights).
fn max_assignment(w: &[i64], k: usize) -> i64 {
    let inf = i64::MAX / 4;
    let cost = |i: usize, j: usize| -w[i * k + j];

    // 1-indexed potentials; way[j] tracks the augmenting path.
    let mut u = vec![0i64; k + 1];
    let mut v = vec![0i64; k + 1];
    let mut p = vec![0usize; k + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; k + 1];

    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut total = 0i64;
    for j in 1..=k {
        if p[j] != 0 {
            total += w[(p[j] - 1) * k + (j - 1)];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn permuted_labels_score_one() {
        let truth = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let pred: Vec<usize> = truth.iter().map(|&t| (t + 2) % 4).collect();
        assert!((hungarian_acc(&pred, &truth).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_prediction_on_balanced_classes_scores_one_over_k() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let pred = vec![0usize; 40];
        assert!((hungarian_acc(&pred, &truth).unwrap() - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn handles_non_contiguous_label_ids() {
        let truth = vec![7, 7, 90, 90];
        let pred = vec![3, 3, 5, 5];
        assert!((hungarian_acc(&pred, &truth).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(hungarian_acc(&[0, 1], &[0]).is_err());
        assert!(hungarian_acc(&[], &[]).is_err());
    }

    /// The best matching over all permutations, brute forced.
    fn brute_acc(pred: &[usize], truth: &[usize]) -> f64 {
        let (p, kp) = compact(pred);
        let (t, kt) = compact(truth);
        let k = kp.max(kt);
        let mut w = vec![0i64; k * k];
        for (&a, &b) in p.iter().zip(&t) {
            w[a * k + b] += 1;
        }
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0i64;
        permute(&mut perm, 0, &mut |q: &[usize]| {
            let s: i64 = (0..k).map(|i| w[i * k + q[i]]).sum();
            if s > best {
                best = s;
            }
        });
        best as f64 / pred.len() as f64
    }

    fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
        if at == v.len() {
            f(v);
            return;
        }
        for i in at..v.len() {
            v.swap(at, i);
            permute(v, at + 1, f);
            v.swap(at, i);
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(2..=10);
            let k = rng.gen_range(1..=5);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let fast = hungarian_acc(&pred, &truth).unwrap();
            let slow = brute_acc(&pred, &truth);
            assert!(
                (fast - slow).abs() <= 1e-12,
                "fast={fast} slow={slow} pred={pred:?} truth={truth:?}"
            );
        }
    }
}
