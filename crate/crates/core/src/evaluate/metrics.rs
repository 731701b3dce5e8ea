//! Partition-agreement scores: NMI and adjusted Rand index.

use super::hungarian::compact;
use super::{EvalError, EvalResult};

fn contingency(pred: &[usize], truth: &[usize]) -> EvalResult<(Vec<u64>, usize, usize)> {
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
    let mut w = vec![0u64; kp * kt];
    for (&a, &b) in p.iter().zip(&t) {
        w[a * kt + b] += 1;
    }
    Ok((w, kp, kt))
}

/// Mutual information normalized by sqrt(H(pred) H(truth)), natural log.
/// Identical partitions give 1; if either partition has a single block,
/// the score is 1 when they match and 0 otherwise.
pub fn normalized_mutual_information(pred: &[usize], truth: &[usize]) -> EvalResult<f64> {
    let (w, kp, kt) = contingency(pred, truth)?;
    let n = pred.len() as f64;

    let rows: Vec<f64> = (0..kp)
        .map(|i| (0..kt).map(|j| w[i * kt + j] as f64).sum::<f64>())
        .collect();
    let cols: Vec<f64> = (0..kt)
        .map(|j| (0..kp).map(|i| w[i * kt + j] as f64).sum::<f64>())
        .collect();

    let ent = |m: &[f64]| -> f64 {
        m.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let q = c / n;
                -q * q.ln()
            })
            .sum()
    };
    let hp = ent(&rows);
    let ht = ent(&cols);

    let mut mi = 0.0;
    for i in 0..kp {
        for j in 0..kt {
            let c = w[i * kt + j] as f64;
            if c > 0.0 {
                mi += (c / n) * ((c * n) / (rows[i] * cols[j])).ln();
            }
        }
    }

    if hp <= 0.0 && ht <= 0.0 {
        // Both single-block: identical partitions.
        return Ok(1.0);
    }
    if hp <= 0.0 || ht <= 0.0 {
        // One side is constant, the other is not: no shared information.
        return Ok(0.0);
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

/// Chance-corrected pair-counting agreement. 1 for identical partitions,
/// ~0 for independent ones; degenerate cases where the expected index
/// equals the maximum index score 1.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> EvalResult<f64> {
    let (w, kp, kt) = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;

    let rows: Vec<f64> = (0..kp)
        .map(|i| (0..kt).map(|j| w[i * kt + j] as f64).sum::<f64>())
        .collect();
    let cols: Vec<f64> = (0..kt)
        .map(|j| (0..kp).map(|i| w[i * kt + j] as f64).sum::<f64>())
        .collect();

    let sum_ij: f64 = w.iter().map(|&c| choose2(c as f64)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);

    let expected = sum_a * sum_b / total;
    let maximum = 0.5 * (sum_a + sum_b);
    let denom = maximum - expected;
    if denom.abs() <= 1e-12 {
        // Both partitions all-singletons or all-one-block.
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_partitions_score_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert!((normalized_mutual_information(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        assert!((adjusted_rand_index(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        // Relabeling does not matter.
        let b = vec![5, 5, 3, 3, 9, 9];
        assert!((normalized_mutual_information(&a, &b).unwrap() - 1.0).abs() <= 1e-12);
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn nmi_hand_computed_six_points() {
        // pred = [0,0,0,1,1,1], truth = [0,0,1,1,2,2]
        // counts: (0,0)=2 (0,1)=1 (1,1)=1 (1,2)=2, n=6
        // H(pred)=ln 2; H(truth)=ln 3
        // MI = 2/6 ln(2*6/(3*2)) * 2 + 1/6 ln(6/(3*2)) * 2
        //    = (2/3) ln 2
        let pred = vec![0, 0, 0, 1, 1, 1];
        let truth = vec![0, 0, 1, 1, 2, 2];
        let mi = (2.0 / 3.0) * 2f64.ln();
        let expect = mi / (2f64.ln() * 3f64.ln()).sqrt();
        let got = normalized_mutual_information(&pred, &truth).unwrap();
        assert!((got - expect).abs() <= 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn ari_hand_computed_six_points() {
        // Same labels as the NMI case.
        // sum_ij C(n_ij,2) = C(2,2)+C(2,2) = 2
        // sum_a = 2*C(3,2) = 6 ; sum_b = 3*C(2,2) = 3 ; C(6,2) = 15
        // expected = 6*3/15 = 1.2 ; max = 4.5
        // ARI = (2-1.2)/(4.5-1.2) = 0.8/3.3
        let pred = vec![0, 0, 0, 1, 1, 1];
        let truth = vec![0, 0, 1, 1, 2, 2];
        let expect = 0.8 / 3.3;
        let got = adjusted_rand_index(&pred, &truth).unwrap();
        assert!((got - expect).abs() <= 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn single_block_conventions() {
        let flat = vec![0usize; 6];
        let split = vec![0, 0, 0, 1, 1, 1];
        assert!((normalized_mutual_information(&flat, &flat).unwrap() - 1.0).abs() <= 1e-12);
        assert!((normalized_mutual_information(&flat, &split).unwrap()).abs() <= 1e-12);
        assert!((adjusted_rand_index(&flat, &flat).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn both_metrics_are_symmetric() {
        let a = vec![0, 1, 1, 2, 2, 2, 0, 1];
        let b = vec![1, 1, 0, 0, 2, 2, 2, 1];
        let n1 = normalized_mutual_information(&a, &b).unwrap();
        let n2 = normalized_mutual_information(&b, &a).unwrap();
        assert!((n1 - n2).abs() <= 1e-12);
        let r1 = adjusted_rand_index(&a, &b).unwrap();
        let r2 = adjusted_rand_index(&b, &a).unwrap();
        assert!((r1 - r2).abs() <= 1e-12);
    }

    #[test]
    fn crossed_partitions_score_below_chance_ari() {
        // Perfectly crossed 2x2 design: contingency [[2,2],[2,2]].
        // sum_ij = 4, expected = 12*12/28 = 36/7, max = 12
        // ARI = (4 - 36/7)/(12 - 36/7) = -8/48 = -1/6
        let pred = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let truth = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let got = adjusted_rand_index(&pred, &truth).unwrap();
        assert!((got + 1.0 / 6.0).abs() <= 1e-12, "got {got}");
    }
}
