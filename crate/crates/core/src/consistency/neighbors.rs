//! Exact nearest-neighbor mining in embedding space.

use super::{ConsResult, ConsistencyError};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

/// K nearest neighbors per row under cosine distance, brute force. Ties
/// break on the lower index; a row never lists itself.
pub fn mine_neighbors<F: Scalar>(embeddings: &Tensor<F>, k: usize) -> ConsResult<Vec<Vec<usize>>> {
    let n = embeddings.rows();
    if k == 0 {
        return Err(ConsistencyError::Invalid("k must be positive".into()));
    }
    if k >= n {
        return Err(ConsistencyError::Invalid(format!(
            "k = {k} needs more than k instances, got {n}"
        )));
    }
    let d = embeddings.cols();
    let x: Vec<f64> = embeddings.data().iter().map(|v| v.as_f64()).collect();
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            x[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ri = &x[i * d..(i + 1) * d];
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dot: f64 = ri.iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                (1.0 - dot / (norms[i] * norms[j]), j)
            })
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn coincident_points_name_each_other() {
        let t = Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let nn = mine_neighbors(&t, 1).unwrap();
        assert_eq!(nn[0], vec![1]);
        assert_eq!(nn[1], vec![0]);
        // The odd one out picks the lower-index of the tied pair.
        assert_eq!(nn[2], vec![0]);
    }

    #[test]
    fn boundary_k_rejected() {
        let t = Tensor::<f64>::full(&[3, 2], 1.0);
        assert!(mine_neighbors(&t, 0).is_err());
        assert!(mine_neighbors(&t, 3).is_err());
        assert!(mine_neighbors(&t, 2).is_ok());
    }

    /// Full-argsort oracle with the same (distance, index) ordering.
    fn brute(emb: &Tensor<f64>, k: usize) -> Vec<Vec<usize>> {
        let n = emb.rows();
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            1.0 - dot / (na * nb)
        };
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (cos(emb.row(i), emb.row(j)), j))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.truncate(k);
                all.into_iter().map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn matches_the_argsort_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let t = Tensor::<f64>::randn(&[100, 8], 1.0, &mut rng);
        for k in [1, 5, 12] {
            assert_eq!(mine_neighbors(&t, k).unwrap(), brute(&t, k));
        }
    }

    #[test]
    fn zero_rows_do_not_produce_nan_ordering() {
        let t = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let nn = mine_neighbors(&t, 2).unwrap();
        assert_eq!(nn[0].len(), 2);
    }
}
