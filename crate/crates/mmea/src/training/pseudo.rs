//! Unsupervised seeding: a pseudo seed dictionary built purely from the
//! cosine similarity of pre-extracted raw features (visual or surface),
//! filled greedily with the highest-similarity one-to-one pairs up to a
//! capacity.

use crate::error::{MmeaError, Result};
use crate::kg::ModalityFeatureTable;

#[derive(Clone, Debug)]
pub struct PseudoSeedDict {
    /// (kg1 entity, kg2 entity, cosine similarity), best first.
    pub pairs: Vec<(usize, usize, f64)>,
    pub capacity: usize,
    /// Set when the requested capacity exceeded what the data allows.
    pub clamped: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy one-to-one matching over raw-feature cosine similarity, capped at
/// `n_dic` pairs. Entities without the reference feature are skipped.
pub fn build_pseudo_seed(
    table1: &ModalityFeatureTable,
    table2: &ModalityFeatureTable,
    n_dic: usize,
) -> Result<PseudoSeedDict> {
    if table1.modality != table2.modality {
        return Err(MmeaError::Invalid(format!(
            "reference modality differs across sides: {} vs {}",
            table1.modality, table2.modality
        )));
    }
    if table1.dim != table2.dim {
        return Err(MmeaError::Invalid(format!(
            "reference feature dims differ: {} vs {}",
            table1.dim, table2.dim
        )));
    }
    let left: Vec<usize> = (0..table1.vectors.len())
        .filter(|&i| table1.available[i])
        .collect();
    let right: Vec<usize> = (0..table2.vectors.len())
        .filter(|&j| table2.available[j])
        .collect();
    let possible = left.len().min(right.len());
    let clamped = n_dic > possible;
    let capacity = n_dic.min(possible);

    let mut scored: Vec<(usize, usize, f64)> = Vec::with_capacity(left.len() * right.len());
    for &i in &left {
        for &j in &right {
            scored.push((i, j, cosine(&table1.vectors[i], &table2.vectors[j])));
        }
    }
    // best similarity first; index order breaks exact ties deterministically
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });

    let mut used1 = vec![false; table1.vectors.len()];
    let mut used2 = vec![false; table2.vectors.len()];
    let mut pairs = Vec::with_capacity(capacity);
    for (i, j, s) in scored {
        if pairs.len() == capacity {
            break;
        }
        if used1[i] || used2[j] {
            continue;
        }
        used1[i] = true;
        used2[j] = true;
        pairs.push((i, j, s));
    }
    Ok(PseudoSeedDict {
        pairs,
        capacity,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Modality;

    fn table(rows: Vec<Vec<f64>>) -> ModalityFeatureTable {
        let dim = rows[0].len();
        let n = rows.len();
        ModalityFeatureTable {
            modality: Modality::Visual,
            dim,
            vectors: rows,
            available: vec![true; n],
        }
    }

    #[test]
    fn identical_distinct_vectors_recover_true_pairs() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let dict = build_pseudo_seed(&table(rows.clone()), &table(rows), 2).unwrap();
        assert_eq!(dict.pairs.len(), 2);
        for &(i, j, s) in &dict.pairs {
            assert_eq!(i, j);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_capacity_gives_an_empty_dictionary() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dict = build_pseudo_seed(&table(rows.clone()), &table(rows), 0).unwrap();
        assert!(dict.pairs.is_empty());
        assert!(!dict.clamped);
    }

    #[test]
    fn matches_brute_force_greedy_on_a_random_table() {
        use tensor_core::rng::Prng;
        let mut rng = Prng::new(42);
        let rows1: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let rows2: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let dict = build_pseudo_seed(&table(rows1.clone()), &table(rows2.clone()), 2).unwrap();

        // oracle: enumerate all similarities, sort, accept greedily
        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for (i, a) in rows1.iter().enumerate() {
            for (j, b) in rows2.iter().enumerate() {
                all.push((i, j, cosine(a, b)));
            }
        }
        all.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        let mut taken = Vec::new();
        let (mut u1, mut u2) = (vec![false; 3], vec![false; 3]);
        for (i, j, s) in all {
            if taken.len() == 2 || u1[i] || u2[j] {
                continue;
            }
            u1[i] = true;
            u2[j] = true;
            taken.push((i, j, s));
        }
        assert_eq!(dict.pairs, taken);
    }

    #[test]
    fn capacity_clamps_with_a_flag() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dict = build_pseudo_seed(&table(rows.clone()), &table(rows), 10).unwrap();
        assert_eq!(dict.pairs.len(), 2);
        assert!(dict.clamped);
    }

    #[test]
    fn sides_are_mutually_exclusive() {
        let rows1 = vec![vec![1.0, 0.1], vec![1.0, 0.0]];
        let rows2 = vec![vec![1.0, 0.05]];
        let dict = build_pseudo_seed(&table(rows1), &table(rows2), 2).unwrap();
        assert_eq!(dict.pairs.len(), 1);
    }
}
