//! Raw feature construction: bag-of-words relation/attribute vectors and
//! normal-distribution imputation of missing visual features.

use std::collections::HashMap;

use tensor_core::rng::Prng;

use crate::error::{MmeaError, Result};
use crate::kg::{Mmkg, Modality, ModalityFeatureTable};

/// Bag-of-words table plus the type labels that were not in the vocabulary.
pub struct BowFeatures {
    pub table: ModalityFeatureTable,
    pub dropped_types: Vec<String>,
}

/// Builds a shared type vocabulary over several KGs, ordered by descending
/// total frequency (ties by label) and optionally capped. A shared vocab is
/// what makes bag-of-words vectors comparable across the two KGs.
pub fn bow_vocab(kgs: &[&Mmkg], modality: Modality, cap: Option<usize>) -> Result<Vec<String>> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for kg in kgs {
        match modality {
            Modality::Relation => {
                for &(_, r, _) in &kg.rel_triples {
                    *counts.entry(kg.relations[r].clone()).or_insert(0) += 1;
                }
            }
            Modality::Attribute => {
                for &(_, a) in &kg.attr_assignments {
                    *counts.entry(kg.attributes[a].clone()).or_insert(0) += 1;
                }
            }
            other => {
                return Err(MmeaError::Invalid(format!(
                    "bag-of-words vocabulary is defined for relation/attribute, not {other}"
                )))
            }
        }
    }
    let mut vocab: Vec<(String, usize)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(cap) = cap {
        vocab.truncate(cap);
    }
    Ok(vocab.into_iter().map(|(label, _)| label).collect())
}

/// Bag-of-words features over an ordered type vocabulary.
///
/// For relations, entry k of entity i counts triples incident to i (as head
/// or tail) whose relation is `vocab[k]`; self-loops count once. Attributes
/// count assignments. Types missing from the vocab are dropped and reported.
pub fn build_bow_features(kg: &Mmkg, modality: Modality, vocab: &[String]) -> Result<BowFeatures> {
    if vocab.is_empty() {
        return Err(MmeaError::Invalid("bag-of-words vocabulary is empty".into()));
    }
    let slot: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(k, label)| (label.as_str(), k))
        .collect();
    let n = kg.entity_count();
    let mut vectors = vec![vec![0.0; vocab.len()]; n];
    let mut dropped: Vec<String> = Vec::new();
    let drop = |label: &str, dropped: &mut Vec<String>| {
        if !dropped.iter().any(|d| d == label) {
            dropped.push(label.to_string());
        }
    };
    match modality {
        Modality::Relation => {
            for &(h, r, t) in &kg.rel_triples {
                let label = kg.relations[r].as_str();
                match slot.get(label) {
                    Some(&k) => {
                        vectors[h][k] += 1.0;
                        if t != h {
                            vectors[t][k] += 1.0;
                        }
                    }
                    None => drop(label, &mut dropped),
                }
            }
        }
        Modality::Attribute => {
            for &(e, a) in &kg.attr_assignments {
                let label = kg.attributes[a].as_str();
                match slot.get(label) {
                    Some(&k) => vectors[e][k] += 1.0,
                    None => drop(label, &mut dropped),
                }
            }
        }
        other => {
            return Err(MmeaError::Invalid(format!(
                "bag-of-words features are defined for relation/attribute, not {other}"
            )))
        }
    }
    Ok(BowFeatures {
        table: ModalityFeatureTable {
            modality,
            dim: vocab.len(),
            vectors,
            available: vec![true; n],
        },
        dropped_types: dropped,
    })
}

/// Fills masked-out rows with coordinate-wise draws from
/// `Normal(mean_k, sd_k)` of the available rows. Returns the new table and
/// the indices that were imputed.
#[allow(clippy::needless_range_loop)]
pub fn impute_missing_visual(
    table: &ModalityFeatureTable,
    seed: u64,
) -> Result<(ModalityFeatureTable, Vec<usize>)> {
    let available: Vec<usize> = (0..table.vectors.len())
        .filter(|&i| table.available[i])
        .collect();
    if available.is_empty() {
        return Err(MmeaError::Invalid(
            "cannot impute: no available vectors to parameterize the distribution".into(),
        ));
    }
    let n = available.len() as f64;
    let dim = table.dim;
    let mut mean = vec![0.0; dim];
    for &i in &available {
        for k in 0..dim {
            mean[k] += table.vectors[i][k];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut sd = vec![0.0; dim];
    for &i in &available {
        for k in 0..dim {
            let d = table.vectors[i][k] - mean[k];
            sd[k] += d * d;
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / n).sqrt();
    }

    let mut rng = Prng::new(seed);
    let mut out = table.clone();
    let mut imputed = Vec::new();
    for i in 0..out.vectors.len() {
        if out.available[i] {
            continue;
        }
        let row: Vec<f64> = (0..dim).map(|k| rng.normal_with(mean[k], sd[k])).collect();
        out.vectors[i] = row;
        out.available[i] = true;
        imputed.push(i);
    }
    Ok((out, imputed))
}
