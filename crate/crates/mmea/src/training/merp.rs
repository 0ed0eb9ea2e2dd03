//! Hard entity replay: a matrix with one row per entity of both KGs holding
//! its nearest non-aligned cross-KG entity and the similarity score,
//! refreshed from the fused embedding space after each training step.

use std::collections::HashMap;

use crate::error::{MmeaError, Result};
use crate::model::Side;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MerpEntry {
    /// Dense index of the nearest non-aligned entity in the other KG.
    pub neighbor: usize,
    pub score: f64,
}

/// Replay matrix over E1 ∪ E2 (stored as one block per side).
#[derive(Clone, Debug)]
pub struct MerpState {
    pub kg1: Vec<MerpEntry>,
    pub kg2: Vec<MerpEntry>,
}

impl MerpState {
    pub fn row_count(&self) -> usize {
        self.kg1.len() + self.kg2.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nearest_excluding(
    anchor: &[f64],
    candidates: &[Vec<f64>],
    excluded: Option<usize>,
) -> Option<MerpEntry> {
    let mut best: Option<MerpEntry> = None;
    for (j, cand) in candidates.iter().enumerate() {
        if Some(j) == excluded {
            continue;
        }
        let score = dot(anchor, cand);
        let better = match best {
            Some(b) => score > b.score,
            None => true,
        };
        if better {
            best = Some(MerpEntry { neighbor: j, score });
        }
    }
    best
}

/// Rebuilds the replay matrix from normalized fused embeddings, excluding
/// each entity's known aligned counterpart.
pub fn merp_refresh(
    fused1: &[Vec<f64>],
    fused2: &[Vec<f64>],
    aligned: &[(usize, usize)],
) -> Result<MerpState> {
    if fused1.is_empty() || fused2.is_empty() {
        return Err(MmeaError::Invalid(
            "replay refresh needs entities on both sides".into(),
        ));
    }
    let known_1to2: HashMap<usize, usize> = aligned.iter().copied().collect();
    let known_2to1: HashMap<usize, usize> = aligned.iter().map(|&(a, b)| (b, a)).collect();
    let kg1 = fused1
        .iter()
        .enumerate()
        .map(|(i, row)| {
            nearest_excluding(row, fused2, known_1to2.get(&i).copied()).ok_or_else(|| {
                MmeaError::Invalid("no replay candidate remains in the other KG".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let kg2 = fused2
        .iter()
        .enumerate()
        .map(|(j, row)| {
            nearest_excluding(row, fused1, known_2to1.get(&j).copied()).ok_or_else(|| {
                MmeaError::Invalid("no replay candidate remains in the other KG".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MerpState { kg1, kg2 })
}

/// A side-tagged entity reference inside a negative set.
pub type NegRef = (Side, usize);

/// The fused-objective negative set of one anchor: all other in-batch
/// entities plus, when replay is on, the anchor's stored hard negative.
#[derive(Clone, Debug)]
pub struct AnchorNegatives {
    pub anchor: NegRef,
    pub in_batch: Vec<NegRef>,
    /// None when replay is off or the stored neighbor already sits in batch.
    pub replay: Option<NegRef>,
}

impl AnchorNegatives {
    pub fn full_set(&self) -> Vec<NegRef> {
        let mut out = self.in_batch.clone();
        if let Some(r) = self.replay {
            out.push(r);
        }
        out
    }
}

/// Expands the in-batch negative sets of every anchor (both directions) with
/// the replay matrix. A replay neighbor that already appears in the batch is
/// dropped so the set stays a plain union.
pub fn merp_expand_negatives(
    batch: &[(usize, usize)],
    state: &MerpState,
) -> (Vec<AnchorNegatives>, Vec<AnchorNegatives>) {
    let dir1 = batch
        .iter()
        .enumerate()
        .map(|(i, &(e1, _))| {
            let mut in_batch = Vec::with_capacity(2 * (batch.len() - 1));
            for (j, &(o1, o2)) in batch.iter().enumerate() {
                if j != i {
                    in_batch.push((Side::Kg1, o1));
                    in_batch.push((Side::Kg2, o2));
                }
            }
            let stored = (Side::Kg2, state.kg1[e1].neighbor);
            let replay = (!in_batch.contains(&stored)).then_some(stored);
            AnchorNegatives {
                anchor: (Side::Kg1, e1),
                in_batch,
                replay,
            }
        })
        .collect();
    let dir2 = batch
        .iter()
        .enumerate()
        .map(|(i, &(_, e2))| {
            let mut in_batch = Vec::with_capacity(2 * (batch.len() - 1));
            for (j, &(o1, o2)) in batch.iter().enumerate() {
                if j != i {
                    in_batch.push((Side::Kg2, o2));
                    in_batch.push((Side::Kg1, o1));
                }
            }
            let stored = (Side::Kg1, state.kg2[e2].neighbor);
            let replay = (!in_batch.contains(&stored)).then_some(stored);
            AnchorNegatives {
                anchor: (Side::Kg2, e2),
                in_batch,
                replay,
            }
        })
        .collect();
    (dir1, dir2)
}
