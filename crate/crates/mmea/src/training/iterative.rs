//! Probation-style iterative training: mutual nearest neighbors among the
//! still-unaligned entities enter a candidate list, and a pair is promoted
//! to the training set only after staying mutually nearest for `k_s`
//! consecutive proposal rounds. A single miss resets its counter.

use std::collections::{HashMap, HashSet};

use crate::error::{MmeaError, Result};

#[derive(Clone, Debug)]
pub struct IterState {
    /// Consecutive-confirmation counters for candidate pairs.
    pub candidates: HashMap<(usize, usize), u32>,
    /// Promotion threshold in proposal rounds.
    pub k_s: u32,
    pub rounds: usize,
}

impl IterState {
    pub fn new(k_s: u32) -> IterState {
        IterState {
            candidates: HashMap::new(),
            k_s,
            rounds: 0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest neighbor of `anchor` among `pool` indices into `rows`.
fn nearest(anchor: &[f64], rows: &[Vec<f64>], pool: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in pool {
        let s = dot(anchor, &rows[j]);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// One proposal round. Entities already on a seed pair never appear; pairs
/// reaching `k_s` consecutive rounds are returned as promotions (sorted for
/// determinism) and leave the candidate list.
pub fn iterative_propose(
    fused1: &[Vec<f64>],
    fused2: &[Vec<f64>],
    aligned: &[(usize, usize)],
    state: &mut IterState,
) -> Result<Vec<(usize, usize)>> {
    if fused1.is_empty() || fused2.is_empty() {
        return Err(MmeaError::Invalid("proposals need entities on both sides".into()));
    }
    let used1: HashSet<usize> = aligned.iter().map(|&(a, _)| a).collect();
    let used2: HashSet<usize> = aligned.iter().map(|&(_, b)| b).collect();
    let pool1: Vec<usize> = (0..fused1.len()).filter(|i| !used1.contains(i)).collect();
    let pool2: Vec<usize> = (0..fused2.len()).filter(|j| !used2.contains(j)).collect();
    state.rounds += 1;

    let mut mutual: Vec<(usize, usize)> = Vec::new();
    if !pool1.is_empty() && !pool2.is_empty() {
        // nearest from each side; a pair is mutual when both choices agree
        let nn1: HashMap<usize, usize> = pool1
            .iter()
            .filter_map(|&i| nearest(&fused1[i], fused2, &pool2).map(|j| (i, j)))
            .collect();
        for (&i, &j) in nn1.iter() {
            if nearest(&fused2[j], fused1, &pool1) == Some(i) {
                mutual.push((i, j));
            }
        }
    }
    mutual.sort_unstable();

    let mut next: HashMap<(usize, usize), u32> = HashMap::new();
    let mut promoted = Vec::new();
    for pair in mutual {
        let count = state.candidates.get(&pair).copied().unwrap_or(0) + 1;
        if count >= state.k_s {
            promoted.push(pair);
        } else {
            next.insert(pair, count);
        }
    }
    // pairs that missed this round fall out entirely (their counter resets)
    state.candidates = next;
    promoted.sort_unstable();
    Ok(promoted)
}
