//! Ranking-based alignment evaluation: cosine ranking of fused embeddings,
//! Hits@N, MRR, and MR, reported per direction and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{MmeaError, Result};
use crate::kg::Modality;
use crate::model::{corpus_embeddings, KgData, ModelSpec, ParameterStore, Side};

/// Which entities compete as candidates during ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePool {
    /// Target entities of the test pairs (the usual convention).
    #[default]
    TestOnly,
    /// Every entity of the target KG.
    All,
}

/// 1-based ranks of the true counterparts, one list per direction.
#[derive(Clone, Debug)]
pub struct RankResult {
    /// KG1 → KG2 queries.
    pub forward: Vec<usize>,
    /// KG2 → KG1 queries.
    pub backward: Vec<usize>,
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

/// Rank of the true candidate among the pool: one plus the number of
/// strictly closer candidates, with exact similarity ties broken by
/// ascending entity id.
fn rank_of(
    query: &[f64],
    truth: usize,
    pool: &[usize],
    embeddings: &[Vec<f64>],
    ids: &[i64],
) -> Result<usize> {
    if truth >= embeddings.len() {
        return Err(MmeaError::Invalid(format!(
            "test pair references entity {truth} outside the embedding table"
        )));
    }
    let s_true = cosine(query, &embeddings[truth]);
    let id_true = ids[truth];
    let mut rank = 1usize;
    for &c in pool {
        if c == truth {
            continue;
        }
        let s = cosine(query, &embeddings[c]);
        if s > s_true || (s == s_true && ids[c] < id_true) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Ranks every test pair in both directions over the configured candidate
/// pool. Embedding tables must cover all candidate entities.
pub fn rank_alignments(
    fused1: &[Vec<f64>],
    fused2: &[Vec<f64>],
    test_pairs: &[(usize, usize)],
    ids1: &[i64],
    ids2: &[i64],
    pool: CandidatePool,
) -> Result<RankResult> {
    if test_pairs.is_empty() {
        return Err(MmeaError::Invalid("no test pairs to rank".into()));
    }
    let pool2: Vec<usize> = match pool {
        CandidatePool::TestOnly => test_pairs.iter().map(|&(_, b)| b).collect(),
        CandidatePool::All => (0..fused2.len()).collect(),
    };
    let pool1: Vec<usize> = match pool {
        CandidatePool::TestOnly => test_pairs.iter().map(|&(a, _)| a).collect(),
        CandidatePool::All => (0..fused1.len()).collect(),
    };
    let mut forward = Vec::with_capacity(test_pairs.len());
    let mut backward = Vec::with_capacity(test_pairs.len());
    for &(a, b) in test_pairs {
        if a >= fused1.len() {
            return Err(MmeaError::Invalid(format!(
                "test pair references entity {a} outside the embedding table"
            )));
        }
        forward.push(rank_of(&fused1[a], b, &pool2, fused2, ids2)?);
        backward.push(rank_of(&fused2[b], a, &pool1, fused1, ids1)?);
    }
    Ok(RankResult { forward, backward })
}

/// Fraction of ranks at or below `n`.
pub fn hits_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MmeaError::Invalid("empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MmeaError::Invalid("empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Mean rank.
pub fn mr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MmeaError::Invalid("empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Metrics for one direction.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DirectionMetrics {
    pub hits1: f64,
    pub hits10: f64,
    pub extra_hits: Vec<(usize, f64)>,
    pub mrr: f64,
    pub mr: f64,
    pub queries: usize,
}

fn direction_metrics(ranks: &[usize], extra_n: &[usize]) -> Result<DirectionMetrics> {
    Ok(DirectionMetrics {
        hits1: hits_at_n(ranks, 1)?,
        hits10: hits_at_n(ranks, 10)?,
        extra_hits: extra_n
            .iter()
            .map(|&n| hits_at_n(ranks, n).map(|h| (n, h)))
            .collect::<Result<_>>()?,
        mrr: mrr(ranks)?,
        mr: mr(ranks)?,
        queries: ranks.len(),
    })
}

/// Per-direction and averaged ranking metrics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub forward: DirectionMetrics,
    pub backward: DirectionMetrics,
    pub average: DirectionMetrics,
}

impl MetricsReport {
    pub fn from_ranks(result: &RankResult, extra_n: &[usize]) -> Result<MetricsReport> {
        let forward = direction_metrics(&result.forward, extra_n)?;
        let backward = direction_metrics(&result.backward, extra_n)?;
        let average = DirectionMetrics {
            hits1: (forward.hits1 + backward.hits1) / 2.0,
            hits10: (forward.hits10 + backward.hits10) / 2.0,
            extra_hits: forward
                .extra_hits
                .iter()
                .zip(&backward.extra_hits)
                .map(|(&(n, a), &(_, b))| (n, (a + b) / 2.0))
                .collect(),
            mrr: (forward.mrr + backward.mrr) / 2.0,
            mr: (forward.mr + backward.mr) / 2.0,
            queries: forward.queries + backward.queries,
        };
        Ok(MetricsReport {
            forward,
            backward,
            average,
        })
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("direction  hits@1   hits@10  mrr      mr\n");
        for (tag, m) in [
            ("kg1->kg2", &self.forward),
            ("kg2->kg1", &self.backward),
            ("average ", &self.average),
        ] {
            out.push_str(&format!(
                "{tag}   {:<8.4} {:<8.4} {:<8.4} {:.2}\n",
                m.hits1, m.hits10, m.mrr, m.mr
            ));
        }
        out
    }
}

/// Embeds both KGs with the current parameters and evaluates the test pairs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    spec: &ModelSpec,
    store: &ParameterStore,
    kg1: &KgData,
    kg2: &KgData,
    test_pairs: &[(usize, usize)],
    ids1: &[i64],
    ids2: &[i64],
    pool: CandidatePool,
) -> Result<MetricsReport> {
    let c1 = corpus_embeddings(spec, store, kg1, Side::Kg1)?;
    let c2 = corpus_embeddings(spec, store, kg2, Side::Kg2)?;
    let ranks = rank_alignments(&c1.fused, &c2.fused, test_pairs, ids1, ids2, pool)?;
    MetricsReport::from_ranks(&ranks, &[])
}

/// Meta-weight table of one KG: per-entity weights plus summary statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightReport {
    pub modalities: Vec<Modality>,
    /// Row per entity: raw id and its weight vector.
    pub rows: Vec<(i64, Vec<f64>)>,
    /// Mean weight per modality.
    pub mean: Vec<f64>,
    /// How many entities prefer (argmax) each modality.
    pub argmax_histogram: Vec<usize>,
}

pub fn weight_report(
    spec: &ModelSpec,
    store: &ParameterStore,
    kg: &KgData,
    side: Side,
    ids: &[i64],
) -> Result<WeightReport> {
    let corpus = corpus_embeddings(spec, store, kg, side)?;
    let m = spec.modalities.len();
    let mut mean = vec![0.0; m];
    let mut histogram = vec![0usize; m];
    let mut rows = Vec::with_capacity(corpus.weights.len());
    for (i, w) in corpus.weights.iter().enumerate() {
        for (k, v) in w.iter().enumerate() {
            mean[k] += v;
        }
        let argmax = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0);
        histogram[argmax] += 1;
        rows.push((ids[i], w.clone()));
    }
    let n = corpus.weights.len().max(1) as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    Ok(WeightReport {
        modalities: spec.modalities.clone(),
        rows,
        mean,
        argmax_histogram: histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embedding_ranks_first() {
        let fused1 = vec![vec![1.0, 0.0]];
        let fused2 = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let ranks = rank_alignments(
            &fused1,
            &fused2,
            &[(0, 0)],
            &[10],
            &[20, 21, 22],
            CandidatePool::All,
        )
        .unwrap();
        assert_eq!(ranks.forward, vec![1]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        // all candidates identical: rank determined purely by id order
        let fused1 = vec![vec![1.0, 0.0]];
        let fused2 = vec![vec![1.0, 0.0]; 3];
        let ids2 = [30, 10, 20];
        for (truth, expected) in [(1usize, 1usize), (2, 2), (0, 3)] {
            let ranks = rank_alignments(
                &fused1,
                &fused2,
                &[(0, truth)],
                &[1],
                &ids2,
                CandidatePool::All,
            )
            .unwrap();
            assert_eq!(ranks.forward, vec![expected], "truth {truth}");
        }
    }

    #[test]
    fn ranks_match_a_brute_force_sort() {
        use tensor_core::rng::Prng;
        let mut rng = Prng::new(31);
        let n = 10;
        let fused1: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let fused2: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let ids: Vec<i64> = (0..n as i64).collect();
        let ranks =
            rank_alignments(&fused1, &fused2, &pairs, &ids, &ids, CandidatePool::TestOnly)
                .unwrap();
        for (k, &(a, b)) in pairs.iter().enumerate() {
            // oracle: full sort of (similarity desc, id asc)
            let mut scored: Vec<(usize, f64)> = pairs
                .iter()
                .map(|&(_, c)| (c, cosine(&fused1[a], &fused2[c])))
                .collect();
            scored.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap()
                    .then_with(|| ids[x.0].cmp(&ids[y.0]))
            });
            let oracle = scored.iter().position(|&(c, _)| c == b).unwrap() + 1;
            assert_eq!(ranks.forward[k], oracle);
        }
    }

    #[test]
    fn metric_formulas_on_a_hand_checkable_list() {
        let ranks = [1usize, 1, 2, 11];
        assert_eq!(hits_at_n(&ranks, 1).unwrap(), 0.5);
        assert_eq!(hits_at_n(&ranks, 10).unwrap(), 0.75);
        let expect_mrr = (1.0 + 1.0 + 0.5 + 1.0 / 11.0) / 4.0;
        assert!((mrr(&ranks).unwrap() - expect_mrr).abs() < 1e-12);
        assert!((mrr(&ranks).unwrap() - 0.64773).abs() < 1e-5);
        assert_eq!(mr(&ranks).unwrap(), 3.75);
    }

    #[test]
    fn perfect_ranks_saturate_every_metric() {
        let ranks = [1usize; 5];
        assert_eq!(hits_at_n(&ranks, 1).unwrap(), 1.0);
        assert_eq!(mrr(&ranks).unwrap(), 1.0);
        assert_eq!(mr(&ranks).unwrap(), 1.0);
    }

    #[test]
    fn empty_rank_list_is_an_error() {
        assert!(hits_at_n(&[], 1).is_err());
        assert!(mrr(&[]).is_err());
        assert!(mr(&[]).is_err());
    }

    #[test]
    fn mrr_dominates_hits1_and_metrics_ignore_order() {
        use tensor_core::rng::Prng;
        let mut rng = Prng::new(7);
        for _ in 0..50 {
            let ranks: Vec<usize> = (0..20).map(|_| 1 + rng.below(30)).collect();
            assert!(mrr(&ranks).unwrap() >= hits_at_n(&ranks, 1).unwrap() - 1e-12);
            let mut shuffled = ranks.clone();
            rng.shuffle(&mut shuffled);
            assert!((mrr(&ranks).unwrap() - mrr(&shuffled).unwrap()).abs() < 1e-12);
            assert!((mr(&ranks).unwrap() - mr(&shuffled).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_leaves_ranks_unchanged() {
        use tensor_core::rng::Prng;
        let mut rng = Prng::new(13);
        let n = 6;
        let d = 2;
        let fused1: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let fused2: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let ids: Vec<i64> = (0..n as i64).collect();
        let base =
            rank_alignments(&fused1, &fused2, &pairs, &ids, &ids, CandidatePool::TestOnly)
                .unwrap();
        // rotate both sides by the same angle
        let theta: f64 = 0.83;
        let rotate = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    vec![
                        theta.cos() * r[0] - theta.sin() * r[1],
                        theta.sin() * r[0] + theta.cos() * r[1],
                    ]
                })
                .collect()
        };
        let rotated = rank_alignments(
            &rotate(&fused1),
            &rotate(&fused2),
            &pairs,
            &ids,
            &ids,
            CandidatePool::TestOnly,
        )
        .unwrap();
        assert_eq!(base.forward, rotated.forward);
        assert_eq!(base.backward, rotated.backward);
    }

    #[test]
    fn missing_embedding_is_reported() {
        let fused1 = vec![vec![1.0, 0.0]];
        let fused2 = vec![vec![1.0, 0.0]];
        assert!(rank_alignments(
            &fused1,
            &fused2,
            &[(0, 5)],
            &[1],
            &[2],
            CandidatePool::All
        )
        .is_err());
    }
}
