//! Synthetic MMKG-pair generator and alignment splitting.
//!
//! The second KG is an isomorphic copy of the first under a hidden
//! permutation, then perturbed by three noise knobs: edge rewiring, additive
//! feature noise, and visual-feature dropout. The true pairing is returned
//! as ground truth.

use std::collections::HashSet;

use tensor_core::rng::Prng;

use crate::error::{MmeaError, Result};
use crate::kg::{AlignmentSplit, Entity, Mmkg, Modality, ModalityFeatureTable};

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    /// Entities per side.
    pub entities: usize,
    pub relation_types: usize,
    pub attribute_types: usize,
    /// Average undirected degree; the triple count is `entities * avg_degree / 2`.
    pub avg_degree: f64,
    /// Attribute assignments per entity.
    pub attrs_per_entity: usize,
    pub visual_dim: usize,
    pub surface_dim: usize,
    pub with_visual: bool,
    pub with_surface: bool,
    /// Probability that a copied triple or attribute assignment is rewired in KG2.
    pub rewire_rate: f64,
    /// Standard deviation of Gaussian noise added to KG2 visual/surface features.
    pub feature_noise_sd: f64,
    /// Constant added to every visual/surface coordinate (moves the feature
    /// cloud off center, like non-negative CNN embeddings).
    pub feature_offset: f64,
    /// Probability that a KG2 entity loses its visual vector.
    pub visual_missing_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> GeneratorConfig {
        GeneratorConfig {
            entities: 200,
            relation_types: 12,
            attribute_types: 20,
            avg_degree: 6.0,
            attrs_per_entity: 3,
            visual_dim: 64,
            surface_dim: 32,
            with_visual: true,
            with_surface: true,
            rewire_rate: 0.0,
            feature_noise_sd: 0.0,
            feature_offset: 0.0,
            visual_missing_rate: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities < 2 {
            return Err(MmeaError::Config("generator needs at least 2 entities".into()));
        }
        if self.avg_degree >= self.entities as f64 {
            return Err(MmeaError::Config(format!(
                "average degree {} must be below the entity count {}",
                self.avg_degree, self.entities
            )));
        }
        if self.avg_degree <= 0.0 || self.relation_types == 0 || self.attribute_types == 0 {
            return Err(MmeaError::Config(
                "degree, relation types and attribute types must be positive".into(),
            ));
        }
        for (name, v) in [
            ("rewire_rate", self.rewire_rate),
            ("visual_missing_rate", self.visual_missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MmeaError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.feature_noise_sd < 0.0 {
            return Err(MmeaError::Config("feature_noise_sd must be non-negative".into()));
        }
        if self.with_visual && self.visual_dim == 0 || self.with_surface && self.surface_dim == 0 {
            return Err(MmeaError::Config("enabled feature tables need a positive dim".into()));
        }
        Ok(())
    }
}

/// What the generator actually did — used to verify noise knobs from outside.
#[derive(Clone, Debug, Default)]
pub struct GeneratorReport {
    pub triples: usize,
    pub rewired_triples: usize,
    pub attr_assignments: usize,
    pub rewired_attrs: usize,
    pub missing_visual: usize,
    /// Hidden permutation: KG1 entity i corresponds to KG2 entity `permutation[i]`.
    pub permutation: Vec<usize>,
}

fn gaussian_table(
    rng: &mut Prng,
    modality: Modality,
    dim: usize,
    entities: usize,
    offset: f64,
) -> ModalityFeatureTable {
    let mut table = ModalityFeatureTable::empty(modality, dim, entities);
    for i in 0..entities {
        let row: Vec<f64> = (0..dim).map(|_| offset + rng.normal()).collect();
        table.set(i, row).expect("dim matches");
    }
    table
}

#[allow(clippy::needless_range_loop)]
fn noisy_copy(
    rng: &mut Prng,
    source: &ModalityFeatureTable,
    permutation: &[usize],
    sd: f64,
) -> ModalityFeatureTable {
    let n = source.vectors.len();
    let mut out = ModalityFeatureTable::empty(source.modality, source.dim, n);
    for i in 0..n {
        let row: Vec<f64> = source.vectors[i]
            .iter()
            .map(|&v| v + if sd > 0.0 { rng.normal_with(0.0, sd) } else { 0.0 })
            .collect();
        out.set(permutation[i], row).expect("dim matches");
    }
    out
}

fn reintern_triples(
    labels: &[String],
    triples: Vec<(usize, usize, usize)>,
) -> (Vec<String>, Vec<(usize, usize, usize)>) {
    let mut order: Vec<String> = Vec::new();
    let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let remapped = triples
        .into_iter()
        .map(|(h, r, t)| {
            let k = *slot.entry(r).or_insert_with(|| {
                order.push(labels[r].clone());
                order.len() - 1
            });
            (h, k, t)
        })
        .collect();
    (order, remapped)
}

fn reintern_assignments(
    labels: &[String],
    assignments: Vec<(usize, usize)>,
) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut order: Vec<String> = Vec::new();
    let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let remapped = assignments
        .into_iter()
        .map(|(e, a)| {
            let k = *slot.entry(a).or_insert_with(|| {
                order.push(labels[a].clone());
                order.len() - 1
            });
            (e, k)
        })
        .collect();
    (order, remapped)
}

/// Generates an MMKG pair with ground-truth alignment, deterministic under
/// the seed.
#[allow(clippy::type_complexity, clippy::needless_range_loop)]
pub fn generate_synthetic_pair(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Mmkg, Mmkg, Vec<(usize, usize)>, GeneratorReport)> {
    cfg.validate()?;
    let n = cfg.entities;
    let mut rng = Prng::new(seed);
    let mut graph_rng = rng.fork(1);
    let mut attr_rng = rng.fork(2);
    let mut feat_rng = rng.fork(3);
    let mut perm_rng = rng.fork(4);
    let mut noise_rng = rng.fork(5);

    // KG1 structure.
    let entities1: Vec<Entity> = (0..n)
        .map(|i| Entity {
            id: i as i64,
            name: format!("e{i}"),
        })
        .collect();
    let relations: Vec<String> = (0..cfg.relation_types).map(|k| format!("r{k}")).collect();
    let attributes: Vec<String> = (0..cfg.attribute_types).map(|k| format!("a{k}")).collect();

    let triple_target = ((n as f64 * cfg.avg_degree) / 2.0).round() as usize;
    let mut triples1 = Vec::with_capacity(triple_target);
    let mut seen = HashSet::new();
    let mut guard = 0usize;
    while triples1.len() < triple_target {
        guard += 1;
        if guard > triple_target * 100 {
            return Err(MmeaError::Config(
                "generator could not place the requested number of distinct triples".into(),
            ));
        }
        let h = graph_rng.below(n);
        let t = graph_rng.below(n);
        if h == t {
            continue;
        }
        let r = graph_rng.below(cfg.relation_types);
        if seen.insert((h, r, t)) {
            triples1.push((h, r, t));
        }
    }

    let mut attrs1 = Vec::with_capacity(n * cfg.attrs_per_entity);
    for e in 0..n {
        for _ in 0..cfg.attrs_per_entity {
            attrs1.push((e, attr_rng.below(cfg.attribute_types)));
        }
    }

    let visual1 = cfg.with_visual.then(|| {
        gaussian_table(&mut feat_rng, Modality::Visual, cfg.visual_dim, n, cfg.feature_offset)
    });
    let surface1 = cfg.with_surface.then(|| {
        gaussian_table(&mut feat_rng, Modality::Surface, cfg.surface_dim, n, cfg.feature_offset)
    });

    // Hidden permutation: KG1 entity i ↔ KG2 entity permutation[i].
    let mut permutation: Vec<usize> = (0..n).collect();
    perm_rng.shuffle(&mut permutation);

    let entities2: Vec<Entity> = (0..n)
        .map(|j| Entity {
            id: j as i64,
            name: format!("f{j}"),
        })
        .collect();

    // Copy triples under the permutation; rewire tails at the configured rate,
    // avoiding exact duplicates so the MMKG invariant holds.
    let mut triples2 = Vec::with_capacity(triples1.len());
    let mut seen2 = HashSet::new();
    let mut rewired_triples = 0usize;
    for &(h, r, t) in &triples1 {
        let (h2, mut t2) = (permutation[h], permutation[t]);
        let mut rewired = false;
        if cfg.rewire_rate > 0.0 && noise_rng.chance(cfg.rewire_rate) {
            for _ in 0..50 {
                let candidate = noise_rng.below(n);
                if candidate != h2 && candidate != t2 && !seen2.contains(&(h2, r, candidate)) {
                    t2 = candidate;
                    rewired = true;
                    break;
                }
            }
        }
        if !seen2.insert((h2, r, t2)) {
            continue; // duplicate created by an earlier rewire
        }
        if rewired {
            rewired_triples += 1;
        }
        triples2.push((h2, r, t2));
    }

    let mut attrs2 = Vec::with_capacity(attrs1.len());
    let mut rewired_attrs = 0usize;
    for &(e, a) in &attrs1 {
        let mut a2 = a;
        if cfg.rewire_rate > 0.0 && noise_rng.chance(cfg.rewire_rate) {
            a2 = noise_rng.below(cfg.attribute_types);
            if a2 != a {
                rewired_attrs += 1;
            }
        }
        attrs2.push((permutation[e], a2));
    }

    let mut missing_visual = 0usize;
    let visual2 = visual1.as_ref().map(|v| {
        let mut copy = noisy_copy(&mut noise_rng, v, &permutation, cfg.feature_noise_sd);
        if cfg.visual_missing_rate > 0.0 {
            for j in 0..n {
                if noise_rng.chance(cfg.visual_missing_rate) {
                    copy.vectors[j] = vec![0.0; copy.dim];
                    copy.available[j] = false;
                    missing_visual += 1;
                }
            }
        }
        copy
    });
    let surface2 = surface1
        .as_ref()
        .map(|s| noisy_copy(&mut noise_rng, s, &permutation, cfg.feature_noise_sd));

    // Re-intern labels in first-encounter order, matching what the loader
    // produces when it reads the files back (round-trip exactness).
    let (relations1, triples1) = reintern_triples(&relations, triples1);
    let (attributes1, attrs1) = reintern_assignments(&attributes, attrs1);
    let (relations2, triples2) = reintern_triples(&relations, triples2);
    let (attributes2, attrs2) = reintern_assignments(&attributes, attrs2);

    let kg1 = Mmkg {
        entities: entities1,
        relations: relations1,
        attributes: attributes1,
        rel_triples: triples1,
        attr_assignments: attrs1,
        visual: visual1,
        surface: surface1,
    };
    let kg2 = Mmkg {
        entities: entities2,
        relations: relations2,
        attributes: attributes2,
        rel_triples: triples2,
        attr_assignments: attrs2,
        visual: visual2,
        surface: surface2,
    };

    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, permutation[i])).collect();
    let report = GeneratorReport {
        triples: kg1.rel_triples.len(),
        rewired_triples,
        attr_assignments: kg1.attr_assignments.len(),
        rewired_attrs,
        missing_visual,
        permutation,
    };
    Ok((kg1, kg2, pairs, report))
}

/// Shuffles `pairs` deterministically and takes `round(ratio * n)` for
/// training, the rest for test.
pub fn split_alignments(
    pairs: &[(usize, usize)],
    ratio: f64,
    seed: u64,
) -> Result<AlignmentSplit> {
    if pairs.len() < 2 {
        return Err(MmeaError::Invalid(format!(
            "need at least 2 alignment pairs to split, got {}",
            pairs.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MmeaError::Invalid(format!(
            "seed alignment ratio {ratio} outside (0, 1)"
        )));
    }
    let mut shuffled = pairs.to_vec();
    let mut rng = Prng::new(seed);
    rng.shuffle(&mut shuffled);
    let train_len = (ratio * pairs.len() as f64).round() as usize;
    let train_len = train_len.clamp(1, pairs.len() - 1);
    let test = shuffled.split_off(train_len);
    let split = AlignmentSplit {
        train: shuffled,
        test,
        ratio,
    };
    split.validate()?;
    Ok(split)
}
