//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). Oracles here are deliberately
//! written as straight-line scalar loops, independent of the tensor engine's
//! code paths.

#![allow(clippy::needless_range_loop, clippy::field_reassign_with_default, clippy::type_complexity)]

use std::collections::BTreeMap;
use std::time::Instant;

use mmea::config::RunConfig;
use mmea::eval::{hits_at_n, mr, mrr, rank_alignments, CandidatePool};
use mmea::kg::{generate_synthetic_pair, split_alignments, GeneratorConfig, Mmkg, Modality};
use mmea::mmh::{ffn_forward, meta_weights, mhca_forward, FfnParams, MhcaParams};
use mmea::model::{
    corpus_embeddings, encode_side, mmh_for_entities, prepare_pair, ParameterStore, PreparedPair,
    Side,
};
use mmea::training::{
    merp_expand_negatives, merp_refresh, total_loss, train, BatchEmbeddings, LossConfig,
    MerpNegatives, TrainMode, TrainSettings,
};
use tensor_core::gradcheck::{check, kernel_suite, rel_err, FD_STEP};
use tensor_core::rng::Prng;
use tensor_core::{Tape, Tensor, TensorError, LN_EPS};

fn criterion(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n:>2} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rand_matrix(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

// ───────────────────────── scalar oracles ─────────────────────────

fn oracle_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let c = x.len();
    let mean = x.iter().sum::<f64>() / c as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    let s = (var + LN_EPS).sqrt();
    (0..c).map(|j| (x[j] - mean) / s * gain[j] + bias[j]).collect()
}

/// Straight-line multi-head cross-modal attention over one entity.
/// Returns (attended rows, per-head beta) as plain nested vectors.
fn oracle_mhca(
    params: &MhcaParams,
    h: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let m = h.len();
    let d = h[0].len();
    let d_h = params.head_dim();
    let mut betas = Vec::new();
    let mut concat: Vec<Vec<f64>> = vec![Vec::new(); m];
    for head in &params.heads {
        let wq = head.w_q.data();
        let wk = head.w_k.data();
        let wv = head.w_v.data();
        let project = |w: &[f64], row: &[f64]| -> Vec<f64> {
            (0..d_h)
                .map(|k| (0..d).map(|x| row[x] * w[x * d_h + k]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = h.iter().map(|row| project(wq, row)).collect();
        let kk: Vec<Vec<f64>> = h.iter().map(|row| project(wk, row)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|row| project(wv, row)).collect();
        let mut beta = vec![vec![0.0; m]; m];
        for i in 0..m {
            let mut denom = 0.0;
            for j in 0..m {
                let score: f64 =
                    q[i].iter().zip(&kk[j]).map(|(a, b)| a * b).sum::<f64>() / (d_h as f64).sqrt();
                beta[i][j] = score.exp();
                denom += beta[i][j];
            }
            for j in 0..m {
                beta[i][j] /= denom;
            }
        }
        for i in 0..m {
            for k in 0..d_h {
                let val: f64 = (0..m).map(|j| beta[i][j] * v[j][k]).sum();
                concat[i].push(val);
            }
        }
        betas.push(beta);
    }
    let wo = params.w_o.data();
    let gain = params.ln_gain.data();
    let bias = params.ln_bias.data();
    let attended: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let projected: Vec<f64> = (0..d)
                .map(|col| (0..d).map(|k| concat[i][k] * wo[k * d + col]).sum())
                .collect();
            let residual: Vec<f64> = projected.iter().zip(&h[i]).map(|(a, b)| a + b).collect();
            oracle_layer_norm(&residual, gain, bias)
        })
        .collect();
    (attended, betas)
}

fn oracle_ffn(params: &FfnParams, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let d_in = params.b1.numel();
    let w1 = params.w1.data();
    let b1 = params.b1.data();
    let w2 = params.w2.data();
    let b2 = params.b2.data();
    rows.iter()
        .map(|row| {
            let inner: Vec<f64> = (0..d_in)
                .map(|k| {
                    let v: f64 =
                        (0..d).map(|x| row[x] * w1[x * d_in + k]).sum::<f64>() + b1[k];
                    v.max(0.0)
                })
                .collect();
            let out: Vec<f64> = (0..d)
                .map(|col| {
                    (0..d_in).map(|k| inner[k] * w2[k * d + col]).sum::<f64>() + b2[col]
                })
                .collect();
            let residual: Vec<f64> = out.iter().zip(row).map(|(a, b)| a + b).collect();
            oracle_layer_norm(&residual, params.ln_gain.data(), params.ln_bias.data())
        })
        .collect()
}

fn oracle_meta_weights(betas: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let m = betas[0].len();
    let scale = 1.0 / ((m * betas.len()) as f64).sqrt();
    let scores: Vec<f64> = (0..m)
        .map(|target| {
            let received: f64 = betas
                .iter()
                .flat_map(|b| b.iter().map(move |row| row[target]))
                .sum();
            received * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                r.clone()
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

/// Straight-line bi-directional contrastive loss over one embedding table
/// pair, in-batch negatives from both sides, optional replay column.
fn oracle_pair_loss(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    replay: Option<(&[Vec<f64>], &[bool], &[Vec<f64>], &[bool])>,
    temperature: f64,
) -> f64 {
    let b = z1.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let direction = |za: &[Vec<f64>], zb: &[Vec<f64>], rep: Option<(&[Vec<f64>], &[bool])>| {
        let mut total = 0.0;
        for i in 0..b {
            let pos = (dot(&za[i], &zb[i]) / temperature).exp();
            let mut denom = pos;
            for j in 0..b {
                if j != i {
                    denom += (dot(&za[i], &za[j]) / temperature).exp();
                    denom += (dot(&za[i], &zb[j]) / temperature).exp();
                }
            }
            if let Some((rows, dup)) = rep {
                if !dup[i] {
                    denom += (dot(&za[i], &rows[i]) / temperature).exp();
                }
            }
            let p = (pos / denom).max(1e-12);
            total -= p.ln();
        }
        total / b as f64
    };
    let (rep1, rep2) = match replay {
        Some((r1, d1, r2, d2)) => (Some((r1, d1)), Some((r2, d2))),
        None => (None, None),
    };
    0.5 * (direction(z1, z2, rep1) + direction(z2, z1, rep2))
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.rows_cols();
    (0..r).map(|i| t.row_slice(i).to_vec()).collect()
}

// ───────────────────────── shared fixtures ─────────────────────────

fn desk_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.epochs = epochs;
    cfg.eval_every = 50;
    cfg
}

fn prepare(kg1: &Mmkg, kg2: &Mmkg, cfg: &RunConfig) -> PreparedPair {
    prepare_pair(kg1, kg2, &cfg.prepare_options().unwrap()).unwrap()
}

struct TrainedRun {
    hits1: f64,
    outcome: mmea::training::TrainOutcome,
    prepared: PreparedPair,
}

fn run_training(
    kg1: &Mmkg,
    kg2: &Mmkg,
    pairs: &[(usize, usize)],
    cfg: &RunConfig,
    settings: Option<TrainSettings>,
) -> TrainedRun {
    let split = split_alignments(pairs, cfg.r_sa, cfg.seed).unwrap();
    let prepared = prepare(kg1, kg2, cfg);
    let settings = settings.unwrap_or_else(|| cfg.train_settings().unwrap());
    let outcome = train(kg1, kg2, &prepared, &split, &settings).unwrap();
    TrainedRun {
        hits1: outcome.final_metrics.average.hits1,
        outcome,
        prepared,
    }
}

// ───────────────────────── criteria ─────────────────────────

#[test]
fn c01_gradient_suite() {
    let started = Instant::now();
    let reports = kernel_suite(100, 0xACCE97).unwrap();
    let worst_kernel = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .unwrap();
    let kernels_ok = reports.iter().all(|r| r.max_rel_err <= 1e-5);

    // 4-entity end-to-end instance: encoders -> hybrid block -> total loss,
    // gradients of every parameter checked against central differences.
    let gen = GeneratorConfig {
        entities: 4,
        relation_types: 3,
        attribute_types: 3,
        avg_degree: 2.0,
        attrs_per_entity: 2,
        visual_dim: 4,
        surface_dim: 3,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 21).unwrap();
    let mut cfg = desk_config(3, 1);
    cfg.d = 8;
    cfg.d_in = 6;
    let prepared = prepare(&kg1, &kg2, &cfg);
    let store = prepared.spec.init_params(5).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let batch: Vec<(usize, usize)> = pairs[..2].to_vec();
    let loss_cfg = LossConfig {
        batch_size: 2,
        ..LossConfig::default()
    };

    let spec = prepared.spec.clone();
    let kg1_data = &prepared.kg1;
    let kg2_data = &prepared.kg2;
    let composite = check(
        |tape: &Tape, params: &[Tensor]| {
            let mut store = ParameterStore::new();
            for (name, tensor) in names.iter().zip(params) {
                store.insert(name, tensor.clone());
            }
            let run = || -> mmea::Result<Tensor> {
                let enc1 = encode_side(&spec, tape, &store, kg1_data, Side::Kg1)?;
                let enc2 = encode_side(&spec, tape, &store, kg2_data, Side::Kg2)?;
                let idx1: Vec<usize> = batch.iter().map(|&(a, _)| a).collect();
                let idx2: Vec<usize> = batch.iter().map(|&(_, b)| b).collect();
                let mmh1 = mmh_for_entities(&spec, tape, &store, &enc1, &idx1)?;
                let mmh2 = mmh_for_entities(&spec, tape, &store, &enc2, &idx2)?;
                let mut per_modality = Vec::new();
                let mut attended = Vec::new();
                for (k, m) in spec.modalities.iter().enumerate() {
                    per_modality.push((
                        *m,
                        tape.gather_rows(&enc1[m], &idx1)?,
                        tape.gather_rows(&enc2[m], &idx2)?,
                    ));
                    let rows1: Vec<Tensor> = mmh1
                        .iter()
                        .map(|o| tape.row(&o.attended, k))
                        .collect::<Result<_, _>>()?;
                    let rows2: Vec<Tensor> = mmh2
                        .iter()
                        .map(|o| tape.row(&o.attended, k))
                        .collect::<Result<_, _>>()?;
                    let r1: Vec<&Tensor> = rows1.iter().collect();
                    let r2: Vec<&Tensor> = rows2.iter().collect();
                    attended.push((*m, tape.concat_rows(&r1)?, tape.concat_rows(&r2)?));
                }
                let mu1: Vec<&Tensor> = mmh1.iter().map(|o| &o.fused_early).collect();
                let mu2: Vec<&Tensor> = mmh2.iter().map(|o| &o.fused_early).collect();
                let embeds = BatchEmbeddings {
                    per_modality,
                    attended,
                    fused: (tape.concat_rows(&mu1)?, tape.concat_rows(&mu2)?),
                    fused_late: None,
                    merp: None,
                };
                Ok(total_loss(tape, &loss_cfg, &embeds)?.total)
            };
            run().map_err(|e| TensorError::Invalid {
                op: "composite",
                msg: e.to_string(),
            })
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();

    let elapsed = started.elapsed();
    let pass = kernels_ok && composite.max_rel_err <= 1e-5 && elapsed.as_secs() < 60;
    criterion(
        1,
        "gradient suite",
        pass,
        &format!(
            "worst kernel {} at {:.2e}, composite {:.2e} over {} scalars, {:?}",
            worst_kernel.kernel, worst_kernel.max_rel_err, composite.max_rel_err,
            composite.elements, elapsed
        ),
    );
}

#[test]
fn c02_normalization_invariants() {
    let mut rng = Prng::new(0xBE7A);
    let tape = Tape::new();
    let (d, m, heads) = (16, 5, 2);
    let mut worst_beta: f64 = 0.0;
    let mut worst_w: f64 = 0.0;
    let mut params = MhcaParams::init(d, heads, &mut rng).unwrap();
    for entity in 0..1000 {
        if entity % 50 == 0 {
            params = MhcaParams::init(d, heads, &mut rng).unwrap();
        }
        let h = rand_matrix(&mut rng, m, d);
        let (_, beta) = mhca_forward(&tape, &params, &h).unwrap();
        for b in &beta {
            for i in 0..m {
                let sum: f64 = b.row_slice(i).iter().sum();
                worst_beta = worst_beta.max((sum - 1.0).abs());
            }
        }
        let w = meta_weights(&tape, &beta).unwrap();
        let sum: f64 = w.data().iter().sum();
        worst_w = worst_w.max((sum - 1.0).abs());
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let pass = worst_beta <= 1e-9 && worst_w <= 1e-9;
    criterion(
        2,
        "normalization invariants",
        pass,
        &format!("1000 entities: max |Σβ−1| = {worst_beta:.2e}, max |Σw−1| = {worst_w:.2e}"),
    );
}

#[test]
fn c03_oracle_equivalence() {
    let mut rng = Prng::new(0x0AC1E);
    let tape = Tape::new();
    let tol = 1e-8;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let slot = worst.entry(name).or_insert(0.0);
        *slot = slot.max(err);
    };

    for instance in 0..20 {
        let m = 2 + (instance % 4);
        let heads = 1 + (instance % 2);
        let d = 8 * heads;

        // mhca + meta weights
        let params = MhcaParams::init(d, heads, &mut rng).unwrap();
        let h = rand_matrix(&mut rng, m, d);
        let (attended, beta) = mhca_forward(&tape, &params, &h).unwrap();
        let (oracle_att, oracle_beta) = oracle_mhca(&params, &tensor_rows(&h));
        for (i, row) in tensor_rows(&attended).iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                record("mhca", rel_err(*v, oracle_att[i][j]));
            }
        }
        for (hh, b) in beta.iter().enumerate() {
            for (i, row) in tensor_rows(b).iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    record("mhca", rel_err(*v, oracle_beta[hh][i][j]));
                }
            }
        }
        let w = meta_weights(&tape, &beta).unwrap();
        let oracle_w = oracle_meta_weights(&oracle_beta);
        for (v, o) in w.data().iter().zip(&oracle_w) {
            record("meta_weights", rel_err(*v, *o));
        }

        // ffn
        let ffn = FfnParams::init(d, 12, true, &mut rng);
        let out = ffn_forward(&tape, &ffn, &attended).unwrap();
        let oracle_out = oracle_ffn(&ffn, &tensor_rows(&attended));
        for (i, row) in tensor_rows(&out).iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                record("ffn", rel_err(*v, oracle_out[i][j]));
            }
        }

        // total loss (fused + per-modality + attended + optional replay)
        let b = 2 + (instance % 3);
        let cfg = LossConfig {
            batch_size: b,
            use_merp: instance % 2 == 0,
            use_l_xi: instance % 3 == 0,
            ..LossConfig::default()
        };
        let dims = 6;
        let mk = |rng: &mut Prng| rand_matrix(rng, b, dims);
        let modalities = [Modality::Graph, Modality::Visual];
        let per_modality: Vec<(Modality, Tensor, Tensor)> = modalities
            .iter()
            .map(|&m| (m, mk(&mut rng), mk(&mut rng)))
            .collect();
        let attended_pairs: Vec<(Modality, Tensor, Tensor)> = modalities
            .iter()
            .map(|&m| (m, mk(&mut rng), mk(&mut rng)))
            .collect();
        let fused = (mk(&mut rng), mk(&mut rng));
        let fused_late = Some((mk(&mut rng), mk(&mut rng)));
        let merp = cfg.use_merp.then(|| MerpNegatives {
            rows1: mk(&mut rng),
            dup1: (0..b).map(|i| i % 3 == 1).collect(),
            rows2: mk(&mut rng),
            dup2: (0..b).map(|i| i % 4 == 2).collect(),
        });
        let batch = BatchEmbeddings {
            per_modality,
            attended: attended_pairs,
            fused,
            fused_late,
            merp,
        };
        let breakdown = total_loss(&tape, &cfg, &batch).unwrap();

        let n = |t: &Tensor| normalize_rows(&tensor_rows(t));
        let mut oracle_total = oracle_pair_loss(
            &n(&batch.fused.0),
            &n(&batch.fused.1),
            batch.merp.as_ref().map(|mn| {
                (
                    Box::leak(Box::new(n(&mn.rows1))) as &[Vec<f64>],
                    mn.dup1.as_slice(),
                    Box::leak(Box::new(n(&mn.rows2))) as &[Vec<f64>],
                    mn.dup2.as_slice(),
                )
            }),
            cfg.temperature,
        );
        for (_, h1, h2) in &batch.per_modality {
            oracle_total += oracle_pair_loss(&n(h1), &n(h2), None, cfg.temperature);
        }
        for (_, a1, a2) in &batch.attended {
            oracle_total += oracle_pair_loss(&n(a1), &n(a2), None, cfg.temperature);
        }
        if cfg.use_l_xi {
            let (x1, x2) = batch.fused_late.as_ref().unwrap();
            oracle_total += oracle_pair_loss(&n(x1), &n(x2), None, cfg.temperature);
        }
        record(
            "total_loss",
            rel_err(breakdown.total.item().unwrap(), oracle_total),
        );

        // ranking
        let q = 5 + (instance % 4);
        let fused1: Vec<Vec<f64>> = (0..q)
            .map(|_| (0..dims).map(|_| rng.normal()).collect())
            .collect();
        let fused2: Vec<Vec<f64>> = (0..q)
            .map(|_| (0..dims).map(|_| rng.normal()).collect())
            .collect();
        let pairs: Vec<(usize, usize)> = (0..q).map(|i| (i, i)).collect();
        let ids: Vec<i64> = (0..q as i64).collect();
        let ranks =
            rank_alignments(&fused1, &fused2, &pairs, &ids, &ids, CandidatePool::TestOnly)
                .unwrap();
        let cosine = |a: &[f64], c: &[f64]| {
            let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
                * c.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        for (k, &(a, b_ent)) in pairs.iter().enumerate() {
            let mut scored: Vec<(usize, f64)> = pairs
                .iter()
                .map(|&(_, c)| (c, cosine(&fused1[a], &fused2[c])))
                .collect();
            scored.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap()
                    .then_with(|| ids[x.0].cmp(&ids[y.0]))
            });
            let oracle_rank = scored.iter().position(|&(c, _)| c == b_ent).unwrap() + 1;
            record(
                "rank_alignments",
                if ranks.forward[k] == oracle_rank { 0.0 } else { 1.0 },
            );
        }
    }

    let pass = worst.values().all(|&v| v <= tol);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    criterion(3, "oracle equivalence", pass, &format!("20 instances: {detail}"));
}

#[test]
fn c04_metric_formulas() {
    let ranks = [1usize, 1, 2, 11];
    let h1 = hits_at_n(&ranks, 1).unwrap();
    let h10 = hits_at_n(&ranks, 10).unwrap();
    let mrr_v = mrr(&ranks).unwrap();
    let mr_v = mr(&ranks).unwrap();
    let exact = (1.0 + 1.0 + 0.5 + 1.0 / 11.0) / 4.0;
    let pass = h1 == 0.5
        && h10 == 0.75
        && (mrr_v - exact).abs() < 1e-15
        && (mrr_v - 0.64773).abs() < 1e-5
        && mr_v == 3.75;
    criterion(
        4,
        "metric formulas",
        pass,
        &format!("ranks [1,1,2,11]: hits@1 {h1}, hits@10 {h10}, mrr {mrr_v:.5}, mr {mr_v}"),
    );
}

#[test]
fn c05_end_to_end_learning() {
    let started = Instant::now();
    let gen = GeneratorConfig {
        entities: 200,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 7).unwrap();
    let cfg = desk_config(1, 300);
    let run = run_training(&kg1, &kg2, &pairs, &cfg, None);
    let elapsed = started.elapsed();
    let test_count = (pairs.len() as f64 * (1.0 - cfg.r_sa)).round();
    let baseline = 1.0 / test_count;
    let pass = run.hits1 >= 0.80 && run.hits1 >= 50.0 * baseline && elapsed.as_secs() < 300;
    criterion(
        5,
        "end-to-end learning",
        pass,
        &format!(
            "hits@1 {:.4} (threshold 0.80, 50x baseline {:.4}), wall {:?}",
            run.hits1,
            50.0 * baseline,
            elapsed
        ),
    );
}

#[test]
fn c06_modality_ablation() {
    // visual features carry the alignment signal: the graph is rewired hard
    // while visual vectors stay clean copies
    let gen = GeneratorConfig {
        entities: 200,
        rewire_rate: 0.3,
        with_surface: false,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 11).unwrap();
    let cfg = desk_config(2, 150);
    let full = run_training(&kg1, &kg2, &pairs, &cfg, None);

    let mut cfg_nov = cfg.clone();
    cfg_nov.modalities.retain(|m| m != "v");
    let without = run_training(&kg1, &kg2, &pairs, &cfg_nov, None);

    let pass = without.hits1 <= full.hits1 - 0.05;
    criterion(
        6,
        "modality ablation direction",
        pass,
        &format!(
            "full {:.4} vs without visual {:.4} (needs drop >= 0.05)",
            full.hits1, without.hits1
        ),
    );
}

#[test]
fn c07_iterative_gain() {
    let gen = GeneratorConfig {
        entities: 200,
        rewire_rate: 0.05,
        feature_noise_sd: 0.1,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 13).unwrap();
    let mut cfg = desk_config(3, 150);
    cfg.r_sa = 0.1;
    let supervised = run_training(&kg1, &kg2, &pairs, &cfg, None);

    let mut cfg_iter = cfg.clone();
    cfg_iter.mode = TrainMode::Iterative;
    cfg_iter.iterative_epochs = 150;
    let iterative = run_training(&kg1, &kg2, &pairs, &cfg_iter, None);

    let grew = iterative.outcome.final_seed_count > iterative.outcome.initial_seed_count;
    let pass = iterative.hits1 >= supervised.hits1 - 0.02 && grew;
    criterion(
        7,
        "iterative gain direction",
        pass,
        &format!(
            "iterative {:.4} vs supervised {:.4}; seeds {} -> {}",
            iterative.hits1,
            supervised.hits1,
            iterative.outcome.initial_seed_count,
            iterative.outcome.final_seed_count
        ),
    );
}

#[test]
fn c08_unsupervised_seeding() {
    let gen = GeneratorConfig {
        entities: 200,
        visual_dim: 128,
        feature_noise_sd: 0.1,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 17).unwrap();

    // verify the stated feature regime before relying on it
    let v1 = kg1.visual.as_ref().unwrap();
    let v2 = kg2.visual.as_ref().unwrap();
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
            * b.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let mut min_true: f64 = 1.0;
    for &(a, b) in &pairs {
        min_true = min_true.min(cosine(&v1.vectors[a], &v2.vectors[b]));
    }
    let truth: std::collections::HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let mut max_nonpair: f64 = -1.0;
    for a in 0..kg1.entity_count() {
        for b in 0..kg2.entity_count() {
            if !truth.contains(&(a, b)) {
                max_nonpair = max_nonpair.max(cosine(&v1.vectors[a], &v2.vectors[b]));
            }
        }
    }
    assert!(min_true >= 0.9, "true-pair cosine floor {min_true}");
    assert!(max_nonpair <= 0.5, "non-pair cosine ceiling {max_nonpair}");

    let n_dic = (0.3 * gen.entities as f64).round() as usize;
    let dict = mmea::training::build_pseudo_seed(v1, v2, n_dic).unwrap();
    let correct = dict
        .pairs
        .iter()
        .filter(|&&(a, b, _)| truth.contains(&(a, b)))
        .count();
    let precision = correct as f64 / dict.pairs.len() as f64;
    let pass = precision >= 0.95 && dict.pairs.len() == n_dic;
    criterion(
        8,
        "unsupervised seeding",
        pass,
        &format!(
            "precision {:.4} over {} pseudo seeds (true-pair cos >= {:.3}, non-pair <= {:.3})",
            precision,
            dict.pairs.len(),
            min_true,
            max_nonpair
        ),
    );
}

#[test]
fn c09_merp_contract() {
    // structural superset property on a refreshed replay state
    let gen = GeneratorConfig {
        entities: 200,
        ..GeneratorConfig::default()
    };
    let (kg1, kg2, pairs, _) = generate_synthetic_pair(&gen, 7).unwrap();
    let cfg = desk_config(1, 300);
    let split = split_alignments(&pairs, cfg.r_sa, cfg.seed).unwrap();
    let prepared = prepare(&kg1, &kg2, &cfg);
    let store = prepared.spec.init_params(cfg.seed).unwrap();
    let c1 = corpus_embeddings(&prepared.spec, &store, &prepared.kg1, Side::Kg1).unwrap();
    let c2 = corpus_embeddings(&prepared.spec, &store, &prepared.kg2, Side::Kg2).unwrap();
    let state = merp_refresh(&c1.fused, &c2.fused, &split.train).unwrap();
    let batch = &split.train[..10.min(split.train.len())];
    let (dir1, dir2) = merp_expand_negatives(batch, &state);
    let superset = dir1.iter().chain(&dir2).all(|a| {
        let full = a.full_set();
        a.in_batch.iter().all(|n| full.contains(n))
    });
    assert!(superset, "replay expansion must contain the in-batch set");

    // training with replay stays within 0.02 of the plain run
    let plain = run_training(&kg1, &kg2, &pairs, &cfg, None);
    let mut cfg_merp = cfg.clone();
    cfg_merp.use_merp = true;
    let with_merp = run_training(&kg1, &kg2, &pairs, &cfg_merp, None);
    let pass = superset && with_merp.hits1 >= plain.hits1 - 0.02;
    criterion(
        9,
        "replay contract",
        pass,
        &format!(
            "superset holds; hits@1 with replay {:.4} vs without {:.4}",
            with_merp.hits1, plain.hits1
        ),
    );
}

#[test]
fn c10_meta_weight_adaptivity() {
    // structural channels carry noise while visual stays clean, so the
    // population learns to lean on vision; entities whose visual input is
    // the uninformative population mean have to shed that reliance. The
    // offset moves the feature cloud off center the way non-negative CNN
    // embeddings sit, so the mean vector has real magnitude.
    let gen = GeneratorConfig {
        entities: 200,
        rewire_rate: 0.2,
        with_surface: false,
        feature_offset: 1.5,
        ..GeneratorConfig::default()
    };
    let (mut kg1, mut kg2, pairs, _) = generate_synthetic_pair(&gen, 19).unwrap();

    // replace the visual input of every fifth pair (both sides) with that
    // side's population mean: an uninformative, shared vector
    let mean_of = |table: &mmea::kg::ModalityFeatureTable| -> Vec<f64> {
        let n = table.vectors.len() as f64;
        let mut mean = vec![0.0; table.dim];
        for row in &table.vectors {
            for (k, v) in row.iter().enumerate() {
                mean[k] += v / n;
            }
        }
        mean
    };
    let mean1 = mean_of(kg1.visual.as_ref().unwrap());
    let mean2 = mean_of(kg2.visual.as_ref().unwrap());
    let replaced: Vec<(usize, usize)> = pairs.iter().copied().step_by(5).collect();
    for &(a, b) in &replaced {
        kg1.visual.as_mut().unwrap().vectors[a] = mean1.clone();
        kg2.visual.as_mut().unwrap().vectors[b] = mean2.clone();
    }

    // meta-weight separation develops faster under a hotter peak rate;
    // alignment quality stays intact at this scale
    let mut cfg = desk_config(4, 300);
    cfg.peak_lr = 2.5e-2;
    let run = run_training(&kg1, &kg2, &pairs, &cfg, None);
    let spec = &run.prepared.spec;
    let v_slot = spec
        .modalities
        .iter()
        .position(|&m| m == Modality::Visual)
        .unwrap();
    let c1 = corpus_embeddings(spec, &run.outcome.store, &run.prepared.kg1, Side::Kg1).unwrap();
    let c2 = corpus_embeddings(spec, &run.outcome.store, &run.prepared.kg2, Side::Kg2).unwrap();

    let mut population = Vec::new();
    let mut replaced_w = Vec::new();
    let replaced1: std::collections::HashSet<usize> = replaced.iter().map(|&(a, _)| a).collect();
    let replaced2: std::collections::HashSet<usize> = replaced.iter().map(|&(_, b)| b).collect();
    for (i, w) in c1.weights.iter().enumerate() {
        population.push(w[v_slot]);
        if replaced1.contains(&i) {
            replaced_w.push(w[v_slot]);
        }
    }
    for (j, w) in c2.weights.iter().enumerate() {
        population.push(w[v_slot]);
        if replaced2.contains(&j) {
            replaced_w.push(w[v_slot]);
        }
    }
    let pop_mean = population.iter().sum::<f64>() / population.len() as f64;
    let rep_mean = replaced_w.iter().sum::<f64>() / replaced_w.len() as f64;

    // population-average weights must stay non-degenerate
    let m = spec.modalities.len();
    let mut mean_w = vec![0.0; m];
    let total = (c1.weights.len() + c2.weights.len()) as f64;
    for w in c1.weights.iter().chain(&c2.weights) {
        for (k, v) in w.iter().enumerate() {
            mean_w[k] += v / total;
        }
    }
    let max_mean = mean_w.iter().cloned().fold(0.0_f64, f64::max);

    let pass = rep_mean <= pop_mean - 0.03 && max_mean <= 0.9;
    criterion(
        10,
        "meta-weight adaptivity",
        pass,
        &format!(
            "replaced mean w_v {:.4} vs population {:.4} (needs gap >= 0.03); max modality mean {:.4}",
            rep_mean, pop_mean, max_mean
        ),
    );
}
