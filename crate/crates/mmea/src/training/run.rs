//! The training driver: supervised, iterative (probation promotions every
//! `k_e` epochs in a second phase), and unsupervised (pseudo seeds from raw
//! feature similarity). One step = forward over both KGs, total loss,
//! reverse pass, AdamW update under the cosine warm-up schedule; replay
//! state refreshes from the updated embeddings.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tensor_core::{Tape, Tensor};

use crate::error::{MmeaError, Result};
use crate::eval::{evaluate, CandidatePool, MetricsReport};
use crate::kg::{AlignmentSplit, Mmkg, Modality};
use crate::model::{
    corpus_embeddings, encode_side, mmh_for_entities, Encoded, ParameterStore, PreparedPair,
    Side,
};
use crate::training::iterative::{iterative_propose, IterState};
use crate::training::losses::{total_loss, BatchEmbeddings, LossConfig, MerpNegatives};
use crate::training::merp::{merp_expand_negatives, merp_refresh, MerpState};
use crate::training::optim::{AdamW, CosineWarmup};
use crate::training::pseudo::build_pseudo_seed;
use tensor_core::rng::Prng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Supervised,
    Iterative,
    Unsupervised,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Supervised => f.write_str("supervised"),
            TrainMode::Iterative => f.write_str("iterative"),
            TrainMode::Unsupervised => f.write_str("unsupervised"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub loss: LossConfig,
    pub mode: TrainMode,
    pub epochs: usize,
    /// Length of the second phase in iterative mode.
    pub iterative_epochs: usize,
    /// Proposal cadence (epochs) in the iterative phase.
    pub k_e: usize,
    /// Consecutive confirmations required for promotion.
    pub k_s: u32,
    /// Pseudo seed dictionary capacity for unsupervised mode.
    pub n_dic: usize,
    /// Reference modality for unsupervised seeding.
    pub unsup_ref: Modality,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every k epochs (the final epoch always evaluates).
    pub eval_every: usize,
    /// Refresh the replay matrix once per epoch instead of per step.
    pub merp_per_epoch: bool,
    pub candidate_pool: CandidatePool,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(MmeaError::Config("need at least one epoch".into()));
        }
        if self.mode == TrainMode::Iterative && (self.k_e == 0 || self.k_s == 0) {
            return Err(MmeaError::Config(
                "iterative mode needs positive k_e and k_s".into(),
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(MmeaError::Config(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_frac
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(MmeaError::Config("peak learning rate must be positive".into()));
        }
        if !matches!(self.unsup_ref, Modality::Visual | Modality::Surface) {
            return Err(MmeaError::Config(
                "unsupervised reference modality must be visual or surface".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub l_mu: f64,
    pub l_icl: f64,
    pub l_licl: f64,
    pub l_xi: Option<f64>,
    pub clamped: usize,
    pub hits1: Option<f64>,
    pub hits10: Option<f64>,
    pub mrr: Option<f64>,
    pub mr: Option<f64>,
    pub seed_count: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoSeedSummary {
    pub requested: usize,
    pub used: usize,
    pub clamped: bool,
    /// Fraction of pseudo pairs that are true alignments.
    pub precision: f64,
}

pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: Vec<EpochRecord>,
    pub final_metrics: MetricsReport,
    pub pseudo_seed: Option<PseudoSeedSummary>,
    /// Pairs promoted during the iterative phase, in promotion order.
    pub promoted: Vec<(usize, usize)>,
    pub initial_seed_count: usize,
    pub final_seed_count: usize,
    pub notes: Vec<String>,
}

struct StepAverages {
    loss: f64,
    l_mu: f64,
    l_icl: f64,
    l_licl: f64,
    l_xi: Option<f64>,
    clamped: usize,
    steps: usize,
}

impl StepAverages {
    fn new() -> StepAverages {
        StepAverages {
            loss: 0.0,
            l_mu: 0.0,
            l_icl: 0.0,
            l_licl: 0.0,
            l_xi: None,
            clamped: 0,
            steps: 0,
        }
    }

    fn absorb(&mut self, total: f64, b: &crate::training::losses::LossBreakdown) {
        self.loss += total;
        self.l_mu += b.l_mu;
        self.l_icl += b.l_icl;
        self.l_licl += b.l_licl;
        if let Some(x) = b.l_xi {
            *self.l_xi.get_or_insert(0.0) += x;
        }
        self.clamped += b.clamped;
        self.steps += 1;
    }

    fn mean(&self) -> (f64, f64, f64, f64, Option<f64>) {
        let n = self.steps.max(1) as f64;
        (
            self.loss / n,
            self.l_mu / n,
            self.l_icl / n,
            self.l_licl / n,
            self.l_xi.map(|x| x / n),
        )
    }
}

/// Stacks the `k`-th attended row of every listed output into a B × d matrix.
fn stack_attended(
    tape: &Tape,
    outputs: &[crate::mmh::MmhOutput],
    positions: &[usize],
    k: usize,
) -> Result<Tensor> {
    let rows: Vec<Tensor> = positions
        .iter()
        .map(|&p| tape.row(&outputs[p].attended, k))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(tape.concat_rows(&refs)?)
}

fn stack_fused(
    tape: &Tape,
    outputs: &[crate::mmh::MmhOutput],
    positions: &[usize],
    late: bool,
) -> Result<Tensor> {
    let rows: Vec<&Tensor> = positions
        .iter()
        .map(|&p| {
            if late {
                &outputs[p].fused_late
            } else {
                &outputs[p].fused_early
            }
        })
        .collect();
    Ok(tape.concat_rows(&rows)?)
}

struct StepInputs<'a> {
    prepared: &'a PreparedPair,
    settings: &'a TrainSettings,
}

/// Forward + loss + gradients + optimizer update for one batch.
#[allow(clippy::too_many_arguments)]
fn run_step(
    ctx: &StepInputs,
    store: &mut ParameterStore,
    optimizer: &mut AdamW,
    batch: &[(usize, usize)],
    merp: Option<&MerpState>,
    lr: f64,
    averages: &mut StepAverages,
) -> Result<()> {
    let spec = &ctx.prepared.spec;
    let tape = Tape::new();
    let enc1: Encoded = encode_side(spec, &tape, store, &ctx.prepared.kg1, Side::Kg1)?;
    let enc2: Encoded = encode_side(spec, &tape, store, &ctx.prepared.kg2, Side::Kg2)?;

    let idx1: Vec<usize> = batch.iter().map(|&(a, _)| a).collect();
    let idx2: Vec<usize> = batch.iter().map(|&(_, b)| b).collect();

    // Entities whose hybrid output this step needs: the batch itself plus
    // any replay negatives (which live on the opposite side of their anchor).
    let mut list1 = idx1.clone();
    let mut list2 = idx2.clone();
    let mut pos1: HashMap<usize, usize> = idx1.iter().enumerate().map(|(p, &e)| (e, p)).collect();
    let mut pos2: HashMap<usize, usize> = idx2.iter().enumerate().map(|(p, &e)| (e, p)).collect();

    let negative_sets = merp.map(|state| merp_expand_negatives(batch, state));
    if let Some((dir1, dir2)) = &negative_sets {
        for a in dir1 {
            if let Some((Side::Kg2, e)) = a.replay {
                pos2.entry(e).or_insert_with(|| {
                    list2.push(e);
                    list2.len() - 1
                });
            }
        }
        for a in dir2 {
            if let Some((Side::Kg1, e)) = a.replay {
                pos1.entry(e).or_insert_with(|| {
                    list1.push(e);
                    list1.len() - 1
                });
            }
        }
    }

    let mmh1 = mmh_for_entities(spec, &tape, store, &enc1, &list1)?;
    let mmh2 = mmh_for_entities(spec, &tape, store, &enc2, &list2)?;
    let batch_pos1: Vec<usize> = (0..batch.len()).collect();
    let batch_pos2: Vec<usize> = (0..batch.len()).collect();

    let mut per_modality = Vec::with_capacity(spec.modalities.len());
    let mut attended = Vec::with_capacity(spec.modalities.len());
    for (k, m) in spec.modalities.iter().enumerate() {
        per_modality.push((
            *m,
            tape.gather_rows(&enc1[m], &idx1)?,
            tape.gather_rows(&enc2[m], &idx2)?,
        ));
        attended.push((
            *m,
            stack_attended(&tape, &mmh1, &batch_pos1, k)?,
            stack_attended(&tape, &mmh2, &batch_pos2, k)?,
        ));
    }
    let fused = (
        stack_fused(&tape, &mmh1, &batch_pos1, false)?,
        stack_fused(&tape, &mmh2, &batch_pos2, false)?,
    );
    let fused_late = if ctx.settings.loss.use_l_xi {
        Some((
            stack_fused(&tape, &mmh1, &batch_pos1, true)?,
            stack_fused(&tape, &mmh2, &batch_pos2, true)?,
        ))
    } else {
        None
    };

    let merp_negatives = match &negative_sets {
        Some((dir1, dir2)) => {
            // Row i holds the replay embedding for anchor i; masked rows fall
            // back to the positive (no gradient flows through them).
            let mut rows1_pos = Vec::with_capacity(batch.len());
            let mut dup1 = Vec::with_capacity(batch.len());
            for (i, a) in dir1.iter().enumerate() {
                match a.replay {
                    Some((Side::Kg2, e)) => {
                        rows1_pos.push(pos2[&e]);
                        dup1.push(false);
                    }
                    _ => {
                        rows1_pos.push(pos2[&idx2[i]]);
                        dup1.push(true);
                    }
                }
            }
            let mut rows2_pos = Vec::with_capacity(batch.len());
            let mut dup2 = Vec::with_capacity(batch.len());
            for (i, a) in dir2.iter().enumerate() {
                match a.replay {
                    Some((Side::Kg1, e)) => {
                        rows2_pos.push(pos1[&e]);
                        dup2.push(false);
                    }
                    _ => {
                        rows2_pos.push(pos1[&idx1[i]]);
                        dup2.push(true);
                    }
                }
            }
            Some(MerpNegatives {
                rows1: stack_fused(&tape, &mmh2, &rows1_pos, false)?,
                dup1,
                rows2: stack_fused(&tape, &mmh1, &rows2_pos, false)?,
                dup2,
            })
        }
        None => None,
    };

    let embeds = BatchEmbeddings {
        per_modality,
        attended,
        fused,
        fused_late,
        merp: merp_negatives,
    };
    let breakdown = total_loss(&tape, &ctx.settings.loss, &embeds)?;
    let loss_value = breakdown.total.item()?;
    if !loss_value.is_finite() {
        return Err(MmeaError::Invalid(format!("non-finite loss {loss_value}")));
    }
    let grads = tape.gradients(&breakdown.total)?;
    optimizer.step(store, &grads, lr)?;
    averages.absorb(loss_value, &breakdown);
    Ok(())
}

#[allow(clippy::type_complexity)]
fn fused_both_sides(
    prepared: &PreparedPair,
    store: &ParameterStore,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c1 = corpus_embeddings(&prepared.spec, store, &prepared.kg1, Side::Kg1)?;
    let c2 = corpus_embeddings(&prepared.spec, store, &prepared.kg2, Side::Kg2)?;
    Ok((c1.fused, c2.fused))
}

/// Any tensor failure mid-training becomes an abort carrying a diagnostic.
fn numeric_abort(err: MmeaError, epoch: usize, step: usize, store: &ParameterStore) -> MmeaError {
    match err {
        MmeaError::Tensor(_) | MmeaError::Invalid(_) => MmeaError::NumericalAbort {
            epoch,
            step,
            detail: format!("{err}; largest parameter norms: {}", param_norms(store)),
        },
        other => other,
    }
}

fn param_norms(store: &ParameterStore) -> String {
    let mut worst: Vec<(f64, &str)> = store
        .iter()
        .map(|(n, t)| {
            let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm, n)
        })
        .collect();
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    worst
        .iter()
        .take(5)
        .map(|(norm, n)| format!("{n}={norm:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs the full loop and returns the trained parameters plus the log.
pub fn train(
    kg1: &Mmkg,
    kg2: &Mmkg,
    prepared: &PreparedPair,
    split: &AlignmentSplit,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    settings.validate()?;
    split.validate()?;
    let mut notes = Vec::new();

    let mut loss_cfg = settings.loss.clone();
    if loss_cfg.use_merp && settings.mode != TrainMode::Supervised {
        loss_cfg.use_merp = false;
        notes.push(format!(
            "replay disabled: pseudo seeds in {} mode could mislead the replay stage",
            settings.mode
        ));
    }
    let settings = TrainSettings {
        loss: loss_cfg,
        ..settings.clone()
    };

    // Seed set per mode.
    let mut pseudo_summary = None;
    let mut seeds: Vec<(usize, usize)> = match settings.mode {
        TrainMode::Unsupervised => {
            let table1 = kg1.feature_table(settings.unsup_ref).ok_or_else(|| {
                MmeaError::Config(format!(
                    "unsupervised reference modality {} missing in kg1",
                    settings.unsup_ref
                ))
            })?;
            let table2 = kg2.feature_table(settings.unsup_ref).ok_or_else(|| {
                MmeaError::Config(format!(
                    "unsupervised reference modality {} missing in kg2",
                    settings.unsup_ref
                ))
            })?;
            let dict = build_pseudo_seed(table1, table2, settings.n_dic)?;
            if dict.clamped {
                notes.push(format!(
                    "pseudo seed capacity clamped to {}",
                    dict.capacity
                ));
            }
            let truth: std::collections::HashSet<(usize, usize)> = split
                .train
                .iter()
                .chain(&split.test)
                .copied()
                .collect();
            let correct = dict
                .pairs
                .iter()
                .filter(|&&(a, b, _)| truth.contains(&(a, b)))
                .count();
            let used = dict.pairs.len();
            pseudo_summary = Some(PseudoSeedSummary {
                requested: settings.n_dic,
                used,
                clamped: dict.clamped,
                precision: if used == 0 {
                    0.0
                } else {
                    correct as f64 / used as f64
                },
            });
            dict.pairs.iter().map(|&(a, b, _)| (a, b)).collect()
        }
        _ => split.train.clone(),
    };
    if seeds.is_empty() {
        return Err(MmeaError::Invalid("no seed alignments to train on".into()));
    }
    let initial_seed_count = seeds.len();

    let mut store = prepared.spec.init_params(settings.seed)?;
    let mut optimizer = AdamW::new(&store, settings.weight_decay);
    let schedule = CosineWarmup::new(settings.peak_lr, settings.warmup_frac);
    let mut rng = Prng::new(settings.seed ^ 0x5u64.wrapping_mul(0x9E3779B97F4A7C15));

    let mut merp_state: Option<MerpState> = if settings.loss.use_merp {
        let (f1, f2) = fused_both_sides(prepared, &store)?;
        Some(merp_refresh(&f1, &f2, &seeds)?)
    } else {
        None
    };

    let total_epochs = settings.epochs
        + if settings.mode == TrainMode::Iterative {
            settings.iterative_epochs
        } else {
            0
        };
    let mut iter_state = IterState::new(settings.k_s);
    let mut promoted_all: Vec<(usize, usize)> = Vec::new();
    let mut log: Vec<EpochRecord> = Vec::with_capacity(total_epochs);

    let ctx = StepInputs {
        prepared,
        settings: &settings,
    };
    let ids1: Vec<i64> = kg1.entities.iter().map(|e| e.id).collect();
    let ids2: Vec<i64> = kg2.entities.iter().map(|e| e.id).collect();

    for epoch in 0..total_epochs {
        let started = Instant::now();
        let phase: &'static str = if epoch < settings.epochs {
            "supervised"
        } else {
            "iterative"
        };

        let mut order = seeds.clone();
        let mut epoch_rng = rng.fork(epoch as u64);
        epoch_rng.shuffle(&mut order);
        let batch_size = settings.loss.batch_size.min(order.len()).max(1);
        let n_steps = order.len().div_ceil(batch_size);

        let mut averages = StepAverages::new();
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let progress = (epoch as f64 + step as f64 / n_steps as f64) / total_epochs as f64;
            let lr = schedule.at_progress(progress);
            run_step(
                &ctx,
                &mut store,
                &mut optimizer,
                batch,
                merp_state.as_ref(),
                lr,
                &mut averages,
            )
            .map_err(|e| numeric_abort(e, epoch, step, &store))?;
            if merp_state.is_some() && !settings.merp_per_epoch {
                let (f1, f2) = fused_both_sides(prepared, &store)
                    .map_err(|e| numeric_abort(e, epoch, step, &store))?;
                merp_state = Some(merp_refresh(&f1, &f2, &seeds)?);
            }
        }
        if merp_state.is_some() && settings.merp_per_epoch {
            let (f1, f2) = fused_both_sides(prepared, &store)
                .map_err(|e| numeric_abort(e, epoch, n_steps, &store))?;
            merp_state = Some(merp_refresh(&f1, &f2, &seeds)?);
        }

        // Iterative proposals every k_e epochs of the second phase.
        if phase == "iterative" {
            let epoch_in_phase = epoch - settings.epochs;
            if (epoch_in_phase + 1).is_multiple_of(settings.k_e) {
                let (f1, f2) = fused_both_sides(prepared, &store)
                    .map_err(|e| numeric_abort(e, epoch, n_steps, &store))?;
                let promoted = iterative_propose(&f1, &f2, &seeds, &mut iter_state)?;
                if !promoted.is_empty() {
                    seeds.extend(promoted.iter().copied());
                    promoted_all.extend(promoted);
                }
            }
        }

        let is_last = epoch + 1 == total_epochs;
        let metrics = if is_last || (epoch + 1) % settings.eval_every.max(1) == 0 {
            Some(
                evaluate(
                    &prepared.spec,
                    &store,
                    &prepared.kg1,
                    &prepared.kg2,
                    &split.test,
                    &ids1,
                    &ids2,
                    settings.candidate_pool,
                )
                .map_err(|e| numeric_abort(e, epoch, n_steps, &store))?,
            )
        } else {
            None
        };

        let (loss, l_mu, l_icl, l_licl, l_xi) = averages.mean();
        log.push(EpochRecord {
            epoch,
            phase,
            loss,
            l_mu,
            l_icl,
            l_licl,
            l_xi,
            clamped: averages.clamped,
            hits1: metrics.as_ref().map(|m| m.average.hits1),
            hits10: metrics.as_ref().map(|m| m.average.hits10),
            mrr: metrics.as_ref().map(|m| m.average.mrr),
            mr: metrics.as_ref().map(|m| m.average.mr),
            seed_count: seeds.len(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let final_metrics = evaluate(
        &prepared.spec,
        &store,
        &prepared.kg1,
        &prepared.kg2,
        &split.test,
        &ids1,
        &ids2,
        settings.candidate_pool,
    )?;

    Ok(TrainOutcome {
        store,
        log,
        final_metrics,
        pseudo_seed: pseudo_summary,
        promoted: promoted_all,
        initial_seed_count,
        final_seed_count: seeds.len(),
        notes,
    })
}
