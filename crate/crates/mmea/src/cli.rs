//! Command implementations behind the `mmea` binary: dataset generation,
//! training, evaluation on saved parameters, and meta-weight inspection.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{Profile, RunConfig};
use crate::error::{MmeaError, Result};
use crate::eval::{evaluate, weight_report, MetricsReport};
use crate::kg::{
    generate_synthetic_pair, load_pair, split_alignments, write_pair, AlignmentSplit,
    GeneratorConfig, Mmkg,
};
use crate::model::{prepare_pair, PreparedPair, Side};
use crate::rundir;
use crate::training::{train, TrainMode};

pub const SEED_ENV: &str = "MMEA_SEED";

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic MMKG pair with ground-truth alignments.
    Generate(GenerateArgs),
    /// Train on a dataset pair and write a run directory.
    Train(TrainArgs),
    /// Evaluate saved parameters on a dataset pair.
    Eval(EvalArgs),
    /// Emit the per-entity meta modality weight table and its summary.
    Weights(WeightsArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output pair directory (kg1/, kg2/, alignments.tsv).
    #[arg(long)]
    pub out: PathBuf,
    /// Entities per side.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 12)]
    pub rel_types: usize,
    #[arg(long, default_value_t = 20)]
    pub attr_types: usize,
    #[arg(long, default_value_t = 6.0)]
    pub avg_degree: f64,
    #[arg(long, default_value_t = 3)]
    pub attrs_per_entity: usize,
    #[arg(long, default_value_t = 64)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub surface_dim: usize,
    /// Skip the visual feature table.
    #[arg(long)]
    pub no_visual: bool,
    /// Skip the surface feature table.
    #[arg(long)]
    pub no_surface: bool,
    /// Fraction of KG2 triples/attributes rewired.
    #[arg(long, default_value_t = 0.0)]
    pub rewire: f64,
    /// Gaussian noise sd added to KG2 visual/surface features.
    #[arg(long, default_value_t = 0.0)]
    pub feature_noise: f64,
    /// Constant offset added to every visual/surface coordinate.
    #[arg(long, default_value_t = 0.0)]
    pub feature_offset: f64,
    /// Fraction of KG2 entities without a visual vector.
    #[arg(long, default_value_t = 0.0)]
    pub visual_missing: f64,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Dataset pair directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file (profile defaults + pinned fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iterative_epochs: Option<usize>,
    #[arg(long)]
    pub r_sa: Option<f64>,
    /// Unsupervised reference modality (v or s).
    #[arg(long = "ref")]
    pub unsup_ref: Option<String>,
    #[arg(long)]
    pub no_ffn: bool,
    #[arg(long)]
    pub no_licl: bool,
    #[arg(long)]
    pub use_l_xi: bool,
    /// Enable hard-negative replay (supervised mode only).
    #[arg(long)]
    pub merp: bool,
    #[arg(long)]
    pub merp_per_epoch: bool,
    /// Remove a modality (repeatable), e.g. --drop-modality v.
    #[arg(long = "drop-modality")]
    pub drop_modality: Vec<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub n_dic: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub k_e: Option<usize>,
    #[arg(long)]
    pub k_s: Option<u32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Desk,
    PaperDbp,
    PaperFbdb,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Supervised,
    Iterative,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, ValueEnum, Default, PartialEq, Eq)]
pub enum DirectionArg {
    #[default]
    Both,
    Fwd,
    Bwd,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory holding the parameter dump.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset pair directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    /// Where to write the machine-readable report (default: <run>/eval_report.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct WeightsArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the tidy CSV (default: <run>/weights.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit-code classification of an error.
pub fn exit_code(err: &MmeaError) -> i32 {
    match err {
        MmeaError::Config(_) => 1,
        MmeaError::NumericalAbort { .. } | MmeaError::Tensor(_) => 3,
        _ => 2,
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Weights(args) => cmd_weights(&args),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        entities: args.n,
        relation_types: args.rel_types,
        attribute_types: args.attr_types,
        avg_degree: args.avg_degree,
        attrs_per_entity: args.attrs_per_entity,
        visual_dim: args.visual_dim,
        surface_dim: args.surface_dim,
        with_visual: !args.no_visual,
        with_surface: !args.no_surface,
        rewire_rate: args.rewire,
        feature_noise_sd: args.feature_noise,
        feature_offset: args.feature_offset,
        visual_missing_rate: args.visual_missing,
    };
    cfg.validate().map_err(usage)?;
    let seed = args.seed.or_else(env_seed).unwrap_or(0);
    let (kg1, kg2, pairs, report) = generate_synthetic_pair(&cfg, seed)?;

    // stage into a sibling, rename on success: no partial output on failure
    let staging = staging_path(&args.out);
    let _ = fs::remove_dir_all(&staging);
    write_pair(&staging, &kg1, &kg2, &pairs).inspect_err(|_| {
        let _ = fs::remove_dir_all(&staging);
    })?;
    let _ = fs::remove_dir_all(&args.out);
    fs::rename(&staging, &args.out)
        .map_err(|e| MmeaError::io(format!("moving output to {}", args.out.display()), e))?;

    println!(
        "generated pair: {} entities/side, {} triples ({} rewired), {} attr assignments ({} rewired), {} visual rows missing in kg2",
        args.n,
        report.triples,
        report.rewired_triples,
        report.attr_assignments,
        report.rewired_attrs,
        report.missing_visual
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    target.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

fn usage(err: MmeaError) -> MmeaError {
    match err {
        MmeaError::Config(msg) => MmeaError::Config(msg),
        other => MmeaError::Config(other.to_string()),
    }
}

/// Resolves the run configuration from profile/config file plus CLI flags.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, args.profile) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| MmeaError::io(format!("reading {}", path.display()), e))?;
            RunConfig::from_json(&text)?
        }
        (None, Some(p)) => RunConfig::for_profile(match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::PaperDbp => Profile::PaperDbp,
            ProfileArg::PaperFbdb => Profile::PaperFbdb,
        }),
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed.or_else(env_seed) {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::Iterative => TrainMode::Iterative,
            ModeArg::Unsupervised => TrainMode::Unsupervised,
        };
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.iterative_epochs {
        cfg.iterative_epochs = v;
    }
    if let Some(v) = args.r_sa {
        cfg.r_sa = v;
    }
    if let Some(v) = &args.unsup_ref {
        cfg.unsup_ref = v.clone();
    }
    if args.no_ffn {
        cfg.use_ffn = false;
    }
    if args.no_licl {
        cfg.use_licl = false;
    }
    if args.use_l_xi {
        cfg.use_l_xi = true;
    }
    if args.merp {
        cfg.use_merp = true;
    }
    if args.merp_per_epoch {
        cfg.merp_per_epoch = true;
    }
    for dropped in &args.drop_modality {
        cfg.modalities.retain(|m| m != dropped);
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.peak_lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = args.n_dic {
        cfg.n_dic = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.k_e {
        cfg.k_e = v;
    }
    if let Some(v) = args.k_s {
        cfg.k_s = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a dataset pair and prepares it under a config: split + features.
pub fn load_and_prepare(
    data: &Path,
    cfg: &RunConfig,
) -> Result<(Mmkg, Mmkg, AlignmentSplit, PreparedPair)> {
    let (kg1, kg2, pairs) = load_pair(data)?;
    let split = split_alignments(&pairs, cfg.r_sa, cfg.seed)?;
    let prepared = prepare_pair(&kg1, &kg2, &cfg.prepare_options()?)?;
    for m in &prepared.skipped_modalities {
        eprintln!("note: modality {m} unavailable in this dataset, skipped");
    }
    if !prepared.dropped_types.is_empty() {
        eprintln!(
            "warning: {} type labels fell outside the capped vocabulary",
            prepared.dropped_types.len()
        );
    }
    Ok((kg1, kg2, split, prepared))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let (kg1, kg2, split, prepared) = load_and_prepare(&args.data, &cfg)?;
    let mut n_dic_cfg = cfg.clone();
    n_dic_cfg.n_dic = cfg.resolved_n_dic(kg1.entity_count(), kg2.entity_count());

    fs::create_dir_all(&args.out)
        .map_err(|e| MmeaError::io(format!("creating {}", args.out.display()), e))?;
    rundir::write_config(&args.out, &n_dic_cfg)?;

    let settings = n_dic_cfg.train_settings()?;
    let started = Instant::now();
    let outcome = match train(&kg1, &kg2, &prepared, &split, &settings) {
        Ok(o) => o,
        Err(err) => {
            if let MmeaError::NumericalAbort { epoch, step, detail } = &err {
                let snapshot = json!({
                    "epoch": epoch,
                    "step": step,
                    "detail": detail,
                });
                let _ = fs::write(
                    args.out.join("abort_snapshot.json"),
                    serde_json::to_string_pretty(&snapshot).unwrap_or_default(),
                );
            }
            return Err(err);
        }
    };
    let wall = started.elapsed();

    rundir::write_params(&args.out, &prepared.spec, &outcome.store)?;
    rundir::write_log(&args.out, &outcome.log)?;
    rundir::write_curves(&args.out, &outcome.log)?;
    let report = json!({
        "mode": settings.mode.to_string(),
        "epochs_run": outcome.log.len(),
        "wall_seconds": wall.as_secs_f64(),
        "metrics": rundir::metrics_to_value(&outcome.final_metrics),
        "seed_count_initial": outcome.initial_seed_count,
        "seed_count_final": outcome.final_seed_count,
        "promoted_pairs": outcome.promoted.len(),
        "pseudo_seed": outcome.pseudo_seed,
        "notes": outcome.notes,
        "skipped_modalities": prepared.skipped_modalities.iter().map(|m| m.tag()).collect::<Vec<_>>(),
    });
    rundir::write_report(&args.out, &report)?;

    for note in &outcome.notes {
        eprintln!("note: {note}");
    }
    println!("{}", outcome.final_metrics.render());
    if let Some(p) = &outcome.pseudo_seed {
        println!(
            "pseudo seeds: {} used (requested {}), precision {:.4}",
            p.used, p.requested, p.precision
        );
    }
    println!(
        "seeds {} -> {} ({} promoted), wall {:.1}s",
        outcome.initial_seed_count,
        outcome.final_seed_count,
        outcome.promoted.len(),
        wall.as_secs_f64()
    );
    println!("run directory: {}", args.out.display());
    Ok(())
}

/// Shared preamble for eval/weights: reload config + params, re-prepare the
/// dataset, and make sure the dump actually matches it.
fn reload(run: &Path, data: &Path) -> Result<(RunConfig, Mmkg, Mmkg, AlignmentSplit, PreparedPair, crate::model::ParameterStore)> {
    let cfg = rundir::load_config(run)?;
    let (manifest, store) = rundir::load_params(run)?;
    let (kg1, kg2, split, prepared) = load_and_prepare(data, &cfg)?;
    let spec = manifest.spec();
    if spec.modalities != prepared.spec.modalities
        || spec.d != prepared.spec.d
        || spec.entities_kg1 != prepared.spec.entities_kg1
        || spec.entities_kg2 != prepared.spec.entities_kg2
        || spec.feature_dims != prepared.spec.feature_dims
    {
        return Err(MmeaError::Invalid(
            "parameter dump does not match this dataset/config (dims, entities or modalities differ)"
                .into(),
        ));
    }
    Ok((cfg, kg1, kg2, split, prepared, store))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, kg1, kg2, split, prepared, store) = reload(&args.run, &args.data)?;
    let ids1: Vec<i64> = kg1.entities.iter().map(|e| e.id).collect();
    let ids2: Vec<i64> = kg2.entities.iter().map(|e| e.id).collect();
    let metrics: MetricsReport = evaluate(
        &prepared.spec,
        &store,
        &prepared.kg1,
        &prepared.kg2,
        &split.test,
        &ids1,
        &ids2,
        cfg.candidate_pool,
    )?;

    match args.direction {
        DirectionArg::Both => print!("{}", metrics.render()),
        DirectionArg::Fwd => {
            let m = &metrics.forward;
            println!(
                "kg1->kg2   hits@1 {:.4}  hits@10 {:.4}  mrr {:.4}  mr {:.2}",
                m.hits1, m.hits10, m.mrr, m.mr
            );
        }
        DirectionArg::Bwd => {
            let m = &metrics.backward;
            println!(
                "kg2->kg1   hits@1 {:.4}  hits@10 {:.4}  mrr {:.4}  mr {:.2}",
                m.hits1, m.hits10, m.mrr, m.mr
            );
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join("eval_report.json"));
    fs::write(
        &out,
        serde_json::to_string_pretty(&metrics).map_err(|e| MmeaError::json("eval report", e))?,
    )
    .map_err(|e| MmeaError::io(format!("writing {}", out.display()), e))?;
    Ok(())
}

pub fn cmd_weights(args: &WeightsArgs) -> Result<()> {
    let (_cfg, kg1, kg2, _split, prepared, store) = reload(&args.run, &args.data)?;
    let ids1: Vec<i64> = kg1.entities.iter().map(|e| e.id).collect();
    let ids2: Vec<i64> = kg2.entities.iter().map(|e| e.id).collect();
    let r1 = weight_report(&prepared.spec, &store, &prepared.kg1, Side::Kg1, &ids1)?;
    let r2 = weight_report(&prepared.spec, &store, &prepared.kg2, Side::Kg2, &ids2)?;

    let mut csv = String::from("kg,entity_id,");
    csv.push_str(
        &prepared
            .spec
            .modalities
            .iter()
            .map(|m| format!("w_{m}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    csv.push_str(",argmax\n");
    for (tag, report) in [("kg1", &r1), ("kg2", &r2)] {
        for (id, weights) in &report.rows {
            let argmax = weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| report.modalities[k].tag())
                .unwrap_or("g");
            csv.push_str(&format!(
                "{tag},{id},{},{argmax}\n",
                weights
                    .iter()
                    .map(|w| format!("{w:.9}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join("weights.csv"));
    fs::write(&out, csv).map_err(|e| MmeaError::io(format!("writing {}", out.display()), e))?;

    println!("modality  mean_w(kg1)  mean_w(kg2)  argmax#(kg1)  argmax#(kg2)");
    for (k, m) in prepared.spec.modalities.iter().enumerate() {
        println!(
            "{:<9} {:<12.4} {:<12.4} {:<13} {}",
            m.tag(),
            r1.mean[k],
            r2.mean[k],
            r1.argmax_histogram[k],
            r2.argmax_histogram[k]
        );
    }
    let summary = json!({
        "modalities": prepared.spec.modalities.iter().map(|m| m.tag()).collect::<Vec<_>>(),
        "kg1": {"mean": r1.mean, "argmax_histogram": r1.argmax_histogram},
        "kg2": {"mean": r2.mean, "argmax_histogram": r2.argmax_histogram},
    });
    fs::write(
        args.run.join("weights_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| MmeaError::json("summary", e))?,
    )
    .map_err(|e| MmeaError::io("writing weights summary", e))?;
    println!("wrote {}", out.display());
    Ok(())
}
