//! Contrastive objectives, hard-negative replay, optimizer/schedule, and the
//! supervised / iterative / unsupervised training loops.

mod iterative;
mod losses;
mod merp;
mod optim;
mod pseudo;
mod run;

pub use iterative::{iterative_propose, IterState};
pub use losses::{
    alignment_probability, direction_loss, modal_loss, total_loss, BatchEmbeddings,
    LossBreakdown, LossConfig, MerpNegatives, P_EPSILON,
};
pub use merp::{merp_expand_negatives, merp_refresh, AnchorNegatives, MerpEntry, MerpState, NegRef};
pub use optim::{AdamW, CosineWarmup};
pub use pseudo::{build_pseudo_seed, PseudoSeedDict};
pub use run::{
    train, EpochRecord, TrainMode, TrainOutcome, TrainSettings,
};
