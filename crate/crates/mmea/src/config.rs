//! Run configuration: a JSON document with profile-derived defaults and
//! CLI-flag overrides, fully serialized into every run directory.

use serde::{Deserialize, Serialize};

use crate::error::{MmeaError, Result};
use crate::eval::CandidatePool;
use crate::kg::Modality;
use crate::model::PrepareOptions;
use crate::training::{LossConfig, TrainMode, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small dims and epochs, sized for synthetic pairs on one CPU core.
    #[default]
    Desk,
    /// Bilingual-corpus shape: d=300, FFN on, d_v=2048, capped BoW vocab.
    PaperDbp,
    /// Monolingual-corpus shape: d=300, FFN off, d_v=4096.
    PaperFbdb,
}

fn default_one() -> usize {
    1
}

/// The full run configuration. Field defaults follow the selected profile;
/// any field may be pinned in the JSON config file or by a CLI flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Hidden dimension d.
    pub d: usize,
    /// FFN intermediate dimension.
    pub d_in: usize,
    /// Cross-modal attention heads.
    pub mhca_heads: usize,
    /// Graph attention heads.
    pub gat_heads: usize,
    pub temperature: f64,
    pub use_ffn: bool,
    pub use_licl: bool,
    pub use_l_xi: bool,
    pub use_merp: bool,
    pub normalize_embeddings: bool,
    /// Active modalities (graph is always on); entries from {g,r,a,v,s}.
    pub modalities: Vec<String>,
    pub mode: TrainMode,
    pub epochs: usize,
    pub iterative_epochs: usize,
    pub k_e: usize,
    pub k_s: u32,
    /// Pseudo seed capacity; 0 means 30% of the smaller entity count.
    pub n_dic: usize,
    /// Unsupervised reference modality tag (v or s).
    pub unsup_ref: String,
    pub r_sa: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    pub merp_per_epoch: bool,
    pub candidate_pool: CandidatePool,
    /// Cap on the relation BoW vocabulary (0 = no cap).
    pub d_r_cap: usize,
    /// Cap on the attribute BoW vocabulary (0 = no cap).
    pub d_a_cap: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> RunConfig {
        let base = RunConfig {
            profile,
            seed: 0,
            d: 64,
            d_in: 400,
            mhca_heads: 1,
            gat_heads: 2,
            temperature: 0.1,
            use_ffn: true,
            use_licl: true,
            use_l_xi: false,
            use_merp: false,
            normalize_embeddings: true,
            modalities: vec!["g", "r", "a", "v", "s"]
                .into_iter()
                .map(String::from)
                .collect(),
            mode: TrainMode::Supervised,
            epochs: 300,
            iterative_epochs: 300,
            k_e: 5,
            k_s: 10,
            n_dic: 0,
            unsup_ref: "v".into(),
            r_sa: 0.3,
            batch_size: 3500,
            peak_lr: 5e-3,
            warmup_frac: 0.15,
            weight_decay: 0.01,
            eval_every: 1,
            merp_per_epoch: false,
            candidate_pool: CandidatePool::TestOnly,
            d_r_cap: 0,
            d_a_cap: 0,
        };
        match profile {
            Profile::Desk => base,
            Profile::PaperDbp => RunConfig {
                d: 300,
                epochs: 500,
                iterative_epochs: 500,
                use_ffn: true,
                d_r_cap: 1000,
                d_a_cap: 1000,
                peak_lr: 5e-4,
                merp_per_epoch: true,
                ..base
            },
            Profile::PaperFbdb => RunConfig {
                d: 300,
                epochs: 500,
                iterative_epochs: 500,
                use_ffn: false,
                d_r_cap: 1000,
                d_a_cap: 1000,
                peak_lr: 5e-4,
                merp_per_epoch: true,
                r_sa: 0.2,
                ..base
            },
        }
    }

    /// Loads a JSON config document over the profile defaults: the file may
    /// pin any subset of fields (it names its profile first).
    pub fn from_json(text: &str) -> Result<RunConfig> {
        #[derive(Deserialize)]
        struct ProfileOnly {
            #[serde(default)]
            profile: Profile,
        }
        let p: ProfileOnly = serde_json::from_str(text)
            .map_err(|e| MmeaError::json("parsing config profile", e))?;
        let mut base = serde_json::to_value(RunConfig::for_profile(p.profile))
            .map_err(|e| MmeaError::json("serializing defaults", e))?;
        let overrides: serde_json::Value =
            serde_json::from_str(text).map_err(|e| MmeaError::json("parsing config", e))?;
        if let (Some(base_map), Some(over_map)) = (base.as_object_mut(), overrides.as_object()) {
            for (k, v) in over_map {
                if !base_map.contains_key(k) {
                    return Err(MmeaError::Config(format!("unknown config key '{k}'")));
                }
                base_map.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(base).map_err(|e| MmeaError::json("applying config", e))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MmeaError::json("writing config", e))
    }

    pub fn parsed_modalities(&self) -> Result<Vec<Modality>> {
        let mut out = Vec::new();
        for tag in &self.modalities {
            let m = Modality::parse(tag)?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if !out.contains(&Modality::Graph) {
            out.push(Modality::Graph);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || !self.d.is_multiple_of(self.mhca_heads)
            || !self.d.is_multiple_of(self.gat_heads)
        {
            return Err(MmeaError::Config(format!(
                "hidden dim {} must be positive and divisible by both head counts ({}, {})",
                self.d, self.mhca_heads, self.gat_heads
            )));
        }
        if !(self.r_sa > 0.0 && self.r_sa < 1.0) {
            return Err(MmeaError::Config(format!(
                "seed alignment ratio {} outside (0, 1)",
                self.r_sa
            )));
        }
        self.parsed_modalities()?;
        Modality::parse(&self.unsup_ref)?;
        self.train_settings()?.validate()
    }

    pub fn prepare_options(&self) -> Result<PrepareOptions> {
        Ok(PrepareOptions {
            d: self.d,
            d_in: self.d_in,
            mhca_heads: self.mhca_heads,
            gat_heads: self.gat_heads,
            use_ffn: self.use_ffn,
            modalities: self.parsed_modalities()?,
            relation_vocab_cap: (self.d_r_cap > 0).then_some(self.d_r_cap),
            attribute_vocab_cap: (self.d_a_cap > 0).then_some(self.d_a_cap),
            seed: self.seed ^ 0xFEA7,
        })
    }

    /// Resolves the dictionary capacity against the actual entity counts.
    pub fn resolved_n_dic(&self, entities1: usize, entities2: usize) -> usize {
        if self.n_dic > 0 {
            self.n_dic
        } else {
            ((entities1.min(entities2) as f64) * 0.3).round() as usize
        }
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            loss: LossConfig {
                temperature: self.temperature,
                batch_size: self.batch_size,
                use_licl: self.use_licl,
                use_l_xi: self.use_l_xi,
                use_merp: self.use_merp,
                normalize_embeddings: self.normalize_embeddings,
            },
            mode: self.mode,
            epochs: self.epochs,
            iterative_epochs: self.iterative_epochs,
            k_e: self.k_e,
            k_s: self.k_s,
            n_dic: self.n_dic,
            unsup_ref: Modality::parse(&self.unsup_ref)?,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            seed: self.seed,
            eval_every: self.eval_every,
            merp_per_epoch: self.merp_per_epoch,
            candidate_pool: self.candidate_pool,
        })
    }
}
