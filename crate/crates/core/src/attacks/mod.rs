//! The two attacks built on the engine's observation surface: token-by-token
//! recovery against the LLM decode phase, and candidate scoring against the
//! classifiers, plus probe optimization and scale-profile analysis.

pub mod cls;
pub mod llm;

pub use cls::{
    knn_class_purity, run_cls_attack, select_probe, ClsAttackConfig, ClsRunRecord, ProbeStrategy,
    PurityReport,
};
pub use llm::{
    initial_ranking_from_model, recover_first_token, recover_sequence, recover_token_at,
    run_llm_experiment, score_candidates, summarize_llm, CandidateScore, LlmExperiment,
    LlmRunRecord, LlmSummary, PositionOutcome, ProbeEnv, Recovery, RecoveryResult,
};

use crate::engine::AccessMode;
use crate::error::{Error, Result};

/// Candidate-ordering source for position 1 (later positions always rank by
/// the attack model's conditional prior).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorSource {
    /// Attack-model distribution conditioned on a boundary separator.
    #[default]
    Model,
    /// Empirical sequence-initial distribution estimated from the corpus.
    UnigramInitial,
    /// Token-id order; no prior anywhere (baseline).
    None,
}

impl std::str::FromStr for PriorSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(PriorSource::Model),
            "unigram-initial" => Ok(PriorSource::UnigramInitial),
            "none" => Ok(PriorSource::None),
            other => Err(Error::InvalidSpec(format!("unknown prior source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RecoveryConfig {
    /// Match threshold on the observation distance.
    pub epsilon: f32,
    pub max_queries_per_token: usize,
    pub prior_source: PriorSource,
    pub access: AccessMode,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            epsilon: 1e-6,
            max_queries_per_token: usize::MAX,
            prior_source: PriorSource::Model,
            access: AccessMode::WhiteBox,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidSpec("epsilon must be positive".into()));
        }
        Ok(())
    }
}
