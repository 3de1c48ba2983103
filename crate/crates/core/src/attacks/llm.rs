//! LLM token recovery.
//!
//! The adversary holds a transcript of its own observations from a batched
//! victim session and recovers the victim's tokens one position at a time:
//! rank candidates by a prior, probe each candidate co-batched with the
//! recorded adversary state, and stop at the first observation within
//! `epsilon` of the transcript entry. Determinism of the engine makes the
//! true token an exact (distance zero) match whenever the recovered prefix
//! is correct.

use std::time::Instant;

use crate::attacks::{PriorSource, RecoveryConfig};
use crate::engine::{
    observation_distance, probe_with_candidate, Observation, ObsMode, SessionTranscript,
};
use crate::error::{Error, Result};
use crate::model::corpus::TokenId;
use crate::model::transformer::{lm_logits_for_prefix, Transformer};
use crate::quant::QuantConfig;
use crate::tensor::log_softmax;

/// Everything a probe needs besides the per-position state.
#[derive(Debug, Clone)]
pub struct ProbeEnv<'m> {
    pub model: &'m Transformer,
    pub cfg: QuantConfig,
    pub mode: ObsMode,
    /// Sequence-initial token distribution (for [`PriorSource::UnigramInitial`]).
    pub initial_prior: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionOutcome {
    pub token: TokenId,
    pub queries: usize,
    /// Whether the returned token matched below epsilon (vs argmin fallback).
    pub matched: bool,
    /// Query budget or wall-clock deadline exhausted at this position.
    pub timed_out: bool,
}

/// Recovered sequence plus per-position accounting.
#[derive(Debug, Clone, Default)]
pub struct Recovery {
    pub tokens: Vec<TokenId>,
    pub queries: Vec<usize>,
    pub matched: Vec<bool>,
    pub timed_out: Vec<bool>,
    pub elapsed_ms: Vec<f64>,
}

impl Recovery {
    pub fn push(&mut self, o: PositionOutcome, elapsed_ms: f64) {
        self.tokens.push(o.token);
        self.queries.push(o.queries);
        self.matched.push(o.matched);
        self.timed_out.push(o.timed_out);
        self.elapsed_ms.push(elapsed_ms);
    }

    pub fn any_timeout(&self) -> bool {
        self.timed_out.iter().any(|&t| t)
    }

    pub fn total_queries(&self) -> usize {
        self.queries.iter().sum()
    }

    /// Attach per-position correctness against the known ground truth.
    pub fn scored(self, secret: &[TokenId]) -> RecoveryResult {
        assert_eq!(self.tokens.len(), secret.len());
        let correct = self
            .tokens
            .iter()
            .zip(secret)
            .map(|(a, b)| a == b)
            .collect();
        RecoveryResult {
            correct,
            tokens: self.tokens,
            queries: self.queries,
            matched: self.matched,
            timed_out: self.timed_out,
            elapsed_ms: self.elapsed_ms,
        }
    }
}

/// [`Recovery`] with ground-truth correctness filled in by the harness.
#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub tokens: Vec<TokenId>,
    pub queries: Vec<usize>,
    pub matched: Vec<bool>,
    pub timed_out: Vec<bool>,
    pub elapsed_ms: Vec<f64>,
    pub correct: Vec<bool>,
}

impl RecoveryResult {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }

    pub fn any_timeout(&self) -> bool {
        self.timed_out.iter().any(|&t| t)
    }
}

/// Candidate order: indices of `scores` sorted descending, ties by token id.
fn ranking_desc(scores: &[f32]) -> Vec<TokenId> {
    let mut idx: Vec<TokenId> = (0..scores.len() as TokenId).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx
}

/// Position-1 ranking from the attack model: the distribution after a
/// boundary separator (space), matching how in-distribution secrets begin.
/// Falls back to token-id order if the model has no vocabulary or no space.
pub fn initial_ranking_from_model(model: &Transformer) -> Result<Vec<TokenId>> {
    let sep = model
        .vocab
        .as_ref()
        .and_then(|v| v.encode_char(' ').ok());
    match sep {
        Some(sep) => {
            let logits = lm_logits_for_prefix(model, &[sep])?;
            Ok(ranking_desc(&log_softmax(&logits)))
        }
        None => Ok((0..model.spec.vocab_size as TokenId).collect()),
    }
}

fn position1_ranking(env: &ProbeEnv, rcfg: &RecoveryConfig) -> Result<Vec<TokenId>> {
    match rcfg.prior_source {
        PriorSource::None => Ok((0..env.model.spec.vocab_size as TokenId).collect()),
        PriorSource::UnigramInitial => {
            let prior = env.initial_prior.as_ref().ok_or_else(|| {
                Error::InvalidSpec("unigram-initial prior requested but not provided".into())
            })?;
            Ok(ranking_desc(prior))
        }
        PriorSource::Model => initial_ranking_from_model(env.model),
    }
}

struct ScanState {
    queries: usize,
    best_token: TokenId,
    best_delta: f32,
}

/// Sequential candidate scan with early termination at delta < epsilon.
fn scan_candidates(
    env: &ProbeEnv,
    ranking: &[TokenId],
    adversary_tokens: &[TokenId],
    context: &[TokenId],
    target: &Observation,
    rcfg: &RecoveryConfig,
    deadline: Option<Instant>,
) -> Result<PositionOutcome> {
    let mut st = ScanState {
        queries: 0,
        best_token: ranking[0],
        best_delta: f32::INFINITY,
    };
    for &cand in ranking {
        if st.queries >= rcfg.max_queries_per_token {
            return Ok(PositionOutcome {
                token: st.best_token,
                queries: st.queries,
                matched: false,
                timed_out: true,
            });
        }
        if let Some(d) = deadline {
            if Instant::now() >= d {
                return Ok(PositionOutcome {
                    token: st.best_token,
                    queries: st.queries,
                    matched: false,
                    timed_out: true,
                });
            }
        }
        let obs = probe_with_candidate(
            env.model,
            env.cfg,
            env.mode,
            adversary_tokens,
            context,
            cand,
            rcfg.access,
        )?;
        st.queries += 1;
        let delta = observation_distance(&obs, target)?;
        if delta < st.best_delta {
            st.best_delta = delta;
            st.best_token = cand;
        }
        if delta < rcfg.epsilon {
            return Ok(PositionOutcome {
                token: cand,
                queries: st.queries,
                matched: true,
                timed_out: false,
            });
        }
    }
    // exhausted the vocabulary: argmin guess, below-threshold flag false
    Ok(PositionOutcome {
        token: st.best_token,
        queries: st.queries,
        matched: false,
        timed_out: false,
    })
}

/// Recover the first secret token (no context yet).
pub fn recover_first_token(
    env: &ProbeEnv,
    transcript: &SessionTranscript,
    rcfg: &RecoveryConfig,
) -> Result<PositionOutcome> {
    recover_first_token_inner(env, transcript, rcfg, None)
}

fn recover_first_token_inner(
    env: &ProbeEnv,
    transcript: &SessionTranscript,
    rcfg: &RecoveryConfig,
    deadline: Option<Instant>,
) -> Result<PositionOutcome> {
    rcfg.validate()?;
    assert!(!transcript.observations.is_empty(), "empty transcript");
    let ranking = position1_ranking(env, rcfg)?;
    scan_candidates(
        env,
        &ranking,
        &transcript.adversary_tokens[..1],
        &[],
        &transcript.observations[0],
        rcfg,
        deadline,
    )
}

/// Recover the token at 1-based position `i > 1`, given the recovered prefix.
/// Candidates are ranked descending by the attack model's `p(t | prefix)`
/// (full-precision forward), ties by token id.
pub fn recover_token_at(
    env: &ProbeEnv,
    i: usize,
    transcript: &SessionTranscript,
    prefix: &[TokenId],
    rcfg: &RecoveryConfig,
) -> Result<PositionOutcome> {
    recover_token_at_inner(env, i, transcript, prefix, rcfg, None)
}

fn recover_token_at_inner(
    env: &ProbeEnv,
    i: usize,
    transcript: &SessionTranscript,
    prefix: &[TokenId],
    rcfg: &RecoveryConfig,
    deadline: Option<Instant>,
) -> Result<PositionOutcome> {
    rcfg.validate()?;
    assert!(i > 1 && prefix.len() == i - 1, "prefix/position mismatch");
    let ranking = match rcfg.prior_source {
        PriorSource::None => (0..env.model.spec.vocab_size as TokenId).collect(),
        _ => {
            let logits = lm_logits_for_prefix(env.model, prefix)?;
            ranking_desc(&log_softmax(&logits))
        }
    };
    scan_candidates(
        env,
        &ranking,
        &transcript.adversary_tokens[..i],
        prefix,
        &transcript.observations[i - 1],
        rcfg,
        deadline,
    )
}

/// Chain the per-position recoveries over the first `n` transcript entries.
/// Budget or deadline exhaustion marks the position timed out and continues
/// with the argmin guess; errors from the engine propagate.
pub fn recover_sequence(
    env: &ProbeEnv,
    transcript: &SessionTranscript,
    n: usize,
    rcfg: &RecoveryConfig,
    deadline: Option<Instant>,
) -> Result<Recovery> {
    rcfg.validate()?;
    assert!(n <= transcript.observations.len());
    let mut rec = Recovery::default();
    for i in 1..=n {
        let started = Instant::now();
        let outcome = if i == 1 {
            recover_first_token_inner(env, transcript, rcfg, deadline)?
        } else {
            recover_token_at_inner(env, i, transcript, &rec.tokens.clone(), rcfg, deadline)?
        };
        rec.push(outcome, started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// experiment harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LlmExperiment {
    pub cfg: QuantConfig,
    pub mode: ObsMode,
    pub rcfg: RecoveryConfig,
    /// Wall-clock budget per sequence; `None` means unlimited.
    pub timeout: Option<std::time::Duration>,
}

#[derive(Debug, Clone)]
pub struct LlmRunRecord {
    pub run: usize,
    pub secret: Vec<TokenId>,
    pub transcript: SessionTranscript,
    pub result: RecoveryResult,
}

/// Run the full victim-session + recovery pipeline over a batch of secrets,
/// one derived seed per run (adversary start token), dispatched in parallel
/// with order-stable results.
pub fn run_llm_experiment(
    env: &ProbeEnv,
    exp: &LlmExperiment,
    secrets: &[Vec<TokenId>],
    seed: u64,
) -> Result<Vec<LlmRunRecord>> {
    let records = crate::parallel::map_indexed(secrets.len(), |r| -> Result<LlmRunRecord> {
        let mut rng = crate::rng::Rng::derive(seed, r as u64);
        let secret = &secrets[r];
        let adversary_start = rng.below(env.model.spec.vocab_size) as TokenId;
        let transcript =
            crate::engine::run_victim_session(env.model, exp.cfg, exp.mode, adversary_start, secret)?;
        let deadline = exp.timeout.map(|t| Instant::now() + t);
        let recovery = recover_sequence(env, &transcript, secret.len(), &exp.rcfg, deadline)?;
        Ok(LlmRunRecord {
            run: r,
            secret: secret.clone(),
            result: recovery.scored(secret),
            transcript,
        })
    });
    records.into_iter().collect()
}

/// Aggregate across runs with timed-out runs excluded from accuracy and query
/// means but counted in `runs`.
#[derive(Debug, Clone, Copy)]
pub struct LlmSummary {
    pub runs: usize,
    pub completed: usize,
    pub token_accuracy: f64,
    pub mean_queries: f64,
    pub mean_queries_pos1: f64,
    /// Mean queries over positions 2..n.
    pub mean_queries_rest: f64,
}

pub fn summarize_llm(records: &[LlmRunRecord]) -> LlmSummary {
    let mut completed = 0usize;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut queries = 0usize;
    let mut q_pos1 = 0usize;
    let mut q_rest = 0usize;
    let mut n_rest = 0usize;
    for rec in records {
        if rec.result.any_timeout() {
            continue;
        }
        completed += 1;
        tokens += rec.result.correct.len();
        correct += rec.result.correct.iter().filter(|&&c| c).count();
        queries += rec.result.queries.iter().sum::<usize>();
        q_pos1 += rec.result.queries[0];
        q_rest += rec.result.queries[1..].iter().sum::<usize>();
        n_rest += rec.result.queries.len().saturating_sub(1);
    }
    LlmSummary {
        runs: records.len(),
        completed,
        token_accuracy: if tokens > 0 {
            correct as f64 / tokens as f64
        } else {
            0.0
        },
        mean_queries: if tokens > 0 {
            queries as f64 / tokens as f64
        } else {
            0.0
        },
        mean_queries_pos1: if completed > 0 {
            q_pos1 as f64 / completed as f64
        } else {
            0.0
        },
        mean_queries_rest: if n_rest > 0 {
            q_rest as f64 / n_rest as f64
        } else {
            0.0
        },
    }
}

// ---------------------------------------------------------------------------
// candidate scoring (shared with the classification attack)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub candidate: usize,
    pub score: f32,
}

/// Scores `||o_s - o_c||_2` for every candidate observation, sorted
/// ascending, ties by candidate id.
pub fn score_candidates(
    secret_obs: &Observation,
    candidate_obs: &[Observation],
) -> Result<Vec<CandidateScore>> {
    let mut scores = Vec::with_capacity(candidate_obs.len());
    for (i, obs) in candidate_obs.iter().enumerate() {
        scores.push(CandidateScore {
            candidate: i,
            score: observation_distance(secret_obs, obs)?,
        });
    }
    scores.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap()
            .then(a.candidate.cmp(&b.candidate))
    });
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_victim_session, AccessMode, ObsPayload};
    use crate::model::transformer::TransformerSpec;
    use crate::rng::Rng;

    fn model() -> Transformer {
        let spec = TransformerSpec {
            vocab_size: 29,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
        };
        Transformer::init(spec, None, &mut Rng::new(41)).unwrap()
    }

    fn env(model: &Transformer) -> ProbeEnv<'_> {
        ProbeEnv {
            model,
            cfg: QuantConfig::per_tensor_int8(),
            mode: ObsMode::Top1Logprob,
            initial_prior: None,
        }
    }

    #[test]
    fn first_token_prior_rank_one_single_query() {
        let m = model();
        let secret = [13u32];
        let t = run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, 5, &secret)
            .unwrap();
        // craft a prior putting the true token first
        let mut prior = vec![0.0f32; 29];
        prior[13] = 1.0;
        let mut e = env(&m);
        e.initial_prior = Some(prior);
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::UnigramInitial,
            ..Default::default()
        };
        let out = recover_first_token(&e, &t, &rcfg).unwrap();
        assert_eq!(out.token, 13);
        assert_eq!(out.queries, 1);
        assert!(out.matched);
    }

    #[test]
    fn first_token_id_scan_query_count() {
        let m = model();
        let k = 7u32;
        let t = run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, 5, &[k])
            .unwrap();
        let e = env(&m);
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::None,
            ..Default::default()
        };
        let out = recover_first_token(&e, &t, &rcfg).unwrap();
        assert_eq!(out.token, k);
        // id-order scan reaches token k after k+1 probes unless an earlier
        // candidate produced a bit-identical observation (it must not here)
        assert_eq!(out.queries, (k + 1) as usize);
    }

    #[test]
    fn budget_exhaustion_flags_timeout() {
        let m = model();
        let t = run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, 5, &[20])
            .unwrap();
        let e = env(&m);
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::None,
            max_queries_per_token: 3,
            ..Default::default()
        };
        let out = recover_first_token(&e, &t, &rcfg).unwrap();
        assert_eq!(out.queries, 3);
        assert!(out.timed_out);
        assert!(!out.matched);
    }

    #[test]
    fn no_signal_degrades_to_prior_argmax() {
        // per-token isolation: every candidate matches below epsilon, so the
        // first-hit rule returns the prior's first candidate
        let m = model();
        let cfg = QuantConfig::per_token_int8();
        let secret = [17u32];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 5, &secret).unwrap();
        let e = ProbeEnv {
            model: &m,
            cfg,
            mode: ObsMode::Top1Logprob,
            initial_prior: None,
        };
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::None,
            ..Default::default()
        };
        let out = recover_first_token(&e, &t, &rcfg).unwrap();
        assert_eq!(out.token, 0, "first candidate in id order");
        assert_eq!(out.queries, 1);
        assert!(out.matched, "zero delta everywhere under isolation");
    }

    #[test]
    fn sequence_recovery_on_random_model() {
        let m = model();
        let cfg = QuantConfig::per_tensor_int8();
        let secret = [3u32, 19, 11, 26];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 8, &secret).unwrap();
        let e = env(&m);
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::None,
            access: AccessMode::WhiteBox,
            ..Default::default()
        };
        let rec = recover_sequence(&e, &t, secret.len(), &rcfg, None).unwrap();
        let result = rec.scored(&secret);
        assert_eq!(result.accuracy(), 1.0, "tokens {:?}", result.tokens);
        assert_eq!(result.queries.len(), secret.len());
    }

    #[test]
    fn query_counts_match_probe_invocations() {
        // the query count must equal the scan position of the true token
        let m = model();
        let cfg = QuantConfig::per_tensor_int8();
        let secret = [9u32, 2];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 8, &secret).unwrap();
        let e = env(&m);
        let rcfg = RecoveryConfig {
            prior_source: PriorSource::None,
            ..Default::default()
        };
        let rec = recover_sequence(&e, &t, 2, &rcfg, None).unwrap();
        assert_eq!(rec.queries[0], 10); // id order: tokens 0..=9
        assert!(rec.total_queries() >= rec.queries[0] + 1);
    }

    #[test]
    fn score_candidates_exact_match_first() {
        let mk = |v: f32| Observation {
            step: 0,
            payload: ObsPayload::Top1 {
                token: 1,
                logprob: v,
            },
        };
        let secret = mk(-1.25);
        let cands = vec![mk(-3.0), mk(-1.25), mk(-1.3)];
        let ranked = score_candidates(&secret, &cands).unwrap();
        assert_eq!(ranked[0].candidate, 1);
        assert_eq!(ranked[0].score, 0.0);
        assert_eq!(ranked[1].candidate, 2);
    }

    #[test]
    fn score_ties_break_by_candidate_id() {
        let mk = |v: f32| Observation {
            step: 0,
            payload: ObsPayload::Top1 {
                token: 1,
                logprob: v,
            },
        };
        let secret = mk(-1.0);
        let cands = vec![mk(-2.0), mk(-2.0), mk(-2.0)];
        let ranked = score_candidates(&secret, &cands).unwrap();
        assert_eq!(
            ranked.iter().map(|c| c.candidate).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }
}
