//! Batched serving simulator.
//!
//! Co-locates an adversary sequence with a victim (or candidate) sequence in
//! a persistent batch of two, drives the decode phase one token per row per
//! step, and exposes exactly the attacker-visible observation surface: the
//! adversary's own top-1 log probability (LLM mode) or full logit vector
//! (classification mode). Victim-row outputs never leave this module through
//! the attack-facing operations.

use crate::error::{Error, Result};
use crate::model::classifier::{forward_classifier, Classifier};
use crate::model::corpus::TokenId;
use crate::model::transformer::{forward_lm, KvCache, Transformer};
use crate::quant::{QuantConfig, ScaleRecord};
use crate::tensor::{l2_distance, log_softmax_top1, Tensor};

// ---------------------------------------------------------------------------
// observations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Adversary,
    Victim,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObsMode {
    /// Top-1 token id and its log probability; the minimal realistic surface.
    #[default]
    Top1Logprob,
    /// The full logit vector (used for the small classification problems).
    FullLogits,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsPayload {
    Top1 { token: TokenId, logprob: f32 },
    Full(Vec<f32>),
}

/// What one batch row sees after one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Decode step index (0-based).
    pub step: usize,
    pub payload: ObsPayload,
}

impl Observation {
    fn from_logits(step: usize, logits: &[f32], mode: ObsMode) -> Observation {
        let payload = match mode {
            ObsMode::Top1Logprob => {
                let (token, logprob) = log_softmax_top1(logits);
                ObsPayload::Top1 {
                    token: token as TokenId,
                    logprob,
                }
            }
            ObsMode::FullLogits => ObsPayload::Full(logits.to_vec()),
        };
        Observation { step, payload }
    }

    /// Payload as a vector for distance computations. Top-1 observations
    /// degrade to a single scalar (the log probability).
    pub fn payload_vec(&self) -> &[f32] {
        match &self.payload {
            ObsPayload::Top1 { logprob, .. } => std::slice::from_ref(logprob),
            ObsPayload::Full(v) => v,
        }
    }

    /// Greedy continuation token implied by this observation.
    pub fn argmax_token(&self) -> TokenId {
        match &self.payload {
            ObsPayload::Top1 { token, .. } => *token,
            ObsPayload::Full(v) => {
                let mut best = 0usize;
                for (i, &x) in v.iter().enumerate().skip(1) {
                    if x > v[best] {
                        best = i;
                    }
                }
                best as TokenId
            }
        }
    }
}

/// Distance between two observations. Full-logit payloads compare by L2;
/// top-1 payloads compare by |logprob difference| when the argmax ids agree
/// and are maximally distinguishable (infinity) when they do not, since a
/// different argmax is itself an observable change.
pub fn observation_distance(a: &Observation, b: &Observation) -> Result<f32> {
    if let (ObsPayload::Top1 { token: ta, .. }, ObsPayload::Top1 { token: tb, .. }) =
        (&a.payload, &b.payload)
    {
        if ta != tb {
            return Ok(f32::INFINITY);
        }
    }
    l2_distance(a.payload_vec(), b.payload_vec())
}

/// Per-layer scale records captured during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleProfile {
    pub layers: Vec<ScaleRecord>,
}

impl ScaleProfile {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Concatenated per-layer scales, the classification-attack signature.
    pub fn alphas(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|r| r.params.scales())
            .collect()
    }

    /// Mean per-layer activation range (max - min), the probe-selection
    /// criterion.
    pub fn mean_range(&self) -> f32 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|r| r.range()).sum::<f32>() / self.layers.len() as f32
    }
}

// ---------------------------------------------------------------------------
// LLM sessions
// ---------------------------------------------------------------------------

/// A persistent decode batch: row membership and order are fixed at creation
/// and stay fixed until a sequence finishes (continuous-batching persistence).
#[derive(Debug)]
pub struct Session<'m> {
    model: &'m Transformer,
    pub cfg: QuantConfig,
    pub mode: ObsMode,
    roles: Vec<Role>,
    caches: Vec<KvCache>,
    step: usize,
    finished: Vec<bool>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Transformer, cfg: QuantConfig, mode: ObsMode, roles: &[Role]) -> Session<'m> {
        assert_eq!(
            roles.iter().filter(|r| matches!(r, Role::Adversary)).count(),
            1,
            "exactly one adversary row per batch"
        );
        Session {
            model,
            cfg,
            mode,
            roles: roles.to_vec(),
            caches: roles
                .iter()
                .map(|_| KvCache::new(model.spec.n_layers))
                .collect(),
            step: 0,
            finished: vec![false; roles.len()],
        }
    }

    pub fn adversary_row(&self) -> usize {
        self.roles
            .iter()
            .position(|r| matches!(r, Role::Adversary))
            .unwrap()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn mark_finished(&mut self, row: usize) {
        self.finished[row] = true;
    }

    /// One decode step: one new token per active row, a single shared forward
    /// pass, one observation per row. Caches advance together.
    pub fn decode_step(&mut self, new_tokens: &[TokenId]) -> Result<Vec<Observation>> {
        self.decode_step_recorded(new_tokens, None)
    }

    pub fn decode_step_recorded(
        &mut self,
        new_tokens: &[TokenId],
        recorder: Option<&mut ScaleProfile>,
    ) -> Result<Vec<Observation>> {
        assert_eq!(new_tokens.len(), self.roles.len(), "one token per row");
        if let Some(row) = self.finished.iter().position(|&f| f) {
            return Err(Error::SequenceFinished(row));
        }
        let logits = forward_lm(
            self.model,
            new_tokens,
            &mut self.caches,
            &self.cfg,
            recorder.map(|p| &mut p.layers),
        )?;
        let obs = logits
            .iter()
            .map(|row| Observation::from_logits(self.step, row, self.mode))
            .collect();
        self.step += 1;
        Ok(obs)
    }
}

/// Transcript of a victim session: the adversary-visible record plus the
/// adversary's own token sequence (known to the attacker by construction).
#[derive(Debug, Clone)]
pub struct SessionTranscript {
    pub observations: Vec<Observation>,
    pub adversary_tokens: Vec<TokenId>,
}

/// Simulate the victim emitting `secret` token-by-token while the adversary
/// decodes greedily from `adversary_start`. Only adversary-row observations
/// are recorded; victim logits never leave the engine.
pub fn run_victim_session(
    model: &Transformer,
    cfg: QuantConfig,
    mode: ObsMode,
    adversary_start: TokenId,
    secret: &[TokenId],
) -> Result<SessionTranscript> {
    let mut session = Session::new(model, cfg, mode, &[Role::Adversary, Role::Victim]);
    let mut observations = Vec::with_capacity(secret.len());
    let mut adversary_tokens = Vec::with_capacity(secret.len());
    let mut next_adv = adversary_start;
    for &s_tok in secret {
        adversary_tokens.push(next_adv);
        let obs = session.decode_step(&[next_adv, s_tok])?;
        let adv_obs = obs.into_iter().next().unwrap();
        next_adv = adv_obs.argmax_token();
        observations.push(adv_obs);
    }
    Ok(SessionTranscript {
        observations,
        adversary_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccessMode {
    /// Local model access: the recorded adversary tokens are forced directly
    /// into the replayed batch (arbitrary cache states are constructible).
    #[default]
    WhiteBox,
    /// API-only access: the adversary sequence must be reproducible by greedy
    /// decoding; divergence during replay is an explicit error.
    BlackBox,
}

impl std::str::FromStr for AccessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white-box" | "whitebox" => Ok(AccessMode::WhiteBox),
            "black-box" | "blackbox" => Ok(AccessMode::BlackBox),
            other => Err(Error::InvalidSpec(format!("unknown access mode {other:?}"))),
        }
    }
}

/// Probe one candidate token at position `context.len() + 1`.
///
/// Replays the joint batch from scratch: the adversary row follows
/// `adversary_tokens` while the candidate row replays the recovered
/// `context`, then the candidate token. Replaying under the same config
/// reproduces the victim-session cache states exactly, so a candidate equal
/// to the true token yields a bit-identical adversary observation.
///
/// In black-box mode each replayed adversary token is checked against the
/// greedy continuation; a mismatch is reported as
/// [`Error::ReplayDivergence`].
pub fn probe_with_candidate(
    model: &Transformer,
    cfg: QuantConfig,
    mode: ObsMode,
    adversary_tokens: &[TokenId],
    context: &[TokenId],
    candidate: TokenId,
    access: AccessMode,
) -> Result<Observation> {
    assert_eq!(
        adversary_tokens.len(),
        context.len() + 1,
        "need one adversary token per step"
    );
    let mut session = Session::new(model, cfg, mode, &[Role::Adversary, Role::Candidate]);
    let mut expected_next: Option<TokenId> = None;
    for (j, &ctx_tok) in context.iter().enumerate() {
        let adv_tok = adversary_tokens[j];
        if let (AccessMode::BlackBox, Some(expected)) = (access, expected_next) {
            if expected != adv_tok {
                return Err(Error::ReplayDivergence {
                    step: j,
                    recorded: adv_tok,
                    replayed: expected,
                });
            }
        }
        let obs = session.decode_step(&[adv_tok, ctx_tok])?;
        expected_next = Some(obs[0].argmax_token());
    }
    let last = adversary_tokens[context.len()];
    if let (AccessMode::BlackBox, Some(expected)) = (access, expected_next) {
        if expected != last {
            return Err(Error::ReplayDivergence {
                step: context.len(),
                recorded: last,
                replayed: expected,
            });
        }
    }
    let obs = session.decode_step(&[last, candidate])?;
    Ok(obs.into_iter().next().unwrap())
}

// ---------------------------------------------------------------------------
// classifier pairs
// ---------------------------------------------------------------------------

/// One batched classifier forward pairing the adversary probe with an input;
/// returns the probe row's observation and, on request, the scale profile of
/// the shared pass.
pub fn classify_pair(
    model: &Classifier,
    probe: &[f32],
    input: &[f32],
    cfg: &QuantConfig,
    record_scales: bool,
) -> Result<(Observation, Option<ScaleProfile>)> {
    let x = Tensor::from_rows(&[probe, input])?;
    let mut profile = record_scales.then(ScaleProfile::default);
    let logits = forward_classifier(model, &x, cfg, profile.as_mut().map(|p| &mut p.layers))?;
    let obs = Observation::from_logits(0, logits.row(0), ObsMode::FullLogits);
    Ok((obs, profile))
}

/// Scale profile of a single input run alone (batch of one).
pub fn profile_single(model: &Classifier, input: &[f32], cfg: &QuantConfig) -> Result<ScaleProfile> {
    let x = Tensor::from_rows(&[input])?;
    let mut profile = ScaleProfile::default();
    forward_classifier(model, &x, cfg, Some(&mut profile.layers))?;
    Ok(profile)
}

// ---------------------------------------------------------------------------
// transcript export
// ---------------------------------------------------------------------------

/// CSV with columns `step,token_id,top1_logprob`, log probabilities at 18
/// significant digits. Only defined for top-1 transcripts.
pub fn transcript_csv(observations: &[Observation]) -> String {
    let mut out = String::from("step,token_id,top1_logprob\n");
    for obs in observations {
        match &obs.payload {
            ObsPayload::Top1 { token, logprob } => {
                out.push_str(&format!("{},{},{:.17e}\n", obs.step, token, logprob));
            }
            ObsPayload::Full(_) => unreachable!("transcript_csv expects top-1 observations"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::TransformerSpec;
    use crate::rng::Rng;

    fn model() -> Transformer {
        let spec = TransformerSpec {
            vocab_size: 23,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
        };
        Transformer::init(spec, None, &mut Rng::new(31)).unwrap()
    }

    #[test]
    fn empty_secret_empty_transcript() {
        let m = model();
        let t = run_victim_session(
            &m,
            QuantConfig::per_tensor_int8(),
            ObsMode::Top1Logprob,
            3,
            &[],
        )
        .unwrap();
        assert!(t.observations.is_empty());
        assert!(t.adversary_tokens.is_empty());
    }

    #[test]
    fn transcript_length_equals_secret_length() {
        let m = model();
        let secret = [5u32, 9, 1, 14];
        let t = run_victim_session(
            &m,
            QuantConfig::per_tensor_int8(),
            ObsMode::Top1Logprob,
            3,
            &secret,
        )
        .unwrap();
        assert_eq!(t.observations.len(), secret.len());
        assert_eq!(t.adversary_tokens.len(), secret.len());
        for (i, o) in t.observations.iter().enumerate() {
            assert_eq!(o.step, i);
        }
    }

    #[test]
    fn rerun_same_inputs_bit_identical() {
        let m = model();
        let secret = [2u32, 7, 19];
        let t1 = run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, 4, &secret)
            .unwrap();
        let t2 = run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, 4, &secret)
            .unwrap();
        assert_eq!(t1.observations, t2.observations);
    }

    #[test]
    fn per_token_adversary_blind_to_victim() {
        let m = model();
        for cfg in [QuantConfig::per_token_int8(), QuantConfig::none()] {
            let t1 = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 4, &[1, 2, 3]).unwrap();
            let t2 = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 4, &[9, 8, 7]).unwrap();
            assert_eq!(t1.observations, t2.observations);
        }
    }

    #[test]
    fn per_tensor_adversary_sees_victim_change() {
        let m = model();
        let mut rng = Rng::new(55);
        let mut differing = 0;
        let trials = 100;
        for _ in 0..trials {
            let a = rng.below(23) as TokenId;
            let s = rng.below(23) as TokenId;
            let c = loop {
                let c = rng.below(23) as TokenId;
                if c != s {
                    break c;
                }
            };
            let t1 =
                run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, a, &[s])
                    .unwrap();
            let t2 =
                run_victim_session(&m, QuantConfig::per_tensor_int8(), ObsMode::Top1Logprob, a, &[c])
                    .unwrap();
            if t1.observations != t2.observations {
                differing += 1;
            }
        }
        assert!(differing >= 95, "only {differing}/{trials} differed");
    }

    #[test]
    fn batch_of_one_matches_unbatched_decode() {
        let m = model();
        let mut s1 = Session::new(
            &m,
            QuantConfig::per_tensor_int8(),
            ObsMode::FullLogits,
            &[Role::Adversary],
        );
        let obs = s1.decode_step(&[7]).unwrap();
        let mut cache = vec![KvCache::new(m.spec.n_layers)];
        let logits = forward_lm(&m, &[7], &mut cache, &QuantConfig::per_tensor_int8(), None).unwrap();
        assert_eq!(obs[0].payload_vec(), logits[0].as_slice());
    }

    #[test]
    fn true_candidate_reproduces_transcript_bit_exactly() {
        let m = model();
        let cfg = QuantConfig::per_tensor_int8();
        let secret = [11u32, 3, 17, 8];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 2, &secret).unwrap();
        for i in 0..secret.len() {
            let obs = probe_with_candidate(
                &m,
                cfg,
                ObsMode::Top1Logprob,
                &t.adversary_tokens[..=i],
                &secret[..i],
                secret[i],
                AccessMode::WhiteBox,
            )
            .unwrap();
            assert_eq!(obs, t.observations[i], "position {i}");
            assert_eq!(observation_distance(&obs, &t.observations[i]).unwrap(), 0.0);
        }
    }

    #[test]
    fn white_box_equals_black_box_for_greedy_adversary() {
        let m = model();
        let cfg = QuantConfig::per_tensor_int8();
        let secret = [4u32, 21, 13];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 6, &secret).unwrap();
        for i in 0..secret.len() {
            let wb = probe_with_candidate(
                &m,
                cfg,
                ObsMode::Top1Logprob,
                &t.adversary_tokens[..=i],
                &secret[..i],
                secret[i],
                AccessMode::WhiteBox,
            )
            .unwrap();
            let bb = probe_with_candidate(
                &m,
                cfg,
                ObsMode::Top1Logprob,
                &t.adversary_tokens[..=i],
                &secret[..i],
                secret[i],
                AccessMode::BlackBox,
            )
            .unwrap();
            assert_eq!(wb, bb);
        }
    }

    #[test]
    fn black_box_reports_divergence() {
        let m = model();
        let cfg = QuantConfig::per_tensor_int8();
        let secret = [4u32, 21, 13];
        let t = run_victim_session(&m, cfg, ObsMode::Top1Logprob, 6, &secret).unwrap();
        // corrupt the recorded adversary tokens
        let mut tokens = t.adversary_tokens.clone();
        tokens[1] = (tokens[1] + 1) % 23;
        let err = probe_with_candidate(
            &m,
            cfg,
            ObsMode::Top1Logprob,
            &tokens[..2],
            &secret[..1],
            secret[1],
            AccessMode::BlackBox,
        );
        assert!(matches!(err, Err(Error::ReplayDivergence { .. })));
        // white-box happily forces the same tokens
        assert!(probe_with_candidate(
            &m,
            cfg,
            ObsMode::Top1Logprob,
            &tokens[..2],
            &secret[..1],
            secret[1],
            AccessMode::WhiteBox,
        )
        .is_ok());
    }

    #[test]
    fn classify_pair_symmetric_and_recorded() {
        use crate::model::classifier::{Classifier, ClassifierSpec};
        let spec = ClassifierSpec {
            input_dim: 10,
            hidden_dim: 12,
            depth: 4,
            n_classes: 3,
        };
        let m = Classifier::init(spec, true, &mut Rng::new(77)).unwrap();
        let mut rng = Rng::new(78);
        let a: Vec<f32> = (0..10).map(|_| rng.normal()).collect();
        let cfg = QuantConfig::per_tensor_int8();
        // x = a: both rows identical, so the probe observation must equal the
        // single-run logits of a batched pair of a with itself
        let (obs, profile) = classify_pair(&m, &a, &a, &cfg, true).unwrap();
        assert_eq!(profile.unwrap().len(), spec.depth);
        let (obs2, _) = classify_pair(&m, &a, &a, &cfg, false).unwrap();
        assert_eq!(obs, obs2);

        // cfg none: observation independent of the co-batched input
        let b: Vec<f32> = (0..10).map(|_| rng.normal()).collect();
        let (o1, _) = classify_pair(&m, &a, &a, &QuantConfig::none(), false).unwrap();
        let (o2, _) = classify_pair(&m, &a, &b, &QuantConfig::none(), false).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn finished_sequence_rejects_tokens() {
        let m = model();
        let mut s = Session::new(
            &m,
            QuantConfig::none(),
            ObsMode::Top1Logprob,
            &[Role::Adversary, Role::Victim],
        );
        s.decode_step(&[1, 2]).unwrap();
        s.mark_finished(1);
        assert!(matches!(
            s.decode_step(&[3, 4]),
            Err(Error::SequenceFinished(1))
        ));
    }

    #[test]
    fn transcript_csv_full_precision() {
        let obs = vec![
            Observation {
                step: 0,
                payload: ObsPayload::Top1 {
                    token: 42,
                    logprob: -1.234_567_9e-3,
                },
            },
            Observation {
                step: 1,
                payload: ObsPayload::Top1 {
                    token: 7,
                    logprob: -2.5,
                },
            },
        ];
        let csv = transcript_csv(&obs);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,token_id,top1_logprob");
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,42,"));
        // 18 significant digits survive a parse round-trip
        let lp: f32 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(lp.to_bits(), (-1.234_567_9e-3f32).to_bits());
    }
}
