//! Leakage quantifier and framework-configuration vulnerability table.

use std::fmt;

use crate::engine::{classify_pair, ObsMode, Observation, Session};
use crate::engine::{observation_distance, Role};
use crate::error::Result;
use crate::model::classifier::Classifier;
use crate::model::corpus::TokenId;
use crate::model::transformer::Transformer;
use crate::parallel;
use crate::quant::{Granularity, QuantConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Leaks,
    Isolated,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Leaks => write!(f, "leaks"),
            Verdict::Isolated => write!(f, "isolated"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeakReport {
    pub granularity: Granularity,
    pub format: crate::quant::NumberFormat,
    pub trials: usize,
    /// Fraction of trials with delta > 0.
    pub leak_fraction: f64,
    pub mean_delta: f64,
    pub max_delta: f32,
    pub verdict: Verdict,
}

impl LeakReport {
    pub fn csv_header() -> &'static str {
        "granularity,format,trials,leak_fraction,mean_delta,max_delta,verdict"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.9e},{:.9e},{}",
            self.granularity.as_str(),
            self.format.as_str(),
            self.trials,
            self.leak_fraction,
            self.mean_delta,
            self.max_delta,
            self.verdict
        )
    }
}

impl fmt::Display for LeakReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "leak report: granularity={} format={} trials={}",
            self.granularity.as_str(),
            self.format.as_str(),
            self.trials
        )?;
        writeln!(
            f,
            "  delta > 0 in {:.1}% of trials (mean {:.3e}, max {:.3e})",
            100.0 * self.leak_fraction,
            self.mean_delta,
            self.max_delta
        )?;
        write!(f, "  verdict: {}", self.verdict)
    }
}

/// Model under audit.
pub enum AuditTarget<'m> {
    Lm(&'m Transformer),
    Classifier(&'m Classifier),
}

fn lm_trial_obs(model: &Transformer, cfg: QuantConfig, a: TokenId, x: TokenId) -> Result<Observation> {
    let mut session = Session::new(model, cfg, ObsMode::FullLogits, &[Role::Adversary, Role::Victim]);
    Ok(session.decode_step(&[a, x])?.into_iter().next().unwrap())
}

/// Draw `(a, s, c)` triples, measure
/// `delta = || obs(a | s) - obs(a | c) ||` over full logits, and aggregate.
/// The verdict is `isolated` exactly when every trial's delta is zero.
pub fn measure_leak(
    target: &AuditTarget,
    cfg: &QuantConfig,
    trials: usize,
    seed: u64,
) -> Result<LeakReport> {
    assert!(trials >= 1);
    let deltas: Vec<Result<f32>> = parallel::map_indexed(trials, |t| {
        let mut rng = Rng::derive(seed, t as u64);
        match target {
            AuditTarget::Lm(model) => {
                let v = model.spec.vocab_size;
                let a = rng.below(v) as TokenId;
                let s = rng.below(v) as TokenId;
                let c = loop {
                    let c = rng.below(v) as TokenId;
                    if c != s {
                        break c;
                    }
                };
                let obs_s = lm_trial_obs(model, *cfg, a, s)?;
                let obs_c = lm_trial_obs(model, *cfg, a, c)?;
                observation_distance(&obs_s, &obs_c)
            }
            AuditTarget::Classifier(model) => {
                let d = model.spec.input_dim;
                let draw = |rng: &mut Rng| -> Vec<f32> {
                    (0..d).map(|_| rng.normal()).collect()
                };
                let a = draw(&mut rng);
                let s = draw(&mut rng);
                let c = draw(&mut rng);
                let (obs_s, _) = classify_pair(model, &a, &s, cfg, false)?;
                let (obs_c, _) = classify_pair(model, &a, &c, cfg, false)?;
                observation_distance(&obs_s, &obs_c)
            }
        }
    });

    // sequential aggregation in f64 (report only)
    let mut leaked = 0usize;
    let mut sum = 0.0f64;
    let mut max = 0.0f32;
    for d in deltas {
        let d = d?;
        if d > 0.0 {
            leaked += 1;
        }
        sum += d as f64;
        max = max.max(d);
    }
    Ok(LeakReport {
        granularity: cfg.granularity,
        format: cfg.format,
        trials,
        leak_fraction: leaked as f64 / trials as f64,
        mean_delta: sum / trials as f64,
        max_delta: max,
        verdict: if leaked == 0 {
            Verdict::Isolated
        } else {
            Verdict::Leaks
        },
    })
}

// ---------------------------------------------------------------------------
// framework landscape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// Granularity obtained when enabling the configuration without
    /// additional flags.
    Default,
    /// Requires selecting a specific flag or variant.
    Optional,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Default => write!(f, "default"),
            Setting::Optional => write!(f, "optional"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameworkEntry {
    pub framework: &'static str,
    pub configuration: &'static str,
    pub precision: &'static str,
    pub setting: Setting,
    pub granularity: Granularity,
    pub vulnerable: bool,
}

const fn entry(
    framework: &'static str,
    configuration: &'static str,
    precision: &'static str,
    setting: Setting,
    granularity: Granularity,
) -> FrameworkEntry {
    FrameworkEntry {
        framework,
        configuration,
        precision,
        setting,
        granularity,
        // cross-batch leakage exists exactly when parameters span the batch
        vulnerable: matches!(granularity, Granularity::PerTensor),
    }
}

/// Dynamic activation quantization configurations across major inference
/// frameworks; only runtime-quantizing methods appear (static calibrated
/// scales create no cross-batch flow).
pub fn framework_table() -> Vec<FrameworkEntry> {
    use Granularity::{PerTensor, PerToken};
    use Setting::{Default, Optional};
    vec![
        entry(
            "vLLM",
            "--quantization fp8 (online)",
            "W8A8 FP8",
            Default,
            PerTensor,
        ),
        entry(
            "SGLang",
            "--torchao-config fp8dq-per_tensor",
            "W8A8 FP8",
            Optional,
            PerTensor,
        ),
        entry(
            "ONNX RT",
            "quantize_dynamic()",
            "W8A8 INT8",
            Default,
            PerTensor,
        ),
        entry(
            "PyTorch",
            "torch.ao.quantization observer PerTensor",
            "W8A8 FP8/INT8",
            Default,
            PerTensor,
        ),
        entry(
            "SGLang",
            "--torchao-config fp8dq-per_row",
            "W8A8 FP8",
            Optional,
            PerToken,
        ),
        entry(
            "SGLang",
            "--torchao-config int8dq",
            "W8A8 INT8",
            Default,
            PerToken,
        ),
        entry(
            "SGLang",
            "--quantization w8a8_fp8/int8",
            "W8A8 FP8/INT8",
            Default,
            PerToken,
        ),
        entry(
            "vLLM",
            "W8A8 FP8/INT8 (llm-compressor)",
            "W8A8 FP8/INT8",
            Default,
            PerToken,
        ),
        entry(
            "DeepSpeed",
            "ZeroQuant W8A8",
            "W8A8 INT8",
            Default,
            PerToken,
        ),
    ]
}

/// Aligned text rendering of the framework table.
pub fn framework_table_text() -> String {
    let rows = framework_table();
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<38} {:<15} {:<9} {:<11} {}\n",
        "framework", "configuration", "precision", "setting", "granularity", "vulnerable"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:<38} {:<15} {:<9} {:<11} {}\n",
            r.framework,
            r.configuration,
            r.precision,
            r.setting.to_string(),
            r.granularity.as_str(),
            if r.vulnerable { "yes" } else { "no" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::classifier::ClassifierSpec;
    use crate::model::transformer::TransformerSpec;

    fn lm() -> Transformer {
        let spec = TransformerSpec {
            vocab_size: 19,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 8,
        };
        Transformer::init(spec, None, &mut Rng::new(51)).unwrap()
    }

    fn cls() -> Classifier {
        let spec = ClassifierSpec {
            input_dim: 12,
            hidden_dim: 16,
            depth: 18,
            n_classes: 5,
        };
        Classifier::init(spec, true, &mut Rng::new(52)).unwrap()
    }

    #[test]
    fn per_token_and_none_isolated() {
        let lm = lm();
        let cls = cls();
        for cfg in [QuantConfig::per_token_int8(), QuantConfig::none()] {
            for target in [AuditTarget::Lm(&lm), AuditTarget::Classifier(&cls)] {
                let report = measure_leak(&target, &cfg, 50, 7).unwrap();
                assert_eq!(report.verdict, Verdict::Isolated);
                assert_eq!(report.max_delta, 0.0);
                assert_eq!(report.leak_fraction, 0.0);
            }
        }
    }

    #[test]
    fn per_tensor_leaks() {
        let lm = lm();
        let cls = cls();
        for target in [AuditTarget::Lm(&lm), AuditTarget::Classifier(&cls)] {
            let report = measure_leak(&target, &QuantConfig::per_tensor_int8(), 100, 8).unwrap();
            assert_eq!(report.verdict, Verdict::Leaks);
            assert!(report.leak_fraction >= 0.95, "{}", report.leak_fraction);
        }
    }

    #[test]
    fn table_matches_published_rows() {
        let t = framework_table();
        assert_eq!(t.len(), 9);
        let vllm_fp8 = &t[0];
        assert_eq!(vllm_fp8.framework, "vLLM");
        assert_eq!(vllm_fp8.granularity, Granularity::PerTensor);
        assert_eq!(vllm_fp8.setting, Setting::Default);
        assert!(vllm_fp8.vulnerable);

        let sglang_w8a8 = t
            .iter()
            .find(|e| e.configuration.contains("w8a8_fp8/int8"))
            .unwrap();
        assert_eq!(sglang_w8a8.granularity, Granularity::PerToken);
        assert_eq!(sglang_w8a8.setting, Setting::Default);
        assert!(!sglang_w8a8.vulnerable);

        let onnx = t.iter().find(|e| e.framework == "ONNX RT").unwrap();
        assert!(onnx.vulnerable);
        assert_eq!(onnx.setting, Setting::Default);
        assert_eq!(onnx.granularity, Granularity::PerTensor);
    }

    #[test]
    fn vulnerable_iff_per_tensor() {
        for e in framework_table() {
            assert_eq!(e.vulnerable, e.granularity == Granularity::PerTensor);
        }
    }

    #[test]
    fn verdicts_agree_with_table_flags() {
        let lm = lm();
        for e in framework_table() {
            let cfg = QuantConfig::new(e.granularity, crate::quant::NumberFormat::Int8Asymmetric);
            let report = measure_leak(&AuditTarget::Lm(&lm), &cfg, 40, 9).unwrap();
            assert_eq!(report.verdict == Verdict::Leaks, e.vulnerable);
        }
    }
}
