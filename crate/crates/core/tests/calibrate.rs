// scratch calibration runs (invoked explicitly with --ignored); not part of CI
use std::time::Instant;

use quantleak_core::attacks::{
    knn_class_purity, run_cls_attack, run_llm_experiment, summarize_llm, ClsAttackConfig,
    LlmExperiment, PriorSource, ProbeEnv, ProbeStrategy, RecoveryConfig,
};
use quantleak_core::engine::{AccessMode, ObsMode};
use quantleak_core::model::classifier::ClassifierSpec;
use quantleak_core::model::dataset::BlobDataset;
use quantleak_core::model::train::{train_char_lm, train_classifier};
use quantleak_core::model::transformer::TransformerSpec;
use quantleak_core::model::Corpus;
use quantleak_core::quant::QuantConfig;
use quantleak_core::rng::Rng;

#[test]
#[ignore]
fn calibrate_lm() {
    let corpus = Corpus::embedded();
    let spec = TransformerSpec {
        vocab_size: corpus.vocab.size(),
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 32,
    };
    let t0 = Instant::now();
    let (model, report) = train_char_lm(&corpus, &spec, 1500, &mut Rng::new(1)).unwrap();
    eprintln!(
        "train: {:.1}s final={:.3} heldout={:.3} lnV={:.3}",
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report.held_out_loss,
        (spec.vocab_size as f32).ln()
    );

    let env = ProbeEnv {
        model: &model,
        cfg: QuantConfig::per_tensor_int8(),
        mode: ObsMode::Top1Logprob,
        initial_prior: Some(corpus.initial_token_prior()),
    };
    let exp = LlmExperiment {
        cfg: QuantConfig::per_tensor_int8(),
        mode: ObsMode::Top1Logprob,
        rcfg: RecoveryConfig {
            epsilon: 1e-6,
            max_queries_per_token: usize::MAX,
            prior_source: PriorSource::Model,
            access: AccessMode::WhiteBox,
        },
        timeout: Some(std::time::Duration::from_secs(60)),
    };
    let mut rng = Rng::new(2);
    let secrets: Vec<Vec<u32>> = (0..100).map(|_| corpus.sample_window(20, &mut rng)).collect();
    let t1 = Instant::now();
    let records = run_llm_experiment(&env, &exp, &secrets, 3).unwrap();
    let s = summarize_llm(&records);
    eprintln!(
        "attack: {:.1}s runs={} completed={} acc={:.4} meanq={:.2} pos1={:.2} rest={:.2} ratio={:.2}",
        t1.elapsed().as_secs_f64(),
        s.runs,
        s.completed,
        s.token_accuracy,
        s.mean_queries,
        s.mean_queries_pos1,
        s.mean_queries_rest,
        s.mean_queries_pos1 / s.mean_queries_rest
    );
}

#[test]
#[ignore]
fn calibrate_cls() {
    let data = BlobDataset::synthetic(120, 64, 10, 1.0, 0);
    for depth in [3usize, 18, 50] {
        let spec = ClassifierSpec {
            input_dim: 64,
            hidden_dim: 64,
            depth,
            n_classes: 10,
        };
        let t0 = Instant::now();
        let (model, report) = train_classifier(&data, &spec, 600, &mut Rng::new(10 + depth as u64)).unwrap();
        eprintln!(
            "depth {depth}: train {:.1}s loss={:.3} heldout={:.3} acc={:?}",
            t0.elapsed().as_secs_f64(),
            report.final_loss,
            report.held_out_loss,
            report.held_out_accuracy
        );

        for strategy in [ProbeStrategy::Random, ProbeStrategy::LayerDiverse] {
            let acfg = ClsAttackConfig {
                cfg: QuantConfig::per_tensor_int8(),
                n_candidates: 200,
                include_secret: true,
                strategy,
                probe_pool: 32,
            };
            let t1 = Instant::now();
            let recs = run_cls_attack(&model, &data, &acfg, 10, 42).unwrap();
            let hits = recs.iter().filter(|r| r.exact_hit).count();
            eprintln!(
                "  exact {strategy:?}: {hits}/10 ({:.1}s)",
                t1.elapsed().as_secs_f64()
            );
        }

        // exclude-secret class inference
        let acfg = ClsAttackConfig {
            cfg: QuantConfig::per_tensor_int8(),
            n_candidates: 200,
            include_secret: false,
            strategy: ProbeStrategy::LayerDiverse,
            probe_pool: 32,
        };
        let recs = run_cls_attack(&model, &data, &acfg, 50, 43).unwrap();
        let class_hits = recs
            .iter()
            .filter(|r| r.predicted_class == r.secret_class)
            .count();
        eprintln!("  class top-1 (exclude): {class_hits}/50 = {:.2}", class_hits as f32 / 50.0);

        // knn purity on 600 profiles
        let idxs: Vec<usize> = (0..600).collect();
        let t2 = Instant::now();
        let profiles =
            quantleak_core::attacks::cls::profiles_of(&model, &data, &idxs, &QuantConfig::per_tensor_int8())
                .unwrap();
        let labels: Vec<u8> = idxs.iter().map(|&i| data.labels[i]).collect();
        let purity = knn_class_purity(&profiles, &labels, 10).unwrap();
        eprintln!(
            "  purity overall={:.3} baseline={:.3} ({:.1}s)",
            purity.overall,
            purity.baseline,
            t2.elapsed().as_secs_f64()
        );
    }
}
