//! `quantleak attack-llm`: token recovery over a batch of secrets.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;

use quantleak_core::attacks::{
    run_llm_experiment, summarize_llm, LlmExperiment, PriorSource, ProbeEnv, RecoveryConfig,
};
use quantleak_core::engine::{transcript_csv, AccessMode, ObsMode};
use quantleak_core::model::io::{load_model, ModelFile};
use quantleak_core::model::{Corpus, TokenId};
use quantleak_core::quant::Granularity;
use quantleak_core::rng::Rng;

use crate::config::{pick, pick_opt, FileConfig};
use crate::data::quant_config;

#[derive(Args, Debug)]
pub struct AttackLlmArgs {
    /// Flat JSON config mirroring the flags (flags override).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained LM file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantization granularity: per-tensor | per-token | none.
    #[arg(long)]
    quant: Option<String>,
    /// Number format: int8 | fp8.
    #[arg(long)]
    format: Option<String>,
    /// Text file with one secret per line (encoded with the model vocab).
    #[arg(long, conflicts_with = "sample_n")]
    secret_file: Option<PathBuf>,
    /// Sample N in-distribution secrets from the embedded corpus.
    #[arg(long)]
    sample_n: Option<usize>,
    /// Length of sampled secrets.
    #[arg(long)]
    secret_len: Option<usize>,
    /// Match threshold on top-1 logprob distance.
    #[arg(long)]
    epsilon: Option<f32>,
    /// white-box | black-box.
    #[arg(long)]
    access: Option<String>,
    /// Position-1 candidate ordering: model | unigram-initial | none.
    #[arg(long)]
    prior: Option<String>,
    /// Query budget per token.
    #[arg(long)]
    budget: Option<usize>,
    /// Wall-clock budget per sequence in seconds.
    #[arg(long)]
    timeout_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-run results CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Record wall-clock timings in the CSV (off by default so output is
    /// byte-reproducible).
    #[arg(long)]
    timings: bool,
    /// Directory for per-run adversary transcripts (step,token_id,top1_logprob).
    #[arg(long)]
    dump_transcripts: Option<PathBuf>,
}

pub fn run(args: AttackLlmArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let model_path: PathBuf = match pick_opt(args.model, &file, "model")? {
        Some(p) => p,
        None => bail!("--model is required"),
    };
    let quant = pick(args.quant, &file, "quant", "per-tensor".into())?;
    let format = pick(args.format, &file, "format", "int8".into())?;
    let cfg = quant_config(&quant, &format)?;
    let epsilon = pick(args.epsilon, &file, "epsilon", 1e-6f32)?;
    let access: AccessMode = pick(args.access, &file, "access", "white-box".into())?.parse()?;
    let prior: PriorSource = pick(args.prior, &file, "prior", "model".into())?.parse()?;
    let budget = pick(args.budget, &file, "budget", usize::MAX)?;
    let timeout_s = pick(args.timeout_s, &file, "timeout_s", 60.0f64)?;
    let seed = pick(args.seed, &file, "seed", 0u64)?;
    let secret_len = pick(args.secret_len, &file, "secret_len", 20usize)?;
    let sample_n = pick_opt(args.sample_n, &file, "sample_n")?;
    let secret_file: Option<PathBuf> = pick_opt(args.secret_file, &file, "secret_file")?;
    let out_csv: Option<PathBuf> = pick_opt(args.out_csv, &file, "out_csv")?;

    let model = match load_model(&model_path)? {
        ModelFile::Lm(m) => m,
        ModelFile::Classifier(_) => bail!("attack-llm needs an LM model file"),
    };

    let corpus = Corpus::embedded();
    let corpus_matches = model
        .vocab
        .as_ref()
        .map(|v| *v == corpus.vocab)
        .unwrap_or(false);

    let secrets: Vec<Vec<TokenId>> = match (&secret_file, sample_n) {
        (Some(path), _) => {
            let vocab = model
                .vocab
                .as_ref()
                .context("model carries no vocabulary; cannot encode secret text")?;
            let text = std::fs::read_to_string(path)?;
            text.lines()
                .filter(|l| !l.is_empty())
                .map(|l| vocab.encode_str(l).map_err(Into::into))
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(n)) => {
            if !corpus_matches {
                bail!("model vocabulary does not match the embedded corpus; use --secret-file");
            }
            let mut rng = Rng::derive(seed, 0x5EC2E7);
            (0..n).map(|_| corpus.sample_window(secret_len, &mut rng)).collect()
        }
        (None, None) => bail!("one of --secret-file or --sample-n is required"),
    };
    if secrets.is_empty() {
        bail!("no secrets to attack");
    }
    for s in &secrets {
        if s.len() > model.spec.max_seq_len {
            bail!("secret length {} exceeds max_seq_len {}", s.len(), model.spec.max_seq_len);
        }
    }

    let env = ProbeEnv {
        model: &model,
        cfg,
        mode: ObsMode::Top1Logprob,
        initial_prior: corpus_matches.then(|| corpus.initial_token_prior()),
    };
    let exp = LlmExperiment {
        cfg,
        mode: ObsMode::Top1Logprob,
        rcfg: RecoveryConfig {
            epsilon,
            max_queries_per_token: budget,
            prior_source: prior,
            access,
        },
        timeout: (timeout_s > 0.0).then(|| Duration::from_secs_f64(timeout_s)),
    };

    eprintln!(
        "attack-llm: {} secrets, quant={} format={}, epsilon={epsilon:e}, {} access",
        secrets.len(),
        cfg.granularity.as_str(),
        cfg.format.as_str(),
        quant
    );
    let records = run_llm_experiment(&env, &exp, &secrets, seed)?;

    if let Some(path) = &out_csv {
        let mut csv = String::from(
            "run,position,true_token,recovered_token,queries,matched_below_epsilon,elapsed_ms\n",
        );
        for rec in &records {
            for i in 0..rec.secret.len() {
                let elapsed = if args.timings {
                    rec.result.elapsed_ms[i]
                } else {
                    0.0
                };
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{:.3}",
                    rec.run,
                    i + 1,
                    rec.secret[i],
                    rec.result.tokens[i],
                    rec.result.queries[i],
                    rec.result.matched[i],
                    elapsed
                )?;
            }
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }

    if let Some(dir) = &args.dump_transcripts {
        std::fs::create_dir_all(dir)?;
        for rec in &records {
            let path = dir.join(format!("transcript_{:04}.csv", rec.run));
            std::fs::write(&path, transcript_csv(&rec.transcript.observations))?;
        }
        eprintln!("wrote {} transcripts to {}", records.len(), dir.display());
    }

    let s = summarize_llm(&records);
    println!("runs            {:>10}", s.runs);
    println!("completed       {:>10}", s.completed);
    println!("token accuracy  {:>9.2}%", 100.0 * s.token_accuracy);
    println!("mean queries    {:>10.2}", s.mean_queries);
    println!("pos-1 queries   {:>10.2}", s.mean_queries_pos1);
    println!("pos-2+ queries  {:>10.2}", s.mean_queries_rest);

    if cfg.granularity != Granularity::PerTensor {
        let chance = 100.0 / model.spec.vocab_size as f64;
        println!(
            "warning: granularity {} carries no cross-batch signal; recovery degenerates to the prior (chance = {chance:.1}% per token)",
            cfg.granularity.as_str()
        );
    }
    Ok(0)
}
