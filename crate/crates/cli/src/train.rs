//! `quantleak train`: train and save a char LM or a classifier.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

use quantleak_core::model::classifier::ClassifierSpec;
use quantleak_core::model::io::{save_model, ModelFile};
use quantleak_core::model::train::{train_char_lm, train_classifier};
use quantleak_core::model::transformer::TransformerSpec;
use quantleak_core::model::Corpus;
use quantleak_core::rng::Rng;

use crate::config::{pick, pick_opt, FileConfig};
use crate::data::{load_dataset, DataOpts, DEFAULT_BLOBS_PER_CLASS, DEFAULT_BLOB_NOISE, DEFAULT_DATA_SEED};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat JSON config mirroring the flags (flags override).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training text; the embedded corpus is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model spec JSON ({"kind": "lm", ...} or {"kind": "classifier", ...}).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output model path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// IDX image file (classifier training data).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (classifier training data).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Seed of the synthetic blob dataset (must match later attack runs).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    blobs_per_class: Option<usize>,
    #[arg(long)]
    blob_noise: Option<f32>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum SpecFile {
    Lm {
        #[serde(default)]
        vocab_size: usize, // 0 = from corpus
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_seq_len: usize,
    },
    Classifier {
        input_dim: usize,
        hidden_dim: usize,
        depth: usize,
        n_classes: usize,
    },
}

fn default_spec() -> SpecFile {
    SpecFile::Lm {
        vocab_size: 0,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 32,
    }
}

pub fn run(args: TrainArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let steps = pick(args.steps, &file, "steps", 1500)?;
    let seed = pick(args.seed, &file, "seed", 0u64)?;
    let out: PathBuf = pick(args.out, &file, "out", PathBuf::from("model.qlk"))?;
    let corpus_path = pick_opt(args.corpus, &file, "corpus")?;
    let spec_path: Option<PathBuf> = pick_opt(args.spec, &file, "spec")?;

    let spec = match &spec_path {
        None => default_spec(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
    };

    let mut rng = Rng::new(seed);
    match spec {
        SpecFile::Lm {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            max_seq_len,
        } => {
            let corpus = match &corpus_path {
                None => Corpus::embedded(),
                Some(p) => Corpus::from_text(
                    std::fs::read_to_string(p)
                        .with_context(|| format!("reading corpus {}", p.display()))?,
                ),
            };
            let vocab_size = if vocab_size == 0 {
                corpus.vocab.size()
            } else {
                vocab_size
            };
            let spec = TransformerSpec {
                vocab_size,
                d_model,
                n_layers,
                n_heads,
                max_seq_len,
            };
            eprintln!(
                "training char LM: V={} d={} L={} H={} T={} for {} steps (seed {})",
                spec.vocab_size, spec.d_model, spec.n_layers, spec.n_heads, spec.max_seq_len, steps, seed
            );
            let (model, report) = train_char_lm(&corpus, &spec, steps, &mut rng)?;
            save_model(&out, &ModelFile::Lm(model))?;
            println!(
                "final train loss {:.4}, held-out loss {:.4} (uniform baseline ln V = {:.4})",
                report.final_loss,
                report.held_out_loss,
                (spec.vocab_size as f32).ln()
            );
            println!("saved {}", out.display());
        }
        SpecFile::Classifier {
            input_dim,
            hidden_dim,
            depth,
            n_classes,
        } => {
            if corpus_path.is_some() {
                bail!("--corpus applies to LM training; use --images/--labels for classifiers");
            }
            let data_opts = DataOpts {
                images: pick_opt(args.images, &file, "images")?,
                labels: pick_opt(args.labels, &file, "labels")?,
                data_seed: pick(args.data_seed, &file, "data_seed", DEFAULT_DATA_SEED)?,
                blobs_per_class: pick(
                    args.blobs_per_class,
                    &file,
                    "blobs_per_class",
                    DEFAULT_BLOBS_PER_CLASS,
                )?,
                blob_noise: pick(args.blob_noise, &file, "blob_noise", DEFAULT_BLOB_NOISE)?,
            };
            let data = load_dataset(&data_opts, input_dim, n_classes)?;
            let spec = ClassifierSpec {
                input_dim,
                hidden_dim,
                depth,
                n_classes,
            };
            eprintln!(
                "training classifier: depth={} hidden={} on {} samples for {} steps (seed {})",
                depth,
                hidden_dim,
                data.len(),
                steps,
                seed
            );
            let (model, report) = train_classifier(&data, &spec, steps, &mut rng)?;
            save_model(&out, &ModelFile::Classifier(model))?;
            println!(
                "final train loss {:.4}, held-out loss {:.4}, held-out accuracy {:.2}%",
                report.final_loss,
                report.held_out_loss,
                100.0 * report.held_out_accuracy.unwrap_or(f32::NAN)
            );
            println!("saved {}", out.display());
        }
    }
    Ok(0)
}
