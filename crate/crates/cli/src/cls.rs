//! `quantleak attack-cls`: candidate scoring against a classifier, with the
//! scale-profile purity analysis in the secret-excluded scenario.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use quantleak_core::attacks::cls::profiles_of;
use quantleak_core::attacks::{knn_class_purity, run_cls_attack, ClsAttackConfig, ProbeStrategy};
use quantleak_core::model::io::{load_model, ModelFile};
use quantleak_core::rng::Rng;

use crate::config::{pick, pick_opt, FileConfig};
use crate::data::{
    load_dataset, quant_config, DataOpts, DEFAULT_BLOBS_PER_CLASS, DEFAULT_BLOB_NOISE,
    DEFAULT_DATA_SEED,
};

#[derive(Args, Debug)]
pub struct AttackClsArgs {
    /// Flat JSON config mirroring the flags (flags override).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained classifier file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantization granularity: per-tensor | per-token | none.
    #[arg(long)]
    quant: Option<String>,
    /// Number format: int8 | fp8.
    #[arg(long)]
    format: Option<String>,
    /// Candidate-set size.
    #[arg(long)]
    candidates: Option<usize>,
    /// The secret is part of the candidate set (exact-recovery scenario).
    #[arg(long, conflicts_with = "exclude_secret")]
    include_secret: bool,
    /// The secret is excluded (class-inference scenario).
    #[arg(long)]
    exclude_secret: bool,
    /// Probe strategy: random | layer-diverse.
    #[arg(long)]
    probe: Option<String>,
    /// Probe pool size per run.
    #[arg(long)]
    probe_pool: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples used for the nearest-neighbor purity analysis.
    #[arg(long)]
    knn_samples: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Seed of the synthetic blob dataset (must match training).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    blobs_per_class: Option<usize>,
    #[arg(long)]
    blob_noise: Option<f32>,
    /// Per-run results CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

pub fn run(args: AttackClsArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let model_path: PathBuf = match pick_opt(args.model, &file, "model")? {
        Some(p) => p,
        None => bail!("--model is required"),
    };
    let quant = pick(args.quant, &file, "quant", "per-tensor".into())?;
    let format = pick(args.format, &file, "format", "int8".into())?;
    let cfg = quant_config(&quant, &format)?;
    let candidates = pick(args.candidates, &file, "candidates", 200usize)?;
    let runs = pick(args.runs, &file, "runs", 10usize)?;
    let probe: ProbeStrategy = pick(args.probe, &file, "probe", "layer-diverse".into())?.parse()?;
    let probe_pool = pick(args.probe_pool, &file, "probe_pool", 32usize)?;
    let seed = pick(args.seed, &file, "seed", 0u64)?;
    let knn_samples = pick(args.knn_samples, &file, "knn_samples", 600usize)?;
    let knn_k = pick(args.knn_k, &file, "knn_k", 10usize)?;
    let include_secret = if args.exclude_secret {
        false
    } else if args.include_secret {
        true
    } else {
        pick(None, &file, "include_secret", true)?
    };
    let out_csv: Option<PathBuf> = pick_opt(args.out_csv, &file, "out_csv")?;

    let model = match load_model(&model_path)? {
        ModelFile::Classifier(m) => m,
        ModelFile::Lm(_) => bail!("attack-cls needs a classifier model file"),
    };
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
    let data = load_dataset(&data_opts, model.spec.input_dim, model.spec.n_classes)?;

    let acfg = ClsAttackConfig {
        cfg,
        n_candidates: candidates,
        include_secret,
        strategy: probe,
        probe_pool,
    };
    eprintln!(
        "attack-cls: {} runs, {} candidates ({} secret), probe={:?}, quant={} format={}",
        runs,
        candidates,
        if include_secret { "incl." } else { "excl." },
        probe,
        cfg.granularity.as_str(),
        cfg.format.as_str()
    );
    let records = run_cls_attack(&model, &data, &acfg, runs, seed)?;

    if let Some(path) = &out_csv {
        let mut csv = String::from(
            "run,secret_index,probe_index,predicted_index,best_score,exact_hit,secret_class,predicted_class\n",
        );
        for r in &records {
            writeln!(
                csv,
                "{},{},{},{},{:.9e},{},{},{}",
                r.run,
                r.secret_index,
                r.probe_index,
                r.predicted_index,
                r.best_score,
                r.exact_hit,
                r.secret_class,
                r.predicted_class
            )?;
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }

    if include_secret {
        let hits = records.iter().filter(|r| r.exact_hit).count();
        println!(
            "exact recovery  {:>7}/{} ({:.0}%)",
            hits,
            runs,
            100.0 * hits as f64 / runs as f64
        );
    } else {
        let class_hits = records
            .iter()
            .filter(|r| r.predicted_class == r.secret_class)
            .count();
        let baseline = 1.0 / model.spec.n_classes as f64;
        println!(
            "class top-1     {:>7}/{} ({:.1}%, baseline {:.1}%)",
            class_hits,
            runs,
            100.0 * class_hits as f64 / runs as f64,
            100.0 * baseline
        );

        // scale-profile purity over a balanced sample of the dataset
        let mut rng = Rng::derive(seed, 0x6E11);
        let mut idxs: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut idxs);
        idxs.truncate(knn_samples.min(data.len()));
        let profiles = profiles_of(&model, &data, &idxs, &cfg)?;
        let labels: Vec<u8> = idxs.iter().map(|&i| data.labels[i]).collect();
        let purity = knn_class_purity(&profiles, &labels, knn_k)?;
        println!(
            "knn purity      {:>10.3} (baseline {:.3}, k={}, {} samples)",
            purity.overall,
            purity.baseline,
            purity.k,
            idxs.len()
        );
        for (c, p) in purity.per_class.iter().enumerate() {
            println!("  class {c}: {p:.3}");
        }
    }
    Ok(0)
}
