//! `quantleak audit`: measure the leak on a model and print the framework
//! vulnerability table. Exits nonzero when the configuration leaks.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use quantleak_core::audit::{framework_table_text, measure_leak, AuditTarget, LeakReport, Verdict};
use quantleak_core::model::io::{load_model, ModelFile};

use crate::config::{pick, pick_opt, FileConfig};
use crate::data::quant_config;

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Flat JSON config mirroring the flags (flags override).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file (LM or classifier).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Quantization granularity: per-tensor | per-token | none.
    #[arg(long)]
    quant: Option<String>,
    /// Number format: int8 | fp8.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Leak-report CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

pub fn run(args: AuditArgs) -> Result<i32> {
    let file = FileConfig::load(args.config.as_deref())?;
    let model_path: PathBuf = match pick_opt(args.model, &file, "model")? {
        Some(p) => p,
        None => bail!("--model is required"),
    };
    let quant = pick(args.quant, &file, "quant", "per-tensor".into())?;
    let format = pick(args.format, &file, "format", "int8".into())?;
    let cfg = quant_config(&quant, &format)?;
    let trials = pick(args.trials, &file, "trials", 1000usize)?;
    let seed = pick(args.seed, &file, "seed", 0u64)?;
    let out_csv: Option<PathBuf> = pick_opt(args.out_csv, &file, "out_csv")?;

    let model = load_model(&model_path)?;
    let report = match &model {
        ModelFile::Lm(m) => measure_leak(&AuditTarget::Lm(m), &cfg, trials, seed)?,
        ModelFile::Classifier(m) => measure_leak(&AuditTarget::Classifier(m), &cfg, trials, seed)?,
    };

    println!("{report}");
    println!();
    println!("{}", framework_table_text());

    if let Some(path) = &out_csv {
        let csv = format!("{}\n{}\n", LeakReport::csv_header(), report.csv_row());
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }

    Ok(match report.verdict {
        Verdict::Leaks => 2,
        Verdict::Isolated => 0,
    })
}
