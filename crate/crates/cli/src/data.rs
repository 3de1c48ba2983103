//! Shared dataset and quant-config resolution for the subcommands.

use std::path::PathBuf;

use anyhow::{bail, Result};
use quantleak_core::model::dataset::BlobDataset;
use quantleak_core::quant::{Granularity, NumberFormat, QuantConfig};

pub const DEFAULT_BLOBS_PER_CLASS: usize = 120;
pub const DEFAULT_BLOB_NOISE: f32 = 1.0;
pub const DEFAULT_DATA_SEED: u64 = 0;

pub fn quant_config(quant: &str, format: &str) -> Result<QuantConfig> {
    let granularity: Granularity = quant.parse()?;
    let format: NumberFormat = format.parse()?;
    Ok(QuantConfig::new(granularity, format))
}

pub struct DataOpts {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub data_seed: u64,
    pub blobs_per_class: usize,
    pub blob_noise: f32,
}

/// IDX files when both paths are given, synthetic blobs otherwise. The blob
/// generator is keyed by `data_seed`; training and attack runs must use the
/// same value to see the same dataset.
pub fn load_dataset(opts: &DataOpts, input_dim: usize, n_classes: usize) -> Result<BlobDataset> {
    match (&opts.images, &opts.labels) {
        (Some(img), Some(lbl)) => {
            let ds = BlobDataset::from_idx(img, lbl)?;
            if ds.input_dim != input_dim || ds.n_classes > n_classes {
                bail!(
                    "IDX dataset ({}d, {} classes) does not fit the model ({}d, {} classes)",
                    ds.input_dim,
                    ds.n_classes,
                    input_dim,
                    n_classes
                );
            }
            Ok(ds)
        }
        (None, None) => Ok(BlobDataset::synthetic(
            opts.blobs_per_class,
            input_dim,
            n_classes,
            opts.blob_noise,
            opts.data_seed,
        )),
        _ => bail!("--images and --labels must be given together"),
    }
}
