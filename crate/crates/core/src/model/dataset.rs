//! Classification datasets: synthetic Gaussian blobs plus an IDX-format
//! loader for locally present digit files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct BlobDataset {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub n_classes: usize,
    pub input_dim: usize,
}

impl BlobDataset {
    /// Ten-ish Gaussian blobs in pixel space. Class means are drawn once,
    /// normalized to a common norm (so no class is distinguishable by raw
    /// magnitude alone), and samples add isotropic pixel noise. Samples are
    /// interleaved class-by-class.
    pub fn synthetic(
        n_per_class: usize,
        input_dim: usize,
        n_classes: usize,
        noise: f32,
        seed: u64,
    ) -> BlobDataset {
        let mut rng = Rng::derive(seed, 0xB10B);
        let target_norm = (input_dim as f32).sqrt();
        let means: Vec<Vec<f32>> = (0..n_classes)
            .map(|_| {
                let raw: Vec<f32> = (0..input_dim).map(|_| rng.normal()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
                raw.iter().map(|v| v / norm * target_norm).collect()
            })
            .collect();
        let mut images = Vec::with_capacity(n_per_class * n_classes);
        let mut labels = Vec::with_capacity(n_per_class * n_classes);
        for _ in 0..n_per_class {
            for (c, mean) in means.iter().enumerate() {
                let img: Vec<f32> = mean.iter().map(|&m| m + noise * rng.normal()).collect();
                images.push(img);
                labels.push(c as u8);
            }
        }
        BlobDataset {
            images,
            labels,
            n_classes,
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load from IDX image/label files (the digit-benchmark container
    /// format). Pixels are scaled to [0, 1].
    pub fn from_idx(images_path: &Path, labels_path: &Path) -> Result<BlobDataset> {
        let images = load_idx_images(images_path)?;
        let labels = load_idx_labels(labels_path)?;
        if images.len() != labels.len() {
            return Err(Error::DatasetFormat(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        let input_dim = images.first().map_or(0, |i| i.len());
        let n_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        Ok(BlobDataset {
            images,
            labels,
            n_classes,
            input_dim,
        })
    }
}

fn read_u32_be(buf: &[u8], off: usize) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::DatasetFormat("truncated IDX header".into()))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// IDX3 unsigned-byte images: magic 0x00000803, big-endian dims
/// [count, rows, cols], then row-major pixel bytes.
pub fn load_idx_images(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if read_u32_be(&buf, 0)? != 0x0000_0803 {
        return Err(Error::DatasetFormat("bad IDX image magic".into()));
    }
    let count = read_u32_be(&buf, 4)? as usize;
    let rows = read_u32_be(&buf, 8)? as usize;
    let cols = read_u32_be(&buf, 12)? as usize;
    let dim = rows * cols;
    let data = &buf[16..];
    if data.len() != count * dim {
        return Err(Error::DatasetFormat(format!(
            "IDX image payload {} != {}x{}x{}",
            data.len(),
            count,
            rows,
            cols
        )));
    }
    Ok(data
        .chunks(dim)
        .map(|px| px.iter().map(|&b| b as f32 / 255.0).collect())
        .collect())
}

/// IDX1 unsigned-byte labels: magic 0x00000801, big-endian count, raw bytes.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if read_u32_be(&buf, 0)? != 0x0000_0801 {
        return Err(Error::DatasetFormat("bad IDX label magic".into()));
    }
    let count = read_u32_be(&buf, 4)? as usize;
    let data = &buf[8..];
    if data.len() != count {
        return Err(Error::DatasetFormat(format!(
            "IDX label payload {} != {count}",
            data.len()
        )));
    }
    Ok(data.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_shape_and_balance() {
        let d = BlobDataset::synthetic(20, 16, 4, 0.5, 7);
        assert_eq!(d.len(), 80);
        assert_eq!(d.input_dim, 16);
        for c in 0..4u8 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        // class means share a common norm by construction: check samples of
        // different classes are farther apart than same-class samples
        let dist = |a: &[f32], b: &[f32]| -> f32 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let same = dist(&d.images[0], &d.images[4]);
        let cross = dist(&d.images[0], &d.images[1]);
        assert!(cross > same);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = BlobDataset::synthetic(5, 8, 3, 0.3, 9);
        let b = BlobDataset::synthetic(5, 8, 3, 0.3, 9);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images-idx3-ubyte");
        let lbl_path = dir.path().join("labels-idx1-ubyte");

        // two 2x3 images
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        File::create(&img_path).unwrap().write_all(&img).unwrap();

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();

        let ds = BlobDataset::from_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim, 6);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images[0][0], 0.0);
        assert_eq!(ds.images[0][5], 1.0);
        assert_eq!(ds.n_classes, 8);
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        File::create(&p).unwrap().write_all(&[0, 0, 9, 9, 0]).unwrap();
        assert!(load_idx_images(&p).is_err());
        assert!(load_idx_labels(&p).is_err());
    }
}
