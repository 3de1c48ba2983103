//! Classification attack: probe selection, candidate scoring runs, and the
//! nearest-neighbor purity analysis of per-layer scale profiles.

use crate::attacks::llm::score_candidates;
use crate::engine::{classify_pair, profile_single, ScaleProfile};
use crate::error::{Error, Result};
use crate::model::classifier::Classifier;
use crate::model::dataset::BlobDataset;
use crate::parallel;
use crate::quant::QuantConfig;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeStrategy {
    /// Seeded uniform pick from the pool.
    Random,
    /// Run each probe alone, record per-layer activation ranges, pick the
    /// probe minimizing the mean range: a weak probe maximizes the victim's
    /// influence on the shared parameters.
    #[default]
    LayerDiverse,
}

impl std::str::FromStr for ProbeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ProbeStrategy::Random),
            "layer-diverse" => Ok(ProbeStrategy::LayerDiverse),
            other => Err(Error::InvalidSpec(format!("unknown probe strategy {other:?}"))),
        }
    }
}

/// Pick a probe from the pool. The layer-diverse evaluation runs each probe
/// alone under the session config; ties go to the lowest pool index.
pub fn select_probe(
    model: &Classifier,
    pool: &[Vec<f32>],
    strategy: ProbeStrategy,
    cfg: &QuantConfig,
    rng: &mut Rng,
) -> Result<usize> {
    assert!(!pool.is_empty(), "empty probe pool");
    match strategy {
        ProbeStrategy::Random => Ok(rng.below(pool.len())),
        ProbeStrategy::LayerDiverse => {
            let ranges = parallel::map_slice(pool, |probe| {
                profile_single(model, probe, cfg).map(|p| p.mean_range())
            });
            let mut best = 0usize;
            let mut best_range = f32::INFINITY;
            for (i, r) in ranges.into_iter().enumerate() {
                let r = r?;
                if r < best_range {
                    best_range = r;
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

// ---------------------------------------------------------------------------
// attack runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ClsAttackConfig {
    pub cfg: QuantConfig,
    pub n_candidates: usize,
    /// Whether the secret itself is in the candidate set (exact-recovery
    /// scenario) or excluded (class-inference scenario).
    pub include_secret: bool,
    pub strategy: ProbeStrategy,
    /// Probe pool size drawn from the dataset per run.
    pub probe_pool: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClsRunRecord {
    pub run: usize,
    pub secret_index: usize,
    pub probe_index: usize,
    pub predicted_index: usize,
    pub best_score: f32,
    pub exact_hit: bool,
    pub secret_class: u8,
    pub predicted_class: u8,
}

fn single_run(
    model: &Classifier,
    data: &BlobDataset,
    acfg: &ClsAttackConfig,
    run: usize,
    seed: u64,
) -> Result<ClsRunRecord> {
    let mut rng = Rng::derive(seed, run as u64);
    let n = data.len();
    assert!(acfg.n_candidates + acfg.probe_pool + 1 <= n, "dataset too small");

    // disjoint draws: secret, candidate set, probe pool
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let secret_index = order[0];
    let mut candidates: Vec<usize> = if acfg.include_secret {
        let mut c = order[1..acfg.n_candidates].to_vec();
        c.push(secret_index);
        c
    } else {
        order[1..1 + acfg.n_candidates].to_vec()
    };
    candidates.sort_unstable(); // candidate order independent of the shuffle
    let pool_idx: Vec<usize> = order[n - acfg.probe_pool..].to_vec();
    let pool: Vec<Vec<f32>> = pool_idx.iter().map(|&i| data.images[i].clone()).collect();

    let probe_pos = select_probe(model, &pool, acfg.strategy, &acfg.cfg, &mut rng)?;
    let probe_index = pool_idx[probe_pos];
    let probe = &data.images[probe_index];

    let (secret_obs, _) = classify_pair(model, probe, &data.images[secret_index], &acfg.cfg, false)?;
    let candidate_obs = parallel::map_slice(&candidates, |&ci| {
        classify_pair(model, probe, &data.images[ci], &acfg.cfg, false).map(|(o, _)| o)
    });
    let candidate_obs: Result<Vec<_>> = candidate_obs.into_iter().collect();
    let ranked = score_candidates(&secret_obs, &candidate_obs?)?;
    let best = ranked[0];
    let predicted_index = candidates[best.candidate];
    Ok(ClsRunRecord {
        run,
        secret_index,
        probe_index,
        predicted_index,
        best_score: best.score,
        exact_hit: predicted_index == secret_index,
        secret_class: data.labels[secret_index],
        predicted_class: data.labels[predicted_index],
    })
}

/// Run the candidate-scoring attack `runs` times with independent derived
/// seeds; results are order-stable regardless of parallelism.
pub fn run_cls_attack(
    model: &Classifier,
    data: &BlobDataset,
    acfg: &ClsAttackConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<ClsRunRecord>> {
    let results = parallel::map_indexed(runs, |r| single_run(model, data, acfg, r, seed));
    results.into_iter().collect()
}

// ---------------------------------------------------------------------------
// scale-profile purity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PurityReport {
    pub per_class: Vec<f32>,
    pub overall: f32,
    /// Chance level, 1 / n_classes.
    pub baseline: f32,
    pub n_classes: usize,
    pub k: usize,
}

/// For each sample, the fraction of its `k` nearest neighbors (Euclidean
/// distance over concatenated per-layer scales) sharing its label, averaged
/// per class and overall. Ties break by sample index.
pub fn knn_class_purity(profiles: &[Vec<f32>], labels: &[u8], k: usize) -> Result<PurityReport> {
    if profiles.len() != labels.len() {
        return Err(Error::ShapeMismatch("profiles vs labels".into()));
    }
    if profiles.len() < k + 1 {
        return Err(Error::InvalidSpec(format!(
            "need at least {} profiles for k={k}",
            k + 1
        )));
    }
    let dim = profiles[0].len();
    if profiles.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("profiles of unequal length".into()));
    }
    let n = profiles.len();
    let n_classes = labels.iter().copied().max().unwrap() as usize + 1;

    let purities: Vec<f32> = parallel::map_indexed(n, |i| {
        let mut dists: Vec<(f32, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f32 = profiles[i]
                    .iter()
                    .zip(&profiles[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let same = dists[..k]
            .iter()
            .filter(|&&(_, j)| labels[j] == labels[i])
            .count();
        same as f32 / k as f32
    });

    let mut per_class = vec![0.0f32; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &p) in purities.iter().enumerate() {
        per_class[labels[i] as usize] += p;
        counts[labels[i] as usize] += 1;
    }
    for (p, &c) in per_class.iter_mut().zip(&counts) {
        if c > 0 {
            *p /= c as f32;
        }
    }
    let overall = purities.iter().sum::<f32>() / n as f32;
    Ok(PurityReport {
        per_class,
        overall,
        baseline: 1.0 / n_classes as f32,
        n_classes,
        k,
    })
}

/// Scale profiles of each sample run alone under the config; the Fig-4-style
/// signature matrix.
pub fn profiles_of(
    model: &Classifier,
    data: &BlobDataset,
    indices: &[usize],
    cfg: &QuantConfig,
) -> Result<Vec<Vec<f32>>> {
    let profiles = parallel::map_slice(indices, |&i| {
        profile_single(model, &data.images[i], cfg).map(|p: ScaleProfile| p.alphas())
    });
    profiles.into_iter().collect()
}
