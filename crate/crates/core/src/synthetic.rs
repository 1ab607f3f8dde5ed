//! Synthetic listening sessions with a planted preference structure.
//!
//! Items get unit-norm Gaussian latent factors and every session a unit-norm
//! taste vector. Each position draws, with probability `coherence`, an item
//! from a softmax over taste affinity, otherwise a uniform item. An item is
//! skipped iff its cosine affinity to the session taste is below
//! `skip_threshold`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_file, Dataset};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::{stream, SeedRng, Stream};
use crate::session_data::{Session, Vocabulary, FIRST_ITEM};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Inverse temperature of the on-taste draw.
const AFFINITY_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub catalog_size: usize,
    pub latent_dim: usize,
    pub sessions: usize,
    pub session_length_range: (usize, usize),
    pub skip_threshold: f64,
    pub coherence: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            catalog_size: 500,
            latent_dim: 8,
            sessions: 2000,
            session_length_range: (10, 20),
            skip_threshold: 0.1,
            coherence: 0.4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.session_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid session length range ({lo}, {hi})")));
        }
        if self.catalog_size < hi {
            return Err(Error::Config(format!(
                "catalog of {} items is smaller than the maximum session length {hi}",
                self.catalog_size
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::Config(format!("coherence {} outside [0, 1]", self.coherence)));
        }
        if !self.skip_threshold.is_finite() {
            return Err(Error::Config("skip_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `catalog_size x latent_dim`, row `k` belongs to item index `k + 3`.
    pub item_factors: Matrix,
    pub tastes: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn factor(&self, item: usize) -> &[f64] {
        self.item_factors.row(item - FIRST_ITEM)
    }

    pub fn affinity(&self, taste: &[f64], item: usize) -> f64 {
        cosine(taste, self.factor(item))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, (serde_json::to_string(self)? + "\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = dot(a, a).sqrt() * dot(b, b).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn unit_gaussian(rng: &mut SeedRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Keys `item0000`, `item0001`, ... so item `k` maps to index `k + 3`.
pub fn catalog_vocabulary(catalog_size: usize) -> Vocabulary {
    Vocabulary::from_keys((0..catalog_size).map(|k| format!("item{k:04}")))
        .expect("generated keys are unique")
}

pub fn generate_dataset(config: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Synthetic);
    let n = config.catalog_size;
    let dim = config.latent_dim;

    let mut factors = Matrix::zeros(n, dim);
    for k in 0..n {
        factors.row_mut(k).copy_from_slice(&unit_gaussian(&mut rng, dim));
    }

    let (lo, hi) = config.session_length_range;
    let mut sessions = Vec::with_capacity(config.sessions);
    let mut tastes = Vec::with_capacity(config.sessions);
    let mut cdf = vec![0.0; n];
    let mut affinity = vec![0.0; n];
    for _ in 0..config.sessions {
        let taste = unit_gaussian(&mut rng, dim);
        let mut total = 0.0;
        for k in 0..n {
            affinity[k] = cosine(&taste, factors.row(k));
            total += (AFFINITY_SHARPNESS * (affinity[k] - 1.0)).exp();
            cdf[k] = total;
        }
        let len = rng.random_range(lo..=hi);
        let mut items = Vec::with_capacity(len);
        let mut skipped = Vec::with_capacity(len);
        for _ in 0..len {
            let k = if rng.random::<f64>() < config.coherence {
                let u = rng.random::<f64>() * total;
                cdf.partition_point(|&c| c <= u).min(n - 1)
            } else {
                rng.random_range(0..n)
            };
            items.push(k + FIRST_ITEM);
            skipped.push(affinity[k] < config.skip_threshold);
        }
        sessions.push(Session::new(items, skipped)?);
        tastes.push(taste);
    }

    let dataset = Dataset::new(catalog_vocabulary(n), sessions)?;
    Ok((
        dataset,
        GroundTruth {
            item_factors: factors,
            tastes,
        },
    ))
}

/// Candidates ordered by descending affinity to `taste`, ties by ascending index.
pub fn oracle_rank(truth: &GroundTruth, taste: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&c| (truth.affinity(taste, c), c))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, c)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            catalog_size: 60,
            latent_dim: 4,
            sessions: 50,
            session_length_range: (5, 12),
            skip_threshold: 0.1,
            coherence: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn threshold_extremes() {
        let mut c = cfg();
        c.skip_threshold = -1.0;
        let (d, _) = generate_dataset(&c).unwrap();
        assert_eq!(d.skip_count(), 0);
        c.skip_threshold = 1.01;
        let (d, _) = generate_dataset(&c).unwrap();
        assert_eq!(d.skip_count(), d.event_count());
    }

    #[test]
    fn catalog_too_small() {
        let mut c = cfg();
        c.catalog_size = 8;
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
    }

    #[test]
    fn rows_are_unit_norm_and_lengths_in_range() {
        let (d, gt) = generate_dataset(&cfg()).unwrap();
        for k in 0..gt.item_factors.rows() {
            assert!((dot(gt.item_factors.row(k), gt.item_factors.row(k)) - 1.0).abs() < 1e-12);
        }
        for t in &gt.tastes {
            assert!((dot(t, t) - 1.0).abs() < 1e-12);
        }
        assert!(d.sessions.iter().all(|s| (5..=12).contains(&s.len())));
        assert_eq!(gt.tastes.len(), d.sessions.len());
    }

    #[test]
    fn skip_flags_follow_affinity() {
        let c = cfg();
        let (d, gt) = generate_dataset(&c).unwrap();
        for (s, taste) in d.sessions.iter().zip(&gt.tastes) {
            for (&item, &skip) in s.items().iter().zip(s.skipped()) {
                assert_eq!(skip, gt.affinity(taste, item) < c.skip_threshold);
            }
        }
    }

    #[test]
    fn oracle_rank_self_similarity_and_ties() {
        let (_, gt) = generate_dataset(&cfg()).unwrap();
        let all: Vec<usize> = (FIRST_ITEM..FIRST_ITEM + 60).collect();
        let taste = gt.factor(17).to_vec();
        assert_eq!(oracle_rank(&gt, &taste, &all)[0], 17);

        let truth = GroundTruth {
            item_factors: Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
            tastes: vec![],
        };
        assert_eq!(oracle_rank(&truth, &[0.0, 1.0], &[5, 4, 3]), vec![4, 5, 3]);
    }
}
