//! Seeded corpora with a planted two-level cluster structure.
//!
//! Semantic vectors are `coarse center + fine offset + noise`, so residual
//! quantization has a real hierarchy to discover. Ranking vectors are drawn
//! independently of the semantic ones.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, InteractionEvent, InteractionSequence, ItemCorpus, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_coarse_clusters: usize,
    pub num_fine_per_coarse: usize,
    pub items_per_fine: usize,
    /// Semantic width `d`.
    pub semantic_dim: usize,
    /// Ranking width `d'`.
    pub ranking_dim: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    pub num_users: usize,
    pub history_length: usize,
    /// Skew of each user's interest over fine clusters; 0 is uniform.
    pub zipf_exponent: f64,
    pub seed: u64,
    pub start_timestamp: i64,
    /// Gap between consecutive events of a user, in seconds.
    pub timestamp_step: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_coarse_clusters: 8,
            num_fine_per_coarse: 8,
            items_per_fine: 20,
            semantic_dim: 64,
            ranking_dim: 32,
            coarse_spread: 10.0,
            fine_spread: 1.0,
            noise_sigma: 0.05,
            num_users: 200,
            history_length: 1_000,
            zipf_exponent: 1.0,
            seed: 0,
            start_timestamp: 1_700_000_000,
            timestamp_step: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        let counts = [
            ("num_coarse_clusters", self.num_coarse_clusters),
            ("num_fine_per_coarse", self.num_fine_per_coarse),
            ("items_per_fine", self.items_per_fine),
            ("semantic_dim", self.semantic_dim),
            ("ranking_dim", self.ranking_dim),
            ("num_users", self.num_users),
            ("history_length", self.history_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(&format!("{name} must be at least 1"));
        }
        let spreads = [self.coarse_spread, self.fine_spread, self.noise_sigma];
        if spreads.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("spreads must be finite and nonnegative");
        }
        if !(self.coarse_spread > self.fine_spread && self.fine_spread > self.noise_sigma) {
            return bad("spreads must satisfy coarse_spread > fine_spread > noise_sigma");
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be finite and nonnegative");
        }
        if self.start_timestamp < 0 || self.timestamp_step < 1 {
            return bad("timestamps must start at >= 0 and advance by >= 1 second");
        }
        Ok(())
    }

    pub fn num_fine_clusters(&self) -> usize {
        self.num_coarse_clusters * self.num_fine_per_coarse
    }

    pub fn num_items(&self) -> usize {
        self.num_fine_clusters() * self.items_per_fine
    }
}

/// Planted labels and centers, indexed by corpus row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub coarse: Vec<u32>,
    /// Global fine-cluster index, `coarse * num_fine_per_coarse + local`.
    pub fine: Vec<u32>,
    pub coarse_centers: Matrix<f32>,
    /// Coarse center plus fine offset, one row per global fine cluster.
    pub fine_centers: Matrix<f32>,
}

impl GroundTruth {
    pub fn num_fine_clusters(&self) -> usize {
        self.fine_centers.rows()
    }

    /// Corpus rows grouped by fine cluster.
    pub fn fine_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_fine_clusters()];
        for (row, &f) in self.fine.iter().enumerate() {
            out[f as usize].push(row);
        }
        out
    }
}

fn gaussian_block<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<(ItemCorpus, GroundTruth)> {
    cfg.validate()?;
    let d = cfg.semantic_dim;
    let n_fine = cfg.num_fine_clusters();
    let n_items = cfg.num_items();

    let mut centers_rng = stream(cfg.seed, Purpose::ClusterCenters, 0);
    let coarse = gaussian_block(&mut centers_rng, cfg.num_coarse_clusters, d, cfg.coarse_spread);
    let offsets = gaussian_block(&mut centers_rng, n_fine, d, cfg.fine_spread);
    let fine_center = |f: usize| -> Vec<f64> {
        let c = f / cfg.num_fine_per_coarse;
        (0..d).map(|j| coarse[c * d + j] + offsets[f * d + j]).collect()
    };

    let mut sem_rng = stream(cfg.seed, Purpose::ItemSemantic, 0);
    let mut rank_rng = stream(cfg.seed, Purpose::ItemRanking, 0);
    let mut semantic = Vec::with_capacity(n_items * d);
    let mut ranking = Vec::with_capacity(n_items * cfg.ranking_dim);
    let mut coarse_labels = Vec::with_capacity(n_items);
    let mut fine_labels = Vec::with_capacity(n_items);
    let mut fine_centers = Vec::with_capacity(n_fine * d);
    for f in 0..n_fine {
        let center = fine_center(f);
        fine_centers.extend(center.iter().map(|&x| x as f32));
        for _ in 0..cfg.items_per_fine {
            for &c in &center {
                let z: f64 = sem_rng.sample(StandardNormal);
                semantic.push((c + cfg.noise_sigma * z) as f32);
            }
            for _ in 0..cfg.ranking_dim {
                ranking.push(rank_rng.sample::<f64, _>(StandardNormal) as f32);
            }
            coarse_labels.push((f / cfg.num_fine_per_coarse) as u32);
            fine_labels.push(f as u32);
        }
    }

    let corpus = ItemCorpus::new(
        (0..n_items as u64).collect(),
        Matrix::from_vec(n_items, d, semantic).expect("sized"),
        Matrix::from_vec(n_items, cfg.ranking_dim, ranking).expect("sized"),
    )?;
    let truth = GroundTruth {
        coarse: coarse_labels,
        fine: fine_labels,
        coarse_centers: Matrix::from_vec(
            cfg.num_coarse_clusters,
            d,
            coarse.iter().map(|&x| x as f32).collect(),
        )
        .expect("sized"),
        fine_centers: Matrix::from_vec(n_fine, d, fine_centers).expect("sized"),
    };
    Ok((corpus, truth))
}

/// Unnormalized Zipf masses `1 / rank^s` for ranks `1..=n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

/// Draws one history per user.
///
/// Each user ranks the fine clusters by a private random permutation, picks a
/// cluster per event with Zipf probabilities over that ranking, then an item
/// uniformly inside the cluster. Clusters are taken from `truth` when given,
/// otherwise items are split into consecutive blocks of `items_per_fine`.
pub fn generate_user_histories(
    cfg: &SyntheticConfig,
    corpus: &ItemCorpus,
    truth: Option<&GroundTruth>,
) -> Result<Vec<InteractionSequence>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(CorpusError::InvalidConfig("corpus is empty".into()));
    }
    let clusters: Vec<Vec<usize>> = match truth {
        Some(t) => t.fine_members().into_iter().filter(|m| !m.is_empty()).collect(),
        None => (0..corpus.len())
            .collect::<Vec<_>>()
            .chunks(cfg.items_per_fine)
            .map(<[usize]>::to_vec)
            .collect(),
    };
    let weights = zipf_weights(clusters.len(), cfg.zipf_exponent);
    let rank_dist = WeightedIndex::new(&weights).expect("zipf weights are positive");

    (0..cfg.num_users as u64)
        .map(|user| {
            let mut order: Vec<usize> = (0..clusters.len()).collect();
            order.shuffle(&mut stream(cfg.seed, Purpose::UserPermutation, user));
            let mut rng = stream(cfg.seed, Purpose::UserHistory, user);
            let events = (0..cfg.history_length)
                .map(|n| {
                    let members = &clusters[order[rank_dist.sample(&mut rng)]];
                    let row = members[rng.random_range(0..members.len())];
                    InteractionEvent {
                        item_id: corpus.ids()[row],
                        timestamp: cfg.start_timestamp + n as i64 * cfg.timestamp_step,
                    }
                })
                .collect();
            InteractionSequence::with_max_len(user, events, cfg.history_length.max(1))
        })
        .collect()
}
