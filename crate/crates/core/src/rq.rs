//! Residual quantization with EMA-maintained codebooks.
//!
//! Level 1 quantizes the embedding itself; each later level quantizes what the
//! previous levels left over. An item's [`SemanticId`] is the list of chosen
//! codeword indices and its reconstruction is the sum of those codewords.
//!
//! Codebooks are learned level by level directly on the input embeddings (no
//! encoder network): seed entries from the current residuals, then alternate
//! nearest-entry assignment with exponential-moving-average updates of the
//! per-entry counts and vector sums.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_sqz1, write_sqz1, CorpusError, Sqz1Block};
use crate::matrix::{sq_dist_mixed, Matrix};
use crate::rng::{stream, Purpose};

/// Commitment weight used when the caller does not pick one.
pub const DEFAULT_BETA: f64 = 0.25;
pub const MAX_CODEBOOK_SIZE: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum RqError {
    #[error("need at least {codebook_size} items to seed a codebook, got {items}")]
    InsufficientItems { items: usize, codebook_size: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("invalid codebook config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("code {code} at level {level} is out of range for a codebook of {size}")]
    CodeOutOfRange { level: usize, code: u32, size: usize },
    #[error("semantic id has {found} levels, stack has {expected}")]
    LevelMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RqError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqConfig {
    /// Codebook size per level; its length is the number of levels `L`.
    pub codebook_sizes: Vec<usize>,
    pub ema_decay: f64,
    /// Floor on the count used when dividing EMA sums by EMA counts.
    pub epsilon: f64,
    pub epochs: usize,
    /// Entries whose EMA count falls below this are reseeded.
    pub dead_threshold: f64,
    pub seed: u64,
}

impl Default for RqConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![512, 512],
            ema_decay: 0.99,
            epsilon: 1e-9,
            epochs: 25,
            dead_threshold: 1e-3,
            seed: 0,
        }
    }
}

impl RqConfig {
    /// `levels` codebooks of `size` entries each, other settings default.
    pub fn uniform(levels: usize, size: usize) -> Self {
        Self {
            codebook_sizes: vec![size; levels],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RqError::InvalidConfig(m));
        if self.codebook_sizes.is_empty() {
            return bad("at least one level is required".into());
        }
        if let Some(c) = self
            .codebook_sizes
            .iter()
            .find(|&&c| c == 0 || c > MAX_CODEBOOK_SIZE)
        {
            return bad(format!("codebook size {c} outside 1..={MAX_CODEBOOK_SIZE}"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} must lie in (0, 1)", self.ema_decay));
        }
        if !(self.epsilon > 0.0) || !(self.dead_threshold >= 0.0) {
            return bad("epsilon must be positive and dead_threshold nonnegative".into());
        }
        Ok(())
    }
}

/// One level's codewords and the EMA statistics that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// 1-based level index.
    pub level: usize,
    pub entries: Matrix<f32>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Matrix<f64>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    /// Nearest entry to `x` by L2, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest_entry(&self.entries, x)
    }

    fn is_live(&self, k: usize, threshold: f64) -> bool {
        self.ema_counts[k] >= threshold
    }
}

/// An L-tuple of codeword indices; compares lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for SemanticId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.split('.').map(str::parse).collect::<std::result::Result<_, _>>().map(SemanticId)
    }
}

/// Output of [`CodebookStack::quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub sid: SemanticId,
    /// `residual_norms[0] = ||e||`, `residual_norms[l] = ||e^(l+1)||` after level `l`.
    pub residual_norms: Vec<f64>,
    /// What is left of `e` after subtracting every chosen codeword.
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqLossReport {
    /// Mean squared distance between items and their reconstructions.
    pub reconstruction: f64,
    /// Mean squared distance between each level's input and its codeword.
    pub commitment_per_level: Vec<f64>,
    pub beta: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    pub levels: Vec<Codebook>,
    pub config: RqConfig,
}

/// Picks `count` distinct rows of `points`, each next pick drawn with
/// probability proportional to its squared distance to the picks so far.
/// Falls back to a uniform pick among unused rows once every remaining
/// distance is zero (duplicate points).
fn seed_distinct<R: Rng>(points: &Matrix<f64>, count: usize, rng: &mut R) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(count);
    let mut used = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut pick = rng.random_range(0..n);
    loop {
        chosen.push(pick);
        used[pick] = true;
        if chosen.len() == count {
            return chosen;
        }
        let p = points.row(pick);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd: f64 = points.row(i).iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if nd < *d {
                *d = nd;
            }
        }
        let weights: Vec<f64> = dist
            .iter()
            .zip(&used)
            .map(|(&d, &u)| if u { 0.0 } else { d })
            .collect();
        pick = match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !used[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
    }
}

fn nearest_entry(entries: &Matrix<f32>, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, entry) in entries.iter_rows().enumerate() {
        let d = sq_dist_mixed(entry, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(entries: &Matrix<f32>, residuals: &Matrix<f64>) -> Vec<usize> {
    (0..residuals.rows())
        .into_par_iter()
        .map(|i| nearest_entry(entries, residuals.row(i)).0)
        .collect()
}

fn train_level(
    level: usize,
    size: usize,
    residuals: &Matrix<f64>,
    config: &RqConfig,
) -> Codebook {
    let d = residuals.cols();
    let mut rng = stream(config.seed, Purpose::Codebook, level as u64);
    let seeds = seed_distinct(residuals, size, &mut rng);
    let mut entries = Matrix::zeros(size, d);
    for (k, &i) in seeds.iter().enumerate() {
        for (e, &r) in entries.row_mut(k).iter_mut().zip(residuals.row(i)) {
            *e = r as f32;
        }
    }
    let mut book = Codebook {
        level,
        entries,
        ema_counts: vec![0.0; size],
        ema_sums: Matrix::zeros(size, d),
    };
    let gamma = config.ema_decay;

    for _ in 0..config.epochs {
        let codes = assign(&book.entries, residuals);
        let mut counts = vec![0.0f64; size];
        let mut sums = Matrix::<f64>::zeros(size, d);
        for (i, &k) in codes.iter().enumerate() {
            counts[k] += 1.0;
            for (s, &r) in sums.row_mut(k).iter_mut().zip(residuals.row(i)) {
                *s += r;
            }
        }
        for k in 0..size {
            book.ema_counts[k] = gamma * book.ema_counts[k] + (1.0 - gamma) * counts[k];
            for (s, &batch) in book.ema_sums.row_mut(k).iter_mut().zip(sums.row(k)) {
                *s = gamma * *s + (1.0 - gamma) * batch;
            }
            if book.is_live(k, config.dead_threshold) {
                let denom = book.ema_counts[k].max(config.epsilon);
                for j in 0..d {
                    book.entries.set(k, j, (book.ema_sums.get(k, j) / denom) as f32);
                }
            } else {
                let src = rng.random_range(0..residuals.rows());
                for j in 0..d {
                    book.entries.set(k, j, residuals.get(src, j) as f32);
                    book.ema_sums.set(k, j, 0.0);
                }
                book.ema_counts[k] = 0.0;
            }
        }
    }
    book
}

/// Learns an `L`-level stack on `semantic` (one item per row).
pub fn train_codebooks(semantic: &Matrix<f32>, config: &RqConfig) -> Result<CodebookStack> {
    config.validate()?;
    if !semantic.all_finite() {
        return Err(RqError::NonFinite);
    }
    if semantic.cols() == 0 {
        return Err(RqError::InvalidConfig("embedding dimension must be positive".into()));
    }
    if let Some(&c) = config.codebook_sizes.iter().find(|&&c| c > semantic.rows()) {
        return Err(RqError::InsufficientItems {
            items: semantic.rows(),
            codebook_size: c,
        });
    }
    let mut residuals = semantic.to_f64();
    let mut levels = Vec::with_capacity(config.levels());
    for (l, &size) in config.codebook_sizes.iter().enumerate() {
        let book = train_level(l + 1, size, &residuals, config);
        let codes = assign(&book.entries, &residuals);
        for (i, &k) in codes.iter().enumerate() {
            for (r, &z) in residuals.row_mut(i).iter_mut().zip(book.entries.row(k)) {
                *r -= f64::from(z);
            }
        }
        tracing::debug!(level = l + 1, size, "trained codebook");
        levels.push(book);
    }
    Ok(CodebookStack {
        levels,
        config: config.clone(),
    })
}

impl CodebookStack {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].entries.cols()
    }

    pub fn codebook_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Codebook::len).collect()
    }

    pub fn quantize(&self, e: &[f32]) -> Result<Quantized> {
        if e.len() != self.dim() {
            return Err(RqError::DimensionMismatch {
                expected: self.dim(),
                found: e.len(),
            });
        }
        let mut residual: Vec<f64> = e.iter().map(|&x| f64::from(x)).collect();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut norms = Vec::with_capacity(self.levels.len() + 1);
        norms.push(norm(&residual));
        let mut codes = Vec::with_capacity(self.levels.len());
        for book in &self.levels {
            let (k, _) = book.nearest(&residual);
            for (r, &z) in residual.iter_mut().zip(book.entries.row(k)) {
                *r -= f64::from(z);
            }
            norms.push(norm(&residual));
            codes.push(k as u32);
        }
        Ok(Quantized {
            sid: SemanticId(codes),
            residual_norms: norms,
            residual,
        })
    }

    /// Sum of the codewords addressed by `sid`.
    pub fn reconstruct(&self, sid: &SemanticId) -> Result<Vec<f64>> {
        if sid.levels() != self.levels.len() {
            return Err(RqError::LevelMismatch {
                expected: self.levels.len(),
                found: sid.levels(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        for (l, (book, &code)) in self.levels.iter().zip(sid.codes()).enumerate() {
            if code as usize >= book.len() {
                return Err(RqError::CodeOutOfRange {
                    level: l + 1,
                    code,
                    size: book.len(),
                });
            }
            for (o, &z) in out.iter_mut().zip(book.entries.row(code as usize)) {
                *o += f64::from(z);
            }
        }
        Ok(out)
    }

    /// Reconstruction and per-level commitment terms, evaluated (not optimized).
    pub fn rq_loss(&self, semantic: &Matrix<f32>, beta: f64) -> Result<RqLossReport> {
        if !(beta >= 0.0) {
            return Err(RqError::InvalidConfig(format!("beta {beta} must be nonnegative")));
        }
        let n = semantic.rows();
        let mut reconstruction = 0.0;
        let mut commitment = vec![0.0; self.levels.len()];
        for e in semantic.iter_rows() {
            let q = self.quantize(e)?;
            let recon = self.reconstruct(&q.sid)?;
            reconstruction += sq_dist_mixed(e, &recon);
            for (c, norm) in commitment.iter_mut().zip(&q.residual_norms[1..]) {
                *c += norm * norm;
            }
        }
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        reconstruction *= scale;
        commitment.iter_mut().for_each(|c| *c *= scale);
        let total = reconstruction + beta * commitment.iter().sum::<f64>();
        Ok(RqLossReport {
            reconstruction,
            commitment_per_level: commitment,
            beta,
            total,
        })
    }

    /// Quantizes every row of `semantic`.
    pub fn tokenize_all(&self, semantic: &Matrix<f32>) -> Result<Vec<SemanticId>> {
        (0..semantic.rows())
            .into_par_iter()
            .map(|i| self.quantize(semantic.row(i)).map(|q| q.sid))
            .collect()
    }

    /// Writes the entries in the SQZ1 layout with the stack header in the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let total: usize = self.codebook_sizes().iter().sum();
        let mut primary = Matrix::zeros(0, d);
        let mut ids = Vec::with_capacity(total);
        for (l, book) in self.levels.iter().enumerate() {
            for (k, row) in book.entries.iter_rows().enumerate() {
                primary.push_row(row);
                ids.push(((l as u64) << 32) | k as u64);
            }
        }
        let header = StackHeader {
            levels: self.levels.len(),
            codebook_sizes: self.codebook_sizes(),
            d,
            config: self.config.clone(),
            ema_counts: self.levels.iter().map(|b| b.ema_counts.clone()).collect(),
        };
        write_sqz1(
            path,
            &Sqz1Block {
                ids,
                primary,
                secondary: Matrix::zeros(total, 0),
            },
            Some(serde_json::to_value(header)?),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (block, meta) = read_sqz1(path)?;
        let header: StackHeader = match meta.and_then(|m| m.extra) {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(RqError::InvalidConfig("codebook file has no header sidecar".into())),
        };
        header.config.validate()?;
        let sizes_ok = header.codebook_sizes == header.config.codebook_sizes
            && header.levels == header.codebook_sizes.len()
            && header.d == block.primary.cols()
            && header.codebook_sizes.iter().sum::<usize>() == block.primary.rows()
            && header.ema_counts.iter().map(Vec::len).eq(header.codebook_sizes.iter().copied());
        if !sizes_ok {
            return Err(RqError::InvalidConfig("codebook header disagrees with entry block".into()));
        }
        let mut start = 0;
        let mut levels = Vec::with_capacity(header.levels);
        for (l, (&size, counts)) in header.codebook_sizes.iter().zip(header.ema_counts).enumerate() {
            let rows: Vec<usize> = (start..start + size).collect();
            let entries = block.primary.select_rows(&rows);
            let mut ema_sums = entries.to_f64();
            for (k, &c) in counts.iter().enumerate() {
                ema_sums.row_mut(k).iter_mut().for_each(|s| *s *= c);
            }
            levels.push(Codebook {
                level: l + 1,
                entries,
                ema_counts: counts,
                ema_sums,
            });
            start += size;
        }
        Ok(Self {
            levels,
            config: header.config,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StackHeader {
    levels: usize,
    codebook_sizes: Vec<usize>,
    d: usize,
    config: RqConfig,
    ema_counts: Vec<Vec<f64>>,
}
