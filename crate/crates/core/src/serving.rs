//! Candidate-to-sequence multi-head attention, its cache-decomposed variant,
//! an analytical FLOP ledger, and a request-replay simulator.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs. Only projections and
//! matrix products are counted; softmax and exponentials are not.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{zipf_weights, CorpusError, InteractionSequence, ItemCorpus};
use crate::matrix::{softmax_into, Matrix};
use crate::rng::{stream, Purpose};
use crate::routing::{self, RoutingConfig, RoutingError, TimeDecay};
use crate::rq::{CodebookStack, RqError, SemanticId};
use crate::tree::{self, TreeError, VoteTrie, VotingConfig};

#[derive(Debug, Error)]
pub enum ServingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("replay row {row}: {message}")]
    Replay { row: usize, message: String },
    #[error("replay is not sorted by timestamp at row {0}")]
    ReplayUnsorted(usize),
    #[error("request {request}: unknown user {user_id}")]
    UnknownUser { request: usize, user_id: u64 },
    #[error("request {request}: unknown candidate item {item_id}")]
    UnknownCandidate { request: usize, item_id: u64 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rq(#[from] RqError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ServingError> = std::result::Result<T, E>;

/// Sizes of the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhaConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for MhaConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 16,
            output_dim: 64,
            seed: 0,
        }
    }
}

/// Per-head projections stored side by side: column block `h` of `wq`, `wk`
/// and `wv` (width `head_dim`) belongs to head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub head_dim: usize,
    /// `d'' x H*d_h`
    pub wq: Matrix<f64>,
    pub wk: Matrix<f64>,
    pub wv: Matrix<f64>,
    /// `H*d_h x d_out`
    pub wo: Matrix<f64>,
    pub seed: u64,
}

impl MhaParams {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn seeded(input_dim: usize, cfg: &MhaConfig) -> Result<Self> {
        if input_dim == 0 || cfg.heads == 0 || cfg.head_dim == 0 || cfg.output_dim == 0 {
            return Err(ServingError::InvalidConfig(format!(
                "attention sizes must be positive (input {input_dim}, {cfg:?})"
            )));
        }
        let width = cfg.heads * cfg.head_dim;
        let draw = |index: u64, rows: usize, cols: usize| {
            let mut rng = stream(cfg.seed, Purpose::Attention, index);
            let scale = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        Ok(Self {
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            wq: draw(0, input_dim, width),
            wk: draw(1, input_dim, width),
            wv: draw(2, input_dim, width),
            wo: draw(3, width, cfg.output_dim),
            seed: cfg.seed,
        })
    }

    /// Builds parameters from explicit matrices, checking shapes.
    pub fn from_matrices(
        heads: usize,
        head_dim: usize,
        wq: Matrix<f64>,
        wk: Matrix<f64>,
        wv: Matrix<f64>,
        wo: Matrix<f64>,
    ) -> Result<Self> {
        let width = heads * head_dim;
        let input = wq.rows();
        let ok = width > 0
            && input > 0
            && [&wq, &wk, &wv].iter().all(|m| m.rows() == input && m.cols() == width)
            && wo.rows() == width
            && wo.cols() > 0;
        if !ok {
            return Err(ServingError::DimensionMismatch(format!(
                "projection shapes inconsistent with {heads} heads of width {head_dim}"
            )));
        }
        if ![&wq, &wk, &wv, &wo].iter().all(|m| m.all_finite()) {
            return Err(ServingError::InvalidConfig("non-finite projection weight".into()));
        }
        Ok(Self { heads, head_dim, wq, wk, wv, wo, seed: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.wo.cols()
    }

    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check_input(&self, x: &Matrix<f64>, what: &str) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(ServingError::DimensionMismatch(format!(
                "{what} rows have {} components, attention expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn project_row(&self, x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; w.cols()];
        for (&xi, wrow) in x.iter().zip(w.iter_rows()) {
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
        out
    }

    /// Post-projection query of one candidate (all heads concatenated).
    pub fn project_query(&self, candidate: &[f64]) -> Vec<f64> {
        self.project_row(candidate, &self.wq)
    }

    /// Keys and values of the compressed sequence.
    pub fn project_kv(&self, compressed: &Matrix<f64>) -> (Matrix<f64>, Matrix<f64>) {
        (compressed.matmul(&self.wk), compressed.matmul(&self.wv))
    }
}

/// Attention output plus per-head weights (`weights[h]` is `M x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Matrix<f64>,
    pub weights: Vec<Matrix<f64>>,
}

fn attend(queries: &Matrix<f64>, keys: &Matrix<f64>, values: &Matrix<f64>, params: &MhaParams) -> Attention {
    let (m, k, dh) = (queries.rows(), keys.rows(), params.head_dim);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(m, params.width());
    let mut weights = Vec::with_capacity(params.heads);
    let mut logits = vec![0.0; k];
    for h in 0..params.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w = Matrix::zeros(m, k);
        for i in 0..m {
            let q = &queries.row(i)[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                let key = &keys.row(j)[cols.clone()];
                *l = q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_into(&logits, w.row_mut(i));
            let dst = &mut concat.row_mut(i)[cols.clone()];
            for (j, &a) in w.row(i).iter().enumerate() {
                for (d, &v) in dst.iter_mut().zip(&values.row(j)[cols.clone()]) {
                    *d += a * v;
                }
            }
        }
        weights.push(w);
    }
    Attention {
        output: concat.matmul(&params.wo),
        weights,
    }
}

fn check_keys(compressed: &Matrix<f64>) -> Result<()> {
    if compressed.rows() == 0 {
        return Err(ServingError::DimensionMismatch("compressed sequence has no rows".into()));
    }
    Ok(())
}

/// Scaled dot-product attention with candidates as queries and the compressed
/// sequence as keys and values.
pub fn mha_forward(candidates: &Matrix<f64>, compressed: &Matrix<f64>, params: &MhaParams) -> Result<Attention> {
    params.check_input(candidates, "candidate")?;
    params.check_input(compressed, "compressed")?;
    check_keys(compressed)?;
    let queries = candidates.matmul(&params.wq);
    let (keys, values) = params.project_kv(compressed);
    Ok(attend(&queries, &keys, &values, params))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCacheConfig {
    pub enabled: bool,
    /// Maximum number of cached queries; `None` is unbounded.
    pub capacity: Option<usize>,
}

impl QueryCacheConfig {
    pub fn unbounded() -> Self {
        Self { enabled: true, capacity: None }
    }
}

#[derive(Debug, Default)]
struct QueryCacheInner {
    entries: HashMap<u64, (Vec<f64>, u64)>,
    /// last-use tick -> key, for LRU eviction
    recency: BTreeMap<u64, u64>,
    tick: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
}

/// Post-projection candidate queries keyed by item id, shared across
/// requests. Lookups hold the lock while computing, so a key is projected at
/// most once until it is evicted.
#[derive(Debug)]
pub struct QueryCache {
    cfg: QueryCacheConfig,
    inner: Mutex<QueryCacheInner>,
}

impl QueryCache {
    pub fn new(cfg: QueryCacheConfig) -> Self {
        Self { cfg, inner: Mutex::new(QueryCacheInner::default()) }
    }

    /// Returns the cached query for `item_id` or computes and stores it. The
    /// flag is true on a hit.
    pub fn get_or_compute(&self, item_id: u64, compute: impl FnOnce() -> Vec<f64>) -> (Vec<f64>, bool) {
        if !self.cfg.enabled {
            return (compute(), false);
        }
        let mut g = self.inner.lock().expect("query cache poisoned");
        let inner = &mut *g;
        inner.tick += 1;
        let tick = inner.tick;
        if let Some((q, last)) = inner.entries.get_mut(&item_id) {
            inner.recency.remove(last);
            *last = tick;
            inner.recency.insert(tick, item_id);
            inner.hits += 1;
            return (q.clone(), true);
        }
        inner.misses += 1;
        let q = compute();
        if self.cfg.capacity == Some(0) {
            return (q, false);
        }
        if let Some(cap) = self.cfg.capacity {
            while inner.entries.len() >= cap {
                let (_, oldest) = inner.recency.pop_first().expect("nonempty");
                inner.entries.remove(&oldest);
                inner.evictions += 1;
            }
        }
        inner.entries.insert(item_id, (q.clone(), tick));
        inner.recency.insert(tick, item_id);
        (q, false)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("query cache poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lifetime (hits, misses, evictions).
    pub fn counters(&self) -> (u64, u64, u64) {
        let g = self.inner.lock().expect("query cache poisoned");
        (g.hits, g.misses, g.evictions)
    }
}

/// Identifies one request: keys and values are reused only inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequestWindow {
    pub user_id: u64,
    pub request: u64,
}

/// Keys and values of the current request window.
#[derive(Debug, Default)]
pub struct KvCache {
    slot: Option<(RequestWindow, Matrix<f64>, Matrix<f64>)>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns keys and values for `window`, projecting only when the window
    /// changed. The flag is true when a projection ran.
    fn get_or_project(
        &mut self,
        window: RequestWindow,
        compressed: &Matrix<f64>,
        params: &MhaParams,
    ) -> (&Matrix<f64>, &Matrix<f64>, bool) {
        let fresh = !matches!(&self.slot, Some((w, ..)) if *w == window);
        if fresh {
            let (k, v) = params.project_kv(compressed);
            self.slot = Some((window, k, v));
        }
        let (_, k, v) = self.slot.as_ref().expect("filled");
        (k, v, fresh)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub query_hits: usize,
    pub query_misses: usize,
    /// Number of key/value projections over the compressed sequence.
    pub kv_passes: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.query_hits + self.query_misses;
        if total == 0 {
            0.0
        } else {
            self.query_hits as f64 / total as f64
        }
    }
}

/// Same attention as [`mha_forward`], but candidate queries come from
/// `queries` and keys/values from `kv` when available. With `kv = None` the
/// keys and values are projected once per candidate.
pub fn cached_mha_forward(
    candidate_ids: &[u64],
    candidates: &Matrix<f64>,
    compressed: &Matrix<f64>,
    params: &MhaParams,
    queries: &QueryCache,
    kv: Option<(&mut KvCache, RequestWindow)>,
) -> Result<(Attention, CacheStats)> {
    params.check_input(candidates, "candidate")?;
    params.check_input(compressed, "compressed")?;
    check_keys(compressed)?;
    if candidate_ids.len() != candidates.rows() {
        return Err(ServingError::DimensionMismatch(format!(
            "{} candidate ids for {} candidate rows",
            candidate_ids.len(),
            candidates.rows()
        )));
    }
    let mut stats = CacheStats::default();
    let mut q = Matrix::zeros(candidates.rows(), params.width());
    for (i, &id) in candidate_ids.iter().enumerate() {
        let (row, hit) = queries.get_or_compute(id, || params.project_query(candidates.row(i)));
        if hit {
            stats.query_hits += 1;
        } else {
            stats.query_misses += 1;
        }
        q.row_mut(i).copy_from_slice(&row);
    }
    let attention = match kv {
        Some((cache, window)) => {
            let (k, v, fresh) = cache.get_or_project(window, compressed, params);
            stats.kv_passes += usize::from(fresh);
            attend(&q, k, v, params)
        }
        None => {
            let mut out = Matrix::zeros(0, params.output_dim());
            let mut weights = vec![Matrix::zeros(0, compressed.rows()); params.heads];
            for i in 0..q.rows() {
                let (k, v) = params.project_kv(compressed);
                stats.kv_passes += 1;
                let one = attend(&q.select_rows(&[i]), &k, &v, params);
                out.push_row(one.output.row(0));
                for (w, ow) in weights.iter_mut().zip(&one.weights) {
                    w.push_row(ow.row(0));
                }
            }
            Attention { output: out, weights }
        }
    };
    Ok((attention, stats))
}

/// Sizes entering the FLOP ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    /// History length.
    pub n: u64,
    /// Candidates per request.
    pub m: u64,
    /// Compressed length.
    pub k: u64,
    /// Width of attention inputs.
    pub d_model: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub d_out: u64,
    /// Width of the vectors routing compares.
    pub routing_dim: u64,
}

impl AttentionShape {
    /// Shape at which projections dominate: attention straight over a
    /// 200-token sequence with 200 candidates, 512-wide inputs and four
    /// 16-wide heads.
    pub const REFERENCE: Self = Self {
        n: 200,
        m: 200,
        k: 200,
        d_model: 512,
        heads: 4,
        head_dim: 16,
        d_out: 64,
        routing_dim: 512,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum FlopPath {
    /// Attention over all `n` history items.
    Direct,
    /// Routing to `k` vectors, then attention over them.
    Compressed,
    /// As `Compressed`, with `query_hits` candidate queries served from cache
    /// and keys/values projected `kv_passes` times.
    CompressedCached { query_hits: u64, kv_passes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub projection_flops: u64,
    /// Includes `routing_flops` on compressed paths.
    pub score_flops: u64,
    pub weighted_sum_flops: u64,
    pub output_flops: u64,
    /// Routing distance cost, already part of `score_flops`.
    pub routing_flops: u64,
    pub total: u64,
    pub projection_share: f64,
}

impl FlopLedger {
    fn from_parts(projection: u64, score: u64, weighted: u64, output: u64, routing: u64) -> Self {
        let total = projection + score + weighted + output;
        Self {
            projection_flops: projection,
            score_flops: score,
            weighted_sum_flops: weighted,
            output_flops: output,
            routing_flops: routing,
            total,
            projection_share: if total == 0 { 0.0 } else { projection as f64 / total as f64 },
        }
    }

    /// Sums two ledgers and recomputes the share.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_parts(
            self.projection_flops + other.projection_flops,
            self.score_flops + other.score_flops,
            self.weighted_sum_flops + other.weighted_sum_flops,
            self.output_flops + other.output_flops,
            self.routing_flops + other.routing_flops,
        )
    }

    pub fn zero() -> Self {
        Self::from_parts(0, 0, 0, 0, 0)
    }
}

/// Closed-form FLOP counts for one request.
pub fn flop_count(shape: &AttentionShape, path: FlopPath) -> FlopLedger {
    let s = shape;
    let width = s.heads * s.head_dim;
    let proj_per_token = 2 * s.d_model * width;
    let keys = match path {
        FlopPath::Direct => s.n,
        _ => s.k,
    };
    let (query_tokens, kv_passes) = match path {
        FlopPath::CompressedCached { query_hits, kv_passes } => (s.m.saturating_sub(query_hits), kv_passes),
        _ => (s.m, 1),
    };
    let projection = proj_per_token * (query_tokens + 2 * keys * kv_passes);
    let routing = match path {
        FlopPath::Direct => 0,
        _ => 2 * s.n * s.k * s.routing_dim,
    };
    let matmul = 2 * s.m * keys * width;
    FlopLedger::from_parts(projection, matmul + routing, matmul, 2 * s.m * width * s.d_out, routing)
}

/// `(N*K + K*M) / (N*M)`: score operations after compression relative to
/// attention over the raw history.
pub fn score_op_ratio(n: u64, m: u64, k: u64) -> f64 {
    (n * k + k * m) as f64 / (n * m) as f64
}

/// One serving request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub timestamp: i64,
    pub user_id: u64,
    pub candidate_ids: Vec<u64>,
}

/// Writes `timestamp,user_id,candidate_ids` with ids joined by `;`.
pub fn write_replay(path: &Path, records: &[ReplayRecord]) -> Result<()> {
    let mut out = String::from("timestamp,user_id,candidate_ids\n");
    for r in records {
        let ids: Vec<String> = r.candidate_ids.iter().map(u64::to_string).collect();
        writeln!(out, "{},{},{}", r.timestamp, r.user_id, ids.join(";")).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_replay(path: &Path) -> Result<Vec<ReplayRecord>> {
    parse_replay(&fs::read_to_string(path)?)
}

pub fn parse_replay(text: &str) -> Result<Vec<ReplayRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().map(|h| h.split(',').map(str::trim).collect()).unwrap_or_default();
    if header != ["timestamp", "user_id", "candidate_ids"] {
        return Err(ServingError::Replay {
            row: 0,
            message: "header must be timestamp,user_id,candidate_ids".into(),
        });
    }
    let mut out: Vec<ReplayRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let err = |message: String| ServingError::Replay { row, message };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", f.len())));
        }
        let timestamp: i64 = f[0].parse().map_err(|e| err(format!("timestamp: {e}")))?;
        let user_id: u64 = f[1].parse().map_err(|e| err(format!("user_id: {e}")))?;
        let candidate_ids = f[2]
            .split(';')
            .map(|s| s.trim().parse::<u64>().map_err(|e| err(format!("candidate id {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = out.last() {
            if timestamp < prev.timestamp {
                return Err(ServingError::ReplayUnsorted(row));
            }
        }
        out.push(ReplayRecord { timestamp, user_id, candidate_ids });
    }
    Ok(out)
}

/// Parameters for a synthetic request stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub requests: usize,
    pub candidates_per_request: usize,
    /// Candidates are drawn from the first `pool_size` corpus items.
    pub pool_size: usize,
    pub zipf_exponent: f64,
    pub start_timestamp: i64,
    pub timestamp_step: i64,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            requests: 1000,
            candidates_per_request: 50,
            pool_size: 10_000,
            zipf_exponent: 1.2,
            start_timestamp: 1_700_000_000,
            timestamp_step: 60,
            seed: 0,
        }
    }
}

/// Requests cycle through `users` in a seeded order; candidates are drawn
/// with replacement from a Zipf-skewed pool (distinct within a request).
pub fn generate_replay(cfg: &ReplayConfig, users: &[u64], corpus: &ItemCorpus) -> Result<Vec<ReplayRecord>> {
    let pool = cfg.pool_size.min(corpus.len());
    if users.is_empty() || pool == 0 || cfg.candidates_per_request == 0 || cfg.candidates_per_request > pool {
        return Err(ServingError::InvalidConfig(format!(
            "replay needs users, a nonempty pool and 1..={pool} candidates per request"
        )));
    }
    let weights = zipf_weights(pool, cfg.zipf_exponent);
    let dist = WeightedIndex::new(&weights).map_err(|e| ServingError::InvalidConfig(e.to_string()))?;
    let mut rng = stream(cfg.seed, Purpose::Replay, 0);
    let mut out = Vec::with_capacity(cfg.requests);
    for r in 0..cfg.requests {
        let user_id = users[rng.random_range(0..users.len())];
        let mut picked: Vec<u64> = Vec::with_capacity(cfg.candidates_per_request);
        while picked.len() < cfg.candidates_per_request {
            let id = corpus.ids()[dist.sample(&mut rng)];
            if !picked.contains(&id) {
                picked.push(id);
            }
        }
        out.push(ReplayRecord {
            timestamp: cfg.start_timestamp + r as i64 * cfg.timestamp_step,
            user_id,
            candidate_ids: picked,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    /// Seconds between agent rebuilds for a user.
    pub agent_refresh_period: i64,
    pub candidate_query_cache: QueryCacheConfig,
    pub kv_reuse_within_request: bool,
    pub voting: VotingConfig,
    pub routing: RoutingConfig,
    pub attention: MhaConfig,
    /// Record real elapsed time of both paths.
    pub measure_wall_time: bool,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            agent_refresh_period: 86_400,
            candidate_query_cache: QueryCacheConfig::unbounded(),
            kv_reuse_within_request: true,
            voting: VotingConfig::default(),
            routing: RoutingConfig::default(),
            attention: MhaConfig::default(),
            measure_wall_time: false,
        }
    }
}

impl ServingConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.agent_refresh_period < 0 {
            return Err(ServingError::InvalidConfig("agent_refresh_period must be nonnegative".into()));
        }
        self.voting.validate(levels)?;
        self.routing.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub timestamp: i64,
    pub user_id: u64,
    pub shape: AttentionShape,
    pub agents_rebuilt: bool,
    pub vanilla: FlopLedger,
    pub cached: FlopLedger,
    pub cache: CacheStats,
    pub max_divergence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vanilla_nanos: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cached_nanos: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingReport {
    pub flop_convention: String,
    pub requests: Vec<RequestRecord>,
    /// Requests whose user had no events at or before the request time.
    pub skipped_requests: usize,
    pub agent_builds: usize,
    pub hit_rate: f64,
    pub max_divergence: f64,
    pub vanilla_total: FlopLedger,
    pub cached_total: FlopLedger,
    pub projection_share: f64,
}

const FLOP_CONVENTION: &str = "multiply-accumulate = 2 FLOPs; projections and matrix products only";

struct UserState {
    built_at: i64,
    agents: crate::tree::InterestAgentSet,
}

/// Replays requests in order. Each user's agents are rebuilt when the last
/// build is at least `agent_refresh_period` old; every request compresses the
/// user's history up to the request time once and scores its candidates on
/// both the vanilla and the cached attention path.
pub struct ServingSimulator<'a> {
    corpus: &'a ItemCorpus,
    item_sids: Vec<SemanticId>,
    stack: &'a CodebookStack,
    histories: HashMap<u64, &'a InteractionSequence>,
    cfg: ServingConfig,
    params: MhaParams,
    queries: QueryCache,
    users: HashMap<u64, UserState>,
}

impl<'a> ServingSimulator<'a> {
    pub fn new(
        corpus: &'a ItemCorpus,
        stack: &'a CodebookStack,
        histories: &'a [InteractionSequence],
        cfg: ServingConfig,
    ) -> Result<Self> {
        cfg.validate(stack.num_levels())?;
        let item_sids = stack.tokenize_all(corpus.semantic())?;
        let width = corpus.ranking_dim() + usize::from(matches!(cfg.routing.time_decay, TimeDecay::HalfLife(_)));
        let params = MhaParams::seeded(width, &cfg.attention)?;
        Ok(Self {
            corpus,
            item_sids,
            stack,
            histories: histories.iter().map(|h| (h.user_id(), h)).collect(),
            queries: QueryCache::new(cfg.candidate_query_cache),
            cfg,
            params,
            users: HashMap::new(),
        })
    }

    pub fn params(&self) -> &MhaParams {
        &self.params
    }

    /// Ranking embeddings of the candidates, with a constant 1 appended when
    /// time decay widens the compressed rows.
    fn candidate_features(&self, request: usize, ids: &[u64]) -> Result<Matrix<f64>> {
        let decay = matches!(self.cfg.routing.time_decay, TimeDecay::HalfLife(_));
        let mut out = Matrix::zeros(ids.len(), self.params.input_dim());
        for (i, &id) in ids.iter().enumerate() {
            let row = self
                .corpus
                .index_of(id)
                .ok_or(ServingError::UnknownCandidate { request, item_id: id })?;
            let dst = out.row_mut(i);
            for (d, &x) in dst.iter_mut().zip(self.corpus.ranking().row(row)) {
                *d = f64::from(x);
            }
            if decay {
                dst[self.corpus.ranking_dim()] = 1.0;
            }
        }
        Ok(out)
    }

    pub fn run(&mut self, replay: &[ReplayRecord]) -> Result<ServingReport> {
        for (i, w) in replay.windows(2).enumerate() {
            if w[1].timestamp < w[0].timestamp {
                return Err(ServingError::ReplayUnsorted(i + 1));
            }
        }
        let mut records = Vec::with_capacity(replay.len());
        let mut skipped = 0;
        let mut builds = 0;
        for (r, req) in replay.iter().enumerate() {
            match self.serve(r, req)? {
                Some(rec) => {
                    builds += usize::from(rec.agents_rebuilt);
                    records.push(rec);
                }
                None => skipped += 1,
            }
        }
        let vanilla_total = records.iter().fold(FlopLedger::zero(), |a, r| a.merge(&r.vanilla));
        let cached_total = records.iter().fold(FlopLedger::zero(), |a, r| a.merge(&r.cached));
        let (hits, lookups) = records.iter().fold((0, 0), |(h, n), r| {
            (h + r.cache.query_hits, n + r.cache.query_hits + r.cache.query_misses)
        });
        Ok(ServingReport {
            flop_convention: FLOP_CONVENTION.into(),
            skipped_requests: skipped,
            agent_builds: builds,
            hit_rate: if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
            max_divergence: records.iter().map(|r| r.max_divergence).fold(0.0, f64::max),
            projection_share: vanilla_total.projection_share,
            vanilla_total,
            cached_total,
            requests: records,
        })
    }

    fn serve(&mut self, r: usize, req: &ReplayRecord) -> Result<Option<RequestRecord>> {
        let full = *self
            .histories
            .get(&req.user_id)
            .ok_or(ServingError::UnknownUser { request: r, user_id: req.user_id })?;
        let Some(history) = full.until(req.timestamp) else {
            return Ok(None);
        };
        let sids = tree::tokenize_with(&history, self.corpus, &self.item_sids)?;

        let stale = match self.users.get(&req.user_id) {
            Some(s) => req.timestamp - s.built_at >= self.cfg.agent_refresh_period,
            None => true,
        };
        if stale {
            let trie = VoteTrie::build(&sids)?;
            let agents = tree::vote(&trie, &self.cfg.voting, self.stack, req.user_id)?;
            self.users.insert(req.user_id, UserState { built_at: req.timestamp, agents });
        }
        let agents = &self.users[&req.user_id].agents;
        let compressed =
            routing::compress(agents, &history, &sids, self.corpus, &self.cfg.routing, req.timestamp)?;
        let candidates = self.candidate_features(r, &req.candidate_ids)?;

        let t0 = Instant::now();
        let vanilla = mha_forward(&candidates, &compressed.vectors, &self.params)?;
        let vanilla_nanos = t0.elapsed().as_nanos() as u64;

        let mut kv = KvCache::new();
        let window = RequestWindow { user_id: req.user_id, request: r as u64 };
        let t1 = Instant::now();
        let (cached, stats) = cached_mha_forward(
            &req.candidate_ids,
            &candidates,
            &compressed.vectors,
            &self.params,
            &self.queries,
            self.cfg.kv_reuse_within_request.then_some((&mut kv, window)),
        )?;
        let cached_nanos = t1.elapsed().as_nanos() as u64;

        let max_divergence = vanilla
            .output
            .as_slice()
            .iter()
            .zip(cached.output.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let shape = AttentionShape {
            n: history.len() as u64,
            m: req.candidate_ids.len() as u64,
            k: compressed.len() as u64,
            d_model: self.params.input_dim() as u64,
            heads: self.params.heads as u64,
            head_dim: self.params.head_dim as u64,
            d_out: self.params.output_dim() as u64,
            routing_dim: self.corpus.semantic_dim() as u64,
        };
        let measure = self.cfg.measure_wall_time;
        Ok(Some(RequestRecord {
            timestamp: req.timestamp,
            user_id: req.user_id,
            shape,
            agents_rebuilt: stale,
            vanilla: flop_count(&shape, FlopPath::Compressed),
            cached: flop_count(
                &shape,
                FlopPath::CompressedCached {
                    query_hits: stats.query_hits as u64,
                    kv_passes: stats.kv_passes as u64,
                },
            ),
            cache: stats,
            max_divergence,
            vanilla_nanos: measure.then_some(vanilla_nanos),
            cached_nanos: measure.then_some(cached_nanos),
        }))
    }
}

/// Convenience wrapper around [`ServingSimulator`].
pub fn simulate_serving(
    replay: &[ReplayRecord],
    corpus: &ItemCorpus,
    stack: &CodebookStack,
    histories: &[InteractionSequence],
    cfg: &ServingConfig,
) -> Result<ServingReport> {
    ServingSimulator::new(corpus, stack, histories, cfg.clone())?.run(replay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn identity(n: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn small_params(d: usize) -> MhaParams {
        MhaParams::seeded(d, &MhaConfig { heads: 2, head_dim: 3, output_dim: 5, seed: 4 }).unwrap()
    }

    #[test]
    fn single_key_passes_its_value_through() {
        let p = small_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands = random_matrix(&mut rng, 6, 4);
        let key = random_matrix(&mut rng, 1, 4);
        let att = mha_forward(&cands, &key, &p).unwrap();
        let expect = key.matmul(&p.wv).matmul(&p.wo);
        for i in 0..6 {
            for h in 0..2 {
                assert_eq!(att.weights[h].get(i, 0), 1.0);
            }
            for (a, b) in att.output.row(i).iter().zip(expect.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_picks_matching_key() {
        let d = 3;
        let p = MhaParams::from_matrices(1, d, identity(d), identity(d), identity(d), identity(d)).unwrap();
        let s = 20.0;
        let keys = Matrix::from_rows(d, &[[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]]).unwrap();
        let query = Matrix::from_rows(d, &[[s, 0.0, 0.0]]).unwrap();
        let att = mha_forward(&query, &keys, &p).unwrap();
        // Logits are s^2/sqrt(3) for the matching key and 0 otherwise.
        let l = s * s / (d as f64).sqrt();
        let w0 = 1.0 / (1.0 + 2.0 * (-l).exp());
        assert!((att.weights[0].get(0, 0) - w0).abs() < 1e-12);
        assert!((att.output.get(0, 0) - s * w0).abs() < 1e-9);
        assert!((att.output.get(0, 0) - s).abs() < 1e-6);
    }

    #[test]
    fn empty_candidates_and_bad_shapes() {
        let p = small_params(4);
        let att = mha_forward(&Matrix::zeros(0, 4), &Matrix::zeros(2, 4), &p).unwrap();
        assert_eq!((att.output.rows(), att.output.cols()), (0, 5));
        assert!(mha_forward(&Matrix::zeros(1, 3), &Matrix::zeros(2, 4), &p).is_err());
        assert!(mha_forward(&Matrix::zeros(1, 4), &Matrix::zeros(0, 4), &p).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = small_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = mha_forward(&random_matrix(&mut rng, 7, 4), &random_matrix(&mut rng, 9, 4), &p).unwrap();
        for w in &att.weights {
            for row in w.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cold_then_warm_cache() {
        let p = small_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cands = random_matrix(&mut rng, 5, 4);
        let seq = random_matrix(&mut rng, 3, 4);
        let ids = [10, 11, 12, 13, 14];
        let cache = QueryCache::new(QueryCacheConfig::unbounded());
        let vanilla = mha_forward(&cands, &seq, &p).unwrap();
        for (req, want_rate) in [(0, 0.0), (1, 1.0)] {
            let mut kv = KvCache::new();
            let window = RequestWindow { user_id: 1, request: req };
            let (att, stats) = cached_mha_forward(&ids, &cands, &seq, &p, &cache, Some((&mut kv, window))).unwrap();
            assert_eq!(stats.hit_rate(), want_rate);
            assert_eq!(stats.kv_passes, 1);
            for (a, b) in att.output.as_slice().iter().zip(vanilla.output.as_slice()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        let shape = AttentionShape { n: 100, m: 5, k: 3, d_model: 4, heads: 2, head_dim: 3, d_out: 5, routing_dim: 4 };
        let warm = flop_count(&shape, FlopPath::CompressedCached { query_hits: 5, kv_passes: 1 });
        let cold = flop_count(&shape, FlopPath::Compressed);
        assert_eq!(cold.projection_flops - warm.projection_flops, 2 * 5 * 4 * 6);
    }

    #[test]
    fn per_candidate_kv_matches_shared_kv() {
        let p = small_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cands = random_matrix(&mut rng, 4, 4);
        let seq = random_matrix(&mut rng, 6, 4);
        let cache = QueryCache::new(QueryCacheConfig::default());
        let (att, stats) = cached_mha_forward(&[1, 2, 3, 4], &cands, &seq, &p, &cache, None).unwrap();
        assert_eq!(stats.kv_passes, 4);
        assert_eq!(stats.query_hits, 0);
        assert_eq!(att, mha_forward(&cands, &seq, &p).unwrap());
    }

    #[test]
    fn lru_evicts_oldest() {
        let cache = QueryCache::new(QueryCacheConfig { enabled: true, capacity: Some(2) });
        cache.get_or_compute(1, || vec![1.0]);
        cache.get_or_compute(2, || vec![2.0]);
        assert!(cache.get_or_compute(1, || unreachable!()).1);
        cache.get_or_compute(3, || vec![3.0]);
        assert_eq!(cache.len(), 2);
        assert!(cache.get_or_compute(1, || vec![0.0]).1);
        assert!(!cache.get_or_compute(2, || vec![2.0]).1);
        assert_eq!(cache.counters().2, 2);
    }

    #[test]
    fn ledger_closed_form() {
        let s = AttentionShape { n: 1000, m: 50, k: 20, d_model: 32, heads: 4, head_dim: 8, d_out: 16, routing_dim: 24 };
        let d = flop_count(&s, FlopPath::Direct);
        // Hand formula, written out independently.
        assert_eq!(d.projection_flops, 2 * 50 * 32 * 32 + 2 * 2 * 1000 * 32 * 32);
        assert_eq!(d.score_flops, 2 * 50 * 1000 * 32);
        assert_eq!(d.weighted_sum_flops, d.score_flops);
        assert_eq!(d.output_flops, 2 * 50 * 32 * 16);
        assert_eq!(d.total, d.projection_flops + d.score_flops + d.weighted_sum_flops + d.output_flops);
        let c = flop_count(&s, FlopPath::Compressed);
        assert_eq!(c.routing_flops, 2 * 1000 * 20 * 24);
        assert_eq!(c.score_flops, 2 * 50 * 20 * 32 + c.routing_flops);
        assert_eq!(c.weighted_sum_flops, 2 * 50 * 20 * 32);
    }

    #[test]
    fn score_ratio_and_reference_share() {
        assert_eq!(score_op_ratio(10_000, 500, 200), 0.42);
        let s = AttentionShape { n: 10_000, m: 500, k: 200, d_model: 64, heads: 4, head_dim: 16, d_out: 64, routing_dim: 64 };
        let direct = flop_count(&s, FlopPath::Direct);
        let comp = flop_count(&s, FlopPath::Compressed);
        assert_eq!(comp.score_flops as f64 / direct.score_flops as f64, 0.42);
        assert!(comp.score_flops < direct.score_flops);

        let r = flop_count(&AttentionShape::REFERENCE, FlopPath::Direct);
        assert_eq!(r.total, 51_200_000);
        assert!(r.projection_share > 0.70);
        // With 64-wide inputs and K = M = 200 projections do not dominate.
        let narrow = AttentionShape { d_model: 64, routing_dim: 64, ..AttentionShape::REFERENCE };
        assert!(flop_count(&narrow, FlopPath::Direct).projection_share < 0.5);
    }

    #[test]
    fn replay_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = vec![
            ReplayRecord { timestamp: 5, user_id: 1, candidate_ids: vec![3, 4] },
            ReplayRecord { timestamp: 9, user_id: 2, candidate_ids: vec![7] },
        ];
        write_replay(&path, &recs).unwrap();
        assert_eq!(read_replay(&path).unwrap(), recs);
        assert!(matches!(
            parse_replay("timestamp,user_id,candidate_ids\n9,1,2\n5,1,3\n"),
            Err(ServingError::ReplayUnsorted(2))
        ));
        assert!(matches!(
            parse_replay("timestamp,user_id,candidate_ids\n9,1,x\n"),
            Err(ServingError::Replay { row: 1, .. })
        ));
    }
}
