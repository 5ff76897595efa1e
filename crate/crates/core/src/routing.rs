//! Compression of a tokenized history into one vector per interest agent.
//!
//! Soft routing scores every (agent, item) pair by `-||e_j - z_k|| / tau`,
//! normalizes each agent's row over the items, and aggregates ranking-space
//! content with those weights before scaling by the agent weight:
//!
//! ```text
//! H = diag(w) · softmax_rows(-dist(Z, E) / tau) · E'
//! ```
//!
//! Hard routing instead averages only the items whose SID equals the agent's
//! path, and drops everything else.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, InteractionSequence, ItemCorpus};
use crate::matrix::{softmax_into, sq_dist64, sq_dist_mixed, sq_norm, Matrix};
use crate::rq::SemanticId;
use crate::tree::InterestAgentSet;

/// Seven days, in seconds.
pub const DEFAULT_HALF_LIFE: f64 = 604_800.0;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in routing input")]
    NonFinite,
    #[error("temperature must be positive, got {0}")]
    InvalidTau(f64),
    #[error("time-decay half-life must be positive, got {0}")]
    InvalidHalfLife(f64),
    #[error("routing needs at least one agent and one item")]
    Empty,
    #[error("event {index} at {timestamp} is later than now = {now}")]
    FutureEvent { index: usize, timestamp: i64, now: i64 },
    #[error("{sids} semantic ids supplied for {events} events")]
    SidsMisaligned { sids: usize, events: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = RoutingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDecay {
    Off,
    /// Appends `exp(-(now - t) / half_life)` to each content row.
    HalfLife(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Soft,
    Hard,
    /// Soft aggregation restricted to items whose SID matches some agent.
    SoftMatchedOnly,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "soft_matched_only" => Ok(Self::SoftMatchedOnly),
            other => Err(format!("unknown routing mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub tau: f64,
    pub time_decay: TimeDecay,
    pub mode: RoutingMode,
}

/// Default routing temperature, `exp(-0.18)`.
pub fn default_tau() -> f64 {
    (-0.18f64).exp()
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            time_decay: TimeDecay::Off,
            mode: RoutingMode::Soft,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RoutingError::InvalidTau(self.tau));
        }
        if let TimeDecay::HalfLife(h) = self.time_decay {
            if !(h > 0.0 && h.is_finite()) {
                return Err(RoutingError::InvalidHalfLife(h));
            }
        }
        Ok(())
    }
}

/// `K` aggregated rows, aligned with the agent set that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedSequence {
    pub user_id: u64,
    /// `K x d''`, where `d'' = d'` plus one column when time decay is on.
    pub vectors: Matrix<f64>,
    pub agent_paths: Vec<SemanticId>,
    pub weights: Vec<f64>,
    /// Agents that received no items (hard modes only); their rows are zero.
    pub empty: Vec<bool>,
}

impl CompressedSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

/// `K x N` routing weights: row `i` is the softmax over items `j` of
/// `-||e_j - z_i|| / tau`.
pub fn routing_weight_matrix(
    prototypes: &Matrix<f64>,
    items: &Matrix<f64>,
    tau: f64,
) -> Result<Matrix<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RoutingError::InvalidTau(tau));
    }
    if prototypes.is_empty() || items.is_empty() {
        return Err(RoutingError::Empty);
    }
    if prototypes.cols() != items.cols() {
        return Err(RoutingError::DimensionMismatch(format!(
            "prototypes have {} columns, items {}",
            prototypes.cols(),
            items.cols()
        )));
    }
    if !prototypes.all_finite() || !items.all_finite() {
        return Err(RoutingError::NonFinite);
    }
    let (k, n) = (prototypes.rows(), items.rows());
    let mut out = Matrix::zeros(k, n);
    let mut logits = vec![0.0; n];
    for i in 0..k {
        let z = prototypes.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = -sq_dist64(items.row(j), z).sqrt() / tau;
        }
        softmax_into(&logits, out.row_mut(i));
    }
    Ok(out)
}

/// Ranking rows of the history items, with the decay scalar appended if enabled.
pub fn content_rows(
    history: &InteractionSequence,
    rows: &[usize],
    corpus: &ItemCorpus,
    decay: TimeDecay,
    now: i64,
) -> Result<Matrix<f64>> {
    let dp = corpus.ranking_dim();
    let extra = usize::from(matches!(decay, TimeDecay::HalfLife(_)));
    let mut out = Matrix::zeros(rows.len(), dp + extra);
    for (j, (&row, ev)) in rows.iter().zip(history.events()).enumerate() {
        let dst = out.row_mut(j);
        for (d, &x) in dst.iter_mut().zip(corpus.ranking().row(row)) {
            *d = f64::from(x);
        }
        if let TimeDecay::HalfLife(h) = decay {
            if ev.timestamp > now {
                return Err(RoutingError::FutureEvent {
                    index: j,
                    timestamp: ev.timestamp,
                    now,
                });
            }
            dst[dp] = (-((now - ev.timestamp) as f64) / h).exp();
        }
    }
    Ok(out)
}

fn semantic_rows(rows: &[usize], corpus: &ItemCorpus) -> Matrix<f64> {
    corpus.semantic().select_rows(rows).to_f64()
}

fn check_agents(agents: &InterestAgentSet, corpus: &ItemCorpus) -> Result<()> {
    if agents.is_empty() {
        return Err(RoutingError::Empty);
    }
    if agents.agents[0].prototype.len() != corpus.semantic_dim() {
        return Err(RoutingError::DimensionMismatch(format!(
            "prototypes have {} components, corpus semantic width is {}",
            agents.agents[0].prototype.len(),
            corpus.semantic_dim()
        )));
    }
    Ok(())
}

fn soft_rows(
    agents: &InterestAgentSet,
    sem: &Matrix<f64>,
    content: &Matrix<f64>,
    tau: f64,
) -> Result<Matrix<f64>> {
    let weights = routing_weight_matrix(&agents.prototypes(), sem, tau)?;
    let mut out = weights.matmul(content);
    for (k, agent) in agents.agents.iter().enumerate() {
        out.row_mut(k).iter_mut().for_each(|x| *x *= agent.weight);
    }
    Ok(out)
}

/// Soft routing over every history item.
pub fn soft_compress(
    agents: &InterestAgentSet,
    history: &InteractionSequence,
    corpus: &ItemCorpus,
    cfg: &RoutingConfig,
    now: i64,
) -> Result<CompressedSequence> {
    cfg.validate()?;
    check_agents(agents, corpus)?;
    let rows = corpus.resolve(history)?;
    let content = content_rows(history, &rows, corpus, cfg.time_decay, now)?;
    let vectors = soft_rows(agents, &semantic_rows(&rows, corpus), &content, cfg.tau)?;
    Ok(CompressedSequence {
        user_id: history.user_id(),
        vectors,
        agent_paths: agents.paths(),
        weights: agents.weights(),
        empty: vec![false; agents.len()],
    })
}

/// Agent index for each event whose SID is exactly some agent's path.
fn exact_matches(agents: &InterestAgentSet, sids: &[SemanticId]) -> Vec<Option<usize>> {
    sids.iter().map(|s| agents.position(s)).collect()
}

fn check_sids(history: &InteractionSequence, sids: &[SemanticId]) -> Result<()> {
    if sids.len() != history.len() {
        return Err(RoutingError::SidsMisaligned {
            sids: sids.len(),
            events: history.len(),
        });
    }
    Ok(())
}

/// Exact-SID routing: agent row = weight * mean of its matched content rows.
/// `sids` must be aligned with the history events.
pub fn hard_compress(
    agents: &InterestAgentSet,
    history: &InteractionSequence,
    sids: &[SemanticId],
    corpus: &ItemCorpus,
    cfg: &RoutingConfig,
    now: i64,
) -> Result<CompressedSequence> {
    cfg.validate()?;
    check_agents(agents, corpus)?;
    check_sids(history, sids)?;
    let rows = corpus.resolve(history)?;
    let content = content_rows(history, &rows, corpus, cfg.time_decay, now)?;
    let mut vectors = Matrix::zeros(agents.len(), content.cols());
    let mut hits = vec![0usize; agents.len()];
    for (j, m) in exact_matches(agents, sids).into_iter().enumerate() {
        if let Some(k) = m {
            hits[k] += 1;
            for (o, &x) in vectors.row_mut(k).iter_mut().zip(content.row(j)) {
                *o += x;
            }
        }
    }
    for (k, agent) in agents.agents.iter().enumerate() {
        if hits[k] > 0 {
            let scale = agent.weight / hits[k] as f64;
            vectors.row_mut(k).iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(CompressedSequence {
        user_id: history.user_id(),
        vectors,
        agent_paths: agents.paths(),
        weights: agents.weights(),
        empty: hits.iter().map(|&h| h == 0).collect(),
    })
}

/// Soft routing over only the items that some agent matches exactly.
pub fn soft_matched_only_compress(
    agents: &InterestAgentSet,
    history: &InteractionSequence,
    sids: &[SemanticId],
    corpus: &ItemCorpus,
    cfg: &RoutingConfig,
    now: i64,
) -> Result<CompressedSequence> {
    cfg.validate()?;
    check_agents(agents, corpus)?;
    check_sids(history, sids)?;
    let rows = corpus.resolve(history)?;
    let content = content_rows(history, &rows, corpus, cfg.time_decay, now)?;
    let kept: Vec<usize> = exact_matches(agents, sids)
        .iter()
        .enumerate()
        .filter_map(|(j, m)| m.map(|_| j))
        .collect();
    let (vectors, empty) = if kept.is_empty() {
        (Matrix::zeros(agents.len(), content.cols()), vec![true; agents.len()])
    } else {
        let kept_rows: Vec<usize> = kept.iter().map(|&j| rows[j]).collect();
        let v = soft_rows(
            agents,
            &semantic_rows(&kept_rows, corpus),
            &content.select_rows(&kept),
            cfg.tau,
        )?;
        (v, vec![false; agents.len()])
    };
    Ok(CompressedSequence {
        user_id: history.user_id(),
        vectors,
        agent_paths: agents.paths(),
        weights: agents.weights(),
        empty,
    })
}

/// Dispatches on `cfg.mode`. `sids` is only read by the hard modes.
pub fn compress(
    agents: &InterestAgentSet,
    history: &InteractionSequence,
    sids: &[SemanticId],
    corpus: &ItemCorpus,
    cfg: &RoutingConfig,
    now: i64,
) -> Result<CompressedSequence> {
    match cfg.mode {
        RoutingMode::Soft => soft_compress(agents, history, corpus, cfg, now),
        RoutingMode::Hard => hard_compress(agents, history, sids, corpus, cfg, now),
        RoutingMode::SoftMatchedOnly => {
            soft_matched_only_compress(agents, history, sids, corpus, cfg, now)
        }
    }
}

/// `N x K` item-to-agent weights: row `j` is the softmax over agents of
/// `-||e_j - z_k|| / tau`.
pub fn item_agent_weights(prototypes: &Matrix<f64>, items: &Matrix<f64>, tau: f64) -> Result<Matrix<f64>> {
    routing_weight_matrix(items, prototypes, tau)
}

/// Mean squared distance between each history item's semantic vector and what
/// the compressed set offers for it.
///
/// * `Soft`: the mixture of agent prototypes weighted by the item's softmax
///   over agents at temperature `tau`.
/// * `Hard`: the prototype of the agent whose path equals the item's SID.
/// * `SoftMatchedOnly`: the soft mixture for matched items.
///
/// Items a rule drops are represented by nothing, so they are measured
/// against the zero vector.
pub fn quantization_error(
    agents: &InterestAgentSet,
    history: &InteractionSequence,
    sids: &[SemanticId],
    corpus: &ItemCorpus,
    mode: RoutingMode,
    tau: f64,
) -> Result<f64> {
    check_agents(agents, corpus)?;
    check_sids(history, sids)?;
    let rows = corpus.resolve(history)?;
    let protos = agents.prototypes();
    let matches = exact_matches(agents, sids);
    let mixtures = match mode {
        RoutingMode::Hard => None,
        _ => {
            let w = item_agent_weights(&protos, &semantic_rows(&rows, corpus), tau)?;
            Some(w.matmul(&protos))
        }
    };
    let total: f64 = rows
        .iter()
        .enumerate()
        .map(|(j, &row)| {
            let e = corpus.semantic().row(row);
            match (mode, matches[j], &mixtures) {
                (RoutingMode::Soft, _, Some(mix)) => sq_dist_mixed(e, mix.row(j)),
                (RoutingMode::SoftMatchedOnly, Some(_), Some(mix)) => sq_dist_mixed(e, mix.row(j)),
                (RoutingMode::Hard, Some(k), _) => sq_dist_mixed(e, protos.row(k)),
                _ => sq_norm(e),
            }
        })
        .sum();
    Ok(total / rows.len() as f64)
}
