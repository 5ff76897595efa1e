//! End-to-end experiment runner over seeded synthetic corpora.
//!
//! For every seed: generate a corpus with planted clusters, train codebooks,
//! tokenize and vote per user, compress with every configured method, then
//! score the methods and optionally replay serving traffic. Seeds are
//! independent and merged in config order, so a config fully determines the
//! report apart from `generated_at`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{self, silhouette, GroupingResult};
use crate::corpus::{
    generate_synthetic_corpus, generate_user_histories, GroundTruth, InteractionSequence, ItemCorpus,
    SyntheticConfig,
};
use crate::matrix::Matrix;
use crate::routing::{self, item_agent_weights, RoutingConfig, RoutingMode};
use crate::rq::{train_codebooks, CodebookStack, RqConfig, SemanticId, DEFAULT_BETA};
use crate::serving::{generate_replay, simulate_serving, ReplayConfig, ServingConfig};
use crate::tree::{self, InterestAgentSet, VoteTrie, VotingConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// A compression method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Soft,
    Hard,
    SoftMatchedOnly,
    Patch,
    Kmeans,
    Lsh,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Soft,
        Method::Hard,
        Method::SoftMatchedOnly,
        Method::Patch,
        Method::Kmeans,
        Method::Lsh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Soft => "soft",
            Method::Hard => "hard",
            Method::SoftMatchedOnly => "soft_matched_only",
            Method::Patch => "patch",
            Method::Kmeans => "kmeans",
            Method::Lsh => "lsh",
        }
    }

    fn routing_mode(self) -> Option<RoutingMode> {
        match self {
            Method::Soft => Some(RoutingMode::Soft),
            Method::Hard => Some(RoutingMode::Hard),
            Method::SoftMatchedOnly => Some(RoutingMode::SoftMatchedOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Groups per user for patching and k-means; `None` uses the user's agent count.
    pub groups: Option<usize>,
    pub kmeans_iters: usize,
    /// `None` uses `ceil(log2(groups))` bits.
    pub lsh_bits: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            groups: None,
            kmeans_iters: 10,
            lsh_bits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingEvalConfig {
    pub enabled: bool,
    /// `voting` and `routing` are replaced by the top-level settings.
    pub serving: ServingConfig,
    /// `start_timestamp` is ignored: replays start right after the histories end.
    pub replay: ReplayConfig,
}

impl Default for ServingEvalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            serving: ServingConfig::default(),
            replay: ReplayConfig {
                requests: 100,
                candidates_per_request: 16,
                pool_size: 10_000,
                ..ReplayConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `corpus.seed` and `codebooks.seed` are replaced by each run seed.
    pub corpus: SyntheticConfig,
    pub codebooks: RqConfig,
    pub voting: VotingConfig,
    /// `mode` is ignored; every routing method is run.
    pub routing: RoutingConfig,
    pub baselines: BaselineConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Silhouette is computed for the first this-many users of each seed.
    pub silhouette_users: usize,
    /// Items per silhouette evaluation (evenly strided through the history).
    pub silhouette_sample: usize,
    /// Clusters per user scored by the recovery rate; `None` uses the
    /// voting budget's agent bound.
    pub recovery_top: Option<usize>,
    pub serving: ServingEvalConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig {
                semantic_dim: 16,
                ranking_dim: 8,
                ..SyntheticConfig::default()
            },
            codebooks: RqConfig::uniform(2, 64),
            voting: VotingConfig::default(),
            routing: RoutingConfig::default(),
            baselines: BaselineConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            silhouette_users: 5,
            silhouette_sample: 300,
            recovery_top: None,
            serving: ServingEvalConfig::default(),
        }
    }
}

/// Pipeline stage, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    TrainCodebooks,
    Tokenize,
    Vote,
    Compress,
    Metrics,
    Serving,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::TrainCodebooks => "train-codebooks",
            Stage::Tokenize => "tokenize",
            Stage::Vote => "vote",
            Stage::Compress => "compress",
            Stage::Metrics => "metrics",
            Stage::Serving => "serving",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("stage {stage} failed (seed {seed:?}, config digest {digest}): {message}")]
    Stage {
        stage: Stage,
        seed: Option<u64>,
        digest: String,
        message: String,
    },
    #[error("ground truth is required for the recovery rate")]
    MissingGroundTruth,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EvalError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            EvalError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

impl EvalConfig {
    /// Reads YAML (`.yaml`/`.yml`) or JSON.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        let parsed = if yaml {
            serde_yaml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| EvalError::Stage {
            stage: Stage::Config,
            seed: None,
            digest: hex_digest(text.as_bytes()),
            message,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex_digest(v.to_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| EvalError::Stage {
            stage: Stage::Config,
            seed: None,
            digest: self.digest(),
            message,
        };
        self.corpus.validate().map_err(|e| fail(e.to_string()))?;
        self.codebooks.validate().map_err(|e| fail(e.to_string()))?;
        self.voting.validate(self.codebooks.levels()).map_err(|e| fail(e.to_string()))?;
        self.routing.validate().map_err(|e| fail(e.to_string()))?;
        if self.methods.is_empty() {
            return Err(fail("no methods selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(fail("no seeds given".into()));
        }
        if self.baselines.groups == Some(0) || self.baselines.lsh_bits == Some(0) {
            return Err(fail("baseline group and bit counts must be at least 1".into()));
        }
        if self.serving.enabled {
            self.serving_config()
                .validate(self.codebooks.levels())
                .map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    fn serving_config(&self) -> ServingConfig {
        ServingConfig {
            voting: self.voting.clone(),
            routing: self.routing,
            ..self.serving.serving.clone()
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: xs.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl CountStats {
    fn of(xs: &[usize]) -> Self {
        Self {
            mean: xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64,
            min: xs.iter().copied().min().unwrap_or(0),
            max: xs.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSeedMetrics {
    /// Mean over users of each user's mean squared quantization error.
    pub quantization_error: f64,
    /// Mean over the sampled users with at least two groups.
    pub silhouette: Option<f64>,
    pub groups: CountStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingSummary {
    pub requests: usize,
    pub skipped_requests: usize,
    pub agent_builds: usize,
    pub hit_rate: f64,
    pub max_divergence: f64,
    pub vanilla_total_flops: u64,
    pub cached_total_flops: u64,
    pub projection_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub rq_loss: f64,
    pub agents: CountStats,
    pub methods: BTreeMap<Method, MethodSeedMetrics>,
    pub recovery_rate: f64,
    pub serving: Option<ServingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub quantization_error: MeanStd,
    pub silhouette: Option<MeanStd>,
    pub mean_groups: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Unix seconds; the only field that differs between identical runs.
    pub generated_at: u64,
    pub config: EvalConfig,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub summary: BTreeMap<Method, MethodSummary>,
    /// Methods by ascending mean quantization error.
    pub ordering: Vec<Method>,
    pub recovery_rate: MeanStd,
}

/// Fraction of the user's `top` most-interacted ground-truth fine clusters
/// (fewer if the user touched fewer) whose majority SID, over the user's own
/// interactions with that cluster, is one of the agent paths. Count ties rank
/// the lower cluster first; SID ties pick the smaller SID.
pub fn agent_recovery_rate(
    agents: &InterestAgentSet,
    ground_truth: Option<&GroundTruth>,
    history: &InteractionSequence,
    sids: &[SemanticId],
    corpus: &ItemCorpus,
    top: usize,
) -> Result<f64> {
    let gt = ground_truth.ok_or(EvalError::MissingGroundTruth)?;
    let rows = corpus.resolve(history).map_err(|e| metrics_error(e.to_string()))?;
    let mut per_cluster: BTreeMap<u32, BTreeMap<&SemanticId, usize>> = BTreeMap::new();
    for (&row, sid) in rows.iter().zip(sids) {
        *per_cluster.entry(gt.fine[row]).or_default().entry(sid).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize, &SemanticId)> = per_cluster
        .iter()
        .map(|(&c, votes)| {
            let total = votes.values().sum();
            // max_by_key keeps the last maximum, so scan in reverse SID order.
            let (sid, _) = votes.iter().rev().max_by_key(|(_, &n)| n).expect("nonempty");
            (c, total, *sid)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = top.min(ranked.len());
    if take == 0 {
        return Ok(0.0);
    }
    let hits = ranked[..take]
        .iter()
        .filter(|(_, _, sid)| agents.position(sid).is_some())
        .count();
    Ok(hits as f64 / take as f64)
}

fn metrics_error(message: String) -> EvalError {
    EvalError::Stage {
        stage: Stage::Metrics,
        seed: None,
        digest: String::new(),
        message,
    }
}

struct UserOutcome {
    agents: usize,
    errors: BTreeMap<Method, f64>,
    groups: BTreeMap<Method, usize>,
    silhouette: BTreeMap<Method, Option<f64>>,
    recovery: f64,
}

struct SeedContext<'a> {
    cfg: &'a EvalConfig,
    corpus: &'a ItemCorpus,
    truth: &'a GroundTruth,
    stack: &'a CodebookStack,
    item_sids: &'a [SemanticId],
}

/// Items whose labels feed the silhouette: an even stride through the history.
fn sample_positions(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

fn labeled_silhouette(points: &Matrix<f64>, labels: &[Option<usize>], positions: &[usize]) -> Option<f64> {
    let kept: Vec<usize> = positions.iter().copied().filter(|&p| labels[p].is_some()).collect();
    let lab: Vec<usize> = kept.iter().map(|&p| labels[p].unwrap()).collect();
    silhouette(&points.select_rows(&kept), &lab).ok()
}

impl SeedContext<'_> {
    fn user(&self, history: &InteractionSequence, with_silhouette: bool) -> Result<UserOutcome, (Stage, String)> {
        let cfg = self.cfg;
        let sids = tree::tokenize_with(history, self.corpus, self.item_sids)
            .map_err(|e| (Stage::Tokenize, e.to_string()))?;
        let trie = VoteTrie::build(&sids).map_err(|e| (Stage::Vote, e.to_string()))?;
        let agents = tree::vote(&trie, &cfg.voting, self.stack, history.user_id())
            .map_err(|e| (Stage::Vote, e.to_string()))?;
        let now = history.events().last().map_or(0, |e| e.timestamp);
        let rows = self.corpus.resolve(history).map_err(|e| (Stage::Compress, e.to_string()))?;
        let points = self.corpus.semantic().select_rows(&rows).to_f64();
        let positions = sample_positions(rows.len(), cfg.silhouette_sample);

        let k = agents.len();
        let groups = cfg.baselines.groups.unwrap_or(k);
        let lsh_bits = cfg
            .baselines
            .lsh_bits
            .unwrap_or_else(|| (usize::BITS - (groups.max(2) - 1).leading_zeros()) as usize);

        let mut out = UserOutcome {
            agents: k,
            errors: BTreeMap::new(),
            groups: BTreeMap::new(),
            silhouette: BTreeMap::new(),
            recovery: agent_recovery_rate(
                &agents,
                Some(self.truth),
                history,
                &sids,
                self.corpus,
                cfg.recovery_top.unwrap_or(cfg.voting.max_agents()),
            )
            .map_err(|e| (Stage::Metrics, e.to_string()))?,
        };
        for &method in &cfg.methods {
            let compress_err = |e: String| (Stage::Compress, e);
            let (error, group_count, labels) = if let Some(mode) = method.routing_mode() {
                let rcfg = RoutingConfig { mode, ..cfg.routing };
                let compressed = routing::compress(&agents, history, &sids, self.corpus, &rcfg, now)
                    .map_err(|e| compress_err(e.to_string()))?;
                let error = routing::quantization_error(&agents, history, &sids, self.corpus, mode, cfg.routing.tau)
                    .map_err(|e| (Stage::Metrics, e.to_string()))?;
                let labels = with_silhouette.then(|| routing_labels(&agents, &points, &sids, mode, cfg.routing.tau));
                let active = compressed.empty.iter().filter(|e| !**e).count();
                (error, active, labels.transpose().map_err(|e| (Stage::Metrics, e))?)
            } else {
                let grouping: GroupingResult = match method {
                    Method::Patch => baselines::patch_compress(history, self.corpus, groups),
                    Method::Kmeans => baselines::kmeans_compress(
                        history,
                        self.corpus,
                        groups.min(history.len()),
                        cfg.baselines.kmeans_iters,
                        self.stack.config.seed,
                    ),
                    _ => baselines::lsh_compress(history, self.corpus, lsh_bits, self.stack.config.seed),
                }
                .map_err(|e| compress_err(e.to_string()))?;
                let error = grouping
                    .quantization_error(history, self.corpus)
                    .map_err(|e| (Stage::Metrics, e.to_string()))?;
                let labels = with_silhouette.then(|| grouping.group_of.iter().map(|&g| Some(g)).collect::<Vec<_>>());
                (error, grouping.num_groups(), labels)
            };
            out.errors.insert(method, error);
            out.groups.insert(method, group_count);
            if let Some(labels) = labels {
                out.silhouette.insert(method, labeled_silhouette(&points, &labels, &positions));
            }
        }
        Ok(out)
    }
}

/// Item labels under a routing rule: the argmax agent for soft modes, the
/// exact-match agent for hard routing. Items a rule drops get `None`.
fn routing_labels(
    agents: &InterestAgentSet,
    points: &Matrix<f64>,
    sids: &[SemanticId],
    mode: RoutingMode,
    tau: f64,
) -> Result<Vec<Option<usize>>, String> {
    let matched: Vec<Option<usize>> = sids.iter().map(|s| agents.position(s)).collect();
    if mode == RoutingMode::Hard {
        return Ok(matched);
    }
    let w = item_agent_weights(&agents.prototypes(), points, tau).map_err(|e| e.to_string())?;
    Ok(w.iter_rows()
        .zip(&matched)
        .map(|(row, m)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &x)| if x > b.1 { (k, x) } else { b })
                .0;
            match mode {
                RoutingMode::SoftMatchedOnly => m.map(|_| best),
                _ => Some(best),
            }
        })
        .collect())
}

fn run_seed(cfg: &EvalConfig, seed: u64, digest: &str) -> Result<SeedReport> {
    let fail = |stage: Stage, message: String| EvalError::Stage {
        stage,
        seed: Some(seed),
        digest: digest.to_owned(),
        message,
    };
    let _span = tracing::info_span!("seed", seed).entered();

    let corpus_cfg = SyntheticConfig { seed, ..cfg.corpus.clone() };
    let (corpus, truth) =
        generate_synthetic_corpus(&corpus_cfg).map_err(|e| fail(Stage::Generate, e.to_string()))?;
    let histories = generate_user_histories(&corpus_cfg, &corpus, Some(&truth))
        .map_err(|e| fail(Stage::Generate, e.to_string()))?;

    let rq_cfg = RqConfig { seed, ..cfg.codebooks.clone() };
    let stack = train_codebooks(corpus.semantic(), &rq_cfg).map_err(|e| fail(Stage::TrainCodebooks, e.to_string()))?;
    let rq_loss = stack
        .rq_loss(corpus.semantic(), DEFAULT_BETA)
        .map_err(|e| fail(Stage::TrainCodebooks, e.to_string()))?
        .total;
    let item_sids = stack
        .tokenize_all(corpus.semantic())
        .map_err(|e| fail(Stage::Tokenize, e.to_string()))?;
    tracing::debug!(items = corpus.len(), users = histories.len(), "codebooks trained");

    let ctx = SeedContext {
        cfg,
        corpus: &corpus,
        truth: &truth,
        stack: &stack,
        item_sids: &item_sids,
    };
    let users: Vec<UserOutcome> = histories
        .par_iter()
        .enumerate()
        .map(|(i, h)| ctx.user(h, i < cfg.silhouette_users))
        .collect::<Result<_, _>>()
        .map_err(|(stage, message)| fail(stage, message))?;

    let mut methods = BTreeMap::new();
    for &m in &cfg.methods {
        let errors: Vec<f64> = users.iter().map(|u| u.errors[&m]).collect();
        let sil: Vec<f64> = users.iter().filter_map(|u| u.silhouette.get(&m).copied().flatten()).collect();
        let groups: Vec<usize> = users.iter().map(|u| u.groups[&m]).collect();
        methods.insert(
            m,
            MethodSeedMetrics {
                quantization_error: errors.iter().sum::<f64>() / errors.len() as f64,
                silhouette: MeanStd::of(&sil).map(|s| s.mean),
                groups: CountStats::of(&groups),
            },
        );
    }
    let recovery: Vec<f64> = users.iter().map(|u| u.recovery).collect();

    let serving = if cfg.serving.enabled {
        let mut replay_cfg = ReplayConfig { seed, ..cfg.serving.replay.clone() };
        replay_cfg.candidates_per_request = replay_cfg.candidates_per_request.min(corpus.len());
        replay_cfg.start_timestamp = histories
            .iter()
            .filter_map(|h| h.events().last())
            .map(|e| e.timestamp)
            .max()
            .unwrap_or(0)
            + 1;
        let ids: Vec<u64> = histories.iter().map(|h| h.user_id()).collect();
        let replay = generate_replay(&replay_cfg, &ids, &corpus).map_err(|e| fail(Stage::Serving, e.to_string()))?;
        let report = simulate_serving(&replay, &corpus, &stack, &histories, &cfg.serving_config())
            .map_err(|e| fail(Stage::Serving, e.to_string()))?;
        Some(ServingSummary {
            requests: report.requests.len(),
            skipped_requests: report.skipped_requests,
            agent_builds: report.agent_builds,
            hit_rate: report.hit_rate,
            max_divergence: report.max_divergence,
            vanilla_total_flops: report.vanilla_total.total,
            cached_total_flops: report.cached_total.total,
            projection_share: report.projection_share,
        })
    } else {
        None
    };

    Ok(SeedReport {
        seed,
        rq_loss,
        agents: CountStats::of(&users.iter().map(|u| u.agents).collect::<Vec<_>>()),
        methods,
        recovery_rate: recovery.iter().sum::<f64>() / recovery.len() as f64,
        serving,
    })
}

/// Runs every seed of `cfg` and merges the results in seed order.
pub fn run_pipeline(cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let digest = cfg.digest();
    let per_seed: Vec<SeedReport> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, &digest))
        .collect::<Result<_>>()?;

    let mut summary = BTreeMap::new();
    for &m in &cfg.methods {
        let errs: Vec<f64> = per_seed.iter().map(|s| s.methods[&m].quantization_error).collect();
        let sil: Vec<f64> = per_seed.iter().filter_map(|s| s.methods[&m].silhouette).collect();
        let groups: Vec<f64> = per_seed.iter().map(|s| s.methods[&m].groups.mean).collect();
        summary.insert(
            m,
            MethodSummary {
                quantization_error: MeanStd::of(&errs).expect("seeds nonempty"),
                silhouette: MeanStd::of(&sil),
                mean_groups: groups.iter().sum::<f64>() / groups.len() as f64,
            },
        );
    }
    let mut ordering: Vec<Method> = cfg.methods.clone();
    ordering.sort_by(|a, b| {
        summary[a]
            .quantization_error
            .mean
            .total_cmp(&summary[b].quantization_error.mean)
            .then(a.cmp(b))
    });
    let recovery: Vec<f64> = per_seed.iter().map(|s| s.recovery_rate).collect();
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        generated_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        config: cfg.clone(),
        config_digest: digest,
        seeds: cfg.seeds.clone(),
        per_seed,
        summary,
        ordering,
        recovery_rate: MeanStd::of(&recovery).expect("seeds nonempty"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Pretty JSON with keys sorted at every level.
pub fn canonical_json(report: &EvalReport) -> String {
    let value = serde_json::to_value(report).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
    s.push('\n');
    s
}

/// One row per (seed, method).
pub fn report_csv(report: &EvalReport) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out =
        String::from("seed,method,quantization_error,silhouette,groups_mean,groups_min,groups_max,recovery_rate\n");
    for s in &report.per_seed {
        for (m, r) in &s.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.seed,
                m,
                r.quantization_error,
                opt(r.silhouette),
                r.groups.mean,
                r.groups.min,
                r.groups.max,
                s.recovery_rate
            ));
        }
    }
    out
}

pub fn export_report(report: &EvalReport, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Json => canonical_json(report),
        ExportFormat::Csv => report_csv(report),
    };
    fs::write(path, text)?;
    Ok(())
}
