use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use sqz_core::baselines::{self, GroupingMethod};
use sqz_core::corpus::{
    generate_synthetic_corpus, generate_user_histories, load_embeddings, read_events, save_embeddings,
    write_events, write_sqz1, EmbeddingFormat, InteractionEvent, Sqz1Block,
};
use sqz_core::eval::{export_report, run_pipeline, EvalConfig, ExportFormat, Stage};
use sqz_core::matrix::Matrix;
use sqz_core::routing::{self, default_tau, RoutingConfig, RoutingMode, TimeDecay};
use sqz_core::rq::{train_codebooks, CodebookStack, RqConfig, DEFAULT_BETA};
use sqz_core::serving::{self, read_replay, write_replay, ReplayConfig, ServingConfig};
use sqz_core::tree::{self, InterestAgentSet, VoteTrie, VotingConfig};
use sqz_core::{InteractionSequence, ItemCorpus, SemanticId, SyntheticConfig};

pub enum Exit {
    Validation,
    Runtime,
}

pub struct CliError {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { exit: Exit::Validation, error: anyhow!(msg.into()) }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { exit: Exit::Runtime, error: anyhow!(msg.into()) }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { exit: Exit::Runtime, error }
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

trait Invalid<T> {
    fn invalid(self) -> Result<T>;
}

impl<T, E: std::fmt::Display> Invalid<T> for std::result::Result<T, E> {
    fn invalid(self) -> Result<T> {
        self.map_err(|e| CliError::validation(e.to_string()))
    }
}

fn embedding_format(path: &Path) -> EmbeddingFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => EmbeddingFormat::Csv,
        _ => EmbeddingFormat::Binary,
    }
}

fn load_corpus(path: &Path) -> Result<ItemCorpus> {
    load_embeddings(path, embedding_format(path))
        .with_context(|| format!("reading corpus {}", path.display()))
        .map_err(Into::into)
}

fn load_histories(path: &Path) -> Result<Vec<InteractionSequence>> {
    read_events(path)
        .with_context(|| format!("reading histories {}", path.display()))
        .map_err(Into::into)
}

fn load_stack(path: &Path) -> Result<CodebookStack> {
    CodebookStack::load(path)
        .with_context(|| format!("reading codebooks {}", path.display()))
        .map_err(Into::into)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result {
    let mut text = serde_json::to_string_pretty(&serde_json::to_value(value).context("serializing")?)
        .context("serializing")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// JSON synthetic-corpus config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    history_length: Option<usize>,
    /// Embedding file format: binary or csv.
    #[arg(long, default_value = "binary")]
    format: EmbeddingFormat,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn generate(a: GenerateArgs) -> Result {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .invalid()?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(u) = a.users {
        cfg.num_users = u;
    }
    if let Some(n) = a.history_length {
        cfg.history_length = n;
    }
    cfg.validate().invalid()?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (corpus, truth) = generate_synthetic_corpus(&cfg).context("generating corpus")?;
    let histories = generate_user_histories(&cfg, &corpus, Some(&truth)).context("generating histories")?;
    let corpus_path = a.out_dir.join(match a.format {
        EmbeddingFormat::Binary => "corpus.sqz",
        EmbeddingFormat::Csv => "corpus.csv",
    });
    save_embeddings(&corpus, &corpus_path, a.format).context("writing corpus")?;
    write_events(&a.out_dir.join("events.csv"), &histories).context("writing events")?;
    let mut labels = String::from("item_id,coarse,fine\n");
    for (row, id) in corpus.ids().iter().enumerate() {
        writeln!(labels, "{id},{},{}", truth.coarse[row], truth.fine[row]).unwrap();
    }
    fs::write(a.out_dir.join("ground_truth.csv"), labels).context("writing ground truth")?;
    println!(
        "wrote {} items and {} histories to {}",
        corpus.len(),
        histories.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 512)]
    codebook_size: usize,
    #[arg(long, default_value_t = 0.99)]
    decay: f64,
    /// Commitment weight used in the reported loss.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result {
    let cfg = RqConfig {
        ema_decay: a.decay,
        epochs: a.epochs,
        seed: a.seed,
        ..RqConfig::uniform(a.levels, a.codebook_size)
    };
    cfg.validate().invalid()?;
    if !(a.beta >= 0.0 && a.beta.is_finite()) {
        return Err(CliError::validation("--beta must be finite and nonnegative"));
    }
    let corpus = load_corpus(&a.input)?;
    let stack = train_codebooks(corpus.semantic(), &cfg).context("training codebooks")?;
    stack.save(&a.out).context("writing codebooks")?;
    let loss = stack.rq_loss(corpus.semantic(), a.beta).context("computing loss")?;
    println!("{}", serde_json::to_string(&loss).context("serializing")?);
    Ok(())
}

#[derive(Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    codebooks: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    /// Output CSV `user_id,item_id,timestamp,sid`.
    #[arg(long)]
    out: PathBuf,
}

pub fn tokenize(a: TokenizeArgs) -> Result {
    let corpus = load_corpus(&a.corpus)?;
    let stack = load_stack(&a.codebooks)?;
    let histories = load_histories(&a.histories)?;
    let item_sids = stack.tokenize_all(corpus.semantic()).context("tokenizing corpus")?;
    let mut out = String::from("user_id,item_id,timestamp,sid\n");
    for h in &histories {
        let sids = tree::tokenize_with(h, &corpus, &item_sids).context("tokenizing history")?;
        for (ev, sid) in h.events().iter().zip(&sids) {
            writeln!(out, "{},{},{},{sid}", h.user_id(), ev.item_id, ev.timestamp).unwrap();
        }
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

/// Tokenized histories as read back from `tokenize` output.
struct TokenizedUser {
    history: InteractionSequence,
    sids: Vec<SemanticId>,
}

fn read_sids(path: &Path) -> Result<Vec<TokenizedUser>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("user_id,item_id,timestamp,sid") {
        return Err(CliError::validation(format!(
            "{}: header must be user_id,item_id,timestamp,sid",
            path.display()
        )));
    }
    let mut grouped: BTreeMap<u64, (Vec<InteractionEvent>, Vec<SemanticId>)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: String| CliError::validation(format!("{} row {}: {m}", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", f.len())));
        }
        let user: u64 = f[0].parse().map_err(|e| bad(format!("user_id: {e}")))?;
        let item_id = f[1].parse().map_err(|e| bad(format!("item_id: {e}")))?;
        let timestamp = f[2].parse().map_err(|e| bad(format!("timestamp: {e}")))?;
        let sid: SemanticId = f[3].parse().map_err(|e| bad(format!("sid: {e}")))?;
        let entry = grouped.entry(user).or_default();
        entry.0.push(InteractionEvent { item_id, timestamp });
        entry.1.push(sid);
    }
    grouped
        .into_iter()
        .map(|(user, (events, sids))| {
            Ok(TokenizedUser {
                history: InteractionSequence::new(user, events).invalid()?,
                sids,
            })
        })
        .collect()
}

#[derive(Args)]
pub struct VoteArgs {
    /// Output of `tokenize`.
    #[arg(long)]
    sids: PathBuf,
    /// Codebooks used to reconstruct agent prototypes.
    #[arg(long)]
    codebooks: PathBuf,
    /// Children kept per level, e.g. `100,2`.
    #[arg(long, default_value = "100,2", value_delimiter = ',')]
    budget: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    count_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn vote(a: VoteArgs) -> Result {
    let stack = load_stack(&a.codebooks)?;
    let cfg = VotingConfig { budget: a.budget, count_scale: a.count_scale };
    cfg.validate(stack.num_levels()).invalid()?;
    let users = read_sids(&a.sids)?;
    let sets = users
        .iter()
        .map(|u| {
            let trie = VoteTrie::build(&u.sids).invalid()?;
            tree::vote(&trie, &cfg, &stack, u.history.user_id())
                .context("voting")
                .map_err(CliError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&a.out, &sets)
}

#[derive(Args)]
pub struct CompressArgs {
    /// Output of `vote`.
    #[arg(long)]
    agents: PathBuf,
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output of `tokenize`; required by the hard modes.
    #[arg(long)]
    sids: Option<PathBuf>,
    #[arg(long, default_value_t = default_tau())]
    tau: f64,
    /// soft, hard or soft_matched_only.
    #[arg(long, default_value = "soft")]
    mode: RoutingMode,
    /// Half-life in seconds for the recency column (off if omitted).
    #[arg(long, num_args = 0..=1, default_missing_value = "604800")]
    decay_half_life: Option<f64>,
    /// Reference time; defaults to each user's last event.
    #[arg(long)]
    now: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn compress(a: CompressArgs) -> Result {
    let cfg = RoutingConfig {
        tau: a.tau,
        time_decay: a.decay_half_life.map_or(TimeDecay::Off, TimeDecay::HalfLife),
        mode: a.mode,
    };
    cfg.validate().invalid()?;
    if a.mode != RoutingMode::Soft && a.sids.is_none() {
        return Err(CliError::validation("--sids is required for the hard routing modes"));
    }
    let corpus = load_corpus(&a.corpus)?;
    let histories = load_histories(&a.history)?;
    let sets: Vec<InterestAgentSet> = serde_json::from_str(
        &fs::read_to_string(&a.agents).with_context(|| format!("reading {}", a.agents.display()))?,
    )
    .invalid()?;
    let sids: BTreeMap<u64, Vec<SemanticId>> = match &a.sids {
        Some(p) => read_sids(p)?.into_iter().map(|u| (u.history.user_id(), u.sids)).collect(),
        None => BTreeMap::new(),
    };
    let by_user: BTreeMap<u64, &InteractionSequence> = histories.iter().map(|h| (h.user_id(), h)).collect();

    let width = corpus.ranking_dim() + usize::from(a.decay_half_life.is_some());
    let mut rows = Matrix::zeros(0, width);
    let mut ids = Vec::new();
    let mut users = Vec::new();
    for set in &sets {
        let history = by_user
            .get(&set.user_id)
            .ok_or_else(|| CliError::validation(format!("no history for user {}", set.user_id)))?;
        let now = a.now.unwrap_or_else(|| history.events().last().map_or(0, |e| e.timestamp));
        let user_sids = sids.get(&set.user_id).map_or(&[][..], Vec::as_slice);
        let out = routing::compress(set, history, user_sids, &corpus, &cfg, now)
            .with_context(|| format!("compressing user {}", set.user_id))?;
        let first_row = rows.rows();
        for row in out.vectors.iter_rows() {
            ids.push(rows.rows() as u64);
            rows.push_row(&row.iter().map(|&x| x as f32).collect::<Vec<_>>());
        }
        users.push(json!({
            "user_id": set.user_id,
            "first_row": first_row,
            "rows": out.len(),
            "agent_paths": out.agent_paths.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "weights": out.weights,
            "empty": out.empty,
        }));
    }
    let n = ids.len();
    let extra = json!({
        "mode": a.mode,
        "tau": a.tau,
        "decay_half_life": a.decay_half_life,
        "users": users,
    });
    write_sqz1(&a.out, &Sqz1Block { ids, primary: rows, secondary: Matrix::zeros(n, 0) }, Some(extra))
        .context("writing compressed sequences")?;
    Ok(())
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    #[arg(long, default_value_t = 200)]
    groups: usize,
    #[arg(long, default_value = "patch,kmeans,lsh", value_delimiter = ',')]
    methods: Vec<GroupingMethod>,
    #[arg(long, default_value_t = 10)]
    kmeans_iters: usize,
    /// Defaults to `ceil(log2(groups))`.
    #[arg(long)]
    lsh_bits: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct BaselineUserRow {
    user_id: u64,
    groups: usize,
    quantization_error: f64,
}

pub fn bench_baselines(a: BaselineArgs) -> Result {
    if a.groups == 0 {
        return Err(CliError::validation("--groups must be at least 1"));
    }
    let bits = a
        .lsh_bits
        .unwrap_or_else(|| (usize::BITS - (a.groups.max(2) - 1).leading_zeros()) as usize);
    let corpus = load_corpus(&a.corpus)?;
    let histories = load_histories(&a.histories)?;
    let mut report = BTreeMap::new();
    for &method in &a.methods {
        let mut rows = Vec::with_capacity(histories.len());
        for h in &histories {
            let g = match method {
                GroupingMethod::Patch => baselines::patch_compress(h, &corpus, a.groups),
                GroupingMethod::Kmeans => {
                    baselines::kmeans_compress(h, &corpus, a.groups.min(h.len()), a.kmeans_iters, a.seed)
                }
                GroupingMethod::Lsh => baselines::lsh_compress(h, &corpus, bits, a.seed),
            }
            .map_err(|e| match e {
                baselines::BaselineError::InvalidParameter(m) => CliError::validation(m),
                other => anyhow!(other).into(),
            })?;
            rows.push(BaselineUserRow {
                user_id: h.user_id(),
                groups: g.num_groups(),
                quantization_error: g.quantization_error(h, &corpus).context("scoring grouping")?,
            });
        }
        let n = rows.len().max(1) as f64;
        report.insert(
            method,
            json!({
                "mean_quantization_error": rows.iter().map(|r| r.quantization_error).sum::<f64>() / n,
                "mean_groups": rows.iter().map(|r| r.groups as f64).sum::<f64>() / n,
                "users": rows,
            }),
        );
    }
    write_json(
        &a.out,
        &json!({
            "groups": a.groups,
            "kmeans_iters": a.kmeans_iters,
            "lsh_bits": bits,
            "seed": a.seed,
            "methods": report,
        }),
    )
}

#[derive(Args)]
pub struct ReplayArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    #[arg(long, default_value_t = 50)]
    candidates: usize,
    #[arg(long, default_value_t = 1.2)]
    zipf_exponent: f64,
    /// Seconds between requests.
    #[arg(long, default_value_t = 60)]
    step: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn generate_replay(a: ReplayArgs) -> Result {
    let corpus = load_corpus(&a.corpus)?;
    let histories = load_histories(&a.histories)?;
    let start = histories
        .iter()
        .filter_map(|h| h.events().last())
        .map(|e| e.timestamp)
        .max()
        .unwrap_or(0)
        + 1;
    let cfg = ReplayConfig {
        requests: a.requests,
        candidates_per_request: a.candidates,
        pool_size: corpus.len(),
        zipf_exponent: a.zipf_exponent,
        start_timestamp: start,
        timestamp_step: a.step,
        seed: a.seed,
    };
    let users: Vec<u64> = histories.iter().map(|h| h.user_id()).collect();
    let replay = serving::generate_replay(&cfg, &users, &corpus).invalid()?;
    write_replay(&a.out, &replay).context("writing replay")?;
    Ok(())
}

#[derive(Args)]
pub struct ServingArgs {
    #[arg(long)]
    replay: PathBuf,
    /// JSON serving config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    codebooks: PathBuf,
    #[arg(long)]
    histories: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn simulate_serving(a: ServingArgs) -> Result {
    let cfg: ServingConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .invalid()?,
        None => ServingConfig::default(),
    };
    let stack = load_stack(&a.codebooks)?;
    cfg.validate(stack.num_levels()).invalid()?;
    let replay = read_replay(&a.replay).invalid()?;
    let corpus = load_corpus(&a.corpus)?;
    let histories = load_histories(&a.histories)?;
    let report =
        serving::simulate_serving(&replay, &corpus, &stack, &histories, &cfg).context("simulating serving")?;
    println!(
        "requests {} hit_rate {:.4} max_divergence {:.3e} vanilla_flops {} cached_flops {}",
        report.requests.len(),
        report.hit_rate,
        report.max_divergence,
        report.vanilla_total.total,
        report.cached_total.total
    );
    write_json(&a.out, &report)
}

#[derive(Args)]
pub struct EvalArgs {
    /// YAML or JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result {
    let to_cli = |e: sqz_core::eval::EvalError| match e.stage() {
        Some(Stage::Config) => CliError { exit: Exit::Validation, error: anyhow!(e) },
        _ => CliError { exit: Exit::Runtime, error: anyhow!(e) },
    };
    let cfg = EvalConfig::from_path(&a.config).map_err(to_cli)?;
    let report = run_pipeline(&cfg).map_err(to_cli)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    export_report(&report, &a.out.join("report.json"), ExportFormat::Json).map_err(to_cli)?;
    export_report(&report, &a.out.join("report.csv"), ExportFormat::Csv).map_err(to_cli)?;
    let order: Vec<&str> = report.ordering.iter().map(|m| m.name()).collect();
    println!("methods by quantization error: {}", order.join(" < "));
    Ok(())
}
