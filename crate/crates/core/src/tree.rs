//! Per-user vote tries over semantic identifiers and hierarchical top-k voting.
//!
//! The global semantic tree is never materialized: a SID is already the address
//! of a leaf, so each user's trie only holds the prefixes that user touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, InteractionSequence, ItemCorpus};
use crate::matrix::Matrix;
use crate::rq::{CodebookStack, RqError, SemanticId};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("sid {index} has {found} levels, expected {expected}")]
    MixedLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("cannot vote on an empty trie")]
    EmptyTrie,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rq(#[from] RqError),
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;

/// Semantic id of every event in `seq`, in order.
pub fn tokenize_history(
    seq: &InteractionSequence,
    corpus: &ItemCorpus,
    stack: &CodebookStack,
) -> Result<Vec<SemanticId>> {
    corpus
        .resolve(seq)?
        .into_iter()
        .map(|row| Ok(stack.quantize(corpus.semantic().row(row))?.sid))
        .collect()
}

/// Like [`tokenize_history`] but reads precomputed per-item ids, aligned with
/// corpus rows.
pub fn tokenize_with(
    seq: &InteractionSequence,
    corpus: &ItemCorpus,
    item_sids: &[SemanticId],
) -> Result<Vec<SemanticId>> {
    Ok(corpus
        .resolve(seq)?
        .into_iter()
        .map(|row| item_sids[row].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
struct TrieNode {
    count: u64,
    children: BTreeMap<u32, usize>,
}

/// Sparse prefix trie with vote counts. Node 0 is the virtual root.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTrie {
    levels: usize,
    nodes: Vec<TrieNode>,
}

/// Read-only view of one trie node, produced by [`VoteTrie::nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub prefix: Vec<u32>,
    pub count: u64,
    /// `(code, count)` for each child, ascending by code.
    pub children: Vec<(u32, u64)>,
}

impl VoteTrie {
    /// Each SID adds one vote to its leaf and to every ancestor on its path.
    pub fn build(sids: &[SemanticId]) -> Result<Self> {
        let levels = sids.first().map_or(0, SemanticId::levels);
        let mut nodes = vec![TrieNode {
            count: 0,
            children: BTreeMap::new(),
        }];
        for (index, sid) in sids.iter().enumerate() {
            if sid.levels() != levels {
                return Err(TreeError::MixedLength {
                    index,
                    expected: levels,
                    found: sid.levels(),
                });
            }
            let mut node = 0;
            nodes[0].count += 1;
            for &code in sid.codes() {
                let next = match nodes[node].children.get(&code) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode {
                            count: 0,
                            children: BTreeMap::new(),
                        });
                        let n = nodes.len() - 1;
                        nodes[node].children.insert(code, n);
                        n
                    }
                };
                nodes[next].count += 1;
                node = next;
            }
        }
        Ok(Self { levels, nodes })
    }

    /// `L`; the trie has `L + 1` levels counting the root.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn root_count(&self) -> u64 {
        self.nodes[0].count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn find(&self, prefix: &[u32]) -> Option<usize> {
        prefix
            .iter()
            .try_fold(0, |node, code| self.nodes[node].children.get(code).copied())
    }

    /// Votes under `prefix` (the empty prefix is the root).
    pub fn count(&self, prefix: &[u32]) -> Option<u64> {
        self.find(prefix).map(|n| self.nodes[n].count)
    }

    /// `(code, count)` of the children of `prefix`, ascending by code.
    pub fn children(&self, prefix: &[u32]) -> Vec<(u32, u64)> {
        self.find(prefix).map_or_else(Vec::new, |n| self.child_counts(n))
    }

    fn child_counts(&self, node: usize) -> Vec<(u32, u64)> {
        self.nodes[node]
            .children
            .iter()
            .map(|(&c, &n)| (c, self.nodes[n].count))
            .collect()
    }

    /// Every node in depth-first, code-ascending order.
    pub fn nodes(&self) -> Vec<NodeView> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            for (&code, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(code);
                stack.push((child, p));
            }
            out.push(NodeView {
                count: self.nodes[node].count,
                children: self.child_counts(node),
                prefix,
            });
        }
        out
    }

    /// Full-depth leaves with their counts, sorted by path.
    pub fn leaves(&self) -> Vec<(SemanticId, u64)> {
        self.nodes()
            .into_iter()
            .filter(|n| n.prefix.len() == self.levels && self.root_count() > 0)
            .map(|n| (SemanticId(n.prefix), n.count))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingConfig {
    /// Children kept per active parent at each level, `k^(1)..k^(L)`.
    pub budget: Vec<usize>,
    /// Counts are divided by this before the softmax that produces weights.
    pub count_scale: f64,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            budget: vec![100, 2],
            count_scale: 1.0,
        }
    }
}

impl VotingConfig {
    pub fn new(budget: Vec<usize>) -> Self {
        Self {
            budget,
            ..Self::default()
        }
    }

    /// Upper bound on the number of agents, `prod k^(l)`.
    pub fn max_agents(&self) -> usize {
        self.budget.iter().product()
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.budget.len() != levels {
            return Err(TreeError::InvalidBudget(format!(
                "{} budget entries for {levels} levels",
                self.budget.len()
            )));
        }
        if self.budget.contains(&0) {
            return Err(TreeError::InvalidBudget("every k must be at least 1".into()));
        }
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return Err(TreeError::InvalidBudget("count_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestAgent {
    pub path: SemanticId,
    pub raw_count: u64,
    pub weight: f64,
    /// Sum of the codewords on `path`.
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestAgentSet {
    pub user_id: u64,
    pub budget: Vec<usize>,
    /// Sorted by path.
    pub agents: Vec<InterestAgent>,
}

impl InterestAgentSet {
    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Prototypes stacked row-wise in agent order.
    pub fn prototypes(&self) -> Matrix<f64> {
        let d = self.agents.first().map_or(0, |a| a.prototype.len());
        let rows: Vec<&[f64]> = self.agents.iter().map(|a| a.prototype.as_slice()).collect();
        Matrix::from_rows(d, &rows).expect("prototypes share a dimension")
    }

    pub fn weights(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.weight).collect()
    }

    pub fn paths(&self) -> Vec<SemanticId> {
        self.agents.iter().map(|a| a.path.clone()).collect()
    }

    /// Index of the agent whose path is exactly `sid`.
    pub fn position(&self, sid: &SemanticId) -> Option<usize> {
        self.agents.binary_search_by(|a| a.path.cmp(sid)).ok()
    }
}

/// Top-down pruning: each active parent keeps its `k^(l)` most voted children
/// (lower code wins ties). Surviving leaves become agents weighted by a softmax
/// over their (scaled) vote counts.
pub fn vote(
    trie: &VoteTrie,
    cfg: &VotingConfig,
    stack: &CodebookStack,
    user_id: u64,
) -> Result<InterestAgentSet> {
    if trie.root_count() == 0 {
        return Err(TreeError::EmptyTrie);
    }
    cfg.validate(trie.levels())?;

    let mut active: Vec<(usize, Vec<u32>)> = vec![(0, Vec::new())];
    for &k in &cfg.budget {
        let mut next = Vec::new();
        for (node, prefix) in active {
            let mut kids: Vec<(u32, usize)> = trie.nodes[node]
                .children
                .iter()
                .map(|(&c, &n)| (c, n))
                .collect();
            // Stable sort keeps ascending code order among equal counts.
            kids.sort_by(|a, b| trie.nodes[b.1].count.cmp(&trie.nodes[a.1].count));
            for (code, child) in kids.into_iter().take(k) {
                let mut p = prefix.clone();
                p.push(code);
                next.push((child, p));
            }
        }
        active = next;
    }
    active.sort_by(|a, b| a.1.cmp(&b.1));

    let logits: Vec<f64> = active
        .iter()
        .map(|(n, _)| trie.nodes[*n].count as f64 / cfg.count_scale)
        .collect();
    let mut weights = vec![0.0; logits.len()];
    crate::matrix::softmax_into(&logits, &mut weights);

    let agents = active
        .into_iter()
        .zip(weights)
        .map(|((node, path), weight)| {
            let path = SemanticId(path);
            Ok(InterestAgent {
                prototype: stack.reconstruct(&path)?,
                raw_count: trie.nodes[node].count,
                weight,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterestAgentSet {
        user_id,
        budget: cfg.budget.clone(),
        agents,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rq::{Codebook, RqConfig};

    pub(crate) fn sid(codes: &[u32]) -> SemanticId {
        SemanticId(codes.to_vec())
    }

    /// 1-D stack whose level-l entry k equals `k * 10^(L-1-l)`.
    pub(crate) fn grid_stack(levels: usize, size: usize) -> CodebookStack {
        let books = (0..levels)
            .map(|l| {
                let scale = 10f32.powi((levels - 1 - l) as i32);
                let entries: Vec<f32> = (0..size).map(|k| k as f32 * scale).collect();
                Codebook {
                    level: l + 1,
                    ema_sums: Matrix::from_vec(size, 1, entries.iter().map(|&x| f64::from(x)).collect()).unwrap(),
                    entries: Matrix::from_vec(size, 1, entries).unwrap(),
                    ema_counts: vec![1.0; size],
                }
            })
            .collect();
        CodebookStack {
            levels: books,
            config: RqConfig::uniform(levels, size),
        }
    }

    fn example() -> VoteTrie {
        VoteTrie::build(&[sid(&[0, 1]), sid(&[0, 1]), sid(&[0, 2]), sid(&[1, 0])]).unwrap()
    }

    #[test]
    fn worked_example_counts() {
        let t = example();
        assert_eq!(t.root_count(), 4);
        assert_eq!(t.children(&[]), vec![(0, 3), (1, 1)]);
        assert_eq!(
            t.leaves(),
            vec![(sid(&[0, 1]), 2), (sid(&[0, 2]), 1), (sid(&[1, 0]), 1)]
        );
    }

    #[test]
    fn repeated_sid_is_a_single_chain() {
        let t = VoteTrie::build(&vec![sid(&[3, 1, 4]); 7]).unwrap();
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.count(&[3]), Some(7));
        assert_eq!(t.count(&[3, 1]), Some(7));
        assert_eq!(t.count(&[3, 1, 4]), Some(7));
    }

    #[test]
    fn empty_and_mixed_inputs() {
        let t = VoteTrie::build(&[]).unwrap();
        assert_eq!(t.root_count(), 0);
        assert!(matches!(
            vote(&t, &VotingConfig::new(vec![]), &grid_stack(1, 2), 0),
            Err(TreeError::EmptyTrie)
        ));
        assert!(matches!(
            VoteTrie::build(&[sid(&[0, 1]), sid(&[0])]),
            Err(TreeError::MixedLength { index: 1, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn budget_one_one() {
        let set = vote(&example(), &VotingConfig::new(vec![1, 1]), &grid_stack(2, 3), 9).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.agents[0].path, sid(&[0, 1]));
        assert_eq!(set.agents[0].weight, 1.0);
        assert_eq!(set.agents[0].raw_count, 2);
        assert_eq!(set.agents[0].prototype, vec![1.0]);
        assert_eq!(set.user_id, 9);
    }

    #[test]
    fn budget_one_two() {
        let set = vote(&example(), &VotingConfig::new(vec![1, 2]), &grid_stack(2, 3), 0).unwrap();
        assert_eq!(set.paths(), vec![sid(&[0, 1]), sid(&[0, 2])]);
        // Direct evaluation: e^2 / (e^2 + e^1) and e^1 / (e^2 + e^1).
        let (a, b) = (2f64.exp(), 1f64.exp());
        assert!((set.agents[0].weight - a / (a + b)).abs() < 1e-12);
        assert!((set.agents[1].weight - b / (a + b)).abs() < 1e-12);
        assert!((set.agents[0].weight - 0.7311).abs() < 1e-4);
        assert!((set.agents[1].weight - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn full_budget_keeps_every_sid() {
        let set = vote(&example(), &VotingConfig::new(vec![3, 3]), &grid_stack(2, 3), 0).unwrap();
        assert_eq!(set.paths(), vec![sid(&[0, 1]), sid(&[0, 2]), sid(&[1, 0])]);
    }

    #[test]
    fn ties_go_to_lower_code() {
        let t = VoteTrie::build(&[sid(&[2]), sid(&[1]), sid(&[5]), sid(&[5])]).unwrap();
        let set = vote(&t, &VotingConfig::new(vec![2]), &grid_stack(1, 6), 0).unwrap();
        assert_eq!(set.paths(), vec![sid(&[1]), sid(&[5])]);
    }

    #[test]
    fn count_scale_softens_weights() {
        let t = VoteTrie::build(&[vec![sid(&[0]); 300], vec![sid(&[1]); 100]].concat()).unwrap();
        let raw = vote(&t, &VotingConfig::new(vec![2]), &grid_stack(1, 2), 0).unwrap();
        assert!(raw.agents[1].weight < 1e-80);
        let scaled = vote(&t, &VotingConfig { budget: vec![2], count_scale: 100.0 }, &grid_stack(1, 2), 0).unwrap();
        let (a, b) = (3f64.exp(), 1f64.exp());
        assert!((scaled.agents[0].weight - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn budget_validation() {
        let stack = grid_stack(2, 3);
        assert!(matches!(vote(&example(), &VotingConfig::new(vec![1]), &stack, 0), Err(TreeError::InvalidBudget(_))));
        assert!(matches!(vote(&example(), &VotingConfig::new(vec![1, 0]), &stack, 0), Err(TreeError::InvalidBudget(_))));
    }
}
