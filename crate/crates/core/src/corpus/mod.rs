//! Item embeddings, interaction histories, and their on-disk formats.

mod io;
mod synthetic;

use std::collections::HashMap;

use thiserror::Error;

use crate::matrix::Matrix;

pub use io::{
    load_embeddings, read_events, read_sqz1, save_embeddings, write_events, write_sqz1,
    EmbeddingFormat, Sqz1Block, Sqz1Meta, SQZ1_MAGIC,
};
pub use synthetic::{
    generate_synthetic_corpus, generate_user_histories, zipf_weights, GroundTruth,
    SyntheticConfig,
};

/// Longest history accepted unless a caller raises the limit.
pub const DEFAULT_MAX_HISTORY: usize = 10_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("row {row}: expected {expected} fields, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("duplicate item_id {0}")]
    DuplicateItem(u64),
    #[error("event {index}: unknown item_id {item_id}")]
    UnknownItem { index: usize, item_id: u64 },
    #[error("item {0} has a non-finite embedding component")]
    NonFinite(u64),
    #[error("matrix shapes disagree: {0}")]
    Shape(String),
    #[error("history for user {user_id} is not sorted by timestamp at event {index}")]
    Unsorted { user_id: u64, index: usize },
    #[error("history for user {0} is empty")]
    EmptyHistory(u64),
    #[error("history for user {user_id} has {len} events, limit is {max}")]
    HistoryTooLong { user_id: u64, len: usize, max: usize },
    #[error("event {index} has negative timestamp {timestamp}")]
    NegativeTimestamp { index: usize, timestamp: i64 },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("bad SQZ1 file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One item with its frozen semantic vector and its ranking-space vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub item_id: u64,
    pub semantic: Vec<f32>,
    pub ranking: Vec<f32>,
}

/// Immutable set of items. Row `i` of both matrices belongs to `ids()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCorpus {
    ids: Vec<u64>,
    semantic: Matrix<f32>,
    ranking: Matrix<f32>,
    index: HashMap<u64, usize>,
}

impl ItemCorpus {
    pub fn new(ids: Vec<u64>, semantic: Matrix<f32>, ranking: Matrix<f32>) -> Result<Self> {
        if semantic.rows() != ids.len() || ranking.rows() != ids.len() {
            return Err(CorpusError::Shape(format!(
                "{} ids, {} semantic rows, {} ranking rows",
                ids.len(),
                semantic.rows(),
                ranking.rows()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(CorpusError::DuplicateItem(id));
            }
            if !semantic.row(i).iter().chain(ranking.row(i)).all(|x| x.is_finite()) {
                return Err(CorpusError::NonFinite(id));
            }
        }
        Ok(Self {
            ids,
            semantic,
            ranking,
            index,
        })
    }

    pub fn from_items(
        semantic_dim: usize,
        ranking_dim: usize,
        items: &[ItemEmbedding],
    ) -> Result<Self> {
        let mut semantic = Matrix::zeros(0, semantic_dim);
        let mut ranking = Matrix::zeros(0, ranking_dim);
        for (row, item) in items.iter().enumerate() {
            let expected = 1 + semantic_dim + ranking_dim;
            let found = 1 + item.semantic.len() + item.ranking.len();
            if item.semantic.len() != semantic_dim || item.ranking.len() != ranking_dim {
                return Err(CorpusError::DimensionMismatch {
                    row: row + 1,
                    expected,
                    found,
                });
            }
            semantic.push_row(&item.semantic);
            ranking.push_row(&item.ranking);
        }
        Self::new(items.iter().map(|i| i.item_id).collect(), semantic, ranking)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `d`, the semantic width.
    pub fn semantic_dim(&self) -> usize {
        self.semantic.cols()
    }

    /// `d'`, the ranking width.
    pub fn ranking_dim(&self) -> usize {
        self.ranking.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn semantic(&self) -> &Matrix<f32> {
        &self.semantic
    }

    pub fn ranking(&self) -> &Matrix<f32> {
        &self.ranking
    }

    pub fn index_of(&self, item_id: u64) -> Option<usize> {
        self.index.get(&item_id).copied()
    }

    pub fn item(&self, row: usize) -> ItemEmbedding {
        ItemEmbedding {
            item_id: self.ids[row],
            semantic: self.semantic.row(row).to_vec(),
            ranking: self.ranking.row(row).to_vec(),
        }
    }

    /// Corpus rows for each event of `seq`, erroring on the first unknown item.
    pub fn resolve(&self, seq: &InteractionSequence) -> Result<Vec<usize>> {
        seq.events()
            .iter()
            .enumerate()
            .map(|(index, ev)| {
                self.index_of(ev.item_id).ok_or(CorpusError::UnknownItem {
                    index,
                    item_id: ev.item_id,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InteractionEvent {
    pub item_id: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

/// A user's history, oldest event first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    user_id: u64,
    events: Vec<InteractionEvent>,
}

impl InteractionSequence {
    pub fn new(user_id: u64, events: Vec<InteractionEvent>) -> Result<Self> {
        Self::with_max_len(user_id, events, DEFAULT_MAX_HISTORY)
    }

    pub fn with_max_len(user_id: u64, events: Vec<InteractionEvent>, max: usize) -> Result<Self> {
        if events.is_empty() {
            return Err(CorpusError::EmptyHistory(user_id));
        }
        if events.len() > max {
            return Err(CorpusError::HistoryTooLong {
                user_id,
                len: events.len(),
                max,
            });
        }
        for (index, ev) in events.iter().enumerate() {
            if ev.timestamp < 0 {
                return Err(CorpusError::NegativeTimestamp {
                    index,
                    timestamp: ev.timestamp,
                });
            }
            if index > 0 && events[index - 1].timestamp > ev.timestamp {
                return Err(CorpusError::Unsorted { user_id, index });
            }
        }
        Ok(Self { user_id, events })
    }

    pub fn user_id(&self) -> u64 {
        self.user_id
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `timestamp <= now`, or `None` if none qualify.
    pub fn until(&self, now: i64) -> Option<Self> {
        let end = self.events.partition_point(|e| e.timestamp <= now);
        (end > 0).then(|| Self {
            user_id: self.user_id,
            events: self.events[..end].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(item_id: u64, timestamp: i64) -> InteractionEvent {
        InteractionEvent { item_id, timestamp }
    }

    #[test]
    fn sequence_validation() {
        assert!(InteractionSequence::new(1, vec![ev(1, 0), ev(2, 0), ev(3, 5)]).is_ok());
        assert!(matches!(
            InteractionSequence::new(1, vec![]),
            Err(CorpusError::EmptyHistory(1))
        ));
        assert!(matches!(
            InteractionSequence::new(1, vec![ev(1, 5), ev(2, 4)]),
            Err(CorpusError::Unsorted { index: 1, .. })
        ));
        assert!(matches!(
            InteractionSequence::new(1, vec![ev(1, -1)]),
            Err(CorpusError::NegativeTimestamp { index: 0, .. })
        ));
        assert!(matches!(
            InteractionSequence::with_max_len(1, vec![ev(1, 0); 3], 2),
            Err(CorpusError::HistoryTooLong { len: 3, max: 2, .. })
        ));
    }

    #[test]
    fn corpus_rejects_duplicates_and_nan() {
        let items = vec![
            ItemEmbedding { item_id: 4, semantic: vec![0.0], ranking: vec![1.0] },
            ItemEmbedding { item_id: 4, semantic: vec![1.0], ranking: vec![1.0] },
        ];
        assert!(matches!(
            ItemCorpus::from_items(1, 1, &items),
            Err(CorpusError::DuplicateItem(4))
        ));
        let items = vec![ItemEmbedding { item_id: 1, semantic: vec![f32::NAN], ranking: vec![0.0] }];
        assert!(matches!(ItemCorpus::from_items(1, 1, &items), Err(CorpusError::NonFinite(1))));
    }

    #[test]
    fn resolve_reports_event_index() {
        let items = vec![ItemEmbedding { item_id: 9, semantic: vec![0.0], ranking: vec![0.0] }];
        let corpus = ItemCorpus::from_items(1, 1, &items).unwrap();
        let seq = InteractionSequence::new(1, vec![ev(9, 0), ev(10, 1)]).unwrap();
        assert!(matches!(
            corpus.resolve(&seq),
            Err(CorpusError::UnknownItem { index: 1, item_id: 10 })
        ));
    }

    #[test]
    fn until_truncates_by_time() {
        let seq = InteractionSequence::new(1, vec![ev(1, 0), ev(2, 10), ev(3, 20)]).unwrap();
        assert_eq!(seq.until(10).unwrap().len(), 2);
        assert!(seq.until(-1).is_none());
    }
}
