use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, InteractionEvent, InteractionSequence, ItemCorpus, Result};
use crate::matrix::Matrix;

pub const SQZ1_MAGIC: &[u8; 4] = b"SQZ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Binary,
    Csv,
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "binary" | "bin" | "sqz" => Ok(Self::Binary),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown embedding format {other:?}")),
        }
    }
}

/// Contents of an SQZ1 file: ids plus two row-aligned float blocks.
///
/// Corpora put semantic vectors in `primary` and ranking vectors in
/// `secondary`; codebooks and compressed sequences leave `secondary` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Sqz1Block {
    pub ids: Vec<u64>,
    pub primary: Matrix<f32>,
    pub secondary: Matrix<f32>,
}

/// JSON sidecar written next to every SQZ1 file as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sqz1Meta {
    pub format: String,
    pub n_items: u32,
    pub d: u32,
    pub d_prime: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CorpusError::Format(format!("{what} {v} exceeds u32")))
}

/// Writes `block` in the SQZ1 layout plus its JSON sidecar.
pub fn write_sqz1(path: &Path, block: &Sqz1Block, extra: Option<serde_json::Value>) -> Result<()> {
    let n = block.ids.len();
    if block.primary.rows() != n || block.secondary.rows() != n {
        return Err(CorpusError::Shape("SQZ1 blocks must be row aligned".into()));
    }
    let meta = Sqz1Meta {
        format: "SQZ1".into(),
        n_items: dim_u32(n, "n_items")?,
        d: dim_u32(block.primary.cols(), "d")?,
        d_prime: dim_u32(block.secondary.cols(), "d'")?,
        extra,
    };
    let mut buf = Vec::with_capacity(16 + 4 * (block.primary.as_slice().len() + block.secondary.as_slice().len()) + 8 * n);
    buf.extend_from_slice(SQZ1_MAGIC);
    for v in [meta.n_items, meta.d, meta.d_prime] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in block.primary.as_slice().iter().chain(block.secondary.as_slice()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for id in &block.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, buf)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads an SQZ1 file. If a sidecar exists its header must agree with the file.
pub fn read_sqz1(path: &Path) -> Result<(Sqz1Block, Option<Sqz1Meta>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != SQZ1_MAGIC {
        return Err(CorpusError::Format("missing SQZ1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, d, dp) = (word(0), word(1), word(2));
    let floats = n * (d + dp);
    let expected = 16 + 4 * floats + 8 * n;
    if bytes.len() != expected {
        return Err(CorpusError::Format(format!(
            "expected {expected} bytes for n={n}, d={d}, d'={dp}, found {}",
            bytes.len()
        )));
    }
    let body = &bytes[16..];
    let read_floats = |start: usize, count: usize| -> Vec<f32> {
        body[4 * start..4 * (start + count)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let primary = Matrix::from_vec(n, d, read_floats(0, n * d)).expect("sized above");
    let secondary = Matrix::from_vec(n, dp, read_floats(n * d, n * dp)).expect("sized above");
    let ids = body[4 * floats..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        let meta: Sqz1Meta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        if (meta.n_items as usize, meta.d as usize, meta.d_prime as usize) != (n, d, dp) {
            return Err(CorpusError::Format(format!(
                "sidecar header ({}, {}, {}) disagrees with file ({n}, {d}, {dp})",
                meta.n_items, meta.d, meta.d_prime
            )));
        }
        Some(meta)
    } else {
        None
    };
    Ok((Sqz1Block { ids, primary, secondary }, meta))
}

pub fn save_embeddings(corpus: &ItemCorpus, path: &Path, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Binary => write_sqz1(
            path,
            &Sqz1Block {
                ids: corpus.ids().to_vec(),
                primary: corpus.semantic().clone(),
                secondary: corpus.ranking().clone(),
            },
            None,
        ),
        EmbeddingFormat::Csv => {
            let mut out = String::from("item_id");
            for i in 0..corpus.semantic_dim() {
                write!(out, ",sem_{i}").unwrap();
            }
            for i in 0..corpus.ranking_dim() {
                write!(out, ",rank_{i}").unwrap();
            }
            out.push('\n');
            for (row, id) in corpus.ids().iter().enumerate() {
                write!(out, "{id}").unwrap();
                for x in corpus.semantic().row(row).iter().chain(corpus.ranking().row(row)) {
                    // `{}` on f32 prints the shortest string that parses back exactly.
                    write!(out, ",{x}").unwrap();
                }
                out.push('\n');
            }
            fs::write(path, out)?;
            Ok(())
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<ItemCorpus> {
    match format {
        EmbeddingFormat::Binary => {
            let (block, _) = read_sqz1(path)?;
            ItemCorpus::new(block.ids, block.primary, block.secondary)
        }
        EmbeddingFormat::Csv => parse_embeddings_csv(&fs::read_to_string(path)?),
    }
}

fn parse_embeddings_csv(text: &str) -> Result<ItemCorpus> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(CorpusError::Parse {
        row: 0,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"item_id") {
        return Err(CorpusError::Parse {
            row: 0,
            message: "header must start with item_id".into(),
        });
    }
    let d = cols.iter().filter(|c| c.starts_with("sem_")).count();
    let dp = cols.iter().filter(|c| c.starts_with("rank_")).count();
    let well_formed = cols[1..].iter().enumerate().all(|(i, c)| {
        if i < d {
            *c == format!("sem_{i}")
        } else {
            *c == format!("rank_{}", i - d)
        }
    });
    if !well_formed || cols.len() != 1 + d + dp {
        return Err(CorpusError::Parse {
            row: 0,
            message: "header must be item_id,sem_0..sem_{d-1},rank_0..rank_{d'-1}".into(),
        });
    }

    let mut ids = Vec::new();
    let mut semantic = Matrix::zeros(0, d);
    let mut ranking = Matrix::zeros(0, dp);
    let mut values = Vec::with_capacity(d + dp);
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 1 + d + dp {
            return Err(CorpusError::DimensionMismatch {
                row,
                expected: 1 + d + dp,
                found: fields.len(),
            });
        }
        let id = fields[0].parse::<u64>().map_err(|e| CorpusError::Parse {
            row,
            message: format!("item_id {:?}: {e}", fields[0]),
        })?;
        values.clear();
        for f in &fields[1..] {
            values.push(f.parse::<f32>().map_err(|e| CorpusError::Parse {
                row,
                message: format!("value {f:?}: {e}"),
            })?);
        }
        ids.push(id);
        semantic.push_row(&values[..d]);
        ranking.push_row(&values[d..]);
    }
    ItemCorpus::new(ids, semantic, ranking)
}

/// Writes histories as `user_id,item_id,timestamp`, sorted by (user_id, timestamp).
pub fn write_events(path: &Path, histories: &[InteractionSequence]) -> Result<()> {
    let mut sorted: Vec<&InteractionSequence> = histories.iter().collect();
    sorted.sort_by_key(|s| s.user_id());
    let mut out = String::from("user_id,item_id,timestamp\n");
    for seq in sorted {
        for ev in seq.events() {
            writeln!(out, "{},{},{}", seq.user_id(), ev.item_id, ev.timestamp).unwrap();
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<InteractionSequence>> {
    parse_events(&fs::read_to_string(path)?)
}

fn parse_events(text: &str) -> Result<Vec<InteractionSequence>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(|h| h.split(',').map(str::trim).collect::<Vec<_>>()) {
        Some(h) if h == ["user_id", "item_id", "timestamp"] => {}
        _ => {
            return Err(CorpusError::Parse {
                row: 0,
                message: "header must be user_id,item_id,timestamp".into(),
            })
        }
    }
    let mut out: Vec<InteractionSequence> = Vec::new();
    let mut current: Option<(u64, Vec<InteractionEvent>)> = None;
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(CorpusError::DimensionMismatch { row, expected: 3, found: f.len() });
        }
        let parse_err = |e: std::num::ParseIntError| CorpusError::Parse { row, message: e.to_string() };
        let user: u64 = f[0].parse().map_err(parse_err)?;
        let ev = InteractionEvent {
            item_id: f[1].parse().map_err(parse_err)?,
            timestamp: f[2].parse().map_err(parse_err)?,
        };
        match &mut current {
            Some((u, evs)) if *u == user => evs.push(ev),
            _ => {
                if let Some((u, evs)) = current.take() {
                    if user < u {
                        return Err(CorpusError::Parse {
                            row,
                            message: format!("user_id {user} after {u}: file must be sorted by user_id"),
                        });
                    }
                    out.push(InteractionSequence::new(u, evs)?);
                }
                current = Some((user, vec![ev]));
            }
        }
    }
    if let Some((u, evs)) = current {
        out.push(InteractionSequence::new(u, evs)?);
    }
    Ok(out)
}
