//! Phrase-to-label grounding: cosine similarity over an embedding table with
//! deterministic top-K selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result, Warning};
use crate::volgrid::LabelMap;

#[derive(Debug, Clone)]
pub struct TableEntry {
    pub id: u32,
    pub name: String,
    pub vector: Vec<f32>,
}

/// Label-ID -> embedding map; all vectors are finite with nonzero norm and
/// label IDs are unique.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: Vec<TableEntry>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<TableEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::Contract(format!(
                    "entry {} has vector length {}, expected {dim}",
                    e.id,
                    e.vector.len()
                )));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("entry {} has non-finite values", e.id)));
            }
            if e.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() <= 0.0 {
                return Err(Error::ZeroVector(format!("table entry {}", e.id)));
            }
            if !seen.insert(e.id) {
                return Err(Error::Contract(format!("duplicate label id {}", e.id)));
            }
        }
        Ok(EmbeddingTable { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PhraseQuery {
    pub phrase: String,
    pub vector: Vec<f32>,
}

impl PhraseQuery {
    pub fn from_phrase(phrase: &str, dim: usize) -> Result<Self> {
        Ok(PhraseQuery {
            phrase: phrase.to_string(),
            vector: toy_embed(phrase, dim)?,
        })
    }
}

/// Ranked grounding result: scores descending, ties broken by ascending
/// label ID.
#[derive(Debug, Clone, Serialize)]
pub struct Grounding {
    pub phrase: String,
    pub ranked: Vec<(u32, f64)>,
}

/// Deterministic stand-in for learned text embeddings: lowercase,
/// whitespace-normalized character trigrams hashed into `dim` buckets, then
/// L2-normalized.
pub fn toy_embed(text: &str, dim: usize) -> Result<Vec<f32>> {
    if dim < 8 {
        return Err(Error::Contract(format!("embedding dim must be >= 8, got {dim}")));
    }
    let normalized = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if normalized.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    let chars: Vec<char> = normalized.chars().collect();
    let mut counts = vec![0.0f64; dim];
    if chars.len() < 3 {
        counts[hash_gram(&chars) % dim] += 1.0;
    } else {
        for w in chars.windows(3) {
            counts[hash_gram(w) % dim] += 1.0;
        }
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(counts.iter().map(|&c| (c / norm) as f32).collect())
}

/// FNV-1a over the gram's UTF-8 bytes; fixed so embeddings are stable across
/// platforms and releases.
fn hash_gram(gram: &[char]) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 4];
    for &c in gram {
        for &b in c.encode_utf8(&mut buf).as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h as usize
}

pub fn cosine_similarity(q: &[f32], e: &[f32]) -> Result<f64> {
    if q.len() != e.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", q.len(), e.len()),
        ));
    }
    let mut dot = 0.0f64;
    let mut nq = 0.0f64;
    let mut ne = 0.0f64;
    for (&a, &b) in q.iter().zip(e) {
        dot += a as f64 * b as f64;
        nq += (a as f64) * (a as f64);
        ne += (b as f64) * (b as f64);
    }
    if nq <= 0.0 {
        return Err(Error::ZeroVector("query".into()));
    }
    if ne <= 0.0 {
        return Err(Error::ZeroVector("table entry".into()));
    }
    Ok((dot / (nq.sqrt() * ne.sqrt())).clamp(-1.0, 1.0))
}

#[derive(PartialEq)]
struct Candidate {
    score: f64,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Greater = better: higher score, then lower label id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Select the `min(k, M)` most similar entries via a bounded heap. A `k`
/// larger than the table truncates with a warning.
pub fn top_k(
    q: &PhraseQuery,
    table: &EmbeddingTable,
    k: usize,
) -> Result<(Grounding, Option<Warning>)> {
    if k == 0 {
        return Err(Error::Contract("k must be >= 1".into()));
    }
    if table.is_empty() {
        return Err(Error::Contract("embedding table is empty".into()));
    }
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for e in &table.entries {
        let score = cosine_similarity(&q.vector, &e.vector)?;
        heap.push(std::cmp::Reverse(Candidate { score, id: e.id }));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut ranked: Vec<(u32, f64)> = heap
        .into_iter()
        .map(|std::cmp::Reverse(c)| (c.id, c.score))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let warning = if k > table.len() {
        Some(Warning::TruncatedTopK {
            requested: k,
            available: table.len(),
        })
    } else {
        None
    };
    Ok((
        Grounding {
            phrase: q.phrase.clone(),
            ranked,
        },
        warning,
    ))
}

/// Table file format: UTF-8, a `#dim=d` header line, then one
/// `label_id \t label_name \t v1,v2,...,vd` row per entry.
pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(name.clone(), 0, "empty table file"))?;
    let dim: usize = header
        .strip_prefix("#dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::format(name.clone(), 0, "first line must be #dim=<d>"))?;

    let mut entries = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno; // 1-based data row; the header is line 0
        let mut parts = line.splitn(3, '\t');
        let id: u32 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(name.clone(), row as u64, format!("row {row}: bad label id")))?;
        let label_name = parts
            .next()
            .ok_or_else(|| Error::format(name.clone(), row as u64, format!("row {row}: missing name")))?
            .to_string();
        let vec_text = parts
            .next()
            .ok_or_else(|| Error::format(name.clone(), row as u64, format!("row {row}: missing vector")))?;
        let vector: Vec<f32> = vec_text
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(name.clone(), row as u64, format!("row {row}: {e}")))?;
        if vector.len() != dim {
            return Err(Error::format(
                name.clone(),
                row as u64,
                format!("row {row}: vector length {} != dim {dim}", vector.len()),
            ));
        }
        entries.push(TableEntry {
            id,
            name: label_name,
            vector,
        });
    }
    EmbeddingTable::new(dim, entries).map_err(|e| match e {
        Error::Contract(msg) => Error::format(name, 0, msg),
        other => other,
    })
}

pub fn store_embedding_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut out = format!("#dim={}\n", table.dim);
    for e in &table.entries {
        let vec_text: Vec<String> = e.vector.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{}\t{}\t{}\n", e.id, e.name, vec_text.join(",")));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Embed every registry name with the toy embedder, in ascending label order.
pub fn build_table_from_registry(lm: &LabelMap, dim: usize) -> Result<EmbeddingTable> {
    let mut entries = Vec::new();
    for (&id, name) in &lm.registry {
        entries.push(TableEntry {
            id,
            name: name.clone(),
            vector: toy_embed(name, dim)?,
        });
    }
    EmbeddingTable::new(dim, entries)
}
