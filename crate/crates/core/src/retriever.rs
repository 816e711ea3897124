//! Exact top-k retrieval over record image embeddings, plus caption cleaning.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PairRecord, RecordSet, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};
use crate::simcore::dot;

pub const DEFAULT_MIN_TOKENS: usize = 3;
pub const DEFAULT_MAX_TOKENS: usize = 30;
pub const DEFAULT_ASCII_RATIO: f64 = 0.8;

/// Rows scored per block during a scan.
const SCAN_CHUNK: usize = 4096;

/// Brute-force cosine index over unit-norm image embeddings.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    ids: Vec<String>,
    captions: Vec<String>,
    matrix: Vec<f64>,
    dim: usize,
    url_filter: Option<String>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn url_filter(&self) -> Option<&str> {
        self.url_filter.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// Indexes the records whose url contains `url_substring` (all records when
/// `None`), in input order.
pub fn build_index(rs: &RecordSet, url_substring: Option<&str>) -> Result<VectorIndex> {
    let dim = rs.dimension();
    let mut index = VectorIndex {
        ids: Vec::new(),
        captions: Vec::new(),
        matrix: Vec::new(),
        dim,
        url_filter: url_substring.map(str::to_string),
    };
    for r in rs
        .iter()
        .filter(|r| url_substring.is_none_or(|s| r.url.contains(s)))
    {
        if r.image_embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.image_embedding.len(),
            });
        }
        index.ids.push(r.id.clone());
        index.captions.push(r.caption.clone());
        index.matrix.extend_from_slice(&r.image_embedding);
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub similarity: f64,
    pub caption: String,
}

/// Retrieval results for one query, as written to hit files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitList {
    pub query_id: String,
    pub hits: Vec<RetrievalHit>,
}

/// Heap entry ordered so that the *worst* hit is the heap maximum:
/// lower similarity is worse, and among equal similarities the larger id is.
struct Ranked<'a> {
    similarity: f64,
    id: &'a str,
    row: usize,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

/// The `k` most similar indexed records to `query`, best first, ties broken
/// by ascending id. `exclude_id` removes one record from consideration.
pub fn top_k(
    index: &VectorIndex,
    query: &[f64],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<RetrievalHit>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            found: query.len(),
        });
    }
    let norm = dot(query, query).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm {
            id: "query".into(),
            norm,
        });
    }

    let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
    for start in (0..index.len()).step_by(SCAN_CHUNK) {
        let end = (start + SCAN_CHUNK).min(index.len());
        for row in start..end {
            let id = index.ids[row].as_str();
            if exclude_id == Some(id) {
                continue;
            }
            let entry = Ranked {
                similarity: dot(query, index.row(row)),
                id,
                row,
            };
            if heap.len() < k {
                heap.push(entry);
            } else if heap.peek().is_some_and(|worst| entry < *worst) {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|r| RetrievalHit {
            id: r.id.to_string(),
            similarity: r.similarity,
            caption: index.captions[r.row].clone(),
        })
        .collect())
}

/// Runs [`top_k`] for every query record, in parallel, returning results in
/// query order. With `exclude_self` each query's own id is skipped.
pub fn top_k_batch(
    index: &VectorIndex,
    queries: &RecordSet,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<HitList>> {
    queries
        .records()
        .par_iter()
        .map(|q| {
            let exclude = exclude_self.then_some(q.id.as_str());
            Ok(HitList {
                query_id: q.id.clone(),
                hits: top_k(index, &q.image_embedding, k, exclude)?,
            })
        })
        .collect()
}

/// Length and language rules applied to captions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_ascii_letter_ratio: f64,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self {
            min_tokens: DEFAULT_MIN_TOKENS,
            max_tokens: DEFAULT_MAX_TOKENS,
            min_ascii_letter_ratio: DEFAULT_ASCII_RATIO,
        }
    }
}

impl CleaningRules {
    pub fn new(min_tokens: usize, max_tokens: usize, min_ascii_letter_ratio: f64) -> Result<Self> {
        let rules = Self {
            min_tokens,
            max_tokens,
            min_ascii_letter_ratio,
        };
        rules.validate()?;
        Ok(rules)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidParameter(format!(
                "need 0 < min_tokens <= max_tokens, got {} and {}",
                self.min_tokens, self.max_tokens
            )));
        }
        if !(0.0..=1.0).contains(&self.min_ascii_letter_ratio) {
            return Err(Error::InvalidParameter(format!(
                "ascii letter ratio must be in [0, 1], got {}",
                self.min_ascii_letter_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooLong,
    NonEnglish,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooShort => "too_short",
            RejectReason::TooLong => "too_long",
            RejectReason::NonEnglish => "non_english",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanDecision {
    Keep,
    Reject(RejectReason),
}

/// Share of ASCII letters among the non-whitespace characters of `text`.
pub fn ascii_letter_ratio(text: &str) -> f64 {
    let (letters, total) = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .fold((0usize, 0usize), |(l, t), c| {
            (l + c.is_ascii_alphabetic() as usize, t + 1)
        });
    if total == 0 {
        0.0
    } else {
        letters as f64 / total as f64
    }
}

/// Checks in order: too short, too long, non-English. First failure wins.
pub fn clean_caption(caption: &str, rules: &CleaningRules) -> CleanDecision {
    let tokens = caption.split_whitespace().count();
    if tokens < rules.min_tokens {
        CleanDecision::Reject(RejectReason::TooShort)
    } else if tokens > rules.max_tokens {
        CleanDecision::Reject(RejectReason::TooLong)
    } else if ascii_letter_ratio(caption) < rules.min_ascii_letter_ratio {
        CleanDecision::Reject(RejectReason::NonEnglish)
    } else {
        CleanDecision::Keep
    }
}

pub fn clean_filter(record: &PairRecord, rules: &CleaningRules) -> CleanDecision {
    clean_caption(&record.caption, rules)
}
