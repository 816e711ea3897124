//! Caption ensembling: similarity copy-paste and CIDEr consensus.
//!
//! Copy-paste replaces a model caption with the caption of a near-duplicate
//! training image when the augmentation-averaged image similarity reaches
//! the threshold and the training caption matches the training image better
//! than the model caption does. Consensus picks, per image, the model caption
//! that agrees best (by CIDEr-D) with the captions of the other models.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cider::{build_idf, score_vectors, CaptionVector, CiderParams, IdfTable};
use crate::corpus::{PairRecord, PredictionEntry, PredictionFile, RecordSet};
use crate::error::{Error, Result};
use crate::retriever::{build_index, top_k};
use crate::simcore::cosine;

pub const DEFAULT_COPY_THRESHOLD: f64 = 0.35;
/// Two augmented views of the test image times two of the training image.
pub const AUGMENTED_SIMILARITY_COUNT: usize = 4;
/// Consensus scores this close to the best count as tied; the earliest
/// candidate among them wins.
pub const CONSENSUS_TIE_TOLERANCE: f64 = 1e-9;
pub const ENSEMBLE_MODEL_ID: &str = "ensemble";
pub const COPY_PASTE_MODEL_ID: &str = "copy-paste";
/// Optional record field holding two augmented views of the image.
pub const AUGMENTED_VIEWS_FIELD: &str = "augmented_image_embeddings";

pub fn avg_augmented_similarity(sims: &[f64]) -> Result<f64> {
    if sims.len() != AUGMENTED_SIMILARITY_COUNT {
        return Err(Error::InvalidParameter(format!(
            "expected {AUGMENTED_SIMILARITY_COUNT} augmented similarities, got {}",
            sims.len()
        )));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(
            "augmented similarities must be finite".into(),
        ));
    }
    Ok(sims.iter().sum::<f64>() / AUGMENTED_SIMILARITY_COUNT as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyChoice {
    ModelPrediction,
    CopiedCaption,
}

/// The nearest training pair for a test image. `c1` is the similarity of its
/// caption to its image.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyCandidate {
    pub id: String,
    pub caption: String,
    pub c1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyPasteDecision {
    pub image_id: String,
    pub avg_similarity: f64,
    pub candidate_id: Option<String>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub chosen: CopyChoice,
    pub final_caption: String,
}

/// Decides between the model caption and the candidate's caption.
///
/// `c2` (model caption vs. candidate image) is only consulted when a
/// candidate exists and `avg_similarity >= threshold`; it is an error for it
/// to be missing then. Ties `c1 == c2` keep the model caption.
pub fn copy_paste(
    image_id: &str,
    avg_similarity: f64,
    candidate: Option<&CopyCandidate>,
    prediction: &str,
    c2: Option<f64>,
    threshold: f64,
) -> Result<CopyPasteDecision> {
    let mut decision = CopyPasteDecision {
        image_id: image_id.to_string(),
        avg_similarity,
        candidate_id: candidate.map(|c| c.id.clone()),
        c1: candidate.map(|c| c.c1),
        c2,
        chosen: CopyChoice::ModelPrediction,
        final_caption: prediction.to_string(),
    };
    let Some(candidate) = candidate else {
        return Ok(decision);
    };
    if !(avg_similarity >= threshold) {
        return Ok(decision);
    }
    let c2 = c2.ok_or_else(|| {
        Error::Missing(format!("image {image_id:?}: model caption similarity (c2)"))
    })?;
    if candidate.c1 > c2 {
        decision.chosen = CopyChoice::CopiedCaption;
        decision.final_caption = candidate.caption.clone();
    }
    Ok(decision)
}

fn augmented_views(record: &PairRecord) -> Result<Option<Vec<Vec<f64>>>> {
    let Some(value) = record.extra.get(AUGMENTED_VIEWS_FIELD) else {
        return Ok(None);
    };
    let views: Vec<Vec<f64>> = serde_json::from_value(value.clone()).map_err(|e| {
        Error::InvalidParameter(format!(
            "record {:?}: bad {AUGMENTED_VIEWS_FIELD}: {e}",
            record.id
        ))
    })?;
    if views.len() != 2 {
        return Err(Error::InvalidParameter(format!(
            "record {:?}: {AUGMENTED_VIEWS_FIELD} must hold 2 views, got {}",
            record.id,
            views.len()
        )));
    }
    Ok(Some(views))
}

/// The four test-view x train-view similarities. Records without two
/// augmented views fall back to their primary embeddings, repeated.
pub fn augmented_similarities(test: &PairRecord, train: &PairRecord) -> Result<Vec<f64>> {
    match (augmented_views(test)?, augmented_views(train)?) {
        (Some(a), Some(b)) => {
            let mut sims = Vec::with_capacity(AUGMENTED_SIMILARITY_COUNT);
            for u in &a {
                for v in &b {
                    sims.push(cosine(u, v)?);
                }
            }
            Ok(sims)
        }
        _ => Ok(vec![
            cosine(&test.image_embedding, &train.image_embedding)?;
            AUGMENTED_SIMILARITY_COUNT
        ]),
    }
}

/// Applies copy-paste to every test image with a model prediction.
///
/// The candidate is the training record whose image is nearest to the test
/// image. `c1` compares the candidate's caption embedding with its image,
/// `c2` the model caption embedding with the same candidate image.
pub fn run_copy_paste(
    test: &RecordSet,
    train: &RecordSet,
    predictions: &PredictionFile,
    threshold: f64,
) -> Result<(PredictionFile, Vec<CopyPasteDecision>)> {
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    let missing: Vec<String> = test
        .iter()
        .filter(|r| !predictions.entries.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageMismatch(missing));
    }
    let index = build_index(train, None)?;
    let train_by_id: HashMap<&str, &PairRecord> =
        train.iter().map(|r| (r.id.as_str(), r)).collect();
    let decisions: Vec<CopyPasteDecision> = test
        .records()
        .par_iter()
        .map(|q| {
            let entry = &predictions.entries[&q.id];
            let hit = top_k(&index, &q.image_embedding, 1, None)?
                .into_iter()
                .next()
                .ok_or(Error::EmptyIndex)?;
            let cand = train_by_id[hit.id.as_str()];
            let avg = avg_augmented_similarity(&augmented_similarities(q, cand)?)?;
            if avg < threshold {
                return copy_paste(&q.id, avg, None, &entry.caption, None, threshold).map(
                    |mut d| {
                        d.candidate_id = Some(cand.id.clone());
                        d
                    },
                );
            }
            let c1 = cosine(cand.text_embedding()?, &cand.image_embedding)?;
            let caption_embedding = entry.caption_embedding.as_deref().ok_or_else(|| {
                Error::Missing(format!(
                    "image {:?}: prediction has no caption_embedding",
                    q.id
                ))
            })?;
            let c2 = cosine(caption_embedding, &cand.image_embedding)?;
            let candidate = CopyCandidate {
                id: cand.id.clone(),
                caption: cand.caption.clone(),
                c1,
            };
            copy_paste(
                &q.id,
                avg,
                Some(&candidate),
                &entry.caption,
                Some(c2),
                threshold,
            )
        })
        .collect::<Result<_>>()?;

    let mut out = PredictionFile::new(COPY_PASTE_MODEL_ID);
    for d in &decisions {
        let original = &predictions.entries[&d.image_id];
        let caption_embedding = match d.chosen {
            CopyChoice::ModelPrediction => original.caption_embedding.clone(),
            CopyChoice::CopiedCaption => d
                .candidate_id
                .as_deref()
                .and_then(|id| train_by_id.get(id))
                .and_then(|r| r.text_embedding.clone()),
        };
        out.insert(
            d.image_id.clone(),
            PredictionEntry {
                caption: d.final_caption.clone(),
                caption_embedding,
            },
        )?;
    }
    Ok((out, decisions))
}

/// Captions proposed for one image by several models.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    image_id: String,
    candidates: Vec<(String, String)>,
}

impl CandidateSet {
    /// `candidates` are `(model_id, caption)` pairs; model ids must be distinct.
    pub fn new(image_id: impl Into<String>, candidates: Vec<(String, String)>) -> Result<Self> {
        let image_id = image_id.into();
        if candidates.is_empty() {
            return Err(Error::Empty(format!(
                "image {image_id:?} has no candidates"
            )));
        }
        let mut seen = BTreeSet::new();
        for (model, _) in &candidates {
            if !seen.insert(model.as_str()) {
                return Err(Error::DuplicateId(model.clone()));
            }
        }
        Ok(Self {
            image_id,
            candidates,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn candidates(&self) -> &[(String, String)] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.candidates.iter().map(|(_, c)| c.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusMode {
    /// Mean of single-reference scores against each other candidate.
    #[default]
    PairwiseMean,
    /// One multi-reference score against all other candidates together.
    MultiReference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusOutcome {
    pub winner_index: usize,
    pub model_id: String,
    pub caption: String,
    pub scores: Vec<f64>,
}

/// Scores every candidate against the others and returns the best one.
/// Ties (within [`CONSENSUS_TIE_TOLERANCE`]) go to the earliest candidate;
/// a lone candidate wins with score 0.
pub fn consensus_select(
    cs: &CandidateSet,
    idf: &IdfTable,
    params: &CiderParams,
    mode: ConsensusMode,
) -> Result<ConsensusOutcome> {
    params.validate()?;
    let vectors: Vec<CaptionVector> = cs
        .candidates
        .iter()
        .map(|(_, c)| CaptionVector::new(c, idf, params.max_n))
        .collect();
    let n = vectors.len();
    let scores: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n)
            .map(|j| match mode {
                ConsensusMode::PairwiseMean => {
                    let mut total = 0.0;
                    for k in (0..n).filter(|&k| k != j) {
                        total +=
                            score_vectors(&vectors[j], std::slice::from_ref(&vectors[k]), params)?;
                    }
                    Ok(total / (n - 1) as f64)
                }
                ConsensusMode::MultiReference => {
                    let others: Vec<CaptionVector> = (0..n)
                        .filter(|&k| k != j)
                        .map(|k| vectors[k].clone())
                        .collect();
                    score_vectors(&vectors[j], &others, params)
                }
            })
            .collect::<Result<_>>()?
    };
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let winner = scores
        .iter()
        .position(|&s| s >= best - CONSENSUS_TIE_TOLERANCE)
        .expect("at least one candidate");
    let (model_id, caption) = cs.candidates[winner].clone();
    Ok(ConsensusOutcome {
        winner_index: winner,
        model_id,
        caption,
        scores,
    })
}

/// Where the consensus IDF comes from.
#[derive(Debug, Clone)]
pub enum IdfSource {
    /// One document per image holding all candidate captions for it.
    SelfCorpus,
    External(IdfTable),
}

/// One line of the consensus report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusReportLine {
    pub image_id: String,
    pub winner_model_id: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub fused: PredictionFile,
    pub report: Vec<ConsensusReportLine>,
}

/// Model ids used as candidate keys. Repeated ids get a `#<position>` suffix
/// (1-based file position) so each file stays a distinct candidate.
fn candidate_model_ids(files: &[PredictionFile]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for f in files {
        *counts.entry(f.model_id.as_str()).or_insert(0) += 1;
    }
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if counts[f.model_id.as_str()] > 1 {
                format!("{}#{}", f.model_id, i + 1)
            } else {
                f.model_id.clone()
            }
        })
        .collect()
}

/// Consensus-fuses prediction files that cover the same image ids.
pub fn fuse(
    files: &[PredictionFile],
    params: &CiderParams,
    mode: ConsensusMode,
    idf: IdfSource,
) -> Result<FuseOutput> {
    params.validate()?;
    let first = files
        .first()
        .ok_or_else(|| Error::Empty("no prediction files to fuse".into()))?;
    let all_ids: BTreeSet<&String> = files.iter().flat_map(|f| f.entries.keys()).collect();
    let missing: BTreeSet<String> = files
        .iter()
        .flat_map(|f| {
            all_ids
                .iter()
                .filter(|id| !f.entries.contains_key(**id))
                .map(|id| (*id).clone())
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageMismatch(missing.into_iter().collect()));
    }
    let image_ids: Vec<&String> = first.entries.keys().collect();
    let idf = match idf {
        IdfSource::External(table) => table,
        IdfSource::SelfCorpus => {
            let docs: Vec<Vec<&str>> = image_ids
                .iter()
                .map(|id| {
                    files
                        .iter()
                        .map(|f| f.entries[*id].caption.as_str())
                        .collect()
                })
                .collect();
            build_idf(&docs, params.max_n)?
        }
    };
    let model_ids = candidate_model_ids(files);

    let outcomes: Vec<(ConsensusOutcome, &String)> = image_ids
        .par_iter()
        .map(|id| {
            let cs = CandidateSet::new(
                (*id).clone(),
                files
                    .iter()
                    .zip(&model_ids)
                    .map(|(f, m)| (m.clone(), f.entries[*id].caption.clone()))
                    .collect(),
            )?;
            Ok((consensus_select(&cs, &idf, params, mode)?, *id))
        })
        .collect::<Result<_>>()?;

    let mut fused = PredictionFile::new(ENSEMBLE_MODEL_ID);
    let mut report = Vec::with_capacity(outcomes.len());
    for (outcome, id) in outcomes {
        let entry = files[outcome.winner_index].entries[id].clone();
        fused.insert(id.clone(), entry)?;
        report.push(ConsensusReportLine {
            image_id: id.clone(),
            winner_model_id: outcome.model_id.clone(),
            scores: model_ids
                .iter()
                .cloned()
                .zip(outcome.scores.iter().copied())
                .collect(),
        });
    }
    Ok(FuseOutput { fused, report })
}
