//! CIDEr and CIDEr-D caption scoring.
//!
//! Each caption becomes, for every n-gram order `n` in `1..=max_n`, a vector
//! of TF-IDF weights `count(g) * (ln N - ln max(1, df(g)))`, where `N` is the
//! number of reference documents (one per image) and `df(g)` the number of
//! documents containing `g`. A candidate is compared to each reference by
//! the cosine of these vectors; CIDEr-D clips candidate weights at the
//! reference weights and multiplies by `exp(-(lc - lr)^2 / (2 sigma^2))`.
//! Scores are averaged over references and orders and multiplied by `scale`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_N: usize = 4;
pub const DEFAULT_SIGMA: f64 = 6.0;
pub const DEFAULT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderVariant {
    /// Count clipping plus Gaussian length penalty.
    #[default]
    CiderD,
    /// Plain TF-IDF cosine.
    Cider,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiderParams {
    pub max_n: usize,
    pub sigma: f64,
    pub scale: f64,
    #[serde(default)]
    pub variant: CiderVariant,
}

impl Default for CiderParams {
    fn default() -> Self {
        Self {
            max_n: DEFAULT_MAX_N,
            sigma: DEFAULT_SIGMA,
            scale: DEFAULT_SCALE,
            variant: CiderVariant::CiderD,
        }
    }
}

impl CiderParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 {
            return Err(Error::InvalidParameter("max_n must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Lowercases, deletes punctuation and splits on whitespace. Any character
/// that is neither alphanumeric nor whitespace counts as punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// N-grams of one order are keyed by their tokens joined with a single space.
fn ngram_counts(tokens: &[String], max_n: usize) -> Vec<BTreeMap<String, usize>> {
    (1..=max_n)
        .map(|n| {
            let mut counts = BTreeMap::new();
            for window in tokens.windows(n) {
                *counts.entry(window.join(" ")).or_insert(0) += 1;
            }
            counts
        })
        .collect()
}

/// Document frequencies over a reference corpus; one document per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    max_n: usize,
    doc_count: usize,
    log_doc_count: f64,
    df: HashMap<String, usize>,
}

impl IdfTable {
    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn document_frequency(&self, ngram: &str) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `ln(N / max(1, df))`; unseen n-grams get the maximum, `ln N`.
    pub fn idf(&self, ngram: &str) -> f64 {
        self.log_doc_count - (self.document_frequency(ngram).max(1) as f64).ln()
    }

    /// All n-grams with their idf, sorted by n-gram.
    pub fn entries(&self) -> BTreeMap<&str, f64> {
        self.df.keys().map(|g| (g.as_str(), self.idf(g))).collect()
    }
}

/// Builds the IDF table; each group is one image's reference captions.
pub fn build_idf<G, S>(groups: &[G], max_n: usize) -> Result<IdfTable>
where
    G: AsRef<[S]>,
    S: AsRef<str>,
{
    if groups.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: groups.len(),
        });
    }
    if max_n == 0 {
        return Err(Error::InvalidParameter("max_n must be at least 1".into()));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for group in groups {
        let mut present: HashSet<String> = HashSet::new();
        for caption in group.as_ref() {
            let tokens = tokenize(caption.as_ref());
            for counts in ngram_counts(&tokens, max_n) {
                present.extend(counts.into_keys());
            }
        }
        for g in present {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    Ok(IdfTable {
        max_n,
        doc_count: groups.len(),
        log_doc_count: (groups.len() as f64).ln(),
        df,
    })
}

/// A caption projected onto TF-IDF space, ready for repeated comparison.
/// Weights are kept in n-gram order so every sum runs in a fixed order.
#[derive(Debug, Clone)]
pub struct CaptionVector {
    weights: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: usize,
}

impl CaptionVector {
    pub fn new(text: &str, idf: &IdfTable, max_n: usize) -> Self {
        let tokens = tokenize(text);
        let weights: Vec<BTreeMap<String, f64>> = ngram_counts(&tokens, max_n)
            .into_iter()
            .map(|counts| {
                counts
                    .into_iter()
                    .map(|(g, c)| {
                        let w = c as f64 * idf.idf(&g);
                        (g, w)
                    })
                    .collect()
            })
            .collect();
        let norms = weights
            .iter()
            .map(|m| m.values().map(|w| w * w).sum::<f64>().sqrt())
            .collect();
        Self {
            weights,
            norms,
            length: tokens.len(),
        }
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Per-order similarity against one reference, length penalty included
    /// for CIDEr-D. Not scaled.
    pub fn similarity(&self, reference: &CaptionVector, params: &CiderParams) -> Vec<f64> {
        let penalty = match params.variant {
            CiderVariant::CiderD => {
                let delta = self.length as f64 - reference.length as f64;
                (-(delta * delta) / (2.0 * params.sigma * params.sigma)).exp()
            }
            CiderVariant::Cider => 1.0,
        };
        self.weights
            .iter()
            .zip(&reference.weights)
            .zip(self.norms.iter().zip(&reference.norms))
            .map(|((hyp, refw), (nh, nr))| {
                let mut val = 0.0;
                for (g, &h) in hyp {
                    let r = refw.get(g).copied().unwrap_or(0.0);
                    val += match params.variant {
                        CiderVariant::CiderD => h.min(r) * r,
                        CiderVariant::Cider => h * r,
                    };
                }
                if *nh != 0.0 && *nr != 0.0 {
                    val /= nh * nr;
                }
                val * penalty
            })
            .collect()
    }
}

/// Score of pre-vectorized `candidate` against pre-vectorized references.
pub fn score_vectors(
    candidate: &CaptionVector,
    references: &[CaptionVector],
    params: &CiderParams,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("cider needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut per_order = vec![0.0; params.max_n];
    for r in references {
        for (acc, v) in per_order.iter_mut().zip(candidate.similarity(r, params)) {
            *acc += v;
        }
    }
    let mean_over_orders = per_order.iter().sum::<f64>() / params.max_n as f64;
    Ok(mean_over_orders / references.len() as f64 * params.scale)
}

/// CIDEr-D (or plain CIDEr, per `params.variant`) of one candidate.
pub fn cider_d<S: AsRef<str>>(
    candidate: &str,
    references: &[S],
    idf: &IdfTable,
    params: &CiderParams,
) -> Result<f64> {
    params.validate()?;
    if params.max_n > idf.max_n() {
        return Err(Error::InvalidParameter(format!(
            "max_n {} exceeds idf table order {}",
            params.max_n,
            idf.max_n()
        )));
    }
    let refs: Vec<CaptionVector> = references
        .iter()
        .map(|r| CaptionVector::new(r.as_ref(), idf, params.max_n))
        .collect();
    score_vectors(
        &CaptionVector::new(candidate, idf, params.max_n),
        &refs,
        params,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusScore {
    pub mean: f64,
    pub per_image: BTreeMap<String, f64>,
}

/// Mean per-image score over the prediction keys, with the IDF built from
/// every reference group.
pub fn corpus_cider(
    predictions: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
    params: &CiderParams,
) -> Result<CorpusScore> {
    params.validate()?;
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let missing: Vec<String> = predictions
        .keys()
        .filter(|k| !references.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageMismatch(missing));
    }
    let groups: Vec<&Vec<String>> = references.values().collect();
    let groups: Vec<&[String]> = groups.iter().map(|g| g.as_slice()).collect();
    let idf = build_idf(&groups, params.max_n)?;

    let mut per_image = BTreeMap::new();
    for (image, candidate) in predictions {
        per_image.insert(
            image.clone(),
            cider_d(candidate, &references[image], &idf, params)?,
        );
    }
    let mean = per_image.values().sum::<f64>() / per_image.len() as f64;
    Ok(CorpusScore { mean, per_image })
}
