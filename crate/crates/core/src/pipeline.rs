//! Declarative pipeline: a TOML config lists stages, each stage reads and
//! writes line-delimited JSON files, and every run appends nothing but a
//! fresh manifest describing what each stage consumed and produced.
//!
//! ```toml
//! seed = 7
//! manifest = "manifest.jsonl"
//!
//! [[stage]]
//! kind = "clean"
//! phase = "coarse-tuning"
//! input = "records.jsonl"
//! output = "clean.jsonl"
//! ```
//!
//! Relative paths resolve against the config file's directory. All stage
//! operations are deterministic; `seed` is recorded in the manifest but only
//! synthetic data generation consumes randomness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bucketizer::{self, assign_bucket, compute_thresholds, inference_bucket, BucketSpec};
use crate::cider::{build_idf, corpus_cider, CiderParams, CiderVariant};
use crate::corpus::{
    load_predictions, load_records, load_references, read_json_lines, save_predictions,
    write_json_lines, RecordSet,
};
use crate::ensembler::{fuse, run_copy_paste, ConsensusMode, IdfSource, DEFAULT_COPY_THRESHOLD};
use crate::error::{Error, Result};
use crate::retriever::{
    self, build_index, clean_filter, top_k_batch, CleanDecision, CleaningRules, HitList,
};
use crate::simcore::{itc_loss, pairwise_similarity, TargetDistribution, DEFAULT_TAU};
use crate::templater::{PromptMode, PromptTemplate, DEFAULT_MAX_KNOWLEDGE_CHARS};

pub const MANIFEST_HASH: &str = "sha256";
pub const MANIFEST_VERSION: u32 = 1;

/// Training/inference phase a stage belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PreTraining,
    CoarseTuning,
    FineTuning,
    ModelEnsemble,
    Evaluation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PreTraining => "pre-training",
            Phase::CoarseTuning => "coarse-tuning",
            Phase::FineTuning => "fine-tuning",
            Phase::ModelEnsemble => "model-ensemble",
            Phase::Evaluation => "evaluation",
        }
    }
}

fn default_manifest() -> PathBuf {
    PathBuf::from("manifest.jsonl")
}
fn default_min_tokens() -> usize {
    retriever::DEFAULT_MIN_TOKENS
}
fn default_max_tokens() -> usize {
    retriever::DEFAULT_MAX_TOKENS
}
fn default_ascii_ratio() -> f64 {
    retriever::DEFAULT_ASCII_RATIO
}
fn default_buckets() -> usize {
    bucketizer::DEFAULT_BUCKETS
}
fn default_edge_fraction() -> f64 {
    bucketizer::DEFAULT_EDGE_FRACTION
}
fn default_top_k() -> usize {
    30
}
fn default_max_chars() -> usize {
    DEFAULT_MAX_KNOWLEDGE_CHARS
}
fn default_threshold() -> f64 {
    DEFAULT_COPY_THRESHOLD
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageOp {
    Clean {
        input: PathBuf,
        output: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rejections: Option<PathBuf>,
        #[serde(default = "default_min_tokens")]
        min_tokens: usize,
        #[serde(default = "default_max_tokens")]
        max_tokens: usize,
        #[serde(default = "default_ascii_ratio")]
        ascii_ratio: f64,
    },
    Bucketize {
        input: PathBuf,
        output: PathBuf,
        spec_output: PathBuf,
        #[serde(default = "default_buckets")]
        buckets: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<String>>,
        #[serde(default = "default_edge_fraction")]
        edge_fraction: f64,
    },
    Retrieve {
        queries: PathBuf,
        index: PathBuf,
        output: PathBuf,
        #[serde(default = "default_top_k")]
        top_k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        url_filter: Option<String>,
        #[serde(default)]
        exclude_self: bool,
    },
    Prompt {
        input: PathBuf,
        output: PathBuf,
        mode: PromptMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hits: Option<PathBuf>,
        /// Use the spec's top-bucket label for every record.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inference_spec: Option<PathBuf>,
        /// At most this many retrieved captions per prompt.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knowledge_k: Option<usize>,
        #[serde(default = "default_max_chars")]
        max_chars: usize,
    },
    Consensus {
        predictions: Vec<PathBuf>,
        output: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idf_corpus: Option<PathBuf>,
        #[serde(default)]
        mode: ConsensusMode,
        #[serde(default)]
        cider: CiderParams,
    },
    CopyPaste {
        test: PathBuf,
        train: PathBuf,
        predictions: PathBuf,
        output: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<PathBuf>,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Score {
        candidates: PathBuf,
        references: PathBuf,
        output: PathBuf,
        #[serde(default)]
        cider: CiderParams,
    },
    ItcLoss {
        input: PathBuf,
        output: PathBuf,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_size: Option<usize>,
    },
}

impl StageOp {
    pub fn kind(&self) -> &'static str {
        match self {
            StageOp::Clean { .. } => "clean",
            StageOp::Bucketize { .. } => "bucketize",
            StageOp::Retrieve { .. } => "retrieve",
            StageOp::Prompt { .. } => "prompt",
            StageOp::Consensus { .. } => "consensus",
            StageOp::CopyPaste { .. } => "copy-paste",
            StageOp::Score { .. } => "score",
            StageOp::ItcLoss { .. } => "itc-loss",
        }
    }

    pub fn default_phase(&self) -> Phase {
        match self {
            StageOp::Bucketize { .. } | StageOp::ItcLoss { .. } => Phase::PreTraining,
            StageOp::Clean { .. } | StageOp::Retrieve { .. } => Phase::CoarseTuning,
            StageOp::Prompt { .. } => Phase::FineTuning,
            StageOp::Consensus { .. } | StageOp::CopyPaste { .. } => Phase::ModelEnsemble,
            StageOp::Score { .. } => Phase::Evaluation,
        }
    }

    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            StageOp::Clean { input, .. }
            | StageOp::Bucketize { input, .. }
            | StageOp::ItcLoss { input, .. } => {
                vec![input]
            }
            StageOp::Retrieve { queries, index, .. } => vec![queries, index],
            StageOp::Prompt {
                input,
                hits,
                inference_spec,
                ..
            } => std::iter::once(input.as_path())
                .chain(hits.as_deref())
                .chain(inference_spec.as_deref())
                .collect(),
            StageOp::Consensus {
                predictions,
                idf_corpus,
                ..
            } => predictions
                .iter()
                .map(PathBuf::as_path)
                .chain(idf_corpus.as_deref())
                .collect(),
            StageOp::CopyPaste {
                test,
                train,
                predictions,
                ..
            } => vec![test, train, predictions],
            StageOp::Score {
                candidates,
                references,
                ..
            } => vec![candidates, references],
        }
    }

    pub fn outputs(&self) -> Vec<&Path> {
        match self {
            StageOp::Clean {
                output, rejections, ..
            } => std::iter::once(output.as_path())
                .chain(rejections.as_deref())
                .collect(),
            StageOp::Bucketize {
                output,
                spec_output,
                ..
            } => vec![output, spec_output],
            StageOp::Consensus { output, report, .. }
            | StageOp::CopyPaste { output, report, .. } => std::iter::once(output.as_path())
                .chain(report.as_deref())
                .collect(),
            StageOp::Retrieve { output, .. }
            | StageOp::Prompt { output, .. }
            | StageOp::Score { output, .. }
            | StageOp::ItcLoss { output, .. } => vec![output],
        }
    }

    fn bucket_labels(&self) -> Result<Vec<String>> {
        let StageOp::Bucketize {
            buckets, labels, ..
        } = self
        else {
            unreachable!("bucket labels requested for a non-bucketize stage");
        };
        match labels {
            Some(l) => Ok(l.clone()),
            None if *buckets == bucketizer::DEFAULT_BUCKETS => Ok(bucketizer::default_labels()),
            None => Err(Error::Config(format!(
                "bucketize with {buckets} buckets needs explicit labels"
            ))),
        }
    }

    /// Checks parameters against each operation's preconditions without
    /// touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let mut paths = BTreeSet::new();
        for p in self.inputs().into_iter().chain(self.outputs()) {
            if !paths.insert(p) {
                return Err(Error::Config(format!(
                    "{} stage uses path {} more than once",
                    self.kind(),
                    p.display()
                )));
            }
        }
        match self {
            StageOp::Clean {
                min_tokens,
                max_tokens,
                ascii_ratio,
                ..
            } => {
                CleaningRules::new(*min_tokens, *max_tokens, *ascii_ratio)?;
            }
            StageOp::Bucketize {
                buckets,
                edge_fraction,
                ..
            } => {
                if *buckets < 2 {
                    return Err(Error::Config(format!(
                        "bucket count must be at least 2, got {buckets}"
                    )));
                }
                let labels = self.bucket_labels()?;
                if labels.len() != *buckets {
                    return Err(Error::Config(format!(
                        "{} labels given for {buckets} buckets",
                        labels.len()
                    )));
                }
                if !(*edge_fraction > 0.0 && *edge_fraction < 1.0 / *buckets as f64) {
                    return Err(Error::Config(format!(
                        "edge_fraction must be in (0, 1/{buckets}), got {edge_fraction}"
                    )));
                }
            }
            StageOp::Retrieve { top_k, .. } => {
                if *top_k == 0 {
                    return Err(Error::Config("top_k must be at least 1".into()));
                }
            }
            StageOp::Prompt {
                mode,
                hits,
                knowledge_k,
                ..
            } => {
                if matches!(mode, PromptMode::Retrieval | PromptMode::Combined) && hits.is_none() {
                    return Err(Error::Config(format!("{mode:?} prompts need a hits file")));
                }
                if *knowledge_k == Some(0) {
                    return Err(Error::Config("knowledge_k must be at least 1".into()));
                }
            }
            StageOp::Consensus {
                predictions, cider, ..
            } => {
                if predictions.is_empty() {
                    return Err(Error::Config(
                        "consensus needs at least one prediction file".into(),
                    ));
                }
                cider.validate()?;
            }
            StageOp::CopyPaste { threshold, .. } => {
                if !threshold.is_finite() {
                    return Err(Error::Config(format!(
                        "threshold must be finite, got {threshold}"
                    )));
                }
            }
            StageOp::Score { cider, .. } => cider.validate()?,
            StageOp::ItcLoss {
                tau, batch_size, ..
            } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(Error::Config(format!("tau must be positive, got {tau}")));
                }
                if *batch_size == Some(0) {
                    return Err(Error::Config("batch_size must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Runs the stage with paths resolved against `base`. Returns a one-line
    /// summary.
    pub fn execute(&self, base: &Path) -> Result<String> {
        self.validate()?;
        let at = |p: &Path| base.join(p);
        match self {
            StageOp::Clean {
                input,
                output,
                rejections,
                min_tokens,
                max_tokens,
                ascii_ratio,
            } => {
                let rules = CleaningRules::new(*min_tokens, *max_tokens, *ascii_ratio)?;
                let rs = load_records(&at(input))?;
                let mut kept = Vec::new();
                let mut rejected = Vec::new();
                for r in rs.iter() {
                    match clean_filter(r, &rules) {
                        CleanDecision::Keep => kept.push(r),
                        CleanDecision::Reject(reason) => {
                            rejected.push(json!({"id": r.id, "reason": reason.as_str()}))
                        }
                    }
                }
                write_json_lines(&at(output), kept.iter().copied())?;
                if let Some(rej) = rejections {
                    write_json_lines(&at(rej), &rejected)?;
                }
                Ok(format!("kept {} of {} records", kept.len(), rs.len()))
            }
            StageOp::Bucketize {
                input,
                output,
                spec_output,
                buckets,
                edge_fraction,
                ..
            } => {
                let rs = load_records(&at(input))?;
                let sims = record_similarities(&rs)?;
                let spec =
                    compute_thresholds(&sims, *buckets, *edge_fraction, &self.bucket_labels()?)?;
                let mut records = rs.into_records();
                for (r, &s) in records.iter_mut().zip(&sims) {
                    let a = assign_bucket(&r.id, s, &spec);
                    r.extra
                        .insert("bucket_index".into(), Value::from(a.bucket_index));
                    r.extra.insert("bucket_label".into(), Value::from(a.label));
                }
                write_json_lines(&at(output), &records)?;
                spec.save(&at(spec_output))?;
                Ok(format!("bucket counts {:?}", spec.counts(&sims)))
            }
            StageOp::Retrieve {
                queries,
                index,
                output,
                top_k,
                url_filter,
                exclude_self,
            } => {
                let queries = load_records(&at(queries))?;
                let corpus = load_records(&at(index))?;
                let index = build_index(&corpus, url_filter.as_deref())?;
                let hits = top_k_batch(&index, &queries, *top_k, *exclude_self)?;
                write_json_lines(&at(output), &hits)?;
                Ok(format!(
                    "{} queries against {} indexed records",
                    hits.len(),
                    index.len()
                ))
            }
            StageOp::Prompt {
                input,
                output,
                mode,
                hits,
                inference_spec,
                knowledge_k,
                max_chars,
            } => {
                let rs = load_records(&at(input))?;
                let hits: BTreeMap<String, Vec<String>> = match hits {
                    Some(h) => read_json_lines::<HitList>(&at(h))?
                        .into_iter()
                        .map(|(_, l)| {
                            let captions = l.hits.into_iter().map(|h| h.caption);
                            let captions: Vec<String> = match knowledge_k {
                                Some(k) => captions.take(*k).collect(),
                                None => captions.collect(),
                            };
                            (l.query_id, captions)
                        })
                        .collect(),
                    None => BTreeMap::new(),
                };
                let fixed_label = match inference_spec {
                    Some(p) => Some(inference_bucket(&BucketSpec::load(&at(p))?).to_string()),
                    None => None,
                };
                let mut records = rs.into_records();
                for r in &mut records {
                    let label = match &fixed_label {
                        Some(l) => Some(l.clone()),
                        None => r
                            .extra
                            .get("bucket_label")
                            .and_then(Value::as_str)
                            .map(str::to_string),
                    };
                    if label.is_none() && *mode != PromptMode::Retrieval {
                        return Err(Error::Missing(format!(
                            "record {:?} has no bucket_label (run bucketize or pass an inference spec)",
                            r.id
                        )));
                    }
                    let mut template =
                        PromptTemplate::new(label, hits.get(&r.id).cloned().unwrap_or_default());
                    template.max_knowledge_chars = *max_chars;
                    r.extra
                        .insert("prompt".into(), Value::from(template.render(*mode)?));
                }
                write_json_lines(&at(output), &records)?;
                Ok(format!("{} prompts", records.len()))
            }
            StageOp::Consensus {
                predictions,
                output,
                report,
                idf_corpus,
                mode,
                cider,
            } => {
                let files = predictions
                    .iter()
                    .map(|p| load_predictions(&at(p)))
                    .collect::<Result<Vec<_>>>()?;
                let idf = match idf_corpus {
                    Some(p) => {
                        let refs = load_references(&at(p))?;
                        let groups: Vec<&Vec<String>> = refs.values().collect();
                        IdfSource::External(build_idf(&groups, cider.max_n)?)
                    }
                    None => IdfSource::SelfCorpus,
                };
                let out = fuse(&files, cider, *mode, idf)?;
                save_predictions(&at(output), &out.fused)?;
                if let Some(r) = report {
                    write_json_lines(&at(r), &out.report)?;
                }
                Ok(format!(
                    "fused {} files over {} images",
                    files.len(),
                    out.fused.entries.len()
                ))
            }
            StageOp::CopyPaste {
                test,
                train,
                predictions,
                output,
                report,
                threshold,
            } => {
                let test = load_records(&at(test))?;
                let train = load_records(&at(train))?;
                let preds = load_predictions(&at(predictions))?;
                let (fused, decisions) = run_copy_paste(&test, &train, &preds, *threshold)?;
                save_predictions(&at(output), &fused)?;
                if let Some(r) = report {
                    write_json_lines(&at(r), &decisions)?;
                }
                let copied = decisions
                    .iter()
                    .filter(|d| d.chosen == crate::ensembler::CopyChoice::CopiedCaption)
                    .count();
                Ok(format!("copied {copied} of {} captions", decisions.len()))
            }
            StageOp::Score {
                candidates,
                references,
                output,
                cider,
            } => {
                let preds = load_predictions(&at(candidates))?;
                let refs = load_references(&at(references))?;
                let score = corpus_cider(&preds.captions(), &refs, cider)?;
                let variant = match cider.variant {
                    CiderVariant::CiderD => "cider-d",
                    CiderVariant::Cider => "cider",
                };
                let line = json!({
                    "model_id": preds.model_id,
                    "metric": variant,
                    "corpus": score.mean,
                    "per_image": score.per_image,
                });
                write_json_lines(&at(output), [&line])?;
                Ok(format!("{variant} {:.4}", score.mean))
            }
            StageOp::ItcLoss {
                input,
                output,
                tau,
                batch_size,
            } => {
                let rs = load_records(&at(input))?;
                let summary = itc_over_records(&rs, *tau, *batch_size)?;
                let mean = summary["mean_loss"].as_f64().unwrap_or(f64::NAN);
                write_json_lines(&at(output), [&summary])?;
                Ok(format!("mean itc loss {mean:.6}"))
            }
        }
    }
}

/// Image-text similarity per record: the stored value when present,
/// otherwise the cosine of the two embeddings.
pub fn record_similarities(rs: &RecordSet) -> Result<Vec<f64>> {
    rs.iter()
        .map(|r| match r.similarity {
            Some(s) => Ok(s),
            None => crate::simcore::cosine(&r.image_embedding, r.text_embedding()?),
        })
        .collect()
}

/// ITC loss with one-hot diagonal targets over consecutive batches of
/// records (the whole set when `batch_size` is `None`).
pub fn itc_over_records(rs: &RecordSet, tau: f64, batch_size: Option<usize>) -> Result<Value> {
    let size = batch_size.unwrap_or(rs.len()).max(1);
    let mut batches = Vec::new();
    let mut total = 0.0;
    for (i, chunk) in rs.records().chunks(size).enumerate() {
        let b = chunk.len();
        let d = rs.dimension();
        let mut images = Array2::zeros((b, d));
        let mut texts = Array2::zeros((b, d));
        for (row, r) in chunk.iter().enumerate() {
            images
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&r.image_embedding));
            texts
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(r.text_embedding()?));
        }
        let sim = pairwise_similarity(images.view(), texts.view(), tau)?;
        let targets = TargetDistribution::one_hot_diagonal(b);
        let loss = itc_loss(&sim, &targets, &targets)?.loss;
        total += loss;
        batches.push(json!({"start": i * size, "size": b, "loss": loss}));
    }
    let mean = total / batches.len() as f64;
    Ok(json!({"tau": tau, "batches": batches, "mean_loss": mean}))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(flatten)]
    pub op: StageOp,
}

impl StageConfig {
    pub fn phase(&self) -> Phase {
        self.phase.unwrap_or_else(|| self.op.default_phase())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut written: BTreeMap<&Path, usize> = BTreeMap::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.op.validate().map_err(|e| Error::Stage {
                stage: i + 1,
                kind: stage.op.kind().into(),
                source: Box::new(e),
            })?;
            for out in stage.op.outputs() {
                if out == self.manifest {
                    return Err(Error::Config(format!(
                        "stage {} overwrites the manifest",
                        i + 1
                    )));
                }
                if let Some(prev) = written.insert(out, i + 1) {
                    return Err(Error::Config(format!(
                        "stages {prev} and {} both write {}",
                        i + 1,
                        out.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: usize,
    pub kind: String,
    pub phase: Phase,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub params: Value,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub manifest_version: u32,
    pub hash: String,
    pub seed: u64,
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

fn digests(base: &Path, paths: &[&Path]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.to_path_buf(),
                sha256: sha256_file(&base.join(p))?,
            })
        })
        .collect()
}

/// Runs every stage in order, then writes the manifest. The first failing
/// stage aborts the run.
pub fn run_pipeline(config: &PipelineConfig, base: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut entries = Vec::with_capacity(config.stages.len());
    for (i, stage) in config.stages.iter().enumerate() {
        let wrap = |e: Error| Error::Stage {
            stage: i + 1,
            kind: stage.op.kind().into(),
            source: Box::new(e),
        };
        let inputs = digests(base, &stage.op.inputs()).map_err(wrap)?;
        let summary = stage.op.execute(base).map_err(wrap)?;
        let outputs = digests(base, &stage.op.outputs()).map_err(wrap)?;
        let mut params = serde_json::to_value(&stage.op).expect("stage serializes");
        if let Value::Object(map) = &mut params {
            map.remove("kind");
        }
        entries.push(ManifestEntry {
            stage: i + 1,
            kind: stage.op.kind().into(),
            phase: stage.phase(),
            inputs,
            outputs,
            params,
            summary,
        });
    }
    let header = ManifestHeader {
        manifest_version: MANIFEST_VERSION,
        hash: MANIFEST_HASH.into(),
        seed: config.seed,
        stages: entries.len(),
    };
    let mut lines = vec![serde_json::to_value(&header).expect("header serializes")];
    lines.extend(
        entries
            .iter()
            .map(|e| serde_json::to_value(e).expect("entry serializes")),
    );
    write_json_lines(&base.join(&config.manifest), &lines)?;
    Ok(Manifest { header, entries })
}

fn describe_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(describe_value)
            .collect::<Vec<_>>()
            .join(", "),
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| format!("{k}={}", describe_value(v)))
            .collect::<Vec<_>>()
            .join(" "),
        other => other.to_string(),
    }
}

/// Human-readable plan. Writes nothing.
pub fn explain(config: &PipelineConfig) -> String {
    let mut out = String::new();
    if config.stages.is_empty() {
        let _ = writeln!(out, "no stages (seed {})", config.seed);
        return out;
    }
    let _ = writeln!(
        out,
        "pipeline: {} stage{}, seed {}, manifest {}",
        config.stages.len(),
        if config.stages.len() == 1 { "" } else { "s" },
        config.seed,
        config.manifest.display()
    );
    for (i, stage) in config.stages.iter().enumerate() {
        let paths = |ps: Vec<&Path>| {
            ps.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(
            out,
            "  {}. {} [{}]",
            i + 1,
            stage.op.kind(),
            stage.phase().as_str()
        );
        let _ = writeln!(out, "       reads:  {}", paths(stage.op.inputs()));
        let _ = writeln!(out, "       writes: {}", paths(stage.op.outputs()));
        let mut params = serde_json::to_value(&stage.op).expect("stage serializes");
        if let Value::Object(map) = &mut params {
            map.remove("kind");
            for key in [
                "input",
                "output",
                "queries",
                "index",
                "hits",
                "predictions",
                "test",
                "train",
                "candidates",
                "references",
                "report",
                "rejections",
                "spec_output",
                "inference_spec",
                "idf_corpus",
            ] {
                map.remove(key);
            }
            if !map.is_empty() {
                let _ = writeln!(out, "       params: {}", describe_value(&params));
            }
        }
    }
    let phases: BTreeSet<Phase> = config.stages.iter().map(StageConfig::phase).collect();
    let _ = writeln!(
        out,
        "phases: {}",
        phases
            .iter()
            .map(|p| p.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    out
}
