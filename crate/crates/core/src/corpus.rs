//! Image-text records, prediction files and reference files.
//!
//! Every file in the toolkit is line-delimited JSON: one object per line,
//! blank lines ignored. Record embeddings are stored as plain arrays of
//! numbers and must be unit-norm; values within `1e-3` of unit norm are
//! re-normalized on load, anything further away is rejected.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Norm deviation tolerated (and repaired) when loading.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-3;
/// Norm deviation tolerated by [`validate_records`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// One image-text pair. The image itself is represented by its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub caption: String,
    #[serde(default)]
    pub url: String,
    pub image_embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    /// Fields added by pipeline stages (`bucket_index`, `prompt`, ...).
    /// Carried through load/save untouched.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl PairRecord {
    pub fn new(
        id: impl Into<String>,
        caption: impl Into<String>,
        image_embedding: Vec<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            caption: caption.into(),
            url: String::new(),
            image_embedding,
            text_embedding: None,
            similarity: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn text_embedding(&self) -> Result<&[f64]> {
        self.text_embedding
            .as_deref()
            .ok_or_else(|| Error::MissingTextEmbedding(self.id.clone()))
    }
}

/// An ordered, immutable collection of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    records: Vec<PairRecord>,
    dimension: usize,
}

impl RecordSet {
    /// Builds a record set, rejecting duplicate ids, mixed dimensions,
    /// out-of-range similarities and embeddings that are not unit-norm
    /// within [`LOAD_NORM_TOLERANCE`]. Near-unit embeddings are re-normalized.
    pub fn new(records: Vec<PairRecord>) -> Result<Self> {
        let mut records = records;
        let dimension = records
            .first()
            .map(|r| r.image_embedding.len())
            .ok_or_else(|| Error::Empty("record set has no records".into()))?;
        if dimension == 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for record in &mut records {
            check_record(record, dimension)?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::DuplicateId(record.id.clone()));
            }
        }
        Ok(Self { records, dimension })
    }

    /// Wraps records without any checking. Use [`validate_records`] to
    /// inspect such a set.
    pub fn from_records_unchecked(records: Vec<PairRecord>, dimension: usize) -> Self {
        Self { records, dimension }
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PairRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &str) -> Option<&PairRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn into_records(self) -> Vec<PairRecord> {
        self.records
    }
}

impl<'a> IntoIterator for &'a RecordSet {
    type Item = &'a PairRecord;
    type IntoIter = std::slice::Iter<'a, PairRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_on_load(id: &str, v: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotUnitNorm {
            id: id.to_string(),
            norm: f64::NAN,
        });
    }
    let norm = l2_norm(v);
    if (norm - 1.0).abs() > LOAD_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm {
            id: id.to_string(),
            norm,
        });
    }
    // Already unit at machine precision: leave the bytes alone so that
    // load/save/load is the identity.
    if (norm - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

fn check_record(record: &mut PairRecord, dimension: usize) -> Result<()> {
    if record.image_embedding.len() != dimension {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            found: record.image_embedding.len(),
        });
    }
    normalize_on_load(&record.id, &mut record.image_embedding)?;
    if let Some(text) = record.text_embedding.as_mut() {
        if text.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                found: text.len(),
            });
        }
        normalize_on_load(&record.id, text)?;
    }
    if let Some(s) = record.similarity {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::InvalidParameter(format!(
                "record {:?}: similarity {s} outside [-1, 1]",
                record.id
            )));
        }
    }
    Ok(())
}

/// Reads `path` as JSON lines, returning each parsed object with its
/// 1-based line number. Blank lines are skipped.
pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

/// Writes one JSON object per line, `\n` terminated.
pub fn write_json_lines<'a, T, I>(path: &Path, items: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::InvalidParameter(format!("serialization failed: {e}")))?;
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a record file. Line order is preserved.
pub fn load_records(path: &Path) -> Result<RecordSet> {
    let lines: Vec<(usize, PairRecord)> = read_json_lines(path)?;
    let Some((_, first)) = lines.first() else {
        return Err(Error::Empty(format!("{} has no records", path.display())));
    };
    let dimension = first.image_embedding.len();
    if dimension == 0 {
        return Err(Error::MalformedLine {
            path: path.to_path_buf(),
            line: lines[0].0,
            message: "empty image_embedding".into(),
        });
    }
    let mut seen = HashSet::with_capacity(lines.len());
    let mut records = Vec::with_capacity(lines.len());
    for (_, mut record) in lines {
        check_record(&mut record, dimension)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(RecordSet { records, dimension })
}

pub fn save_records(path: &Path, rs: &RecordSet) -> Result<()> {
    write_json_lines(path, rs.records())
}

/// A single invariant violation found by [`validate_records`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, id: &str, message: String) {
        self.violations.push(Violation {
            record_id: id.to_string(),
            message,
        });
    }
}

/// Lists every invariant violation in `rs`. Violations are data, not errors.
pub fn validate_records(rs: &RecordSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for r in rs.records() {
        if !seen.insert(r.id.as_str()) {
            report.push(&r.id, format!("duplicate id {:?}", r.id));
        }
        let embeddings = std::iter::once(("image_embedding", Some(&r.image_embedding))).chain(
            std::iter::once(("text_embedding", r.text_embedding.as_ref())),
        );
        for (name, emb) in embeddings {
            let Some(emb) = emb else { continue };
            if emb.len() != rs.dimension() {
                report.push(
                    &r.id,
                    format!(
                        "{name} dimension {} differs from set dimension {}",
                        emb.len(),
                        rs.dimension()
                    ),
                );
                continue;
            }
            let norm = l2_norm(emb);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                report.push(&r.id, format!("{name} not unit-norm (norm {norm})"));
            }
        }
        if let Some(s) = r.similarity {
            if !(-1.0..=1.0).contains(&s) {
                report.push(&r.id, format!("similarity {s} outside [-1, 1]"));
            }
        }
    }
    report
}

/// One model's caption for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_embedding: Option<Vec<f64>>,
}

/// All captions produced by one model, keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub model_id: String,
    pub entries: BTreeMap<String, PredictionEntry>,
}

#[derive(Serialize, Deserialize)]
struct PredictionHeader {
    model_id: String,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_id: String,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption_embedding: Option<Vec<f64>>,
}

impl PredictionFile {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a caption; fails if the image already has one.
    pub fn insert(&mut self, image_id: impl Into<String>, entry: PredictionEntry) -> Result<()> {
        let image_id = image_id.into();
        if self.entries.contains_key(&image_id) {
            return Err(Error::DuplicateId(image_id));
        }
        self.entries.insert(image_id, entry);
        Ok(())
    }

    pub fn captions(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.caption.clone()))
            .collect()
    }
}

/// Loads a prediction file: a `{"model_id"}` header line followed by
/// `{"image_id", "caption", "caption_embedding"?}` lines.
pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    let lines: Vec<(usize, Value)> = read_json_lines(path)?;
    let mut iter = lines.into_iter();
    let (header_line, header) = iter
        .next()
        .ok_or_else(|| Error::Empty(format!("{} has no header", path.display())))?;
    let malformed = |line: usize, e: serde_json::Error| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let header: PredictionHeader =
        serde_json::from_value(header).map_err(|e| malformed(header_line, e))?;
    let mut file = PredictionFile::new(header.model_id);
    for (line, value) in iter {
        let entry: PredictionLine =
            serde_json::from_value(value).map_err(|e| malformed(line, e))?;
        file.insert(
            entry.image_id,
            PredictionEntry {
                caption: entry.caption,
                caption_embedding: entry.caption_embedding,
            },
        )?;
    }
    Ok(file)
}

pub fn save_predictions(path: &Path, file: &PredictionFile) -> Result<()> {
    let mut lines = vec![serde_json::to_value(PredictionHeader {
        model_id: file.model_id.clone(),
    })
    .expect("header serializes")];
    for (image_id, entry) in &file.entries {
        lines.push(
            serde_json::to_value(PredictionLine {
                image_id: image_id.clone(),
                caption: entry.caption.clone(),
                caption_embedding: entry.caption_embedding.clone(),
            })
            .expect("prediction line serializes"),
        );
    }
    write_json_lines(path, &lines)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub image_id: String,
    pub references: Vec<String>,
}

/// Loads `{"image_id", "references": [..]}` lines into a map.
pub fn load_references(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (line, r) in read_json_lines::<ReferenceLine>(path)? {
        if r.references.is_empty() {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line,
                message: format!("image {:?} has no references", r.image_id),
            });
        }
        if out.insert(r.image_id.clone(), r.references).is_some() {
            return Err(Error::DuplicateId(r.image_id));
        }
    }
    Ok(out)
}

pub fn save_references(path: &Path, refs: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let lines: Vec<ReferenceLine> = refs
        .iter()
        .map(|(k, v)| ReferenceLine {
            image_id: k.clone(),
            references: v.clone(),
        })
        .collect();
    write_json_lines(path, &lines)
}
