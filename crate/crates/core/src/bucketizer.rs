//! Similarity buckets.
//!
//! A [`BucketSpec`] splits the image-text similarity population into `n`
//! ordered buckets, each with a prompt label. During training every pair is
//! prompted with the label of its own bucket; at inference the label of the
//! top bucket is used for every image.
//!
//! Thresholds come from quantile slicing: the lowest `edge_fraction` of the
//! sorted population goes to bucket 1, the highest `edge_fraction` to bucket
//! `n`, and the interior buckets split the remainder into equal-mass slices.
//! With `edge_fraction < 1/n` the two edge buckets end up smaller than every
//! interior bucket.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUCKETS: usize = 4;
pub const DEFAULT_EDGE_FRACTION: f64 = 0.1;
pub const DEFAULT_LABELS: [&str; DEFAULT_BUCKETS] =
    ["noise", "low quality", "high quality", "best match"];

pub fn default_labels() -> Vec<String> {
    DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBucketSpec")]
pub struct BucketSpec {
    n: usize,
    thresholds: Vec<f64>,
    labels: Vec<String>,
    edge_fraction: f64,
}

#[derive(Deserialize)]
struct RawBucketSpec {
    n: usize,
    thresholds: Vec<f64>,
    labels: Vec<String>,
    edge_fraction: f64,
}

impl TryFrom<RawBucketSpec> for BucketSpec {
    type Error = Error;

    fn try_from(raw: RawBucketSpec) -> Result<Self> {
        let spec = BucketSpec::new(raw.thresholds, raw.labels, raw.edge_fraction)?;
        if spec.n != raw.n {
            return Err(Error::InvalidParameter(format!(
                "n = {} but {} labels given",
                raw.n, spec.n
            )));
        }
        Ok(spec)
    }
}

fn check_labels(labels: &[String], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidParameter(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    for (i, label) in labels.iter().enumerate() {
        if label.trim().is_empty() {
            return Err(Error::InvalidParameter(format!("label {} is empty", i + 1)));
        }
        if labels[..i].contains(label) {
            return Err(Error::InvalidParameter(format!("label {label:?} repeated")));
        }
    }
    Ok(())
}

impl BucketSpec {
    /// Builds a spec from explicit thresholds (upper bounds of buckets
    /// `1..n-1`, strictly ascending) and `n = thresholds.len() + 1` labels.
    pub fn new(thresholds: Vec<f64>, labels: Vec<String>, edge_fraction: f64) -> Result<Self> {
        let n = thresholds.len() + 1;
        if n < 2 {
            return Err(Error::InvalidParameter(
                "a bucket spec needs at least 2 buckets".into(),
            ));
        }
        check_labels(&labels, n)?;
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("thresholds must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "thresholds must be strictly ascending".into(),
            ));
        }
        if !(edge_fraction > 0.0 && edge_fraction < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "edge_fraction must be in (0, 0.5), got {edge_fraction}"
            )));
        }
        Ok(Self {
            n,
            thresholds,
            labels,
            edge_fraction,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn edge_fraction(&self) -> f64 {
        self.edge_fraction
    }

    /// Label of the 1-based bucket `index`.
    pub fn label(&self, index: usize) -> &str {
        &self.labels[index - 1]
    }

    /// 1-based bucket index. A similarity equal to a threshold lands in the
    /// higher bucket.
    pub fn bucket_of(&self, similarity: f64) -> usize {
        1 + self.thresholds.partition_point(|&t| t <= similarity)
    }

    /// Number of values of `similarities` falling in each bucket.
    pub fn counts(&self, similarities: &[f64]) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for &s in similarities {
            counts[self.bucket_of(s) - 1] += 1;
        }
        counts
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("bucket spec serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub record_id: String,
    pub bucket_index: usize,
    pub label: String,
}

/// `ceil(x)` that treats values within `1e-9` of an integer as that integer,
/// so `0.1 * 100` counts as exactly 10.
fn ceil_tolerant(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Quantile-sliced thresholds for `n` buckets.
///
/// Each threshold is the order statistic that leaves exactly the requested
/// number of samples strictly below it when values are distinct: the first
/// sits at sorted position `ceil(edge_fraction * N)`, the last at
/// `N - ceil(edge_fraction * N)`, and interior cuts are spread evenly in
/// between. For `n = 2` there is no interior and the population is split
/// at the median position instead.
pub fn compute_thresholds(
    similarities: &[f64],
    n: usize,
    edge_fraction: f64,
    labels: &[String],
) -> Result<BucketSpec> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "bucket count must be at least 2, got {n}"
        )));
    }
    check_labels(labels, n)?;
    if !(edge_fraction > 0.0 && edge_fraction < 1.0 / n as f64) {
        return Err(Error::InvalidParameter(format!(
            "edge_fraction must be in (0, 1/{n}), got {edge_fraction}"
        )));
    }
    let total = similarities.len();
    if total < n {
        return Err(Error::TooFewSamples {
            needed: n,
            got: total,
        });
    }
    if similarities.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(
            "similarities must be finite".into(),
        ));
    }
    let mut sorted = similarities.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[total - 1] {
        return Err(Error::DegeneratePopulation(format!(
            "all {total} similarities equal {}",
            sorted[0]
        )));
    }

    let positions: Vec<usize> = if n == 2 {
        vec![total.div_ceil(2)]
    } else {
        let edge = ceil_tolerant(edge_fraction * total as f64).max(1);
        let interior = total - 2 * edge;
        let slices = n - 2;
        (0..=slices)
            .map(|j| edge + (j * interior).div_ceil(slices))
            .collect()
    };
    let thresholds: Vec<f64> = positions.iter().map(|&p| sorted[p]).collect();
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DegeneratePopulation(format!(
            "too many tied similarities for {n} distinct thresholds"
        )));
    }
    BucketSpec::new(thresholds, labels.to_vec(), edge_fraction)
}

pub fn assign_bucket(record_id: &str, similarity: f64, spec: &BucketSpec) -> BucketAssignment {
    let bucket_index = spec.bucket_of(similarity);
    BucketAssignment {
        record_id: record_id.to_string(),
        bucket_index,
        label: spec.label(bucket_index).to_string(),
    }
}

/// The prompt label used for every image at inference: the top bucket.
pub fn inference_bucket(spec: &BucketSpec) -> &str {
    spec.label(spec.n())
}
