//! Straight-line reference implementations and random instance generators
//! shared by the oracle tests and the acceptance suite. Nothing here calls
//! into the library's numeric code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Plain ITC loss over a square similarity matrix `s` (row = image, col = text).
pub fn itc_loss_oracle(s: &[Vec<f64>], tau: f64, y_i2t: &[Vec<f64>], y_t2i: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for a in 0..b {
        let row: Vec<f64> = (0..b).map(|j| s[a][j] / tau).collect();
        let col: Vec<f64> = (0..b).map(|j| s[j][a] / tau).collect();
        let lp_row = log_softmax(&row);
        let lp_col = log_softmax(&col);
        for j in 0..b {
            total -= y_i2t[a][j] * lp_row[j];
            total -= y_t2i[a][j] * lp_col[j];
        }
    }
    total / (2.0 * b as f64)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mut m = z[0];
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0;
    for &v in z {
        sum += (v - m).exp();
    }
    let lse = m + sum.ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

pub fn identity(b: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn random_sim(rng: &mut ChaCha8Rng, b: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..b).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Row-stochastic matrix with strictly positive entries.
pub fn random_targets(rng: &mut ChaCha8Rng, b: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let raw: Vec<f64> = (0..b).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Central finite-difference gradient of the oracle loss.
pub fn itc_grad_fd(
    s: &[Vec<f64>],
    tau: f64,
    y_i2t: &[Vec<f64>],
    y_t2i: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let b = s.len();
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            let mut plus = s.to_vec();
            let mut minus = s.to_vec();
            plus[i][j] += h;
            minus[i][j] -= h;
            g[i][j] = (itc_loss_oracle(&plus, tau, y_i2t, y_t2i)
                - itc_loss_oracle(&minus, tau, y_i2t, y_t2i))
                / (2.0 * h);
        }
    }
    g
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    uv / (uu.sqrt() * vv.sqrt())
}

/// Full scan, sort by similarity descending then id ascending, truncate.
pub fn top_k_oracle(
    ids: &[String],
    rows: &[Vec<f64>],
    query: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = Vec::new();
    for (id, row) in ids.iter().zip(rows) {
        if Some(id.as_str()) == exclude {
            continue;
        }
        let mut s = 0.0;
        for i in 0..row.len() {
            s += query[i] * row[i];
        }
        all.push((id.clone(), s));
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut cleaned = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c.is_whitespace() {
            for l in c.to_lowercase() {
                cleaned.push(l);
            }
        }
    }
    cleaned.split_whitespace().map(|t| t.to_string()).collect()
}

fn oracle_ngrams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Document frequencies: one document per reference group.
pub struct OracleIdf {
    pub docs: usize,
    pub df: BTreeMap<Vec<String>, usize>,
}

pub fn oracle_idf(groups: &[Vec<String>], max_n: usize) -> OracleIdf {
    let mut df = BTreeMap::new();
    for group in groups {
        let mut seen = BTreeSet::new();
        for caption in group {
            let toks = oracle_tokens(caption);
            for n in 1..=max_n {
                for g in oracle_ngrams(&toks, n).into_keys() {
                    seen.insert(g);
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    OracleIdf {
        docs: groups.len(),
        df,
    }
}

fn oracle_vec(text: &str, idf: &OracleIdf, n: usize) -> (BTreeMap<Vec<String>, f64>, f64, usize) {
    let toks = oracle_tokens(text);
    let mut v = oracle_ngrams(&toks, n);
    for (g, w) in v.iter_mut() {
        let df = *idf.df.get(g).unwrap_or(&0) as f64;
        *w *= (idf.docs as f64).ln() - df.max(1.0).ln();
    }
    let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
    (v, norm, toks.len())
}

/// CIDEr-D: clipped TF-IDF cosine per order with a Gaussian length penalty,
/// averaged over references and orders, times 10.
pub fn cider_d_oracle(
    candidate: &str,
    refs: &[String],
    idf: &OracleIdf,
    max_n: usize,
    sigma: f64,
    clipped: bool,
) -> f64 {
    if oracle_tokens(candidate).is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=max_n {
        let (h, nh, lh) = oracle_vec(candidate, idf, n);
        let mut per_ref = 0.0;
        for r in refs {
            let (rv, nr, lr) = oracle_vec(r, idf, n);
            let mut dotp = 0.0;
            for (g, hw) in &h {
                let rw = rv.get(g).copied().unwrap_or(0.0);
                dotp += if clipped { hw.min(rw) * rw } else { hw * rw };
            }
            let cos = if nh > 0.0 && nr > 0.0 {
                dotp / (nh * nr)
            } else {
                0.0
            };
            let penalty = if clipped {
                let d = lh as f64 - lr as f64;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            } else {
                1.0
            };
            per_ref += cos * penalty;
        }
        total += per_ref / refs.len() as f64;
    }
    10.0 * total / max_n as f64
}

/// Pairwise consensus by brute force: mean of single-reference scores
/// against each other candidate; ties within `tol` go to the earliest.
pub fn consensus_oracle(cands: &[String], idf: &OracleIdf, tol: f64) -> (usize, Vec<f64>) {
    let n = cands.len();
    if n == 1 {
        return (0, vec![0.0]);
    }
    let mut m = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in 0..n {
            if j != k {
                m[j][k] = cider_d_oracle(
                    &cands[j],
                    std::slice::from_ref(&cands[k]),
                    idf,
                    4,
                    6.0,
                    true,
                );
            }
        }
    }
    let scores: Vec<f64> = (0..n)
        .map(|j| (0..n).filter(|&k| k != j).map(|k| m[j][k]).sum::<f64>() / (n - 1) as f64)
        .collect();
    let best = scores.iter().cloned().fold(f64::MIN, f64::max);
    let winner = (0..n).find(|&j| scores[j] >= best - tol).unwrap();
    (winner, scores)
}

pub const VOCAB: [&str; 14] = [
    "a", "the", "dog", "cat", "red", "blue", "runs", "sits", "on", "grass", "near", "car", "small",
    "big",
];
pub const OTHER_VOCAB: [&str; 6] = ["zebra", "violin", "quantum", "harbor", "lantern", "meadow"];

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: &[&str], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len)
        .map(|_| vocab[rng.random_range(0..vocab.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Brute-force bucket: one plus the number of thresholds at or below `s`.
pub fn bucket_oracle(thresholds: &[f64], s: f64) -> usize {
    1 + thresholds.iter().filter(|&&t| t <= s).count()
}

/// Largest entrywise gap between two gradients, relative to the largest
/// entry of either. Entries near zero would otherwise compare finite
/// difference round-off against round-off.
pub fn grad_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut gap: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (a, n) in ra.iter().zip(rn) {
            gap = gap.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}
