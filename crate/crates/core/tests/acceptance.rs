//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//! Runs as a plain binary (no libtest harness) so the lines always show.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use capkit::bucketizer::{compute_thresholds, default_labels};
use capkit::cider::{build_idf, cider_d, CiderParams};
use capkit::corpus::{PairRecord, RecordSet};
use capkit::ensembler::{
    consensus_select, copy_paste, CandidateSet, ConsensusMode, CopyCandidate, CopyChoice,
};
use capkit::pipeline::{run_pipeline, PipelineConfig};
use capkit::retriever::{build_index, top_k};
use capkit::simcore::{itc_loss, itc_loss_grad, SimilarityMatrix, TargetDistribution};
use capkit::synth::{self, SynthConfig};
use capkit::templater::{render_bucket, render_combined, render_retrieval};
use common::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn to_array(m: &[Vec<f64>]) -> Array2<f64> {
    let b = m.len();
    Array2::from_shape_fn((b, b), |(i, j)| m[i][j])
}

fn targets(m: &[Vec<f64>]) -> TargetDistribution {
    TargetDistribution::new(to_array(m)).unwrap()
}

fn itc_value() -> Outcome {
    let s = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let id = identity(2);
    let sim = SimilarityMatrix::new(to_array(&s), 0.07).unwrap();
    let loss = itc_loss(&sim, &targets(&id), &targets(&id)).unwrap().loss;
    check((loss - std::f64::consts::LN_2).abs() <= 1e-12, || {
        format!("zero 2x2 loss {loss} != ln 2")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.random_range(1..=16);
        let s = random_sim(&mut rng, b);
        let (y1, y2) = if rng.random_bool(0.5) {
            (identity(b), identity(b))
        } else {
            (random_targets(&mut rng, b), random_targets(&mut rng, b))
        };
        let sim = SimilarityMatrix::new(to_array(&s), 0.07).unwrap();
        let got = itc_loss(&sim, &targets(&y1), &targets(&y2)).unwrap().loss;
        let want = itc_loss_oracle(&s, 0.07, &y1, &y2);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    check(worst <= 1e-10, || format!("worst relative error {worst:e}"))?;
    check(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "ln 2 exact to 1e-12; 100 instances, worst rel err {worst:.1e}, {elapsed:.2?}"
    ))
}

fn itc_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let b = [2, 4, 8][i % 3];
        let s = random_sim(&mut rng, b);
        let (y1, y2) = if i % 2 == 0 {
            (identity(b), identity(b))
        } else {
            (random_targets(&mut rng, b), random_targets(&mut rng, b))
        };
        let sim = SimilarityMatrix::new(to_array(&s), 0.07).unwrap();
        let g = itc_loss_grad(&sim, &targets(&y1), &targets(&y2)).unwrap();
        let fd = itc_grad_fd(&s, 0.07, &y1, &y2, 1e-5);
        let analytic: Vec<Vec<f64>> = g.outer_iter().map(|r| r.to_vec()).collect();
        worst = worst.max(grad_rel_error(&analytic, &fd));
    }
    check(worst < 1e-5, || format!("worst relative error {worst:e}"))?;
    Ok(format!(
        "100 instances, B in {{2,4,8}}, worst rel err {worst:.1e}"
    ))
}

fn bucket_edges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let labels = default_labels();
    let mut failures = 0;
    for p in 0..200 {
        let n = rng.random_range(100..=5000);
        let sims: Vec<f64> = (0..n)
            .map(|_| match p % 3 {
                0 => rng.random_range(-1.0..1.0),
                1 => {
                    let u: f64 = rng.random_range(0.0..1.0);
                    u * u * u - 0.2
                }
                _ => {
                    (rng.random_range(0.0..1.0)
                        + rng.random_range(0.0..1.0)
                        + rng.random_range(0.0..1.0))
                        / 3.0
                        * 0.6
                }
            })
            .collect();
        let spec = compute_thresholds(&sims, 4, 0.1, &labels).map_err(|e| e.to_string())?;
        let counts = spec.counts(&sims);
        let edge_max = counts[0].max(counts[3]);
        let interior_min = counts[1].min(counts[2]);
        if counts.iter().sum::<usize>() != n || edge_max >= interior_min {
            failures += 1;
        }
    }
    check(failures == 0, || {
        format!("{failures} populations violate edge < interior")
    })?;

    let sims: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = compute_thresholds(&sims, 4, 0.1, &labels).map_err(|e| e.to_string())?;
    let mut violations = 0;
    for _ in 0..100_000 {
        let a: f64 = rng.random_range(-1.2..1.2);
        let b: f64 = rng.random_range(-1.2..1.2);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if spec.bucket_of(lo) > spec.bucket_of(hi) {
            violations += 1;
        }
    }
    check(violations == 0, || {
        format!("{violations} monotonicity violations")
    })?;
    Ok("200 populations, 0 failures; 1e5 monotone pairs".into())
}

fn retrieval_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut queries = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=5000);
        let d = rng.random_range(1..=128);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && rng.random_bool(0.1) {
                let j = rng.random_range(0..i);
                rows.push(rows[j].clone());
            } else {
                rows.push(random_unit(&mut rng, d));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let ids: Vec<String> = order.iter().map(|i| format!("id{i:05}")).collect();
        let records: Vec<PairRecord> = ids
            .iter()
            .zip(&rows)
            .map(|(id, r)| PairRecord::new(id.clone(), "a caption", r.clone()))
            .collect();
        let rs = RecordSet::new(records).map_err(|e| e.to_string())?;
        let index = build_index(&rs, None).map_err(|e| e.to_string())?;
        for k in [1, 10, 30] {
            for q in 0..2 {
                let query = if q == 0 {
                    rows[rng.random_range(0..n)].clone()
                } else {
                    random_unit(&mut rng, d)
                };
                let got: Vec<(String, f64)> = top_k(&index, &query, k, None)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|h| (h.id, h.similarity))
                    .collect();
                let want = top_k_oracle(&ids, &rows, &query, k, None);
                check(got == want, || format!("mismatch: N={n} d={d} k={k}"))?;
                queries += 1;
            }
        }
    }
    Ok(format!(
        "50 indexes, {queries} queries, exact match incl. tie order"
    ))
}

fn cider_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let params = CiderParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let images = rng.random_range(2..=10);
        let groups: Vec<Vec<String>> = (0..images)
            .map(|_| {
                (0..rng.random_range(1..=3))
                    .map(|_| random_sentence(&mut rng, &VOCAB, 1, 10))
                    .collect()
            })
            .collect();
        let idf = build_idf(&groups, 4).map_err(|e| e.to_string())?;
        let oidf = oracle_idf(&groups, 4);
        for g in &groups {
            let cand = random_sentence(&mut rng, &VOCAB, 1, 10);
            let got = cider_d(&cand, g, &idf, &params).map_err(|e| e.to_string())?;
            worst = worst.max((got - cider_d_oracle(&cand, g, &oidf, 4, 6.0, true)).abs());
            let disjoint = random_sentence(&mut rng, &OTHER_VOCAB, 1, 6);
            let zero = cider_d(&disjoint, g, &idf, &params).map_err(|e| e.to_string())?;
            check(zero == 0.0, || format!("disjoint candidate scored {zero}"))?;
        }
    }
    check(worst <= 1e-9, || format!("worst abs error {worst:e}"))?;
    Ok(format!(
        "50 corpora, worst abs err {worst:.1e}; disjoint candidates score 0"
    ))
}

fn consensus_argmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let params = CiderParams::default();
    let model_ids = |n: usize| (0..n).map(|i| format!("m{i}")).collect::<Vec<_>>();
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let cands: Vec<String> = (0..n)
            .map(|_| random_sentence(&mut rng, &VOCAB, 2, 9))
            .collect();
        let mut groups: Vec<Vec<String>> = (0..8)
            .map(|_| vec![random_sentence(&mut rng, &VOCAB, 2, 9)])
            .collect();
        groups.push(cands.clone());
        let idf = build_idf(&groups, 4).map_err(|e| e.to_string())?;
        let cs = CandidateSet::new(
            "img",
            model_ids(n)
                .into_iter()
                .zip(cands.iter().cloned())
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let got = consensus_select(&cs, &idf, &params, ConsensusMode::PairwiseMean)
            .map_err(|e| e.to_string())?;
        let (want, _) = consensus_oracle(&cands, &oracle_idf(&groups, 4), 1e-9);
        check(got.winner_index == want, || {
            format!("winner {} vs oracle {want} for {cands:?}", got.winner_index)
        })?;

        let same = vec![cands[0].clone(); n];
        let cs = CandidateSet::new("img", model_ids(n).into_iter().zip(same).collect())
            .map_err(|e| e.to_string())?;
        let got = consensus_select(&cs, &idf, &params, ConsensusMode::PairwiseMean)
            .map_err(|e| e.to_string())?;
        check(got.winner_index == 0, || {
            format!("unanimous set picked {}", got.winner_index)
        })?;
    }
    Ok("100 sets match oracle argmax; unanimous sets pick candidate 1".into())
}

fn copy_paste_table() -> Outcome {
    let t = 0.35;
    // (avg, c1, c2, candidate present, expect copy)
    let rows: [(f64, f64, f64, bool, bool); 8] = [
        (0.36, 0.5, 0.3, true, true),
        (0.36, 0.4, 0.4, true, false),
        (0.36, 0.3, 0.5, true, false),
        (0.34, 0.5, 0.3, true, false),
        (0.34, 0.4, 0.4, true, false),
        (0.34, 0.3, 0.5, true, false),
        (0.35, 0.5, 0.3, true, true),
        (0.90, 0.5, 0.3, false, false),
    ];
    for (i, &(avg, c1, c2, present, copy)) in rows.iter().enumerate() {
        let cand = CopyCandidate {
            id: "train".into(),
            caption: "copied caption".into(),
            c1,
        };
        let d = copy_paste(
            "test",
            avg,
            present.then_some(&cand),
            "model caption",
            Some(c2),
            t,
        )
        .map_err(|e| e.to_string())?;
        let expected = if copy {
            CopyChoice::CopiedCaption
        } else {
            CopyChoice::ModelPrediction
        };
        check(d.chosen == expected, || {
            format!("row {}: got {:?}", i + 1, d.chosen)
        })?;
        let caption = if copy {
            "copied caption"
        } else {
            "model caption"
        };
        check(d.final_caption == caption, || {
            format!("row {}: caption {:?}", i + 1, d.final_caption)
        })?;
    }
    Ok("8/8 rows at threshold 0.35".into())
}

fn template_fidelity() -> Outcome {
    let cases: [(String, &str); 4] = [
        (
            render_bucket("best match").map_err(|e| e.to_string())?,
            "What does the image describe? The best match caption is",
        ),
        (
            render_retrieval(&["a dog on grass", "a puppy outside"], 200),
            "What does the image describe? a dog on grass; a puppy outside, the caption is",
        ),
        (
            render_combined("best match", &["a dog on grass"], 200).map_err(|e| e.to_string())?,
            "What does the image describe? a dog on grass, the best match caption is",
        ),
        (
            render_combined("best match", &[] as &[&str], 200).map_err(|e| e.to_string())?,
            "What does the image describe? The best match caption is",
        ),
    ];
    for (got, want) in &cases {
        check(got == want, || format!("{got:?} != {want:?}"))?;
    }
    Ok("4 templates byte-exact".into())
}

const PIPELINE: &str = r#"seed = 7

[[stage]]
kind = "clean"
input = "records.jsonl"
output = "clean.jsonl"
rejections = "rejections.jsonl"

[[stage]]
kind = "bucketize"
input = "clean.jsonl"
output = "bucketed.jsonl"
spec_output = "bucket-spec.json"

[[stage]]
kind = "retrieve"
queries = "bucketed.jsonl"
index = "clean.jsonl"
output = "hits.jsonl"
exclude_self = true

[[stage]]
kind = "prompt"
input = "bucketed.jsonl"
hits = "hits.jsonl"
mode = "combined"
knowledge_k = 4
output = "prompts.jsonl"

[[stage]]
kind = "consensus"
predictions = ["pred-model-00.jsonl", "pred-model-01.jsonl", "pred-model-02.jsonl", "pred-model-03.jsonl", "pred-model-04.jsonl"]
output = "fused.jsonl"
report = "consensus-report.jsonl"
"#;

fn run_once(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let corpus = synth::generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    synth::write(dir, &corpus).map_err(|e| e.to_string())?;
    let config = PipelineConfig::parse(PIPELINE).map_err(|e| e.to_string())?;
    run_pipeline(&config, dir).map_err(|e| e.to_string())?;
    std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.map_err(|e| e.to_string())?;
            let bytes = std::fs::read(e.path()).map_err(|e| e.to_string())?;
            Ok((e.file_name().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn pipeline_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let fa = run_once(a.path())?;
    let fb = run_once(b.path())?;
    let elapsed = start.elapsed();
    for name in [
        "clean.jsonl",
        "bucketed.jsonl",
        "hits.jsonl",
        "prompts.jsonl",
        "fused.jsonl",
        "manifest.jsonl",
    ] {
        check(fa.contains_key(name), || format!("missing {name}"))?;
    }
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    check(differing.is_empty() && fa.len() == fb.len(), || {
        format!("outputs differ: {differing:?}")
    })?;
    check(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "200 records, {} files byte-identical across 2 runs, {elapsed:.2?}",
        fa.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ITC loss value", itc_value),
        ("ITC gradient", itc_gradient),
        ("bucket edge cardinality", bucket_edges),
        ("retrieval exactness", retrieval_exact),
        ("CIDEr-D oracle", cider_oracle),
        ("consensus argmax", consensus_argmax),
        ("copy-paste gate", copy_paste_table),
        ("template fidelity", template_fidelity),
        ("pipeline determinism", pipeline_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
