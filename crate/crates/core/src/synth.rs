//! Seeded synthetic corpora for demos and end-to-end tests.
//!
//! Captions are drawn from a small grammar; embeddings are a per-object
//! concept direction plus uniform noise, so image/text similarity varies and
//! same-object records cluster. A fraction of captions is deliberately too
//! short, too long or non-English so the cleaning stage has work to do.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    save_predictions, save_records, save_references, PairRecord, PredictionEntry, PredictionFile,
    RecordSet,
};
use crate::error::Result;

const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "white", "black", "brown", "orange",
];
const OBJECTS: [&str; 10] = [
    "car", "dog", "cat", "bicycle", "boat", "horse", "bird", "train", "chair", "tree",
];
const RELATIONS: [&str; 5] = ["on", "near", "in front of", "behind", "beside"];
const PLACES: [&str; 8] = [
    "road", "beach", "park", "river", "house", "mountain", "street", "field",
];
const URLS: [&str; 3] = [
    "https://thumbx.shutterstock.com/img/",
    "https://editorial01.shutterstock.com/img/",
    "https://www.tscdn.net/img/",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub records: usize,
    pub dim: usize,
    pub models: usize,
    /// Records (from the front of the corpus) that also get model predictions.
    pub test_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            records: 200,
            dim: 32,
            models: 5,
            test_images: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: RecordSet,
    pub predictions: Vec<PredictionFile>,
    pub references: BTreeMap<String, Vec<String>>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Vec<f64> {
    unit(
        base.iter()
            .map(|b| b + rng.random_range(-noise..noise))
            .collect(),
    )
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn caption(rng: &mut ChaCha8Rng, object: &str) -> String {
    format!(
        "a {} {} {} the {}",
        pick(rng, &COLORS),
        object,
        pick(rng, &RELATIONS),
        pick(rng, &PLACES)
    )
}

/// Perturbs one content word of `base` so model outputs disagree slightly.
fn perturb(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut words: Vec<String> = base.split(' ').map(str::to_string).collect();
    if rng.random_bool(0.5) {
        let i = rng.random_range(0..words.len());
        words[i] = pick(rng, &COLORS).to_string();
    }
    words.join(" ")
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let concepts: Vec<Vec<f64>> = (0..OBJECTS.len())
        .map(|_| {
            unit(
                (0..config.dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        })
        .collect();

    let mut records = Vec::with_capacity(config.records);
    let mut references = BTreeMap::new();
    let mut objects = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let obj = rng.random_range(0..OBJECTS.len());
        let image = noisy(&mut rng, &concepts[obj], 0.4);
        let text = noisy(&mut rng, &concepts[obj], 0.6);
        let similarity: f64 = image.iter().zip(&text).map(|(a, b)| a * b).sum();
        let mut cap = caption(&mut rng, OBJECTS[obj]);
        match i % 17 {
            3 => cap = OBJECTS[obj].to_string(),
            7 => cap = [cap.as_str(); 8].join(" and "),
            11 => cap = "一只 在 公园里 的 动物".to_string(),
            _ => {}
        }
        let id = format!("img{i:05}");
        let mut r = PairRecord::new(id.clone(), cap, image);
        r.url = format!("{}{id}.jpg", URLS[i % URLS.len()]);
        r.text_embedding = Some(text);
        r.similarity = Some(similarity.clamp(-1.0, 1.0));
        references.insert(
            id,
            (0..3)
                .map(|_| caption(&mut rng, OBJECTS[obj]))
                .collect::<Vec<_>>(),
        );
        objects.push(obj);
        records.push(r);
    }
    let records = RecordSet::new(records)?;

    let test_images = config.test_images.min(records.len());
    let mut predictions = Vec::with_capacity(config.models);
    for m in 0..config.models {
        let mut file = PredictionFile::new(format!("model-{m:02}"));
        for (r, &obj) in records.iter().zip(&objects).take(test_images) {
            let base = &references[&r.id][0];
            file.insert(
                r.id.clone(),
                PredictionEntry {
                    caption: perturb(&mut rng, base),
                    caption_embedding: Some(noisy(&mut rng, &concepts[obj], 0.6)),
                },
            )?;
        }
        predictions.push(file);
    }
    Ok(SynthCorpus {
        records,
        predictions,
        references,
    })
}

/// Writes `records.jsonl`, `test.jsonl`, `references.jsonl` and one
/// `pred-<model>.jsonl` per model into `dir`.
pub fn write(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    save_records(&dir.join("records.jsonl"), &corpus.records)?;
    let test_ids: std::collections::BTreeSet<&String> = corpus
        .predictions
        .iter()
        .flat_map(|p| p.entries.keys())
        .collect();
    let test: Vec<PairRecord> = corpus
        .records
        .iter()
        .filter(|r| test_ids.contains(&r.id))
        .cloned()
        .collect();
    if !test.is_empty() {
        save_records(&dir.join("test.jsonl"), &RecordSet::new(test)?)?;
    }
    save_references(&dir.join("references.jsonl"), &corpus.references)?;
    for p in &corpus.predictions {
        save_predictions(&dir.join(format!("pred-{}.jsonl", p.model_id)), p)?;
    }
    Ok(())
}
