use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use capkit::bucketizer;
use capkit::cider::{CiderParams, CiderVariant, DEFAULT_MAX_N, DEFAULT_SCALE, DEFAULT_SIGMA};
use capkit::ensembler::{ConsensusMode, DEFAULT_COPY_THRESHOLD};
use capkit::pipeline::{explain, run_pipeline, PipelineConfig, StageOp};
use capkit::retriever;
use capkit::simcore::DEFAULT_TAU;
use capkit::synth::{self, SynthConfig};
use capkit::templater::{PromptMode, DEFAULT_MAX_KNOWLEDGE_CHARS};

#[derive(Parser)]
#[command(
    name = "capkit",
    version,
    about = "Caption data curation, prompting, scoring and ensembling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign similarity buckets and write the bucket spec sidecar.
    Bucketize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        spec_output: PathBuf,
        #[arg(long, default_value_t = bucketizer::DEFAULT_BUCKETS)]
        buckets: usize,
        /// Bucket labels, lowest bucket first (comma separated).
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long, default_value_t = bucketizer::DEFAULT_EDGE_FRACTION)]
        edge_fraction: f64,
    },
    /// Exact top-k image retrieval.
    Retrieve {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 30)]
        top_k: usize,
        #[arg(long)]
        url_filter: Option<String>,
        #[arg(long)]
        exclude_self: bool,
    },
    /// Drop too short, too long and non-English captions.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        rejections: Option<PathBuf>,
        #[arg(long, default_value_t = retriever::DEFAULT_MIN_TOKENS)]
        min_tokens: usize,
        #[arg(long, default_value_t = retriever::DEFAULT_MAX_TOKENS)]
        max_tokens: usize,
        #[arg(long, default_value_t = retriever::DEFAULT_ASCII_RATIO)]
        ascii_ratio: f64,
    },
    /// Prompt construction.
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
    /// Caption metrics.
    Score {
        #[command(subcommand)]
        command: ScoreCommand,
    },
    /// Model ensembling.
    Ensemble {
        #[command(subcommand)]
        command: EnsembleCommand,
    },
    /// Image-text contrastive loss over a record file.
    ItcLoss {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run a pipeline config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the plan for a pipeline config without running it.
    Explain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a seeded synthetic corpus and a demo pipeline config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        records: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        models: usize,
        #[arg(long, default_value_t = 40)]
        test_images: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Bucket,
    Retrieval,
    Combined,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bucket => PromptMode::Bucket,
            ModeArg::Retrieval => PromptMode::Retrieval,
            ModeArg::Combined => PromptMode::Combined,
        }
    }
}

#[derive(Subcommand)]
enum PromptCommand {
    Build {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Hit lists from `retrieve`.
        #[arg(long)]
        hits: Option<PathBuf>,
        /// Bucket spec whose top label is used for every record.
        #[arg(long)]
        inference_spec: Option<PathBuf>,
        #[arg(long)]
        knowledge_k: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_MAX_KNOWLEDGE_CHARS)]
        max_chars: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    CiderD,
    Cider,
}

#[derive(Args, Clone, Copy)]
struct CiderArgs {
    #[arg(long, value_enum, default_value = "cider-d")]
    variant: VariantArg,
    #[arg(long, default_value_t = DEFAULT_MAX_N)]
    max_n: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: f64,
}

impl From<CiderArgs> for CiderParams {
    fn from(a: CiderArgs) -> Self {
        CiderParams {
            max_n: a.max_n,
            sigma: a.sigma,
            scale: a.scale,
            variant: match a.variant {
                VariantArg::CiderD => CiderVariant::CiderD,
                VariantArg::Cider => CiderVariant::Cider,
            },
        }
    }
}

#[derive(Subcommand)]
enum ScoreCommand {
    Cider {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Where to write the JSON score line (stdout summary is always printed).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        cider: CiderArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConsensusArg {
    PairwiseMean,
    MultiReference,
}

#[derive(Subcommand)]
enum EnsembleCommand {
    CopyPaste {
        #[arg(long, default_value_t = DEFAULT_COPY_THRESHOLD)]
        threshold: f64,
        /// Training records searched for near-duplicate images.
        #[arg(long)]
        train_index: PathBuf,
        /// Test image records.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    Consensus {
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Reference file whose groups ground the IDF instead of the candidates.
        #[arg(long)]
        idf_corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pairwise-mean")]
        mode: ConsensusArg,
        #[command(flatten)]
        cider: CiderArgs,
    },
}

fn run_stage(op: StageOp) -> Result<()> {
    let summary = op
        .execute(Path::new(""))
        .with_context(|| format!("{} failed", op.kind()))?;
    println!("{}: {summary}", op.kind());
    Ok(())
}

const DEMO_CONFIG: &str = r#"seed = 7
manifest = "manifest.jsonl"

[[stage]]
kind = "clean"
phase = "coarse-tuning"
input = "records.jsonl"
output = "clean.jsonl"
rejections = "rejections.jsonl"

[[stage]]
kind = "bucketize"
phase = "pre-training"
input = "clean.jsonl"
output = "bucketed.jsonl"
spec_output = "bucket-spec.json"

[[stage]]
kind = "retrieve"
phase = "coarse-tuning"
queries = "bucketed.jsonl"
index = "clean.jsonl"
output = "hits.jsonl"
top_k = 30
exclude_self = true

[[stage]]
kind = "prompt"
phase = "fine-tuning"
input = "bucketed.jsonl"
hits = "hits.jsonl"
mode = "combined"
knowledge_k = 4
output = "prompts.jsonl"

[[stage]]
kind = "consensus"
phase = "model-ensemble"
predictions = ["pred-model-00.jsonl", "pred-model-01.jsonl", "pred-model-02.jsonl", "pred-model-03.jsonl", "pred-model-04.jsonl"]
output = "fused.jsonl"
report = "consensus-report.jsonl"

[[stage]]
kind = "score"
candidates = "fused.jsonl"
references = "references.jsonl"
output = "score.jsonl"
"#;

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Bucketize {
            input,
            output,
            spec_output,
            buckets,
            labels,
            edge_fraction,
        } => run_stage(StageOp::Bucketize {
            input,
            output,
            spec_output,
            buckets,
            labels,
            edge_fraction,
        }),
        Command::Retrieve {
            queries,
            index,
            output,
            top_k,
            url_filter,
            exclude_self,
        } => run_stage(StageOp::Retrieve {
            queries,
            index,
            output,
            top_k,
            url_filter,
            exclude_self,
        }),
        Command::Clean {
            input,
            output,
            rejections,
            min_tokens,
            max_tokens,
            ascii_ratio,
        } => run_stage(StageOp::Clean {
            input,
            output,
            rejections,
            min_tokens,
            max_tokens,
            ascii_ratio,
        }),
        Command::Prompt {
            command:
                PromptCommand::Build {
                    mode,
                    input,
                    output,
                    hits,
                    inference_spec,
                    knowledge_k,
                    max_chars,
                },
        } => run_stage(StageOp::Prompt {
            input,
            output,
            mode: mode.into(),
            hits,
            inference_spec,
            knowledge_k,
            max_chars,
        }),
        Command::Score {
            command:
                ScoreCommand::Cider {
                    candidates,
                    references,
                    output,
                    cider,
                },
        } => {
            let params: CiderParams = cider.into();
            let preds = capkit::corpus::load_predictions(&candidates)?;
            let refs = capkit::corpus::load_references(&references)?;
            let score = capkit::cider::corpus_cider(&preds.captions(), &refs, &params)?;
            for (image, s) in &score.per_image {
                println!("{image}\t{s:.6}");
            }
            println!("corpus\t{:.6}", score.mean);
            if let Some(out) = output {
                run_stage(StageOp::Score {
                    candidates,
                    references,
                    output: out,
                    cider: params,
                })?;
            }
            Ok(())
        }
        Command::Ensemble { command } => match command {
            EnsembleCommand::CopyPaste {
                threshold,
                train_index,
                test,
                predictions,
                output,
                report,
            } => run_stage(StageOp::CopyPaste {
                test,
                train: train_index,
                predictions,
                output,
                report,
                threshold,
            }),
            EnsembleCommand::Consensus {
                predictions,
                output,
                report,
                idf_corpus,
                mode,
                cider,
            } => run_stage(StageOp::Consensus {
                predictions,
                output,
                report,
                idf_corpus,
                mode: match mode {
                    ConsensusArg::PairwiseMean => ConsensusMode::PairwiseMean,
                    ConsensusArg::MultiReference => ConsensusMode::MultiReference,
                },
                cider: cider.into(),
            }),
        },
        Command::ItcLoss {
            input,
            output,
            tau,
            batch_size,
        } => run_stage(StageOp::ItcLoss {
            input,
            output,
            tau,
            batch_size,
        }),
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new(""));
            let manifest = run_pipeline(&cfg, base)?;
            for e in &manifest.entries {
                println!(
                    "{}. {} [{}]: {}",
                    e.stage,
                    e.kind,
                    e.phase.as_str(),
                    e.summary
                );
            }
            println!("manifest written to {}", base.join(&cfg.manifest).display());
            Ok(())
        }
        Command::Explain { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = PipelineConfig::parse(&text)?;
            print!("{}", explain(&cfg));
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            records,
            dim,
            models,
            test_images,
        } => {
            let corpus = synth::generate(&SynthConfig {
                seed,
                records,
                dim,
                models,
                test_images,
            })?;
            synth::write(&out, &corpus)?;
            std::fs::write(out.join("pipeline.toml"), demo_config(&corpus))?;
            println!(
                "wrote {} records and {} prediction files to {}",
                corpus.records.len(),
                corpus.predictions.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn demo_config(corpus: &synth::SynthCorpus) -> String {
    let preds = corpus
        .predictions
        .iter()
        .map(|p| format!("\"pred-{}.jsonl\"", p.model_id))
        .collect::<Vec<_>>()
        .join(", ");
    DEMO_CONFIG
        .replace(
            "[\"pred-model-00.jsonl\", \"pred-model-01.jsonl\", \"pred-model-02.jsonl\", \"pred-model-03.jsonl\", \"pred-model-04.jsonl\"]",
            &format!("[{preds}]"),
        )
}
