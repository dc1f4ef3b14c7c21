use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "m6", version, about = "Multimodal pretraining, generation and evaluation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean raw documents into records and per-source statistics
    Clean(CleanArgs),
    /// Build a subword vocabulary from text lines or cleaned records
    BuildVocab(BuildVocabArgs),
    /// Multitask pretraining from a JSON training config
    Pretrain(PretrainArgs),
    /// Continue training a checkpoint on image captioning only
    FinetuneCaption(FinetuneCaptionArgs),
    /// Caption one image with beam search
    Caption(CaptionArgs),
    /// Train the image code autoencoder
    T2iTrainVq(T2iTrainVqArgs),
    /// Train the code prior conditioned on captions
    T2iTrainLm(T2iTrainLmArgs),
    /// Generate an image from text
    T2iSample(T2iSampleArgs),
    /// Zero-shot news classification by candidate perplexity
    EvalTnews(EvalTnewsArgs),
    /// Zero-shot idiom cloze by candidate perplexity
    EvalChid(EvalChidArgs),
    /// Zero-shot reading comprehension scored by character F1
    EvalCmrc(EvalCmrcArgs),
    /// Generate classical poems under line-length constraints
    Poem(PoemArgs),
    /// Answer a question, optionally about an image
    Qa(QaArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CleanArgs {
    /// Directory of `*.jsonl` documents; image paths resolve against it
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// One term per line [default: <in>/blocklist.txt when present]
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    /// Clean text that sets the perplexity threshold [default: <in>/reference.txt]
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Training config; data paths in it are relative to this file
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneCaptionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSONL of `{"image": path, "caption": text}`
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CaptionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Also write `{"caption": ...}` here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct T2iTrainVqArgs {
    /// Caption JSONL whose images are the training set
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Autoencoder config JSON [default: built-in]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct T2iTrainLmArgs {
    #[arg(long)]
    pub vq: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config JSON; vocab size is set from the vocabulary and codebook
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct T2iSampleArgs {
    #[arg(long)]
    pub vq: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Task JSONL
    #[arg(long)]
    pub data: PathBuf,
    /// Results JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalTnewsArgs {
    #[command(flatten)]
    pub common: EvalArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalChidArgs {
    #[command(flatten)]
    pub common: EvalArgs,
    /// Token window centred on the blank
    #[arg(long, default_value_t = 256)]
    pub window: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCmrcArgs {
    #[command(flatten)]
    pub common: EvalArgs,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PoemArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub title: String,
    /// Characters per line: 5 or 7
    #[arg(long, default_value_t = 5)]
    pub line_len: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Also write the poems as JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct QaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
