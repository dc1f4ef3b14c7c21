//! `m6`: one entry point for cleaning, training, generation and evaluation.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data error.
//! `M6_THREADS` caps the worker pool used by evaluation and cleaning.

mod args;
mod commands;
mod data;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use data::{CliError, CliResult};

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("M6_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("M6_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::Clean(a) => commands::clean(a),
        Command::BuildVocab(a) => commands::build_vocab_cmd(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::FinetuneCaption(a) => commands::finetune_caption(a),
        Command::Caption(a) => commands::caption(a),
        Command::T2iTrainVq(a) => commands::t2i_train_vq(a),
        Command::T2iTrainLm(a) => commands::t2i_train_lm(a),
        Command::T2iSample(a) => commands::t2i_sample(a),
        Command::EvalTnews(a) => commands::eval_tnews_cmd(a),
        Command::EvalChid(a) => commands::eval_chid_cmd(a),
        Command::EvalCmrc(a) => commands::eval_cmrc_cmd(a),
        Command::Poem(a) => commands::poem(a),
        Command::Qa(a) => commands::qa(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
