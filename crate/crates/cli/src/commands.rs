use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use m6_core::corpus::{compute_stats, write_jsonl, write_stats, Blocklist, PerplexityFilter, Pipeline};
use m6_core::evalgen::{
    answer, eval_chid, eval_cmrc, eval_tnews, poem_generate, qa_prompt, vqa_prompt, ChidItem, CmrcItem, DecodeConfig, PoemConstraint,
    PoemSampling, TnewsItem,
};
use m6_core::model::Transformer;
use m6_core::patches::{split_patches, DEFAULT_SIDE};
use m6_core::pretrain::{train_loop, write_metrics_csv, DataPaths, ImageText, PretrainData, Task, TaskWeights, TrainConfig, Trainer};
use m6_core::tensor::AdamConfig;
use m6_core::tokenizer::{build_vocab, Vocab};
use m6_core::vqimage::{train_prior, TextToImage, VqConfig, VqModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::data::*;

fn config_value<T: Serialize>(c: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(c)?)
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    Vocab::load(path).map_err(|e| data_err(path, e))
}

fn load_model(path: &Path, vocab: &Vocab) -> CliResult<Transformer<f64>> {
    let model = Transformer::<f64>::load(path).map_err(|e| data_err(path, e))?;
    if model.config.vocab_size < vocab.len() {
        return Err(CliError::Data(format!(
            "model vocabulary of {} is smaller than the {}-token vocabulary file",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

fn write_metrics(path: &Path, rows: &[m6_core::pretrain::StepMetrics]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| data_err(path, e))?;
    write_metrics_csv(BufWriter::new(file), rows)?;
    Ok(())
}

pub fn clean(a: &CleanArgs) -> CliResult<()> {
    let blocklist = match &a.blocklist {
        Some(p) => Blocklist::load(p).map_err(|e| data_err(p, e))?,
        None if a.input.join("blocklist.txt").is_file() => Blocklist::load(&a.input.join("blocklist.txt"))?,
        None => Blocklist::default(),
    };
    let reference_path = a.reference.clone().unwrap_or_else(|| a.input.join("reference.txt"));
    let reference = read_to_string(&reference_path)?;
    let filter = PerplexityFilter::from_reference(&reference.lines().collect::<Vec<_>>()).map_err(|e| data_err(&reference_path, e))?;
    log::info!("perplexity threshold {:.4}", filter.threshold);
    let records = Pipeline { blocklist, filter: filter.clone() }.run_dir(&a.input).map_err(|e| data_err(&a.input, e))?;
    write_jsonl(&records, &a.out)?;
    write_stats(&compute_stats(&records), &a.stats)?;
    let accepted = records.iter().filter(|r| r.accepted()).count();
    println!("{accepted} of {} records accepted", records.len());
    write_manifest(&manifest_beside(&a.out), "clean", None, a, json!({ "perplexity_threshold": filter.threshold }))
}

pub fn build_vocab_cmd(a: &BuildVocabArgs) -> CliResult<()> {
    let passages = read_passages(&a.corpus)?;
    let vocab = build_vocab(&passages, a.size, a.min_freq).map_err(|e| data_err(&a.corpus, e))?;
    vocab.save(&a.out)?;
    println!("{} tokens", vocab.len());
    write_manifest(&manifest_beside(&a.out), "build-vocab", None, a, json!({ "tokens": vocab.len() }))
}

/// Truncate so that every pretraining sample built from the data fits.
fn load_pretrain_data(cfg: &TrainConfig, base: &Path, vocab: &Vocab) -> CliResult<PretrainData> {
    let max_len = cfg.model.max_len;
    let mut data = PretrainData::default();
    if let Some(text) = &cfg.data.text {
        let keep = max_len.saturating_sub(2) / 2;
        for p in read_passages(&base.join(text))? {
            let mut ids = vocab.encode(&p).ids;
            ids.truncate(keep);
            if !ids.is_empty() {
                data.texts.push(ids);
            }
        }
    }
    if let Some(captions) = &cfg.data.captions {
        let patch = patch_side(cfg.model.patch_dim)?;
        for (img, caption) in read_captions(&base.join(captions), DEFAULT_SIDE)? {
            let patches = split_patches(&img, patch)?;
            let keep = max_len.saturating_sub(patches.len() + 2) / 2;
            if keep == 0 {
                return Err(CliError::Data(format!("max_len {max_len} leaves no room for a caption after {} patches", patches.len())));
            }
            let mut tokens = vocab.encode(&caption).ids;
            tokens.truncate(keep);
            data.pairs.push(ImageText { patches, tokens });
        }
    }
    if data.texts.is_empty() && data.pairs.is_empty() {
        return Err(CliError::Data("training config names no usable text or captions".into()));
    }
    Ok(data)
}

fn run_training(
    cfg: TrainConfig,
    mut model: Transformer<f64>,
    data: &PretrainData,
    out: &Path,
) -> CliResult<(Transformer<f64>, Vec<m6_core::pretrain::StepMetrics>)> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg);
    let log = train_loop(&mut model, data, &mut trainer, steps, |m, _| {
        if m.step % 50 == 0 || m.step + 1 == steps {
            log::info!("step {} {} loss {:.4}", m.step, m.task.name(), m.loss);
        }
        Ok(true)
    })?;
    ensure_dir(out)?;
    model.save(&out.join("model.bin"))?;
    write_metrics(&out.join("metrics.csv"), &log)?;
    Ok((model, log))
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let vocab_path = cfg.data.vocab.clone().ok_or_else(|| data_err(&a.config, "data.vocab is not set"))?;
    let vocab = load_vocab(&base.join(vocab_path))?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    let data = load_pretrain_data(&cfg, base, &vocab)?;
    let model = Transformer::new(cfg.model.clone(), cfg.seed)?;
    let (_, log) = run_training(cfg.clone(), model, &data, &a.out)?;
    if let Some(last) = log.last() {
        println!("{} steps, final loss {:.4}", log.len(), last.loss);
    }
    write_manifest(&a.out.join("manifest.json"), "pretrain", Some(cfg.seed), a, config_value(&cfg)?)
}

pub fn finetune_caption(a: &FinetuneCaptionArgs) -> CliResult<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let patch = patch_side(model.config.patch_dim)?;
    let max_len = model.config.max_len;
    let mut data = PretrainData::default();
    for (img, caption) in read_captions(&a.captions, a.side)? {
        let patches = split_patches(&img, patch)?;
        let tokens = vocab.encode(&caption).ids;
        if patches.len() + tokens.len() + 1 > max_len {
            return Err(data_err(&a.captions, format!("caption {caption:?} does not fit max_len {max_len}")));
        }
        data.pairs.push(ImageText { patches, tokens });
    }
    let cfg = TrainConfig {
        model: model.config.clone(),
        task_weights: TaskWeights::only(Task::Caption),
        optimizer: AdamConfig { lr: a.lr, ..Default::default() },
        steps: a.steps,
        batch_size: a.batch_size,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
        data: DataPaths { vocab: Some(a.vocab.display().to_string()), captions: Some(a.captions.display().to_string()), text: None },
        ..Default::default()
    };
    let (_, log) = run_training(cfg.clone(), model, &data, &a.out)?;
    if let Some(last) = log.last() {
        println!("{} steps, final loss {:.4}", log.len(), last.loss);
    }
    write_manifest(&a.out.join("manifest.json"), "finetune-caption", Some(a.seed), a, config_value(&cfg)?)
}

fn decode_config(beam: usize, max_new_tokens: usize) -> DecodeConfig {
    if beam > 1 {
        DecodeConfig::beam(beam, max_new_tokens)
    } else {
        DecodeConfig::greedy(max_new_tokens)
    }
}

pub fn caption(a: &CaptionArgs) -> CliResult<()> {
    if a.decode.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let patches = image_patches(&a.image, a.side, model.config.patch_dim)?;
    let text = answer(&model, &vocab, "", Some(&patches), &decode_config(a.decode.beam, a.decode.max_new_tokens))?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &json!({ "caption": text }))?;
        write_manifest(&manifest_beside(out), "caption", None, a, json!({}))?;
    }
    Ok(())
}

pub fn t2i_train_vq(a: &T2iTrainVqArgs) -> CliResult<()> {
    let cfg: VqConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => VqConfig::default(),
    };
    cfg.validate()?;
    let images: Vec<_> = read_captions(&a.images, cfg.side)?.into_iter().map(|(img, _)| img).collect();
    if images.is_empty() {
        return Err(data_err(&a.images, "no images"));
    }
    let mut vq = VqModel::new(cfg.clone(), a.seed)?;
    let losses = vq.train(&images, a.steps, AdamConfig { lr: a.lr, ..Default::default() }, a.seed)?;
    ensure_dir(&a.out)?;
    vq.save(&a.out.join("vq.bin"))?;
    let mut csv = String::from("step,total,reconstruction,codebook,commitment\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{}\n", l.total, l.reconstruction, l.codebook, l.commitment));
    }
    std::fs::write(a.out.join("losses.csv"), csv)?;
    let mse = images.iter().map(|img| vq.reconstruct(img).and_then(|r| r.mse(img))).collect::<m6_core::Result<Vec<f64>>>()?;
    println!("reconstruction mse {:.6}", mse.iter().sum::<f64>() / mse.len() as f64);
    write_manifest(&a.out.join("manifest.json"), "t2i-train-vq", Some(a.seed), a, config_value(&cfg)?)
}

pub fn t2i_train_lm(a: &T2iTrainLmArgs) -> CliResult<()> {
    let vq = VqModel::load(&a.vq).map_err(|e| data_err(&a.vq, e))?;
    let vocab = load_vocab(&a.vocab)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig { steps: 500, batch_size: 4, warmup_steps: 20, ..Default::default() },
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut pairs = Vec::new();
    for (img, caption) in read_captions(&a.captions, vq.config.side)? {
        pairs.push((vocab.encode(&caption).ids, vq.encode(&img)?));
    }
    let longest = pairs.iter().map(|(t, g)| t.len() + g.ids.len() + 2).max().unwrap_or(0);
    cfg.model.vocab_size = vocab.len() + vq.config.codebook_size;
    cfg.model.max_len = cfg.model.max_len.max(longest);
    cfg.data = DataPaths { vocab: Some(a.vocab.display().to_string()), captions: Some(a.captions.display().to_string()), text: None };
    cfg.model.validate()?;
    let mut lm = Transformer::new(cfg.model.clone(), cfg.seed)?;
    let log = train_prior(&mut lm, &pairs, vocab.len(), &cfg)?;
    ensure_dir(&a.out)?;
    lm.save(&a.out.join("lm.bin"))?;
    write_metrics(&a.out.join("metrics.csv"), &log)?;
    if let Some(last) = log.last() {
        println!("{} steps, final loss {:.4}", log.len(), last.loss);
    }
    write_manifest(&a.out.join("manifest.json"), "t2i-train-lm", Some(cfg.seed), a, config_value(&cfg)?)
}

pub fn t2i_sample(a: &T2iSampleArgs) -> CliResult<()> {
    let vq = VqModel::load(&a.vq).map_err(|e| data_err(&a.vq, e))?;
    let lm = Transformer::<f64>::load(&a.lm).map_err(|e| data_err(&a.lm, e))?;
    let vocab = load_vocab(&a.vocab)?;
    let t2i = TextToImage { vq, lm, text_vocab: vocab.len() };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let grid = t2i.sample_grid(&vocab.encode(&a.text).ids, a.k, a.temperature, &mut rng)?;
    let image = t2i.vq.decode(&grid)?;
    ensure_dir(&a.out)?;
    image.save_ppm(&a.out.join("image.ppm"))?;
    write_json(&a.out.join("codes.json"), &grid)?;
    println!("{}", a.out.join("image.ppm").display());
    write_manifest(&a.out.join("manifest.json"), "t2i-sample", Some(a.seed), a, json!({ "text_vocab": vocab.len() }))
}

fn eval_inputs<T: for<'de> serde::Deserialize<'de>>(c: &EvalArgs) -> CliResult<(Vocab, Transformer<f64>, Vec<T>)> {
    let vocab = load_vocab(&c.vocab)?;
    let model = load_model(&c.model, &vocab)?;
    let items = read_jsonl(&c.data)?;
    Ok((vocab, model, items))
}

fn finish_eval<A: Serialize>(c: &EvalArgs, command: &str, seed: Option<u64>, args: &A, report: &m6_core::evalgen::EvalReport) -> CliResult<()> {
    write_json(&c.out, report)?;
    println!("{} {:.4} over {} items", report.metric, report.value, report.n);
    write_manifest(&manifest_beside(&c.out), command, seed, args, json!({}))
}

pub fn eval_tnews_cmd(a: &EvalTnewsArgs) -> CliResult<()> {
    let (vocab, model, items) = eval_inputs::<TnewsItem>(&a.common)?;
    let report = eval_tnews(&items, &model, &vocab, a.seed)?;
    finish_eval(&a.common, "eval-tnews", Some(a.seed), a, &report)
}

pub fn eval_chid_cmd(a: &EvalChidArgs) -> CliResult<()> {
    let (vocab, model, items) = eval_inputs::<ChidItem>(&a.common)?;
    let report = eval_chid(&items, &model, &vocab, a.window)?;
    finish_eval(&a.common, "eval-chid", None, a, &report)
}

pub fn eval_cmrc_cmd(a: &EvalCmrcArgs) -> CliResult<()> {
    let (vocab, model, items) = eval_inputs::<CmrcItem>(&a.common)?;
    let report = eval_cmrc(&items, &model, &vocab, &DecodeConfig::greedy(a.max_new_tokens))?;
    finish_eval(&a.common, "eval-cmrc", None, a, &report)
}

pub fn poem(a: &PoemArgs) -> CliResult<()> {
    if a.line_len != 5 && a.line_len != 7 {
        return Err(CliError::Usage(format!("--line-len must be 5 or 7, got {}", a.line_len)));
    }
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let constraint = PoemConstraint { line_len: a.line_len, ..Default::default() };
    let sampling = PoemSampling { k: a.k, temperature: a.temperature };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut poems = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let lines = poem_generate(&model, &vocab, &a.title, &constraint, &sampling, &mut rng)?;
        if i > 0 {
            println!();
        }
        println!("{}", lines.join("\n"));
        poems.push(lines);
    }
    if let Some(out) = &a.out {
        write_json(out, &json!({ "title": a.title, "poems": poems }))?;
        write_manifest(&manifest_beside(out), "poem", Some(a.seed), a, config_value(&constraint)?)?;
    }
    Ok(())
}

pub fn qa(a: &QaArgs) -> CliResult<()> {
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let (prompt, patches) = match &a.image {
        Some(img) => (vqa_prompt(&a.question)?, Some(image_patches(img, a.side, model.config.patch_dim)?)),
        None => (qa_prompt(&a.question)?, None),
    };
    let text = answer(&model, &vocab, &prompt, patches.as_ref(), &decode_config(a.beam, a.max_new_tokens))?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &json!({ "prompt": prompt, "answer": text }))?;
        write_manifest(&manifest_beside(out), "qa", None, a, json!({}))?;
    }
    Ok(())
}
