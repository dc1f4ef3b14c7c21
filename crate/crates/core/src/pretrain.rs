//! Pretraining objectives and the multitask training loop.
//!
//! Every objective produces a [`MultimodalSample`] whose causal segment is
//! `[BOS] + text` and whose targets are `text + [EOS]`, so all four tasks
//! train the same next-token head.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::patches::RawPatches;
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::tokenizer::{TokenId, BOS, EOS, MASK};

pub use crate::model::{MultimodalSample, Task, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub mask_ratio: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { mask_ratio: 0.15 }
    }
}

impl DenoiseConfig {
    /// `max(1, round(ratio · len))`, never more than `len`.
    pub fn span_len(&self, len: usize) -> usize {
        ((self.mask_ratio * len as f64).round() as usize).clamp(1, len)
    }
}

fn causal_parts(tokens: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut causal = Vec::with_capacity(tokens.len() + 1);
    causal.push(BOS);
    causal.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    (causal, targets)
}

fn assemble(patches: RawPatches, masked_text: Vec<TokenId>, tokens: &[TokenId], task: Task) -> MultimodalSample {
    let (causal_text, causal_targets) = causal_parts(tokens);
    let mut targets = vec![IGNORE; patches.len() + masked_text.len()];
    targets.extend(causal_targets);
    MultimodalSample { patches, masked_text, causal_text, targets, task }
}

/// `tokens` with `tokens[start..start + len]` replaced by one `[MASK]`.
pub fn mask_span(tokens: &[TokenId], start: usize, len: usize) -> Result<Vec<TokenId>> {
    if len == 0 || start + len > tokens.len() {
        return Err(Error::invalid(format!("span {start}+{len} of {} tokens", tokens.len())));
    }
    let mut out = Vec::with_capacity(tokens.len() - len + 1);
    out.extend_from_slice(&tokens[..start]);
    out.push(MASK);
    out.extend_from_slice(&tokens[start + len..]);
    Ok(out)
}

fn random_span<R: Rng + ?Sized>(len: usize, cfg: &DenoiseConfig, rng: &mut R) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::invalid(format!("denoising needs at least 2 tokens, got {len}")));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {}", cfg.mask_ratio)));
    }
    let span = cfg.span_len(len);
    Ok((rng.random_range(0..=len - span), span))
}

/// Text denoising with the span at a given place.
pub fn make_denoising_at(tokens: &[TokenId], start: usize, len: usize) -> Result<MultimodalSample> {
    if tokens.len() < 2 {
        return Err(Error::invalid(format!("denoising needs at least 2 tokens, got {}", tokens.len())));
    }
    let masked = mask_span(tokens, start, len)?;
    Ok(assemble(RawPatches::empty(0), masked, tokens, Task::Denoise))
}

/// Text denoising: one uniformly placed span collapses into a single
/// `[MASK]` and the whole sequence is the target.
pub fn make_denoising<R: Rng + ?Sized>(tokens: &[TokenId], cfg: &DenoiseConfig, rng: &mut R) -> Result<MultimodalSample> {
    let (start, span) = random_span(tokens.len(), cfg, rng)?;
    make_denoising_at(tokens, start, span)
}

/// Plain language modelling: empty prefix.
pub fn make_lm(tokens: &[TokenId]) -> Result<MultimodalSample> {
    if tokens.is_empty() {
        return Err(Error::invalid("language modelling needs at least 1 token"));
    }
    Ok(assemble(RawPatches::empty(0), Vec::new(), tokens, Task::Lm))
}

/// Image captioning: patches as prefix, no masked text.
pub fn make_caption(patches: &RawPatches, tokens: &[TokenId]) -> Result<MultimodalSample> {
    if patches.is_empty() {
        return Err(Error::invalid("captioning needs at least one patch"));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("empty caption"));
    }
    Ok(assemble(patches.clone(), Vec::new(), tokens, Task::Caption))
}

/// Captioning with a span-masked copy of the text added to the prefix.
pub fn make_mm_denoise<R: Rng + ?Sized>(
    patches: &RawPatches,
    tokens: &[TokenId],
    cfg: &DenoiseConfig,
    rng: &mut R,
) -> Result<MultimodalSample> {
    if patches.is_empty() {
        return Err(Error::invalid("multimodal denoising needs at least one patch"));
    }
    let (start, span) = random_span(tokens.len(), cfg, rng)?;
    let masked = mask_span(tokens, start, span)?;
    Ok(assemble(patches.clone(), masked, tokens, Task::MmDenoise))
}

/// Relative frequency of each pretraining task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskWeights {
    pub denoise: f64,
    pub lm: f64,
    pub caption: f64,
    pub mm_denoise: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { denoise: 1.0, lm: 1.0, caption: 1.0, mm_denoise: 1.0 }
    }
}

impl TaskWeights {
    pub fn only(task: Task) -> Self {
        let mut w = TaskWeights { denoise: 0.0, lm: 0.0, caption: 0.0, mm_denoise: 0.0 };
        match task {
            Task::Denoise => w.denoise = 1.0,
            Task::Lm => w.lm = 1.0,
            Task::Caption => w.caption = 1.0,
            Task::MmDenoise => w.mm_denoise = 1.0,
            Task::TextToImage | Task::Prompt => {}
        }
        w
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.denoise, self.lm, self.caption, self.mm_denoise]
    }
}

/// Draw a task with probability proportional to its weight.
pub fn sample_task<R: Rng + ?Sized>(weights: &TaskWeights, rng: &mut R) -> Result<Task> {
    let w = weights.as_array();
    if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(format!("task weights {w:?}")));
    }
    let dist = WeightedIndex::new(w).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Task::PRETRAIN[dist.sample(rng)])
}

/// One image with its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageText {
    pub patches: RawPatches,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainData {
    pub texts: Vec<Vec<TokenId>>,
    pub pairs: Vec<ImageText>,
}

impl PretrainData {
    /// Whether at least one example can build a sample of `task`.
    pub fn supports(&self, task: Task) -> bool {
        match task {
            Task::Denoise => self.texts.iter().any(|t| t.len() >= 2),
            Task::Lm => self.texts.iter().any(|t| !t.is_empty()),
            Task::Caption => self.pairs.iter().any(|p| !p.tokens.is_empty() && !p.patches.is_empty()),
            Task::MmDenoise => self.pairs.iter().any(|p| p.tokens.len() >= 2 && !p.patches.is_empty()),
            Task::TextToImage | Task::Prompt => false,
        }
    }

    fn candidates(&self, task: Task) -> Vec<usize> {
        match task {
            Task::Denoise => (0..self.texts.len()).filter(|&i| self.texts[i].len() >= 2).collect(),
            Task::Lm => (0..self.texts.len()).filter(|&i| !self.texts[i].is_empty()).collect(),
            Task::Caption => (0..self.pairs.len()).filter(|&i| !self.pairs[i].tokens.is_empty()).collect(),
            Task::MmDenoise => (0..self.pairs.len()).filter(|&i| self.pairs[i].tokens.len() >= 2).collect(),
            Task::TextToImage | Task::Prompt => Vec::new(),
        }
    }

    /// `size` samples of `task`, examples drawn uniformly with replacement.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        task: Task,
        size: usize,
        cfg: &DenoiseConfig,
        rng: &mut R,
    ) -> Result<Vec<MultimodalSample>> {
        let pool = self.candidates(task);
        if pool.is_empty() {
            return Err(Error::Exhausted(format!("no data for task {}", task.name())));
        }
        (0..size)
            .map(|_| {
                let i = pool[rng.random_range(0..pool.len())];
                match task {
                    Task::Denoise => make_denoising(&self.texts[i], cfg, rng),
                    Task::Lm => make_lm(&self.texts[i]),
                    Task::Caption => make_caption(&self.pairs[i].patches, &self.pairs[i].tokens),
                    Task::MmDenoise => make_mm_denoise(&self.pairs[i].patches, &self.pairs[i].tokens, cfg, rng),
                    Task::TextToImage | Task::Prompt => unreachable!("not a pretraining task"),
                }
            })
            .collect()
    }
}

/// Where a training run reads its inputs; recorded for the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub vocab: Option<String>,
    /// Cleaned corpus JSONL or plain text, one passage per line.
    pub text: Option<String>,
    /// JSONL of `{"image": path, "caption": text}`.
    pub captions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task_weights: TaskWeights,
    pub denoise: DenoiseConfig,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Linear learning-rate ramp length.
    pub warmup_steps: usize,
    pub seed: u64,
    pub data: DataPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            task_weights: TaskWeights::default(),
            denoise: DenoiseConfig::default(),
            optimizer: AdamConfig::default(),
            steps: 1000,
            batch_size: 8,
            warmup_steps: 100,
            seed: 0,
            data: DataPaths::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let ramp = if self.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) };
        self.optimizer.lr * ramp
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub aux_loss: f64,
    pub drop_rate: f64,
    pub expert_load: Vec<usize>,
}

/// Forward, backward and one Adam update on `batch`.
pub fn train_step(
    model: &mut Transformer<f64>,
    adam: &mut Adam<f64>,
    batch: &[MultimodalSample],
    lr: f64,
) -> Result<(f64, f64, f64, Vec<usize>)> {
    let refs: Vec<&MultimodalSample> = batch.iter().collect();
    let (grads, ce, aux, drop, load) = {
        let mut tape = Tape::with_params(&model.store);
        let loss = model.loss_on(&mut tape, &refs)?;
        let grads = tape.backward(loss.total)?;
        (grads, loss.cross_entropy, loss.aux_loss, loss.drop_rate(), loss.expert_load())
    };
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam.step_with_lr(&mut model.store, lr);
    Ok((ce, aux, drop, load))
}

/// Mean cross-entropy of `samples` without updating anything.
pub fn eval_loss(model: &Transformer<f64>, samples: &[MultimodalSample]) -> Result<f64> {
    let refs: Vec<&MultimodalSample> = samples.iter().collect();
    let mut tape = Tape::with_params(&model.store);
    Ok(model.loss_on(&mut tape, &refs)?.cross_entropy)
}

/// Multitask trainer; all randomness comes from the config seed.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam<f64>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Trainer { adam: Adam::new(config.optimizer), config, rng, step: 0 }
    }

    /// Fresh model initialised from the config seed.
    pub fn init_model(&self) -> Result<Transformer<f64>> {
        Transformer::new(self.config.model.clone(), self.config.seed)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draw a task the data can serve; a task lacking its modality is
    /// redrawn.
    fn draw_task(&mut self, data: &PretrainData) -> Result<Task> {
        let w = self.config.task_weights;
        let usable = Task::PRETRAIN.iter().zip(w.as_array()).any(|(&t, x)| x > 0.0 && data.supports(t));
        if !usable {
            return Err(Error::Exhausted("no weighted task is supported by the data".into()));
        }
        loop {
            let task = sample_task(&w, &mut self.rng)?;
            if data.supports(task) {
                return Ok(task);
            }
            log::warn!("step {}: no data for {}, redrawing", self.step, task.name());
        }
    }

    pub fn step(&mut self, model: &mut Transformer<f64>, data: &PretrainData) -> Result<StepMetrics> {
        let task = self.draw_task(data)?;
        let batch = data.batch(task, self.config.batch_size, &self.config.denoise, &mut self.rng)?;
        let lr = self.config.lr_at(self.step);
        let (loss, aux_loss, drop_rate, expert_load) = train_step(model, &mut self.adam, &batch, lr)?;
        let m = StepMetrics { step: self.step, task, loss, aux_loss, drop_rate, expert_load };
        self.step += 1;
        Ok(m)
    }
}

/// Run `steps` steps, handing every row to `on_step`; stops early when it
/// returns `false`.
pub fn train_loop(
    model: &mut Transformer<f64>,
    data: &PretrainData,
    trainer: &mut Trainer,
    steps: usize,
    mut on_step: impl FnMut(&StepMetrics, &Transformer<f64>) -> Result<bool>,
) -> Result<Vec<StepMetrics>> {
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let m = trainer.step(model, data)?;
        let go_on = on_step(&m, model)?;
        log.push(m);
        if !go_on {
            break;
        }
    }
    Ok(log)
}

pub const METRICS_HEADER: &str = "step,task,loss,aux_loss,drop_rate,expert_load";

/// CSV with [`METRICS_HEADER`]; expert loads are `;`-separated.
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let load: Vec<String> = r.expert_load.iter().map(usize::to_string).collect();
        writeln!(out, "{},{},{},{},{},{}", r.step, r.task.name(), r.loss, r.aux_loss, r.drop_rate, load.join(";"))?;
    }
    Ok(())
}
