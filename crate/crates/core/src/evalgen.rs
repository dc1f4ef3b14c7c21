//! Decoding, perplexity scoring and zero-shot evaluation.
//!
//! Everything here talks to a model through [`LanguageModel`], which only
//! has to return next-token log-probabilities at each causal position.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MultimodalSample, Task, Transformer, IGNORE};
use crate::patches::RawPatches;
use crate::tokenizer::{is_cjk, is_punctuation, TokenId, Vocab, BOS, EOS, MASK};

pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Log-probabilities of the next token at every causal position.
    fn log_probs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<f64>>>;
}

impl LanguageModel for Transformer<f64> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn log_probs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<f64>>> {
        self.causal_log_probs(sample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { strategy: Strategy::Greedy, beam_size: 5, k: 8, temperature: 1.0, max_new_tokens: 32 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig { strategy: Strategy::Greedy, max_new_tokens, ..Default::default() }
    }

    pub fn beam(beam_size: usize, max_new_tokens: usize) -> Self {
        DecodeConfig { strategy: Strategy::Beam, beam_size, max_new_tokens, ..Default::default() }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sample among the `k` most likely entries of `logp` after dividing by
/// `temperature`; `k = 1` or a non-positive temperature is greedy. Entries
/// at `-inf` are never drawn.
pub fn sample_top_k<R: Rng + ?Sized>(logp: &[f64], k: usize, temperature: f64, rng: &mut R) -> usize {
    let mut top = crate::moe::top_k(logp, k.max(1));
    top.retain(|&i| logp[i] > f64::NEG_INFINITY);
    if top.len() <= 1 || temperature <= 0.0 {
        return top.first().copied().unwrap_or_else(|| argmax(logp));
    }
    let max = logp[top[0]];
    let weights: Vec<f64> = top.iter().map(|&i| ((logp[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *top.last().expect("nonempty")
}

fn extended(prefix: &MultimodalSample, tokens: &[TokenId]) -> MultimodalSample {
    let mut s = prefix.clone();
    s.causal_text.extend_from_slice(tokens);
    s.targets.resize(s.len(), IGNORE);
    s
}

fn last_log_probs<M: LanguageModel + ?Sized>(model: &M, sample: &MultimodalSample) -> Result<Vec<f64>> {
    let mut lp = model.log_probs(sample)?;
    lp.pop().ok_or_else(|| Error::invalid("prefix has an empty causal segment"))
}

fn budget<M: LanguageModel + ?Sized>(model: &M, prefix: &MultimodalSample, max_new: usize) -> usize {
    max_new.min(model.max_len().saturating_sub(prefix.len()))
}

/// Continue the causal segment of `prefix` until `[EOS]` or the token
/// budget; returns the new tokens without `[EOS]`.
pub fn decode<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &MultimodalSample,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if prefix.causal_text.is_empty() {
        return Err(Error::invalid("prefix has an empty causal segment"));
    }
    match cfg.strategy {
        Strategy::Beam => beam_search(model, prefix, cfg.beam_size, cfg.max_new_tokens),
        Strategy::Greedy | Strategy::TopK => {
            let greedy = cfg.strategy == Strategy::Greedy;
            let mut out = Vec::new();
            for _ in 0..budget(model, prefix, cfg.max_new_tokens) {
                let lp = last_log_probs(model, &extended(prefix, &out))?;
                let next = if greedy { argmax(&lp) } else { sample_top_k(&lp, cfg.k, cfg.temperature, rng) } as TokenId;
                if next == EOS {
                    break;
                }
                out.push(next);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logp: f64,
}

impl Hypothesis {
    /// Mean log-probability per generated token, `[EOS]` included.
    fn score(&self, finished: bool) -> f64 {
        let n = self.tokens.len() + usize::from(finished);
        if n == 0 {
            0.0
        } else {
            self.logp / n as f64
        }
    }
}

/// Beam search ranked by length-normalised log-probability.
pub fn beam_search<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &MultimodalSample,
    beam_size: usize,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    if beam_size == 0 {
        return Err(Error::invalid("beam size 0"));
    }
    let steps = budget(model, prefix, max_new_tokens);
    let mut alive = vec![Hypothesis { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..steps {
        // (score, beam, token, logp, ends)
        let mut pool: Vec<(f64, usize, usize, f64, bool)> = Vec::new();
        for (b, h) in alive.iter().enumerate() {
            let lp = last_log_probs(model, &extended(prefix, &h.tokens))?;
            for t in crate::moe::top_k(&lp, beam_size) {
                let logp = h.logp + lp[t];
                // the new token or [EOS] counts towards the length either way
                let score = logp / (h.tokens.len() + 1) as f64;
                pool.push((score, b, t, logp, t as TokenId == EOS));
            }
        }
        pool.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        pool.truncate(beam_size);
        let mut next = Vec::new();
        for (_, b, t, logp, ends) in pool {
            let mut tokens = alive[b].tokens.clone();
            if ends {
                finished.push(Hypothesis { tokens, logp });
            } else {
                tokens.push(t as TokenId);
                next.push(Hypothesis { tokens, logp });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let best_finished = finished.iter().map(|h| (h.score(true), h)).max_by(|a, b| a.0.total_cmp(&b.0));
    let best_alive = alive.iter().map(|h| (h.score(false), h)).max_by(|a, b| a.0.total_cmp(&b.0));
    let best = match (best_finished, best_alive) {
        (Some(f), Some(a)) => {
            if a.0 > f.0 {
                a.1
            } else {
                f.1
            }
        }
        (Some(f), None) => f.1,
        (None, Some(a)) => a.1,
        (None, None) => return Ok(Vec::new()),
    };
    Ok(best.tokens.clone())
}

/// `exp` of the mean negative log-likelihood over target positions.
pub fn score_ppl<M: LanguageModel + ?Sized>(model: &M, sample: &MultimodalSample) -> Result<f64> {
    let targets = sample.causal_targets();
    if !targets.iter().any(|&t| t != IGNORE) {
        return Err(Error::invalid("sample has no target positions"));
    }
    let lp = model.log_probs(sample)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in lp.iter().zip(targets) {
        if t != IGNORE {
            total -= row[t as usize];
            count += 1;
        }
    }
    Ok((total / count as f64).exp())
}

/// Perplexities within this relative distance count as equal.
pub const PPL_TIE_TOLERANCE: f64 = 1e-9;

/// Index of the lowest perplexity; near-ties go to the earliest candidate.
pub fn argmin_ppl(ppls: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in ppls.iter().enumerate() {
        if p < ppls[best] * (1.0 - PPL_TIE_TOLERANCE) {
            best = i;
        }
    }
    best
}

fn causal_sample(masked: Vec<TokenId>, text: &[TokenId], patches: Option<&RawPatches>) -> MultimodalSample {
    let mut causal = vec![BOS];
    causal.extend_from_slice(text);
    let patches = patches.cloned().unwrap_or_else(|| RawPatches::empty(1));
    let mut targets = vec![IGNORE; patches.len() + masked.len()];
    targets.extend(text.iter().copied().chain([EOS]));
    MultimodalSample { patches, masked_text: masked, causal_text: causal, targets, task: Task::Prompt }
}

/// Per-run results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub per_item: Vec<f64>,
}

fn item_rng(seed: u64, stream: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(item as u128 * 1024);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TnewsItem {
    pub label: String,
    pub title: String,
    pub keywords: String,
    pub label_pool: Vec<String>,
}

pub fn tnews_prompt(title: &str, keywords: &str, label: &str) -> String {
    format!("标题:{title};关键词:{keywords};分类:{label}")
}

pub const TNEWS_REPEATS: usize = 3;

/// Predicted candidate index and the candidates of one TNEWS round.
pub fn tnews_round<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    item: &TnewsItem,
    model: &M,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<(usize, Vec<String>)> {
    let pool: Vec<&String> = item.label_pool.iter().filter(|l| **l != item.label).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if pool.len() < 3 {
        return Err(Error::invalid(format!("label pool for {:?} has {} distinct negatives", item.title, pool.len())));
    }
    let mut candidates: Vec<String> = pool.choose_multiple(rng, 3).map(|s| s.to_string()).collect();
    candidates.push(item.label.clone());
    candidates.shuffle(rng);
    let ppls = candidates
        .iter()
        .map(|label| {
            let ids = vocab.encode(&tnews_prompt(&item.title, &item.keywords, label)).ids;
            score_ppl(model, &causal_sample(Vec::new(), &ids, None))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((argmin_ppl(&ppls), candidates))
}

/// Four-way accuracy averaged over [`TNEWS_REPEATS`] rounds with fresh
/// negatives; `per_item` is each item's mean over rounds.
pub fn eval_tnews<M: LanguageModel + ?Sized>(items: &[TnewsItem], model: &M, vocab: &Vocab, seed: u64) -> Result<EvalReport> {
    let per_item = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut hits = 0.0;
            for r in 0..TNEWS_REPEATS {
                let mut rng = item_rng(seed, r as u64, i);
                let (pred, cands) = tnews_round(item, model, vocab, &mut rng)?;
                if cands[pred] == item.label {
                    hits += 1.0;
                }
            }
            Ok(hits / TNEWS_REPEATS as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report("accuracy", per_item))
}

fn report(metric: &str, per_item: Vec<f64>) -> EvalReport {
    let n = per_item.len();
    let value = if n == 0 { 0.0 } else { per_item.iter().sum::<f64>() / n as f64 };
    EvalReport { metric: metric.into(), value, n, per_item }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChidItem {
    /// Passage with the idiom removed.
    pub passage: String,
    /// Character offset of the blank in `passage`.
    pub blank_idx: usize,
    pub candidates: Vec<String>,
    /// Index of the correct candidate.
    pub gold: usize,
}

pub const CHID_WINDOW: usize = 256;
pub const CHID_PREFIX: &str = "成语填空:";

/// Token budget split around a blank: how many tokens to keep from the
/// left and right context so that `left + 1 + right <= window` with the
/// blank as central as the context allows.
pub fn centered_window(left: usize, right: usize, window: usize) -> (usize, usize) {
    let room = window.saturating_sub(1);
    let half = room / 2;
    let l = left.min(half.max(room.saturating_sub(right)));
    let r = right.min(room - l);
    (l, r)
}

/// Encoder and decoder samples for every candidate of one item.
pub fn chid_samples(item: &ChidItem, vocab: &Vocab, window: usize) -> Result<Vec<MultimodalSample>> {
    let chars: Vec<char> = item.passage.chars().collect();
    if item.blank_idx > chars.len() {
        return Err(Error::invalid(format!("blank at {} of a {}-character passage", item.blank_idx, chars.len())));
    }
    if item.candidates.is_empty() || item.gold >= item.candidates.len() {
        return Err(Error::invalid("candidate list does not contain the gold index"));
    }
    let left_text: String = chars[..item.blank_idx].iter().collect();
    let right_text: String = chars[item.blank_idx..].iter().collect();
    let left = vocab.encode(&left_text).ids;
    let right = vocab.encode(&right_text).ids;
    let prefix = vocab.encode(CHID_PREFIX).ids;
    let (l, r) = centered_window(left.len(), right.len(), window.saturating_sub(prefix.len()));
    let left = &left[left.len() - l..];
    let right = &right[..r];
    let mut masked = prefix;
    masked.extend_from_slice(left);
    masked.push(MASK);
    masked.extend_from_slice(right);
    Ok(item
        .candidates
        .iter()
        .map(|c| {
            let mut text = left.to_vec();
            text.extend(vocab.encode(c).ids);
            text.extend_from_slice(right);
            causal_sample(masked.clone(), &text, None)
        })
        .collect())
}

pub fn eval_chid<M: LanguageModel + ?Sized>(items: &[ChidItem], model: &M, vocab: &Vocab, window: usize) -> Result<EvalReport> {
    let per_item = items
        .par_iter()
        .map(|item| {
            let ppls = chid_samples(item, vocab, window)?.iter().map(|s| score_ppl(model, s)).collect::<Result<Vec<f64>>>()?;
            Ok(if argmin_ppl(&ppls) == item.gold { 1.0 } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report("accuracy", per_item))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmrcItem {
    pub paragraph: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// Character-multiset F1, whitespace ignored.
pub fn char_f1(generated: &str, reference: &str) -> f64 {
    let count = |s: &str| {
        let mut m: HashMap<char, usize> = HashMap::new();
        s.chars().filter(|c| !c.is_whitespace()).for_each(|c| *m.entry(c).or_default() += 1);
        m
    };
    let (g, r) = (count(generated), count(reference));
    let (ng, nr) = (g.values().sum::<usize>(), r.values().sum::<usize>());
    if ng == 0 || nr == 0 {
        return if ng == nr { 1.0 } else { 0.0 };
    }
    let common: usize = g.iter().map(|(c, n)| (*n).min(*r.get(c).unwrap_or(&0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / ng as f64;
    let rc = common as f64 / nr as f64;
    2.0 * p * rc / (p + rc)
}

/// Best F1 against any reference.
pub fn best_f1(generated: &str, references: &[String]) -> f64 {
    references.iter().map(|r| char_f1(generated, r)).fold(0.0, f64::max)
}

pub fn cmrc_prompt(paragraph: &str, question: &str) -> Result<String> {
    Ok(format!("{paragraph}问题:{}", qa_prompt(question)?))
}

/// Greedy answers to CMRC items with the prompt as encoder input.
pub fn eval_cmrc<M: LanguageModel + ?Sized>(items: &[CmrcItem], model: &M, vocab: &Vocab, cfg: &DecodeConfig) -> Result<EvalReport> {
    let per_item = items
        .par_iter()
        .map(|item| {
            let answer = answer(model, vocab, &cmrc_prompt(&item.paragraph, &item.question)?, None, cfg)?;
            Ok(best_f1(&answer, &item.answers))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(report("f1", per_item))
}

fn has_cjk(s: &str) -> bool {
    s.chars().any(is_cjk)
}

/// Question with a trailing question mark and the answer cue; Chinese
/// questions get the full-width forms.
pub fn qa_prompt(question: &str) -> Result<String> {
    let q = question.trim();
    if q.is_empty() {
        return Err(Error::invalid("empty question"));
    }
    let chinese = has_cjk(q);
    let mark = if chinese { "？" } else { "?" };
    let q = if q.ends_with('?') || q.ends_with('？') { q.to_string() } else { format!("{q}{mark}") };
    Ok(if chinese { format!("{q}回答:") } else { format!("{q} Answer:") })
}

pub fn vqa_prompt(question: &str) -> Result<String> {
    qa_prompt(question)
}

/// Decode an answer with `prompt` (and optional image) as encoder input.
pub fn answer<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    prompt: &str,
    patches: Option<&RawPatches>,
    cfg: &DecodeConfig,
) -> Result<String> {
    let mut prefix = causal_sample(vocab.encode(prompt).ids, &[], patches);
    prefix.targets.truncate(prefix.len());
    prefix.targets.iter_mut().for_each(|t| *t = IGNORE);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids = decode(model, &prefix, cfg, &mut rng)?;
    vocab.decode(&ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoemConstraint {
    /// Characters per line: 5 or 7.
    pub line_len: usize,
    pub min_lines: usize,
    pub max_lines: usize,
}

impl Default for PoemConstraint {
    fn default() -> Self {
        PoemConstraint { line_len: 5, min_lines: 4, max_lines: 16 }
    }
}

fn line_chars(line: &str) -> usize {
    line.chars().filter(|&c| is_cjk(c)).count()
}

/// At least `min_lines`, at most `max_lines`, an even count, and every line
/// exactly `line_len` characters.
pub fn poem_valid(lines: &[String], c: &PoemConstraint) -> bool {
    let n = lines.len();
    (c.line_len == 5 || c.line_len == 7)
        && n >= c.min_lines
        && n <= c.max_lines
        && n.is_multiple_of(2)
        && lines.iter().all(|l| line_chars(l) == c.line_len && l.chars().all(|ch| is_cjk(ch) || is_punctuation(ch)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoemSampling {
    pub k: usize,
    pub temperature: f64,
}

impl Default for PoemSampling {
    fn default() -> Self {
        PoemSampling { k: 8, temperature: 1.0 }
    }
}

fn token_classes(vocab: &Vocab) -> (Vec<bool>, Vec<bool>) {
    let single = |t: &str, f: fn(char) -> bool| {
        let mut it = t.chars();
        matches!((it.next(), it.next()), (Some(c), None) if f(c))
    };
    let chars = vocab.tokens().iter().map(|t| single(t, is_cjk)).collect();
    let puncts = vocab.tokens().iter().map(|t| single(t, |c| is_punctuation(c) && !c.is_ascii())).collect();
    (chars, puncts)
}

/// Sample a poem token by token under a constraint mask: characters until
/// the line is full, then punctuation; `[EOS]` only between lines once the
/// count is even and at least `min_lines`, and forced at `max_lines` or
/// once the context window is full.
pub fn poem_generate<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    vocab: &Vocab,
    title: &str,
    constraint: &PoemConstraint,
    sampling: &PoemSampling,
    rng: &mut R,
) -> Result<Vec<String>> {
    let c = constraint;
    if !(c.line_len == 5 || c.line_len == 7) || c.min_lines < 2 || c.max_lines < c.min_lines {
        return Err(Error::invalid(format!("poem constraint {c:?}")));
    }
    let (chars, puncts) = token_classes(vocab);
    if !chars.iter().any(|&x| x) || !puncts.iter().any(|&x| x) {
        return Err(Error::Exhausted("vocabulary lacks CJK characters or full-width punctuation".into()));
    }
    let prefix = causal_sample(vocab.encode(title).ids, &[], None);
    // the line cap shrinks to what the context window holds
    let room = model.max_len().saturating_sub(prefix.len() + 1) / (c.line_len + 1);
    let max_lines = c.max_lines.min(room);
    let max_lines = max_lines - max_lines % 2;
    if max_lines < c.min_lines {
        let len = prefix.len() + 1 + c.min_lines * (c.line_len + 1);
        return Err(Error::TooLong { len, max: model.max_len() });
    }
    let mut out: Vec<TokenId> = Vec::new();
    let mut lines: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut in_line = 0usize;
    loop {
        let at_boundary = in_line == 0;
        let may_end = at_boundary && lines.len() >= c.min_lines && lines.len().is_multiple_of(2);
        if at_boundary && lines.len() >= max_lines {
            break;
        }
        let mut lp = last_log_probs(model, &extended(&prefix, &out))?;
        for (t, p) in lp.iter_mut().enumerate() {
            let allowed = if t as TokenId == EOS {
                may_end
            } else if in_line < c.line_len {
                chars[t]
            } else {
                puncts[t]
            };
            if !allowed {
                *p = f64::NEG_INFINITY;
            }
        }
        let next = sample_top_k(&lp, sampling.k, sampling.temperature, rng) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        current.push_str(vocab.token(next).expect("id from vocab"));
        if in_line < c.line_len {
            in_line += 1;
        } else {
            lines.push(std::mem::take(&mut current));
            in_line = 0;
        }
    }
    debug_assert!(poem_valid(&lines, c));
    Ok(lines)
}
