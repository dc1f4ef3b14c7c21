//! Unified transformer over visual, masked-text and causal-text segments.
//!
//! One stack serves as encoder and decoder: the attention mask, not the
//! architecture, decides which positions see which. Blocks are pre-norm
//! residual (`x + attn(ln(x))`, then `x + ffn(ln(x))`) and the output
//! projection is the token embedding itself.

mod mask;
mod sample;

pub use mask::{build_mask, AttentionMask, SegmentLayout, SEGMENT_CAUSAL, SEGMENT_MASKED, SEGMENT_VISUAL};
pub use sample::{MultimodalSample, Task, IGNORE};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ffn_on, ExpertIds, MoeLayer, RoutingStats};
use crate::scalar::Scalar;
use crate::tensor::{load_params, log_softmax_row, save_params, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// 1 means a plain dense feed-forward layer.
    pub n_experts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Flattened patch length: `patch² · 3`.
    pub patch_dim: usize,
    pub ffn_mult: usize,
    pub moe_top_k: usize,
    pub capacity_factor: f64,
    pub aux_loss_coef: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            n_experts: 1,
            vocab_size: 64,
            max_len: 128,
            patch_dim: 192,
            ffn_mult: 4,
            moe_top_k: 2,
            capacity_factor: 1.25,
            aux_loss_coef: 0.01,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.n_heads));
        }
        if self.n_experts == 0 || self.moe_top_k == 0 {
            return bad(format!("{} experts with top-{}", self.n_experts, self.moe_top_k));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.patch_dim == 0 || self.ffn_mult == 0 {
            return bad("vocab_size, max_len, patch_dim and ffn_mult must be positive".into());
        }
        if !(self.capacity_factor > 0.0) || !(self.aux_loss_coef >= 0.0) || !(self.init_std > 0.0) {
            return bad("capacity_factor and init_std must be positive, aux_loss_coef non-negative".into());
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Parameters one expert adds: its feed-forward weights plus its gate
    /// column.
    pub fn per_expert_size(&self) -> usize {
        ExpertIds::size(self.d_model, self.hidden()) + self.d_model
    }

    /// Exact number of scalar parameters, counting every expert and the
    /// tied output projection once.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.vocab_size + 3 + self.max_len) * d + self.patch_dim * d;
        let attention = 4 * d * d + 4 * d;
        let norms = 4 * d;
        let ffn = if self.n_experts == 1 {
            ExpertIds::size(d, self.hidden())
        } else {
            self.n_experts * self.per_expert_size()
        };
        embeddings + self.n_layers * (attention + norms + ffn) + 2 * d
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![d], S::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, S::of(LN_EPS))
    }
}

#[derive(Debug, Clone)]
enum Ffn {
    Dense(ExpertIds),
    Moe(MoeLayer),
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: Norm,
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: Norm,
    ffn: Ffn,
}

/// Result of a forward pass over a packed batch.
pub struct Forward {
    /// Final-norm hidden states, `[Σ len, d_model]`.
    pub hidden: Var,
    /// Mean load-balancing loss over MoE layers.
    pub aux_loss: Option<Var>,
    pub routing: Vec<RoutingStats>,
    /// Row offset of each sample in `hidden`.
    pub offsets: Vec<usize>,
}

/// Training objective of one batch.
pub struct Loss {
    /// Cross-entropy plus the weighted auxiliary loss.
    pub total: Var,
    pub cross_entropy: f64,
    pub aux_loss: f64,
    pub routing: Vec<RoutingStats>,
}

impl Loss {
    pub fn drop_rate(&self) -> f64 {
        if self.routing.is_empty() {
            0.0
        } else {
            self.routing.iter().map(RoutingStats::drop_rate).sum::<f64>() / self.routing.len() as f64
        }
    }

    /// Accepted slots per expert, summed over layers.
    pub fn expert_load(&self) -> Vec<usize> {
        let mut load = Vec::new();
        for r in &self.routing {
            load.resize(load.len().max(r.load.len()), 0);
            load.iter_mut().zip(&r.load).for_each(|(a, b)| *a += b);
        }
        load
    }
}

#[derive(Debug, Clone)]
pub struct Transformer<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    token: ParamId,
    segment: ParamId,
    position: ParamId,
    patch: ParamId,
    layers: Vec<Layer>,
    final_norm: Norm,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    version: u32,
    model: ModelConfig,
}

/// Path of the JSON config written next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl<S: Scalar> Transformer<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let (d, std) = (config.d_model, config.init_std);
        let mut store = ParamStore::new();
        let token = store.add("embed.token", Tensor::randn(vec![config.vocab_size, d], std, rng));
        let segment = store.add("embed.segment", Tensor::randn(vec![3, d], std, rng));
        let position = store.add("embed.position", Tensor::randn(vec![config.max_len, d], std, rng));
        let patch = store.add("embed.patch", Tensor::randn(vec![config.patch_dim, d], std, rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let ln1 = Norm::register(&mut store, &format!("{p}.ln1"), d);
            let wqkv = store.add(format!("{p}.attn.wqkv"), Tensor::randn(vec![d, 3 * d], std, rng));
            let bqkv = store.add(format!("{p}.attn.bqkv"), Tensor::zeros(vec![3 * d]));
            let wo = store.add(format!("{p}.attn.wo"), Tensor::randn(vec![d, d], std, rng));
            let bo = store.add(format!("{p}.attn.bo"), Tensor::zeros(vec![d]));
            let ln2 = Norm::register(&mut store, &format!("{p}.ln2"), d);
            let ffn = if config.n_experts == 1 {
                Ffn::Dense(ExpertIds::register(&mut store, &format!("{p}.ffn"), d, config.hidden(), std, rng))
            } else {
                Ffn::Moe(MoeLayer::register(
                    &mut store,
                    &format!("{p}.moe"),
                    d,
                    config.hidden(),
                    config.n_experts,
                    config.moe_top_k,
                    config.capacity_factor,
                    std,
                    rng,
                ))
            };
            layers.push(Layer { ln1, wqkv, bqkv, wo, bo, ln2, ffn });
        }
        let final_norm = Norm::register(&mut store, "final_norm", d);
        Ok(Transformer { config, store, token, segment, position, patch, layers, final_norm })
    }

    /// Write the weights to `path` and the config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.store, path)?;
        let cfg = ConfigFile { version: CONFIG_VERSION, model: self.config.clone() };
        std::fs::write(config_path(path), serde_json::to_string_pretty(&cfg)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Format(format!("config version {}", cfg.version)));
        }
        let mut model = Transformer::new(cfg.model, 0)?;
        load_params(&mut model.store, path)?;
        Ok(model)
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token
    }

    /// The output layer shares storage with the token embedding.
    pub fn output_projection(&self) -> ParamId {
        self.token
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, s: &MultimodalSample) -> Result<()> {
        let len = s.len();
        if len == 0 {
            return Err(Error::invalid("empty sample"));
        }
        if len > self.config.max_len {
            return Err(Error::TooLong { len, max: self.config.max_len });
        }
        if !s.patches.is_empty() && s.patches.dim != self.config.patch_dim {
            return Err(Error::shape("embed", format!("patch dim {} vs {}", s.patches.dim, self.config.patch_dim)));
        }
        let v = self.config.vocab_size;
        if let Some(&id) = s.masked_text.iter().chain(&s.causal_text).find(|&&t| t as usize >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        s.validate()
    }

    /// Content + segment + position embedding of every position, samples
    /// stacked in order; positions restart at 0 for each sample.
    pub fn embed_on(&self, tape: &mut Tape<'_, S>, samples: &[&MultimodalSample]) -> Result<Var> {
        let d = self.config.d_model;
        let mut visual_rows = Vec::new();
        let mut visual_data = Vec::new();
        let mut text_rows = Vec::new();
        let mut text_ids = Vec::new();
        let mut segments = Vec::new();
        let mut positions = Vec::new();
        let mut offset = 0;
        for s in samples {
            self.check(s)?;
            let layout = s.layout();
            visual_rows.extend(offset..offset + layout.n_visual);
            visual_data.extend(s.patches.data.iter().map(|&v| S::of(v)));
            text_rows.extend(offset + layout.n_visual..offset + layout.total());
            text_ids.extend(s.masked_text.iter().chain(&s.causal_text).map(|&t| t as usize));
            segments.extend((0..layout.total()).map(|p| layout.segment_of(p)));
            positions.extend(0..layout.total());
            offset += layout.total();
        }
        let mut parts = Vec::new();
        if !visual_rows.is_empty() {
            let x = tape.constant(vec![visual_rows.len(), self.config.patch_dim], visual_data)?;
            let w = tape.param(self.patch);
            parts.push((tape.matmul(x, w)?, visual_rows));
        }
        if !text_rows.is_empty() {
            let tok = tape.param(self.token);
            parts.push((tape.gather_rows(tok, &text_ids)?, text_rows));
        }
        let content = tape.index_add_rows(offset, d, parts)?;
        let seg_table = tape.param(self.segment);
        let seg = tape.gather_rows(seg_table, &segments)?;
        let pos_table = tape.param(self.position);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let x = tape.add(content, seg)?;
        tape.add(x, pos)
    }

    /// Multi-head attention sublayer of `layer` applied to normalised input
    /// `x`, attending within each sample under its segment mask.
    pub fn attention_on(&self, tape: &mut Tape<'_, S>, x: Var, layer: usize, layouts: &[SegmentLayout]) -> Result<Var> {
        self.attention_impl(tape, x, &self.layers[layer], layouts, None)
    }

    fn attention_impl(
        &self,
        tape: &mut Tape<'_, S>,
        x: Var,
        layer: &Layer,
        layouts: &[SegmentLayout],
        mut probe: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (wqkv, bqkv) = (tape.param(layer.wqkv), tape.param(layer.bqkv));
        let qkv = tape.matmul(x, wqkv)?;
        let qkv = tape.add_row(qkv, bqkv)?;
        let mut per_sample = Vec::with_capacity(layouts.len());
        let mut offset = 0;
        for layout in layouts {
            let rows = offset..offset + layout.total();
            offset += layout.total();
            let mask = build_mask(*layout);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let c = h * dh;
                let q = tape.slice(qkv, rows.clone(), c..c + dh)?;
                let k = tape.slice(qkv, rows.clone(), d + c..d + c + dh)?;
                let v = tape.slice(qkv, rows.clone(), 2 * d + c..2 * d + c + dh)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, scale)?;
                let p = tape.masked_softmax(scores, &mask.allowed)?;
                if let Some(probe) = probe.as_deref_mut() {
                    probe.push(p);
                }
                outs.push(tape.matmul(p, v)?);
            }
            per_sample.push(tape.concat_cols(&outs)?);
        }
        let o = tape.concat_rows(&per_sample)?;
        let (wo, bo) = (tape.param(layer.wo), tape.param(layer.bo));
        let o = tape.matmul(o, wo)?;
        tape.add_row(o, bo)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<'_, S>,
        samples: &[&MultimodalSample],
        mut probe: Option<&mut Vec<Var>>,
    ) -> Result<Forward> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let layouts: Vec<SegmentLayout> = samples.iter().map(|s| s.layout()).collect();
        let mut offsets = Vec::with_capacity(samples.len());
        let mut total = 0;
        for l in &layouts {
            offsets.push(total);
            total += l.total();
        }
        let mut x = self.embed_on(tape, samples)?;
        let mut aux = Vec::new();
        let mut routing = Vec::new();
        for layer in &self.layers {
            let a = layer.ln1.apply(tape, x)?;
            let a = self.attention_impl(tape, a, layer, &layouts, probe.as_deref_mut())?;
            x = tape.add(x, a)?;
            let f = layer.ln2.apply(tape, x)?;
            let f = match &layer.ffn {
                Ffn::Dense(ids) => ffn_on(tape, f, ids)?,
                Ffn::Moe(moe) => {
                    let out = moe.forward_on(tape, f)?;
                    aux.push(out.aux_loss);
                    routing.push(out.stats);
                    out.out
                }
            };
            x = tape.add(x, f)?;
        }
        let hidden = self.final_norm.apply(tape, x)?;
        let aux_loss = match aux.len() {
            0 => None,
            1 => Some(aux[0]),
            n => {
                let cat = tape.concat_rows(&aux)?;
                let s = tape.sum(cat)?;
                Some(tape.scale(s, S::of(1.0 / n as f64))?)
            }
        };
        Ok(Forward { hidden, aux_loss, routing, offsets })
    }

    /// Forward pass over a packed batch on a tape built from `self.store`.
    pub fn forward_on(&self, tape: &mut Tape<'_, S>, samples: &[&MultimodalSample]) -> Result<Forward> {
        self.forward_impl(tape, samples, None)
    }

    /// Tied output layer: `hidden[rows] · Eᵀ`.
    pub fn logits_on(&self, tape: &mut Tape<'_, S>, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.gather_rows(hidden, r)?,
            None => hidden,
        };
        let e = tape.param(self.token);
        tape.matmul_nt(h, e)
    }

    /// Mean cross-entropy over all target positions of the batch plus
    /// `aux_loss_coef` times the auxiliary loss.
    pub fn loss_on(&self, tape: &mut Tape<'_, S>, samples: &[&MultimodalSample]) -> Result<Loss> {
        let fwd = self.forward_on(tape, samples)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, &off) in samples.iter().zip(&fwd.offsets) {
            for (p, &t) in s.targets.iter().enumerate() {
                if t != IGNORE {
                    rows.push(off + p);
                    targets.push(t);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("batch has no target positions"));
        }
        let logits = self.logits_on(tape, fwd.hidden, Some(&rows))?;
        let ce = tape.cross_entropy(logits, &targets, IGNORE)?;
        let cross_entropy = tape.scalar_value(ce).as_f64();
        let (total, aux_loss) = match fwd.aux_loss {
            Some(a) if self.config.aux_loss_coef > 0.0 => {
                let aux_value = tape.scalar_value(a).as_f64();
                let w = tape.scale(a, S::of(self.config.aux_loss_coef))?;
                (tape.add(ce, w)?, aux_value)
            }
            Some(a) => (ce, tape.scalar_value(a).as_f64()),
            None => (ce, 0.0),
        };
        Ok(Loss { total, cross_entropy, aux_loss, routing: fwd.routing })
    }

    /// Logits at every position of one sample.
    pub fn logits(&self, sample: &MultimodalSample) -> Result<Tensor<S>> {
        let mut tape = Tape::with_params(&self.store);
        let fwd = self.forward_on(&mut tape, &[sample])?;
        let l = self.logits_on(&mut tape, fwd.hidden, None)?;
        Ok(tape.tensor(l))
    }

    /// Embedding output of one sample.
    pub fn embed(&self, sample: &MultimodalSample) -> Result<Tensor<S>> {
        let mut tape = Tape::with_params(&self.store);
        let x = self.embed_on(&mut tape, &[sample])?;
        Ok(tape.tensor(x))
    }

    /// Attention probabilities of one sample, indexed `[layer][head]`.
    pub fn attention_probs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<Tensor<S>>>> {
        let mut tape = Tape::with_params(&self.store);
        let mut probe = Vec::new();
        self.forward_impl(&mut tape, &[sample], Some(&mut probe))?;
        let heads = self.config.n_heads;
        Ok(probe.chunks(heads).map(|c| c.iter().map(|&v| tape.tensor(v)).collect()).collect())
    }

    /// Log-probabilities over the vocabulary at each causal position.
    pub fn causal_log_probs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.store);
        let fwd = self.forward_on(&mut tape, &[sample])?;
        let layout = sample.layout();
        let rows: Vec<usize> = (layout.prefix()..layout.total()).collect();
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits_on(&mut tape, fwd.hidden, Some(&rows))?;
        let v = self.config.vocab_size;
        let values = tape.value(logits);
        let mut out = Vec::with_capacity(rows.len());
        let mut buf = vec![S::zero(); v];
        for r in 0..rows.len() {
            log_softmax_row(&values[r * v..(r + 1) * v], &mut buf);
            out.push(buf.iter().map(|x| x.as_f64()).collect());
        }
        Ok(out)
    }
}
