//! Text-to-image through discrete image codes.
//!
//! Stage one is a vector-quantised patch autoencoder: every `patch x patch`
//! block is encoded to a `code_dim` vector and snapped to its nearest
//! codebook entry. Stage two is the unified transformer in a pure causal
//! layout over `[BOS] text [SEP] codes`, with code `c` at token id
//! `text_vocab + c`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalgen::sample_top_k;
use crate::model::{config_path, MultimodalSample, Task, Transformer, IGNORE};
use crate::patches::{assemble_patches, split_patches, ImageTensor, RawPatches, CHANNELS};
use crate::tensor::{load_params, save_params, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pretrain::{train_step, StepMetrics, TrainConfig};
use crate::tokenizer::{TokenId, BOS, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub side: usize,
    /// Encoder stride; each code covers one `patch x patch` block.
    pub patch: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    /// Commitment weight.
    pub beta: f64,
    pub init_std: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { side: 32, patch: 8, codebook_size: 64, code_dim: 16, hidden: 64, beta: 0.25, init_std: 0.1 }
    }
}

impl VqConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.side / self.patch, self.side / self.patch)
    }

    pub fn n_codes(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.side.is_multiple_of(self.patch) || self.codebook_size < 2 || self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid(format!("vq config {self:?}")));
        }
        Ok(())
    }
}

/// Code ids of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
}

/// Result of snapping encoder outputs to the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub ids: Vec<usize>,
    /// Selected code vectors, row-major `[n, dim]`.
    pub z_q: Vec<f64>,
    /// Mean squared distance between `z` and its code; the codebook loss
    /// moves the codes by this amount, the commitment loss is `β` times it.
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Index of the nearest code by squared Euclidean distance; ties go to the
/// lowest id.
pub fn nearest_code(z: &[f64], codebook: &[f64], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, e) in codebook.chunks(dim).enumerate() {
        let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn quantize(z: &[f64], codebook: &[f64], dim: usize, beta: f64) -> Result<Quantized> {
    if dim == 0 || !z.len().is_multiple_of(dim) || !codebook.len().is_multiple_of(dim) || codebook.is_empty() {
        return Err(Error::shape("quantize", format!("z [{}], codebook [{}], dim {dim}", z.len(), codebook.len())));
    }
    let ids: Vec<usize> = z.chunks(dim).map(|row| nearest_code(row, codebook, dim)).collect();
    let z_q: Vec<f64> = ids.iter().flat_map(|&i| codebook[i * dim..(i + 1) * dim].iter().copied()).collect();
    let mse = if z.is_empty() { 0.0 } else { z.iter().zip(&z_q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z.len() as f64 };
    Ok(Quantized { ids, z_q, codebook_loss: mse, commitment_loss: beta * mse })
}

/// Per-step losses of the autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone)]
pub struct VqModel {
    pub config: VqConfig,
    pub store: ParamStore<f64>,
    pub trained: bool,
    enc: [ParamId; 4],
    codebook: ParamId,
    dec: [ParamId; 4],
}

struct Pass {
    recon: Var,
    codebook_loss: Var,
    commitment_loss: Var,
}

#[derive(Serialize, Deserialize)]
struct VqFile {
    version: u32,
    trained: bool,
    vq: VqConfig,
}

impl VqModel {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, h, c, std) = (config.patch_dim(), config.hidden, config.code_dim, config.init_std);
        let mut store = ParamStore::new();
        let mut layer = |store: &mut ParamStore<f64>, name: &str, i: usize, o: usize| {
            [
                store.add(format!("{name}.w1"), Tensor::randn(vec![i, h], std, &mut rng)),
                store.add(format!("{name}.b1"), Tensor::zeros(vec![h])),
                store.add(format!("{name}.w2"), Tensor::randn(vec![h, o], std, &mut rng)),
                store.add(format!("{name}.b2"), Tensor::zeros(vec![o])),
            ]
        };
        let enc = layer(&mut store, "encoder", p, c);
        let dec = layer(&mut store, "decoder", c, p);
        let codebook = store.add("codebook", Tensor::randn(vec![config.codebook_size, c], 1.0, &mut rng));
        Ok(VqModel { config, store, trained: false, enc, codebook, dec })
    }

    pub fn codebook(&self) -> &[f64] {
        self.store.get(self.codebook).data()
    }

    fn mlp(tape: &mut Tape<'_, f64>, x: Var, ids: &[ParamId; 4]) -> Result<Var> {
        let (w1, b1, w2, b2) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]), tape.param(ids[3]));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    fn encode_on(&self, tape: &mut Tape<'_, f64>, patches: &RawPatches) -> Result<Var> {
        let x = tape.constant(vec![patches.len(), patches.dim], patches.data.clone())?;
        Self::mlp(tape, x, &self.enc)
    }

    fn decode_on(&self, tape: &mut Tape<'_, f64>, z_q: Var) -> Result<Var> {
        let o = Self::mlp(tape, z_q, &self.dec)?;
        tape.sigmoid(o)
    }

    fn pass(&self, tape: &mut Tape<'_, f64>, patches: &RawPatches) -> Result<Pass> {
        let z = self.encode_on(tape, patches)?;
        let dim = self.config.code_dim;
        let q = quantize(tape.value(z), self.codebook(), dim, self.config.beta)?;
        let cb = tape.param(self.codebook);
        let e = tape.gather_rows(cb, &q.ids)?;
        let z_values = tape.value(z).to_vec();
        let codebook_loss = tape.mse(e, &z_values)?;
        let commitment_loss = tape.mse(z, &q.z_q)?;
        let z_st = tape.straight_through(z, q.z_q)?;
        let recon = self.decode_on(tape, z_st)?;
        Ok(Pass { recon, codebook_loss, commitment_loss })
    }

    fn image_patches(&self, img: &ImageTensor) -> Result<RawPatches> {
        if img.height != self.config.side || img.width != self.config.side {
            return Err(Error::shape("vq", format!("{}x{} image, expected {}", img.height, img.width, self.config.side)));
        }
        split_patches(img, self.config.patch)
    }

    fn batch_patches(&self, images: &[ImageTensor]) -> Result<RawPatches> {
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            let p = self.image_patches(img)?;
            n += p.len();
            data.extend(p.data);
        }
        Ok(RawPatches { rows: 1, cols: n, dim: self.config.patch_dim(), data })
    }

    /// Replace the codebook with encoder outputs of randomly chosen training
    /// patches, nudged apart so no two codes coincide.
    pub fn init_codebook_from<R: Rng + ?Sized>(&mut self, images: &[ImageTensor], rng: &mut R) -> Result<()> {
        let patches = self.batch_patches(images)?;
        let mut tape = Tape::with_params(&self.store);
        let z = self.encode_on(&mut tape, &patches)?;
        let z = tape.value(z).to_vec();
        let (k, dim) = (self.config.codebook_size, self.config.code_dim);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(rng);
        let mut codes = Vec::with_capacity(k * dim);
        for i in 0..k {
            let src = order[i % order.len()];
            codes.extend(z[src * dim..(src + 1) * dim].iter().map(|&v| v + rng.random_range(-1e-2..1e-2)));
        }
        self.store.replace(self.codebook, Tensor::new(vec![k, dim], codes)?);
        Ok(())
    }

    /// One Adam step on reconstruction + codebook + `β`·commitment.
    pub fn train_step(&mut self, images: &[ImageTensor], adam: &mut Adam<f64>) -> Result<VqLosses> {
        let patches = self.batch_patches(images)?;
        let (grads, losses) = {
            let mut tape = Tape::with_params(&self.store);
            let p = self.pass(&mut tape, &patches)?;
            let rec = tape.mse(p.recon, &patches.data)?;
            let commit = tape.scale(p.commitment_loss, self.config.beta)?;
            let total = tape.add(rec, p.codebook_loss)?;
            let total = tape.add(total, commit)?;
            let losses = VqLosses {
                total: tape.scalar_value(total),
                reconstruction: tape.scalar_value(rec),
                codebook: tape.scalar_value(p.codebook_loss),
                commitment: tape.scalar_value(commit),
            };
            (tape.backward(total)?, losses)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads);
        adam.step(&mut self.store);
        Ok(losses)
    }

    /// Gradient norm reaching the encoder through the quantiser on `images`.
    pub fn encoder_grad_norm(&self, images: &[ImageTensor]) -> Result<f64> {
        let patches = self.batch_patches(images)?;
        let mut tape = Tape::with_params(&self.store);
        let p = self.pass(&mut tape, &patches)?;
        let rec = tape.mse(p.recon, &patches.data)?;
        let g = tape.backward(rec)?;
        let mut total = 0.0;
        for id in &self.enc {
            total += g.param(*id).map_or(0.0, |g| g.iter().map(|x| x * x).sum());
        }
        Ok(total.sqrt())
    }

    pub fn train(&mut self, images: &[ImageTensor], steps: usize, optimizer: AdamConfig, seed: u64) -> Result<Vec<VqLosses>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_codebook_from(images, &mut rng)?;
        let mut adam = Adam::new(optimizer);
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            log.push(self.train_step(images, &mut adam)?);
        }
        self.trained = true;
        Ok(log)
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Untrained)
        }
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<CodeGrid> {
        self.require_trained()?;
        let patches = self.image_patches(img)?;
        let mut tape = Tape::with_params(&self.store);
        let z = self.encode_on(&mut tape, &patches)?;
        let q = quantize(tape.value(z), self.codebook(), self.config.code_dim, self.config.beta)?;
        Ok(CodeGrid { rows: patches.rows, cols: patches.cols, ids: q.ids })
    }

    pub fn decode(&self, grid: &CodeGrid) -> Result<ImageTensor> {
        self.require_trained()?;
        let (k, dim) = (self.config.codebook_size, self.config.code_dim);
        if grid.ids.len() != grid.rows * grid.cols || grid.ids.iter().any(|&i| i >= k) {
            return Err(Error::invalid(format!("code grid {}x{} with {} ids", grid.rows, grid.cols, grid.ids.len())));
        }
        let cb = self.codebook();
        let z_q: Vec<f64> = grid.ids.iter().flat_map(|&i| cb[i * dim..(i + 1) * dim].iter().copied()).collect();
        let mut tape = Tape::with_params(&self.store);
        let zq = tape.constant(vec![grid.ids.len(), dim], z_q)?;
        let out = self.decode_on(&mut tape, zq)?;
        let patches = RawPatches { rows: grid.rows, cols: grid.cols, dim: self.config.patch_dim(), data: tape.value(out).to_vec() };
        assemble_patches(&patches, self.config.patch)
    }

    pub fn reconstruct(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.decode(&self.encode(img)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(&self.store, path)?;
        let file = VqFile { version: 1, trained: self.trained, vq: self.config.clone() };
        std::fs::write(config_path(path), serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VqFile = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        let mut model = VqModel::new(file.vq, 0)?;
        load_params(&mut model.store, path)?;
        model.trained = file.trained;
        Ok(model)
    }
}

/// `[BOS] text [SEP] codes`; only positions whose next token is a code
/// carry a target.
pub fn make_t2i_sample(text_ids: &[TokenId], grid: &CodeGrid, text_vocab: usize, max_len: usize) -> Result<MultimodalSample> {
    let len = 2 + text_ids.len() + grid.ids.len();
    if len > max_len {
        return Err(Error::TooLong { len, max: max_len });
    }
    let mut causal = Vec::with_capacity(len);
    causal.push(BOS);
    causal.extend_from_slice(text_ids);
    causal.push(SEP);
    let first_code = causal.len();
    causal.extend(grid.ids.iter().map(|&c| (text_vocab + c) as TokenId));
    let targets = (0..len).map(|p| if p + 1 >= first_code && p + 1 < len { causal[p + 1] } else { IGNORE }).collect();
    Ok(MultimodalSample { targets, ..MultimodalSample::causal(causal, Task::TextToImage, 1) })
}

/// Draw `n` codes one at a time. Only the code range `[text_vocab,
/// text_vocab + K)` is eligible; among it the `k` most likely are
/// renormalised at `temperature`. A temperature of 0 or `k = 1` is greedy.
#[allow(clippy::too_many_arguments)]
pub fn sample_codes<R: Rng + ?Sized>(
    lm: &Transformer<f64>,
    text_ids: &[TokenId],
    text_vocab: usize,
    codebook_size: usize,
    grid: (usize, usize),
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<CodeGrid> {
    if text_vocab + codebook_size > lm.config.vocab_size {
        return Err(Error::invalid(format!("model vocab {} too small for {} + {}", lm.config.vocab_size, text_vocab, codebook_size)));
    }
    let n = grid.0 * grid.1;
    let mut seq = Vec::with_capacity(2 + text_ids.len() + n);
    seq.push(BOS);
    seq.extend_from_slice(text_ids);
    seq.push(SEP);
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let sample = MultimodalSample::causal(seq.clone(), Task::TextToImage, lm.config.patch_dim);
        let lp = lm.causal_log_probs(&sample)?;
        let last = lp.last().expect("nonempty causal segment");
        let code = sample_top_k(&last[text_vocab..text_vocab + codebook_size], k, temperature, rng);
        ids.push(code);
        seq.push((text_vocab + code) as TokenId);
    }
    Ok(CodeGrid { rows: grid.0, cols: grid.1, ids })
}

/// Fit the code prior on `(caption, grid)` pairs. Batches are drawn with
/// replacement from a generator seeded by `config.seed`; task weights and
/// denoising settings are ignored.
pub fn train_prior(
    lm: &mut Transformer<f64>,
    pairs: &[(Vec<TokenId>, CodeGrid)],
    text_vocab: usize,
    config: &TrainConfig,
) -> Result<Vec<StepMetrics>> {
    let samples = pairs
        .iter()
        .map(|(text, grid)| make_t2i_sample(text, grid, text_vocab, lm.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::invalid("no caption-image pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(config.optimizer);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<MultimodalSample> =
            (0..config.batch_size.max(1)).map(|_| samples[rng.random_range(0..samples.len())].clone()).collect();
        let (loss, aux_loss, drop_rate, expert_load) = train_step(lm, &mut adam, &batch, config.lr_at(step))?;
        log.push(StepMetrics { step, task: Task::TextToImage, loss, aux_loss, drop_rate, expert_load });
    }
    Ok(log)
}

/// Both stages plus the text vocabulary size that offsets code ids.
pub struct TextToImage {
    pub vq: VqModel,
    pub lm: Transformer<f64>,
    pub text_vocab: usize,
}

impl TextToImage {
    pub fn sample_grid<R: Rng + ?Sized>(&self, text_ids: &[TokenId], k: usize, temperature: f64, rng: &mut R) -> Result<CodeGrid> {
        self.vq.require_trained()?;
        sample_codes(&self.lm, text_ids, self.text_vocab, self.vq.config.codebook_size, self.vq.config.grid(), k, temperature, rng)
    }

    pub fn generate_image<R: Rng + ?Sized>(&self, text_ids: &[TokenId], k: usize, temperature: f64, rng: &mut R) -> Result<ImageTensor> {
        let grid = self.sample_grid(text_ids, k, temperature, rng)?;
        self.vq.decode(&grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn nearest_of_two_codes() {
        let q = quantize(&[0.9, 0.8], &[0.0, 0.0, 1.0, 1.0], 2, 0.25).unwrap();
        assert_eq!(q.ids, [1]);
        assert_eq!(q.z_q, [1.0, 1.0]);
    }

    #[test]
    fn exact_code_has_zero_losses() {
        let q = quantize(&[1.0, 1.0], &[0.0, 0.0, 1.0, 1.0], 2, 0.25).unwrap();
        assert_eq!(q.ids, [1]);
        assert_eq!((q.codebook_loss, q.commitment_loss), (0.0, 0.0));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let q = quantize(&[0.5, 0.5], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0], 2, 0.25).unwrap();
        assert_eq!(q.ids, [0]);
    }

    #[test]
    fn zero_beta_removes_commitment() {
        let q = quantize(&[0.3, -0.2], &[0.0, 0.0, 1.0, 1.0], 2, 0.0).unwrap();
        assert_eq!(q.commitment_loss, 0.0);
        assert!(q.codebook_loss > 0.0);
    }

    fn stripes() -> ImageTensor {
        ImageTensor::from_fn(32, 32, |y, _| if y % 4 < 2 { [1.0, 0.0, 0.0] } else { [1.0, 1.0, 1.0] })
    }

    #[test]
    fn untrained_model_refuses_to_encode() {
        let m = VqModel::new(VqConfig::default(), 0).unwrap();
        assert!(matches!(m.encode(&stripes()), Err(Error::Untrained)));
        assert!(matches!(m.decode(&CodeGrid { rows: 4, cols: 4, ids: vec![0; 16] }), Err(Error::Untrained)));
    }

    #[test]
    fn codebook_entries_start_distinct() {
        let m = VqModel::new(VqConfig::default(), 0).unwrap();
        let cb = m.codebook();
        let rows: Vec<&[f64]> = cb.chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn grid_shape_and_determinism() {
        let mut m = VqModel::new(VqConfig::default(), 1).unwrap();
        m.train(&[stripes()], 2, AdamConfig::default(), 0).unwrap();
        let a = m.encode(&stripes()).unwrap();
        assert_eq!((a.rows, a.cols, a.ids.len()), (4, 4, 16));
        assert_eq!(a, m.encode(&stripes()).unwrap());
    }

    #[test]
    fn encoder_receives_gradient_through_quantiser() {
        let mut m = VqModel::new(VqConfig::default(), 2).unwrap();
        m.init_codebook_from(&[stripes()], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.encoder_grad_norm(&[stripes()]).unwrap() > 0.0);
    }

    #[test]
    fn constant_image_reaches_near_zero_loss() {
        let grey = ImageTensor::from_fn(32, 32, |_, _| [0.5, 0.5, 0.5]);
        let mut m = VqModel::new(VqConfig::default(), 3).unwrap();
        let log = m.train(&[grey.clone()], 300, AdamConfig { lr: 3e-3, ..Default::default() }, 0).unwrap();
        assert!(log.last().unwrap().total < 1e-3, "{:?}", log.last());
        assert!(m.reconstruct(&grey).unwrap().mse(&grey).unwrap() < 1e-3);
    }

    #[test]
    fn t2i_sample_layout() {
        let grid = CodeGrid { rows: 2, cols: 2, ids: vec![0, 3, 63, 1] };
        let s = make_t2i_sample(&[10, 11, 12], &grid, 100, 64).unwrap();
        assert_eq!(s.len(), 2 + 3 + 4);
        assert_eq!(s.causal_text[..5], [BOS, 10, 11, 12, SEP]);
        assert_eq!(s.causal_text[5..], [100, 103, 163, 101]);
        assert!(s.targets[..4].iter().all(|&t| t == IGNORE));
        assert_eq!(s.targets[4..8], [100, 103, 163, 101]);
        assert_eq!(s.targets[8], IGNORE);
        assert!(s.causal_text[5..].iter().all(|&t| (100..164).contains(&t)));
        assert!(make_t2i_sample(&[10; 60], &grid, 100, 64).is_err());
    }

    #[test]
    fn sampling_stays_in_code_range_and_fills_grid() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: 30, max_len: 32, ..Default::default() };
        let mut lm = Transformer::<f64>::new(cfg, 0).unwrap();
        // make text tokens far more likely than any code
        let tok = lm.token_embedding();
        let mut e = lm.store.get(tok).clone();
        e.data_mut()[..8 * 20].iter_mut().for_each(|x| *x *= 50.0);
        lm.store.replace(tok, e);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, temp) in [(1, 1.0), (4, 1.0), (10, 0.5), (10, 0.0)] {
            let g = sample_codes(&lm, &[6, 7], 20, 10, (2, 3), k, temp, &mut rng).unwrap();
            assert_eq!(g.ids.len(), 6);
            assert!(g.ids.iter().all(|&c| c < 10));
        }
        let a = sample_codes(&lm, &[6, 7], 20, 10, (2, 2), 1, 1.0, &mut rng).unwrap();
        let b = sample_codes(&lm, &[6, 7], 20, 10, (2, 2), 5, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restricted_sampling_respects_top_k() {
        let logp = [-0.1, -3.0, -1.0, -9.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert!([0, 2].contains(&sample_top_k(&logp, 2, 1.0, &mut rng)));
        }
        assert_eq!(sample_top_k(&logp, 4, 0.0, &mut rng), 0);
    }

    #[test]
    fn checkpoint_roundtrip_keeps_trained_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vq.bin");
        let mut m = VqModel::new(VqConfig::default(), 4).unwrap();
        m.train(&[stripes()], 1, AdamConfig::default(), 0).unwrap();
        m.save(&path).unwrap();
        let back = VqModel::load(&path).unwrap();
        assert!(back.trained);
        assert_eq!(back.encode(&stripes()).unwrap(), m.encode(&stripes()).unwrap());
    }
}
