//! Mixture-of-experts feed-forward layer.
//!
//! A softmax gate picks the top-k experts per token; each expert accepts at
//! most `capacity` token slots, filled in position order, and overflowing
//! slots are dropped so the token keeps only its residual path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of one position-wise feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertIds {
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        ExpertIds {
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(vec![d, hidden], std, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![hidden])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn(vec![hidden, d], std, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
        }
    }

    pub fn size(d: usize, hidden: usize) -> usize {
        2 * d * hidden + hidden + d
    }
}

/// `gelu(x·W₁ + b₁)·W₂ + b₂`.
pub fn ffn_on<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, ids: &ExpertIds) -> Result<Var> {
    let (w1, b1, w2, b2) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.w2), tape.param(ids.b2));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower
/// index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Token slots one expert may accept: `ceil(factor · tokens · k / experts)`.
pub fn capacity(capacity_factor: f64, tokens: usize, k: usize, n_experts: usize) -> usize {
    (capacity_factor * (tokens * k) as f64 / n_experts as f64).ceil() as usize
}

/// Token-to-expert assignment after gating and capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Chosen experts per token, best first.
    pub choices: Vec<Vec<usize>>,
    /// Renormalised gate weight of each choice.
    pub weights: Vec<Vec<f64>>,
    /// `(token, rank)` slots accepted by each expert, in position order.
    pub assigned: Vec<Vec<(usize, usize)>>,
    /// Slots each expert had to refuse.
    pub overflow: Vec<usize>,
    pub capacity: usize,
}

impl Routing {
    /// Gate `probs` (`tokens x experts`, row-major) and apply capacity.
    pub fn new(probs: &[f64], n_experts: usize, k: usize, capacity_factor: f64) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts || !probs.len().is_multiple_of(n_experts) {
            return Err(Error::invalid(format!("routing {} probs over {n_experts} experts, k={k}", probs.len())));
        }
        let tokens = probs.len() / n_experts;
        let mut choices = Vec::with_capacity(tokens);
        let mut weights = Vec::with_capacity(tokens);
        for row in probs.chunks(n_experts) {
            let c = top_k(row, k);
            let total: f64 = c.iter().map(|&e| row[e]).sum();
            weights.push(c.iter().map(|&e| row[e] / total).collect());
            choices.push(c);
        }
        let cap = capacity(capacity_factor, tokens, k, n_experts);
        let (assigned, overflow) = assign(&choices, n_experts, cap);
        Ok(Routing { choices, weights, assigned, overflow, capacity: cap })
    }

    pub fn tokens(&self) -> usize {
        self.choices.len()
    }

    pub fn dropped(&self) -> usize {
        self.overflow.iter().sum()
    }

    pub fn load(&self) -> Vec<usize> {
        self.assigned.iter().map(Vec::len).collect()
    }

    /// Fraction of tokens whose first choice is each expert.
    pub fn top1_fraction(&self, n_experts: usize) -> Vec<f64> {
        let mut f = vec![0.0; n_experts];
        for c in &self.choices {
            f[c[0]] += 1.0;
        }
        let t = self.tokens().max(1) as f64;
        f.iter_mut().for_each(|x| *x /= t);
        f
    }
}

/// Fill experts slot by slot in token order, then rank order within a
/// token; a slot that finds its expert full is dropped.
pub fn assign(choices: &[Vec<usize>], n_experts: usize, capacity: usize) -> (Vec<Vec<(usize, usize)>>, Vec<usize>) {
    let mut assigned = vec![Vec::new(); n_experts];
    let mut overflow = vec![0; n_experts];
    for (t, c) in choices.iter().enumerate() {
        for (rank, &e) in c.iter().enumerate() {
            if assigned[e].len() < capacity {
                assigned[e].push((t, rank));
            } else {
                overflow[e] += 1;
            }
        }
    }
    (assigned, overflow)
}

/// `E · Σ_e f_e · p_e` with `f` the top-1 fractions and `p` the mean gate
/// probabilities.
pub fn load_balance_loss(top1_fraction: &[f64], mean_probs: &[f64]) -> f64 {
    let e = top1_fraction.len() as f64;
    e * top1_fraction.iter().zip(mean_probs).map(|(f, p)| f * p).sum::<f64>()
}

/// Routing summary of one layer application.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub load: Vec<usize>,
    pub dropped: usize,
    pub slots: usize,
    pub aux_loss: f64,
    /// Scalars that would cross expert boundaries if experts were remote:
    /// accepted slots times model width.
    pub communication: usize,
}

impl RoutingStats {
    pub fn drop_rate(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.dropped as f64 / self.slots as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub gate: ParamId,
    pub experts: Vec<ExpertIds>,
    pub top_k: usize,
    pub capacity_factor: f64,
}

pub struct MoeOutput {
    pub out: Var,
    pub aux_loss: Var,
    pub routing: Routing,
    pub stats: RoutingStats,
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        hidden: usize,
        n_experts: usize,
        top_k: usize,
        capacity_factor: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let gate = store.add(format!("{prefix}.gate"), Tensor::randn(vec![d, n_experts], std, rng));
        let experts =
            (0..n_experts).map(|e| ExpertIds::register(store, &format!("{prefix}.experts.{e}"), d, hidden, std, rng)).collect();
        MoeLayer { gate, experts, top_k: top_k.min(n_experts), capacity_factor }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn forward_on<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<MoeOutput> {
        let (tokens, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let n = self.n_experts();
        let wg = tape.param(self.gate);
        let logits = tape.matmul(x, wg)?;
        let probs = tape.softmax(logits, 1)?;
        let pv: Vec<f64> = tape.value(probs).iter().map(|p| p.as_f64()).collect();
        let routing = Routing::new(&pv, n, self.top_k, self.capacity_factor)?;

        let weights = tape.select_normalized(probs, &routing.choices)?;
        let k = self.top_k;
        let flat_weights = tape.reshape(weights, vec![tokens * k, 1])?;
        let mut parts = Vec::new();
        for (e, slots) in routing.assigned.iter().enumerate() {
            if slots.is_empty() {
                continue;
            }
            let rows: Vec<usize> = slots.iter().map(|&(t, _)| t).collect();
            let slot_idx: Vec<usize> = slots.iter().map(|&(t, r)| t * k + r).collect();
            let xe = tape.gather_rows(x, &rows)?;
            let he = ffn_on(tape, xe, &self.experts[e])?;
            let we = tape.gather_rows(flat_weights, &slot_idx)?;
            parts.push((tape.mul_col(he, we)?, rows));
        }
        let out = tape.index_add_rows(tokens, d, parts)?;

        let f = routing.top1_fraction(n);
        let mean = tape.mean_rows(probs)?;
        let coef: Vec<S> = f.iter().map(|&fe| S::of(fe * n as f64)).collect();
        let aux_loss = tape.dot_const(mean, &coef)?;

        let load = routing.load();
        let stats = RoutingStats {
            communication: load.iter().sum::<usize>() * d,
            load,
            dropped: routing.dropped(),
            slots: tokens * k,
            aux_loss: tape.scalar_value(aux_loss).as_f64(),
        };
        Ok(MoeOutput { out, aux_loss, routing, stats })
    }
}
