//! The denoiser: a bidirectional pre-norm transformer that maps a partially
//! masked sequence to a categorical distribution over the vocabulary at
//! every position.
//!
//! Layout per block: `x + Attn(LN(x))`, then `x + MLP(LN(x))` with a GELU
//! MLP of width `4 * d_model`. Positions use learned absolute embeddings.
//! Attention has no causal mask; padding keys are excluded so outputs at
//! real positions do not depend on how much padding a batch carries.
//!
//! Parameter count for vocabulary `V`, width `d`, context `L` and `n` blocks:
//!
//! ```text
//! V*d + L*d                    token + position embeddings
//! + n * (12*d^2 + 13*d)        per block: q,k,v,o, two layer norms, MLP
//! + 2*d                        final layer norm
//! + d*V + V                    output head
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::diffusion::CorruptedSequence;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const PAD_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 blocks of width 128 with 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            max_seq_len: 256,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, d, l, n) = (self.vocab_size, self.d_model, self.max_seq_len, self.n_layers);
        v * d + l * d + n * (12 * d * d + 13 * d) + 2 * d + d * v + v
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Per-position log-probabilities, `[batch, seq_len, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub log_probs: Tensor,
}

impl DenoiserOutput {
    pub fn batch(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.shape()[2]
    }

    /// Log-probabilities at `(row, pos)`.
    pub fn at(&self, row: usize, pos: usize) -> &[f64] {
        self.log_probs.row(row * self.seq_len() + pos)
    }
}

/// Whether a forward pass is in training mode (dropout active).
pub enum Mode<'a> {
    Eval,
    /// One dropout stream per batch row.
    Train(&'a mut [StreamRng]),
}

pub struct Denoiser {
    config: ModelConfig,
    params: ParamStore,
    blocks: Vec<Block>,
    layout: Layout,
    forward_passes: AtomicUsize,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Denoiser {
            config: self.config,
            params: self.params.clone(),
            blocks: self.blocks.clone(),
            layout: self.layout,
            forward_passes: AtomicUsize::new(self.forward_passes.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

fn declare(store: &mut ParamStore, config: &ModelConfig, mut init: impl FnMut(&[usize]) -> Tensor) -> (Vec<Block>, Layout) {
    let (v, d, l) = (config.vocab_size, config.d_model, config.max_seq_len);
    let ones = |n: usize| Tensor::full(&[n], 1.0);
    let zeros = |n: usize| Tensor::zeros(&[n]);
    let tok_emb = store.add("tok_emb", init(&[v, d]), true);
    let pos_emb = store.add("pos_emb", init(&[l, d]), true);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |s: &str| format!("block{i}.{s}");
        blocks.push(Block {
            ln1_g: store.add(p("ln1.gain"), ones(d), false),
            ln1_b: store.add(p("ln1.bias"), zeros(d), false),
            wq: store.add(p("attn.wq"), init(&[d, d]), true),
            bq: store.add(p("attn.bq"), zeros(d), false),
            wk: store.add(p("attn.wk"), init(&[d, d]), true),
            bk: store.add(p("attn.bk"), zeros(d), false),
            wv: store.add(p("attn.wv"), init(&[d, d]), true),
            bv: store.add(p("attn.bv"), zeros(d), false),
            wo: store.add(p("attn.wo"), init(&[d, d]), true),
            bo: store.add(p("attn.bo"), zeros(d), false),
            ln2_g: store.add(p("ln2.gain"), ones(d), false),
            ln2_b: store.add(p("ln2.bias"), zeros(d), false),
            w1: store.add(p("mlp.w1"), init(&[d, 4 * d]), true),
            b1: store.add(p("mlp.b1"), zeros(4 * d), false),
            w2: store.add(p("mlp.w2"), init(&[4 * d, d]), true),
            b2: store.add(p("mlp.b2"), zeros(d), false),
        });
    }
    let layout = Layout {
        tok_emb,
        pos_emb,
        lnf_g: store.add("lnf.gain", ones(d), false),
        lnf_b: store.add("lnf.bias", zeros(d), false),
        w_out: store.add("head.w", init(&[d, v]), true),
        b_out: store.add("head.b", zeros(v), false),
    };
    (blocks, layout)
}

impl Denoiser {
    /// Fresh model with `N(0, 0.02^2)` weights, unit gains and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        let (blocks, layout) = declare(&mut store, &config, |shape| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        });
        Ok(Denoiser {
            config,
            params: store,
            blocks,
            layout,
            forward_passes: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut reference = ParamStore::new();
        let (blocks, layout) = declare(&mut reference, &config, Tensor::zeros);
        if reference.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in reference.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Denoiser {
            config,
            params,
            blocks,
            layout,
            forward_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of forward passes run since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    /// Zeros the output head so every position predicts the uniform distribution.
    pub fn zero_head(&mut self) {
        let (w, b) = (self.layout.w_out, self.layout.b_out);
        self.params.value_mut(w).data_mut().fill(0.0);
        self.params.value_mut(b).data_mut().fill(0.0);
    }

    /// Output head and final layer-norm ids, exposed for tests that compare
    /// against a hand-written computation.
    pub fn head_params(&self) -> (ParamId, ParamId, ParamId, ParamId, ParamId, ParamId) {
        let l = self.layout;
        (l.tok_emb, l.pos_emb, l.lnf_g, l.lnf_b, l.w_out, l.b_out)
    }

    fn check_input(&self, rows: &[Vec<usize>], valid_lens: &[usize]) -> Result<usize> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || t == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if valid_lens.len() != rows.len() {
            return Err(Error::Input("one valid length per row required".into()));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Input("rows must share one length".into()));
            }
            if valid_lens[r] == 0 || valid_lens[r] > t {
                return Err(Error::Input(format!("valid length {} out of range", valid_lens[r])));
            }
            if let Some(&bad) = row.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(t)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rows: usize, t: usize, mode: &mut Mode) -> Result<Var> {
        let p = self.config.dropout_rate;
        let Mode::Train(rngs) = mode else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let d = g.value(x).last_dim();
        let keep = 1.0 / (1.0 - p);
        let mut mask = Vec::with_capacity(rows * t * d);
        for rng in rngs.iter_mut().take(rows) {
            for _ in 0..t * d {
                mask.push(if rng.random::<f64>() < p { 0.0 } else { keep });
            }
        }
        let m = g.input(Tensor::new(g.shape(x).to_vec(), mask)?);
        g.mul(x, m)
    }

    /// Runs the network on `rows` (all of equal length), recording onto `g`.
    /// Positions at or beyond `valid_lens[r]` are padding and are ignored as
    /// attention keys. Returns log-probabilities shaped `[rows * len, vocab]`.
    pub fn forward(&self, g: &mut Graph, rows: &[Vec<usize>], valid_lens: &[usize], mut mode: Mode) -> Result<Var> {
        let t = self.check_input(rows, valid_lens)?;
        if let Mode::Train(r) = &mode {
            if r.len() < rows.len() {
                return Err(Error::Input("one dropout stream per row required".into()));
            }
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let b = rows.len();
        let c = &self.config;
        let (d, h, dh) = (c.d_model, c.n_heads, c.head_dim());
        let flat: Vec<usize> = rows.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();

        let tok = g.param(self.layout.tok_emb);
        let pos = g.param(self.layout.pos_emb);
        let te = g.embedding(tok, &flat)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        x = self.dropout(g, x, b, t, &mut mode)?;

        let pad_bias = if valid_lens.iter().any(|&v| v < t) {
            let mut bias = vec![0.0; b * t];
            for (r, &v) in valid_lens.iter().enumerate() {
                bias[r * t + v..(r + 1) * t].fill(PAD_BIAS);
            }
            Some(g.input(Tensor::new(vec![b, 1, 1, t], bias)?))
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();

        for blk in &self.blocks {
            let (g1, b1) = (g.param(blk.ln1_g), g.param(blk.ln1_b));
            let hn = g.layer_norm(x, g1, b1)?;
            let heads = |w: ParamId, bias: ParamId, g: &mut Graph| -> Result<Var> {
                let (wv, bv) = (g.param(w), g.param(bias));
                let y = g.matmul(hn, wv)?;
                let y = g.add(y, bv)?;
                let y = g.reshape(y, &[b, t, h, dh])?;
                g.permute(y, &[0, 2, 1, 3])
            };
            let q = heads(blk.wq, blk.bq, g)?;
            let k = heads(blk.wk, blk.bk, g)?;
            let v = heads(blk.wv, blk.bv, g)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(pb) = pad_bias {
                scores = g.add(scores, pb)?;
            }
            let att = g.softmax(scores)?;
            let o = g.matmul(att, v)?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[b * t, d])?;
            let (wo, bo) = (g.param(blk.wo), g.param(blk.bo));
            let o = g.matmul(o, wo)?;
            let o = g.add(o, bo)?;
            let o = self.dropout(g, o, b, t, &mut mode)?;
            x = g.add(x, o)?;

            let (g2, b2) = (g.param(blk.ln2_g), g.param(blk.ln2_b));
            let hn = g.layer_norm(x, g2, b2)?;
            let (w1, bias1) = (g.param(blk.w1), g.param(blk.b1));
            let m = g.matmul(hn, w1)?;
            let m = g.add(m, bias1)?;
            let m = g.gelu(m)?;
            let (w2, bias2) = (g.param(blk.w2), g.param(blk.b2));
            let m = g.matmul(m, w2)?;
            let m = g.add(m, bias2)?;
            let m = self.dropout(g, m, b, t, &mut mode)?;
            x = g.add(x, m)?;
        }

        let (gf, bf) = (g.param(self.layout.lnf_g), g.param(self.layout.lnf_b));
        let x = g.layer_norm(x, gf, bf)?;
        let (wo, bo) = (g.param(self.layout.w_out), g.param(self.layout.b_out));
        let logits = g.matmul(x, wo)?;
        let logits = g.add(logits, bo)?;
        g.log_softmax(logits)
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn predict(&self, rows: &[Vec<usize>], valid_lens: &[usize]) -> Result<DenoiserOutput> {
        let mut g = Graph::new(&self.params);
        let lp = self.forward(&mut g, rows, valid_lens, Mode::Eval)?;
        let t = rows[0].len();
        let log_probs = g.value(lp).reshaped(&[rows.len(), t, self.config.vocab_size])?;
        Ok(DenoiserOutput { log_probs })
    }

    /// Probability of the clean token at every masked position of `corrupted`.
    pub fn confidence(&self, corrupted: &CorruptedSequence, clean: &TokenSequence) -> Result<Vec<(usize, f64)>> {
        self.confidence_at(corrupted, clean, &corrupted.mask_set)
    }

    /// Like [`Denoiser::confidence`] but for chosen positions, each of which
    /// must be masked.
    pub fn confidence_at(
        &self,
        corrupted: &CorruptedSequence,
        clean: &TokenSequence,
        positions: &[usize],
    ) -> Result<Vec<(usize, f64)>> {
        if let Some(&p) = positions.iter().find(|&&p| !corrupted.is_masked(p)) {
            return Err(Error::Contract(format!("confidence requested at unmasked position {p}")));
        }
        let out = self.predict(std::slice::from_ref(&corrupted.ids), &[clean.content_len()])?;
        Ok(positions
            .iter()
            .map(|&p| (p, out.at(0, p)[clean.ids[p]].exp()))
            .collect())
    }
}
