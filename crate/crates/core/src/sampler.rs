//! Reverse-diffusion decoding.
//!
//! The response starts fully masked. Each step runs one forward pass over
//! the whole batch, proposes a token for every masked position, and commits
//! `tokens_per_step` of them: the most confident under the `confidence`
//! strategy, a uniform random choice under `random`. Committed tokens are
//! never revisited. `[MASK]` and `[PAD]` are never proposed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemaskStrategy {
    #[default]
    Confidence,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub gen_len: usize,
    pub steps: usize,
    pub tokens_per_step: usize,
    pub temperature: f64,
    pub remask_strategy: RemaskStrategy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            gen_len: 64,
            steps: 32,
            tokens_per_step: 2,
            temperature: 0.0,
            remask_strategy: RemaskStrategy::Confidence,
        }
    }
}

impl DecodeConfig {
    /// Sizes `steps` so that `tokens_per_step` tokens per step fill `gen_len`.
    pub fn for_length(gen_len: usize, tokens_per_step: usize) -> Self {
        DecodeConfig {
            gen_len,
            steps: gen_len.div_ceil(tokens_per_step),
            tokens_per_step,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_len == 0 || self.steps == 0 || self.tokens_per_step == 0 {
            return Err(Error::Config("gen_len, steps and tokens_per_step must be positive".into()));
        }
        if self.steps * self.tokens_per_step < self.gen_len {
            return Err(Error::Config(format!(
                "steps ({}) x tokens_per_step ({}) must cover gen_len ({})",
                self.steps, self.tokens_per_step, self.gen_len
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Ids the sampler must know about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub mask_id: usize,
    pub pad_id: usize,
}

/// Trace of one decode, for tests and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    /// Masked response positions remaining after each step, per row.
    pub masks_after_step: Vec<Vec<usize>>,
}

/// Proposed token and its probability at one position.
fn propose(log_probs: &[f64], banned: SpecialIds, temperature: f64, rng: &mut impl Rng) -> (usize, f64) {
    let allowed = |i: usize| i != banned.mask_id && i != banned.pad_id;
    if temperature == 0.0 {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, &lp) in log_probs.iter().enumerate() {
            if allowed(i) && (best.0 == usize::MAX || lp > best.1) {
                best = (i, lp);
            }
        }
        let z: f64 = log_probs.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(_, lp)| lp.exp()).sum();
        return (best.0, best.1.exp() / z);
    }
    let scaled: Vec<f64> = log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| if allowed(i) { lp / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * z;
    let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("some allowed token");
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && u < w {
            pick = i;
            break;
        }
        u -= w;
    }
    (pick, weights[pick] / z)
}

/// Decodes `gen_len` response tokens for each prompt. One rng per prompt.
pub fn generate_batch(
    model: &Denoiser,
    prompts: &[Vec<usize>],
    cfg: &DecodeConfig,
    ids: SpecialIds,
    rngs: &mut [StreamRng],
) -> Result<Vec<Vec<usize>>> {
    Ok(generate_traced(model, prompts, cfg, ids, rngs)?.0)
}

pub fn generate_traced(
    model: &Denoiser,
    prompts: &[Vec<usize>],
    cfg: &DecodeConfig,
    ids: SpecialIds,
    rngs: &mut [StreamRng],
) -> Result<(Vec<Vec<usize>>, DecodeTrace)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Ok((Vec::new(), DecodeTrace::default()));
    }
    if rngs.len() != prompts.len() {
        return Err(Error::Contract("one rng per prompt required".into()));
    }
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let width = longest + cfg.gen_len;
    if width > model.config().max_seq_len {
        return Err(Error::Input(format!(
            "prompt of {longest} tokens plus gen_len {} exceeds max_seq_len {}",
            cfg.gen_len,
            model.config().max_seq_len
        )));
    }
    let mut rows: Vec<Vec<usize>> = prompts
        .iter()
        .map(|p| {
            let mut r = p.clone();
            r.resize(p.len() + cfg.gen_len, ids.mask_id);
            r.resize(width, ids.pad_id);
            r
        })
        .collect();
    let valid: Vec<usize> = prompts.iter().map(|p| p.len() + cfg.gen_len).collect();
    let mut masked: Vec<Vec<usize>> = prompts.iter().map(|p| (p.len()..p.len() + cfg.gen_len).collect()).collect();
    let mut trace = DecodeTrace::default();

    while masked.iter().any(|m| !m.is_empty()) {
        let out = model.predict(&rows, &valid)?;
        let mut after = Vec::with_capacity(rows.len());
        for (r, rng) in rngs.iter_mut().enumerate() {
            if masked[r].is_empty() {
                after.push(0);
                continue;
            }
            let props: Vec<(usize, usize, f64)> = masked[r]
                .iter()
                .map(|&p| {
                    let (tok, conf) = propose(out.at(r, p), ids, cfg.temperature, rng);
                    (p, tok, conf)
                })
                .collect();
            let n = cfg.tokens_per_step.min(props.len());
            let chosen: Vec<usize> = match cfg.remask_strategy {
                RemaskStrategy::Confidence => {
                    let mut order: Vec<usize> = (0..props.len()).collect();
                    order.sort_by(|&a, &b| props[b].2.total_cmp(&props[a].2).then(props[a].0.cmp(&props[b].0)));
                    order.truncate(n);
                    order
                }
                RemaskStrategy::Random => rand::seq::index::sample(rng, props.len(), n).into_vec(),
            };
            for &c in &chosen {
                let (p, tok, _) = props[c];
                rows[r][p] = tok;
            }
            let committed: Vec<usize> = chosen.iter().map(|&c| props[c].0).collect();
            masked[r].retain(|p| !committed.contains(p));
            after.push(masked[r].len());
        }
        trace.masks_after_step.push(after);
    }
    let responses = rows
        .into_iter()
        .zip(prompts)
        .map(|(r, p)| r[p.len()..p.len() + cfg.gen_len].to_vec())
        .collect();
    Ok((responses, trace))
}

/// Single-prompt convenience wrapper.
pub fn generate(model: &Denoiser, prompt: &[usize], cfg: &DecodeConfig, ids: SpecialIds, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let mut r = [rng.clone()];
    let out = generate_batch(model, &[prompt.to_vec()], cfg, ids, &mut r)?;
    *rng = r[0].clone();
    Ok(out.into_iter().next().expect("one response"))
}
