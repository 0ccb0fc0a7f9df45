//! Training objectives.
//!
//! Every objective reduces to the same shape: pick an input sequence for
//! the loss pass, a set of supervised positions and a weight, then sum
//! `-weight * w_k * log p(x0_k | input)` over the supervised positions.
//! What differs is how the input and positions are chosen:
//!
//! | kind       | input             | supervised            | weight        |
//! |------------|-------------------|-----------------------|---------------|
//! | vanilla    | `x_t`             | `M_t`                 | `1/t`         |
//! | lift       | `x_t` (remasked)  | `S_t`                 | `1/t`         |
//! | lift_a     | `x_{t+rho}`       | `S_t`                 | `1/(t+rho)`   |
//! | top_k ...  | as lift, regime forced or drawn at random             |
//! | gift       | entropy-guided    | realized mask set     | `1/t`         |
//! | cart       | `x_t`             | `M_t`, `w_k` by context | `1/t`       |
//!
//! `S_t` comes from [`select_subset`]: below `1/H` the `K` least confident
//! candidates, at or above `1 - 1/H` the `K` most confident, and in between
//! a thinning of the probe mask set that keeps each candidate with
//! probability `t / (t + rho)`, which reproduces the law of `M_t`.
//! `K = floor(t * response_len)`, clamped to the candidate count; ties go to
//! the lower position.
//!
//! Confidence passes (LIFT's probe pass, GIFT's entropy pass) run in
//! evaluation mode outside the gradient graph.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::TokenSequence;
use crate::diffusion::{self, CorruptedSequence, MaskingMode, RhoStrategy, TimestepDraw};
use crate::error::{Error, Result};
use crate::model::{Denoiser, Mode};
use crate::rng::{self, Stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Vanilla,
    Lift,
    LiftA,
    TopK,
    BottomK,
    Random2,
    Random3,
    Gift,
    Cart,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 9] = [
        ObjectiveKind::Vanilla,
        ObjectiveKind::Lift,
        ObjectiveKind::LiftA,
        ObjectiveKind::TopK,
        ObjectiveKind::BottomK,
        ObjectiveKind::Random2,
        ObjectiveKind::Random3,
        ObjectiveKind::Gift,
        ObjectiveKind::Cart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vanilla => "vanilla",
            ObjectiveKind::Lift => "lift",
            ObjectiveKind::LiftA => "lift_a",
            ObjectiveKind::TopK => "top_k",
            ObjectiveKind::BottomK => "bottom_k",
            ObjectiveKind::Random2 => "random2",
            ObjectiveKind::Random3 => "random3",
            ObjectiveKind::Gift => "gift",
            ObjectiveKind::Cart => "cart",
        }
    }

    /// Whether the objective builds a probe input at `t + rho` and selects from it.
    pub fn uses_selection(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Lift
                | ObjectiveKind::LiftA
                | ObjectiveKind::TopK
                | ObjectiveKind::BottomK
                | ObjectiveKind::Random2
                | ObjectiveKind::Random3
        )
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective kind {s:?}")))
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(rename = "H")]
    pub h: u64,
    pub rho: RhoStrategy,
    pub cart_window: usize,
    pub gift_exponent: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Vanilla,
            h: 3,
            rho: RhoStrategy::Uniform,
            cart_window: 8,
            gift_exponent: 0.5,
        }
    }
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn with_h(mut self, h: u64) -> Self {
        self.h = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 {
            return Err(Error::Config(format!("H must be at least 2, got {}", self.h)));
        }
        if self.cart_window == 0 {
            return Err(Error::Config("cart_window must be positive".into()));
        }
        if !(self.gift_exponent.is_finite() && self.gift_exponent >= 0.0) {
            return Err(Error::Config(format!("gift_exponent must be finite and >= 0, got {}", self.gift_exponent)));
        }
        self.rho.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Bottom,
    Vanilla,
    Top,
}

/// Regime for diffusion time `t` under parameter `h`: `[0, 1/h)` bottom,
/// `[1/h, 1 - 1/h)` vanilla, `[1 - 1/h, 1]` top.
pub fn regime_for(t: f64, h: u64) -> Regime {
    let edge = 1.0 / h as f64;
    if t < edge {
        Regime::Bottom
    } else if t >= 1.0 - edge {
        Regime::Top
    } else {
        Regime::Vanilla
    }
}

/// Number of tokens to supervise: `floor(t * response_len)`.
pub fn budget(t: f64, response_len: usize) -> usize {
    (t * response_len as f64).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Sorted selected positions `S_t`.
    pub selected: Vec<usize>,
    pub regime: Regime,
    pub k: usize,
    pub confidences: BTreeMap<usize, f64>,
}

/// Selection in an explicit regime. `candidates` and `confidences` are aligned.
///
/// Top and bottom regimes take `min(K, |candidates|)` positions by confidence,
/// breaking ties by lower position. The vanilla regime keeps each candidate
/// independently with probability `t / (t + rho)`, drawing one uniform per
/// candidate in position order.
pub fn select_in_regime(
    candidates: &[usize],
    confidences: &[f64],
    t: f64,
    rho: f64,
    regime: Regime,
    response_len: usize,
    rng: &mut impl Rng,
) -> SelectionResult {
    assert_eq!(candidates.len(), confidences.len(), "one confidence per candidate");
    let k = budget(t, response_len).min(candidates.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let selected: Vec<usize> = match regime {
        Regime::Vanilla => {
            let keep = if t + rho > 0.0 { t / (t + rho) } else { 1.0 };
            candidates.iter().copied().filter(|_| rng.random::<f64>() < keep).collect()
        }
        Regime::Top | Regime::Bottom => {
            order.sort_by(|&a, &b| {
                let by_conf = if regime == Regime::Top {
                    confidences[b].total_cmp(&confidences[a])
                } else {
                    confidences[a].total_cmp(&confidences[b])
                };
                by_conf.then(candidates[a].cmp(&candidates[b]))
            });
            let mut s: Vec<usize> = order[..k].iter().map(|&i| candidates[i]).collect();
            s.sort_unstable();
            s
        }
    };
    SelectionResult {
        selected,
        regime,
        k,
        confidences: candidates.iter().copied().zip(confidences.iter().copied()).collect(),
    }
}

/// Selection with the regime chosen from `t` and `h`.
#[allow(clippy::too_many_arguments)]
pub fn select_subset(
    candidates: &[usize],
    confidences: &[f64],
    t: f64,
    rho: f64,
    h: u64,
    response_len: usize,
    rng: &mut impl Rng,
) -> SelectionResult {
    select_in_regime(candidates, confidences, t, rho, regime_for(t, h), response_len, rng)
}

/// Regime an objective uses at time `t`; `None` for non-selecting objectives.
pub fn choose_regime(spec: &ObjectiveSpec, t: f64, rng: &mut impl Rng) -> Option<Regime> {
    match spec.kind {
        ObjectiveKind::Lift | ObjectiveKind::LiftA => Some(regime_for(t, spec.h)),
        ObjectiveKind::TopK => Some(Regime::Top),
        ObjectiveKind::BottomK => Some(Regime::Bottom),
        ObjectiveKind::Random2 => Some(if rng.random::<bool>() { Regime::Top } else { Regime::Bottom }),
        ObjectiveKind::Random3 => Some([Regime::Top, Regime::Bottom, Regime::Vanilla][rng.random_range(0..3)]),
        _ => None,
    }
}

/// CART weight: the fraction of in-range neighbours within `window` of
/// `pos` (excluding `pos`) that are unmasked. Padding is out of range.
pub fn cart_weight(pos: usize, content_len: usize, mask_set: &[usize], window: usize) -> f64 {
    let lo = pos.saturating_sub(window);
    let hi = (pos + window).min(content_len.saturating_sub(1));
    let mut total = 0usize;
    let mut unmasked = 0usize;
    for j in lo..=hi {
        if j == pos {
            continue;
        }
        total += 1;
        if mask_set.binary_search(&j).is_err() {
            unmasked += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unmasked as f64 / total as f64
    }
}

/// Entropy (natural log) of a distribution given as log-probabilities.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|&lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 }).sum::<f64>()
}

/// GIFT masking probabilities from per-position entropies:
/// `q_k = min(1, t * h_k^e / mean(h^e))`, or `t` everywhere when all
/// entropies vanish.
pub fn gift_probabilities(entropies: &[f64], t: f64, exponent: f64) -> Vec<f64> {
    let powered: Vec<f64> = entropies.iter().map(|h| h.max(0.0).powf(exponent)).collect();
    let mean = powered.iter().sum::<f64>() / powered.len().max(1) as f64;
    if mean <= 0.0 {
        return vec![t; entropies.len()];
    }
    powered.iter().map(|p| (t * p / mean).min(1.0)).collect()
}

/// Independent randomness for one example's objective.
#[derive(Clone, Debug)]
pub struct ExampleRngs {
    pub masking: StreamRng,
    pub selection: StreamRng,
    pub regime: StreamRng,
}

impl ExampleRngs {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        ExampleRngs {
            masking: rng::stream(seed, Stream::Masking, path),
            selection: rng::stream(seed, Stream::Selection, path),
            regime: rng::stream(seed, Stream::Regime, path),
        }
    }
}

/// Loss of one example. `value = weight * sum(contributions)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Per supervised position: `-w_k * log p(x0_k | input)`.
    pub contributions: BTreeMap<usize, f64>,
    pub weight: f64,
    pub skipped: bool,
    pub draw: TimestepDraw,
    pub regime: Option<Regime>,
    pub selection: Option<SelectionResult>,
    /// Ids fed to the loss pass.
    pub input: Vec<usize>,
}

/// Batch loss. `sum` is the graph node for the total over active examples.
#[derive(Debug)]
pub struct BatchLoss {
    pub sum: Option<Var>,
    pub examples: Vec<LossValue>,
}

impl BatchLoss {
    pub fn active(&self) -> usize {
        self.examples.iter().filter(|e| !e.skipped).count()
    }

    pub fn total(&self) -> f64 {
        self.examples.iter().map(|e| e.value).sum()
    }

    /// Mean over non-skipped examples; `None` when every example skipped.
    pub fn mean(&self) -> Option<f64> {
        let n = self.active();
        (n > 0).then(|| self.total() / n as f64)
    }
}

/// Fixed inputs of an objective evaluation besides model and data.
#[derive(Clone, Copy, Debug)]
pub struct LossContext {
    pub spec: ObjectiveSpec,
    pub mask_id: usize,
    pub masking: MaskingMode,
}

impl LossContext {
    pub fn new(spec: ObjectiveSpec, mask_id: usize) -> Self {
        LossContext {
            spec,
            mask_id,
            masking: MaskingMode::Bernoulli,
        }
    }
}

struct Pending {
    input: CorruptedSequence,
    weight: f64,
    supervised: Vec<(usize, f64)>,
    regime: Option<Regime>,
    selection: Option<SelectionResult>,
}

fn confidences_at(lp: &Tensor, row_offset: usize, positions: &[usize], targets: &[usize]) -> Vec<f64> {
    positions.iter().map(|&p| lp.row(row_offset + p)[targets[p]].exp()).collect()
}

/// Loss over a batch of equally long sequences under `ctx.spec`.
///
/// `targets` overrides the ground-truth ids read by the loss (not by
/// corruption, unmasking or confidence); it defaults to the sequences'
/// own ids. `dropout` switches the loss pass to training mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    model: &Denoiser,
    seqs: &[TokenSequence],
    draws: &[TimestepDraw],
    ctx: &LossContext,
    rngs: &mut [ExampleRngs],
    dropout: Option<&mut [StreamRng]>,
    targets: Option<&[Vec<usize>]>,
) -> Result<BatchLoss> {
    let spec = &ctx.spec;
    spec.validate()?;
    let b = seqs.len();
    if b == 0 || draws.len() != b || rngs.len() != b || targets.is_some_and(|t| t.len() != b) {
        return Err(Error::Contract("batch_loss: inputs must be non-empty and aligned".into()));
    }
    let t_len = seqs[0].len();
    if seqs.iter().any(|s| s.len() != t_len) {
        return Err(Error::Contract("batch_loss: sequences must share one padded length".into()));
    }
    let valid: Vec<usize> = seqs.iter().map(TokenSequence::content_len).collect();
    let kind = spec.kind;

    // Corruption, and any detached probe pass.
    let mut pending: Vec<Pending> = Vec::with_capacity(b);
    for (i, s) in seqs.iter().enumerate() {
        let d = draws[i];
        let r = &mut rngs[i];
        let regime = choose_regime(spec, d.t, &mut r.regime);
        let p = if kind.uses_selection() {
            let input = diffusion::corrupt_with(s, d.probe_rate(), ctx.mask_id, ctx.masking, &mut r.masking);
            let weight = if kind == ObjectiveKind::LiftA { 1.0 / d.probe_rate() } else { 1.0 / d.t };
            Pending { input, weight, supervised: Vec::new(), regime, selection: None }
        } else if kind == ObjectiveKind::Gift {
            Pending { input: diffusion::mask_all(s, ctx.mask_id), weight: 1.0 / d.t, supervised: Vec::new(), regime, selection: None }
        } else {
            let input = diffusion::corrupt_with(s, d.t, ctx.mask_id, ctx.masking, &mut r.masking);
            let supervised = input
                .mask_set
                .iter()
                .map(|&k| {
                    let w = if kind == ObjectiveKind::Cart {
                        cart_weight(k, s.content_len(), &input.mask_set, spec.cart_window)
                    } else {
                        1.0
                    };
                    (k, w)
                })
                .collect();
            Pending { input, weight: 1.0 / d.t, supervised, regime, selection: None }
        };
        pending.push(p);
    }

    let probe = kind.uses_selection() && kind != ObjectiveKind::LiftA || kind == ObjectiveKind::Gift;
    if probe {
        let rows: Vec<Vec<usize>> = pending.iter().map(|p| p.input.ids.clone()).collect();
        let out = model.predict(&rows, &valid)?;
        let v = out.vocab();
        let flat = out.log_probs.reshaped(&[b * t_len, v])?;
        for (i, s) in seqs.iter().enumerate() {
            let p = &mut pending[i];
            let lp = out.log_probs.data();
            let off = i * t_len;
            if kind == ObjectiveKind::Gift {
                let positions: Vec<usize> = s.response_range().collect();
                let ent: Vec<f64> = positions
                    .iter()
                    .map(|&k| entropy(&lp[(off + k) * v..(off + k + 1) * v]))
                    .collect();
                let q = gift_probabilities(&ent, draws[i].t, spec.gift_exponent);
                let masked: BTreeSet<usize> = positions
                    .iter()
                    .zip(&q)
                    .filter(|(_, &qk)| rngs[i].masking.random::<f64>() < qk)
                    .map(|(&k, _)| k)
                    .collect();
                p.input = diffusion::mask_positions(s, &masked, ctx.mask_id, draws[i].t)?;
                p.supervised = p.input.mask_set.iter().map(|&k| (k, 1.0)).collect();
            } else {
                let cand = p.input.mask_set.clone();
                let conf = confidences_at(&flat, off, &cand, &s.ids);
                let sel = select_in_regime(
                    &cand,
                    &conf,
                    draws[i].t,
                    draws[i].rho,
                    p.regime.expect("selecting objective has a regime"),
                    s.response_len,
                    &mut rngs[i].selection,
                );
                let chosen: BTreeSet<usize> = sel.selected.iter().copied().collect();
                let drop: BTreeSet<usize> = cand.iter().copied().filter(|k| !chosen.contains(k)).collect();
                p.input = diffusion::unmask_positions(&p.input, s, &drop)?;
                p.supervised = sel.selected.iter().map(|&k| (k, 1.0)).collect();
                p.selection = Some(sel);
            }
        }
    }

    // Loss pass.
    let rows: Vec<Vec<usize>> = pending.iter().map(|p| p.input.ids.clone()).collect();
    let mode = match dropout {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let lp = model.forward(g, &rows, &valid, mode)?;

    if kind == ObjectiveKind::LiftA {
        let vals = g.value(lp).clone();
        for (i, s) in seqs.iter().enumerate() {
            let p = &mut pending[i];
            let cand = p.input.mask_set.clone();
            let conf = confidences_at(&vals, i * t_len, &cand, &s.ids);
            let sel = select_in_regime(
                &cand,
                &conf,
                draws[i].t,
                draws[i].rho,
                p.regime.expect("selecting objective has a regime"),
                s.response_len,
                &mut rngs[i].selection,
            );
            p.supervised = sel.selected.iter().map(|&k| (k, 1.0)).collect();
            p.selection = Some(sel);
        }
    }

    let mut gather_rows = Vec::new();
    let mut gather_cols = Vec::new();
    let mut coefs = Vec::new();
    let mut examples = Vec::with_capacity(b);
    {
        let vals = g.value(lp);
        for (i, (p, s)) in pending.into_iter().zip(seqs).enumerate() {
            let tgt: &[usize] = targets.map_or(&s.ids, |t| &t[i]);
            let mut contributions = BTreeMap::new();
            let mut sum = 0.0;
            for &(k, w) in &p.supervised {
                let row = i * t_len + k;
                let c = -w * vals.row(row)[tgt[k]];
                contributions.insert(k, c);
                sum += c;
                gather_rows.push(row);
                gather_cols.push(tgt[k]);
                coefs.push(-w * p.weight);
            }
            let skipped = p.supervised.is_empty();
            examples.push(LossValue {
                value: if skipped { 0.0 } else { p.weight * sum },
                contributions,
                weight: p.weight,
                skipped,
                draw: draws[i],
                regime: p.regime,
                selection: p.selection,
                input: p.input.ids,
            });
        }
    }
    let sum = if coefs.is_empty() {
        None
    } else {
        let picked = g.gather(lp, &gather_rows, &gather_cols)?;
        let c = g.input(Tensor::vector(coefs));
        let weighted = g.mul(picked, c)?;
        Some(g.sum(weighted)?)
    };
    Ok(BatchLoss { sum, examples })
}

/// Loss of a single example under `ctx.spec`, evaluation mode. Returns the
/// loss node (absent when skipped) and its value record.
pub fn example_loss(
    g: &mut Graph,
    model: &Denoiser,
    clean: &TokenSequence,
    draw: TimestepDraw,
    ctx: &LossContext,
    rngs: &mut ExampleRngs,
) -> Result<(Option<Var>, LossValue)> {
    let mut r = [rngs.clone()];
    let out = batch_loss(g, model, std::slice::from_ref(clean), &[draw], ctx, &mut r, None, None)?;
    *rngs = r[0].clone();
    let lv = out.examples.into_iter().next().expect("one example");
    Ok((out.sum, lv))
}

fn with_kind(ctx: &LossContext, kind: ObjectiveKind) -> LossContext {
    let mut c = *ctx;
    c.spec.kind = kind;
    c
}

/// `-(1/t) * sum_{k in M_t} log p(x0_k | x_t)`.
pub fn nelbo_vanilla(g: &mut Graph, model: &Denoiser, clean: &TokenSequence, t: f64, ctx: &LossContext, rngs: &mut ExampleRngs) -> Result<(Option<Var>, LossValue)> {
    example_loss(g, model, clean, TimestepDraw::new(t, 0.0)?, &with_kind(ctx, ObjectiveKind::Vanilla), rngs)
}

/// Two-pass LIFT: probe at `t + rho`, select, remask, supervise `S_t` at `x_t`.
pub fn loss_lift(g: &mut Graph, model: &Denoiser, clean: &TokenSequence, draw: TimestepDraw, ctx: &LossContext, rngs: &mut ExampleRngs) -> Result<(Option<Var>, LossValue)> {
    example_loss(g, model, clean, draw, &with_kind(ctx, ObjectiveKind::Lift), rngs)
}

/// Single-pass LIFT-A: supervise `S_t` directly at `x_{t+rho}`.
pub fn loss_lift_a(g: &mut Graph, model: &Denoiser, clean: &TokenSequence, draw: TimestepDraw, ctx: &LossContext, rngs: &mut ExampleRngs) -> Result<(Option<Var>, LossValue)> {
    example_loss(g, model, clean, draw, &with_kind(ctx, ObjectiveKind::LiftA), rngs)
}

/// LIFT plumbing with the regime fixed (`top_k`, `bottom_k`) or drawn
/// per example (`random2`, `random3`).
pub fn loss_ablation(
    g: &mut Graph,
    model: &Denoiser,
    clean: &TokenSequence,
    draw: TimestepDraw,
    kind: ObjectiveKind,
    ctx: &LossContext,
    rngs: &mut ExampleRngs,
) -> Result<(Option<Var>, LossValue)> {
    if !matches!(kind, ObjectiveKind::TopK | ObjectiveKind::BottomK | ObjectiveKind::Random2 | ObjectiveKind::Random3) {
        return Err(Error::Config(format!("{kind} is not an ablation objective")));
    }
    example_loss(g, model, clean, draw, &with_kind(ctx, kind), rngs)
}

/// Entropy-guided masking from the all-masked input, weighted `1/t`.
pub fn loss_gift(g: &mut Graph, model: &Denoiser, clean: &TokenSequence, t: f64, ctx: &LossContext, rngs: &mut ExampleRngs) -> Result<(Option<Var>, LossValue)> {
    example_loss(g, model, clean, TimestepDraw::new(t, 0.0)?, &with_kind(ctx, ObjectiveKind::Gift), rngs)
}

/// Context-weighted NELBO.
pub fn loss_cart(g: &mut Graph, model: &Denoiser, clean: &TokenSequence, t: f64, ctx: &LossContext, rngs: &mut ExampleRngs) -> Result<(Option<Var>, LossValue)> {
    example_loss(g, model, clean, TimestepDraw::new(t, 0.0)?, &with_kind(ctx, ObjectiveKind::Cart), rngs)
}
