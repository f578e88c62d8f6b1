//! The single-turn improvement step: clipped PPO on responses to prompts,
//! with a frozen Q̂ as the terminal reward and an exact per-position KL
//! penalty.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ConversationState, Message, SuggestedAction, TokenId, Turn};
use crate::oracle::{kl, KlDirection};
use crate::policy::{PolicyParams, StateKey};
use crate::q_eval::ResponseScorer;
use crate::responses::ResponseSpace;

/// Flat, injective text encoding of a live conversation state.
///
/// Turns are separated by `;` and each turn is
/// `customer/outcome/suggestion/business`. Messages are dot-separated token
/// ids, `_` is the empty message, `-` an absent field and `~` an abstention.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptContext {
    pub serialized_state: String,
    /// Context index of the state.
    pub origin_state_id: usize,
}

fn encode_msg(m: &Message, out: &mut String) {
    if m.is_empty() {
        out.push('_');
        return;
    }
    for (i, t) in m.tokens().iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        out.push_str(&t.0.to_string());
    }
}

fn decode_msg(s: &str) -> Result<Message> {
    if s == "_" {
        return Ok(Message::empty());
    }
    s.split('.')
        .map(|t| {
            t.parse::<u32>()
                .map(TokenId)
                .map_err(|_| Error::Data(format!("bad token {t:?} in prompt")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Message)
}

pub fn encode_state(state: &ConversationState) -> String {
    let mut out = String::new();
    for (i, t) in state.turns.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        encode_msg(&t.customer_msg, &mut out);
        out.push_str(if t.outcome { "/1/" } else { "/0/" });
        match &t.suggestion {
            None => out.push('-'),
            Some(SuggestedAction::Abstain) => out.push('~'),
            Some(SuggestedAction::Respond(m)) => encode_msg(m, &mut out),
        }
        out.push('/');
        match &t.business_msg {
            None => out.push('-'),
            Some(m) => encode_msg(m, &mut out),
        }
    }
    out
}

pub fn decode_state(s: &str) -> Result<ConversationState> {
    let mut turns = Vec::new();
    for part in s.split(';') {
        let f: Vec<&str> = part.split('/').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("bad turn {part:?} in prompt")));
        }
        let outcome = match f[1] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Data(format!("bad outcome flag {other:?}"))),
        };
        let suggestion = match f[2] {
            "-" => None,
            "~" => Some(SuggestedAction::Abstain),
            m => Some(SuggestedAction::Respond(decode_msg(m)?)),
        };
        let business_msg = match f[3] {
            "-" => None,
            m => Some(decode_msg(m)?),
        };
        turns.push(Turn {
            customer_msg: decode_msg(f[0])?,
            outcome,
            suggestion,
            business_msg,
        });
    }
    let state = ConversationState {
        turns,
        terminal: None,
    };
    state.validate(None)?;
    Ok(state)
}

impl PromptContext {
    pub fn state(&self) -> Result<ConversationState> {
        decode_state(&self.serialized_state)
    }
}

pub fn build_prompt(
    state: &ConversationState,
    catalog: &crate::env::MessageCatalog,
) -> Result<PromptContext> {
    if let Some(r) = state.terminal {
        return Err(Error::Absorbing(r.to_string()));
    }
    state.validate(None)?;
    Ok(PromptContext {
        serialized_state: encode_state(state),
        origin_state_id: catalog.context_index(state)?,
    })
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> Result<f64> {
    if !ratio.is_finite() || !advantage.is_finite() || !clip_epsilon.is_finite() {
        return Err(Error::Numerical(
            "clipped surrogate needs finite inputs".into(),
        ));
    }
    if ratio <= 0.0 {
        return Err(Error::Numerical(format!(
            "ratio must be positive, got {ratio}"
        )));
    }
    Ok(clip_term(ratio, advantage, clip_epsilon).0)
}

/// Surrogate value and whether its gradient passes through the ratio.
fn clip_term(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let a = ratio * adv;
    let b = clipped * adv;
    if a <= b {
        (a, true)
    } else {
        (b, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    None,
    /// Mean score of the responses sampled for the same prompt.
    Mean,
    /// Per-context mean score over the whole batch.
    LearnedValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioLevel {
    /// One ratio per generated token, each carrying the response's advantage.
    Token,
    /// One ratio for the whole response.
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Responses sampled from the current policy.
    Sampled,
    /// Every response of the (small) response space, weighted by its
    /// current probability.
    Enumerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub kl_direction: KlDirection,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    pub epochs_per_batch: usize,
    pub baseline_mode: BaselineMode,
    pub samples_per_prompt: usize,
    pub ratio_level: RatioLevel,
    pub estimator: Estimator,
    /// Abort the epoch and keep the previous parameters when the mean KL
    /// exceeds this.
    pub kl_ceiling: f64,
    /// Reject epochs that lower the batch objective, halving the step.
    pub monotone: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            kl_coef: 0.0,
            kl_direction: KlDirection::Reverse,
            learning_rate: 0.5,
            minibatch_size: 256,
            epochs_per_batch: 4,
            baseline_mode: BaselineMode::Mean,
            samples_per_prompt: 4,
            ratio_level: RatioLevel::Token,
            estimator: Estimator::Sampled,
            kl_ceiling: 5.0,
            monotone: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("ppo: {what}")));
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if !(self.kl_coef >= 0.0) || !self.kl_coef.is_finite() {
            return bad("kl_coef must be a finite number ≥ 0");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be ≥ 0");
        }
        if self.minibatch_size == 0 || self.samples_per_prompt == 0 {
            return bad("minibatch_size and samples_per_prompt must be positive");
        }
        if !(self.kl_ceiling > 0.0) {
            return bad("kl_ceiling must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub surrogate: f64,
    pub mean_kl: f64,
    pub objective: f64,
    pub accepted: bool,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Mean per-response KL in the configured direction, along the batch.
    pub mean_kl: f64,
    /// Best epoch objective minus the final objective.
    pub optimization_slack_proxy: f64,
    /// Fraction of distinct prompt contexts where E_new[Q̂] ≥ E_old[Q̂].
    pub local_improvement_rate: f64,
    pub n_prompts: usize,
    pub n_items: usize,
    pub diverged: bool,
    pub epochs: Vec<EpochStats>,
}

/// One response in the batch, with everything the update needs from the
/// old policy.
#[derive(Clone, Debug)]
struct Item {
    key: StateKey,
    slots: Vec<usize>,
    events: Vec<usize>,
    old_lp: Vec<f64>,
    old_dists: Vec<Vec<f64>>,
    score: f64,
    adv: f64,
    weight: f64,
    group: usize,
}

fn make_item(
    params: &PolicyParams,
    key: StateKey,
    action: &SuggestedAction,
    score: f64,
    weight: f64,
    group: usize,
) -> Result<Item> {
    let spec = &params.feature_spec;
    let events = params.events(action)?;
    let mut slots = Vec::with_capacity(events.len());
    let mut old_lp = Vec::with_capacity(events.len());
    let mut old_dists = Vec::with_capacity(events.len());
    let mut prefix: Vec<TokenId> = Vec::with_capacity(events.len());
    for &e in &events {
        let slot = spec.slot(&prefix);
        let d = params.distribution_at(&key, slot);
        old_lp.push(d[e].ln());
        old_dists.push(d);
        slots.push(slot);
        prefix.push(TokenId::from(e));
    }
    Ok(Item {
        key,
        slots,
        events,
        old_lp,
        old_dists,
        score,
        adv: 0.0,
        weight,
        group,
    })
}

fn kl_penalty(old: &[f64], new: &[f64], dir: KlDirection) -> f64 {
    match dir {
        KlDirection::Forward => kl(old, new),
        KlDirection::Reverse => kl(new, old),
    }
}

/// (surrogate, KL) of one item under `params`.
fn item_terms(params: &PolicyParams, item: &Item, cfg: &PpoConfig) -> (f64, f64) {
    let mut surr = 0.0;
    let mut klsum = 0.0;
    let mut seq_lr = 0.0;
    for (t, (&slot, &e)) in item.slots.iter().zip(&item.events).enumerate() {
        let d = params.distribution_at(&item.key, slot);
        let lr = d[e].ln() - item.old_lp[t];
        if cfg.ratio_level == RatioLevel::Token {
            surr += clip_term(lr.exp(), item.adv, cfg.clip_epsilon).0;
        }
        seq_lr += lr;
        klsum += kl_penalty(&item.old_dists[t], &d, cfg.kl_direction);
    }
    if cfg.ratio_level == RatioLevel::Sequence {
        surr = clip_term(seq_lr.exp(), item.adv, cfg.clip_epsilon).0;
    }
    (surr, klsum)
}

/// Adds `scale · ∇(surrogate − β·KL)` of one item into `grad`.
fn item_grad(params: &PolicyParams, item: &Item, cfg: &PpoConfig, scale: f64, grad: &mut [f64]) {
    let spec = &params.feature_spec;
    let inv_t = 1.0 / params.temperature;
    let mut idx = Vec::with_capacity(3);
    let dists: Vec<Vec<f64>> = item
        .slots
        .iter()
        .map(|&s| params.distribution_at(&item.key, s))
        .collect();
    // coefficient on ∇ log p_t for each position
    let mut coef = vec![0.0; item.events.len()];
    match cfg.ratio_level {
        RatioLevel::Token => {
            for (t, &e) in item.events.iter().enumerate() {
                let r = (dists[t][e].ln() - item.old_lp[t]).exp();
                if clip_term(r, item.adv, cfg.clip_epsilon).1 {
                    coef[t] = item.adv * r;
                }
            }
        }
        RatioLevel::Sequence => {
            let lr: f64 = item
                .events
                .iter()
                .enumerate()
                .map(|(t, &e)| dists[t][e].ln() - item.old_lp[t])
                .sum();
            let r = lr.exp();
            if clip_term(r, item.adv, cfg.clip_epsilon).1 {
                coef.fill(item.adv * r);
            }
        }
    }
    for (t, &chosen) in item.events.iter().enumerate() {
        let d = &dists[t];
        let q = &item.old_dists[t];
        let kl_now = if cfg.kl_coef > 0.0 && cfg.kl_direction == KlDirection::Reverse {
            kl(d, q)
        } else {
            0.0
        };
        for (j, &p) in d.iter().enumerate() {
            let dlogp = if j == chosen { 1.0 - p } else { -p };
            let mut g = coef[t] * dlogp;
            if cfg.kl_coef > 0.0 {
                let dkl = match cfg.kl_direction {
                    KlDirection::Reverse => p * (p.ln() - q[j].ln() - kl_now),
                    KlDirection::Forward => p - q[j],
                };
                g -= cfg.kl_coef * dkl;
            }
            if g == 0.0 {
                continue;
            }
            spec.active(&item.key, item.slots[t], j, &mut idx);
            for &i in &idx {
                grad[i] += scale * inv_t * g;
            }
        }
    }
}

/// Weighted means of (surrogate, KL) over the items.
fn batch_terms(params: &PolicyParams, items: &[Item], cfg: &PpoConfig) -> (f64, f64) {
    let parts: Vec<(f64, f64, f64)> = items
        .par_iter()
        .map(|it| {
            let (s, k) = item_terms(params, it, cfg);
            (it.weight * s, it.weight * k, it.weight)
        })
        .collect();
    let (mut s, mut k, mut w) = (0.0, 0.0, 0.0);
    for (a, b, c) in parts {
        s += a;
        k += b;
        w += c;
    }
    (s / w, k / w)
}

fn scores_by_context(
    scorer: &dyn ResponseScorer,
    contexts: impl Iterator<Item = usize>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for c in contexts {
        if !out.contains_key(&c) {
            out.insert(c, scorer.scores(c)?);
        }
    }
    Ok(out)
}

fn build_items(
    params: &PolicyParams,
    keys: &[StateKey],
    scores: &BTreeMap<usize, Vec<f64>>,
    cfg: &PpoConfig,
) -> Result<Vec<Item>> {
    let spec = &params.feature_spec;
    let rs = ResponseSpace::new(spec.vocab_size(), spec.max_len())?;
    let mut items = match cfg.estimator {
        Estimator::Sampled => {
            let per_prompt: Vec<Result<Vec<Item>>> = keys
                .par_iter()
                .enumerate()
                .map(|(j, key)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(j as u64);
                    (0..cfg.samples_per_prompt)
                        .map(|_| {
                            let s = params.sample_key(key, &mut rng);
                            let a = rs.index_of(&s.action).expect("sampled action is valid");
                            make_item(params, *key, &s.action, scores[&key.context][a], 1.0, j)
                        })
                        .collect()
                })
                .collect();
            per_prompt
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
        }
        Estimator::Enumerated => {
            let mut counts: BTreeMap<StateKey, usize> = BTreeMap::new();
            for k in keys {
                *counts.entry(*k).or_insert(0) += 1;
            }
            let groups: Vec<(StateKey, usize)> = counts.into_iter().collect();
            let per_key: Vec<Result<Vec<Item>>> = groups
                .par_iter()
                .enumerate()
                .map(|(g, (key, n))| {
                    let probs = params.response_distribution(key);
                    rs.iter()
                        .enumerate()
                        .map(|(a, action)| {
                            make_item(
                                params,
                                *key,
                                &action,
                                scores[&key.context][a],
                                *n as f64 * probs[a],
                                g,
                            )
                        })
                        .collect()
                })
                .collect();
            per_key
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()
        }
    };
    // baselines
    match cfg.baseline_mode {
        BaselineMode::None => {
            for it in items.iter_mut() {
                it.adv = it.score;
            }
        }
        BaselineMode::Mean | BaselineMode::LearnedValue => {
            let by_group = cfg.baseline_mode == BaselineMode::Mean;
            let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for it in &items {
                let g = if by_group { it.group } else { it.key.context };
                let e = acc.entry(g).or_insert((0.0, 0.0));
                e.0 += it.weight * it.score;
                e.1 += it.weight;
            }
            for it in items.iter_mut() {
                let g = if by_group { it.group } else { it.key.context };
                let (s, w) = acc[&g];
                it.adv = it.score - s / w;
            }
        }
    }
    Ok(items)
}

/// One clipped-PPO improvement step against a frozen scorer.
pub fn ppo_improve(
    policy: &PolicyParams,
    prompts: &[PromptContext],
    scorer: &dyn ResponseScorer,
    cfg: &PpoConfig,
) -> Result<(PolicyParams, PpoStats)> {
    cfg.validate()?;
    policy.validate()?;
    if prompts.is_empty() {
        return Err(Error::Data("ppo needs at least one prompt".into()));
    }
    let keys: Vec<StateKey> = prompts
        .iter()
        .map(|p| policy.feature_spec.key(&p.state()?))
        .collect::<Result<_>>()?;
    let scores = scores_by_context(scorer, keys.iter().map(|k| k.context))?;
    let items = build_items(policy, &keys, &scores, cfg)?;
    let n_items = items.len();

    let objective = |s: f64, k: f64| s - cfg.kl_coef * k;
    let (s0, k0) = batch_terms(policy, &items, cfg);
    let mut current = policy.clone();
    let mut cur_obj = objective(s0, k0);
    let (mut cur_s, mut cur_k) = (s0, k0);
    let mut best_obj = cur_obj;
    let mut lr = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs_per_batch);
    let mut diverged = false;
    let mut grad = vec![0.0; policy.weights.len()];

    if lr > 0.0 {
        for epoch in 0..cfg.epochs_per_batch {
            let mut next = current.clone();
            order.shuffle(&mut rng);
            for mb in order.chunks(cfg.minibatch_size) {
                let wsum: f64 = mb.iter().map(|&i| items[i].weight).sum();
                if wsum <= 0.0 {
                    continue;
                }
                grad.fill(0.0);
                for &i in mb {
                    item_grad(&next, &items[i], cfg, items[i].weight / wsum, &mut grad);
                }
                for (w, g) in next.weights.iter_mut().zip(&grad) {
                    *w += lr * g;
                }
            }
            if next.weights.iter().any(|w| !w.is_finite()) {
                diverged = true;
                break;
            }
            let (s, k) = batch_terms(&next, &items, cfg);
            let obj = objective(s, k);
            let mean_kl = if cfg.kl_coef > 0.0 {
                k
            } else {
                batch_terms(
                    &next,
                    &items,
                    &PpoConfig {
                        kl_coef: 1.0,
                        ..cfg.clone()
                    },
                )
                .1
            };
            if mean_kl > cfg.kl_ceiling {
                diverged = true;
                epochs.push(EpochStats {
                    epoch,
                    surrogate: s,
                    mean_kl,
                    objective: obj,
                    accepted: false,
                    learning_rate: lr,
                });
                break;
            }
            let accepted = !cfg.monotone || obj >= cur_obj;
            epochs.push(EpochStats {
                epoch,
                surrogate: s,
                mean_kl,
                objective: obj,
                accepted,
                learning_rate: lr,
            });
            if accepted {
                current = next;
                cur_obj = obj;
                cur_s = s;
                cur_k = k;
                best_obj = best_obj.max(obj);
            } else {
                lr *= 0.5;
            }
        }
    }

    let mean_kl = if cfg.kl_coef > 0.0 {
        cur_k
    } else {
        batch_terms(
            &current,
            &items,
            &PpoConfig {
                kl_coef: 1.0,
                ..cfg.clone()
            },
        )
        .1
    };
    let contexts: Vec<StateKey> = {
        let mut v = keys.clone();
        v.sort();
        v.dedup();
        v
    };
    let margins = local_improvement_keys(&current, policy, &scores, &contexts);
    let improved = margins.iter().filter(|m| **m >= -1e-12).count();
    let stats = PpoStats {
        surrogate_before: s0,
        surrogate_after: cur_s,
        mean_kl,
        optimization_slack_proxy: (best_obj - cur_obj).max(0.0),
        local_improvement_rate: improved as f64 / contexts.len() as f64,
        n_prompts: prompts.len(),
        n_items,
        diverged,
        epochs,
    };
    Ok((current, stats))
}

fn local_improvement_keys(
    new: &PolicyParams,
    old: &PolicyParams,
    scores: &BTreeMap<usize, Vec<f64>>,
    keys: &[StateKey],
) -> Vec<f64> {
    keys.par_iter()
        .map(|k| {
            let q = &scores[&k.context];
            let pn = new.response_distribution(k);
            let po = old.response_distribution(k);
            pn.iter()
                .zip(&po)
                .zip(q)
                .map(|((a, b), q)| (a - b) * q)
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalImprovement {
    /// E_{new}[Q̂(s,·)] − E_{old}[Q̂(s,·)] per state.
    pub margins: Vec<f64>,
    /// Margins below `-tolerance`.
    pub violations: usize,
    pub tolerance: f64,
}

/// Exact per-state improvement margins by enumerating every response.
pub fn local_improvement_check(
    new: &PolicyParams,
    old: &PolicyParams,
    scorer: &dyn ResponseScorer,
    states: &[ConversationState],
    tolerance: f64,
) -> Result<LocalImprovement> {
    if !new.same_spec(old) {
        return Err(Error::Config(
            "policies have different feature specs".into(),
        ));
    }
    let keys: Vec<StateKey> = states
        .iter()
        .map(|s| old.feature_spec.key(s))
        .collect::<Result<_>>()?;
    let scores = scores_by_context(scorer, keys.iter().map(|k| k.context))?;
    let margins = local_improvement_keys(new, old, &scores, &keys);
    let violations = margins.iter().filter(|m| **m < -tolerance).count();
    Ok(LocalImprovement {
        margins,
        violations,
        tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveMode {
    /// Exact expectation and response-level KL by enumeration.
    Exact,
    /// `n` responses per state from the new policy; KL summed per position
    /// along each sampled response.
    Sampled { n: usize, seed: u64 },
}

/// E_s[ E_{a~new}[Q̂(s,a)] − β·KL ] over the given states.
pub fn kl_regularized_objective(
    new: &PolicyParams,
    old: &PolicyParams,
    states: &[ConversationState],
    scorer: &dyn ResponseScorer,
    beta: f64,
    direction: KlDirection,
    mode: ObjectiveMode,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be ≥ 0, got {beta}")));
    }
    if !new.same_spec(old) {
        return Err(Error::Config(
            "policies have different feature specs".into(),
        ));
    }
    if states.is_empty() {
        return Err(Error::Data("objective needs at least one state".into()));
    }
    let spec = &new.feature_spec;
    let rs = ResponseSpace::new(spec.vocab_size(), spec.max_len())?;
    let mut total = 0.0;
    for (j, s) in states.iter().enumerate() {
        let key = spec.key(s)?;
        let q = scorer.scores(key.context)?;
        match mode {
            ObjectiveMode::Exact => {
                let pn = new.response_distribution(&key);
                let po = old.response_distribution(&key);
                let e: f64 = pn.iter().zip(&q).map(|(p, q)| p * q).sum();
                let k = if beta > 0.0 {
                    kl_penalty(&po, &pn, direction)
                } else {
                    0.0
                };
                total += e - beta * k;
            }
            ObjectiveMode::Sampled { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                let mut acc = 0.0;
                for _ in 0..n.max(1) {
                    let smp = new.sample_key(&key, &mut rng);
                    let a = rs.index_of(&smp.action).expect("valid sample");
                    let mut k = 0.0;
                    if beta > 0.0 {
                        let mut prefix: Vec<TokenId> = Vec::new();
                        for e in new.events(&smp.action)? {
                            let slot = spec.slot(&prefix);
                            k += kl_penalty(
                                &old.distribution_at(&key, slot),
                                &new.distribution_at(&key, slot),
                                direction,
                            );
                            prefix.push(TokenId::from(e));
                        }
                    }
                    acc += q[a] - beta * k;
                }
                total += acc / n.max(1) as f64;
            }
        }
    }
    Ok(total / states.len() as f64)
}
