//! Token-level linear-softmax policy over suggested responses.
//!
//! A response is generated one event at a time. At every position the events
//! are the `vocab_size` tokens plus one STOP event; STOP at position 0 means
//! the assistant abstains, STOP later ends the message, and a message of
//! `max_msg_len` tokens ends without a STOP.
//!
//! Features are sparse indicators. The context block keys on the full
//! conversation context (see [`MessageCatalog`]) together with the prefix
//! slot (position and previous token) and the event, which makes the policy
//! tabular over responses. The optional shared block keys on the turn index
//! and on the latest customer message instead of the full context.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnumeratedEnv, MessageCatalog};
use crate::error::{Error, Result};
use crate::mdp::{ConversationState, Message, SuggestedAction, TokenId};
use crate::oracle::TabularPolicy;
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub catalog: MessageCatalog,
    pub context_block: bool,
    pub shared_block: bool,
}

/// The parts of a state the features look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub context: usize,
    pub turn: usize,
    pub latest: usize,
}

impl FeatureSpec {
    pub fn new(catalog: MessageCatalog) -> Self {
        FeatureSpec {
            catalog,
            context_block: true,
            shared_block: false,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.catalog.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.catalog.max_msg_len
    }

    /// Tokens plus STOP.
    pub fn n_events(&self) -> usize {
        self.vocab_size() + 1
    }

    pub fn stop_event(&self) -> usize {
        self.vocab_size()
    }

    /// Distinct prefix summaries at which a distribution is needed.
    pub fn n_slots(&self) -> usize {
        1 + self.max_len().saturating_sub(1) * self.vocab_size()
    }

    fn context_dim(&self) -> usize {
        if self.context_block {
            self.catalog.n_contexts() * self.n_slots() * self.n_events()
        } else {
            0
        }
    }

    fn shared_rows(&self) -> usize {
        self.catalog.horizon_cap + self.catalog.customer_messages.len()
    }

    pub fn dim(&self) -> usize {
        let shared = if self.shared_block {
            self.shared_rows() * self.n_slots() * self.n_events()
        } else {
            0
        };
        self.context_dim() + shared
    }

    pub fn key(&self, state: &ConversationState) -> Result<StateKey> {
        let context = self.catalog.context_index(state)?;
        let latest = state.latest().expect("live state has a turn");
        let latest = self
            .catalog
            .customer_id(&latest.customer_msg)
            .expect("context index validated the message");
        Ok(StateKey {
            context,
            turn: self.catalog.context_turn(context) - 1,
            latest,
        })
    }

    /// Prefix slot of a partial message.
    pub fn slot(&self, prefix: &[TokenId]) -> usize {
        match prefix.last() {
            None => 0,
            Some(t) => 1 + (prefix.len() - 1) * self.vocab_size() + t.index(),
        }
    }

    /// Active feature indices (each with value 1) of `event` at `slot`.
    pub fn active(&self, key: &StateKey, slot: usize, event: usize, out: &mut Vec<usize>) {
        out.clear();
        let (s, e) = (self.n_slots(), self.n_events());
        if self.context_block {
            out.push((key.context * s + slot) * e + event);
        }
        if self.shared_block {
            let base = self.context_dim();
            let h = self.catalog.horizon_cap;
            out.push(base + (key.turn * s + slot) * e + event);
            out.push(base + ((h + key.latest) * s + slot) * e + event);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub format_version: u32,
    pub weights: Vec<f64>,
    pub feature_spec: FeatureSpec,
    pub temperature: f64,
    /// Added to every event's raw score before the temperature division.
    pub event_bias: Vec<f64>,
    pub persona_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaSpec {
    pub persona_id: String,
    pub temperature_multiplier: f64,
    /// One entry per event (tokens, then STOP).
    pub token_bias: Vec<f64>,
}

impl PersonaSpec {
    pub fn identity(id: impl Into<String>, n_events: usize) -> Self {
        PersonaSpec {
            persona_id: id.into(),
            temperature_multiplier: 1.0,
            token_bias: vec![0.0; n_events],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub action: SuggestedAction,
    /// Per generation event, including the final STOP when there is one.
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        let dim = spec.dim();
        let n = spec.n_events();
        PolicyParams {
            format_version: FORMAT_VERSION,
            weights: vec![0.0; dim],
            feature_spec: spec,
            temperature: 1.0,
            event_bias: vec![0.0; n],
            persona_id: None,
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn seeded(spec: FeatureSpec, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.weights.iter_mut() {
            *w = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.feature_spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_spec.dim(),
                got: self.weights.len(),
            });
        }
        if self.event_bias.len() != self.feature_spec.n_events() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_spec.n_events(),
                got: self.event_bias.len(),
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.event_bias)
            .any(|w| !w.is_finite())
        {
            return Err(Error::Numerical("policy parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn same_spec(&self, other: &PolicyParams) -> bool {
        self.feature_spec == other.feature_spec
    }

    /// Event distribution at `slot` for a state key.
    pub fn distribution_at(&self, key: &StateKey, slot: usize) -> Vec<f64> {
        let spec = &self.feature_spec;
        let mut idx = Vec::with_capacity(3);
        let logits: Vec<f64> = (0..spec.n_events())
            .map(|e| {
                spec.active(key, slot, e, &mut idx);
                let z: f64 = idx.iter().map(|&i| self.weights[i]).sum();
                (z + self.event_bias[e]) / self.temperature
            })
            .collect();
        softmax(&logits)
    }

    /// Probability of every response of the response space, in canonical order.
    pub fn response_distribution(&self, key: &StateKey) -> Vec<f64> {
        let spec = &self.feature_spec;
        let v = spec.vocab_size();
        let l = spec.max_len();
        let mut out = Vec::with_capacity(
            crate::responses::ResponseSpace::new(v, l)
                .map(|r| r.len())
                .unwrap_or(0),
        );
        let d0 = self.distribution_at(key, 0);
        out.push(d0[spec.stop_event()]);
        // level-by-level: probability of each prefix of the current length
        let mut prefixes: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
        let mut dists: Vec<Vec<f64>> = vec![d0];
        for len in 1..=l {
            let mut next = Vec::with_capacity(prefixes.len() * v);
            let mut next_dists = Vec::new();
            for ((prefix, p), d) in prefixes.iter().zip(&dists) {
                for t in 0..v {
                    let mut m = prefix.clone();
                    m.push(TokenId::from(t));
                    next.push((m, p * d[t]));
                }
            }
            for (m, p) in &next {
                if len < l {
                    let d = self.distribution_at(key, spec.slot(m));
                    out.push(p * d[spec.stop_event()]);
                    next_dists.push(d);
                } else {
                    out.push(*p);
                }
            }
            prefixes = next;
            dists = next_dists;
        }
        out
    }

    /// Generation events of an action, checked against the feature spec.
    pub fn events(&self, action: &SuggestedAction) -> Result<Vec<usize>> {
        let spec = &self.feature_spec;
        match action {
            SuggestedAction::Abstain => Ok(vec![spec.stop_event()]),
            SuggestedAction::Respond(m) => {
                if m.is_empty() || m.len() > spec.max_len() {
                    return Err(Error::Validation(format!(
                        "response of length {} outside 1..={}",
                        m.len(),
                        spec.max_len()
                    )));
                }
                if let Some(t) = m.tokens().iter().find(|t| t.index() >= spec.vocab_size()) {
                    return Err(Error::Validation(format!(
                        "token {} outside vocabulary",
                        t.0
                    )));
                }
                let mut ev: Vec<usize> = m.tokens().iter().map(|t| t.index()).collect();
                if m.len() < spec.max_len() {
                    ev.push(spec.stop_event());
                }
                Ok(ev)
            }
        }
    }

    /// Per-event log-probabilities of an action.
    pub fn event_logprobs(&self, key: &StateKey, action: &SuggestedAction) -> Result<Vec<f64>> {
        let events = self.events(action)?;
        let mut prefix: Vec<TokenId> = Vec::with_capacity(events.len());
        let mut out = Vec::with_capacity(events.len());
        for &e in &events {
            let d = self.distribution_at(key, self.feature_spec.slot(&prefix));
            out.push(d[e].ln());
            prefix.push(TokenId::from(e));
        }
        Ok(out)
    }

    pub fn score_key(&self, key: &StateKey, action: &SuggestedAction) -> Result<f64> {
        Ok(self.event_logprobs(key, action)?.iter().sum())
    }

    pub fn sample_key<R: Rng>(&self, key: &StateKey, rng: &mut R) -> ResponseSample {
        let spec = &self.feature_spec;
        let mut tokens: Vec<TokenId> = Vec::with_capacity(spec.max_len());
        let mut lps = Vec::with_capacity(spec.max_len() + 1);
        let action = loop {
            let d = self.distribution_at(key, spec.slot(&tokens));
            let e = draw(&d, rng.gen::<f64>());
            lps.push(d[e].ln());
            if e == spec.stop_event() {
                break if tokens.is_empty() {
                    SuggestedAction::Abstain
                } else {
                    SuggestedAction::Respond(Message(tokens))
                };
            }
            tokens.push(TokenId::from(e));
            if tokens.len() == spec.max_len() {
                break SuggestedAction::Respond(Message(tokens));
            }
        };
        let total_logprob = lps.iter().sum();
        ResponseSample {
            action,
            token_logprobs: lps,
            total_logprob,
        }
    }

    /// Argmax decoding, lowest event index among ties.
    pub fn greedy_key(&self, key: &StateKey) -> SuggestedAction {
        let spec = &self.feature_spec;
        let mut tokens: Vec<TokenId> = Vec::new();
        loop {
            let d = self.distribution_at(key, spec.slot(&tokens));
            let e = crate::oracle::argmax(&d);
            if e == spec.stop_event() {
                return if tokens.is_empty() {
                    SuggestedAction::Abstain
                } else {
                    SuggestedAction::Respond(Message(tokens))
                };
            }
            tokens.push(TokenId::from(e));
            if tokens.len() == spec.max_len() {
                return SuggestedAction::Respond(Message(tokens));
            }
        }
    }

    /// Adds `scale · ∂/∂θ log π(action|key)` into `grad`.
    pub fn add_logprob_gradient(
        &self,
        key: &StateKey,
        action: &SuggestedAction,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let spec = &self.feature_spec;
        let events = self.events(action)?;
        let c = scale / self.temperature;
        let mut prefix: Vec<TokenId> = Vec::with_capacity(events.len());
        let mut idx = Vec::with_capacity(3);
        for &chosen in &events {
            let slot = spec.slot(&prefix);
            let d = self.distribution_at(key, slot);
            for (e, p) in d.iter().enumerate() {
                let w = if e == chosen { 1.0 - p } else { -p };
                spec.active(key, slot, e, &mut idx);
                for &i in &idx {
                    grad[i] += c * w;
                }
            }
            prefix.push(TokenId::from(chosen));
        }
        Ok(())
    }

    /// Converts to an explicit policy over the enumerated MDP's actions.
    pub fn to_tabular(&self, env: &EnumeratedEnv) -> Result<TabularPolicy> {
        self.check_compatible(&env.catalog)?;
        let mut probs = Vec::with_capacity(env.mdp.n_states());
        let mut cache: Option<(usize, Vec<f64>)> = None;
        for s in 0..env.mdp.n_states() {
            if s >= env.n_live {
                probs.push(vec![1.0]);
                continue;
            }
            let ctx = env.context_of(s).expect("live state");
            if cache.as_ref().map(|c| c.0) != Some(ctx) {
                let key = self.feature_spec.key(env.representative(s))?;
                cache = Some((ctx, self.response_distribution(&key)));
            }
            probs.push(cache.as_ref().expect("filled").1.clone());
        }
        Ok(TabularPolicy { probs })
    }

    pub fn check_compatible(&self, catalog: &MessageCatalog) -> Result<()> {
        if &self.feature_spec.catalog != catalog {
            return Err(Error::Config(
                "policy features were built for a different environment".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex sha256 of the checkpoint serialization; used as the behavior tag.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PolicyParams = serde_json::from_str(&text)?;
        if p.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported policy format {}",
                p.format_version
            )));
        }
        p.validate()?;
        Ok(p)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn draw(d: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in d.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    d.len() - 1
}

/// Event distribution after `prefix` in `state`.
pub fn token_distribution(
    params: &PolicyParams,
    state: &ConversationState,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if prefix.len() >= params.feature_spec.max_len() {
        return Err(Error::Validation(
            "prefix already has the maximum length".into(),
        ));
    }
    let key = params.feature_spec.key(state)?;
    Ok(params.distribution_at(&key, params.feature_spec.slot(prefix)))
}

pub fn sample_response<R: Rng>(
    params: &PolicyParams,
    state: &ConversationState,
    rng: &mut R,
) -> Result<ResponseSample> {
    let key = params.feature_spec.key(state)?;
    Ok(params.sample_key(&key, rng))
}

pub fn greedy_response(
    params: &PolicyParams,
    state: &ConversationState,
) -> Result<SuggestedAction> {
    let key = params.feature_spec.key(state)?;
    Ok(params.greedy_key(&key))
}

pub fn score_response(
    params: &PolicyParams,
    state: &ConversationState,
    action: &SuggestedAction,
) -> Result<f64> {
    let key = params.feature_spec.key(state)?;
    params.score_key(&key, action)
}

pub fn logprob_gradient(
    params: &PolicyParams,
    state: &ConversationState,
    action: &SuggestedAction,
) -> Result<Vec<f64>> {
    let key = params.feature_spec.key(state)?;
    let mut g = vec![0.0; params.weights.len()];
    params.add_logprob_gradient(&key, action, 1.0, &mut g)?;
    Ok(g)
}

/// Behavior policy for persona exploration: the temperature is multiplied
/// and the persona's bias added to every event score.
pub fn persona_wrap(params: &PolicyParams, persona: &PersonaSpec) -> Result<PolicyParams> {
    let m = persona.temperature_multiplier;
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Config(format!(
            "temperature multiplier must be positive, got {m}"
        )));
    }
    if persona.token_bias.len() != params.event_bias.len() {
        return Err(Error::DimensionMismatch {
            expected: params.event_bias.len(),
            got: persona.token_bias.len(),
        });
    }
    let mut out = params.clone();
    out.temperature *= m;
    for (b, d) in out.event_bias.iter_mut().zip(&persona.token_bias) {
        *b += d;
    }
    out.persona_id = Some(persona.persona_id.clone());
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::responses::ResponseSpace;

    fn spec() -> FeatureSpec {
        let mut s = FeatureSpec::new(EnvConfig::toy_shop().catalog());
        s.shared_block = true;
        s
    }

    fn state(ctx: usize) -> ConversationState {
        spec().catalog.representative_state(ctx).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_events() {
        let p = PolicyParams::zeros(spec());
        let d = token_distribution(&p, &state(5), &[]).unwrap();
        assert_eq!(d.len(), 13);
        for x in d {
            assert!((x - 1.0 / 13.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let p = PolicyParams::seeded(spec(), 1.0, 3);
        let mut q = p.clone();
        for b in q.event_bias.iter_mut() {
            *b += 7.5;
        }
        let s = state(40);
        let a = token_distribution(&p, &s, &[TokenId(2)]).unwrap();
        let b = token_distribution(&q, &s, &[TokenId(2)]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn response_distribution_matches_scores() {
        let p = PolicyParams::seeded(spec(), 1.5, 9);
        let s = state(100);
        let key = p.feature_spec.key(&s).unwrap();
        let dist = p.response_distribution(&key);
        let rs = ResponseSpace::new(12, 2).unwrap();
        assert_eq!(dist.len(), rs.len());
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (i, a) in rs.iter().enumerate() {
            let lp = score_response(&p, &s, &a).unwrap();
            assert!((lp.exp() - dist[i]).abs() < 1e-14, "{a}");
        }
    }

    #[test]
    fn samples_rescore_consistently() {
        let p = PolicyParams::seeded(spec(), 2.0, 1);
        let s = state(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = sample_response(&p, &s, &mut rng).unwrap();
            let total: f64 = r.token_logprobs.iter().sum();
            assert!((total - r.total_logprob).abs() <= 1e-10);
            assert!(r.token_logprobs.iter().all(|x| *x <= 0.0));
            assert!((score_response(&p, &s, &r.action).unwrap() - r.total_logprob).abs() <= 1e-10);
        }
    }

    #[test]
    fn greedy_dominates_at_low_temperature() {
        let mut p = PolicyParams::seeded(spec(), 1.0, 5);
        p.temperature = 1e-6;
        let s = state(12);
        let g = greedy_response(&p, &s).unwrap();
        let gs = score_response(&p, &s, &g).unwrap();
        assert!(gs > -1e-6);
        let rs = ResponseSpace::new(12, 2).unwrap();
        for a in rs.iter().filter(|a| *a != g) {
            assert!(score_response(&p, &s, &a).unwrap() <= gs);
        }
    }

    #[test]
    fn gradient_of_single_token_vocab_two() {
        // vocab 2, length 1: the only event for [t] is t itself
        let mut cat = spec().catalog;
        cat.vocab_size = 2;
        cat.max_msg_len = 1;
        cat.horizon_cap = 1;
        cat.probe_tokens = vec![TokenId(0)];
        cat.offer_tokens = vec![TokenId(1)];
        cat.customer_messages = vec![Message::new([0])];
        let p = PolicyParams::zeros(FeatureSpec::new(cat));
        let s = p.feature_spec.catalog.representative_state(0).unwrap();
        let g = logprob_gradient(&p, &s, &SuggestedAction::respond([1])).unwrap();
        // φ(chosen) − mean φ over three events
        let third = 1.0 / 3.0;
        assert_eq!(g.len(), 3);
        for (e, want) in [-third, 1.0 - third, -third].iter().enumerate() {
            assert!((g[e] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let mut p = PolicyParams::zeros(spec());
        let s = state(3);
        let key = p.feature_spec.key(&s).unwrap();
        let mut idx = Vec::new();
        p.feature_spec.active(&key, 0, 4, &mut idx);
        p.weights[idx[0]] = 60.0;
        p.feature_spec
            .active(&key, p.feature_spec.slot(&[TokenId(4)]), 12, &mut idx);
        p.weights[idx[0]] = 60.0;
        let g = logprob_gradient(&p, &s, &SuggestedAction::respond([4])).unwrap();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "{norm}");
    }

    #[test]
    fn persona_wrapping() {
        let p = PolicyParams::seeded(spec(), 1.0, 2);
        let s = state(20);
        let same = persona_wrap(&p, &PersonaSpec::identity("id", 13)).unwrap();
        assert_eq!(
            token_distribution(&p, &s, &[]).unwrap(),
            token_distribution(&same, &s, &[]).unwrap()
        );
        let mut hot = PersonaSpec::identity("hot", 13);
        hot.temperature_multiplier = 2.0;
        let w = persona_wrap(&p, &hot).unwrap();
        let d = token_distribution(&w, &s, &[]).unwrap();
        let key = p.feature_spec.key(&s).unwrap();
        let mut idx = Vec::new();
        let halved: Vec<f64> = (0..13)
            .map(|e| {
                p.feature_spec.active(&key, 0, e, &mut idx);
                idx.iter().map(|&i| p.weights[i]).sum::<f64>() / 2.0
            })
            .collect();
        let want = softmax(&halved);
        for (x, y) in d.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
            assert!(*x > 0.0);
        }
        let mut bad = PersonaSpec::identity("bad", 13);
        bad.token_bias[0] = f64::INFINITY;
        assert!(persona_wrap(&p, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = PolicyParams::seeded(spec(), 0.5, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        let q = PolicyParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.hash().unwrap(), q.hash().unwrap());
        assert!(score_response(&p, &state(1), &SuggestedAction::respond([1, 2, 3])).is_err());
    }
}
