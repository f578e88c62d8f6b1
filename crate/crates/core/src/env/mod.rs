//! Synthetic suggested-response environment.
//!
//! The transition kernel factors in two stages. First the business turns the
//! suggestion into an actual message (accept verbatim, accept and edit one
//! token, rewrite under the suggestion's influence, ignore it, or stop). Then a
//! customer with a hidden intent level reacts to the message's class, possibly
//! revealing the outcome, replying from an intent-conditioned table, or going
//! silent.

mod catalog;
mod enumerate;

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use catalog::{ContextKey, MessageCatalog, MessageClass};
pub use enumerate::{enumerate, EnumeratedEnv, EnumerationMode};

use crate::error::{Error, Result};
use crate::mdp::{ConversationState, MdpConfig, Message, SuggestedAction, TokenId};

pub const N_INTENTS: usize = 3;
pub const INTENT_NAMES: [&str; N_INTENTS] = ["cold", "warm", "hot"];

const PROB_TOL: f64 = 1e-12;

/// Business behaviors, in the order of `EnvConfig::adoption_probs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adoption {
    AcceptVerbatim,
    AcceptAndEdit,
    InfluencedRewrite,
    Unrelated,
    Stop,
}

impl Adoption {
    pub const ALL: [Adoption; 5] = [
        Adoption::AcceptVerbatim,
        Adoption::AcceptAndEdit,
        Adoption::InfluencedRewrite,
        Adoption::Unrelated,
        Adoption::Stop,
    ];
}

/// Per-class values, keyed the way the config file spells them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByClass<T> {
    pub probe: T,
    pub offer: T,
    pub generic: T,
}

impl<T> ByClass<T> {
    pub fn get(&self, class: MessageClass) -> &T {
        match class {
            MessageClass::Probe => &self.probe,
            MessageClass::Offer => &self.offer,
            MessageClass::Generic => &self.generic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentModel {
    /// Distribution of the latent intent (cold, warm, hot) at reset.
    pub initial: [f64; N_INTENTS],
    /// Row-stochastic intent transitions given the business message class.
    pub transition: ByClass<[[f64; N_INTENTS]; N_INTENTS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomerModel {
    pub messages: Vec<Message>,
    /// Per intent, distribution over `messages` for the opener.
    pub opener_probs: [Vec<f64>; N_INTENTS],
    /// Per intent, distribution over `messages` for later replies.
    pub reply_probs: [Vec<f64>; N_INTENTS],
    /// Per intent, probability of going silent instead of replying.
    pub stop_prob: [f64; N_INTENTS],
    /// What the customer says when the outcome happens.
    pub outcome_message: Message,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedMessage {
    pub message: Message,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub mdp: MdpConfig,
    pub seed: u64,
    /// accept verbatim, accept-and-edit, influenced rewrite, unrelated, stop
    pub adoption_probs: [f64; 5],
    /// In an influenced rewrite, chance the business reuses one suggested token.
    pub influence: f64,
    /// The business's own drafts, used when it ignores or lacks a suggestion.
    pub business_drafts: Vec<WeightedMessage>,
    pub probe_tokens: Vec<TokenId>,
    pub offer_tokens: Vec<TokenId>,
    pub intent_model: IntentModel,
    /// Outcome probability per business message class, indexed by the
    /// customer's intent after reacting to the message.
    pub outcome_prob_by_intent: ByClass<[f64; N_INTENTS]>,
    pub customer: CustomerModel,
    #[serde(default = "default_budget")]
    pub enumeration_budget: u64,
}

fn default_budget() -> u64 {
    2_000_000
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Config(format!("{what}: entries must lie in [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!(
            "{what}: probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{what}: {p} is not a probability")));
    }
    Ok(())
}

impl EnvConfig {
    pub fn catalog(&self) -> MessageCatalog {
        MessageCatalog {
            vocab_size: self.mdp.vocab_size,
            max_msg_len: self.mdp.max_msg_len,
            horizon_cap: self.mdp.horizon_cap,
            probe_tokens: self.probe_tokens.clone(),
            offer_tokens: self.offer_tokens.clone(),
            customer_messages: self.customer.messages.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mdp.validate()?;
        let v = self.mdp.vocab_size;
        let l = self.mdp.max_msg_len;
        let in_vocab = |m: &Message| m.tokens().iter().all(|t| t.index() < v);
        check_row(&self.adoption_probs, "adoption_probs")?;
        check_prob(self.influence, "influence")?;
        if self.adoption_probs[1] > 0.0 && v < 2 {
            return Err(Error::Config(
                "accept-and-edit needs at least two tokens".into(),
            ));
        }
        for t in self.probe_tokens.iter().chain(&self.offer_tokens) {
            if t.index() >= v {
                return Err(Error::Config(format!(
                    "class token {} outside vocabulary",
                    t.0
                )));
            }
        }
        if self
            .probe_tokens
            .iter()
            .any(|t| self.offer_tokens.contains(t))
        {
            return Err(Error::Config("probe and offer token sets overlap".into()));
        }
        if self.mdp.horizon_cap >= 2 {
            let cat = self.catalog();
            for class in MessageClass::ALL {
                if cat.representative(class).is_none() {
                    return Err(Error::Config(format!("vocabulary has no {class:?} token")));
                }
            }
        }
        if self.business_drafts.is_empty() {
            return Err(Error::Config("business_drafts must not be empty".into()));
        }
        for d in &self.business_drafts {
            if d.message.is_empty() || d.message.len() > l || !in_vocab(&d.message) {
                return Err(Error::Config(format!(
                    "invalid business draft {}",
                    d.message
                )));
            }
        }
        let probs: Vec<f64> = self.business_drafts.iter().map(|d| d.prob).collect();
        check_row(&probs, "business_drafts")?;

        check_row(&self.intent_model.initial, "intent_model.initial")?;
        for class in MessageClass::ALL {
            for (i, row) in self.intent_model.transition.get(class).iter().enumerate() {
                check_row(row, &format!("intent_model.transition.{class:?}[{i}]"))?;
            }
            for p in self.outcome_prob_by_intent.get(class) {
                check_prob(*p, "outcome_prob_by_intent")?;
            }
        }

        let c = &self.customer;
        if c.messages.is_empty() {
            return Err(Error::Config("customer.messages must not be empty".into()));
        }
        for (i, m) in c.messages.iter().enumerate() {
            if m.is_empty() || m.len() > l || !in_vocab(m) {
                return Err(Error::Config(format!("invalid customer message {m}")));
            }
            if c.messages[..i].contains(m) {
                return Err(Error::Config(format!("duplicate customer message {m}")));
            }
        }
        if c.outcome_message.is_empty()
            || c.outcome_message.len() > l
            || !in_vocab(&c.outcome_message)
        {
            return Err(Error::Config("invalid customer.outcome_message".into()));
        }
        for i in 0..N_INTENTS {
            for (name, rows) in [
                ("opener_probs", &c.opener_probs),
                ("reply_probs", &c.reply_probs),
            ] {
                if rows[i].len() != c.messages.len() {
                    return Err(Error::Config(format!(
                        "customer.{name}[{i}] has {} entries for {} messages",
                        rows[i].len(),
                        c.messages.len()
                    )));
                }
                check_row(&rows[i], &format!("customer.{name}[{i}]"))?;
            }
            check_prob(c.stop_prob[i], "customer.stop_prob")?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: EnvConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The shipped reference environment: 12 tokens, messages of up to two
    /// tokens, three business turns.
    pub fn toy_shop() -> Self {
        let text = include_str!("../../../../configs/toy_shop_env.toml");
        Self::from_toml_str(text).expect("shipped toy-shop config is valid")
    }
}

/// A running environment: one hidden intent and one RNG stream.
#[derive(Clone, Debug)]
pub struct EnvInstance {
    config: Arc<EnvConfig>,
    catalog: MessageCatalog,
    rng: ChaCha8Rng,
    intent: usize,
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    WeightedIndex::new(probs)
        .expect("validated probability row")
        .sample(rng)
}

impl EnvInstance {
    pub fn new(config: Arc<EnvConfig>, seed: u64) -> Self {
        Self::with_stream(config, seed, 0)
    }

    /// Independent stream `stream` of generator `seed`.
    pub fn with_stream(config: Arc<EnvConfig>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let catalog = config.catalog();
        EnvInstance {
            config,
            catalog,
            rng,
            intent: 0,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn catalog(&self) -> &MessageCatalog {
        &self.catalog
    }

    /// Hidden intent, for debugging only.
    pub fn latent_intent(&self) -> usize {
        self.intent
    }

    pub fn reset(&mut self) -> ConversationState {
        self.intent = draw(&mut self.rng, &self.config.intent_model.initial);
        let c = &self.config.customer;
        let opener = draw(&mut self.rng, &c.opener_probs[self.intent]);
        ConversationState::opening(c.messages[opener].clone())
    }

    fn draft(&mut self) -> Message {
        let probs: Vec<f64> = self.config.business_drafts.iter().map(|d| d.prob).collect();
        let i = draw(&mut self.rng, &probs);
        self.config.business_drafts[i].message.clone()
    }

    /// Samples the message the business actually sends.
    pub fn business_respond(
        &mut self,
        state: &ConversationState,
        action: &SuggestedAction,
    ) -> Result<Message> {
        if let Some(reason) = state.terminal {
            return Err(Error::Absorbing(reason.to_string()));
        }
        if !state.is_open() {
            return Err(Error::Validation(
                "latest turn already has a business reply".into(),
            ));
        }
        action.check(Some(&self.config.mdp))?;
        let branch = Adoption::ALL[draw(&mut self.rng, &self.config.adoption_probs)];
        let suggestion = match (branch, action) {
            (Adoption::Stop, _) => return Ok(Message::empty()),
            (_, SuggestedAction::Abstain) => return Ok(self.draft()),
            (_, SuggestedAction::Respond(m)) => m,
        };
        Ok(match branch {
            Adoption::AcceptVerbatim => suggestion.clone(),
            Adoption::AcceptAndEdit => {
                let v = self.config.mdp.vocab_size;
                let pos = self.rng.gen_range(0..suggestion.len());
                let old = suggestion.tokens()[pos].index();
                let mut t = self.rng.gen_range(0..v - 1);
                if t >= old {
                    t += 1;
                }
                let mut edited = suggestion.clone();
                edited.0[pos] = TokenId::from(t);
                edited
            }
            Adoption::InfluencedRewrite => {
                if self.rng.gen_bool(self.config.influence) {
                    let pos = self.rng.gen_range(0..suggestion.len());
                    Message(vec![suggestion.tokens()[pos]])
                } else {
                    self.draft()
                }
            }
            Adoption::Unrelated => self.draft(),
            Adoption::Stop => unreachable!("handled above"),
        })
    }

    /// Samples the customer's reaction to `business_msg`, which must be the
    /// reply recorded on the state's latest turn.
    pub fn customer_respond(
        &mut self,
        state: &ConversationState,
        business_msg: &Message,
    ) -> Result<(Message, bool)> {
        if let Some(reason) = state.terminal {
            return Err(Error::Absorbing(reason.to_string()));
        }
        let latest = state
            .latest()
            .ok_or_else(|| Error::Validation("state has no turns".into()))?;
        if latest.business_msg.as_ref() != Some(business_msg) {
            return Err(Error::Validation(
                "business message does not complete the latest turn".into(),
            ));
        }
        let class = self
            .catalog
            .classify(business_msg)
            .ok_or_else(|| Error::Validation("empty business message".into()))?;
        let row = self.config.intent_model.transition.get(class)[self.intent];
        self.intent = draw(&mut self.rng, &row);
        let p_outcome = self.config.outcome_prob_by_intent.get(class)[self.intent];
        if self.rng.gen_bool(p_outcome) {
            return Ok((self.config.customer.outcome_message.clone(), true));
        }
        if self
            .rng
            .gen_bool(self.config.customer.stop_prob[self.intent])
        {
            return Ok((Message::empty(), false));
        }
        let reply = draw(
            &mut self.rng,
            &self.config.customer.reply_probs[self.intent],
        );
        Ok((self.config.customer.messages[reply].clone(), false))
    }

    /// One full kernel step: business reply, then (unless the business
    /// stopped) the customer's reaction. Returns the next state and reward.
    pub fn step(
        &mut self,
        state: &ConversationState,
        action: &SuggestedAction,
    ) -> Result<(ConversationState, f64)> {
        let m = self.business_respond(state, action)?;
        let replied = state.append_business_reply(action.clone(), m.clone())?;
        if replied.is_terminal() {
            return Ok((replied, 0.0));
        }
        let (c, o) = self.customer_respond(&replied, &m)?;
        let next = replied.append_customer_turn(c, o, &self.config.mdp)?;
        Ok((next, if o { 1.0 } else { 0.0 }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Arc<EnvConfig> {
        Arc::new(EnvConfig::toy_shop())
    }

    fn with_adoption(p: [f64; 5]) -> Arc<EnvConfig> {
        let mut c = EnvConfig::toy_shop();
        c.adoption_probs = p;
        Arc::new(c)
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let a = EnvInstance::new(toy(), 7).reset();
        let b = EnvInstance::new(toy(), 7).reset();
        assert_eq!(a, b);
        assert!(!a.is_terminal());
        assert_eq!(a.turns.len(), 1);
    }

    #[test]
    fn degenerate_opener_table() {
        let mut c = EnvConfig::toy_shop();
        for row in c.customer.opener_probs.iter_mut() {
            *row = vec![0.0, 1.0, 0.0];
        }
        let c = Arc::new(c);
        for seed in 0..50 {
            let s = EnvInstance::new(c.clone(), seed).reset();
            assert_eq!(s.turns[0].customer_msg, c.customer.messages[1]);
        }
    }

    #[test]
    fn uniform_openers_have_uniform_frequencies() {
        let mut c = EnvConfig::toy_shop();
        for row in c.customer.opener_probs.iter_mut() {
            *row = vec![1.0 / 3.0; 3];
        }
        // 1/3 three times does not sum to 1 within 1e-12 in floating point
        for row in c.customer.opener_probs.iter_mut() {
            row[2] = 1.0 - row[0] - row[1];
        }
        let c = Arc::new(c);
        let cat = c.catalog();
        let mut env = EnvInstance::new(c.clone(), 11);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let s = env.reset();
            counts[cat.customer_id(&s.turns[0].customer_msg).unwrap()] += 1;
        }
        for k in counts {
            assert!(
                (k as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn degenerate_accept_and_stop() {
        let m = SuggestedAction::respond([4, 2]);
        let mut env = EnvInstance::new(with_adoption([1.0, 0.0, 0.0, 0.0, 0.0]), 3);
        let s = env.reset();
        assert_eq!(env.business_respond(&s, &m).unwrap(), Message::new([4, 2]));
        let mut env = EnvInstance::new(with_adoption([0.0, 0.0, 0.0, 0.0, 1.0]), 3);
        let s = env.reset();
        assert!(env.business_respond(&s, &m).unwrap().is_empty());
        assert!(env
            .business_respond(&s, &SuggestedAction::Abstain)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn edit_branch_changes_exactly_one_token() {
        let mut env = EnvInstance::new(with_adoption([0.0, 1.0, 0.0, 0.0, 0.0]), 5);
        let s = env.reset();
        let a = Message::new([1, 9]);
        for _ in 0..1000 {
            let m = env
                .business_respond(&s, &SuggestedAction::Respond(a.clone()))
                .unwrap();
            assert_eq!(m.len(), 2);
            let diff = m
                .tokens()
                .iter()
                .zip(a.tokens())
                .filter(|(x, y)| x != y)
                .count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn terminal_states_are_rejected() {
        let mut env = EnvInstance::new(toy(), 1);
        let s = env.reset();
        let stopped = s
            .append_business_reply(SuggestedAction::Abstain, Message::empty())
            .unwrap();
        assert!(matches!(
            env.business_respond(&stopped, &SuggestedAction::Abstain),
            Err(Error::Absorbing(_))
        ));
        assert!(matches!(
            env.customer_respond(&stopped, &Message::empty()),
            Err(Error::Absorbing(_))
        ));
    }

    #[test]
    fn outcome_flags_follow_the_degenerate_tables() {
        let mut never = EnvConfig::toy_shop();
        never.outcome_prob_by_intent = ByClass {
            probe: [0.0; 3],
            offer: [0.0; 3],
            generic: [0.0; 3],
        };
        let mut env = EnvInstance::new(Arc::new(never), 9);
        for _ in 0..200 {
            let s = env.reset();
            let (next, r) = env.step(&s, &SuggestedAction::respond([4])).unwrap();
            assert_eq!(r, 0.0);
            assert_ne!(
                next.terminal,
                Some(crate::mdp::TerminalReason::OutcomeAchieved)
            );
        }

        let mut always = EnvConfig::toy_shop();
        always.intent_model.initial = [0.0, 0.0, 1.0];
        always.intent_model.transition.offer = [[0.0, 0.0, 1.0]; 3];
        always.outcome_prob_by_intent.offer = [0.0, 0.0, 1.0];
        let always = Arc::new(always);
        let mut env = EnvInstance::new(always.clone(), 9);
        let s = env.reset();
        let replied = s
            .append_business_reply(SuggestedAction::respond([4]), Message::new([4]))
            .unwrap();
        let (c, o) = env.customer_respond(&replied, &Message::new([4])).unwrap();
        assert!(o);
        assert_eq!(c, always.customer.outcome_message);
    }

    #[test]
    fn replay_is_bit_identical() {
        let actions = [
            SuggestedAction::respond([1, 2]),
            SuggestedAction::Abstain,
            SuggestedAction::respond([4, 4]),
        ];
        let run = |seed| {
            let mut env = EnvInstance::new(toy(), seed);
            let mut s = env.reset();
            let mut path = vec![s.clone()];
            for a in &actions {
                if s.is_terminal() {
                    break;
                }
                s = env.step(&s, a).unwrap().0;
                path.push(s.clone());
            }
            serde_json::to_string(&path).unwrap()
        };
        for seed in 0..20 {
            assert_eq!(run(seed), run(seed));
        }
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut c = EnvConfig::toy_shop();
        c.adoption_probs = [0.5, 0.5, 0.1, 0.0, 0.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EnvConfig::toy_shop();
        c.intent_model.transition.probe[0] = [0.5, 0.5, 1e-9];
        assert!(c.validate().is_err());
    }
}
