//! Message classification and the observable-history summaries shared by the
//! environment, the policy features and the Q featurizers.
//!
//! A *context* is the part of a live history that matters to the dynamics:
//! the customer's opener, then for every completed turn the class of the
//! business message and the customer's reply. Contexts are indexed densely so
//! they can serve both as oracle state ids and as one-hot feature slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ConversationState, Message, SuggestedAction, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageClass {
    Probe,
    Offer,
    Generic,
}

impl MessageClass {
    pub const ALL: [MessageClass; 3] = [
        MessageClass::Probe,
        MessageClass::Offer,
        MessageClass::Generic,
    ];

    pub fn index(self) -> usize {
        match self {
            MessageClass::Probe => 0,
            MessageClass::Offer => 1,
            MessageClass::Generic => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Decoded context: opener id, then (business class, customer reply id) per completed turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextKey {
    pub opener: usize,
    pub steps: Vec<(MessageClass, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageCatalog {
    pub vocab_size: usize,
    pub max_msg_len: usize,
    pub horizon_cap: usize,
    pub probe_tokens: Vec<TokenId>,
    pub offer_tokens: Vec<TokenId>,
    /// Distinct non-terminal customer utterances.
    pub customer_messages: Vec<Message>,
}

impl MessageCatalog {
    pub fn token_class(&self, t: TokenId) -> MessageClass {
        if self.offer_tokens.contains(&t) {
            MessageClass::Offer
        } else if self.probe_tokens.contains(&t) {
            MessageClass::Probe
        } else {
            MessageClass::Generic
        }
    }

    /// Offer beats probe beats generic. `None` for the empty message.
    pub fn classify(&self, m: &Message) -> Option<MessageClass> {
        if m.is_empty() {
            return None;
        }
        let mut class = MessageClass::Generic;
        for &t in m.tokens() {
            match self.token_class(t) {
                MessageClass::Offer => return Some(MessageClass::Offer),
                MessageClass::Probe => class = MessageClass::Probe,
                MessageClass::Generic => {}
            }
        }
        Some(class)
    }

    /// First token of the given class, used to build representative messages.
    pub fn representative(&self, class: MessageClass) -> Option<Message> {
        (0..self.vocab_size)
            .map(TokenId::from)
            .find(|&t| self.token_class(t) == class)
            .map(|t| Message(vec![t]))
    }

    pub fn customer_id(&self, m: &Message) -> Option<usize> {
        self.customer_messages.iter().position(|c| c == m)
    }

    fn radix(&self) -> u128 {
        3 * self.customer_messages.len() as u128
    }

    /// Number of contexts whose latest turn is the `turn`-th (1-based).
    fn block(&self, turn: usize) -> u128 {
        let c = self.customer_messages.len() as u128;
        (1..turn).fold(c, |acc, _| acc.saturating_mul(self.radix()))
    }

    /// Total number of live contexts, saturating on overflow.
    pub fn context_count(&self) -> u128 {
        (1..=self.horizon_cap).fold(0u128, |acc, t| acc.saturating_add(self.block(t)))
    }

    pub fn n_contexts(&self) -> usize {
        self.context_count() as usize
    }

    fn offset(&self, turn: usize) -> u128 {
        (1..turn).map(|t| self.block(t)).sum()
    }

    /// Dense index of a live state's context.
    pub fn context_index(&self, state: &ConversationState) -> Result<usize> {
        if state.is_terminal() {
            return Err(Error::Absorbing(format!(
                "{} has no context",
                state.terminal.expect("terminal")
            )));
        }
        let turns = &state.turns;
        let n = turns.len();
        if n == 0 || n > self.horizon_cap {
            return Err(Error::Validation(format!(
                "live state with {n} turns outside 1..={}",
                self.horizon_cap
            )));
        }
        let unknown =
            |m: &Message| Error::Validation(format!("customer message {m} is not in the catalog"));
        let mut code = self
            .customer_id(&turns[0].customer_msg)
            .ok_or_else(|| unknown(&turns[0].customer_msg))? as u128;
        for k in 1..n {
            let class = turns[k - 1]
                .business_msg
                .as_ref()
                .and_then(|m| self.classify(m))
                .ok_or_else(|| {
                    Error::Validation(format!("turn {} has no business reply", k - 1))
                })?;
            let reply = self
                .customer_id(&turns[k].customer_msg)
                .ok_or_else(|| unknown(&turns[k].customer_msg))?;
            code = code * self.radix()
                + (class.index() * self.customer_messages.len() + reply) as u128;
        }
        Ok((self.offset(n) + code) as usize)
    }

    /// Number of turns (1-based) in a context.
    pub fn context_turn(&self, index: usize) -> usize {
        let mut idx = index as u128;
        for t in 1..=self.horizon_cap {
            if idx < self.block(t) {
                return t;
            }
            idx -= self.block(t);
        }
        self.horizon_cap + 1
    }

    pub fn decode_context(&self, index: usize) -> Result<ContextKey> {
        let turn = self.context_turn(index);
        if turn > self.horizon_cap {
            return Err(Error::Validation(format!(
                "context index {index} out of range"
            )));
        }
        let c = self.customer_messages.len() as u128;
        let mut code = index as u128 - self.offset(turn);
        let mut steps = Vec::with_capacity(turn - 1);
        for _ in 1..turn {
            let digit = code % self.radix();
            code /= self.radix();
            let class = MessageClass::from_index((digit / c) as usize).expect("digit < 3C");
            steps.push((class, (digit % c) as usize));
        }
        steps.reverse();
        Ok(ContextKey {
            opener: code as usize,
            steps,
        })
    }

    /// Context reached after a business message of `class` and customer
    /// reply `reply`; `None` once the horizon is reached.
    pub fn child_context(&self, index: usize, class: MessageClass, reply: usize) -> Option<usize> {
        let turn = self.context_turn(index);
        if turn >= self.horizon_cap {
            return None;
        }
        let code = index as u128 - self.offset(turn);
        let digit = (class.index() * self.customer_messages.len() + reply) as u128;
        Some((self.offset(turn + 1) + code * self.radix() + digit) as usize)
    }

    /// Representative live state for a context: business messages are the
    /// first token of their class, suggested verbatim.
    pub fn representative_state(&self, index: usize) -> Result<ConversationState> {
        let key = self.decode_context(index)?;
        let mut state = ConversationState::opening(self.customer_messages[key.opener].clone());
        for (class, reply) in key.steps {
            let m = self
                .representative(class)
                .ok_or_else(|| Error::Config(format!("vocabulary has no {class:?} token")))?;
            let turn = state.turns.last_mut().expect("non-empty");
            turn.suggestion = Some(SuggestedAction::Respond(m.clone()));
            turn.business_msg = Some(m);
            state.turns.push(crate::mdp::Turn::open(
                self.customer_messages[reply].clone(),
                false,
            ));
        }
        Ok(state)
    }

    /// All class-count signatures, `Abstain` first.
    pub fn signatures(&self) -> Vec<Option<[usize; 3]>> {
        let mut out = vec![None];
        for l in 1..=self.max_msg_len {
            for p in (0..=l).rev() {
                for o in (0..=l - p).rev() {
                    out.push(Some([p, o, l - p - o]));
                }
            }
        }
        out
    }

    pub fn n_signatures(&self) -> usize {
        1 + (1..=self.max_msg_len)
            .map(|l| (l + 1) * (l + 2) / 2)
            .sum::<usize>()
    }

    /// Index of the action's class-count signature. The environment's
    /// adoption model depends on a suggestion only through this signature.
    pub fn signature(&self, action: &SuggestedAction) -> usize {
        let m = match action {
            SuggestedAction::Abstain => return 0,
            SuggestedAction::Respond(m) => m,
        };
        let mut counts = [0usize; 3];
        for &t in m.tokens() {
            counts[self.token_class(t).index()] += 1;
        }
        let l = m.len();
        let before: usize = 1 + (1..l).map(|j| (j + 1) * (j + 2) / 2).sum::<usize>();
        let [p, o, _] = counts;
        let within: usize = ((p + 1)..=l).map(|pp| l - pp + 1).sum::<usize>() + (l - p - o);
        before + within
    }
}
