//! Conversation MDP objects: messages, turns, states, transitions and trajectories.
//!
//! A state is the full history up to the latest customer message. Every turn
//! records what the customer said, whether the outcome was observed, what the
//! assistant suggested and what the business actually sent. States are values:
//! the `append_*` operations return a new state and never mutate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the environment vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(v as u32)
    }
}

/// A token sequence. The empty message means "no response".
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Message(pub Vec<TokenId>);

impl Message {
    pub fn new(tokens: impl IntoIterator<Item = usize>) -> Self {
        Message(tokens.into_iter().map(TokenId::from).collect())
    }

    pub fn empty() -> Self {
        Message(Vec::new())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, cfg: &MdpConfig, what: &str) -> Result<()> {
        if self.len() > cfg.max_msg_len {
            return Err(Error::Validation(format!(
                "{what} has {} tokens, max is {}",
                self.len(),
                cfg.max_msg_len
            )));
        }
        if let Some(t) = self.0.iter().find(|t| t.index() >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "{what} contains token {} outside vocabulary of size {}",
                t.0, cfg.vocab_size
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}", t.0)?;
        }
        write!(f, "]")
    }
}

/// What the assistant proposes to the business.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SuggestedAction {
    /// Never empty.
    Respond(Message),
    Abstain,
}

impl SuggestedAction {
    pub fn respond(tokens: impl IntoIterator<Item = usize>) -> Self {
        SuggestedAction::Respond(Message::new(tokens))
    }

    pub fn message(&self) -> Option<&Message> {
        match self {
            SuggestedAction::Respond(m) => Some(m),
            SuggestedAction::Abstain => None,
        }
    }

    pub fn check(&self, cfg: Option<&MdpConfig>) -> Result<()> {
        if let SuggestedAction::Respond(m) = self {
            if m.is_empty() {
                return Err(Error::Validation(
                    "a suggested response must be non-empty; use Abstain instead".into(),
                ));
            }
            if let Some(cfg) = cfg {
                m.check(cfg, "suggestion")?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for SuggestedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuggestedAction::Respond(m) => write!(f, "{m}"),
            SuggestedAction::Abstain => write!(f, "<abstain>"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalReason {
    OutcomeAchieved,
    BusinessStopped,
    CustomerStopped,
    HorizonReached,
}

impl TerminalReason {
    pub const ALL: [TerminalReason; 4] = [
        TerminalReason::OutcomeAchieved,
        TerminalReason::BusinessStopped,
        TerminalReason::CustomerStopped,
        TerminalReason::HorizonReached,
    ];

    pub fn index(self) -> usize {
        match self {
            TerminalReason::OutcomeAchieved => 0,
            TerminalReason::BusinessStopped => 1,
            TerminalReason::CustomerStopped => 2,
            TerminalReason::HorizonReached => 3,
        }
    }
}

impl fmt::Display for TerminalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TerminalReason::OutcomeAchieved => "outcome achieved",
            TerminalReason::BusinessStopped => "business stopped",
            TerminalReason::CustomerStopped => "customer stopped",
            TerminalReason::HorizonReached => "horizon reached",
        };
        f.write_str(s)
    }
}

/// One exchange: customer message and outcome flag, then the suggestion and
/// the business reply. The last two are `None` only on the open turn.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Turn {
    pub customer_msg: Message,
    pub outcome: bool,
    pub suggestion: Option<SuggestedAction>,
    pub business_msg: Option<Message>,
}

impl Turn {
    pub fn open(customer_msg: Message, outcome: bool) -> Self {
        Turn {
            customer_msg,
            outcome,
            suggestion: None,
            business_msg: None,
        }
    }

    pub fn is_completed(&self) -> bool {
        self.suggestion.is_some() && self.business_msg.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub discount: f64,
    /// Maximum number of business turns.
    pub horizon_cap: usize,
    pub vocab_size: usize,
    pub max_msg_len: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            discount: 0.9,
            horizon_cap: 8,
            vocab_size: 12,
            max_msg_len: 2,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.discount)?;
        if self.horizon_cap < 1 {
            return Err(Error::Config("horizon_cap must be at least 1".into()));
        }
        if self.vocab_size < 1 || self.max_msg_len < 1 {
            return Err(Error::Config(
                "vocab_size and max_msg_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_discount(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "discount {gamma} must lie in [0, 1)"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConversationState {
    pub turns: Vec<Turn>,
    pub terminal: Option<TerminalReason>,
}

impl ConversationState {
    /// Fresh state holding only the customer's opening message.
    pub fn opening(customer_msg: Message) -> Self {
        let terminal = customer_msg
            .is_empty()
            .then_some(TerminalReason::CustomerStopped);
        ConversationState {
            turns: vec![Turn::open(customer_msg, false)],
            terminal,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn latest(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// Number of turns the business has completed.
    pub fn business_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.is_completed()).count()
    }

    /// True when the latest turn is waiting for a suggestion.
    pub fn is_open(&self) -> bool {
        !self.is_terminal() && self.latest().is_some_and(|t| !t.is_completed())
    }

    fn ensure_live(&self) -> Result<()> {
        match self.terminal {
            Some(reason) => Err(Error::Absorbing(reason.to_string())),
            None => Ok(()),
        }
    }

    /// Records the suggestion and the business's actual reply on the open turn.
    pub fn append_business_reply(
        &self,
        suggestion: SuggestedAction,
        business_msg: Message,
    ) -> Result<ConversationState> {
        self.ensure_live()?;
        suggestion.check(None)?;
        let mut next = self.clone();
        let turn = next
            .turns
            .last_mut()
            .ok_or_else(|| Error::Validation("state has no turns".into()))?;
        if turn.is_completed() {
            return Err(Error::Validation(
                "latest turn already has a business reply".into(),
            ));
        }
        let stopped = business_msg.is_empty();
        turn.suggestion = Some(suggestion);
        turn.business_msg = Some(business_msg);
        if stopped {
            next.terminal = Some(TerminalReason::BusinessStopped);
        }
        Ok(next)
    }

    /// Opens the next turn with the customer's reply and outcome flag.
    pub fn append_customer_turn(
        &self,
        customer_msg: Message,
        outcome: bool,
        cfg: &MdpConfig,
    ) -> Result<ConversationState> {
        self.ensure_live()?;
        if !self.latest().is_some_and(Turn::is_completed) {
            return Err(Error::Validation(
                "latest turn is still open; the business has not replied".into(),
            ));
        }
        let mut next = self.clone();
        let stopped = customer_msg.is_empty();
        next.turns.push(Turn::open(customer_msg, outcome));
        next.terminal = if outcome {
            Some(TerminalReason::OutcomeAchieved)
        } else if stopped {
            Some(TerminalReason::CustomerStopped)
        } else if next.business_turns() >= cfg.horizon_cap {
            Some(TerminalReason::HorizonReached)
        } else {
            None
        };
        Ok(next)
    }

    /// Checks the structural invariants. With a config, also checks message
    /// lengths, token ranges and the horizon.
    pub fn validate(&self, cfg: Option<&MdpConfig>) -> Result<()> {
        let n = self.turns.len();
        if n == 0 {
            return Err(Error::Validation("state has no turns".into()));
        }
        for (k, turn) in self.turns.iter().enumerate() {
            let last = k + 1 == n;
            if let Some(cfg) = cfg {
                turn.customer_msg.check(cfg, "customer message")?;
                if let Some(m) = &turn.business_msg {
                    m.check(cfg, "business message")?;
                }
            }
            if let Some(s) = &turn.suggestion {
                s.check(cfg)?;
            }
            if turn.suggestion.is_some() != turn.business_msg.is_some() {
                return Err(Error::Validation(format!(
                    "turn {k} has a suggestion without a business reply or vice versa"
                )));
            }
            if !last {
                if !turn.is_completed() {
                    return Err(Error::Validation(format!(
                        "turn {k} is open but not latest"
                    )));
                }
                if turn.outcome {
                    return Err(Error::Validation(format!(
                        "turn {k} has an outcome but the conversation continued"
                    )));
                }
                if turn.customer_msg.is_empty()
                    || turn.business_msg.as_ref().is_some_and(Message::is_empty)
                {
                    return Err(Error::Validation(format!(
                        "turn {k} has a silent participant but the conversation continued"
                    )));
                }
            }
        }
        let latest = &self.turns[n - 1];
        let expected = if latest.outcome {
            Some(TerminalReason::OutcomeAchieved)
        } else if latest.customer_msg.is_empty() {
            Some(TerminalReason::CustomerStopped)
        } else if latest.business_msg.as_ref().is_some_and(Message::is_empty) {
            Some(TerminalReason::BusinessStopped)
        } else if !latest.is_completed()
            && cfg.is_some_and(|c| self.business_turns() >= c.horizon_cap)
        {
            Some(TerminalReason::HorizonReached)
        } else {
            None
        };
        let consistent = match (expected, self.terminal) {
            (Some(e), Some(t)) => e == t,
            (None, None) => true,
            // horizon cannot be checked without a config
            (None, Some(TerminalReason::HorizonReached)) => cfg.is_none() && !latest.is_completed(),
            _ => false,
        };
        if !consistent {
            return Err(Error::Validation(format!(
                "terminal marker {:?} inconsistent with history (expected {:?})",
                self.terminal, expected
            )));
        }
        if self.terminal == Some(TerminalReason::OutcomeAchieved) && latest.is_completed() {
            return Err(Error::Validation(
                "turns continued after the outcome".into(),
            ));
        }
        Ok(())
    }
}

/// R(s): the latest outcome flag.
pub fn reward(state: &ConversationState) -> Result<f64> {
    state.validate(None)?;
    Ok(if state.latest().is_some_and(|t| t.outcome) {
        1.0
    } else {
        0.0
    })
}

/// Reward carried by the move `state -> next`. Zero once `state` is terminal.
pub fn transition_reward(state: &ConversationState, next: &ConversationState) -> Result<f64> {
    if state.is_terminal() {
        return Ok(0.0);
    }
    reward(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: ConversationState,
    pub action: SuggestedAction,
    pub reward: f64,
    pub next_state: ConversationState,
    /// Per-event log-probabilities under the behavior policy, including the
    /// stop event when one was generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_logprobs: Option<Vec<f64>>,
}

impl Transition {
    pub fn behavior_logprob(&self) -> Option<f64> {
        self.behavior_logprobs.as_ref().map(|v| v.iter().sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub behavior_tag: String,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn achieved_outcome(&self) -> bool {
        self.transitions.iter().any(|t| t.reward == 1.0)
    }

    pub fn final_state(&self) -> Option<&ConversationState> {
        self.transitions.last().map(|t| &t.next_state)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    /// next_state of transition k-1 differs from state of transition k.
    ChainBreak(usize),
    NotTerminated,
    InvalidReward(usize),
    MisplacedOutcomeReward(usize),
    MultipleOutcomeRewards,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "trajectory has no transitions"),
            Violation::ChainBreak(k) => {
                write!(f, "transition {k} does not start where {} ended", k - 1)
            }
            Violation::NotTerminated => write!(f, "final state is not terminal"),
            Violation::InvalidReward(k) => {
                write!(f, "transition {k} has a reward outside {{0, 1}}")
            }
            Violation::MisplacedOutcomeReward(k) => {
                write!(
                    f,
                    "transition {k} carries the outcome reward but is not last"
                )
            }
            Violation::MultipleOutcomeRewards => write!(f, "more than one outcome reward"),
        }
    }
}

/// Lists every broken trajectory invariant; empty means well-formed.
pub fn validate(trajectory: &Trajectory) -> Vec<Violation> {
    let ts = &trajectory.transitions;
    if ts.is_empty() {
        return vec![Violation::Empty];
    }
    let mut out = Vec::new();
    for k in 1..ts.len() {
        if ts[k - 1].next_state != ts[k].state {
            out.push(Violation::ChainBreak(k));
        }
    }
    if !ts[ts.len() - 1].next_state.is_terminal() {
        out.push(Violation::NotTerminated);
    }
    let mut paid = 0;
    for (k, t) in ts.iter().enumerate() {
        if t.reward != 0.0 && t.reward != 1.0 {
            out.push(Violation::InvalidReward(k));
        } else if t.reward == 1.0 {
            paid += 1;
            if k + 1 != ts.len() {
                out.push(Violation::MisplacedOutcomeReward(k));
            }
        }
    }
    if paid > 1 {
        out.push(Violation::MultipleOutcomeRewards);
    }
    out
}
