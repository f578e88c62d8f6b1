//! Exact enumeration of the environment as an explicit finite MDP.
//!
//! In [`EnumerationMode::Belief`] a state is a context (see
//! [`MessageCatalog`]) and the hidden intent is folded into the exact
//! posterior belief, so values are those attainable by any policy that sees
//! only the conversation. [`EnumerationMode::Omniscient`] pairs every context
//! with the true intent and is meant for debugging the environment.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::catalog::{MessageCatalog, MessageClass};
use super::{EnvConfig, N_INTENTS};
use crate::error::{Error, Result};
use crate::mdp::{ConversationState, Message, SuggestedAction, TerminalReason, TokenId, Turn};
use crate::oracle::ExplicitMdp;
use crate::responses::ResponseSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EnumerationMode {
    Belief,
    Omniscient,
}

#[derive(Clone, Debug)]
pub struct EnumeratedEnv {
    pub mode: EnumerationMode,
    pub mdp: ExplicitMdp,
    pub catalog: MessageCatalog,
    pub responses: ResponseSpace,
    /// Number of live (non-terminal) states; terminal ids follow.
    pub n_live: usize,
    /// Belief over the current intent for each live state (one-hot in
    /// omniscient mode).
    pub beliefs: Vec<[f64; N_INTENTS]>,
    representatives: Vec<ConversationState>,
}

impl EnumeratedEnv {
    pub fn terminal_id(&self, reason: TerminalReason) -> usize {
        self.n_live + reason.index()
    }

    /// Context index of a live state id.
    pub fn context_of(&self, id: usize) -> Option<usize> {
        if id >= self.n_live {
            return None;
        }
        Some(match self.mode {
            EnumerationMode::Belief => id,
            EnumerationMode::Omniscient => id / N_INTENTS,
        })
    }

    /// State id of a conversation state. Only available in belief mode,
    /// since omniscient ids also depend on the hidden intent.
    pub fn state_id(&self, state: &ConversationState) -> Result<usize> {
        if self.mode != EnumerationMode::Belief {
            return Err(Error::Config("omniscient states are not observable".into()));
        }
        match state.terminal {
            Some(reason) => Ok(self.terminal_id(reason)),
            None => self.catalog.context_index(state),
        }
    }

    pub fn representative(&self, id: usize) -> &ConversationState {
        &self.representatives[id]
    }

    pub fn live_states(&self) -> impl Iterator<Item = (usize, &ConversationState)> {
        self.representatives[..self.n_live].iter().enumerate()
    }

    /// Streams the enumeration as JSON lines, one `(state, action)` pair each.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            format_version: u32,
            kind: &'static str,
            state_id: usize,
            state: &'a ConversationState,
            action: SuggestedAction,
            successors: &'a [(usize, f64)],
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in 0..self.mdp.n_states() {
            for (a, row) in self.mdp.transitions[s].iter().enumerate() {
                let action = if s < self.n_live {
                    self.responses.action(a).expect("action index")
                } else {
                    SuggestedAction::Abstain
                };
                let line = Line {
                    format_version: crate::FORMAT_VERSION,
                    kind: "enumeration",
                    state_id: s,
                    state: &self.representatives[s],
                    action,
                    successors: row,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn add(v: &mut [f64; 3], w: f64, class: MessageClass) {
    v[class.index()] += w;
}

/// Class distribution of the business message, and the stop probability.
fn business_classes(
    cfg: &EnvConfig,
    cat: &MessageCatalog,
    action: &SuggestedAction,
) -> ([f64; 3], f64) {
    let [accept, edit, influenced, unrelated, stop] = cfg.adoption_probs;
    let mut draft = [0.0; 3];
    for d in &cfg.business_drafts {
        add(
            &mut draft,
            d.prob,
            cat.classify(&d.message).expect("non-empty draft"),
        );
    }
    let m = match action {
        SuggestedAction::Abstain => return (draft.map(|p| p * (1.0 - stop)), stop),
        SuggestedAction::Respond(m) => m,
    };
    let mut out = [0.0; 3];
    add(
        &mut out,
        accept,
        cat.classify(m).expect("non-empty suggestion"),
    );
    let v = cfg.mdp.vocab_size;
    if edit > 0.0 {
        let w = edit / (m.len() * (v - 1)) as f64;
        for pos in 0..m.len() {
            for t in 0..v {
                if t == m.tokens()[pos].index() {
                    continue;
                }
                let mut e = m.clone();
                e.0[pos] = TokenId::from(t);
                add(&mut out, w, cat.classify(&e).expect("non-empty"));
            }
        }
    }
    let w = influenced * cfg.influence / m.len() as f64;
    for &t in m.tokens() {
        add(&mut out, w, cat.token_class(t));
    }
    let own = influenced * (1.0 - cfg.influence) + unrelated;
    for k in 0..3 {
        out[k] += own * draft[k];
    }
    (out, stop)
}

/// Customer reaction given the intent distribution after the business
/// message: (outcome, silent, per-reply) probabilities, and for each reply the
/// unnormalised posterior over the new intent.
struct Reaction {
    outcome: f64,
    silent: f64,
    replies: Vec<f64>,
    posteriors: Vec<[f64; N_INTENTS]>,
}

fn react(cfg: &EnvConfig, class: MessageClass, pred: &[f64; N_INTENTS]) -> Reaction {
    let o = cfg.outcome_prob_by_intent.get(class);
    let c = &cfg.customer;
    let n = c.messages.len();
    let mut r = Reaction {
        outcome: 0.0,
        silent: 0.0,
        replies: vec![0.0; n],
        posteriors: vec![[0.0; N_INTENTS]; n],
    };
    for i in 0..N_INTENTS {
        r.outcome += pred[i] * o[i];
        let talk = pred[i] * (1.0 - o[i]);
        r.silent += talk * c.stop_prob[i];
        for j in 0..n {
            let p = talk * (1.0 - c.stop_prob[i]) * c.reply_probs[i][j];
            r.replies[j] += p;
            r.posteriors[j][i] = p;
        }
    }
    r
}

fn normalise(v: [f64; N_INTENTS], fallback: [f64; N_INTENTS]) -> [f64; N_INTENTS] {
    let z: f64 = v.iter().sum();
    if z > 0.0 {
        v.map(|x| x / z)
    } else {
        let zf: f64 = fallback.iter().sum();
        fallback.map(|x| x / zf)
    }
}

fn predict(cfg: &EnvConfig, class: MessageClass, belief: &[f64; N_INTENTS]) -> [f64; N_INTENTS] {
    let t = cfg.intent_model.transition.get(class);
    let mut out = [0.0; N_INTENTS];
    for i in 0..N_INTENTS {
        for j in 0..N_INTENTS {
            out[j] += belief[i] * t[i][j];
        }
    }
    out
}

fn terminal_representatives(
    cat: &MessageCatalog,
    cfg: &EnvConfig,
) -> Result<Vec<ConversationState>> {
    let opener = ConversationState::opening(cat.customer_messages[0].clone());
    let offer = Message(vec![TokenId::from(0usize)]);
    let replied =
        opener.append_business_reply(SuggestedAction::Respond(offer.clone()), offer.clone())?;
    let outcome =
        replied.append_customer_turn(cfg.customer.outcome_message.clone(), true, &cfg.mdp)?;
    let business = opener.append_business_reply(SuggestedAction::Abstain, Message::empty())?;
    let customer = replied.append_customer_turn(Message::empty(), false, &cfg.mdp)?;
    let mut horizon = opener.clone();
    for _ in 0..cfg.mdp.horizon_cap {
        let t = horizon.turns.last_mut().expect("non-empty");
        t.suggestion = Some(SuggestedAction::Respond(offer.clone()));
        t.business_msg = Some(offer.clone());
        horizon
            .turns
            .push(Turn::open(cat.customer_messages[0].clone(), false));
    }
    horizon.terminal = Some(TerminalReason::HorizonReached);
    Ok(vec![outcome, business, customer, horizon])
}

/// Builds the explicit MDP of `cfg`.
pub fn enumerate(cfg: &EnvConfig, mode: EnumerationMode) -> Result<EnumeratedEnv> {
    cfg.validate()?;
    let cat = cfg.catalog();
    let per_context = match mode {
        EnumerationMode::Belief => 1,
        EnumerationMode::Omniscient => N_INTENTS as u128,
    };
    let states = cat
        .context_count()
        .saturating_mul(per_context)
        .saturating_add(4);
    if states > cfg.enumeration_budget as u128 {
        return Err(Error::EnumerationTooLarge {
            states,
            budget: cfg.enumeration_budget,
            vocab_size: cfg.mdp.vocab_size,
            max_msg_len: cfg.mdp.max_msg_len,
            horizon_cap: cfg.mdp.horizon_cap,
            customer_messages: cat.customer_messages.len(),
        });
    }
    let responses = ResponseSpace::new(cfg.mdp.vocab_size, cfg.mdp.max_msg_len)?;
    let n_ctx = cat.n_contexts();
    let n_live = n_ctx * per_context as usize;
    let n = n_live + 4;
    let term = |r: TerminalReason| n_live + r.index();

    let class_dists: Vec<([f64; 3], f64)> = responses
        .iter()
        .map(|a| business_classes(cfg, &cat, &a))
        .collect();

    // Beliefs per context, filled in index order (parents precede children).
    let mut ctx_belief = vec![[0.0; N_INTENTS]; n_ctx];
    let c = &cfg.customer;
    let mut initial = vec![0.0; n];
    for j in 0..c.messages.len() {
        let mut joint = [0.0; N_INTENTS];
        for i in 0..N_INTENTS {
            joint[i] = cfg.intent_model.initial[i] * c.opener_probs[i][j];
        }
        ctx_belief[j] = normalise(joint, cfg.intent_model.initial);
        match mode {
            EnumerationMode::Belief => initial[j] = joint.iter().sum(),
            EnumerationMode::Omniscient => {
                for i in 0..N_INTENTS {
                    initial[j * N_INTENTS + i] = joint[i];
                }
            }
        }
    }

    let mut transitions = Vec::with_capacity(n);
    for x in 0..n_ctx {
        let belief = ctx_belief[x];
        let intents: Vec<Option<usize>> = match mode {
            EnumerationMode::Belief => vec![None],
            EnumerationMode::Omniscient => (0..N_INTENTS).map(Some).collect(),
        };
        for intent in intents {
            let start = match intent {
                None => belief,
                Some(i) => {
                    let mut e = [0.0; N_INTENTS];
                    e[i] = 1.0;
                    e
                }
            };
            // per class: (reaction, child ids)
            let mut per_class = Vec::with_capacity(3);
            for class in MessageClass::ALL {
                let pred = predict(cfg, class, &start);
                let r = react(cfg, class, &pred);
                if intent.is_none() {
                    for (j, post) in r.posteriors.iter().enumerate() {
                        if let Some(child) = cat.child_context(x, class, j) {
                            ctx_belief[child] = normalise(*post, pred);
                        }
                    }
                }
                per_class.push((class, pred, r));
            }
            let mut rows = Vec::with_capacity(responses.len());
            for &(dist, stop) in &class_dists {
                let mut succ: BTreeMap<usize, f64> = BTreeMap::new();
                let mut put = |id: usize, p: f64| {
                    if p > 0.0 {
                        *succ.entry(id).or_insert(0.0) += p;
                    }
                };
                put(term(TerminalReason::BusinessStopped), stop);
                for (class, pred, r) in &per_class {
                    let pk = dist[class.index()];
                    if pk == 0.0 {
                        continue;
                    }
                    put(term(TerminalReason::OutcomeAchieved), pk * r.outcome);
                    put(term(TerminalReason::CustomerStopped), pk * r.silent);
                    for j in 0..c.messages.len() {
                        match (cat.child_context(x, *class, j), intent) {
                            (None, _) => {
                                put(term(TerminalReason::HorizonReached), pk * r.replies[j])
                            }
                            (Some(child), None) => put(child, pk * r.replies[j]),
                            (Some(child), Some(_)) => {
                                // split the reply by the new intent
                                let o = cfg.outcome_prob_by_intent.get(*class);
                                for i2 in 0..N_INTENTS {
                                    let p = pred[i2]
                                        * (1.0 - o[i2])
                                        * (1.0 - c.stop_prob[i2])
                                        * c.reply_probs[i2][j];
                                    put(child * N_INTENTS + i2, pk * p);
                                }
                            }
                        }
                    }
                }
                rows.push(succ.into_iter().collect::<Vec<_>>());
            }
            transitions.push(rows);
        }
    }
    for s in n_live..n {
        transitions.push(vec![vec![(s, 1.0)]]);
    }

    let mut reward = vec![0.0; n];
    reward[term(TerminalReason::OutcomeAchieved)] = 1.0;
    let mut terminal = vec![false; n];
    terminal[n_live..].fill(true);
    let mdp = ExplicitMdp {
        discount: cfg.mdp.discount,
        initial,
        reward,
        terminal,
        transitions,
    };
    mdp.validate()?;

    let mut representatives = Vec::with_capacity(n);
    let mut beliefs = Vec::with_capacity(n_live);
    for x in 0..n_ctx {
        let rep = cat.representative_state(x)?;
        match mode {
            EnumerationMode::Belief => {
                representatives.push(rep);
                beliefs.push(ctx_belief[x]);
            }
            EnumerationMode::Omniscient => {
                for i in 0..N_INTENTS {
                    representatives.push(rep.clone());
                    let mut e = [0.0; N_INTENTS];
                    e[i] = 1.0;
                    beliefs.push(e);
                }
            }
        }
    }
    representatives.extend(terminal_representatives(&cat, cfg)?);

    Ok(EnumeratedEnv {
        mode,
        mdp,
        catalog: cat,
        responses,
        n_live,
        beliefs,
        representatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvInstance;
    use std::sync::Arc;

    #[test]
    fn single_turn_tiny_vocab_matches_hand_count() {
        let mut cfg = EnvConfig::toy_shop();
        cfg.mdp.horizon_cap = 1;
        cfg.mdp.vocab_size = 2;
        cfg.mdp.max_msg_len = 1;
        cfg.probe_tokens = vec![TokenId(0)];
        cfg.offer_tokens = vec![TokenId(1)];
        cfg.business_drafts = vec![super::super::WeightedMessage {
            message: Message::new([0]),
            prob: 1.0,
        }];
        cfg.customer.messages = vec![Message::new([0]), Message::new([1])];
        cfg.customer.outcome_message = Message::new([1]);
        for row in cfg
            .customer
            .opener_probs
            .iter_mut()
            .chain(cfg.customer.reply_probs.iter_mut())
        {
            *row = vec![0.5, 0.5];
        }
        let e = enumerate(&cfg, EnumerationMode::Belief).unwrap();
        // two openers, each with {abstain, [0], [1]}; plus four terminals
        assert_eq!(e.n_live, 2);
        assert_eq!(e.mdp.n_states(), 6);
        assert_eq!(e.responses.len(), 3);
        for s in 0..2 {
            assert_eq!(e.mdp.n_actions(s), 3);
            // every successor is terminal at horizon 1
            for row in &e.mdp.transitions[s] {
                assert!(row.iter().all(|&(t, _)| t >= 2));
            }
        }
    }

    #[test]
    fn rows_are_distributions() {
        let e = enumerate(&EnvConfig::toy_shop(), EnumerationMode::Belief).unwrap();
        assert_eq!(e.n_live, 273);
        for s in 0..e.mdp.n_states() {
            for row in &e.mdp.transitions[s] {
                let sum: f64 = row.iter().map(|x| x.1).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        let o = enumerate(&EnvConfig::toy_shop(), EnumerationMode::Omniscient).unwrap();
        assert_eq!(o.n_live, 273 * 3);
        o.mdp.validate().unwrap();
    }

    #[test]
    fn budget_is_enforced() {
        let mut cfg = EnvConfig::toy_shop();
        cfg.mdp.horizon_cap = 12;
        let err = enumerate(&cfg, EnumerationMode::Belief).unwrap_err();
        match err {
            Error::EnumerationTooLarge { horizon_cap, .. } => assert_eq!(horizon_cap, 12),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn state_ids_round_trip_through_representatives() {
        let e = enumerate(&EnvConfig::toy_shop(), EnumerationMode::Belief).unwrap();
        for s in 0..e.mdp.n_states() {
            assert_eq!(e.state_id(e.representative(s)).unwrap(), s);
        }
    }

    /// Empirical first-step successor frequencies against the exact rows.
    #[test]
    fn sampled_transitions_match_enumeration() {
        let cfg = Arc::new(EnvConfig::toy_shop());
        let e = enumerate(&cfg, EnumerationMode::Belief).unwrap();
        let actions = [
            SuggestedAction::Abstain,
            SuggestedAction::respond([4, 4]),
            SuggestedAction::respond([1, 9]),
        ];
        let opener = 1usize;
        let n = 60_000;
        for action in &actions {
            let a = e.responses.index_of(action).unwrap();
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            let mut kept = 0usize;
            let mut seed = 0u64;
            while kept < n {
                seed += 1;
                let mut env = EnvInstance::with_stream(cfg.clone(), 1234, seed);
                let s = env.reset();
                if e.state_id(&s).unwrap() != opener {
                    continue;
                }
                kept += 1;
                let (next, _) = env.step(&s, action).unwrap();
                *counts.entry(e.state_id(&next).unwrap()).or_insert(0) += 1;
            }
            for &(t, p) in &e.mdp.transitions[opener][a] {
                let freq = *counts.get(&t).unwrap_or(&0) as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (freq - p).abs() <= 3.0 * se + 1e-12,
                    "{action} -> {t}: freq {freq} vs p {p} (se {se})"
                );
            }
            let total: usize = counts.values().sum();
            assert_eq!(total, n);
        }
    }
}
