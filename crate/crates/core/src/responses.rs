//! The finite set of suggestions the assistant can make: abstain, or any
//! non-empty token sequence of length at most `max_msg_len`.
//!
//! Canonical order: `Abstain` is index 0, then messages by length, then
//! lexicographically. Greedy tie-breaking elsewhere relies on this order.

use crate::error::{Error, Result};
use crate::mdp::{Message, SuggestedAction};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponseSpace {
    vocab_size: usize,
    max_len: usize,
    /// offsets[l] = index of the first message of length l (l >= 1)
    offsets: Vec<usize>,
    len: usize,
}

impl ResponseSpace {
    pub fn new(vocab_size: usize, max_len: usize) -> Result<Self> {
        let mut offsets = vec![0, 1];
        let mut total: usize = 1;
        let mut block: usize = 1;
        for _ in 1..=max_len {
            block = block
                .checked_mul(vocab_size)
                .ok_or_else(|| Error::Config("response space overflows usize".into()))?;
            total = total
                .checked_add(block)
                .ok_or_else(|| Error::Config("response space overflows usize".into()))?;
            offsets.push(total);
        }
        Ok(ResponseSpace {
            vocab_size,
            max_len,
            offsets,
            len: total,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn index_of(&self, action: &SuggestedAction) -> Option<usize> {
        match action {
            SuggestedAction::Abstain => Some(0),
            SuggestedAction::Respond(m) => {
                let l = m.len();
                if l == 0 || l > self.max_len {
                    return None;
                }
                let mut rank = 0usize;
                for t in m.tokens() {
                    if t.index() >= self.vocab_size {
                        return None;
                    }
                    rank = rank * self.vocab_size + t.index();
                }
                Some(self.offsets[l] + rank)
            }
        }
    }

    pub fn action(&self, index: usize) -> Option<SuggestedAction> {
        if index == 0 {
            return Some(SuggestedAction::Abstain);
        }
        if index >= self.len {
            return None;
        }
        let l = (1..=self.max_len).find(|&l| index < self.offsets[l + 1])?;
        let mut rank = index - self.offsets[l];
        let mut tokens = vec![0usize; l];
        for slot in tokens.iter_mut().rev() {
            *slot = rank % self.vocab_size;
            rank /= self.vocab_size;
        }
        Some(SuggestedAction::Respond(Message::new(tokens)))
    }

    pub fn iter(&self) -> impl Iterator<Item = SuggestedAction> + '_ {
        (0..self.len).map(move |i| self.action(i).expect("index in range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shop_space_has_157_responses() {
        let rs = ResponseSpace::new(12, 2).unwrap();
        assert_eq!(rs.len(), 1 + 12 + 144);
        assert_eq!(rs.action(0), Some(SuggestedAction::Abstain));
        assert_eq!(rs.action(1), Some(SuggestedAction::respond([0])));
        assert_eq!(rs.action(13), Some(SuggestedAction::respond([0, 0])));
        assert_eq!(rs.action(156), Some(SuggestedAction::respond([11, 11])));
        assert_eq!(rs.action(157), None);
    }

    #[test]
    fn index_and_action_are_inverse() {
        let rs = ResponseSpace::new(5, 3).unwrap();
        for (i, a) in rs.iter().enumerate() {
            assert_eq!(rs.index_of(&a), Some(i));
        }
        assert_eq!(rs.index_of(&SuggestedAction::respond([0, 0, 0, 0])), None);
        assert_eq!(rs.index_of(&SuggestedAction::respond([5])), None);
    }
}
