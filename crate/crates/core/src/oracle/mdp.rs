use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::check_discount;

pub(crate) const ROW_TOL: f64 = 1e-12;
const POLICY_TOL: f64 = 1e-9;

/// A finite MDP in explicit tabular form.
///
/// Rewards are attached to states and paid on entry: moving from a live
/// state `s` to `s'` earns `reward[s']`. Terminal states have a single action
/// that loops back to themselves and earns nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitMdp {
    pub discount: f64,
    pub initial: Vec<f64>,
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
    /// `transitions[s][a]` is a sparse successor distribution.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
}

impl ExplicitMdp {
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self, s: usize) -> usize {
        self.transitions[s].len()
    }

    pub fn validate(&self) -> Result<()> {
        check_discount(self.discount)?;
        let n = self.n_states();
        if self.initial.len() != n || self.reward.len() != n || self.terminal.len() != n {
            return Err(Error::Validation(
                "per-state tables disagree in length".into(),
            ));
        }
        let init: f64 = self.initial.iter().sum();
        if (init - 1.0).abs() > ROW_TOL || self.initial.iter().any(|p| *p < 0.0) {
            return Err(Error::Validation(format!(
                "initial distribution sums to {init}"
            )));
        }
        for s in 0..n {
            if self.transitions[s].is_empty() {
                return Err(Error::Validation(format!("state {s} has no actions")));
            }
            if self.terminal[s] && self.transitions[s] != vec![vec![(s, 1.0)]] {
                return Err(Error::Validation(format!(
                    "terminal state {s} must self-loop"
                )));
            }
            for (a, row) in self.transitions[s].iter().enumerate() {
                let mut sum = 0.0;
                for &(t, p) in row {
                    if t >= n || !(0.0..=1.0 + ROW_TOL).contains(&p) {
                        return Err(Error::Validation(format!(
                            "bad successor ({t}, {p}) at ({s}, {a})"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::Validation(format!("row ({s}, {a}) sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    /// Expected one-step reward of taking `a` in `s`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        self.transitions[s][a]
            .iter()
            .map(|&(t, p)| p * self.reward[t])
            .sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mdp: ExplicitMdp = serde_json::from_str(&text)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// A stochastic policy over the explicit action indices of an MDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(mdp: &ExplicitMdp) -> Self {
        TabularPolicy {
            probs: (0..mdp.n_states())
                .map(|s| vec![1.0 / mdp.n_actions(s) as f64; mdp.n_actions(s)])
                .collect(),
        }
    }

    /// Deterministic policy picking `choice[s]` (clamped to the action count).
    pub fn deterministic(mdp: &ExplicitMdp, choice: &[usize]) -> Self {
        TabularPolicy {
            probs: (0..mdp.n_states())
                .map(|s| {
                    let mut row = vec![0.0; mdp.n_actions(s)];
                    row[choice[s].min(mdp.n_actions(s) - 1)] = 1.0;
                    row
                })
                .collect(),
        }
    }

    pub fn check(&self, mdp: &ExplicitMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states() {
            return Err(Error::DimensionMismatch {
                expected: mdp.n_states(),
                got: self.probs.len(),
            });
        }
        for (s, row) in self.probs.iter().enumerate() {
            if row.len() != mdp.n_actions(s) {
                return Err(Error::Validation(format!(
                    "policy row {s} has {} entries for {} actions",
                    row.len(),
                    mdp.n_actions(s)
                )));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > POLICY_TOL {
                return Err(Error::Validation(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Successor distribution of `s` under the policy.
    pub(crate) fn step_row(&self, mdp: &ExplicitMdp, s: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        for (a, &pa) in self.probs[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for &(t, p) in &mdp.transitions[s][a] {
                out.push((t, pa * p));
            }
        }
    }
}
