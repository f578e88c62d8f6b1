//! Exact dynamic programming on explicit finite MDPs.
//!
//! Start-state arguments are distributions over states, so a single start
//! state is `point_mass(n, s)` and the environment's own start is
//! `mdp.initial`.

mod mdp;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mdp::{ExplicitMdp, TabularPolicy};

use crate::error::{Error, Result};

/// Sup-norm Bellman residual every returned solution must satisfy.
pub const BELLMAN_TOL: f64 = 1e-10;
/// Tail mass at which discounted sums are truncated.
pub const TAIL_MASS: f64 = 1e-12;
/// Two actions whose values differ by less than this count as tied.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionKind {
    Policy,
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub kind: SolutionKind,
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub bellman_residual: f64,
}

impl OracleSolution {
    /// Expected value under a start distribution.
    pub fn value(&self, start: &[f64]) -> f64 {
        start.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.q[s][a] - self.v[s]
    }

    /// Greedy policy, lowest action index among ties.
    pub fn greedy(&self) -> TabularPolicy {
        TabularPolicy {
            probs: self
                .q
                .iter()
                .map(|row| one_hot(row.len(), argmax(row)))
                .collect(),
        }
    }
}

pub fn point_mass(n: usize, s: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    point_mass(n, i)
}

/// First index attaining the maximum up to [`TIE_TOL`].
pub fn argmax(row: &[f64]) -> usize {
    let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&x| x >= best - TIE_TOL).unwrap_or(0)
}

fn q_from_v(mdp: &ExplicitMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.terminal[s] {
                return vec![0.0];
            }
            mdp.transitions[s]
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(t, p)| p * (mdp.reward[t] + mdp.discount * v[t]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn policy_residual(policy: &TabularPolicy, v: &[f64], q: &[Vec<f64>]) -> f64 {
    v.iter()
        .zip(q)
        .zip(&policy.probs)
        .map(|((v, qs), ps)| (v - qs.iter().zip(ps).map(|(q, p)| q * p).sum::<f64>()).abs())
        .fold(0.0, f64::max)
}

fn optimal_residual(v: &[f64], q: &[Vec<f64>]) -> f64 {
    v.iter()
        .zip(q)
        .map(|(v, qs)| (v - qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).abs())
        .fold(0.0, f64::max)
}

/// V^π and Q^π by a dense linear solve of `(I − γ P_π) V = P_π R`.
pub fn exact_policy_evaluation(
    mdp: &ExplicitMdp,
    policy: &TabularPolicy,
) -> Result<OracleSolution> {
    policy.check(mdp)?;
    let n = mdp.n_states();
    let g = mdp.discount;
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut row = Vec::new();
    for s in 0..n {
        if mdp.terminal[s] {
            continue;
        }
        policy.step_row(mdp, s, &mut row);
        for &(t, p) in &row {
            a[(s, t)] -= g * p;
            b[s] += p * mdp.reward[t];
        }
    }
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("policy evaluation system is singular".into()))?;
    let mut v: Vec<f64> = v.iter().copied().collect();
    for s in 0..n {
        if mdp.terminal[s] {
            v[s] = 0.0;
        }
    }
    let q = q_from_v(mdp, &v);
    let bellman_residual = policy_residual(policy, &v, &q);
    if bellman_residual > BELLMAN_TOL {
        return Err(Error::Numerical(format!(
            "policy evaluation residual {bellman_residual:e} exceeds {BELLMAN_TOL:e}"
        )));
    }
    Ok(OracleSolution {
        kind: SolutionKind::Policy,
        v,
        q,
        bellman_residual,
    })
}

/// Q* by synchronous value iteration until the sup-norm change is below `tol`.
pub fn value_iteration(mdp: &ExplicitMdp, tol: f64) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!(
            "value iteration tolerance must be positive, got {tol}"
        )));
    }
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    loop {
        let q = q_from_v(mdp, &v);
        let next: Vec<f64> = q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if change <= tol {
            break;
        }
    }
    let q = q_from_v(mdp, &v);
    let bellman_residual = optimal_residual(&v, &q);
    if bellman_residual > BELLMAN_TOL.max(tol) {
        return Err(Error::Numerical(format!(
            "value iteration residual {bellman_residual:e} exceeds tolerance"
        )));
    }
    Ok(OracleSolution {
        kind: SolutionKind::Optimal,
        v,
        q,
        bellman_residual,
    })
}

/// Live states in an order where every successor comes first; errors if the
/// live part of the MDP has a cycle.
fn reverse_topological(mdp: &ExplicitMdp) -> Result<Vec<usize>> {
    let n = mdp.n_states();
    let mut pending = vec![0usize; n];
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in 0..n {
        if mdp.terminal[s] {
            continue;
        }
        let mut succ: Vec<usize> = mdp.transitions[s]
            .iter()
            .flatten()
            .filter(|&&(t, p)| p > 0.0 && !mdp.terminal[t])
            .map(|&(t, _)| t)
            .collect();
        succ.sort_unstable();
        succ.dedup();
        pending[s] = succ.len();
        for t in succ {
            parents[t].push(s);
        }
    }
    let mut order: Vec<usize> = (0..n)
        .filter(|&s| !mdp.terminal[s] && pending[s] == 0)
        .collect();
    let mut k = 0;
    while k < order.len() {
        let t = order[k];
        k += 1;
        for &s in &parents[t] {
            pending[s] -= 1;
            if pending[s] == 0 {
                order.push(s);
            }
        }
    }
    let live = mdp.terminal.iter().filter(|t| !**t).count();
    if order.len() != live {
        return Err(Error::Validation("live states contain a cycle".into()));
    }
    Ok(order)
}

/// Q* by one backward sweep over an acyclic MDP.
pub fn backward_induction(mdp: &ExplicitMdp) -> Result<OracleSolution> {
    let order = reverse_topological(mdp)?;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut q: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0]).collect();
    for s in order {
        let row: Vec<f64> = mdp.transitions[s]
            .iter()
            .map(|succ| {
                succ.iter()
                    .map(|&(t, p)| p * (mdp.reward[t] + mdp.discount * v[t]))
                    .sum()
            })
            .collect();
        v[s] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        q[s] = row;
    }
    let bellman_residual = optimal_residual(&v, &q_from_v(mdp, &v));
    Ok(OracleSolution {
        kind: SolutionKind::Optimal,
        v,
        q,
        bellman_residual,
    })
}

/// Discounted visitation `(1−γ) Σ_t γ^t P(s_t = s)`, truncated once the
/// remaining discount mass falls below [`TAIL_MASS`].
pub fn visitation_distribution(
    mdp: &ExplicitMdp,
    policy: &TabularPolicy,
    start: &[f64],
) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    if start.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            expected: mdp.n_states(),
            got: start.len(),
        });
    }
    let g = mdp.discount;
    let n = mdp.n_states();
    let mut d = vec![0.0; n];
    let mut mu = start.to_vec();
    let mut next = vec![0.0; n];
    let mut weight = 1.0 - g;
    let mut tail = 1.0;
    let mut row = Vec::new();
    while tail > TAIL_MASS {
        for s in 0..n {
            d[s] += weight * mu[s];
        }
        tail -= weight;
        weight *= g;
        next.fill(0.0);
        for s in 0..n {
            if mu[s] == 0.0 {
                continue;
            }
            policy.step_row(mdp, s, &mut row);
            for &(t, p) in &row {
                next[t] += mu[s] * p;
            }
        }
        std::mem::swap(&mut mu, &mut next);
        if g == 0.0 {
            break;
        }
    }
    Ok(d)
}

/// Probability of the process ever being in each state, for states that
/// are absorbing; live entries are zero. Equivalent to the undiscounted
/// terminal distribution.
pub fn terminal_distribution(
    mdp: &ExplicitMdp,
    policy: &TabularPolicy,
    start: &[f64],
) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    let n = mdp.n_states();
    let mut mass = start.to_vec();
    let mut absorbed = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut row = Vec::new();
    for _ in 0..100_000 {
        next.fill(0.0);
        let mut live = 0.0;
        for s in 0..n {
            if mass[s] == 0.0 {
                continue;
            }
            if mdp.terminal[s] {
                absorbed[s] += mass[s];
                continue;
            }
            policy.step_row(mdp, s, &mut row);
            for &(t, p) in &row {
                next[t] += mass[s] * p;
            }
        }
        std::mem::swap(&mut mass, &mut next);
        for s in 0..n {
            if !mdp.terminal[s] {
                live += mass[s];
            }
        }
        if live <= 1e-15 {
            for s in 0..n {
                if mdp.terminal[s] {
                    absorbed[s] += mass[s];
                }
            }
            return Ok(absorbed);
        }
    }
    Err(Error::Numerical(
        "terminal distribution did not converge".into(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdlCheck {
    /// V^{new}(start) − V^{old}(start)
    pub lhs: f64,
    /// (1/(1−γ)) E_{d^{new}} E_{a~new}[A^{old}(s,a)]
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the performance difference identity for `new` against `old`.
pub fn performance_difference_check(
    mdp: &ExplicitMdp,
    old: &TabularPolicy,
    new: &TabularPolicy,
    start: &[f64],
) -> Result<PdlCheck> {
    let sol_old = exact_policy_evaluation(mdp, old)?;
    let sol_new = exact_policy_evaluation(mdp, new)?;
    let d = visitation_distribution(mdp, new, start)?;
    let lhs = sol_new.value(start) - sol_old.value(start);
    let mut acc = 0.0;
    for s in 0..mdp.n_states() {
        let adv: f64 = new.probs[s]
            .iter()
            .enumerate()
            .map(|(a, p)| p * sol_old.advantage(s, a))
            .sum();
        acc += d[s] * adv;
    }
    let rhs = acc / (1.0 - mdp.discount);
    Ok(PdlCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

/// Direction of the KL penalty between the new policy μ and the old π.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(π‖μ): old policy first.
    Forward,
    /// KL(μ‖π): new policy first.
    Reverse,
}

/// KL between two distributions on the same support.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL penalty between `new` and `old` in the given direction.
pub fn kl_dir(new: &[f64], old: &[f64], dir: KlDirection) -> f64 {
    match dir {
        KlDirection::Forward => kl(old, new),
        KlDirection::Reverse => kl(new, old),
    }
}

/// L(μ) = E_μ[q] − β KL.
pub fn regularized_value(mu: &[f64], old: &[f64], q: &[f64], beta: f64, dir: KlDirection) -> f64 {
    let e: f64 = mu.iter().zip(q).map(|(m, q)| m * q).sum();
    if beta == 0.0 {
        return e;
    }
    e - beta * kl_dir(mu, old, dir)
}

/// The maximizer of [`regularized_value`] over distributions μ.
pub fn regularized_maximizer(
    old: &[f64],
    q: &[f64],
    beta: f64,
    dir: KlDirection,
) -> Result<Vec<f64>> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::Config(format!(
            "beta must be a finite non-negative number, got {beta}"
        )));
    }
    if beta == 0.0 {
        return Ok(one_hot(q.len(), argmax(q)));
    }
    match dir {
        KlDirection::Reverse => {
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = old
                .iter()
                .zip(q)
                .map(|(p, q)| p * ((q - m) / beta).exp())
                .collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|x| x / z).collect())
        }
        KlDirection::Forward => {
            if old.iter().any(|p| *p <= 0.0) {
                return Err(Error::Numerical(
                    "forward-KL maximizer needs a full-support old policy".into(),
                ));
            }
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mass = |lambda: f64| -> f64 {
                old.iter()
                    .zip(q)
                    .map(|(p, q)| beta * p / (lambda - q))
                    .sum()
            };
            // mass is decreasing in λ on (m, ∞), ≥ 1 near m and ≤ 1 at m + β
            let (mut lo, mut hi) = (m, m + beta);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if mass(mid) > 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let w: Vec<f64> = old
                .iter()
                .zip(q)
                .map(|(p, q)| beta * p / (hi - q))
                .collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|x| x / z).collect())
        }
    }
}

/// sup_μ L(μ) − L(new), clamped at zero.
pub fn regularized_slack(
    new: &[f64],
    old: &[f64],
    q: &[f64],
    beta: f64,
    dir: KlDirection,
) -> Result<f64> {
    let best = regularized_maximizer(old, q, beta, dir)?;
    let sup = match (dir, beta == 0.0) {
        (KlDirection::Reverse, false) => {
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + beta
                * old
                    .iter()
                    .zip(q)
                    .map(|(p, q)| p * ((q - m) / beta).exp())
                    .sum::<f64>()
                    .ln()
        }
        _ => regularized_value(&best, old, q, beta, dir),
    };
    Ok((sup - regularized_value(new, old, q, beta, dir)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementBoundCheck {
    pub direction: KlDirection,
    pub beta: f64,
    /// sup over live (s, a) of |q_hat − Q^{old}|
    pub eps_q: f64,
    pub lhs: f64,
    /// Bound with the objective's KL direction used throughout.
    pub rhs: f64,
    /// Bound with slack from `direction` but the opposite KL in the display.
    pub rhs_mixed: f64,
    pub mean_kl: f64,
    pub mean_slack: f64,
    pub holds: bool,
}

/// Evaluates the KL-regularized approximate improvement bound for `new`
/// against `old` with the critic `q_hat`.
pub fn improvement_bound_check(
    mdp: &ExplicitMdp,
    old: &TabularPolicy,
    new: &TabularPolicy,
    q_hat: &[Vec<f64>],
    beta: f64,
    start: &[f64],
    direction: KlDirection,
) -> Result<ImprovementBoundCheck> {
    let n = mdp.n_states();
    if q_hat.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q_hat.len(),
        });
    }
    let sol_old = exact_policy_evaluation(mdp, old)?;
    let sol_new = exact_policy_evaluation(mdp, new)?;
    let mut eps_q: f64 = 0.0;
    for s in (0..n).filter(|&s| !mdp.terminal[s]) {
        if q_hat[s].len() != mdp.n_actions(s) {
            return Err(Error::DimensionMismatch {
                expected: mdp.n_actions(s),
                got: q_hat[s].len(),
            });
        }
        for (a, qh) in q_hat[s].iter().enumerate() {
            eps_q = eps_q.max((qh - sol_old.q[s][a]).abs());
        }
    }
    let other = match direction {
        KlDirection::Forward => KlDirection::Reverse,
        KlDirection::Reverse => KlDirection::Forward,
    };
    let d = visitation_distribution(mdp, new, start)?;
    let (mut acc, mut acc_mixed, mut mean_kl, mut mean_slack) = (0.0, 0.0, 0.0, 0.0);
    for s in 0..n {
        let (k, k_other, slack) = if mdp.terminal[s] {
            (0.0, 0.0, 0.0)
        } else {
            (
                kl_dir(&new.probs[s], &old.probs[s], direction),
                kl_dir(&new.probs[s], &old.probs[s], other),
                regularized_slack(&new.probs[s], &old.probs[s], &q_hat[s], beta, direction)?,
            )
        };
        acc += d[s] * (beta * k - slack - 2.0 * eps_q);
        acc_mixed += d[s] * (beta * k_other - slack - 2.0 * eps_q);
        mean_kl += d[s] * k;
        mean_slack += d[s] * slack;
    }
    let lhs = sol_new.value(start) - sol_old.value(start);
    let rhs = acc / (1.0 - mdp.discount);
    Ok(ImprovementBoundCheck {
        direction,
        beta,
        eps_q,
        lhs,
        rhs,
        rhs_mixed: acc_mixed / (1.0 - mdp.discount),
        mean_kl,
        mean_slack,
        holds: lhs >= rhs - 1e-12,
    })
}

/// Dense random MDP with `n_states` states, the last of which is terminal.
/// Live rows are random distributions over all states; rewards are uniform
/// on [0, 1].
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> ExplicitMdp {
    assert!(n_states >= 2 && n_actions >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        let w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let z: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.into_iter().map(|x| x / z).collect();
        let head: f64 = p[..k - 1].iter().sum();
        p[k - 1] = 1.0 - head;
        p
    };
    let last = n_states - 1;
    let transitions = (0..n_states)
        .map(|s| {
            if s == last {
                return vec![vec![(s, 1.0)]];
            }
            (0..n_actions)
                .map(|_| dist(&mut rng, n_states).into_iter().enumerate().collect())
                .collect()
        })
        .collect();
    let reward = (0..n_states).map(|_| rng.gen::<f64>()).collect();
    let initial = dist(&mut rng, n_states);
    let mut terminal = vec![false; n_states];
    terminal[last] = true;
    ExplicitMdp {
        discount,
        initial,
        reward,
        terminal,
        transitions,
    }
}

/// Random full-support policy on `mdp`.
pub fn random_policy(mdp: &ExplicitMdp, seed: u64) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy {
        probs: (0..mdp.n_states())
            .map(|s| {
                let k = mdp.n_actions(s);
                let w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn chain(p: f64) -> ExplicitMdp {
        // s0 -> s1 (reward 1, terminal) with prob p, else s2 (terminal, 0)
        ExplicitMdp {
            discount: 0.9,
            initial: vec![1.0, 0.0, 0.0],
            reward: vec![0.0, 1.0, 0.0],
            terminal: vec![false, true, true],
            transitions: vec![
                vec![vec![(1, p), (2, 1.0 - p)]],
                vec![vec![(1, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
        }
    }

    #[test]
    fn absorbing_state_has_zero_value() {
        let m = ExplicitMdp {
            discount: 0.9,
            initial: vec![1.0],
            reward: vec![0.0],
            terminal: vec![true],
            transitions: vec![vec![vec![(0, 1.0)]]],
        };
        let sol = exact_policy_evaluation(&m, &TabularPolicy::uniform(&m)).unwrap();
        assert_eq!(sol.v, vec![0.0]);
    }

    #[test]
    fn two_state_chain_value_is_p() {
        for p in [0.0, 0.3, 1.0] {
            let m = chain(p);
            let sol = exact_policy_evaluation(&m, &TabularPolicy::uniform(&m)).unwrap();
            assert_abs_diff_eq!(sol.v[0], p, epsilon = 1e-14);
        }
    }

    #[test]
    fn bandit_and_zero_reward_optima() {
        let m = ExplicitMdp {
            discount: 0.5,
            initial: vec![1.0, 0.0, 0.0],
            reward: vec![0.0, 1.0, 0.0],
            terminal: vec![false, true, true],
            transitions: vec![
                vec![vec![(1, 1.0)], vec![(2, 1.0)]],
                vec![vec![(1, 1.0)]],
                vec![vec![(2, 1.0)]],
            ],
        };
        let sol = value_iteration(&m, 1e-12).unwrap();
        assert_eq!(sol.q[0], vec![1.0, 0.0]);
        assert_eq!(sol.greedy().probs[0], vec![1.0, 0.0]);
        let mut z = m.clone();
        z.reward = vec![0.0; 3];
        let sol = value_iteration(&z, 1e-12).unwrap();
        assert!(sol.q.iter().flatten().all(|q| *q == 0.0));
        // ties go to the lowest index
        assert_eq!(sol.greedy().probs[0], vec![1.0, 0.0]);
    }

    #[test]
    fn visitation_of_two_state_chain() {
        let m = ExplicitMdp {
            discount: 0.9,
            initial: vec![1.0, 0.0],
            reward: vec![0.0, 0.0],
            terminal: vec![false, true],
            transitions: vec![vec![vec![(1, 1.0)]], vec![vec![(1, 1.0)]]],
        };
        let d = visitation_distribution(&m, &TabularPolicy::uniform(&m), &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.9, epsilon = 1e-11);
        let d = visitation_distribution(&m, &TabularPolicy::uniform(&m), &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d[1], 1.0, epsilon = 1e-11);
    }

    #[test]
    fn backward_induction_rejects_cycles() {
        let m = random_mdp(4, 2, 0.9, 1);
        assert!(backward_induction(&m).is_err());
    }

    #[test]
    fn identical_policies_have_zero_performance_difference() {
        let m = random_mdp(5, 3, 0.9, 3);
        let p = random_policy(&m, 4);
        let c = performance_difference_check(&m, &p, &p, &m.initial).unwrap();
        assert!(c.lhs.abs() < 1e-14 && c.rhs.abs() < 1e-10);
    }

    #[test]
    fn forward_maximizer_satisfies_stationarity() {
        let old = [0.2, 0.5, 0.3];
        let q = [0.1, 0.9, 0.4];
        let mu = regularized_maximizer(&old, &q, 0.3, KlDirection::Forward).unwrap();
        let best = regularized_value(&mu, &old, &q, 0.3, KlDirection::Forward);
        // no nearby distribution does better
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let mut nu = mu.clone();
                nu[i] += 1e-4;
                nu[j] -= 1e-4;
                assert!(
                    regularized_value(&nu, &old, &q, 0.3, KlDirection::Forward) <= best + 1e-12
                );
            }
        }
        let r = regularized_maximizer(&old, &q, 0.3, KlDirection::Reverse).unwrap();
        assert!(regularized_slack(&r, &old, &q, 0.3, KlDirection::Reverse).unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn visitation_is_a_distribution(seed in 0u64..500) {
            let m = random_mdp(5, 3, 0.8, seed);
            let p = random_policy(&m, seed + 1);
            let d = visitation_distribution(&m, &p, &m.initial).unwrap();
            prop_assert!(d.iter().all(|x| *x >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn greedy_improves_every_state(seed in 0u64..200) {
            let m = random_mdp(6, 3, 0.9, seed);
            let p = random_policy(&m, seed + 7);
            let sol = exact_policy_evaluation(&m, &p).unwrap();
            let g = exact_policy_evaluation(&m, &sol.greedy()).unwrap();
            for s in 0..m.n_states() {
                prop_assert!(g.v[s] >= sol.v[s] - 1e-10);
            }
        }

        #[test]
        fn optimal_dominates_random_policies(seed in 0u64..200) {
            let m = random_mdp(5, 2, 0.9, seed);
            let opt = value_iteration(&m, 1e-13).unwrap();
            let sol = exact_policy_evaluation(&m, &random_policy(&m, seed)).unwrap();
            for s in 0..m.n_states() {
                prop_assert!(opt.v[s] >= sol.v[s] - 1e-10);
            }
        }
    }
}
