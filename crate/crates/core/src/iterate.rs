//! The batch-online loop: deploy a frozen policy, collect a batch, fit Q̂
//! for it, improve the policy against Q̂ with PPO, repeat until Q̂ settles.
//! Also the simulated A/B comparison between two policies.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnumeratedEnv, EnvConfig, EnvInstance};
use crate::error::{Error, Result};
use crate::mdp::{ConversationState, SuggestedAction, TerminalReason, Trajectory, Transition};
use crate::oracle::{exact_policy_evaluation, terminal_distribution, OracleSolution};
use crate::policy::{persona_wrap, FeatureSpec, PersonaSpec, PolicyParams};
use crate::ppo::{build_prompt, ppo_improve, PpoConfig, PromptContext};
use crate::q_eval::{
    build_eval_dataset, fit_q, FeaturizerKind, FitOptions, QFeaturizer, QFitReport, QFunction,
    WeightingOptions,
};
use crate::responses::ResponseSpace;
use crate::FORMAT_VERSION;

/// Mixes a base seed with a purpose tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z =
        base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_COLLECT: u64 = 1;
const TAG_PPO: u64 = 2;
const TAG_FIT: u64 = 3;
const TAG_PROMPTS: u64 = 4;

fn run_episode(
    env: &Arc<EnvConfig>,
    policy: &PolicyParams,
    tag: &str,
    seed: u64,
    episode: u64,
) -> Result<Trajectory> {
    let mut e = EnvInstance::with_stream(env.clone(), seed, 2 * episode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * episode + 1);
    let mut state = e.reset();
    let mut transitions = Vec::new();
    while !state.is_terminal() {
        let key = policy.feature_spec.key(&state)?;
        let sample = policy.sample_key(&key, &mut rng);
        let (next, reward) = e.step(&state, &sample.action)?;
        transitions.push(Transition {
            state,
            action: sample.action,
            reward,
            next_state: next.clone(),
            behavior_logprobs: Some(sample.token_logprobs),
        });
        state = next;
    }
    Ok(Trajectory {
        episode_id: episode,
        behavior_tag: tag.to_string(),
        transitions,
    })
}

/// `n` episodes under a frozen policy. Episode `k` (numbered from
/// `first_episode`) uses environment stream `2k` and policy stream `2k+1`
/// of `seed`, so the batch does not depend on the thread count.
pub fn collect_batch(
    env: &Arc<EnvConfig>,
    policy: &PolicyParams,
    n: usize,
    seed: u64,
    first_episode: u64,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("batch needs at least one episode".into()));
    }
    policy.check_compatible(&env.catalog())?;
    let tag = policy.hash()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let k = first_episode + i;
            run_episode(env, policy, &tag, seed, k).map_err(|e| Error::Episode {
                episode: k,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QSource {
    /// Monte Carlo fit on the collected batch.
    Fitted,
    /// Exact Q^π from the oracle (needs an enumerable environment).
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateConfig {
    pub episodes_per_iteration: usize,
    pub iterations: usize,
    pub q_source: QSource,
    pub featurizer: FeaturizerKind,
    pub ridge: f64,
    pub holdout_fraction: f64,
    pub w_max: f64,
    pub correct_returns: bool,
    /// Batches in each Q̂ dataset: the current one plus this many minus one
    /// earlier batches, importance-weighted toward the current policy.
    pub history_batches: usize,
    /// Cap on prompts per PPO step (seeded subsample of visited states).
    pub max_prompts: Option<usize>,
    pub probe_size: usize,
    pub convergence_tol: f64,
    pub stop_when_converged: bool,
    /// Scale of the uniform initial weights of π₀.
    pub init_scale: f64,
    pub shared_features: bool,
    /// Collect with a persona-wrapped behavior policy.
    pub persona: Option<PersonaSpec>,
    pub seed: u64,
}

impl Default for IterateConfig {
    fn default() -> Self {
        IterateConfig {
            episodes_per_iteration: 10_000,
            iterations: 10,
            q_source: QSource::Fitted,
            featurizer: FeaturizerKind::Tabular,
            ridge: 0.0,
            holdout_fraction: 0.2,
            w_max: 20.0,
            correct_returns: true,
            history_batches: 1,
            max_prompts: None,
            probe_size: 512,
            convergence_tol: 0.02,
            stop_when_converged: false,
            init_scale: 0.1,
            shared_features: false,
            persona: None,
            seed: 0,
        }
    }
}

impl IterateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_iteration == 0 || self.probe_size == 0 || self.history_batches == 0 {
            return Err(Error::Config(
                "episodes_per_iteration, probe_size and history_batches must be positive".into(),
            ));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_policy(&self, env: &EnvConfig) -> PolicyParams {
        let mut spec = FeatureSpec::new(env.catalog());
        spec.shared_block = self.shared_features;
        PolicyParams::seeded(spec, self.init_scale, derive_seed(self.seed, 0, 0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub format_version: u32,
    pub iteration: usize,
    pub policy_ref: String,
    pub q_ref: String,
    pub next_policy_ref: String,
    pub episodes: usize,
    pub outcome_rate: f64,
    /// Mean first-step return of the batch.
    pub value_estimate: f64,
    /// Exact V^{π_i}(s₀) when an oracle is available.
    pub oracle_value: Option<f64>,
    pub oracle_outcome_rate: Option<f64>,
    /// sup |Q_i − Q_{i−1}| over the probe set.
    pub q_delta: Option<f64>,
    /// sup over probe states of the total variation between π_i and π_{i+1}.
    pub policy_delta: f64,
    pub fit: QFitReport,
    pub ppo_surrogate_before: f64,
    pub ppo_surrogate_after: f64,
    pub ppo_mean_kl: f64,
    pub ppo_slack_proxy: f64,
    pub local_improvement_rate: f64,
    pub ppo_diverged: bool,
    pub n_prompts: usize,
}

/// Fixed (state, action) pairs where successive Q̂s are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub pairs: Vec<(ConversationState, SuggestedAction)>,
}

impl ProbeSet {
    /// States visited by uniformly random suggestions, each paired with a
    /// uniformly random action.
    pub fn generate(env: &Arc<EnvConfig>, size: usize, seed: u64) -> Result<Self> {
        let cat = env.catalog();
        let uniform = PolicyParams::zeros(FeatureSpec::new(cat.clone()));
        let rs = ResponseSpace::new(cat.vocab_size, cat.max_msg_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(size);
        let mut episode = 0u64;
        while pairs.len() < size {
            let batch = collect_batch(env, &uniform, 64, seed, episode)?;
            episode += 64;
            for t in batch.iter().flat_map(|t| &t.transitions) {
                if pairs.len() == size {
                    break;
                }
                let a = rs.action(rng.gen_range(0..rs.len())).expect("in range");
                pairs.push((t.state.clone(), a));
            }
        }
        Ok(ProbeSet { pairs })
    }

    pub fn q_delta(&self, a: &QFunction, b: &QFunction) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for (s, act) in &self.pairs {
            sup = sup.max((a.predict(s, act)? - b.predict(s, act)?).abs());
        }
        Ok(sup)
    }

    pub fn policy_delta(&self, a: &PolicyParams, b: &PolicyParams) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for (s, _) in &self.pairs {
            let k = a.feature_spec.key(s)?;
            let pa = a.response_distribution(&k);
            let pb = b.response_distribution(&k);
            let tv: f64 = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            sup = sup.max(tv);
        }
        Ok(sup)
    }
}

/// Tabular Q̂ holding an exact Q table over contexts.
pub fn oracle_q_function(env: &EnumeratedEnv, sol: &OracleSolution) -> Result<QFunction> {
    if env.mode != crate::env::EnumerationMode::Belief {
        return Err(Error::Config(
            "oracle Q needs a belief-mode enumeration".into(),
        ));
    }
    let mut q = QFunction::zeros(QFeaturizer::new(
        FeaturizerKind::Tabular,
        env.catalog.clone(),
    ));
    let n_a = env.responses.len();
    for c in 0..env.n_live {
        q.weights[c * n_a..(c + 1) * n_a].copy_from_slice(&sol.q[c]);
    }
    Ok(q)
}

/// Exact evaluation of a policy on the belief MDP: (V(s₀), outcome rate).
pub fn oracle_evaluate(
    env: &EnumeratedEnv,
    policy: &PolicyParams,
) -> Result<(OracleSolution, f64, f64)> {
    let tab = policy.to_tabular(env)?;
    let sol = exact_policy_evaluation(&env.mdp, &tab)?;
    let v = sol.value(&env.mdp.initial);
    let ends = terminal_distribution(&env.mdp, &tab, &env.mdp.initial)?;
    let rate = ends[env.terminal_id(TerminalReason::OutcomeAchieved)];
    Ok((sol, v, rate))
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(
        serde_json::to_string(value)?.as_bytes(),
    )))
}

/// Everything one iteration produces.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub record: IterationRecord,
    pub batch: Vec<Trajectory>,
    pub q: QFunction,
    pub next_policy: PolicyParams,
}

/// Inputs that stay fixed across iterations.
pub struct LoopContext<'a> {
    pub env: Arc<EnvConfig>,
    pub cfg: &'a IterateConfig,
    pub ppo: &'a PpoConfig,
    pub probe: &'a ProbeSet,
    pub oracle: Option<&'a EnumeratedEnv>,
}

/// collect → dataset → fit Q̂ → prompts → PPO. `history` holds earlier
/// batches, oldest first; only the last `history_batches − 1` are used.
/// Nothing is persisted here.
pub fn run_iteration(
    ctx: &LoopContext,
    iteration: usize,
    policy: &PolicyParams,
    prev_q: Option<&QFunction>,
    history: &[Vec<Trajectory>],
) -> Result<IterationOutput> {
    let cfg = ctx.cfg;
    let i = iteration as u64;
    let behavior = match &cfg.persona {
        Some(p) => persona_wrap(policy, p)?,
        None => policy.clone(),
    };
    let n = cfg.episodes_per_iteration;
    let batch = collect_batch(
        &ctx.env,
        &behavior,
        n,
        derive_seed(cfg.seed, TAG_COLLECT, i),
        i * n as u64,
    )?;
    let gamma = ctx.env.mdp.discount;
    let outcome_rate =
        batch.iter().filter(|t| t.achieved_outcome()).count() as f64 / batch.len() as f64;
    let value_estimate = batch
        .iter()
        .map(|t| crate::q_eval::discounted_returns(&t.rewards(), gamma)[0])
        .sum::<f64>()
        / batch.len() as f64;

    let oracle_eval = match ctx.oracle {
        Some(e) => Some(oracle_evaluate(e, policy)?),
        None => None,
    };
    let q = match cfg.q_source {
        QSource::Fitted => {
            let keep = history.len().min(cfg.history_batches - 1);
            let pooled: Vec<Trajectory> = history[history.len() - keep..]
                .iter()
                .flatten()
                .chain(&batch)
                .cloned()
                .collect();
            let ds = build_eval_dataset(
                &pooled,
                policy,
                gamma,
                WeightingOptions {
                    w_max: cfg.w_max,
                    correct_returns: cfg.correct_returns,
                },
            )?;
            let featurizer = QFeaturizer::new(cfg.featurizer, ctx.env.catalog());
            fit_q(
                &ds,
                &featurizer,
                FitOptions {
                    ridge: cfg.ridge,
                    holdout_fraction: cfg.holdout_fraction,
                    seed: derive_seed(cfg.seed, TAG_FIT, i),
                },
            )?
        }
        QSource::Oracle => {
            let env = ctx.oracle.ok_or_else(|| {
                Error::Config("q_source = oracle needs an enumerable environment".into())
            })?;
            let (sol, _, _) = oracle_eval.as_ref().expect("oracle evaluated above");
            oracle_q_function(env, sol)?
        }
    };

    let cat = ctx.env.catalog();
    let mut prompts: Vec<PromptContext> = batch
        .iter()
        .flat_map(|t| &t.transitions)
        .map(|t| build_prompt(&t.state, &cat))
        .collect::<Result<_>>()?;
    if let Some(max) = cfg.max_prompts {
        if prompts.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_PROMPTS, i));
            prompts.shuffle(&mut rng);
            prompts.truncate(max);
        }
    }
    let ppo_cfg = PpoConfig {
        seed: derive_seed(ctx.ppo.seed ^ cfg.seed, TAG_PPO, i),
        ..ctx.ppo.clone()
    };
    let (next_policy, stats) = ppo_improve(policy, &prompts, &q, &ppo_cfg)?;

    let q_delta = match prev_q {
        Some(p) => Some(ctx.probe.q_delta(p, &q)?),
        None => None,
    };
    let record = IterationRecord {
        format_version: FORMAT_VERSION,
        iteration,
        policy_ref: policy.hash()?,
        q_ref: hash_json(&q)?,
        next_policy_ref: next_policy.hash()?,
        episodes: batch.len(),
        outcome_rate,
        value_estimate,
        oracle_value: oracle_eval.as_ref().map(|e| e.1),
        oracle_outcome_rate: oracle_eval.as_ref().map(|e| e.2),
        q_delta,
        policy_delta: ctx.probe.policy_delta(policy, &next_policy)?,
        fit: q.fit_report,
        ppo_surrogate_before: stats.surrogate_before,
        ppo_surrogate_after: stats.surrogate_after,
        ppo_mean_kl: stats.mean_kl,
        ppo_slack_proxy: stats.optimization_slack_proxy,
        local_improvement_rate: stats.local_improvement_rate,
        ppo_diverged: stats.diverged,
        n_prompts: stats.n_prompts,
    };
    Ok(IterationOutput {
        record,
        batch,
        q,
        next_policy,
    })
}

/// True iff the last two records both have `q_delta ≤ tol`.
pub fn has_converged(records: &[IterationRecord], tol: f64) -> bool {
    if records.len() < 2 {
        return false;
    }
    records[records.len() - 2..]
        .iter()
        .all(|r| r.q_delta.is_some_and(|d| d <= tol))
}

/// Persisted iterations of one run: `iter_<i>/` holds the policy, Q̂, record,
/// next policy and the batch's trajectory log.
#[derive(Clone, Debug)]
pub struct CheckpointStore {
    pub root: PathBuf,
}

const FILES: [&str; 5] = [
    "policy.json",
    "q.json",
    "record.json",
    "next_policy.json",
    "records.jsonl",
];

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(CheckpointStore { root })
    }

    pub fn iter_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("iter_{i}"))
    }

    /// Writes all files into a temporary directory, then renames it
    /// into place, so a failed iteration leaves nothing behind.
    pub fn save(&self, policy: &PolicyParams, out: &IterationOutput) -> Result<PathBuf> {
        let i = out.record.iteration;
        let final_dir = self.iter_dir(i);
        if final_dir.exists() {
            return Err(Error::Data(format!(
                "{} already exists",
                final_dir.display()
            )));
        }
        let tmp = self.root.join(format!(".tmp_iter_{i}"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let write = || -> Result<()> {
            policy.save(&tmp.join(FILES[0]))?;
            out.q.save(&tmp.join(FILES[1]))?;
            let rec = serde_json::to_string_pretty(&out.record)?;
            std::fs::write(tmp.join(FILES[2]), rec)
                .map_err(|e| Error::io(tmp.join(FILES[2]), e))?;
            out.next_policy.save(&tmp.join(FILES[3]))?;
            crate::trajectory_log::write_trajectories(&tmp.join(FILES[4]), &out.batch)
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
        std::fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
        Ok(final_dir)
    }

    /// Indices of complete iterations, ascending.
    pub fn iterations(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let rd = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            let Some(i) = name
                .to_str()
                .and_then(|n| n.strip_prefix("iter_"))
                .and_then(|n| n.parse().ok())
            else {
                continue;
            };
            if FILES.iter().all(|f| entry.path().join(f).exists()) {
                out.push(i);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn load_record(&self, i: usize) -> Result<IterationRecord> {
        let p = self.iter_dir(i).join(FILES[2]);
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_policy(&self, i: usize, next: bool) -> Result<PolicyParams> {
        let p = self
            .iter_dir(i)
            .join(if next { FILES[3] } else { FILES[0] });
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
        PolicyParams::load(&p)
    }

    pub fn load_batch(&self, i: usize) -> Result<Vec<Trajectory>> {
        let p = self.iter_dir(i).join(FILES[4]);
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
        crate::trajectory_log::read_trajectories(&p)
    }

    pub fn load_q(&self, i: usize) -> Result<QFunction> {
        let p = self.iter_dir(i).join(FILES[1]);
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
        QFunction::load(&p)
    }
}

/// Result of a multi-iteration run.
#[derive(Clone, Debug)]
pub struct LoopResult {
    pub records: Vec<IterationRecord>,
    pub final_policy: PolicyParams,
    pub converged: bool,
}

/// Runs iterations until `cfg.iterations` records exist (counting resumed
/// ones) or, if enabled, until Q̂ converges. With a store, every iteration is
/// persisted before the next starts and a run resumes from its last record.
pub fn run_loop(
    ctx: &LoopContext,
    initial: PolicyParams,
    store: Option<&CheckpointStore>,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<LoopResult> {
    ctx.cfg.validate()?;
    let mut records = Vec::new();
    let mut policy = initial;
    let mut prev_q = None;
    let keep = ctx.cfg.history_batches - 1;
    let mut history: Vec<Vec<Trajectory>> = Vec::new();
    if let Some(st) = store {
        let done = st.iterations()?;
        for (k, &i) in done.iter().enumerate() {
            if i != k {
                return Err(Error::Data(format!(
                    "checkpoint store has a gap before iter_{i}"
                )));
            }
            records.push(st.load_record(i)?);
        }
        if let Some(&last) = done.last() {
            policy = st.load_policy(last, true)?;
            prev_q = Some(st.load_q(last)?);
        }
        for &i in done.iter().rev().take(keep).rev() {
            history.push(st.load_batch(i)?);
        }
    }
    let mut converged = has_converged(&records, ctx.cfg.convergence_tol);
    while records.len() < ctx.cfg.iterations && !(converged && ctx.cfg.stop_when_converged) {
        let i = records.len();
        let mut out = run_iteration(ctx, i, &policy, prev_q.as_ref(), &history)?;
        if let Some(st) = store {
            st.save(&policy, &out)?;
        }
        if keep > 0 {
            history.push(std::mem::take(&mut out.batch));
            if history.len() > keep {
                history.remove(0);
            }
        }
        on_record(&out.record);
        records.push(out.record);
        policy = out.next_policy;
        prev_q = Some(out.q);
        converged = has_converged(&records, ctx.cfg.convergence_tol);
    }
    Ok(LoopResult {
        records,
        final_policy: policy,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub arm_a: String,
    pub arm_b: String,
    pub episodes_per_arm: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    /// rate_b − rate_a
    pub difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AbReport {
    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

/// Two-proportion normal-approximation interval for `rate_b − rate_a`.
pub fn two_proportion_ci(successes_a: usize, successes_b: usize, n: usize) -> (f64, f64, f64, f64) {
    let nf = n as f64;
    let pa = successes_a as f64 / nf;
    let pb = successes_b as f64 / nf;
    let se = (pa * (1.0 - pa) / nf + pb * (1.0 - pb) / nf).sqrt();
    let d = pb - pa;
    (pa, pb, d - 1.96 * se, d + 1.96 * se)
}

/// Simulated A/B test. Arm A uses episode streams `[0, n)` and arm B
/// `[n, 2n)` of `seed`, so the arms never share randomness.
pub fn ab_compare(
    env: &Arc<EnvConfig>,
    a: &PolicyParams,
    b: &PolicyParams,
    n_per_arm: usize,
    seed: u64,
) -> Result<AbReport> {
    if n_per_arm < 30 {
        return Err(Error::Config(format!(
            "A/B test needs at least 30 episodes per arm, got {n_per_arm}"
        )));
    }
    let ta = collect_batch(env, a, n_per_arm, seed, 0)?;
    let tb = collect_batch(env, b, n_per_arm, seed, n_per_arm as u64)?;
    let sa = ta.iter().filter(|t| t.achieved_outcome()).count();
    let sb = tb.iter().filter(|t| t.achieved_outcome()).count();
    let (rate_a, rate_b, ci_low, ci_high) = two_proportion_ci(sa, sb, n_per_arm);
    Ok(AbReport {
        arm_a: a.hash()?,
        arm_b: b.hash()?,
        episodes_per_arm: n_per_arm,
        rate_a,
        rate_b,
        difference: rate_b - rate_a,
        ci_low,
        ci_high,
    })
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(q_delta: Option<f64>) -> IterationRecord {
        IterationRecord {
            format_version: 1,
            iteration: 0,
            policy_ref: String::new(),
            q_ref: String::new(),
            next_policy_ref: String::new(),
            episodes: 1,
            outcome_rate: 0.0,
            value_estimate: 0.0,
            oracle_value: None,
            oracle_outcome_rate: None,
            q_delta,
            policy_delta: 0.0,
            fit: QFitReport::default(),
            ppo_surrogate_before: 0.0,
            ppo_surrogate_after: 0.0,
            ppo_mean_kl: 0.0,
            ppo_slack_proxy: 0.0,
            local_improvement_rate: 1.0,
            ppo_diverged: false,
            n_prompts: 1,
        }
    }

    #[test]
    fn convergence_rule() {
        let rs: Vec<_> = [None, Some(0.3), Some(0.2), Some(0.005), Some(0.004)]
            .into_iter()
            .map(record)
            .collect();
        assert!(has_converged(&rs, 0.01));
        assert!(!has_converged(&rs[..4], 0.01));
        assert!(!has_converged(&rs[..1], 0.01));
        let same: Vec<_> = [None, Some(0.0), Some(0.0)]
            .into_iter()
            .map(record)
            .collect();
        assert!(has_converged(&same, 1e-12));
    }

    #[test]
    fn batches_are_reproducible_and_terminal() {
        let env = Arc::new(EnvConfig::toy_shop());
        let p = IterateConfig::default().initial_policy(&env);
        let a = collect_batch(&env, &p, 50, 9, 0).unwrap();
        let b = collect_batch(&env, &p, 50, 9, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for t in &a {
            assert!(crate::mdp::validate(t).is_empty());
            assert!(t.transitions.iter().all(|x| x.behavior_logprobs.is_some()));
        }
        let one = collect_batch(&env, &p, 1, 9, 0).unwrap();
        assert_eq!(one[0], a[0]);
    }

    #[test]
    fn degenerate_outcome_gives_zero_difference() {
        let mut cfg = EnvConfig::toy_shop();
        cfg.adoption_probs = [1.0, 0.0, 0.0, 0.0, 0.0];
        cfg.outcome_prob_by_intent = crate::env::ByClass {
            probe: [1.0; 3],
            offer: [1.0; 3],
            generic: [1.0; 3],
        };
        // abstaining still sends a draft, so every first reply ends the episode with the outcome
        let env = Arc::new(cfg);
        let it = IterateConfig::default();
        let a = it.initial_policy(&env);
        let b = IterateConfig { seed: 5, ..it }.initial_policy(&env);
        let r = ab_compare(&env, &a, &b, 100, 3).unwrap();
        assert_eq!(r.difference, 0.0);
        assert_eq!((r.rate_a, r.rate_b), (1.0, 1.0));
        assert!(ab_compare(&env, &a, &b, 10, 3).is_err());
    }

    #[test]
    fn failed_save_leaves_the_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::new(dir.path()).unwrap();
        let env = EnvConfig::toy_shop();
        let p = IterateConfig::default().initial_policy(&env);
        let mut q = QFunction::zeros(QFeaturizer::new(FeaturizerKind::Signature, env.catalog()));
        q.weights[0] = f64::NAN;
        let out = IterationOutput {
            record: record(None),
            batch: Vec::new(),
            q,
            next_policy: p.clone(),
        };
        let before: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert!(store.save(&p, &out).is_err());
        let after: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(before.len(), after.len());
        assert!(store.iterations().unwrap().is_empty());
    }
}
