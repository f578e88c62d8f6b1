//! Experiment configs, run directories and the reproducible reports the
//! CLI prints: oracle summaries, A/B tests, metrics files and the verify
//! suite.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{enumerate, EnumeratedEnv, EnumerationMode, EnvConfig};
use crate::error::{Error, Result};
use crate::iterate::{
    ab_compare, oracle_evaluate, run_loop, AbReport, CheckpointStore, IterateConfig,
    IterationRecord, LoopContext, LoopResult, ProbeSet,
};
use crate::mdp::TerminalReason;
use crate::oracle::{
    backward_induction, exact_policy_evaluation, improvement_bound_check,
    performance_difference_check, random_mdp, random_policy, regularized_maximizer,
    terminal_distribution, value_iteration, KlDirection, TabularPolicy, BELLMAN_TOL,
};
use crate::policy::PolicyParams;
use crate::ppo::{local_improvement_check, ppo_improve, PpoConfig, PromptContext};
use crate::q_eval::OracleQ;
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbConfig {
    pub episodes_per_arm: usize,
    /// Iteration whose policy is arm A.
    pub baseline_iteration: usize,
    /// Iteration whose policy is arm B; the last one when absent.
    pub candidate_iteration: Option<usize>,
}

impl Default for AbConfig {
    fn default() -> Self {
        AbConfig {
            episodes_per_arm: 20_000,
            baseline_iteration: 0,
            candidate_iteration: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub random_mdps: usize,
    pub bound_instances: usize,
    pub max_q_error: f64,
    pub beta: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            random_mdps: 100,
            bound_instances: 100,
            max_q_error: 0.1,
            beta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Environment config, relative to this file.
    pub env: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every iteration exactly when the environment is enumerable.
    #[serde(default = "default_true")]
    pub oracle_metrics: bool,
    #[serde(default)]
    pub iterate: IterateConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub ab: AbConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

/// A loaded experiment: the parsed config, its environment and a hash of
/// both source files.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub path: PathBuf,
    pub config: ExperimentConfig,
    pub env: Arc<EnvConfig>,
    pub config_sha256: String,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let env_path = dir.join(&config.env);
        let env_text = std::fs::read_to_string(&env_path).map_err(|e| Error::io(&env_path, e))?;
        let env = EnvConfig::from_toml_str(&env_text)?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update([0u8]);
        h.update(env_text.as_bytes());
        let mut exp = Experiment {
            path: path.to_path_buf(),
            config,
            env: Arc::new(env),
            config_sha256: hex::encode(h.finalize()),
        };
        let seed = exp.config.seed;
        exp.set_seed(seed);
        exp.config.iterate.validate()?;
        exp.config.ppo.validate()?;
        Ok(exp)
    }

    /// The master seed drives the loop; PPO mixes its own seed with it.
    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.config.iterate.seed = seed;
    }

    /// Output directory, relative paths resolved against the config file.
    pub fn output_root(&self) -> PathBuf {
        if self.config.output_dir.is_absolute() {
            self.config.output_dir.clone()
        } else {
            self.path
                .parent()
                .unwrap_or(Path::new("."))
                .join(&self.config.output_dir)
        }
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::Config(format!("invalid run id {run_id:?}")));
        }
        Ok(self.output_root().join(run_id))
    }

    /// Belief-mode enumeration, or `None` when the environment is too large.
    pub fn try_enumerate(&self) -> Result<Option<EnumeratedEnv>> {
        match enumerate(&self.env, EnumerationMode::Belief) {
            Ok(e) => Ok(Some(e)),
            Err(Error::EnumerationTooLarge { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn initial_policy(&self) -> PolicyParams {
        self.config.iterate.initial_policy(&self.env)
    }
}

/// Held for the lifetime of a run; a second holder gets [`Error::Locked`].
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("run.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    pub iterate: IterateConfig,
    pub ppo: PpoConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct MetricsRow {
    iteration: usize,
    episodes: usize,
    outcome_rate: f64,
    value_estimate: f64,
    oracle_value: Option<f64>,
    oracle_outcome_rate: Option<f64>,
    optimality_ratio: Option<f64>,
    q_delta: Option<f64>,
    policy_delta: f64,
    q_train_rmse: f64,
    q_holdout_rmse: f64,
    q_sup_error_estimate: f64,
    ppo_surrogate_before: f64,
    ppo_surrogate_after: f64,
    ppo_mean_kl: f64,
    ppo_slack_proxy: f64,
    local_improvement_rate: f64,
    ppo_diverged: bool,
    n_prompts: usize,
    policy_ref: String,
}

/// The metrics CSV, one row per iteration.
pub fn metrics_csv(records: &[IterationRecord], v_star: Option<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(MetricsRow {
            iteration: r.iteration,
            episodes: r.episodes,
            outcome_rate: r.outcome_rate,
            value_estimate: r.value_estimate,
            oracle_value: r.oracle_value,
            oracle_outcome_rate: r.oracle_outcome_rate,
            optimality_ratio: r.oracle_value.zip(v_star).map(|(v, s)| v / s),
            q_delta: r.q_delta,
            policy_delta: r.policy_delta,
            q_train_rmse: r.fit.train_rmse,
            q_holdout_rmse: r.fit.holdout_rmse,
            q_sup_error_estimate: r.fit.sup_error_estimate,
            ppo_surrogate_before: r.ppo_surrogate_before,
            ppo_surrogate_after: r.ppo_surrogate_after,
            ppo_mean_kl: r.ppo_mean_kl,
            ppo_slack_proxy: r.ppo_slack_proxy,
            local_improvement_rate: r.local_improvement_rate,
            ppo_diverged: r.ppo_diverged,
            n_prompts: r.n_prompts,
            policy_ref: r.policy_ref.clone(),
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

/// Series for plotting value and outcome curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub format_version: u32,
    pub iteration: Vec<usize>,
    pub outcome_rate: Vec<f64>,
    pub value_estimate: Vec<f64>,
    pub oracle_value: Vec<Option<f64>>,
    pub q_delta: Vec<Option<f64>>,
    pub v_star: Option<f64>,
}

pub fn plot_data(records: &[IterationRecord], v_star: Option<f64>) -> PlotData {
    PlotData {
        format_version: FORMAT_VERSION,
        iteration: records.iter().map(|r| r.iteration).collect(),
        outcome_rate: records.iter().map(|r| r.outcome_rate).collect(),
        value_estimate: records.iter().map(|r| r.value_estimate).collect(),
        oracle_value: records.iter().map(|r| r.oracle_value).collect(),
        q_delta: records.iter().map(|r| r.q_delta).collect(),
        v_star,
    }
}

fn write_run_metrics(
    run_dir: &Path,
    records: &[IterationRecord],
    v_star: Option<f64>,
) -> Result<()> {
    write_atomic(&run_dir.join("metrics.csv"), &metrics_csv(records, v_star)?)?;
    let plot = serde_json::to_string_pretty(&plot_data(records, v_star))?;
    write_atomic(&run_dir.join("plot_data.json"), plot.as_bytes())
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub result: LoopResult,
    pub v_star: Option<f64>,
}

/// Runs (or resumes) the iterative loop under `run_id`. A fresh run refuses
/// an existing run directory; a resumed run requires the same config hash.
pub fn run_iterate(
    exp: &Experiment,
    run_id: &str,
    resume: bool,
    mut log: impl FnMut(&IterationRecord),
) -> Result<RunOutcome> {
    let run_dir = exp.run_dir(run_id)?;
    let manifest_path = run_dir.join("manifest.json");
    if resume {
        if !manifest_path.exists() {
            return Err(Error::MissingCheckpoint(manifest_path));
        }
        let m = RunManifest::load(&manifest_path)?;
        if m.config_sha256 != exp.config_sha256 || m.seed != exp.config.seed {
            return Err(Error::Config(format!(
                "run {run_id} was started with a different config or seed; refusing to resume"
            )));
        }
    } else if manifest_path.exists() {
        return Err(Error::Config(format!(
            "run {run_id} already exists; pass --resume or pick another run id"
        )));
    }
    let _lock = RunLock::acquire(&run_dir)?;
    if !resume {
        let m = RunManifest {
            format_version: FORMAT_VERSION,
            run_id: run_id.to_string(),
            config_path: exp.path.clone(),
            config_sha256: exp.config_sha256.clone(),
            seed: exp.config.seed,
            iterate: exp.config.iterate.clone(),
            ppo: exp.config.ppo.clone(),
        };
        write_atomic(&manifest_path, serde_json::to_string_pretty(&m)?.as_bytes())?;
    }
    let oracle = if exp.config.oracle_metrics {
        exp.try_enumerate()?
    } else {
        None
    };
    let v_star = match &oracle {
        Some(e) => Some(value_iteration(&e.mdp, BELLMAN_TOL)?.value(&e.mdp.initial)),
        None => None,
    };
    let cfg = &exp.config.iterate;
    let probe = ProbeSet::generate(
        &exp.env,
        cfg.probe_size,
        crate::iterate::derive_seed(cfg.seed, 5, 0),
    )?;
    let store = CheckpointStore::new(&run_dir)?;
    let ctx = LoopContext {
        env: exp.env.clone(),
        cfg,
        ppo: &exp.config.ppo,
        probe: &probe,
        oracle: oracle.as_ref(),
    };
    let mut so_far: Vec<IterationRecord> = Vec::new();
    for i in store.iterations()? {
        so_far.push(store.load_record(i)?);
    }
    write_run_metrics(&run_dir, &so_far, v_star)?;
    let mut failure = None;
    let result = run_loop(&ctx, exp.initial_policy(), Some(&store), |r| {
        so_far.push(r.clone());
        if let Err(e) = write_run_metrics(&run_dir, &so_far, v_star) {
            failure.get_or_insert(e);
        }
        log(r);
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome {
        run_dir,
        result,
        v_star,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_states: usize,
    pub n_live: usize,
    pub n_actions: usize,
    pub v_star: f64,
    pub optimal_outcome_rate: f64,
    pub bellman_residual: f64,
    /// Largest |V_vi − V_bi| when the MDP is acyclic.
    pub backward_induction_gap: Option<f64>,
    pub policy_value: Option<f64>,
    pub policy_outcome_rate: Option<f64>,
}

/// Exact optimum of the environment, and optionally the value of a policy.
pub fn oracle_report(exp: &Experiment, policy: Option<&PolicyParams>) -> Result<OracleReport> {
    let en = exp.try_enumerate()?.ok_or_else(|| {
        Error::Config("environment exceeds the enumeration budget; no oracle available".into())
    })?;
    let star = value_iteration(&en.mdp, BELLMAN_TOL)?;
    let greedy = star.greedy();
    let ends = terminal_distribution(&en.mdp, &greedy, &en.mdp.initial)?;
    let gap = match backward_induction(&en.mdp) {
        Ok(bi) => Some(
            star.v
                .iter()
                .zip(&bi.v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        ),
        Err(_) => None,
    };
    let (policy_value, policy_outcome_rate) = match policy {
        Some(p) => {
            let (_, v, r) = oracle_evaluate(&en, p)?;
            (Some(v), Some(r))
        }
        None => (None, None),
    };
    Ok(OracleReport {
        n_states: en.mdp.n_states(),
        n_live: en.n_live,
        n_actions: en.responses.len(),
        v_star: star.value(&en.mdp.initial),
        optimal_outcome_rate: ends[en.terminal_id(TerminalReason::OutcomeAchieved)],
        bellman_residual: star.bellman_residual,
        backward_induction_gap: gap,
        policy_value,
        policy_outcome_rate,
    })
}

/// A/B test between two saved iterations of a run.
pub fn ab_test_run(exp: &Experiment, run_id: &str, n_per_arm: Option<usize>) -> Result<AbReport> {
    let store = CheckpointStore {
        root: exp.run_dir(run_id)?,
    };
    let done = store.iterations()?;
    let last = *done
        .last()
        .ok_or_else(|| Error::MissingCheckpoint(store.iter_dir(0)))?;
    let ab = &exp.config.ab;
    let a = store.load_policy(ab.baseline_iteration, false)?;
    let b = match ab.candidate_iteration {
        Some(i) => store.load_policy(i, false)?,
        None => store.load_policy(last, true)?,
    };
    ab_compare(
        &exp.env,
        &a,
        &b,
        n_per_arm.unwrap_or(ab.episodes_per_arm),
        crate::iterate::derive_seed(exp.config.seed, 6, 0),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Worst two-sided residual of the performance difference identity over
/// seeded random MDPs (5 states, 3 actions).
pub fn pdl_random_residual(n: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..n as u64 {
        let s = crate::iterate::derive_seed(seed, 7, k);
        let mdp = random_mdp(5, 3, 0.9, s);
        let old = random_policy(&mdp, s ^ 1);
        let new = random_policy(&mdp, s ^ 2);
        worst = worst.max(performance_difference_check(&mdp, &old, &new, &mdp.initial)?.residual);
    }
    Ok(worst)
}

/// One seeded instance of the regularized improvement bound: a random MDP,
/// a random old policy, a critic off by at most `eps` per entry and a new
/// policy that is a noisy mix of the regularized maximizer and the old one.
pub fn bound_instance(
    seed: u64,
    eps: f64,
    beta: f64,
    direction: KlDirection,
) -> Result<crate::oracle::ImprovementBoundCheck> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.gen_range(3..8);
    let n_actions = rng.gen_range(2..5);
    let mdp = random_mdp(n_states, n_actions, 0.9, seed);
    let old = random_policy(&mdp, seed ^ 0x55);
    let sol = exact_policy_evaluation(&mdp, &old)?;
    let q_hat: Vec<Vec<f64>> = sol
        .q
        .iter()
        .enumerate()
        .map(|(s, row)| {
            if mdp.terminal[s] {
                row.clone()
            } else {
                row.iter()
                    .map(|q| q + eps * rng.gen_range(-1.0..=1.0))
                    .collect()
            }
        })
        .collect();
    let mut probs = Vec::with_capacity(mdp.n_states());
    for s in 0..mdp.n_states() {
        if mdp.terminal[s] {
            probs.push(old.probs[s].clone());
            continue;
        }
        let best = regularized_maximizer(&old.probs[s], &q_hat[s], beta, direction)?;
        let mix: f64 = rng.gen();
        let raw: Vec<f64> = best
            .iter()
            .zip(&old.probs[s])
            .map(|(b, o)| (mix * b + (1.0 - mix) * o) * (0.8 + 0.4 * rng.gen::<f64>()))
            .collect();
        let z: f64 = raw.iter().sum();
        probs.push(raw.into_iter().map(|x| x / z).collect());
    }
    let new = TabularPolicy { probs };
    improvement_bound_check(&mdp, &old, &new, &q_hat, beta, &mdp.initial, direction)
}

/// Exact checks that need no sampling beyond one PPO step.
pub fn verify(exp: &Experiment) -> Result<VerifyReport> {
    let vc = &exp.config.verify;
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let worst = pdl_random_residual(vc.random_mdps, exp.config.seed)?;
    push(
        "performance difference identity on random MDPs",
        worst <= 1e-8,
        format!("worst residual {worst:.3e} over {} MDPs", vc.random_mdps),
    );

    let mut failures = 0;
    let mut worst_margin = f64::INFINITY;
    for k in 0..vc.bound_instances as u64 {
        let eps = vc.max_q_error * (k as f64 / vc.bound_instances.max(1) as f64);
        let dir = if k % 2 == 0 {
            KlDirection::Reverse
        } else {
            KlDirection::Forward
        };
        let c = bound_instance(
            crate::iterate::derive_seed(exp.config.seed, 8, k),
            eps,
            vc.beta,
            dir,
        )?;
        worst_margin = worst_margin.min(c.lhs - c.rhs);
        if !c.holds {
            failures += 1;
        }
    }
    push(
        "regularized improvement bound",
        failures == 0,
        format!(
            "{failures} failures over {} instances, smallest lhs − rhs {worst_margin:.3e}",
            vc.bound_instances
        ),
    );

    let Some(en) = exp.try_enumerate()? else {
        push(
            "enumeration",
            false,
            "environment exceeds the enumeration budget".into(),
        );
        return Ok(VerifyReport { checks });
    };
    let star = value_iteration(&en.mdp, BELLMAN_TOL)?;
    push(
        "optimal Bellman residual",
        star.bellman_residual <= BELLMAN_TOL,
        format!("{:.3e}", star.bellman_residual),
    );
    if let Ok(bi) = backward_induction(&en.mdp) {
        let gap = star
            .v
            .iter()
            .zip(&bi.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        push(
            "value iteration agrees with backward induction",
            gap <= 1e-10,
            format!("{gap:.3e}"),
        );
    }

    let p0 = exp.initial_policy();
    let (sol0, v0, _) = oracle_evaluate(&en, &p0)?;
    let t0 = p0.to_tabular(&en)?;
    let greedy = sol0.greedy();
    let pdl = performance_difference_check(&en.mdp, &t0, &greedy, &en.mdp.initial)?;
    push(
        "performance difference identity, π₀ vs greedy(Q^π₀)",
        pdl.residual <= 1e-8 && pdl.lhs > 0.0,
        format!("residual {:.3e}, improvement {:.6}", pdl.residual, pdl.lhs),
    );

    let scorer = OracleQ::new(&en, &sol0)?;
    let states: Vec<_> = en.live_states().map(|(_, s)| s.clone()).collect();
    let prompts: Vec<PromptContext> = states
        .iter()
        .map(|s| crate::ppo::build_prompt(s, &en.catalog))
        .collect::<Result<_>>()?;
    let (p1, _) = ppo_improve(&p0, &prompts, &scorer, &exp.config.ppo)?;
    let li = local_improvement_check(&p1, &p0, &scorer, &states, 1e-6)?;
    let (_, v1, _) = oracle_evaluate(&en, &p1)?;
    let rate = 1.0 - li.violations as f64 / li.margins.len() as f64;
    push(
        "exact-Q PPO step improves locally and globally",
        rate >= 0.99 && v1 >= v0 - 1e-6,
        format!("local rate {rate:.4}, V {v0:.6} → {v1:.6}"),
    );
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_experiment(dir: &Path, extra: &str) -> PathBuf {
        let env = include_str!("../../../configs/toy_shop_env.toml");
        std::fs::write(dir.join("env.toml"), env).unwrap();
        let p = dir.join("exp.toml");
        std::fs::write(
            &p,
            format!("env = \"env.toml\"\noutput_dir = \"out\"\n{extra}"),
        )
        .unwrap();
        p
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            RunLock::acquire(dir.path()),
            Err(Error::Locked(_))
        ));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_experiment(dir.path(), "[ppo]\nclip = 0.3\n");
        assert!(matches!(Experiment::load(&p), Err(Error::TomlDe(_))));
    }

    #[test]
    fn config_hash_tracks_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_experiment(dir.path(), "");
        let a = Experiment::load(&p).unwrap().config_sha256;
        let env = std::fs::read_to_string(dir.path().join("env.toml")).unwrap();
        std::fs::write(dir.path().join("env.toml"), format!("{env}\n# edited\n")).unwrap();
        let b = Experiment::load(&p).unwrap().config_sha256;
        assert_ne!(a, b);
    }

    #[test]
    fn resume_needs_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_experiment(
            dir.path(),
            "[iterate]\nepisodes_per_iteration = 200\niterations = 1\nprobe_size = 16\n[ppo]\nepochs_per_batch = 1\n",
        );
        let exp = Experiment::load(&p).unwrap();
        let out = run_iterate(&exp, "r", false, |_| {}).unwrap();
        assert_eq!(out.result.records.len(), 1);
        assert!(out.run_dir.join("metrics.csv").exists());
        assert!(!out.run_dir.join("run.lock").exists());
        assert!(run_iterate(&exp, "r", false, |_| {}).is_err());
        let mut other = exp.clone();
        other.set_seed(99);
        assert!(run_iterate(&other, "r", true, |_| {}).is_err());
        assert!(exp.run_dir("../x").is_err());
    }
}
