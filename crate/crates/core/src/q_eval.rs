//! Monte Carlo policy evaluation: returns, (importance-weighted) evaluation
//! datasets and weighted ridge regression of Q.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnumeratedEnv, MessageCatalog};
use crate::error::{Error, Result};
use crate::mdp::{check_discount, ConversationState, SuggestedAction, Trajectory};
use crate::oracle::OracleSolution;
use crate::policy::PolicyParams;
use crate::responses::ResponseSpace;
use crate::FORMAT_VERSION;

/// Discounted returns by the backward recursion `G_i = r_i + γ G_{i+1}`,
/// where `r_i` is the reward of transition `i`.
pub fn monte_carlo_returns(trajectory: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    check_discount(gamma)?;
    Ok(discounted_returns(&trajectory.rewards(), gamma))
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for i in (0..rewards.len()).rev() {
        g = rewards[i] + gamma * g;
        out[i] = g;
    }
    out
}

/// Cumulative products of per-step ratios, each clipped at `w_max`.
pub fn importance_weights(ratios: &[f64], w_max: f64) -> Vec<f64> {
    let mut w = 1.0;
    ratios
        .iter()
        .map(|r| {
            w *= r;
            w.min(w_max)
        })
        .collect()
}

/// Per-decision corrected returns: the reward of step `k` counted from step
/// `i` is reweighted by the ratios of the actions after `i` up to `k`.
pub fn corrected_returns(rewards: &[f64], ratios: &[f64], gamma: f64, w_max: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|i| {
            let mut g = 0.0;
            let mut disc = 1.0;
            let mut rho = 1.0;
            for k in i..n {
                if k > i {
                    rho *= ratios[k];
                }
                g += disc * rho.min(w_max) * rewards[k];
                disc *= gamma;
            }
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode_id: u64,
    pub step: usize,
    pub state: ConversationState,
    pub action: SuggestedAction,
    /// Plain discounted return of the sampled trajectory.
    pub ret: f64,
    /// Regression target: `ret`, or its per-decision corrected version for
    /// off-policy rows.
    pub target: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDataset {
    pub rows: Vec<EvalRow>,
    pub source_tags: Vec<String>,
    pub target_tag: String,
    pub w_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingOptions {
    pub w_max: f64,
    /// Reweight rewards after an off-policy row by the later actions' ratios.
    pub correct_returns: bool,
}

impl Default for WeightingOptions {
    fn default() -> Self {
        WeightingOptions {
            w_max: 20.0,
            correct_returns: true,
        }
    }
}

pub fn build_eval_dataset(
    trajectories: &[Trajectory],
    target: &PolicyParams,
    gamma: f64,
    opts: WeightingOptions,
) -> Result<EvalDataset> {
    check_discount(gamma)?;
    if !(opts.w_max > 0.0) {
        return Err(Error::Config(format!(
            "w_max must be positive, got {}",
            opts.w_max
        )));
    }
    let target_tag = target.hash()?;
    let mut sources = BTreeSet::new();
    let mut rows = Vec::new();
    for traj in trajectories {
        sources.insert(traj.behavior_tag.clone());
        let rewards = traj.rewards();
        let returns = discounted_returns(&rewards, gamma);
        let mut ratios = Vec::with_capacity(traj.transitions.len());
        for (i, t) in traj.transitions.iter().enumerate() {
            let b = t.behavior_logprob().ok_or_else(|| {
                Error::Data(format!(
                    "episode {} step {i} has no behavior log-probabilities",
                    traj.episode_id
                ))
            })?;
            if traj.behavior_tag == target_tag {
                ratios.push(1.0);
            } else {
                let lp =
                    crate::policy::score_response(target, &t.state, &t.action).map_err(|e| {
                        Error::Episode {
                            episode: traj.episode_id,
                            source: Box::new(e),
                        }
                    })?;
                ratios.push((lp - b).exp());
            }
        }
        let weights = importance_weights(&ratios, opts.w_max);
        let targets = if opts.correct_returns {
            corrected_returns(&rewards, &ratios, gamma, opts.w_max)
        } else {
            returns.clone()
        };
        for (i, t) in traj.transitions.iter().enumerate() {
            rows.push(EvalRow {
                episode_id: traj.episode_id,
                step: i,
                state: t.state.clone(),
                action: t.action.clone(),
                ret: returns[i],
                target: targets[i],
                weight: weights[i],
            });
        }
    }
    Ok(EvalDataset {
        rows,
        source_tags: sources.into_iter().collect(),
        target_tag,
        w_max: opts.w_max,
    })
}

impl EvalDataset {
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u32,
            kind: &'static str,
            source_tags: &'a [String],
            target_tag: &'a str,
            w_max: f64,
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(
            &mut w,
            &Header {
                format_version: FORMAT_VERSION,
                kind: "eval_dataset",
                source_tags: &self.source_tags,
                target_tag: &self.target_tag,
                w_max: self.w_max,
            },
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerKind {
    /// One indicator per (context, response).
    Tabular,
    /// One indicator per (context, class-count signature of the response).
    Signature,
    /// Bias, context indicator and (turn, signature) indicator, summed.
    Linear,
    /// Linear plus a (context, signature) indicator. With a ridge penalty the
    /// per-context terms of rarely seen contexts shrink toward the shared
    /// (turn, signature) effect.
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFeaturizer {
    pub kind: FeaturizerKind,
    pub catalog: MessageCatalog,
}

impl QFeaturizer {
    pub fn new(kind: FeaturizerKind, catalog: MessageCatalog) -> Self {
        QFeaturizer { kind, catalog }
    }

    fn responses(&self) -> ResponseSpace {
        ResponseSpace::new(self.catalog.vocab_size, self.catalog.max_msg_len)
            .expect("validated sizes")
    }

    pub fn dim(&self) -> usize {
        let n_ctx = self.catalog.n_contexts();
        match self.kind {
            FeaturizerKind::Tabular => n_ctx * self.responses().len(),
            FeaturizerKind::Signature => n_ctx * self.catalog.n_signatures(),
            FeaturizerKind::Linear => {
                1 + n_ctx + self.catalog.horizon_cap * self.catalog.n_signatures()
            }
            FeaturizerKind::Hierarchical => {
                1 + n_ctx + (self.catalog.horizon_cap + n_ctx) * self.catalog.n_signatures()
            }
        }
    }

    /// Active indicator features of (context, action).
    pub fn active_ctx(&self, context: usize, action: &SuggestedAction) -> Result<Vec<usize>> {
        let n_ctx = self.catalog.n_contexts();
        if context >= n_ctx {
            return Err(Error::DimensionMismatch {
                expected: n_ctx,
                got: context,
            });
        }
        Ok(match self.kind {
            FeaturizerKind::Tabular => {
                let rs = self.responses();
                let a = rs.index_of(action).ok_or_else(|| {
                    Error::Validation(format!("action {action} outside the response space"))
                })?;
                vec![context * rs.len() + a]
            }
            FeaturizerKind::Signature => {
                action.check(None)?;
                vec![context * self.catalog.n_signatures() + self.catalog.signature(action)]
            }
            FeaturizerKind::Linear => {
                action.check(None)?;
                let turn = self.catalog.context_turn(context) - 1;
                vec![
                    0,
                    1 + context,
                    1 + n_ctx + turn * self.catalog.n_signatures() + self.catalog.signature(action),
                ]
            }
            FeaturizerKind::Hierarchical => {
                action.check(None)?;
                let turn = self.catalog.context_turn(context) - 1;
                let ns = self.catalog.n_signatures();
                let sig = self.catalog.signature(action);
                let base = 1 + n_ctx + self.catalog.horizon_cap * ns;
                vec![
                    0,
                    1 + context,
                    1 + n_ctx + turn * ns + sig,
                    base + context * ns + sig,
                ]
            }
        })
    }

    pub fn active(
        &self,
        state: &ConversationState,
        action: &SuggestedAction,
    ) -> Result<Vec<usize>> {
        self.active_ctx(self.catalog.context_index(state)?, action)
    }

    /// One indicator per row means the normal matrix is diagonal.
    fn is_one_hot(&self) -> bool {
        matches!(
            self.kind,
            FeaturizerKind::Tabular | FeaturizerKind::Signature
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QFitReport {
    pub train_rmse: f64,
    pub holdout_rmse: f64,
    /// Largest absolute holdout residual.
    pub sup_error_estimate: f64,
    pub row_count: usize,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub format_version: u32,
    pub featurizer: QFeaturizer,
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub fit_report: QFitReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub ridge: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            ridge: 0.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

struct Design {
    features: Vec<Vec<usize>>,
    y: Vec<f64>,
    w: Vec<f64>,
}

fn design(ds: &EvalDataset, f: &QFeaturizer) -> Result<Design> {
    let mut d = Design {
        features: Vec::with_capacity(ds.rows.len()),
        y: Vec::with_capacity(ds.rows.len()),
        w: Vec::with_capacity(ds.rows.len()),
    };
    for r in &ds.rows {
        if !(r.weight >= 0.0 && r.weight.is_finite()) {
            return Err(Error::Data(format!(
                "row weight {} is not finite and non-negative",
                r.weight
            )));
        }
        d.features.push(f.active(&r.state, &r.action)?);
        d.y.push(r.target);
        d.w.push(r.weight);
    }
    Ok(d)
}

/// Solves `(XᵀWX/Σw + λI) θ = XᵀWy/Σw` over the selected rows.
fn solve(d: &Design, rows: &[usize], dim: usize, one_hot: bool, ridge: f64) -> Result<Vec<f64>> {
    let total: f64 = rows.iter().map(|&i| d.w[i]).sum();
    if !(total > 0.0) {
        return Err(Error::Data("dataset has no positive weight".into()));
    }
    if one_hot {
        let mut sw = vec![0.0; dim];
        let mut swy = vec![0.0; dim];
        for &i in rows {
            let j = d.features[i][0];
            sw[j] += d.w[i];
            swy[j] += d.w[i] * d.y[i];
        }
        return Ok((0..dim)
            .map(|j| {
                let den = sw[j] / total + ridge;
                if den > 0.0 {
                    (swy[j] / total) / den
                } else {
                    0.0
                }
            })
            .collect());
    }
    if dim > DENSE_LIMIT {
        return solve_cg(d, rows, dim, ridge, total);
    }
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    for &i in rows {
        let w = d.w[i] / total;
        for &j in &d.features[i] {
            b[j] += w * d.y[i];
            for &k in &d.features[i] {
                a[(j, k)] += w;
            }
        }
    }
    for j in 0..dim {
        a[(j, j)] += ridge;
    }
    let scale = (0..dim).map(|j| a[(j, j)]).fold(0.0, f64::max);
    let singular = || {
        Error::Numerical("normal matrix is singular; use a positive ridge penalty (λ > 0)".into())
    };
    let chol = a.cholesky().ok_or_else(singular)?;
    let min_pivot = (0..dim)
        .map(|j| chol.l_dirty()[(j, j)])
        .fold(f64::INFINITY, f64::min);
    if min_pivot * min_pivot <= 1e-12 * scale {
        return Err(singular());
    }
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Above this many features the normal equations are solved iteratively.
const DENSE_LIMIT: usize = 1000;

/// Jacobi-preconditioned conjugate gradient on the sparse normal equations.
fn solve_cg(d: &Design, rows: &[usize], dim: usize, ridge: f64, total: f64) -> Result<Vec<f64>> {
    if !(ridge > 0.0) {
        return Err(Error::Numerical(
            "large collinear designs need a positive ridge penalty (λ > 0)".into(),
        ));
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        for (o, x) in out.iter_mut().zip(v) {
            *o = ridge * x;
        }
        for &i in rows {
            let f = &d.features[i];
            let s: f64 = f.iter().map(|&j| v[j]).sum::<f64>() * d.w[i] / total;
            for &j in f {
                out[j] += s;
            }
        }
    };
    let mut b = vec![0.0; dim];
    let mut diag = vec![ridge; dim];
    for &i in rows {
        let w = d.w[i] / total;
        for &j in &d.features[i] {
            b[j] += w * d.y[i];
            diag[j] += w;
        }
    }
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = vec![0.0; dim];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; dim];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..10 * dim {
        apply(&p, &mut ap);
        let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..dim {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        if r.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-12 * b_norm {
            return Ok(x);
        }
        for j in 0..dim {
            z[j] = r[j] / diag[j];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        for j in 0..dim {
            p[j] = z[j] + rz_new / rz * p[j];
        }
        rz = rz_new;
    }
    Err(Error::Numerical(
        "conjugate gradient did not converge".into(),
    ))
}

fn residual_stats(d: &Design, rows: &[usize], weights: &[f64]) -> (f64, f64) {
    let (mut sse, mut sw, mut sup) = (0.0, 0.0, 0.0f64);
    for &i in rows {
        let pred: f64 = d.features[i].iter().map(|&j| weights[j]).sum();
        let r = pred - d.y[i];
        sse += d.w[i] * r * r;
        sw += d.w[i];
        sup = sup.max(r.abs());
    }
    if sw > 0.0 {
        ((sse / sw).sqrt(), sup)
    } else {
        (0.0, 0.0)
    }
}

/// Weighted ridge regression of the dataset's targets. The reported errors
/// come from a fit on an episode-level train split; the returned weights are
/// refit on every row.
pub fn fit_q(ds: &EvalDataset, featurizer: &QFeaturizer, opts: FitOptions) -> Result<QFunction> {
    if ds.rows.is_empty() {
        return Err(Error::Data("cannot fit Q on an empty dataset".into()));
    }
    if !(opts.ridge >= 0.0) || !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(Error::Config(
            "ridge must be ≥ 0 and holdout_fraction in [0, 1)".into(),
        ));
    }
    let d = design(ds, featurizer)?;
    let dim = featurizer.dim();
    let one_hot = featurizer.is_one_hot();

    let mut episodes: Vec<u64> = ds
        .rows
        .iter()
        .map(|r| r.episode_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    episodes.shuffle(&mut rng);
    let n_hold = ((episodes.len() as f64) * opts.holdout_fraction).floor() as usize;
    let held: BTreeSet<u64> = episodes[..n_hold].iter().copied().collect();
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (i, r) in ds.rows.iter().enumerate() {
        if held.contains(&r.episode_id) {
            hold.push(i);
        } else {
            train.push(i);
        }
    }
    let all: Vec<usize> = (0..ds.rows.len()).collect();
    let report = if hold.is_empty() {
        let w = solve(&d, &all, dim, one_hot, opts.ridge)?;
        let (rmse, _) = residual_stats(&d, &all, &w);
        QFitReport {
            train_rmse: rmse,
            row_count: ds.rows.len(),
            train_rows: all.len(),
            ..Default::default()
        }
    } else {
        let w = solve(&d, &train, dim, one_hot, opts.ridge)?;
        let (train_rmse, _) = residual_stats(&d, &train, &w);
        let (holdout_rmse, sup) = residual_stats(&d, &hold, &w);
        QFitReport {
            train_rmse,
            holdout_rmse,
            sup_error_estimate: sup,
            row_count: ds.rows.len(),
            train_rows: train.len(),
            holdout_rows: hold.len(),
        }
    };
    let weights = solve(&d, &all, dim, one_hot, opts.ridge)?;
    Ok(QFunction {
        format_version: FORMAT_VERSION,
        featurizer: featurizer.clone(),
        weights,
        ridge: opts.ridge,
        fit_report: report,
    })
}

/// Anything that scores every response of a context; the reward model of
/// the single-turn problem.
pub trait ResponseScorer: Sync {
    /// Scores of every response in canonical order.
    fn scores(&self, context: usize) -> Result<Vec<f64>>;
}

impl QFunction {
    pub fn zeros(featurizer: QFeaturizer) -> Self {
        QFunction {
            format_version: FORMAT_VERSION,
            weights: vec![0.0; featurizer.dim()],
            featurizer,
            ridge: 0.0,
            fit_report: QFitReport::default(),
        }
    }

    fn check_dim(&self) -> Result<()> {
        if self.weights.len() != self.featurizer.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.featurizer.dim(),
                got: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, state: &ConversationState, action: &SuggestedAction) -> Result<f64> {
        self.check_dim()?;
        Ok(self
            .featurizer
            .active(state, action)?
            .iter()
            .map(|&j| self.weights[j])
            .sum())
    }

    pub fn predict_ctx(&self, context: usize, action: &SuggestedAction) -> Result<f64> {
        self.check_dim()?;
        Ok(self
            .featurizer
            .active_ctx(context, action)?
            .iter()
            .map(|&j| self.weights[j])
            .sum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("Q weights must be finite".into()));
        }
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let q: QFunction = serde_json::from_str(&text)?;
        if q.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported Q format {}",
                q.format_version
            )));
        }
        q.check_dim()?;
        Ok(q)
    }
}

impl ResponseScorer for QFunction {
    fn scores(&self, context: usize) -> Result<Vec<f64>> {
        self.featurizer
            .responses()
            .iter()
            .map(|a| self.predict_ctx(context, &a))
            .collect()
    }
}

/// Exact Q from the oracle, indexed by context.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleQ {
    pub q: Vec<Vec<f64>>,
}

impl OracleQ {
    /// Takes the live rows of a belief-mode solution.
    pub fn new(env: &EnumeratedEnv, sol: &OracleSolution) -> Result<Self> {
        if env.mode != crate::env::EnumerationMode::Belief {
            return Err(Error::Config(
                "oracle Q needs a belief-mode enumeration".into(),
            ));
        }
        Ok(OracleQ {
            q: sol.q[..env.n_live].to_vec(),
        })
    }
}

impl ResponseScorer for OracleQ {
    fn scores(&self, context: usize) -> Result<Vec<f64>> {
        self.q
            .get(context)
            .cloned()
            .ok_or_else(|| Error::DimensionMismatch {
                expected: self.q.len(),
                got: context,
            })
    }
}

/// Explicit Q table over an enumerated MDP's states (terminal rows are 0).
pub fn q_table(scorer: &dyn ResponseScorer, env: &EnumeratedEnv) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(env.mdp.n_states());
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in 0..env.mdp.n_states() {
        match env.context_of(s) {
            None => out.push(vec![0.0]),
            Some(c) => {
                if !cache.contains_key(&c) {
                    cache.insert(c, scorer.scores(c)?);
                }
                out.push(cache[&c].clone());
            }
        }
    }
    Ok(out)
}
