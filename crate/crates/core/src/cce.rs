//! Constrained cross-entropy search over parameterized policies.
//!
//! The search distribution is a product of independent Gaussians stored in
//! moment coordinates `η = (E[θ], E[θ²])`. Each iteration samples `n`
//! parameter vectors, estimates reward and fairness gap for each from fresh
//! rollouts, picks an elite set and moves `η` toward the elite's weighted
//! moments. Samples are ranked by estimated gap first; once at least `n′` of
//! them have a gap of at most `(1-σ)ε`, those are re-ranked by reward.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{
    estimate_policy, one_step_group_values, simulate_returns, AgentEstimator, Cohort, EnvError, Environment, Horizon,
};
use crate::mdp::Group;
use crate::policy::{FeatureView, LinearPolicy, Policy};
use crate::seed::{SeedTree, SimRng};

/// Smallest per-coordinate variance of the search distribution.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CceError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("agent rewards depend on the state; a state-independent policy need not be fair")]
    StateDependentAgentReward,
}

/// Independent Gaussians over `θ ∈ R^d` in moment coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchDistribution {
    /// `E[θ_i]`.
    pub first: Vec<f64>,
    /// `E[θ_i²]`.
    pub second: Vec<f64>,
}

impl SearchDistribution {
    /// Mean 0, variance 1 in every coordinate.
    pub fn standard(dim: usize) -> Self {
        Self {
            first: vec![0.0; dim],
            second: vec![1.0; dim],
        }
    }

    pub fn from_params(means: &[f64], variances: &[f64]) -> Self {
        Self {
            first: means.to_vec(),
            second: means.iter().zip(variances).map(|(m, v)| v + m * m).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Inverse moment map: means and floored variances.
    pub fn params(&self) -> (Vec<f64>, Vec<f64>) {
        let variances = self
            .first
            .iter()
            .zip(&self.second)
            .map(|(m, s)| (s - m * m).max(VARIANCE_FLOOR))
            .collect();
        (self.first.clone(), variances)
    }

    pub fn mean(&self) -> &[f64] {
        &self.first
    }

    pub fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        let (means, variances) = self.params();
        means
            .iter()
            .zip(&variances)
            .map(|(&m, &v)| Normal::new(m, v.sqrt()).expect("finite parameters").sample(rng))
            .collect()
    }

    /// Euclidean norm of the full moment vector.
    pub fn eta_norm(&self) -> f64 {
        self.first
            .iter()
            .chain(&self.second)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `η ← α·target + (1-α)·η`.
    pub fn blend(&mut self, target: &SearchDistribution, alpha: f64) {
        for (e, t) in self.first.iter_mut().zip(&target.first) {
            *e = alpha * t + (1.0 - alpha) * *e;
        }
        for (e, t) in self.second.iter_mut().zip(&target.second) {
            *e = alpha * t + (1.0 - alpha) * *e;
        }
    }
}

/// Elite weighting used in the moment update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Rewards shifted to be nonnegative in the objective phase; distance
    /// to the worst elite gap in the constraint phase.
    #[default]
    Shifted,
    /// Raw `R̂` in both phases (uniform if the total is not positive).
    RawReward,
}

/// How the fairness gap of a candidate is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapEstimate {
    /// Full rollouts from each group's initial distribution.
    #[default]
    Rollouts,
    /// One-step expected agent reward at initial states only, assuming the
    /// state distribution never moves.
    OneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CceConfig {
    pub iterations: usize,
    pub samples: usize,
    pub elite: usize,
    /// Rollouts per estimate (per batch).
    pub rollouts: usize,
    /// Overrides the environment's own horizon.
    pub horizon: Option<Horizon>,
    pub smoothing: f64,
    pub sigma: f64,
    /// Fairness tolerance `ε`; infinite for unconstrained search.
    pub tolerance: f64,
    pub weighting: Weighting,
    pub gap_estimate: GapEstimate,
    pub estimator: AgentEstimator,
    pub seed: u64,
}

impl Default for CceConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            samples: 100,
            elite: 10,
            rollouts: 2000,
            horizon: None,
            smoothing: 0.7,
            sigma: 0.1,
            tolerance: f64::INFINITY,
            weighting: Weighting::Shifted,
            gap_estimate: GapEstimate::Rollouts,
            estimator: AgentEstimator::Expected,
            seed: 0,
        }
    }
}

impl CceConfig {
    pub fn validate(&self) -> Result<(), CceError> {
        let bad = |m: &str| Err(CceError::Config(m.into()));
        if self.samples == 0 || self.elite == 0 || self.elite > self.samples {
            return bad("need 1 <= elite <= samples");
        }
        if self.rollouts == 0 {
            return bad("rollouts must be positive");
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return bad("smoothing must lie in (0, 1]");
        }
        if !(self.sigma > 0.0 && self.sigma <= 0.5) {
            return bad("sigma must lie in (0, 1/2]");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative");
        }
        if self.horizon.is_some_and(|h| h.steps == 0) {
            return bad("horizon must be at least one step");
        }
        Ok(())
    }

    /// Elite quantile `μ = n′/n`.
    pub fn quantile(&self) -> f64 {
        self.elite as f64 / self.samples as f64
    }
}

/// Sample counts guaranteeing the estimation accuracy used by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePlan {
    pub rollouts: usize,
    pub steps: usize,
}

/// `m ≥ 32 R_max (1-γ) log(6/δ) / (σ²ε²)` rollouts of
/// `T ≥ log(4 R_max / (σ²ε(1-γ))) / log(1/γ)` steps.
pub fn plan_samples(r_max: f64, gamma: f64, epsilon: f64, sigma: f64, delta: f64) -> Result<SamplePlan, CceError> {
    let bad = |m: &str| Err(CceError::Config(m.into()));
    if !(gamma > 0.0 && gamma < 1.0) {
        return bad("discount must lie in (0, 1)");
    }
    if !(sigma > 0.0 && sigma <= 0.5) {
        return bad("sigma must lie in (0, 1/2]");
    }
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) || !(r_max > 0.0) {
        return bad("need epsilon > 0, 0 < delta < 1, r_max > 0");
    }
    let s2e = sigma * sigma * epsilon;
    let m = (32.0 * r_max * (1.0 - gamma) * (6.0 / delta).ln() / (s2e * epsilon)).ceil();
    let t = ((4.0 * r_max / (s2e * (1.0 - gamma))).ln() / (1.0 / gamma).ln()).ceil().max(1.0);
    Ok(SamplePlan {
        rollouts: m as usize,
        steps: t as usize,
    })
}

/// Maps parameter vectors to policies.
pub trait PolicyFamily<E: Environment + ?Sized>: Sync {
    type Policy: Policy<E>;
    fn dim(&self, env: &E) -> usize;
    fn policy(&self, env: &E, theta: &[f64]) -> Self::Policy;
}

/// Softmax-linear policies on a feature view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFamily {
    pub view: FeatureView,
    /// Score multiplier, see [`LinearPolicy::with_scale`].
    pub scale: f64,
}

impl LinearFamily {
    pub fn new(view: FeatureView) -> Self {
        Self { view, scale: 1.0 }
    }

    pub fn with_scale(self, scale: f64) -> Self {
        Self { scale, ..self }
    }
}

impl Default for LinearFamily {
    fn default() -> Self {
        Self::new(FeatureView::Full)
    }
}

impl<E: Environment + ?Sized> PolicyFamily<E> for LinearFamily {
    type Policy = LinearPolicy;

    fn dim(&self, env: &E) -> usize {
        LinearPolicy::n_params_for(env, self.view)
    }

    fn policy(&self, env: &E, theta: &[f64]) -> LinearPolicy {
        LinearPolicy::new(env, self.view, theta.to_vec()).with_scale(self.scale)
    }
}

/// Estimated score of one sampled parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub theta: Vec<f64>,
    pub reward: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Best estimated reward in the elite set.
    pub best_reward: f64,
    /// Smallest estimated gap in the elite set.
    pub elite_min_gap: f64,
    /// Number of samples with estimated gap at most `(1-σ)ε`.
    pub i_prime: usize,
    pub eta_norm: f64,
}

/// Elite indices and whether the objective phase was reached.
pub fn select_elite(candidates: &[Candidate], cfg: &CceConfig) -> (Vec<usize>, usize, bool) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        ca.gap
            .total_cmp(&cb.gap)
            .then(cb.reward.total_cmp(&ca.reward))
            .then(a.cmp(&b))
    });
    let cut = (1.0 - cfg.sigma) * cfg.tolerance;
    let i_prime = order.iter().take_while(|&&i| candidates[i].gap <= cut).count();
    if i_prime >= cfg.elite {
        let mut feasible = order[..i_prime].to_vec();
        feasible.sort_by(|&a, &b| {
            candidates[b]
                .reward
                .total_cmp(&candidates[a].reward)
                .then(a.cmp(&b))
        });
        feasible.truncate(cfg.elite);
        (feasible, i_prime, true)
    } else {
        (order[..cfg.elite].to_vec(), i_prime, false)
    }
}

/// Update weights for the elite set.
pub fn elite_weights(candidates: &[Candidate], elite: &[usize], objective_phase: bool, weighting: Weighting) -> Vec<f64> {
    let uniform = || vec![1.0; elite.len()];
    let weights: Vec<f64> = match weighting {
        Weighting::RawReward => elite.iter().map(|&i| candidates[i].reward).collect(),
        Weighting::Shifted => {
            let key = |i: usize| {
                if objective_phase {
                    candidates[i].reward
                } else {
                    -candidates[i].gap
                }
            };
            let lo = elite.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
            let hi = elite.iter().map(|&i| key(i)).fold(f64::NEG_INFINITY, f64::max);
            let pad = 1e-3 * (hi - lo);
            elite.iter().map(|&i| key(i) - lo + pad).collect()
        }
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return uniform();
    }
    weights
}

/// Weighted `(θ, θ²)` moments of the elite.
pub fn elite_moments(candidates: &[Candidate], elite: &[usize], weights: &[f64]) -> SearchDistribution {
    let dim = candidates[elite[0]].theta.len();
    let total: f64 = weights.iter().sum();
    let mut first = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for (&i, &w) in elite.iter().zip(weights) {
        for (k, &t) in candidates[i].theta.iter().enumerate() {
            first[k] += w * t;
            second[k] += w * t * t;
        }
    }
    for k in 0..dim {
        first[k] /= total;
        second[k] /= total;
    }
    SearchDistribution { first, second }
}

fn horizon_for<E: Environment + ?Sized>(env: &E, cfg: &CceConfig) -> Horizon {
    cfg.horizon.unwrap_or_else(|| env.horizon())
}

/// Estimates `(R̂, ε̂)` for one parameter vector.
pub fn score<E, F>(env: &E, family: &F, theta: &[f64], cfg: &CceConfig, seeds: SeedTree) -> Result<Candidate, CceError>
where
    E: Environment + ?Sized,
    F: PolicyFamily<E>,
{
    let policy = family.policy(env, theta);
    let horizon = horizon_for(env, cfg);
    let (reward, gap) = if !cfg.tolerance.is_finite() {
        (reward_only(env, &policy, horizon, cfg.rollouts, seeds.child(0))?, 0.0)
    } else {
        match cfg.gap_estimate {
            GapEstimate::Rollouts => {
                let est = estimate_policy(env, &policy, horizon, cfg.rollouts, seeds, cfg.estimator)?;
                (est.reward, est.gap)
            }
            GapEstimate::OneStep => {
                let reward = reward_only(env, &policy, horizon, cfg.rollouts, seeds.child(0))?;
                let values = one_step_group_values(env, &policy, cfg.rollouts, &mut seeds.child(1).rng())?;
                (reward, (values[Group::Maj.index()] - values[Group::Min.index()]).abs())
            }
        }
    };
    Ok(Candidate {
        theta: theta.to_vec(),
        reward,
        gap,
    })
}

fn reward_only<E, P>(env: &E, policy: &P, horizon: Horizon, m: usize, seeds: SeedTree) -> Result<f64, CceError>
where
    E: Environment + ?Sized,
    P: Policy<E>,
{
    let mut rng = seeds.rng();
    let mut total = 0.0;
    for _ in 0..m {
        total += simulate_returns(env, policy, Cohort::All, horizon, &mut rng)?.reward;
    }
    Ok(total / m as f64)
}

/// One search iteration; `iteration` selects the derived seeds.
pub fn cce_iteration<E, F>(
    dist: &SearchDistribution,
    env: &E,
    family: &F,
    cfg: &CceConfig,
    iteration: usize,
) -> Result<(SearchDistribution, IterationTrace), CceError>
where
    E: Environment + ?Sized,
    F: PolicyFamily<E>,
{
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed).child(iteration as u64);
    let mut rng = seeds.child(0).rng();
    let thetas: Vec<Vec<f64>> = (0..cfg.samples).map(|_| dist.sample(&mut rng)).collect();
    let candidates = thetas
        .par_iter()
        .enumerate()
        .map(|(i, theta)| score(env, family, theta, cfg, seeds.child(1 + i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(update(dist, &candidates, cfg, iteration))
}

/// Moment update from scored candidates.
pub fn update(
    dist: &SearchDistribution,
    candidates: &[Candidate],
    cfg: &CceConfig,
    iteration: usize,
) -> (SearchDistribution, IterationTrace) {
    let (elite, i_prime, objective_phase) = select_elite(candidates, cfg);
    let weights = elite_weights(candidates, &elite, objective_phase, cfg.weighting);
    let target = elite_moments(candidates, &elite, &weights);
    let mut next = dist.clone();
    next.blend(&target, cfg.smoothing);
    let trace = IterationTrace {
        iteration,
        best_reward: elite.iter().map(|&i| candidates[i].reward).fold(f64::NEG_INFINITY, f64::max),
        elite_min_gap: elite.iter().map(|&i| candidates[i].gap).fold(f64::INFINITY, f64::min),
        i_prime,
        eta_norm: next.eta_norm(),
    };
    (next, trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// A draw from the final search distribution.
    pub theta: Vec<f64>,
    /// Mean of the final search distribution, a deterministic alternative
    /// to `theta`.
    pub mean: Vec<f64>,
    pub distribution: SearchDistribution,
    pub trace: Vec<IterationTrace>,
}

/// Runs `cfg.iterations` iterations from the standard initialization.
pub fn train<E, F>(env: &E, family: &F, cfg: &CceConfig) -> Result<TrainOutcome, CceError>
where
    E: Environment + ?Sized,
    F: PolicyFamily<E>,
{
    cfg.validate()?;
    let mut dist = SearchDistribution::standard(family.dim(env));
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let (next, row) = cce_iteration(&dist, env, family, cfg, k)?;
        dist = next;
        trace.push(row);
    }
    let theta = dist.sample(&mut SeedTree::new(cfg.seed).child(u64::MAX).rng());
    Ok(TrainOutcome {
        theta,
        mean: dist.mean().to_vec(),
        distribution: dist,
        trace,
    })
}

/// Search where the gap is judged from initial states alone.
pub fn train_optimistic<E, F>(env: &E, family: &F, cfg: &CceConfig) -> Result<TrainOutcome, CceError>
where
    E: Environment + ?Sized,
    F: PolicyFamily<E>,
{
    let cfg = CceConfig {
        gap_estimate: GapEstimate::OneStep,
        ..cfg.clone()
    };
    train(env, family, &cfg)
}

/// Unconstrained search over state-independent policies, which are fair
/// whenever agent rewards depend on the action only.
pub fn train_conservative<E>(env: &E, scale: f64, cfg: &CceConfig) -> Result<TrainOutcome, CceError>
where
    E: Environment + ?Sized,
{
    if !env.agent_rewards_state_independent() {
        return Err(CceError::StateDependentAgentReward);
    }
    let cfg = CceConfig {
        tolerance: f64::INFINITY,
        ..cfg.clone()
    };
    train(env, &LinearFamily::new(FeatureView::Constant).with_scale(scale), &cfg)
}

/// Unconstrained search over policies that do not see the group.
pub fn train_race_blind<E>(env: &E, scale: f64, cfg: &CceConfig) -> Result<TrainOutcome, CceError>
where
    E: Environment + ?Sized,
{
    let cfg = CceConfig {
        tolerance: f64::INFINITY,
        ..cfg.clone()
    };
    train(env, &LinearFamily::new(FeatureView::RaceBlind).with_scale(scale), &cfg)
}
