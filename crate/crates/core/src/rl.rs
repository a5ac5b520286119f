//! Fair policies when the model is not fully known.
//!
//! - Explore-then-commit: run a safe exploration policy, estimate the
//!   transitions, then commit to the fair optimum of the estimated model.
//! - Stationary distributions and mixing times of induced chains.
//! - Recovering a usable initial distribution from the stationary
//!   distribution of an exploration policy.
//!
//! Episodic problems are undiscounted with a fixed horizon `T`. Fair
//! optimization over them is solved exactly on the time-expanded model with
//! per-step state-action probabilities `x_t(s, a)` as variables.

use thiserror::Error;

use crate::fair_lp::{self, group_region, FairLpError, FairStatus};
use crate::lp::{self, LpBuilder, LpError, LpStatus, VarSign};
use crate::mdp::{
    evaluate_schedule, finite_horizon_occupancy_from, induced_transition, EvalMode, Evaluation, FairnessSpec, Group,
    MdpError, NonStationaryPolicy, TabularMdp, TabularPolicy,
};
use crate::policy::sample_index;
use crate::seed::SimRng;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    FairLp(#[from] FairLpError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("chain did not converge to a unique stationary distribution within {0} steps")]
    NotErgodic(usize),
    #[error("mixing time exceeds the cap of {0} steps")]
    MixingCap(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the comparator problem is infeasible")]
    ComparatorInfeasible,
}

/// Observed transition counts and the empirical model built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEstimate {
    n_states: usize,
    n_actions: usize,
    counts: Vec<f64>,
}

impl TransitionEstimate {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            counts: vec![0.0; n_states * n_actions * n_states],
        }
    }

    pub fn record(&mut self, s: usize, a: usize, next: usize) {
        self.counts[(s * self.n_actions + a) * self.n_states + next] += 1.0;
    }

    pub fn count(&self, s: usize, a: usize, next: usize) -> f64 {
        self.counts[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn visits(&self, s: usize, a: usize) -> f64 {
        let start = (s * self.n_actions + a) * self.n_states;
        self.counts[start..start + self.n_states].iter().sum()
    }

    /// Empirical row `P̂(s, a, ·)`, or `None` if `(s, a)` was never tried.
    pub fn row(&self, s: usize, a: usize) -> Option<Vec<f64>> {
        let total = self.visits(s, a);
        if total == 0.0 {
            return None;
        }
        let start = (s * self.n_actions + a) * self.n_states;
        Some(self.counts[start..start + self.n_states].iter().map(|c| c / total).collect())
    }

    /// Pairs that were never tried.
    pub fn unvisited(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                if self.visits(s, a) == 0.0 {
                    out.push((s, a));
                }
            }
        }
        out
    }

    /// `mdp` with its transitions replaced by the empirical ones. Unvisited
    /// pairs move uniformly within the state's own group, which keeps the
    /// estimated model separable.
    pub fn apply_to(&self, mdp: &TabularMdp) -> Result<TabularMdp, MdpError> {
        mdp.with_transitions(|s, a| {
            self.row(s, a).unwrap_or_else(|| {
                let z = mdp.group_of(s);
                let members = mdp.groups().iter().filter(|&&g| g == z).count() as f64;
                mdp.groups().iter().map(|&g| if g == z { 1.0 / members } else { 0.0 }).collect()
            })
        })
    }

    /// Largest entrywise deviation from the true transitions over visited pairs.
    pub fn max_error(&self, mdp: &TabularMdp) -> f64 {
        let mut worst = 0.0_f64;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                if let Some(row) = self.row(s, a) {
                    for (p_hat, p) in row.iter().zip(mdp.transition_row(s, a)) {
                        worst = worst.max((p_hat - p).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Result of a finite-horizon fair solve.
#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    pub status: FairStatus,
    pub policy: Option<NonStationaryPolicy>,
    /// Optimal expected episode return.
    pub reward: f64,
    pub evaluation: Option<Evaluation>,
}

/// Reward-optimal non-stationary policy over `horizon` undiscounted steps
/// whose normalized group values differ by at most `spec.tolerance`.
pub fn solve_fair_finite_horizon(
    mdp: &TabularMdp,
    spec: &FairnessSpec,
    horizon: usize,
) -> Result<FiniteHorizonSolution, RlError> {
    if horizon == 0 {
        return Err(RlError::Config("horizon must be positive".into()));
    }
    mdp.ensure_separable()?;
    spec.validate(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let idx = |t: usize, s: usize, a: usize| (t * ns + s) * na + a;
    let mut b = LpBuilder::new();
    for _t in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                b.add_variable(mdp.reward(s, a), VarSign::NonNegative);
            }
        }
    }
    let c = b.add_variable(0.0, VarSign::Free);
    for s in 0..ns {
        b.add_eq((0..na).map(|a| (idx(0, s, a), 1.0)).collect(), mdp.initial()[s]);
    }
    for t in 1..horizon {
        for next in 0..ns {
            let mut terms: Vec<(usize, f64)> = (0..na).map(|a| (idx(t, next, a), 1.0)).collect();
            for s in 0..ns {
                for a in 0..na {
                    let p = mdp.transition(s, a, next);
                    if p != 0.0 {
                        terms.push((idx(t - 1, s, a), -p));
                    }
                }
            }
            b.add_eq(terms, 0.0);
        }
    }
    let half = spec.tolerance / 2.0;
    for z in Group::ALL {
        let (region, p) = group_region(mdp, spec, z)?;
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for t in 0..horizon {
            for s in (0..ns).filter(|&s| region[s]) {
                for a in 0..na {
                    let v = mdp.agent_reward(s, a) / (p * horizon as f64);
                    if v != 0.0 {
                        terms.push((idx(t, s, a), v));
                    }
                }
            }
        }
        terms.push((c, -1.0));
        if half > 0.0 {
            b.add_le(terms.clone(), half);
            b.add_ge(terms, -half);
        } else {
            b.add_eq(terms, 0.0);
        }
    }
    let sol = lp::solve(&b.build()?)?;
    if sol.status != LpStatus::Optimal {
        return Ok(FiniteHorizonSolution {
            status: FairStatus::Infeasible,
            policy: None,
            reward: f64::NAN,
            evaluation: None,
        });
    }
    let steps = (0..horizon)
        .map(|t| {
            let block = &sol.x[idx(t, 0, 0)..idx(t, 0, 0) + ns * na];
            fair_lp::extract_policy(ns, na, block, |_| vec![1.0 / na as f64; na])
        })
        .collect();
    let policy = NonStationaryPolicy::new(steps)?;
    let evaluation = evaluate_schedule(mdp, &policy, spec, EvalMode::FiniteHorizon { horizon })?;
    if (evaluation.reward - sol.objective).abs() > fair_lp::VERIFY_TOL * sol.objective.abs().max(1.0) {
        return Err(FairLpError::Verification(format!(
            "LP objective {} but the policy earns {}",
            sol.objective, evaluation.reward
        ))
        .into());
    }
    Ok(FiniteHorizonSolution {
        status: FairStatus::Fair,
        policy: Some(policy),
        reward: sol.objective,
        evaluation: Some(evaluation),
    })
}

/// Exact expected episode return of a (possibly non-stationary) policy.
pub fn episode_return(mdp: &TabularMdp, policy: &NonStationaryPolicy, horizon: usize) -> Result<f64, RlError> {
    let occ = finite_horizon_occupancy_from(mdp, policy, mdp.initial(), horizon)?;
    Ok(horizon as f64 * occ.dot(|s, a| mdp.reward(s, a)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtcConfig {
    /// Total episodes `N`.
    pub episodes: usize,
    /// Exploration episodes `N₀`.
    pub exploration: usize,
    pub horizon: usize,
    /// Fairness tolerance `ε` required of the committed policy.
    pub tolerance: f64,
    pub delta: f64,
    /// Required lower bound `λ₀` on the exploration policy's occupancy.
    pub floor: f64,
}

impl EtcConfig {
    /// `N₀ = 128 T² |S|² R_max² log(2|S|²|A|/δ) / (λ₀² ε²)`.
    pub fn sufficient_exploration(
        n_states: usize,
        n_actions: usize,
        r_max: f64,
        horizon: usize,
        tolerance: f64,
        delta: f64,
        floor: f64,
    ) -> f64 {
        let (s, t) = (n_states as f64, horizon as f64);
        128.0 * t * t * s * s * r_max * r_max * (2.0 * s * s * n_actions as f64 / delta).ln()
            / (floor * floor * tolerance * tolerance)
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.exploration > self.episodes {
            return Err(RlError::Config("exploration episodes exceed the total".into()));
        }
        if self.horizon == 0 {
            return Err(RlError::Config("horizon must be positive".into()));
        }
        if !(self.floor > 0.0) {
            return Err(RlError::Config("occupancy floor must be positive".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(RlError::Config("tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EtcOutcome {
    pub committed: NonStationaryPolicy,
    /// The estimated problem was infeasible and the exploration policy was kept.
    pub fell_back: bool,
    /// Smallest finite-horizon occupancy of the exploration policy.
    pub min_occupancy: f64,
    pub floor_satisfied: bool,
    pub estimate: TransitionEstimate,
    /// Realized return of each episode.
    pub episode_rewards: Vec<f64>,
    /// Cumulative expected regret after each episode.
    pub cumulative_regret: Vec<f64>,
    pub comparator_reward: f64,
    pub exploration_reward: f64,
    pub committed_reward: f64,
    /// Fairness gap of the committed policy on the true model.
    pub committed_gap: f64,
}

impl EtcOutcome {
    pub fn regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }
}

fn run_episode(mdp: &TabularMdp, policy: &NonStationaryPolicy, horizon: usize, rng: &mut SimRng, mut record: impl FnMut(usize, usize, usize)) -> f64 {
    use crate::mdp::PolicySchedule;
    let mut s = sample_index(mdp.initial(), rng);
    let mut total = 0.0;
    for t in 0..horizon {
        let a = sample_index(policy.at(t).row(s), rng);
        let next = sample_index(mdp.transition_row(s, a), rng);
        total += mdp.reward(s, a);
        record(s, a, next);
        s = next;
    }
    total
}

/// Commits to the `ε/2`-fair optimum of `estimated`; falls back to `pi0`
/// when that problem is infeasible.
pub fn commit(
    estimated: &TabularMdp,
    spec: &FairnessSpec,
    pi0: &TabularPolicy,
    cfg: &EtcConfig,
) -> Result<(NonStationaryPolicy, bool), RlError> {
    let half = spec.clone().with_tolerance(cfg.tolerance / 2.0);
    let sol = solve_fair_finite_horizon(estimated, &half, cfg.horizon)?;
    Ok(match sol.policy {
        Some(p) => (p, false),
        None => (NonStationaryPolicy::stationary(pi0.clone(), cfg.horizon), true),
    })
}

/// Explore with `pi0` for `N₀` episodes, then commit. Regret is measured
/// against the `ε/4`-fair optimum of the true model using exact returns.
pub fn explore_then_commit(
    mdp: &TabularMdp,
    spec: &FairnessSpec,
    pi0: &TabularPolicy,
    cfg: &EtcConfig,
    rng: &mut SimRng,
) -> Result<EtcOutcome, RlError> {
    cfg.validate()?;
    let horizon = cfg.horizon;
    let occ = finite_horizon_occupancy_from(mdp, pi0, mdp.initial(), horizon)?;
    let min_occupancy = occ.lambda.iter().copied().fold(f64::INFINITY, f64::min);

    let comparator_spec = spec.clone().with_tolerance(cfg.tolerance / 4.0);
    let comparator = solve_fair_finite_horizon(mdp, &comparator_spec, horizon)?;
    if comparator.status != FairStatus::Fair {
        return Err(RlError::ComparatorInfeasible);
    }

    let explore = NonStationaryPolicy::stationary(pi0.clone(), horizon);
    let exploration_reward = episode_return(mdp, &explore, horizon)?;
    let mut estimate = TransitionEstimate::new(mdp.n_states(), mdp.n_actions());
    let mut episode_rewards = Vec::with_capacity(cfg.episodes);
    let mut cumulative_regret = Vec::with_capacity(cfg.episodes);
    let mut regret = 0.0;
    for _ in 0..cfg.exploration {
        episode_rewards.push(run_episode(mdp, &explore, horizon, rng, |s, a, n| estimate.record(s, a, n)));
        regret += comparator.reward - exploration_reward;
        cumulative_regret.push(regret);
    }

    let estimated = estimate.apply_to(mdp)?;
    let (committed, fell_back) = commit(&estimated, spec, pi0, cfg)?;
    let committed_reward = episode_return(mdp, &committed, horizon)?;
    let committed_gap = evaluate_schedule(mdp, &committed, spec, EvalMode::FiniteHorizon { horizon })?.gap;
    for _ in cfg.exploration..cfg.episodes {
        episode_rewards.push(run_episode(mdp, &committed, horizon, rng, |_, _, _| {}));
        regret += comparator.reward - committed_reward;
        cumulative_regret.push(regret);
    }
    Ok(EtcOutcome {
        committed,
        fell_back,
        min_occupancy,
        floor_satisfied: min_occupancy >= cfg.floor,
        estimate,
        episode_rewards,
        cumulative_regret,
        comparator_reward: comparator.reward,
        exploration_reward,
        committed_reward,
        committed_gap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretPoint {
    pub episodes: usize,
    pub exploration: usize,
    pub tolerance: f64,
    pub regret: f64,
}

/// Runs explore-then-commit for each `N` with `ε = N^{-2/3}` and
/// `N₀ = ceil(scale · N^{2/3})`.
pub fn regret_curve(
    mdp: &TabularMdp,
    spec: &FairnessSpec,
    pi0: &TabularPolicy,
    horizon: usize,
    episodes: &[usize],
    scale: f64,
    seeds: crate::seed::SeedTree,
) -> Result<Vec<RegretPoint>, RlError> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let tolerance = (n as f64).powf(-2.0 / 3.0);
            let exploration = ((scale * (n as f64).powf(2.0 / 3.0)).ceil() as usize).min(n);
            let cfg = EtcConfig {
                episodes: n,
                exploration,
                horizon,
                tolerance,
                delta: 0.05,
                floor: f64::MIN_POSITIVE,
            };
            let out = explore_then_commit(mdp, spec, pi0, &cfg, &mut seeds.child(i as u64).rng())?;
            Ok(RegretPoint {
                episodes: n,
                exploration,
                tolerance,
                regret: out.regret(),
            })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn row_spread(m: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for row in &m[1..] {
        for (a, b) in row.iter().zip(&m[0]) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stationary {
    pub distribution: Vec<f64>,
    /// `‖d P - d‖∞`.
    pub residual: f64,
    /// Power of `P` at which all rows agreed.
    pub steps: usize,
}

/// Squarings of the transition matrix before giving up (`2^20` steps).
const MAX_SQUARINGS: usize = 20;

/// Stationary distribution of a row-stochastic matrix, found by repeated
/// squaring until every start state leads to the same distribution.
pub fn stationary_distribution(p: &[Vec<f64>], tol: f64) -> Result<Stationary, RlError> {
    let n = p.len();
    if n == 0 || p.iter().any(|r| r.len() != n) {
        return Err(RlError::Config("transition matrix must be square and nonempty".into()));
    }
    let mut m = p.to_vec();
    let mut steps = 1usize;
    for _ in 0..=MAX_SQUARINGS {
        if row_spread(&m) <= tol {
            let mut d: Vec<f64> = (0..n).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let total: f64 = d.iter().sum();
            for v in &mut d {
                *v /= total;
            }
            let residual = (0..n)
                .map(|j| ((0..n).map(|i| d[i] * p[i][j]).sum::<f64>() - d[j]).abs())
                .fold(0.0, f64::max);
            return Ok(Stationary {
                distribution: d,
                residual,
                steps,
            });
        }
        m = mat_mul(&m, &m);
        steps *= 2;
    }
    Err(RlError::NotErgodic(steps / 2))
}

/// Step cap for [`mixing_time`].
pub const MIXING_CAP: usize = 1_000_000;

/// Smallest `T ≥ 1` with `max_s ‖e_s P^T - d‖∞ ≤ eps0`. The distance is
/// convex in the start distribution, so checking point masses suffices.
pub fn mixing_time(p: &[Vec<f64>], eps0: f64) -> Result<usize, RlError> {
    let d = stationary_distribution(p, 1e-13)?.distribution;
    let n = p.len();
    let mut m = p.to_vec();
    for t in 1..=MIXING_CAP {
        let dist = m
            .iter()
            .flat_map(|row| row.iter().zip(&d).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if dist <= eps0 {
            return Ok(t);
        }
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let v = m[i][k];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i][j] += v * p[k][j];
                }
            }
        }
        m = next;
    }
    Err(RlError::MixingCap(MIXING_CAP))
}

#[derive(Debug, Clone)]
pub struct UnknownInitOutcome {
    pub policy: TabularPolicy,
    /// Steps to run the exploration policy before switching.
    pub mixing_steps: usize,
    pub eps0: f64,
    /// Stationary distribution used as the surrogate initial distribution.
    pub surrogate_initial: Vec<f64>,
    pub fell_back: bool,
}

/// `ε₀ = (1-γ) ε / (8 |S| R_max)`.
pub fn unknown_init_eps0(mdp: &TabularMdp, tolerance: f64) -> f64 {
    (1.0 - mdp.discount()) * tolerance / (8.0 * mdp.n_states() as f64 * mdp.r_max())
}

/// Replaces the unknown initial distribution with the stationary
/// distribution of `pi0` and solves the fair problem there with tolerance
/// `ε/2`.
///
/// A separable chain never mixes across groups, so the stationary
/// distribution and mixing time are computed per group block and the blocks
/// are weighted by `group_mass` (the population share of each group).
pub fn unknown_init_workflow(
    mdp: &TabularMdp,
    pi0: &TabularPolicy,
    group_mass: [f64; 2],
    tolerance: f64,
) -> Result<UnknownInitOutcome, RlError> {
    mdp.ensure_separable()?;
    let eps0 = unknown_init_eps0(mdp, tolerance);
    let p = induced_transition(mdp, pi0)?;
    let total_mass: f64 = group_mass.iter().sum();
    let mut surrogate = vec![0.0; mdp.n_states()];
    let mut mixing_steps = 1;
    for z in Group::ALL {
        let members: Vec<usize> = (0..mdp.n_states()).filter(|&s| mdp.group_of(s) == z).collect();
        if members.is_empty() || group_mass[z.index()] <= 0.0 {
            return Err(MdpError::EmptyGroup(z).into());
        }
        let block: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| members.iter().map(|&j| p[i][j]).collect())
            .collect();
        let d = stationary_distribution(&block, 1e-13)?.distribution;
        mixing_steps = mixing_steps.max(mixing_time(&block, eps0)?);
        for (k, &s) in members.iter().enumerate() {
            surrogate[s] = group_mass[z.index()] / total_mass * d[k];
        }
    }
    let total: f64 = surrogate.iter().sum();
    for v in &mut surrogate {
        *v /= total;
    }
    let tilde = mdp.with_initial(surrogate.clone())?;
    let spec = FairnessSpec::demographic_parity(&tilde, tolerance / 2.0);
    let sol = fair_lp::solve_fair(&tilde, &spec)?;
    let (policy, fell_back) = match sol.policy {
        Some(p) => (p, false),
        None => (pi0.clone(), true),
    };
    Ok(UnknownInitOutcome {
        policy,
        mixing_steps,
        eps0,
        surrogate_initial: surrogate,
        fell_back,
    })
}
