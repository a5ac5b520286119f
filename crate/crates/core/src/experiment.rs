//! The loan-experiment grid: train one policy per (method, seed) cell and
//! measure it with fresh rollouts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::cce::{train, train_conservative, train_optimistic, train_race_blind, CceConfig, CceError, LinearFamily};
use crate::env::{estimate_policy, AgentEstimator};
use crate::loan::{LoanCriterion, LoanEnv, LoanError, LoanParams};
use crate::policy::{FeatureView, LinearPolicy};
use crate::seed::SeedTree;
use crate::Environment;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Loan(#[from] LoanError),
    #[error(transparent)]
    Cce(#[from] CceError),
    #[error("unknown method {0:?}; expected one of rb, dp, eo, opt-dp, opt-eo, cons")]
    UnknownMethod(String),
    #[error("at least one seed is required")]
    NoSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trainer {
    /// Unconstrained search without the group feature.
    RaceBlind,
    /// Constrained search with rollout gap estimates.
    Cce,
    /// Constrained search with one-step gap estimates.
    Optimistic,
    /// Search over state-independent policies.
    Conservative,
}

/// A trainer together with the criterion its constraint is measured under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub trainer: Trainer,
    pub criterion: LoanCriterion,
}

impl Method {
    pub const fn new(trainer: Trainer, criterion: LoanCriterion) -> Self {
        Self { trainer, criterion }
    }

    /// Parses `rb`, `dp`, `eo`, `opt-dp`, `opt-eo` or `cons`. The
    /// unconstrained trainers take `default` as their criterion.
    pub fn parse(name: &str, default: LoanCriterion) -> Result<Self, ExperimentError> {
        use LoanCriterion::*;
        let (trainer, criterion) = match name {
            "rb" => (Trainer::RaceBlind, default),
            "dp" => (Trainer::Cce, DemographicParity),
            "eo" => (Trainer::Cce, EqualOpportunity),
            "opt-dp" => (Trainer::Optimistic, DemographicParity),
            "opt-eo" => (Trainer::Optimistic, EqualOpportunity),
            "cons" => (Trainer::Conservative, default),
            _ => return Err(ExperimentError::UnknownMethod(name.into())),
        };
        Ok(Self { trainer, criterion })
    }

    /// Short label such as `RB` or `DP-CCE`.
    pub fn label(&self) -> &'static str {
        match (self.trainer, self.criterion) {
            (Trainer::RaceBlind, _) => "RB",
            (Trainer::Cce, LoanCriterion::DemographicParity) => "DP-CCE",
            (Trainer::Cce, LoanCriterion::EqualOpportunity) => "EO-CCE",
            (Trainer::Optimistic, _) => "Opt",
            (Trainer::Conservative, _) => "Cons",
        }
    }
}

impl fmt::Display for LoanCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoanCriterion::DemographicParity => "dp",
            LoanCriterion::EqualOpportunity => "eo",
        })
    }
}

impl FromStr for LoanCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dp" => Ok(LoanCriterion::DemographicParity),
            "eo" => Ok(LoanCriterion::EqualOpportunity),
            _ => Err(format!("unknown criterion {s:?}; expected dp or eo")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Search settings. `tolerance` is overwritten per method from the
    /// loan parameters' `epsilon`, `seed` per cell.
    pub cce: CceConfig,
    /// Score multiplier of the linear policies.
    pub scale: f64,
    /// Episodes per evaluation batch.
    pub eval_episodes: usize,
    /// Evaluate the final search mean instead of a draw from the final
    /// distribution.
    pub use_mean: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cce: CceConfig {
                iterations: 60,
                samples: 100,
                elite: 10,
                rollouts: 200,
                sigma: 0.5,
                ..Default::default()
            },
            scale: 30.0,
            eval_episodes: 10_000,
            use_mean: false,
        }
    }
}

/// Result of one trained and evaluated policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub reward: f64,
    pub reward_se: f64,
    /// Measured gap between the groups' expected number of offers.
    pub constraint: f64,
    pub theta: Vec<f64>,
    pub wall_secs: f64,
}

/// Trains `method` with seed tree `seed.child(0)` and evaluates it with
/// `seed.child(1)`.
pub fn run_cell(params: &LoanParams, method: Method, seed: u64, cfg: &ExperimentConfig) -> Result<Cell, ExperimentError> {
    let start = Instant::now();
    let env = LoanEnv::new(params.clone(), method.criterion)?;
    let root = SeedTree::new(seed);
    let cce = CceConfig {
        tolerance: params.epsilon,
        seed: root.child(0).seed(),
        ..cfg.cce.clone()
    };
    let (view, out) = match method.trainer {
        Trainer::RaceBlind => (FeatureView::RaceBlind, train_race_blind(&env, cfg.scale, &cce)?),
        Trainer::Conservative => (FeatureView::Constant, train_conservative(&env, cfg.scale, &cce)?),
        Trainer::Cce => {
            let family = LinearFamily::new(FeatureView::Full).with_scale(cfg.scale);
            (FeatureView::Full, train(&env, &family, &cce)?)
        }
        Trainer::Optimistic => {
            let family = LinearFamily::new(FeatureView::Full).with_scale(cfg.scale);
            (FeatureView::Full, train_optimistic(&env, &family, &cce)?)
        }
    };
    let theta = if cfg.use_mean { out.mean } else { out.theta };
    let policy = LinearPolicy::new(&env, view, theta.clone()).with_scale(cfg.scale);
    let est = estimate_policy(
        &env,
        &policy,
        env.horizon(),
        cfg.eval_episodes,
        root.child(1),
        AgentEstimator::Expected,
    )
    .map_err(CceError::from)?;
    Ok(Cell {
        method,
        seed,
        reward: est.reward,
        reward_se: est.reward_se,
        constraint: est.gap,
        theta,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Every (method, seed) cell, in input order. Cells run in parallel.
pub fn run_grid(
    params: &LoanParams,
    methods: &[Method],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<Vec<Cell>, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::NoSeeds);
    }
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter().map(|&(m, s)| run_cell(params, m, s, cfg)).collect()
}

/// One report row: a method averaged over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: Method,
    pub reward: f64,
    /// Standard error of the mean reward across seeds.
    pub reward_se: f64,
    pub constraint: f64,
    pub constraint_se: f64,
    pub seeds: usize,
    pub wall_secs: f64,
}

/// Averages cells per method, keeping first-appearance order.
pub fn summarize(cells: &[Cell]) -> Vec<Summary> {
    let mut order: Vec<Method> = Vec::new();
    for c in cells {
        if !order.contains(&c.method) {
            order.push(c.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let group: Vec<&Cell> = cells.iter().filter(|c| c.method == method).collect();
            let (reward, reward_se) = mean_se(group.iter().map(|c| c.reward));
            let (constraint, constraint_se) = mean_se(group.iter().map(|c| c.constraint));
            Summary {
                method,
                reward,
                reward_se,
                constraint,
                constraint_se,
                seeds: group.len(),
                wall_secs: group.iter().map(|c| c.wall_secs).sum(),
            }
        })
        .collect()
}

fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
