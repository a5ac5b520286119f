//! Exact fair policies for separable tabular MDPs via the occupancy-measure LP.
//!
//! The decision variables are the normalized discounted occupancies
//! `λ(s, a) ≥ 0` and the common group value `c`. Flow rows force `λ` to be
//! the occupancy measure of some stationary policy; parity rows pin each
//! group's conditional agent value to `c` (or to within `ε/2` of it, which
//! bounds the gap by `ε`).

use thiserror::Error;

use crate::lp::{self, LpBuilder, LpError, LpStatus, VarSign};
use crate::mdp::{
    evaluate, group_initial, EvalMode, Evaluation, FairnessSpec, Group, MdpError, TabularMdp, TabularPolicy,
};

/// Occupancy rows with less total mass than this are treated as unvisited.
pub const ZERO_MASS: f64 = 1e-12;
/// Allowed mismatch between the LP objective and the re-evaluated policy.
pub const VERIFY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FairLpError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("the fair LP needs a discount below 1, got {0}")]
    Discount(f64),
    #[error("group {}: {detail}", group.name())]
    GroupRegion { group: Group, detail: String },
    #[error("extracted policy failed verification: {0}")]
    Verification(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairStatus {
    Fair,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct FairSolveResult {
    pub status: FairStatus,
    /// Extracted policy; `None` when infeasible.
    pub policy: Option<TabularPolicy>,
    /// LP solution `λ*`, row-major `(s, a)`; empty when infeasible.
    pub lambda: Vec<f64>,
    /// Common group value `c*`.
    pub c: f64,
    /// LP objective, the expected discounted reward.
    pub reward: f64,
    /// Exact re-evaluation of the extracted policy.
    pub evaluation: Option<Evaluation>,
    /// `max_s |Σ_a π(s,a) ρ(s,a) - c|` for conservative solves.
    pub per_state_deviation: Option<f64>,
}

impl FairSolveResult {
    fn infeasible() -> Self {
        Self {
            status: FairStatus::Infeasible,
            policy: None,
            lambda: Vec::new(),
            c: f64::NAN,
            reward: f64::NAN,
            evaluation: None,
            per_state_deviation: None,
        }
    }
}

/// Assembled LP with its variable layout.
#[derive(Debug, Clone)]
pub struct FairLp {
    pub lp: lp::LinearProgram,
    pub n_states: usize,
    pub n_actions: usize,
    /// Index of the free variable `c`.
    pub c_index: usize,
}

impl FairLp {
    pub fn lambda_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
}

/// States whose occupancy belongs to group `z`, with the group weight
/// `p_z` used to condition on it.
pub(crate) fn group_region(mdp: &TabularMdp, spec: &FairnessSpec, z: Group) -> Result<(Vec<bool>, f64), FairLpError> {
    let (dz, _) = group_initial(mdp, spec, z)?;
    let region = mdp.reachable_from((0..mdp.n_states()).filter(|&s| dz[s] > 0.0));
    let err = |detail: String| FairLpError::GroupRegion { group: z, detail };

    // Initial mass outside the group's support must never flow into its region.
    let others = (0..mdp.n_states()).filter(|&s| mdp.initial()[s] > 0.0 && dz[s] == 0.0);
    let leak = mdp.reachable_from(others);
    if let Some(s) = (0..mdp.n_states()).find(|&s| leak[s] && region[s]) {
        return Err(err(format!(
            "state {s} is reachable both from the group's initial states and from others"
        )));
    }
    // Within the region, D must be proportional to D_z.
    let p: f64 = (0..mdp.n_states()).filter(|&s| region[s]).map(|s| mdp.initial()[s]).sum();
    if p <= 0.0 {
        return Err(err("the initial distribution puts no mass on the group's states".into()));
    }
    for s in 0..mdp.n_states() {
        let conditional = if region[s] { mdp.initial()[s] / p } else { 0.0 };
        if (conditional - dz[s]).abs() > 1e-9 {
            return Err(err(format!(
                "initial distribution restricted to the group gives {conditional} at state {s}, group distribution has {}",
                dz[s]
            )));
        }
    }
    Ok((region, p))
}

fn check_discounted(mdp: &TabularMdp) -> Result<(), FairLpError> {
    if mdp.discount() >= 1.0 {
        return Err(FairLpError::Discount(mdp.discount()));
    }
    Ok(())
}

/// Variables and flow rows shared by every variant.
fn base_builder(mdp: &TabularMdp) -> (LpBuilder, usize) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut b = LpBuilder::new();
    for s in 0..ns {
        for a in 0..na {
            b.add_variable(mdp.reward(s, a) / (1.0 - gamma), VarSign::NonNegative);
        }
    }
    let c = b.add_variable(0.0, VarSign::Free);
    for next in 0..ns {
        let mut terms = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let mut coef = -gamma * mdp.transition(s, a, next);
                if s == next {
                    coef += 1.0;
                }
                if coef != 0.0 {
                    terms.push((s * na + a, coef));
                }
            }
        }
        b.add_eq(terms, (1.0 - gamma) * mdp.initial()[next]);
    }
    (b, c)
}

/// Builds the fair LP. With `spec.tolerance > 0` each group's value may
/// deviate from `c` by at most half the tolerance.
pub fn build_fair_lp(mdp: &TabularMdp, spec: &FairnessSpec) -> Result<FairLp, FairLpError> {
    check_discounted(mdp)?;
    mdp.ensure_separable()?;
    spec.validate(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (mut b, c) = base_builder(mdp);
    let half = spec.tolerance / 2.0;
    for z in Group::ALL {
        let (region, p) = group_region(mdp, spec, z)?;
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for s in (0..ns).filter(|&s| region[s]) {
            for a in 0..na {
                let v = mdp.agent_reward(s, a) / p;
                if v != 0.0 {
                    terms.push((s * na + a, v));
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
    Ok(FairLp {
        lp: b.build()?,
        n_states: ns,
        n_actions: na,
        c_index: c,
    })
}

/// Unconstrained occupancy LP (no parity rows); its optimum is the MDP's
/// optimal discounted reward.
pub fn build_unconstrained_lp(mdp: &TabularMdp) -> Result<FairLp, FairLpError> {
    check_discounted(mdp)?;
    let (b, c) = base_builder(mdp);
    Ok(FairLp {
        lp: b.build()?,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        c_index: c,
    })
}

/// `π(s, ·) = λ(s, ·) / Σ_a λ(s, a)`; rows without mass get `fallback(s)`.
pub fn extract_policy(
    n_states: usize,
    n_actions: usize,
    lambda: &[f64],
    fallback: impl Fn(usize) -> Vec<f64>,
) -> TabularPolicy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let row: Vec<f64> = lambda[s * n_actions..(s + 1) * n_actions].iter().map(|v| v.max(0.0)).collect();
        let mass: f64 = row.iter().sum();
        if mass < ZERO_MASS {
            probs.extend(fallback(s));
        } else {
            probs.extend(row.iter().map(|v| v / mass));
        }
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("extracted rows are distributions")
}

fn uniform_row(n_actions: usize) -> Vec<f64> {
    vec![1.0 / n_actions as f64; n_actions]
}

fn verify(objective: f64, evaluation: &Evaluation) -> Result<(), FairLpError> {
    let diff = (evaluation.reward - objective).abs();
    if diff > VERIFY_TOL * objective.abs().max(1.0) {
        return Err(FairLpError::Verification(format!(
            "LP objective {objective} but the policy earns {}",
            evaluation.reward
        )));
    }
    Ok(())
}

/// Reward-optimal policy among those meeting `spec` (exact parity, or gap at
/// most `spec.tolerance`).
pub fn solve_fair(mdp: &TabularMdp, spec: &FairnessSpec) -> Result<FairSolveResult, FairLpError> {
    let fair = build_fair_lp(mdp, spec)?;
    let sol = lp::solve(&fair.lp)?;
    if sol.status != LpStatus::Optimal {
        return Ok(FairSolveResult::infeasible());
    }
    let (ns, na) = (fair.n_states, fair.n_actions);
    let lambda = sol.x[..ns * na].to_vec();
    let policy = extract_policy(ns, na, &lambda, |_| uniform_row(na));
    let evaluation = evaluate(mdp, &policy, spec, EvalMode::Discounted)?;
    verify(sol.objective, &evaluation)?;
    if evaluation.gap > spec.tolerance + VERIFY_TOL {
        return Err(FairLpError::Verification(format!(
            "gap {} exceeds tolerance {}",
            evaluation.gap, spec.tolerance
        )));
    }
    Ok(FairSolveResult {
        status: FairStatus::Fair,
        policy: Some(policy),
        lambda,
        c: sol.x[fair.c_index],
        reward: sol.objective,
        evaluation: Some(evaluation),
        per_state_deviation: None,
    })
}

/// Which constraint set the conservative solver enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConservativeForm {
    /// `Σ_a π(s,a) ρ(s,a) = c` in every state: the policy's expected one-step
    /// agent reward is the same everywhere, so parity holds for any initial
    /// distribution. Solved as an LP in `λ` for each fixed `c`, searching
    /// over `c`.
    #[default]
    PolicyLevel,
    /// `Σ_a λ(s,a) ρ(s,a) = c` in every state, a single LP. This weights
    /// each state by its occupancy and is not in general fair for other
    /// initial distributions.
    OccupancyRows,
}

/// Feasible range of `c` for the policy-level form.
fn c_interval(mdp: &TabularMdp) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for s in 0..mdp.n_states() {
        let (mut smin, mut smax) = (f64::INFINITY, f64::NEG_INFINITY);
        for a in 0..mdp.n_actions() {
            smin = smin.min(mdp.agent_reward(s, a));
            smax = smax.max(mdp.agent_reward(s, a));
        }
        lo = lo.max(smin);
        hi = hi.min(smax);
    }
    (lo, hi)
}

/// Action distribution at `s` with expected agent reward exactly `c`.
fn mixture_achieving(mdp: &TabularMdp, s: usize, c: f64) -> Vec<f64> {
    let na = mdp.n_actions();
    let rho: Vec<f64> = (0..na).map(|a| mdp.agent_reward(s, a)).collect();
    let lo = (0..na).min_by(|&a, &b| rho[a].total_cmp(&rho[b])).unwrap();
    let hi = (0..na).max_by(|&a, &b| rho[a].total_cmp(&rho[b])).unwrap();
    let mut row = vec![0.0; na];
    if rho[hi] - rho[lo] <= 1e-15 {
        return uniform_row(na);
    }
    let t = ((c - rho[lo]) / (rho[hi] - rho[lo])).clamp(0.0, 1.0);
    row[hi] += t;
    row[lo] += 1.0 - t;
    row
}

/// LP optimum for the policy-level form at a fixed `c`.
fn solve_at_c(mdp: &TabularMdp, c: f64) -> Result<Option<(f64, Vec<f64>)>, FairLpError> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (mut b, _) = base_builder(mdp);
    for s in 0..ns {
        let terms: Vec<(usize, f64)> = (0..na)
            .map(|a| (s * na + a, mdp.agent_reward(s, a) - c))
            .filter(|(_, v)| *v != 0.0)
            .collect();
        if !terms.is_empty() {
            b.add_eq(terms, 0.0);
        }
    }
    let sol = lp::solve(&b.build()?)?;
    Ok((sol.status == LpStatus::Optimal).then(|| (sol.objective, sol.x[..ns * na].to_vec())))
}

/// Conservative fair policy; see [`ConservativeForm`].
pub fn solve_conservative(
    mdp: &TabularMdp,
    spec: &FairnessSpec,
    form: ConservativeForm,
) -> Result<FairSolveResult, FairLpError> {
    check_discounted(mdp)?;
    mdp.ensure_separable()?;
    spec.validate(mdp)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());

    let (objective, lambda, c) = match form {
        ConservativeForm::OccupancyRows => {
            let (mut b, c) = base_builder(mdp);
            for s in 0..ns {
                let mut terms: Vec<(usize, f64)> = (0..na).map(|a| (s * na + a, mdp.agent_reward(s, a))).collect();
                terms.push((c, -1.0));
                b.add_eq(terms, 0.0);
            }
            let sol = lp::solve(&b.build()?)?;
            if sol.status != LpStatus::Optimal {
                return Ok(FairSolveResult::infeasible());
            }
            (sol.objective, sol.x[..ns * na].to_vec(), sol.x[c])
        }
        ConservativeForm::PolicyLevel => {
            let (lo, hi) = c_interval(mdp);
            if lo > hi + 1e-12 {
                return Ok(FairSolveResult::infeasible());
            }
            let hi = hi.max(lo);
            let mut best: Option<(f64, Vec<f64>, f64)> = None;
            let consider = |c: f64, best: &mut Option<(f64, Vec<f64>, f64)>| -> Result<Option<f64>, FairLpError> {
                let found = solve_at_c(mdp, c)?;
                if let Some((value, lambda)) = &found {
                    if best.as_ref().is_none_or(|(v, _, _)| *value > *v) {
                        *best = Some((*value, lambda.clone(), c));
                    }
                }
                Ok(found.map(|(v, _)| v))
            };
            // The optimum as a function of c need not be concave: scan a grid,
            // then refine around the best grid point.
            const GRID: usize = 100;
            let grid: Vec<f64> = (0..=GRID).map(|k| lo + (hi - lo) * k as f64 / GRID as f64).collect();
            let mut values = Vec::with_capacity(grid.len());
            for &c in &grid {
                values.push(consider(c, &mut best)?);
            }
            if let Some(k) = (0..grid.len())
                .filter(|&k| values[k].is_some())
                .max_by(|&a, &b| values[a].unwrap().total_cmp(&values[b].unwrap()))
            {
                let (mut a, mut b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(GRID)]);
                let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..40 {
                    if b - a < 1e-12 {
                        break;
                    }
                    let x1 = b - inv_phi * (b - a);
                    let x2 = a + inv_phi * (b - a);
                    let f1 = consider(x1, &mut best)?.unwrap_or(f64::NEG_INFINITY);
                    let f2 = consider(x2, &mut best)?.unwrap_or(f64::NEG_INFINITY);
                    if f1 >= f2 {
                        b = x2;
                    } else {
                        a = x1;
                    }
                }
            }
            // The uniform policy's level, where state-independent
            // policies live when ρ depends on the action only.
            if let Some(rho) = mdp.state_independent_agent_reward() {
                let c = rho.iter().sum::<f64>() / na as f64;
                consider(c, &mut best)?;
            }
            match best {
                None => return Ok(FairSolveResult::infeasible()),
                Some(found) => found,
            }
        }
    };

    let policy = match form {
        ConservativeForm::PolicyLevel => extract_policy(ns, na, &lambda, |s| mixture_achieving(mdp, s, c)),
        ConservativeForm::OccupancyRows => extract_policy(ns, na, &lambda, |_| uniform_row(na)),
    };
    let deviation = (0..ns)
        .map(|s| {
            let v: f64 = (0..na).map(|a| policy.prob(s, a) * mdp.agent_reward(s, a)).sum();
            (v - c).abs()
        })
        .fold(0.0, f64::max);
    let evaluation = evaluate(mdp, &policy, spec, EvalMode::Discounted)?;
    verify(objective, &evaluation)?;
    if form == ConservativeForm::PolicyLevel && deviation > VERIFY_TOL {
        return Err(FairLpError::Verification(format!(
            "one-step agent reward deviates from c by {deviation}"
        )));
    }
    Ok(FairSolveResult {
        status: FairStatus::Fair,
        policy: Some(policy),
        lambda,
        c,
        reward: objective,
        evaluation: Some(evaluation),
        per_state_deviation: Some(deviation),
    })
}
