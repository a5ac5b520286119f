//! Finite MDPs, tabular policies, occupancy measures and exact evaluation.
//!
//! States carry a sensitive attribute ([`Group`]) through `group_of`. All
//! occupancy measures are normalized distributions: in discounted mode the
//! state distribution is `(1-γ) Σ_t γ^t D_t`, in finite-horizon mode it is
//! `(1/T) Σ_{t<T} D_t`. Reported rewards undo the normalization, so they are
//! expected discounted (or undiscounted, finite-horizon) returns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability vectors and transition rows must sum to one within this bound.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Maj,
    Min,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Maj, Group::Min];

    pub fn index(self) -> usize {
        match self {
            Group::Maj => 0,
            Group::Min => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::Maj => Group::Min,
            Group::Min => Group::Maj,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Maj => "maj",
            Group::Min => "min",
        }
    }
}

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("group {} has zero probability mass", .0.name())]
    EmptyGroup(Group),
    #[error("transition ({state}, {action}) -> {next} changes the sensitive attribute")]
    NotSeparable {
        state: usize,
        action: usize,
        next: usize,
    },
    #[error("discounted evaluation requires discount < 1, got {0}")]
    DiscountNotBelowOne(f64),
    #[error("occupancy system is singular")]
    Singular,
    #[error("malformed MDP document: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> MdpError {
    MdpError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// On-disk form of a tabular MDP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub agent_reward: Vec<Vec<f64>>,
    pub group_of: Vec<Group>,
}

/// A finite MDP whose states are labelled with a sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    initial: Vec<f64>,
    // (s * n_actions + a) * n_states + s'
    transitions: Vec<f64>,
    reward: Vec<f64>,
    agent_reward: Vec<f64>,
    group_of: Vec<Group>,
}

fn check_distribution(field: &str, values: &[f64]) -> Result<(), MdpError> {
    for (i, &p) in values.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("{field}[{i}]"), format!("probability {p} outside [0, 1]")));
        }
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(invalid(field, format!("sums to {total}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds and validates an MDP from dense nested tables.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        initial: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        agent_reward: Vec<Vec<f64>>,
        discount: f64,
        group_of: Vec<Group>,
    ) -> Result<Self, MdpError> {
        let n_states = initial.len();
        let n_actions = transitions.first().map_or(0, |row| row.len());
        Self::from_document(MdpDocument {
            n_states,
            n_actions,
            discount,
            initial,
            transitions,
            reward,
            agent_reward,
            group_of,
        })
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self, MdpError> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if ns == 0 {
            return Err(invalid("n_states", "must be positive"));
        }
        if na == 0 {
            return Err(invalid("n_actions", "must be positive"));
        }
        if !doc.discount.is_finite() || !(0.0..=1.0).contains(&doc.discount) {
            return Err(invalid("discount", format!("{} outside [0, 1]", doc.discount)));
        }
        if doc.initial.len() != ns {
            return Err(invalid("initial", format!("length {} != n_states {ns}", doc.initial.len())));
        }
        check_distribution("initial", &doc.initial)?;
        if doc.group_of.len() != ns {
            return Err(invalid("group_of", format!("length {} != n_states {ns}", doc.group_of.len())));
        }
        if doc.transitions.len() != ns {
            return Err(invalid(
                "transitions",
                format!("length {} != n_states {ns}", doc.transitions.len()),
            ));
        }
        let mut transitions = Vec::with_capacity(ns * na * ns);
        for (s, per_action) in doc.transitions.iter().enumerate() {
            if per_action.len() != na {
                return Err(invalid(
                    format!("transitions[{s}]"),
                    format!("length {} != n_actions {na}", per_action.len()),
                ));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    return Err(invalid(
                        format!("transitions[{s}][{a}]"),
                        format!("length {} != n_states {ns}", row.len()),
                    ));
                }
                check_distribution(&format!("transitions[{s}][{a}]"), row)?;
                transitions.extend_from_slice(row);
            }
        }
        let flatten = |field: &str, table: &[Vec<f64>]| -> Result<Vec<f64>, MdpError> {
            if table.len() != ns {
                return Err(invalid(field, format!("length {} != n_states {ns}", table.len())));
            }
            let mut out = Vec::with_capacity(ns * na);
            for (s, row) in table.iter().enumerate() {
                if row.len() != na {
                    return Err(invalid(
                        format!("{field}[{s}]"),
                        format!("length {} != n_actions {na}", row.len()),
                    ));
                }
                for (a, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(invalid(format!("{field}[{s}][{a}]"), "not finite"));
                    }
                }
                out.extend_from_slice(row);
            }
            Ok(out)
        };
        let reward = flatten("reward", &doc.reward)?;
        let agent_reward = flatten("agent_reward", &doc.agent_reward)?;
        Ok(Self {
            n_states: ns,
            n_actions: na,
            discount: doc.discount,
            initial: doc.initial,
            transitions,
            reward,
            agent_reward,
            group_of: doc.group_of,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, MdpError> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    pub fn to_document(&self) -> MdpDocument {
        let (ns, na) = (self.n_states, self.n_actions);
        MdpDocument {
            n_states: ns,
            n_actions: na,
            discount: self.discount,
            initial: self.initial.clone(),
            transitions: (0..ns)
                .map(|s| (0..na).map(|a| self.transition_row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..ns).map(|s| (0..na).map(|a| self.reward(s, a)).collect()).collect(),
            agent_reward: (0..ns)
                .map(|s| (0..na).map(|a| self.agent_reward(s, a)).collect())
                .collect(),
            group_of: self.group_of.clone(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn group_of(&self, s: usize) -> Group {
        self.group_of[s]
    }

    pub fn groups(&self) -> &[Group] {
        &self.group_of
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn agent_reward(&self, s: usize, a: usize) -> f64 {
        self.agent_reward[s * self.n_actions + a]
    }

    /// Largest absolute decision-maker or agent reward.
    pub fn r_max(&self) -> f64 {
        self.reward
            .iter()
            .chain(self.agent_reward.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Copy of this MDP with a different initial distribution.
    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self, MdpError> {
        if initial.len() != self.n_states {
            return Err(invalid("initial", format!("length {} != n_states {}", initial.len(), self.n_states)));
        }
        check_distribution("initial", &initial)?;
        Ok(Self {
            initial,
            ..self.clone()
        })
    }

    /// Copy of this MDP with replaced transition rows; rows are validated.
    pub fn with_transitions(&self, rows: impl Fn(usize, usize) -> Vec<f64>) -> Result<Self, MdpError> {
        let mut transitions = Vec::with_capacity(self.transitions.len());
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = rows(s, a);
                if row.len() != self.n_states {
                    return Err(invalid(format!("transitions[{s}][{a}]"), "wrong length"));
                }
                check_distribution(&format!("transitions[{s}][{a}]"), &row)?;
                transitions.extend_from_slice(&row);
            }
        }
        Ok(Self {
            transitions,
            ..self.clone()
        })
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self, MdpError> {
        if !discount.is_finite() || !(0.0..=1.0).contains(&discount) {
            return Err(invalid("discount", format!("{discount} outside [0, 1]")));
        }
        Ok(Self {
            discount,
            ..self.clone()
        })
    }

    /// First transition with positive probability that changes the group, if any.
    pub fn separability_violation(&self) -> Option<(usize, usize, usize)> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for (next, &p) in self.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 && self.group_of[next] != self.group_of[s] {
                        return Some((s, a, next));
                    }
                }
            }
        }
        None
    }

    pub fn ensure_separable(&self) -> Result<(), MdpError> {
        match self.separability_violation() {
            None => Ok(()),
            Some((state, action, next)) => Err(MdpError::NotSeparable { state, action, next }),
        }
    }

    /// Agent rewards that depend only on the action, if that is the case.
    pub fn state_independent_agent_reward(&self) -> Option<Vec<f64>> {
        let first: Vec<f64> = (0..self.n_actions).map(|a| self.agent_reward(0, a)).collect();
        let same = (1..self.n_states)
            .all(|s| (0..self.n_actions).all(|a| self.agent_reward(s, a) == first[a]));
        same.then_some(first)
    }

    /// States reachable from `sources` under some action sequence (sources included).
    pub fn reachable_from(&self, sources: impl IntoIterator<Item = usize>) -> Vec<bool> {
        let mut seen = vec![false; self.n_states];
        let mut stack: Vec<usize> = Vec::new();
        for s in sources {
            if !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
        while let Some(s) = stack.pop() {
            for a in 0..self.n_actions {
                for (next, &p) in self.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 && !seen[next] {
                        seen[next] = true;
                        stack.push(next);
                    }
                }
            }
        }
        seen
    }
}

/// A stationary stochastic policy over a finite state space.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != n_states * n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            check_distribution(&format!("policy[{s}]"), &probs[s * n_actions..(s + 1) * n_actions])?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MdpError> {
        let n_actions = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(MdpError::DimensionMismatch("ragged policy rows".into()));
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    /// Same action distribution in every state.
    pub fn state_independent(n_states: usize, action_probs: &[f64]) -> Result<Self, MdpError> {
        Self::new(n_states, action_probs.len(), action_probs.repeat(n_states))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| self.row(s).to_vec()).collect()
    }

    fn check_compatible(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// A time-indexed sequence of tabular policies for finite-horizon problems.
#[derive(Debug, Clone, PartialEq)]
pub struct NonStationaryPolicy {
    steps: Vec<TabularPolicy>,
}

impl NonStationaryPolicy {
    pub fn new(steps: Vec<TabularPolicy>) -> Result<Self, MdpError> {
        let first = steps
            .first()
            .ok_or_else(|| MdpError::DimensionMismatch("empty policy schedule".into()))?;
        if steps
            .iter()
            .any(|p| p.n_states != first.n_states || p.n_actions != first.n_actions)
        {
            return Err(MdpError::DimensionMismatch("inconsistent policy schedule".into()));
        }
        Ok(Self { steps })
    }

    pub fn stationary(policy: TabularPolicy, horizon: usize) -> Self {
        Self {
            steps: vec![policy; horizon.max(1)],
        }
    }

    pub fn steps(&self) -> &[TabularPolicy] {
        &self.steps
    }
}

/// Policies usable by the finite-horizon evaluators.
pub trait PolicySchedule {
    /// Policy applied at step `t`; schedules shorter than the horizon repeat
    /// their last entry.
    fn at(&self, t: usize) -> &TabularPolicy;
}

impl PolicySchedule for TabularPolicy {
    fn at(&self, _t: usize) -> &TabularPolicy {
        self
    }
}

impl PolicySchedule for NonStationaryPolicy {
    fn at(&self, t: usize) -> &TabularPolicy {
        &self.steps[t.min(self.steps.len() - 1)]
    }
}

/// `P^(π)[s][s'] = Σ_a π(s,a) P(s,a,s')`, returned row-major.
pub fn induced_transition(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<Vec<f64>>, MdpError> {
    policy.check_compatible(mdp)?;
    let ns = mdp.n_states;
    Ok((0..ns)
        .map(|s| {
            let mut row = vec![0.0; ns];
            for a in 0..mdp.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (r, &p) in row.iter_mut().zip(mdp.transition_row(s, a)) {
                    *r += pa * p;
                }
            }
            row
        })
        .collect())
}

/// How the group subpopulations are carved out of the initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupSet {
    /// Initial states belonging to the group; `D_z ∝ D · 1[s ∈ S_z]`.
    Subset(Vec<bool>),
    /// An explicit group initial distribution (normalized on use).
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    DemographicParity,
    EqualOpportunity,
    PathSpecific,
}

/// Which state's group an occupancy measure is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    #[default]
    InitialState,
    CurrentState,
}

/// Group definitions plus the tolerated gap between group values.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessSpec {
    /// Indexed by [`Group::index`].
    pub groups: [GroupSet; 2],
    pub tolerance: f64,
    pub criterion: Criterion,
    pub conditioning: Conditioning,
}

impl FairnessSpec {
    /// Groups given by the sensitive attribute of the initial state.
    pub fn demographic_parity(mdp: &TabularMdp, tolerance: f64) -> Self {
        let mask = |z: Group| mdp.group_of.iter().map(|&g| g == z).collect();
        Self {
            groups: [GroupSet::Subset(mask(Group::Maj)), GroupSet::Subset(mask(Group::Min))],
            tolerance,
            criterion: Criterion::DemographicParity,
            conditioning: Conditioning::InitialState,
        }
    }

    /// Groups restricted to the initial states flagged as qualified.
    pub fn equal_opportunity(mdp: &TabularMdp, qualified: &[bool], tolerance: f64) -> Self {
        let mask = |z: Group| {
            mdp.group_of
                .iter()
                .zip(qualified)
                .map(|(&g, &q)| g == z && q)
                .collect()
        };
        Self {
            groups: [GroupSet::Subset(mask(Group::Maj)), GroupSet::Subset(mask(Group::Min))],
            tolerance,
            criterion: Criterion::EqualOpportunity,
            conditioning: Conditioning::InitialState,
        }
    }

    /// Groups defined by explicit initial distributions, e.g. from a causal model.
    pub fn from_distributions(maj: Vec<f64>, min: Vec<f64>, tolerance: f64) -> Self {
        Self {
            groups: [GroupSet::Distribution(maj), GroupSet::Distribution(min)],
            tolerance,
            criterion: Criterion::PathSpecific,
            conditioning: Conditioning::InitialState,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn group(&self, z: Group) -> &GroupSet {
        &self.groups[z.index()]
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance", format!("{} is negative", self.tolerance)));
        }
        for z in Group::ALL {
            let len = match self.group(z) {
                GroupSet::Subset(mask) => mask.len(),
                GroupSet::Distribution(w) => {
                    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(invalid(format!("groups.{}", z.name()), "negative weight"));
                    }
                    w.len()
                }
            };
            if len != mdp.n_states {
                return Err(MdpError::DimensionMismatch(format!(
                    "group {} defined over {len} states, MDP has {}",
                    z.name(),
                    mdp.n_states
                )));
            }
            group_initial(mdp, self, z)?;
        }
        Ok(())
    }
}

/// Normalized initial distribution `D_z` of a group and the mass `p_z` it
/// carries under the MDP's own initial distribution.
pub fn group_initial(mdp: &TabularMdp, spec: &FairnessSpec, z: Group) -> Result<(Vec<f64>, f64), MdpError> {
    match spec.group(z) {
        GroupSet::Subset(mask) => {
            let p: f64 = mdp.initial.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| d).sum();
            if p <= 0.0 {
                return Err(MdpError::EmptyGroup(z));
            }
            let dz = mdp
                .initial
                .iter()
                .zip(mask)
                .map(|(&d, &m)| if m { d / p } else { 0.0 })
                .collect();
            Ok((dz, p))
        }
        GroupSet::Distribution(w) => {
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(MdpError::EmptyGroup(z));
            }
            let dz: Vec<f64> = w.iter().map(|v| v / total).collect();
            let p = mdp
                .initial
                .iter()
                .zip(&dz)
                .filter(|(_, &q)| q > 0.0)
                .map(|(d, _)| d)
                .sum();
            Ok((dz, p))
        }
    }
}

/// States counted as "currently in group z" under current-state conditioning.
fn current_group_mask(mdp: &TabularMdp, spec: &FairnessSpec, z: Group) -> Vec<bool> {
    match spec.group(z) {
        GroupSet::Subset(mask) => mask.clone(),
        GroupSet::Distribution(_) => mdp.group_of.iter().map(|&g| g == z).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Infinite-horizon discounted, using the MDP's discount.
    Discounted,
    /// Undiscounted over `horizon` steps; the MDP's discount is ignored.
    FiniteHorizon { horizon: usize },
}

/// A normalized state-action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    n_actions: usize,
    /// Row-major `(s, a)` table.
    pub lambda: Vec<f64>,
    /// State marginal `D^(π)`.
    pub state_dist: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn n_states(&self) -> usize {
        self.state_dist.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.lambda[s * self.n_actions + a]
    }

    pub fn total(&self) -> f64 {
        self.lambda.iter().sum()
    }

    /// `Σ_{s,a} Λ(s,a) table(s,a)` for a row-major table.
    pub fn dot(&self, table: impl Fn(usize, usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.n_states() {
            for a in 0..self.n_actions {
                acc += self.get(s, a) * table(s, a);
            }
        }
        acc
    }

    fn from_state_dist(state_dist: Vec<f64>, policy: &TabularPolicy) -> Self {
        let na = policy.n_actions;
        let mut lambda = vec![0.0; state_dist.len() * na];
        for (s, &d) in state_dist.iter().enumerate() {
            for a in 0..na {
                lambda[s * na + a] = d * policy.prob(s, a);
            }
        }
        Self {
            n_actions: na,
            lambda,
            state_dist,
        }
    }

    /// Restriction to `mask`, renormalized to a distribution.
    fn conditioned_on(&self, mask: &[bool], z: Group) -> Result<Self, MdpError> {
        let mass: f64 = self.state_dist.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| d).sum();
        if mass <= 0.0 {
            return Err(MdpError::EmptyGroup(z));
        }
        let state_dist: Vec<f64> = self
            .state_dist
            .iter()
            .zip(mask)
            .map(|(&d, &m)| if m { d / mass } else { 0.0 })
            .collect();
        let lambda = self
            .lambda
            .iter()
            .enumerate()
            .map(|(i, &l)| if mask[i / self.n_actions] { l / mass } else { 0.0 })
            .collect();
        Ok(Self {
            n_actions: self.n_actions,
            lambda,
            state_dist,
        })
    }
}

/// Discounted state distribution from an arbitrary start distribution,
/// solving `(I - γ P^(π)ᵀ) d = (1-γ) start` densely.
pub fn discounted_state_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: &[f64],
) -> Result<Vec<f64>, MdpError> {
    let gamma = mdp.discount;
    if gamma >= 1.0 {
        return Err(MdpError::DiscountNotBelowOne(gamma));
    }
    let p_pi = induced_transition(mdp, policy)?;
    let ns = mdp.n_states;
    if start.len() != ns {
        return Err(MdpError::DimensionMismatch("start distribution length".into()));
    }
    let a = DMatrix::from_fn(ns, ns, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - gamma * p_pi[j][i]
    });
    let b = DVector::from_iterator(ns, start.iter().map(|&d| (1.0 - gamma) * d));
    let d = a.lu().solve(&b).ok_or(MdpError::Singular)?;
    Ok(d.iter().copied().collect())
}

/// `D_t` for `t < horizon`, starting from `start`.
pub fn state_distributions<P: PolicySchedule + ?Sized>(
    mdp: &TabularMdp,
    schedule: &P,
    start: &[f64],
    horizon: usize,
) -> Result<Vec<Vec<f64>>, MdpError> {
    let ns = mdp.n_states;
    if start.len() != ns {
        return Err(MdpError::DimensionMismatch("start distribution length".into()));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut current = start.to_vec();
    for t in 0..horizon {
        let policy = schedule.at(t);
        policy.check_compatible(mdp)?;
        let mut next = vec![0.0; ns];
        if t + 1 < horizon {
            for (s, &d) in current.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for a in 0..mdp.n_actions {
                    let w = d * policy.prob(s, a);
                    if w == 0.0 {
                        continue;
                    }
                    for (n, &p) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                        *n += w * p;
                    }
                }
            }
        }
        out.push(std::mem::replace(&mut current, next));
    }
    Ok(out)
}

/// Finite-horizon occupancy `Λ(s,a) = (1/T) Σ_t D_t(s) π_t(s,a)`.
pub fn finite_horizon_occupancy_from<P: PolicySchedule + ?Sized>(
    mdp: &TabularMdp,
    schedule: &P,
    start: &[f64],
    horizon: usize,
) -> Result<OccupancyMeasure, MdpError> {
    if horizon == 0 {
        return Err(invalid("horizon", "must be positive"));
    }
    let dists = state_distributions(mdp, schedule, start, horizon)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let scale = 1.0 / horizon as f64;
    let mut lambda = vec![0.0; ns * na];
    let mut state_dist = vec![0.0; ns];
    for (t, d) in dists.iter().enumerate() {
        let policy = schedule.at(t);
        for s in 0..ns {
            state_dist[s] += scale * d[s];
            for a in 0..na {
                lambda[s * na + a] += scale * d[s] * policy.prob(s, a);
            }
        }
    }
    Ok(OccupancyMeasure {
        n_actions: na,
        lambda,
        state_dist,
    })
}

/// Occupancy measure of `policy` from an arbitrary start distribution.
pub fn occupancy_from(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: &[f64],
    mode: EvalMode,
) -> Result<OccupancyMeasure, MdpError> {
    match mode {
        EvalMode::Discounted => {
            let d = discounted_state_distribution(mdp, policy, start)?;
            Ok(OccupancyMeasure::from_state_dist(d, policy))
        }
        EvalMode::FiniteHorizon { horizon } => finite_horizon_occupancy_from(mdp, policy, start, horizon),
    }
}

/// The time-discounted state-action distribution `Λ^(π)` under the MDP's
/// initial distribution.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<OccupancyMeasure, MdpError> {
    occupancy_from(mdp, policy, &mdp.initial, EvalMode::Discounted)
}

/// Group-conditioned occupancies `[Λ_maj, Λ_min]`.
pub fn group_occupancies<P: PolicySchedule + ?Sized>(
    mdp: &TabularMdp,
    schedule: &P,
    spec: &FairnessSpec,
    mode: EvalMode,
) -> Result<[OccupancyMeasure; 2], MdpError> {
    let occ = |start: &[f64]| -> Result<OccupancyMeasure, MdpError> {
        match mode {
            EvalMode::Discounted => {
                let policy = schedule.at(0);
                let d = discounted_state_distribution(mdp, policy, start)?;
                Ok(OccupancyMeasure::from_state_dist(d, policy))
            }
            EvalMode::FiniteHorizon { horizon } => finite_horizon_occupancy_from(mdp, schedule, start, horizon),
        }
    };
    let build = |z: Group| -> Result<OccupancyMeasure, MdpError> {
        match spec.conditioning {
            Conditioning::InitialState => {
                let (dz, _) = group_initial(mdp, spec, z)?;
                occ(&dz)
            }
            Conditioning::CurrentState => {
                occ(&mdp.initial)?.conditioned_on(&current_group_mask(mdp, spec, z), z)
            }
        }
    };
    Ok([build(Group::Maj)?, build(Group::Min)?])
}

/// Exact reward, group values and fairness gap of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Expected (discounted or finite-horizon) return.
    pub reward: f64,
    /// `⟨R, Λ⟩`: reward per unit of normalized occupancy.
    pub normalized_reward: f64,
    /// `E_{Λ_z}[ρ]`, indexed by [`Group::index`].
    pub group_values: [f64; 2],
    pub gap: f64,
    /// Whether `gap <= spec.tolerance`.
    pub within_tolerance: bool,
}

fn return_scale(mdp: &TabularMdp, mode: EvalMode) -> f64 {
    match mode {
        EvalMode::Discounted => 1.0 / (1.0 - mdp.discount),
        EvalMode::FiniteHorizon { horizon } => horizon as f64,
    }
}

pub fn evaluate(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    spec: &FairnessSpec,
    mode: EvalMode,
) -> Result<Evaluation, MdpError> {
    evaluate_schedule(mdp, policy, spec, mode)
}

/// [`evaluate`] for possibly non-stationary policies. In discounted mode only
/// the first policy of the schedule is used.
pub fn evaluate_schedule<P: PolicySchedule + ?Sized>(
    mdp: &TabularMdp,
    schedule: &P,
    spec: &FairnessSpec,
    mode: EvalMode,
) -> Result<Evaluation, MdpError> {
    spec.validate(mdp)?;
    let overall = match mode {
        EvalMode::Discounted => occupancy_from(mdp, schedule.at(0), &mdp.initial, mode)?,
        EvalMode::FiniteHorizon { horizon } => finite_horizon_occupancy_from(mdp, schedule, &mdp.initial, horizon)?,
    };
    let normalized_reward = overall.dot(|s, a| mdp.reward(s, a));
    let groups = group_occupancies(mdp, schedule, spec, mode)?;
    let group_values = [
        groups[0].dot(|s, a| mdp.agent_reward(s, a)),
        groups[1].dot(|s, a| mdp.agent_reward(s, a)),
    ];
    let gap = (group_values[0] - group_values[1]).abs();
    Ok(Evaluation {
        reward: normalized_reward * return_scale(mdp, mode),
        normalized_reward,
        group_values,
        gap,
        within_tolerance: gap <= spec.tolerance,
    })
}

/// Small MDPs with known fairness behaviour.
pub mod catalog {
    use super::*;

    /// Five-state MDP where exact parity forces a randomized policy.
    ///
    /// States: 0 = (maj, 0), 1 = (maj, 1), 2 = (min, 0), 3 = (min, 1),
    /// 4 = (min, 2). Only state 2 has a meaningful choice: action 1 leads to
    /// state 4 (agent reward 2), action 0 to state 3 (agent reward 0). The
    /// majority collects agent reward 1 from state 1 onwards. With γ = 1/2,
    /// the minority value equals `π(2, 1)` and the majority value is 1/2.
    /// Decision-maker rewards equal the agent rewards.
    pub fn randomized_parity_mdp() -> TabularMdp {
        build_parity_mdp(2.0)
    }

    /// Same dynamics as [`randomized_parity_mdp`] with zero agent reward in
    /// state 4, so no policy reaches parity.
    pub fn infeasible_parity_mdp() -> TabularMdp {
        build_parity_mdp(0.0)
    }

    fn build_parity_mdp(top_agent_reward: f64) -> TabularMdp {
        let e = |i: usize| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            v
        };
        let transitions = vec![
            vec![e(1), e(1)],
            vec![e(1), e(1)],
            vec![e(3), e(4)],
            vec![e(3), e(3)],
            vec![e(4), e(4)],
        ];
        let rho = [0.0, 1.0, 0.0, 0.0, top_agent_reward];
        let table: Vec<Vec<f64>> = rho.iter().map(|&r| vec![r, r]).collect();
        TabularMdp::new(
            vec![0.5, 0.0, 0.5, 0.0, 0.0],
            transitions,
            table.clone(),
            table,
            0.5,
            vec![Group::Maj, Group::Maj, Group::Min, Group::Min, Group::Min],
        )
        .expect("catalog MDP is valid")
    }
}
