//! Loan applicants as a belief MDP.
//!
//! Each applicant has a hidden repayment probability `p` and the bank keeps a
//! `Beta(α, β)` belief about it. Offering a loan reveals a repayment draw and
//! updates the belief; denying it shifts `β` by the penalty `τ`. The bank is
//! paid the mean-minus-deviation value of a loan under its current belief,
//! and the applicant's agent reward is 1 for every offer.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Cohort, EnvError, Environment, Horizon, Transition};
use crate::mdp::Group;
use crate::seed::SimRng;

pub const DENY: usize = 0;
pub const OFFER: usize = 1;

/// Rejection-sampling attempts before a qualified cohort is declared empty.
const MAX_QUALIFY_TRIES: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum LoanError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("malformed loan parameters: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanParams {
    #[serde(rename = "I")]
    pub interest: f64,
    #[serde(rename = "p_Z")]
    pub p_min: f64,
    pub alpha_maj: f64,
    pub beta_maj: f64,
    pub alpha_min: f64,
    pub beta_min: f64,
    /// Risk weight on the standard deviation of the loan's payoff.
    pub lambda: f64,
    /// Shift of `β` after a denial.
    pub tau: f64,
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T_maj")]
    pub forced_maj: usize,
    #[serde(rename = "T_min")]
    pub forced_min: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Repayment probability from which an applicant counts as qualified.
    #[serde(default = "default_p0")]
    pub p0: f64,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_p0() -> f64 {
    0.7
}

impl Default for LoanParams {
    fn default() -> Self {
        Self {
            interest: 0.17318629,
            p_min: 0.29294318,
            alpha_maj: 0.65338681,
            beta_maj: 0.20783559,
            alpha_min: 0.48824268,
            beta_min: 0.48346869,
            lambda: 0.01,
            tau: 0.1,
            epsilon: 0.1,
            horizon: 50,
            forced_maj: 10,
            forced_min: 7,
            gamma: 1.0,
            p0: 0.7,
        }
    }
}

impl LoanParams {
    pub fn from_json_str(text: &str) -> Result<Self, LoanError> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), LoanError> {
        let bad = |field: &'static str, reason: String| Err(LoanError::Invalid { field, reason });
        for (field, v) in [
            ("alpha_maj", self.alpha_maj),
            ("beta_maj", self.beta_maj),
            ("alpha_min", self.alpha_min),
            ("beta_min", self.beta_min),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("{v} is not a positive Beta parameter"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_min) {
            return bad("p_Z", format!("{} outside [0, 1]", self.p_min));
        }
        if !(self.tau >= 0.0) {
            return bad("tau", format!("{} is negative", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("{} is negative", self.lambda));
        }
        if !self.interest.is_finite() {
            return bad("I", "not finite".into());
        }
        if self.horizon == 0 {
            return bad("T", "must be positive".into());
        }
        if self.forced_maj >= self.horizon || self.forced_min >= self.horizon {
            return bad("T_maj", "forced exploration must be shorter than T".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("{} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return bad("p0", format!("{} outside [0, 1]", self.p0));
        }
        Ok(())
    }

    pub fn prior(&self, z: Group) -> (f64, f64) {
        match z {
            Group::Maj => (self.alpha_maj, self.beta_maj),
            Group::Min => (self.alpha_min, self.beta_min),
        }
    }

    pub fn forced_steps(&self, z: Group) -> usize {
        match z {
            Group::Maj => self.forced_maj,
            Group::Min => self.forced_min,
        }
    }

    /// Mean-minus-deviation value of one loan with repayment probability `p_hat`.
    pub fn bank_reward(&self, p_hat: f64) -> f64 {
        let gain = self.interest + 1.0;
        p_hat * gain - 1.0 - self.lambda * gain * (p_hat * (1.0 - p_hat)).max(0.0).sqrt()
    }

    /// Bound on the absolute per-step bank reward.
    pub fn r_max(&self) -> f64 {
        1f64.max(self.interest.abs()) + self.lambda * (self.interest + 1.0).abs() / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoanState {
    pub group: Group,
    pub alpha: f64,
    pub beta: f64,
    /// Hidden repayment probability; policies never see it.
    pub p: f64,
    /// Decision steps taken so far.
    pub t: usize,
}

impl LoanState {
    /// Posterior mean `α / (α + β)`.
    pub fn p_hat(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

/// Which subpopulation a group cohort refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LoanCriterion {
    #[default]
    DemographicParity,
    /// Group cohorts contain qualified applicants only.
    EqualOpportunity,
}

#[derive(Debug, Clone)]
pub struct LoanEnv {
    params: LoanParams,
    criterion: LoanCriterion,
    priors: [Beta<f64>; 2],
}

impl LoanEnv {
    pub fn new(params: LoanParams, criterion: LoanCriterion) -> Result<Self, LoanError> {
        params.validate()?;
        let beta = |z: Group| {
            let (a, b) = params.prior(z);
            Beta::new(a, b).expect("validated Beta parameters")
        };
        Ok(Self {
            priors: [beta(Group::Maj), beta(Group::Min)],
            params,
            criterion,
        })
    }

    pub fn params(&self) -> &LoanParams {
        &self.params
    }

    pub fn criterion(&self) -> LoanCriterion {
        self.criterion
    }

    pub fn qualified(&self, state: &LoanState) -> bool {
        state.p >= self.params.p0
    }

    /// Fresh applicant of group `z` before forced exploration.
    pub fn draw_applicant(&self, z: Group, rng: &mut SimRng) -> LoanState {
        let (alpha, beta) = self.params.prior(z);
        LoanState {
            group: z,
            alpha,
            beta,
            p: self.priors[z.index()].sample(rng),
            t: 0,
        }
    }

    /// Forced offers that shape the initial belief; no reward, no time.
    pub fn force_exploration(&self, state: &mut LoanState, rng: &mut SimRng) {
        for _ in 0..self.params.forced_steps(state.group) {
            if rng.random::<f64>() < state.p {
                state.alpha += 1.0;
            } else {
                state.beta += 1.0;
            }
        }
    }

    fn draw_group(&self, rng: &mut SimRng) -> Group {
        if rng.random::<f64>() < self.params.p_min {
            Group::Min
        } else {
            Group::Maj
        }
    }
}

impl Environment for LoanEnv {
    type State = LoanState;

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&self, cohort: Cohort, rng: &mut SimRng) -> Result<LoanState, EnvError> {
        let mut state = match cohort {
            Cohort::All => {
                let z = self.draw_group(rng);
                self.draw_applicant(z, rng)
            }
            Cohort::Group(z) => match self.criterion {
                LoanCriterion::DemographicParity => self.draw_applicant(z, rng),
                LoanCriterion::EqualOpportunity => {
                    let mut tries = 0;
                    loop {
                        let s = self.draw_applicant(z, rng);
                        if self.qualified(&s) {
                            break s;
                        }
                        tries += 1;
                        if tries >= MAX_QUALIFY_TRIES {
                            return Err(EnvError::EmptyGroup(z));
                        }
                    }
                }
            },
        };
        self.force_exploration(&mut state, rng);
        Ok(state)
    }

    fn step(&self, state: &LoanState, action: usize, rng: &mut SimRng) -> Result<Transition<LoanState>, EnvError> {
        if state.t >= self.params.horizon {
            return Err(EnvError::HorizonExceeded {
                t: state.t,
                horizon: self.params.horizon,
            });
        }
        let mut next = state.clone();
        next.t += 1;
        match action {
            OFFER => {
                let reward = self.params.bank_reward(state.p_hat());
                if rng.random::<f64>() < state.p {
                    next.alpha += 1.0;
                } else {
                    next.beta += 1.0;
                }
                Ok(Transition {
                    next,
                    reward,
                    agent_reward: 1.0,
                })
            }
            DENY => {
                next.beta += self.params.tau;
                Ok(Transition {
                    next,
                    reward: 0.0,
                    agent_reward: 0.0,
                })
            }
            _ => Err(EnvError::InvalidAction { action, n_actions: 2 }),
        }
    }

    fn group(&self, state: &LoanState) -> Group {
        state.group
    }

    fn agent_reward(&self, _state: &LoanState, action: usize) -> f64 {
        if action == OFFER {
            1.0
        } else {
            0.0
        }
    }

    fn n_features(&self, race_blind: bool) -> usize {
        if race_blind {
            3
        } else {
            4
        }
    }

    fn features_into(&self, state: &LoanState, race_blind: bool, out: &mut Vec<f64>) {
        out.extend_from_slice(&[1.0, state.p_hat(), (state.alpha + state.beta).ln()]);
        if !race_blind {
            out.push(if state.group == Group::Min { 1.0 } else { 0.0 });
        }
    }

    fn agent_rewards_state_independent(&self) -> bool {
        true
    }

    fn horizon(&self) -> Horizon {
        Horizon::new(self.params.horizon, self.params.gamma)
    }
}
