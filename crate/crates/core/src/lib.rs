//! Reward-optimal decision policies for Markov decision processes under
//! group-fairness constraints.
//!
//! The crate is organized around a handful of subsystems:
//!
//! - [`mdp`]: finite MDPs, tabular policies, occupancy measures, exact
//!   evaluation of rewards and group-conditioned agent rewards.
//! - [`env`]: the generic environment interface, rollouts and Monte Carlo
//!   estimators used by the model-free trainers.
//! - [`lp`]: a dense two-phase simplex solver.
//! - [`fair_lp`]: the exact occupancy-measure LP for separable MDPs and the
//!   conservative (state-wise) variant.
//! - [`cce`]: constrained cross-entropy search over parameterized policies,
//!   with optimistic, conservative and race-blind trainers.
//! - [`loan`]: the loan-applicant belief MDP.
//! - [`experiment`]: the loan-experiment grid comparing the trainers.
//! - [`rl`]: explore-then-commit under unknown transitions, stationary
//!   distributions, mixing times and the unknown-initial-distribution workflow.
//! - [`causal`]: structural causal models used to build path-specific group
//!   initial distributions.

pub mod causal;
pub mod cce;
pub mod env;
pub mod experiment;
pub mod fair_lp;
pub mod lp;
pub mod loan;
pub mod mdp;
pub mod policy;
pub mod rl;
pub mod seed;

pub use env::{Cohort, Environment, Horizon, Rollout, TabularEnv};
pub use mdp::{
    Conditioning, Criterion, EvalMode, Evaluation, FairnessSpec, Group, GroupSet, MdpError,
    OccupancyMeasure, TabularMdp, TabularPolicy,
};
pub use policy::{FeatureView, LinearPolicy, Policy};
pub use seed::{SeedTree, SimRng};
