//! Generic environments, rollouts and Monte Carlo estimates of rewards and
//! group-conditioned agent rewards.

use thiserror::Error;

use crate::mdp::{group_initial, FairnessSpec, Group, MdpError, TabularMdp};
use crate::policy::{sample_index, Policy};
use crate::seed::{SeedTree, SimRng};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step {t} is beyond the horizon {horizon}")]
    HorizonExceeded { t: usize, horizon: usize },
    #[error("action {action} out of range for {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("no rollouts start in group {}", .0.name())]
    EmptyGroup(Group),
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Population an episode's initial state is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cohort {
    /// The full initial distribution.
    All,
    /// The group's subpopulation as defined by the environment's fairness
    /// criterion (for equal opportunity, its qualified members).
    Group(Group),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub next: S,
    pub reward: f64,
    pub agent_reward: f64,
}

pub trait Environment: Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn n_actions(&self) -> usize;

    fn reset(&self, cohort: Cohort, rng: &mut SimRng) -> Result<Self::State, EnvError>;

    fn step(&self, state: &Self::State, action: usize, rng: &mut SimRng)
        -> Result<Transition<Self::State>, EnvError>;

    fn group(&self, state: &Self::State) -> Group;

    /// Expected one-step agent reward `ρ(s, a)`.
    fn agent_reward(&self, state: &Self::State, action: usize) -> f64;

    fn n_features(&self, race_blind: bool) -> usize;

    /// Appends the policy-visible features of `state` to `out`.
    fn features_into(&self, state: &Self::State, race_blind: bool, out: &mut Vec<f64>);

    /// Whether `ρ(s, a)` depends on the action only.
    fn agent_rewards_state_independent(&self) -> bool;

    /// Episode length and discount the environment is meant to be run with.
    fn horizon(&self) -> Horizon;
}

/// Rollout length and discount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub steps: usize,
    pub discount: f64,
}

impl Horizon {
    pub fn new(steps: usize, discount: f64) -> Self {
        Self { steps, discount }
    }

    pub fn undiscounted(steps: usize) -> Self {
        Self { steps, discount: 1.0 }
    }

    /// Factor turning a discounted agent-reward sum into a value comparable
    /// with occupancy-based group values: `1-γ`, or `1/T` without discounting.
    pub fn agent_scale(&self) -> f64 {
        if self.discount < 1.0 {
            1.0 - self.discount
        } else {
            1.0 / self.steps as f64
        }
    }
}

/// A finite MDP exposed through the [`Environment`] interface. States are
/// indices; features are one-hot state indicators (which already identify
/// the group, so the race-blind view is the same).
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    spec: FairnessSpec,
    group_initial: [Vec<f64>; 2],
    horizon: Horizon,
}

fn default_steps(discount: f64) -> usize {
    if discount <= 0.0 {
        1
    } else if discount < 1.0 {
        ((1e-8f64).ln() / discount.ln()).ceil().max(1.0) as usize
    } else {
        1
    }
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, spec: FairnessSpec) -> Result<Self, EnvError> {
        spec.validate(&mdp)?;
        let maj = group_initial(&mdp, &spec, Group::Maj)?.0;
        let min = group_initial(&mdp, &spec, Group::Min)?.0;
        let horizon = Horizon::new(default_steps(mdp.discount()), mdp.discount());
        Ok(Self {
            mdp,
            spec,
            group_initial: [maj, min],
            horizon,
        })
    }

    pub fn with_horizon(mut self, horizon: Horizon) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn spec(&self) -> &FairnessSpec {
        &self.spec
    }
}

impl Environment for TabularEnv {
    type State = usize;

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&self, cohort: Cohort, rng: &mut SimRng) -> Result<usize, EnvError> {
        let dist = match cohort {
            Cohort::All => self.mdp.initial(),
            Cohort::Group(z) => &self.group_initial[z.index()],
        };
        Ok(sample_index(dist, rng))
    }

    fn step(&self, state: &usize, action: usize, rng: &mut SimRng) -> Result<Transition<usize>, EnvError> {
        if action >= self.mdp.n_actions() {
            return Err(EnvError::InvalidAction {
                action,
                n_actions: self.mdp.n_actions(),
            });
        }
        let next = sample_index(self.mdp.transition_row(*state, action), rng);
        Ok(Transition {
            next,
            reward: self.mdp.reward(*state, action),
            agent_reward: self.mdp.agent_reward(*state, action),
        })
    }

    fn group(&self, state: &usize) -> Group {
        self.mdp.group_of(*state)
    }

    fn agent_reward(&self, state: &usize, action: usize) -> f64 {
        self.mdp.agent_reward(*state, action)
    }

    fn n_features(&self, _race_blind: bool) -> usize {
        self.mdp.n_states()
    }

    fn features_into(&self, state: &usize, _race_blind: bool, out: &mut Vec<f64>) {
        let start = out.len();
        out.resize(start + self.mdp.n_states(), 0.0);
        out[start + state] = 1.0;
    }

    fn agent_rewards_state_independent(&self) -> bool {
        self.mdp.state_independent_agent_reward().is_some()
    }

    fn horizon(&self) -> Horizon {
        self.horizon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub agent_reward: f64,
    /// `Σ_a π(s, a) ρ(s, a)` at this state.
    pub expected_agent_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<S> {
    pub steps: Vec<Step<S>>,
    pub initial_group: Group,
}

/// Discounted sums accumulated along one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Returns {
    pub reward: f64,
    pub agent_reward: f64,
    pub expected_agent_reward: f64,
    pub initial_group: Group,
}

impl<S> Rollout<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn returns(&self, discount: f64) -> Returns {
        let mut out = Returns {
            reward: 0.0,
            agent_reward: 0.0,
            expected_agent_reward: 0.0,
            initial_group: self.initial_group,
        };
        let mut w = 1.0;
        for step in &self.steps {
            out.reward += w * step.reward;
            out.agent_reward += w * step.agent_reward;
            out.expected_agent_reward += w * step.expected_agent_reward;
            w *= discount;
        }
        out
    }
}

/// One step's data as seen by a rollout consumer.
struct Visit<'a, S> {
    state: &'a S,
    action: usize,
    reward: f64,
    agent_reward: f64,
    expected_agent_reward: f64,
}

fn run_episode<E, P>(
    env: &E,
    policy: &P,
    cohort: Cohort,
    horizon: Horizon,
    rng: &mut SimRng,
    mut visit: impl FnMut(Visit<'_, E::State>),
) -> Result<Group, EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    if horizon.steps == 0 {
        return Err(EnvError::EmptyHorizon);
    }
    let mut state = env.reset(cohort, rng)?;
    let initial_group = env.group(&state);
    let mut probs = vec![0.0; env.n_actions()];
    for _ in 0..horizon.steps {
        policy.action_probs_into(env, &state, &mut probs);
        let expected_agent_reward = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(a, &p)| p * env.agent_reward(&state, a))
            .sum();
        let action = sample_index(&probs, rng);
        let tr = env.step(&state, action, rng)?;
        visit(Visit {
            state: &state,
            action,
            reward: tr.reward,
            agent_reward: tr.agent_reward,
            expected_agent_reward,
        });
        state = tr.next;
    }
    Ok(initial_group)
}

/// Samples one episode of `horizon.steps` steps; deterministic given `rng`.
pub fn sample_rollout<E, P>(
    env: &E,
    policy: &P,
    cohort: Cohort,
    horizon: Horizon,
    rng: &mut SimRng,
) -> Result<Rollout<E::State>, EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    let mut steps = Vec::with_capacity(horizon.steps);
    let initial_group = run_episode(env, policy, cohort, horizon, rng, |v| {
        steps.push(Step {
            state: v.state.clone(),
            action: v.action,
            reward: v.reward,
            agent_reward: v.agent_reward,
            expected_agent_reward: v.expected_agent_reward,
        })
    })?;
    Ok(Rollout { steps, initial_group })
}

/// Like [`sample_rollout`] but keeps only the discounted sums.
pub fn simulate_returns<E, P>(
    env: &E,
    policy: &P,
    cohort: Cohort,
    horizon: Horizon,
    rng: &mut SimRng,
) -> Result<Returns, EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    let mut reward = 0.0;
    let mut agent = 0.0;
    let mut expected = 0.0;
    let mut w = 1.0;
    let initial_group = run_episode(env, policy, cohort, horizon, rng, |v| {
        reward += w * v.reward;
        agent += w * v.agent_reward;
        expected += w * v.expected_agent_reward;
        w *= horizon.discount;
    })?;
    Ok(Returns {
        reward,
        agent_reward: agent,
        expected_agent_reward: expected,
        initial_group,
    })
}

/// How per-rollout agent rewards are turned into group-value samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgentEstimator {
    /// `Σ_t γ^t Σ_a π(s_t, a) ρ(s_t, a)`: the realized action is integrated
    /// out, which removes its sampling noise.
    #[default]
    Expected,
    /// `Σ_t γ^t ρ(s_t, a_t)`.
    Realized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    /// Mean discounted return `R̂`.
    pub reward: f64,
    pub reward_se: f64,
    /// `ρ̂_z`, indexed by [`Group::index`].
    pub group_values: [f64; 2],
    pub group_se: [f64; 2],
    /// `ε̂ = |ρ̂_maj - ρ̂_min|`.
    pub gap: f64,
}

fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    let se = if n > 1 { (m2 / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 };
    (mean, se, n)
}

/// Estimates from three independent batches: one for the reward and one per
/// group. Only rollouts whose initial group matches are used for each group.
pub fn estimate_from_returns(
    reward_batch: &[Returns],
    group_batches: [&[Returns]; 2],
    horizon: Horizon,
    estimator: AgentEstimator,
) -> Result<Estimate, EnvError> {
    let (reward, reward_se, _) = mean_se(reward_batch.iter().map(|r| r.reward));
    let scale = horizon.agent_scale();
    let mut group_values = [0.0; 2];
    let mut group_se = [0.0; 2];
    for z in Group::ALL {
        let (mean, se, n) = mean_se(
            group_batches[z.index()]
                .iter()
                .filter(|r| r.initial_group == z)
                .map(|r| match estimator {
                    AgentEstimator::Expected => r.expected_agent_reward,
                    AgentEstimator::Realized => r.agent_reward,
                }),
        );
        if n == 0 {
            return Err(EnvError::EmptyGroup(z));
        }
        group_values[z.index()] = scale * mean;
        group_se[z.index()] = scale * se;
    }
    Ok(Estimate {
        reward,
        reward_se,
        group_values,
        group_se,
        gap: (group_values[0] - group_values[1]).abs(),
    })
}

pub fn estimate_from_rollouts<S>(
    reward_batch: &[Rollout<S>],
    group_batches: [&[Rollout<S>]; 2],
    horizon: Horizon,
    estimator: AgentEstimator,
) -> Result<Estimate, EnvError> {
    let sums = |batch: &[Rollout<S>]| -> Vec<Returns> { batch.iter().map(|r| r.returns(horizon.discount)).collect() };
    let maj = sums(group_batches[0]);
    let min = sums(group_batches[1]);
    estimate_from_returns(&sums(reward_batch), [&maj, &min], horizon, estimator)
}

/// Draws the three batches of `m` episodes each and estimates.
///
/// Batch `k` (reward, maj, min) uses the generator of `seeds.child(k)`.
pub fn estimate_policy<E, P>(
    env: &E,
    policy: &P,
    horizon: Horizon,
    m: usize,
    seeds: SeedTree,
    estimator: AgentEstimator,
) -> Result<Estimate, EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    let batch = |k: u64, cohort: Cohort| -> Result<Vec<Returns>, EnvError> {
        let mut rng = seeds.child(k).rng();
        (0..m).map(|_| simulate_returns(env, policy, cohort, horizon, &mut rng)).collect()
    };
    let reward = batch(0, Cohort::All)?;
    let maj = batch(1, Cohort::Group(Group::Maj))?;
    let min = batch(2, Cohort::Group(Group::Min))?;
    estimate_from_returns(&reward, [&maj, &min], horizon, estimator)
}

/// Mean one-step expected agent reward over `m` initial states of each
/// group, ignoring dynamics.
pub fn one_step_group_values<E, P>(env: &E, policy: &P, m: usize, rng: &mut SimRng) -> Result<[f64; 2], EnvError>
where
    E: Environment + ?Sized,
    P: Policy<E> + ?Sized,
{
    let mut probs = vec![0.0; env.n_actions()];
    let mut out = [0.0; 2];
    for z in Group::ALL {
        let mut total = 0.0;
        for _ in 0..m {
            let s = env.reset(Cohort::Group(z), rng)?;
            policy.action_probs_into(env, &s, &mut probs);
            total += probs
                .iter()
                .enumerate()
                .map(|(a, &p)| p * env.agent_reward(&s, a))
                .sum::<f64>();
        }
        out[z.index()] = total / m.max(1) as f64;
    }
    Ok(out)
}
