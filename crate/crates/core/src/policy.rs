//! Stochastic policies usable with any [`Environment`].

use rand::Rng;

use crate::env::{Environment, TabularEnv};
use crate::mdp::TabularPolicy;
use crate::seed::SimRng;

/// Which part of the environment state a parameterized policy observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureView {
    /// Every feature the environment exposes, including the group indicator.
    #[default]
    Full,
    /// Environment features without the sensitive attribute.
    RaceBlind,
    /// A single constant feature, i.e. a state-independent policy.
    Constant,
}

pub trait Policy<E: Environment + ?Sized>: Sync {
    /// Writes `π(state, ·)` into `out`, which has length `env.n_actions()`.
    fn action_probs_into(&self, env: &E, state: &E::State, out: &mut [f64]);

    fn action_probs(&self, env: &E, state: &E::State) -> Vec<f64> {
        let mut out = vec![0.0; env.n_actions()];
        self.action_probs_into(env, state, &mut out);
        out
    }
}

/// Index drawn from a probability vector by inversion.
pub fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the running sum; fall back to the last action
    // with positive probability.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl Policy<TabularEnv> for TabularPolicy {
    fn action_probs_into(&self, _env: &TabularEnv, state: &usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(*state));
    }
}

/// Softmax over per-action linear scores. Action 0 has score zero, so with
/// two actions this is logistic regression on the features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    n_actions: usize,
    n_features: usize,
    view: FeatureView,
    /// `(n_actions - 1) × n_features`, row-major.
    weights: Vec<f64>,
    /// Multiplies every score; lets unit-scale parameters express sharp
    /// decision boundaries.
    scale: f64,
}

impl LinearPolicy {
    pub fn n_params(n_actions: usize, n_features: usize) -> usize {
        (n_actions - 1) * n_features
    }

    /// Number of parameters needed for `env` under `view`.
    pub fn n_params_for<E: Environment + ?Sized>(env: &E, view: FeatureView) -> usize {
        Self::n_params(env.n_actions(), feature_len(env, view))
    }

    pub fn new<E: Environment + ?Sized>(env: &E, view: FeatureView, weights: Vec<f64>) -> Self {
        let n_features = feature_len(env, view);
        assert_eq!(
            weights.len(),
            Self::n_params(env.n_actions(), n_features),
            "parameter vector has the wrong length"
        );
        Self {
            n_actions: env.n_actions(),
            n_features,
            view,
            weights,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn view(&self) -> FeatureView {
        self.view
    }

    /// Action probabilities for an explicit feature vector.
    pub fn probs_from_features(&self, phi: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        for k in 1..self.n_actions {
            let w = &self.weights[(k - 1) * self.n_features..k * self.n_features];
            out[k] = self.scale * w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    /// Tabulates the policy on a tabular environment.
    pub fn to_tabular(&self, env: &TabularEnv) -> TabularPolicy {
        let ns = env.mdp().n_states();
        let mut probs = vec![0.0; ns * self.n_actions];
        for s in 0..ns {
            self.action_probs_into(env, &s, &mut probs[s * self.n_actions..(s + 1) * self.n_actions]);
        }
        TabularPolicy::new(ns, self.n_actions, probs).expect("softmax rows are distributions")
    }
}

fn feature_len<E: Environment + ?Sized>(env: &E, view: FeatureView) -> usize {
    match view {
        FeatureView::Full => env.n_features(false),
        FeatureView::RaceBlind => env.n_features(true),
        FeatureView::Constant => 1,
    }
}

thread_local! {
    static FEATURES: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

impl<E: Environment + ?Sized> Policy<E> for LinearPolicy {
    fn action_probs_into(&self, env: &E, state: &E::State, out: &mut [f64]) {
        match self.view {
            FeatureView::Constant => self.probs_from_features(&[1.0], out),
            view => FEATURES.with(|buf| {
                let mut phi = buf.borrow_mut();
                phi.clear();
                env.features_into(state, view == FeatureView::RaceBlind, &mut phi);
                self.probs_from_features(&phi, out);
            }),
        }
    }
}
