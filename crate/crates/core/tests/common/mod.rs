#![allow(dead_code)]

use fairmdp::mdp::{Group, TabularMdp, TabularPolicy};
use fairmdp::SimRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn simplex(rng: &mut SimRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Distribution over `n` entries with nonzero mass only where `mask` holds.
pub fn masked_simplex(rng: &mut SimRng, mask: &[bool]) -> Vec<f64> {
    let k = mask.iter().filter(|&&m| m).count();
    let inner = simplex(rng, k);
    let mut it = inner.into_iter();
    mask.iter().map(|&m| if m { it.next().unwrap() } else { 0.0 }).collect()
}

/// Random separable MDP: the first `n_maj` states are majority states and
/// transitions never leave a state's group.
pub fn random_separable(rng: &mut SimRng, n_states: usize, n_actions: usize, discount: f64) -> TabularMdp {
    assert!(n_states >= 2);
    let n_maj = rng.random_range(1..n_states);
    let groups: Vec<Group> = (0..n_states).map(|s| if s < n_maj { Group::Maj } else { Group::Min }).collect();
    let transitions = (0..n_states)
        .map(|s| {
            let mask: Vec<bool> = groups.iter().map(|&g| g == groups[s]).collect();
            (0..n_actions).map(|_| masked_simplex(rng, &mask)).collect()
        })
        .collect();
    let table = |rng: &mut SimRng| -> Vec<Vec<f64>> {
        (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
            .collect()
    };
    let reward = table(rng);
    let agent = table(rng);
    TabularMdp::new(simplex(rng, n_states), transitions, reward, agent, discount, groups).unwrap()
}

/// Random MDP without structural restrictions.
pub fn random_mdp(rng: &mut SimRng, n_states: usize, n_actions: usize, discount: f64) -> TabularMdp {
    let groups: Vec<Group> = (0..n_states).map(|s| if s % 2 == 0 { Group::Maj } else { Group::Min }).collect();
    let transitions = (0..n_states)
        .map(|_| (0..n_actions).map(|_| simplex(rng, n_states)).collect())
        .collect();
    let table = |rng: &mut SimRng| -> Vec<Vec<f64>> {
        (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let reward = table(rng);
    let agent = table(rng);
    TabularMdp::new(simplex(rng, n_states), transitions, reward, agent, discount, groups).unwrap()
}

pub fn random_policy(rng: &mut SimRng, n_states: usize, n_actions: usize) -> TabularPolicy {
    let rows: Vec<Vec<f64>> = (0..n_states).map(|_| simplex(rng, n_actions)).collect();
    TabularPolicy::from_rows(&rows).unwrap()
}

/// Every policy whose rows lie on a grid of the action simplex with the
/// given resolution, visited through `f`.
pub fn for_each_grid_policy(n_states: usize, n_actions: usize, resolution: usize, mut f: impl FnMut(&TabularPolicy)) {
    let rows = grid_rows(n_actions, resolution);
    let mut idx = vec![0usize; n_states];
    loop {
        let chosen: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        f(&TabularPolicy::from_rows(&chosen).unwrap());
        let mut k = 0;
        loop {
            if k == n_states {
                return;
            }
            idx[k] += 1;
            if idx[k] < rows.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Every point of the action simplex whose coordinates are multiples of
/// `1/resolution`.
pub fn grid_rows(n_actions: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(left - k, remaining - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(resolution, n_actions, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / resolution as f64).collect())
        .collect()
}

/// `Σ_t γ^t D_t` truncated after `steps` terms, times `1-γ`.
pub fn series_occupancy(mdp: &TabularMdp, policy: &TabularPolicy, start: &[f64], steps: usize) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.discount();
    let mut d = start.to_vec();
    let mut lambda = vec![0.0; ns * na];
    let mut w = 1.0 - g;
    for _ in 0..steps {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let mass = d[s] * policy.prob(s, a);
                lambda[s * na + a] += w * mass;
                for (t, n) in next.iter_mut().enumerate() {
                    *n += mass * mdp.transition(s, a, t);
                }
            }
        }
        d = next;
        w *= g;
    }
    lambda
}

/// Four-state separable episodic MDP where offering everywhere favours the
/// majority: states 0, 1 are majority states, 2, 3 minority states.
pub fn four_state_mdp() -> TabularMdp {
    let maj = |p: f64| vec![p, 1.0 - p, 0.0, 0.0];
    let min = |p: f64| vec![0.0, 0.0, p, 1.0 - p];
    TabularMdp::new(
        vec![0.35, 0.15, 0.3, 0.2],
        vec![
            vec![maj(0.8), maj(0.3)],
            vec![maj(0.6), maj(0.2)],
            vec![min(0.7), min(0.4)],
            vec![min(0.5), min(0.3)],
        ],
        vec![vec![0.0, 1.0], vec![0.5, 1.0], vec![0.0, 0.8], vec![0.3, 0.9]],
        vec![vec![0.0, 1.0], vec![0.2, 1.0], vec![0.0, 0.6], vec![0.0, 0.6]],
        1.0,
        vec![Group::Maj, Group::Maj, Group::Min, Group::Min],
    )
    .unwrap()
}
