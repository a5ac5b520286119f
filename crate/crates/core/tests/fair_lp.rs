mod common;

use common::*;
use fairmdp::fair_lp::*;
use fairmdp::mdp::catalog::{infeasible_parity_mdp, randomized_parity_mdp};
use fairmdp::mdp::*;
use rand::Rng;

/// Optimal discounted return by value iteration.
fn value_iteration(mdp: &TabularMdp) -> f64 {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; ns];
    for _ in 0..5000 {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| mdp.reward(s, a) + g * (0..ns).map(|t| mdp.transition(s, a, t) * v[t]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-14 {
            break;
        }
    }
    mdp.initial().iter().zip(&v).map(|(d, v)| d * v).sum()
}

fn with_tables(mdp: &TabularMdp, reward: Option<Vec<Vec<f64>>>, agent: Option<Vec<Vec<f64>>>) -> TabularMdp {
    let doc = mdp.to_document();
    TabularMdp::from_document(MdpDocument {
        reward: reward.unwrap_or(doc.reward.clone()),
        agent_reward: agent.unwrap_or(doc.agent_reward.clone()),
        ..doc
    })
    .unwrap()
}

#[test]
fn parity_mdp_forces_an_even_split() {
    let mdp = randomized_parity_mdp();
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let res = solve_fair(&mdp, &spec).unwrap();
    assert_eq!(res.status, FairStatus::Fair);
    let pi = res.policy.unwrap();
    assert!((pi.prob(2, 0) - 0.5).abs() < 1e-6 && (pi.prob(2, 1) - 0.5).abs() < 1e-6);
    let ev = evaluate(&mdp, &pi, &spec, EvalMode::Discounted).unwrap();
    assert!((ev.reward - res.reward).abs() < 1e-6);
    assert!(ev.gap < 1e-6);
}

#[test]
fn infeasible_parity_variant() {
    let mdp = infeasible_parity_mdp();
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let res = solve_fair(&mdp, &spec).unwrap();
    assert_eq!(res.status, FairStatus::Infeasible);
    assert!(res.policy.is_none());
}

#[test]
fn tolerance_relaxes_the_split() {
    let mdp = randomized_parity_mdp();
    // Minority value q, majority 1/2; reward grows with q, so q = 1/2 + ε.
    for eps in [0.05, 0.2, 0.4] {
        let spec = FairnessSpec::demographic_parity(&mdp, eps);
        let res = solve_fair(&mdp, &spec).unwrap();
        let pi = res.policy.unwrap();
        assert!((pi.prob(2, 1) - (0.5 + eps)).abs() < 1e-6, "eps {eps}");
        assert!(res.evaluation.unwrap().gap <= eps + 1e-9);
    }
}

#[test]
fn non_separable_mdp_is_rejected_with_the_triple() {
    let mdp = randomized_parity_mdp();
    let bad = mdp
        .with_transitions(|s, a| {
            if (s, a) == (1, 0) {
                vec![0.0, 0.5, 0.0, 0.5, 0.0]
            } else {
                mdp.transition_row(s, a).to_vec()
            }
        })
        .unwrap();
    let spec = FairnessSpec::demographic_parity(&bad, 0.0);
    match build_fair_lp(&bad, &spec) {
        Err(FairLpError::Mdp(MdpError::NotSeparable { state, action, next })) => {
            assert_eq!((state, action, next), (1, 0, 3))
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mirrored_mdp_fair_optimum_is_the_unconstrained_optimum() {
    let mut rng = rng(8);
    for _ in 0..10 {
        let half = random_separable(&mut rng, 3, 2, 0.8);
        // Use the first block only, copied once per group.
        let k = (0..3).filter(|&s| half.group_of(s) == half.group_of(0)).count();
        let n = 2 * k;
        let transitions = (0..n)
            .map(|s| {
                let base = (s / k) * k;
                (0..2)
                    .map(|a| {
                        let mut row = vec![0.0; n];
                        for t in 0..k {
                            row[base + t] = half.transition(s % k, a, t);
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let table = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
            (0..n).map(|s| (0..2).map(|a| f(s % k, a)).collect()).collect()
        };
        let d = simplex(&mut rng, k);
        let initial: Vec<f64> = (0..n).map(|s| d[s % k] / 2.0).collect();
        let groups = (0..n).map(|s| if s < k { Group::Maj } else { Group::Min }).collect();
        let mdp = TabularMdp::new(
            initial,
            transitions,
            table(&|s, a| half.reward(s, a)),
            table(&|s, a| half.agent_reward(s, a)),
            0.8,
            groups,
        )
        .unwrap();
        let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
        let res = solve_fair(&mdp, &spec).unwrap();
        assert!((res.reward - value_iteration(&mdp)).abs() < 1e-6);
    }
}

#[test]
fn action_only_agent_reward_is_always_feasible() {
    let mut rng = rng(12);
    for _ in 0..30 {
        let ns = rng.random_range(2..=6);
        let na = rng.random_range(1..=3);
        let mdp = random_separable(&mut rng, ns, na, 0.9);
        let rho: Vec<f64> = (0..na).map(|_| rng.random()).collect();
        let mdp = with_tables(&mdp, None, Some(vec![rho; ns]));
        let res = solve_fair(&mdp, &FairnessSpec::demographic_parity(&mdp, 0.0)).unwrap();
        assert_eq!(res.status, FairStatus::Fair);
    }
}

#[test]
fn solution_beats_every_fair_grid_policy() {
    let mut rng = rng(31);
    for _ in 0..5 {
        let mdp = random_separable(&mut rng, 4, 2, 0.7);
        let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
        let res = solve_fair(&mdp, &spec).unwrap();
        let mut best = f64::NEG_INFINITY;
        for_each_grid_policy(4, 2, 20, |p| {
            let ev = evaluate(&mdp, p, &spec, EvalMode::Discounted).unwrap();
            if ev.gap <= 1e-6 {
                best = best.max(ev.reward);
            }
        });
        if res.status == FairStatus::Fair {
            assert!(res.reward >= best - 1e-4, "{} < {best}", res.reward);
        } else {
            assert_eq!(best, f64::NEG_INFINITY);
        }
    }
}

#[test]
fn extracted_policy_reproduces_the_occupancy() {
    let mut rng = rng(41);
    for _ in 0..50 {
        let ns = rng.random_range(2..=6);
        let na = rng.random_range(1..=3);
        let mdp = random_separable(&mut rng, ns, na, 0.85);
        let spec = FairnessSpec::demographic_parity(&mdp, 0.1);
        let res = solve_fair(&mdp, &spec).unwrap();
        let Some(pi) = res.policy else { continue };
        let occ = discounted_occupancy(&mdp, &pi).unwrap();
        for (a, b) in occ.lambda.iter().zip(&res.lambda) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn fair_policy_occupancy_is_lp_feasible() {
    // Hand-built fair policy on the parity MDP: any q = 1/2 split.
    let mdp = randomized_parity_mdp();
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let mut rows = vec![vec![0.3, 0.7]; 5];
    rows[2] = vec![0.5, 0.5];
    let pi = TabularPolicy::from_rows(&rows).unwrap();
    let occ = discounted_occupancy(&mdp, &pi).unwrap();
    let fair = build_fair_lp(&mdp, &spec).unwrap();
    let mut x = occ.lambda.clone();
    x.push(0.5);
    assert_eq!(fair.c_index, x.len() - 1);
    assert!(fair.lp.residual(&x) < 1e-7);
    // Action-only agent reward on a random MDP with a state-independent policy.
    let mut rng = rng(5);
    for _ in 0..20 {
        let mdp = random_separable(&mut rng, 5, 2, 0.6);
        let mdp = with_tables(&mdp, None, Some(vec![vec![0.2, 0.9]; 5]));
        let q: f64 = rng.random();
        let pi = TabularPolicy::state_independent(5, &[1.0 - q, q]).unwrap();
        let occ = discounted_occupancy(&mdp, &pi).unwrap();
        let fair = build_fair_lp(&mdp, &FairnessSpec::demographic_parity(&mdp, 0.0)).unwrap();
        let mut x = occ.lambda.clone();
        x.push(0.2 * (1.0 - q) + 0.9 * q);
        assert!(fair.lp.residual(&x) < 1e-7);
    }
}

/// Random separable MDP where level 0.5 is reachable in every state.
fn conservative_friendly(rng: &mut fairmdp::SimRng, ns: usize, na: usize) -> TabularMdp {
    let mdp = random_separable(rng, ns, na, 0.8);
    let agent = (0..ns)
        .map(|_| {
            let mut row: Vec<f64> = (0..na).map(|_| rng.random()).collect();
            row[0] = rng.random_range(0.0..0.4);
            row[1] = rng.random_range(0.6..1.0);
            row
        })
        .collect();
    with_tables(&mdp, None, Some(agent))
}

#[test]
fn conservative_never_beats_the_fair_optimum() {
    let mut rng = rng(51);
    for _ in 0..30 {
        let ns = rng.random_range(2..=5);
        let na = rng.random_range(2..=3);
        let mdp = conservative_friendly(&mut rng, ns, na);
        let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
        let cons = solve_conservative(&mdp, &spec, ConservativeForm::PolicyLevel).unwrap();
        let fair = solve_fair(&mdp, &spec).unwrap();
        assert_eq!(cons.status, FairStatus::Fair);
        assert!(cons.reward <= fair.reward + 1e-6);
    }
}

#[test]
fn conservative_policy_is_fair_for_any_initial_distribution() {
    let mut rng = rng(61);
    let mdp = conservative_friendly(&mut rng, 5, 2);
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let cons = solve_conservative(&mdp, &spec, ConservativeForm::PolicyLevel).unwrap();
    let pi = cons.policy.unwrap();
    for _ in 0..100 {
        let other = mdp.with_initial(simplex(&mut rng, 5)).unwrap();
        let spec = FairnessSpec::demographic_parity(&other, 0.0).with_conditioning(Conditioning::CurrentState);
        let ev = evaluate(&other, &pi, &spec, EvalMode::Discounted).unwrap();
        assert!(ev.gap <= 1e-6, "gap {}", ev.gap);
    }
}

#[test]
fn conservative_with_action_only_agent_reward_beats_uniform() {
    let mut rng = rng(71);
    for _ in 0..10 {
        let mdp = random_separable(&mut rng, 4, 2, 0.7);
        let mdp = with_tables(&mdp, None, Some(vec![vec![0.0, 1.0]; 4]));
        let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
        let cons = solve_conservative(&mdp, &spec, ConservativeForm::PolicyLevel).unwrap();
        let uniform = evaluate(&mdp, &TabularPolicy::uniform(4, 2), &spec, EvalMode::Discounted).unwrap();
        assert!(cons.reward >= uniform.reward - 1e-9);
        assert!(cons.evaluation.unwrap().gap < 1e-9);
    }
}

#[test]
fn conservative_is_infeasible_on_the_parity_mdp() {
    // Agent reward is fixed per state there (0, 1, 0, 0, 2), so no common
    // per-state level exists.
    let mdp = randomized_parity_mdp();
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    for form in [ConservativeForm::PolicyLevel, ConservativeForm::OccupancyRows] {
        let res = solve_conservative(&mdp, &spec, form).unwrap();
        assert_eq!(res.status, FairStatus::Infeasible, "{form:?}");
    }
}

#[test]
fn unconstrained_lp_matches_value_iteration() {
    let mut rng = rng(81);
    for _ in 0..30 {
        let ns = rng.random_range(1..=6);
        let na = rng.random_range(1..=3);
        let mdp = random_mdp(&mut rng, ns, na, 0.9);
        let lp = build_unconstrained_lp(&mdp).unwrap();
        let sol = fairmdp::lp::solve(&lp.lp).unwrap();
        assert!((sol.objective - value_iteration(&mdp)).abs() < 1e-6);
    }
}
