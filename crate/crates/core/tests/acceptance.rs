//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 5`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fairmdp::causal::*;
use fairmdp::cce::{plan_samples, train, CceConfig, LinearFamily};
use fairmdp::env::{estimate_policy, AgentEstimator, Environment, Horizon, TabularEnv};
use fairmdp::experiment::{run_grid, summarize, ExperimentConfig, Method, Summary, Trainer};
use fairmdp::fair_lp::{solve_fair, FairStatus};
use fairmdp::loan::{LoanCriterion, LoanParams};
use fairmdp::mdp::*;
use fairmdp::policy::{FeatureView, LinearPolicy};
use fairmdp::rl::*;
use fairmdp::SeedTree;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

// 1 ------------------------------------------------------------------------

/// Reward contribution `Σ_{s∈G} D(s) v_R(s)` and group value
/// `(1-γ) Σ_{s∈G} D(s) v_ρ(s) / D(G)` of a group-restricted policy.
fn group_part(mdp: &TabularMdp, states: &[usize], rows: &[&[f64]]) -> (f64, f64) {
    let k = states.len();
    let g = mdp.discount();
    let mut m = DMatrix::<f64>::identity(k, k);
    let mut r = DVector::<f64>::zeros(k);
    let mut rho = DVector::<f64>::zeros(k);
    for (i, &s) in states.iter().enumerate() {
        for (a, &p) in rows[i].iter().enumerate() {
            r[i] += p * mdp.reward(s, a);
            rho[i] += p * mdp.agent_reward(s, a);
            for (j, &t) in states.iter().enumerate() {
                m[(i, j)] -= g * p * mdp.transition(s, a, t);
            }
        }
    }
    let lu = m.lu();
    let vr = lu.solve(&r).unwrap();
    let vrho = lu.solve(&rho).unwrap();
    let mass: f64 = states.iter().map(|&s| mdp.initial()[s]).sum();
    let reward = states.iter().enumerate().map(|(i, &s)| mdp.initial()[s] * vr[i]).sum();
    let value = (1.0 - g) * states.iter().enumerate().map(|(i, &s)| mdp.initial()[s] * vrho[i]).sum::<f64>() / mass;
    (reward, value)
}

/// `(reward contribution, group value)` of every grid policy on one group.
fn group_grid(mdp: &TabularMdp, states: &[usize], resolution: usize) -> Vec<(f64, f64)> {
    let rows = grid_rows(mdp.n_actions(), resolution);
    let total = rows.len().pow(states.len() as u32);
    (0..total)
        .map(|mut code| {
            let chosen: Vec<&[f64]> = (0..states.len())
                .map(|_| {
                    let r = &rows[code % rows.len()];
                    code /= rows.len();
                    r.as_slice()
                })
                .collect();
            group_part(mdp, states, &chosen)
        })
        .collect()
}

/// Finest grid with at most `budget` policies per group.
fn resolution_for(n_actions: usize, group_size: usize, budget: usize) -> usize {
    let mut res = 1;
    while res < 12 && grid_rows(n_actions, res + 1).len().pow(group_size as u32) <= budget {
        res += 1;
    }
    res
}

/// Best reward over grid policies with group gap at most `tol`, if any.
fn grid_oracle(mdp: &TabularMdp, tol: f64) -> Option<f64> {
    let maj: Vec<usize> = (0..mdp.n_states()).filter(|&s| mdp.group_of(s) == Group::Maj).collect();
    let min: Vec<usize> = (0..mdp.n_states()).filter(|&s| mdp.group_of(s) == Group::Min).collect();
    let budget = 40_000;
    let a = group_grid(mdp, &maj, resolution_for(mdp.n_actions(), maj.len(), budget));
    let mut b = group_grid(mdp, &min, resolution_for(mdp.n_actions(), min.len(), budget));
    b.sort_by(|x, y| x.1.total_cmp(&y.1));
    let mut best: Option<f64> = None;
    for &(ra, va) in &a {
        let lo = b.partition_point(|x| x.1 < va - tol);
        for &(rb, vb) in b[lo..].iter().take_while(|x| x.1 <= va + tol) {
            debug_assert!((va - vb).abs() <= tol);
            best = Some(best.map_or(ra + rb, |v: f64| v.max(ra + rb)));
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results: Vec<Result<(bool, f64), String>> = (0..200u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(1000 + k);
            let ns = r.random_range(2..=6);
            let na = r.random_range(1..=3);
            let mdp = random_separable(&mut r, ns, na, 0.8);
            let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
            let res = solve_fair(&mdp, &spec).map_err(|e| format!("mdp {k}: {e}"))?;
            let oracle = grid_oracle(&mdp, 1e-4);
            match res.status {
                FairStatus::Fair => {
                    let pi = res.policy.unwrap();
                    let ev = evaluate(&mdp, &pi, &spec, EvalMode::Discounted).unwrap();
                    if ev.gap > 1e-6 {
                        return Err(format!("mdp {k}: gap {:.3e}", ev.gap));
                    }
                    // The oracle's own evaluation must agree with the library's.
                    let rows = pi.rows();
                    let split = |z: Group| -> (Vec<usize>, Vec<&[f64]>) {
                        let st: Vec<usize> = (0..ns).filter(|&s| mdp.group_of(s) == z).collect();
                        let rw = st.iter().map(|&s| rows[s].as_slice()).collect();
                        (st, rw)
                    };
                    let (sa, ra) = split(Group::Maj);
                    let (sb, rb) = split(Group::Min);
                    let (pa, pb) = (group_part(&mdp, &sa, &ra), group_part(&mdp, &sb, &rb));
                    if (pa.0 + pb.0 - ev.reward).abs() > 1e-8 || (pa.1 - ev.group_values[0]).abs() > 1e-8 {
                        return Err(format!("mdp {k}: oracle evaluation disagrees"));
                    }
                    let best = oracle.unwrap_or(f64::NEG_INFINITY);
                    if ev.reward < best - 1e-3 {
                        return Err(format!("mdp {k}: reward {} below grid {best}", ev.reward));
                    }
                    Ok((true, ev.reward - best))
                }
                FairStatus::Infeasible => {
                    // A grid pair within 1e-4 is only possible if that tolerance is feasible.
                    if oracle.is_some() {
                        let loose = solve_fair(&mdp, &spec.clone().with_tolerance(1e-4)).unwrap();
                        if loose.status != FairStatus::Fair {
                            return Err(format!("mdp {k}: infeasible but grid found a fair policy"));
                        }
                    }
                    Ok((false, 0.0))
                }
            }
        })
        .collect();
    let mut fair = 0;
    let mut margin = f64::INFINITY;
    for r in results {
        let (f, m) = r?;
        if f {
            fair += 1;
            margin = margin.min(m);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs <= 120.0,
        format!("200 MDPs ({fair} feasible), min margin over grid {margin:.2e}, {secs:.1}s"),
    )
}

// 2 ------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mdp = TabularMdp::from_json_str(&fixture("parity.json")).map_err(|e| e.to_string())?;
    let res = solve_fair(&mdp, &FairnessSpec::demographic_parity(&mdp, 0.0)).map_err(|e| e.to_string())?;
    let pi = res.policy.ok_or("first variant infeasible")?;
    let row = pi.row(2).to_vec();
    let split = (row[0] - 0.5).abs() <= 1e-6 && (row[1] - 0.5).abs() <= 1e-6;
    let other = TabularMdp::from_json_str(&fixture("parity_infeasible.json")).map_err(|e| e.to_string())?;
    let res = solve_fair(&other, &FairnessSpec::demographic_parity(&other, 0.0)).map_err(|e| e.to_string())?;
    check(
        split && res.status == FairStatus::Infeasible,
        format!("pi(s2) = ({:.9}, {:.9}), second variant {:?}", row[0], row[1], res.status),
    )
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let worst = (0..1000u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(3000 + k);
            let ns = r.random_range(2..=8);
            let na = r.random_range(1..=4);
            let g = r.random_range(0.0..0.99);
            let mdp = random_mdp(&mut r, ns, na, g);
            let policy = random_policy(&mut r, ns, na);
            let occ = discounted_occupancy(&mdp, &policy).unwrap();
            let mut res = (occ.total() - 1.0).abs();
            for t in 0..ns {
                let inflow: f64 = (0..ns)
                    .flat_map(|s| (0..na).map(move |a| (s, a)))
                    .map(|(s, a)| occ.get(s, a) * mdp.transition(s, a, t))
                    .sum();
                let lhs: f64 = (0..na).map(|a| occ.get(t, a)).sum();
                res = res.max((lhs - (1.0 - g) * mdp.initial()[t] - g * inflow).abs());
            }
            res
        })
        .reduce(|| 0.0, f64::max);
    let mut mc_ok = true;
    let mut worst_z = 0.0f64;
    for k in 0..3u64 {
        let mut r = rng(3900 + k);
        let mdp = random_separable(&mut r, 4, 2, 0.5);
        let policy = random_policy(&mut r, 4, 2);
        let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
        let exact = evaluate(&mdp, &policy, &spec, EvalMode::Discounted).unwrap();
        let env = TabularEnv::new(mdp, spec).unwrap();
        let est = estimate_policy(&env, &policy, env.horizon(), 100_000, SeedTree::new(k), AgentEstimator::Realized).unwrap();
        let z = [
            (est.reward - exact.reward).abs() / est.reward_se,
            (est.group_values[0] - exact.group_values[0]).abs() / est.group_se[0],
            (est.group_values[1] - exact.group_values[1]).abs() / est.group_se[1],
        ];
        for z in z {
            worst_z = worst_z.max(z);
            mc_ok &= z <= 3.0;
        }
    }
    check(
        worst <= 1e-9 && mc_ok,
        format!("max flow/normalization residual {worst:.2e}, worst Monte Carlo deviation {worst_z:.2} SE"),
    )
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mdp = TabularMdp::new(
        vec![0.6, 0.4],
        vec![vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2]],
        vec![vec![0.0, 1.0], vec![0.5, 0.2]],
        vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        0.5,
        vec![Group::Maj, Group::Min],
    )
    .unwrap();
    let optimum = (0.6 * 1.0 + 0.4 * 0.5) / (1.0 - 0.5);
    let env = TabularEnv::new(mdp.clone(), FairnessSpec::demographic_parity(&mdp, 0.0)).unwrap();
    let family = LinearFamily::new(FeatureView::Full).with_scale(5.0);
    let near = (0..20u64)
        .into_par_iter()
        .filter(|&seed| {
            let c = CceConfig { iterations: 50, samples: 50, elite: 5, rollouts: 200, horizon: Some(Horizon::new(14, 0.5)), seed, ..Default::default() };
            let out = train(&env, &family, &c).unwrap();
            let pi = LinearPolicy::new(&env, FeatureView::Full, out.mean).with_scale(5.0).to_tabular(&env);
            evaluate(env.mdp(), &pi, env.spec(), EvalMode::Discounted).unwrap().reward >= 0.98 * optimum
        })
        .count();

    let parity = catalog::randomized_parity_mdp();
    let spec = FairnessSpec::demographic_parity(&parity, 0.05);
    let env = TabularEnv::new(parity.clone(), spec.clone()).unwrap();
    let fair = (0..20u64)
        .into_par_iter()
        .filter(|&seed| {
            let c = CceConfig {
                iterations: 50,
                samples: 50,
                elite: 5,
                rollouts: 400,
                horizon: Some(Horizon::new(14, 0.5)),
                sigma: 0.5,
                tolerance: 0.05,
                seed,
                ..Default::default()
            };
            let out = train(&env, &family, &c).unwrap();
            let pi = LinearPolicy::new(&env, FeatureView::Full, out.theta).with_scale(5.0).to_tabular(&env);
            evaluate(&parity, &pi, &spec, EvalMode::Discounted).unwrap().gap <= 0.05
        })
        .count();
    let secs = start.elapsed().as_secs_f64();
    check(
        near >= 18 && fair >= 18 && secs <= 300.0,
        format!("unconstrained within 2%: {near}/20, constrained gap <= 0.05: {fair}/20, {secs:.1}s"),
    )
}

// 5 ------------------------------------------------------------------------

/// Reference reward and constraint value per method, when given.
fn reference(s: &Summary) -> (f64, Option<f64>) {
    match (s.method.trainer, s.method.criterion) {
        (Trainer::RaceBlind, LoanCriterion::DemographicParity) => (10.43, Some(0.42)),
        (Trainer::RaceBlind, LoanCriterion::EqualOpportunity) => (10.43, Some(0.37)),
        (Trainer::Optimistic, LoanCriterion::DemographicParity) => (10.41, Some(0.14)),
        (Trainer::Optimistic, LoanCriterion::EqualOpportunity) => (10.43, Some(0.11)),
        (Trainer::Cce, LoanCriterion::DemographicParity) => (10.40, None),
        (Trainer::Cce, LoanCriterion::EqualOpportunity) => (10.43, None),
        (Trainer::Conservative, _) => (10.00, Some(0.0)),
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let params = LoanParams::default();
    let eps = params.epsilon;
    let cfg = ExperimentConfig::default();
    let seeds: Vec<u64> = (1..=5).collect();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for criterion in [LoanCriterion::DemographicParity, LoanCriterion::EqualOpportunity] {
        let methods = [Trainer::RaceBlind, Trainer::Optimistic, Trainer::Cce, Trainer::Conservative]
            .map(|t| Method::new(t, criterion));
        let cells = run_grid(&params, &methods, &seeds, &cfg).map_err(|e| e.to_string())?;
        let rows = summarize(&cells);
        for s in &rows {
            let (ref_r, ref_c) = reference(s);
            lines.push(format!(
                "    {criterion} {:<7} reward {:.3} ± {:.3} (offset +10: {:.2}, reference {ref_r:.2})  constraint {:.3} ± {:.3} (reference {})",
                s.method.label(),
                s.reward,
                s.reward_se,
                s.reward + 10.0,
                s.constraint,
                s.constraint_se,
                ref_c.map_or("<= 0.12".to_string(), |c| format!("{c:.2}")),
            ));
        }
        let [rb, opt, cce, cons] = [&rows[0], &rows[1], &rows[2], &rows[3]];
        let mut gate = |ok: bool, what: String| {
            if !ok {
                failures.push(format!("{criterion}: {what}"));
            }
        };
        gate(cons.reward <= cce.reward, format!("Cons reward {:.3} > CCE {:.3}", cons.reward, cce.reward));
        gate(cce.reward <= opt.reward, format!("CCE reward {:.3} > Opt {:.3}", cce.reward, opt.reward));
        gate(opt.reward <= rb.reward, format!("Opt reward {:.3} > RB {:.3}", opt.reward, rb.reward));
        gate(rb.constraint > opt.constraint, format!("RB constraint {:.3} <= Opt {:.3}", rb.constraint, opt.constraint));
        gate(opt.constraint >= cce.constraint, format!("Opt constraint {:.3} < CCE {:.3}", opt.constraint, cce.constraint));
        gate(cce.constraint <= eps, format!("CCE constraint {:.3} > {eps}", cce.constraint));
        gate(cons.constraint == 0.0, format!("Cons constraint {:e} != 0", cons.constraint));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 1800.0 {
        failures.push(format!("runtime {secs:.0}s"));
    }
    let detail = format!("{} seeds, {secs:.0}s\n{}", seeds.len(), lines.join("\n"));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}\n    hard gate: {}", detail, failures.join("; ")))
    }
}

// 6 ------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let (sigma, eps, delta, gamma) = (0.5, 0.1, 0.05, 0.5);
    let target = 1.02 * eps;
    let mix = |a: &TabularPolicy, b: &TabularPolicy, t: f64| {
        let rows: Vec<Vec<f64>> = a.rows().iter().zip(b.rows()).map(|(x, y)| x.iter().zip(&y).map(|(p, q)| (1.0 - t) * p + t * q).collect()).collect();
        TabularPolicy::from_rows(&rows).unwrap()
    };
    // Hardest case: a policy just outside the tolerance. Draw instances until
    // a segment between two random policies crosses the target gap.
    let (mdp, spec, a, b) = (0..1000u64)
        .map(|k| {
            let mut r = rng(600 + k);
            let mdp = random_separable(&mut r, 3, 2, gamma);
            let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
            let a = random_policy(&mut r, 3, 2);
            let b = random_policy(&mut r, 3, 2);
            (mdp, spec, a, b)
        })
        .find(|(mdp, spec, a, b)| {
            let g = |p: &TabularPolicy| evaluate(mdp, p, spec, EvalMode::Discounted).unwrap().gap;
            let (ga, gb) = (g(a), g(b));
            ga.min(gb) < target && ga.max(gb) > target
        })
        .ok_or("no instance brackets the target gap")?;
    let gap = |p: &TabularPolicy| evaluate(&mdp, p, &spec, EvalMode::Discounted).unwrap().gap;
    let (mut lo, mut hi) = if gap(&a) < gap(&b) { (0.0, 1.0) } else { (1.0, 0.0) };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if gap(&mix(&a, &b, mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let policy = mix(&a, &b, hi);
    let true_gap = gap(&policy);
    let plan = plan_samples(mdp.r_max(), gamma, eps, sigma, delta).map_err(|e| e.to_string())?;
    let env = TabularEnv::new(mdp, spec).unwrap();
    let horizon = Horizon::new(plan.steps, gamma);
    let trials = 400u64;
    let misses = (0..trials)
        .into_par_iter()
        .filter(|&k| {
            let est = estimate_policy(&env, &policy, horizon, plan.rollouts, SeedTree::new(66).child(k), AgentEstimator::Expected).unwrap();
            est.gap <= (1.0 - sigma) * eps
        })
        .count() as u64;
    // Largest miss count consistent with a 5% rate at 95% confidence.
    let limit = (0..=trials)
        .find(|&x| Binomial::new(delta, trials).unwrap().cdf(x) >= 0.95)
        .unwrap();
    check(
        misses <= limit,
        format!("true gap {true_gap:.4}, m = {}, T = {}, misses {misses}/{trials} (limit {limit})", plan.rollouts, plan.steps),
    )
}

// 7 ------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut worst_init = f64::NEG_INFINITY;
    let mut worst_trans = f64::NEG_INFINITY;
    for k in 0..500u64 {
        let mut r = rng(7000 + k);
        let ns = r.random_range(2..=6);
        let na = r.random_range(1..=3);
        let g = r.random_range(0.0..0.95);
        let mdp = random_mdp(&mut r, ns, na, g);
        let policy = random_policy(&mut r, ns, na);
        let eps0 = r.random_range(1e-4..0.1);

        let mut d: Vec<f64> = mdp.initial().iter().map(|v| (v + r.random_range(-eps0..eps0)).max(0.0)).collect();
        let total: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= total);
        let dist = d.iter().zip(mdp.initial()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let other = mdp.with_initial(d).unwrap();
        let value = |m: &TabularMdp| discounted_occupancy(m, &policy).unwrap().dot(|s, a| m.reward(s, a)) / (1.0 - g);
        let bound = ns as f64 * mdp.r_max() * dist / (1.0 - g);
        worst_init = worst_init.max((value(&mdp) - value(&other)).abs() - bound);

        let horizon = r.random_range(1..=10);
        let noise: Vec<f64> = (0..ns * na * ns).map(|_| r.random_range(-eps0..eps0)).collect();
        let other = mdp
            .with_transitions(|s, a| {
                let mut row: Vec<f64> = mdp.transition_row(s, a).iter().enumerate().map(|(t, &v)| (v + noise[(s * na + a) * ns + t]).max(0.0)).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
                row
            })
            .unwrap();
        let dist = (0..ns)
            .flat_map(|s| (0..na).flat_map(move |a| (0..ns).map(move |t| (s, a, t))))
            .map(|(s, a, t)| (mdp.transition(s, a, t) - other.transition(s, a, t)).abs())
            .fold(0.0, f64::max);
        let schedule = NonStationaryPolicy::stationary(policy.clone(), horizon);
        // Per-step average reward, as used for episodic problems.
        let avg = |m: &TabularMdp| episode_return(m, &schedule, horizon).unwrap() / horizon as f64;
        let bound = horizon as f64 * ns as f64 * mdp.r_max() * dist;
        worst_trans = worst_trans.max((avg(&mdp) - avg(&other)).abs() - bound);
    }
    check(
        worst_init <= 1e-12 && worst_trans <= 1e-12,
        format!("largest excess over bound: initial {worst_init:.3e}, transition {worst_trans:.3e}"),
    )
}

// 8 ------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let mdp = four_state_mdp();
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let pi0 = TabularPolicy::uniform(4, 2);
    let eps = 0.1;
    let horizon = 3;
    let cfg = EtcConfig { episodes: 1, exploration: 0, horizon, tolerance: eps, delta: 0.05, floor: 0.05 };
    let (policy, _) = commit(&mdp, &spec, &pi0, &cfg).map_err(|e| e.to_string())?;
    let best = solve_fair_finite_horizon(&mdp, &FairnessSpec::demographic_parity(&mdp, eps / 2.0), horizon)
        .map_err(|e| e.to_string())?
        .reward;
    let loss = best - episode_return(&mdp, &policy, horizon).unwrap();
    let oracle_gap = evaluate_schedule(&mdp, &policy, &spec, EvalMode::FiniteHorizon { horizon }).unwrap().gap;

    let cfg = EtcConfig { episodes: 3000, exploration: 2000, ..cfg };
    let fair = (0..50u64)
        .into_par_iter()
        .filter(|&k| {
            let out = explore_then_commit(&mdp, &spec, &pi0, &cfg, &mut SeedTree::new(88).child(k).rng()).unwrap();
            out.committed_gap <= eps
        })
        .count();
    let pts = regret_curve(&mdp, &spec, &pi0, horizon, &[1_000, 3_000, 10_000, 30_000, 100_000], 2.0, SeedTree::new(8))
        .map_err(|e| e.to_string())?;
    let slope = log_log_slope(&pts.iter().map(|p| (p.episodes as f64, p.regret)).collect::<Vec<_>>());
    check(
        loss <= 1e-6 && oracle_gap <= eps / 2.0 + 1e-9 && fair >= 48 && slope <= 0.85,
        format!("oracle loss {loss:.2e}, oracle gap {oracle_gap:.4}, fair commits {fair}/50, regret slope {slope:.3}"),
    )
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let (a, b) = (0.3, 0.1);
    let d = stationary_distribution(&[vec![1.0 - a, a], vec![b, 1.0 - b]], 1e-13).map_err(|e| e.to_string())?.distribution;
    let err = (d[0] - b / (a + b)).abs().max((d[1] - a / (a + b)).abs());
    let eps = [0.3, 0.1, 0.03, 1e-2, 1e-3, 1e-4, 1e-6];
    let monotone = (0..100u64).all(|k| {
        let mut r = rng(9000 + k);
        let n = r.random_range(2..=6);
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| simplex(&mut r, n).into_iter().map(|v| 0.9 * v + 0.1 / n as f64).collect())
            .collect();
        let times: Vec<usize> = eps.iter().map(|&e| mixing_time(&p, e).unwrap()).collect();
        times.windows(2).all(|w| w[0] <= w[1])
    });
    check(err <= 1e-9 && monotone, format!("closed-form error {err:.2e}, monotone on 100 chains: {monotone}"))
}

// 10 -----------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let bern = |p: f64| Noise::Finite { values: vec![0.0, 1.0], probs: vec![1.0 - p, p] };
    let graph = CausalGraph::new(vec![
        Vertex::exogenous("Z", bern(0.5)),
        Vertex::new("Y", vec![0], bern(0.3), |p, e| (p[0] + e) % 2.0),
        Vertex::new("W", vec![1, 0], bern(0.6), |p, e| p[0].max(p[1] * e)),
    ])
    .unwrap();
    let setup = PathSpecificSetup { sensitive: 0, mediator: 1, maj_value: 1.0, min_value: 0.0 };
    let mut r = rng(10);
    let mut agree = 0;
    for _ in 0..1000 {
        let noise = graph.sample_noise(&mut r);
        // Pass 1 under Z = 0 gives Y = e_Y; pass 2 under Z = 1 with Y pinned.
        let y = noise[1];
        let w = if y == 1.0 || noise[2] == 1.0 { 1.0 } else { 0.0 };
        if graph.evaluate_with_plan(&setup.maj_plan(), &noise).unwrap() == vec![1.0, y, w] {
            agree += 1;
        }
    }
    let inert = CausalGraph::new(vec![
        Vertex::exogenous("Z", bern(0.5)),
        Vertex::new("Y", vec![0], bern(0.3), |_, e| e),
        Vertex::new("W", vec![1], bern(0.6), |p, e| p[0] * e),
    ])
    .unwrap();
    let assemble = |v: &[f64]| -> Result<usize, String> { Ok(2 * v[1] as usize + v[2] as usize) };
    let out = path_specific_groups(&inert, &setup, &assemble, 4, 10_000, true, SeedTree::new(10)).map_err(|e| e.to_string())?;
    let same = |g: &GroupDistributions| g.maj == g.min;
    let identical = same(&out.primary) && same(out.swapped.as_ref().unwrap());
    check(
        agree == 1000 && identical,
        format!("two-pass agreement {agree}/1000, inert mediator identical groups: {identical}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "model-based exactness", criterion_1),
        (2, "parity fixtures", criterion_2),
        (3, "occupancy identities", criterion_3),
        (4, "cross-entropy sanity", criterion_4),
        (5, "loan experiment", criterion_5),
        (6, "sample planner", criterion_6),
        (7, "sensitivity bounds", criterion_7),
        (8, "explore-then-commit", criterion_8),
        (9, "mixing", criterion_9),
        (10, "causal layer", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}, {secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
