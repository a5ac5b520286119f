use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use fairmdp::cce::{self, CceConfig, CceError, LinearFamily, TrainOutcome, Weighting};
use fairmdp::env::{Environment, TabularEnv};
use fairmdp::experiment::{self, ExperimentConfig, ExperimentError, Method};
use fairmdp::fair_lp::{solve_conservative, solve_fair, ConservativeForm, FairLpError};
use fairmdp::loan::{LoanEnv, LoanError, LoanParams};
use fairmdp::mdp::{FairnessSpec, MdpError, TabularMdp, TabularPolicy};
use fairmdp::rl::{self, EtcConfig, RlError};
use fairmdp::{FeatureView, SeedTree};
use serde::Deserialize;

use crate::output::{header, num, row};
use crate::{EtcArgs, LoanArgs, MixArgs, SearchArgs, SolveArgs, SpecArgs, TrainArgs, Variant};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Mdp { path: String, source: MdpError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Loan(#[from] LoanError),
    #[error(transparent)]
    FairLp(#[from] FairLpError),
    #[error(transparent)]
    Cce(#[from] CceError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn load_mdp(path: &Path) -> Result<TabularMdp> {
    TabularMdp::from_json_str(&read(path)?).map_err(|source| CliError::Mdp {
        path: path.display().to_string(),
        source,
    })
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn load_params(path: Option<&Path>) -> Result<LoanParams> {
    match path {
        Some(p) => Ok(LoanParams::from_json_str(&read(p)?)?),
        None => Ok(LoanParams::default()),
    }
}

fn build_spec(mdp: &TabularMdp, args: &SpecArgs) -> Result<FairnessSpec> {
    Ok(match &args.qualified {
        None => FairnessSpec::demographic_parity(mdp, args.tolerance),
        Some(states) => {
            let mut mask = vec![false; mdp.n_states()];
            for &s in states {
                *mask
                    .get_mut(s)
                    .ok_or_else(|| CliError::Invalid(format!("qualified state {s} out of range")))? = true;
            }
            FairnessSpec::equal_opportunity(mdp, &mask, args.tolerance)
        }
    })
}

fn policy_csv<W: Write>(out: &mut W, policy: &TabularPolicy) -> std::io::Result<()> {
    let mut names = vec!["state".to_string()];
    names.extend((0..policy.n_actions()).map(|a| format!("action_{a}")));
    row(out, &names)?;
    for s in 0..policy.n_states() {
        let mut fields = vec![s.to_string()];
        fields.extend(policy.row(s).iter().map(|&p| num(p)));
        row(out, &fields)?;
    }
    Ok(())
}

pub fn solve<W: Write>(args: &SolveArgs, out: &mut W) -> Result<ExitCode> {
    let mdp = load_mdp(&args.mdp)?;
    let spec = build_spec(&mdp, &args.spec)?;
    let res = if args.conservative {
        let form = if args.occupancy_rows {
            ConservativeForm::OccupancyRows
        } else {
            ConservativeForm::PolicyLevel
        };
        solve_conservative(&mdp, &spec, form)?
    } else {
        solve_fair(&mdp, &spec)?
    };
    let Some(policy) = &res.policy else {
        writeln!(out, "status: infeasible")?;
        return Ok(ExitCode::from(2));
    };
    writeln!(out, "status: fair")?;
    writeln!(out, "reward: {}", num(res.reward))?;
    writeln!(out, "c: {}", num(res.c))?;
    if let Some(ev) = &res.evaluation {
        writeln!(out, "group_values: {} {}", num(ev.group_values[0]), num(ev.group_values[1]))?;
        writeln!(out, "gap: {}", num(ev.gap))?;
    }
    if let Some(d) = res.per_state_deviation {
        writeln!(out, "per_state_deviation: {}", num(d))?;
    }
    writeln!(out, "policy:")?;
    policy_csv(out, policy)?;
    if let Some(path) = &args.csv {
        let mut file = std::fs::File::create(path)?;
        policy_csv(&mut file, policy)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_search(cfg: &mut CceConfig, scale: &mut f64, args: &SearchArgs) {
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.elite {
        cfg.elite = v;
    }
    if let Some(v) = args.rollouts {
        cfg.rollouts = v;
    }
    if let Some(v) = args.smoothing {
        cfg.smoothing = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if args.raw_weights {
        cfg.weighting = Weighting::RawReward;
    }
    if let Some(v) = args.scale {
        *scale = v;
    }
}

fn run_variant<E: Environment>(env: &E, variant: Variant, scale: f64, cfg: &CceConfig) -> Result<(TrainOutcome, FeatureView)> {
    let full = LinearFamily::new(FeatureView::Full).with_scale(scale);
    Ok(match variant {
        Variant::Cce => (cce::train(env, &full, cfg)?, FeatureView::Full),
        Variant::Optimistic => (cce::train_optimistic(env, &full, cfg)?, FeatureView::Full),
        Variant::Conservative => (cce::train_conservative(env, scale, cfg)?, FeatureView::Constant),
        Variant::RaceBlind => (cce::train_race_blind(env, scale, cfg)?, FeatureView::RaceBlind),
    })
}

pub fn train<W: Write>(args: &TrainArgs, seed: u64, out: &mut W) -> Result<ExitCode> {
    let mut cfg = CceConfig {
        seed,
        tolerance: args.tolerance.unwrap_or(f64::INFINITY),
        ..Default::default()
    };
    let mut scale = 1.0;
    apply_search(&mut cfg, &mut scale, &args.search);
    let (outcome, _) = match &args.mdp {
        Some(path) => {
            let mdp = load_mdp(path)?;
            let spec = FairnessSpec::demographic_parity(&mdp, cfg.tolerance.min(f64::MAX));
            let env = TabularEnv::new(mdp, spec).map_err(CceError::from)?;
            run_variant(&env, args.variant, scale, &cfg)?
        }
        None => {
            let env = LoanEnv::new(load_params(args.params.as_deref())?, args.criterion)?;
            run_variant(&env, args.variant, scale, &cfg)?
        }
    };
    header(out, &["iteration", "best_reward", "elite_min_gap", "i_prime", "eta_norm"])?;
    for t in &outcome.trace {
        row(
            out,
            &[
                t.iteration.to_string(),
                num(t.best_reward),
                num(t.elite_min_gap),
                t.i_prime.to_string(),
                num(t.eta_norm),
            ],
        )?;
    }
    let theta: Vec<String> = outcome.theta.iter().map(|&v| num(v)).collect();
    eprintln!("theta: {}", theta.join(" "));
    Ok(ExitCode::SUCCESS)
}

pub fn loan_experiment<W: Write>(args: &LoanArgs, seed: u64, out: &mut W) -> Result<ExitCode> {
    let params = load_params(args.params.as_deref())?;
    let methods = args
        .method
        .iter()
        .map(|m| Method::parse(m, args.criterion))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut cfg = ExperimentConfig::default();
    apply_search(&mut cfg.cce, &mut cfg.scale, &args.search);
    if let Some(v) = args.eval_episodes {
        cfg.eval_episodes = v;
    }
    cfg.use_mean = args.use_mean;
    let root = SeedTree::new(seed);
    let seeds: Vec<u64> = (0..args.repeats as u64).map(|i| root.child(i).seed()).collect();
    let cells = experiment::run_grid(&params, &methods, &seeds, &cfg)?;
    let timing = |mut names: Vec<&'static str>| {
        if args.timing {
            names.push("wall_secs");
        }
        names
    };
    if args.cells {
        header(out, &timing(vec!["method", "criterion", "seed", "reward", "reward_se", "constraint"]))?;
        for c in &cells {
            let mut fields = vec![
                c.method.label().to_string(),
                c.method.criterion.to_string(),
                c.seed.to_string(),
                num(c.reward),
                num(c.reward_se),
                num(c.constraint),
            ];
            if args.timing {
                fields.push(num(c.wall_secs));
            }
            row(out, &fields)?;
        }
    } else {
        header(
            out,
            &timing(vec!["method", "criterion", "reward", "reward_se", "constraint", "constraint_se", "seeds"]),
        )?;
        for s in experiment::summarize(&cells) {
            let mut fields = vec![
                s.method.label().to_string(),
                s.method.criterion.to_string(),
                num(s.reward),
                num(s.reward_se),
                num(s.constraint),
                num(s.constraint_se),
                s.seeds.to_string(),
            ];
            if args.timing {
                fields.push(num(s.wall_secs));
            }
            row(out, &fields)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn etc<W: Write>(args: &EtcArgs, seed: u64, out: &mut W) -> Result<ExitCode> {
    let mdp = load_mdp(&args.mdp)?;
    let spec = FairnessSpec::demographic_parity(&mdp, 0.0);
    let pi0 = match &args.pi0 {
        Some(path) => {
            let rows: Vec<Vec<f64>> = load_json(path)?;
            TabularPolicy::from_rows(&rows).map_err(|source| CliError::Mdp {
                path: path.display().to_string(),
                source,
            })?
        }
        None => TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
    };
    if let Some(points) = &args.curve {
        let curve = rl::regret_curve(&mdp, &spec, &pi0, args.horizon, points, args.scale, SeedTree::new(seed))?;
        header(out, &["episodes", "exploration", "tolerance", "regret"])?;
        for p in &curve {
            row(out, &[p.episodes.to_string(), p.exploration.to_string(), num(p.tolerance), num(p.regret)])?;
        }
        let xy: Vec<(f64, f64)> = curve.iter().map(|p| (p.episodes as f64, p.regret)).collect();
        eprintln!("slope: {}", num(rl::log_log_slope(&xy)));
        return Ok(ExitCode::SUCCESS);
    }
    let n = args.episodes as f64;
    let cfg = EtcConfig {
        episodes: args.episodes,
        exploration: args
            .exploration
            .unwrap_or_else(|| ((args.scale * n.powf(2.0 / 3.0)).ceil() as usize).min(args.episodes)),
        horizon: args.horizon,
        tolerance: args.tolerance.unwrap_or_else(|| n.powf(-2.0 / 3.0)),
        delta: args.delta,
        floor: args.floor,
    };
    let res = rl::explore_then_commit(&mdp, &spec, &pi0, &cfg, &mut SeedTree::new(seed).rng())?;
    header(out, &["episode", "reward", "cumulative_regret"])?;
    for (i, (r, c)) in res.episode_rewards.iter().zip(&res.cumulative_regret).enumerate() {
        row(out, &[(i + 1).to_string(), num(*r), num(*c)])?;
    }
    eprintln!("exploration: {}", cfg.exploration);
    eprintln!("tolerance: {}", num(cfg.tolerance));
    eprintln!("comparator_reward: {}", num(res.comparator_reward));
    eprintln!("exploration_reward: {}", num(res.exploration_reward));
    eprintln!("committed_reward: {}", num(res.committed_reward));
    eprintln!("committed_gap: {}", num(res.committed_gap));
    eprintln!("fell_back: {}", res.fell_back);
    eprintln!("floor_satisfied: {}", res.floor_satisfied);
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct Chain {
    transition: Vec<Vec<f64>>,
    #[serde(default)]
    eps0: Option<f64>,
}

pub fn mix<W: Write>(args: &MixArgs, out: &mut W) -> Result<ExitCode> {
    let chain: Chain = load_json(&args.chain)?;
    let eps0 = args
        .eps0
        .or(chain.eps0)
        .ok_or_else(|| CliError::Invalid("no eps0 in the chain document or on the command line".into()))?;
    let stationary = rl::stationary_distribution(&chain.transition, 1e-13)?;
    let steps = rl::mixing_time(&chain.transition, eps0)?;
    let mut names = vec!["eps0".to_string(), "mixing_time".to_string()];
    names.extend((0..chain.transition.len()).map(|i| format!("stationary_{i}")));
    row(out, &names)?;
    let mut fields = vec![num(eps0), steps.to_string()];
    fields.extend(stationary.distribution.iter().map(|&p| num(p)));
    row(out, &fields)?;
    Ok(ExitCode::SUCCESS)
}
