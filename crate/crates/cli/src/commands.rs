use std::time::Instant;

use mftg_core::linalg::Mat;
use mftg_core::model::parse_matrix;
use mftg_core::riccati::{viability_at, ViabilityMode};
use mftg_core::{
    baseline_gda, find_min_viable_gamma, load_model, matrix_to_json, nash_gap, rgda, solve_riccati, Error, LearningTrace,
    LqMftgModel, LrSchedule, PolicyProfile, Result, RgdaConfig, RiccatiSolution, SimConfig, SmoothingParams, TraceRow,
};
use serde_json::{json, Value};

use crate::output::{self, fmt_f64, RunManifest, SummaryRow};
use crate::{Algo, CheckGammaArgs, CompareArgs, LearnArgs, Mode, Schedule, SolveArgs};

pub const THREADS_ENV: &str = "ROBUST_MFTG_THREADS";

const DEFAULT_BRACKET: (f64, f64, f64) = (1e-3, 1e3, 1e-6);

/// Sizes the global worker pool. The environment variable wins over the flag;
/// with neither, rayon picks its own default.
pub fn init_threads(flag: Option<usize>) -> Result<Option<usize>> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Parse {
            key: THREADS_ENV.into(),
            reason: format!("expected a positive integer, got {v:?}"),
        })?),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidArgument("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot size thread pool: {e}")))?;
    }
    Ok(threads)
}

fn seq_json(s: &[Mat]) -> Value {
    Value::Array(s.iter().map(matrix_to_json).collect())
}

fn oracle_of(sol: &RiccatiSolution) -> Option<&RiccatiSolution> {
    sol.solved().then_some(sol)
}

pub fn solve(args: &SolveArgs, argv: &[String], threads: Option<usize>) -> Result<()> {
    let model = load_model(&args.model)?;
    let sol = solve_riccati(&model);
    println!("nash_value={}", fmt_f64(sol.nash_value));
    println!("cond1={}", sol.cond1_holds);
    if let Some(dir) = &args.out {
        output::create_dir(dir)?;
        output::write_json(&dir.join("gains.json"), &sol.nash_gains.to_json())?;
        let values = json!({
            "gamma": sol.gamma,
            "nash_value": sol.nash_value,
            "cond1": sol.cond1_holds,
            "failed_at": sol.failed_at,
            "m": seq_json(&sol.m_seq),
            "m_bar": seq_json(&sol.m_bar_seq),
            "lambda": seq_json(&sol.lambda_seq),
            "lambda_bar": seq_json(&sol.lambda_bar_seq),
            "n": sol.n_seq,
            "n_bar": sol.n_bar_seq,
        });
        output::write_json(&dir.join("value_matrices.json"), &values)?;
        RunManifest {
            model_path: args.model.clone(),
            command: "solve".into(),
            argv: argv.to_vec(),
            model: model.to_json(),
            config: json!({}),
            seed: None,
            output_dir: dir.clone(),
            threads,
        }
        .write()?;
    }
    match sol.failed_at {
        Some(t) => {
            println!("failed_at={t}");
            Err(Error::NonFinite {
                what: "Riccati recursion (singular Lambda)",
                t,
                k: 0,
            })
        }
        None => Ok(()),
    }
}

pub fn check_gamma(args: &CheckGammaArgs, argv: &[String], threads: Option<usize>) -> Result<()> {
    let model = load_model(&args.model)?;
    let mode = match (args.mode, args.agents) {
        (Mode::Mf, _) => ViabilityMode::MeanField,
        (Mode::Finite, Some(n)) => ViabilityMode::Finite(n),
        (Mode::Finite, None) => {
            return Err(Error::InvalidArgument("--mode finite requires --agents".into()));
        }
    };
    let mode_json = match mode {
        ViabilityMode::MeanField => json!({"mode": "mf"}),
        ViabilityMode::Finite(n) => json!({"mode": "finite", "agents": n}),
    };
    let search = args.min_gamma || args.bisect.is_some();
    let (report, config) = if search {
        let (lo, hi, tol) = match args.bisect.as_deref() {
            Some(&[lo, hi, tol]) => (lo, hi, tol),
            _ => DEFAULT_BRACKET,
        };
        let config = json!({"search": true, "bisect": [lo, hi, tol], "viability": mode_json});
        match find_min_viable_gamma(&model, lo, hi, tol, mode)? {
            Some(g) => {
                let v = viability_at(&model, g, mode)?;
                println!("MIN-GAMMA gamma={} margin={}", fmt_f64(g), fmt_f64(v.margin));
                (json!({"verdict": "MIN-GAMMA", "gamma": g, "margin": v.margin}), config)
            }
            None => {
                println!("NONE-IN-RANGE");
                (json!({"verdict": "NONE-IN-RANGE", "gamma": null, "margin": null}), config)
            }
        }
    } else {
        let v = viability_at(&model, model.gamma, mode)?;
        let verdict = if v.viable { "VIABLE" } else { "NOT-VIABLE" };
        println!("{verdict} margin={}", fmt_f64(v.margin));
        let config = json!({"search": false, "viability": mode_json});
        (json!({"verdict": verdict, "gamma": model.gamma, "margin": v.margin}), config)
    };
    if let Some(dir) = &args.out {
        output::create_dir(dir)?;
        output::write_json(&dir.join("report.json"), &report)?;
        RunManifest {
            model_path: args.model.clone(),
            command: "check-gamma".into(),
            argv: argv.to_vec(),
            model: model.to_json(),
            config,
            seed: None,
            output_dir: dir.clone(),
            threads,
        }
        .write()?;
    }
    Ok(())
}

fn parse_cov(text: Option<&str>, key: &str, default: &Mat) -> Result<Mat> {
    let Some(text) = text else {
        return Ok(default.clone());
    };
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        key: key.into(),
        reason: e.to_string(),
    })?;
    parse_matrix(&value, key)
}

fn learn_config(model: &LqMftgModel, args: &LearnArgs) -> Result<RgdaConfig> {
    let mut cfg = match args.algo {
        Algo::Rgda => {
            let mut smoothing = SmoothingParams::new(args.radius, args.batch);
            smoothing.antithetic = args.antithetic;
            smoothing.baseline_subtract = args.baseline_subtract;
            RgdaConfig::zero_order(model, args.iters, args.lr, smoothing, SimConfig::new(args.agents, args.rollouts, args.seed))
        }
        Algo::Ergda | Algo::Baseline => RgdaConfig::exact(model, args.iters, args.lr),
    };
    cfg.lr = match args.lr_schedule {
        Schedule::Constant => LrSchedule::Constant(args.lr),
        Schedule::Inverse => LrSchedule::InverseK(args.lr),
    };
    cfg.seed = args.seed;
    cfg.proj_radius_sq = args.proj_radius_sq;
    cfg.eval_cov_y = parse_cov(args.eval_cov_y.as_deref(), "eval_cov_y", &cfg.eval_cov_y)?;
    cfg.eval_cov_z = parse_cov(args.eval_cov_z.as_deref(), "eval_cov_z", &cfg.eval_cov_z)?;
    cfg.early_stop = args.early_stop;
    cfg.record_wall_clock = args.wall_clock;
    Ok(cfg)
}

/// The configuration as the learner saw it, defaults included.
fn config_json(algo: Algo, cfg: &RgdaConfig, radius_sq: f64) -> Value {
    let (schedule, eta) = match cfg.lr {
        LrSchedule::Constant(eta) => ("constant", eta),
        LrSchedule::InverseK(eta) => ("inverse", eta),
    };
    json!({
        "algo": algo.name(),
        "gradient_mode": format!("{:?}", cfg.gradient_mode),
        "inner_iters": cfg.inner_iters,
        "lr": eta,
        "lr_schedule": schedule,
        "smoothing": {
            "radius": cfg.smoothing.radius,
            "batch": cfg.smoothing.batch,
            "antithetic": cfg.smoothing.antithetic,
            "baseline_subtract": cfg.smoothing.baseline_subtract,
        },
        "sim": {
            "n_agents": cfg.sim.n_agents,
            "n_rollouts": cfg.sim.n_rollouts,
            "seed": cfg.sim.seed,
            "antithetic": cfg.sim.antithetic,
        },
        "proj_radius_sq": radius_sq,
        "eval_cov_y": matrix_to_json(&cfg.eval_cov_y),
        "eval_cov_z": matrix_to_json(&cfg.eval_cov_z),
        "seed": cfg.seed,
        "early_stop": cfg.early_stop,
        "record_wall_clock": cfg.record_wall_clock,
    })
}

fn run_learner(
    algo: Algo,
    model: &LqMftgModel,
    cfg: &RgdaConfig,
    oracle: Option<&RiccatiSolution>,
) -> Result<(PolicyProfile, LearningTrace)> {
    match algo {
        Algo::Rgda | Algo::Ergda => rgda(model, cfg, oracle),
        Algo::Baseline => baseline_gda(model, cfg, oracle),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "absent".into())
}

pub fn learn(args: &LearnArgs, argv: &[String], threads: Option<usize>) -> Result<()> {
    let model = load_model(&args.model)?;
    let cfg = learn_config(&model, args)?;
    cfg.check(&model)?;
    let sol = solve_riccati(&model);
    let oracle = oracle_of(&sol);
    let (policy, trace) = run_learner(args.algo, &model, &cfg, oracle)?;

    let dir = &args.out;
    output::create_dir(dir)?;
    output::write_trace(&dir.join(format!("trace_{}.csv", args.algo.name())), args.algo.name(), &trace, args.seed)?;
    output::write_json(&dir.join("gains.json"), &policy.to_json())?;
    output::write_plot_script(dir)?;
    RunManifest {
        model_path: args.model.clone(),
        command: "learn".into(),
        argv: argv.to_vec(),
        model: model.to_json(),
        config: config_json(args.algo, &cfg, trace.proj_radius_sq),
        seed: Some(args.seed),
        output_dir: dir.clone(),
        threads,
    }
    .write()?;

    println!("algo={}", args.algo.name());
    println!("initial_gap={}", opt(trace.initial_gap));
    println!("final_gap={}", opt(trace.final_gap));
    println!("total_evals={}", trace.total_evals);
    Ok(())
}

/// Rebuilds the policy as it stood after the first `n` trace rows.
fn policy_after(model: &LqMftgModel, rows: &[TraceRow]) -> PolicyProfile {
    let mut policy = PolicyProfile::zeros(model);
    for row in rows {
        match row.t {
            Some(t) => policy.set_step(t, row.gains[0].clone()),
            None => {
                for (t, g) in row.gains.iter().enumerate() {
                    policy.set_step(t, g.clone());
                }
            }
        }
    }
    policy
}

/// Nash gap of the policy a learner held once it had spent `budget` gradient
/// evaluations. Steps not yet reached by the receding learner count as zero.
fn gap_at_budget(model: &LqMftgModel, trace: &LearningTrace, oracle: &RiccatiSolution, budget: u64) -> Result<f64> {
    let per_row = if trace.rows.is_empty() {
        1
    } else {
        (trace.total_evals / trace.rows.len() as u64).max(1)
    };
    let n = ((budget / per_row) as usize).min(trace.rows.len());
    Ok(nash_gap(&policy_after(model, &trace.rows[..n]), oracle)?.max())
}

pub fn compare(args: &CompareArgs, argv: &[String], threads: Option<usize>) -> Result<()> {
    let base = load_model(&args.model)?;
    if args.horizons.is_empty() {
        return Err(Error::InvalidArgument("--horizons must list at least one horizon".into()));
    }
    let dir = &args.out;
    output::create_dir(dir)?;
    let algos = [Algo::Ergda, Algo::Baseline];
    let mut summary = Vec::new();
    for &horizon in &args.horizons {
        let model = if horizon == base.horizon {
            base.clone()
        } else {
            base.with_horizon(horizon)?
        };
        let mut cfg = RgdaConfig::exact(&model, args.iters, args.lr);
        cfg.seed = args.seed;
        cfg.proj_radius_sq = args.proj_radius_sq;
        cfg.record_wall_clock = args.wall_clock;
        let sol = solve_riccati(&model);
        let oracle = oracle_of(&sol);

        let mut runs = Vec::new();
        for algo in algos {
            let start = Instant::now();
            let (policy, trace) = run_learner(algo, &model, &cfg, oracle)?;
            let wall_ms = if args.wall_clock {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let name = format!("{}_T{horizon}.csv", algo.name());
            output::write_trace(&dir.join(name), algo.name(), &trace, args.seed)?;
            runs.push((algo, policy, trace, wall_ms));
        }
        let budget = runs.iter().map(|r| r.2.total_evals).min().unwrap_or(0);
        for (algo, policy, trace, wall_ms) in &runs {
            let (final_gap, matched) = match oracle {
                Some(o) => (
                    Some(nash_gap(policy, o)?.max()),
                    Some(gap_at_budget(&model, trace, o, budget)?),
                ),
                None => (None, None),
            };
            summary.push(SummaryRow {
                algo: algo.name().into(),
                horizon,
                final_gap,
                budget_matched_gap: matched,
                total_evals: trace.total_evals,
                wall_ms: *wall_ms,
            });
        }
    }
    output::write_summary(&dir.join("summary.csv"), &summary)?;
    output::write_plot_script(dir)?;
    RunManifest {
        model_path: args.model.clone(),
        command: "compare".into(),
        argv: argv.to_vec(),
        model: base.to_json(),
        config: json!({
            "algos": algos.iter().map(|a| a.name()).collect::<Vec<_>>(),
            "horizons": args.horizons,
            "inner_iters": args.iters,
            "lr": args.lr,
            "lr_schedule": "constant",
            "proj_radius_sq": args.proj_radius_sq,
            "eval_cov": "identity",
            "seed": args.seed,
            "record_wall_clock": args.wall_clock,
        }),
        seed: Some(args.seed),
        output_dir: dir.clone(),
        threads,
    }
    .write()?;

    println!("algo,T,final_gap,budget_matched_gap,total_evals");
    for r in &summary {
        println!("{},{},{},{},{}", r.algo, r.horizon, opt(r.final_gap), opt(r.budget_matched_gap), r.total_evals);
    }
    Ok(())
}
