use std::ops::Range;
use std::path::Path;

use levystop_core::multi_stage::{lambda_cluster, perturbed_value, solve_cluster_threshold, solve_partition_with, SolverResolver};
use levystop_core::one_stage::value_at;
use levystop_core::verify::{generator_residual, simulate_strategy, simulate_two_sided_exit};
use levystop_core::{McEstimate, StagePartition};
use serde_json::{json, Value};

use crate::config::Problem;
use crate::CliError;

/// JSON number, or a string for infinities and NaN.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("+inf")
    } else {
        json!("-inf")
    }
}

/// 1-based stage numbers of a cluster.
fn stage_list(c: &Range<usize>) -> Vec<usize> {
    c.clone().map(|i| i + 1).collect()
}

fn describe(a: f64) -> String {
    if a == f64::INFINITY {
        "+inf (stop immediately)".into()
    } else if a == f64::NEG_INFINITY {
        "-inf (never stop)".into()
    } else {
        format!("{a}")
    }
}

pub fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Cluster thresholds in the order the solver computed them.
type Visited = Vec<(Range<usize>, f64)>;

fn solve_partition(problem: &Problem) -> Result<(StagePartition, Visited), CliError> {
    let mut resolver = SolverResolver::new(&problem.spec, &problem.ctx, problem.opts);
    let partition = solve_partition_with(&mut resolver, problem.spec.len())?;
    Ok((partition, resolver.visited()))
}

pub fn solve(problem: &Problem, out: Option<&Path>) -> Result<(), CliError> {
    let n = problem.spec.len();
    let (partition, visited) = solve_partition(problem)?;
    let singles =
        (0..n).map(|i| solve_cluster_threshold(&problem.spec, &problem.ctx, &(i..i + 1), &problem.opts)).collect::<Result<Vec<_>, _>>()?;
    let per_stage = partition.per_stage_thresholds();

    let mut text = String::new();
    if n == 1 {
        text.push_str(&format!("A* = {}\n", describe(per_stage[0])));
    } else {
        for (i, a) in singles.iter().enumerate() {
            text.push_str(&format!("stage {} alone: A* = {}\n", i + 1, describe(*a)));
        }
        for (c, &a) in partition.clusters.iter().zip(&partition.thresholds) {
            text.push_str(&format!("cluster {:?}: A* = {}\n", stage_list(c), describe(a)));
        }
        let list: Vec<String> = per_stage.iter().map(|a| describe(*a)).collect();
        text.push_str(&format!("thresholds: ({})\n", list.join(", ")));
    }
    print!("{text}");

    if let Some(path) = out {
        let cluster = |c: &Range<usize>, a: f64| json!({"stages": stage_list(c), "threshold": num(a)});
        let report = json!({
            "stage_thresholds": singles.iter().map(|&a| num(a)).collect::<Vec<_>>(),
            "visited": visited.iter().map(|(c, a)| cluster(c, *a)).collect::<Vec<_>>(),
            "partition": partition.clusters.iter().zip(&partition.thresholds).map(|(c, &a)| cluster(c, a)).collect::<Vec<_>>(),
            "thresholds": per_stage.iter().map(|&a| num(a)).collect::<Vec<_>>(),
        });
        emit(Some(path), &(serde_json::to_string_pretty(&report).unwrap() + "\n"))?;
    }
    Ok(())
}

/// Parses `--perturb` values such as `1,0,0;0,0,-1`.
pub fn parse_perturbations(args: &[String], n_stages: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let mut out = Vec::new();
    for arg in args {
        for vec in arg.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let parsed: Result<Vec<f64>, _> = vec.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let parsed = parsed.map_err(|e| CliError::Config(format!("--perturb {vec:?}: {e}")))?;
            if parsed.len() != n_stages {
                return Err(CliError::Config(format!("--perturb {vec:?}: expected {n_stages} entries, got {}", parsed.len())));
            }
            out.push(parsed);
        }
    }
    Ok(out)
}

fn grid(problem: &Problem) -> Vec<f64> {
    let o = problem.config.output;
    let n = o.n_points;
    (0..n).map(|i| o.x_min + (o.x_max - o.x_min) * i as f64 / (n - 1) as f64).collect()
}

pub fn value_grid(problem: &Problem, deltas: &[Vec<f64>], out: Option<&Path>) -> Result<(), CliError> {
    let (partition, _) = solve_partition(problem)?;
    let base = partition.per_stage_thresholds();
    let shifted: Vec<Vec<f64>> = deltas.iter().map(|d| base.iter().zip(d).map(|(a, s)| a + s).collect()).collect();
    for (k, t) in shifted.iter().enumerate() {
        if t.windows(2).any(|w| w[1] > w[0]) {
            return Err(CliError::Config(format!("--perturb vector {}: shifted thresholds {t:?} are not nonincreasing", k + 1)));
        }
    }

    let mut header = vec!["x".to_string(), "g".to_string()];
    if problem.spec.len() == 1 {
        header.push("lambda".into());
    } else {
        for c in &partition.clusters {
            let names: Vec<String> = stage_list(c).iter().map(|i| i.to_string()).collect();
            header.push(format!("lambda_{}", names.join("_")));
        }
    }
    header.push("value".into());
    header.extend((1..=deltas.len()).map(|k| format!("perturbed_{k}")));

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    for x in grid(problem) {
        let mut row = vec![x];
        row.push(problem.spec.stages.iter().map(|s| s.g.eval(x)).sum());
        for c in &partition.clusters {
            row.push(lambda_cluster(&problem.spec, &problem.ctx, c, x)?);
        }
        row.push(perturbed_value(&problem.spec, &problem.ctx, &base, x)?);
        for t in &shifted {
            row.push(perturbed_value(&problem.spec, &problem.ctx, t, x)?);
        }
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    emit(out, &String::from_utf8(bytes).expect("csv output is ascii"))
}

fn estimate_json(est: &McEstimate, analytic: f64) -> (Value, bool) {
    let z = est.z_score(analytic);
    let pass = z.abs() <= 3.0;
    let v = json!({
        "analytic": num(analytic),
        "mean": num(est.mean),
        "std_error": num(est.std_error),
        "n": est.n,
        "truncation_bound": num(est.truncation_bound),
        "z": num(z),
        "pass": pass,
    });
    (v, pass)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub fn verify(problem: &Problem, seed: Option<u64>, shift: f64, out: Option<&Path>) -> Result<(), CliError> {
    let sim = problem.config.simulate.as_ref().ok_or_else(|| CliError::Config("simulate: section is required for verify".into()))?;
    let mut cfg = sim.sim;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (spec, ctx) = (&problem.spec, &problem.ctx);
    let model = ctx.model();
    let r = ctx.r();
    let (partition, _) = solve_partition(problem)?;
    let optimal = partition.per_stage_thresholds();
    let simulated: Vec<f64> = optimal.iter().map(|a| a + shift).collect();
    let mut all_pass = true;

    let x0s = if sim.x0.is_empty() {
        let top = optimal.iter().copied().find(|a| a.is_finite()).unwrap_or(0.0);
        vec![top + 0.5, top + 1.5, top + 3.0]
    } else {
        sim.x0.clone()
    };
    let mut mc = Vec::new();
    let mut dominance = Vec::new();
    let mut dominated = true;
    let mut strictly = false;
    for &x0 in &x0s {
        let best = perturbed_value(spec, ctx, &optimal, x0)?;
        let analytic = perturbed_value(spec, ctx, &simulated, x0)?;
        let est = simulate_strategy(model, r, &spec.stages, &simulated, x0, &cfg)?;
        let (mut v, pass) = estimate_json(&est, analytic);
        v["x0"] = num(x0);
        all_pass &= pass;
        mc.push(v);
        dominated &= best >= analytic - 1e-8;
        strictly |= best > analytic + 1e-8;
        dominance.push(json!({"x0": num(x0), "optimal": num(best), "simulated_strategy": num(analytic)}));
    }
    all_pass &= dominated;

    let mut exits = Vec::new();
    for &(x, b) in &sim.exit_pairs {
        let exact = ctx.first_passage_functionals(x, b)?;
        let (up, down) = simulate_two_sided_exit(model, r, x, b, &cfg)?;
        let (up_v, up_ok) = estimate_json(&up, exact.up);
        let (down_v, down_ok) = estimate_json(&down, exact.down);
        all_pass &= up_ok && down_ok;
        exits.push(json!({"x": num(x), "b": num(b), "up": up_v, "down": down_v, "pass": up_ok && down_ok}));
    }

    let mut residuals = Vec::new();
    for (c, &a) in partition.clusters.iter().zip(&partition.thresholds) {
        if !a.is_finite() {
            continue;
        }
        let stage = spec.cluster_stage(c);
        let n = sim.residual_points;
        let mut above: f64 = 0.0;
        for x in linspace(a + 0.1, a + 5.0, n) {
            let res = generator_residual(&stage, ctx, a, x)?;
            let u = value_at(&stage, ctx, a, x)?;
            above = above.max(res.abs() / (1.0 + u.abs()));
        }
        let mut below = f64::NEG_INFINITY;
        for x in linspace(a - 5.0, a - 0.1, n) {
            below = below.max(generator_residual(&stage, ctx, a, x)?);
        }
        let pass = above <= 1e-4 && below <= 1e-6;
        all_pass &= pass;
        residuals.push(json!({
            "stages": stage_list(c),
            "threshold": num(a),
            "max_scaled_abs_above": num(above),
            "max_below": num(below),
            "pass": pass,
        }));
    }

    let report = json!({
        "thresholds": optimal.iter().map(|&a| num(a)).collect::<Vec<_>>(),
        "threshold_shift": num(shift),
        "simulation": serde_json::to_value(cfg).unwrap(),
        "monte_carlo": mc,
        "fluctuation": exits,
        "generator_residual": residuals,
        "dominance": {
            "points": dominance,
            "optimal_strictly_larger": strictly,
            "pass": dominated,
        },
        "pass": all_pass,
    });
    emit(out, &(serde_json::to_string_pretty(&report).unwrap() + "\n"))?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::VerificationFailed)
    }
}
