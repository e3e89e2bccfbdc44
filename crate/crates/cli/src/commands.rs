use std::io::{self, Write};
use std::path::PathBuf;

use exitlab::density::{kde, mean_and_sd, sample_m_at, small_ball_check, weighted_gaps, GaussianReference, TPrimePolicy};
use exitlab::flow::{build_conjugation_table, conjugation, deterministic_exit_time, integrate_flow, FlowError, FlowSolverConfig};
use exitlab::model::{validate_model, ModelSpec, Side};
use exitlab::problem::Problem;
use exitlab::rare::{
    conditional_exit_distribution, exit_time_residuals, tail_direct, tail_splitting, RareError, ResidualSummary,
    TailQuery,
};
use exitlab::rng::{PathStream, StreamKey};
use exitlab::sde::{exit_summary, simulate_path, Scheme, SimConfig};
use exitlab::theory::{deterministic_t, exit_split, lambda_constant, recursion_schedule, scale_function_split};
use exitlab::verify::run_suite;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::output::{num, write_csv, Context, LoadedModel};
use crate::{
    ConjugationArgs, DensityArgs, FlowArgs, MethodArg, SchemeArg, SignArg, SimArgs, SimulateArgs, SmallBallArgs,
    SolverArgs, TailArgs, TheoryArgs, VerifyArgs,
};

type Outcome = Result<(), CliError>;

fn model_spec(loaded: &LoadedModel) -> Result<ModelSpec<f64>, CliError> {
    Ok(validate_model(&loaded.input)?)
}

fn problem(loaded: &LoadedModel) -> Result<Problem<f64>, CliError> {
    Ok(Problem::from_input(&loaded.input, None)?)
}

fn solver(a: &SolverArgs) -> Result<FlowSolverConfig<f64>, CliError> {
    Ok(FlowSolverConfig::new(a.solver_dt, a.tol)?)
}

fn scheme(s: SchemeArg) -> Scheme {
    match s {
        SchemeArg::Euler => Scheme::Euler,
        SchemeArg::Milstein => Scheme::Milstein,
    }
}

/// `--max-time` wins; otherwise `extra + (2 log(1/eps) + 10) / lambda`.
fn sim_config(a: &SimArgs, eps: f64, lambda: f64, extra: f64) -> Result<SimConfig<f64>, CliError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CliError::Usage(format!("--eps must lie in (0, 1), got {eps}")));
    }
    let max_time = a.max_time.unwrap_or(extra + SimConfig::default_max_time(eps, lambda));
    Ok(SimConfig::new(a.dt, eps, scheme(a.scheme), max_time)?)
}

fn sim_params(cfg: &SimConfig<f64>) -> Value {
    json!({
        "dt": cfg.dt,
        "scheme": cfg.scheme,
        "max_time": cfg.max_time,
        "exit_refinement": "linear interpolation within the crossing step",
    })
}

fn side_str(s: Option<Side>) -> &'static str {
    match s {
        Some(Side::Plus) => "+",
        Some(Side::Minus) => "-",
        None => "",
    }
}

pub fn flow(ctx: &Context, a: &FlowArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let model = model_spec(&loaded)?;
    let cfg = solver(&a.solver)?;
    let end = integrate_flow(&model, a.x, a.t, &cfg)?;
    let f_x = conjugation(&model, a.x, &cfg)?;
    let f_end = conjugation(&model, end, &cfg)?;
    let pushed = (model.lambda * a.t).exp() * f_x;
    let exit = match deterministic_exit_time(&model, a.x, &cfg) {
        Ok((tau, side)) => json!({ "tau": tau, "side": side }),
        Err(FlowError::AtEquilibrium) => Value::Null,
        Err(e) => return Err(e.into()),
    };
    let result = json!({
        "lambda": model.lambda,
        "x": a.x,
        "t": a.t,
        "flow": end,
        "f_x": f_x,
        "f_flow": f_end,
        "exp_lambda_t_f_x": pushed,
        "conjugation_residual": (f_end - pushed).abs(),
        "deterministic_exit": exit,
    });
    let params = json!({ "x": a.x, "t": a.t, "solver_dt": cfg.dt, "tol": cfg.tol });
    let units = json!({ "x": "state", "t": "model time", "flow": "state", "f": "linearized state" });
    ctx.emit_json(&ctx.envelope(Some(&loaded), params, units, result))?;
    eprintln!("flow: S^{} {} = {end:.12}, f residual {:.2e}", a.t, a.x, (f_end - pushed).abs());
    Ok(())
}

pub fn conjugation_table(ctx: &Context, a: &ConjugationArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let model = model_spec(&loaded)?;
    let cfg = solver(&a.solver)?;
    let table = build_conjugation_table(&model, a.grid, &cfg)?;
    let rows: Vec<Vec<String>> = table
        .grid
        .iter()
        .zip(&table.f_values)
        .map(|(x, f)| vec![num(*x), num(*f)])
        .collect();
    let result = json!({
        "lambda": model.lambda,
        "points": table.grid.len(),
        "f_qminus": table.f_qminus,
        "f_qplus": table.f_qplus,
        "linear_drift": model.is_linear_drift(),
        "eta_bound": model.eta_bound,
    });
    let params = json!({ "grid": a.grid, "solver_dt": cfg.dt, "tol": cfg.tol });
    let units = json!({ "x": "state", "f_of_x": "linearized state" });
    ctx.emit_csv(&["x", "f_of_x"], &rows, &ctx.envelope(Some(&loaded), params, units, result))?;
    eprintln!(
        "conjugation: {} points, f(q-) = {:.10}, f(q+) = {:.10}",
        table.grid.len(),
        table.f_qminus,
        table.f_qplus
    );
    Ok(())
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let model = model_spec(&loaded)?;
    let cfg = sim_config(&a.sim, a.eps, model.lambda, 0.0)?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    if !model.contains(a.x0) {
        return Err(CliError::Usage(format!(
            "--x0 {} lies outside [{}, {}]",
            a.x0, model.q_minus, model.q_plus
        )));
    }
    let sample = exit_summary(&model, a.x0, &cfg, a.n, ctx.seed)?;
    let rows: Vec<Vec<String>> = (0..sample.len())
        .map(|j| {
            let side = sample.side[j];
            vec![
                j.to_string(),
                num(sample.tau[j]),
                side_str(side).to_string(),
                u8::from(side.is_none()).to_string(),
            ]
        })
        .collect();
    let mut dump = Value::Null;
    if let Some(k) = a.dump_path {
        if k >= a.n {
            return Err(CliError::Usage(format!("--dump-path {k} must be below --n {}", a.n)));
        }
        let path = simulate_path(&model, a.x0, &cfg, &mut PathStream::new(StreamKey::path(ctx.seed, k as u64)))?;
        let target = a.dump_out.clone().unwrap_or_else(|| {
            let name = format!("path-{k}.csv");
            match ctx.out.as_deref().and_then(|p| p.parent()) {
                Some(dir) => dir.join(name),
                None => PathBuf::from(name),
            }
        });
        let traj: Vec<Vec<String>> = path
            .times
            .iter()
            .zip(&path.states)
            .map(|(t, x)| vec![num(*t), num(*x)])
            .collect();
        write_csv(&target, &["t", "x"], &traj)?;
        dump = json!({ "path_id": k, "file": target, "steps": path.dw.len() });
    }
    let exited = sample.len() - sample.censored();
    let result = json!({
        "n": sample.len(),
        "exits_plus": sample.count(Side::Plus),
        "exits_minus": sample.count(Side::Minus),
        "censored": sample.censored(),
        "mean_tau": if exited > 0 { sample.mean_tau() } else { f64::NAN },
        "sd_tau": if exited > 1 { sample.std_tau() } else { f64::NAN },
        "trajectory": dump,
    });
    let mut params = json!({ "eps": a.eps, "x0": a.x0, "n": a.n, "seed": ctx.seed });
    merge(&mut params, sim_params(&cfg));
    let units = json!({ "tau": "model time", "side": "+ for q+, - for q-, empty when censored", "censored": "1 if no exit by max_time (tau = max_time)" });
    ctx.emit_csv(
        &["path_id", "tau", "side", "censored"],
        &rows,
        &ctx.envelope(Some(&loaded), params, units, result),
    )?;
    eprintln!(
        "simulate: {} paths, {} at q+, {} at q-, {} censored",
        sample.len(),
        sample.count(Side::Plus),
        sample.count(Side::Minus),
        sample.censored()
    );
    Ok(())
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

pub fn tail(ctx: &Context, a: &TailArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let p = problem(&loaded)?;
    let lambda = p.model.lambda;
    let query = TailQuery::new(a.alpha, a.eps, a.x)?;
    let horizon = query.horizon(lambda);
    let cfg = sim_config(&a.sim, a.eps, lambda, horizon)?;
    let est = match a.method {
        MethodArg::Direct => tail_direct(&p.model, &query, a.n, &cfg, ctx.seed)?,
        MethodArg::Splitting => tail_splitting(&p.model, &query, a.levels, a.n, &cfg, ctx.seed)?,
    };
    let lambda_x = lambda_constant(&p.constants, a.x);
    let asymptotic = lambda_x * a.eps.powf(a.alpha - 1.0);
    let (split_minus, split_plus) = exit_split(&p.constants);
    let conditional = match conditional_exit_distribution(&p.constants, &est) {
        Ok(c) => json!(c),
        Err(e @ RareError::InsufficientSample { .. }) => json!({ "unavailable": e.to_string() }),
        Err(e) => return Err(e.into()),
    };
    let residuals = if a.residuals > 0 {
        let lin = p.linearized()?;
        let values = exit_time_residuals(&p.conj, lin, &p.constants, a.x, a.residuals, &cfg, ctx.seed)?;
        json!(ResidualSummary::from_values(values))
    } else {
        Value::Null
    };
    let result = json!({
        "estimate": est,
        "theoretical": {
            "lambda_x": lambda_x,
            "tail": asymptotic,
            "ratio": est.p_hat / asymptotic,
            "exit_split": { "minus": split_minus, "plus": split_plus },
        },
        "conditional_split": conditional,
        "exit_time_residuals": residuals,
    });
    let mut params = json!({
        "eps": a.eps,
        "alpha": a.alpha,
        "x": a.x,
        "method": match a.method { MethodArg::Direct => "direct", MethodArg::Splitting => "splitting" },
        "levels": a.levels,
        "n": a.n,
        "seed": ctx.seed,
        "horizon": horizon,
    });
    merge(&mut params, sim_params(&cfg));
    let units = json!({
        "p_hat": "probability of no exit before the horizon",
        "horizon": "model time, (alpha/lambda) log(1/eps)",
        "x": "start point in units of eps",
    });
    ctx.emit_json(&ctx.envelope(Some(&loaded), params, units, result))?;
    eprintln!(
        "tail: p_hat = {:.6e} [{:.6e}, {:.6e}], Lambda eps^(alpha-1) = {asymptotic:.6e}, ratio {:.4}",
        est.p_hat,
        est.ci_low,
        est.ci_high,
        est.p_hat / asymptotic
    );
    for w in &est.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn density(ctx: &Context, a: &DensityArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let p = problem(&loaded)?;
    let lin = p.linearized()?;
    let cfg = sim_config(&a.sim, a.eps, p.model.lambda, 0.0)?;
    let policy = TPrimePolicy::with_exponent(a.exponent);
    let t_prime = policy.t_prime(a.eps, p.model.lambda)?;
    let sample = sample_m_at(lin, a.x, &policy, a.n, &cfg, ctx.seed)?;
    let est = kde(&sample, a.bandwidth, a.x)?;
    let reference = GaussianReference::new(a.x, p.model.sigma0(), p.model.lambda)?;
    let gaps = weighted_gaps(&est, &reference);
    let rows: Vec<Vec<String>> = (0..est.grid.len())
        .map(|i| {
            let z = est.grid[i];
            vec![num(z), num(est.values[i]), num(reference.density(z)), num(gaps[i])]
        })
        .collect();
    let sup = gaps.iter().copied().fold(0.0, f64::max);
    let (mean, sd) = mean_and_sd(&sample);
    let result = json!({
        "t_prime": t_prime,
        "bandwidth": est.bandwidth,
        "weighted_sup_distance": sup,
        "sample_mean": mean,
        "sample_sd": sd,
        "reference": reference,
        "kde_integral": est.integral(),
    });
    let mut params = json!({ "eps": a.eps, "x": a.x, "n": a.n, "exponent": a.exponent, "seed": ctx.seed });
    merge(&mut params, sim_params(&cfg));
    let units = json!({
        "z": "value of M(T')",
        "p_emp": "kernel density estimate",
        "p_ref": "density of N(x, sigma0^2/(2 lambda))",
        "weighted_gap": "|p_emp - p_ref| e^{|x - z|}",
    });
    ctx.emit_csv(
        &["z", "p_emp", "p_ref", "weighted_gap"],
        &rows,
        &ctx.envelope(Some(&loaded), params, units, result),
    )?;
    eprintln!("density: weighted sup distance {sup:.5} (h = {:.5}, T' = {t_prime:.4})", est.bandwidth);
    Ok(())
}

pub fn smallball(ctx: &Context, a: &SmallBallArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let p = problem(&loaded)?;
    let lin = p.linearized()?;
    let cfg = sim_config(&a.sim, a.eps, p.model.lambda, 0.0)?;
    let sign = match a.sign {
        SignArg::Plus => Side::Plus,
        SignArg::Minus => Side::Minus,
    };
    let sb = small_ball_check(lin, a.x, a.theta, a.c, sign, a.n, &cfg, ctx.seed)?;
    let mut params = json!({ "eps": a.eps, "x": a.x, "theta": a.theta, "c": a.c, "sign": sign, "n": a.n, "seed": ctx.seed });
    merge(&mut params, sim_params(&cfg));
    let units = json!({
        "a": "ball radius in M units, c eps^theta",
        "t_eps": "model time, (log(R/eps) - log a)/lambda",
        "empirical": "frequency of 0 < sign M(T_eps) <= a",
    });
    ctx.emit_json(&ctx.envelope(Some(&loaded), params, units, json!(sb)))?;
    eprintln!(
        "smallball: empirical {:.6} (se {:.6}) vs p(0) a = {:.6}, ratio {:.4}",
        sb.empirical, sb.se, sb.theoretical, sb.ratio
    );
    for w in &sb.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn theory(ctx: &Context, a: &TheoryArgs) -> Outcome {
    let loaded = ctx.load_model()?;
    let p = problem(&loaded)?;
    let c = &p.constants;
    if !(a.eps > 0.0 && a.eps < 1.0) {
        return Err(CliError::Usage(format!("--eps must lie in (0, 1), got {}", a.eps)));
    }
    let query = TailQuery::new(a.alpha, a.eps, a.x)?;
    let lambda_x = lambda_constant(c, a.x);
    let (split_minus, split_plus) = exit_split(c);
    let schedule = recursion_schedule(a.eps, a.theta, c.lambda, c.sigma0)?;
    let scale = match scale_function_split(&p.model, a.eps, a.eps * a.x) {
        Ok(v) => json!(v),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    let result = json!({
        "lambda": c.lambda,
        "sigma0": c.sigma0,
        "Lambda": lambda_x,
        "tail": lambda_x * a.eps.powf(a.alpha - 1.0),
        "horizon": query.horizon(c.lambda),
        "exit_split": { "minus": split_minus, "plus": split_plus },
        "f_qminus": c.f_qminus,
        "f_qplus": c.f_qplus,
        "C_minus": c.c_minus,
        "C_plus": c.c_plus,
        "R": p.nbhd.r,
        "V": [p.nbhd.v_minus, p.nbhd.v_plus],
        "T_eps": deterministic_t(a.eps, p.nbhd.r, a.theta, c.lambda),
        "limit_variance": c.limit_variance(),
        "schedule": schedule,
        "scale_function_split": scale,
        "warnings": query.warnings(&p.model),
    });
    let params = json!({ "eps": a.eps, "alpha": a.alpha, "x": a.x, "theta": a.theta, "seed": ctx.seed });
    let units = json!({
        "Lambda": "tail constant at x (x in units of eps)",
        "tail": "Lambda eps^(alpha-1), asymptotic P(no exit before horizon)",
        "horizon": "model time",
        "T_eps": "model time",
    });
    ctx.emit_json(&ctx.envelope(Some(&loaded), params, units, result))?;
    eprintln!(
        "theory: Lambda({}) = {lambda_x:.7}, split (-, +) = ({split_minus:.6}, {split_plus:.6})",
        a.x
    );
    Ok(())
}

pub fn verify(ctx: &Context, a: &VerifyArgs) -> Outcome {
    // the table is informational, so a closed stdout does not abort the suite
    let mut stdout = io::stdout();
    let _ = writeln!(stdout, "{:<4} {:<32} {:<6} {:>8}", "id", "criterion", "status", "seconds");
    let report = run_suite(a.suite, ctx.seed, |c| {
        let _ = writeln!(stdout, "{:<4} {:<32} {:<6} {:>8.1}", c.id, c.name, c.status, c.seconds);
    });
    let _ = writeln!(
        stdout,
        "{} passed, {} failed, {} skipped, {} errors",
        report.passed, report.failed, report.skipped, report.errors
    );
    if ctx.out.is_some() {
        let params = json!({ "suite": a.suite, "seed": ctx.seed });
        let units = json!({ "seconds": "wall time per criterion" });
        ctx.emit_json(&ctx.envelope(None, params, units, json!(report)))?;
    }
    Ok(())
}
