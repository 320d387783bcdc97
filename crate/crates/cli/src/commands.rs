//! Subcommand implementations over the core library.

use crate::config::Config;
use crate::output::{atomic_write, csv_table, fmt, fmt_opt, write_binary_table};
use fastdiff_core::harness::{build_stepper, probability_estimate, run_sweep, AveragingPlan};
use fastdiff_core::limit::{build_limit_system, integrate_limit, NoiseDriver};
use fastdiff_core::rng::{purpose, StreamKey};
use fastdiff_core::solver::{grid_lp_norm, simulate_path, SpectralState};
use fastdiff_core::{assemble_covariance, closed_form_c2_heat, Error, Regime, Result};
use fastdiff_core::rng::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Everything a subcommand needs.
pub struct RunContext {
    /// Fully resolved configuration (flag overrides applied).
    pub config: Config,
    /// Worker threads (0 = library default).
    pub workers: usize,
    /// Output directory.
    pub out_dir: PathBuf,
}

impl RunContext {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn tool_header(&self) -> serde_json::Value {
        serde_json::json!({
            "name": "fastdiff",
            "version": env!("CARGO_PKG_VERSION"),
        })
    }
}

/// `constants`: evaluate the noise-induced constants of the limit drift,
/// optionally cross-checked by the independent series oracle, and flag any
/// gap to the literal heat closed form.
pub fn cmd_constants(ctx: &RunContext, with_oracle: bool) -> Result<()> {
    let cfg = &ctx.config;
    if cfg.system.regime != Regime::Case1 {
        return Err(Error::Config(
            "constants are defined for the mass-conserving regime (case1)".into(),
        ));
    }
    let system = cfg.system_spec()?;
    let noise = cfg.noise_spec()?;
    let trunc = cfg.truncation()?;
    let cov = assemble_covariance(&noise, trunc)?;
    let limit = build_limit_system(&system, &cov, cfg.numerics.tail_tol)?;

    let oracle = if with_oracle {
        // brute-force levels up to 200, independent of the production series
        let levels: Vec<u32> = [25u32, 50, 100, 200]
            .iter()
            .copied()
            .filter(|&k| k >= trunc.k_max().min(25))
            .collect();
        let mut per_species = Vec::new();
        for i in 0..system.n {
            let (value, banded) =
                fastdiff_core::limit::oracle::c2_series(&noise, i, system.d[i], &levels)?;
            per_species.push(serde_json::json!({
                "species": i,
                "value": value,
                "levels": levels,
                "banded": banded,
            }));
        }
        Some(per_species)
    } else {
        None
    };

    let literal = if system.n == 1 { Some(closed_form_c2_heat(&noise)?) } else { None };
    let series_c2 = limit
        .constants
        .iter()
        .find(|c| c.ell.iter().sum::<u32>() == 2)
        .map(|c| c.value);
    let literal_gap = match (literal, series_c2) {
        (Some(l), Some(s)) => Some(l - s),
        _ => None,
    };

    let report = serde_json::json!({
        "tool": ctx.tool_header(),
        "config_sha256": cfg.sha256(),
        "truncation_k": trunc.k_max(),
        "constants": limit.constants,
        "drift": limit.drift,
        "closed_form_heat_literal": literal,
        "literal_minus_series": literal_gap,
        "literal_discrepancy_flagged": literal_gap.map(|g| {
            let tail: f64 = limit.constants.iter().map(|c| c.tail_bound).sum();
            g.abs() > tail + 1e-8
        }),
        "oracle": oracle,
    });
    let path = ctx.path("constants.json");
    atomic_write(&path, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;

    for c in &limit.constants {
        println!(
            "C_{:?} = {} (tail bound {:.3e}, K = {})",
            c.ell, c.value, c.tail_bound, c.k_used
        );
    }
    if let (Some(l), Some(s)) = (literal, series_c2) {
        println!("literal closed form = {l} (series {s}, gap {})", l - s);
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// `simulate`: one full-system trajectory at the first epsilon, written as a
/// save-time table (CSV and/or binary per the output config).
pub fn cmd_simulate(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let plan = cfg.plan(ctx.workers)?;
    let epsilon = plan.epsilons[0];
    let cov = assemble_covariance(&plan.noise, plan.trunc)?;
    let (stepper, n_steps) = build_stepper(&plan, &cov, epsilon, 1)?;
    let save_every = n_steps / (plan.save_count - 1);

    let mut state = SpectralState::new(plan.initial_coeffs(epsilon), plan.initial_conv());
    let mut ws = stepper.workspace();
    let mut rng = StreamKey::root(plan.seed).child(0).child(0).child(purpose::SPDE_NOISE).rng();

    let probes: Vec<(usize, usize)> = cfg
        .output
        .probes
        .iter()
        .filter(|p| p[0] <= plan.trunc.k_max() && p[1] <= plan.trunc.k_max())
        .map(|p| (p[0] as usize, p[1] as usize))
        .collect();

    let mut columns: Vec<String> = vec!["t".into()];
    for i in 0..plan.system.n {
        columns.push(format!("mean_{i}"));
    }
    for i in 0..plan.system.n {
        for (k1, k2) in &probes {
            columns.push(format!("coeff_{i}_{k1}_{k2}"));
        }
    }
    for i in 0..plan.system.n {
        columns.push(format!("l{}_norm_{i}", plan.p));
    }
    columns.push(format!("l{}_norm", 2 * plan.system.max_degree().max(1)));

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(plan.save_count);
    let p = plan.p;
    let summary = simulate_path(
        &stepper,
        &mut state,
        &mut ws,
        &mut rng,
        plan.t0,
        n_steps,
        save_every,
        |view| {
            let mut row = vec![view.state.t];
            for i in 0..view.state.coeffs.len() {
                row.push(view.state.coeffs[i][(0, 0)]);
            }
            for c in &view.state.coeffs {
                for &(k1, k2) in &probes {
                    row.push(c[(k1, k2)]);
                }
            }
            for g in view.grids.iter() {
                row.push(grid_lp_norm(&[g], p));
            }
            row.push(view.norm_2m);
            rows.push(row);
        },
    )?;

    let col_refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    write_tables(ctx, "trajectory", &col_refs, &rows)?;
    match summary.stopped_at {
        Some(t) => println!(
            "epsilon = {epsilon}: stopped at the norm cutoff, tau* = {t} ({} saves)",
            rows.len()
        ),
        None => println!("epsilon = {epsilon}: reached t = {} ({} saves)", plan.t0, rows.len()),
    }
    Ok(())
}

/// `limit`: integrate the effective limit equation on its own (fresh
/// Brownian increments in Case 2).
pub fn cmd_limit(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let plan = cfg.plan(ctx.workers)?;
    let cov = assemble_covariance(&plan.noise, plan.trunc)?;
    let sys = build_limit_system(&plan.system, &cov, plan.tail_tol)?;
    let n_lim = plan.limit_steps();
    let mut rng = StreamKey::root(plan.seed).child(purpose::LIMIT_FRESH).rng();
    let driver = match sys.regime {
        Regime::Case1 => NoiseDriver::None,
        Regime::Case2 => NoiseDriver::Fresh(&mut rng),
    };
    let traj = integrate_limit::<ChaCha8Rng>(&sys, &plan.u0_mean, plan.t0, n_lim, driver)?;

    let mut columns: Vec<String> = vec!["t".into()];
    for i in 0..plan.system.n {
        columns.push(format!("b_{i}"));
    }
    let rows: Vec<Vec<f64>> = traj
        .times
        .iter()
        .zip(&traj.values)
        .step_by(plan.limit_substeps)
        .map(|(&t, v)| {
            let mut row = vec![t];
            row.extend_from_slice(v);
            row
        })
        .collect();
    let col_refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    write_tables(ctx, "limit", &col_refs, &rows)?;
    match traj.t1_stop {
        Some(t1) => println!("positivity stop at T1 = {t1}"),
        None => println!("limit path reached t = {}", plan.t0),
    }
    Ok(())
}

/// `sweep`: the full Monte-Carlo comparison; emits `results.csv`,
/// `paths.csv` and `report.json`.
pub fn cmd_sweep(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let plan = cfg.plan(ctx.workers)?;
    let result = run_sweep(&plan)?;

    let results_rows: Vec<Vec<String>> = result
        .per_epsilon
        .iter()
        .map(|s| {
            let pe = probability_estimate(
                &result
                    .per_path
                    .iter()
                    .filter(|r| r.epsilon == s.epsilon)
                    .map(|r| r.sup_error)
                    .collect::<Vec<_>>(),
                s.threshold,
            );
            vec![
                fmt(s.epsilon),
                fmt(s.h),
                s.n_steps.to_string(),
                fmt(s.median_err),
                fmt(s.mean_err),
                fmt(s.q90_err),
                fmt(s.median_mean_err),
                fmt(s.tau_stop_fraction),
                fmt(s.t1_stop_fraction),
                fmt(s.threshold),
                s.exceed_count.to_string(),
                fmt(pe.frequency),
                fmt(pe.wilson_low),
                fmt(pe.wilson_high),
            ]
        })
        .collect();
    atomic_write(
        &ctx.path("results.csv"),
        csv_table(
            &[
                "epsilon",
                "h",
                "n_steps",
                "median_err",
                "mean_err",
                "q90_err",
                "median_mean_err",
                "tau_stop_fraction",
                "t1_stop_fraction",
                "threshold",
                "exceed_count",
                "exceed_freq",
                "wilson_low",
                "wilson_high",
            ],
            &results_rows,
        )
        .as_bytes(),
    )?;

    let path_rows: Vec<Vec<String>> = result
        .per_path
        .iter()
        .map(|r| {
            vec![
                fmt(r.epsilon),
                r.path.to_string(),
                fmt(r.sup_error),
                fmt(r.sup_mean_error),
                fmt(r.identity_residual),
                fmt_opt(r.stopped_at),
                fmt_opt(r.t1_stop),
                r.seed_tuple.0.to_string(),
                r.seed_tuple.1.to_string(),
                r.seed_tuple.2.to_string(),
            ]
        })
        .collect();
    atomic_write(
        &ctx.path("paths.csv"),
        csv_table(
            &[
                "epsilon",
                "path",
                "sup_error",
                "sup_mean_error",
                "identity_residual",
                "stopped_at",
                "t1_stop",
                "seed",
                "eps_index",
                "path_index",
            ],
            &path_rows,
        )
        .as_bytes(),
    )?;

    let report = serde_json::json!({
        "tool": ctx.tool_header(),
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).unwrap(),
        "config_sha256": cfg.sha256(),
        "workers": ctx.workers,
        "results": result,
        "files": ["results.csv", "paths.csv"],
    });
    atomic_write(
        &ctx.path("report.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;

    match &result.regression {
        Some(r) => println!(
            "order regression: slope {:.3}, intercept {:.3}, R^2 {:.4}",
            r.slope, r.intercept, r.r_squared
        ),
        None => println!("order regression: skipped (degenerate medians)"),
    }
    if let Some(sc) = &result.self_convergence {
        println!(
            "self-convergence: discrepancy {:.3e} vs error {:.3e} (ratio {:.3}{})",
            sc.median_discrepancy,
            sc.error_reference,
            sc.ratio,
            if sc.h_biased { ", h-biased" } else { "" }
        );
    }
    for s in &result.per_epsilon {
        println!(
            "eps {:>7}: median {:.4e}, q90 {:.4e}, tau-stops {:.0}%, exceed {}/{}",
            s.epsilon,
            s.median_err,
            s.q90_err,
            100.0 * s.tau_stop_fraction,
            s.exceed_count,
            plan.paths
        );
    }
    println!("wrote {}", ctx.path("report.json").display());
    Ok(())
}

/// `average`: averaging statistics of one fast OU mode across the epsilon
/// list; emits `average.json`.
pub fn cmd_average(ctx: &RunContext) -> Result<()> {
    let cfg = &ctx.config;
    let avg = cfg
        .experiment
        .averaging
        .as_ref()
        .ok_or_else(|| Error::Config("config has no experiment.averaging section".into()))?;
    let noise = cfg.noise_spec()?;
    let system = cfg.system_spec()?;
    if avg.species >= system.n {
        return Err(Error::Config("averaging names a nonexistent species".into()));
    }
    let trunc = cfg.truncation()?;
    let cov = assemble_covariance(&noise, trunc)?;
    let mode = fastdiff_core::ModeIndex::new(avg.mode[0], avg.mode[1]);
    if mode.is_mean() {
        return Err(Error::Config("averaging mode must be a fluctuation mode".into()));
    }
    let mut plan = AveragingPlan::for_mode(
        &cov,
        avg.species,
        mode,
        cfg.experiment.epsilons.clone(),
        avg.t,
        avg.paths,
        cfg.experiment.seed,
    );
    plan.d = system.d[avg.species];
    plan.theta = avg.theta;
    plan.workers = ctx.workers;
    let report = fastdiff_core::averaging_check(&plan)?;

    let doc = serde_json::json!({
        "tool": ctx.tool_header(),
        "config_sha256": cfg.sha256(),
        "species": avg.species,
        "mode": avg.mode,
        "q": plan.q,
        "lambda": plan.lambda,
        "report": report,
    });
    atomic_write(&ctx.path("average.json"), serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;

    println!("stationary value q/(2 d lambda) = {}", report.stationary);
    for p in &report.points {
        println!(
            "eps {:>7}: E|int Z|/T = {:.4e}, E|int Z^2/T - v| = {:.4e} ({} steps)",
            p.epsilon, p.mean_abs_z_integral, p.mean_abs_z2_deviation, p.n_steps
        );
    }
    println!(
        "slopes: Z {:?}, Z^2 deviation {:?}",
        report.slope_z, report.slope_z2
    );
    Ok(())
}

/// Write a numeric table in every configured format.
fn write_tables(ctx: &RunContext, stem: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    for format in &ctx.config.output.formats {
        match format.as_str() {
            "csv" => {
                let string_rows: Vec<Vec<String>> =
                    rows.iter().map(|r| r.iter().map(|v| fmt(*v)).collect()).collect();
                let path = ctx.path(&format!("{stem}.csv"));
                atomic_write(&path, csv_table(columns, &string_rows).as_bytes())?;
                println!("wrote {}", path.display());
            }
            "bin" => {
                let path = ctx.path(&format!("{stem}.bin"));
                write_binary_table(&path, columns, rows)?;
                println!("wrote {}", path.display());
            }
            other => return Err(Error::Config(format!("unknown output format '{other}'"))),
        }
    }
    Ok(())
}

/// Map an error to the documented process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::SizeMismatch(_) | Error::TruncationInsufficient { .. } => 2,
        Error::BlowUp { .. } | Error::Factorization(_) => 3,
        Error::AllPathsStopped { .. } => 4,
    }
}

#[allow(dead_code)]
fn _assert_path_types(_: &Path) {}
