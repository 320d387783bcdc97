//! Monte-Carlo experiment orchestration: epsilon sweeps with per-path error
//! metrics against the limit equations, convergence-order regression,
//! averaging statistics for the fast OU modes, and exceedance-probability
//! estimates.
//!
//! Determinism contract: every path draws from a stream keyed by
//! `(seed, epsilon index, path index, purpose)`, results are reduced in
//! `(epsilon, path)` order, and the output is byte-identical for any worker
//! count.

use crate::basis::{eigenvalue, ModeIndex, Truncation};
use crate::error::{Error, Result};
use crate::limit::{build_limit_system, integrate_limit, LimitSystem, NoiseDriver};
use crate::noise::{assemble_covariance, BoundaryNoiseSpec, Regime};
use crate::rng::{purpose, StreamKey};
use crate::solver::{grid_lp_norm, SpectralState, Stepper, SystemSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Step-size rule of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum StepRule {
    /// Same step size for every epsilon.
    Fixed(f64),
    /// `h = coefficient * eps^2`, resolving the fast scale uniformly.
    Eps2(f64),
}

impl StepRule {
    /// Raw step size for an epsilon (before the stability guard).
    pub fn h(&self, epsilon: f64) -> f64 {
        match self {
            StepRule::Fixed(h) => *h,
            StepRule::Eps2(c) => c * epsilon * epsilon,
        }
    }
}

/// A full sweep plan: system, noise, grids and Monte-Carlo budget.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    /// The reaction-diffusion system.
    pub system: SystemSpec,
    /// Boundary noise specification (regime must match the system).
    pub noise: BoundaryNoiseSpec,
    /// Interior truncation.
    pub trunc: Truncation,
    /// Scale parameters, strictly decreasing, at least three for regression.
    pub epsilons: Vec<f64>,
    /// Monte-Carlo paths per epsilon.
    pub paths: usize,
    /// Experiment seed; with the path index it pins every stream.
    pub seed: u64,
    /// Time horizon `T_0`.
    pub t0: f64,
    /// Step-size rule, clamped by the reaction stability guard.
    pub h_rule: StepRule,
    /// Number of save times (including both endpoints).
    pub save_count: usize,
    /// Cutoff exponent `kappa` of the stopping time.
    pub kappa: f64,
    /// Error norm exponent.
    pub p: u32,
    /// Initial mean values `a_i(0)`.
    pub u0_mean: Vec<f64>,
    /// Initial fluctuation `psi(0)` as `(species, mode, amplitude)` triples.
    pub psi0: Vec<(usize, ModeIndex, f64)>,
    /// Coupled h-vs-h/2 companion paths at the smallest epsilon (0 disables
    /// the self-convergence gate).
    pub sc_paths: usize,
    /// Limit-equation substeps per save interval (also the recording grid
    /// for Case-2 noise coupling).
    pub limit_substeps: usize,
    /// Tail tolerance passed to the constant series.
    pub tail_tol: f64,
    /// Worker threads (0 = library default).
    pub workers: usize,
}

impl ExperimentPlan {
    /// Validate the plan against the theorem hypotheses and grid rules.
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let m = self.system.max_degree().max(1);
        self.noise.validate(m)?;
        if self.noise.regime != self.system.regime {
            return Err(Error::Config("noise and system regimes differ".into()));
        }
        if self.epsilons.len() < 3 {
            return Err(Error::Config("need at least three epsilons for a regression".into()));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("epsilon list must be strictly decreasing".into()));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config("epsilons must lie in (0,1)".into()));
        }
        let kappa_max = match self.system.regime {
            Regime::Case1 => 1.0 / (2.0 * m as f64 + 1.0),
            Regime::Case2 => 1.0 / (m as f64 + 2.0),
        };
        if !(self.kappa > 0.0 && self.kappa < kappa_max) {
            return Err(Error::Config(format!(
                "kappa = {} outside the theorem window (0, {kappa_max:.4})",
                self.kappa
            )));
        }
        if self.u0_mean.len() != self.system.n {
            return Err(Error::Config("u0 mean has wrong species count".into()));
        }
        for &(i, k, _) in &self.psi0 {
            if i >= self.system.n {
                return Err(Error::Config("psi0 names a nonexistent species".into()));
            }
            if k.is_mean() {
                return Err(Error::Config("psi0 must not contain the kernel mode".into()));
            }
            if k.k1 > self.trunc.k_max() || k.k2 > self.trunc.k_max() {
                return Err(Error::Config("psi0 mode outside the truncation".into()));
            }
        }
        if self.save_count < 2 {
            return Err(Error::Config("need at least two save times".into()));
        }
        if self.limit_substeps == 0 {
            return Err(Error::Config("limit_substeps must be positive".into()));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::Config("t0 must be positive".into()));
        }
        if self.paths == 0 {
            return Err(Error::Config("need at least one path".into()));
        }
        Ok(())
    }

    /// Steps of the limit-equation grid (also the Case-2 recording grid).
    pub fn limit_steps(&self) -> usize {
        (self.save_count - 1) * self.limit_substeps
    }

    /// Theorem error-threshold exponent: `1 - 2m kappa - kappa` (Case 1) or
    /// `1 - (m+2) kappa` (Case 2).
    pub fn threshold_exponent(&self) -> f64 {
        let m = self.system.max_degree().max(1) as f64;
        match self.system.regime {
            Regime::Case1 => 1.0 - 2.0 * m * self.kappa - self.kappa,
            Regime::Case2 => 1.0 - (m + 2.0) * self.kappa,
        }
    }

    /// Initial field coefficients for one epsilon (case 2 scales the
    /// fluctuation by epsilon).
    pub fn initial_coeffs(&self, epsilon: f64) -> Vec<DMatrix<f64>> {
        let fluct_scale = match self.system.regime {
            Regime::Case1 => 1.0,
            Regime::Case2 => epsilon,
        };
        let mut coeffs = vec![self.trunc.zero_coeffs(); self.system.n];
        for (i, c) in coeffs.iter_mut().enumerate() {
            c[(0, 0)] = self.u0_mean[i];
        }
        for &(i, k, a) in &self.psi0 {
            coeffs[i][(k.k1 as usize, k.k2 as usize)] += fluct_scale * a;
        }
        coeffs
    }

    /// Initial convolution state (`psi(0)` in case 1, zeros in case 2).
    pub fn initial_conv(&self) -> Vec<DMatrix<f64>> {
        // Case 1: seed the convolution state with psi(0) so it tracks the
        // correction process; Case 2 does not use it
        let mut conv = vec![self.trunc.zero_coeffs(); self.system.n];
        if self.system.regime == Regime::Case1 {
            for &(i, k, a) in &self.psi0 {
                conv[i][(k.k1 as usize, k.k2 as usize)] += a;
            }
        }
        conv
    }
}

/// One path of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    /// Scale parameter of this path.
    pub epsilon: f64,
    /// Path index within its epsilon.
    pub path: usize,
    /// Sup over save times (up to `T1 ^ tau*`) of the `L^p` error.
    pub sup_error: f64,
    /// Sup of the mean-mode error component `|a - b|`.
    pub sup_mean_error: f64,
    /// Discrete mass-mode identity residual (Case 2; zero in Case 1).
    pub identity_residual: f64,
    /// Cutoff stopping time, if tripped.
    pub stopped_at: Option<f64>,
    /// Positivity stopping time of the limit path, if tripped.
    pub t1_stop: Option<f64>,
    /// `(seed, epsilon index, path index)` for exact replay.
    pub seed_tuple: (u64, usize, usize),
}

/// Aggregates of one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    /// Scale parameter.
    pub epsilon: f64,
    /// Step size actually used (after guard and grid rounding).
    pub h: f64,
    /// Steps per path.
    pub n_steps: usize,
    /// Median of the per-path sup errors.
    pub median_err: f64,
    /// Mean of the per-path sup errors.
    pub mean_err: f64,
    /// 90% quantile of the per-path sup errors.
    pub q90_err: f64,
    /// Median of the mean-mode error component.
    pub median_mean_err: f64,
    /// Fraction of paths stopped at the cutoff.
    pub tau_stop_fraction: f64,
    /// Fraction of paths whose limit integration stopped at `T_1`.
    pub t1_stop_fraction: f64,
    /// Theorem threshold `eps^threshold_exponent`.
    pub threshold: f64,
    /// Paths whose sup error exceeded the threshold.
    pub exceed_count: usize,
}

/// Least-squares fit of `log(median error)` against `log(epsilon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    /// Fitted slope (the empirical order).
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// Coefficient of determination.
    pub r_squared: f64,
}

/// Self-convergence gate data (coupled h vs h/2 at the smallest epsilon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConvergence {
    /// Median over companion paths of `sup_t |u_h - u_{h/2}|_p`.
    pub median_discrepancy: f64,
    /// Median sup error at the smallest epsilon, the comparison scale.
    pub error_reference: f64,
    /// `median_discrepancy / error_reference`.
    pub ratio: f64,
    /// Set when the ratio exceeds 20%: the regression is then reported as
    /// h-biased and not a verification.
    pub h_biased: bool,
    /// Companion paths used.
    pub paths: usize,
}

/// Full sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Regime the comparison ran in.
    pub regime: Regime,
    /// Cutoff exponent used.
    pub kappa: f64,
    /// Error norm exponent.
    pub p: u32,
    /// Exponent of the theorem threshold.
    pub threshold_exponent: f64,
    /// Per-path records in deterministic `(epsilon, path)` order.
    pub per_path: Vec<PathRecord>,
    /// Per-epsilon aggregates, in the order of the epsilon list.
    pub per_epsilon: Vec<EpsilonSummary>,
    /// Order regression, when all medians are positive.
    pub regression: Option<Regression>,
    /// Self-convergence gate, when companion paths were requested.
    pub self_convergence: Option<SelfConvergence>,
    /// Noise-induced constants of the limit system (Case 1).
    pub constants: Vec<crate::limit::CEllValue>,
}

struct PathOutput {
    record: PathRecord,
}

/// Run a full sweep: for every `(epsilon, path)` simulate the SPDE, build
/// the correction process from the recorded convolution, integrate the limit
/// equation (noise-coupled in Case 2) and take the sup `L^p` error over the
/// save grid up to `T_1 ^ tau*`; then aggregate and fit the order.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepResult> {
    plan.validate()?;
    let cov = assemble_covariance(&plan.noise, plan.trunc)?;
    let limit_sys = build_limit_system(&plan.system, &cov, plan.tail_tol)?;
    let n_lim = plan.limit_steps();

    // Case 1: the limit ODE is epsilon-free and deterministic; solve once
    let case1_limit = match plan.system.regime {
        Regime::Case1 => Some(integrate_limit::<ChaCha8Rng>(
            &limit_sys,
            &plan.u0_mean,
            plan.t0,
            n_lim,
            NoiseDriver::None,
        )?),
        Regime::Case2 => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut per_path = Vec::with_capacity(plan.epsilons.len() * plan.paths);
    let mut per_epsilon = Vec::with_capacity(plan.epsilons.len());
    let mut self_convergence = None;

    for (eps_idx, &epsilon) in plan.epsilons.iter().enumerate() {
        let (stepper, n_steps) = build_stepper(plan, &cov, epsilon, 1)?;
        let record_every = n_steps / n_lim;
        let save_every = record_every * plan.limit_substeps;

        let outputs: Vec<Result<PathOutput>> = pool.install(|| {
            (0..plan.paths)
                .into_par_iter()
                .map(|path| {
                    run_error_path(
                        plan,
                        &limit_sys,
                        case1_limit.as_ref(),
                        &stepper,
                        epsilon,
                        eps_idx,
                        path,
                        n_steps,
                        save_every,
                        record_every,
                        n_lim,
                    )
                })
                .collect()
        });
        let mut records = Vec::with_capacity(plan.paths);
        for out in outputs {
            records.push(out?.record);
        }

        let stopped = records.iter().filter(|r| r.stopped_at.is_some()).count();
        if stopped == plan.paths {
            return Err(Error::AllPathsStopped { epsilon, paths: plan.paths });
        }

        let threshold = epsilon.powf(plan.threshold_exponent());
        let errs: Vec<f64> = records.iter().map(|r| r.sup_error).collect();
        let mean_errs: Vec<f64> = records.iter().map(|r| r.sup_mean_error).collect();
        per_epsilon.push(EpsilonSummary {
            epsilon,
            h: stepper.h(),
            n_steps,
            median_err: quantile(&errs, 0.5),
            mean_err: errs.iter().sum::<f64>() / errs.len() as f64,
            q90_err: quantile(&errs, 0.9),
            median_mean_err: quantile(&mean_errs, 0.5),
            tau_stop_fraction: stopped as f64 / plan.paths as f64,
            t1_stop_fraction: records.iter().filter(|r| r.t1_stop.is_some()).count() as f64
                / plan.paths as f64,
            threshold,
            exceed_count: errs.iter().filter(|&&e| e > threshold).count(),
        });
        per_path.extend(records);

        // coupled self-convergence companions at the smallest epsilon
        if eps_idx == plan.epsilons.len() - 1 && plan.sc_paths > 0 {
            let (fine, fine_steps) = build_stepper(plan, &cov, epsilon, 2)?;
            debug_assert_eq!(fine_steps, 2 * n_steps);
            let discrepancies: Vec<Result<f64>> = pool.install(|| {
                (0..plan.sc_paths)
                    .into_par_iter()
                    .map(|path| {
                        coupled_discrepancy(
                            plan, &stepper, &fine, epsilon, eps_idx, path, n_steps, save_every,
                        )
                    })
                    .collect()
            });
            let mut ds = Vec::with_capacity(plan.sc_paths);
            for d in discrepancies {
                ds.push(d?);
            }
            let median_discrepancy = quantile(&ds, 0.5);
            let error_reference = per_epsilon.last().unwrap().median_err;
            let ratio = if error_reference > 0.0 {
                median_discrepancy / error_reference
            } else {
                0.0
            };
            self_convergence = Some(SelfConvergence {
                median_discrepancy,
                error_reference,
                ratio,
                h_biased: ratio > 0.2,
                paths: plan.sc_paths,
            });
        }
    }

    let regression = fit_regression(
        &plan.epsilons,
        &per_epsilon.iter().map(|s| s.median_err).collect::<Vec<_>>(),
    );

    Ok(SweepResult {
        regime: plan.system.regime,
        kappa: plan.kappa,
        p: plan.p,
        threshold_exponent: plan.threshold_exponent(),
        per_path,
        per_epsilon,
        regression,
        self_convergence,
        constants: limit_sys.constants.clone(),
    })
}

/// Stepper for one epsilon with the guard applied and the step count rounded
/// to a multiple of the limit grid. `refine = 2` builds the h/2 companion.
pub fn build_stepper(
    plan: &ExperimentPlan,
    cov: &crate::noise::InteriorCovariance,
    epsilon: f64,
    refine: usize,
) -> Result<(Stepper, usize)> {
    let n_lim = (plan.save_count - 1) * plan.limit_substeps;
    let cutoff = epsilon.powf(-plan.kappa);
    let h_guard = 0.5 / (1.0 + plan.system.lipschitz_on_ball(2.0 * cutoff));
    let h_raw = plan.h_rule.h(epsilon).min(h_guard);
    let base = (plan.t0 / h_raw).ceil() as usize;
    let n_steps = refine * base.div_ceil(n_lim) * n_lim;
    let h = plan.t0 / n_steps as f64;
    let stepper = Stepper::new(&plan.system, cov, epsilon, h, plan.kappa)?;
    Ok((stepper, n_steps))
}

/// Simulate one path and compute its error record.
#[allow(clippy::too_many_arguments)]
fn run_error_path(
    plan: &ExperimentPlan,
    limit_sys: &LimitSystem,
    case1_limit: Option<&crate::limit::LimitTrajectory>,
    stepper: &Stepper,
    epsilon: f64,
    eps_idx: usize,
    path: usize,
    n_steps: usize,
    save_every: usize,
    record_every: usize,
    n_lim: usize,
) -> Result<PathOutput> {
    let n = plan.system.n;
    let mut rng = StreamKey::root(plan.seed)
        .child(eps_idx as u64)
        .child(path as u64)
        .child(purpose::SPDE_NOISE)
        .rng();
    let mut state = SpectralState::new(plan.initial_coeffs(epsilon), plan.initial_conv());
    let mut ws = stepper.workspace();

    // saved data: per save, the per-species difference u - Q (Case 1) or u
    // (Case 2); the limit value is subtracted from the mean entry afterwards
    let mut saves: Vec<(f64, Vec<DMatrix<f64>>)> = Vec::with_capacity(plan.save_count);
    let mut recorded: Vec<Vec<f64>> = Vec::with_capacity(n_lim);
    let mut last_cum = vec![0.0; n];
    let mut tau = None;

    for idx in 0..=n_steps {
        let norm = stepper.refresh_grids(&state, &mut ws)?;
        if stepper.trips_cutoff(norm) {
            tau = Some(state.t);
            state.stopped_at = tau;
            break;
        }
        if idx % save_every == 0 {
            let diffs: Vec<DMatrix<f64>> = (0..n)
                .map(|i| match plan.system.regime {
                    Regime::Case1 => &state.coeffs[i] - &state.conv[i],
                    Regime::Case2 => state.coeffs[i].clone(),
                })
                .collect();
            saves.push((state.t, diffs));
        }
        if idx < n_steps {
            stepper.advance(&mut state, &mut ws, &mut rng);
            if plan.system.regime == Regime::Case2 && (idx + 1) % record_every == 0 {
                let incr: Vec<f64> = (0..n)
                    .map(|i| {
                        let d = state.mean_noise_cum[i] - last_cum[i];
                        last_cum[i] = state.mean_noise_cum[i];
                        d
                    })
                    .collect();
                recorded.push(incr);
            }
        }
    }

    // limit values on the save grid and the T1 stop
    let (limit_at_saves, t1_stop, identity_residual) = match plan.system.regime {
        Regime::Case1 => {
            let traj = case1_limit.unwrap();
            let values: Vec<Vec<f64>> = traj
                .values
                .iter()
                .step_by(plan.limit_substeps)
                .cloned()
                .collect();
            (values, traj.t1_stop, 0.0)
        }
        Regime::Case2 => {
            // pad missing records (cutoff stop) with zero increments; saves
            // beyond the stop are not evaluated anyway
            while recorded.len() < n_lim {
                recorded.push(vec![0.0; n]);
            }
            let traj = integrate_limit::<ChaCha8Rng>(
                limit_sys,
                &plan.u0_mean,
                plan.t0,
                n_lim,
                NoiseDriver::Recorded(&recorded),
            )?;
            let values: Vec<Vec<f64>> = traj
                .values
                .iter()
                .step_by(plan.limit_substeps)
                .cloned()
                .collect();
            // discrete mass-mode identity: a(T) - b(T) equals the reaction
            // difference exactly up to summation rounding (noise cancels)
            let residual = if traj.t1_stop.is_none() && tau.is_none() {
                let b_t = traj.values.last().unwrap();
                (0..n)
                    .map(|i| {
                        let lhs = state.mean(i) - b_t[i];
                        let rhs = state.mean_reaction_cum[i] - traj.drift_integral[i];
                        (lhs - rhs).abs()
                    })
                    .fold(0.0, f64::max)
            } else {
                0.0
            };
            (values, traj.t1_stop, residual)
        }
    };

    // sup over save times <= T1 ^ tau* of the L^p error
    let mut sup_error: f64 = 0.0;
    let mut sup_mean: f64 = 0.0;
    let t_cap = t1_stop.unwrap_or(f64::INFINITY);
    let mut scratch = stepper.transform().truncation().zero_grid();
    let mut inv_scratch =
        DMatrix::zeros(plan.trunc.grid_n(), plan.trunc.modes_per_axis());
    for (s, (t, diffs)) in saves.iter().enumerate() {
        if *t > t_cap + 1e-12 || s >= limit_at_saves.len() {
            break;
        }
        let b = &limit_at_saves[s];
        let mut acc = 0.0;
        for i in 0..n {
            sup_mean = sup_mean.max((diffs[i][(0, 0)] - b[i]).abs());
        }
        if plan.p == 2 {
            for i in 0..n {
                let d0 = diffs[i][(0, 0)] - b[i];
                acc += d0 * d0 - diffs[i][(0, 0)] * diffs[i][(0, 0)];
                acc += diffs[i].iter().map(|v| v * v).sum::<f64>();
            }
            sup_error = sup_error.max(acc.max(0.0).sqrt());
        } else {
            let mut worst = 0.0f64;
            for i in 0..n {
                let mut d = diffs[i].clone();
                d[(0, 0)] -= b[i];
                stepper
                    .transform()
                    .inverse_into(&d, &mut inv_scratch, &mut scratch);
                worst += grid_lp_norm(&[&scratch], plan.p).powi(plan.p as i32);
            }
            sup_error = sup_error.max(worst.powf(1.0 / plan.p as f64));
        }
    }

    Ok(PathOutput {
        record: PathRecord {
            epsilon,
            path,
            sup_error,
            sup_mean_error: sup_mean,
            identity_residual,
            stopped_at: tau,
            t1_stop,
            seed_tuple: (plan.seed, eps_idx, path),
        },
    })
}

/// Coupled h-vs-h/2 companion: both solvers consume the identical fine-level
/// Brownian increments; returns `sup_t |u_h - u_{h/2}|_p` over the save grid.
#[allow(clippy::too_many_arguments)]
fn coupled_discrepancy(
    plan: &ExperimentPlan,
    coarse: &Stepper,
    fine: &Stepper,
    epsilon: f64,
    eps_idx: usize,
    path: usize,
    n_steps: usize,
    save_every: usize,
) -> Result<f64> {
    let mut rng_coarse = StreamKey::root(plan.seed)
        .child(eps_idx as u64)
        .child(path as u64)
        .child(purpose::SELF_CONVERGENCE)
        .rng();
    let mut rng_fine = rng_coarse.clone();

    let mut st_c = SpectralState::new(plan.initial_coeffs(epsilon), plan.initial_conv());
    let mut st_f = st_c.clone();
    let mut ws_c = coarse.workspace();
    let mut ws_f = fine.workspace();

    let mut sup = 0.0f64;
    for idx in 0..=n_steps {
        let norm_c = coarse.refresh_grids(&st_c, &mut ws_c)?;
        let norm_f = fine.refresh_grids(&st_f, &mut ws_f)?;
        if coarse.trips_cutoff(norm_c) || fine.trips_cutoff(norm_f) {
            break;
        }
        if idx % save_every == 0 {
            let mut acc = 0.0;
            for i in 0..plan.system.n {
                if plan.p == 2 {
                    acc += st_c.coeffs[i]
                        .iter()
                        .zip(st_f.coeffs[i].iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                } else {
                    let d = &st_c.coeffs[i] - &st_f.coeffs[i];
                    acc += crate::solver::lp_norm(coarse.transform(), &[d], plan.p)?
                        .powi(plan.p as i32);
                }
            }
            sup = sup.max(if plan.p == 2 { acc.sqrt() } else { acc.powf(1.0 / plan.p as f64) });
        }
        if idx < n_steps {
            coarse.advance_coupled(fine, &mut st_c, &mut ws_c, &mut rng_coarse);
            fine.advance(&mut st_f, &mut ws_f, &mut rng_fine);
            let nf = fine.refresh_grids(&st_f, &mut ws_f)?;
            if fine.trips_cutoff(nf) {
                break;
            }
            fine.advance(&mut st_f, &mut ws_f, &mut rng_fine);
        }
    }
    Ok(sup)
}

/// Empirical quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Least-squares `log y` on `log x`; `None` when a value is non-positive.
pub fn fit_regression(xs: &[f64], ys: &[f64]) -> Option<Regression> {
    if xs.len() != ys.len() || xs.len() < 3 || ys.iter().any(|&y| y <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some(Regression { slope, intercept, r_squared })
}

// ---------------------------------------------------------------------------
// averaging statistics of the fast OU modes
// ---------------------------------------------------------------------------

/// Plan of an averaging check on one fluctuation mode.
#[derive(Debug, Clone)]
pub struct AveragingPlan {
    /// Scale parameters (strictly decreasing).
    pub epsilons: Vec<f64>,
    /// Driver variance `q[j,j]` of the mode.
    pub q: f64,
    /// Diffusion constant.
    pub d: f64,
    /// Eigenvalue of the mode.
    pub lambda: f64,
    /// Averaging horizon.
    pub t: f64,
    /// Paths per epsilon.
    pub paths: usize,
    /// Experiment seed.
    pub seed: u64,
    /// Target per-step relaxation `eps^-2 d lambda h` (resolution of the
    /// trapezoid time integrals).
    pub theta: f64,
    /// Worker threads (0 = library default).
    pub workers: usize,
}

impl AveragingPlan {
    /// Plan for a named mode of an assembled covariance.
    pub fn for_mode(
        cov: &crate::noise::InteriorCovariance,
        species: usize,
        mode: ModeIndex,
        epsilons: Vec<f64>,
        t: f64,
        paths: usize,
        seed: u64,
    ) -> Self {
        AveragingPlan {
            epsilons,
            q: cov.entry(species, mode, mode),
            d: 1.0,
            lambda: eigenvalue(mode),
            t,
            paths,
            seed,
            theta: 0.25,
            workers: 0,
        }
    }
}

/// Point estimates at one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingPoint {
    /// Scale parameter.
    pub epsilon: f64,
    /// `E |(1/T) int Z dt|`; the averaging lemma predicts `O(eps)`.
    pub mean_abs_z_integral: f64,
    /// `E |(1/T) int Z^2 dt - q/(2 d lambda)|`; also `O(eps)`.
    pub mean_abs_z2_deviation: f64,
    /// Steps used per path.
    pub n_steps: usize,
}

/// Averaging report across the epsilon list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingReport {
    /// The stationary value `q/(2 d lambda)` the squares average to.
    pub stationary: f64,
    /// Per-epsilon estimates.
    pub points: Vec<AveragingPoint>,
    /// Log-log slope of `E|int Z|` against epsilon.
    pub slope_z: Option<f64>,
    /// Log-log slope of `E|int Z^2 - stationary|` against epsilon.
    pub slope_z2: Option<f64>,
}

/// Estimate the averaging rates of one fast OU mode: time integrals of `Z`
/// and `Z^2` over `[0, T]` with exact one-step sampling and trapezoid
/// quadrature, across the epsilon list.
pub fn averaging_check(plan: &AveragingPlan) -> Result<AveragingReport> {
    if plan.epsilons.is_empty() || plan.paths == 0 {
        return Err(Error::Config("averaging check needs epsilons and paths".into()));
    }
    let stationary = if plan.q == 0.0 { 0.0 } else { plan.q / (2.0 * plan.d * plan.lambda) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut points = Vec::with_capacity(plan.epsilons.len());
    for (eps_idx, &epsilon) in plan.epsilons.iter().enumerate() {
        let c = plan.d * plan.lambda / (epsilon * epsilon);
        let n_steps = ((plan.t * c / plan.theta).ceil() as usize).clamp(64, 8_000_000);
        let h = plan.t / n_steps as f64;
        let decay = (-c * h).exp();
        // Case-1 scaling: one-step variance q (1 - e^{-2ch}) / (2 d lambda)
        let step_sd = (plan.q * (1.0 - decay * decay) / (2.0 * plan.d * plan.lambda)).sqrt();

        let sums: Vec<(f64, f64)> = pool.install(|| {
            (0..plan.paths)
                .into_par_iter()
                .map(|path| {
                    let mut rng = StreamKey::root(plan.seed)
                        .child(purpose::AVERAGING)
                        .child(eps_idx as u64)
                        .child(path as u64)
                        .rng();
                    let mut z = 0.0f64;
                    let mut i1 = 0.0f64;
                    let mut i2 = 0.0f64;
                    for step in 1..=n_steps {
                        let xi: f64 = rng.sample(StandardNormal);
                        z = decay * z + step_sd * xi;
                        let w = if step == n_steps { 0.5 } else { 1.0 };
                        i1 += w * z;
                        i2 += w * z * z;
                    }
                    ((i1 * h / plan.t).abs(), (i2 * h / plan.t - stationary).abs())
                })
                .collect()
        });
        let m = plan.paths as f64;
        points.push(AveragingPoint {
            epsilon,
            mean_abs_z_integral: sums.iter().map(|s| s.0).sum::<f64>() / m,
            mean_abs_z2_deviation: sums.iter().map(|s| s.1).sum::<f64>() / m,
            n_steps,
        });
    }

    let slope_z = fit_regression(
        &plan.epsilons,
        &points.iter().map(|p| p.mean_abs_z_integral).collect::<Vec<_>>(),
    )
    .map(|r| r.slope);
    let slope_z2 = fit_regression(
        &plan.epsilons,
        &points.iter().map(|p| p.mean_abs_z2_deviation).collect::<Vec<_>>(),
    )
    .map(|r| r.slope);

    Ok(AveragingReport { stationary, points, slope_z, slope_z2 })
}

// ---------------------------------------------------------------------------
// exceedance probability
// ---------------------------------------------------------------------------

/// Empirical exceedance frequency with a 95% Wilson confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    /// The threshold tested against.
    pub threshold: f64,
    /// Number of exceedances.
    pub exceed: usize,
    /// Sample size.
    pub total: usize,
    /// Point estimate `exceed / total`.
    pub frequency: f64,
    /// Lower 95% Wilson bound.
    pub wilson_low: f64,
    /// Upper 95% Wilson bound.
    pub wilson_high: f64,
    /// Set when the sample is below the 100-path guideline.
    pub low_sample: bool,
}

/// Exceedance frequency of per-path errors over a threshold.
pub fn probability_estimate(errors: &[f64], threshold: f64) -> ProbabilityEstimate {
    let total = errors.len();
    assert!(total > 0, "probability estimate needs at least one sample");
    let exceed = errors.iter().filter(|&&e| e > threshold).count();
    let (lo, hi) = wilson_interval(exceed, total, 1.959963984540054);
    ProbabilityEstimate {
        threshold,
        exceed,
        total,
        frequency: exceed as f64 / total as f64,
        wilson_low: lo,
        wilson_high: hi,
        low_sample: total < 100,
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, total: usize, z: f64) -> (f64, f64) {
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{DecayLaw, EdgeNoise};
    use crate::poly::ReactionPolynomial;
    use std::f64::consts::PI;

    fn heat_plan(regime: Regime) -> ExperimentPlan {
        let noise_edge = |alpha0: f64| EdgeNoise { alpha0, law: DecayLaw::Power { c: 0.3, mu: 2.0 } };
        let alpha0 = match regime {
            Regime::Case1 => 0.0,
            Regime::Case2 => 0.1,
        };
        ExperimentPlan {
            system: SystemSpec {
                n: 1,
                d: vec![1.0],
                reactions: vec![ReactionPolynomial::from_terms(
                    1,
                    &[(vec![1], 1.0), (vec![3], -1.0)],
                )
                .unwrap()],
                regime,
                positivity_stop: false,
            },
            noise: BoundaryNoiseSpec {
                regime,
                species: vec![std::array::from_fn(|_| noise_edge(alpha0))],
            },
            trunc: Truncation::new(4),
            epsilons: vec![0.3, 0.2, 0.1],
            paths: 4,
            seed: 99,
            t0: 0.05,
            h_rule: StepRule::Eps2(0.02),
            save_count: 6,
            kappa: 0.02,
            p: 2,
            u0_mean: vec![0.2],
            psi0: vec![(0, ModeIndex::new(1, 1), 0.2)],
            sc_paths: 2,
            limit_substeps: 4,
            tail_tol: 1e-3,
            workers: 1,
        }
    }

    #[test]
    fn validation_catches_bad_plans() {
        let mut plan = heat_plan(Regime::Case1);
        assert!(plan.validate().is_ok());
        plan.epsilons = vec![0.1, 0.2, 0.3];
        assert!(plan.validate().is_err());
        plan.epsilons = vec![0.3, 0.2];
        assert!(plan.validate().is_err());
        plan.epsilons = vec![0.3, 0.2, 0.1];
        plan.kappa = 0.2; // outside (0, 1/7)
        assert!(plan.validate().is_err());
        plan.kappa = 0.02;
        plan.psi0 = vec![(0, ModeIndex::new(0, 0), 1.0)];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn threshold_exponents() {
        let plan = heat_plan(Regime::Case1);
        // m = 3: 1 - 6 kappa - kappa
        assert!((plan.threshold_exponent() - (1.0 - 7.0 * 0.02)).abs() < 1e-15);
        let plan2 = heat_plan(Regime::Case2);
        // m = 3: 1 - 5 kappa
        assert!((plan2.threshold_exponent() - (1.0 - 5.0 * 0.02)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_sweep_errors_are_integrator_floor() {
        // noise off, constant u0, no psi0: Q = 0 and the SPDE mean coincides
        // with the ODE up to the first-order reaction bias, orders of
        // magnitude below any noise effect
        let mut plan = heat_plan(Regime::Case1);
        plan.noise = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![std::array::from_fn(|_| EdgeNoise::silent())],
        };
        plan.psi0.clear();
        plan.sc_paths = 0;
        let result = run_sweep(&plan).unwrap();
        for s in &result.per_epsilon {
            assert!(
                s.median_err < 0.01 * s.h,
                "median {} at eps {} (h = {})",
                s.median_err,
                s.epsilon,
                s.h
            );
            assert_eq!(s.tau_stop_fraction, 0.0);
        }
        assert_eq!(result.per_path.len(), 12);
    }

    #[test]
    fn replay_is_bit_identical_and_worker_independent() {
        let mut plan = heat_plan(Regime::Case1);
        let r1 = run_sweep(&plan).unwrap();
        let r2 = run_sweep(&plan).unwrap();
        assert_eq!(r1, r2);
        plan.workers = 3;
        let r3 = run_sweep(&plan).unwrap();
        assert_eq!(r1, r3);
        // and the per-path records carry the replay tuple
        assert_eq!(r1.per_path[0].seed_tuple, (99, 0, 0));
    }

    #[test]
    fn case2_sweep_runs_and_couples_noise() {
        let plan = heat_plan(Regime::Case2);
        let result = run_sweep(&plan).unwrap();
        assert_eq!(result.per_path.len(), 12);
        // the discrete mass-mode identity holds to summation rounding
        for r in &result.per_path {
            assert!(
                r.identity_residual < 1e-10,
                "identity residual {} at eps {}",
                r.identity_residual,
                r.epsilon
            );
        }
        // self-convergence companion ran
        let sc = result.self_convergence.expect("sc requested");
        assert_eq!(sc.paths, 2);
        assert!(sc.median_discrepancy.is_finite());
    }

    #[test]
    fn all_paths_stopped_aborts() {
        let mut plan = heat_plan(Regime::Case1);
        // initial mean far beyond the cutoff
        plan.u0_mean = vec![5.0];
        match run_sweep(&plan) {
            Err(Error::AllPathsStopped { .. }) => {}
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn quantiles_and_regression() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 1.0), 2.0);
        let r = fit_regression(&[0.2, 0.1, 0.05], &[0.04, 0.01, 0.0025]).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_regression(&[0.2, 0.1, 0.05], &[0.0, 0.01, 0.0025]).is_none());
    }

    #[test]
    fn averaging_zero_noise_gives_zero_integrals() {
        let plan = AveragingPlan {
            epsilons: vec![0.2, 0.1, 0.05],
            q: 0.0,
            d: 1.0,
            lambda: PI * PI,
            t: 1.0,
            paths: 8,
            seed: 3,
            theta: 0.25,
            workers: 1,
        };
        let report = averaging_check(&plan).unwrap();
        assert_eq!(report.stationary, 0.0);
        for p in &report.points {
            assert_eq!(p.mean_abs_z_integral, 0.0);
            assert_eq!(p.mean_abs_z2_deviation, 0.0);
        }
        assert!(report.slope_z.is_none());
    }

    #[test]
    fn averaging_slopes_at_reduced_scale() {
        // quick version of the averaging law: slopes near one
        let plan = AveragingPlan {
            epsilons: vec![0.2, 0.1, 0.05],
            q: 2.0,
            d: 1.0,
            lambda: PI * PI,
            t: 0.5,
            paths: 1500,
            seed: 1234,
            theta: 0.3,
            workers: 0,
        };
        let report = averaging_check(&plan).unwrap();
        assert!((report.stationary - 1.0 / (PI * PI)).abs() < 1e-15);
        let sz = report.slope_z.unwrap();
        let sz2 = report.slope_z2.unwrap();
        assert!((0.5..1.5).contains(&sz), "slope_z = {sz}");
        assert!(sz2 > 0.5, "slope_z2 = {sz2}");
        // the squared averages approach the stationary value from below
        for p in &report.points {
            assert!(p.mean_abs_z2_deviation < report.stationary);
        }
    }

    #[test]
    fn probability_estimate_extremes() {
        let errors = [0.1, 0.2, 0.3, 0.4];
        let p_inf = probability_estimate(&errors, f64::INFINITY);
        assert_eq!(p_inf.frequency, 0.0);
        assert_eq!(p_inf.exceed, 0);
        let p_zero = probability_estimate(&errors, 0.0);
        assert_eq!(p_zero.frequency, 1.0);
        assert!(p_zero.low_sample);
        assert!(p_zero.wilson_low > 0.3 && p_zero.wilson_high == 1.0);
        let mid = probability_estimate(&errors, 0.25);
        assert_eq!(mid.exceed, 2);
        assert!(mid.wilson_low < 0.5 && mid.wilson_high > 0.5);
    }
}
