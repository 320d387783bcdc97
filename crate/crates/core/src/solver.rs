//! Mild-solution time integration of the full system in spectral space.
//!
//! One step of the exponential Euler scheme (the stiff diagonal part is
//! integrated exactly, the reaction enters through the phi-1 weight):
//!
//! `c <- E o c + phi1 o F^(u) + G`
//!
//! with `E_j = exp(-eps^-2 d lambda_j h)`, `phi1_j = (1 - E_j)/(eps^-2 d
//! lambda_j)` (`h` on the kernel mode), `F^` the dealiased pseudospectral
//! transform of the reaction and `G` the exact OU increment of [`crate::ou`].
//! The same increment advances the attached convolution state, so the
//! correction process of the approximation theorems is available along the
//! path at no extra cost.
//!
//! Runs carry a cutoff: once the `L^{2m}` grid norm exceeds `eps^-kappa` the
//! path stops and is flagged, mirroring the stopping time the error bounds
//! are stated with.

use crate::basis::{eigenvalue, ModeIndex, Transform, Truncation};
use crate::error::{Error, Result};
use crate::noise::{InteriorCovariance, Regime};
use crate::ou::OuProcess;
use crate::poly::ReactionPolynomial;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The reaction-diffusion system `du = eps^-2 A u + F(u)` with boundary
/// forcing regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    /// Species count.
    pub n: usize,
    /// Diffusion constants, one per species.
    pub d: Vec<f64>,
    /// Reaction polynomials, one per species.
    pub reactions: Vec<ReactionPolynomial>,
    /// Noise scaling regime (decides the splitting and the limit equation).
    pub regime: Regime,
    /// Whether limit integrations stop when a component turns negative
    /// (concentration systems).
    pub positivity_stop: bool,
}

impl SystemSpec {
    /// Validate counts, positivity of diffusion constants and coefficients.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("species count must be positive".into()));
        }
        if self.d.len() != self.n || self.reactions.len() != self.n {
            return Err(Error::Config(format!(
                "system has n = {}, but {} diffusion constants and {} reactions",
                self.n,
                self.d.len(),
                self.reactions.len()
            )));
        }
        if self.d.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("diffusion constants must be positive".into()));
        }
        for (i, f) in self.reactions.iter().enumerate() {
            if f.n_vars() != self.n {
                return Err(Error::Config(format!(
                    "reaction {i} is a polynomial in {} variables, system has {}",
                    f.n_vars(),
                    self.n
                )));
            }
            if f.terms().any(|(_, c)| !c.is_finite()) {
                return Err(Error::Config(format!("reaction {i} has a non-finite coefficient")));
            }
        }
        Ok(())
    }

    /// Maximum total degree `m` over the reactions.
    pub fn max_degree(&self) -> u32 {
        self.reactions.iter().map(|f| f.degree()).max().unwrap_or(0)
    }

    /// Crude Lipschitz bound of `F` on the sup-norm ball of radius `r`:
    /// `max_i sum_terms |c| |l| r^(|l|-1)`.
    pub fn lipschitz_on_ball(&self, r: f64) -> f64 {
        self.reactions
            .iter()
            .map(|f| {
                f.terms()
                    .map(|(powers, c)| {
                        let total: u32 = powers.iter().sum();
                        if total == 0 {
                            0.0
                        } else {
                            c.abs() * total as f64 * r.powi(total as i32 - 1)
                        }
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Solution state at one time: raw field coefficients per species plus the
/// attached stochastic-convolution state driven by the same increments.
///
/// In Case 2 the fluctuation block of `coeffs` stores the raw field
/// `eps * psi`; [`SpectralState::splitting`] divides on demand.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Current time.
    pub t: f64,
    /// Field coefficients per species (rows `k1`, columns `k2`).
    pub coeffs: Vec<DMatrix<f64>>,
    /// Attached convolution state per species; initialized at `psi(0)` it is
    /// exactly the correction process `Q(t)`.
    pub conv: Vec<DMatrix<f64>>,
    /// Realized cumulative mean-mode driver `B_i(t)` per species (Case 2).
    pub mean_noise_cum: Vec<f64>,
    /// Accumulated mean-mode reaction updates `sum h F^_0(u)` per species;
    /// together with the noise accumulator this reconstructs `a(t) - a(0)`
    /// up to summation-order rounding.
    pub mean_reaction_cum: Vec<f64>,
    /// Set when the `L^{2m}` cutoff tripped, holding the stopping time.
    pub stopped_at: Option<f64>,
}

impl SpectralState {
    /// Fresh state at `t = 0`. `conv_init` seeds the convolution state (pass
    /// `psi(0)` to make it the correction process, or zeros for plain `Z^s`).
    pub fn new(coeffs: Vec<DMatrix<f64>>, conv_init: Vec<DMatrix<f64>>) -> Self {
        let n = coeffs.len();
        SpectralState {
            t: 0.0,
            coeffs,
            conv: conv_init,
            mean_noise_cum: vec![0.0; n],
            mean_reaction_cum: vec![0.0; n],
            stopped_at: None,
        }
    }

    /// Mean-mode value `a_i(t)` of one species.
    pub fn mean(&self, species: usize) -> f64 {
        self.coeffs[species][(0, 0)]
    }

    /// Recover the splitting `u = a + psi` (Case 1) or `u = a + eps psi`
    /// (Case 2): returns the means and the fluctuation coefficients `psi`.
    pub fn splitting(&self, regime: Regime, epsilon: f64) -> (Vec<f64>, Vec<DMatrix<f64>>) {
        let scale = match regime {
            Regime::Case1 => 1.0,
            Regime::Case2 => 1.0 / epsilon,
        };
        let means = (0..self.coeffs.len()).map(|i| self.mean(i)).collect();
        let psis = self
            .coeffs
            .iter()
            .map(|c| {
                let mut psi = c * scale;
                psi[(0, 0)] = 0.0;
                psi
            })
            .collect();
        (means, psis)
    }
}

/// Immutable per-`(system, noise, truncation, epsilon, h)` stepping caches;
/// shared across concurrent paths.
#[derive(Debug, Clone)]
pub struct Stepper {
    spec: SystemSpec,
    trunc: Truncation,
    transform: Transform,
    epsilon: f64,
    h: f64,
    /// Per-species mode decay `exp(-eps^-2 d lambda h)`.
    decay: Vec<DMatrix<f64>>,
    /// Per-species phi-1 weights `(1 - E)/(eps^-2 d lambda)`.
    phi1: Vec<DMatrix<f64>>,
    /// Per-species exact OU increment samplers.
    ou: Vec<OuProcess>,
    /// Cutoff threshold `eps^-kappa` for the `L^{2m}` norm.
    cutoff: f64,
    /// Norm exponent `2m`.
    norm_p: u32,
}

/// Mutable scratch buffers for one path; create one per worker.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// Physical-grid values per species, refreshed every step.
    pub grids: Vec<DMatrix<f64>>,
    fgrid: DMatrix<f64>,
    fhat: DMatrix<f64>,
    g: DMatrix<f64>,
    g_second: Vec<DMatrix<f64>>,
    fwd_scratch: DMatrix<f64>,
    inv_scratch: DMatrix<f64>,
}

impl Stepper {
    /// Build the caches. `h` must satisfy the reaction stability guard
    /// `h <= 0.5/(1 + Lip(F))` on the ball `|u|_inf <= 2 eps^-kappa`.
    pub fn new(
        spec: &SystemSpec,
        cov: &InteriorCovariance,
        epsilon: f64,
        h: f64,
        kappa: f64,
    ) -> Result<Self> {
        spec.validate()?;
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must be in (0,1), got {epsilon}")));
        }
        if !(h > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        if cov.spec().regime != spec.regime {
            return Err(Error::Config("noise spec and system disagree on the regime".into()));
        }
        if cov.n_species() != spec.n {
            return Err(Error::Config("noise spec and system disagree on species count".into()));
        }
        let cutoff = epsilon.powf(-kappa);
        let h_max = 0.5 / (1.0 + spec.lipschitz_on_ball(2.0 * cutoff));
        if h > h_max {
            return Err(Error::Config(format!(
                "step size {h} exceeds the reaction stability guard {h_max:.3e}"
            )));
        }
        let trunc = cov.truncation();
        let transform = Transform::new(trunc);
        let m = trunc.modes_per_axis();
        let eps_inv2 = 1.0 / (epsilon * epsilon);
        let include_mean = spec.regime == Regime::Case2;

        let mut decay = Vec::with_capacity(spec.n);
        let mut phi1 = Vec::with_capacity(spec.n);
        let mut ou = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let d = spec.d[i];
            decay.push(DMatrix::from_fn(m, m, |k1, k2| {
                let x = eps_inv2 * d * eigenvalue(ModeIndex::new(k1 as u32, k2 as u32)) * h;
                if x > 36.0 {
                    0.0
                } else {
                    (-x).exp()
                }
            }));
            phi1.push(DMatrix::from_fn(m, m, |k1, k2| {
                let c = eps_inv2 * d * eigenvalue(ModeIndex::new(k1 as u32, k2 as u32));
                let x = c * h;
                if x < 1e-12 {
                    h * (1.0 - 0.5 * x)
                } else {
                    -(-x).exp_m1() / c
                }
            }));
            ou.push(OuProcess::new(cov, i, d, epsilon, h, include_mean)?);
        }

        Ok(Stepper {
            spec: spec.clone(),
            trunc,
            transform,
            epsilon,
            h,
            decay,
            phi1,
            ou,
            cutoff,
            norm_p: 2 * spec.max_degree().max(1),
        })
    }

    /// Step size.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Scale parameter.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The truncation in use.
    pub fn truncation(&self) -> Truncation {
        self.trunc
    }

    /// The cached transform.
    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    /// The system this stepper integrates.
    pub fn system(&self) -> &SystemSpec {
        &self.spec
    }

    /// Cutoff threshold `eps^-kappa`.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Allocate scratch buffers for one path.
    pub fn workspace(&self) -> Workspace {
        let n = self.trunc.grid_n();
        let m = self.trunc.modes_per_axis();
        Workspace {
            grids: vec![DMatrix::zeros(n, n); self.spec.n],
            fgrid: DMatrix::zeros(n, n),
            fhat: DMatrix::zeros(m, m),
            g: DMatrix::zeros(m, m),
            g_second: vec![DMatrix::zeros(m, m); self.spec.n],
            fwd_scratch: DMatrix::zeros(m, n),
            inv_scratch: DMatrix::zeros(n, m),
        }
    }

    /// Evaluate the physical grids of all species at the current state and
    /// return the `L^{2m}` norm used by the cutoff. Errors on non-finite
    /// values.
    pub fn refresh_grids(&self, state: &SpectralState, ws: &mut Workspace) -> Result<f64> {
        for i in 0..self.spec.n {
            self.transform
                .inverse_into(&state.coeffs[i], &mut ws.inv_scratch, &mut ws.grids[i]);
        }
        let grids: Vec<&DMatrix<f64>> = ws.grids.iter().collect();
        let norm = grid_lp_norm(&grids, self.norm_p);
        if !norm.is_finite() {
            return Err(Error::BlowUp { t: state.t });
        }
        Ok(norm)
    }

    /// Whether a grid norm trips the cutoff.
    pub fn trips_cutoff(&self, norm: f64) -> bool {
        norm > self.cutoff
    }

    /// Advance one step. `ws.grids` must hold the current state (call
    /// [`Stepper::refresh_grids`] first).
    pub fn advance(&self, state: &mut SpectralState, ws: &mut Workspace, rng: &mut impl Rng) {
        for i in 0..self.spec.n {
            self.ou[i].sample_increment(rng, &mut ws.g);
            self.apply_update(state, ws, i);
        }
        state.t += self.h;
    }

    /// Advance one coupled coarse step of size `h` using two increments of
    /// the fine stepper `fine` (which must have `fine.h = h/2`), so the
    /// coarse path sees exactly the Brownian paths of the fine one.
    pub fn advance_coupled(
        &self,
        fine: &Stepper,
        state: &mut SpectralState,
        ws: &mut Workspace,
        rng: &mut impl Rng,
    ) {
        debug_assert!((fine.h - 0.5 * self.h).abs() < 1e-15 * self.h);
        // fine draw order is per sub-step, species-major
        for i in 0..self.spec.n {
            fine.ou[i].sample_increment(rng, &mut ws.g);
            ws.g_second[i].copy_from(&ws.g);
        }
        for i in 0..self.spec.n {
            fine.ou[i].sample_increment(rng, &mut ws.g);
            // G = E_half o G1 + G2
            let half_decay = fine.decay[i].as_slice();
            let g1 = ws.g_second[i].as_slice();
            let g = ws.g.as_mut_slice();
            for k in 0..g.len() {
                g[k] += half_decay[k] * g1[k];
            }
            self.apply_update(state, ws, i);
        }
        state.t += self.h;
    }

    /// Exponential-Euler update of species `i` with the increment in `ws.g`.
    fn apply_update(&self, state: &mut SpectralState, ws: &mut Workspace, i: usize) {
        // reaction on the grid, then back to the band (the grid size
        // dealiases products of total degree <= 3K exactly)
        eval_reaction_on_grids(&self.spec.reactions[i], &ws.grids, &mut ws.fgrid);
        self.transform
            .forward_into(&ws.fgrid, &mut ws.fwd_scratch, &mut ws.fhat);

        if self.spec.regime == Regime::Case2 {
            state.mean_noise_cum[i] += ws.g[(0, 0)];
        }
        state.mean_reaction_cum[i] += self.phi1[i][(0, 0)] * ws.fhat[(0, 0)];

        let c = state.coeffs[i].as_mut_slice();
        let e = self.decay[i].as_slice();
        let p = self.phi1[i].as_slice();
        let f = ws.fhat.as_slice();
        let g = ws.g.as_slice();
        for k in 0..c.len() {
            c[k] = e[k] * c[k] + p[k] * f[k] + g[k];
        }
        self.ou[i].advance(&mut state.conv[i], &ws.g);
    }
}

/// Pointwise evaluation of a reaction polynomial on the species grids.
pub fn eval_reaction_on_grids(
    reaction: &ReactionPolynomial,
    grids: &[DMatrix<f64>],
    out: &mut DMatrix<f64>,
) {
    out.fill(0.0);
    let len = out.len();
    let o = out.as_mut_slice();
    for (powers, coeff) in reaction.terms() {
        match powers.iter().filter(|&&p| p > 0).count() {
            0 => {
                for v in o.iter_mut() {
                    *v += coeff;
                }
            }
            _ => {
                for x in 0..len {
                    let mut v = coeff;
                    for (j, &p) in powers.iter().enumerate() {
                        if p == 0 {
                            continue;
                        }
                        let u = grids[j].as_slice()[x];
                        v *= match p {
                            1 => u,
                            2 => u * u,
                            3 => u * u * u,
                            _ => u.powi(p as i32),
                        };
                    }
                    o[x] += v;
                }
            }
        }
    }
}

/// Discrete `L^p` norm of a (vector-valued) grid field with midpoint
/// quadrature weights: `(sum_i sum_x |u_i(x)|^p / n^2)^(1/p)`.
pub fn grid_lp_norm(grids: &[&DMatrix<f64>], p: u32) -> f64 {
    assert!(p >= 1);
    let n2: usize = grids[0].len();
    let mut acc = 0.0;
    for g in grids {
        let s = g.as_slice();
        match p {
            1 => acc += s.iter().map(|v| v.abs()).sum::<f64>(),
            2 => acc += s.iter().map(|v| v * v).sum::<f64>(),
            4 => {
                acc += s
                    .iter()
                    .map(|v| {
                        let w = v * v;
                        w * w
                    })
                    .sum::<f64>()
            }
            6 => {
                acc += s
                    .iter()
                    .map(|v| {
                        let w = v * v;
                        w * w * w
                    })
                    .sum::<f64>()
            }
            _ => acc += s.iter().map(|v| v.abs().powi(p as i32)).sum::<f64>(),
        }
    }
    (acc / n2 as f64).powf(1.0 / p as f64)
}

/// `L^p` norm of a coefficient field, through the physical grid.
pub fn lp_norm(tf: &Transform, coeffs: &[DMatrix<f64>], p: u32) -> Result<f64> {
    let grids: Vec<DMatrix<f64>> = coeffs
        .iter()
        .map(|c| tf.inverse(c))
        .collect::<Result<_>>()?;
    Ok(grid_lp_norm(&grids.iter().collect::<Vec<_>>(), p))
}

/// Summary of one simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    /// Cutoff stopping time, if the `L^{2m}` norm exceeded `eps^-kappa`.
    pub stopped_at: Option<f64>,
    /// Steps actually taken.
    pub steps: usize,
}

/// View passed to the save-time observer during [`simulate_path`].
pub struct SaveView<'a> {
    /// Save index (0-based).
    pub index: usize,
    /// Current state.
    pub state: &'a SpectralState,
    /// Current physical grids (valid for this save time).
    pub grids: &'a [DMatrix<f64>],
    /// `L^{2m}` norm at this time.
    pub norm_2m: f64,
}

/// Integrate a path over `[0, t_end]` with `n_steps` steps, invoking
/// `observer` at the save indices (`save_every` steps apart, plus the final
/// time). Stops early when the cutoff trips, flagging the summary.
///
/// `t_end` must equal `n_steps * stepper.h()` to rounding.
pub fn simulate_path(
    stepper: &Stepper,
    state: &mut SpectralState,
    ws: &mut Workspace,
    rng: &mut impl Rng,
    t_end: f64,
    n_steps: usize,
    save_every: usize,
    mut observer: impl FnMut(&SaveView<'_>),
) -> Result<PathSummary> {
    if ((n_steps as f64) * stepper.h() - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::Config(format!(
            "t_end = {t_end} is not n_steps * h = {}",
            n_steps as f64 * stepper.h()
        )));
    }
    let save_every = save_every.max(1);
    let mut save_index = 0;
    for idx in 0..=n_steps {
        let norm = stepper.refresh_grids(state, ws)?;
        let is_save = idx % save_every == 0 || idx == n_steps;
        if stepper.trips_cutoff(norm) {
            state.stopped_at = Some(state.t);
            if is_save {
                observer(&SaveView { index: save_index, state, grids: &ws.grids, norm_2m: norm });
            }
            return Ok(PathSummary { stopped_at: state.stopped_at, steps: idx });
        }
        if is_save {
            observer(&SaveView { index: save_index, state, grids: &ws.grids, norm_2m: norm });
            save_index += 1;
        }
        if idx < n_steps {
            stepper.advance(state, ws, rng);
        }
    }
    Ok(PathSummary { stopped_at: None, steps: n_steps })
}
