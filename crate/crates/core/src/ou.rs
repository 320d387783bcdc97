//! Exact-in-law sampling of the fast Ornstein-Uhlenbeck modes.
//!
//! For one species, the stochastic convolution restricted to mode `j` is the
//! OU process `dZ_j = -eps^-2 d lambda_j Z_j dt + sigma_eps dW~_j` driven by
//! the correlated interior drivers. Over a step `h` the update
//! `Z(t+h) = E o Z(t) + G` is exact in law when `E_j = exp(-eps^-2 d
//! lambda_j h)` and `G` is a centered Gaussian with covariance
//!
//! `C_h[j,k] = sigma_eps^2 q[j,k] (1 - exp(-eps^-2 d (lambda_j+lambda_k) h))
//!             / (eps^-2 d (lambda_j + lambda_k))`.
//!
//! The trace structure of `q` splits `C_h` into two independent block
//! families: contributions of the `y`-edges couple only modes sharing `k1`,
//! those of the `x`-edges only modes sharing `k2`. Sampling one Gaussian per
//! block and summing reproduces `C_h` exactly at a fraction of the dense
//! factorization cost. Each block factor comes from a symmetric
//! eigendecomposition with negative eigenvalues clipped at `1e-10 ||q||`.
//!
//! In Case 1 the exponent prefactor `sigma_eps = 1/eps` cancels against the
//! rate, so the covariance is evaluated in the epsilon-free form; exponents
//! beyond 36 are treated as fully relaxed (decay factor 0, stationary
//! increment), which is below double-precision resolution anyway.

use crate::basis::{eigenvalue, ModeIndex, Truncation};
use crate::error::{Error, Result};
use crate::noise::{Edge, InteriorCovariance, Regime};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Exponent above which a mode is treated as fully relaxed within one step.
const FULL_RELAX_EXPONENT: f64 = 36.0;

/// `(1 - exp(-x))/x`, stable for all `x >= 0`.
#[inline]
fn em1_over(x: f64) -> f64 {
    if x < 1e-12 {
        1.0 - 0.5 * x
    } else {
        -(-x).exp_m1() / x
    }
}

/// One-step increment covariance entry for modes with eigenvalue sum
/// `lambda_sum`, species diffusion `d`, including the regime prefactor.
fn increment_cov_scale(lambda_sum: f64, d: f64, epsilon: f64, h: f64, regime: Regime) -> f64 {
    let sigma2 = {
        let s = regime.sigma(epsilon);
        s * s
    };
    let x = d * lambda_sum * h / (epsilon * epsilon);
    sigma2 * h * em1_over(x)
}

/// Stationary second moment of one OU mode, `E|Z_j|^2` as `t -> inf`.
///
/// Case 1: `q_jj / (2 d lambda_j)` (the epsilon factors cancel);
/// Case 2: `eps^2 q_jj / (2 d lambda_j)`. Requires `lambda_j > 0`.
pub fn stationary_variance(q_jj: f64, d: f64, lambda: f64, regime: Regime, epsilon: f64) -> f64 {
    assert!(lambda > 0.0, "stationary variance is undefined on the kernel mode");
    let base = q_jj / (2.0 * d * lambda);
    match regime {
        Regime::Case1 => base,
        Regime::Case2 => epsilon * epsilon * base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Y,
    X,
}

#[derive(Debug, Clone)]
struct Block {
    axis: Axis,
    ell: u32,
    /// `modes_per_axis x rank` factor, `L L^T` = block covariance.
    factor: DMatrix<f64>,
}

/// Precomputed one-step sampler for the OU modes of one species at a fixed
/// `(epsilon, h)`. Immutable after construction; safe to share across paths.
#[derive(Debug, Clone)]
pub struct OuProcess {
    trunc: Truncation,
    /// Per-mode decay factors `exp(-eps^-2 d lambda h)` (kernel mode: 1).
    decay: DMatrix<f64>,
    blocks: Vec<Block>,
    include_mean: bool,
    regime: Regime,
    epsilon: f64,
    d: f64,
    h: f64,
}

impl OuProcess {
    /// Build the sampler for `species` from an assembled covariance.
    ///
    /// `include_mean` adds the kernel mode `(0,0)` to the joint draw (used in
    /// Case 2, where the mean-mode driver correlates with the low
    /// fluctuation modes through the shared `l = 0` edge Brownians).
    pub fn new(
        cov: &InteriorCovariance,
        species: usize,
        d: f64,
        epsilon: f64,
        h: f64,
        include_mean: bool,
    ) -> Result<Self> {
        assert!(h > 0.0, "step size must be positive");
        assert!(epsilon > 0.0 && d > 0.0);
        let trunc = cov.truncation();
        let regime = cov.spec().regime;
        let m = trunc.modes_per_axis();
        let eps_inv2 = 1.0 / (epsilon * epsilon);

        let decay = DMatrix::from_fn(m, m, |k1, k2| {
            let x = eps_inv2 * d * eigenvalue(ModeIndex::new(k1 as u32, k2 as u32)) * h;
            if x > FULL_RELAX_EXPONENT {
                0.0
            } else {
                (-x).exp()
            }
        });

        let mut blocks = Vec::new();
        for axis in [Axis::Y, Axis::X] {
            let (e0, e1) = match axis {
                Axis::Y => (Edge::Y0, Edge::Y1),
                Axis::X => (Edge::X0, Edge::X1),
            };
            for ell in 0..=trunc.k_max() {
                let a0 = cov.spec().alpha(species, e0, ell);
                let a1 = cov.spec().alpha(species, e1, ell);
                if a0 == 0.0 && a1 == 0.0 {
                    continue;
                }
                let mode = |j: usize| match axis {
                    Axis::Y => ModeIndex::new(ell, j as u32),
                    Axis::X => ModeIndex::new(j as u32, ell),
                };
                let trace = |j: usize, z: f64| match axis {
                    Axis::Y => crate::basis::edge_basis_eval(j as u32, z),
                    Axis::X => crate::basis::edge_basis_eval(j as u32, z),
                };
                let skip_mean = !include_mean && ell == 0;
                let cov_jk = |j: usize, k: usize| -> f64 {
                    if skip_mean && (j == 0 || k == 0) {
                        return 0.0;
                    }
                    let lam = eigenvalue(mode(j)) + eigenvalue(mode(k));
                    let q = a0 * a0 * trace(j, 0.0) * trace(k, 0.0)
                        + a1 * a1 * trace(j, 1.0) * trace(k, 1.0);
                    q * increment_cov_scale(lam, d, epsilon, h, regime)
                };
                let block_cov = DMatrix::from_fn(m, m, |j, k| cov_jk(j, k));
                let factor = clipped_factor(&block_cov)?;
                if factor.ncols() > 0 {
                    blocks.push(Block { axis, ell, factor });
                }
            }
        }

        Ok(OuProcess { trunc, decay, blocks, include_mean, regime, epsilon, d, h })
    }

    /// Step size the factors were built for.
    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// The truncation.
    pub fn truncation(&self) -> Truncation {
        self.trunc
    }

    /// Per-mode decay factors.
    pub fn decay(&self) -> &DMatrix<f64> {
        &self.decay
    }

    /// Number of standard normals consumed per increment draw.
    pub fn normals_per_step(&self) -> usize {
        self.blocks.iter().map(|b| b.factor.ncols()).sum()
    }

    /// Draw one exact increment `G ~ N(0, C_h)` into `g` (overwritten).
    ///
    /// Draw order is fixed (y-blocks by `l`, then x-blocks by `l`, one
    /// standard normal per factor column); it is part of the reproducibility
    /// contract for replaying streams.
    pub fn sample_increment(&self, rng: &mut impl Rng, g: &mut DMatrix<f64>) {
        g.fill(0.0);
        let m = self.trunc.modes_per_axis();
        for block in &self.blocks {
            for col in 0..block.factor.ncols() {
                let xi: f64 = rng.sample(StandardNormal);
                match block.axis {
                    Axis::Y => {
                        let row = block.ell as usize;
                        for j in 0..m {
                            g[(row, j)] += block.factor[(j, col)] * xi;
                        }
                    }
                    Axis::X => {
                        let colm = block.ell as usize;
                        for j in 0..m {
                            g[(j, colm)] += block.factor[(j, col)] * xi;
                        }
                    }
                }
            }
        }
    }

    /// Advance the pure convolution state: `z <- E o z + G`, holding the
    /// kernel mode at zero (the convolution lives in the fluctuation space).
    pub fn advance(&self, z: &mut DMatrix<f64>, g: &DMatrix<f64>) {
        z.zip_apply(&self.decay, |zi, e| *zi *= e);
        *z += g;
        z[(0, 0)] = 0.0;
    }

    /// Whether the kernel mode participates in the joint draw.
    pub fn includes_mean(&self) -> bool {
        self.include_mean
    }

    /// Stationary second moment of a fluctuation mode under this process.
    pub fn mode_stationary_variance(&self, cov: &InteriorCovariance, species: usize, j: ModeIndex) -> f64 {
        stationary_variance(
            cov.entry(species, j, j),
            self.d,
            eigenvalue(j),
            self.regime,
            self.epsilon,
        )
    }
}

/// Factor a symmetric PSD matrix as `L L^T` by eigendecomposition, clipping
/// eigenvalues in `[-tol, 0)` to zero and rejecting anything below `-tol`
/// with `tol = 1e-10 ||B||_max`. Columns with zero eigenvalue are dropped.
fn clipped_factor(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = b.amax();
    if scale == 0.0 {
        return Ok(DMatrix::zeros(b.nrows(), 0));
    }
    let tol = 1e-10 * scale;
    let eig = nalgebra::SymmetricEigen::new(b.clone());
    let mut cols = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -tol {
            return Err(Error::Factorization(format!(
                "covariance block has eigenvalue {lam:.3e} below -{tol:.3e}"
            )));
        }
        if lam > tol {
            cols.push(eig.eigenvectors.column(i) * lam.sqrt());
        }
    }
    let mut f = DMatrix::zeros(b.nrows(), cols.len());
    for (c, col) in cols.iter().enumerate() {
        f.set_column(c, col);
    }
    Ok(f)
}

/// Correction process `Q(t) = exp(-eps^-2 t d lambda_j) psi0_j + Z_j(t)` for
/// one species, assembled from a saved convolution path.
///
/// `psi0` must have zero mean mode; `zs[i]` is the convolution at `times[i]`.
pub fn correction_process(
    psi0: &DMatrix<f64>,
    zs: &[DMatrix<f64>],
    times: &[f64],
    d: f64,
    epsilon: f64,
) -> Vec<DMatrix<f64>> {
    assert_eq!(zs.len(), times.len());
    assert_eq!(psi0[(0, 0)], 0.0, "psi0 must have zero mean mode");
    let eps_inv2 = 1.0 / (epsilon * epsilon);
    let m = psi0.nrows();
    times
        .iter()
        .zip(zs)
        .map(|(&t, z)| {
            let mut q = z.clone();
            for k1 in 0..m {
                for k2 in 0..m {
                    let x = eps_inv2 * d * eigenvalue(ModeIndex::new(k1 as u32, k2 as u32)) * t;
                    if x <= FULL_RELAX_EXPONENT * 20.0 {
                        q[(k1, k2)] += (-x).exp() * psi0[(k1, k2)];
                    }
                }
            }
            q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{assemble_covariance, BoundaryNoiseSpec, DecayLaw, EdgeNoise};
    use crate::rng::{purpose, StreamKey};
    use std::f64::consts::PI;

    /// Case-1 spec exposing a single interior mode family with q_jj = 2 at
    /// j = (1,0): one unit amplitude on edge y=0, edge mode 1, K = 1.
    fn single_alpha_spec() -> BoundaryNoiseSpec {
        BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise { alpha0: 0.0, law: DecayLaw::List { values: vec![1.0] } },
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        }
    }

    #[test]
    fn pure_decay_without_noise() {
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[EdgeNoise::silent(), EdgeNoise::silent(), EdgeNoise::silent(), EdgeNoise::silent()]],
        };
        let trunc = Truncation::new(2);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let ou = OuProcess::new(&cov, 0, 1.0, 0.3, 0.01, false).unwrap();
        assert_eq!(ou.normals_per_step(), 0);
        let mut z = trunc.zero_coeffs();
        z[(1, 0)] = 1.0;
        z[(2, 1)] = -0.5;
        let mut g = trunc.zero_coeffs();
        let mut rng = StreamKey::root(0).rng();
        ou.sample_increment(&mut rng, &mut g);
        assert_eq!(g.amax(), 0.0);
        ou.advance(&mut z, &g);
        let e10 = (-0.01 * PI * PI / 0.09f64).exp();
        assert!((z[(1, 0)] - e10).abs() < 1e-15);
    }

    #[test]
    fn one_step_variance_saturates_to_stationary() {
        // q_jj = 2 at (1,2) under the single-alpha spec: f_2(0)^2 = 2
        let spec = single_alpha_spec();
        let trunc = Truncation::new(2);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let j = ModeIndex::new(1, 2);
        assert!((cov.entry(0, j, j) - 2.0).abs() < 1e-14);
        // large h: one-step variance = q/(2 d lambda)
        let scale = increment_cov_scale(2.0 * eigenvalue(j), 1.0, 0.1, 1e3, Regime::Case1);
        let var = 2.0 * scale;
        let expect = 2.0 / (2.0 * eigenvalue(j));
        assert!((var - expect).abs() < 1e-12);

        // and for lambda = pi^2, q = 2 the stationary value is 1/pi^2
        let v = stationary_variance(2.0, 1.0, PI * PI, Regime::Case1, 0.1);
        assert!((v - 1.0 / (PI * PI)).abs() < 1e-15);
        assert_eq!(stationary_variance(0.0, 1.0, PI * PI, Regime::Case1, 0.1), 0.0);
        let v2 = stationary_variance(2.0, 1.0, PI * PI, Regime::Case2, 0.1);
        assert!((v2 - 0.01 / (PI * PI)).abs() < 1e-15);
    }

    #[test]
    fn exact_in_law_for_two_step_sizes() {
        // the law of Z(T) must not depend on h; compare the empirical
        // variance of mode (1,0) against the closed form for two step sizes
        let spec = single_alpha_spec();
        let trunc = Truncation::new(1);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let (d, eps, t_end) = (1.0, 0.25, 0.05);
        let lam = eigenvalue(ModeIndex::new(1, 0));
        let c = d * lam / (eps * eps);
        let q = cov.entry(0, ModeIndex::new(1, 0), ModeIndex::new(1, 0));
        let expect = q * (1.0 - (-2.0 * c * t_end).exp()) / (2.0 * d * lam);

        let paths = 20_000;
        for (tag, steps) in [(1u64, 10usize), (2, 23)] {
            let h = t_end / steps as f64;
            let ou = OuProcess::new(&cov, 0, d, eps, h, false).unwrap();
            let mut sumsq = 0.0;
            for p in 0..paths {
                let mut rng = StreamKey::root(555).child(tag).child(p).rng();
                let mut z = trunc.zero_coeffs();
                let mut g = trunc.zero_coeffs();
                for _ in 0..steps {
                    ou.sample_increment(&mut rng, &mut g);
                    ou.advance(&mut z, &g);
                }
                sumsq += z[(1, 0)] * z[(1, 0)];
            }
            let var = sumsq / paths as f64;
            // variance of the variance estimator: 2 var^2 / n
            let se = expect * (2.0 / paths as f64).sqrt();
            assert!(
                (var - expect).abs() < 3.0 * se,
                "h = {h}: var {var} vs {expect} (se {se})"
            );
        }
    }

    #[test]
    fn joint_law_matches_pair_covariance() {
        // in stationarity, E[Z_j Z_k] = q_jk / (d (lambda_j + lambda_k))
        let spec = single_alpha_spec();
        let trunc = Truncation::new(2);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let (d, eps) = (1.0, 0.2);
        let h = 0.02; // several relaxation times per step: stationary draws
        let ou = OuProcess::new(&cov, 0, d, eps, h, false).unwrap();
        let (j, k) = (ModeIndex::new(1, 0), ModeIndex::new(1, 2));
        let expect = cov.entry(0, j, k) / (d * (eigenvalue(j) + eigenvalue(k)));

        let paths = 40_000;
        let mut sum = 0.0;
        let mut sum_jj = 0.0;
        let mut sum_kk = 0.0;
        for p in 0..paths {
            let mut rng = StreamKey::root(91).child(p).rng();
            let mut z = trunc.zero_coeffs();
            let mut g = trunc.zero_coeffs();
            for _ in 0..4 {
                ou.sample_increment(&mut rng, &mut g);
                ou.advance(&mut z, &g);
            }
            let (zj, zk) = (z[(j.k1 as usize, j.k2 as usize)], z[(k.k1 as usize, k.k2 as usize)]);
            sum += zj * zk;
            sum_jj += zj * zj;
            sum_kk += zk * zk;
        }
        let n = paths as f64;
        let emp = sum / n;
        let se = ((sum_jj / n) * (sum_kk / n) / n).sqrt() * 1.5;
        assert!(
            (emp - expect).abs() < 3.0 * se,
            "cross moment {emp} vs {expect} (se {se})"
        );
    }

    #[test]
    fn block_factor_reproduces_increment_covariance() {
        // single active edge => one block; L L^T must equal the closed-form
        // one-step covariance entrywise
        let spec = single_alpha_spec();
        let trunc = Truncation::new(2);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let ou = OuProcess::new(&cov, 0, 1.0, 0.5, 0.01, false).unwrap();
        assert_eq!(ou.blocks.len(), 1);
        let f = &ou.blocks[0].factor;
        let recomposed = f * f.transpose();
        let m = trunc.modes_per_axis();
        let mode = |j: usize| ModeIndex::new(1, j as u32);
        for j in 0..m {
            for k in 0..m {
                let lam = eigenvalue(mode(j)) + eigenvalue(mode(k));
                let expect = cov.entry(0, mode(j), mode(k))
                    * increment_cov_scale(lam, 1.0, 0.5, 0.01, Regime::Case1);
                assert!(
                    (recomposed[(j, k)] - expect).abs() < 1e-12 * expect.abs().max(1.0),
                    "block cov ({j},{k})"
                );
            }
        }
    }

    #[test]
    fn perfectly_correlated_equal_rate_modes() {
        // a genuinely rank-one case: one edge Brownian driving two modes with
        // the SAME relaxation rate. Build it by hand from the closed form.
        let lam = PI * PI * 5.0; // modes (1,2) and (2,1) share lambda
        let h = 0.003;
        let (d, eps) = (1.0, 0.3);
        let x = d * 2.0 * lam * h / (eps * eps);
        let scale = (1.0 / (eps * eps)) * h * em1_over(x);
        let (t1, t2) = (2.0, -0.5); // arbitrary trace weights
        let b = DMatrix::from_row_slice(2, 2, &[
            t1 * t1 * scale,
            t1 * t2 * scale,
            t1 * t2 * scale,
            t2 * t2 * scale,
        ]);
        let f = clipped_factor(&b).unwrap();
        assert_eq!(f.ncols(), 1, "equal-rate single-driver block must be rank one");
        // increments proportional with ratio t2/t1
        let ratio = f[(1, 0)] / f[(0, 0)];
        assert!((ratio - t2 / t1).abs() < 1e-12);
    }

    #[test]
    fn stationary_second_moment_long_run() {
        // run a single mode far past its relaxation time and average Z^2
        let spec = single_alpha_spec();
        let trunc = Truncation::new(1);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let (d, eps) = (1.0, 0.2);
        let j = ModeIndex::new(1, 0);
        let v = stationary_variance(cov.entry(0, j, j), d, eigenvalue(j), Regime::Case1, eps);

        let h = 2.0 * eps * eps / (d * eigenvalue(j)); // ~2 relaxation times
        let ou = OuProcess::new(&cov, 0, d, eps, h, false).unwrap();
        let paths = 10_000;
        let mut sum = 0.0;
        for p in 0..paths {
            let mut rng = StreamKey::root(7171).child(purpose::AVERAGING).child(p).rng();
            let mut z = trunc.zero_coeffs();
            let mut g = trunc.zero_coeffs();
            for _ in 0..12 {
                ou.sample_increment(&mut rng, &mut g);
                ou.advance(&mut z, &g);
            }
            sum += z[(1, 0)] * z[(1, 0)];
        }
        let emp = sum / paths as f64;
        let se = v * (2.0 / paths as f64).sqrt();
        assert!((emp - v).abs() < 3.0 * se, "stationary moment {emp} vs {v}");
    }

    #[test]
    fn correction_process_examples() {
        let trunc = Truncation::new(1);
        let mut psi0 = trunc.zero_coeffs();
        psi0[(1, 0)] = 1.0;

        // psi0 = 0 => Q = Z
        let mut z = trunc.zero_coeffs();
        z[(0, 1)] = 0.7;
        let q = correction_process(&trunc.zero_coeffs(), &[z.clone()], &[0.3], 1.0, 0.1);
        assert_eq!(q[0], z);

        // Z = 0, t = 0 => Q = psi0
        let q = correction_process(&psi0, &[trunc.zero_coeffs()], &[0.0], 1.0, 0.1);
        assert_eq!(q[0], psi0);

        // deterministic part at t = 0.01, eps = 0.1, d = 1, lambda = pi^2:
        // exp(-pi^2) = 5.17232e-5
        let q = correction_process(&psi0, &[trunc.zero_coeffs()], &[0.01], 1.0, 0.1);
        let expect = (-(PI * PI) * 0.01 / 0.01f64).exp();
        assert!((q[0][(1, 0)] - expect).abs() < 1e-18);
        assert!((expect - 5.17231862e-5).abs() < 1e-12);
    }
}
