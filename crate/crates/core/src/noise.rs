//! Boundary Wiener processes on the four edges of the unit square and the
//! interior covariance they induce.
//!
//! Each species carries four independent edge processes
//! `W_e(t) = sum_l alpha_{e,l} beta_{e,l}(t) f_l` expanded in the 1-D cosine
//! family of the edge. Pairing an edge mode with an interior eigenfunction
//! through the boundary inner product gives the trace coupling, and the
//! interior drivers `W~_j = <W, g_j>` inherit the covariance
//! `q[j,k] = sum_{e,l} alpha_{e,l}^2 T_e(l,j) T_e(l,k)`. Species are
//! independent, so the cross-species covariance vanishes.

use crate::basis::{edge_basis_eval, ModeIndex, Truncation};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// The four edges of the unit square, in the order the boundary conditions
/// list them: y = 0, y = 1, x = 0, x = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    /// Bottom edge `y = 0`, parameterized by x.
    Y0,
    /// Top edge `y = 1`, parameterized by x.
    Y1,
    /// Left edge `x = 0`, parameterized by y.
    X0,
    /// Right edge `x = 1`, parameterized by y.
    X1,
}

/// All edges in their canonical order.
pub const EDGES: [Edge; 4] = [Edge::Y0, Edge::Y1, Edge::X0, Edge::X1];

/// Noise scaling regime of the boundary forcing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Mass-conserving large noise: `sigma_eps = 1/eps`, all `alpha_{.,0} = 0`.
    Case1,
    /// Order-one noise with mean projection: `sigma_eps = 1`.
    Case2,
}

impl Regime {
    /// The noise prefactor `sigma_eps` for a given epsilon.
    pub fn sigma(self, epsilon: f64) -> f64 {
        match self {
            Regime::Case1 => 1.0 / epsilon,
            Regime::Case2 => 1.0,
        }
    }
}

/// Amplitude law of the oscillating modes of one edge: either a power-law
/// tail `alpha_l = c l^-mu` or an explicit list for `l >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecayLaw {
    /// `alpha_l = c * l^-mu` for `l >= 1`.
    Power {
        /// Overall scale `c >= 0`.
        c: f64,
        /// Decay exponent.
        mu: f64,
    },
    /// Explicit amplitudes `values[l-1] = alpha_l`; zero beyond the list.
    List {
        /// Amplitudes for `l = 1, 2, ...`.
        values: Vec<f64>,
    },
}

/// Amplitudes of one edge process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeNoise {
    /// Amplitude of the constant edge mode `l = 0` (drives the mean).
    pub alpha0: f64,
    /// Amplitudes of the oscillating edge modes.
    #[serde(flatten)]
    pub law: DecayLaw,
}

impl EdgeNoise {
    /// An edge with no noise at all.
    pub fn silent() -> Self {
        EdgeNoise { alpha0: 0.0, law: DecayLaw::List { values: vec![] } }
    }

    /// Power-law edge without a mean-mode component.
    pub fn power(c: f64, mu: f64) -> Self {
        EdgeNoise { alpha0: 0.0, law: DecayLaw::Power { c, mu } }
    }

    /// Amplitude `alpha_l` of edge mode `l`.
    pub fn alpha(&self, l: u32) -> f64 {
        if l == 0 {
            return self.alpha0;
        }
        match &self.law {
            DecayLaw::Power { c, mu } => c * (l as f64).powf(-mu),
            DecayLaw::List { values } => values.get(l as usize - 1).copied().unwrap_or(0.0),
        }
    }

    fn max_nonzero_mode(&self) -> Option<u32> {
        let tail = match &self.law {
            DecayLaw::Power { c, .. } if *c != 0.0 => Some(u32::MAX),
            DecayLaw::Power { .. } => None,
            DecayLaw::List { values } => values
                .iter()
                .rposition(|&v| v != 0.0)
                .map(|p| p as u32 + 1),
        };
        match (self.alpha0 != 0.0, tail) {
            (_, Some(t)) => Some(t),
            (true, None) => Some(0),
            (false, None) => None,
        }
    }
}

/// Boundary noise of the whole system: per species, four edge processes and
/// the common scaling regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryNoiseSpec {
    /// The scaling regime (decides `sigma_eps` and the mean-mode constraint).
    pub regime: Regime,
    /// `species[i][e]` is the noise on edge `e` of species `i`.
    pub species: Vec<[EdgeNoise; 4]>,
}

impl BoundaryNoiseSpec {
    /// Number of species.
    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    /// Amplitude `alpha_{i_e, l}`.
    pub fn alpha(&self, species: usize, edge: Edge, l: u32) -> f64 {
        self.species[species][edge as usize].alpha(l)
    }

    /// Validate the spec against a polynomial degree bound `m`.
    ///
    /// Checks nonnegativity, the Case-1 mass conservation `alpha_{.,0} = 0`,
    /// and for power laws the summability proxy
    /// `sum_l alpha_l^2 l^(1/2 + 1/(2m)) < inf`, i.e. `2 mu - 1/2 - 1/(2m) > 1`.
    pub fn validate(&self, m: u32) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::Config("noise spec has no species".into()));
        }
        for (i, edges) in self.species.iter().enumerate() {
            for (e, edge) in edges.iter().enumerate() {
                if edge.alpha0 < 0.0 {
                    return Err(Error::Config(format!(
                        "negative alpha0 for species {i}, edge {e}"
                    )));
                }
                match &edge.law {
                    DecayLaw::Power { c, mu } => {
                        if *c < 0.0 {
                            return Err(Error::Config(format!(
                                "negative power-law scale for species {i}, edge {e}"
                            )));
                        }
                        let margin = 2.0 * mu - 0.5 - 0.5 / m as f64;
                        if *c != 0.0 && margin <= 1.0 {
                            return Err(Error::Config(format!(
                                "power-law decay mu = {mu} too slow for degree m = {m}: \
                                 need 2*mu - 1/2 - 1/(2m) > 1"
                            )));
                        }
                    }
                    DecayLaw::List { values } => {
                        if values.iter().any(|&v| v < 0.0) {
                            return Err(Error::Config(format!(
                                "negative amplitude in list for species {i}, edge {e}"
                            )));
                        }
                    }
                }
                if self.regime == Regime::Case1 && edge.alpha0 != 0.0 {
                    return Err(Error::Config(format!(
                        "case1 requires alpha0 = 0 (mass-conserving noise), \
                         violated for species {i}, edge {e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Standard deviation per unit sqrt-time of the mean-mode driver
    /// `B_i = sum_e alpha_{i_e,0} beta_{i_e,0}`: returns
    /// `sqrt(sum_e alpha_{i_e,0}^2)`. Zero by definition in Case 1.
    pub fn mean_noise_amplitude(&self, species: usize) -> f64 {
        if self.regime == Regime::Case1 {
            return 0.0;
        }
        self.species[species]
            .iter()
            .map(|e| e.alpha0 * e.alpha0)
            .sum::<f64>()
            .sqrt()
    }
}

/// Trace coupling `<f_l on edge e, g_j restricted to e>` of an edge mode with
/// an interior mode: a Kronecker delta in the aligned index times the value
/// of the transverse factor at the edge.
pub fn trace_coupling(edge: Edge, l: u32, j: ModeIndex) -> f64 {
    match edge {
        Edge::Y0 => {
            if l == j.k1 {
                edge_basis_eval(j.k2, 0.0)
            } else {
                0.0
            }
        }
        Edge::Y1 => {
            if l == j.k1 {
                edge_basis_eval(j.k2, 1.0)
            } else {
                0.0
            }
        }
        Edge::X0 => {
            if l == j.k2 {
                edge_basis_eval(j.k1, 0.0)
            } else {
                0.0
            }
        }
        Edge::X1 => {
            if l == j.k2 {
                edge_basis_eval(j.k1, 1.0)
            } else {
                0.0
            }
        }
    }
}

/// Interior covariance `q^i[j,k]` of the drivers `W~_{i,j}`, kept in the
/// factored trace form. Entries are computed on demand so large bands never
/// materialize the dense matrix.
#[derive(Debug, Clone)]
pub struct InteriorCovariance {
    spec: BoundaryNoiseSpec,
    trunc: Truncation,
    /// Boundary cutoff; trace couplings vanish for `l > K` anyway.
    k_b: u32,
}

/// Assemble the interior covariance for a validated noise spec.
///
/// Fails when some edge carries noise but none of its active modes fit the
/// truncation band.
pub fn assemble_covariance(
    spec: &BoundaryNoiseSpec,
    trunc: Truncation,
) -> Result<InteriorCovariance> {
    let k_b = trunc.k_max();
    let mut any_active = false;
    let mut any_in_band = false;
    for edges in &spec.species {
        for edge in edges {
            if let Some(max) = edge.max_nonzero_mode() {
                any_active = true;
                if edge.alpha0 != 0.0 || (1..=k_b).any(|l| edge.alpha(l) != 0.0) || max == 0 {
                    any_in_band = true;
                }
            }
        }
    }
    if any_active && !any_in_band {
        return Err(Error::Config(format!(
            "truncation K = {} holds no active edge mode of the noise spec",
            trunc.k_max()
        )));
    }
    Ok(InteriorCovariance { spec: spec.clone(), trunc, k_b })
}

impl InteriorCovariance {
    /// The noise spec this covariance was assembled from.
    pub fn spec(&self) -> &BoundaryNoiseSpec {
        &self.spec
    }

    /// The interior truncation.
    pub fn truncation(&self) -> Truncation {
        self.trunc
    }

    /// Boundary mode cutoff `K_b`.
    pub fn k_b(&self) -> u32 {
        self.k_b
    }

    /// Number of species.
    pub fn n_species(&self) -> usize {
        self.spec.n_species()
    }

    /// Covariance entry `q^i[j,k]`; exploits the Kronecker structure of the
    /// trace rule, so each entry costs a handful of flops.
    pub fn entry(&self, species: usize, j: ModeIndex, k: ModeIndex) -> f64 {
        let edges = &self.spec.species[species];
        let mut q = 0.0;
        if j.k1 == k.k1 && j.k1 <= self.k_b {
            let a0 = edges[Edge::Y0 as usize].alpha(j.k1);
            let a1 = edges[Edge::Y1 as usize].alpha(j.k1);
            q += a0 * a0 * edge_basis_eval(j.k2, 0.0) * edge_basis_eval(k.k2, 0.0)
                + a1 * a1 * edge_basis_eval(j.k2, 1.0) * edge_basis_eval(k.k2, 1.0);
        }
        if j.k2 == k.k2 && j.k2 <= self.k_b {
            let a0 = edges[Edge::X0 as usize].alpha(j.k2);
            let a1 = edges[Edge::X1 as usize].alpha(j.k2);
            q += a0 * a0 * edge_basis_eval(j.k1, 0.0) * edge_basis_eval(k.k1, 0.0)
                + a1 * a1 * edge_basis_eval(j.k1, 1.0) * edge_basis_eval(k.k1, 1.0);
        }
        q
    }

    /// Dense covariance over all retained modes (including the kernel mode),
    /// in the row-major order of [`Truncation::modes`]. Intended for small
    /// bands (tests, OU factorizations).
    pub fn dense(&self, species: usize) -> DMatrix<f64> {
        let modes: Vec<ModeIndex> = self.trunc.modes().collect();
        let n = modes.len();
        DMatrix::from_fn(n, n, |r, c| self.entry(species, modes[r], modes[c]))
    }
}

/// One batch of unscaled edge-mode Brownian increments over a step `dt`:
/// independent `N(0, dt)` draws per (species, edge, l), consumed with the
/// `alpha` scaling applied at the use site.
#[derive(Debug, Clone)]
pub struct EdgeIncrements {
    /// `draws[i][e][l]` is the increment of `beta_{i_e,l}`.
    pub draws: Vec<[Vec<f64>; 4]>,
}

impl EdgeIncrements {
    /// The four `l = 0` draws of one species; these drive the Case-2 limit
    /// SDE through the mean-mode projection.
    pub fn mean_draws(&self, species: usize) -> [f64; 4] {
        let d = &self.draws[species];
        [d[0][0], d[1][0], d[2][0], d[3][0]]
    }
}

/// Draw independent edge-mode increments for all species and edges.
pub fn sample_edge_increments(
    spec: &BoundaryNoiseSpec,
    k_b: u32,
    dt: f64,
    rng: &mut impl Rng,
) -> EdgeIncrements {
    let sd = dt.sqrt();
    let n_l = k_b as usize + 1;
    let draws = (0..spec.n_species())
        .map(|_| {
            std::array::from_fn(|_| {
                (0..n_l)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
        })
        .collect();
    EdgeIncrements { draws }
}

/// Project a batch of edge increments to interior drivers:
/// `dW~_{i,j} = sum_{e,l} alpha_{i_e,l} T_e(l,j) d beta_{i_e,l}`.
///
/// Returns one coefficient matrix per species.
pub fn interior_increment(
    cov: &InteriorCovariance,
    incr: &EdgeIncrements,
) -> Vec<DMatrix<f64>> {
    let trunc = cov.truncation();
    let m = trunc.modes_per_axis();
    (0..cov.n_species())
        .map(|i| {
            let mut w = trunc.zero_coeffs();
            let edges = &cov.spec.species[i];
            for l in 0..=cov.k_b.min(trunc.k_max()) {
                for (e_idx, &edge) in EDGES.iter().enumerate() {
                    let a = edges[e_idx].alpha(l);
                    if a == 0.0 {
                        continue;
                    }
                    let d = a * incr.draws[i][e_idx][l as usize];
                    // the coupling is nonzero along one row or column only
                    match edge {
                        Edge::Y0 | Edge::Y1 => {
                            let z = if edge == Edge::Y0 { 0.0 } else { 1.0 };
                            for k2 in 0..m {
                                w[(l as usize, k2)] += d * edge_basis_eval(k2 as u32, z);
                            }
                        }
                        Edge::X0 | Edge::X1 => {
                            let z = if edge == Edge::X0 { 0.0 } else { 1.0 };
                            for k1 in 0..m {
                                w[(k1, l as usize)] += d * edge_basis_eval(k1 as u32, z);
                            }
                        }
                    }
                }
            }
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, StreamKey};
    use std::f64::consts::SQRT_2;

    fn single_mode_spec() -> BoundaryNoiseSpec {
        // alpha_{1_{y=0},1} = 1, everything else silent
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
    fn trace_coupling_examples() {
        assert!((trace_coupling(Edge::Y0, 3, ModeIndex::new(3, 2)) - SQRT_2).abs() < 1e-15);
        assert_eq!(trace_coupling(Edge::Y0, 3, ModeIndex::new(4, 2)), 0.0);
        // f_1(1) = -sqrt 2
        assert!((trace_coupling(Edge::X1, 2, ModeIndex::new(1, 2)) + SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn covariance_single_amplitude() {
        let spec = single_mode_spec();
        let cov = assemble_covariance(&spec, Truncation::new(5)).unwrap();
        // diagonal term f_2(0)^2 = 2
        assert!((cov.entry(0, ModeIndex::new(1, 2), ModeIndex::new(1, 2)) - 2.0).abs() < 1e-14);
        // cross term f_2(0) f_4(0) = 2
        assert!((cov.entry(0, ModeIndex::new(1, 2), ModeIndex::new(1, 4)) - 2.0).abs() < 1e-14);
        // Kronecker mismatch in the aligned index
        assert_eq!(cov.entry(0, ModeIndex::new(2, 2), ModeIndex::new(1, 2)), 0.0);
    }

    #[test]
    fn covariance_all_zero() {
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        };
        let cov = assemble_covariance(&spec, Truncation::new(4)).unwrap();
        assert_eq!(cov.dense(0).amax(), 0.0);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise::power(0.7, 2.0),
                EdgeNoise::power(0.3, 1.5),
                EdgeNoise { alpha0: 0.0, law: DecayLaw::List { values: vec![0.5, 0.0, 0.2] } },
                EdgeNoise::power(1.0, 2.5),
            ]],
        };
        let cov = assemble_covariance(&spec, Truncation::new(6)).unwrap();
        let q = cov.dense(0);
        assert!((q.clone() - q.transpose()).amax() < 1e-14);
        let eig = nalgebra::SymmetricEigen::new(q.clone());
        let min = eig.eigenvalues.min();
        assert!(min >= -1e-10 * q.amax(), "min eigenvalue {min}");
    }

    #[test]
    fn covariance_block_structure_matches_display() {
        // only y-edges active: q[j,k] nonzero requires j1 == k1, and then
        // q = delta alpha^2 f(0)f(0) + delta alpha^2 f(1)f(1)
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise::power(0.8, 2.0),
                EdgeNoise::power(0.4, 2.0),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        };
        let trunc = Truncation::new(4);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        for j in trunc.modes() {
            for k in trunc.modes() {
                let q = cov.entry(0, j, k);
                if j.k1 != k.k1 {
                    assert_eq!(q, 0.0, "off-block entry nonzero at {j:?},{k:?}");
                } else {
                    let a1 = spec.alpha(0, Edge::Y0, j.k1);
                    let a2 = spec.alpha(0, Edge::Y1, j.k1);
                    let expect = a1 * a1
                        * edge_basis_eval(j.k2, 0.0)
                        * edge_basis_eval(k.k2, 0.0)
                        + a2 * a2 * edge_basis_eval(j.k2, 1.0) * edge_basis_eval(k.k2, 1.0);
                    assert!((q - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn validation_rules() {
        let mut spec = single_mode_spec();
        assert!(spec.validate(3).is_ok());
        // Case 1 with a mean-mode amplitude is rejected
        spec.species[0][2].alpha0 = 0.5;
        assert!(spec.validate(3).is_err());
        spec.regime = Regime::Case2;
        assert!(spec.validate(3).is_ok());
        // decay too slow for the configured degree
        let slow = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise::power(1.0, 0.7),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        };
        assert!(slow.validate(3).is_err());
    }

    #[test]
    fn truncation_must_hold_an_active_mode() {
        // only edge mode l = 7 is active; K = 3 cannot see it
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![[
                EdgeNoise {
                    alpha0: 0.0,
                    law: DecayLaw::List { values: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0] },
                },
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        };
        assert!(assemble_covariance(&spec, Truncation::new(3)).is_err());
        assert!(assemble_covariance(&spec, Truncation::new(7)).is_ok());
    }

    #[test]
    fn mean_noise_amplitude_examples() {
        let all_ones = BoundaryNoiseSpec {
            regime: Regime::Case2,
            species: vec![std::array::from_fn(|_| EdgeNoise {
                alpha0: 1.0,
                law: DecayLaw::List { values: vec![] },
            })],
        };
        assert!((all_ones.mean_noise_amplitude(0) - 2.0).abs() < 1e-15);

        assert_eq!(single_mode_spec().mean_noise_amplitude(0), 0.0);

        let single = BoundaryNoiseSpec {
            regime: Regime::Case2,
            species: vec![[
                EdgeNoise { alpha0: 3.0, law: DecayLaw::List { values: vec![] } },
                EdgeNoise::silent(),
                EdgeNoise::silent(),
                EdgeNoise::silent(),
            ]],
        };
        assert!((single.mean_noise_amplitude(0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn edge_increments_zero_dt() {
        let spec = single_mode_spec();
        let mut rng = StreamKey::root(1).child(purpose::EDGE_SAMPLES).rng();
        let incr = sample_edge_increments(&spec, 4, 0.0, &mut rng);
        for e in 0..4 {
            assert!(incr.draws[0][e].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn edge_increments_moments() {
        let spec = single_mode_spec();
        let dt = 0.3;
        let mut rng = StreamKey::root(77).child(purpose::EDGE_SAMPLES).rng();
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n / 5 {
            let incr = sample_edge_increments(&spec, 0, dt, &mut rng);
            for e in 0..4 {
                let v = incr.draws[0][e][0];
                sum += v;
                sumsq += v * v;
            }
        }
        let n_eff = (n / 5 * 4) as f64;
        let mean = sum / n_eff;
        let var = sumsq / n_eff - mean * mean;
        // mean within 4 sigma = 4 sqrt(dt/n)
        assert!(mean.abs() < 4.0 * (dt / n_eff).sqrt(), "mean {mean}");
        // variance within 1% at 3 sigma (sd of sample variance ~ var*sqrt(2/n))
        assert!(
            (var - dt).abs() < 3.0 * dt * (2.0 / n_eff).sqrt(),
            "variance {var} vs {dt}"
        );
    }

    #[test]
    fn monte_carlo_covariance_matches_q() {
        // empirical covariance of W~(1) over 1e5 paths vs q, on a fixed panel
        let spec = BoundaryNoiseSpec {
            regime: Regime::Case1,
            species: vec![
                [
                    EdgeNoise::power(0.8, 2.0),
                    EdgeNoise::power(0.5, 2.0),
                    EdgeNoise::power(0.3, 2.0),
                    EdgeNoise::silent(),
                ],
                [
                    EdgeNoise::power(0.4, 2.0),
                    EdgeNoise::silent(),
                    EdgeNoise::power(0.9, 2.0),
                    EdgeNoise::power(0.2, 2.0),
                ],
            ],
        };
        let trunc = Truncation::new(3);
        let cov = assemble_covariance(&spec, trunc).unwrap();
        let panel: Vec<ModeIndex> = trunc.modes().filter(|m| !m.is_mean()).take(8).collect();

        let paths = 100_000usize;
        let mut rng = StreamKey::root(2024).child(purpose::EDGE_SAMPLES).rng();
        let mut acc = vec![vec![0.0f64; panel.len()]; panel.len()];
        let mut cross = vec![0.0f64; panel.len()];
        for _ in 0..paths {
            let incr = sample_edge_increments(&spec, trunc.k_max(), 1.0, &mut rng);
            let w = interior_increment(&cov, &incr);
            for (a, &ja) in panel.iter().enumerate() {
                let va = w[0][(ja.k1 as usize, ja.k2 as usize)];
                cross[a] += va * w[1][(ja.k1 as usize, ja.k2 as usize)];
                for (b, &jb) in panel.iter().enumerate() {
                    acc[a][b] += va * w[0][(jb.k1 as usize, jb.k2 as usize)];
                }
            }
        }
        let n = paths as f64;
        for (a, &ja) in panel.iter().enumerate() {
            for (b, &jb) in panel.iter().enumerate() {
                let emp = acc[a][b] / n;
                let q = cov.entry(0, ja, jb);
                // Var(XY) = q_aa q_bb + q_ab^2 for joint Gaussians
                let qa = cov.entry(0, ja, ja);
                let qb = cov.entry(0, jb, jb);
                let se = ((qa * qb + q * q) / n).sqrt();
                assert!(
                    (emp - q).abs() < 3.0 * se.max(1e-12),
                    "q[{ja:?},{jb:?}] = {q}, empirical {emp}, se {se}"
                );
            }
            // cross-species covariance vanishes
            let qa = cov.entry(0, ja, ja);
            let qb = cov.entry(1, ja, ja);
            let se = (qa * qb / n).sqrt();
            assert!(
                (cross[a] / n).abs() < 3.0 * se.max(1e-12),
                "cross-species covariance at {ja:?} = {}",
                cross[a] / n
            );
        }
    }
}
