//! Eigenbasis of the Neumann Laplacian on the unit square.
//!
//! The eigenfunctions are tensor products `g_k(x,y) = f_{k1}(x) f_{k2}(y)` of
//! the 1-D cosine family `f_0 = 1`, `f_l(z) = sqrt(2) cos(pi l z)`, with
//! eigenvalues `lambda_k = pi^2 (k1^2 + k2^2)`. The family is orthonormal in
//! `L^2([0,1]^2)` and `|g_k| <= 2` everywhere.
//!
//! Transforms between the physical midpoint grid and the coefficient band use
//! the cosine quadrature rule `x_i = (i + 1/2)/n`, which integrates products
//! of retained basis functions exactly for `n >= 2K + 1`. Averages of
//! eigenfunction products are evaluated symbolically by sign-pattern counting
//! rather than quadrature, so they stay exact for the series in the limit
//! constants.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::f64::consts::{PI, SQRT_2};

/// Index of a 2-D cosine mode. `(0,0)` is the unique kernel mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModeIndex {
    /// Frequency along x.
    pub k1: u32,
    /// Frequency along y.
    pub k2: u32,
}

impl ModeIndex {
    /// Shorthand constructor.
    pub fn new(k1: u32, k2: u32) -> Self {
        ModeIndex { k1, k2 }
    }

    /// `k1^2 + k2^2`, the eigenvalue up to the factor `pi^2`.
    pub fn sq_sum(self) -> u64 {
        (self.k1 as u64) * (self.k1 as u64) + (self.k2 as u64) * (self.k2 as u64)
    }

    /// True for the kernel mode `(0,0)`.
    pub fn is_mean(self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }
}

impl PartialOrd for ModeIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Total order by eigenvalue, then lexicographically. Used for reporting.
impl Ord for ModeIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.sq_sum(), self.k1, self.k2).cmp(&(other.sq_sum(), other.k1, other.k2))
    }
}

/// Eigenvalue `lambda_k = pi^2 (k1^2 + k2^2)` of the Neumann Laplacian.
pub fn eigenvalue(k: ModeIndex) -> f64 {
    PI * PI * k.sq_sum() as f64
}

/// 1-D edge basis `f_l(z)`: `1` for `l = 0`, `sqrt(2) cos(pi l z)` otherwise.
///
/// `z` must lie in `[0,1]`.
pub fn edge_basis_eval(l: u32, z: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&z), "edge coordinate out of [0,1]");
    if l == 0 {
        1.0
    } else {
        SQRT_2 * (PI * l as f64 * z).cos()
    }
}

/// 2-D eigenfunction `g_k(x,y) = f_{k1}(x) f_{k2}(y)`.
pub fn basis_eval(k: ModeIndex, x: f64, y: f64) -> f64 {
    edge_basis_eval(k.k1, x) * edge_basis_eval(k.k2, y)
}

/// Square band truncation `0 <= k1, k2 <= K` with its physical grid.
///
/// The grid is the uniform midpoint grid `x_i = (i + 1/2)/grid_n`;
/// `grid_n >= 2K + 1` makes the quadrature of any product of two retained
/// modes exact and dealiases cubic products back into the band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    k_max: u32,
    grid_n: usize,
}

impl Truncation {
    /// Band `0..=k_max` with the default (minimal exact) grid `2K + 1`.
    pub fn new(k_max: u32) -> Self {
        Truncation { k_max, grid_n: 2 * k_max as usize + 1 }
    }

    /// Band with an explicit grid size; rejects `grid_n < 2K + 1`.
    pub fn with_grid(k_max: u32, grid_n: usize) -> Result<Self> {
        if grid_n < 2 * k_max as usize + 1 {
            return Err(Error::Config(format!(
                "grid_n = {grid_n} too small for K = {k_max}; need grid_n >= {}",
                2 * k_max + 1
            )));
        }
        Ok(Truncation { k_max, grid_n })
    }

    /// Largest retained frequency per axis.
    pub fn k_max(&self) -> u32 {
        self.k_max
    }

    /// Number of grid points per axis.
    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    /// Retained modes per axis.
    pub fn modes_per_axis(&self) -> usize {
        self.k_max as usize + 1
    }

    /// Total number of retained modes `(K+1)^2`.
    pub fn n_modes(&self) -> usize {
        self.modes_per_axis() * self.modes_per_axis()
    }

    /// All retained modes, `k2` fastest.
    pub fn modes(&self) -> impl Iterator<Item = ModeIndex> + '_ {
        let m = self.k_max;
        (0..=m).flat_map(move |k1| (0..=m).map(move |k2| ModeIndex::new(k1, k2)))
    }

    /// Grid point `x_i = (i + 1/2)/n`.
    pub fn grid_point(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.grid_n as f64
    }

    /// Allocate a coefficient matrix (rows = k1, cols = k2).
    pub fn zero_coeffs(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.modes_per_axis(), self.modes_per_axis())
    }

    /// Allocate a grid-value matrix (rows = x index, cols = y index).
    pub fn zero_grid(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.grid_n, self.grid_n)
    }
}

/// Mean-mode value `P_c u` of a coefficient array (`|G| = 1`, `g_0 = 1`).
pub fn project_mean(coeffs: &DMatrix<f64>) -> f64 {
    coeffs[(0, 0)]
}

/// Fluctuation part `P_s u`: same coefficients with the mean mode zeroed.
pub fn project_fluctuation(coeffs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = coeffs.clone();
    out[(0, 0)] = 0.0;
    out
}

/// Cached transform between grid values and band coefficients.
///
/// Forward is the midpoint-rule quadrature of `<u, g_k>`; inverse is plain
/// evaluation of the cosine series on the grid. The pair is the identity on
/// the retained band.
#[derive(Debug, Clone)]
pub struct Transform {
    trunc: Truncation,
    /// `eval[(i, k)] = f_k(x_i)`, shape `grid_n x (K+1)`.
    eval: DMatrix<f64>,
    /// `quad[(k, i)] = f_k(x_i) / grid_n`, shape `(K+1) x grid_n`.
    quad: DMatrix<f64>,
}

impl Transform {
    /// Build the cached 1-D matrices for a truncation.
    pub fn new(trunc: Truncation) -> Self {
        let n = trunc.grid_n();
        let m = trunc.modes_per_axis();
        let mut eval = DMatrix::zeros(n, m);
        let mut quad = DMatrix::zeros(m, n);
        for i in 0..n {
            let x = trunc.grid_point(i);
            for k in 0..m {
                let v = edge_basis_eval(k as u32, x);
                eval[(i, k)] = v;
                quad[(k, i)] = v / n as f64;
            }
        }
        Transform { trunc, eval, quad }
    }

    /// The truncation this transform was built for.
    pub fn truncation(&self) -> Truncation {
        self.trunc
    }

    /// Grid values -> coefficients, `C = Q U Q^T`.
    pub fn forward(&self, grid: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_grid(grid)?;
        let mut scratch = DMatrix::zeros(self.trunc.modes_per_axis(), self.trunc.grid_n());
        let mut coeffs = self.trunc.zero_coeffs();
        self.forward_into(grid, &mut scratch, &mut coeffs);
        Ok(coeffs)
    }

    /// Coefficients -> grid values, `U = E C E^T`.
    pub fn inverse(&self, coeffs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_coeffs(coeffs)?;
        let mut scratch = DMatrix::zeros(self.trunc.grid_n(), self.trunc.modes_per_axis());
        let mut grid = self.trunc.zero_grid();
        self.inverse_into(coeffs, &mut scratch, &mut grid);
        Ok(grid)
    }

    /// Allocation-free forward transform; `scratch` is `(K+1) x grid_n`.
    pub fn forward_into(
        &self,
        grid: &DMatrix<f64>,
        scratch: &mut DMatrix<f64>,
        coeffs: &mut DMatrix<f64>,
    ) {
        scratch.gemm(1.0, &self.quad, grid, 0.0);
        coeffs.gemm(1.0, scratch, &self.quad.transpose(), 0.0);
    }

    /// Allocation-free inverse transform; `scratch` is `grid_n x (K+1)`.
    pub fn inverse_into(
        &self,
        coeffs: &DMatrix<f64>,
        scratch: &mut DMatrix<f64>,
        grid: &mut DMatrix<f64>,
    ) {
        scratch.gemm(1.0, &self.eval, coeffs, 0.0);
        grid.gemm(1.0, scratch, &self.eval.transpose(), 0.0);
    }

    fn check_grid(&self, grid: &DMatrix<f64>) -> Result<()> {
        let n = self.trunc.grid_n();
        if grid.nrows() != n || grid.ncols() != n {
            return Err(Error::SizeMismatch(format!(
                "grid is {}x{}, transform expects {n}x{n}",
                grid.nrows(),
                grid.ncols()
            )));
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &DMatrix<f64>) -> Result<()> {
        let m = self.trunc.modes_per_axis();
        if coeffs.nrows() != m || coeffs.ncols() != m {
            return Err(Error::SizeMismatch(format!(
                "coefficient array is {}x{}, transform expects {m}x{m}",
                coeffs.nrows(),
                coeffs.ncols()
            )));
        }
        Ok(())
    }
}

/// Exact 1-D integral `int_0^1 prod_i f_{l_i}(z) dz` by sign-pattern counting.
///
/// Writing each `cos` as a sum of complex exponentials, the product of the
/// `p` nonconstant factors integrates to `2^{-p}` times the number of sign
/// vectors `s` with `sum_i s_i l_i = 0`, and each such factor carries a
/// `sqrt(2)` from the normalization.
pub fn axis_product_integral(freqs: &[u32]) -> f64 {
    let pos: Vec<u32> = freqs.iter().copied().filter(|&l| l > 0).collect();
    let p = pos.len();
    assert!(p <= 24, "sign-pattern enumeration limited to 24 nonzero factors");
    if p == 0 {
        return 1.0;
    }
    let mut count: u64 = 0;
    for mask in 0u32..(1u32 << p) {
        let mut sum: i64 = 0;
        for (bit, &l) in pos.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                sum += l as i64;
            } else {
                sum -= l as i64;
            }
        }
        if sum == 0 {
            count += 1;
        }
    }
    // (sqrt 2)^p * 2^-p = 2^(-p/2)
    let scale = if p % 2 == 0 {
        (0.5f64).powi((p / 2) as i32)
    } else {
        (0.5f64).powi(((p + 1) / 2) as i32) * SQRT_2
    };
    count as f64 * scale
}

/// Mean of an eigenfunction product, `P_c prod_i g_{k_i} = int prod g_{k_i}`.
///
/// Factorizes over the axes; each axis is an [`axis_product_integral`]. This
/// is the exact value used throughout the limit-constant series.
pub fn mean_of_product(modes: &[ModeIndex]) -> f64 {
    assert!(!modes.is_empty(), "mean_of_product needs at least one factor");
    let ax1: Vec<u32> = modes.iter().map(|k| k.k1).collect();
    let ax2: Vec<u32> = modes.iter().map(|k| k.k2).collect();
    let i1 = axis_product_integral(&ax1);
    if i1 == 0.0 {
        return 0.0;
    }
    i1 * axis_product_integral(&ax2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;
    use rand::Rng;

    const PI2: f64 = PI * PI;

    /// Composite Gauss-Legendre quadrature over [0,1], test-only oracle.
    /// 10-point rule per panel; `panels` chosen so oscillations are resolved.
    pub fn gauss_legendre_01(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
        // 10-point Gauss-Legendre nodes/weights on [-1,1].
        const NODES: [f64; 5] = [
            0.148874338981631211,
            0.433395394129247191,
            0.679409568299024406,
            0.865063366688984511,
            0.973906528517171720,
        ];
        const WEIGHTS: [f64; 5] = [
            0.295524224714752870,
            0.269266719309996355,
            0.219086362515982044,
            0.149451349150580593,
            0.066671344308688138,
        ];
        let hw = 0.5 / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let mid = (2 * p + 1) as f64 * hw;
            for j in 0..5 {
                total += WEIGHTS[j] * (f(mid + hw * NODES[j]) + f(mid - hw * NODES[j]));
            }
        }
        total * hw
    }

    fn quadrature_mean_of_product(modes: &[ModeIndex]) -> f64 {
        let max_f = modes.iter().map(|k| k.k1.max(k.k2)).max().unwrap() as usize;
        let panels = 16 + 4 * max_f * modes.len();
        let ax = |take: fn(&ModeIndex) -> u32| {
            let ms: Vec<u32> = modes.iter().map(take).collect();
            gauss_legendre_01(
                move |z| ms.iter().map(|&l| edge_basis_eval(l, z)).product::<f64>(),
                panels,
            )
        };
        ax(|k| k.k1) * ax(|k| k.k2)
    }

    #[test]
    fn eigenvalue_examples() {
        assert_eq!(eigenvalue(ModeIndex::new(0, 0)), 0.0);
        assert!((eigenvalue(ModeIndex::new(1, 0)) - PI2).abs() < 1e-12);
        assert!((eigenvalue(ModeIndex::new(2, 3)) - 13.0 * PI2).abs() < 1e-10);
    }

    #[test]
    fn edge_basis_examples() {
        assert_eq!(edge_basis_eval(0, 0.37), 1.0);
        assert!((edge_basis_eval(2, 0.0) - SQRT_2).abs() < 1e-15);
        assert!((edge_basis_eval(1, 1.0) + SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn basis_eval_examples() {
        assert_eq!(basis_eval(ModeIndex::new(0, 0), 0.5, 0.5), 1.0);
        assert!((basis_eval(ModeIndex::new(1, 0), 0.0, 0.0) - SQRT_2).abs() < 1e-15);
        // 2 cos(pi/4) cos(0) = sqrt 2
        assert!((basis_eval(ModeIndex::new(1, 1), 0.25, 0.0) - SQRT_2).abs() < 1e-14);
        // matches the product display for k1, k2 > 0
        let k = ModeIndex::new(3, 2);
        let (x, y) = (0.3, 0.71);
        let display = 2.0 * (PI * 3.0 * x).cos() * (PI * 2.0 * y).cos();
        assert!((basis_eval(k, x, y) - display).abs() < 1e-14);
    }

    #[test]
    fn mode_ordering_by_eigenvalue_then_lex() {
        let mut modes = vec![
            ModeIndex::new(2, 0),
            ModeIndex::new(0, 0),
            ModeIndex::new(1, 1),
            ModeIndex::new(0, 1),
            ModeIndex::new(1, 0),
            ModeIndex::new(0, 2),
        ];
        modes.sort();
        assert_eq!(
            modes,
            vec![
                ModeIndex::new(0, 0),
                ModeIndex::new(0, 1),
                ModeIndex::new(1, 0),
                ModeIndex::new(1, 1),
                ModeIndex::new(0, 2),
                ModeIndex::new(2, 0),
            ]
        );
    }

    #[test]
    fn truncation_rejects_small_grid() {
        assert!(Truncation::with_grid(8, 16).is_err());
        assert!(Truncation::with_grid(8, 17).is_ok());
    }

    #[test]
    fn forward_of_constant_field() {
        let trunc = Truncation::new(5);
        let tf = Transform::new(trunc);
        let grid = DMatrix::from_element(trunc.grid_n(), trunc.grid_n(), 1.0);
        let coeffs = tf.forward(&grid).unwrap();
        for k1 in 0..trunc.modes_per_axis() {
            for k2 in 0..trunc.modes_per_axis() {
                let expect = if k1 == 0 && k2 == 0 { 1.0 } else { 0.0 };
                assert!((coeffs[(k1, k2)] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn forward_of_single_mode() {
        let trunc = Truncation::new(5);
        let tf = Transform::new(trunc);
        let mut grid = trunc.zero_grid();
        for i in 0..trunc.grid_n() {
            for j in 0..trunc.grid_n() {
                grid[(i, j)] =
                    basis_eval(ModeIndex::new(2, 1), trunc.grid_point(i), trunc.grid_point(j));
            }
        }
        let coeffs = tf.forward(&grid).unwrap();
        for k1 in 0..6 {
            for k2 in 0..6 {
                let expect = if (k1, k2) == (2, 1) { 1.0 } else { 0.0 };
                assert!(
                    (coeffs[(k1, k2)] - expect).abs() < 1e-12,
                    "coeff ({k1},{k2}) = {}",
                    coeffs[(k1, k2)]
                );
            }
        }
    }

    #[test]
    fn roundtrip_random_band_limited_field() {
        let trunc = Truncation::new(9);
        let tf = Transform::new(trunc);
        let mut rng = StreamKey::root(101).child(0).rng();
        let m = trunc.modes_per_axis();
        let coeffs = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let grid = tf.inverse(&coeffs).unwrap();
        let back = tf.forward(&grid).unwrap();
        let rel = (&back - &coeffs).norm() / coeffs.norm();
        assert!(rel < 1e-12, "roundtrip relative error {rel}");
    }

    #[test]
    fn grid_orthonormality() {
        let trunc = Truncation::new(6);
        let tf = Transform::new(trunc);
        let n = trunc.grid_n();
        // quadrature of g_j g_k over the grid = delta_jk for all retained pairs
        let fields: Vec<(ModeIndex, DMatrix<f64>)> = trunc
            .modes()
            .map(|k| {
                let g = DMatrix::from_fn(n, n, |i, j| {
                    basis_eval(k, trunc.grid_point(i), trunc.grid_point(j))
                });
                (k, g)
            })
            .collect();
        let w = 1.0 / (n * n) as f64;
        for (a, ga) in &fields {
            for (b, gb) in &fields {
                let dot: f64 = ga.iter().zip(gb.iter()).map(|(x, y)| x * y).sum::<f64>() * w;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < 1e-10,
                    "<g_{a:?}, g_{b:?}> = {dot}"
                );
            }
        }
        let _ = tf;
    }

    #[test]
    fn parseval_on_band_limited_fields() {
        let trunc = Truncation::new(7);
        let tf = Transform::new(trunc);
        let mut rng = StreamKey::root(33).child(1).rng();
        let m = trunc.modes_per_axis();
        let coeffs = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let grid = tf.inverse(&coeffs).unwrap();
        let n = trunc.grid_n();
        let l2 = (grid.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64).sqrt();
        let rel = (l2 - coeffs.norm()).abs() / coeffs.norm();
        assert!(rel < 1e-10, "parseval relative error {rel}");
    }

    #[test]
    fn projection_examples() {
        let trunc = Truncation::new(4);
        let mut u = trunc.zero_coeffs();
        u[(0, 0)] = 3.0;
        u[(1, 0)] = 2.0;
        assert_eq!(project_mean(&u), 3.0);
        let fluct = project_fluctuation(&u);
        assert_eq!(fluct[(0, 0)], 0.0);
        assert_eq!(fluct[(1, 0)], 2.0);
        // P_c + P_s = identity
        let mut recomposed = fluct.clone();
        recomposed[(0, 0)] += project_mean(&u);
        assert_eq!(recomposed, u);

        let zero = trunc.zero_coeffs();
        assert_eq!(project_mean(&zero), 0.0);
        assert_eq!(project_fluctuation(&zero), zero);

        let mut g44 = trunc.zero_coeffs();
        g44[(4, 4)] = 1.0;
        assert_eq!(project_mean(&g44), 0.0);
    }

    #[test]
    fn mean_of_product_examples() {
        // [(1,0),(1,0),(2,0)] -> sqrt(2)/2, frozen from the quadrature oracle
        let v = mean_of_product(&[
            ModeIndex::new(1, 0),
            ModeIndex::new(1, 0),
            ModeIndex::new(2, 0),
        ]);
        assert!((v - SQRT_2 / 2.0).abs() < 1e-14);

        // unmatched frequencies integrate to zero
        assert_eq!(
            mean_of_product(&[ModeIndex::new(1, 0), ModeIndex::new(2, 1)]),
            0.0
        );

        // single non-kernel factor has zero mean; all-kernel product is one
        assert_eq!(mean_of_product(&[ModeIndex::new(3, 2)]), 0.0);
        assert_eq!(
            mean_of_product(&[ModeIndex::new(0, 0), ModeIndex::new(0, 0)]),
            1.0
        );
    }

    #[test]
    fn mean_of_squared_mode_is_norm() {
        // ||g_k||^2 = 1 by orthonormality; the quadrature oracle arbitrates
        // the normalization of the diagonal products.
        for k in [ModeIndex::new(1, 1), ModeIndex::new(2, 0), ModeIndex::new(3, 5)] {
            let sym = mean_of_product(&[k, k]);
            let quad = quadrature_mean_of_product(&[k, k]);
            assert!((sym - 1.0).abs() < 1e-14, "||g||^2 = {sym} for {k:?}");
            assert!((sym - quad).abs() < 1e-11, "quadrature disagrees: {quad}");
        }
    }

    #[test]
    fn mean_of_product_matches_quadrature_on_random_tuples() {
        let mut rng = StreamKey::root(4242).child(9).rng();
        for _ in 0..60 {
            let n = rng.gen_range(1..=6usize);
            let modes: Vec<ModeIndex> = (0..n)
                .map(|_| ModeIndex::new(rng.gen_range(0..=8), rng.gen_range(0..=8)))
                .collect();
            let sym = mean_of_product(&modes);
            let quad = quadrature_mean_of_product(&modes);
            assert!(
                (sym - quad).abs() < 1e-9,
                "tuple {modes:?}: symbolic {sym} vs quadrature {quad}"
            );
        }
    }

    proptest! {
        #[test]
        fn roundtrip_property(seed in 0u64..1000) {
            let trunc = Truncation::new(4);
            let tf = Transform::new(trunc);
            let mut rng = StreamKey::root(seed).rng();
            let m = trunc.modes_per_axis();
            let coeffs = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-10.0..10.0));
            let back = tf.forward(&tf.inverse(&coeffs).unwrap()).unwrap();
            let err = (&back - &coeffs).amax();
            prop_assert!(err < 1e-11);
        }

        #[test]
        fn product_mean_is_permutation_invariant(
            ks in proptest::collection::vec((0u32..6, 0u32..6), 2..5),
            shift in 0usize..4,
        ) {
            let modes: Vec<ModeIndex> = ks.iter().map(|&(a, b)| ModeIndex::new(a, b)).collect();
            let mut rotated = modes.clone();
            rotated.rotate_left(shift % modes.len());
            prop_assert_eq!(mean_of_product(&modes), mean_of_product(&rotated));
        }
    }
}
