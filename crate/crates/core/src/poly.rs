//! Polynomial reaction terms in several species with multi-index calculus.
//!
//! A [`ReactionPolynomial`] is a finite coefficient map
//! `F(u) = sum_l c_l u^l` over multi-indices `l` in `N_0^n`, with
//! `u^l = prod_i u_i^{l_i}`. Differentiation `D^l` acts exactly on the
//! coefficient map, which keeps the construction of the effective drift
//! `F + sum (C_l / l!) D^l F` free of any numerical differentiation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A polynomial in `n_vars` species, stored as multi-index -> coefficient.
/// Serializes as a term list `{n_vars, terms: [{powers, coeff}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyRepr", into = "PolyRepr")]
pub struct ReactionPolynomial {
    n_vars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    powers: Vec<u32>,
    coeff: f64,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    n_vars: usize,
    terms: Vec<TermRepr>,
}

impl From<ReactionPolynomial> for PolyRepr {
    fn from(p: ReactionPolynomial) -> Self {
        PolyRepr {
            n_vars: p.n_vars,
            terms: p
                .terms
                .into_iter()
                .map(|(powers, coeff)| TermRepr { powers, coeff })
                .collect(),
        }
    }
}

impl TryFrom<PolyRepr> for ReactionPolynomial {
    type Error = Error;

    fn try_from(r: PolyRepr) -> Result<Self> {
        let mut poly = ReactionPolynomial::zero(r.n_vars);
        for t in r.terms {
            poly.add_term(t.powers, t.coeff)?;
        }
        Ok(poly)
    }
}

impl ReactionPolynomial {
    /// The zero polynomial in `n_vars` variables.
    pub fn zero(n_vars: usize) -> Self {
        ReactionPolynomial { n_vars, terms: BTreeMap::new() }
    }

    /// Build from `(powers, coefficient)` pairs; zero coefficients are kept
    /// out of the map.
    pub fn from_terms(n_vars: usize, terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        let mut poly = ReactionPolynomial::zero(n_vars);
        for (powers, coeff) in terms {
            poly.add_term(powers.clone(), *coeff)?;
        }
        Ok(poly)
    }

    /// Add `coeff * u^powers` to the polynomial.
    pub fn add_term(&mut self, powers: Vec<u32>, coeff: f64) -> Result<()> {
        if powers.len() != self.n_vars {
            return Err(Error::SizeMismatch(format!(
                "term has {} powers, polynomial has {} variables",
                powers.len(),
                self.n_vars
            )));
        }
        let entry = self.terms.entry(powers).or_insert(0.0);
        *entry += coeff;
        if *entry == 0.0 {
            // keep the map canonical so degree queries stay exact
            let key: Vec<u32> = self
                .terms
                .iter()
                .find(|(_, &v)| v == 0.0)
                .map(|(k, _)| k.clone())
                .unwrap();
            self.terms.remove(&key);
        }
        Ok(())
    }

    /// Number of variables.
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Iterate `(powers, coefficient)` in deterministic order.
    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Coefficient of a given power tuple (zero if absent).
    pub fn coeff(&self, powers: &[u32]) -> f64 {
        self.terms.get(powers).copied().unwrap_or(0.0)
    }

    /// Total degree `max |l|` over the nonzero terms; zero polynomial has 0.
    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|p| p.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    /// Evaluate at a point.
    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.n_vars);
        self.terms
            .iter()
            .map(|(powers, &c)| {
                c * powers
                    .iter()
                    .zip(u)
                    .map(|(&p, &x)| x.powi(p as i32))
                    .product::<f64>()
            })
            .sum()
    }

    /// Exact multi-index derivative `D^l F` of the coefficient map:
    /// `u^a` maps to `prod_i a_i!/(a_i - l_i)! * u^(a - l)` when `a >= l`
    /// componentwise and vanishes otherwise. `l = 0` is the identity.
    pub fn multi_index_derivative(&self, l: &[u32]) -> ReactionPolynomial {
        assert_eq!(l.len(), self.n_vars, "multi-index length mismatch");
        let mut out = ReactionPolynomial::zero(self.n_vars);
        for (powers, &c) in &self.terms {
            if powers.iter().zip(l).any(|(&a, &d)| a < d) {
                continue;
            }
            let mut factor = 1.0;
            let mut new_powers = Vec::with_capacity(self.n_vars);
            for (&a, &d) in powers.iter().zip(l) {
                factor *= falling_factorial(a, d);
                new_powers.push(a - d);
            }
            out.add_term(new_powers, c * factor).unwrap();
        }
        out
    }

    /// `self + scale * other` (used to attach the noise-induced correction).
    pub fn add_scaled(&mut self, other: &ReactionPolynomial, scale: f64) -> Result<()> {
        if other.n_vars != self.n_vars {
            return Err(Error::SizeMismatch(
                "cannot add polynomials in different variable counts".into(),
            ));
        }
        for (powers, &c) in &other.terms {
            self.add_term(powers.clone(), scale * c)?;
        }
        Ok(())
    }
}

/// `a! / (a-d)! = a (a-1) ... (a-d+1)`.
fn falling_factorial(a: u32, d: u32) -> f64 {
    (0..d).map(|i| (a - i) as f64).product()
}

/// `l! = prod_i l_i!` for a multi-index.
pub fn multi_index_factorial(l: &[u32]) -> f64 {
    l.iter()
        .map(|&li| (1..=li).map(|v| v as f64).product::<f64>())
        .product()
}

/// All multi-indices in `n` variables with every component even, and
/// `2 <= |l| <= max_order`. These are the orders that can carry a nonzero
/// averaging constant.
pub fn even_multi_indices(n: usize, max_order: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; n];
    fn rec(current: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
        if pos == current.len() {
            if current.iter().sum::<u32>() >= 2 {
                out.push(current.clone());
            }
            return;
        }
        let mut v = 0;
        while v <= remaining {
            current[pos] = v;
            rec(current, pos + 1, remaining - v, out);
            v += 2;
        }
        current[pos] = 0;
    }
    rec(&mut current, 0, max_order, &mut out);
    out.sort_by_key(|l| (l.iter().sum::<u32>(), l.clone()));
    out
}
