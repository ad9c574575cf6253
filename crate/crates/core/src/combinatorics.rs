//! Exact integer bookkeeping of the Picard expansion.
//!
//! `P_{n+1}(z) = z + P_n(z)^2`, indexed by iterate: `P_0 = z` stands for `u_0`
//! alone, so `deg P_n = 2^n` and the coefficient `A(m, n)` of `z^m` in `P_n` is
//! the number of operator terms of `u_0`-degree `m` in the `n`-th iterate. `D(n+1) = 1 + d^2 D(n)^2`, `D(0) = 1` counts scalar summands.

use std::collections::BTreeMap;
use std::sync::RwLock;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Polynomial with non-negative arbitrary-precision integer coefficients.
/// Zero coefficients are never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IntPolynomial {
    coeffs: BTreeMap<usize, BigUint>,
}

impl IntPolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    /// The monomial `z`.
    pub fn z() -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(1, BigUint::one());
        Self { coeffs }
    }

    /// Build from `(degree, coefficient)` pairs; zero coefficients are dropped.
    pub fn from_terms<I>(terms: I) -> Self
    where
        I: IntoIterator<Item = (usize, BigUint)>,
    {
        let mut coeffs = BTreeMap::new();
        for (k, c) in terms {
            if !c.is_zero() {
                *coeffs.entry(k).or_insert_with(BigUint::zero) += c;
            }
        }
        Self { coeffs }
    }

    pub fn coeff(&self, degree: usize) -> BigUint {
        self.coeffs.get(&degree).cloned().unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, &BigUint)> {
        self.coeffs.iter().map(|(k, c)| (*k, c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Degree, or `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.keys().next_back().copied()
    }

    /// Value at `z = 1`.
    pub fn sum_coeffs(&self) -> BigUint {
        self.coeffs.values().sum()
    }

    /// Dense coefficient vector `[c_0, …, c_deg]`.
    pub fn to_dense(&self) -> Vec<BigUint> {
        match self.degree() {
            None => Vec::new(),
            Some(deg) => (0..=deg).map(|k| self.coeff(k)).collect(),
        }
    }

    fn from_dense(dense: Vec<BigUint>) -> Self {
        Self::from_terms(dense.into_iter().enumerate())
    }

    /// Drop every term of degree above `max_degree`.
    pub fn truncated(&self, max_degree: usize) -> Self {
        Self {
            coeffs: self.coeffs.range(..=max_degree).map(|(k, c)| (*k, c.clone())).collect(),
        }
    }
}

/// Square of a dense polynomial, keeping degrees `<= max_degree`.
fn square_dense(a: &[BigUint], max_degree: usize) -> Vec<BigUint> {
    if a.is_empty() {
        return Vec::new();
    }
    let out_len = (2 * (a.len() - 1)).min(max_degree) + 1;
    let mut out = vec![BigUint::zero(); out_len];
    let nz: Vec<usize> = (0..a.len()).filter(|&i| !a[i].is_zero()).collect();
    for (pi, &i) in nz.iter().enumerate() {
        if 2 * i < out_len {
            out[2 * i] += &a[i] * &a[i];
        }
        for &j in &nz[pi + 1..] {
            let k = i + j;
            if k >= out_len {
                break;
            }
            let prod = &a[i] * &a[j];
            out[k] += &prod << 1usize;
        }
    }
    out
}

fn next_truncated(p: &IntPolynomial, max_degree: usize) -> IntPolynomial {
    let mut dense = square_dense(&p.to_dense(), max_degree);
    if max_degree >= 1 {
        if dense.len() < 2 {
            dense.resize(2, BigUint::zero());
        }
        dense[1] += 1u32;
    }
    IntPolynomial::from_dense(dense)
}

/// `z + p(z)^2` in exact arithmetic.
pub fn poly_next(p: &IntPolynomial) -> IntPolynomial {
    next_truncated(p, usize::MAX)
}

/// `P_n`, i.e. `n + 1` applications of [`poly_next`] to zero.
pub fn poly_iterate(n: usize) -> IntPolynomial {
    (0..=n).fold(IntPolynomial::zero(), |p, _| poly_next(&p))
}

/// `A(m, n)`, the coefficient of `z^m` in `P_n`, for `1 <= m <= 2^n`.
///
/// Only coefficients up to degree `m` are carried through the recursion,
/// since `P_n` has no constant term.
#[allow(non_snake_case)]
pub fn coeff_A(m: usize, n: usize) -> Result<BigUint> {
    check_coeff_range(m, n)?;
    let p = (0..=n).fold(IntPolynomial::zero(), |p, _| next_truncated(&p, m));
    Ok(p.coeff(m))
}

fn check_coeff_range(m: usize, n: usize) -> Result<()> {
    if m == 0 || n + 1 >= usize::BITS as usize || m > (1usize << n) {
        return Err(Error::domain(format!(
            "coefficient index out of range: need 1 <= m <= 2^n, got m={m}, n={n}"
        )));
    }
    Ok(())
}

/// Memoized full polynomials `P_n`, shareable between threads.
#[derive(Debug, Default)]
pub struct CoefficientTable {
    polys: RwLock<Vec<IntPolynomial>>,
}

impl CoefficientTable {
    pub fn new() -> Self {
        Self {
            polys: RwLock::new(vec![IntPolynomial::z()]),
        }
    }

    pub fn poly(&self, n: usize) -> IntPolynomial {
        {
            let polys = self.polys.read().expect("table lock");
            if let Some(p) = polys.get(n) {
                return p.clone();
            }
        }
        let mut polys = self.polys.write().expect("table lock");
        while polys.len() <= n {
            let next = poly_next(polys.last().expect("P_0 is seeded"));
            polys.push(next);
        }
        polys[n].clone()
    }

    #[allow(non_snake_case)]
    pub fn coeff_A(&self, m: usize, n: usize) -> Result<BigUint> {
        check_coeff_range(m, n)?;
        Ok(self.poly(n).coeff(m))
    }
}

fn factorial(n: u64) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, k| acc * k)
}

/// Catalan number `(2M)! / (M! (M+1)!)`.
pub fn catalan(m: u64) -> BigUint {
    factorial(2 * m) / (factorial(m) * factorial(m + 1))
}

/// `D(n)` under `D(k+1) = 1 + d^2 D(k)^2`, `D(0) = 1`.
pub fn d_sequence(n: usize, d: u64) -> BigUint {
    let d2 = BigUint::from(d) * d;
    let mut v = BigUint::one();
    for _ in 0..n {
        v = BigUint::one() + &d2 * &v * &v;
    }
    v
}

/// `D(0), …, D(n)`.
pub fn d_sequence_table(n: usize, d: u64) -> Vec<BigUint> {
    let d2 = BigUint::from(d) * d;
    let mut out = Vec::with_capacity(n + 1);
    let mut v = BigUint::one();
    out.push(v.clone());
    for _ in 0..n {
        v = BigUint::one() + &d2 * &v * &v;
        out.push(v.clone());
    }
    out
}

/// Outcome of the bilateral growth bound
/// `1 <= 9 D(k+l) / (9 D(l))^{2^k} <= (1 + 1/(9 D(l)^2))^{2^k - 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DBoundsReport {
    pub holds: bool,
    pub ratio: BigRational,
    pub upper: BigRational,
}

impl DBoundsReport {
    pub fn ratio_f64(&self) -> f64 {
        self.ratio.to_f64().unwrap_or(f64::NAN)
    }

    pub fn upper_f64(&self) -> f64 {
        self.upper.to_f64().unwrap_or(f64::NAN)
    }
}

/// Check the bilateral bound in exact rational arithmetic (stated for `d = 3`).
pub fn d_bounds_check(k: u32, l: usize, d: u64) -> Result<DBoundsReport> {
    if d != 3 {
        return Err(Error::Unsupported(format!(
            "bilateral bounds are stated for d = 3, got d = {d}"
        )));
    }
    if k == 0 || l == 0 {
        return Err(Error::domain("k and l must be at least 1"));
    }
    if k > 20 {
        return Err(Error::Unsupported(format!("k = {k} is too large for exact evaluation")));
    }
    let table = d_sequence_table(k as usize + l, d);
    let nine = BigUint::from(9u32);
    let power = 1usize << k;
    let num = &nine * &table[k as usize + l];
    let base = &nine * &table[l];
    let den = num_traits::pow(base, power);
    let ratio = BigRational::new(num.into(), den.into());
    let dl2 = &table[l] * &table[l];
    let step = BigRational::new(
        (&nine * &dl2 + BigUint::one()).into(),
        (&nine * &dl2).into(),
    );
    let upper = num_traits::pow(step, power - 1);
    let holds = ratio >= BigRational::one() && ratio <= upper;
    Ok(DBoundsReport { holds, ratio, upper })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn dense_u64(p: &IntPolynomial) -> Vec<u64> {
        p.to_dense().iter().map(|c| c.to_u64().unwrap()).collect()
    }

    #[test]
    fn first_polynomials() {
        assert_eq!(poly_next(&IntPolynomial::zero()), IntPolynomial::z());
        assert_eq!(poly_iterate(0), IntPolynomial::z());
        assert_eq!(dense_u64(&poly_iterate(1)), vec![0, 1, 1]);
        let p2 = poly_iterate(2);
        assert_eq!(dense_u64(&p2), vec![0, 1, 1, 2, 1]);
        let p3 = poly_next(&p2);
        assert_eq!(dense_u64(&p3), vec![0, 1, 1, 2, 5, 6, 6, 4, 1]);
        assert_eq!(p3, poly_iterate(3));
        for n in 0..=10 {
            assert_eq!(poly_iterate(n).degree(), Some(1 << n));
        }
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(coeff_A(4, 3).unwrap(), big(5));
        assert_eq!(coeff_A(8, 3).unwrap(), big(1));
        assert!(matches!(coeff_A(9, 3), Err(Error::Domain(_))));
        assert!(matches!(coeff_A(0, 3), Err(Error::Domain(_))));
        let table = CoefficientTable::new();
        for n in 1..=6 {
            for m in 1..=(1 << n) {
                assert_eq!(table.coeff_A(m, n).unwrap(), coeff_A(m, n).unwrap());
            }
        }
    }

    #[test]
    fn catalan_small() {
        assert_eq!(catalan(1), big(1));
        assert_eq!(catalan(2), big(2));
        assert_eq!(catalan(4), big(14));
        // P = 1 + z P^2 convolution recursion
        let mut c = vec![big(1)];
        for n in 0..20usize {
            let next: BigUint = (0..=n).map(|i| &c[i] * &c[n - i]).sum();
            c.push(next);
        }
        for m in 1..=20u64 {
            assert_eq!(catalan(m), c[m as usize]);
        }
    }

    #[test]
    fn d_sequence_values() {
        assert_eq!(d_sequence(0, 3), big(1));
        assert_eq!(d_sequence(1, 3), big(10));
        assert_eq!(d_sequence(2, 3), big(901));
        assert_eq!(d_sequence(3, 3), big(7_306_210));
        assert_eq!(d_sequence(2, 1), big(5));
        let table = d_sequence_table(8, 4);
        for n in 0..8 {
            assert_eq!(table[n + 1], big(1) + big(16) * &table[n] * &table[n]);
            assert_eq!(table[n], d_sequence(n, 4));
        }
    }

    #[test]
    fn d_bounds_examples() {
        let r = d_bounds_check(1, 1, 3).unwrap();
        assert_eq!(r.ratio, BigRational::new(8109.into(), 8100.into()));
        assert!(r.holds);
        assert!(r.ratio <= BigRational::new(901.into(), 900.into()));
        assert!(d_bounds_check(1, 2, 3).unwrap().holds);
        assert!(d_bounds_check(2, 1, 3).unwrap().holds);
        assert!(matches!(d_bounds_check(1, 1, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncation_matches_full() {
        let full = poly_iterate(6);
        for m in [1, 5, 17, 40, 64] {
            assert_eq!(coeff_A(m, 6).unwrap(), full.coeff(m));
        }
    }
}
