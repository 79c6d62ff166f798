//! Sparse multivariate polynomials over `f64`, monomial bases and polynomial
//! matrices.
//!
//! Monomials are ordered graded-lexicographically: first by total degree,
//! then lexicographically with `x1 > x2 > ... > xn`, so the degree-1 basis
//! over two variables reads `[1, x1, x2]`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold used by [`Polynomial::prune`] after a solve.
pub const DEFAULT_PRUNE_EPS: f64 = 1e-9;

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(n_vars: usize) -> Self {
        Monomial(vec![0; n_vars])
    }

    /// The monomial `x_var` (zero-based index).
    pub fn var(n_vars: usize, var: usize) -> Self {
        let mut e = vec![0; n_vars];
        e[var] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn n_vars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Parses the display form, e.g. `1`, `x2` or `x1^2*x3`.
    pub fn parse(s: &str, n_vars: usize) -> Result<Monomial> {
        let s = s.trim();
        let mut e = vec![0u32; n_vars];
        if s == "1" {
            return Ok(Monomial(e));
        }
        for factor in s.split('*') {
            let (base, pow) = match factor.split_once('^') {
                Some((b, p)) => (
                    b,
                    p.parse::<u32>()
                        .map_err(|_| Error::Parse(format!("bad exponent in {s:?}")))?,
                ),
                None => (factor, 1),
            };
            let idx = base
                .strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&i| i >= 1 && i <= n_vars)
                .ok_or_else(|| Error::Parse(format!("bad variable {base:?} in {s:?}")))?;
            e[idx - 1] += pow;
        }
        Ok(Monomial(e))
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// All monomials up to a total degree, sorted and deduplicated.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialBasis {
    n_vars: usize,
    entries: Vec<Monomial>,
}

impl MonomialBasis {
    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Monomial] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Monomial> {
        self.entries.iter()
    }

    /// Evaluates every basis monomial at `point`.
    pub fn eval(&self, point: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|m| m.eval(point)),
        )
    }
}

/// Every monomial in `n_vars` variables with total degree `<= max_degree`,
/// in graded-lex order. The basis has `C(n_vars + max_degree, max_degree)`
/// entries.
pub fn monomial_basis(n_vars: usize, max_degree: u32) -> MonomialBasis {
    assert!(n_vars >= 1, "monomial basis needs at least one variable");
    let mut entries = Vec::new();
    let mut current = vec![0u32; n_vars];
    fill_exponents(&mut current, 0, max_degree, &mut entries);
    entries.sort();
    entries.dedup();
    MonomialBasis { n_vars, entries }
}

fn fill_exponents(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<Monomial>) {
    if pos == current.len() {
        out.push(Monomial(current.to_vec()));
        return;
    }
    for e in 0..=remaining {
        current[pos] = e;
        fill_exponents(current, pos + 1, remaining - e, out);
    }
    current[pos] = 0;
}

#[derive(Clone, PartialEq, Debug)]
pub struct Polynomial {
    n_vars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(n_vars: usize) -> Self {
        Polynomial {
            n_vars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(n_vars: usize, c: f64) -> Self {
        let mut p = Self::zero(n_vars);
        p.add_term(Monomial::one(n_vars), c);
        p
    }

    /// The polynomial `x_var` (zero-based index).
    pub fn var(n_vars: usize, var: usize) -> Self {
        let mut p = Self::zero(n_vars);
        p.add_term(Monomial::var(n_vars, var), 1.0);
        p
    }

    pub fn from_terms<I>(n_vars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut p = Self::zero(n_vars);
        for (m, c) in terms {
            if m.n_vars() != n_vars {
                return Err(Error::Dimension(format!(
                    "monomial has {} variables, polynomial has {}",
                    m.n_vars(),
                    n_vars
                )));
            }
            p.add_term(m, c);
        }
        Ok(p)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Maximum total degree of stored monomials; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Adds `c * m` in place; exact zeros are dropped.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = *o.get() + c;
                if s == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    fn check_vars(&self, other: &Polynomial) -> Result<()> {
        if self.n_vars != other.n_vars {
            return Err(Error::Dimension(format!(
                "polynomials over {} and {} variables",
                self.n_vars, other.n_vars
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_vars(other)?;
        let mut out = Polynomial::zero(self.n_vars);
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, lambda: f64) -> Polynomial {
        if lambda == 0.0 {
            return Polynomial::zero(self.n_vars);
        }
        let mut out = Polynomial::zero(self.n_vars);
        for (m, c) in self.terms() {
            out.add_term(m.clone(), c * lambda);
        }
        out
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.n_vars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.n_vars {
            return Err(Error::Dimension(format!(
                "point of length {} for a polynomial in {} variables",
                point.len(),
                self.n_vars
            )));
        }
        Ok(self.terms().map(|(m, c)| c * m.eval(point)).sum())
    }

    /// Drops coefficients with magnitude `<= eps`.
    pub fn prune(&self, eps: f64) -> Polynomial {
        Polynomial {
            n_vars: self.n_vars,
            terms: self
                .terms
                .iter()
                .filter(|(_, c)| c.abs() > eps)
                .map(|(m, c)| (m.clone(), *c))
                .collect(),
        }
    }

    /// Largest absolute coefficient difference against `other`.
    pub fn max_abs_diff(&self, other: &Polynomial) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, c) in self.terms() {
            worst = worst.max((c - other.coeff(m)).abs());
        }
        for (m, c) in other.terms() {
            if !self.terms.contains_key(m) {
                worst = worst.max(c.abs());
            }
        }
        worst
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, c)) in self.terms().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if m.is_one() {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

// Operator forms panic on a variable-count mismatch; use the `try_*`
// methods where the counts are not known to agree.
impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs)
            .expect("polynomial variable counts differ")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_sub(rhs)
            .expect("polynomial variable counts differ")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs)
            .expect("polynomial variable counts differ")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

/// Dense matrix of polynomials sharing one variable count.
#[derive(Clone, PartialEq, Debug)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    n_vars: usize,
    entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, n_vars: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            n_vars,
            entries: vec![Polynomial::zero(n_vars); rows * cols],
        }
    }

    pub fn from_fn<F>(rows: usize, cols: usize, n_vars: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Polynomial,
    {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let p = f(i, j);
                assert_eq!(p.n_vars(), n_vars, "entry variable count");
                entries.push(p);
            }
        }
        PolyMatrix {
            rows,
            cols,
            n_vars,
            entries,
        }
    }

    /// Constant polynomial matrix from a real matrix.
    pub fn from_real(m: &DMatrix<f64>, n_vars: usize) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), n_vars, |i, j| {
            Polynomial::constant(n_vars, m[(i, j)])
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(p.n_vars(), self.n_vars, "entry variable count");
        self.entries[i * self.cols + j] = p;
    }

    pub fn degree(&self) -> u32 {
        self.entries
            .iter()
            .map(Polynomial::degree)
            .max()
            .unwrap_or(0)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn transpose(&self) -> PolyMatrix {
        Self::from_fn(self.cols, self.rows, self.n_vars, |i, j| {
            self.get(j, i).clone()
        })
    }

    pub fn try_mul(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        if self.cols != other.rows || self.n_vars != other.n_vars {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, other.cols, self.n_vars, |i, j| {
            let mut acc = Polynomial::zero(self.n_vars);
            for k in 0..self.cols {
                acc = &acc + &(self.get(i, k) * other.get(k, j));
            }
            acc
        }))
    }

    pub fn eval(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).eval(point)?;
            }
        }
        Ok(out)
    }
}

/// Kronecker product of two real matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `L(z) ⊗ z`, where `z` is the column of the variables listed in `z_vars`.
///
/// For an `m x N` input the result is `mN x N` with entry
/// `(i*N + k, j) = L[i, j] * z_k`.
pub fn polymat_kron_var(l: &PolyMatrix, z_vars: &[usize]) -> Result<PolyMatrix> {
    let n = z_vars.len();
    if l.cols() != n {
        return Err(Error::Dimension(format!(
            "matrix has {} columns but {} variables were given",
            l.cols(),
            n
        )));
    }
    if let Some(&bad) = z_vars.iter().find(|&&v| v >= l.n_vars()) {
        return Err(Error::Dimension(format!(
            "variable index {bad} out of range for {} variables",
            l.n_vars()
        )));
    }
    let vars: Vec<Polynomial> = z_vars
        .iter()
        .map(|&v| Polynomial::var(l.n_vars(), v))
        .collect();
    Ok(PolyMatrix::from_fn(l.rows() * n, n, l.n_vars(), |r, j| {
        let (i, k) = (r / n, r % n);
        l.get(i, j) * &vars[k]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(n: usize, i: usize) -> Polynomial {
        Polynomial::var(n, i)
    }

    #[test]
    fn basis_sizes_and_order() {
        let b = monomial_basis(1, 2);
        assert_eq!(b.len(), 3);
        assert_eq!(b.entries()[0], Monomial::one(1));
        assert_eq!(b.entries()[1], Monomial::new(vec![1]));
        assert_eq!(b.entries()[2], Monomial::new(vec![2]));

        let b = monomial_basis(2, 1);
        let shown: Vec<String> = b.iter().map(|m| m.to_string()).collect();
        assert_eq!(shown, ["1", "x1", "x2"]);

        assert_eq!(monomial_basis(3, 4).len(), 35);
    }

    #[test]
    fn basis_count_matches_brute_force() {
        for n in 1..=4usize {
            for d in 0..=5u32 {
                let mut count = 0;
                let total = (d as usize + 1).pow(n as u32);
                for idx in 0..total {
                    let mut rem = idx;
                    let mut s = 0;
                    for _ in 0..n {
                        s += rem % (d as usize + 1);
                        rem /= d as usize + 1;
                    }
                    if s <= d as usize {
                        count += 1;
                    }
                }
                assert_eq!(monomial_basis(n, d).len(), count, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn arithmetic_examples() {
        let one = Polynomial::constant(1, 1.0);
        let p = &(&x(1, 0) + &one) * &(&x(1, 0) - &one);
        let expected =
            Polynomial::from_terms(1, [(Monomial::new(vec![2]), 1.0), (Monomial::one(1), -1.0)])
                .unwrap();
        assert_eq!(p, expected);

        assert_eq!(&p + &Polynomial::zero(1), p);

        let s = &x(2, 0) + &x(2, 1);
        let sq = &s * &s;
        assert_eq!(sq.coeff(&Monomial::new(vec![2, 0])), 1.0);
        assert_eq!(sq.coeff(&Monomial::new(vec![1, 1])), 2.0);
        assert_eq!(sq.coeff(&Monomial::new(vec![0, 2])), 1.0);
        assert_eq!(sq.n_terms(), 3);
    }

    #[test]
    fn cancellation_leaves_no_zero_terms() {
        let p = &x(2, 0) - &x(2, 0);
        assert!(p.is_zero());
        assert_eq!(p.n_terms(), 0);
        assert!(x(2, 0).scale(0.0).is_zero());
    }

    #[test]
    fn mismatched_variable_counts_are_rejected() {
        assert!(matches!(
            x(1, 0).try_add(&x(2, 0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(x(2, 0).eval(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn eval_examples() {
        let p = &(&x(1, 0) * &x(1, 0)) + &Polynomial::constant(1, 1.0);
        assert_eq!(p.eval(&[2.0]).unwrap(), 5.0);
        assert_eq!(Polynomial::zero(3).eval(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let ud =
            &Polynomial::constant(1, 0.01) + &(&Polynomial::constant(1, 1.0) + &x(1, 0)).pow(2);
        assert!((ud.eval(&[-1.0]).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn prune_drops_small_coefficients() {
        let p = Polynomial::from_terms(
            1,
            [(Monomial::one(1), 1e-12), (Monomial::new(vec![1]), 2.0)],
        )
        .unwrap();
        let q = p.prune(DEFAULT_PRUNE_EPS);
        assert_eq!(q.n_terms(), 1);
        assert_eq!(q.coeff(&Monomial::new(vec![1])), 2.0);
    }

    #[test]
    fn kron_examples() {
        let a = DMatrix::from_row_slice(1, 1, &[2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        assert_eq!(kron(&a, &b), DMatrix::from_row_slice(2, 1, &[2.0, 6.0]));
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kron(&i2, &i2), DMatrix::identity(4, 4));
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let s = DMatrix::from_row_slice(1, 1, &[3.0]);
        assert_eq!(
            kron(&d, &s),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 6.0])
        );
    }

    #[test]
    fn kron_var_examples() {
        let l = PolyMatrix::from_fn(1, 1, 1, |_, _| x(1, 0));
        let r = polymat_kron_var(&l, &[0]).unwrap();
        assert_eq!(r.get(0, 0), &(&x(1, 0) * &x(1, 0)));

        let l = PolyMatrix::from_real(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 2);
        let r = polymat_kron_var(&l, &[0, 1]).unwrap();
        assert_eq!((r.rows(), r.cols()), (2, 2));
        assert_eq!(r.get(0, 0), &x(2, 0));
        assert_eq!(r.get(1, 0), &x(2, 1));
        assert!(r.get(0, 1).is_zero() && r.get(1, 1).is_zero());

        // degree 2a-1 in, 2a out
        let l = PolyMatrix::from_fn(1, 1, 1, |_, _| x(1, 0).pow(3));
        assert_eq!(polymat_kron_var(&l, &[0]).unwrap().degree(), 4);

        assert!(polymat_kron_var(&l, &[3]).is_err());
        assert!(polymat_kron_var(&l, &[0, 0]).is_err());
    }
}
