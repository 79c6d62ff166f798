//! Sum-of-squares program builder and compiler.
//!
//! Decision variables are flattened into scalar unknowns. Expressions are
//! polynomial matrices whose coefficients are affine in those scalars. A
//! matrix constraint `M(z) ∈ SOS[z, 2d]^p` is compiled through the
//! scalarization `yᵀ M(z) y`: the Gram basis is `{y_i · b_k(z)}` with `b` the
//! full monomial basis of degree `d`, and coefficient matching against
//! `(I_p ⊗ b)ᵀ G (I_p ⊗ b)` yields one equality row per upper-triangle entry
//! and monomial.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::poly::{monomial_basis, Monomial, MonomialBasis, PolyMatrix, Polynomial};
use crate::sdp::{self, unpack_symmetric, Cone, ConicProblem, SolveStatus, SolverReport, Triplet};

/// Default strictness margin for SOS multipliers.
pub const DEFAULT_SOS_MARGIN: f64 = 1e-6;

/// Affine function `constant + Σ coeff_k · v_k` of the scalar unknowns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffineScalar {
    pub constant: f64,
    pub terms: BTreeMap<usize, f64>,
}

impl AffineScalar {
    pub fn constant(c: f64) -> Self {
        AffineScalar {
            constant: c,
            terms: BTreeMap::new(),
        }
    }

    pub fn var(index: usize) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(index, 1.0);
        AffineScalar {
            constant: 0.0,
            terms,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn add_scaled(&mut self, other: &AffineScalar, c: f64) {
        if c == 0.0 {
            return;
        }
        self.constant += c * other.constant;
        for (&k, &v) in &other.terms {
            let e = self.terms.entry(k).or_insert(0.0);
            *e += c * v;
            if *e == 0.0 {
                self.terms.remove(&k);
            }
        }
    }

    pub fn scaled(&self, c: f64) -> AffineScalar {
        let mut out = AffineScalar::default();
        out.add_scaled(self, c);
        out
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&k, &v)| v * values[k]).sum::<f64>()
    }
}

/// Polynomial whose coefficients are affine in the scalar unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePoly {
    n_vars: usize,
    coeffs: BTreeMap<Monomial, AffineScalar>,
}

impl AffinePoly {
    pub fn zero(n_vars: usize) -> Self {
        AffinePoly {
            n_vars,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = Self::zero(p.n_vars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &AffineScalar::constant(c), 1.0);
        }
        out
    }

    /// The unknown `index` times the monomial `m`.
    pub fn unknown(n_vars: usize, m: Monomial, index: usize) -> Self {
        let mut out = Self::zero(n_vars);
        out.add_term(m, &AffineScalar::var(index), 1.0);
        out
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.coeffs.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn coeffs(&self) -> impl Iterator<Item = (&Monomial, &AffineScalar)> {
        self.coeffs.iter()
    }

    fn add_term(&mut self, m: Monomial, a: &AffineScalar, c: f64) {
        let e = self.coeffs.entry(m.clone()).or_default();
        e.add_scaled(a, c);
        if e.is_zero() {
            self.coeffs.remove(&m);
        }
    }

    pub fn add(&self, other: &AffinePoly) -> AffinePoly {
        assert_eq!(self.n_vars, other.n_vars, "variable counts differ");
        let mut out = self.clone();
        for (m, a) in other.coeffs() {
            out.add_term(m.clone(), a, 1.0);
        }
        out
    }

    pub fn sub(&self, other: &AffinePoly) -> AffinePoly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> AffinePoly {
        let mut out = Self::zero(self.n_vars);
        if c != 0.0 {
            for (m, a) in self.coeffs() {
                out.add_term(m.clone(), a, c);
            }
        }
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> AffinePoly {
        assert_eq!(self.n_vars, p.n_vars(), "variable counts differ");
        let mut out = Self::zero(self.n_vars);
        for (ma, a) in self.coeffs() {
            for (mb, c) in p.terms() {
                out.add_term(ma.mul(mb), a, c);
            }
        }
        out
    }

    /// Substitutes values for the unknowns.
    pub fn instantiate(&self, values: &[f64]) -> Polynomial {
        let mut p = Polynomial::zero(self.n_vars);
        for (m, a) in self.coeffs() {
            p.add_term(m.clone(), a.eval(values));
        }
        p
    }

    /// Evaluates the polynomial variables at `point`, leaving an affine scalar.
    pub fn eval_point(&self, point: &[f64]) -> AffineScalar {
        let mut out = AffineScalar::default();
        for (m, a) in self.coeffs() {
            out.add_scaled(a, m.eval(point));
        }
        out
    }
}

/// Matrix of [`AffinePoly`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePolyMatrixExpr {
    rows: usize,
    cols: usize,
    n_vars: usize,
    entries: Vec<AffinePoly>,
}

impl AffinePolyMatrixExpr {
    pub fn zeros(rows: usize, cols: usize, n_vars: usize) -> Self {
        AffinePolyMatrixExpr {
            rows,
            cols,
            n_vars,
            entries: vec![AffinePoly::zero(n_vars); rows * cols],
        }
    }

    pub fn from_fn<F>(rows: usize, cols: usize, n_vars: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> AffinePoly,
    {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        AffinePolyMatrixExpr {
            rows,
            cols,
            n_vars,
            entries,
        }
    }

    pub fn from_poly_matrix(m: &PolyMatrix) -> Self {
        Self::from_fn(m.rows(), m.cols(), m.n_vars(), |i, j| {
            AffinePoly::from_poly(m.get(i, j))
        })
    }

    pub fn from_real(m: &DMatrix<f64>, n_vars: usize) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), n_vars, |i, j| {
            AffinePoly::from_poly(&Polynomial::constant(n_vars, m[(i, j)]))
        })
    }

    /// `p · I_size`.
    pub fn scaled_identity(p: &AffinePoly, size: usize) -> Self {
        Self::from_fn(size, size, p.n_vars(), |i, j| {
            if i == j {
                p.clone()
            } else {
                AffinePoly::zero(p.n_vars())
            }
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

    pub fn get(&self, i: usize, j: usize) -> &AffinePoly {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: AffinePoly) {
        self.entries[i * self.cols + j] = p;
    }

    pub fn degree(&self) -> u32 {
        self.entries
            .iter()
            .map(AffinePoly::degree)
            .max()
            .unwrap_or(0)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, self.n_vars, |i, j| {
            self.get(j, i).clone()
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, self.cols, self.n_vars, |i, j| {
            self.get(i, j).add(other.get(i, j))
        }))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_fn(self.rows, self.cols, self.n_vars, |i, j| {
            self.get(i, j).scale(c)
        })
    }

    /// Entry-wise product with a fixed scalar polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> Self {
        Self::from_fn(self.rows, self.cols, self.n_vars, |i, j| {
            self.get(i, j).mul_poly(p)
        })
    }

    /// `M · self` for a real matrix `M`.
    pub fn left_mul_real(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != self.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                m.nrows(),
                m.ncols(),
                self.rows,
                self.cols
            )));
        }
        Ok(Self::from_fn(m.nrows(), self.cols, self.n_vars, |i, j| {
            let mut acc = AffinePoly::zero(self.n_vars);
            for k in 0..self.rows {
                let c = m[(i, k)];
                if c != 0.0 {
                    acc = acc.add(&self.get(k, j).scale(c));
                }
            }
            acc
        }))
    }

    /// `self ⊗ z` with `z` the column of the polynomial variables `z_vars`.
    pub fn kron_var(&self, z_vars: &[usize]) -> Result<Self> {
        let n = z_vars.len();
        if self.cols != n {
            return Err(Error::Dimension(format!(
                "expression has {} columns but {} variables were given",
                self.cols, n
            )));
        }
        if let Some(&bad) = z_vars.iter().find(|&&v| v >= self.n_vars) {
            return Err(Error::Dimension(format!(
                "variable index {bad} out of range"
            )));
        }
        let vars: Vec<Polynomial> = z_vars
            .iter()
            .map(|&v| Polynomial::var(self.n_vars, v))
            .collect();
        Ok(Self::from_fn(self.rows * n, n, self.n_vars, |r, j| {
            let (i, k) = (r / n, r % n);
            self.get(i, j).mul_poly(&vars[k])
        }))
    }

    /// Builds a symmetric matrix from upper-triangle blocks; `(i, j)` blocks
    /// with `i > j` are the transposes of `(j, i)`, missing blocks are zero.
    pub fn from_upper_blocks(
        sizes: &[usize],
        n_vars: usize,
        blocks: Vec<((usize, usize), AffinePolyMatrixExpr)>,
    ) -> Result<Self> {
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let dim: usize = sizes.iter().sum();
        let mut out = Self::zeros(dim, dim, n_vars);
        for ((bi, bj), block) in blocks {
            if bi > bj {
                return Err(Error::Structure(format!(
                    "block ({bi}, {bj}) lies below the diagonal"
                )));
            }
            if block.rows != sizes[bi] || block.cols != sizes[bj] {
                return Err(Error::Dimension(format!(
                    "block ({bi}, {bj}) is {}x{}, expected {}x{}",
                    block.rows, block.cols, sizes[bi], sizes[bj]
                )));
            }
            if bi == bj && !block.is_symmetric() {
                return Err(Error::Structure(format!(
                    "diagonal block ({bi}, {bi}) is not symmetric"
                )));
            }
            for i in 0..block.rows {
                for j in 0..block.cols {
                    let (r, c) = (offsets[bi] + i, offsets[bj] + j);
                    out.set(r, c, block.get(i, j).clone());
                    if bi != bj {
                        out.set(c, r, block.get(i, j).clone());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn instantiate(&self, values: &[f64]) -> PolyMatrix {
        PolyMatrix::from_fn(self.rows, self.cols, self.n_vars, |i, j| {
            self.get(i, j).instantiate(values)
        })
    }

    /// Numeric value at solution `values` and polynomial point `point`.
    pub fn eval(&self, values: &[f64], point: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j).eval_point(point).eval(values)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VarKind {
    SymMatrix {
        size: usize,
    },
    PolyMatrix {
        rows: usize,
        cols: usize,
        degree: u32,
    },
    SosPoly {
        degree: u32,
        margin: f64,
    },
    Scalar {
        lower_bound: Option<f64>,
    },
}

/// Handle to a declared decision variable.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionVar {
    pub id: usize,
    pub kind: VarKind,
    /// Scalar unknowns owned by this variable.
    scalars: Vec<usize>,
    /// Monomials paired with the scalars, for polynomial kinds.
    basis: Option<MonomialBasis>,
}

impl DecisionVar {
    pub fn n_scalars(&self) -> usize {
        self.scalars.len()
    }

    pub fn scalar_indices(&self) -> &[usize] {
        &self.scalars
    }
}

#[derive(Clone, Debug)]
pub struct MatrixSosConstraint {
    pub expr: AffinePolyMatrixExpr,
    pub two_alpha: u32,
}

#[derive(Clone, Debug)]
pub struct SosProgram {
    n_vars: usize,
    n_scalars: usize,
    vars: Vec<DecisionVar>,
    constraints: Vec<MatrixSosConstraint>,
    equalities: Vec<AffineScalar>,
    inequalities: Vec<AffineScalar>,
    objective: Option<AffineScalar>,
    gram_margin: Option<usize>,
}

impl SosProgram {
    /// New program over `n_vars` polynomial variables.
    pub fn new(n_vars: usize) -> Self {
        SosProgram {
            n_vars,
            n_scalars: 0,
            vars: Vec::new(),
            constraints: Vec::new(),
            equalities: Vec::new(),
            inequalities: Vec::new(),
            objective: None,
            gram_margin: None,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    pub fn variables(&self) -> &[DecisionVar] {
        &self.vars
    }

    pub fn constraints(&self) -> &[MatrixSosConstraint] {
        &self.constraints
    }

    fn alloc(&mut self, k: usize) -> Vec<usize> {
        let v: Vec<usize> = (self.n_scalars..self.n_scalars + k).collect();
        self.n_scalars += k;
        v
    }

    pub fn declare(&mut self, kind: VarKind) -> Result<DecisionVar> {
        let id = self.vars.len();
        let (scalars, basis) = match kind {
            VarKind::SymMatrix { size } => {
                if size == 0 {
                    return Err(Error::Structure("symmetric matrix of size 0".into()));
                }
                (self.alloc(size * (size + 1) / 2), None)
            }
            VarKind::PolyMatrix { rows, cols, degree } => {
                if rows == 0 || cols == 0 {
                    return Err(Error::Structure("polynomial matrix with no entries".into()));
                }
                let basis = monomial_basis(self.n_vars, degree);
                (self.alloc(rows * cols * basis.len()), Some(basis))
            }
            VarKind::SosPoly { degree, margin } => {
                if margin < 0.0 {
                    return Err(Error::Structure("negative SOS margin".into()));
                }
                let basis = monomial_basis(self.n_vars, degree);
                (self.alloc(basis.len()), Some(basis))
            }
            VarKind::Scalar { .. } => (self.alloc(1), None),
        };
        let var = DecisionVar {
            id,
            kind,
            scalars,
            basis,
        };
        match kind {
            VarKind::SosPoly { degree, margin } => {
                let s = self.poly_expr(&var);
                let shifted = s.sub(&AffinePoly::from_poly(&Polynomial::constant(
                    self.n_vars,
                    margin,
                )));
                let expr = AffinePolyMatrixExpr::from_fn(1, 1, self.n_vars, |_, _| shifted.clone());
                self.constraints.push(MatrixSosConstraint {
                    expr,
                    two_alpha: degree,
                });
            }
            VarKind::Scalar {
                lower_bound: Some(lb),
            } => {
                let mut e = AffineScalar::var(var.scalars[0]);
                e.constant = -lb;
                self.inequalities.push(e);
            }
            _ => {}
        }
        self.vars.push(var.clone());
        Ok(var)
    }

    /// Symmetric matrix variable as an expression (constant in `z`).
    pub fn sym_matrix_expr(&self, var: &DecisionVar) -> AffinePolyMatrixExpr {
        let VarKind::SymMatrix { size } = var.kind else {
            panic!("variable {} is not a symmetric matrix", var.id);
        };
        let one = Monomial::one(self.n_vars);
        AffinePolyMatrixExpr::from_fn(size, size, self.n_vars, |i, j| {
            AffinePoly::unknown(
                self.n_vars,
                one.clone(),
                var.scalars[sdp::packed_index(i, j)],
            )
        })
    }

    pub fn poly_matrix_expr(&self, var: &DecisionVar) -> AffinePolyMatrixExpr {
        let VarKind::PolyMatrix { rows, cols, .. } = var.kind else {
            panic!("variable {} is not a polynomial matrix", var.id);
        };
        let basis = var.basis.as_ref().expect("polynomial basis");
        let nb = basis.len();
        AffinePolyMatrixExpr::from_fn(rows, cols, self.n_vars, |i, j| {
            let mut p = AffinePoly::zero(self.n_vars);
            for (k, m) in basis.iter().enumerate() {
                let idx = var.scalars[(i * cols + j) * nb + k];
                p = p.add(&AffinePoly::unknown(self.n_vars, m.clone(), idx));
            }
            p
        })
    }

    /// Scalar polynomial variable (SOS kind) as an expression.
    pub fn poly_expr(&self, var: &DecisionVar) -> AffinePoly {
        let basis = var.basis.as_ref().expect("polynomial variable");
        let mut p = AffinePoly::zero(self.n_vars);
        for (k, m) in basis.iter().enumerate() {
            p = p.add(&AffinePoly::unknown(self.n_vars, m.clone(), var.scalars[k]));
        }
        p
    }

    pub fn scalar_expr(&self, var: &DecisionVar) -> AffineScalar {
        AffineScalar::var(var.scalars[0])
    }

    /// Adds `expr ∈ SOS[z, two_alpha]^p`.
    pub fn add_matrix_sos(&mut self, expr: AffinePolyMatrixExpr, two_alpha: u32) -> Result<()> {
        if expr.rows() != expr.cols() {
            return Err(Error::Structure(format!(
                "SOS constraint must be square, got {}x{}",
                expr.rows(),
                expr.cols()
            )));
        }
        if expr.n_vars() != self.n_vars {
            return Err(Error::Dimension(format!(
                "expression over {} variables in a program over {}",
                expr.n_vars(),
                self.n_vars
            )));
        }
        if !expr.is_symmetric() {
            return Err(Error::Structure(
                "SOS constraint expression is not symmetric".into(),
            ));
        }
        if expr.degree() > two_alpha {
            return Err(Error::Degree(format!(
                "expression degree {} exceeds bound {}",
                expr.degree(),
                two_alpha
            )));
        }
        self.constraints
            .push(MatrixSosConstraint { expr, two_alpha });
        Ok(())
    }

    /// Adds the linear constraint `expr = 0`.
    pub fn add_equality(&mut self, expr: AffineScalar) {
        self.equalities.push(expr);
    }

    /// Adds the linear constraint `expr >= 0`.
    pub fn add_nonnegative(&mut self, expr: AffineScalar) {
        self.inequalities.push(expr);
    }

    /// Makes the scalar variable `t` a uniform lower bound on the spectrum of
    /// every Gram matrix: each is parametrized as `G = G' + t I` with
    /// `G' ⪰ 0`. Maximizing `t` pulls a solution away from the boundary of
    /// the PSD cone.
    pub fn set_gram_margin(&mut self, t: &DecisionVar) -> Result<()> {
        let VarKind::Scalar { .. } = t.kind else {
            return Err(Error::Structure(
                "the Gram margin must be a scalar variable".into(),
            ));
        };
        self.gram_margin = Some(t.scalars[0]);
        Ok(())
    }

    /// Sets an objective to minimize; the constant part is ignored.
    pub fn minimize(&mut self, expr: AffineScalar) {
        self.objective = Some(expr);
    }

    pub fn compile(&self) -> Result<CompiledSos> {
        if self.n_scalars == 0 && self.constraints.is_empty() {
            return Err(Error::Structure("empty SOS program".into()));
        }
        let mut cones = Vec::new();
        if self.n_scalars > 0 {
            cones.push(Cone::Free(self.n_scalars));
        }
        let mut offset = self.n_scalars;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut blocks = Vec::with_capacity(self.constraints.len());

        for con in &self.constraints {
            let p = con.expr.rows();
            let basis = monomial_basis(self.n_vars, con.two_alpha / 2);
            // Row i of any factorization M = HᵀH has entries of degree at
            // most deg(M_ii)/2, so larger monomials are dropped per row.
            // Keeping them would only add Gram rows that are forced to zero.
            let index: Vec<(usize, usize)> = (0..p)
                .flat_map(|i| {
                    let diag = con.expr.get(i, i);
                    let half = if diag.is_zero() {
                        None
                    } else {
                        Some(diag.degree() / 2)
                    };
                    basis
                        .iter()
                        .enumerate()
                        .filter(move |(_, m)| half.is_some_and(|h| m.degree() <= h))
                        .map(move |(k, _)| (i, k))
                })
                .collect();
            let dim = index.len();
            // Gram positions (a, b), a <= b, grouped by the entry of M and
            // the monomial they contribute to.
            let mut products: BTreeMap<(usize, usize), BTreeMap<Monomial, Vec<usize>>> =
                BTreeMap::new();
            for (a_pos, &(i, k)) in index.iter().enumerate() {
                for (b_pos, &(j, l)) in index.iter().enumerate() {
                    if i > j || (i == j && a_pos > b_pos) {
                        continue;
                    }
                    let weight = usize::from(i == j && a_pos != b_pos) + 1;
                    let entry = products.entry((i, j)).or_default();
                    let slot = entry
                        .entry(basis.entries()[k].mul(&basis.entries()[l]))
                        .or_default();
                    for _ in 0..weight {
                        slot.push(offset + sdp::packed_index(a_pos, b_pos));
                    }
                    if let (Some(t), true) = (self.gram_margin, a_pos == b_pos) {
                        slot.push(t);
                    }
                }
            }
            let empty = BTreeMap::new();
            for i in 0..p {
                for j in i..p {
                    let entry = con.expr.get(i, j);
                    let grams = products.get(&(i, j)).unwrap_or(&empty);
                    let mut monos: Vec<&Monomial> = grams.keys().collect();
                    for (m, _) in entry.coeffs() {
                        if !grams.contains_key(m) {
                            monos.push(m);
                        }
                    }
                    for m in monos {
                        let row = b.len();
                        let mut coeffs: HashMap<usize, f64> = HashMap::new();
                        if let Some(slots) = grams.get(m) {
                            for &idx in slots {
                                *coeffs.entry(idx).or_insert(0.0) += 1.0;
                            }
                        }
                        let zero = AffineScalar::default();
                        let target = entry
                            .coeffs()
                            .find(|(mm, _)| *mm == m)
                            .map(|(_, a)| a)
                            .unwrap_or(&zero);
                        for (&v, &c) in &target.terms {
                            *coeffs.entry(v).or_insert(0.0) -= c;
                        }
                        let mut sorted: Vec<(usize, f64)> =
                            coeffs.into_iter().filter(|(_, c)| *c != 0.0).collect();
                        sorted.sort_by_key(|(k, _)| *k);
                        for (col, c) in sorted {
                            a.push(Triplet(row, col, c));
                        }
                        b.push(target.constant);
                    }
                }
            }
            cones.push(Cone::Psd(dim));
            blocks.push(GramBlock {
                offset,
                dim,
                block_dim: p,
                basis,
                index,
            });
            offset += dim * (dim + 1) / 2;
        }

        for eq in &self.equalities {
            let row = b.len();
            for (&v, &c) in &eq.terms {
                a.push(Triplet(row, v, c));
            }
            b.push(-eq.constant);
        }
        if !self.inequalities.is_empty() {
            let slack0 = offset;
            for (k, ineq) in self.inequalities.iter().enumerate() {
                let row = b.len();
                for (&v, &c) in &ineq.terms {
                    a.push(Triplet(row, v, c));
                }
                a.push(Triplet(row, slack0 + k, -1.0));
                b.push(-ineq.constant);
            }
            cones.push(Cone::Nonneg(self.inequalities.len()));
        }

        let objective = self
            .objective
            .as_ref()
            .map(|o| o.terms.iter().map(|(&k, &c)| Triplet(0, k, c)).collect())
            .unwrap_or_default();

        Ok(CompiledSos {
            problem: ConicProblem {
                objective,
                a,
                b,
                cones,
            },
            blocks,
            n_scalars: self.n_scalars,
        })
    }

    /// Maps a solver report back to variable values and Gram certificates.
    pub fn recover(&self, compiled: &CompiledSos, report: &SolverReport) -> Result<SosSolution> {
        let Some(x) = report
            .primal
            .as_ref()
            .filter(|_| report.status.has_solution())
        else {
            return Err(Error::NoSolution(report.status.to_string()));
        };
        let values = x[..compiled.n_scalars].to_vec();
        let shift = self.gram_margin.map_or(0.0, |t| values[t]);
        let certificates = compiled
            .blocks
            .iter()
            .map(|blk| {
                let mut gram = unpack_symmetric(
                    &x[blk.offset..blk.offset + blk.dim * (blk.dim + 1) / 2],
                    blk.dim,
                );
                for a in 0..blk.dim {
                    gram[(a, a)] += shift;
                }
                GramCertificate {
                    basis: blk.basis.clone(),
                    block_dim: blk.block_dim,
                    index: blk.index.clone(),
                    gram,
                }
            })
            .collect();
        Ok(SosSolution {
            values,
            certificates,
            status: report.status,
        })
    }

    /// Compiles, solves with the default backend and recovers.
    pub fn solve(&self, tol: f64) -> Result<(SolverReport, Option<SosSolution>)> {
        self.solve_with(&sdp::ClarabelBackend::default(), tol)
    }

    pub fn solve_with(
        &self,
        backend: &dyn sdp::ConicSolver,
        tol: f64,
    ) -> Result<(SolverReport, Option<SosSolution>)> {
        let compiled = self.compile()?;
        let report = backend.solve(&compiled.problem, tol)?;
        let solution = if report.status.has_solution() {
            Some(self.recover(&compiled, &report)?)
        } else {
            None
        };
        Ok((report, solution))
    }

    /// Compares every Gram certificate with the constraint it should
    /// reproduce at the solution values.
    pub fn certificate_quality(&self, sol: &SosSolution) -> CertificateQuality {
        let mut q = CertificateQuality {
            residual: 0.0,
            min_eig: f64::INFINITY,
            margin: f64::INFINITY,
        };
        for (con, cert) in self.constraints.iter().zip(&sol.certificates) {
            let target = con.expr.instantiate(&sol.values);
            let rec = cert.reconstruct();
            let mut scale: f64 = 1.0;
            let mut worst: f64 = 0.0;
            let mut sq: f64 = 0.0;
            for i in 0..target.rows() {
                for j in 0..target.cols() {
                    let products = cert.products(i, j);
                    let t = target.get(i, j);
                    scale = t.terms().fold(scale, |a, (_, c)| a.max(c.abs()));
                    worst = worst.max(t.max_abs_diff(rec.get(i, j)));
                    let diff = t - rec.get(i, j);
                    for (m, c) in diff.terms() {
                        // A mismatch outside the Gram basis cannot be absorbed.
                        sq += if products.contains(m) {
                            c * c
                        } else {
                            f64::INFINITY
                        };
                    }
                }
            }
            let lambda = cert.min_eigenvalue();
            q.residual = q.residual.max(worst / scale);
            q.min_eig = q.min_eig.min(lambda / cert.gram.amax().max(1.0));
            q.margin = q.margin.min(lambda - sq.sqrt());
        }
        q
    }
}

/// How well a solver point certifies its constraints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertificateQuality {
    /// Largest coefficient mismatch, relative to the largest constraint
    /// coefficient (floored at 1).
    pub residual: f64,
    /// Smallest Gram eigenvalue relative to the largest Gram entry (floored
    /// at 1).
    pub min_eig: f64,
    /// Smallest `λ_min(G) − ‖r‖₂` over all constraints, where `r` is the
    /// vector of coefficient mismatches. When this is nonnegative the
    /// mismatch can be folded into the Gram matrix (each coefficient lands on
    /// one symmetric entry pair, so the perturbation has spectral norm at most
    /// `‖r‖₂`) and the constraint is exactly SOS.
    pub margin: f64,
}

impl CertificateQuality {
    pub fn is_exact(&self) -> bool {
        self.margin >= 0.0
    }
}

#[derive(Clone, Debug)]
struct GramBlock {
    offset: usize,
    dim: usize,
    block_dim: usize,
    basis: MonomialBasis,
    index: Vec<(usize, usize)>,
}

/// A compiled program: the conic problem plus the layout needed to map a
/// solution back.
#[derive(Clone, Debug)]
pub struct CompiledSos {
    pub problem: ConicProblem,
    blocks: Vec<GramBlock>,
    n_scalars: usize,
}

impl CompiledSos {
    /// Sizes of the Gram PSD blocks, in constraint order.
    pub fn gram_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim).collect()
    }
}

/// Gram matrix `G ⪰ 0` with `M(z) = Y(z)ᵀ G Y(z)`, where row `a` of `G`
/// belongs to matrix row `index[a].0` and basis monomial `index[a].1`:
/// `M_ij(z) = Σ G_ab b_{index[a].1}(z) b_{index[b].1}(z)` over the `a` with
/// `index[a].0 = i` and the `b` with `index[b].0 = j`.
#[derive(Clone, Debug)]
pub struct GramCertificate {
    pub basis: MonomialBasis,
    pub block_dim: usize,
    pub index: Vec<(usize, usize)>,
    pub gram: DMatrix<f64>,
}

impl GramCertificate {
    pub fn reconstruct(&self) -> PolyMatrix {
        let n_vars = self.basis.n_vars();
        let p = self.block_dim;
        let mut entries = vec![Polynomial::zero(n_vars); p * p];
        let monos = self.basis.entries();
        for (a, &(i, k)) in self.index.iter().enumerate() {
            for (b, &(j, l)) in self.index.iter().enumerate() {
                entries[i * p + j].add_term(monos[k].mul(&monos[l]), self.gram[(a, b)]);
            }
        }
        PolyMatrix::from_fn(p, p, n_vars, |i, j| {
            std::mem::replace(&mut entries[i * p + j], Polynomial::zero(n_vars))
        })
    }

    /// Monomials `b_k b_l` that the Gram matrix can produce in entry `(i, j)`.
    pub fn products(&self, i: usize, j: usize) -> HashSet<Monomial> {
        let row = |r: usize| {
            self.index
                .iter()
                .filter(move |e| e.0 == r)
                .map(|e| &self.basis.entries()[e.1])
        };
        row(i).flat_map(|a| row(j).map(move |b| a.mul(b))).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        sdp::min_eigenvalue(&self.gram)
    }
}

#[derive(Clone, Debug)]
pub struct SosSolution {
    pub values: Vec<f64>,
    pub certificates: Vec<GramCertificate>,
    pub status: SolveStatus,
}

impl SosSolution {
    pub fn sym_matrix(&self, var: &DecisionVar) -> DMatrix<f64> {
        let VarKind::SymMatrix { size } = var.kind else {
            panic!("variable {} is not a symmetric matrix", var.id);
        };
        DMatrix::from_fn(size, size, |i, j| {
            self.values[var.scalars[sdp::packed_index(i, j)]]
        })
    }

    pub fn poly_matrix(&self, var: &DecisionVar, n_vars: usize) -> PolyMatrix {
        let VarKind::PolyMatrix { rows, cols, .. } = var.kind else {
            panic!("variable {} is not a polynomial matrix", var.id);
        };
        let basis = var.basis.as_ref().expect("polynomial basis");
        let nb = basis.len();
        PolyMatrix::from_fn(rows, cols, n_vars, |i, j| {
            let mut p = Polynomial::zero(n_vars);
            for (k, m) in basis.iter().enumerate() {
                p.add_term(m.clone(), self.values[var.scalars[(i * cols + j) * nb + k]]);
            }
            p
        })
    }

    pub fn poly(&self, var: &DecisionVar, n_vars: usize) -> Polynomial {
        let basis = var.basis.as_ref().expect("polynomial variable");
        let mut p = Polynomial::zero(n_vars);
        for (k, m) in basis.iter().enumerate() {
            p.add_term(m.clone(), self.values[var.scalars[k]]);
        }
        p
    }

    pub fn scalar(&self, var: &DecisionVar) -> f64 {
        self.values[var.scalars[0]]
    }
}

/// Tests `m(z) ∈ SOS[z, two_alpha]^p` for a fixed polynomial matrix.
pub fn check_sos_matrix(
    m: &PolyMatrix,
    two_alpha: u32,
    tol: f64,
) -> Result<(SolveStatus, Option<GramCertificate>)> {
    let mut prog = SosProgram::new(m.n_vars());
    prog.add_matrix_sos(AffinePolyMatrixExpr::from_poly_matrix(m), two_alpha)?;
    let (report, sol) = prog.solve(tol)?;
    Ok((
        report.status,
        sol.and_then(|s| s.certificates.into_iter().next()),
    ))
}

/// Tests `p − margin ∈ SOS[z, 2⌈deg p / 2⌉]`.
pub fn check_sos(
    p: &Polynomial,
    margin: f64,
    tol: f64,
) -> Result<(SolveStatus, Option<GramCertificate>)> {
    let shifted = p - &Polynomial::constant(p.n_vars(), margin);
    let deg = p.degree().max(shifted.degree());
    let two_alpha = deg + deg % 2;
    check_sos_matrix(
        &PolyMatrix::from_fn(1, 1, p.n_vars(), |_, _| shifted.clone()),
        two_alpha,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::DEFAULT_TOL;

    fn xv(n: usize, i: usize) -> Polynomial {
        Polynomial::var(n, i)
    }

    #[test]
    fn declare_counts_scalars() {
        let mut prog = SosProgram::new(2);
        let p = prog.declare(VarKind::SymMatrix { size: 3 }).unwrap();
        assert_eq!(p.n_scalars(), 6);
        let l = prog
            .declare(VarKind::PolyMatrix {
                rows: 1,
                cols: 2,
                degree: 1,
            })
            .unwrap();
        assert_eq!(l.n_scalars(), 6);

        let mut prog = SosProgram::new(1);
        prog.declare(VarKind::SosPoly {
            degree: 2,
            margin: 1e-6,
        })
        .unwrap();
        let compiled = prog.compile().unwrap();
        assert_eq!(compiled.gram_sizes(), vec![2]);
    }

    #[test]
    fn asymmetric_and_overdegree_are_rejected() {
        let mut prog = SosProgram::new(1);
        let m = PolyMatrix::from_fn(2, 2, 1, |i, j| {
            if i < j {
                xv(1, 0)
            } else {
                Polynomial::constant(1, 1.0)
            }
        });
        let e = prog.add_matrix_sos(AffinePolyMatrixExpr::from_poly_matrix(&m), 2);
        assert!(matches!(e, Err(Error::Structure(_))));
        let m = PolyMatrix::from_fn(1, 1, 1, |_, _| xv(1, 0).pow(4));
        let e = prog.add_matrix_sos(AffinePolyMatrixExpr::from_poly_matrix(&m), 2);
        assert!(matches!(e, Err(Error::Degree(_))));
        assert!(matches!(
            SosProgram::new(1).compile(),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn scalar_sos_examples() {
        let one = Polynomial::constant(1, 1.0);
        let p = &(&xv(1, 0) * &xv(1, 0)) + &one;
        assert_eq!(
            check_sos(&p, 0.0, DEFAULT_TOL).unwrap().0,
            SolveStatus::Feasible
        );

        let (status, _) = check_sos_matrix(
            &PolyMatrix::from_fn(1, 1, 1, |_, _| xv(1, 0)),
            2,
            DEFAULT_TOL,
        )
        .unwrap();
        assert_eq!(status, SolveStatus::Infeasible);
    }

    #[test]
    fn gram_is_unique_for_quadratic() {
        // x^2 + 2x + 2 on basis [1, x] forces G = [[2, 1], [1, 1]]
        let p = Polynomial::from_terms(
            1,
            [
                (Monomial::new(vec![2]), 1.0),
                (Monomial::new(vec![1]), 2.0),
                (Monomial::one(1), 2.0),
            ],
        )
        .unwrap();
        let (status, cert) = check_sos(&p, 0.0, DEFAULT_TOL).unwrap();
        assert_eq!(status, SolveStatus::Feasible);
        let g = cert.unwrap().gram;
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        assert!((g - expected).abs().max() < 1e-6);
    }

    #[test]
    fn two_by_two_matrix_sos() {
        // [[x^2+1, x], [x, 1]] = T'T with T = [[x, 1], [1, 0]]
        let one = Polynomial::constant(1, 1.0);
        let m = PolyMatrix::from_fn(2, 2, 1, |i, j| match (i, j) {
            (0, 0) => &(&xv(1, 0) * &xv(1, 0)) + &one,
            (1, 1) => one.clone(),
            _ => xv(1, 0),
        });
        let (status, cert) = check_sos_matrix(&m, 2, DEFAULT_TOL).unwrap();
        assert_eq!(status, SolveStatus::Feasible);
        let cert = cert.unwrap();
        let rec = cert.reconstruct();
        for i in 0..2 {
            for j in 0..2 {
                assert!(rec.get(i, j).max_abs_diff(m.get(i, j)) < 1e-6);
            }
        }
        assert!(cert.min_eigenvalue() > -1e-7);
    }

    #[test]
    fn trivial_program_recovers_constant() {
        let mut prog = SosProgram::new(1);
        let s = prog
            .declare(VarKind::SosPoly {
                degree: 0,
                margin: 0.0,
            })
            .unwrap();
        let e = prog
            .poly_expr(&s)
            .sub(&AffinePoly::from_poly(&Polynomial::constant(1, 1.0)));
        for (_, a) in e.coeffs() {
            prog.add_equality(a.clone());
        }
        let (report, sol) = prog.solve(DEFAULT_TOL).unwrap();
        assert!(report.status.has_solution());
        let sol = sol.unwrap();
        let sp = sol.poly(&s, 1);
        assert!((sp.coeff(&Monomial::one(1)) - 1.0).abs() < 1e-7);
        assert!((sol.certificates[0].gram[(0, 0)] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn feasibility_program_has_zero_objective() {
        let mut prog = SosProgram::new(1);
        prog.declare(VarKind::SosPoly {
            degree: 2,
            margin: 0.0,
        })
        .unwrap();
        let c = prog.compile().unwrap();
        assert!(c.problem.objective_dense().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_lower_bound_is_enforced() {
        let mut prog = SosProgram::new(1);
        let r = prog
            .declare(VarKind::Scalar {
                lower_bound: Some(0.5),
            })
            .unwrap();
        prog.minimize(prog.scalar_expr(&r));
        let (report, sol) = prog.solve(DEFAULT_TOL).unwrap();
        assert_eq!(report.status, SolveStatus::Optimal);
        assert!((sol.unwrap().scalar(&r) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn upper_blocks_materialize_symmetric() {
        let n = 1;
        let a = AffinePolyMatrixExpr::from_real(&DMatrix::from_row_slice(1, 1, &[1.0]), n);
        let off =
            AffinePolyMatrixExpr::from_poly_matrix(&PolyMatrix::from_fn(1, 1, n, |_, _| xv(1, 0)));
        let m = AffinePolyMatrixExpr::from_upper_blocks(
            &[1, 1],
            n,
            vec![((0, 0), a.clone()), ((0, 1), off), ((1, 1), a)],
        )
        .unwrap();
        assert!(m.is_symmetric());
        assert_eq!(m.get(1, 0).instantiate(&[]), xv(1, 0));
    }
}
