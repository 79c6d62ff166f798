//! Conic problem container, solver backend contract and PSD checks.
//!
//! A [`ConicProblem`] is a primal standard-form problem
//!
//! ```text
//! minimize  c'x   subject to  A x = b,   x ∈ K_1 × K_2 × ... × K_p
//! ```
//!
//! where the cones tile the variable vector in order. A `Psd(d)` cone owns
//! `d(d+1)/2` consecutive variables holding the upper triangle of a symmetric
//! matrix in column-major order (`(0,0), (0,1), (1,1), (0,2), ...`), stored
//! unscaled.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus as ClarabelStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;

/// Environment variable overriding the solver tolerance in the CLI.
pub const TOL_ENV_VAR: &str = "KOOPSOS_SOLVER_TOL";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dim", rename_all = "snake_case")]
pub enum Cone {
    Psd(usize),
    Nonneg(usize),
    Free(usize),
}

impl Cone {
    /// Number of scalar variables the cone occupies.
    pub fn n_vars(&self) -> usize {
        match *self {
            Cone::Psd(d) => d * (d + 1) / 2,
            Cone::Nonneg(k) | Cone::Free(k) => k,
        }
    }
}

/// Index of `(i, j)` inside a packed upper triangle of a `d x d` matrix.
pub fn packed_index(i: usize, j: usize) -> usize {
    let (r, c) = if i <= j { (i, j) } else { (j, i) };
    c * (c + 1) / 2 + r
}

/// Unpacks a column-major upper triangle into a full symmetric matrix.
pub fn unpack_symmetric(packed: &[f64], dim: usize) -> DMatrix<f64> {
    debug_assert_eq!(packed.len(), dim * (dim + 1) / 2);
    DMatrix::from_fn(dim, dim, |i, j| packed[packed_index(i, j)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet(pub usize, pub usize, pub f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicProblem {
    /// Objective as `(0, col, value)` triplets.
    pub objective: Vec<Triplet>,
    #[serde(rename = "A")]
    pub a: Vec<Triplet>,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.cones.iter().map(Cone::n_vars).sum()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    /// Offsets of each cone block in the variable vector.
    pub fn cone_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.cones
            .iter()
            .map(|c| {
                let o = off;
                off += c.n_vars();
                o
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let m = self.b.len();
        for t in &self.a {
            if t.0 >= m || t.1 >= n {
                return Err(Error::Structure(format!(
                    "constraint entry ({}, {}) outside {}x{}",
                    t.0, t.1, m, n
                )));
            }
            if !t.2.is_finite() {
                return Err(Error::Structure("non-finite constraint coefficient".into()));
            }
        }
        for t in &self.objective {
            if t.0 != 0 || t.1 >= n {
                return Err(Error::Structure(format!(
                    "objective entry ({}, {}) outside 1x{}",
                    t.0, t.1, n
                )));
            }
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structure("non-finite right-hand side".into()));
        }
        Ok(())
    }

    pub fn objective_dense(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_vars()];
        for t in &self.objective {
            c[t.1] += t.2;
        }
        c
    }

    /// `‖A x − b‖∞` with every row scaled to unit infinity norm.
    pub fn scaled_residual(&self, x: &[f64]) -> f64 {
        let m = self.b.len();
        let mut ax = vec![0.0; m];
        let mut row_norm = vec![0.0f64; m];
        for t in &self.a {
            ax[t.0] += t.2 * x[t.1];
            row_norm[t.0] = row_norm[t.0].max(t.2.abs());
        }
        (0..m)
            .map(|i| {
                let s = if row_norm[i] > 0.0 { row_norm[i] } else { 1.0 };
                ((ax[i] - self.b[i]) / s).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all PSD blocks of `x` (`+inf` without PSD blocks).
    pub fn min_psd_eigenvalue(&self, x: &[f64]) -> f64 {
        let mut worst = f64::INFINITY;
        for (cone, off) in self.cones.iter().zip(self.cone_offsets()) {
            if let Cone::Psd(d) = *cone {
                let m = unpack_symmetric(&x[off..off + cone.n_vars()], d);
                worst = worst.min(min_eigenvalue(&m));
            }
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ConicProblem = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    Unknown,
}

impl SolveStatus {
    pub fn has_solution(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Feasible => "feasible",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolverReport {
    pub status: SolveStatus,
    /// Present iff `status` is optimal or feasible.
    pub primal: Option<Vec<f64>>,
    pub objective_value: f64,
    pub solve_time: f64,
    pub iterations: u32,
    /// Raw backend status, for diagnostics.
    pub backend_status: String,
}

/// A conic solver that accepts PSD, nonnegative and free cones.
pub trait ConicSolver: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, problem: &ConicProblem, tol: f64) -> Result<SolverReport>;
}

/// Default backend: the Clarabel interior-point solver.
///
/// Without a fixed `variant`, inexact terminations are retried under each
/// [`SettingsVariant`] in turn.
#[derive(Clone, Debug, Default)]
pub struct ClarabelBackend {
    pub max_iter: Option<u32>,
    pub variant: Option<SettingsVariant>,
}

impl ConicSolver for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, problem: &ConicProblem, tol: f64) -> Result<SolverReport> {
        problem.validate()?;
        if !(tol > 0.0) {
            return Err(Error::Structure(format!(
                "solver tolerance must be positive, got {tol}"
            )));
        }
        let start = Instant::now();
        let n = problem.n_vars();
        let m_eq = problem.b.len();

        // Equality rows, each normalized to unit infinity norm.
        let mut row_norm = vec![0.0f64; m_eq];
        for t in &problem.a {
            row_norm[t.0] = row_norm[t.0].max(t.2.abs());
        }
        for (i, r) in row_norm.iter_mut().enumerate() {
            if *r == 0.0 {
                if problem.b[i] != 0.0 {
                    // 0 = b with b != 0
                    return Ok(SolverReport {
                        status: SolveStatus::Infeasible,
                        primal: None,
                        objective_value: f64::NAN,
                        solve_time: start.elapsed().as_secs_f64(),
                        iterations: 0,
                        backend_status: "trivially infeasible row".into(),
                    });
                }
                *r = 1.0;
            }
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for t in &problem.a {
            rows.push(t.0);
            cols.push(t.1);
            vals.push(t.2 / row_norm[t.0]);
        }
        let mut b: Vec<f64> = problem
            .b
            .iter()
            .zip(&row_norm)
            .map(|(bi, r)| bi / r)
            .collect();
        let mut cones = Vec::new();
        if m_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(m_eq));
        }

        // Cone membership rows: s = D x with s in the cone.
        let mut row = m_eq;
        let sqrt2 = std::f64::consts::SQRT_2;
        for (cone, off) in problem.cones.iter().zip(problem.cone_offsets()) {
            match *cone {
                Cone::Free(_) => {}
                Cone::Nonneg(k) => {
                    for j in 0..k {
                        rows.push(row + j);
                        cols.push(off + j);
                        vals.push(-1.0);
                    }
                    b.resize(b.len() + k, 0.0);
                    cones.push(SupportedConeT::NonnegativeConeT(k));
                    row += k;
                }
                Cone::Psd(d) => {
                    for c in 0..d {
                        for r in 0..=c {
                            let k = packed_index(r, c);
                            rows.push(row + k);
                            cols.push(off + k);
                            vals.push(if r == c { -1.0 } else { -sqrt2 });
                        }
                    }
                    let k = cone.n_vars();
                    b.resize(b.len() + k, 0.0);
                    cones.push(SupportedConeT::PSDTriangleConeT(d));
                    row += k;
                }
            }
        }
        let a = CscMatrix::new_from_triplets(row, n, rows, cols, vals);
        let p = CscMatrix::<f64>::zeros((n, n));
        let q = problem.objective_dense();

        let has_objective = problem.objective.iter().any(|t| t.2 != 0.0);

        // Near-degenerate SOS programs sometimes stall under one setting and
        // converge under another, so inexact terminations are retried.
        let mut fallback: Option<SolverReport> = None;
        let mut iterations = 0;
        let variants = match self.variant {
            Some(v) => vec![v],
            None => SettingsVariant::ALL.to_vec(),
        };
        for variant in variants {
            let mut settings = DefaultSettingsBuilder::default();
            settings
                .verbose(log::log_enabled!(log::Level::Trace))
                .tol_feas(tol)
                .tol_gap_abs(tol)
                .tol_gap_rel(tol)
                .presolve_enable(false);
            variant.apply(&mut settings);
            if let Some(it) = self.max_iter {
                settings.max_iter(it);
            }
            let settings = settings
                .build()
                .map_err(|e| Error::Structure(format!("solver settings: {e}")))?;

            let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
                Ok(s) => s,
                Err(e) => return Err(Error::Structure(format!("solver setup: {e}"))),
            };
            solver.solve();
            let sol = &solver.solution;
            iterations += sol.iterations;
            let exact = matches!(
                sol.status,
                ClarabelStatus::Solved | ClarabelStatus::PrimalInfeasible
            );

            let status = match sol.status {
                ClarabelStatus::Solved | ClarabelStatus::AlmostSolved => {
                    let x = &sol.x;
                    let finite = x.iter().all(|v| v.is_finite());
                    let resid = problem.scaled_residual(x);
                    let min_eig = problem.min_psd_eigenvalue(x);
                    let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                    if finite && resid <= 10.0 * tol * scale && min_eig >= -10.0 * tol * scale {
                        if has_objective && sol.status == ClarabelStatus::Solved {
                            SolveStatus::Optimal
                        } else {
                            SolveStatus::Feasible
                        }
                    } else {
                        SolveStatus::Unknown
                    }
                }
                ClarabelStatus::PrimalInfeasible | ClarabelStatus::AlmostPrimalInfeasible => {
                    SolveStatus::Infeasible
                }
                _ => SolveStatus::Unknown,
            };
            let report = SolverReport {
                status,
                objective_value: if status.has_solution() {
                    sol.obj_val
                } else {
                    f64::NAN
                },
                primal: status.has_solution().then(|| sol.x.clone()),
                solve_time: start.elapsed().as_secs_f64(),
                iterations,
                backend_status: format!("{:?}", sol.status),
            };
            if exact {
                return Ok(report);
            }
            log::debug!("clarabel {variant:?}: {}", report.backend_status);
            let better = match &fallback {
                None => true,
                Some(f) => report.status.has_solution() && !f.status.has_solution(),
            };
            if better {
                fallback = Some(report);
            }
        }
        let mut report = fallback.expect("at least one settings variant");
        report.iterations = iterations;
        report.solve_time = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Solver setting adjustments, tried in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SettingsVariant {
    Default,
    ShorterSteps,
    MoreEquilibration,
    NoEquilibration,
}

impl SettingsVariant {
    pub const ALL: [SettingsVariant; 4] = [
        SettingsVariant::Default,
        SettingsVariant::ShorterSteps,
        SettingsVariant::MoreEquilibration,
        SettingsVariant::NoEquilibration,
    ];

    fn apply(self, s: &mut DefaultSettingsBuilder<f64>) {
        match self {
            SettingsVariant::Default => {}
            SettingsVariant::ShorterSteps => {
                s.max_step_fraction(0.9);
            }
            SettingsVariant::MoreEquilibration => {
                s.equilibrate_max_iter(50);
            }
            SettingsVariant::NoEquilibration => {
                s.equilibrate_enable(false);
            }
        }
    }
}

/// Solves with the default backend.
pub fn solve(problem: &ConicProblem, tol: f64) -> Result<SolverReport> {
    ClarabelBackend::default().solve(problem, tol)
}

/// Solver tolerance from [`TOL_ENV_VAR`], falling back to [`DEFAULT_TOL`].
pub fn tolerance_from_env() -> f64 {
    std::env::var(TOL_ENV_VAR)
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .unwrap_or(DEFAULT_TOL)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Returns whether `m` is PSD up to `tol` times its largest entry (floored at
/// 1), and its smallest eigenvalue.
pub fn check_psd(m: &DMatrix<f64>, tol: f64) -> Result<(bool, f64)> {
    if m.nrows() != m.ncols() {
        return Err(Error::Structure(format!(
            "PSD check on a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Structure(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let min_eig = min_eigenvalue(m);
    Ok((min_eig >= -tol * scale, min_eig))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_layout_is_column_major_upper() {
        assert_eq!(packed_index(0, 0), 0);
        assert_eq!(packed_index(0, 1), 1);
        assert_eq!(packed_index(1, 1), 2);
        assert_eq!(packed_index(0, 2), 3);
        assert_eq!(packed_index(2, 1), 4);
        let m = unpack_symmetric(&[1.0, 2.0, 3.0], 2);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
    }

    #[test]
    fn minimize_nonneg_scalar() {
        let p = ConicProblem {
            objective: vec![Triplet(0, 0, 1.0)],
            a: vec![],
            b: vec![],
            cones: vec![Cone::Nonneg(1)],
        };
        let r = solve(&p, DEFAULT_TOL).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.primal.unwrap()[0].abs() < 1e-7);
    }

    #[test]
    fn psd_block_with_free_offdiagonal() {
        // X = [[1, t], [t, 1]] psd, t free: pin diagonal to one
        let p = ConicProblem {
            objective: vec![],
            a: vec![Triplet(0, 0, 1.0), Triplet(1, 2, 1.0)],
            b: vec![1.0, 1.0],
            cones: vec![Cone::Psd(2)],
        };
        let r = solve(&p, DEFAULT_TOL).unwrap();
        assert_eq!(r.status, SolveStatus::Feasible);
        let x = r.primal.unwrap();
        assert!(x[1].abs() <= 1.0 + 1e-7);
    }

    #[test]
    fn indefinite_target_is_infeasible() {
        let p = ConicProblem {
            objective: vec![],
            a: vec![Triplet(0, 0, 1.0), Triplet(1, 1, 1.0), Triplet(2, 2, 1.0)],
            b: vec![1.0, 2.0, 1.0],
            cones: vec![Cone::Psd(2)],
        };
        let r = solve(&p, DEFAULT_TOL).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.primal.is_none());
    }

    #[test]
    fn out_of_range_entries_are_structural_errors() {
        let p = ConicProblem {
            objective: vec![],
            a: vec![Triplet(0, 5, 1.0)],
            b: vec![1.0],
            cones: vec![Cone::Free(2)],
        };
        assert!(matches!(solve(&p, DEFAULT_TOL), Err(Error::Structure(_))));
    }

    #[test]
    fn check_psd_examples() {
        let (ok, e) = check_psd(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert!(ok);
        assert!((e - 1.0).abs() < 1e-14);

        let (ok, e) =
            check_psd(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), 1e-9).unwrap();
        assert!(!ok);
        assert!((e + 1.0).abs() < 1e-14);

        let (ok, e) =
            check_psd(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]), 0.0).unwrap();
        assert!(ok);
        assert!((e - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-14);

        assert!(check_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]), 0.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = ConicProblem {
            objective: vec![Triplet(0, 1, 0.1 + 0.2)],
            a: vec![Triplet(0, 0, 1.0 / 3.0), Triplet(0, 2, -2.5e-17)],
            b: vec![std::f64::consts::PI],
            cones: vec![Cone::Free(1), Cone::Psd(1), Cone::Nonneg(1)],
        };
        let back = ConicProblem::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
