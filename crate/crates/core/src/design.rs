//! Controller synthesis from the lifted bilinear surrogate, the rational
//! feedback it yields, region-of-attraction estimation and pointwise
//! certificate validation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{matrix_from_rows, matrix_rows, Dictionary, ResidualBound, Surrogate};
use crate::poly::{Monomial, PolyMatrix, Polynomial};
use crate::region::Region;
use crate::sdp::{self, ClarabelBackend, SettingsVariant, SolveStatus, SolverReport};
use crate::sim::{residual_adversary, ResidualMode, ResidualSource};
use crate::sosc::{
    check_sos, AffinePoly, AffinePolyMatrixExpr, AffineScalar, DecisionVar, SosProgram,
    SosSolution, VarKind, DEFAULT_SOS_MARGIN,
};

/// Margin used when verifying that a denominator is strictly SOS.
pub const DENOMINATOR_MARGIN: f64 = 1e-9;

/// Smallest residual constant accepted by [`build_design`].
pub const MIN_BOUND_CONSTANT: f64 = 1e-8;

/// Smallest eigenvalue of `P` accepted from the solver.
pub const MIN_P_EIGENVALUE: f64 = 1e-8;
/// Largest coefficient mismatch (and negative Gram eigenvalue) accepted when
/// turning a solver point into a certificate.
pub const MAX_CERTIFICATE_RESIDUAL: f64 = 1e-6;

/// Number of failing samples kept as witnesses in a [`CertificateReport`].
pub const MAX_WITNESSES: usize = 20;

/// Default floor for the decay rate in exponential mode.
pub const DEFAULT_RHO_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrictnessWitness {
    /// Constructed as a sum of squares plus a positive constant.
    Symbolic,
    /// Verified numerically through an SOS program.
    Checked,
    Unchecked,
}

/// Denominator `u_d` of the rational controller.
#[derive(Clone, Debug, PartialEq)]
pub struct DenominatorSpec {
    pub poly: Polynomial,
    pub two_alpha: u32,
    pub witness: StrictnessWitness,
}

impl DenominatorSpec {
    /// Any polynomial; strictness is checked on first use.
    pub fn new(poly: Polynomial, two_alpha: u32) -> Result<Self> {
        let d = DenominatorSpec {
            poly,
            two_alpha,
            witness: StrictnessWitness::Unchecked,
        };
        d.check_shape()?;
        Ok(d)
    }

    /// `0.01 + (1 + x)^{2α}` over a single variable.
    pub fn building(alpha: u32) -> Result<Self> {
        if alpha == 0 {
            return Err(Error::Spec("alpha must be at least 1".into()));
        }
        let base = &Polynomial::constant(1, 1.0) + &Polynomial::var(1, 0);
        let poly = &Polynomial::constant(1, 0.01) + &base.pow(2 * alpha);
        Ok(DenominatorSpec {
            poly,
            two_alpha: 2 * alpha,
            witness: StrictnessWitness::Symbolic,
        })
    }

    /// `1 + Σ_{i≤j} z_i z_j`, i.e. `1 + ½(Σ z_i)² + ½ Σ z_i²`.
    pub fn full_quadratic(n_vars: usize) -> Result<Self> {
        if n_vars == 0 {
            return Err(Error::Spec(
                "denominator needs at least one variable".into(),
            ));
        }
        let mut poly = Polynomial::constant(n_vars, 1.0);
        for i in 0..n_vars {
            for j in i..n_vars {
                let mut e = vec![0u32; n_vars];
                e[i] += 1;
                e[j] += 1;
                poly.add_term(Monomial::new(e), 1.0);
            }
        }
        Ok(DenominatorSpec {
            poly,
            two_alpha: 2,
            witness: StrictnessWitness::Symbolic,
        })
    }

    pub fn alpha(&self) -> u32 {
        self.two_alpha / 2
    }

    fn check_shape(&self) -> Result<()> {
        if self.two_alpha == 0 || self.two_alpha % 2 != 0 {
            return Err(Error::Degree(format!(
                "denominator degree {} must be even and positive",
                self.two_alpha
            )));
        }
        if self.poly.degree() != self.two_alpha {
            return Err(Error::Degree(format!(
                "denominator has degree {}, declared {}",
                self.poly.degree(),
                self.two_alpha
            )));
        }
        let origin = vec![0.0; self.poly.n_vars()];
        if self.poly.eval(&origin)? <= 0.0 {
            return Err(Error::Spec(
                "denominator must be positive at the origin".into(),
            ));
        }
        Ok(())
    }

    /// Ensures `u_d − ε` is SOS, running the SOS program if needed.
    pub fn verify_strict(&mut self, tol: f64) -> Result<()> {
        self.check_shape()?;
        if self.witness == StrictnessWitness::Unchecked {
            let (status, _) = check_sos(&self.poly, DENOMINATOR_MARGIN, tol)?;
            if !status.has_solution() {
                return Err(Error::Spec(format!(
                    "denominator is not strictly SOS (solver: {status})"
                )));
            }
            self.witness = StrictnessWitness::Checked;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignMode {
    Exponential { rho_min: f64 },
    Asymptotic,
}

impl Default for DesignMode {
    fn default() -> Self {
        DesignMode::Exponential {
            rho_min: DEFAULT_RHO_MIN,
        }
    }
}

/// The assembled SOS program with handles to its decision variables.
#[derive(Clone, Debug)]
pub struct Design {
    pub program: SosProgram,
    pub p: DecisionVar,
    pub l: DecisionVar,
    /// Multiplier in units of `τ/(2c_x²)`; see [`Design::tau_scale`].
    pub tau: DecisionVar,
    pub rho: Option<DecisionVar>,
    /// The matrix constrained to be SOS.
    pub block: AffinePolyMatrixExpr,
    pub model: Surrogate,
    pub u_d: DenominatorSpec,
    pub bound: ResidualBound,
    pub mode: DesignMode,
}

impl Design {
    /// Factor turning the `tau` variable into the multiplier `τ`.
    pub fn tau_scale(&self) -> f64 {
        2.0 * self.bound.c_x * self.bound.c_x
    }

    pub fn alpha(&self) -> u32 {
        self.u_d.alpha()
    }

    pub fn block_dim(&self) -> usize {
        self.block.rows()
    }

    pub fn block_degree(&self) -> u32 {
        self.u_d.two_alpha
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Spec(format!("{what} has non-finite entries")))
    }
}

/// Assembles the robust matrix-SOS synthesis program for `model`.
pub fn build_design(
    model: &Surrogate,
    bound: &ResidualBound,
    u_d: &DenominatorSpec,
    mode: DesignMode,
    tol: f64,
) -> Result<Design> {
    let (c_x, c_u) = (bound.c_x, bound.c_u);
    if !(c_x >= MIN_BOUND_CONSTANT && c_u >= MIN_BOUND_CONSTANT)
        || !c_x.is_finite()
        || !c_u.is_finite()
    {
        return Err(Error::Spec(format!(
            "bound constants must be at least {MIN_BOUND_CONSTANT}, got ({c_x}, {c_u})"
        )));
    }
    check_finite(&model.a, "A")?;
    check_finite(&model.b0, "B0")?;
    check_finite(&model.btilde, "Btilde")?;
    let n = model.big_n();
    let m = model.m();
    if u_d.poly.n_vars() != n {
        return Err(Error::Dimension(format!(
            "denominator over {} variables, lifted dimension is {n}",
            u_d.poly.n_vars()
        )));
    }
    let mut u_d = u_d.clone();
    u_d.verify_strict(tol)?;
    let two_alpha = u_d.two_alpha;
    if let DesignMode::Exponential { rho_min } = mode {
        if !(rho_min > 0.0) {
            return Err(Error::Spec(
                "rho_min must be positive in exponential mode".into(),
            ));
        }
    }

    let mut prog = SosProgram::new(n);
    let p = prog.declare(VarKind::SymMatrix { size: n })?;
    let l = prog.declare(VarKind::PolyMatrix {
        rows: m,
        cols: n,
        degree: two_alpha - 1,
    })?;
    // The multiplier is carried as σ = τ/(2c_x²). With τ itself the
    // weights 1/(2c²) reach 1e9 for small constants and the solver's
    // relative accuracy no longer yields an exact certificate.
    let tau_scale = 2.0 * c_x * c_x;
    let tau = prog.declare(VarKind::SosPoly {
        degree: two_alpha,
        margin: DEFAULT_SOS_MARGIN / tau_scale,
    })?;
    let rho = match mode {
        DesignMode::Exponential { rho_min } => Some(prog.declare(VarKind::Scalar {
            lower_bound: Some(rho_min),
        })?),
        DesignMode::Asymptotic => None,
    };

    let p_e = prog.sym_matrix_expr(&p);
    let l_e = prog.poly_matrix_expr(&l);
    let tau_e = prog.poly_expr(&tau);
    let ud = &u_d.poly;
    let ud_p = p_e.mul_poly(ud);
    let z_vars: Vec<usize> = (0..n).collect();

    let b00 = ud_p.sub(&AffinePolyMatrixExpr::scaled_identity(
        &tau_e.scale(tau_scale),
        n,
    ))?;
    let b11 = AffinePolyMatrixExpr::scaled_identity(&tau_e, n);
    let b22 = AffinePolyMatrixExpr::scaled_identity(&tau_e.scale((c_x * c_x) / (c_u * c_u)), m);
    let b33 = match &rho {
        Some(r) => {
            let rho_ud =
                AffinePoly::unknown(n, Monomial::one(n), r.scalar_indices()[0]).mul_poly(ud);
            ud_p.sub(&AffinePolyMatrixExpr::scaled_identity(&rho_ud, n))?
        }
        None => ud_p.clone(),
    };
    let b03 = ud_p
        .left_mul_real(&model.a)?
        .add(&l_e.left_mul_real(&model.b0)?)?
        .add(&l_e.kron_var(&z_vars)?.left_mul_real(&model.btilde)?)?;
    let block = AffinePolyMatrixExpr::from_upper_blocks(
        &[n, n, m, n],
        n,
        vec![
            ((0, 0), b00),
            ((1, 1), b11),
            ((2, 2), b22),
            ((3, 3), b33),
            ((0, 3), b03),
            ((1, 3), ud_p),
            ((2, 3), l_e),
        ],
    )?;
    prog.add_matrix_sos(block.clone(), two_alpha)?;

    Ok(Design {
        program: prog,
        p,
        l,
        tau,
        rho,
        block,
        model: model.clone(),
        u_d,
        bound: bound.clone(),
        mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Feasibility,
    /// Maximize the smallest eigenvalue of `P` under `trace(P) = N`.
    MaxMinEigP,
    /// Maximize the decay rate `ρ` under `trace(P) = N`.
    MaxRho,
}

/// Successful synthesis.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub controller: RationalController,
    pub solution: SosSolution,
    pub report: SolverReport,
    /// Coefficient residual and smallest Gram eigenvalue of the certificate,
    /// both relative.
    pub certificate_residual: f64,
    pub certificate_min_eig: f64,
    /// Smallest `λ_min(G) − ‖residual‖₂` over the Gram blocks; nonnegative
    /// for every accepted certificate.
    pub certificate_margin: f64,
}

#[derive(Clone, Debug)]
pub enum SynthesisOutcome {
    Feasible(Box<Synthesis>),
    Infeasible {
        report: SolverReport,
        /// Solver stalled or returned an unusable point rather than
        /// certifying infeasibility.
        inconclusive: bool,
        reason: String,
    },
}

impl SynthesisOutcome {
    pub fn status(&self) -> FeasibilityStatus {
        match self {
            SynthesisOutcome::Feasible(_) => FeasibilityStatus::Feasible,
            SynthesisOutcome::Infeasible {
                inconclusive: false,
                ..
            } => FeasibilityStatus::Infeasible,
            SynthesisOutcome::Infeasible {
                inconclusive: true, ..
            } => FeasibilityStatus::Unknown,
        }
    }

    pub fn report(&self) -> &SolverReport {
        match self {
            SynthesisOutcome::Feasible(s) => &s.report,
            SynthesisOutcome::Infeasible { report, .. } => report,
        }
    }

    pub fn feasible(self) -> Option<Synthesis> {
        match self {
            SynthesisOutcome::Feasible(s) => Some(*s),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityStatus {
    Feasible,
    Infeasible,
    Unknown,
}

impl std::fmt::Display for FeasibilityStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeasibilityStatus::Feasible => "feasible",
            FeasibilityStatus::Infeasible => "infeasible",
            FeasibilityStatus::Unknown => "unknown",
        })
    }
}

/// Solves the design program and extracts the controller.
///
/// `trace(P) = N` is imposed in every mode: the constraint is homogeneous,
/// so this only fixes the scale of the solution.
pub fn synthesize(design: &Design, objective: Objective, tol: f64) -> Result<SynthesisOutcome> {
    let n = design.model.big_n();
    let mut prog = design.program.clone();
    let p_e = prog.sym_matrix_expr(&design.p);
    let mut trace = AffineScalar::constant(-(n as f64));
    for i in 0..n {
        trace.add_scaled(&p_e.get(i, i).eval_point(&vec![0.0; n]), 1.0);
    }
    prog.add_equality(trace);
    let goal = match objective {
        Objective::Feasibility => None,
        Objective::MaxMinEigP => {
            let t = prog.declare(VarKind::Scalar { lower_bound: None })?;
            let t_poly = AffinePoly::unknown(n, Monomial::one(n), t.scalar_indices()[0]);
            let gap = p_e.sub(&AffinePolyMatrixExpr::scaled_identity(&t_poly, n))?;
            prog.add_matrix_sos(gap, 0)?;
            Some(prog.scalar_expr(&t))
        }
        Objective::MaxRho => {
            let Some(rho) = &design.rho else {
                return Err(Error::Spec("cannot maximize rho in asymptotic mode".into()));
            };
            Some(prog.scalar_expr(rho))
        }
    };
    let mut first_pass = prog.clone();
    if let Some(goal) = &goal {
        first_pass.minimize(goal.scaled(-1.0));
    }
    let outcome = solve_variants(design, &first_pass, tol)?;
    let SynthesisOutcome::Infeasible {
        report,
        inconclusive: true,
        ..
    } = &outcome
    else {
        return Ok(outcome);
    };
    // Interior-point runs stop as soon as their tolerances are met, which
    // for a thin feasible set (or at an optimum) is close to the boundary of
    // the PSD cone. Round-off there can leave the Gram matrices slightly
    // indefinite. A second solve maximizes a uniform Gram margin instead,
    // keeping 90% of the optimal value when there is an objective.
    if let Some(goal) = &goal {
        let optimum = report
            .primal
            .as_ref()
            .filter(|_| report.status.has_solution())
            .map(|x| goal.eval(x));
        let Some(optimum) = optimum.filter(|v| *v > 0.0) else {
            return Ok(outcome);
        };
        let mut floor = goal.clone();
        floor.add_scaled(&AffineScalar::constant(-0.9 * optimum), 1.0);
        prog.add_nonnegative(floor);
    }
    let margin = prog.declare(VarKind::Scalar { lower_bound: None })?;
    prog.set_gram_margin(&margin)?;
    prog.minimize(prog.scalar_expr(&margin).scaled(-1.0));
    log::debug!("first pass inconclusive; re-solving for the largest Gram margin");
    let recentred = solve_variants(design, &prog, tol)?;
    Ok(match recentred {
        SynthesisOutcome::Feasible(_) => recentred,
        _ => outcome,
    })
}

/// Tries each solver settings variant, with the certificate checks of
/// [`extract`], and keeps the first clean outcome.
fn solve_variants(design: &Design, prog: &SosProgram, tol: f64) -> Result<SynthesisOutcome> {
    let mut first: Option<SynthesisOutcome> = None;
    for variant in SettingsVariant::ALL {
        let backend = ClarabelBackend {
            max_iter: None,
            variant: Some(variant),
        };
        let outcome = extract(design, prog, prog.solve_with(&backend, tol)?)?;
        let conclusive = match &outcome {
            SynthesisOutcome::Feasible(_) => true,
            SynthesisOutcome::Infeasible { report, .. } => {
                report.backend_status == "PrimalInfeasible"
            }
        };
        if conclusive {
            return Ok(outcome);
        }
        if let SynthesisOutcome::Infeasible { reason, .. } = &outcome {
            log::debug!("synthesis attempt with {variant:?} inconclusive: {reason}");
        }
        first.get_or_insert(outcome);
    }
    Ok(first.expect("at least one settings variant"))
}

fn extract(
    design: &Design,
    prog: &SosProgram,
    (report, solution): (SolverReport, Option<SosSolution>),
) -> Result<SynthesisOutcome> {
    let n = design.model.big_n();
    let Some(solution) = solution else {
        let inconclusive = report.status != SolveStatus::Infeasible;
        let reason = format!(
            "solver status {} ({})",
            report.status, report.backend_status
        );
        return Ok(SynthesisOutcome::Infeasible {
            report,
            inconclusive,
            reason,
        });
    };
    let p = solution.sym_matrix(&design.p);
    let min_eig = sdp::min_eigenvalue(&p);
    if !(min_eig >= MIN_P_EIGENVALUE) {
        return Ok(SynthesisOutcome::Infeasible {
            report,
            inconclusive: true,
            reason: format!("recovered P has min eigenvalue {min_eig:e}"),
        });
    }
    let quality = prog.certificate_quality(&solution);
    // Interior-point solvers may stop at "almost solved" points whose Gram
    // matrices do not reproduce the constraint, or are slightly indefinite.
    // Only points whose mismatch is absorbed by the Gram margin are
    // certificates; anything else is reported as inconclusive.
    if !(quality.residual <= MAX_CERTIFICATE_RESIDUAL) || !quality.is_exact() {
        return Ok(SynthesisOutcome::Infeasible {
            report,
            inconclusive: true,
            reason: format!(
                "solver point is not an exact certificate (coefficient residual {:e}, Gram margin {:e})",
                quality.residual, quality.margin
            ),
        });
    }
    let rho = design.rho.as_ref().map_or(0.0, |r| solution.scalar(r));
    if let DesignMode::Exponential { rho_min } = design.mode {
        if !(rho >= rho_min * (1.0 - 1e-6)) {
            return Ok(SynthesisOutcome::Infeasible {
                report,
                inconclusive: true,
                reason: format!("recovered rho {rho:e} is below its floor {rho_min:e}"),
            });
        }
    }
    let controller = RationalController::new(
        solution.poly_matrix(&design.l, n),
        p,
        design.u_d.poly.clone(),
        design.u_d.alpha(),
        design.model.dictionary.clone(),
        rho,
        Some(design.bound.clone()),
    )?
    .with_certificate(
        solution.poly(&design.tau, n).scale(design.tau_scale()),
        design.model.clone(),
    );
    Ok(SynthesisOutcome::Feasible(Box::new(Synthesis {
        controller,
        solution,
        report,
        certificate_residual: quality.residual,
        certificate_min_eig: quality.min_eig,
        certificate_margin: quality.margin,
    })))
}

/// `μ(x) = L_n(Φ(x)) P⁻¹ Φ(x) / u_d(Φ(x))`.
#[derive(Clone, Debug)]
pub struct RationalController {
    pub alpha: u32,
    pub l_n: PolyMatrix,
    pub p: DMatrix<f64>,
    pub p_inv: DMatrix<f64>,
    pub u_d: Polynomial,
    pub dictionary: Dictionary,
    pub rho: f64,
    pub bound: Option<ResidualBound>,
    /// Multiplier from the synthesis, kept for re-checking the certificate.
    pub tau: Option<Polynomial>,
    /// Model the certificate was computed for.
    pub model: Option<Surrogate>,
}

impl RationalController {
    pub fn new(
        l_n: PolyMatrix,
        p: DMatrix<f64>,
        u_d: Polynomial,
        alpha: u32,
        dictionary: Dictionary,
        rho: f64,
        bound: Option<ResidualBound>,
    ) -> Result<Self> {
        let n = dictionary.len();
        if p.shape() != (n, n) || l_n.cols() != n || l_n.n_vars() != n || u_d.n_vars() != n {
            return Err(Error::Dimension(format!(
                "controller shapes (P {:?}, L_n {}x{} over {} vars, u_d over {} vars) disagree with N = {n}",
                p.shape(),
                l_n.rows(),
                l_n.cols(),
                l_n.n_vars(),
                u_d.n_vars()
            )));
        }
        if alpha == 0 || l_n.degree() > 2 * alpha - 1 {
            return Err(Error::Degree(format!(
                "numerator degree {} exceeds 2α−1 for α = {alpha}",
                l_n.degree()
            )));
        }
        if (&p - p.transpose()).amax() > 1e-9 * p.amax().max(1.0) {
            return Err(Error::Structure("P is not symmetric".into()));
        }
        let p = (&p + p.transpose()) * 0.5;
        if !(sdp::min_eigenvalue(&p) > 0.0) {
            return Err(Error::Structure("P is not positive definite".into()));
        }
        let p_inv = p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Structure("P is not positive definite".into()))?
            .inverse();
        if !(rho >= 0.0) {
            return Err(Error::Spec(format!("rho must be nonnegative, got {rho}")));
        }
        Ok(RationalController {
            alpha,
            l_n,
            p,
            p_inv,
            u_d,
            dictionary,
            rho,
            bound,
            tau: None,
            model: None,
        })
    }

    pub fn with_certificate(mut self, tau: Polynomial, model: Surrogate) -> Self {
        self.tau = Some(tau);
        self.model = Some(model);
        self
    }

    pub fn m(&self) -> usize {
        self.l_n.rows()
    }

    pub fn big_n(&self) -> usize {
        self.p.nrows()
    }

    pub fn eval_lifted(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let ud = self.u_d.eval(z.as_slice())?;
        let l = self.l_n.eval(z.as_slice())?;
        Ok(l * (&self.p_inv * z) / ud)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.eval_lifted(&self.dictionary.lift(x)?)
    }

    /// `V(z) = zᵀ P⁻¹ z`.
    pub fn lyapunov_lifted(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p_inv * z))
    }

    pub fn lyapunov(&self, x: &[f64]) -> Result<f64> {
        Ok(self.lyapunov_lifted(&self.dictionary.lift(x)?))
    }

    /// Decrease constant `ε = ρ / ‖P‖₂²` with `V(z⁺) − V(z) ≤ −ε‖z‖²`.
    pub fn decrease_constant(&self) -> f64 {
        let norm = nalgebra::SymmetricEigen::new(self.p.clone())
            .eigenvalues
            .amax();
        self.rho / (norm * norm)
    }

    /// Numeric value of the synthesis block matrix at `z`, rebuilt from the
    /// stored solution.
    pub fn certificate_matrix(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (Some(tau), Some(model), Some(bound)) = (&self.tau, &self.model, &self.bound) else {
            return Err(Error::Spec("controller carries no certificate data".into()));
        };
        let n = self.big_n();
        let m = self.m();
        let pt = z.as_slice();
        let ud = self.u_d.eval(pt)?;
        let t = tau.eval(pt)?;
        let l = self.l_n.eval(pt)?;
        let mut l_kron_z = DMatrix::zeros(m * n, n);
        for i in 0..m {
            for k in 0..n {
                for j in 0..n {
                    l_kron_z[(i * n + k, j)] = l[(i, j)] * z[k];
                }
            }
        }
        let ud_p = &self.p * ud;
        let top = &model.a * &ud_p + &model.b0 * &l + &model.btilde * l_kron_z;
        let dim = 3 * n + m;
        let mut out = DMatrix::zeros(dim, dim);
        let eye = |k: usize| DMatrix::<f64>::identity(k, k);
        out.view_mut((0, 0), (n, n))
            .copy_from(&(&ud_p - eye(n) * t));
        out.view_mut((n, n), (n, n))
            .copy_from(&(eye(n) * (t / (2.0 * bound.c_x * bound.c_x))));
        out.view_mut((2 * n, 2 * n), (m, m))
            .copy_from(&(eye(m) * (t / (2.0 * bound.c_u * bound.c_u))));
        let col = 2 * n + m;
        out.view_mut((col, col), (n, n))
            .copy_from(&(&ud_p - eye(n) * (self.rho * ud)));
        out.view_mut((0, col), (n, n)).copy_from(&top);
        out.view_mut((col, 0), (n, n)).copy_from(&top.transpose());
        out.view_mut((n, col), (n, n)).copy_from(&ud_p);
        out.view_mut((col, n), (n, n)).copy_from(&ud_p.transpose());
        out.view_mut((2 * n, col), (m, n)).copy_from(&l);
        out.view_mut((col, 2 * n), (n, m)).copy_from(&l.transpose());
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ControllerJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: ControllerJson = serde_json::from_str(s)?;
        j.into_controller()
    }
}

type CoeffMap = BTreeMap<String, f64>;

fn poly_to_map(p: &Polynomial) -> CoeffMap {
    p.terms().map(|(m, c)| (m.to_string(), c)).collect()
}

fn map_to_poly(map: &CoeffMap, n_vars: usize) -> Result<Polynomial> {
    Polynomial::from_terms(
        n_vars,
        map.iter()
            .map(|(k, &c)| Monomial::parse(k, n_vars).map(|m| (m, c)))
            .collect::<Result<Vec<_>>>()?,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundJson {
    c_x: f64,
    c_u: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B0")]
    b0: Vec<Vec<f64>>,
    #[serde(rename = "Btilde")]
    btilde: Vec<Vec<f64>>,
    delta_t: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerJson {
    alpha: u32,
    u_d: CoeffMap,
    #[serde(rename = "L_n")]
    l_n: Vec<Vec<CoeffMap>>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    rho: f64,
    dictionary_label: String,
    bound: Option<BoundJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<CoeffMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelJson>,
}

impl From<&RationalController> for ControllerJson {
    fn from(c: &RationalController) -> Self {
        ControllerJson {
            alpha: c.alpha,
            u_d: poly_to_map(&c.u_d),
            l_n: (0..c.l_n.rows())
                .map(|i| {
                    (0..c.l_n.cols())
                        .map(|j| poly_to_map(c.l_n.get(i, j)))
                        .collect()
                })
                .collect(),
            p: matrix_rows(&c.p),
            rho: c.rho,
            dictionary_label: c.dictionary.label(),
            bound: c.bound.as_ref().map(|b| BoundJson {
                c_x: b.c_x,
                c_u: b.c_u,
            }),
            tau: c.tau.as_ref().map(poly_to_map),
            model: c.model.as_ref().map(|m| ModelJson {
                a: matrix_rows(&m.a),
                b0: matrix_rows(&m.b0),
                btilde: matrix_rows(&m.btilde),
                delta_t: m.delta_t,
            }),
        }
    }
}

impl ControllerJson {
    fn into_controller(self) -> Result<RationalController> {
        let dictionary = Dictionary::from_label(&self.dictionary_label)?;
        let n = dictionary.len();
        let rows = self.l_n.len();
        if rows == 0 || self.l_n.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("L_n must be m x {n} with m >= 1")));
        }
        let mut l_n = PolyMatrix::zeros(rows, n, n);
        for (i, row) in self.l_n.iter().enumerate() {
            for (j, entry) in row.iter().enumerate() {
                l_n.set(i, j, map_to_poly(entry, n)?);
            }
        }
        let bound = self
            .bound
            .map(|b| ResidualBound::fixed(b.c_x, b.c_u))
            .transpose()?;
        let mut ctrl = RationalController::new(
            l_n,
            matrix_from_rows(&self.p, n, n, "P")?,
            map_to_poly(&self.u_d, n)?,
            self.alpha,
            dictionary.clone(),
            self.rho,
            bound,
        )?;
        if let Some(t) = &self.tau {
            ctrl.tau = Some(map_to_poly(t, n)?);
        }
        if let Some(mj) = self.model {
            let m = rows;
            ctrl.model = Some(Surrogate::new(
                matrix_from_rows(&mj.a, n, n, "A")?,
                matrix_from_rows(&mj.b0, n, m, "B0")?,
                matrix_from_rows(&mj.btilde, n, m * n, "Btilde")?,
                dictionary,
                mj.delta_t,
            )?);
        }
        Ok(ctrl)
    }
}

/// Default safety margin applied to the boundary minimum.
pub const DEFAULT_ROA_MARGIN: f64 = 0.05;

/// Maximum shrink rounds in [`estimate_roa`].
pub const ROA_MAX_ROUNDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaEstimate {
    pub c: f64,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub boundary_margin: f64,
    pub boundary_samples: usize,
    /// Sublevel-set samples verified to lie inside the region.
    pub containment_checked: usize,
    pub rounds: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoaOptions {
    pub n_boundary: usize,
    pub n_containment: usize,
    pub margin: f64,
    pub seed: u64,
    /// Containment samples are drawn from the region enlarged by this factor.
    pub search_factor: f64,
}

impl Default for RoaOptions {
    fn default() -> Self {
        RoaOptions {
            n_boundary: 10_000,
            n_containment: 10_000,
            margin: DEFAULT_ROA_MARGIN,
            seed: 0,
            search_factor: 3.0,
        }
    }
}

/// Largest sampled sublevel set `{x : V(x) ≤ c}` inside `region`.
pub fn estimate_roa(
    ctrl: &RationalController,
    region: &Region,
    opts: &RoaOptions,
) -> Result<RoaEstimate> {
    if region.dim() != ctrl.dictionary.n() {
        return Err(Error::Dimension(format!(
            "region has {} dimensions, controller state has {}",
            region.dim(),
            ctrl.dictionary.n()
        )));
    }
    if !region.contains_origin_strictly() {
        return Err(Error::Spec(
            "region must contain the origin in its interior".into(),
        ));
    }
    if !(0.0..1.0).contains(&opts.margin) {
        return Err(Error::Spec("margin must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut boundary = region.face_centers();
    boundary.extend(region.sample_boundary(opts.n_boundary, &mut rng));
    let mut vmin = f64::INFINITY;
    for x in &boundary {
        vmin = vmin.min(ctrl.lyapunov(x)?);
    }
    let mut c = (1.0 - opts.margin) * vmin;
    let search = region.scaled(opts.search_factor.max(1.0));
    let max_draws = 1000 * opts.n_containment.max(1);
    for round in 1..=ROA_MAX_ROUNDS {
        if !(c > 0.0) {
            return Err(Error::DegenerateRoa(format!(
                "sublevel value {c:e} is not positive"
            )));
        }
        let mut checked = 0usize;
        let mut draws = 0usize;
        let mut violator = None;
        while checked < opts.n_containment && draws < max_draws {
            draws += 1;
            let x = search.sample(&mut rng);
            let v = ctrl.lyapunov(&x)?;
            if v <= c {
                if !region.contains(&x) {
                    violator = Some(v);
                    break;
                }
                checked += 1;
            }
        }
        match violator {
            Some(v) => c = (1.0 - opts.margin) * v,
            None => {
                return Ok(RoaEstimate {
                    c,
                    p: matrix_rows(&ctrl.p),
                    boundary_margin: opts.margin,
                    boundary_samples: boundary.len(),
                    containment_checked: checked,
                    rounds: round,
                })
            }
        }
    }
    Err(Error::DegenerateRoa(format!(
        "containment check still failing after {ROA_MAX_ROUNDS} rounds"
    )))
}

/// Checks `{V ≤ c} ⊆ region` on fresh samples; returns the number of
/// sublevel samples inspected, or the first violating point.
pub fn check_containment(
    ctrl: &RationalController,
    region: &Region,
    c: f64,
    n: usize,
    seed: u64,
) -> Result<std::result::Result<usize, Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let search = region.scaled(3.0);
    let mut checked = 0;
    for _ in 0..n {
        let x = search.sample(&mut rng);
        if ctrl.lyapunov(&x)? <= c {
            if !region.contains(&x) {
                return Ok(Err(x));
            }
            checked += 1;
        }
    }
    Ok(Ok(checked))
}

/// Monte-Carlo volume of `{x ∈ region : pred(x)}`.
pub fn volume_by_sampling<F>(region: &Region, n: usize, seed: u64, mut pred: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<bool>,
{
    if n == 0 {
        return Err(Error::Spec("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n {
        let x = region.sample(&mut rng);
        if pred(&x)? {
            hits += 1;
        }
    }
    Ok(region.volume() * hits as f64 / n as f64)
}

/// Draws initial states uniformly from `{V ≤ c}` by rejection.
pub fn sample_sublevel(
    ctrl: &RationalController,
    region: &Region,
    c: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count {
        draws += 1;
        if draws > 10_000 * count.max(1) {
            return Err(Error::DegenerateRoa(
                "sublevel set too small to sample".into(),
            ));
        }
        let x = region.sample(&mut rng);
        if ctrl.lyapunov(&x)? <= c {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateOptions {
    pub n_samples: usize,
    /// States are drawn here and lifted.
    pub region: Region,
    pub residual_mode: ResidualMode,
    /// 1 for admissible residuals; larger values build violating ones.
    pub residual_scale: f64,
    /// Relative to the largest entry of the block matrix.
    pub psd_tol: f64,
    /// Relative to `V(z)`.
    pub decrease_tol: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub psd_checked: usize,
    pub psd_failed: usize,
    /// The first [`MAX_WITNESSES`] PSD failures.
    pub psd_violations: Vec<Witness>,
    /// Smallest eigenvalue seen over the PSD checks.
    pub worst_min_eigenvalue: f64,
    pub decrease_checked: usize,
    pub decrease_failed: usize,
    /// Witness values are `ΔV + ε‖z‖²`, positive when violated.
    pub decrease_violations: Vec<Witness>,
    pub epsilon: f64,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.psd_failed == 0 && self.decrease_failed == 0
    }
}

/// Point-wise validation: the block matrix is PSD and the Lyapunov function
/// decreases along the surrogate with residuals of maximal norm.
pub fn certificate_check(
    ctrl: &RationalController,
    opts: &CertificateOptions,
) -> Result<CertificateReport> {
    let model = ctrl
        .model
        .as_ref()
        .ok_or_else(|| Error::Spec("controller carries no model".into()))?;
    let bound = ctrl
        .bound
        .as_ref()
        .ok_or_else(|| Error::Spec("controller carries no residual bound".into()))?;
    if opts.region.dim() != ctrl.dictionary.n() {
        return Err(Error::Dimension(
            "check region dimension differs from the state dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p_inv = ctrl.p_inv.clone();
    let mut gen = residual_adversary(
        bound.c_x,
        bound.c_u,
        opts.residual_mode,
        Some(p_inv),
        opts.seed.wrapping_add(1),
    )?
    .with_scale(opts.residual_scale);
    let eps = ctrl.decrease_constant();
    let mut report = CertificateReport {
        psd_checked: 0,
        psd_failed: 0,
        psd_violations: vec![],
        worst_min_eigenvalue: f64::INFINITY,
        decrease_checked: 0,
        decrease_failed: 0,
        decrease_violations: vec![],
        epsilon: eps,
    };
    for _ in 0..opts.n_samples {
        let x = opts.region.sample(&mut rng);
        let z = ctrl.dictionary.lift(&x)?;
        if ctrl.tau.is_some() {
            let mat = ctrl.certificate_matrix(&z)?;
            let (ok, eig) = sdp::check_psd(&mat, opts.psd_tol)?;
            report.psd_checked += 1;
            report.worst_min_eigenvalue = report.worst_min_eigenvalue.min(eig);
            if !ok {
                report.psd_failed += 1;
                if report.psd_violations.len() < MAX_WITNESSES {
                    report.psd_violations.push(Witness {
                        x: x.clone(),
                        value: eig,
                    });
                }
            }
        }
        let u = ctrl.eval_lifted(&z)?;
        let nominal = model.predict_lifted(&z, &u)?;
        let next = &nominal + gen.residual(&z, &u, &nominal);
        let v = ctrl.lyapunov_lifted(&z);
        let slack = ctrl.lyapunov_lifted(&next) - v + eps * z.norm_squared();
        report.decrease_checked += 1;
        if slack > opts.decrease_tol * v.max(1.0) {
            report.decrease_failed += 1;
            if report.decrease_violations.len() < MAX_WITNESSES {
                report.decrease_violations.push(Witness { x, value: slack });
            }
        }
    }
    Ok(report)
}
