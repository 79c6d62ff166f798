//! System definitions, fixed-step RK4 integration, sampled-data and
//! discrete-time closed loops, and tight residual generators.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{Observable, Surrogate};

/// Default RK4 substeps per sampling interval.
pub const DEFAULT_SUBSTEPS: usize = 20;

/// Trajectories whose state norm exceeds this are aborted as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub type VectorField = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type DiscreteMap = Arc<dyn Fn(&[f64], &[f64]) -> DVector<f64> + Send + Sync>;

/// Control-affine ODE `ẋ = f(x) + Σ g_i(x) u_i`.
#[derive(Clone)]
pub struct OdeSystem {
    pub n: usize,
    pub m: usize,
    pub label: String,
    drift: VectorField,
    input_maps: Vec<VectorField>,
}

impl std::fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("label", &self.label)
            .finish()
    }
}

impl OdeSystem {
    pub fn new(
        n: usize,
        label: impl Into<String>,
        drift: VectorField,
        input_maps: Vec<VectorField>,
    ) -> Self {
        OdeSystem {
            n,
            m: input_maps.len(),
            label: label.into(),
            drift,
            input_maps,
        }
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut dx = (self.drift)(x);
        for (g, &ui) in self.input_maps.iter().zip(u) {
            if ui != 0.0 {
                dx += (g)(x) * ui;
            }
        }
        dx
    }
}

/// Inverted pendulum `ẋ₁ = x₂`, `ẋ₂ = (g/l) sin x₁ − b/(m l²) x₂ + u/(m l²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            damping: 0.5,
            gravity: 9.81,
        }
    }
}

pub fn pendulum(p: PendulumParams) -> OdeSystem {
    let ml2 = p.mass * p.length * p.length;
    let (g_l, b_ml2) = (p.gravity / p.length, p.damping / ml2);
    OdeSystem::new(
        2,
        "pendulum",
        Arc::new(move |x: &[f64]| DVector::from_vec(vec![x[1], g_l * x[0].sin() - b_ml2 * x[1]])),
        vec![Arc::new(move |_x: &[f64]| {
            DVector::from_vec(vec![0.0, 1.0 / ml2])
        })],
    )
}

/// Zone temperature process `x⁺ = x + T_s V_z⁻¹ u (T_0 − x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildingParams {
    pub zone_volume: f64,
    pub supply_temperature: f64,
    pub sampling_time: f64,
}

impl Default for BuildingParams {
    fn default() -> Self {
        BuildingParams {
            zone_volume: 2.0,
            supply_temperature: -1.0,
            sampling_time: 1.0,
        }
    }
}

#[derive(Clone)]
pub struct DiscreteSystem {
    pub n: usize,
    pub m: usize,
    pub label: String,
    map: DiscreteMap,
}

impl std::fmt::Debug for DiscreteSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("label", &self.label)
            .finish()
    }
}

impl DiscreteSystem {
    pub fn new(n: usize, m: usize, label: impl Into<String>, map: DiscreteMap) -> Self {
        DiscreteSystem {
            n,
            m,
            label: label.into(),
            map,
        }
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        (self.map)(x, u)
    }
}

pub fn building_zone(p: BuildingParams) -> DiscreteSystem {
    let gain = p.sampling_time / p.zone_volume;
    let t0 = p.supply_temperature;
    DiscreteSystem::new(
        1,
        1,
        "building",
        Arc::new(move |x: &[f64], u: &[f64]| {
            DVector::from_vec(vec![x[0] + gain * u[0] * (t0 - x[0])])
        }),
    )
}

/// A system sampled either by integrating an ODE or by stepping a map.
#[derive(Clone, Debug)]
pub enum System {
    Continuous(OdeSystem),
    Discrete(DiscreteSystem),
}

impl System {
    pub fn n(&self) -> usize {
        match self {
            System::Continuous(s) => s.n,
            System::Discrete(s) => s.n,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            System::Continuous(s) => s.m,
            System::Discrete(s) => s.m,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            System::Continuous(s) => &s.label,
            System::Discrete(s) => &s.label,
        }
    }

    /// State after one sampling interval under a constant input. Discrete
    /// systems ignore `delta_t` and `substeps`.
    pub fn advance(
        &self,
        x: &[f64],
        u: &[f64],
        delta_t: f64,
        substeps: usize,
    ) -> Result<DVector<f64>> {
        match self {
            System::Continuous(s) => rk4_flow(s, x, u, delta_t, substeps),
            System::Discrete(s) => {
                let next = s.step(x, u);
                if next.iter().all(|v| v.is_finite()) {
                    Ok(next)
                } else {
                    Err(Error::Integration { time: 1.0 })
                }
            }
        }
    }
}

/// One term of a custom vector-field component: `coeff · observable(x)`,
/// where the observable label `"1"` denotes the constant function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldTerm {
    pub coeff: f64,
    pub term: String,
}

/// ODE given as sums of dictionary-style terms per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystemSpec {
    pub n: usize,
    pub label: Option<String>,
    /// `drift[i]` lists the terms of `f_i`.
    pub drift: Vec<Vec<FieldTerm>>,
    /// `input_maps[k][i]` lists the terms of `g_k,i`.
    pub input_maps: Vec<Vec<Vec<FieldTerm>>>,
}

fn compile_field(n: usize, comps: &[Vec<FieldTerm>], allow_constant: bool) -> Result<VectorField> {
    if comps.len() != n {
        return Err(Error::Spec(format!(
            "vector field has {} components, expected {n}",
            comps.len()
        )));
    }
    let mut parsed: Vec<Vec<(f64, Option<Observable>)>> = Vec::with_capacity(n);
    for comp in comps {
        let mut terms = Vec::new();
        for t in comp {
            if t.term.trim() == "1" {
                if !allow_constant {
                    return Err(Error::Spec(
                        "drift must vanish at the origin: constant term".into(),
                    ));
                }
                terms.push((t.coeff, None));
            } else {
                let obs = Observable::parse(&t.term)?;
                if obs.max_index() >= n {
                    return Err(Error::Spec(format!(
                        "term {} references a missing state",
                        t.term
                    )));
                }
                terms.push((t.coeff, Some(obs)));
            }
        }
        parsed.push(terms);
    }
    Ok(Arc::new(move |x: &[f64]| {
        DVector::from_iterator(
            parsed.len(),
            parsed.iter().map(|terms| {
                terms
                    .iter()
                    .map(|(c, o)| c * o.as_ref().map_or(1.0, |o| o.eval(x)))
                    .sum::<f64>()
            }),
        )
    }))
}

impl CustomSystemSpec {
    pub fn build(&self) -> Result<OdeSystem> {
        if self.n == 0 {
            return Err(Error::Spec("custom system needs n >= 1".into()));
        }
        let drift = compile_field(self.n, &self.drift, false)?;
        let maps = self
            .input_maps
            .iter()
            .map(|g| compile_field(self.n, g, true))
            .collect::<Result<Vec<_>>>()?;
        if maps.is_empty() {
            return Err(Error::Spec("custom system needs at least one input".into()));
        }
        Ok(OdeSystem::new(
            self.n,
            self.label.clone().unwrap_or_else(|| "custom".into()),
            drift,
            maps,
        ))
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Classical RK4 with `substeps` equal steps over `duration` and a constant input.
pub fn rk4_flow(
    sys: &OdeSystem,
    x0: &[f64],
    u: &[f64],
    duration: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    if substeps == 0 || !(duration > 0.0) {
        return Err(Error::Spec(format!(
            "rk4 needs substeps >= 1 and duration > 0 (got {substeps}, {duration})"
        )));
    }
    if x0.len() != sys.n || u.len() != sys.m {
        return Err(Error::Dimension(format!(
            "state/input of length {}/{} for a system with n={}, m={}",
            x0.len(),
            u.len(),
            sys.n,
            sys.m
        )));
    }
    let h = duration / substeps as f64;
    let mut x = DVector::from_column_slice(x0);
    for k in 0..substeps {
        let k1 = sys.rhs(x.as_slice(), u);
        let k2 = sys.rhs((&x + &k1 * (0.5 * h)).as_slice(), u);
        let k3 = sys.rhs((&x + &k2 * (0.5 * h)).as_slice(), u);
        let k4 = sys.rhs((&x + &k3 * h).as_slice(), u);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !all_finite(&x) {
            return Err(Error::Integration {
                time: (k + 1) as f64 * h,
            });
        }
    }
    Ok(x)
}

/// State feedback `u = k(x)`.
pub trait Feedback {
    fn input(&self, x: &[f64]) -> DVector<f64>;
}

impl<F: Fn(&[f64]) -> DVector<f64>> Feedback for F {
    fn input(&self, x: &[f64]) -> DVector<f64> {
        self(x)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Input held from each sample time on; the last entry is the input the
    /// feedback would apply at the final state.
    pub inputs: Vec<DVector<f64>>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states
            .last()
            .expect("trajectory holds at least the initial state")
    }

    /// CSV with header `t,x1..xn,u1..um`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.states.first().map_or(0, |s| s.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        wr.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut rec = vec![self.times[k].to_string()];
            rec.extend(self.states[k].iter().map(|v| v.to_string()));
            if let Some(u) = self.inputs.get(k) {
                rec.extend(u.iter().map(|v| v.to_string()));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Sampled-data loop: `u` is held at `k(x(kΔt))` on each interval.
pub fn closed_loop_ct(
    sys: &OdeSystem,
    ctrl: &dyn Feedback,
    x0: &[f64],
    delta_t: f64,
    horizon: f64,
    substeps: usize,
) -> Result<Trajectory> {
    if !(delta_t > 0.0) || horizon < 0.0 {
        return Err(Error::Spec(
            "closed loop needs delta_t > 0 and horizon >= 0".into(),
        ));
    }
    let steps_f = horizon / delta_t;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(Error::Spec(format!(
            "horizon {horizon} is not a multiple of delta_t {delta_t}"
        )));
    }
    let mut traj = Trajectory::default();
    let mut x = DVector::from_column_slice(x0);
    for k in 0..=steps {
        let u = ctrl.input(x.as_slice());
        traj.times.push(k as f64 * delta_t);
        traj.states.push(x.clone());
        traj.inputs.push(u.clone());
        if k == steps {
            break;
        }
        if x.iter().all(|v| *v == 0.0) && u.iter().all(|v| *v == 0.0) {
            // origin is an equilibrium: f(0) = 0 and u = 0
            continue;
        }
        match rk4_flow(sys, x.as_slice(), u.as_slice(), delta_t, substeps) {
            Ok(next) if next.norm() <= DIVERGENCE_THRESHOLD => x = next,
            _ => {
                traj.diverged = true;
                break;
            }
        }
    }
    Ok(traj)
}

/// Residual term injected into a discrete-time closed loop.
pub trait ResidualSource {
    /// Residual for lifted state `z`, input `u` and nominal successor.
    fn residual(
        &mut self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        nominal_next: &DVector<f64>,
    ) -> DVector<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    RandomDirection,
    WorstAligned,
}

/// Residuals of norm exactly `scale · (c_x‖z‖ + c_u‖u‖)`.
#[derive(Clone, Debug)]
pub struct ResidualGenerator {
    pub c_x: f64,
    pub c_u: f64,
    pub mode: ResidualMode,
    /// 1 for admissible residuals; larger values produce violating ones.
    pub scale: f64,
    p_inv: Option<DMatrix<f64>>,
    rng: ChaCha8Rng,
}

/// Number of candidate directions searched by the worst-aligned mode.
pub const SPHERE_SAMPLES: usize = 1000;

pub fn residual_adversary(
    c_x: f64,
    c_u: f64,
    mode: ResidualMode,
    p_inv: Option<DMatrix<f64>>,
    seed: u64,
) -> Result<ResidualGenerator> {
    if c_x < 0.0 || c_u < 0.0 {
        return Err(Error::Spec("residual constants must be nonnegative".into()));
    }
    if mode == ResidualMode::WorstAligned && p_inv.is_none() {
        return Err(Error::Spec(
            "worst-aligned residuals need the Lyapunov matrix".into(),
        ));
    }
    Ok(ResidualGenerator {
        c_x,
        c_u,
        mode,
        scale: 1.0,
        p_inv,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl ResidualGenerator {
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn magnitude(&self, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.scale * (self.c_x * z.norm() + self.c_u * u.norm())
    }

    fn random_unit(&mut self, dim: usize) -> DVector<f64> {
        loop {
            let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut self.rng));
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        }
    }

    /// Deterministic spread of unit directions.
    fn sphere_directions(&mut self, dim: usize) -> Vec<DVector<f64>> {
        match dim {
            1 => vec![
                DVector::from_element(1, 1.0),
                DVector::from_element(1, -1.0),
            ],
            2 => (0..SPHERE_SAMPLES)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / SPHERE_SAMPLES as f64;
                    DVector::from_vec(vec![t.cos(), t.sin()])
                })
                .collect(),
            3 => {
                // Fibonacci lattice
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                (0..SPHERE_SAMPLES)
                    .map(|k| {
                        let y = 1.0 - 2.0 * (k as f64 + 0.5) / SPHERE_SAMPLES as f64;
                        let r = (1.0 - y * y).sqrt();
                        let t = golden * k as f64;
                        DVector::from_vec(vec![r * t.cos(), y, r * t.sin()])
                    })
                    .collect()
            }
            _ => (0..SPHERE_SAMPLES).map(|_| self.random_unit(dim)).collect(),
        }
    }
}

impl ResidualSource for ResidualGenerator {
    fn residual(
        &mut self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        nominal_next: &DVector<f64>,
    ) -> DVector<f64> {
        let dim = nominal_next.len();
        let beta = self.magnitude(z, u);
        if beta == 0.0 {
            return DVector::zeros(dim);
        }
        let dir = match self.mode {
            ResidualMode::RandomDirection => self.random_unit(dim),
            ResidualMode::WorstAligned => {
                let p_inv = self.p_inv.clone().expect("checked at construction");
                let value = |d: &DVector<f64>| {
                    let w = nominal_next + d * beta;
                    w.dot(&(&p_inv * &w))
                };
                let mut candidates = self.sphere_directions(dim);
                let g = &p_inv * nominal_next;
                if g.norm() > 0.0 {
                    candidates.push(g.normalize());
                }
                let eig = nalgebra::SymmetricEigen::new(p_inv.clone());
                let imax = eig.eigenvalues.imax();
                let v = eig.eigenvectors.column(imax).into_owned();
                candidates.push(-&v);
                candidates.push(v);
                candidates
                    .into_iter()
                    .map(|d| (value(&d), d))
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, d)| d)
                    .expect("non-empty candidate set")
            }
        };
        dir * beta
    }
}

/// Residual that is identically zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoResidual;

impl ResidualSource for NoResidual {
    fn residual(
        &mut self,
        _z: &DVector<f64>,
        _u: &DVector<f64>,
        nominal_next: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(nominal_next.len())
    }
}

/// Iterates `z⁺ = A z + B0 u + B̃ (u ⊗ z) + r` in lifted coordinates, with
/// `u = feedback(z)` and `z_0 = Φ(x_0)`.
pub fn closed_loop_dt(
    model: &Surrogate,
    feedback: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    x0: &[f64],
    steps: usize,
    residual: &mut dyn ResidualSource,
) -> Result<Trajectory> {
    let mut z = model.dictionary.lift(x0)?;
    let mut traj = Trajectory::default();
    for k in 0..=steps {
        let u = feedback(&z);
        traj.times.push(k as f64 * model.delta_t);
        traj.states.push(z.clone());
        traj.inputs.push(u.clone());
        if k == steps {
            break;
        }
        let nominal = model.predict_lifted(&z, &u)?;
        let r = residual.residual(&z, &u, &nominal);
        z = nominal + r;
        if !all_finite(&z) || z.norm() > DIVERGENCE_THRESHOLD {
            traj.diverged = true;
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::Dictionary;

    fn decay() -> OdeSystem {
        OdeSystem::new(
            1,
            "decay",
            Arc::new(|x: &[f64]| DVector::from_vec(vec![-x[0]])),
            vec![Arc::new(|_x: &[f64]| DVector::from_vec(vec![0.0]))],
        )
    }

    #[test]
    fn rk4_examples() {
        let zero = OdeSystem::new(
            2,
            "zero",
            Arc::new(|_x: &[f64]| DVector::zeros(2)),
            vec![Arc::new(|_x: &[f64]| DVector::zeros(2))],
        );
        let x = rk4_flow(&zero, &[1.5, -2.0], &[3.0], 2.0, 7).unwrap();
        assert_eq!(x.as_slice(), &[1.5, -2.0]);

        let x = rk4_flow(&decay(), &[1.0], &[0.0], 1.0, 100).unwrap();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-6);

        let p = pendulum(PendulumParams::default());
        let x = rk4_flow(&p, &[0.0, 0.0], &[0.0], 1.0, 20).unwrap();
        assert_eq!(x.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rk4_reports_blow_up() {
        let blow = OdeSystem::new(
            1,
            "blow",
            Arc::new(|x: &[f64]| DVector::from_vec(vec![x[0] * x[0] * x[0]])),
            vec![Arc::new(|_x: &[f64]| DVector::from_vec(vec![0.0]))],
        );
        assert!(matches!(
            rk4_flow(&blow, &[1e3], &[0.0], 10.0, 10),
            Err(Error::Integration { .. })
        ));
        assert!(rk4_flow(&blow, &[1.0], &[0.0], 1.0, 0).is_err());
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let exact = (-1f64).exp();
        let e1 = (rk4_flow(&decay(), &[1.0], &[0.0], 1.0, 10).unwrap()[0] - exact).abs();
        let e2 = (rk4_flow(&decay(), &[1.0], &[0.0], 1.0, 20).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_state_stays_zero_in_closed_loop() {
        let p = pendulum(PendulumParams::default());
        let ctrl = |x: &[f64]| DVector::from_vec(vec![-10.0 * x[0] - 3.0 * x[1]]);
        let traj = closed_loop_ct(&p, &ctrl, &[0.0, 0.0], 0.1, 1.0, 20).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.states.iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn open_loop_pendulum_falls() {
        let p = pendulum(PendulumParams::default());
        let ctrl = |_x: &[f64]| DVector::from_vec(vec![0.0]);
        let traj = closed_loop_ct(&p, &ctrl, &[0.1, 0.0], 0.01, 2.0, 20).unwrap();
        assert!(traj.final_state()[0].abs() > 1.0);
    }

    #[test]
    fn horizon_must_be_multiple_of_step() {
        let p = pendulum(PendulumParams::default());
        let ctrl = |_x: &[f64]| DVector::from_vec(vec![0.0]);
        assert!(closed_loop_ct(&p, &ctrl, &[0.1, 0.0], 0.3, 1.0, 20).is_err());
    }

    #[test]
    fn building_map_matches_formula() {
        let b = building_zone(BuildingParams::default());
        let x = b.step(&[2.0], &[1.0]);
        assert_eq!(x[0], 2.0 + 0.5 * (-1.0 - 2.0));
    }

    #[test]
    fn residual_examples() {
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let u = DVector::from_vec(vec![0.0]);
        let mut g = residual_adversary(0.0, 0.0, ResidualMode::RandomDirection, None, 1).unwrap();
        assert_eq!(g.residual(&z, &u, &z).norm(), 0.0);
        let mut g = residual_adversary(0.01, 0.0, ResidualMode::RandomDirection, None, 1).unwrap();
        assert!((g.residual(&z, &u, &z).norm() - 0.01).abs() < 1e-15);
        assert!(residual_adversary(0.1, 0.1, ResidualMode::WorstAligned, None, 1).is_err());
        assert!(residual_adversary(-0.1, 0.1, ResidualMode::RandomDirection, None, 1).is_err());
    }

    #[test]
    fn worst_aligned_increases_lyapunov_value() {
        let p_inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut g =
            residual_adversary(0.2, 0.1, ResidualMode::WorstAligned, Some(p_inv.clone()), 4)
                .unwrap();
        let mut rnd = residual_adversary(0.2, 0.1, ResidualMode::RandomDirection, None, 4).unwrap();
        let z = DVector::from_vec(vec![0.5, -1.0]);
        let u = DVector::from_vec(vec![2.0]);
        let nominal = DVector::from_vec(vec![0.3, -0.2]);
        let v = |w: &DVector<f64>| w.dot(&(&p_inv * w));
        let worst = v(&(&nominal + g.residual(&z, &u, &nominal)));
        for _ in 0..200 {
            let r = rnd.residual(&z, &u, &nominal);
            assert!(v(&(&nominal + r)) <= worst + 1e-3);
        }
    }

    #[test]
    fn discrete_loop_zero_steps_and_zero_state() {
        let model = Surrogate {
            a: DMatrix::from_element(1, 1, 1.0),
            b0: DMatrix::from_element(1, 1, -0.5),
            btilde: DMatrix::from_element(1, 1, -0.5),
            dictionary: Dictionary::identity(1),
            delta_t: 1.0,
        };
        let fb = |z: &DVector<f64>| z * 0.5;
        let t = closed_loop_dt(&model, &fb, &[3.0], 0, &mut NoResidual).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.states[0][0], 3.0);
        let t = closed_loop_dt(&model, &fb, &[0.0], 50, &mut NoResidual).unwrap();
        assert!(t.states.iter().all(|s| s[0] == 0.0));
    }

    #[test]
    fn custom_system_from_terms() {
        let spec = CustomSystemSpec {
            n: 2,
            label: None,
            drift: vec![
                vec![FieldTerm {
                    coeff: 1.0,
                    term: "x2".into(),
                }],
                vec![
                    FieldTerm {
                        coeff: 9.81,
                        term: "sin(x1)".into(),
                    },
                    FieldTerm {
                        coeff: -0.5,
                        term: "x2".into(),
                    },
                ],
            ],
            input_maps: vec![vec![
                vec![],
                vec![FieldTerm {
                    coeff: 1.0,
                    term: "1".into(),
                }],
            ]],
        };
        let custom = spec.build().unwrap();
        let reference = pendulum(PendulumParams::default());
        let x = [0.4, -0.3];
        let u = [0.7];
        assert!((custom.rhs(&x, &u) - reference.rhs(&x, &u)).norm() < 1e-12);

        let mut bad = spec.clone();
        bad.drift[0].push(FieldTerm {
            coeff: 1.0,
            term: "1".into(),
        });
        assert!(bad.build().is_err());
    }
}
