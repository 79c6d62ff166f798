//! JSON run configuration for the command-line pipeline.
//!
//! Unknown keys are rejected everywhere. Every field except `system` has a
//! default that depends on the chosen system.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{DenominatorSpec, DesignMode, Objective};
use crate::error::{Error, Result};
use crate::koopman::{matrix_from_rows, Dictionary, Surrogate};
use crate::poly::{Monomial, Polynomial};
use crate::region::Region;
use crate::sim::{
    building_zone, pendulum, BuildingParams, CustomSystemSpec, PendulumParams, ResidualMode,
    System, DEFAULT_SUBSTEPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Building {
        #[serde(default)]
        params: BuildingParams,
    },
    Pendulum {
        #[serde(default)]
        params: PendulumParams,
    },
    Custom {
        spec: CustomSystemSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundConfig {
    Fixed {
        c_x: f64,
        c_u: f64,
    },
    Empirical {
        #[serde(default = "default_safety")]
        safety: f64,
        /// Samples per block of the held-out set; defaults to `d`.
        validation_d: Option<usize>,
        /// Seed of the held-out set; defaults to `seed + 1`.
        validation_seed: Option<u64>,
        #[serde(default = "one")]
        weight_x: f64,
        #[serde(default = "one")]
        weight_u: f64,
    },
}

fn default_safety() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenominatorConfig {
    /// `0.01 + (1 + z)^{2α}`; single-variable models only.
    Building,
    /// `1 + Σ_{i≤j} z_i z_j`; requires `alpha = 1`.
    FullQuadratic,
    /// Explicit coefficients keyed by monomial, e.g. `{"1": 1, "x1^2": 2}`.
    Coefficients { terms: BTreeMap<String, f64> },
}

/// Known surrogate matrices given row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B0")]
    pub b0: Vec<Vec<f64>>,
    #[serde(rename = "Btilde")]
    pub btilde: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default = "yes")]
    pub log: bool,
}

fn yes() -> bool {
    true
}

impl GridAxis {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Config("sweep axis has no points".into()));
        }
        if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid sweep axis [{}, {}]",
                self.min, self.max
            )));
        }
        if self.count == 1 {
            return Ok(vec![self.min]);
        }
        let k = (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|i| {
                let t = i as f64 / k;
                if self.log {
                    (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp()
                } else {
                    self.min + t * (self.max - self.min)
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub c_x: GridAxis,
    pub c_u: GridAxis,
    pub alphas: Vec<u32>,
    /// Repeated solves per point; the median time is reported.
    #[serde(default = "one_usize")]
    pub repeats: usize,
}

fn one_usize() -> usize {
    1
}

impl Default for SweepConfig {
    fn default() -> Self {
        let axis = GridAxis {
            min: 1e-3,
            max: 1.0,
            count: 20,
            log: true,
        };
        SweepConfig {
            c_x: axis.clone(),
            c_u: axis,
            alphas: vec![1, 2, 3, 4],
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoaConfig {
    pub n_boundary: usize,
    pub n_containment: usize,
    pub margin: f64,
    /// Points per axis of the labeled grid written for plotting.
    pub grid_resolution: usize,
    /// Samples for the Monte-Carlo volume estimates.
    pub volume_samples: usize,
    /// Radius of the comparison ball `‖Φ(x)‖² ≤ r`.
    pub comparison_level: f64,
}

impl Default for RoaConfig {
    fn default() -> Self {
        RoaConfig {
            n_boundary: 10_000,
            n_containment: 10_000,
            margin: 0.05,
            grid_resolution: 101,
            volume_samples: 200_000,
            comparison_level: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Points for the pointwise certificate check.
    pub n_points: usize,
    /// States for the certificate check are drawn here (defaults to the region).
    pub check_region: Option<Vec<(f64, f64)>>,
    pub residual_mode: ResidualMode,
    /// Multiplies the residual norm; values above 1 produce inadmissible residuals.
    pub residual_scale: f64,
    pub dt_runs: usize,
    pub dt_steps: usize,
    /// Sampled-data runs from the region of attraction (continuous systems).
    pub ct_runs: usize,
    pub horizon: f64,
    pub convergence_tol: f64,
    pub psd_tol: f64,
    pub decrease_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            n_points: 10_000,
            check_region: None,
            residual_mode: ResidualMode::WorstAligned,
            residual_scale: 1.0,
            dt_runs: 100,
            dt_steps: 1000,
            ct_runs: 100,
            horizon: 10.0,
            convergence_tol: 1e-2,
            psd_tol: 1e-6,
            decrease_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    /// Comma-separated observables such as `x1,x2,sin(x1)`.
    #[serde(default)]
    pub dictionary: Option<String>,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub delta_t: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub substeps: Option<usize>,
    #[serde(default)]
    pub region: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub bound: Option<BoundConfig>,
    #[serde(default)]
    pub alpha: Option<u32>,
    #[serde(default)]
    pub u_d: Option<DenominatorConfig>,
    #[serde(default)]
    pub mode: DesignMode,
    #[serde(default)]
    pub objective: Option<Objective>,
    /// Skips data collection and uses these matrices.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub roa: RoaConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub solver_tol: Option<f64>,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Controller file for `roa` and `verify`; defaults to `<out>/controller.json`.
    #[serde(default)]
    pub controller: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Checks every derived setting once, before any computation.
    pub fn validate(&self) -> Result<()> {
        let sys = self.build_system()?;
        let dict = self.dictionary()?;
        if dict.n() != sys.n() {
            return Err(Error::Config(format!(
                "dictionary over {} states for a system with {}",
                dict.n(),
                sys.n()
            )));
        }
        let region = self.region()?;
        if region.dim() != sys.n() {
            return Err(Error::Config(
                "region dimension differs from the state dimension".into(),
            ));
        }
        if !region.contains_origin_strictly() {
            return Err(Error::Config(
                "region must contain the origin in its interior".into(),
            ));
        }
        if self.d() == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if !(self.delta_t() > 0.0) {
            return Err(Error::Config("delta_t must be positive".into()));
        }
        if self.substeps() == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if self.alpha() == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        match &self.bound {
            Some(BoundConfig::Fixed { c_x, c_u }) if !(*c_x > 0.0 && *c_u > 0.0) => {
                return Err(Error::Config(
                    "fixed bound constants must be positive".into(),
                ));
            }
            Some(BoundConfig::Empirical {
                safety,
                weight_x,
                weight_u,
                validation_d,
                ..
            }) => {
                if !(*safety >= 1.0) {
                    return Err(Error::Config("safety factor must be at least 1".into()));
                }
                if !(*weight_x > 0.0 && *weight_u > 0.0) {
                    return Err(Error::Config("bound weights must be positive".into()));
                }
                if validation_d == &Some(0) {
                    return Err(Error::Config("validation_d must be at least 1".into()));
                }
            }
            _ => {}
        }
        self.denominator(dict.len(), self.alpha())?;
        if let Some(m) = &self.model {
            self.known_model(m, &dict)?;
        }
        if let Some(sw) = &self.sweep {
            sw.c_x.values()?;
            sw.c_u.values()?;
            if sw.alphas.is_empty() || sw.alphas.contains(&0) {
                return Err(Error::Config("sweep needs alphas >= 1".into()));
            }
            if sw.repeats == 0 {
                return Err(Error::Config("sweep repeats must be at least 1".into()));
            }
        }
        if let Some(t) = self.solver_tol {
            if !(t > 0.0) {
                return Err(Error::Config("solver_tol must be positive".into()));
            }
        }
        let r = &self.roa;
        if !(0.0..1.0).contains(&r.margin) || r.n_boundary == 0 || r.volume_samples == 0 {
            return Err(Error::Config("invalid roa settings".into()));
        }
        let v = &self.verify;
        if let Some(b) = &v.check_region {
            let reg = Region::new(b.clone()).map_err(|e| Error::Config(e.to_string()))?;
            if reg.dim() != sys.n() {
                return Err(Error::Config(
                    "check_region dimension differs from the state dimension".into(),
                ));
            }
        }
        if !(v.residual_scale >= 0.0) || !(v.horizon >= 0.0) || !(v.convergence_tol > 0.0) {
            return Err(Error::Config("invalid verify settings".into()));
        }
        Ok(())
    }

    pub fn is_building(&self) -> bool {
        matches!(self.system, SystemConfig::Building { .. })
    }

    pub fn build_system(&self) -> Result<System> {
        Ok(match &self.system {
            SystemConfig::Building { params } => System::Discrete(building_zone(*params)),
            SystemConfig::Pendulum { params } => System::Continuous(pendulum(*params)),
            SystemConfig::Custom { spec } => {
                System::Continuous(spec.build().map_err(|e| Error::Config(e.to_string()))?)
            }
        })
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        let res = match (&self.dictionary, &self.system) {
            (Some(label), _) => Dictionary::from_label(label),
            (None, SystemConfig::Pendulum { .. }) => Ok(Dictionary::pendulum()),
            (None, SystemConfig::Building { .. }) => Ok(Dictionary::identity(1)),
            (None, SystemConfig::Custom { spec }) => Ok(Dictionary::identity(spec.n.max(1))),
        };
        res.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn region(&self) -> Result<Region> {
        let res = match (&self.region, &self.system) {
            (Some(b), _) => Region::new(b.clone()),
            (None, SystemConfig::Pendulum { .. }) => Region::symmetric(2, PI),
            (None, SystemConfig::Building { .. }) => Region::symmetric(1, 5.0),
            (None, SystemConfig::Custom { spec }) => Region::symmetric(spec.n.max(1), 1.0),
        };
        res.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn check_region(&self) -> Result<Region> {
        match &self.verify.check_region {
            Some(b) => Region::new(b.clone()).map_err(|e| Error::Config(e.to_string())),
            None => self.region(),
        }
    }

    pub fn d(&self) -> usize {
        self.d.unwrap_or(200)
    }

    pub fn delta_t(&self) -> f64 {
        match (self.delta_t, &self.system) {
            (Some(dt), _) => dt,
            (None, SystemConfig::Building { params }) => params.sampling_time,
            (None, _) => 0.01,
        }
    }

    pub fn substeps(&self) -> usize {
        self.substeps.unwrap_or(DEFAULT_SUBSTEPS)
    }

    pub fn alpha(&self) -> u32 {
        self.alpha.unwrap_or(1)
    }

    pub fn bound(&self) -> BoundConfig {
        self.bound.clone().unwrap_or(match self.system {
            SystemConfig::Building { .. } => BoundConfig::Fixed { c_x: 0.1, c_u: 0.1 },
            _ => BoundConfig::Fixed {
                c_x: 1e-2,
                c_u: 1e-3,
            },
        })
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(match self.system {
            SystemConfig::Building { .. } => Objective::Feasibility,
            _ => Objective::MaxMinEigP,
        })
    }

    pub fn sweep(&self) -> SweepConfig {
        self.sweep.clone().unwrap_or_default()
    }

    /// Denominator for lifted dimension `big_n` and a given `alpha`.
    pub fn denominator(&self, big_n: usize, alpha: u32) -> Result<DenominatorSpec> {
        let choice = self.u_d.clone().unwrap_or(match (&self.system, big_n) {
            (SystemConfig::Building { .. }, 1) => DenominatorConfig::Building,
            _ => DenominatorConfig::FullQuadratic,
        });
        let res = match choice {
            DenominatorConfig::Building => {
                if big_n != 1 {
                    return Err(Error::Config(
                        "building denominator needs a one-dimensional model".into(),
                    ));
                }
                DenominatorSpec::building(alpha)
            }
            DenominatorConfig::FullQuadratic => {
                if alpha != 1 {
                    return Err(Error::Config(
                        "full_quadratic denominator requires alpha = 1".into(),
                    ));
                }
                DenominatorSpec::full_quadratic(big_n)
            }
            DenominatorConfig::Coefficients { terms } => {
                let parsed = terms
                    .iter()
                    .map(|(k, &c)| Monomial::parse(k, big_n).map(|m| (m, c)))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(e.to_string()))?;
                let poly = Polynomial::from_terms(big_n, parsed)
                    .map_err(|e| Error::Config(e.to_string()))?;
                DenominatorSpec::new(poly, 2 * alpha)
            }
        };
        res.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn known_model(&self, m: &ModelConfig, dict: &Dictionary) -> Result<Surrogate> {
        let n = dict.len();
        let inputs = m.b0.first().map_or(0, |r| r.len());
        let build = || -> Result<Surrogate> {
            Surrogate::new(
                matrix_from_rows(&m.a, n, n, "A")?,
                matrix_from_rows(&m.b0, n, inputs, "B0")?,
                matrix_from_rows(&m.btilde, n, inputs * n, "Btilde")?,
                dict.clone(),
                self.delta_t(),
            )
        };
        build().map_err(|e| Error::Config(e.to_string()))
    }

    /// Exact surrogate of the building process, available without data.
    pub fn building_exact_model(&self) -> Option<Surrogate> {
        let SystemConfig::Building { params } = &self.system else {
            return None;
        };
        let g = params.sampling_time / params.zone_volume;
        Surrogate::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, g * params.supply_temperature),
            DMatrix::from_element(1, 1, -g),
            Dictionary::identity(1),
            params.sampling_time,
        )
        .ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_configs_validate() {
        let c = RunConfig::from_json(r#"{"system": {"kind": "pendulum"}}"#).unwrap();
        assert_eq!(c.d(), 200);
        assert_eq!(c.delta_t(), 0.01);
        assert_eq!(c.dictionary().unwrap().label(), "x1,x2,sin(x1)");
        let b = RunConfig::from_json(r#"{"system": {"kind": "building"}, "alpha": 3}"#).unwrap();
        assert_eq!(b.denominator(1, 3).unwrap().two_alpha, 6);
        let m = b.building_exact_model().unwrap();
        assert_eq!(
            (m.a[(0, 0)], m.b0[(0, 0)], m.btilde[(0, 0)]),
            (1.0, -0.5, -0.5)
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            r#"{"system": {"kind": "pendulum"}, "d": 0}"#,
            r#"{"system": {"kind": "pendulum"}, "unknown": 1}"#,
            r#"{"system": {"kind": "pendulum", "params": {"mass": 1, "colour": 2}}}"#,
            r#"{"system": {"kind": "pendulum"}, "alpha": 2}"#,
            r#"{"system": {"kind": "building"}, "sweep": {"c_x": {"min": 0.01, "max": 1, "count": 0}, "c_u": {"min": 0.01, "max": 1, "count": 3}, "alphas": [1]}}"#,
            r#"{"system": {"kind": "building"}, "region": [[0.0, 1.0]]}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn grid_axis_endpoints() {
        let v = GridAxis {
            min: 1e-2,
            max: 1.0,
            count: 10,
            log: true,
        }
        .values()
        .unwrap();
        assert_eq!(v.len(), 10);
        assert!((v[0] - 1e-2).abs() < 1e-15 && (v[9] - 1.0).abs() < 1e-12);
    }
}
