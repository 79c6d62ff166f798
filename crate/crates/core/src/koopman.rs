//! Dictionary lifting, constant-input data collection, least-squares
//! identification of the bilinear surrogate and empirical residual bounds.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::Region;
use crate::sdp::{self, Cone, ConicProblem, Triplet};
use crate::sim::System;

/// Scalar observable of the state. Every variant vanishes at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Observable {
    Coord(usize),
    Sin(usize),
    /// `cos(x_i) − 1`
    CosMinusOne(usize),
    Square(usize),
    Product(usize, usize),
}

fn parse_state_index(s: &str) -> Result<usize> {
    let s = s.trim();
    let idx = s
        .strip_prefix('x')
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&i| i >= 1)
        .ok_or_else(|| Error::Parse(format!("expected a state name like x1, got {s:?}")))?;
    Ok(idx - 1)
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Observable::Coord(i) => x[i],
            Observable::Sin(i) => x[i].sin(),
            Observable::CosMinusOne(i) => x[i].cos() - 1.0,
            Observable::Square(i) => x[i] * x[i],
            Observable::Product(i, j) => x[i] * x[j],
        }
    }

    /// Largest state index referenced.
    pub fn max_index(&self) -> usize {
        match *self {
            Observable::Coord(i)
            | Observable::Sin(i)
            | Observable::CosMinusOne(i)
            | Observable::Square(i) => i,
            Observable::Product(i, j) => i.max(j),
        }
    }

    /// Parses `x1`, `sin(x1)`, `cos(x1)-1`, `x1^2` or `x1*x2`.
    pub fn parse(s: &str) -> Result<Observable> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(inner) = t.strip_prefix("sin(").and_then(|r| r.strip_suffix(')')) {
            return Ok(Observable::Sin(parse_state_index(inner)?));
        }
        if let Some(inner) = t.strip_prefix("cos(").and_then(|r| r.strip_suffix(")-1")) {
            return Ok(Observable::CosMinusOne(parse_state_index(inner)?));
        }
        if let Some(base) = t.strip_suffix("^2") {
            return Ok(Observable::Square(parse_state_index(base)?));
        }
        if let Some((a, b)) = t.split_once('*') {
            return Ok(Observable::Product(
                parse_state_index(a)?,
                parse_state_index(b)?,
            ));
        }
        Ok(Observable::Coord(parse_state_index(&t)?))
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Observable::Coord(i) => write!(f, "x{}", i + 1),
            Observable::Sin(i) => write!(f, "sin(x{})", i + 1),
            Observable::CosMinusOne(i) => write!(f, "cos(x{})-1", i + 1),
            Observable::Square(i) => write!(f, "x{}^2", i + 1),
            Observable::Product(i, j) => write!(f, "x{}*x{}", i + 1, j + 1),
        }
    }
}

/// Ordered observables `Φ = (x_1, …, x_n, φ_{n+1}, …, φ_N)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    n: usize,
    observables: Vec<Observable>,
}

impl Dictionary {
    /// `extra` are appended after the `n` coordinate projections.
    pub fn new(n: usize, extra: Vec<Observable>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Spec("dictionary needs n >= 1".into()));
        }
        let mut observables: Vec<Observable> = (0..n).map(Observable::Coord).collect();
        for o in extra {
            if o.max_index() >= n {
                return Err(Error::Spec(format!(
                    "observable {o} references a state beyond x{n}"
                )));
            }
            if observables.contains(&o) {
                return Err(Error::Spec(format!("observable {o} listed twice")));
            }
            observables.push(o);
        }
        Ok(Dictionary { n, observables })
    }

    pub fn identity(n: usize) -> Self {
        Dictionary::new(n, vec![]).expect("identity dictionary is valid")
    }

    /// `Φ(x) = (x1, x2, sin x1)`.
    pub fn pendulum() -> Self {
        Dictionary::new(2, vec![Observable::Sin(0)]).expect("pendulum dictionary is valid")
    }

    /// Parses a comma-separated label such as `x1,x2,sin(x1)`.
    pub fn from_label(label: &str) -> Result<Self> {
        let obs = label
            .split(',')
            .map(Observable::parse)
            .collect::<Result<Vec<_>>>()?;
        let n = obs
            .iter()
            .take_while(|o| matches!(o, Observable::Coord(_)))
            .count();
        for (i, o) in obs.iter().take(n).enumerate() {
            if *o != Observable::Coord(i) {
                return Err(Error::Spec(format!(
                    "dictionary must start with x1..xn in order, got {label:?}"
                )));
            }
        }
        Dictionary::new(n, obs[n..].to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Lifted dimension `N`.
    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    pub fn observables(&self) -> &[Observable] {
        &self.observables
    }

    pub fn labels(&self) -> Vec<String> {
        self.observables.iter().map(|o| o.to_string()).collect()
    }

    pub fn label(&self) -> String {
        self.labels().join(",")
    }

    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension(format!(
                "state of length {} for a dictionary over {} states",
                x.len(),
                self.n
            )));
        }
        Ok(DVector::from_iterator(
            self.observables.len(),
            self.observables.iter().map(|o| o.eval(x)),
        ))
    }
}

impl Serialize for Dictionary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Dictionary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Dictionary::from_label(&s).map_err(serde::de::Error::custom)
    }
}

/// Snapshot pairs `(x_j, x_j⁺)` collected under one constant input.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBlock {
    pub input: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_next: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftedDataset {
    pub delta_t: f64,
    pub region: Region,
    pub seed: u64,
    /// Block 0 holds `ū = 0`, block `i` holds `ū = e_i`.
    pub blocks: Vec<DataBlock>,
    /// Samples redrawn after an integration failure.
    pub rejections: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    delta_t: f64,
    region: Region,
    seed: u64,
    inputs: Vec<Vec<f64>>,
}

impl LiftedDataset {
    pub fn n(&self) -> usize {
        self.region.dim()
    }

    pub fn m(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    /// Samples per block.
    pub fn d(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.x.len())
    }

    /// CSV with header `block,j,x1..xn,xp1..xpn`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.n();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["block".to_string(), "j".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xp{i}")));
        wr.write_record(&header)?;
        for (b, blk) in self.blocks.iter().enumerate() {
            for (j, (x, xp)) in blk.x.iter().zip(&blk.x_next).enumerate() {
                let mut rec = vec![b.to_string(), j.to_string()];
                rec.extend(x.iter().chain(xp).map(|v| format!("{v:e}")));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DatasetSidecar {
            delta_t: self.delta_t,
            region: self.region.clone(),
            seed: self.seed,
            inputs: self.blocks.iter().map(|b| b.input.clone()).collect(),
        })?)
    }

    pub fn read<R1: Read, R2: Read>(csv_reader: R1, sidecar: R2) -> Result<Self> {
        let side: DatasetSidecar = serde_json::from_reader(sidecar)?;
        let n = side.region.dim();
        let mut blocks: Vec<DataBlock> = side
            .inputs
            .iter()
            .map(|u| DataBlock {
                input: u.clone(),
                x: vec![],
                x_next: vec![],
            })
            .collect();
        let mut rd = csv::Reader::from_reader(csv_reader);
        if rd.headers()?.len() != 2 + 2 * n {
            return Err(Error::Parse(format!(
                "dataset CSV has {} columns, expected {}",
                rd.headers()?.len(),
                2 + 2 * n
            )));
        }
        for rec in rd.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("dataset field {:?}: {e}", &rec[k])))
            };
            let b: usize = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("block index {:?}: {e}", &rec[0])))?;
            let blk = blocks
                .get_mut(b)
                .ok_or_else(|| Error::Parse(format!("block {b} not declared in sidecar")))?;
            blk.x
                .push((0..n).map(|k| num(2 + k)).collect::<Result<_>>()?);
            blk.x_next
                .push((0..n).map(|k| num(2 + n + k)).collect::<Result<_>>()?);
        }
        let ds = LiftedDataset {
            delta_t: side.delta_t,
            region: side.region,
            seed: side.seed,
            blocks,
            rejections: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.blocks.len() < 2 {
            return Err(Error::Collection(
                "dataset needs the zero-input block and one block per input".into(),
            ));
        }
        let m = self.m();
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.x.len() != d || blk.x_next.len() != d {
                return Err(Error::Collection(format!(
                    "block {b} has a different sample count"
                )));
            }
            if blk.input.len() != m {
                return Err(Error::Collection(format!(
                    "block {b} input has wrong length"
                )));
            }
            if blk.x.iter().chain(&blk.x_next).any(|v| v.len() != self.n()) {
                return Err(Error::Collection(format!(
                    "block {b} has states of the wrong length"
                )));
            }
        }
        Ok(())
    }
}

/// Standard inputs `{0, e_1, …, e_m}`.
pub fn constant_inputs(m: usize) -> Vec<Vec<f64>> {
    (0..=m)
        .map(|b| {
            let mut u = vec![0.0; m];
            if b > 0 {
                u[b - 1] = 1.0;
            }
            u
        })
        .collect()
}

/// Per-sample generator, independent of scheduling order.
fn sample_rng(seed: u64, block: usize, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((block as u64) << 40) | j as u64);
    rng
}

/// One accepted pair `(x, x⁺)` and the number of rejected draws before it.
type Sample = (Vec<f64>, Vec<f64>, usize);

/// Draws `d` uniform states per constant input and flows each for `delta_t`.
pub fn collect(
    system: &System,
    region: &Region,
    d: usize,
    delta_t: f64,
    seed: u64,
    substeps: usize,
) -> Result<LiftedDataset> {
    if d == 0 {
        return Err(Error::Spec("d must be at least 1".into()));
    }
    if !(delta_t > 0.0) {
        return Err(Error::Spec(format!(
            "delta_t must be positive, got {delta_t}"
        )));
    }
    if region.dim() != system.n() {
        return Err(Error::Dimension(format!(
            "region has {} dimensions, system has {} states",
            region.dim(),
            system.n()
        )));
    }
    let max_rejections = 10 * d;
    let inputs = constant_inputs(system.m());
    let mut blocks = Vec::with_capacity(inputs.len());
    let mut rejections = 0usize;
    for (b, u) in inputs.iter().enumerate() {
        let samples: Vec<Result<Sample>> = (0..d)
            .into_par_iter()
            .map(|j| {
                let mut rng = sample_rng(seed, b, j);
                let mut rejected = 0;
                loop {
                    let x = region.sample(&mut rng);
                    match system.advance(&x, u, delta_t, substeps) {
                        Ok(xp) => return Ok((x, xp.as_slice().to_vec(), rejected)),
                        Err(_) => {
                            rejected += 1;
                            if rejected > max_rejections {
                                return Err(Error::Collection(format!(
                                    "more than {max_rejections} rejected samples"
                                )));
                            }
                        }
                    }
                }
            })
            .collect();
        let mut blk = DataBlock {
            input: u.clone(),
            x: Vec::with_capacity(d),
            x_next: Vec::with_capacity(d),
        };
        for s in samples {
            let (x, xp, rej) = s?;
            rejections += rej;
            blk.x.push(x);
            blk.x_next.push(xp);
        }
        if rejections > max_rejections {
            return Err(Error::Collection(format!(
                "{rejections} rejected samples exceed the limit of {max_rejections}"
            )));
        }
        blocks.push(blk);
    }
    Ok(LiftedDataset {
        delta_t,
        region: region.clone(),
        seed,
        blocks,
        rejections,
    })
}

/// Fitted lifted bilinear model `z⁺ = A z + B0 u + B̃ (u ⊗ z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub a: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub btilde: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub delta_t: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurrogateJson {
    n: usize,
    #[serde(rename = "N")]
    big_n: usize,
    m: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B0")]
    b0: Vec<Vec<f64>>,
    #[serde(rename = "Btilde")]
    btilde: Vec<Vec<f64>>,
    delta_t: f64,
    dictionary_label: String,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Surrogate {
    /// Builds a model from known matrices, checking shapes.
    pub fn new(
        a: DMatrix<f64>,
        b0: DMatrix<f64>,
        btilde: DMatrix<f64>,
        dictionary: Dictionary,
        delta_t: f64,
    ) -> Result<Self> {
        let big_n = dictionary.len();
        let m = b0.ncols();
        if a.shape() != (big_n, big_n)
            || b0.nrows() != big_n
            || btilde.shape() != (big_n, m * big_n)
            || m == 0
        {
            return Err(Error::Dimension(format!(
                "surrogate shapes A {:?}, B0 {:?}, Btilde {:?} inconsistent with N = {big_n}",
                a.shape(),
                b0.shape(),
                btilde.shape()
            )));
        }
        Ok(Surrogate {
            a,
            b0,
            btilde,
            dictionary,
            delta_t,
        })
    }

    pub fn n(&self) -> usize {
        self.dictionary.n()
    }

    pub fn big_n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b0.ncols()
    }

    /// `B̃_i`, the block multiplying `u_i z`.
    pub fn btilde_block(&self, i: usize) -> DMatrix<f64> {
        let n = self.big_n();
        self.btilde.columns(i * n, n).into_owned()
    }

    pub fn predict_lifted(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.big_n();
        if z.len() != n || u.len() != self.m() {
            return Err(Error::Dimension(format!(
                "lifted state/input of length {}/{} for N={n}, m={}",
                z.len(),
                u.len(),
                self.m()
            )));
        }
        let mut out = &self.a * z;
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                out += self.b0.column(i) * ui;
                out += self.btilde.columns(i * n, n) * z * ui;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        let z = self.dictionary.lift(x)?;
        self.predict_lifted(&z, &DVector::from_column_slice(u))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SurrogateJson {
            n: self.n(),
            big_n: self.big_n(),
            m: self.m(),
            a: matrix_rows(&self.a),
            b0: matrix_rows(&self.b0),
            btilde: matrix_rows(&self.btilde),
            delta_t: self.delta_t,
            dictionary_label: self.dictionary.label(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: SurrogateJson = serde_json::from_str(s)?;
        let dictionary = Dictionary::from_label(&j.dictionary_label)?;
        if dictionary.n() != j.n || dictionary.len() != j.big_n {
            return Err(Error::Dimension(
                "surrogate dims disagree with its dictionary".into(),
            ));
        }
        Surrogate::new(
            matrix_from_rows(&j.a, j.big_n, j.big_n, "A")?,
            matrix_from_rows(&j.b0, j.big_n, j.m, "B0")?,
            matrix_from_rows(&j.btilde, j.big_n, j.m * j.big_n, "Btilde")?,
            dictionary,
            j.delta_t,
        )
    }
}

/// Minimum-norm least-squares solution of `W X ≈ Y` (columns are samples),
/// with the numerical rank of `X`.
fn min_norm_regression(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = x.transpose().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let wt = svd
        .solve(&y.transpose(), eps)
        .map_err(|e| Error::Structure(format!("least squares failed: {e}")))?;
    Ok((wt.transpose(), rank))
}

/// Diagnostics from [`edmd_fit_report`].
#[derive(Clone, Debug)]
pub struct EdmdFit {
    pub surrogate: Surrogate,
    /// Numerical rank of each block's regressor.
    pub ranks: Vec<usize>,
    /// Regressor column count each rank is compared against.
    pub full_ranks: Vec<usize>,
    /// Raw `B_i` regression matrices.
    pub raw_b: Vec<DMatrix<f64>>,
}

impl EdmdFit {
    pub fn rank_deficient(&self) -> bool {
        self.ranks.iter().zip(&self.full_ranks).any(|(r, f)| r < f)
    }
}

fn lifted_columns(dict: &Dictionary, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = xs
        .iter()
        .map(|x| dict.lift(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

pub fn edmd_fit_report(data: &LiftedDataset, dict: &Dictionary) -> Result<EdmdFit> {
    data.validate()?;
    if dict.n() != data.n() {
        return Err(Error::Dimension(format!(
            "dictionary over {} states, dataset over {}",
            dict.n(),
            data.n()
        )));
    }
    let big_n = dict.len();
    let d = data.d();
    if d < big_n {
        return Err(Error::Spec(format!(
            "need at least N = {big_n} samples per block, got {d}"
        )));
    }
    let m = data.m();
    let blk0 = &data.blocks[0];
    let (a, rank0) = min_norm_regression(
        &lifted_columns(dict, &blk0.x)?,
        &lifted_columns(dict, &blk0.x_next)?,
    )?;
    let mut ranks = vec![rank0];
    let mut full_ranks = vec![big_n];
    let mut b0 = DMatrix::zeros(big_n, m);
    let mut btilde = DMatrix::zeros(big_n, m * big_n);
    let mut raw_b = Vec::with_capacity(m);
    for i in 0..m {
        let blk = &data.blocks[i + 1];
        let phi = lifted_columns(dict, &blk.x)?;
        let reg = phi.insert_row(0, 1.0);
        let (w, rank) = min_norm_regression(&reg, &lifted_columns(dict, &blk.x_next)?)?;
        ranks.push(rank);
        full_ranks.push(big_n + 1);
        b0.set_column(i, &w.column(0));
        let bi = w.columns(1, big_n).into_owned();
        btilde.columns_mut(i * big_n, big_n).copy_from(&(&bi - &a));
        raw_b.push(bi);
    }
    let fit = EdmdFit {
        surrogate: Surrogate::new(a, b0, btilde, dict.clone(), data.delta_t)?,
        ranks,
        full_ranks,
        raw_b,
    };
    if fit.rank_deficient() {
        log::warn!(
            "rank-deficient regression (ranks {:?} of {:?}); returned the minimum-norm solution",
            fit.ranks,
            fit.full_ranks
        );
    }
    Ok(fit)
}

/// Least-squares surrogate; rank deficiency is logged, not fatal.
pub fn edmd_fit(data: &LiftedDataset, dict: &Dictionary) -> Result<Surrogate> {
    edmd_fit_report(data, dict).map(|f| f.surrogate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundProvenance {
    UserSupplied,
    Empirical {
        validation_count: usize,
        safety_factor: f64,
    },
}

/// Constants of `‖r‖ ≤ c_x ‖Φ(x)‖ + c_u ‖u‖`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBound {
    pub c_x: f64,
    pub c_u: f64,
    pub provenance: BoundProvenance,
    /// Set when the fit found (numerically) zero residuals.
    #[serde(default)]
    pub degenerate: bool,
}

impl ResidualBound {
    pub fn fixed(c_x: f64, c_u: f64) -> Result<Self> {
        if !(c_x > 0.0 && c_u > 0.0 && c_x.is_finite() && c_u.is_finite()) {
            return Err(Error::Spec(format!(
                "bound constants must be positive, got ({c_x}, {c_u})"
            )));
        }
        Ok(ResidualBound {
            c_x,
            c_u,
            provenance: BoundProvenance::UserSupplied,
            degenerate: false,
        })
    }

    pub fn covers(&self, z_norm: f64, u_norm: f64, r_norm: f64) -> bool {
        r_norm <= self.c_x * z_norm + self.c_u * u_norm
    }
}

/// Validation residual `(‖Φ(x_j)‖, ‖u_j‖, ‖r_j‖)` triples.
pub fn residual_samples(
    model: &Surrogate,
    validation: &LiftedDataset,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    for blk in &validation.blocks {
        let u = DVector::from_column_slice(&blk.input);
        for (x, xp) in blk.x.iter().zip(&blk.x_next) {
            let z = model.dictionary.lift(x)?;
            let r = model.dictionary.lift(xp)? - model.predict_lifted(&z, &u)?;
            out.push((z.norm(), u.norm(), r.norm()));
        }
    }
    Ok(out)
}

/// Weights of the `w_x c_x + w_u c_u` objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundWeights {
    pub w_x: f64,
    pub w_u: f64,
}

impl Default for BoundWeights {
    fn default() -> Self {
        BoundWeights { w_x: 1.0, w_u: 1.0 }
    }
}

/// Residuals below this relative level count as zero.
const ZERO_RESIDUAL: f64 = 1e-12;

/// Smallest weighted `(c_x, c_u)` covering every sample, via a linear program.
pub fn fit_bound_lp(samples: &[(f64, f64, f64)], weights: BoundWeights) -> Result<(f64, f64)> {
    let k = samples.len();
    let mut problem = ConicProblem {
        objective: vec![Triplet(0, 0, weights.w_x), Triplet(0, 1, weights.w_u)],
        a: Vec::with_capacity(3 * k),
        b: Vec::with_capacity(k),
        cones: vec![Cone::Nonneg(2 + k)],
    };
    // a_j c_x + b_j c_u − s_j = r_j with s_j ≥ 0
    for (j, &(a, b, r)) in samples.iter().enumerate() {
        problem.a.push(Triplet(j, 0, a));
        problem.a.push(Triplet(j, 1, b));
        problem.a.push(Triplet(j, 2 + j, -1.0));
        problem.b.push(r);
    }
    let report = sdp::solve(&problem, 1e-10)?;
    let x = report
        .primal
        .filter(|_| report.status.has_solution())
        .ok_or_else(|| Error::NoSolution(report.status.to_string()))?;
    let (mut cx, mut cu) = (x[0].max(0.0), x[1].max(0.0));
    // interior-point solutions sit slightly inside; restore exact coverage
    let mut bump: f64 = 1.0;
    for &(a, b, r) in samples {
        let cover = cx * a + cu * b;
        if r > cover {
            if cover > 0.0 {
                bump = bump.max(r / cover);
            } else if a > 0.0 {
                cx = cx.max(r / a);
            } else {
                cu = cu.max(r / b);
            }
        }
    }
    cx *= bump;
    cu *= bump;
    Ok((cx, cu))
}

/// Empirical `(c_x, c_u)` from held-out data, multiplied by `safety`.
/// The validation set must be disjoint from the training data.
pub fn estimate_residual_bound(
    model: &Surrogate,
    validation: &LiftedDataset,
    safety: f64,
    weights: BoundWeights,
) -> Result<ResidualBound> {
    if !(safety >= 1.0) {
        return Err(Error::Spec(format!(
            "safety factor must be >= 1, got {safety}"
        )));
    }
    if !(weights.w_x > 0.0 && weights.w_u > 0.0) {
        return Err(Error::Spec("bound weights must be positive".into()));
    }
    let samples = residual_samples(model, validation)?;
    if samples.len() < 10 {
        return Err(Error::Spec(format!(
            "need at least 10 validation samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().all(|s| s.0 == 0.0) {
        return Err(Error::DegenerateBound(
            "all validation lifted states are zero; c_x undetermined".into(),
        ));
    }
    if samples
        .iter()
        .any(|s| s.0 == 0.0 && s.1 == 0.0 && s.2 > 0.0)
    {
        return Err(Error::DegenerateBound(
            "nonzero residual at z = 0, u = 0 cannot be covered".into(),
        ));
    }
    let scale = samples.iter().map(|s| s.0.max(s.1)).fold(0.0, f64::max);
    let degenerate = samples
        .iter()
        .all(|s| s.2 <= ZERO_RESIDUAL * scale.max(1.0));
    let (cx, cu) = if degenerate {
        (0.0, 0.0)
    } else {
        fit_bound_lp(&samples, weights)?
    };
    if degenerate {
        log::warn!("validation residuals are zero; the bound is degenerate");
    }
    Ok(ResidualBound {
        c_x: cx * safety,
        c_u: cu * safety,
        provenance: BoundProvenance::Empirical {
            validation_count: samples.len(),
            safety_factor: safety,
        },
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{building_zone, pendulum, BuildingParams, PendulumParams};
    use std::f64::consts::PI;

    #[test]
    fn lift_examples() {
        let d = Dictionary::pendulum();
        assert_eq!(d.lift(&[0.0, 0.0]).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
        let z = d.lift(&[PI / 2.0, 1.0]).unwrap();
        assert_eq!(z[0], PI / 2.0);
        assert_eq!(z[1], 1.0);
        assert!((z[2] - 1.0).abs() < 1e-15);
        assert_eq!(
            Dictionary::identity(3)
                .lift(&[1.0, 2.0, 3.0])
                .unwrap()
                .as_slice(),
            &[1.0, 2.0, 3.0]
        );
        assert!(matches!(d.lift(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn label_round_trip() {
        let d = Dictionary::new(
            2,
            vec![
                Observable::Sin(0),
                Observable::CosMinusOne(1),
                Observable::Square(0),
                Observable::Product(0, 1),
            ],
        )
        .unwrap();
        assert_eq!(d.label(), "x1,x2,sin(x1),cos(x2)-1,x1^2,x1*x2");
        assert_eq!(Dictionary::from_label(&d.label()).unwrap(), d);
        assert!(Dictionary::from_label("x2,x1").is_err());
        assert!(Dictionary::new(1, vec![Observable::Sin(1)]).is_err());
    }

    #[test]
    fn collect_shapes_and_determinism() {
        let sys = System::Continuous(pendulum(PendulumParams::default()));
        let region = Region::symmetric(2, PI).unwrap();
        let a = collect(&sys, &region, 200, 0.01, 7, 20).unwrap();
        assert_eq!(a.blocks.len(), 2);
        assert!(a.blocks.iter().all(|b| b.x.len() == 200));
        assert!(a
            .blocks
            .iter()
            .flat_map(|b| &b.x)
            .all(|x| region.contains(x)));
        let b = collect(&sys, &region, 200, 0.01, 7, 20).unwrap();
        assert_eq!(a, b);
        let c = collect(&sys, &region, 200, 0.01, 8, 20).unwrap();
        assert_ne!(a, c);

        let one = System::Discrete(building_zone(BuildingParams::default()));
        let r1 = Region::symmetric(1, 5.0).unwrap();
        let ds = collect(&one, &r1, 1, 1.0, 0, 1).unwrap();
        assert_eq!(ds.d(), 1);
        assert!(collect(&one, &r1, 0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let sys = System::Continuous(pendulum(PendulumParams::default()));
        let region = Region::symmetric(2, PI).unwrap();
        let ds = collect(&sys, &region, 15, 0.01, 3, 20).unwrap();
        let mut csv_buf = Vec::new();
        ds.write_csv(&mut csv_buf).unwrap();
        let header = String::from_utf8(csv_buf.clone()).unwrap();
        assert!(header.starts_with("block,j,x1,x2,xp1,xp2\n"));
        let back =
            LiftedDataset::read(&csv_buf[..], ds.sidecar_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back.blocks, ds.blocks);
        assert_eq!(back.delta_t, ds.delta_t);
    }

    #[test]
    fn building_fit_is_exact() {
        let sys = System::Discrete(building_zone(BuildingParams::default()));
        let region = Region::symmetric(1, 5.0).unwrap();
        let ds = collect(&sys, &region, 20, 1.0, 11, 1).unwrap();
        let model = edmd_fit(&ds, &Dictionary::identity(1)).unwrap();
        assert!((model.a[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((model.b0[(0, 0)] + 0.5).abs() < 1e-10);
        assert!((model.btilde[(0, 0)] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn predict_examples() {
        let m = Surrogate::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -0.5),
            DMatrix::from_element(1, 1, -0.5),
            Dictionary::identity(1),
            1.0,
        )
        .unwrap();
        assert_eq!(m.predict(&[2.0], &[1.0]).unwrap()[0], 0.5);
        assert_eq!(m.predict(&[0.0], &[3.0]).unwrap()[0], -1.5);
        assert_eq!(m.predict(&[2.0], &[0.0]).unwrap()[0], 2.0);
        assert!(m.predict(&[2.0], &[0.0, 1.0]).is_err());
        let back = Surrogate::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn too_few_samples_rejected() {
        let sys = System::Continuous(pendulum(PendulumParams::default()));
        let region = Region::symmetric(2, PI).unwrap();
        let ds = collect(&sys, &region, 2, 0.01, 3, 20).unwrap();
        assert!(matches!(
            edmd_fit(&ds, &Dictionary::pendulum()),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn synthetic_bound_recovers_constant() {
        // ‖r_j‖ = 0.01 ‖z_j‖ with zero input
        let samples: Vec<(f64, f64, f64)> = (1..=20)
            .map(|j| (j as f64 * 0.3, 0.0, 0.003 * j as f64))
            .collect();
        let (cx, cu) = fit_bound_lp(&samples, BoundWeights::default()).unwrap();
        assert!((cx - 0.01).abs() < 1e-8, "{cx}");
        assert!(cu.abs() < 1e-8);
        for (a, b, r) in samples {
            assert!(r <= cx * a + cu * b);
        }
    }
}
