//! JSON configuration: the model file plus optional experiment, certification
//! and training sections.
//!
//! Matrices are row-major nested arrays. `null` entries in the box bounds
//! mean "unbounded". `P0` is either a matrix or the string `"stationary"`,
//! which selects the fixed point of the Riccati recursion started from the
//! identity.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::approximator::train::TrainConfig;
use crate::mhe::{riccati_update, stationary_arrival, ArrivalCost};
use crate::model::{BoxSet, NoiseSpec, SystemModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorWeightSpec {
    Matrix(Vec<Vec<f64>>),
    Named(String),
}

/// How the arrival weight evolves along a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalPolicy {
    /// `P_{t+1}` from the Riccati recursion.
    Recursive,
    /// `P_t = P0` for all `t`.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    /// First time step included in the ARMSE average.
    pub armse_from: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { steps: 100, runs: 200, seed: 0, armse_from: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub eps: f64,
    pub beta: f64,
    /// Share of `eps` and `beta` given to the primal branch.
    pub primal_share: f64,
    /// Levels used when no calibration result is supplied.
    pub delta_p: f64,
    pub delta_d: f64,
    pub delta_gap: f64,
    /// Size of the calibration set drawn after training.
    pub calibration_samples: usize,
    /// Calibrated levels are this multiple of the worst calibration error.
    pub margin: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            beta: 1e-6,
            primal_share: 0.5,
            delta_p: 0.5,
            delta_d: 0.5,
            delta_gap: 0.0,
            calibration_samples: 2000,
            margin: 1.5,
        }
    }
}

/// The file format. Unknown keys are rejected so typos surface as errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub xi_lower: Vec<Option<f64>>,
    pub xi_upper: Vec<Option<f64>>,
    pub zeta_lower: Vec<Option<f64>>,
    pub zeta_upper: Vec<Option<f64>>,
    #[serde(rename = "M_t")]
    pub horizon: usize,
    pub gamma: f64,
    #[serde(rename = "P0", default)]
    pub p0: Option<PriorWeightSpec>,
    pub x0_hat: Vec<f64>,
    /// True initial state of simulated runs; defaults to `x0_hat`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_arrival")]
    pub arrival: ArrivalPolicy,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_arrival() -> ArrivalPolicy {
    ArrivalPolicy::Recursive
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("{what} must be a nonempty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_row_iterator(nr, nc, rows.iter().flatten().copied()))
}

fn bounds(lower: &[Option<f64>], upper: &[Option<f64>], dim: usize, what: &str) -> Result<BoxSet> {
    if lower.len() != dim || upper.len() != dim {
        return Err(Error::Config(format!("{what} bounds need {dim} entries")));
    }
    let lo = DVector::from_iterator(dim, lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
    let hi = DVector::from_iterator(dim, upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
    BoxSet::new(lo, hi).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The two-state example with its default run parameters.
    pub fn example() -> Self {
        Self {
            a: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
            c: vec![vec![1.0, 0.0]],
            q: vec![vec![0.01, 0.0], vec![0.0, 0.01]],
            r: vec![vec![1.0]],
            xi_lower: vec![Some(0.0), Some(0.0)],
            xi_upper: vec![None, None],
            zeta_lower: vec![None],
            zeta_upper: vec![Some(0.0)],
            horizon: 10,
            gamma: 0.8,
            p0: Some(PriorWeightSpec::Matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]])),
            x0_hat: vec![0.0, 0.0],
            x0: None,
            arrival: ArrivalPolicy::Fixed,
            experiment: ExperimentConfig::default(),
            certify: CertifyConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Validates everything and precomputes the derived quantities.
    pub fn scenario(&self) -> Result<Scenario> {
        let a = matrix(&self.a, "A")?;
        let c = matrix(&self.c, "C")?;
        let q = matrix(&self.q, "Q")?;
        let r = matrix(&self.r, "R")?;
        let model = SystemModel::lti(a.clone(), c.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let (n, m) = (model.n(), model.m());
        let xi = bounds(&self.xi_lower, &self.xi_upper, n, "xi")?;
        let zeta = bounds(&self.zeta_lower, &self.zeta_upper, m, "zeta")?;
        let noise = NoiseSpec::new(q.clone(), r.clone(), xi, zeta).map_err(|e| Error::Config(e.to_string()))?;
        if self.horizon == 0 {
            return Err(Error::Config("M_t must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} outside [0, 1]", self.gamma)));
        }
        let p0 = match &self.p0 {
            None => DMatrix::identity(n, n),
            Some(PriorWeightSpec::Matrix(rows)) => matrix(rows, "P0")?,
            Some(PriorWeightSpec::Named(name)) if name == "stationary" => {
                stationary_arrival(&a, &c, &q, &r, &DMatrix::identity(n, n), 1e-13, 100_000)
                    .map_err(|e| Error::Config(format!("stationary P0: {e}")))?
            }
            Some(PriorWeightSpec::Named(other)) => {
                return Err(Error::Config(format!("unknown P0 keyword {other:?}")));
            }
        };
        crate::linalg::check_spd(&p0, "P0").map_err(|e| Error::Config(e.to_string()))?;
        if self.x0_hat.len() != n || self.x0.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Config(format!("initial state vectors need {n} entries")));
        }
        let e = &self.experiment;
        if e.steps == 0 || e.runs == 0 || e.armse_from >= e.steps {
            return Err(Error::Config("experiment needs T ≥ 1, runs ≥ 1 and armse_from < T".into()));
        }
        let x0_hat = DVector::from_vec(self.x0_hat.clone());
        let x0 = self.x0.clone().map_or_else(|| x0_hat.clone(), DVector::from_vec);
        let arrival = arrival_schedule(&model, &noise, &p0, self.arrival, e.steps)?;
        Ok(Scenario {
            model,
            noise,
            horizon: self.horizon,
            gamma: self.gamma,
            p0,
            x0_hat,
            x0,
            arrival,
            steps: e.steps,
        })
    }
}

/// `P_0 .. P_T` under the given policy.
pub fn arrival_schedule(
    model: &SystemModel,
    noise: &NoiseSpec,
    p0: &DMatrix<f64>,
    policy: ArrivalPolicy,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(p0.clone());
    for t in 0..steps {
        let next = match policy {
            ArrivalPolicy::Fixed => p0.clone(),
            ArrivalPolicy::Recursive => {
                let cur = ArrivalCost { p: out[t].clone(), t };
                riccati_update(&cur, model.a(t), model.c(t), noise.q(), noise.r())?.p
            }
        };
        out.push(next);
    }
    Ok(out)
}

/// A validated configuration with its derived quantities.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: SystemModel,
    pub noise: NoiseSpec,
    pub horizon: usize,
    pub gamma: f64,
    pub p0: DMatrix<f64>,
    pub x0_hat: DVector<f64>,
    pub x0: DVector<f64>,
    /// Arrival weight in force for a window starting at each time `0..=T`.
    pub arrival: Vec<DMatrix<f64>>,
    pub steps: usize,
}

impl Scenario {
    pub fn arrival_at(&self, t: usize) -> &DMatrix<f64> {
        &self.arrival[t.min(self.arrival.len() - 1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_through_json() {
        let cfg = Config::example();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = Config::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let sc = cfg.scenario().unwrap();
        assert_eq!(sc.arrival.len(), 101);
        assert!(sc.noise.xi_set().upper()[0].is_infinite());
    }

    #[test]
    fn minimal_model_file_uses_defaults() {
        let text = r#"{"A": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]],
            "xi_lower": [null], "xi_upper": [null], "zeta_lower": [null], "zeta_upper": [null],
            "M_t": 3, "gamma": 0.5, "x0_hat": [0.0]}"#;
        let cfg = Config::from_json(text).unwrap();
        let sc = cfg.scenario().unwrap();
        assert_eq!(sc.p0, DMatrix::identity(1, 1));
        // scalar Riccati from 1: 1 + 1 − 1/2
        assert!((sc.arrival[1][(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn shipped_file_is_the_example() {
        let text = include_str!("../../../configs/two_state.json");
        assert_eq!(Config::from_json(text).unwrap(), Config::example());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Config::from_json("{"), Err(Error::Config(_))));
        let mut cfg = Config::example();
        cfg.q = vec![vec![1.0, 0.0]];
        assert!(matches!(cfg.scenario(), Err(Error::Config(_))));
        let mut cfg = Config::example();
        cfg.p0 = Some(PriorWeightSpec::Named("steady".into()));
        assert!(matches!(cfg.scenario(), Err(Error::Config(_))));
        let text = serde_json::to_string(&Config::example()).unwrap().replace("\"gamma\"", "\"gama\"");
        assert!(matches!(Config::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn stationary_prior_is_a_fixed_point() {
        let mut cfg = Config::example();
        cfg.p0 = Some(PriorWeightSpec::Named("stationary".into()));
        cfg.arrival = ArrivalPolicy::Recursive;
        let sc = cfg.scenario().unwrap();
        assert!((&sc.arrival[100] - &sc.p0).norm() < 1e-10);
    }
}
