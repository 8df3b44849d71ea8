//! Learned primal and dual estimators.
//!
//! Both estimators see the window through the prior residuals
//! `r_k = y_k − C_k Φ_k x̂*` (with `Φ_k` the state transition from the window
//! start), followed by the upper triangle of the arrival weight and, for
//! time-varying systems, the window's `A` and `C` entries. Shifting the prior
//! by `δ` and the measurements by `C_k Φ_k δ` shifts the MHE solution's
//! initial state by `δ` and leaves the noise estimates and multipliers alone,
//! so the primal network predicts `x̂_{t−M} − x̂*` rather than `x̂_{t−M}`.
//! Inputs and outputs are standardized with statistics of the training set.

pub mod dataset;
pub mod network;
pub mod train;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mhe::MheInstance;
use crate::{Error, Result};
pub use dataset::{gen_dataset, Dataset};
pub use network::MlpParams;
pub use train::{Standardizer, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Primal,
    Dual,
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetKind::Primal => "primal",
            TargetKind::Dual => "dual",
        })
    }
}

/// Prior residuals of the window, left-padded to `horizon` by repeating the
/// earliest one.
pub fn prior_residuals(inst: &MheInstance) -> Vec<DVector<f64>> {
    let iv = &inst.iv;
    let mut x = iv.prior_estimate.clone();
    let mut out = Vec::with_capacity(iv.horizon);
    for k in 0..iv.window {
        out.push(&iv.window_measurements[k] - &iv.window_measurement_maps[k] * &x);
        x = &iv.window_dynamics[k] * &x;
    }
    let pad = iv.horizon - iv.window;
    let mut padded = vec![out[0].clone(); pad];
    padded.extend(out);
    padded
}

pub fn input_dim(n: usize, m: usize, horizon: usize, lti: bool) -> usize {
    let base = horizon * m + n * (n + 1) / 2;
    if lti {
        base
    } else {
        base + horizon * (n * n + m * n)
    }
}

pub fn input_names(n: usize, m: usize, horizon: usize, lti: bool) -> Vec<String> {
    let mut names: Vec<String> = (0..horizon).flat_map(|k| (0..m).map(move |j| format!("r_{k}_{j}"))).collect();
    for i in 0..n {
        for j in i..n {
            names.push(format!("P_{i}{j}"));
        }
    }
    if !lti {
        for k in 0..horizon {
            names.extend((0..n * n).map(|e| format!("A_{k}_{e}")));
        }
        for k in 0..horizon {
            names.extend((0..m * n).map(|e| format!("C_{k}_{e}")));
        }
    }
    names
}

/// Network input for an instance.
pub fn network_input(inst: &MheInstance) -> DVector<f64> {
    let iv = &inst.iv;
    let n = iv.n();
    let mut v = Vec::with_capacity(input_dim(n, iv.m(), iv.horizon, iv.lti));
    for r in prior_residuals(inst) {
        v.extend(r.iter());
    }
    for i in 0..n {
        for j in i..n {
            v.push(iv.prior_weight[(i, j)]);
        }
    }
    if !iv.lti {
        let pad = iv.horizon - iv.window;
        let at = |k: usize| k.saturating_sub(pad);
        for k in 0..iv.horizon {
            v.extend(iv.window_dynamics[at(k)].transpose().iter());
        }
        for k in 0..iv.horizon {
            v.extend(iv.window_measurement_maps[at(k)].transpose().iter());
        }
    }
    DVector::from_vec(v)
}

/// `(x̂_{t−M} − x̂*, ξ̂_0, …, ξ̂_{M−1})`.
pub fn primal_target(inst: &MheInstance, x0: &DVector<f64>, xi: &[DVector<f64>]) -> DVector<f64> {
    let mut v: Vec<f64> = (x0 - &inst.iv.prior_estimate).iter().copied().collect();
    for x in xi {
        v.extend(x.iter());
    }
    DVector::from_vec(v)
}

pub fn dual_target(mu: &[DVector<f64>]) -> DVector<f64> {
    crate::dual::flatten(mu)
}

/// A trained estimator: normalization, network and output semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub kind: TargetKind,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub lti: bool,
    pub input: Standardizer,
    pub output: Standardizer,
    pub net: MlpParams,
}

impl Surrogate {
    /// Fits normalization on `data`, then trains a fresh network.
    pub fn fit(data: &Dataset, n: usize, m: usize, horizon: usize, cfg: &TrainConfig) -> Result<(Self, TrainReport)> {
        if data.is_empty() {
            return Err(Error::Domain("empty dataset".into()));
        }
        let lti = data.feature_names.len() == input_dim(n, m, horizon, true);
        let input = Standardizer::fit(&data.inputs)?;
        let output = Standardizer::fit(&data.targets)?;
        let xs: Vec<_> = data.inputs.iter().map(|x| input.apply(x)).collect();
        let ys: Vec<_> = data.targets.iter().map(|y| output.apply(y)).collect();
        let mut dims = vec![input.dim()];
        dims.extend(&cfg.hidden);
        dims.push(output.dim());
        let mut net = MlpParams::init(&dims, cfg.seed)?;
        let report = train::train(&mut net, &xs, &ys, cfg)?;
        Ok((Self { kind: data.kind, n, m, horizon, lti, input, output, net }, report))
    }

    /// Raw prediction in target coordinates.
    pub fn predict(&self, inst: &MheInstance) -> Result<DVector<f64>> {
        if inst.n() != self.n || inst.m() != self.m || inst.iv.horizon != self.horizon {
            return Err(Error::DimensionMismatch("instance does not match the estimator".into()));
        }
        let x = self.input.apply(&network_input(inst));
        Ok(self.output.invert(&self.net.forward(&x)?))
    }

    /// Primal guess `(x̂_{t−M}, ξ̂)` for a full-window instance.
    pub fn primal_guess(&self, inst: &MheInstance) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        if self.kind != TargetKind::Primal || inst.window() != self.horizon {
            return Err(Error::Domain("primal guesses need a primal estimator and a full window".into()));
        }
        let out = self.predict(inst)?;
        let n = self.n;
        let x0 = &inst.iv.prior_estimate + out.rows(0, n);
        let xi = (0..self.horizon).map(|k| out.rows(n + k * n, n).into_owned()).collect();
        Ok((x0, xi))
    }

    /// Dual guess `μ` for a full-window instance.
    pub fn dual_guess(&self, inst: &MheInstance) -> Result<Vec<DVector<f64>>> {
        if self.kind != TargetKind::Dual || inst.window() != self.horizon {
            return Err(Error::Domain("dual guesses need a dual estimator and a full window".into()));
        }
        Ok(crate::dual::unflatten(&self.predict(inst)?, self.m))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = WeightPayload::from(self);
        let checksum = payload.checksum()?;
        let file = WeightFile { format: FORMAT.into(), version: VERSION, checksum, payload };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: WeightFile =
            serde_json::from_str(&text).map_err(|e| Error::BadWeights(format!("{}: {e}", path.display())))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::BadWeights(format!("unsupported format {} v{}", file.format, file.version)));
        }
        if file.payload.checksum()? != file.checksum {
            return Err(Error::BadWeights("checksum mismatch".into()));
        }
        file.payload.into_surrogate()
    }
}

/// Trained primal and dual estimators with their training curves.
pub struct TrainedPair {
    pub primal: Surrogate,
    pub dual: Surrogate,
    pub primal_report: TrainReport,
    pub dual_report: TrainReport,
}

/// Fits both estimators on the same solved samples (which must carry their
/// dual optima). The dual network is seeded one past the primal one.
pub fn fit_pair(samples: &[dataset::Sample], cfg: &TrainConfig) -> Result<TrainedPair> {
    let first = samples.first().ok_or_else(|| Error::Domain("no samples".into()))?;
    let (n, m, h) = (first.inst.n(), first.inst.m(), first.inst.iv.horizon);
    let primal_data = Dataset::from_samples(samples, TargetKind::Primal)?;
    let dual_data = Dataset::from_samples(samples, TargetKind::Dual)?;
    let (primal, primal_report) = Surrogate::fit(&primal_data, n, m, h, cfg)?;
    let dual_cfg = TrainConfig { seed: cfg.seed.wrapping_add(1), ..cfg.clone() };
    let (dual, dual_report) = Surrogate::fit(&dual_data, n, m, h, &dual_cfg)?;
    Ok(TrainedPair { primal, dual, primal_report, dual_report })
}

const FORMAT: &str = "pdmhe-surrogate";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightFile {
    format: String,
    version: u32,
    /// SHA-256 of the compact JSON encoding of `payload`.
    checksum: String,
    payload: WeightPayload,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightPayload {
    kind: TargetKind,
    n: usize,
    m: usize,
    horizon: usize,
    lti: bool,
    layer_dims: Vec<usize>,
    input: Standardizer,
    output: Standardizer,
    layers: Vec<LayerFile>,
}

impl WeightPayload {
    fn checksum(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn into_surrogate(self) -> Result<Surrogate> {
        let net = MlpParams {
            layer_dims: self.layer_dims,
            weights: self
                .layers
                .iter()
                .map(|l| {
                    if l.weights.len() != l.rows * l.cols {
                        return Err(Error::BadWeights("layer size does not match its shape".into()));
                    }
                    Ok(DMatrix::from_row_slice(l.rows, l.cols, &l.weights))
                })
                .collect::<Result<_>>()?,
            biases: self.layers.iter().map(|l| DVector::from_vec(l.bias.clone())).collect(),
        };
        net.validate()?;
        if self.input.dim() != net.input_dim() || self.output.dim() != net.output_dim() {
            return Err(Error::BadWeights("normalization does not match the network".into()));
        }
        Ok(Surrogate {
            kind: self.kind,
            n: self.n,
            m: self.m,
            horizon: self.horizon,
            lti: self.lti,
            input: self.input,
            output: self.output,
            net,
        })
    }
}

impl From<&Surrogate> for WeightPayload {
    fn from(s: &Surrogate) -> Self {
        Self {
            kind: s.kind,
            n: s.n,
            m: s.m,
            horizon: s.horizon,
            lti: s.lti,
            layer_dims: s.net.layer_dims.clone(),
            input: s.input.clone(),
            output: s.output.clone(),
            layers: s
                .net
                .weights
                .iter()
                .zip(&s.net.biases)
                .map(|(w, b)| LayerFile {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.transpose().iter().copied().collect(),
                    bias: b.iter().copied().collect(),
                })
                .collect(),
        }
    }
}
