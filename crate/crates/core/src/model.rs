//! Stochastic linear system, noise constraint sets, truncated-Gaussian
//! sampling, trajectory simulation and the information vector.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{check_spd, symmetrize};
use crate::{Error, Result};

/// Consecutive rejections after which the sampler reports a near-empty box.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 10_000;

/// A closed convex set with a Euclidean projection.
///
/// Only axis-aligned boxes ship; the solvers talk to constraint sets through
/// this trait so other shapes can be slotted in.
pub trait ConvexSet {
    fn dim(&self) -> usize;
    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool;
    fn project(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Axis-aligned box `{x : lower <= x <= upper}`; infinite bounds allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            let (lo, hi) = (lower[i], upper[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
            {
                return Err(Error::Domain(format!("empty box in coordinate {i}: [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
        }
    }

    /// The single point `{0}`.
    pub fn origin(dim: usize) -> Self {
        Self { lower: DVector::zeros(dim), upper: DVector::zeros(dim) }
    }

    /// `{x >= 0}`.
    pub fn nonnegative(dim: usize) -> Self {
        Self { lower: DVector::zeros(dim), upper: DVector::from_element(dim, f64::INFINITY) }
    }

    /// `{x <= 0}`.
    pub fn nonpositive(dim: usize) -> Self {
        Self { lower: DVector::from_element(dim, f64::NEG_INFINITY), upper: DVector::zeros(dim) }
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY) && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    pub fn contains_origin(&self) -> bool {
        self.lower.iter().all(|v| *v <= 0.0) && self.upper.iter().all(|v| *v >= 0.0)
    }

    /// Image of the box under `diag(scale)`; every scale must be positive.
    pub fn scaled(&self, scale: &DVector<f64>) -> BoxSet {
        BoxSet {
            lower: self.lower.component_mul(scale),
            upper: self.upper.component_mul(scale),
        }
    }

    /// Largest per-coordinate distance outside the box.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| (self.lower[i] - v).max(v - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

impl ConvexSet for BoxSet {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && self.violation(x) <= tol
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }
}

/// A matrix that is either constant or indexed by time.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSeq {
    Constant(DMatrix<f64>),
    Varying(Vec<DMatrix<f64>>),
}

impl MatrixSeq {
    /// Matrix at time `t`; a varying sequence holds its last entry past its end.
    pub fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            MatrixSeq::Constant(m) => m,
            MatrixSeq::Varying(v) => &v[t.min(v.len() - 1)],
        }
    }

    fn all(&self) -> Box<dyn Iterator<Item = &DMatrix<f64>> + '_> {
        match self {
            MatrixSeq::Constant(m) => Box::new(std::iter::once(m)),
            MatrixSeq::Varying(v) => Box::new(v.iter()),
        }
    }
}

/// `x_{t+1} = A_t x_t + ξ_t`, `y_t = C_t x_t + ζ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    n: usize,
    m: usize,
    dynamics: MatrixSeq,
    measurement: MatrixSeq,
}

impl SystemModel {
    pub fn lti(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        Self::new(MatrixSeq::Constant(a), MatrixSeq::Constant(c))
    }

    pub fn new(dynamics: MatrixSeq, measurement: MatrixSeq) -> Result<Self> {
        if let MatrixSeq::Varying(v) = &dynamics {
            if v.is_empty() {
                return Err(Error::Domain("empty dynamics sequence".into()));
            }
        }
        if let MatrixSeq::Varying(v) = &measurement {
            if v.is_empty() {
                return Err(Error::Domain("empty measurement sequence".into()));
            }
        }
        let n = dynamics.at(0).nrows();
        let m = measurement.at(0).nrows();
        if n == 0 || m == 0 {
            return Err(Error::Domain("state and measurement dimensions must be positive".into()));
        }
        for a in dynamics.all() {
            if a.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!("A is {:?}, expected ({n}, {n})", a.shape())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("A has non-finite entries".into()));
            }
        }
        for c in measurement.all() {
            if c.shape() != (m, n) {
                return Err(Error::DimensionMismatch(format!("C is {:?}, expected ({m}, {n})", c.shape())));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("C has non-finite entries".into()));
            }
        }
        Ok(Self { n, m, dynamics, measurement })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        self.dynamics.at(t)
    }

    pub fn c(&self, t: usize) -> &DMatrix<f64> {
        self.measurement.at(t)
    }

    pub fn is_lti(&self) -> bool {
        matches!((&self.dynamics, &self.measurement), (MatrixSeq::Constant(_), MatrixSeq::Constant(_)))
    }
}

/// Noise covariances and the constraint boxes of the truncated Gaussians.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    xi_set: BoxSet,
    zeta_set: BoxSet,
}

impl NoiseSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, xi_set: BoxSet, zeta_set: BoxSet) -> Result<Self> {
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        if xi_set.dim() != q.nrows() || zeta_set.dim() != r.nrows() {
            return Err(Error::DimensionMismatch("noise boxes do not match Q/R".into()));
        }
        Ok(Self { q, r, xi_set, zeta_set })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn xi_set(&self) -> &BoxSet {
        &self.xi_set
    }

    pub fn zeta_set(&self) -> &BoxSet {
        &self.zeta_set
    }
}

/// Sampler for `N(0, cov)` conditioned on a box.
///
/// Coordinates pinned by the box (`lower == upper`) are fixed and the rest are
/// drawn from the Gaussian conditional on them; the free part is then
/// accepted or rejected against its bounds.
#[derive(Clone, Debug)]
pub struct TruncatedGaussian {
    dim: usize,
    bounds: BoxSet,
    pinned: Vec<usize>,
    free: Vec<usize>,
    cond_mean: DVector<f64>,
    cond_chol: DMatrix<f64>,
}

impl TruncatedGaussian {
    pub fn new(cov: &DMatrix<f64>, bounds: &BoxSet) -> Result<Self> {
        check_spd(cov, "covariance")?;
        let dim = cov.nrows();
        if bounds.dim() != dim {
            return Err(Error::DimensionMismatch("box and covariance sizes differ".into()));
        }
        let (pinned, free): (Vec<usize>, Vec<usize>) =
            (0..dim).partition(|&i| bounds.lower()[i] == bounds.upper()[i]);
        let sub = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])])
        };
        let s_ff = sub(&free, &free);
        let (cond_mean, cond_cov) = if pinned.is_empty() {
            (DVector::zeros(free.len()), s_ff)
        } else {
            let s_fp = sub(&free, &pinned);
            let s_pp = sub(&pinned, &pinned);
            let v_p = DVector::from_iterator(pinned.len(), pinned.iter().map(|&i| bounds.lower()[i]));
            let s_pp_inv = crate::linalg::spd_inverse(&s_pp)?;
            let gain = &s_fp * s_pp_inv;
            (&gain * v_p, symmetrize(&(s_ff - &gain * s_fp.transpose())))
        };
        let cond_chol = if free.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            cond_cov
                .cholesky()
                .ok_or_else(|| Error::NotSpd("conditional covariance".into()))?
                .l()
        };
        Ok(Self { dim, bounds: bounds.clone(), pinned, free, cond_mean, cond_chol })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        for &i in &self.pinned {
            out[i] = self.bounds.lower()[i];
        }
        if self.free.is_empty() {
            return Ok(out);
        }
        let k = self.free.len();
        for _ in 0..MAX_CONSECUTIVE_REJECTIONS {
            let e = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &self.cond_mean + &self.cond_chol * e;
            let inside = self
                .free
                .iter()
                .enumerate()
                .all(|(j, &i)| z[j] >= self.bounds.lower()[i] && z[j] <= self.bounds.upper()[i]);
            if inside {
                for (j, &i) in self.free.iter().enumerate() {
                    out[i] = z[j];
                }
                return Ok(out);
            }
        }
        Err(Error::AcceptanceTooLow(MAX_CONSECUTIVE_REJECTIONS))
    }
}

/// One draw from `N(0, cov)` restricted to `bounds`, by rejection.
pub fn sample_truncated_gaussian<R: Rng + ?Sized>(
    cov: &DMatrix<f64>,
    bounds: &BoxSet,
    rng: &mut R,
) -> Result<DVector<f64>> {
    TruncatedGaussian::new(cov, bounds)?.sample(rng)
}

/// A simulated run of the system.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `x_0 .. x_T`.
    pub states: Vec<DVector<f64>>,
    /// `y_0 .. y_{T-1}`.
    pub measurements: Vec<DVector<f64>>,
    pub process_noise: Vec<DVector<f64>>,
    pub measurement_noise: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

/// Rolls the system forward `steps` times from `x0` with noise drawn from a
/// ChaCha8 stream seeded by `seed`.
pub fn simulate_trajectory(
    model: &SystemModel,
    noise: &NoiseSpec,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Domain("trajectory needs at least one step".into()));
    }
    if x0.len() != model.n() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state must be a finite n-vector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi_dist = TruncatedGaussian::new(noise.q(), noise.xi_set())?;
    let zeta_dist = TruncatedGaussian::new(noise.r(), noise.zeta_set())?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut process_noise = Vec::with_capacity(steps);
    let mut measurement_noise = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for t in 0..steps {
        let zeta = zeta_dist.sample(&mut rng)?;
        let xi = xi_dist.sample(&mut rng)?;
        measurements.push(model.c(t) * &x + &zeta);
        let next = model.a(t) * &x + &xi;
        states.push(x);
        process_noise.push(xi);
        measurement_noise.push(zeta);
        x = next;
    }
    states.push(x);
    Ok(Trajectory { states, measurements, process_noise, measurement_noise, seed })
}

/// Everything that defines one windowed estimation problem.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoVector {
    /// `y_{t-M} .. y_{t-1}`.
    pub window_measurements: Vec<DVector<f64>>,
    pub window_dynamics: Vec<DMatrix<f64>>,
    pub window_measurement_maps: Vec<DMatrix<f64>>,
    /// Arrival weight `P_{t-M}`.
    pub prior_weight: DMatrix<f64>,
    /// Prior estimate `x̂*_{t-M}`.
    pub prior_estimate: DVector<f64>,
    pub t: usize,
    /// Effective window length.
    pub window: usize,
    /// Configured horizon cap; fixes the encoded feature size.
    pub horizon: usize,
    /// Whether the system matrices are time-invariant.
    pub lti: bool,
}

impl InfoVector {
    /// Absolute time of the window's first sample.
    pub fn start(&self) -> usize {
        self.t - self.window
    }

    pub fn n(&self) -> usize {
        self.prior_estimate.len()
    }

    pub fn m(&self) -> usize {
        self.window_measurements[0].len()
    }
}

/// Window start for time `t` under horizon cap `horizon`: `max(t - horizon, 0)`.
pub fn window_start(t: usize, horizon: usize) -> usize {
    t.saturating_sub(horizon)
}

/// Slices the measurement window ending at `t` (exclusive). The prior
/// estimate and weight must belong to time `window_start(t, horizon)`.
pub fn build_info_vector(
    measurements: &[DVector<f64>],
    model: &SystemModel,
    prior_estimate: &DVector<f64>,
    prior_weight: &DMatrix<f64>,
    t: usize,
    horizon: usize,
) -> Result<InfoVector> {
    if t == 0 {
        return Err(Error::WindowUnderflow);
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1".into()));
    }
    if measurements.len() < t {
        return Err(Error::DimensionMismatch(format!(
            "need measurements up to index {}, have {}",
            t - 1,
            measurements.len()
        )));
    }
    if prior_estimate.len() != model.n() || prior_weight.shape() != (model.n(), model.n()) {
        return Err(Error::DimensionMismatch("prior does not match state dimension".into()));
    }
    check_spd(prior_weight, "prior weight")?;
    let start = window_start(t, horizon);
    let window = t - start;
    Ok(InfoVector {
        window_measurements: measurements[start..t].to_vec(),
        window_dynamics: (start..t).map(|i| model.a(i).clone()).collect(),
        window_measurement_maps: (start..t).map(|i| model.c(i).clone()).collect(),
        prior_weight: prior_weight.clone(),
        prior_estimate: prior_estimate.clone(),
        t,
        window,
        horizon,
        lti: model.is_lti(),
    })
}

/// Fixed-size encoding of an information vector.
///
/// Layout: `horizon * m` measurement entries (short windows are left-padded by
/// repeating the earliest measurement), then the prior estimate. For
/// time-varying systems the padded window's `A` and `C` entries and the arrival
/// weight follow, all row-major.
pub fn encode_features(iv: &InfoVector) -> DVector<f64> {
    let (n, m) = (iv.n(), iv.m());
    let pad = iv.horizon - iv.window;
    let mut out = Vec::with_capacity(feature_dim(n, m, iv.horizon, iv.lti));
    let padded = |k: usize| k.saturating_sub(pad);
    for k in 0..iv.horizon {
        out.extend(iv.window_measurements[padded(k)].iter());
    }
    out.extend(iv.prior_estimate.iter());
    if !iv.lti {
        for k in 0..iv.horizon {
            out.extend(iv.window_dynamics[padded(k)].transpose().iter());
        }
        for k in 0..iv.horizon {
            out.extend(iv.window_measurement_maps[padded(k)].transpose().iter());
        }
        out.extend(iv.prior_weight.transpose().iter());
    }
    DVector::from_vec(out)
}

pub fn feature_dim(n: usize, m: usize, horizon: usize, lti: bool) -> usize {
    let base = horizon * m + n;
    if lti {
        base
    } else {
        base + horizon * (n * n + m * n) + n * n
    }
}

/// The two-state example: constant-velocity dynamics, position measurement,
/// nonnegative process noise and nonpositive measurement noise.
pub fn example_system() -> (SystemModel, NoiseSpec) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01]));
    let r = DMatrix::from_element(1, 1, 1.0);
    let model = SystemModel::lti(a, c).expect("example model is valid");
    let noise = NoiseSpec::new(q, r, BoxSet::nonnegative(2), BoxSet::nonpositive(1))
        .expect("example noise is valid");
    (model, noise)
}
