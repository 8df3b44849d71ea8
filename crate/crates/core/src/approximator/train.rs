//! Mini-batch training with Adam (or momentum SGD) and a cosine learning-rate
//! schedule.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::MlpParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Number of training instances to generate.
    pub samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
            validation_fraction: 0.1,
            seed: 7,
            samples: 20_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("epochs, batch_size and samples must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be positive and momentum in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cosine-decayed rate at `step` of `total`.
    pub fn rate_at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Per-coordinate affine normalization `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits to the rows; coordinates with (near) zero spread keep unit scale.
    pub fn fit(rows: &[DVector<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Domain("cannot fit a standardizer to no data".into()))?;
        let dim = first.len();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / count;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2) / count;
            }
        }
        let std = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s))
    }

    pub fn invert(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,validation_loss")?;
        for (e, tl) in self.train_loss.iter().enumerate() {
            let vl = self.validation_loss.get(e).copied().unwrap_or(f64::NAN);
            writeln!(out, "{e},{tl:e},{vl:e}")?;
        }
        Ok(())
    }
}

fn columns(rows: &[DVector<f64>], idx: &[usize]) -> DMatrix<f64> {
    let dim = rows[idx[0]].len();
    let mut m = DMatrix::zeros(dim, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        m.set_column(j, &rows[i]);
    }
    m
}

/// Trains `params` in place on already-normalized `(inputs, targets)`.
///
/// The last `validation_fraction` of the rows is held out; the split is by
/// position, so callers shuffle beforehand if the order carries structure.
pub fn train(
    params: &mut MlpParams,
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::DimensionMismatch("inputs and targets differ in count or are empty".into()));
    }
    let n_val = ((inputs.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_train = inputs.len() - n_val;
    if n_train == 0 {
        return Err(Error::Domain("validation split leaves no training rows".into()));
    }
    let val_idx: Vec<usize> = (n_train..inputs.len()).collect();
    let (val_x, val_y) = if n_val > 0 {
        (Some(columns(inputs, &val_idx)), Some(columns(targets, &val_idx)))
    } else {
        (None, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let batches_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut flat = params.flatten();
    let mut m1 = vec![0.0; flat.len()];
    let mut m2 = vec![0.0; flat.len()];
    let mut step = 0usize;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grad) = params.loss_and_grad(&columns(inputs, chunk), &columns(targets, chunk))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            epoch_loss += loss * chunk.len() as f64;
            let g = grad.flatten();
            let lr = cfg.rate_at(step, total_steps);
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for ((p, v), gi) in flat.iter_mut().zip(m1.iter_mut()).zip(&g) {
                        *v = cfg.momentum * *v - lr * gi;
                        *p += *v;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2): (f64, f64) = (cfg.momentum, 0.999);
                    let c1 = 1.0 - b1.powi(step as i32);
                    let c2 = 1.0 - b2.powi(step as i32);
                    for (((p, a), b), gi) in flat.iter_mut().zip(m1.iter_mut()).zip(m2.iter_mut()).zip(&g) {
                        *a = b1 * *a + (1.0 - b1) * gi;
                        *b = b2 * *b + (1.0 - b2) * gi * gi;
                        *p -= lr * (*a / c1) / ((*b / c2).sqrt() + 1e-8);
                    }
                }
            }
            params.unflatten(&flat)?;
        }
        report.train_loss.push(epoch_loss / n_train as f64);
        if let (Some(x), Some(y)) = (&val_x, &val_y) {
            let vl = params.loss(x, y)?;
            if !vl.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            report.validation_loss.push(vl);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn standardizer_round_trip_and_constant_columns() {
        let rows = vec![DVector::from_vec(vec![1.0, 5.0]), DVector::from_vec(vec![3.0, 5.0])];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let v = DVector::from_vec(vec![0.3, -2.0]);
        assert!((s.invert(&s.apply(&v)) - v).amax() < 1e-15);
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        assert_eq!(cfg.rate_at(0, 10), 0.1);
        assert!((cfg.rate_at(5, 10) - 0.05).abs() < 1e-15);
        assert!(cfg.rate_at(10, 10).abs() < 1e-15);
    }

    #[test]
    fn memorizes_a_repeated_sample() {
        let mut p = MlpParams::init(&[3, 16, 16, 2], 1).unwrap();
        let x = vec![DVector::from_vec(vec![0.2, -0.7, 1.0]); 32];
        let y = vec![DVector::from_vec(vec![1.5, -0.5]); 32];
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 8,
            learning_rate: 1e-2,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let rep = train(&mut p, &x, &y, &cfg).unwrap();
        assert!(*rep.train_loss.last().unwrap() <= 1e-6, "{:?}", rep.train_loss.last());
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<_> = (0..40).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let y: Vec<_> = x.iter().map(|v| DVector::from_element(1, v[0] - 2.0 * v[1])).collect();
        let cfg = TrainConfig { epochs: 5, batch_size: 7, ..Default::default() };
        let mut a = MlpParams::init(&[2, 8, 1], 4).unwrap();
        let mut b = a.clone();
        assert_eq!(train(&mut a, &x, &y, &cfg).unwrap(), train(&mut b, &x, &y, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_targets_diverge() {
        let mut p = MlpParams::init(&[1, 4, 1], 0).unwrap();
        let x = vec![DVector::from_element(1, 1.0); 4];
        let y = vec![DVector::from_element(1, f64::INFINITY); 4];
        let cfg = TrainConfig { epochs: 2, validation_fraction: 0.0, ..Default::default() };
        assert!(matches!(train(&mut p, &x, &y, &cfg), Err(Error::Diverged(0))));
    }
}
