//! Dense feed-forward network: ReLU hidden layers, identity output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Parameter gradient with the same layout as [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::DimensionMismatch(format!("bad layer sizes {dims:?}")));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layer_dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: dims[1..].iter().map(|&d| DVector::zeros(d)).collect(),
        })
    }

    /// Weights uniform in `±√(6 / fan_in)`, biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let limit = (6.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Checks conformability and finiteness.
    pub fn validate(&self) -> Result<()> {
        check_dims(&self.layer_dims)?;
        if self.weights.len() != self.layer_dims.len() - 1 || self.biases.len() != self.weights.len() {
            return Err(Error::BadWeights("layer count does not match the dimensions".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != (self.layer_dims[l + 1], self.layer_dims[l]) || b.len() != self.layer_dims[l + 1] {
                return Err(Error::BadWeights(format!("layer {l} has the wrong shape")));
            }
        }
        if self.weights.iter().flat_map(|w| w.iter()).chain(self.biases.iter().flat_map(|b| b.iter())).any(|v| !v.is_finite())
        {
            return Err(Error::BadWeights("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.num_layers() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            z += b;
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass on a column batch, keeping every layer's output.
    fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().expect("nonempty");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared-error loss `(1/B) Σ ‖f(x) − y‖²` over the columns of
    /// `inputs` / `targets`.
    pub fn loss(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
        self.check_batch(inputs, targets)?;
        let out = self.forward_batch(inputs).pop().expect("nonempty");
        Ok((out - targets).norm_squared() / inputs.ncols() as f64)
    }

    fn check_batch(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() == 0 || inputs.ncols() != targets.ncols() {
            return Err(Error::DimensionMismatch("batch is empty or ragged".into()));
        }
        if inputs.nrows() != self.input_dim() || targets.nrows() != self.output_dim() {
            return Err(Error::DimensionMismatch("batch rows do not match the network".into()));
        }
        Ok(())
    }

    /// Loss and its gradient by backpropagation.
    pub fn loss_and_grad(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Gradient)> {
        self.check_batch(inputs, targets)?;
        let batch = inputs.ncols() as f64;
        let acts = self.forward_batch(inputs);
        let resid = acts.last().expect("nonempty") - targets;
        let loss = resid.norm_squared() / batch;
        let mut delta = resid * (2.0 / batch);
        let layers = self.num_layers();
        let mut gw = vec![DMatrix::zeros(0, 0); layers];
        let mut gb = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                // ReLU derivative: the stored activation is positive exactly where it passed
                back.zip_apply(&acts[l], |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((loss, Gradient { weights: gw, biases: gb }))
    }

    /// All parameters, layer by layer, weights (column-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch("flat parameter vector has the wrong length".into()));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..p.num_layers() {
            let w = &p.weights[l];
            let mut z = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut s = p.biases[l][i];
                for j in 0..w.ncols() {
                    s += w[(i, j)] * a[j];
                }
                z[i] = if l + 1 < p.num_layers() { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let y = p.forward(&DVector::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut p = MlpParams::zeros(&[3, 3]).unwrap();
        p.weights[0] = DMatrix::identity(3, 3);
        let x = DVector::from_vec(vec![0.5, 0.0, 2.0]);
        assert_eq!(p.forward(&x).unwrap(), x);
        assert!(matches!(p.forward(&DVector::zeros(2)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn forward_matches_naive_loops() {
        let p = MlpParams::init(&[5, 8, 7, 3], 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = p.forward(&DVector::from_vec(x.clone())).unwrap();
            for (a, b) in fast.iter().zip(naive_forward(&p, &x)) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn linear_layer_gradient_is_closed_form() {
        let mut p = MlpParams::init(&[3, 2], 5).unwrap();
        p.biases[0] = DVector::zeros(2);
        let x = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 2.0]);
        let y = DMatrix::from_column_slice(2, 1, &[0.3, -1.0]);
        let (_, g) = p.loss_and_grad(&x, &y).unwrap();
        let expect = (&p.weights[0] * &x - &y) * x.transpose() * 2.0;
        assert!((&g.weights[0] - expect).amax() < 1e-14);
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut p = MlpParams::init(&[4, 9, 7, 3], 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        p.biases.iter_mut().for_each(|b| b.apply(|v| *v = rng.random_range(-0.3..0.3)));
        let x = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.5..1.5));
        let y = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let grad = p.loss_and_grad(&x, &y).unwrap().1.flatten();
        let flat = p.flatten();
        let h = 1e-6;
        let mut probe = p.clone();
        for _ in 0..50 {
            let i = rng.random_range(0..flat.len());
            let mut shifted = flat.clone();
            shifted[i] = flat[i] + h;
            probe.unflatten(&shifted).unwrap();
            let up = probe.loss(&x, &y).unwrap();
            shifted[i] = flat[i] - h;
            probe.unflatten(&shifted).unwrap();
            let down = probe.loss(&x, &y).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-4 || (fd - grad[i]).abs() <= 1e-9, "coordinate {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let p = MlpParams::init(&[2, 6, 3], 9).unwrap();
        let x = DMatrix::from_column_slice(2, 2, &[0.1, 0.2, -0.4, 1.0]);
        let y = DMatrix::from_columns(&[
            p.forward(&x.column(0).into_owned()).unwrap(),
            p.forward(&x.column(1).into_owned()).unwrap(),
        ]);
        let (loss, g) = p.loss_and_grad(&x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let p = MlpParams::init(&[2, 3, 1], 1).unwrap();
        let mut q = MlpParams::zeros(&[2, 3, 1]).unwrap();
        q.unflatten(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.validate().is_ok());
        q.biases[1][0] = f64::NAN;
        assert!(matches!(q.validate(), Err(Error::BadWeights(_))));
    }
}
