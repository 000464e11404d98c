//! Small dense-network engine: parameter tensors, MLPs with hand-written
//! backward passes, Adam, cosine learning-rate decay and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod mlp;
mod schedule;

pub use adam::Adam;
pub use gradcheck::finite_difference_check;
pub use mlp::{Activation, DecoderSpec, Mlp, MlpCache, Mode};
pub use schedule::CosineSchedule;

use rand::Rng;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grads: vec![0.0; n],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            for v in &mut t.values {
                *v = rng.random_range(-bound..bound);
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns an ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Zeroed gradient buffers aligned with [`Parameterized::params`].
    fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Adds externally computed gradients into the tensors' accumulators.
    fn accumulate_grads(&mut self, bufs: &[Vec<f64>]) {
        for (p, b) in self.params_mut().into_iter().zip(bufs) {
            for (g, d) in p.grads.iter_mut().zip(b) {
                *g += d;
            }
        }
    }

    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grads.iter().copied())
            .collect()
    }

    /// Overwrites all parameter values from a flat slice in `params()` order.
    fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}
