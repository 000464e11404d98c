use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamTensor, Parameterized};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x + sin^2(x)`
    Snake,
    Sine,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Snake => {
                let s = x.sin();
                x + s * s
            }
            Activation::Sine => x.sin(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Snake => 1.0 + (2.0 * x).sin(),
            Activation::Sine => x.cos(),
        }
    }
}

/// Hidden-layer layout of a decoder; input and output widths come from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: ParamTensor,
    bias: ParamTensor,
}

impl Dense {
    fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim(), self.in_dim()), &self.weight.values)
            .expect("weight shape")
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight_view().t());
        let b = ArrayView2::from_shape((1, self.out_dim()), &self.bias.values).expect("bias");
        z += &b;
        z
    }
}

/// Fully connected network with identity output and optional dropout after
/// every hidden activation (active only in [`Mode::Train`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    dropout: f64,
}

/// Intermediates retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.inputs[0].nrows()
    }
}

impl Mlp {
    /// `dims` lists every layer width, input first and output last.
    /// Weights use Glorot-uniform initialization and biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "MLP layer widths {dims:?} need at least two positive entries"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidParam(format!(
                "dropout probability {dropout} outside [0, 1)"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: ParamTensor::uniform(&[fan_out, fan_in], bound, rng),
                    bias: ParamTensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParam(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        self.dropout = p;
        Ok(())
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].bias.values
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass without dropout and without retaining intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = self.layers[0].affine(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(|v| self.activation.apply(v));
            h = layer.affine(h.view());
        }
        Ok(h)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(h.view());
            cache.inputs.push(h);
            if l == last {
                return Ok((z, cache));
            }
            let mut a = z.mapv(|v| self.activation.apply(v));
            let mask = if mode == Mode::Train && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale = 1.0 / keep;
                let m = Array2::from_shape_fn(a.dim(), |_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                });
                a *= &m;
                Some(m)
            } else {
                None
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns at the output layer")
    }

    fn check_cache(&self, cache: &MlpCache, dy: &ArrayView2<f64>) -> Result<()> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() + 1 != self.layers.len() {
            return Err(Error::Shape("cache was produced by a different network".into()));
        }
        if dy.nrows() != cache.batch() || dy.ncols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, forward produced {}x{}",
                dy.nrows(),
                dy.ncols(),
                cache.batch(),
                self.output_dim()
            )));
        }
        for (layer, input) in self.layers.iter().zip(&cache.inputs) {
            if input.ncols() != layer.in_dim() {
                return Err(Error::Shape("cache was produced by a different network".into()));
            }
        }
        Ok(())
    }

    /// Backpropagates `dy`, adding parameter gradients into `grads` (aligned
    /// with [`Parameterized::params`]) and returning the input gradient.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        dy: ArrayView2<f64>,
        grads: &mut [Vec<f64>],
    ) -> Result<Array2<f64>> {
        self.check_cache(cache, &dy)?;
        if grads.len() != 2 * self.layers.len() {
            return Err(Error::Shape("gradient buffer count mismatch".into()));
        }
        let mut g = dy.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l + 1 < self.layers.len() {
                if let Some(m) = &cache.masks[l] {
                    g *= m;
                }
                let act = self.activation;
                g.zip_mut_with(&cache.pre[l], |gv, &z| *gv *= act.derivative(z));
            }
            let (gw, gb) = grads[2 * l..2 * l + 2].split_at_mut(1);
            let mut dw = ArrayViewMut2::from_shape((layer.out_dim(), layer.in_dim()), &mut gw[0])
                .map_err(|e| Error::Shape(e.to_string()))?;
            general_mat_mul(1.0, &g.t(), &cache.inputs[l], 1.0, &mut dw);
            for (b, s) in gb[0].iter_mut().zip(g.sum_axis(Axis(0))) {
                *b += s;
            }
            g = g.dot(&layer.weight_view());
        }
        Ok(g)
    }

    /// Backpropagates `dy`, accumulating (+=) into this network's gradients.
    pub fn backward(&mut self, cache: &MlpCache, dy: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut bufs = self.grad_buffers();
        let dx = self.backward_into(cache, dy, &mut bufs)?;
        self.accumulate_grads(&bufs);
        Ok(dx)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
