use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::encoders::{EncodeCache, Encoder, EncoderSpec};
use crate::nn::{DecoderSpec, Mlp, Mode, ParamTensor, Parameterized};
use crate::{Error, Result};

/// A feature-grid network: one encoder shared by one or more independent
/// decoders, `f_i(x) = D_i(E(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Srn {
    pub encoder: Encoder,
    pub decoders: Vec<Mlp>,
}

impl Srn {
    pub fn new<R: Rng + ?Sized>(
        encoder: &EncoderSpec,
        decoder: &DecoderSpec,
        members: usize,
        outputs: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if members == 0 {
            return Err(Error::InvalidParam("at least one decoder is required".into()));
        }
        let encoder = Encoder::from_spec(encoder, rng)?;
        let mut dims = vec![encoder.output_width()];
        dims.extend(&decoder.hidden);
        dims.push(outputs);
        let decoders = (0..members)
            .map(|_| Mlp::new(&dims, decoder.activation, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { encoder, decoders })
    }

    pub fn from_parts(encoder: Encoder, decoders: Vec<Mlp>) -> Result<Self> {
        if decoders.is_empty() {
            return Err(Error::InvalidParam("at least one decoder is required".into()));
        }
        for d in &decoders {
            if d.input_dim() != encoder.output_width() {
                return Err(Error::Shape(format!(
                    "decoder input {} does not match encoder width {}",
                    d.input_dim(),
                    encoder.output_width()
                )));
            }
        }
        Ok(Self { encoder, decoders })
    }

    pub fn members(&self) -> usize {
        self.decoders.len()
    }

    pub fn outputs(&self) -> usize {
        self.decoders[0].output_dim()
    }

    pub fn encode(&self, coords: &[[f64; 3]]) -> Result<(Array2<f64>, EncodeCache)> {
        self.encoder.encode(coords)
    }

    /// Output `j` of every decoder in inference mode, as an `M x B` array.
    pub fn predict(&self, coords: &[[f64; 3]]) -> Result<Array2<f64>> {
        let (features, _) = self.encode(coords)?;
        self.predict_from_features(features.view())
    }

    pub fn predict_from_features(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.members(), features.nrows()));
        for (i, d) in self.decoders.iter().enumerate() {
            let y = d.predict(features)?;
            out.row_mut(i).assign(&y.column(0));
        }
        Ok(out)
    }

    /// Member predictions `M x B`. The encoder runs once; every decoder sees
    /// the same features. `Train` mode enables decoder dropout.
    pub fn predict_members<R: Rng + ?Sized>(
        &self,
        coords: &[[f64; 3]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let (features, _) = self.encode(coords)?;
        let mut out = Array2::zeros((self.members(), coords.len()));
        for (i, d) in self.decoders.iter().enumerate() {
            let (y, _) = d.forward(features.view(), mode, rng)?;
            out.row_mut(i).assign(&y.column(0));
        }
        Ok(out)
    }

    /// Full decoder outputs (all columns) of decoder 0, inference mode.
    pub fn head_outputs(&self, coords: &[[f64; 3]]) -> Result<Array2<f64>> {
        let (features, _) = self.encode(coords)?;
        self.decoders[0].predict(features.view())
    }
}

impl Parameterized for Srn {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut p = self.encoder.params();
        for d in &self.decoders {
            p.extend(d.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.encoder.params_mut();
        for d in &mut self.decoders {
            p.extend(d.params_mut());
        }
        p
    }
}
