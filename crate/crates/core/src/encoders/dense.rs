use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::grid::{cell_corners, check_domain, CellCorners};
use crate::nn::ParamTensor;
use crate::{Error, Result};

/// Learnable feature vectors on a vertex grid spanning `[-1, 1]^3`,
/// queried by trilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    resolution: [usize; 3],
    features: usize,
    pub(crate) table: ParamTensor,
}

pub const GRID_INIT_BOUND: f64 = 1e-4;

impl DenseGrid {
    pub fn new<R: Rng + ?Sized>(resolution: [usize; 3], features: usize, rng: &mut R) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) || features == 0 {
            return Err(Error::InvalidParam(format!(
                "dense grid {resolution:?} x {features} needs every side >= 2 and >= 1 feature"
            )));
        }
        let n: usize = resolution.iter().product();
        Ok(Self {
            resolution,
            features,
            table: ParamTensor::uniform(&[n, features], GRID_INIT_BOUND, rng),
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Feature vector stored at vertex `idx`.
    pub fn vertex_features_mut(&mut self, idx: usize) -> &mut [f64] {
        let f = self.features;
        &mut self.table.values[idx * f..(idx + 1) * f]
    }

    pub fn encode(&self, coords: &[[f64; 3]]) -> Result<(Array2<f64>, Vec<CellCorners>)> {
        let f = self.features;
        let mut out = Array2::zeros((coords.len(), f));
        let mut cache = Vec::with_capacity(coords.len());
        for (b, &p) in coords.iter().enumerate() {
            check_domain(p)?;
            let c = cell_corners(self.resolution, p);
            let mut row = out.row_mut(b);
            let row = row.as_slice_mut().expect("contiguous row");
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                let feat = &self.table.values[idx * f..(idx + 1) * f];
                for (o, v) in row.iter_mut().zip(feat) {
                    *o += w * v;
                }
            }
            cache.push(c);
        }
        Ok((out, cache))
    }

    /// Scatters feature gradients to the 8 corners of each sample.
    pub fn backward_into(&self, cache: &[CellCorners], dfeat: ArrayView2<f64>, grad: &mut [f64]) {
        let f = self.features;
        for (c, drow) in cache.iter().zip(dfeat.rows()) {
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                let g = &mut grad[idx * f..(idx + 1) * f];
                for (gv, d) in g.iter_mut().zip(drow.iter()) {
                    *gv += w * d;
                }
            }
        }
    }
}
