use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::dense::GRID_INIT_BOUND;
use crate::grid::{check_domain, CellCorners};
use crate::nn::ParamTensor;
use crate::{Error, Result};

pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Spatial hash of an integer vertex, computed in wrapping u32 arithmetic:
/// `(x * 1) ^ (y * 2654435761) ^ (z * 805459861)` reduced mod `2^log2_table`.
#[inline]
pub fn spatial_hash(v: [usize; 3], log2_table: u32) -> usize {
    let h = (v[0] as u32).wrapping_mul(HASH_PRIMES[0])
        ^ (v[1] as u32).wrapping_mul(HASH_PRIMES[1])
        ^ (v[2] as u32).wrapping_mul(HASH_PRIMES[2]);
    (h & ((1u32 << log2_table) - 1)) as usize
}

/// Multiresolution hash-grid encoder. Level `l` has resolution
/// `N_l = floor(N_min * b^l)` cells per axis with `b = (N_max / N_min)^(1/(L-1))`;
/// levels whose `(N_l + 1)^3` vertices fit the table are indexed directly.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    n_bounds: (usize, usize),
    resolutions: Vec<usize>,
    log2_table: u32,
    features: usize,
    pub(crate) tables: Vec<ParamTensor>,
}

pub fn level_resolutions(levels: usize, n_min: usize, n_max: usize) -> Result<Vec<usize>> {
    if levels == 0 || n_min == 0 {
        return Err(Error::InvalidParam("hash grid needs >= 1 level and N_min >= 1".into()));
    }
    if levels == 1 {
        return Ok(vec![n_min]);
    }
    let growth = (n_max as f64 / n_min as f64).powf(1.0 / (levels - 1) as f64);
    let res: Vec<usize> = (0..levels)
        .map(|l| (n_min as f64 * growth.powi(l as i32) + 1e-9).floor() as usize)
        .collect();
    if res.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam(format!(
            "hash grid resolutions {res:?} are not strictly increasing"
        )));
    }
    Ok(res)
}

impl HashGrid {
    pub fn new<R: Rng + ?Sized>(
        levels: usize,
        n_min: usize,
        n_max: usize,
        log2_table: u32,
        features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=24).contains(&log2_table) || features == 0 {
            return Err(Error::InvalidParam(format!(
                "hash table 2^{log2_table} x {features} out of range"
            )));
        }
        let resolutions = level_resolutions(levels, n_min, n_max)?;
        let size = 1usize << log2_table;
        let tables = resolutions
            .iter()
            .map(|_| ParamTensor::uniform(&[size, features], GRID_INIT_BOUND, rng))
            .collect();
        Ok(Self {
            n_bounds: (n_min, n_max),
            resolutions,
            log2_table,
            features,
            tables,
        })
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Configured `(N_min, N_max)`.
    pub fn resolution_bounds(&self) -> (usize, usize) {
        self.n_bounds
    }

    pub fn log2_table(&self) -> u32 {
        self.log2_table
    }

    pub fn output_width(&self) -> usize {
        self.levels() * self.features
    }

    pub fn table_mut(&mut self, level: usize) -> &mut [f64] {
        &mut self.tables[level].values
    }

    /// Table slot of integer vertex `v` on `level`.
    pub fn slot(&self, level: usize, v: [usize; 3]) -> usize {
        let n1 = self.resolutions[level] + 1;
        if n1.pow(3) <= 1usize << self.log2_table {
            v[0] + n1 * (v[1] + n1 * v[2])
        } else {
            spatial_hash(v, self.log2_table)
        }
    }

    fn corners(&self, level: usize, p: [f64; 3]) -> CellCorners {
        let n = self.resolutions[level];
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let pos = (p[a] + 1.0) * 0.5 * n as f64;
            let i = (pos.floor() as usize).min(n - 1);
            base[a] = i;
            t[a] = pos - i as f64;
        }
        let mut out = CellCorners {
            index: [0; 8],
            weight: [0.0; 8],
        };
        for c in 0..8 {
            let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if d[a] == 1 { t[a] } else { 1.0 - t[a] };
            }
            out.index[c] = self.slot(level, [base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
            out.weight[c] = w;
        }
        out
    }

    /// Returns features and a cache laid out as `row * levels + level`.
    pub fn encode(&self, coords: &[[f64; 3]]) -> Result<(Array2<f64>, Vec<CellCorners>)> {
        let (f, levels) = (self.features, self.levels());
        let mut out = Array2::zeros((coords.len(), self.output_width()));
        let mut cache = Vec::with_capacity(coords.len() * levels);
        for (b, &p) in coords.iter().enumerate() {
            check_domain(p)?;
            let mut row = out.row_mut(b);
            let row = row.as_slice_mut().expect("contiguous row");
            for l in 0..levels {
                let c = self.corners(l, p);
                let table = &self.tables[l].values;
                let dst = &mut row[l * f..(l + 1) * f];
                for (&idx, &w) in c.index.iter().zip(&c.weight) {
                    for (o, v) in dst.iter_mut().zip(&table[idx * f..(idx + 1) * f]) {
                        *o += w * v;
                    }
                }
                cache.push(c);
            }
        }
        Ok((out, cache))
    }

    pub fn backward_into(&self, cache: &[CellCorners], dfeat: ArrayView2<f64>, grads: &mut [Vec<f64>]) {
        let (f, levels) = (self.features, self.levels());
        for (b, drow) in dfeat.rows().into_iter().enumerate() {
            for l in 0..levels {
                let c = &cache[b * levels + l];
                let d = drow.slice(ndarray::s![l * f..(l + 1) * f]);
                let g = &mut grads[l];
                for (&idx, &w) in c.index.iter().zip(&c.weight) {
                    for (gv, dv) in g[idx * f..(idx + 1) * f].iter_mut().zip(d.iter()) {
                        *gv += w * dv;
                    }
                }
            }
        }
    }
}
