//! Coordinate encoders mapping `[-1, 1]^3` to feature vectors.

mod dense;
mod fourier;
mod hash;

pub use dense::{DenseGrid, GRID_INIT_BOUND};
pub use fourier::FourierFeatures;
pub use hash::{level_resolutions, spatial_hash, HashGrid, HASH_PRIMES};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::CellCorners;
use crate::nn::{ParamTensor, Parameterized};
use crate::{Error, Result};

/// Serializable encoder description (config files and checkpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderSpec {
    Dense {
        resolution: [usize; 3],
        features: usize,
    },
    Hash {
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default = "default_n_min")]
        n_min: usize,
        #[serde(default = "default_n_max")]
        n_max: usize,
        #[serde(default = "default_log2_table")]
        log2_table: u32,
        #[serde(default = "default_hash_features")]
        features: usize,
    },
    /// Dense grid features followed by Fourier features.
    #[serde(rename = "dense+fourier")]
    DenseFourier {
        resolution: [usize; 3],
        features: usize,
        num_freqs: usize,
    },
}

fn default_levels() -> usize {
    4
}
fn default_n_min() -> usize {
    4
}
fn default_n_max() -> usize {
    32
}
fn default_log2_table() -> u32 {
    14
}
fn default_hash_features() -> usize {
    2
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Dense {
            resolution: [24, 24, 24],
            features: 8,
        }
    }
}

impl EncoderSpec {
    pub fn hash_default() -> Self {
        EncoderSpec::Hash {
            levels: default_levels(),
            n_min: default_n_min(),
            n_max: default_n_max(),
            log2_table: default_log2_table(),
            features: default_hash_features(),
        }
    }

    /// Declared width of the concatenated feature vector.
    pub fn output_width(&self) -> usize {
        match *self {
            EncoderSpec::Dense { features, .. } => features,
            EncoderSpec::Hash {
                levels, features, ..
            } => levels * features,
            EncoderSpec::DenseFourier {
                features,
                num_freqs,
                ..
            } => features + 6 * num_freqs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Dense(DenseGrid),
    Hash(HashGrid),
    DenseFourier {
        grid: DenseGrid,
        fourier: FourierFeatures,
    },
}

/// Per-sample interpolation state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    corners: Vec<CellCorners>,
}

impl Encoder {
    pub fn from_spec<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        Ok(match *spec {
            EncoderSpec::Dense {
                resolution,
                features,
            } => Encoder::Dense(DenseGrid::new(resolution, features, rng)?),
            EncoderSpec::Hash {
                levels,
                n_min,
                n_max,
                log2_table,
                features,
            } => Encoder::Hash(HashGrid::new(levels, n_min, n_max, log2_table, features, rng)?),
            EncoderSpec::DenseFourier {
                resolution,
                features,
                num_freqs,
            } => Encoder::DenseFourier {
                grid: DenseGrid::new(resolution, features, rng)?,
                fourier: FourierFeatures { num_freqs },
            },
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        match self {
            Encoder::Dense(g) => EncoderSpec::Dense {
                resolution: g.resolution(),
                features: g.features(),
            },
            Encoder::Hash(h) => {
                let (n_min, n_max) = h.resolution_bounds();
                EncoderSpec::Hash {
                    levels: h.levels(),
                    n_min,
                    n_max,
                    log2_table: h.log2_table(),
                    features: h.features(),
                }
            }
            Encoder::DenseFourier { grid, fourier } => EncoderSpec::DenseFourier {
                resolution: grid.resolution(),
                features: grid.features(),
                num_freqs: fourier.num_freqs,
            },
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Encoder::Dense(g) => g.features(),
            Encoder::Hash(h) => h.output_width(),
            Encoder::DenseFourier { grid, fourier } => grid.features() + fourier.output_width(),
        }
    }

    /// Encodes a batch of coordinates; rows of the result follow `coords`.
    pub fn encode(&self, coords: &[[f64; 3]]) -> Result<(Array2<f64>, EncodeCache)> {
        let (features, corners) = match self {
            Encoder::Dense(g) => g.encode(coords)?,
            Encoder::Hash(h) => h.encode(coords)?,
            Encoder::DenseFourier { grid, fourier } => {
                let (g, corners) = grid.encode(coords)?;
                let f = fourier.encode(coords);
                let cat = concatenate(Axis(1), &[g.view(), f.view()])
                    .map_err(|e| Error::Shape(e.to_string()))?;
                (cat, corners)
            }
        };
        if features.ncols() != self.spec().output_width() {
            return Err(Error::Shape(format!(
                "encoder produced {} columns, spec declares {}",
                features.ncols(),
                self.spec().output_width()
            )));
        }
        Ok((features, EncodeCache { corners }))
    }

    /// Adds parameter gradients for upstream feature gradients `dfeat` into
    /// `grads` (aligned with [`Parameterized::params`]).
    pub fn backward_into(&self, cache: &EncodeCache, dfeat: ArrayView2<f64>, grads: &mut [Vec<f64>]) {
        match self {
            Encoder::Dense(g) => g.backward_into(&cache.corners, dfeat, &mut grads[0]),
            Encoder::Hash(h) => h.backward_into(&cache.corners, dfeat, grads),
            Encoder::DenseFourier { grid, .. } => {
                let width = grid.features();
                let d = dfeat.slice(ndarray::s![.., ..width]);
                grid.backward_into(&cache.corners, d, &mut grads[0]);
            }
        }
    }

    pub fn backward(&mut self, cache: &EncodeCache, dfeat: ArrayView2<f64>) {
        let mut bufs = self.grad_buffers();
        self.backward_into(cache, dfeat, &mut bufs);
        self.accumulate_grads(&bufs);
    }
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&ParamTensor> {
        match self {
            Encoder::Dense(g) | Encoder::DenseFourier { grid: g, .. } => vec![&g.table],
            Encoder::Hash(h) => h.tables.iter().collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        match self {
            Encoder::Dense(g) | Encoder::DenseFourier { grid: g, .. } => vec![&mut g.table],
            Encoder::Hash(h) => h.tables.iter_mut().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::vertex_coord;
    use crate::nn::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_coords(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    r.random_range(-1.0..=1.0),
                    r.random_range(-1.0..=1.0),
                    r.random_range(-1.0..=1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn constant_grid_encodes_constant() {
        let mut g = DenseGrid::new([3, 4, 5], 2, &mut rng()).unwrap();
        for i in 0..60 {
            g.vertex_features_mut(i).copy_from_slice(&[0.7, -1.25]);
        }
        let (out, _) = g.encode(&random_coords(50, 1)).unwrap();
        for row in out.rows() {
            assert!((row[0] - 0.7).abs() < 1e-14);
            assert!((row[1] + 1.25).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_feature_field_is_exact() {
        let res = [5, 6, 7];
        let mut g = DenseGrid::new(res, 1, &mut rng()).unwrap();
        for z in 0..7 {
            for y in 0..6 {
                for x in 0..5 {
                    let idx = crate::grid::linear_index(res, x, y, z);
                    let p = [vertex_coord(x, 5), vertex_coord(y, 6), vertex_coord(z, 7)];
                    g.vertex_features_mut(idx)[0] = 2.0 * p[0] - p[1] + 0.5 * p[2];
                }
            }
        }
        let coords = random_coords(1000, 2);
        let (out, _) = g.encode(&coords).unwrap();
        for (p, v) in coords.iter().zip(out.column(0)) {
            assert!((v - (2.0 * p[0] - p[1] + 0.5 * p[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_center_backward_splits_evenly() {
        let g = DenseGrid::new([3, 3, 3], 1, &mut rng()).unwrap();
        let center = [-0.5, -0.5, -0.5];
        let (_, cache) = g.encode(&[center]).unwrap();
        let mut grad = vec![0.0; 27];
        g.backward_into(&cache, ndarray::array![[1.0]].view(), &mut grad);
        let touched: Vec<f64> = grad.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(touched, vec![0.125; 8]);
    }

    #[test]
    fn backward_conserves_gradient_mass() {
        let g = DenseGrid::new([4, 4, 4], 3, &mut rng()).unwrap();
        let coords = random_coords(20, 3);
        let (_, cache) = g.encode(&coords).unwrap();
        let d = Array2::from_shape_fn((20, 3), |(i, j)| (i as f64 * 0.3 + j as f64).sin());
        let mut grad = vec![0.0; 64 * 3];
        g.backward_into(&cache, d.view(), &mut grad);
        for ch in 0..3 {
            let corner_sum: f64 = grad.iter().skip(ch).step_by(3).sum();
            let upstream: f64 = d.column(ch).sum();
            assert!((corner_sum - upstream).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let e = Encoder::from_spec(&EncoderSpec::default(), &mut rng()).unwrap();
        assert!(matches!(
            e.encode(&[[0.0, 1.5, 0.0]]),
            Err(Error::OutOfDomain(_))
        ));
        let h = Encoder::from_spec(&EncoderSpec::hash_default(), &mut rng()).unwrap();
        assert!(h.encode(&[[-1.1, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn hash_levels_and_determinism() {
        let h = HashGrid::new(4, 4, 32, 14, 2, &mut rng()).unwrap();
        assert_eq!(h.resolutions(), &[4, 8, 16, 32]);
        let p = [[0.123, -0.456, 0.789]];
        let (a, _) = h.encode(&p).unwrap();
        let (b, _) = h.encode(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ncols(), 8);
        assert!(HashGrid::new(4, 4, 5, 14, 2, &mut rng()).is_err());
    }

    #[test]
    fn hash_vertex_hit_returns_table_entry() {
        // 17^3 = 4913 fits 2^14 (direct), 33^3 = 35937 does not (hashed).
        let mut h = HashGrid::new(4, 4, 32, 14, 2, &mut rng()).unwrap();
        for l in 0..4 {
            for (i, v) in h.table_mut(l).iter_mut().enumerate() {
                *v = (i as f64 * 0.001 + l as f64).sin();
            }
        }
        let v = [19usize, 7, 30];
        let n = 32.0;
        let p = [
            v[0] as f64 / n * 2.0 - 1.0,
            v[1] as f64 / n * 2.0 - 1.0,
            v[2] as f64 / n * 2.0 - 1.0,
        ];
        let (out, _) = h.encode(&[p]).unwrap();
        // independent hash evaluation
        let hashed = ((19u64 * 1) ^ (7u64 * 2_654_435_761) ^ (30u64 * 805_459_861)) as u32 as usize
            & ((1 << 14) - 1);
        assert_eq!(h.slot(3, v), hashed);
        let expect = &h.tables[3].values[hashed * 2..hashed * 2 + 2];
        assert!((out[[0, 6]] - expect[0]).abs() < 1e-15);
        assert!((out[[0, 7]] - expect[1]).abs() < 1e-15);
        // level 1 (N = 8) is indexed directly; the same point sits between vertices
        // there, but level 0 (N = 4) at the domain corner is exactly a vertex.
        let (corner, _) = h.encode(&[[1.0, 1.0, 1.0]]).unwrap();
        let direct = 4 + 5 * (4 + 5 * 4);
        assert_eq!(h.slot(0, [4, 4, 4]), direct);
        assert!((corner[[0, 0]] - h.tables[0].values[direct * 2]).abs() < 1e-15);
    }

    #[test]
    fn zero_tables_give_zero_features() {
        let mut h = HashGrid::new(3, 2, 8, 10, 2, &mut rng()).unwrap();
        for l in 0..3 {
            h.table_mut(l).iter_mut().for_each(|v| *v = 0.0);
        }
        let (out, _) = h.encode(&random_coords(10, 4)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fourier_values() {
        let f = FourierFeatures { num_freqs: 3 };
        let out = f.encode(&[[0.0, 0.0, 0.0]]);
        for a in 0..3 {
            for k in 0..3 {
                let col = 2 * (a * 3 + k);
                assert_eq!(out[[0, col]], 0.0);
                assert_eq!(out[[0, col + 1]], 1.0);
            }
        }
        let out = FourierFeatures { num_freqs: 1 }.encode(&[[1.0, 0.0, 0.0]]);
        assert!(out[[0, 0]].abs() < 1e-15);
        assert_eq!(out[[0, 1]], -1.0);
        assert_eq!(FourierFeatures { num_freqs: 0 }.encode(&[[0.2; 3]]).ncols(), 0);
    }

    #[test]
    fn fourier_jacobian_matches_differences() {
        let f = FourierFeatures { num_freqs: 3 };
        let p = [0.31, -0.2, 0.77];
        let jac = f.coordinate_jacobian(&[p]);
        let h = 1e-6;
        for a in 0..3 {
            let mut up = p;
            let mut dn = p;
            up[a] += h;
            dn[a] -= h;
            let (eu, ed) = (f.encode(&[up]), f.encode(&[dn]));
            for k in 0..3 {
                for c in [2 * (a * 3 + k), 2 * (a * 3 + k) + 1] {
                    let num = (eu[[0, c]] - ed[[0, c]]) / (2.0 * h);
                    assert!((num - jac[[0, c]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn composite_width_and_order() {
        let spec = EncoderSpec::DenseFourier {
            resolution: [4, 4, 4],
            features: 4,
            num_freqs: 2,
        };
        assert_eq!(spec.output_width(), 16);
        let e = Encoder::from_spec(&spec, &mut rng()).unwrap();
        let coords = random_coords(6, 9);
        let (out, _) = e.encode(&coords).unwrap();
        assert_eq!(out.ncols(), 16);
        let Encoder::DenseFourier { grid, fourier } = &e else {
            unreachable!()
        };
        let (g, _) = grid.encode(&coords).unwrap();
        assert_eq!(out.slice(ndarray::s![.., ..4]), g);
        assert_eq!(out.slice(ndarray::s![.., 4..]), fourier.encode(&coords));

        let plain = EncoderSpec::DenseFourier {
            resolution: [4, 4, 4],
            features: 4,
            num_freqs: 0,
        };
        let e0 = Encoder::from_spec(&plain, &mut rng()).unwrap();
        let Encoder::DenseFourier { grid, .. } = &e0 else {
            unreachable!()
        };
        assert_eq!(e0.encode(&coords).unwrap().0, grid.encode(&coords).unwrap().0);
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let e = Encoder::from_spec(&EncoderSpec::hash_default(), &mut rng()).unwrap();
        let coords = random_coords(5, 10);
        let perm = [3, 0, 4, 1, 2];
        let shuffled: Vec<_> = perm.iter().map(|&i| coords[i]).collect();
        let (a, _) = e.encode(&coords).unwrap();
        let (b, _) = e.encode(&shuffled).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(r), a.row(i));
        }
    }

    #[test]
    fn spec_round_trips_through_encoder() {
        for spec in [
            EncoderSpec::default(),
            EncoderSpec::hash_default(),
            EncoderSpec::DenseFourier {
                resolution: [3, 5, 4],
                features: 2,
                num_freqs: 3,
            },
        ] {
            let e = Encoder::from_spec(&spec, &mut rng()).unwrap();
            assert_eq!(e.spec(), spec);
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let specs = [
            EncoderSpec::Dense {
                resolution: [3, 4, 3],
                features: 2,
            },
            EncoderSpec::Hash {
                levels: 3,
                n_min: 2,
                n_max: 8,
                log2_table: 6,
                features: 2,
            },
            EncoderSpec::DenseFourier {
                resolution: [3, 3, 3],
                features: 2,
                num_freqs: 2,
            },
        ];
        let coords = random_coords(12, 11);
        for spec in specs {
            let mut e = Encoder::from_spec(&spec, &mut rng()).unwrap();
            let theta: Vec<f64> = (0..e.num_params()).map(|i| (i as f64 * 0.37).sin()).collect();
            e.set_flat_values(&theta);
            let w = e.output_width();
            let weights = Array2::from_shape_fn((12, w), |(i, j)| ((i * w + j) as f64).cos());
            // L = sum(weights * features^2)
            let loss = |e: &Encoder| {
                let (f, _) = e.encode(&coords).unwrap();
                (&weights * &f.mapv(|v| v * v)).sum()
            };
            let (f, cache) = e.encode(&coords).unwrap();
            let d = &weights * &f * 2.0;
            e.zero_grad();
            e.backward(&cache, d.view());
            let analytic = e.flat_grads();
            let mut probe = e.clone();
            let err = finite_difference_check(&theta, &analytic, 1e-5, |t| {
                probe.set_flat_values(t);
                loss(&probe)
            });
            assert!(err < 1e-6, "{spec:?}: {err}");
        }
    }
}
