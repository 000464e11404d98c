use std::f64::consts::PI;

use ndarray::Array2;

/// Parameter-free sinusoidal encoding. For each axis `a` and frequency
/// `k < K`, column `2 * (a * K + k)` holds `sin(2^k pi x_a)` and the next
/// column `cos(2^k pi x_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierFeatures {
    pub num_freqs: usize,
}

impl FourierFeatures {
    pub fn output_width(&self) -> usize {
        6 * self.num_freqs
    }

    pub fn encode(&self, coords: &[[f64; 3]]) -> Array2<f64> {
        let k_max = self.num_freqs;
        let mut out = Array2::zeros((coords.len(), self.output_width()));
        for (b, p) in coords.iter().enumerate() {
            for a in 0..3 {
                for k in 0..k_max {
                    let arg = (1u64 << k) as f64 * PI * p[a];
                    let col = 2 * (a * k_max + k);
                    out[[b, col]] = arg.sin();
                    out[[b, col + 1]] = arg.cos();
                }
            }
        }
        out
    }

    /// Derivative of every output column with respect to its own axis value.
    pub fn coordinate_jacobian(&self, coords: &[[f64; 3]]) -> Array2<f64> {
        let k_max = self.num_freqs;
        let mut out = Array2::zeros((coords.len(), self.output_width()));
        for (b, p) in coords.iter().enumerate() {
            for a in 0..3 {
                for k in 0..k_max {
                    let freq = (1u64 << k) as f64 * PI;
                    let arg = freq * p[a];
                    let col = 2 * (a * k_max + k);
                    out[[b, col]] = freq * arg.cos();
                    out[[b, col + 1]] = -freq * arg.sin();
                }
            }
        }
        out
    }
}
