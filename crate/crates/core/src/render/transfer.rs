use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Rgba = [f64; 4];

/// Piecewise-linear map from a scalar in `[0, 1]` to RGBA. Stored as rows
/// `[s, r, g, b, a]` with `s` strictly increasing from 0 to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TfFile", into = "TfFile")]
pub struct TransferFunction {
    points: Vec<[f64; 5]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TfFile {
    points: Vec<[f64; 5]>,
}

impl TryFrom<TfFile> for TransferFunction {
    type Error = Error;

    fn try_from(f: TfFile) -> Result<Self> {
        TransferFunction::new(f.points)
    }
}

impl From<TransferFunction> for TfFile {
    fn from(tf: TransferFunction) -> Self {
        TfFile { points: tf.points }
    }
}

impl TransferFunction {
    pub fn new(points: Vec<[f64; 5]>) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("transfer function: {m}")));
        if points.len() < 2 {
            return bad("needs at least two control points");
        }
        if points[0][0] != 0.0 || points[points.len() - 1][0] != 1.0 {
            return bad("first point must be at 0 and last at 1");
        }
        if points.windows(2).any(|w| !(w[1][0] > w[0][0])) {
            return bad("scalar positions must be strictly increasing");
        }
        if points.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("all components must lie in [0, 1]");
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 5]] {
        &self.points
    }

    /// Color and opacity at `s`, clamped to `[0, 1]` (NaN maps to 0).
    pub fn lookup(&self, s: f64) -> Rgba {
        let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        let hi = self.points.partition_point(|p| p[0] < s).max(1);
        let (a, b) = (&self.points[hi - 1], &self.points[hi]);
        let t = (s - a[0]) / (b[0] - a[0]);
        std::array::from_fn(|c| (1.0 - t) * a[c + 1] + t * b[c + 1])
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Metadata(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("control points always serialize")
    }

    /// Opacity ramps up with the value; color runs blue to orange.
    pub fn default_ramp() -> Self {
        Self::new(vec![
            [0.0, 0.05, 0.10, 0.45, 0.0],
            [0.25, 0.10, 0.45, 0.80, 0.02],
            [0.5, 0.55, 0.85, 0.55, 0.15],
            [0.75, 0.95, 0.65, 0.20, 0.45],
            [1.0, 0.90, 0.15, 0.05, 0.85],
        ])
        .expect("valid built-in transfer function")
    }

    /// Opaque white everywhere; useful for scalar overlays with a mask.
    pub fn opaque(rgb: [f64; 3]) -> Self {
        Self::new(vec![
            [0.0, rgb[0], rgb[1], rgb[2], 1.0],
            [1.0, rgb[0], rgb[1], rgb[2], 1.0],
        ])
        .expect("valid constant transfer function")
    }
}
