//! Scalar volumes: raw file I/O, normalization, trilinear sampling,
//! training-batch generation and analytic test fields.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{self, cell_corners, check_domain, vertex_position};
use crate::{Error, Result};

/// Discretized scalar field on a vertex grid, x-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    values: Vec<f64>,
    raw_range: (f64, f64),
    normalized: bool,
}

impl VolumeGrid {
    /// Builds an unnormalized volume from raw values.
    pub fn from_raw(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let expected = dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for dims {:?} ({} expected)",
                values.len(),
                dims,
                expected
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let raw_range = value_range(&values);
        Ok(Self {
            dims,
            values,
            raw_range,
            normalized: false,
        })
    }

    /// Wraps values that are already in `[0, 1]` as a normalized volume.
    /// Unlike [`normalize_volume`] this accepts constant fields.
    pub fn from_normalized(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let mut v = Self::from_raw(dims, values)?;
        if let Some(bad) = v.values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidParam(format!(
                "normalized value {bad} outside [0, 1]"
            )));
        }
        v.raw_range = (0.0, 1.0);
        v.normalized = true;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn raw_range(&self) -> (f64, f64) {
        self.raw_range
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Maps a normalized value back to the original data range.
    pub fn denormalize(&self, v: f64) -> f64 {
        if self.normalized {
            self.raw_range.0 + v * (self.raw_range.1 - self.raw_range.0)
        } else {
            v
        }
    }

    /// Normalized coordinates of every vertex, in storage order.
    pub fn vertex_positions(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|i| vertex_position(self.dims, i))
            .collect()
    }

    pub fn sample(&self, p: [f64; 3]) -> Result<f64> {
        sample_trilinear(self, p)
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidParam(format!(
            "volume dims {dims:?} must all be >= 2"
        )));
    }
    Ok(())
}

fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Sidecar metadata for a `.raw` volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub const RAW_DTYPE: &str = "f32le";

impl VolumeMeta {
    pub fn new(dims: [usize; 3], name: Option<String>) -> Self {
        Self {
            dims,
            dtype: RAW_DTYPE.to_string(),
            name,
        }
    }

    /// Metadata path paired with a raw file: `foo.raw` -> `foo.meta.toml`.
    pub fn path_for(raw: &Path) -> PathBuf {
        raw.with_extension("meta.toml")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: VolumeMeta =
            toml::from_str(&text).map_err(|e| Error::Metadata(e.to_string()))?;
        Ok(meta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Metadata(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads a little-endian f32 volume described by `meta`.
pub fn load_raw_volume(path: &Path, meta: &VolumeMeta) -> Result<VolumeGrid> {
    if meta.dtype != RAW_DTYPE {
        return Err(Error::Metadata(format!(
            "unsupported dtype {:?} (only {RAW_DTYPE:?})",
            meta.dtype
        )));
    }
    check_dims(meta.dims)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = meta.dims.iter().product::<usize>();
    let expected = (n * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    VolumeGrid::from_raw(meta.dims, values)
}

/// Writes the volume as little-endian f32 plus its sidecar metadata.
/// Values are rounded to f32.
pub fn write_raw_volume(path: &Path, v: &VolumeGrid, name: Option<String>) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in &v.values {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    VolumeMeta::new(v.dims, name).write(&VolumeMeta::path_for(path))
}

/// Min-max scales the values to `[0, 1]`, keeping the raw range for inversion.
pub fn normalize_volume(v: &VolumeGrid) -> Result<VolumeGrid> {
    let (lo, hi) = v.raw_range;
    if hi <= lo {
        return Err(Error::ConstantVolume);
    }
    let scale = hi - lo;
    let values = v
        .values
        .iter()
        .map(|&x| ((x - lo) / scale).clamp(0.0, 1.0))
        .collect();
    Ok(VolumeGrid {
        dims: v.dims,
        values,
        raw_range: v.raw_range,
        normalized: true,
    })
}

pub fn sample_trilinear(v: &VolumeGrid, p: [f64; 3]) -> Result<f64> {
    check_domain(p)?;
    let c = cell_corners(v.dims, p);
    Ok(c.index
        .iter()
        .zip(c.weight.iter())
        .map(|(&i, &w)| w * v.values[i])
        .sum())
}

/// Coordinate-value pairs for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub coords: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
    /// Linear voxel index each pair was drawn from.
    pub indices: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Draws `count` vertices uniformly with replacement.
pub fn sample_training_batch<R: Rng + ?Sized>(
    v: &VolumeGrid,
    count: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if !v.normalized {
        return Err(Error::InvalidParam(
            "training batches require a normalized volume".into(),
        ));
    }
    if count == 0 {
        return Err(Error::InvalidParam("batch size must be >= 1".into()));
    }
    let n = v.len();
    let indices: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
    let coords = indices
        .iter()
        .map(|&i| vertex_position(v.dims, i))
        .collect();
    let targets = indices.iter().map(|&i| v.values[i]).collect();
    Ok(TrainingBatch {
        coords,
        targets,
        indices,
    })
}

/// One analytic component of a synthetic field; components are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticField {
    /// `sum_k a_k * exp(-|p - c_k|^2 / (2 w_k^2))`
    GaussianMixture {
        centers: Vec<[f64; 3]>,
        widths: Vec<f64>,
        amplitudes: Vec<f64>,
    },
    /// `amplitude * exp(-(|p - c| - radius)^2 / (2 thickness^2))`
    Shell {
        center: [f64; 3],
        radius: f64,
        thickness: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// The coordinate along `axis` (0 = x).
    LinearRamp {
        #[serde(default)]
        axis: usize,
    },
    Constant { value: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: [usize; 3],
    pub fields: Vec<SyntheticField>,
}

impl SyntheticField {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        match self {
            SyntheticField::GaussianMixture {
                centers,
                widths,
                amplitudes,
            } => {
                if centers.is_empty()
                    || centers.len() != widths.len()
                    || centers.len() != amplitudes.len()
                {
                    return bad(format!(
                        "gaussian mixture needs equal, non-empty center/width/amplitude lists \
                         (got {}/{}/{})",
                        centers.len(),
                        widths.len(),
                        amplitudes.len()
                    ));
                }
                if let Some(w) = widths.iter().find(|w| !(**w > 0.0)) {
                    return bad(format!("gaussian width {w} must be > 0"));
                }
                Ok(())
            }
            SyntheticField::Shell { thickness, radius, .. } => {
                if !(*thickness > 0.0) {
                    return bad(format!("shell thickness {thickness} must be > 0"));
                }
                if !(*radius >= 0.0) {
                    return bad(format!("shell radius {radius} must be >= 0"));
                }
                Ok(())
            }
            SyntheticField::LinearRamp { axis } => {
                if *axis > 2 {
                    return bad(format!("ramp axis {axis} must be 0, 1 or 2"));
                }
                Ok(())
            }
            SyntheticField::Constant { value } => {
                if !value.is_finite() {
                    return bad("constant value must be finite".into());
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, p: [f64; 3]) -> f64 {
        let dist2 = |c: &[f64; 3]| {
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
        };
        match self {
            SyntheticField::GaussianMixture {
                centers,
                widths,
                amplitudes,
            } => centers
                .iter()
                .zip(widths)
                .zip(amplitudes)
                .map(|((c, w), a)| a * (-dist2(c) / (2.0 * w * w)).exp())
                .sum(),
            SyntheticField::Shell {
                center,
                radius,
                thickness,
                amplitude,
            } => {
                let d = dist2(center).sqrt() - radius;
                amplitude * (-d * d / (2.0 * thickness * thickness)).exp()
            }
            SyntheticField::LinearRamp { axis } => p[*axis],
            SyntheticField::Constant { value } => *value,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims)?;
        if self.fields.is_empty() {
            return Err(Error::InvalidParam("synthetic spec has no fields".into()));
        }
        self.fields.iter().try_for_each(SyntheticField::validate)
    }

    pub fn eval(&self, p: [f64; 3]) -> f64 {
        self.fields.iter().map(|f| f.eval(p)).sum()
    }
}

/// Evaluates the analytic field at every vertex and normalizes it.
/// Normalized values are rounded to f32 so that writing and re-reading the
/// volume reproduces it exactly.
pub fn make_synthetic_volume(spec: &SyntheticSpec) -> Result<VolumeGrid> {
    spec.validate()?;
    let n: usize = spec.dims.iter().product();
    let values = (0..n)
        .map(|i| spec.eval(vertex_position(spec.dims, i)))
        .collect();
    let raw = VolumeGrid::from_raw(spec.dims, values)?;
    let mut v = normalize_volume(&raw)?;
    for x in &mut v.values {
        *x = *x as f32 as f64;
    }
    Ok(v)
}

/// Index of the voxel a training coordinate was taken from.
pub fn coord_to_index(dims: [usize; 3], p: [f64; 3]) -> usize {
    grid::nearest_vertex(dims, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube() -> VolumeGrid {
        VolumeGrid::from_raw([2, 2, 2], (0..8).map(f64::from).collect()).unwrap()
    }

    fn write_f32(path: &Path, vals: &[f32]) {
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_eight_float_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.raw");
        write_f32(&path, &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let v = load_raw_volume(&path, &VolumeMeta::new([2, 2, 2], None)).unwrap();
        assert_eq!(v.values(), cube().values());
        assert_eq!(v.raw_range(), (0.0, 7.0));
        assert!(!v.is_normalized());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.raw");
        write_f32(&path, &[0.0; 7]);
        let err = load_raw_volume(&path, &VolumeMeta::new([2, 2, 2], None)).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeMismatch {
                expected: 32,
                found: 28
            }
        ));
    }

    #[test]
    fn nan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.raw");
        write_f32(&path, &[0., 1., f32::NAN, 3., 4., 5., 6., 7.]);
        let err = load_raw_volume(&path, &VolumeMeta::new([2, 2, 2], None)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(2)));
    }

    #[test]
    fn missing_file_and_bad_dtype() {
        let meta = VolumeMeta::new([2, 2, 2], None);
        let err = load_raw_volume(Path::new("/nonexistent/x.raw"), &meta).unwrap_err();
        assert!(matches!(err, Error::NotFound { .. }));
        let mut meta = meta;
        meta.dtype = "u8".into();
        assert!(matches!(
            load_raw_volume(Path::new("x.raw"), &meta),
            Err(Error::Metadata(_))
        ));
    }

    #[test]
    fn normalization() {
        let v = VolumeGrid::from_raw([2, 2, 2], vec![0., 7., 0., 7., 0., 7., 0., 7.]).unwrap();
        let n = normalize_volume(&v).unwrap();
        assert_eq!(n.values()[..2], [0.0, 1.0]);
        assert!(n.is_normalized());
        assert_eq!(n.raw_range(), (0.0, 7.0));
        assert_eq!(n.denormalize(1.0), 7.0);

        let v = VolumeGrid::from_raw([2, 2, 2], vec![2., 3., 4., 2., 2., 2., 2., 2.]).unwrap();
        let n = normalize_volume(&v).unwrap();
        assert_eq!(n.values()[..3], [0.0, 0.5, 1.0]);

        let c = VolumeGrid::from_raw([2, 2, 2], vec![3.0; 8]).unwrap();
        assert!(matches!(normalize_volume(&c), Err(Error::ConstantVolume)));
    }

    #[test]
    fn trilinear_vertex_and_edge() {
        let v = cube();
        assert_eq!(sample_trilinear(&v, [-1.0, -1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(sample_trilinear(&v, [1.0, 1.0, 1.0]).unwrap(), 7.0);
        // edge between vertex 0 (value 0) and vertex 1 (value 1)
        assert_eq!(sample_trilinear(&v, [0.0, -1.0, -1.0]).unwrap(), 0.5);
        assert!(matches!(
            sample_trilinear(&v, [1.01, 0.0, 0.0]),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let spec = SyntheticSpec {
            dims: [5, 4, 3],
            fields: vec![SyntheticField::LinearRamp { axis: 0 }],
        };
        let v = make_synthetic_volume(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ];
            let expect = (p[0] + 1.0) / 2.0;
            assert!((sample_trilinear(&v, p).unwrap() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn batches_are_seeded_and_vertex_aligned() {
        let spec = SyntheticSpec {
            dims: [4, 3, 5],
            fields: vec![SyntheticField::LinearRamp { axis: 2 }],
        };
        let v = make_synthetic_volume(&spec).unwrap();
        let a = sample_training_batch(&v, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_training_batch(&v, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for (p, (&i, &t)) in a.coords.iter().zip(a.indices.iter().zip(&a.targets)) {
            assert_eq!(coord_to_index(v.dims(), *p), i);
            assert_eq!(v.values()[i], t);
        }
    }

    #[test]
    fn batch_frequencies_are_uniform() {
        let v = VolumeGrid::from_normalized([2, 2, 2], (0..8).map(|i| i as f64 / 7.0).collect())
            .unwrap();
        let count = 8 * 100;
        let batch = sample_training_batch(&v, count, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut hist = [0usize; 8];
        for &i in &batch.indices {
            hist[i] += 1;
        }
        // chi-square with 7 dof; 24.3 is the 0.999 quantile
        let expected = count as f64 / 8.0;
        let chi2: f64 = hist
            .iter()
            .map(|&h| (h as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 24.3, "chi2 = {chi2}, hist = {hist:?}");
    }

    #[test]
    fn batch_of_constant_volume() {
        let v = VolumeGrid::from_normalized([3, 3, 3], vec![0.25; 27]).unwrap();
        let b = sample_training_batch(&v, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.targets.iter().all(|&t| t == 0.25));
    }

    #[test]
    fn batch_requires_normalized_volume() {
        assert!(sample_training_batch(&cube(), 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn synthetic_constant_hits_normalize_error() {
        let spec = SyntheticSpec {
            dims: [3, 3, 3],
            fields: vec![SyntheticField::Constant { value: 3.0 }],
        };
        assert!(matches!(
            make_synthetic_volume(&spec),
            Err(Error::ConstantVolume)
        ));
    }

    #[test]
    fn gaussian_peak_at_center_vertex() {
        let spec = SyntheticSpec {
            dims: [9, 9, 9],
            fields: vec![SyntheticField::GaussianMixture {
                centers: vec![[0.0; 3]],
                widths: vec![0.3],
                amplitudes: vec![1.0],
            }],
        };
        let v = make_synthetic_volume(&spec).unwrap();
        let (argmax, _) = v
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(argmax, crate::grid::linear_index([9, 9, 9], 4, 4, 4));
    }

    #[test]
    fn invalid_synthetic_specs() {
        let bad_width = SyntheticSpec {
            dims: [3, 3, 3],
            fields: vec![SyntheticField::GaussianMixture {
                centers: vec![[0.0; 3]],
                widths: vec![0.0],
                amplitudes: vec![1.0],
            }],
        };
        assert!(matches!(make_synthetic_volume(&bad_width), Err(Error::InvalidParam(_))));
        let bad_shell = SyntheticSpec {
            dims: [3, 3, 3],
            fields: vec![SyntheticField::Shell {
                center: [0.0; 3],
                radius: 0.5,
                thickness: -1.0,
                amplitude: 1.0,
            }],
        };
        assert!(make_synthetic_volume(&bad_shell).is_err());
        let tiny = SyntheticSpec {
            dims: [1, 3, 3],
            fields: vec![SyntheticField::LinearRamp { axis: 0 }],
        };
        assert!(make_synthetic_volume(&tiny).is_err());
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let spec = SyntheticSpec {
            dims: [6, 5, 4],
            fields: vec![SyntheticField::Shell {
                center: [0.1, 0.0, -0.2],
                radius: 0.5,
                thickness: 0.2,
                amplitude: 1.0,
            }],
        };
        let v = make_synthetic_volume(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shell.raw");
        write_raw_volume(&path, &v, Some("shell".into())).unwrap();
        let meta = VolumeMeta::read(&VolumeMeta::path_for(&path)).unwrap();
        assert_eq!(meta.name.as_deref(), Some("shell"));
        let back = load_raw_volume(&path, &meta).unwrap();
        assert_eq!(back.values(), v.values());
    }
}
