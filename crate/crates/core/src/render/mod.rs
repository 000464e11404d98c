//! Raymarching direct volume renderer: mean-field rendering, statistical
//! rendering over ensemble members, and masked scalar overlays.

mod camera;
mod image;
mod transfer;

use ndarray::Array2;
use rayon::prelude::*;

pub use camera::{Camera, Ray};
pub use image::RenderedImage;
pub use transfer::{Rgba, TransferFunction};

use crate::grid::nearest_vertex;
use crate::metrics::top_mask;
use crate::models::{ensemble_stats, UncertainModel};
use crate::volume::{sample_trilinear, VolumeGrid};
use crate::{Error, Result};

/// Step length, opacity reference and termination settings of the marcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Sample spacing along a ray, in world units.
    pub step: f64,
    /// Step length at which transfer-function opacities are defined.
    pub reference_step: f64,
    /// Rays stop once accumulated opacity reaches this value.
    pub threshold: f64,
    pub background: Rgba,
    /// Below this variance, statistical rendering classifies the mean only.
    pub variance_floor: f64,
}

/// Half the diagonal of one voxel of a grid spanning `[-1, 1]^3`.
pub fn half_voxel_diagonal(dims: [usize; 3]) -> f64 {
    let d2: f64 = dims.iter().map(|&n| (2.0 / (n - 1) as f64).powi(2)).sum();
    0.5 * d2.sqrt()
}

impl RenderConfig {
    /// Defaults for a grid of `dims`: half-voxel-diagonal steps, threshold
    /// 0.99, opaque white background.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let step = half_voxel_diagonal(dims);
        Self {
            step,
            reference_step: step,
            threshold: 0.99,
            background: [1.0, 1.0, 1.0, 1.0],
            variance_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite() && self.reference_step > 0.0) {
            return Err(Error::InvalidParam("render steps must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "termination threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParam("background components must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Something that can be sampled at world positions inside `[-1, 1]^3`.
/// `stream` identifies the calling image row so stochastic sources stay
/// reproducible under parallel rendering.
pub trait FieldSource: Sync {
    fn values(&self, points: &[[f64; 3]], stream: u64) -> Result<Vec<f64>>;

    /// Per-member values, `M x N`.
    fn members(&self, points: &[[f64; 3]], stream: u64) -> Result<Array2<f64>>;
}

impl FieldSource for VolumeGrid {
    fn values(&self, points: &[[f64; 3]], _stream: u64) -> Result<Vec<f64>> {
        points.iter().map(|&p| sample_trilinear(self, p)).collect()
    }

    fn members(&self, _points: &[[f64; 3]], _stream: u64) -> Result<Array2<f64>> {
        Err(Error::InvalidParam("a volume has no ensemble members".into()))
    }
}

impl UncertainModel {
    fn row_rng(&self, stream: u64) -> rand_chacha::ChaCha8Rng {
        let mut rng = self.inference_rng();
        rng.set_stream(stream);
        rng
    }
}

impl FieldSource for UncertainModel {
    fn values(&self, points: &[[f64; 3]], stream: u64) -> Result<Vec<f64>> {
        Ok(self.predict_stats_with_rng(points, &mut self.row_rng(stream))?.mean)
    }

    fn members(&self, points: &[[f64; 3]], stream: u64) -> Result<Array2<f64>> {
        self.member_predictions_with_rng(points, &mut self.row_rng(stream))
    }
}

/// Normalized Gaussian weights of `values` under `N(mean, variance)`,
/// computed on exponent differences so the normalizer cancels exactly.
pub fn gaussian_weights(values: &[f64], mean: f64, variance: f64) -> Vec<f64> {
    let expo: Vec<f64> = values
        .iter()
        .map(|f| -(f - mean) * (f - mean) / (2.0 * variance))
        .collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

trait Classifier: Sync {
    fn classify(&self, points: &[[f64; 3]], stream: u64) -> Result<Vec<Rgba>>;
}

struct MeanClassifier<'a, S: ?Sized> {
    source: &'a S,
    tf: &'a TransferFunction,
}

impl<S: FieldSource + ?Sized> Classifier for MeanClassifier<'_, S> {
    fn classify(&self, points: &[[f64; 3]], stream: u64) -> Result<Vec<Rgba>> {
        Ok(self
            .source
            .values(points, stream)?
            .into_iter()
            .map(|v| self.tf.lookup(v))
            .collect())
    }
}

struct StatisticalClassifier<'a, S: ?Sized> {
    source: &'a S,
    tf: &'a TransferFunction,
    floor: f64,
}

impl<S: FieldSource + ?Sized> Classifier for StatisticalClassifier<'_, S> {
    fn classify(&self, points: &[[f64; 3]], stream: u64) -> Result<Vec<Rgba>> {
        let preds = self.source.members(points, stream)?;
        let stats = ensemble_stats(preds.view())?;
        let out = (0..points.len())
            .map(|j| {
                let (mu, var) = (stats.mean[j], stats.variance[j]);
                if var < self.floor {
                    return self.tf.lookup(mu);
                }
                let column = preds.column(j).to_vec();
                let mut rgba = [0.0; 4];
                for (f, w) in column.iter().zip(gaussian_weights(&column, mu, var)) {
                    let c = self.tf.lookup(*f);
                    (0..4).for_each(|k| rgba[k] += w * c[k]);
                }
                rgba
            })
            .collect();
        Ok(out)
    }
}

struct OverlayClassifier<'a> {
    field: &'a VolumeGrid,
    keep: Vec<bool>,
    tf: &'a TransferFunction,
}

impl Classifier for OverlayClassifier<'_> {
    fn classify(&self, points: &[[f64; 3]], _stream: u64) -> Result<Vec<Rgba>> {
        let dims = self.field.dims();
        points
            .iter()
            .map(|&p| {
                if self.keep[nearest_vertex(dims, p)] {
                    Ok(self.tf.lookup(sample_trilinear(self.field, p)?))
                } else {
                    Ok([0.0; 4])
                }
            })
            .collect()
    }
}

/// Sample positions (segment midpoints) and segment lengths covering
/// `[t0, t1]`: whole steps, then one shorter closing segment.
pub fn plan_segments(t0: f64, t1: f64, step: f64) -> Vec<(f64, f64)> {
    let len = t1 - t0;
    let full = (len / step).floor() as usize;
    let mut out: Vec<(f64, f64)> = (0..full)
        .map(|i| (t0 + (i as f64 + 0.5) * step, step))
        .collect();
    let rest = len - full as f64 * step;
    if rest > 1e-12 * step {
        out.push((t1 - 0.5 * rest, rest));
    }
    out
}

/// Front-to-back compositing of classified samples `(rgba, segment length)`.
/// Returns straight (non-premultiplied) color over the background, and the
/// accumulated opacity after each sample that was used.
pub fn composite(samples: &[(Rgba, f64)], cfg: &RenderConfig) -> (Rgba, Vec<f64>) {
    let mut color = [0.0; 3];
    let mut alpha = 0.0;
    let mut trace = Vec::with_capacity(samples.len());
    for (rgba, len) in samples {
        if alpha >= cfg.threshold {
            break;
        }
        let a = 1.0 - (1.0 - rgba[3]).powf(len / cfg.reference_step);
        let w = (1.0 - alpha) * a;
        (0..3).for_each(|k| color[k] += w * rgba[k]);
        alpha += w;
        trace.push(alpha);
    }
    let bg = cfg.background;
    let w = (1.0 - alpha) * bg[3];
    (0..3).for_each(|k| color[k] += w * bg[k]);
    alpha += w;
    let out = if alpha > 0.0 {
        [color[0] / alpha, color[1] / alpha, color[2] / alpha, alpha]
    } else {
        [0.0; 4]
    };
    (out, trace)
}

fn clamp_to_box(p: [f64; 3]) -> [f64; 3] {
    p.map(|c| c.clamp(-1.0, 1.0))
}

fn march(classifier: &dyn Classifier, cam: &Camera, cfg: &RenderConfig) -> Result<RenderedImage> {
    cam.validate()?;
    cfg.validate()?;
    let rows: Vec<Vec<Rgba>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let mut points = Vec::new();
            let mut rays = Vec::with_capacity(cam.width);
            for x in 0..cam.width {
                let ray = cam.ray(x, y);
                let start = points.len();
                let mut lens = Vec::new();
                if let Some((t0, t1)) = ray.box_interval() {
                    for (t, len) in plan_segments(t0, t1, cfg.step) {
                        points.push(clamp_to_box(ray.at(t)));
                        lens.push(len);
                    }
                }
                rays.push((start, lens));
            }
            let colors = if points.is_empty() {
                Vec::new()
            } else {
                classifier.classify(&points, y as u64)?
            };
            Ok(rays
                .into_iter()
                .map(|(start, lens)| {
                    let samples: Vec<(Rgba, f64)> = lens
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| (colors[start + i], l))
                        .collect();
                    composite(&samples, cfg).0
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(RenderedImage {
        width: cam.width,
        height: cam.height,
        pixels: rows.into_iter().flatten().collect(),
    })
}

/// Renders the mean field of `source` through `tf`.
pub fn raymarch_mean<S: FieldSource + ?Sized>(
    source: &S,
    cam: &Camera,
    tf: &TransferFunction,
    cfg: &RenderConfig,
) -> Result<RenderedImage> {
    march(&MeanClassifier { source, tf }, cam, cfg)
}

/// Renders the expected classification over ensemble members, each member
/// weighted by its Gaussian probability under the local mean and variance.
pub fn raymarch_statistical<S: FieldSource + ?Sized>(
    source: &S,
    cam: &Camera,
    tf: &TransferFunction,
    cfg: &RenderConfig,
) -> Result<RenderedImage> {
    let classifier = StatisticalClassifier {
        source,
        tf,
        floor: cfg.variance_floor,
    };
    march(&classifier, cam, cfg)
}

/// Renders only the top-`p` voxels of a scalar field (e.g. variance or
/// error); all others are fully transparent.
pub fn render_scalar_overlay(
    field: &VolumeGrid,
    p: f64,
    cam: &Camera,
    tf: &TransferFunction,
    cfg: &RenderConfig,
) -> Result<RenderedImage> {
    let keep = top_mask(field.values(), p)?;
    march(&OverlayClassifier { field, keep, tf }, cam, cfg)
}
