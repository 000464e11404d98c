use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::pv_head;
use super::srn::Srn;
use super::stats::{ensemble_stats, PredictionStats};
use crate::grid::vertex_position;
use crate::nn::{Mode, ParamTensor, Parameterized};
use crate::{Error, Result};

/// Rows per inference chunk when reconstructing a full volume.
pub const RECONSTRUCT_CHUNK: usize = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mdsrn,
    Rmdsrn,
    De,
    Pv,
    Mcd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mdsrn,
        ModelKind::Rmdsrn,
        ModelKind::De,
        ModelKind::Pv,
        ModelKind::Mcd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mdsrn => "mdsrn",
            ModelKind::Rmdsrn => "rmdsrn",
            ModelKind::De => "de",
            ModelKind::Pv => "pv",
            ModelKind::Mcd => "mcd",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown model kind {s:?}")))
    }
}

/// A trained model that yields a mean and variance per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum UncertainModel {
    /// Shared encoder, several decoders (MDSRN or RMDSRN).
    MultiDecoder { kind: ModelKind, srn: Srn },
    /// Fully independent single-decoder networks.
    DeepEnsemble(Vec<Srn>),
    /// One decoder with a `(mean, raw variance)` head.
    PredictVariance { srn: Srn, floor: f64 },
    /// One decoder with dropout kept on at inference; `seed` fixes the masks.
    McDropout { srn: Srn, passes: usize, seed: u64 },
}

impl UncertainModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            UncertainModel::MultiDecoder { kind, .. } => *kind,
            UncertainModel::DeepEnsemble(_) => ModelKind::De,
            UncertainModel::PredictVariance { .. } => ModelKind::Pv,
            UncertainModel::McDropout { .. } => ModelKind::Mcd,
        }
    }

    /// The networks making up the model, in parameter order.
    pub fn networks(&self) -> Vec<&Srn> {
        match self {
            UncertainModel::DeepEnsemble(m) => m.iter().collect(),
            UncertainModel::MultiDecoder { srn, .. }
            | UncertainModel::PredictVariance { srn, .. }
            | UncertainModel::McDropout { srn, .. } => vec![srn],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Srn> {
        match self {
            UncertainModel::DeepEnsemble(m) => m.iter_mut().collect(),
            UncertainModel::MultiDecoder { srn, .. }
            | UncertainModel::PredictVariance { srn, .. }
            | UncertainModel::McDropout { srn, .. } => vec![srn],
        }
    }

    /// Number of predictions per coordinate the variance is computed from.
    pub fn members(&self) -> usize {
        match self {
            UncertainModel::MultiDecoder { srn, .. } => srn.members(),
            UncertainModel::DeepEnsemble(m) => m.len(),
            UncertainModel::PredictVariance { .. } => 1,
            UncertainModel::McDropout { passes, .. } => *passes,
        }
    }

    /// A generator for stochastic inference, reseeded identically on each call.
    pub fn inference_rng(&self) -> ChaCha8Rng {
        let seed = match self {
            UncertainModel::McDropout { seed, .. } => *seed,
            _ => 0,
        };
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Individual predictions, `M x B`. Not available for a variance head.
    pub fn member_predictions_with_rng<R: Rng + ?Sized>(
        &self,
        coords: &[[f64; 3]],
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        match self {
            UncertainModel::MultiDecoder { srn, .. } => srn.predict(coords),
            UncertainModel::DeepEnsemble(members) => {
                let mut out = Array2::zeros((members.len(), coords.len()));
                for (i, m) in members.iter().enumerate() {
                    out.row_mut(i).assign(&m.predict(coords)?.row(0));
                }
                Ok(out)
            }
            UncertainModel::McDropout { srn, passes, .. } => mcd_passes(srn, coords, *passes, rng),
            UncertainModel::PredictVariance { .. } => Err(Error::InvalidParam(
                "a variance-head model has no member predictions".into(),
            )),
        }
    }

    pub fn member_predictions(&self, coords: &[[f64; 3]]) -> Result<Array2<f64>> {
        self.member_predictions_with_rng(coords, &mut self.inference_rng())
    }

    pub fn predict_stats_with_rng<R: Rng + ?Sized>(
        &self,
        coords: &[[f64; 3]],
        rng: &mut R,
    ) -> Result<PredictionStats> {
        match self {
            UncertainModel::PredictVariance { srn, floor } => {
                let out = srn.head_outputs(coords)?;
                let (mean, variance) = pv_head(out.view(), *floor)?;
                Ok(PredictionStats {
                    mean,
                    variance,
                    members: Array2::zeros((0, coords.len())),
                })
            }
            _ => ensemble_stats(self.member_predictions_with_rng(coords, rng)?.view()),
        }
    }

    pub fn predict_stats(&self, coords: &[[f64; 3]]) -> Result<PredictionStats> {
        self.predict_stats_with_rng(coords, &mut self.inference_rng())
    }

    /// Mean and variance at every vertex of a `dims` grid, evaluated in
    /// fixed-size chunks. MCD masks come from one generator across chunks.
    pub fn reconstruct(&self, dims: [usize; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = dims[0] * dims[1] * dims[2];
        let mut rng = self.inference_rng();
        let mut mean = Vec::with_capacity(n);
        let mut variance = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + RECONSTRUCT_CHUNK).min(n);
            let coords: Vec<[f64; 3]> = (start..end).map(|i| vertex_position(dims, i)).collect();
            let stats = self.predict_stats_with_rng(&coords, &mut rng)?;
            mean.extend(stats.mean);
            variance.extend(stats.variance);
            start = end;
        }
        Ok((mean, variance))
    }
}

impl Parameterized for UncertainModel {
    fn params(&self) -> Vec<&ParamTensor> {
        self.networks().into_iter().flat_map(|n| n.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.networks_mut()
            .into_iter()
            .flat_map(|n| n.params_mut())
            .collect()
    }
}

fn mcd_passes<R: Rng + ?Sized>(
    srn: &Srn,
    coords: &[[f64; 3]],
    passes: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if passes < 2 {
        return Err(Error::InvalidParam(format!(
            "MC dropout needs at least 2 passes, got {passes}"
        )));
    }
    let (features, _) = srn.encode(coords)?;
    let decoder = &srn.decoders[0];
    let mut out = Array2::zeros((passes, coords.len()));
    for s in 0..passes {
        let (y, _) = decoder.forward(features.view(), Mode::Train, rng)?;
        out.slice_mut(s![s, ..]).assign(&y.column(0));
    }
    Ok(out)
}

/// Statistics over `passes` stochastic forward passes of the first decoder
/// with dropout active.
pub fn mcd_predict_stats<R: Rng + ?Sized>(
    srn: &Srn,
    coords: &[[f64; 3]],
    passes: usize,
    rng: &mut R,
) -> Result<PredictionStats> {
    ensemble_stats(mcd_passes(srn, coords, passes, rng)?.view())
}
