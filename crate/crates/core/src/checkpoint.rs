//! Binary model container.
//!
//! Layout (little-endian): magic `USRN`, `u32` format version, `u64` header
//! length, a JSON header of that many bytes, then every parameter tensor as
//! raw `f64` values in the order the header lists them. The header records
//! the payload length and an FNV-1a checksum, so truncation and corruption
//! are detected before any model is built.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSpec;
use crate::models::{ModelKind, Srn, TrainConfig, UncertainModel};
use crate::nn::{DecoderSpec, Parameterized};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"USRN";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on the header size accepted when loading.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub steps_completed: usize,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    /// Independent networks (ensemble size for DE, 1 otherwise).
    pub networks: usize,
    /// Decoders per network.
    pub decoders: usize,
    pub outputs: usize,
    pub dropout: f64,
    pub mcd_passes: Option<usize>,
    pub mcd_seed: Option<u64>,
    pub pv_variance_floor: Option<f64>,
    pub tensors: Vec<TensorRecord>,
    pub payload_bytes: u64,
    pub payload_fnv1a: u64,
    pub metadata: TrainingMetadata,
}

impl CheckpointHeader {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn tensor_names(srn: &Srn, prefix: &str) -> Vec<String> {
    let mut names: Vec<String> = (0..srn.encoder.params().len())
        .map(|i| format!("{prefix}encoder.{i}"))
        .collect();
    for (d, dec) in srn.decoders.iter().enumerate() {
        for l in 0..dec.num_layers() {
            names.push(format!("{prefix}decoder{d}.layer{l}.weight"));
            names.push(format!("{prefix}decoder{d}.layer{l}.bias"));
        }
    }
    names
}

fn describe(model: &UncertainModel) -> Result<(CheckpointHeader, Vec<u8>)> {
    let nets = model.networks();
    let first = nets[0];
    let decoder = DecoderSpec {
        hidden: {
            let dims = first.decoders[0].dims();
            dims[1..dims.len() - 1].to_vec()
        },
        activation: first.decoders[0].activation(),
    };
    let mut tensors = Vec::new();
    for (n, net) in nets.iter().enumerate() {
        let prefix = if nets.len() > 1 { format!("net{n}.") } else { String::new() };
        for (name, p) in tensor_names(net, &prefix).into_iter().zip(net.params()) {
            tensors.push(TensorRecord {
                name,
                shape: p.shape.clone(),
            });
        }
    }
    let mut payload = Vec::with_capacity(model.num_params() * 8);
    for p in model.params() {
        for v in &p.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let (mcd_passes, mcd_seed, pv_variance_floor) = match model {
        UncertainModel::McDropout { passes, seed, .. } => (Some(*passes), Some(*seed), None),
        UncertainModel::PredictVariance { floor, .. } => (None, None, Some(*floor)),
        _ => (None, None, None),
    };
    let header = CheckpointHeader {
        kind: model.kind(),
        encoder: first.encoder.spec(),
        decoder,
        networks: nets.len(),
        decoders: first.members(),
        outputs: first.outputs(),
        dropout: first.decoders[0].dropout(),
        mcd_passes,
        mcd_seed,
        pv_variance_floor,
        tensors,
        payload_bytes: payload.len() as u64,
        payload_fnv1a: fnv1a(&payload),
        metadata: TrainingMetadata::default(),
    };
    Ok((header, payload))
}

/// Serializes a model and its training metadata.
pub fn to_bytes(model: &UncertainModel, metadata: &TrainingMetadata) -> Result<Vec<u8>> {
    let (mut header, payload) = describe(model)?;
    header.metadata = metadata.clone();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates the header, returning it with the payload slice.
fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing USRN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES || 16 + header_len > bytes.len() as u64 {
        return Err(Error::Corrupt(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let body = 16 + header_len as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let payload = &bytes[body..];
    let declared = header.num_params() as u64 * 8;
    if header.payload_bytes != declared || payload.len() as u64 != declared {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, tensors declare {declared}",
            payload.len()
        )));
    }
    if fnv1a(payload) != header.payload_fnv1a {
        return Err(Error::Corrupt("payload checksum mismatch".into()));
    }
    Ok((header, payload))
}

fn build(header: &CheckpointHeader) -> Result<UncertainModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = |decoders: usize, outputs: usize, dropout: f64| {
        Srn::new(&header.encoder, &header.decoder, decoders, outputs, dropout, &mut rng)
    };
    let missing = |what: &str| Error::Corrupt(format!("{} checkpoint lacks {what}", header.kind));
    Ok(match header.kind {
        ModelKind::Mdsrn | ModelKind::Rmdsrn => UncertainModel::MultiDecoder {
            kind: header.kind,
            srn: net(header.decoders, 1, 0.0)?,
        },
        ModelKind::De => UncertainModel::DeepEnsemble(
            (0..header.networks)
                .map(|_| net(1, 1, 0.0))
                .collect::<Result<_>>()?,
        ),
        ModelKind::Pv => UncertainModel::PredictVariance {
            srn: net(1, 2, 0.0)?,
            floor: header.pv_variance_floor.ok_or_else(|| missing("a variance floor"))?,
        },
        ModelKind::Mcd => UncertainModel::McDropout {
            srn: net(1, 1, header.dropout)?,
            passes: header.mcd_passes.ok_or_else(|| missing("a pass count"))?,
            seed: header.mcd_seed.ok_or_else(|| missing("a seed"))?,
        },
    })
}

/// Rebuilds a model from bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(UncertainModel, CheckpointHeader)> {
    let (header, payload) = split(bytes)?;
    let mut model = build(&header)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape.clone()).collect();
    if shapes.len() != header.tensors.len()
        || shapes.iter().zip(&header.tensors).any(|(s, t)| *s != t.shape)
    {
        return Err(Error::Corrupt(
            "tensor shapes do not match the declared architecture".into(),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.set_flat_values(&values);
    Ok((model, header))
}

pub fn save_checkpoint(model: &UncertainModel, metadata: &TrainingMetadata, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(UncertainModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the header of a checkpoint, still validating the payload.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}
