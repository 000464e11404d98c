//! Run configuration: one TOML file with `[volume]`, `[train]`, `[schedule]`,
//! `[render]`, `[metrics]` and `[sweep]` sections, plus `--set` overrides.

use std::path::{Path, PathBuf};

use mdsrn_core::metrics::DEFAULT_JIST_FRACTIONS;
use mdsrn_core::models::{LambdaSettings, TrainConfig};
use mdsrn_core::volume::{
    load_raw_volume, make_synthetic_volume, normalize_volume, SyntheticSpec, VolumeGrid, VolumeMeta,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    /// A `.raw` file with a `.meta.toml` sidecar. Relative to the config file.
    pub path: Option<PathBuf>,
    /// Analytic volume evaluated in memory.
    pub synthetic: Option<SyntheticSpec>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub width: usize,
    pub height: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    /// Ray step in world units; half a voxel diagonal when unset.
    pub step: Option<f64>,
    /// Step at which transfer-function opacities are defined; defaults to
    /// half a voxel diagonal.
    pub reference_step: Option<f64>,
    pub threshold: f64,
    pub background: [f64; 4],
    pub variance_floor: f64,
    /// TOML file with `points = [[s, r, g, b, a], ...]`.
    pub transfer_function: Option<PathBuf>,
    /// Fraction of voxels kept in the variance and error overlays.
    pub overlay_fraction: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            azimuth: 35.0,
            elevation: 25.0,
            distance: 4.0,
            fov: 40.0,
            step: None,
            reference_step: None,
            threshold: 0.99,
            background: [1.0, 1.0, 1.0, 1.0],
            variance_floor: 1e-6,
            transfer_function: None,
            overlay_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Top fractions for JI-ST columns.
    pub fractions: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_JIST_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambda_max: Vec<f64>,
    /// Decoder counts; empty means `train.members` only.
    pub members: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambda_max: vec![0.0, 5.0, 10.0],
            members: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub volume: VolumeSection,
    pub train: TrainConfig,
    pub schedule: LambdaSettings,
    pub render: RenderSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies one `section.key=value` override.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults when `None`), applies overrides, and
    /// validates. Relative paths inside the file resolve against its folder.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("schedule"))
        {
            return Err(CliError::Config(
                "lambda ramp settings belong in the [schedule] section".into(),
            ));
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train.schedule = cfg.schedule;
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            for p in [&mut cfg.volume.path, &mut cfg.render.transfer_function]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: mdsrn_core::Error| CliError::Config(e.to_string());
        self.train.validate().map_err(invalid)?;
        if let Some(s) = &self.volume.synthetic {
            s.validate().map_err(invalid)?;
        }
        if self.volume.path.is_some() && self.volume.synthetic.is_some() {
            return Err(CliError::Config(
                "volume: set either path or synthetic, not both".into(),
            ));
        }
        if self.metrics.fractions.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(CliError::Config("metrics.fractions must lie in (0, 1]".into()));
        }
        let r = &self.render;
        if !(r.overlay_fraction > 0.0 && r.overlay_fraction <= 1.0) {
            return Err(CliError::Config("render.overlay_fraction must lie in (0, 1]".into()));
        }
        if r.width == 0 || r.height == 0 {
            return Err(CliError::Config("render image size must be positive".into()));
        }
        if self.sweep.members.iter().any(|&m| m < 2) {
            return Err(CliError::Config("sweep.members entries must be >= 2".into()));
        }
        Ok(())
    }

    /// The configured volume, normalized to `[0, 1]`.
    pub fn load_volume(&self) -> Result<VolumeGrid, CliError> {
        match (&self.volume.path, &self.volume.synthetic) {
            (Some(path), _) => {
                let meta_path = VolumeMeta::path_for(path);
                let meta = VolumeMeta::read(&meta_path)?;
                let raw = load_raw_volume(path, &meta)?;
                Ok(normalize_volume(&raw)?)
            }
            (None, Some(spec)) => Ok(make_synthetic_volume(spec)?),
            (None, None) => Err(CliError::Config(
                "no volume configured: set volume.path or [volume.synthetic]".into(),
            )),
        }
    }
}
