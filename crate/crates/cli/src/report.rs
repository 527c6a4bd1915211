//! The document written by `register`.

use std::path::Path;

use anareg::{AffineParams, AffineTransform, Error, EvalReport, FovSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationReport {
    /// RFC 3339 time of the run; the only field that varies between
    /// identical invocations.
    pub timestamp: String,
    pub transform: AffineTransform,
    pub params: AffineParams,
    /// Moving mask warped by `transform` onto the fixed grid, scored against
    /// the fixed mask.
    pub metrics: EvalReport,
    pub rpm: RpmSummary,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpmSummary {
    pub final_cost: f64,
    pub temperatures_run: usize,
    pub iterations: usize,
    pub inlier_fraction_moving: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub fixed_path: String,
    pub moving_path: String,
    pub config_path: Option<String>,
    pub gt_path: Option<String>,
    /// SHA-256 of the effective solver configuration as TOML.
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub points_requested: usize,
    pub fixed_points: usize,
    pub moving_points: usize,
    pub fov: Option<FovSpec>,
}

impl RegistrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            field: "report".into(),
            message: e.to_string(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
