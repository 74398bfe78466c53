//! Versioned JSON specification files.
//!
//! Every file carries `"schema_version": 1`. Unknown keys are rejected and
//! parse errors report the line and column of the offending key.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::confound::{ConfounderModel, PriorSpec};
use crate::dwols::{StageModelSpec, StageTerms};
use crate::error::{Error, Result};
use crate::panel::PanelLayout;
use crate::simlab::{Dgp, PlasmodeModel};

pub const SCHEMA_VERSION: u32 = 1;

fn current() -> u32 {
    SCHEMA_VERSION
}

/// Panel layout and per-stage model terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default = "current")]
    pub schema_version: u32,
    pub layout: PanelLayout,
    pub stages: Vec<StageTerms>,
}

impl ModelFile {
    pub fn new(layout: PanelLayout, spec: StageModelSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            layout,
            stages: spec.stages,
        }
    }

    pub fn spec(&self) -> StageModelSpec {
        StageModelSpec {
            stages: self.stages.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.spec().validate(&self.layout)
    }
}

/// Confounder model and the prior on its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityFile {
    #[serde(default = "current")]
    pub schema_version: u32,
    pub confounder: ConfounderModel,
    pub prior: PriorSpec,
}

impl SensitivityFile {
    pub fn new(confounder: ConfounderModel, prior: PriorSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            confounder,
            prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate(&self.confounder)
    }
}

/// A simulation DGP; omitted parameters keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpFile {
    #[serde(default = "current")]
    pub schema_version: u32,
    pub dgp: Dgp,
}

/// Known models for plasmode data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmodeFile {
    #[serde(default = "current")]
    pub schema_version: u32,
    pub model: PlasmodeModel,
}

#[derive(Deserialize)]
struct Header {
    schema_version: Option<serde_json::Value>,
}

/// Parses a spec file, checking `schema_version` first.
pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    match header.schema_version {
        None => return Err(Error::InvalidSpec("missing `schema_version`".into())),
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(v) => {
            return Err(Error::InvalidSpec(format!(
                "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
            )))
        }
    }
    serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    from_str(&text).map_err(|e| match e {
        Error::InvalidSpec(m) => Error::InvalidSpec(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}
