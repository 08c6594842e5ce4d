//! Versioned JSON snapshot of the per-stage alignment state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catreg::CategoryCenters;
use crate::error::{Error, Result};
use crate::gma::ManifoldProjector;
use crate::scalar::Scalar;
use crate::tcr::CategoryThresholds;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StageArtifact<T> {
    pub version: u32,
    pub stage: usize,
    /// PCA, atoms and the attention weights.
    pub projector: ManifoldProjector<T>,
    pub centers: CategoryCenters<T>,
    pub thresholds: CategoryThresholds<T>,
}

impl<T: Scalar> StageArtifact<T> {
    pub fn new(
        stage: usize,
        projector: ManifoldProjector<T>,
        centers: CategoryCenters<T>,
        thresholds: CategoryThresholds<T>,
    ) -> Self {
        StageArtifact {
            version: ARTIFACT_VERSION,
            stage,
            projector,
            centers,
            thresholds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: StageArtifact<T> = serde_json::from_str(text)?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "artifact version {} (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        let p = a.projector;
        let projector = ManifoldProjector::from_parts(p.w1, p.w2, p.atoms, p.pca)?;
        Ok(StageArtifact { projector, ..a })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
