//! Model checkpoints: a self-describing JSON document holding the model id,
//! hyperparameters, every parameter block with its shape, optimizer state
//! and the training step. Loading never executes code.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamState, DenseMatrix, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "localescape-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Constructive model θ.
    Constructive,
    /// Subsequence reconstruction policy ψ.
    Subseq,
    /// Regional reconstruction policy φ.
    Regional,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Constructive => "constructive",
            ModelKind::Subseq => "subseq",
            ModelKind::Regional => "regional",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: (usize, usize),
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub adam: Adam,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub hyper: serde_json::Value,
    pub step: u64,
    pub params: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

impl Checkpoint {
    pub fn new<H: Serialize>(model: ModelKind, hyper: &H, params: &ParamSet, step: u64) -> Result<Self> {
        let hyper = serde_json::to_value(hyper).map_err(|e| Error::format(None, e.to_string()))?;
        let params = params
            .blocks()
            .iter()
            .map(|b| TensorRecord { name: b.name.clone(), shape: b.value.shape(), values: b.value.data.clone() })
            .collect();
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            hyper,
            step,
            params,
            optimizer: None,
        })
    }

    pub fn with_optimizer(mut self, adam: Adam, state: AdamState) -> Self {
        self.optimizer = Some(OptimizerRecord { adam, state });
        self
    }

    pub fn hyper<H: for<'de> Deserialize<'de>>(&self) -> Result<H> {
        serde_json::from_value(self.hyper.clone()).map_err(|e| Error::format(None, format!("hyperparameters: {e}")))
    }

    /// Copies the stored values into `params`, whose shape table (built from
    /// the stored hyperparameters) must match exactly.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        let mut blocks = Vec::with_capacity(self.params.len());
        for t in &self.params {
            if t.values.len() != t.shape.0 * t.shape.1 {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    expected: t.shape,
                    found: (t.values.len(), 1),
                });
            }
            blocks.push((t.name.clone(), DenseMatrix::from_vec(t.shape.0, t.shape.1, t.values.clone())));
        }
        params.load_values(blocks)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format(None, e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str, expected: ModelKind) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::format(None, format!("checkpoint: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::format(None, "not a checkpoint file"));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let ck: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::format(None, format!("checkpoint: {e}")))?;
        if ck.model != expected {
            return Err(Error::ModelIdMismatch {
                expected: expected.as_str().to_string(),
                found: ck.model.as_str().to_string(),
            });
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, ck.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path, expected: ModelKind) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(None, format!("not UTF-8: {e}")))?;
    Checkpoint::from_json(text, expected)
}
