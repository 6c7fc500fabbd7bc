//! Versioned JSON checkpoints. Floats are written with the shortest
//! round-trip decimal, so save → load reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuit::VLayerParams;
use crate::error::{Error, Result};
use crate::model::AnyModel;
use crate::networks::{Activation, ConnectionMode, MlpModel, QinnModel};

pub const FORMAT: &str = "qinn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CheckpointBody {
    Qinn {
        dim: usize,
        depth: usize,
        classes: usize,
        mode: ConnectionMode,
        /// One row of `2N−3` angles per layer.
        alphas: Vec<Vec<f64>>,
        lambdas: Vec<f64>,
        head_w: Vec<f64>,
        head_b: Vec<f64>,
        seed: Option<u64>,
    },
    Mlp {
        sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub body: CheckpointBody,
}

impl From<&QinnModel> for Checkpoint {
    fn from(m: &QinnModel) -> Self {
        Self::wrap(CheckpointBody::Qinn {
            dim: m.dim(),
            depth: m.depth(),
            classes: m.classes(),
            mode: m.mode(),
            alphas: m.layers().iter().map(|l| l.alpha().to_vec()).collect(),
            lambdas: m.lambdas().to_vec(),
            head_w: m.head_w().to_vec(),
            head_b: m.head_b().to_vec(),
            seed: m.seed(),
        })
    }
}

impl From<&MlpModel> for Checkpoint {
    fn from(m: &MlpModel) -> Self {
        Self::wrap(CheckpointBody::Mlp {
            sizes: m.sizes().to_vec(),
            activation: m.activation(),
            weights: m.weights().to_vec(),
            biases: m.biases().to_vec(),
            seed: m.seed(),
        })
    }
}

impl From<&AnyModel> for Checkpoint {
    fn from(m: &AnyModel) -> Self {
        match m {
            AnyModel::Qinn(q) => q.into(),
            AnyModel::Mlp(p) => p.into(),
        }
    }
}

impl Checkpoint {
    fn wrap(body: CheckpointBody) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            body,
        }
    }

    /// Rebuilds the model, re-running all shape checks.
    pub fn into_model(self) -> Result<AnyModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        match self.body {
            CheckpointBody::Qinn {
                dim,
                depth,
                classes,
                mode,
                alphas,
                lambdas,
                head_w,
                head_b,
                seed,
            } => {
                if alphas.len() != depth {
                    return Err(Error::DimensionMismatch {
                        expected: depth,
                        actual: alphas.len(),
                    });
                }
                let layers = alphas
                    .into_iter()
                    .map(|a| VLayerParams::new(dim, a))
                    .collect::<Result<Vec<_>>>()?;
                let m = QinnModel::from_parts(dim, classes, mode, layers, lambdas, head_w, head_b)?;
                Ok(AnyModel::Qinn(m.with_seed(seed)))
            }
            CheckpointBody::Mlp {
                sizes,
                activation,
                weights,
                biases,
                seed,
            } => Ok(AnyModel::Mlp(MlpModel::from_parts(sizes, weights, biases, activation)?.with_seed(seed))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<()> {
    let json = Checkpoint::from(model).to_json()?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&s)?.into_model()
}
