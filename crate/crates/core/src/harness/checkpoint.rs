//! JSON checkpoints: config echo plus every named parameter and gate mask.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::encoder::{Model, ParamStore};
use crate::error::{Error, Result};
use crate::gate::GateParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub parameters: Vec<StoredTensor>,
    pub gates: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model) -> Self {
        let parameters = model
            .params
            .names
            .iter()
            .zip(&model.params.tensors)
            .map(|(name, t)| StoredTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        let gates = model
            .gates
            .iter()
            .enumerate()
            .map(|(l, g)| StoredTensor {
                name: format!("gate.block{}", l + 2),
                shape: g.m.shape().to_vec(),
                values: g.m.data().to_vec(),
            })
            .collect();
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            parameters,
            gates,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut store = ParamStore::default();
        for p in &self.parameters {
            store.names.push(p.name.clone());
            store.tensors.push(to_tensor(p)?);
        }
        let gates = self
            .gates
            .iter()
            .map(|g| {
                Ok(GateParams {
                    m: to_tensor(g)?,
                    alpha: self.config.model.alpha,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.config.model.clone(), store, gates)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "checkpoint".into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn to_tensor(s: &StoredTensor) -> Result<Tensor> {
    Tensor::new(s.shape.clone(), s.values.clone()).map_err(|_| Error::Format {
        what: "checkpoint".into(),
        message: format!("tensor {} has {} values for shape {:?}", s.name, s.values.len(), s.shape),
    })
}
