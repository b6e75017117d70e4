use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::data::{LabeledBatch, SyntheticSpec};
use super::layout::Layout;
use super::model::BranchedModel;
use super::task::TaskSpec;
use super::MtlError;

pub const MODEL_FORMAT: &str = "mtlab-model";
pub const DATASET_FORMAT: &str = "mtlab-dataset";
pub const ENVELOPE_VERSION: u32 = 1;

/// JSON envelope of a trained model. Parameters are listed in
/// [`BranchedModel::parameters`] order, each with its shape and flat values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub layout: Layout,
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub tasks: Vec<TaskSpec>,
    pub parameters: Vec<Tensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &BranchedModel, seed: u64, config_hash: &str) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: ENVELOPE_VERSION,
            seed,
            config_hash: config_hash.into(),
            layout: model.layout().clone(),
            input_dim: model.input_dim(),
            widths: model.widths().to_vec(),
            tasks: model.tasks().to_vec(),
            parameters: model.parameters().into_iter().cloned().collect(),
        }
    }

    pub fn to_model(&self) -> Result<BranchedModel, MtlError> {
        if self.format != MODEL_FORMAT || self.version != ENVELOPE_VERSION {
            return Err(MtlError::Checkpoint(format!(
                "unsupported envelope {} v{}",
                self.format, self.version
            )));
        }
        let mut model =
            BranchedModel::build(self.layout.clone(), self.input_dim, &self.widths, self.tasks.clone(), self.seed)?;
        let slots = model.parameters_mut();
        if slots.len() != self.parameters.len() {
            return Err(MtlError::Checkpoint(format!(
                "{} parameter tensors stored, layout needs {}",
                self.parameters.len(),
                slots.len()
            )));
        }
        for (i, (slot, value)) in slots.into_iter().zip(&self.parameters).enumerate() {
            if slot.shape() != value.shape() {
                return Err(MtlError::Checkpoint(format!(
                    "parameter {i} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(model)
    }
}

/// JSON envelope of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEnvelope {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub spec: SyntheticSpec,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl DatasetEnvelope {
    pub fn new(spec: &SyntheticSpec, train: LabeledBatch, test: LabeledBatch, config_hash: &str) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: ENVELOPE_VERSION,
            seed: spec.seed,
            config_hash: config_hash.into(),
            spec: spec.clone(),
            train,
            test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtlnet::standard_tasks;

    #[test]
    fn model_round_trips_through_json() {
        let m = BranchedModel::build(Layout::sharing_level(3, 3, 2), 6, &[5, 4, 3], standard_tasks(3), 11).unwrap();
        let ck = ModelCheckpoint::from_model(&m, 11, "abc");
        let text = serde_json::to_string(&ck).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = BranchedModel::build(Layout::all_shared(3, 2), 6, &[5], standard_tasks(3), 0).unwrap();
        let mut ck = ModelCheckpoint::from_model(&m, 0, "");
        ck.parameters[0] = Tensor::zeros(&[2, 2]);
        assert!(matches!(ck.to_model(), Err(MtlError::Checkpoint(_))));
        ck.parameters.pop();
        assert!(ck.to_model().is_err());
    }
}
