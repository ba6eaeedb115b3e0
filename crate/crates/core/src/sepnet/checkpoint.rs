//! Checkpoint files: `AVCK`, a little-endian `u32` header length, the JSON
//! header, then every parameter tensor in an `AVT1` container.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelVariant, SeparationModel, VisualBranch};
use crate::container::{NamedTensor, TensorContainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub frozen_set: Vec<String>,
    pub training_step: u64,
    pub n_classes: usize,
}

impl SeparationModel {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            variant: self.variant(),
            config: self.config.clone(),
            frozen_set: self.frozen_set(),
            training_step: self.training_step,
            n_classes: self.n_classes,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut c = TensorContainer::new();
        for e in self.params.entries() {
            c.push(NamedTensor::from_tensor(e.name.clone(), &e.value));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&c.to_bytes()?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.config.variant != header.variant {
            return Err(bad("header variant disagrees with its config"));
        }
        let container = TensorContainer::read_from(Cursor::new(&bytes[8 + hlen..]))
            .map_err(|e| Error::Checkpoint(format!("tensors: {e}")))?;
        let mut model = SeparationModel::new(header.config.clone(), header.n_classes, 0)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if container.entries.len() != model.params.entries().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                container.entries.len(),
                model.params.entries().len()
            )));
        }
        for t in &container.entries {
            let id = model.params.id(&t.name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
            let value = t.to_tensor().map_err(|e| Error::Checkpoint(e.to_string()))?;
            if value.shape() != model.params.value(id).shape() {
                return Err(Error::Checkpoint(format!("tensor {} has shape {:?}", t.name, value.shape())));
            }
            *model.params.value_mut(id) = value;
        }
        for g in model.frozen_set() {
            model.params.unfreeze(&g);
        }
        for g in &header.frozen_set {
            model.params.freeze(g);
        }
        model.training_step = header.training_step;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Copies one visual branch from a pretrained model whose branch
    /// configuration matches this model's.
    pub fn load_branch_from(&mut self, source: &SeparationModel, branch: VisualBranch) -> Result<()> {
        let (a, b) = (&self.config, &source.config);
        if a.visual_dim != b.visual_dim
            || a.resolution != b.resolution
            || a.visual_field != b.visual_field
            || a.visual_temporal_kernel != b.visual_temporal_kernel
            || a.fps != b.fps
        {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint has an incompatible {:?} branch configuration",
                source.variant(),
                branch
            )));
        }
        self.params.copy_group_from(&source.params, branch.group()).map_err(Error::Checkpoint)
    }
}
