//! Model and block-set persistence: a single self-describing JSON document
//! per checkpoint — a small header (schema version, role, topology) followed
//! by every parameter as a named flat array of 64-bit reals. The models are
//! tiny, so readability wins over compactness, and the shortest-round-trip
//! float encoding makes save → load → save byte-identical.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockSet;
use crate::data::{IMAGE_SIDE, N_CLASSES};
use crate::error::{DmkdError, Result};
use crate::model::ToyModel;

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Topology and parameters of the reconstruction blocks attached to a
/// distilled student.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSection {
    pub student_channels: usize,
    pub teacher_channels: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// `"teacher"` or `"student"`.
    pub role: String,
    pub width: usize,
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<BlockSection>,
}

fn entries_of(named: Vec<(String, crate::tensor::Tensor)>) -> Vec<ParamEntry> {
    named
        .into_iter()
        .map(|(name, t)| ParamEntry { name, shape: t.shape(), data: t.to_vec() })
        .collect()
}

impl Checkpoint {
    pub fn of_model(model: &ToyModel, role: &str) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            role: role.to_string(),
            width: model.width(),
            input_shape: vec![1, IMAGE_SIDE, IMAGE_SIDE],
            n_classes: N_CLASSES,
            params: entries_of(model.named_params()),
            blocks: None,
        }
    }

    pub fn of_distilled(student: &ToyModel, blocks: &BlockSet) -> Checkpoint {
        let mut ckpt = Checkpoint::of_model(student, "student");
        ckpt.blocks = Some(BlockSection {
            student_channels: blocks.student_channels(),
            teacher_channels: blocks.teacher_channels(),
            params: entries_of(blocks.named_params()),
        });
        ckpt
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| DmkdError::CheckpointInvalid(format!("{}: {e}", path.display())))?;
        ckpt.validate_header()?;
        Ok(ckpt)
    }

    fn validate_header(&self) -> Result<()> {
        let bad = |msg: String| Err(DmkdError::CheckpointInvalid(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        if self.role != "teacher" && self.role != "student" {
            return bad(format!("unknown role {:?}", self.role));
        }
        if self.width == 0 {
            return bad("width must be positive".to_string());
        }
        if self.input_shape != [1, IMAGE_SIDE, IMAGE_SIDE] || self.n_classes != N_CLASSES {
            return bad(format!(
                "unsupported topology: input {:?}, {} classes",
                self.input_shape, self.n_classes
            ));
        }
        Ok(())
    }

    /// Reconstruct the model, insisting that the stored parameter list
    /// matches the topology name-for-name and shape-for-shape.
    pub fn build_model(&self) -> Result<ToyModel> {
        self.validate_header()?;
        let model = ToyModel::with_zero_params(self.width);
        fill_params("model", model.named_params(), &self.params)?;
        Ok(model)
    }

    /// Reconstruct the block set stored alongside a distilled student.
    pub fn build_blocks(&self) -> Result<Option<BlockSet>> {
        let section = match &self.blocks {
            None => return Ok(None),
            Some(section) => section,
        };
        if section.student_channels == 0 || section.teacher_channels == 0 {
            return Err(DmkdError::CheckpointInvalid(
                "block channel counts must be positive".to_string(),
            ));
        }
        let blocks = BlockSet::with_zero_params(section.student_channels, section.teacher_channels);
        fill_params("blocks", blocks.named_params(), &section.params)?;
        Ok(Some(blocks))
    }
}

fn fill_params(
    section: &str,
    expected: Vec<(String, crate::tensor::Tensor)>,
    stored: &[ParamEntry],
) -> Result<()> {
    if expected.len() != stored.len() {
        return Err(DmkdError::CheckpointInvalid(format!(
            "{section}: expected {} parameters, found {}",
            expected.len(),
            stored.len()
        )));
    }
    for ((name, tensor), entry) in expected.into_iter().zip(stored) {
        if entry.name != name {
            return Err(DmkdError::CheckpointInvalid(format!(
                "{section}: expected parameter {name:?}, found {:?}",
                entry.name
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(DmkdError::CheckpointInvalid(format!(
                "{section}: {name} has shape {:?}, expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        if entry.data.len() != tensor.numel() {
            return Err(DmkdError::CheckpointInvalid(format!(
                "{section}: {name} holds {} values for shape {:?}",
                entry.data.len(),
                entry.shape
            )));
        }
        tensor.overwrite_data(&entry.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::data::generate_dataset;
    use crate::rng::{stream_rng, Stream};
    use super::*;

    fn fresh_teacher(seed: u64) -> ToyModel {
        ToyModel::new(8, &mut stream_rng(seed, Stream::TeacherInit))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        let model = fresh_teacher(50);
        Checkpoint::of_model(&model, "teacher").save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn reloaded_model_reproduces_forward_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        let model = fresh_teacher(51);
        Checkpoint::of_model(&model, "teacher").save(&path).unwrap();
        let reloaded = Checkpoint::load(&path).unwrap().build_model().unwrap();
        assert_eq!(reloaded.width(), 8);

        let ds = generate_dataset(51, 4, 2).unwrap();
        for i in 0..ds.len() {
            let (fa, la) = model.forward(&ds.image(i)).unwrap();
            let (fb, lb) = reloaded.forward(&ds.image(i)).unwrap();
            assert_eq!(fa.to_vec(), fb.to_vec());
            assert_eq!(la.to_vec(), lb.to_vec());
        }
    }

    #[test]
    fn distilled_checkpoint_round_trips_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.json");
        let student = ToyModel::new(4, &mut stream_rng(52, Stream::StudentInit));
        let blocks = BlockSet::new(4, 8, 0.5, 0.5, &mut stream_rng(52, Stream::BlockInit));
        Checkpoint::of_distilled(&student, &blocks).save(&path).unwrap();

        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.role, "student");
        let rebuilt = ckpt.build_blocks().unwrap().expect("blocks stored");
        for ((name, a), (_, b)) in blocks.named_params().iter().zip(rebuilt.named_params()) {
            assert_eq!(a.to_vec(), b.to_vec(), "mismatch in {name}");
        }
        assert_eq!(rebuilt.fusion.alpha.to_vec(), vec![0.5]);
        // A plain model checkpoint reports no blocks.
        let teacher_ckpt = Checkpoint::of_model(&fresh_teacher(52), "teacher");
        assert!(teacher_ckpt.build_blocks().unwrap().is_none());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = fresh_teacher(53);

        let mut wrong_role = Checkpoint::of_model(&model, "teacher");
        wrong_role.role = "oracle".to_string();
        wrong_role.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(DmkdError::CheckpointInvalid(_))));

        let mut wrong_shape = Checkpoint::of_model(&model, "teacher");
        wrong_shape.params[0].shape = vec![8, 1, 2, 2];
        assert!(matches!(wrong_shape.build_model(), Err(DmkdError::CheckpointInvalid(_))));

        let mut wrong_name = Checkpoint::of_model(&model, "teacher");
        wrong_name.params[2].name = "conv3.weight".to_string();
        assert!(matches!(wrong_name.build_model(), Err(DmkdError::CheckpointInvalid(_))));

        let mut missing = Checkpoint::of_model(&model, "teacher");
        missing.params.pop();
        assert!(matches!(missing.build_model(), Err(DmkdError::CheckpointInvalid(_))));

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(DmkdError::CheckpointInvalid(_))));

        assert!(matches!(
            Checkpoint::load(&dir.path().join("absent.json")),
            Err(DmkdError::Io(_))
        ));
    }

    #[test]
    fn rebuilt_parameters_stay_trainable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.json");
        Checkpoint::of_model(&fresh_teacher(54), "teacher").save(&path).unwrap();
        let model = Checkpoint::load(&path).unwrap().build_model().unwrap();
        assert!(model.params().iter().all(|p| p.requires_grad()));
    }
}
