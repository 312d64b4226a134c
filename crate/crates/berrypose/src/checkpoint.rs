//! Self-describing checkpoint archives.
//!
//! A checkpoint is a single file carrying everything inference needs:
//! weights, the model configuration, the grid geometry, the anchor priors
//! and the dataset mean size — plus the training configuration, epoch and
//! seed for exact resumption. Binary layout:
//!
//! ```text
//! "BPCK"  u32 version  u64 json_len  <json meta>  <f32 LE tensor data>
//! ```
//!
//! Tensor entries in the meta block give `(name, shape, offset, len)` into
//! the data section. `kind: backbone` archives carry only `backbone.*`
//! tensors (the 2D-pretraining export).

use crate::network::{Model, ModelConfig, NetworkError};
use crate::pipeline::TrainConfig;
use berrypose_core::codec::{AnchorSet, CodecError, GridSpec, MeanSize};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: corrupt meta block: {source}")]
    BadMeta {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: tensor {name} overruns the data section")]
    TensorBounds { path: String, name: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Backbone,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridParams {
    pub input_width: u32,
    pub input_height: u32,
    pub stride: u32,
    pub anchors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub grid: GridParams,
    pub anchor_priors: Vec<(f64, f64)>,
    pub mean_size_hwl: [f64; 3],
    pub epoch: u32,
    /// Base RNG seed; together with `epoch` this is the complete random
    /// state of a run (per-epoch streams are derived from both).
    pub seed: u64,
    pub train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

impl CheckpointMeta {
    pub fn grid_spec(&self) -> Result<GridSpec, CodecError> {
        GridSpec::new(
            self.grid.input_width,
            self.grid.input_height,
            self.grid.stride,
            self.grid.anchors,
        )
    }

    pub fn anchor_set(&self) -> Result<AnchorSet, CodecError> {
        AnchorSet::new(self.anchor_priors.clone())
    }

    pub fn mean_size(&self) -> Result<MeanSize, CodecError> {
        MeanSize::new(
            self.mean_size_hwl[0],
            self.mean_size_hwl[1],
            self.mean_size_hwl[2],
        )
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    path: &Path,
    kind: CheckpointKind,
    model: &Model,
    grid: &GridSpec,
    anchors: &AnchorSet,
    means: &MeanSize,
    epoch: u32,
    seed: u64,
    train: Option<&TrainConfig>,
    include_optimizer: bool,
) -> Result<(), CheckpointError> {
    let mut tensors = match kind {
        CheckpointKind::Full => model.named_tensors(),
        CheckpointKind::Backbone => model.backbone_tensors(),
    };
    if include_optimizer && kind == CheckpointKind::Full {
        tensors.extend(model.optimizer_tensors());
    }

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }

    let meta = CheckpointMeta {
        kind,
        model: model.config.clone(),
        grid: GridParams {
            input_width: grid.input_width,
            input_height: grid.input_height,
            stride: grid.stride,
            anchors: grid.anchors,
        },
        anchor_priors: anchors.priors().to_vec(),
        mean_size_hwl: [means.h, means.w, means.l],
        epoch,
        seed,
        train: train.cloned(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&json).map_err(|e| io_err(path, e))?;
    for (_, _, data) in &tensors {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.display().to_string() });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(|e| io_err(path, e))?;
    let json_len = u64::from_le_bytes(buf8) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|e| io_err(path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| CheckpointError::BadMeta {
        path: path.display().to_string(),
        source: e,
    })?;

    let mut data_bytes = Vec::new();
    r.read_to_end(&mut data_bytes).map_err(|e| io_err(path, e))?;
    let total_floats = (data_bytes.len() / 4) as u64;

    let mut tensors = BTreeMap::new();
    for entry in &meta.tensors {
        if entry.offset + entry.len > total_floats {
            return Err(CheckpointError::TensorBounds {
                path: path.display().to_string(),
                name: entry.name.clone(),
            });
        }
        let start = (entry.offset * 4) as usize;
        let end = start + (entry.len * 4) as usize;
        let mut data = Vec::with_capacity(entry.len as usize);
        for chunk in data_bytes[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Rebuilds a full model (weights and, when present, optimizer state) from
/// a `kind: full` checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model, CheckpointError> {
    let mut model = Model::build(ckpt.meta.model.clone())?;
    let weights: BTreeMap<String, (Vec<usize>, Vec<f32>)> = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with("opt."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    model.load_named_tensors(&weights, false)?;
    model.load_optimizer_tensors(&ckpt.tensors)?;
    Ok(model)
}

/// Loads `kind: backbone` weights into a freshly built model, leaving the
/// head at its initialization. Fails when any backbone tensor is missing
/// or unexpected.
pub fn load_backbone_into(model: &mut Model, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let weights: BTreeMap<String, (Vec<usize>, Vec<f32>)> = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with("opt."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    model.load_named_tensors(&weights, true)?;
    Ok(())
}

/// Convenience for tests and tools: a model plus the codec companions.
pub fn restore_runtime(
    path: &Path,
) -> Result<(Model, GridSpec, AnchorSet, MeanSize, CheckpointMeta), CheckpointError> {
    let ckpt = load(path)?;
    let model = restore_model(&ckpt)?;
    let grid = ckpt.meta.grid_spec()?;
    let anchors = ckpt.meta.anchor_set()?;
    let means = ckpt.meta.mean_size()?;
    Ok((model, grid, anchors, means, ckpt.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneKind;

    fn tiny_model() -> Model {
        Model::build(ModelConfig {
            backbone: BackboneKind::Tiny,
            input_width: 64,
            input_height: 64,
            anchors: 2,
            channels: vec![4, 8, 8, 16, 16, 16],
            seed: 9,
        })
        .unwrap()
    }

    fn companions() -> (GridSpec, AnchorSet, MeanSize) {
        (
            GridSpec::new(64, 64, 32, 2).unwrap(),
            AnchorSet::new(vec![(10.0, 10.0), (20.0, 20.0)]).unwrap(),
            MeanSize::new(0.04, 0.03, 0.03).unwrap(),
        )
    }

    #[test]
    fn full_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpck");
        let model = tiny_model();
        let (grid, anchors, means) = companions();
        save(
            &path,
            CheckpointKind::Full,
            &model,
            &grid,
            &anchors,
            &means,
            3,
            77,
            None,
            true,
        )
        .unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.meta.epoch, 3);
        assert_eq!(ckpt.meta.seed, 77);
        let restored = restore_model(&ckpt).unwrap();
        for ((n1, _, a), (_, _, b)) in model
            .named_tensors()
            .iter()
            .zip(restored.named_tensors().iter())
        {
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "tensor {n1} not bit-identical"
            );
        }
    }

    #[test]
    fn backbone_checkpoint_loads_into_fresh_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bpck");
        let model = tiny_model();
        let (grid, anchors, means) = companions();
        save(
            &path,
            CheckpointKind::Backbone,
            &model,
            &grid,
            &anchors,
            &means,
            0,
            0,
            None,
            false,
        )
        .unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.meta.kind, CheckpointKind::Backbone);
        assert!(ckpt.tensors.keys().all(|k| k.starts_with("backbone.")));
        let mut fresh = tiny_model();
        load_backbone_into(&mut fresh, &ckpt).unwrap();
        for ((n, _, a), (_, _, b)) in model
            .backbone_tensors()
            .iter()
            .zip(fresh.backbone_tensors().iter())
        {
            assert!(a == b, "backbone tensor {n} differs after import");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bpck");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic { .. })));
    }
}
