//! `BCK1` checkpoints.
//!
//! Layout: 4-byte magic, little-endian `u64` header length, a UTF-8 JSON
//! [`Header`], then every tensor of the header's index as little-endian
//! `f64` values in index order. Tensor names are parameter paths with a
//! role prefix: `student/`, `teacher/`, `adam_m/`, `adam_v/`, or
//! `importance/` (`static`, `dynamic`, `combined`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anymod_core::finetune::{TargetScale, Task, TaskModel};
use anymod_core::masking::ImportanceState;
use anymod_core::model::{Model, ModelConfig};
use anymod_core::optim::{AdamW, AdamWConfig};
use anymod_core::params::ParamStore;
use anymod_core::rng::stream;
use anymod_core::tensor::Mat;
use anymod_core::train::TrainState;
use anymod_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::bav::io_error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

/// Position of the deterministic sample streams; together with the seed it
/// is all the randomness a resumed run needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Echo of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: RngState,
    pub task: Option<Task>,
    pub scale: Option<TargetScale>,
    pub adam: Option<AdamWConfig>,
    /// Per-parameter optimizer update counts, in student order.
    pub adam_t: Option<Vec<u64>>,
    pub importance_beta: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Mat>,
}

fn row(v: &[f64]) -> Mat {
    Mat::from_vec(1, v.len(), v.to_vec())
}

fn push_store(out: &mut Vec<(String, Mat)>, prefix: &str, store: &ParamStore) {
    for (_, p) in store.iter() {
        out.push((format!("{prefix}/{}", p.name), p.value.clone()));
    }
}

impl Checkpoint {
    fn assemble(header: Header, named: Vec<(String, Mat)>) -> Result<Checkpoint> {
        let mut header = header;
        header.tensors = named.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows, cols: m.cols }).collect();
        let mut tensors = BTreeMap::new();
        for (n, m) in named {
            if tensors.insert(n.clone(), m).is_some() {
                return Err(Error::Internal(format!("duplicate tensor {n}")));
            }
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn from_train_state(state: &TrainState, seed: u64, config: serde_json::Value) -> Result<Checkpoint> {
        let mut named = Vec::new();
        push_store(&mut named, "student", &state.model.store);
        push_store(&mut named, "teacher", &state.teacher);
        for ((_, p), (m, v)) in state.model.store.iter().zip(state.optim.m.iter().zip(&state.optim.v)) {
            named.push((format!("adam_m/{}", p.name), m.clone()));
            named.push((format!("adam_v/{}", p.name), v.clone()));
        }
        let imp = &state.importance;
        named.push(("importance/static".into(), row(&imp.s_static)));
        named.push(("importance/dynamic".into(), row(&imp.s_dynamic)));
        named.push(("importance/combined".into(), row(&imp.s_combined)));
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Pretrain,
            model: state.model.cfg.clone(),
            config,
            step: state.step,
            rng: RngState { seed, step: state.step },
            task: None,
            scale: None,
            adam: Some(state.optim.cfg),
            adam_t: Some(state.optim.t.clone()),
            importance_beta: Some(imp.beta),
            tensors: Vec::new(),
        };
        Checkpoint::assemble(header, named)
    }

    pub fn from_task_model(tm: &TaskModel, seed: u64, epoch: u64, config: serde_json::Value) -> Result<Checkpoint> {
        let mut named = Vec::new();
        push_store(&mut named, "student", &tm.model.store);
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Finetune,
            model: tm.model.cfg.clone(),
            config,
            step: epoch,
            rng: RngState { seed, step: epoch },
            task: Some(tm.task),
            scale: Some(tm.scale),
            adam: None,
            adam_t: None,
            importance_beta: None,
            tensors: Vec::new(),
        };
        Checkpoint::assemble(header, named)
    }

    fn prefixed(&self, prefix: &str) -> BTreeMap<String, Mat> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds the student network, including a task head when present.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.header.model, &mut stream(&[0]))?;
        let values = self.prefixed("student");
        if values.contains_key("head.linear.weight") {
            model.ensure_task_head(&mut stream(&[0]));
        }
        if values.len() != model.store.len() {
            return Err(Error::Data(format!("checkpoint has {} student tensors, the model expects {}", values.len(), model.store.len())));
        }
        model.store.load_from(&values)?;
        Ok(model)
    }

    pub fn task_model(&self) -> Result<TaskModel> {
        let task = self.header.task.ok_or_else(|| Error::Data("checkpoint carries no task head".into()))?;
        let mut model = self.model()?;
        let head = model.bind_task_head().ok_or_else(|| Error::Data("checkpoint carries no task head".into()))?;
        Ok(TaskModel { model, head, task, scale: self.header.scale.unwrap_or(TargetScale::IDENTITY) })
    }

    pub fn train_state(&self) -> Result<TrainState> {
        if self.header.kind != CheckpointKind::Pretrain {
            return Err(Error::Data("not a pretraining checkpoint".into()));
        }
        let missing = |what: &str| Error::Data(format!("pretraining checkpoint lacks {what}"));
        let model = self.model()?;
        let mut teacher = model.encoder_store();
        let tv = self.prefixed("teacher");
        if tv.len() != teacher.len() {
            return Err(Error::Data("teacher tensors do not match the encoder".into()));
        }
        teacher.load_from(&tv)?;
        let cfg = self.header.adam.ok_or_else(|| missing("optimizer settings"))?;
        let t = self.header.adam_t.clone().ok_or_else(|| missing("optimizer counts"))?;
        let mut optim = AdamW::new(cfg, &model.store);
        if t.len() != model.store.len() {
            return Err(Error::Data("optimizer counts do not match the parameters".into()));
        }
        optim.t = t;
        for (id, p) in model.store.iter() {
            for (prefix, slot) in [("adam_m", &mut optim.m), ("adam_v", &mut optim.v)] {
                let v = self.tensors.get(&format!("{prefix}/{}", p.name)).ok_or_else(|| missing(prefix))?;
                if !v.same_shape(&slot[id.0]) {
                    return Err(Error::Data(format!("{prefix}/{} has the wrong shape", p.name)));
                }
                slot[id.0] = v.clone();
            }
        }
        let vec_of = |n: &str| -> Result<Vec<f64>> {
            let m = self.tensors.get(&format!("importance/{n}")).ok_or_else(|| missing("importance scores"))?;
            if m.len() != model.n_patches() {
                return Err(Error::Data("importance scores do not match the patch grid".into()));
            }
            Ok(m.data.clone())
        };
        let importance = ImportanceState {
            s_static: vec_of("static")?,
            s_dynamic: vec_of("dynamic")?,
            s_combined: vec_of("combined")?,
            beta: self.header.importance_beta.ok_or_else(|| missing("importance beta"))?,
        };
        Ok(TrainState { step: self.header.step, model, teacher, optim, importance })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Internal(e.to_string()))?;
        let n: usize = self.header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let mut out = Vec::with_capacity(12 + header.len() + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.header.tensors {
            let m = &self.tensors[&t.name];
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::Truncated("checkpoint is shorter than its preamble".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a BCK1 checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::Truncated("checkpoint header is cut short".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} is not supported", header.version)));
        }
        let mut data = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < 8 * n {
                return Err(Error::Truncated(format!("tensor {} is cut short", t.name)));
            }
            let vals = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[8 * n..];
            if tensors.insert(t.name.clone(), Mat::from_vec(t.rows, t.cols, vals)).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", data.len())));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes through a temporary sibling so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        Checkpoint::decode(&bytes)
    }
}
