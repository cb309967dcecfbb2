//! Single-file checkpoints.
//!
//! ```text
//! b"DTSGCKPT" | u32 version | u64 manifest_len | manifest JSON | payload
//! ```
//!
//! The manifest lists every tensor with its tag, shape, dtype and byte offset
//! into the payload; the payload is raw little-endian `f64`. Adam moments are
//! stored the same way under the `optimizer` entry.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{DTsg, InferenceModel, ModelConfig};
use crate::params::{ParamStore, Tag};
use crate::tensor::Mat;
use crate::train::{Adam, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub tag: Tag,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m: TensorEntry,
    v: TensorEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<MomentEntry>,
}

/// The training loop's random streams are pure functions of the seed and the
/// number of completed epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    steps: u64,
    config_hash: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    d_in: usize,
    vocab: Vec<String>,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub d_in: usize,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub epoch: usize,
    pub steps: u64,
    pub rng: Option<RngState>,
    pub optimizer: Option<Adam>,
}

/// 64-bit FNV-1a of the canonical JSON of both configs.
pub fn config_hash(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let s = serde_json::to_string(&(model, train)).expect("configs serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn from_model(model: &DTsg) -> Self {
        Self {
            model_config: model.config.clone(),
            train_config: None,
            d_in: model.d_in,
            vocab: model.vocab.clone(),
            store: model.store.clone(),
            epoch: 0,
            steps: 0,
            rng: None,
            optimizer: None,
        }
    }

    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Self {
            train_config: Some(cfg.clone()),
            epoch: state.epoch,
            steps: state.steps,
            rng: Some(RngState { seed: cfg.seed, epochs_completed: state.epoch }),
            optimizer: Some(state.optimizer.clone()),
            ..Self::from_model(&state.model)
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.model_config, self.train_config.as_ref())
    }

    /// Keeps only backbone tensors; optimizer state is dropped.
    pub fn export_backbone(&self) -> Self {
        Self { store: self.store.retain_tag(Tag::Backbone), optimizer: None, ..self.clone() }
    }

    pub fn is_backbone_only(&self) -> bool {
        self.store.iter().all(|(_, p)| p.tag == Tag::Backbone)
    }

    /// Rebuilds the full training model. Fails on exported checkpoints.
    pub fn to_model(&self) -> Result<DTsg> {
        let mut m = DTsg::new(self.model_config.clone(), self.vocab.clone(), self.d_in, 0)?;
        if self.store.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, full model needs {}",
                self.store.len(),
                m.store.len()
            )));
        }
        m.store.load_from(&self.store)?;
        Ok(m)
    }

    pub fn inference(&self) -> Result<InferenceModel> {
        InferenceModel::from_store(self.model_config.clone(), self.vocab.clone(), self.d_in, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload: Vec<u8> = Vec::new();
        let mut put = |name: &str, tag: Tag, m: &Mat| {
            let offset = payload.len() as u64;
            for &v in &m.data {
                payload.write_f64::<LittleEndian>(v).expect("vec write");
            }
            TensorEntry { name: name.to_string(), tag, shape: [m.rows, m.cols], dtype: "f64".into(), offset }
        };
        let tensors: Vec<TensorEntry> = self.store.iter().map(|(_, p)| put(&p.name, p.tag, &p.value)).collect();
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let mut moments = Vec::new();
            for (id, p) in self.store.iter() {
                if let (Some(m), Some(v)) = (&opt.m[id.0], &opt.v[id.0]) {
                    moments.push(MomentEntry { name: p.name.clone(), m: put(&p.name, p.tag, m), v: put(&p.name, p.tag, v) });
                }
            }
            OptimizerManifest { beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, step: opt.step, moments }
        });
        let manifest = Manifest {
            epoch: self.epoch,
            steps: self.steps,
            config_hash: self.config_hash(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            d_in: self.d_in,
            vocab: self.vocab.tokens().to_vec(),
            rng: self.rng,
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&manifest)?;
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        f.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        f.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(&payload).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = f.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = f.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        f.read_exact(&mut json).map_err(io)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload).map_err(io)?;

        let read = |e: &TensorEntry| -> Result<Mat> {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let bytes = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Ok(Mat::from_vec(e.shape[0], e.shape[1], data))
        };
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            store.add(e.name.clone(), e.tag, read(e)?);
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut opt = Adam::new(&store, o.beta1, o.beta2, o.eps);
                opt.step = o.step;
                for me in &o.moments {
                    let id = store.id(&me.name).ok_or_else(|| Error::Checkpoint(format!("moment for unknown tensor {}", me.name)))?;
                    opt.m[id.0] = Some(read(&me.m)?);
                    opt.v[id.0] = Some(read(&me.v)?);
                }
                Some(opt)
            }
        };
        let ckpt = Self {
            model_config: manifest.model,
            train_config: manifest.train,
            d_in: manifest.d_in,
            vocab: Vocab::from_saved(manifest.vocab)?,
            store,
            epoch: manifest.epoch,
            steps: manifest.steps,
            rng: manifest.rng,
            optimizer,
        };
        if ckpt.config_hash() != manifest.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored configs".into()));
        }
        Ok(ckpt)
    }
}
