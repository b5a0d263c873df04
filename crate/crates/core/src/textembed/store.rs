//! On-disk formats: the columnar embedding store and trained-state blobs.
//!
//! Embedding store layout (little endian):
//! `FLEMB001` magic, `u32` header length, JSON header, `count` × `u32` grid
//! ids in ascending order, then `dimension` columns of `count` × `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::encoder::{decode, f64_bytes, write_safetensors, Encoder, ExtraTensors, Linear};
use super::head::{SigmoidPlacement, TransferHead, HEAD_DIM};
use super::train::{ClassifierHead, TrainingLog};
use super::{Architecture, MaskPolicy, TrainedState};
use crate::error::{Error, Result};
use crate::geogrid::GridId;

const MAGIC: &[u8; 8] = b"FLEMB001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub architecture: Architecture,
    pub dimension: usize,
    pub backbone_checksum: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub architecture: Architecture,
    pub dimension: usize,
    pub backbone_checksum: String,
    pub seed: u64,
    rows: BTreeMap<GridId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(
        architecture: Architecture,
        dimension: usize,
        backbone_checksum: String,
        seed: u64,
    ) -> Self {
        Self {
            architecture,
            dimension,
            backbone_checksum,
            seed,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, grid: GridId, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dimension {
            return Err(Error::Configuration(format!(
                "embedding for grid {grid} has {} values, table dimension is {}",
                values.len(),
                self.dimension
            )));
        }
        self.rows.insert(grid, values);
        Ok(())
    }

    pub fn get(&self, grid: GridId) -> Option<&[f64]> {
        self.rows.get(&grid).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn grids(&self) -> impl Iterator<Item = GridId> + '_ {
        self.rows.keys().copied()
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.dimension)
            .map(|j| format!("emb_{}_{j}", self.architecture))
            .collect()
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            architecture: self.architecture,
            dimension: self.dimension,
            backbone_checksum: self.backbone_checksum.clone(),
            seed: self.seed,
            count: self.rows.len(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out =
            Vec::with_capacity(16 + header.len() + self.rows.len() * (4 + 8 * self.dimension));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for g in self.rows.keys() {
            out.extend_from_slice(&g.value().to_le_bytes());
        }
        for j in 0..self.dimension {
            for v in self.rows.values() {
                out.extend_from_slice(&v[j].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::artifact(path, m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not an embedding store"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: StoreHeader = serde_json::from_slice(body)?;
        let (n, d) = (header.count, header.dimension);
        let ids_at = 12 + hlen;
        let cols_at = ids_at + 4 * n;
        if bytes.len() != cols_at + 8 * n * d {
            return Err(bad("payload length does not match header"));
        }
        let mut grids = Vec::with_capacity(n);
        for c in bytes[ids_at..cols_at].chunks_exact(4) {
            let id = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            grids.push(GridId::new(id).map_err(|e| bad(&e.to_string()))?);
        }
        let values = decode(safetensors::Dtype::F64, &bytes[cols_at..], path)?;
        let mut rows = BTreeMap::new();
        for (i, g) in grids.into_iter().enumerate() {
            let row: Vec<f64> = (0..d).map(|j| values[j * n + i]).collect();
            if rows.insert(g, row).is_some() {
                return Err(bad("duplicate grid id"));
            }
        }
        Ok(Self {
            architecture: header.architecture,
            dimension: d,
            backbone_checksum: header.backbone_checksum,
            seed: header.seed,
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// JSON sidecar next to a trained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSidecar {
    pub architecture: Architecture,
    pub epochs: usize,
    pub seed: u64,
    pub backbone_checksum: String,
    pub mask_policy: MaskPolicy,
    #[serde(default)]
    pub sigmoid_placement: SigmoidPlacement,
    pub metrics: TrainingLog,
}

const SIDECAR: &str = "state.json";
const HEAD_FILE: &str = "head.safetensors";

/// Writes `state` under `dir`: a full encoder checkpoint (plus the
/// classification head) for fine-tuned states, a small safetensors file for
/// transfer heads.
pub fn save_state(
    dir: &Path,
    state: &TrainedState,
    classifier: Option<&ClassifierHead>,
    sidecar: &StateSidecar,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match state {
        TrainedState::Pretrained => {}
        TrainedState::Finetuned(enc) => {
            let extras = classifier
                .map(|c| c.checkpoint_tensors())
                .unwrap_or_default();
            enc.save(dir, &extras)?;
        }
        TrainedState::Head(head) => {
            let h = head.hidden_size();
            let t = |l: &Linear| {
                l.w.t()
                    .as_standard_layout()
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            };
            let blobs = vec![
                (
                    "proj.weight".to_string(),
                    vec![HEAD_DIM, h],
                    f64_bytes(&t(&head.proj)),
                ),
                (
                    "proj.bias".to_string(),
                    vec![HEAD_DIM],
                    f64_bytes(&head.proj.b.to_vec()),
                ),
                (
                    "readout.weight".to_string(),
                    vec![1, HEAD_DIM],
                    f64_bytes(&t(&head.readout)),
                ),
                (
                    "readout.bias".to_string(),
                    vec![1],
                    f64_bytes(&head.readout.b.to_vec()),
                ),
            ];
            write_safetensors(&dir.join(HEAD_FILE), &blobs, None)?;
        }
    }
    write_atomic(
        &dir.join(SIDECAR),
        serde_json::to_string_pretty(sidecar)?.as_bytes(),
    )
}

pub fn read_sidecar(dir: &Path) -> Result<StateSidecar> {
    let p = dir.join(SIDECAR);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::artifact(&p, e.to_string()))
}

/// Loads a state saved by [`save_state`]; `backbone` supplies the hidden
/// width a head must match.
pub fn load_state(dir: &Path, backbone: &Encoder) -> Result<(TrainedState, StateSidecar)> {
    let sidecar = read_sidecar(dir)?;
    let state = match sidecar.architecture {
        Architecture::PretrainedAvg => TrainedState::Pretrained,
        Architecture::FinetunedAvg => TrainedState::Finetuned(Box::new(Encoder::load(dir)?)),
        Architecture::TransferHead => {
            let p = dir.join(HEAD_FILE);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let st = safetensors::SafeTensors::deserialize(&bytes)
                .map_err(|e| Error::artifact(&p, e.to_string()))?;
            let mut tensors: ExtraTensors = HashMap::new();
            for (name, view) in st.tensors() {
                tensors.insert(
                    name,
                    (
                        view.shape().to_vec(),
                        decode(view.dtype(), view.data(), &p)?,
                    ),
                );
            }
            let h = backbone.hidden_size();
            let mut head = TransferHead::zeros(h, sidecar.sigmoid_placement);
            let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
                match tensors.remove(name) {
                    Some((s, d)) if s == shape => Ok(d),
                    _ => Err(Error::artifact(&p, format!("{name} missing or misshapen"))),
                }
            };
            let pw = take("proj.weight", vec![HEAD_DIM, h])?;
            for o in 0..HEAD_DIM {
                for i in 0..h {
                    head.proj.w[[i, o]] = pw[o * h + i];
                }
            }
            head.proj.b = take("proj.bias", vec![HEAD_DIM])?.into();
            let rw = take("readout.weight", vec![1, HEAD_DIM])?;
            head.readout
                .w
                .column_mut(0)
                .assign(&ndarray::Array1::from(rw));
            head.readout.b = take("readout.bias", vec![1])?.into();
            TrainedState::Head(head)
        }
    };
    Ok((state, sidecar))
}
