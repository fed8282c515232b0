//! Self-describing checkpoint files.
//!
//! Layout: magic `UCKP`, u32 version, u64 header length, a JSON header, then
//! an optional PCA basis blob (u64 length + bytes) and finally every parameter
//! as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameter};
use crate::error::{Error, Result};
use crate::maskcodec::PcaBasis;
use crate::scenegen::SceneSpec;
use crate::tasks::TaskSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with everything needed to evaluate or attack it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Task set the model was trained for.
    pub tasks: TaskSet,
    pub basis: Option<PcaBasis>,
    /// Per-class weights of the segmentation loss.
    pub class_weights: Option<Vec<f32>>,
    pub scene: Option<SceneSpec>,
    /// Free-form run information (training config, timings).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tasks: TaskSet,
    params: Vec<ParamEntry>,
    class_weights: Option<Vec<f32>>,
    scene: Option<SceneSpec>,
    metadata: serde_json::Value,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::corrupt(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            tasks: self.tasks,
            params: self
                .model
                .params()
                .iter()
                .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
                .collect(),
            class_weights: self.class_weights.clone(),
            scene: self.scene.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 4 * self.model.num_scalars() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let blob = self.basis.as_ref().map(PcaBasis::to_bytes).unwrap_or_default();
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        for p in self.model.params() {
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::corrupt(path, "missing UCKP header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { path: path.into(), found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = r.u64()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
        let blen = r.u64()?;
        let basis = if blen == 0 { None } else { Some(PcaBasis::from_bytes(r.take(blen)?, path)?) };
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f32> = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).unwrap();
            params.push(Parameter { name: entry.name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after parameters"));
        }
        Ok(Checkpoint {
            model: Model::from_parts(header.config, params)?,
            tasks: header.tasks,
            basis,
            class_weights: header.class_weights,
            scene: header.scene,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
