//! Binary checkpoints: `GBCK`, a little-endian u64 header length, a JSON
//! header, then the f32 payload (parameters, then Adam first and second
//! moments in parameter order).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GBCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    created_unix: u64,
    step: u64,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Training step (epochs completed) at save time.
    pub step: u64,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamStore<f32>) -> Self {
        Self {
            params,
            optimizer: None,
            step: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (_, name, t) in self.params.iter() {
            tensors.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            version: VERSION,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            step: self.step,
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step_count(),
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            w.write_all(&self.payload())?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// The f32 payload exactly as written by [`Checkpoint::save`].
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |ts: &[Tensor<f32>]| {
            for t in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(self.params.tensors());
        if let Some(o) = &self.optimizer {
            put(o.first_moments());
            put(o.second_moments());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format(format!("{}: bad magic", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != VERSION {
            return Err(TensorError::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(TensorError::Format("payload is not a whole number of f32".into()));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let numel: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let expected = if header.optimizer.is_some() { 3 * numel } else { numel };
        if floats.len() != expected {
            return Err(TensorError::Format(format!(
                "payload holds {} values, header describes {expected}",
                floats.len()
            )));
        }
        let read = |base: usize| -> Result<Vec<Tensor<f32>>> {
            header
                .tensors
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let start = base + e.offset;
                    Tensor::new(&e.shape, floats[start..start + n].to_vec())
                })
                .collect()
        };
        let mut params = ParamStore::new();
        for (e, t) in header.tensors.iter().zip(read(0)?) {
            params.add(e.name.clone(), t)?;
        }
        let optimizer = match &header.optimizer {
            Some(o) => Some(Adam::from_parts(o.config, o.step, read(numel)?, read(2 * numel)?)),
            None => None,
        };
        Ok(Self {
            params,
            optimizer,
            step: header.step,
            meta: header.meta,
        })
    }
}
