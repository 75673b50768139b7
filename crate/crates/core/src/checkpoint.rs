//! Binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"DHAGCKPT"  u32 format version
//! u64 header length, JSON header
//! u32 tensor count, then per tensor:
//!   u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 values
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, NormMode, NormStats};
use crate::error::{DhagError, Result};
use crate::model::{Architecture, DhagModel};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DHAGCKPT";
pub const FORMAT_VERSION: u32 = 1;

const NORM_SHIFT: &str = "normalizer.shift";
const NORM_SCALE: &str = "normalizer.scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_schema: Option<FeatureSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_mode: Option<NormMode>,
    /// Free-form run metadata, e.g. the resolved configuration.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// A trained model with everything needed to score raw input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DhagModel,
    pub feature_schema: Option<FeatureSchema>,
    pub label_column: Option<String>,
    pub norm_stats: Option<NormStats>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: DhagModel) -> Self {
        Checkpoint {
            model,
            feature_schema: None,
            label_column: None,
            norm_stats: None,
            metadata: serde_json::Value::Null,
        }
    }

    /// Applies the stored normalizer (if any) to raw features.
    pub fn prepare(&self, x: &Tensor) -> Result<Tensor> {
        match &self.norm_stats {
            Some(s) => s.apply_tensor(x),
            None => Ok(x.clone()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            architecture: self.model.arch.clone(),
            feature_schema: self.feature_schema.clone(),
            label_column: self.label_column.clone(),
            norm_mode: self.norm_stats.as_ref().map(|s| s.mode),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| DhagError::Checkpoint(format!("cannot encode header: {e}")))?;

        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = self
            .model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
            .collect();
        if let Some(s) = &self.norm_stats {
            tensors.push((NORM_SHIFT.into(), vec![s.shift.len()], &s.shift));
            tensors.push((NORM_SCALE.into(), vec![s.scale.len()], &s.scale));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes).map_err(|e| match e {
            DhagError::Checkpoint(m) => DhagError::Checkpoint(format!(
                "{m} (this build reads format version {FORMAT_VERSION})"
            )),
            other => other,
        })
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(DhagError::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DhagError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| DhagError::Checkpoint(format!("bad header: {e}")))?;
        header
            .architecture
            .validate()
            .map_err(|e| DhagError::Checkpoint(format!("bad architecture: {e}")))?;

        let count = r.u32()? as usize;
        let mut stored = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DhagError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| DhagError::Checkpoint(format!("tensor `{name}` too large")))?;
            let raw = r
                .take(len.checked_mul(8).ok_or_else(|| {
                    DhagError::Checkpoint(format!("tensor `{name}` too large"))
                })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            stored.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(DhagError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        // the initial values are all overwritten below
        let mut model = DhagModel::new(
            header.architecture.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let names = model.parameter_names();
        let mut iter = stored.into_iter();
        for (name, param) in names.iter().zip(model.parameters_mut()) {
            let (sname, shape, data): (String, Vec<usize>, Vec<f64>) = iter
                .next()
                .ok_or_else(|| DhagError::Checkpoint(format!("missing tensor `{name}`")))?;
            if &sname != name || shape != param.shape() {
                return Err(DhagError::Checkpoint(format!(
                    "expected `{name}` {:?}, found `{sname}` {shape:?}",
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(&data);
        }
        let rest: Vec<_> = iter.collect();
        let norm_stats = match (header.norm_mode, rest.as_slice()) {
            (None, []) => None,
            (Some(mode), [(a, _, shift), (b, _, scale)])
                if a == NORM_SHIFT
                    && b == NORM_SCALE
                    && shift.len() == header.architecture.input_dim
                    && scale.len() == shift.len() =>
            {
                Some(NormStats {
                    mode,
                    shift: shift.clone(),
                    scale: scale.clone(),
                })
            }
            _ => {
                return Err(DhagError::Checkpoint(
                    "normalizer tensors do not match the header".into(),
                ))
            }
        };
        Ok(Checkpoint {
            model,
            feature_schema: header.feature_schema,
            label_column: header.label_column,
            norm_stats,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| DhagError::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DhagError::file(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DhagError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
