//! Self-describing checkpoint files.
//!
//! Layout: `CLSR`, format version (u32), tensor count (u32), then per tensor
//! its name, rows, cols (u64) and row-major little-endian f64 values, then a
//! UTF-8 JSON metadata block, then a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{check_header, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::ModelParams;
use crate::svd::SvdFactors;

pub const MAGIC: &[u8; 4] = b"CLSR";
pub const FORMAT_VERSION: u32 = 1;

const SVD_U: &str = "svd.u";
const SVD_S: &str = "svd.s";
const SVD_V: &str = "svd.v";

/// One validation evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub loss_bpr: f64,
    pub loss_cl: f64,
    pub val_recall20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub seed: u64,
    pub fingerprint: String,
    pub users: usize,
    pub items: usize,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub epochs_run: usize,
    pub history: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub svd: Option<SvdFactors>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(&str, DenseMatrix)> = self
            .params
            .names()
            .into_iter()
            .zip(self.params.tensors().into_iter().cloned())
            .collect();
        if let Some(svd) = &self.svd {
            tensors.push((SVD_U, svd.u.clone()));
            tensors.push((
                SVD_S,
                DenseMatrix::from_vec(1, svd.rank(), svd.singular_values.clone())?,
            ));
            tensors.push((SVD_V, svd.v.clone()));
        }
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(tensors.len() as u32);
        for (name, t) in &tensors {
            w.str(name);
            w.u64(t.rows() as u64);
            w.u64(t.cols() as u64);
            w.f64s(t.values());
        }
        w.str(&serde_json::to_string(&self.meta)?);
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        check_header(data, MAGIC, FORMAT_VERSION, "checkpoint")?;
        let mut r = Reader::open(data, "checkpoint")?;
        r.take(8, "header")?;
        let count = r.u32("tensor count")?;
        let mut named = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name}: size overflow")))?;
            let values = r.f64s(n, &name)?;
            named.push((name, DenseMatrix::from_vec(rows, cols, values)?));
        }
        let meta: CheckpointMeta = serde_json::from_str(&r.str("metadata")?)
            .map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("checkpoint: {} trailing bytes", r.remaining())));
        }

        let mut take = |n: &str| -> Option<DenseMatrix> {
            let pos = named.iter().position(|(name, _)| name == n)?;
            Some(named.swap_remove(pos).1)
        };
        let svd = match (take(SVD_U), take(SVD_S), take(SVD_V)) {
            (Some(u), Some(s), Some(v)) => Some(SvdFactors {
                u,
                singular_values: s.into_values(),
                v,
            }),
            (None, None, None) => None,
            _ => return Err(Error::Corrupt("incomplete svd factors".into())),
        };
        let params = ModelParams::from_named(named)?;
        Ok(Checkpoint { params, svd, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&data)
    }
}
