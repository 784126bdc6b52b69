//! Student checkpoint container.
//!
//! ```text
//! "PANDCKPT" | version u32 | config echo (u32 len, UTF-8) | epoch u32 |
//! optimizer step u32 | tensor count u32 |
//! tensors: (name (u32 len, UTF-8), rows u32, cols u32, rows·cols f32) … |
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! Student parameters come first under their parameter names, followed by
//! the optimizer moments as `opt.m.<name>` / `opt.v.<name>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Backbone, StudentModel};
use crate::binfmt::{Reader, Writer};
use crate::error::{PandError, Result};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PANDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_matrix<T: Scalar>(name: String, m: &Matrix<T>) -> Self {
        Self {
            name,
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|x| x.as_f32()).collect(),
        }
    }

    fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .data
            .iter()
            .map(|&x| T::from_f32(x).expect("f32 widens"))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("checkpoint tensor shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u32,
    pub optimizer_step: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<T: Scalar, B: Backbone<T>>(
        model: &StudentModel<T, B>,
        optimizer: Option<&AdamW<T>>,
        epoch: usize,
        config: &str,
    ) -> Self {
        let params = model.parameters();
        let mut tensors: Vec<NamedTensor> = params
            .iter()
            .map(|(n, m)| NamedTensor::from_matrix(n.clone(), m))
            .collect();
        let mut step = 0;
        if let Some(opt) = optimizer {
            step = opt.step_count() as u32;
            let (m, v) = opt.moments();
            for ((name, _), mm) in params.iter().zip(m) {
                tensors.push(NamedTensor::from_matrix(format!("opt.m.{name}"), mm));
            }
            for ((name, _), vv) in params.iter().zip(v) {
                tensors.push(NamedTensor::from_matrix(format!("opt.v.{name}"), vv));
            }
        }
        Self {
            config: config.to_string(),
            epoch: epoch as u32,
            optimizer_step: step,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copy stored parameters into `model`; names and shapes must match.
    pub fn restore_into<T: Scalar, B: Backbone<T>>(
        &self,
        model: &mut StudentModel<T, B>,
    ) -> Result<()> {
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        let mut loaded = Vec::with_capacity(names.len());
        for name in &names {
            let t = self
                .find(name)
                .ok_or_else(|| PandError::Format(format!("checkpoint missing tensor {name:?}")))?;
            loaded.push(t);
        }
        for (p, t) in model.parameters_mut().into_iter().zip(loaded) {
            if p.shape() != (t.rows, t.cols) {
                return Err(PandError::Format(format!(
                    "tensor {:?} has shape {}×{}, model expects {}×{}",
                    t.name,
                    t.rows,
                    t.cols,
                    p.rows(),
                    p.cols()
                )));
            }
            *p = t.to_matrix();
        }
        Ok(())
    }

    /// Rebuild optimizer moments, if the checkpoint carries them.
    pub fn restore_optimizer<T: Scalar, B: Backbone<T>>(
        &self,
        model: &StudentModel<T, B>,
        optimizer: &mut AdamW<T>,
    ) -> Result<()> {
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in &names {
            let (Some(tm), Some(tv)) = (
                self.find(&format!("opt.m.{name}")),
                self.find(&format!("opt.v.{name}")),
            ) else {
                return Err(PandError::Format(format!(
                    "checkpoint has no optimizer state for {name:?}"
                )));
            };
            m.push(tm.to_matrix());
            v.push(tv.to_matrix());
        }
        optimizer.restore(self.optimizer_step as u64, m, v);
        Ok(())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.magic(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ckpt.config);
    w.u32(ckpt.epoch);
    w.u32(ckpt.optimizer_step);
    w.u32(ckpt.tensors.len() as u32);
    for t in &ckpt.tensors {
        w.str(&t.name);
        w.u32(t.rows as u32);
        w.u32(t.cols as u32);
        for &x in &t.data {
            w.f32(x);
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let config = r.str("config echo")?;
    let epoch = r.u32("epoch")?;
    let optimizer_step = r.u32("optimizer step")?;
    let n = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for i in 0..n {
        let name = r.str(&format!("tensor {i} name"))?;
        let rows = r.u32(&format!("tensor {name:?} rows"))? as usize;
        let cols = r.u32(&format!("tensor {name:?} cols"))? as usize;
        let data = r.f32s(rows * cols, &format!("tensor {name:?} payload"))?;
        tensors.push(NamedTensor {
            name,
            rows,
            cols,
            data,
        });
    }
    let body_len = r.position();
    let stored = r.take(32, "content hash")?;
    r.finish("content hash")?;
    if Sha256::digest(&bytes[..body_len]).as_slice() != stored {
        return Err(PandError::Format("content hash mismatch".into()));
    }
    Ok(Checkpoint {
        config,
        epoch,
        optimizer_step,
        tensors,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| PandError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    read_checkpoint(&fs::read(path).map_err(|e| PandError::io(path, e))?)
}
