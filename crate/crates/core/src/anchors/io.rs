//! Anchor file: `PANDANCH` | version u32 | C u32 | d u32 | C·d f32 row-major |
//! C × (u32 byte length, UTF-8 class name). All integers little-endian.

use std::fs;
use std::path::Path;

use super::SemanticAnchors;
use crate::binfmt::{Reader, Writer};
use crate::error::{PandError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const ANCHOR_MAGIC: &[u8; 8] = b"PANDANCH";
pub const ANCHOR_VERSION: u32 = 1;

pub fn write_anchors<T: Scalar>(anchors: &SemanticAnchors<T>) -> Result<Vec<u8>> {
    anchors.ensure_frozen("saving anchors")?;
    let mut w = Writer::default();
    w.magic(ANCHOR_MAGIC);
    w.u32(ANCHOR_VERSION);
    w.u32(anchors.num_classes() as u32);
    w.u32(anchors.dim() as u32);
    for &x in anchors.matrix().as_slice() {
        w.f32(x.as_f32());
    }
    for name in anchors.class_names() {
        w.str(name);
    }
    Ok(w.buf)
}

pub fn read_anchors<T: Scalar>(bytes: &[u8]) -> Result<SemanticAnchors<T>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(ANCHOR_MAGIC)?;
    r.version(ANCHOR_VERSION)?;
    let c = r.u32("header field C")? as usize;
    let d = r.u32("header field d")? as usize;
    let payload = r.f32s(c * d, "payload")?;
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        names.push(r.str(&format!("class name {i}"))?);
    }
    r.finish("class names")?;
    let data = payload
        .into_iter()
        .map(|x| T::from_f32(x).expect("f32 widens"))
        .collect();
    SemanticAnchors::new_frozen(Matrix::from_vec(c, d, data)?, names)
}

pub fn save_anchors<T: Scalar>(anchors: &SemanticAnchors<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_anchors(anchors)?;
    fs::write(path, bytes).map_err(|e| PandError::io(path, e))
}

pub fn load_anchors<T: Scalar>(path: impl AsRef<Path>) -> Result<SemanticAnchors<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PandError::io(path, e))?;
    read_anchors(&bytes)
}
