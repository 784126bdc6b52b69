//! Frozen teacher: image features projected onto the semantic anchors.

use crate::anchors::{unit_rows, SemanticAnchors};
use crate::encoder::EncoderPair;
use crate::error::{PandError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput<T> {
    /// `N × d`, unit rows.
    pub features: Matrix<T>,
    /// `N × C` raw cosine similarities.
    pub logits: Matrix<T>,
}

impl<T: Scalar> TeacherOutput<T> {
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            logits: self.logits.select_rows(idx),
        }
    }
}

/// `logits = normalize(E_img(x)) · anchorsᵀ`, no scale factor.
pub fn teacher_forward<T: Scalar>(
    pair: &EncoderPair<T>,
    anchors: &SemanticAnchors<T>,
    images: &Matrix<T>,
) -> Result<TeacherOutput<T>> {
    anchors.ensure_frozen("teacher forward")?;
    if pair.embed_dim() != anchors.dim() {
        return Err(PandError::Shape {
            context: "teacher feature dim vs anchor dim",
            expected: anchors.dim(),
            got: pair.embed_dim(),
        });
    }
    let raw = pair.image().encode_images(images)?;
    if raw.cols() != anchors.dim() {
        return Err(PandError::Shape {
            context: "teacher feature dim vs anchor dim",
            expected: anchors.dim(),
            got: raw.cols(),
        });
    }
    let features = unit_rows(&raw, "teacher image features")?;
    let logits = features.matmul_t(anchors.matrix())?;
    Ok(TeacherOutput { features, logits })
}

/// Borrowing handle over the frozen encoder pair and anchors.
#[derive(Clone, Copy)]
pub struct Teacher<'a, T: Scalar> {
    pub pair: &'a EncoderPair<T>,
    pub anchors: &'a SemanticAnchors<T>,
}

impl<'a, T: Scalar> Teacher<'a, T> {
    pub fn new(pair: &'a EncoderPair<T>, anchors: &'a SemanticAnchors<T>) -> Result<Self> {
        anchors.ensure_frozen("building the teacher")?;
        Ok(Self { pair, anchors })
    }

    pub fn forward(&self, images: &Matrix<T>) -> Result<TeacherOutput<T>> {
        teacher_forward(self.pair, self.anchors, images)
    }
}
