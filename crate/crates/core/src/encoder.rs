//! Frozen dual-encoder contract.
//!
//! Anything that can turn an input batch into `d`-vectors and a prompt token
//! sequence into a `d`-vector (plus the vector-Jacobian product of the latter
//! with respect to its tokens) can act as the teacher. The crate ships a toy
//! implementation in [`crate::toy`]; pretrained towers are wrapped the same
//! way outside the crate.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::anchors::Prompt;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{hash_slice, Matrix};

pub trait ImageEncoder<T: Scalar>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Raw (unnormalized) features, one row per input row.
    fn encode_images(&self, images: &Matrix<T>) -> Result<Matrix<T>>;
    fn visit_parameters(&self, visit: &mut dyn FnMut(&str, &[T]));
}

pub trait TextEncoder<T: Scalar>: Send + Sync {
    fn token_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Raw (unnormalized) text feature for one prompt.
    fn encode_prompt(&self, prompt: &Prompt<'_, T>) -> Result<Vec<T>>;
    /// Pull `∂L/∂output` back to `∂L/∂tokens` (one row per prompt token).
    fn prompt_vjp(&self, prompt: &Prompt<'_, T>, grad_output: &[T]) -> Result<Matrix<T>>;
    fn visit_parameters(&self, visit: &mut dyn FnMut(&str, &[T]));
}

/// SHA-256 over exact parameter bit patterns.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn from_hasher(h: Sha256) -> Self {
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        Fingerprint(out)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &hex::encode(self.0)[..16])
    }
}

/// Frozen image + text encoders. Only shared references are ever handed out.
pub struct EncoderPair<T: Scalar> {
    image: Box<dyn ImageEncoder<T>>,
    text: Box<dyn TextEncoder<T>>,
}

impl<T: Scalar> EncoderPair<T> {
    pub fn new(image: Box<dyn ImageEncoder<T>>, text: Box<dyn TextEncoder<T>>) -> Result<Self> {
        if image.output_dim() != text.output_dim() {
            return Err(crate::PandError::Shape {
                context: "image/text embedding dimension",
                expected: text.output_dim(),
                got: image.output_dim(),
            });
        }
        Ok(Self { image, text })
    }

    pub fn image(&self) -> &dyn ImageEncoder<T> {
        self.image.as_ref()
    }

    pub fn text(&self) -> &dyn TextEncoder<T> {
        self.text.as_ref()
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim()
    }

    /// Always false: no code path in the crate updates encoder weights.
    pub fn trainable(&self) -> bool {
        false
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut count = |_: &str, p: &[T]| n += p.len();
        self.image.visit_parameters(&mut count);
        self.text.visit_parameters(&mut count);
        n
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        let mut feed = |name: &str, p: &[T]| {
            h.update(name.as_bytes());
            hash_slice(&mut h, p);
        };
        self.image.visit_parameters(&mut feed);
        self.text.visit_parameters(&mut feed);
        Fingerprint::from_hasher(h)
    }
}

impl<T: Scalar> fmt::Debug for EncoderPair<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderPair")
            .field("embed_dim", &self.embed_dim())
            .field("token_dim", &self.text.token_dim())
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}
