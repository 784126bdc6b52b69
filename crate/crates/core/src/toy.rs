//! Desk-scale stand-in for a pretrained vision-language model.
//!
//! The image tower is a fixed linear map. The text tower reads the last
//! prompt token(s) as the class name and pools the preceding tokens as
//! context:
//!
//! ```text
//! text(p) = K · mean(name tokens) + M · tanh(P · mean(context tokens)) + b
//! ```
//!
//! `K` holds the model's (slightly noisy) knowledge of what each class name
//! looks like; `b` is a shared offset that crowds all class features towards
//! one direction. Context vectors can only act through `M tanh(P ·)`, which
//! is able to cancel `b`, so a well-calibrated prompt sharpens the anchors
//! while a generic template does not.

use crate::anchors::{ClassVocabulary, Prompt};
use crate::config::TeacherConfig;
use crate::data::DatasetSplit;
use crate::encoder::{EncoderPair, ImageEncoder, TextEncoder};
use crate::error::{PandError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone)]
pub struct ToyImageEncoder<T> {
    pub weight: Matrix<T>,
}

impl<T: Scalar> ImageEncoder<T> for ToyImageEncoder<T> {
    fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn encode_images(&self, images: &Matrix<T>) -> Result<Matrix<T>> {
        if images.cols() != self.input_dim() {
            return Err(PandError::Shape {
                context: "image encoder input",
                expected: self.input_dim(),
                got: images.cols(),
            });
        }
        images.matmul_t(&self.weight)
    }

    fn visit_parameters(&self, visit: &mut dyn FnMut(&str, &[T])) {
        visit("image.weight", self.weight.as_slice());
    }
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder<T> {
    /// `d × d_tok`.
    pub knowledge: Matrix<T>,
    /// `d × h`.
    pub mix: Matrix<T>,
    /// `h × d_tok`.
    pub context_proj: Matrix<T>,
    pub bias: Vec<T>,
}

struct TextTrace<T> {
    name_mean: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> ToyTextEncoder<T> {
    fn mean_rows(m: &Matrix<T>) -> Vec<T> {
        let mut out = vec![T::zero(); m.cols()];
        if m.rows() == 0 {
            return out;
        }
        for r in m.row_iter() {
            tensor::axpy(&mut out, T::one(), r);
        }
        let inv = T::one() / T::from_usize_lossy(m.rows());
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }

    fn trace(&self, prompt: &Prompt<'_, T>) -> Result<TextTrace<T>> {
        let dt = self.knowledge.cols();
        if prompt.class_tokens().cols() != dt || prompt.context().cols() != dt {
            return Err(PandError::Shape {
                context: "text encoder token dimension",
                expected: dt,
                got: prompt.class_tokens().cols(),
            });
        }
        let name_mean = Self::mean_rows(prompt.class_tokens());
        let ctx_mean = Self::mean_rows(prompt.context());
        let hidden = self
            .context_proj
            .matvec(&ctx_mean)?
            .into_iter()
            .map(T::tanh)
            .collect();
        Ok(TextTrace { name_mean, hidden })
    }
}

impl<T: Scalar> TextEncoder<T> for ToyTextEncoder<T> {
    fn token_dim(&self) -> usize {
        self.knowledge.cols()
    }

    fn output_dim(&self) -> usize {
        self.knowledge.rows()
    }

    fn encode_prompt(&self, prompt: &Prompt<'_, T>) -> Result<Vec<T>> {
        let tr = self.trace(prompt)?;
        let mut out = self.knowledge.matvec(&tr.name_mean)?;
        let mixed = self.mix.matvec(&tr.hidden)?;
        tensor::axpy(&mut out, T::one(), &mixed);
        tensor::axpy(&mut out, T::one(), &self.bias);
        Ok(out)
    }

    fn prompt_vjp(&self, prompt: &Prompt<'_, T>, grad_output: &[T]) -> Result<Matrix<T>> {
        if grad_output.len() != self.output_dim() {
            return Err(PandError::Shape {
                context: "text encoder output gradient",
                expected: self.output_dim(),
                got: grad_output.len(),
            });
        }
        let tr = self.trace(prompt)?;
        let g_hidden = self.mix.t_matvec(grad_output)?;
        let g_pre: Vec<T> = g_hidden
            .iter()
            .zip(&tr.hidden)
            .map(|(&g, &h)| g * (T::one() - h * h))
            .collect();
        let g_ctx_mean = self.context_proj.t_matvec(&g_pre)?;
        let g_name_mean = self.knowledge.t_matvec(grad_output)?;

        let n_ctx = prompt.context_len();
        let n_name = prompt.class_tokens().rows();
        let mut out = Matrix::zeros(prompt.len(), self.token_dim());
        if n_ctx > 0 {
            let s = T::one() / T::from_usize_lossy(n_ctx);
            for k in 0..n_ctx {
                tensor::axpy(out.row_mut(k), s, &g_ctx_mean);
            }
        }
        let s = T::one() / T::from_usize_lossy(n_name);
        for k in 0..n_name {
            tensor::axpy(out.row_mut(n_ctx + k), s, &g_name_mean);
        }
        Ok(out)
    }

    fn visit_parameters(&self, visit: &mut dyn FnMut(&str, &[T])) {
        visit("text.knowledge", self.knowledge.as_slice());
        visit("text.mix", self.mix.as_slice());
        visit("text.context_proj", self.context_proj.as_slice());
        visit("text.bias", &self.bias);
    }
}

/// Build a toy VLM whose text tower "knows" the classes of `train`.
///
/// Class concepts are the normalized per-class means of the image features,
/// perturbed by `knowledge_noise`; `K` maps each class-name embedding onto
/// its concept by ridge regression.
pub fn build_toy_vlm<T: Scalar>(
    train: &DatasetSplit<T>,
    vocab: &ClassVocabulary<T>,
    cfg: &TeacherConfig,
) -> Result<EncoderPair<T>> {
    let d_in = train
        .input_dim()
        .ok_or_else(|| PandError::Config("toy teacher needs vector inputs".into()))?;
    let d = cfg.embed_dim;
    let dt = vocab.token_dim();
    let h = cfg.hidden;
    if d == 0 || h == 0 || dt == 0 {
        return Err(PandError::Config(
            "toy teacher dimensions must be positive".into(),
        ));
    }
    if h > dt {
        return Err(PandError::Config(format!(
            "teacher.hidden ({h}) must not exceed teacher.token_dim ({dt})"
        )));
    }
    if vocab.len() != train.num_classes() {
        return Err(PandError::Shape {
            context: "vocabulary vs dataset classes",
            expected: train.num_classes(),
            got: vocab.len(),
        });
    }

    let mut rng = rng::derived(cfg.seed, "toy-vlm");
    let mut weight = Matrix::gaussian(d, d_in, 0.3 / (d_in as f64).sqrt(), &mut rng);
    for i in 0..d.min(d_in) {
        weight[(i, i)] += T::one();
    }
    let image = ToyImageEncoder { weight };

    // Concepts: normalized class means of unit image features.
    let feats = crate::anchors::unit_rows(
        &image.encode_images(&train.all_inputs()?)?,
        "toy image features",
    )?;
    let c = vocab.len();
    let mut concepts = Matrix::<T>::zeros(c, d);
    for (row, &y) in feats.row_iter().zip(train.labels().iter()) {
        tensor::axpy(concepts.row_mut(y), T::one(), row);
    }
    for k in 0..c {
        let noise: Vec<T> = rng::gaussian_vec(&mut rng, d, cfg.knowledge_noise / (d as f64).sqrt());
        let mut v = match tensor::l2_normalize(concepts.row(k)) {
            Some(v) => v,
            None => rng::gaussian_vec(&mut rng, d, 1.0),
        };
        tensor::axpy(&mut v, T::one(), &noise);
        let v = tensor::l2_normalize(&v)
            .ok_or_else(|| PandError::numeric("toy teacher", "degenerate concept"))?;
        concepts.row_mut(k).copy_from_slice(&v);
    }

    // K = conceptsᵀ (E Eᵀ + λI)⁻¹ E, with E the C × d_tok name embeddings.
    let names_rows: Vec<Vec<T>> = (0..c)
        .map(|k| ToyTextEncoder::mean_rows(vocab.embedding(k)))
        .collect();
    let e = Matrix::from_rows(&names_rows)?;
    let mut gram = e.matmul_t(&e)?;
    for k in 0..c {
        gram[(k, k)] += T::lit(1e-6);
    }
    let coef = tensor::solve_spd(&gram, &concepts)?; // C × d
    let knowledge = coef.t_matmul(&e)?; // d × d_tok

    let context_proj = Matrix::gaussian(h, dt, 3.0 / (dt as f64).sqrt(), &mut rng);
    let mut mix = Matrix::gaussian(d, h, 1.0 / (h as f64).sqrt(), &mut rng);
    let target: Vec<T> = (0..h)
        .map(|_| T::lit(rng::uniform(&mut rng, -0.5, 0.5)))
        .collect();
    let offset = mix.matvec(&target)?;
    let norm = tensor::l2_norm(&offset);
    if !(norm > T::zero()) {
        return Err(PandError::numeric("toy teacher", "degenerate text offset"));
    }
    mix.scale(T::lit(cfg.gap) / norm);
    let bias: Vec<T> = mix.matvec(&target)?.into_iter().map(|x| -x).collect();

    let text = ToyTextEncoder {
        knowledge,
        mix,
        context_proj,
        bias,
    };
    EncoderPair::new(Box::new(image), Box::new(text))
}
