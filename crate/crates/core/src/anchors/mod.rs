//! Prompt-aware semantic calibration.
//!
//! A shared set of learnable context vectors is prepended to every class-name
//! embedding, the frozen text encoder maps each prompt to a text feature, and
//! the normalized features become the semantic anchors that later serve as
//! the teacher's classifier.

mod io;
mod psc;

pub use io::{
    load_anchors, read_anchors, save_anchors, write_anchors, ANCHOR_MAGIC, ANCHOR_VERSION,
};
pub use psc::{run_psc, PscOutcome};

use std::collections::HashSet;

use sha2::{Digest, Sha256};

use crate::encoder::{EncoderPair, Fingerprint};
use crate::error::{PandError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};

/// Standard deviation of the seeded context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Hand-crafted prompt used for fixed-template anchors.
pub const DEFAULT_TEMPLATE: &str = "a photo of a [CLASS]";

/// Learnable context vectors `v_1..v_n`, shared by every class.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens<T> {
    vectors: Matrix<T>,
}

impl<T: Scalar> ContextTokens<T> {
    /// Zero-mean Gaussian initialization (σ = 0.02).
    pub fn init(n_ctx: usize, token_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::derived(seed, "context-init");
        Self::from_matrix(Matrix::gaussian(
            n_ctx,
            token_dim,
            CONTEXT_INIT_STD,
            &mut rng,
        ))
    }

    pub fn from_matrix(vectors: Matrix<T>) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(PandError::Config("n_ctx must be at least 1".into()));
        }
        if !vectors.is_finite() {
            return Err(PandError::numeric("context tokens", "non-finite entry"));
        }
        Ok(Self { vectors })
    }

    pub fn n_ctx(&self) -> usize {
        self.vectors.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Matrix<T> {
        &mut self.vectors
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        self.vectors.hash_into(&mut h);
        Fingerprint::from_hasher(h)
    }
}

/// Deterministic embedding of one token: a seeded hash of its text.
pub fn token_embedding<T: Scalar>(token: &str, token_dim: usize, seed: u64) -> Vec<T> {
    let mut rng = rng::derived(seed, &format!("token:{token}"));
    rng::gaussian_vec(&mut rng, token_dim, 1.0 / (token_dim as f64).sqrt())
}

/// Fixed context built from the words of a hand-crafted template.
///
/// The `[CLASS]` placeholder is dropped; the class name is appended by
/// [`assemble_prompt`] exactly as for learned context.
pub fn template_context<T: Scalar>(
    template: &str,
    token_dim: usize,
    seed: u64,
) -> Result<ContextTokens<T>> {
    let rows: Vec<Vec<T>> = template
        .split_whitespace()
        .filter(|w| *w != "[CLASS]")
        .map(|w| token_embedding(w, token_dim, seed))
        .collect();
    if rows.is_empty() {
        return Err(PandError::Config(format!(
            "template {template:?} has no context words"
        )));
    }
    ContextTokens::from_matrix(Matrix::from_rows(&rows)?)
}

/// Class names and their (fixed) name-token embeddings `w_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary<T> {
    names: Vec<String>,
    embeddings: Vec<Matrix<T>>,
}

impl<T: Scalar> ClassVocabulary<T> {
    pub fn new(names: Vec<String>, embeddings: Vec<Matrix<T>>) -> Result<Self> {
        if names.len() < 2 {
            return Err(PandError::Config(format!(
                "vocabulary needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if embeddings.len() != names.len() {
            return Err(PandError::Shape {
                context: "class embeddings",
                expected: names.len(),
                got: embeddings.len(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(PandError::Config(format!("duplicate class name {n:?}")));
            }
        }
        let dim = embeddings[0].cols();
        for (c, e) in embeddings.iter().enumerate() {
            if e.rows() == 0 {
                return Err(PandError::Config(format!(
                    "class {c} has an empty name embedding"
                )));
            }
            if e.cols() != dim {
                return Err(PandError::Shape {
                    context: "class name token dimension",
                    expected: dim,
                    got: e.cols(),
                });
            }
        }
        Ok(Self { names, embeddings })
    }

    /// One hashed token per class name.
    pub fn hashed(names: &[String], token_dim: usize, seed: u64) -> Result<Self> {
        let embeddings = names
            .iter()
            .map(|n| Matrix::from_vec(1, token_dim, token_embedding(n, token_dim, seed)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(names.to_vec(), embeddings)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embedding(&self, class: usize) -> &Matrix<T> {
        &self.embeddings[class]
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings[0].cols()
    }
}

/// `[v_1, …, v_n, w_c]` as a borrowed view: the context part *is* the
/// caller's [`ContextTokens`] storage.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'a, T> {
    context: &'a Matrix<T>,
    class_tokens: &'a Matrix<T>,
}

impl<'a, T: Scalar> Prompt<'a, T> {
    pub fn len(&self) -> usize {
        self.context.rows() + self.class_tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn context(&self) -> &'a Matrix<T> {
        self.context
    }

    pub fn class_tokens(&self) -> &'a Matrix<T> {
        self.class_tokens
    }

    pub fn token(&self, i: usize) -> &'a [T] {
        let n = self.context.rows();
        if i < n {
            self.context.row(i)
        } else {
            self.class_tokens.row(i - n)
        }
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        let rows: Vec<Vec<T>> = (0..self.len()).map(|i| self.token(i).to_vec()).collect();
        Matrix::from_rows(&rows).expect("prompt tokens share a width")
    }
}

pub fn assemble_prompt<'a, T: Scalar>(
    ctx: &'a ContextTokens<T>,
    vocab: &'a ClassVocabulary<T>,
    class_index: usize,
) -> Result<Prompt<'a, T>> {
    if class_index >= vocab.len() {
        return Err(PandError::Index {
            what: "class index",
            index: class_index,
            len: vocab.len(),
        });
    }
    let class_tokens = vocab.embedding(class_index);
    if class_tokens.cols() != ctx.token_dim() {
        return Err(PandError::Shape {
            context: "context/class token dimension",
            expected: ctx.token_dim(),
            got: class_tokens.cols(),
        });
    }
    Ok(Prompt {
        context: ctx.vectors(),
        class_tokens,
    })
}

/// `C × d` unit-norm class text features.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAnchors<T> {
    matrix: Matrix<T>,
    class_names: Vec<String>,
    frozen: bool,
}

impl<T: Scalar> SemanticAnchors<T> {
    /// Rows must already be unit norm (within 1e-5).
    pub fn new(matrix: Matrix<T>, class_names: Vec<String>) -> Result<Self> {
        if matrix.rows() != class_names.len() {
            return Err(PandError::Shape {
                context: "anchor rows vs class names",
                expected: class_names.len(),
                got: matrix.rows(),
            });
        }
        for (c, row) in matrix.row_iter().enumerate() {
            let n = tensor::l2_norm(row).as_f64();
            if !n.is_finite() || (n - 1.0).abs() >= 1e-5 {
                return Err(PandError::numeric(
                    "semantic anchors",
                    format!("row {c} has norm {n}, expected unit norm"),
                ));
            }
        }
        Ok(Self {
            matrix,
            class_names,
            frozen: false,
        })
    }

    pub(crate) fn new_frozen(matrix: Matrix<T>, class_names: Vec<String>) -> Result<Self> {
        let mut a = Self::new(matrix, class_names)?;
        a.frozen = true;
        Ok(a)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        self.matrix.hash_into(&mut h);
        for n in &self.class_names {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
        }
        Fingerprint::from_hasher(h)
    }

    pub(crate) fn ensure_frozen(&self, context: &'static str) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(PandError::NotFrozen(context))
        }
    }
}

struct EncodedClass<T> {
    unit: Vec<T>,
    norm: T,
}

fn encode_class<T: Scalar>(
    pair: &EncoderPair<T>,
    ctx: &ContextTokens<T>,
    vocab: &ClassVocabulary<T>,
    class: usize,
) -> Result<EncodedClass<T>> {
    let prompt = assemble_prompt(ctx, vocab, class)?;
    let raw = pair.text().encode_prompt(&prompt)?;
    let norm = tensor::l2_norm(&raw);
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(PandError::ZeroTextFeature { class });
    }
    let unit = raw.iter().map(|&x| x / norm).collect();
    Ok(EncodedClass { unit, norm })
}

/// Row `c` = normalized text feature of `assemble_prompt(ctx, vocab, c)`.
/// The result is not frozen; Stage-PSC freezes its final anchors.
pub fn encode_anchors<T: Scalar>(
    pair: &EncoderPair<T>,
    ctx: &ContextTokens<T>,
    vocab: &ClassVocabulary<T>,
) -> Result<SemanticAnchors<T>> {
    let mut rows = Vec::with_capacity(vocab.len());
    for c in 0..vocab.len() {
        rows.push(encode_class(pair, ctx, vocab, c)?.unit);
    }
    SemanticAnchors::new(Matrix::from_rows(&rows)?, vocab.names().to_vec())
}

/// Vector-Jacobian product of [`encode_anchors`] with respect to the
/// context tokens: maps `∂L/∂anchors` (`C × d`) to `∂L/∂ctx` (`n_ctx × d_tok`).
pub fn anchors_vjp<T: Scalar>(
    pair: &EncoderPair<T>,
    ctx: &ContextTokens<T>,
    vocab: &ClassVocabulary<T>,
    grad_anchors: &Matrix<T>,
) -> Result<Matrix<T>> {
    if grad_anchors.rows() != vocab.len() {
        return Err(PandError::Shape {
            context: "anchor gradient rows",
            expected: vocab.len(),
            got: grad_anchors.rows(),
        });
    }
    let mut grad_ctx = Matrix::zeros(ctx.n_ctx(), ctx.token_dim());
    for c in 0..vocab.len() {
        let enc = encode_class(pair, ctx, vocab, c)?;
        let g_raw = tensor::l2_normalize_backward(&enc.unit, enc.norm, grad_anchors.row(c));
        let prompt = assemble_prompt(ctx, vocab, c)?;
        let g_tokens = pair.text().prompt_vjp(&prompt, &g_raw)?;
        for k in 0..ctx.n_ctx() {
            tensor::axpy(grad_ctx.row_mut(k), T::one(), g_tokens.row(k));
        }
    }
    Ok(grad_ctx)
}

fn check_temperature<T: Scalar>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(PandError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(PandError::Shape {
            context: "labels vs batch",
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(PandError::Index {
            what: "label",
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

fn similarity_logits<T: Scalar>(
    image_feats: &Matrix<T>,
    anchors: &Matrix<T>,
    temperature: T,
) -> Result<Matrix<T>> {
    let mut sims = image_feats.matmul_t(anchors)?;
    if !sims.is_finite() {
        return Err(PandError::numeric(
            "calibration loss",
            "non-finite similarity",
        ));
    }
    sims.scale(T::one() / temperature);
    Ok(sims)
}

/// Image→text cross-entropy over temperature-scaled cosine similarities:
/// `−(1/N) Σ_i log softmax_c(⟨f_i, a_c⟩ / τ)[y_i]`.
pub fn calibration_loss<T: Scalar>(
    image_feats: &Matrix<T>,
    anchors: &SemanticAnchors<T>,
    labels: &[usize],
    temperature: T,
) -> Result<T> {
    Ok(calibration_loss_with_grad(image_feats, anchors.matrix(), labels, temperature, false)?.0)
}

/// Calibration loss and its gradient with respect to the anchor matrix.
///
/// With `symmetric`, the text→image term (for every class present in the
/// batch, a softmax over the batch images whose target is uniform over that
/// class's images) is added and the two directions are averaged.
pub fn calibration_loss_with_grad<T: Scalar>(
    image_feats: &Matrix<T>,
    anchors: &Matrix<T>,
    labels: &[usize],
    temperature: T,
    symmetric: bool,
) -> Result<(T, Matrix<T>)> {
    check_temperature(temperature)?;
    let n = image_feats.rows();
    let c = anchors.rows();
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(PandError::Evaluation(
            "calibration loss on an empty batch".into(),
        ));
    }
    let logits = similarity_logits(image_feats, anchors, temperature)?;
    let inv_n = T::one() / T::from_usize_lossy(n);

    // ∂L/∂logits for the image→text direction.
    let mut g_logits = Matrix::zeros(n, c);
    let mut loss = T::zero();
    for i in 0..n {
        let ls = tensor::log_softmax(logits.row(i));
        loss -= ls[labels[i]];
        let g = g_logits.row_mut(i);
        for (j, &l) in ls.iter().enumerate() {
            g[j] = l.exp() * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    loss *= inv_n;

    if symmetric {
        let half = T::lit(0.5);
        loss *= half;
        g_logits.scale(half);
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        let inv_k = T::one() / T::from_usize_lossy(present.len());
        let mut t2i = T::zero();
        for &cls in &present {
            let column: Vec<T> = (0..n).map(|i| logits[(i, cls)]).collect();
            let ls = tensor::log_softmax(&column);
            let members = labels.iter().filter(|&&y| y == cls).count();
            let inv_m = T::one() / T::from_usize_lossy(members);
            for i in 0..n {
                let target = if labels[i] == cls { inv_m } else { T::zero() };
                t2i -= target * ls[i];
                g_logits[(i, cls)] += half * inv_k * (ls[i].exp() - target);
            }
        }
        loss += half * inv_k * t2i;
    }

    if !loss.is_finite() {
        return Err(PandError::numeric("calibration loss", "non-finite loss"));
    }
    // logits = F Aᵀ / τ  ⇒  ∂L/∂A = (∂L/∂logits)ᵀ F / τ.
    let mut g_anchors = g_logits.t_matmul(image_feats)?;
    g_anchors.scale(T::one() / temperature);
    Ok((loss, g_anchors))
}

/// Calibration loss and its gradient with respect to the context tokens.
pub fn psc_loss_and_grad<T: Scalar>(
    pair: &EncoderPair<T>,
    ctx: &ContextTokens<T>,
    vocab: &ClassVocabulary<T>,
    image_feats: &Matrix<T>,
    labels: &[usize],
    temperature: T,
    symmetric: bool,
) -> Result<(T, Matrix<T>)> {
    let anchors = encode_anchors(pair, ctx, vocab)?;
    let (loss, g_anchors) = calibration_loss_with_grad(
        image_feats,
        anchors.matrix(),
        labels,
        temperature,
        symmetric,
    )?;
    let g_ctx = anchors_vjp(pair, ctx, vocab, &g_anchors)?;
    Ok((loss, g_ctx))
}

/// Fraction (×100) of rows whose argmax matches the label.
pub(crate) fn accuracy_percent<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| tensor::argmax(row) == y)
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

pub(crate) fn unit_rows<T: Scalar>(m: &Matrix<T>, context: &'static str) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let u = tensor::l2_normalize(m.row(i))
            .ok_or_else(|| PandError::numeric(context, format!("row {i} has zero norm")))?;
        out.row_mut(i).copy_from_slice(&u);
    }
    Ok(out)
}
