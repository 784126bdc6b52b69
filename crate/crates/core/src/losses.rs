//! Training objectives for the distillation stage.
//!
//! Base alignment (label cross-entropy, feature cosine alignment, anchor-logit
//! cross-entropy) plus the neighborhood-aware structural term: for each
//! sample the teacher picks its `K` most confusable non-target classes, both
//! models' logit margins to those classes are turned into distributions by a
//! softmax over negative margins, and the two distributions are compared with
//! the Jensen-Shannon divergence.
//!
//! Every `*_with_grad` function returns gradients of the *mean* over the
//! batch; the teacher side is always treated as a constant.

use std::cmp::Ordering;

use crate::anchors::SemanticAnchors;
use crate::config::LossWeights;
use crate::error::{PandError, Result};
use crate::scalar::Scalar;
use crate::student::StudentOutput;
use crate::teacher::TeacherOutput;
use crate::tensor::{self, Matrix};

/// Per-sample top-`k` non-target classes by teacher logit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodSet {
    indices: Vec<usize>,
    k: usize,
}

impl NeighborhoodSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k)
    }
}

/// Row-stochastic `N × K` matrix of relation probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistribution<T> {
    pub rho: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub cls: T,
    pub vis: T,
    pub txt: T,
    pub nsd: T,
    pub base: T,
    pub total: T,
}

/// Weighted gradients of the base loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrads<T> {
    /// `∂L_base/∂student logits`.
    pub logits: Matrix<T>,
    /// `∂L_base/∂projected student features`.
    pub projected: Matrix<T>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(PandError::Shape {
            context: "labels vs logit rows",
            expected: rows,
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

fn check_finite<T: Scalar>(m: &Matrix<T>, component: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(PandError::numeric(component, "non-finite input"))
    }
}

fn check_value<T: Scalar>(v: T, component: &'static str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PandError::numeric(
            component,
            format!("loss evaluated to {v}"),
        ))
    }
}

/// The `k` highest-logit classes other than the label, in descending logit
/// order with ties broken by ascending class index.
pub fn select_neighborhood<T: Scalar>(
    teacher_logits: &Matrix<T>,
    labels: &[usize],
    k: usize,
) -> Result<NeighborhoodSet> {
    let c = teacher_logits.cols();
    if k == 0 {
        return Err(PandError::Config("k must be at least 1".into()));
    }
    if k + 1 > c {
        return Err(PandError::Config(format!("k exceeds C-1 (k={k}, C={c})")));
    }
    check_labels(labels, teacher_logits.rows(), c)?;
    check_finite(teacher_logits, "neighborhood selection")?;
    let mut indices = Vec::with_capacity(labels.len() * k);
    let mut candidates: Vec<usize> = Vec::with_capacity(c);
    for (row, &y) in teacher_logits.row_iter().zip(labels) {
        candidates.clear();
        candidates.extend((0..c).filter(|&j| j != y));
        // Stable sort over ascending indices keeps the lower index first on ties.
        candidates.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
        indices.extend_from_slice(&candidates[..k]);
    }
    Ok(NeighborhoodSet { indices, k })
}

fn check_neighborhood(nbhd: &NeighborhoodSet, labels: &[usize], classes: usize) -> Result<()> {
    if nbhd.len() != labels.len() {
        return Err(PandError::Shape {
            context: "neighborhood rows vs labels",
            expected: labels.len(),
            got: nbhd.len(),
        });
    }
    for (row, &y) in nbhd.rows().zip(labels) {
        for &j in row {
            if j >= classes {
                return Err(PandError::Index {
                    what: "neighbor class",
                    index: j,
                    len: classes,
                });
            }
            if j == y {
                return Err(PandError::Config(format!(
                    "neighborhood contains the ground-truth class {y}"
                )));
            }
        }
    }
    Ok(())
}

/// Softmax over negative margins `Δ_ij = z_{i,y_i} − z_{i,j}` for `j ∈ 𝒩_i`.
pub fn neighborhood_distribution<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    nbhd: &NeighborhoodSet,
) -> Result<RelationDistribution<T>> {
    neighborhood_distribution_scaled(logits, labels, nbhd, T::one())
}

/// As [`neighborhood_distribution`] with margins divided by `temperature`.
pub fn neighborhood_distribution_scaled<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    nbhd: &NeighborhoodSet,
    temperature: T,
) -> Result<RelationDistribution<T>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    check_neighborhood(nbhd, labels, logits.cols())?;
    check_finite(logits, "neighborhood distribution")?;
    let k = nbhd.k();
    let mut rho = Matrix::zeros(labels.len(), k);
    let mut neg_margin = vec![T::zero(); k];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        for (slot, &j) in neg_margin.iter_mut().zip(nbhd.row(i)) {
            *slot = -(row[y] - row[j]) / temperature;
        }
        rho.row_mut(i)
            .copy_from_slice(&tensor::softmax(&neg_margin));
    }
    Ok(RelationDistribution { rho })
}

/// `½ KL(p‖m) + ½ KL(q‖m)` with `m = ½(p + q)`, natural log, `0 log 0 = 0`.
pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(PandError::Shape {
            context: "js divergence operands",
            expected: p.len(),
            got: q.len(),
        });
    }
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        let m = half * (pi + qi);
        if pi > T::zero() {
            acc += half * pi * (pi / m).ln();
        }
        if qi > T::zero() {
            acc += half * qi * (qi / m).ln();
        }
    }
    let ln2 = T::lit(std::f64::consts::LN_2);
    Ok(acc.max(T::zero()).min(ln2))
}

/// `∂JS/∂q_j = ½ ln(q_j / m_j)` (for `q_j > 0`).
fn js_grad_q<T: Scalar>(p: &[T], q: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if qi > T::zero() {
                half * (qi / (half * (pi + qi))).ln()
            } else {
                T::zero()
            }
        })
        .collect()
}

fn check_pair<T: Scalar>(teacher_logits: &Matrix<T>, student_logits: &Matrix<T>) -> Result<()> {
    if teacher_logits.rows() != student_logits.rows() {
        return Err(PandError::Shape {
            context: "teacher vs student logit rows",
            expected: teacher_logits.rows(),
            got: student_logits.rows(),
        });
    }
    if teacher_logits.cols() != student_logits.cols() {
        return Err(PandError::Shape {
            context: "teacher vs student logit columns",
            expected: teacher_logits.cols(),
            got: student_logits.cols(),
        });
    }
    Ok(())
}

/// Mean per-sample JS divergence between teacher and student relation
/// distributions over teacher-chosen neighborhoods.
pub fn nsd_loss<T: Scalar>(
    teacher_logits: &Matrix<T>,
    student_logits: &Matrix<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<T> {
    check_pair(teacher_logits, student_logits)?;
    let nbhd = select_neighborhood(teacher_logits, labels, weights.k)?;
    let temp = T::lit(weights.nsd_temperature);
    let rho_t = neighborhood_distribution_scaled(teacher_logits, labels, &nbhd, temp)?;
    let rho_s = neighborhood_distribution_scaled(student_logits, labels, &nbhd, temp)?;
    let mut sum = T::zero();
    for i in 0..labels.len() {
        sum += js_divergence(rho_t.rho.row(i), rho_s.rho.row(i))?;
    }
    check_value(sum / T::from_usize_lossy(labels.len().max(1)), "nsd")
}

/// [`nsd_loss`] and its gradient with respect to the student logits.
pub fn nsd_loss_with_grad<T: Scalar>(
    teacher_logits: &Matrix<T>,
    student_logits: &Matrix<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(T, Matrix<T>)> {
    check_pair(teacher_logits, student_logits)?;
    let nbhd = select_neighborhood(teacher_logits, labels, weights.k)?;
    let temp = T::lit(weights.nsd_temperature);
    let rho_t = neighborhood_distribution_scaled(teacher_logits, labels, &nbhd, temp)?;
    let rho_s = neighborhood_distribution_scaled(student_logits, labels, &nbhd, temp)?;
    let n = labels.len().max(1);
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = Matrix::zeros(student_logits.rows(), student_logits.cols());
    let mut sum = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let (p, q) = (rho_t.rho.row(i), rho_s.rho.row(i));
        sum += js_divergence(p, q)?;
        let g_q = js_grad_q(p, q);
        let inner: T = q.iter().zip(&g_q).map(|(&qj, &gj)| qj * gj).sum();
        let row = grad.row_mut(i);
        for ((&j, &qj), &gj) in nbhd.row(i).iter().zip(q).zip(&g_q) {
            // u_j = (z_j − z_y) / T, softmax backward.
            let g_u = qj * (gj - inner) * inv_n / temp;
            row[j] += g_u;
            row[y] -= g_u;
        }
    }
    let loss = check_value(sum * inv_n, "nsd")?;
    Ok((loss, grad))
}

/// Mean cross-entropy of `logits` against `labels`, with gradient.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Matrix<T>)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let n = labels.len().max(1);
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let ls = tensor::log_softmax(logits.row(i));
        loss -= ls[y];
        let g = grad.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(&ls) {
            *gj = l.exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// `1 − mean_i ⟨p_i, f_i⟩` for unit rows, with gradient w.r.t. `p`.
pub fn cosine_alignment_with_grad<T: Scalar>(
    projected: &Matrix<T>,
    teacher_features: &Matrix<T>,
) -> Result<(T, Matrix<T>)> {
    if projected.shape() != teacher_features.shape() {
        return Err(PandError::Shape {
            context: "projected student vs teacher feature dim",
            expected: teacher_features.cols(),
            got: projected.cols(),
        });
    }
    let n = projected.rows().max(1);
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut sum = T::zero();
    for (p, f) in projected.row_iter().zip(teacher_features.row_iter()) {
        sum += tensor::dot(p, f);
    }
    let mut grad = teacher_features.clone();
    grad.scale(-inv_n);
    Ok((T::one() - sum * inv_n, grad))
}

/// Cross-entropy over `projected · anchorsᵀ / τ`, with gradient w.r.t.
/// `projected`.
pub fn text_alignment_with_grad<T: Scalar>(
    projected: &Matrix<T>,
    anchors: &Matrix<T>,
    labels: &[usize],
    tau: T,
) -> Result<(T, Matrix<T>)> {
    let mut logits = projected.matmul_t(anchors)?;
    logits.scale(T::one() / tau);
    let (loss, mut g_logits) = cross_entropy_with_grad(&logits, labels)?;
    g_logits.scale(T::one() / tau);
    Ok((loss, g_logits.matmul(anchors)?))
}

/// Base alignment loss (cls, vis, txt, base); `nsd` is zero and
/// `total = base`.
pub fn base_loss<T: Scalar>(
    student: &StudentOutput<T>,
    teacher: &TeacherOutput<T>,
    anchors: &SemanticAnchors<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown<T>> {
    Ok(base_loss_with_grad(student, teacher, anchors, labels, weights)?.0)
}

pub fn base_loss_with_grad<T: Scalar>(
    student: &StudentOutput<T>,
    teacher: &TeacherOutput<T>,
    anchors: &SemanticAnchors<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(LossBreakdown<T>, BaseGrads<T>)> {
    weights.validate()?;
    let n = labels.len();
    for (ctx, rows) in [
        ("student logits rows", student.logits.rows()),
        ("student projection rows", student.projected.rows()),
        ("teacher feature rows", teacher.features.rows()),
    ] {
        if rows != n {
            return Err(PandError::Shape {
                context: ctx,
                expected: n,
                got: rows,
            });
        }
    }
    check_finite(&student.logits, "cls")?;
    check_finite(&student.projected, "vis")?;

    let (cls, mut g_cls) = cross_entropy_with_grad(&student.logits, labels)?;
    let cls = check_value(cls, "cls")?;
    let (vis, mut g_vis) = cosine_alignment_with_grad(&student.projected, &teacher.features)?;
    let vis = check_value(vis, "vis")?;
    let tau = T::lit(weights.tau);
    let (txt, mut g_txt) =
        text_alignment_with_grad(&student.projected, anchors.matrix(), labels, tau)?;
    let txt = check_value(txt, "txt")?;

    let (l_cls, l_vis, l_txt) = (
        T::lit(weights.lambda_cls),
        T::lit(weights.lambda_vis),
        T::lit(weights.lambda_txt),
    );
    let base = l_cls * cls + l_vis * vis + l_txt * txt;
    g_cls.scale(l_cls);
    g_vis.scale(l_vis);
    g_txt.scale(l_txt);
    g_vis.add_assign(&g_txt)?;
    Ok((
        LossBreakdown {
            cls,
            vis,
            txt,
            nsd: T::zero(),
            base,
            total: base,
        },
        BaseGrads {
            logits: g_cls,
            projected: g_vis,
        },
    ))
}

/// `total = base + λ_NSD · nsd`; with `λ_NSD = 0` (or no structural value)
/// the term is skipped and `total` is `base` bit for bit.
pub fn total_loss<T: Scalar>(
    partial: LossBreakdown<T>,
    nsd: Option<T>,
    weights: &LossWeights,
) -> LossBreakdown<T> {
    let mut out = partial;
    out.nsd = nsd.unwrap_or_else(T::zero);
    out.total = match nsd {
        Some(v) if weights.lambda_nsd != 0.0 => partial.base + T::lit(weights.lambda_nsd) * v,
        _ => partial.base,
    };
    out
}

#[cfg(test)]
mod tests;
