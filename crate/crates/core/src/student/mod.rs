//! Lightweight student: backbone, FC classification head, and a projection
//! head into the teacher's embedding space.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, NamedTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{PandError, Result};
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    /// `1 × out`.
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Matrix<T>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(PandError::Shape {
                context: "linear bias width",
                expected: weight.rows(),
                got: bias.cols(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init(input: usize, output: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            weight: Matrix::gaussian(output, input, std, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul_t(&self.weight)?;
        let b = self.bias.row(0);
        for i in 0..y.rows() {
            tensor::axpy(y.row_mut(i), T::one(), b);
        }
        Ok(y)
    }

    /// Returns `(∂W, ∂b, ∂x)`.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        dy: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let dw = dy.t_matmul(x)?;
        let db = dy.column_sums();
        let dx = dy.matmul(&self.weight)?;
        Ok((dw, db, dx))
    }
}

/// Feature extractor contract for the student.
///
/// Gradients returned by [`Backbone::backward`] are aligned with
/// [`Backbone::parameters`].
pub trait Backbone<T: Scalar>: Clone + Send + Sync {
    type Cache;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, grad_features: &Matrix<T>) -> Result<Vec<Matrix<T>>>;
    fn parameters(&self) -> Vec<(String, &Matrix<T>)>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix<T>>;
}

/// Two tanh layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone<T> {
    pub layer1: Linear<T>,
    pub layer2: Linear<T>,
}

pub struct MlpCache<T> {
    input: Matrix<T>,
    hidden: Matrix<T>,
    output: Matrix<T>,
}

impl<T: Scalar> MlpBackbone<T> {
    pub fn init(input: usize, hidden: usize, output: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            layer1: Linear::init(input, hidden, std, rng),
            layer2: Linear::init(hidden, output, std, rng),
        }
    }
}

fn tanh_backward<T: Scalar>(activated: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
    let mut out = grad.clone();
    for (g, &a) in out.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        *g *= T::one() - a * a;
    }
    out
}

impl<T: Scalar> Backbone<T> for MlpBackbone<T> {
    type Cache = MlpCache<T>;

    fn input_dim(&self) -> usize {
        self.layer1.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.layer2.output_dim()
    }

    fn forward(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        if inputs.cols() != self.input_dim() {
            return Err(PandError::Shape {
                context: "student input",
                expected: self.input_dim(),
                got: inputs.cols(),
            });
        }
        let hidden = self.layer1.forward(inputs)?.map(T::tanh);
        let output = self.layer2.forward(&hidden)?.map(T::tanh);
        Ok((
            output.clone(),
            MlpCache {
                input: inputs.clone(),
                hidden,
                output,
            },
        ))
    }

    fn backward(&self, cache: &MlpCache<T>, grad_features: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let g2 = tanh_backward(&cache.output, grad_features);
        let (dw2, db2, dh) = self.layer2.backward(&cache.hidden, &g2)?;
        let g1 = tanh_backward(&cache.hidden, &dh);
        let (dw1, db1, _) = self.layer1.backward(&cache.input, &g1)?;
        Ok(vec![dw1, db1, dw2, db2])
    }

    fn parameters(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("backbone.layer1.weight".into(), &self.layer1.weight),
            ("backbone.layer1.bias".into(), &self.layer1.bias),
            ("backbone.layer2.weight".into(), &self.layer2.weight),
            ("backbone.layer2.bias".into(), &self.layer2.bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![
            &mut self.layer1.weight,
            &mut self.layer1.bias,
            &mut self.layer2.weight,
            &mut self.layer2.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput<T> {
    /// `N × d_s` backbone features.
    pub features: Matrix<T>,
    /// `N × d`, unit rows.
    pub projected: Matrix<T>,
    /// `N × C`.
    pub logits: Matrix<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct StudentTrace<T: Scalar, B: Backbone<T>> {
    backbone: B::Cache,
    features: Matrix<T>,
    projected: Matrix<T>,
    projected_norms: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T, B = MlpBackbone<T>> {
    pub backbone: B,
    pub fc_head: Linear<T>,
    pub projector: Linear<T>,
}

pub type ToyStudent<T> = StudentModel<T, MlpBackbone<T>>;

impl<T: Scalar> StudentModel<T, MlpBackbone<T>> {
    /// Seeded Gaussian initialization of the toy perceptron student.
    pub fn toy(
        input_dim: usize,
        hidden: usize,
        feat_dim: usize,
        num_classes: usize,
        embed_dim: usize,
        init_std: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::derived(seed, "student-init");
        let backbone = MlpBackbone::init(input_dim, hidden, feat_dim, init_std, &mut r);
        let fc_head = Linear::init(feat_dim, num_classes, init_std, &mut r);
        let projector = Linear::init(feat_dim, embed_dim, init_std, &mut r);
        Self {
            backbone,
            fc_head,
            projector,
        }
    }
}

impl<T: Scalar, B: Backbone<T>> StudentModel<T, B> {
    pub fn new(backbone: B, fc_head: Linear<T>, projector: Linear<T>) -> Result<Self> {
        for (name, head) in [("fc head", &fc_head), ("projector", &projector)] {
            if head.input_dim() != backbone.output_dim() {
                return Err(PandError::Shape {
                    context: if name == "fc head" {
                        "fc head input"
                    } else {
                        "projector input"
                    },
                    expected: backbone.output_dim(),
                    got: head.input_dim(),
                });
            }
        }
        Ok(Self {
            backbone,
            fc_head,
            projector,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fc_head.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn forward_traced(
        &self,
        images: &Matrix<T>,
    ) -> Result<(StudentOutput<T>, StudentTrace<T, B>)> {
        let (features, cache) = self.backbone.forward(images)?;
        let logits = self.fc_head.forward(&features)?;
        let raw = self.projector.forward(&features)?;
        let mut projected = raw.clone();
        let mut norms = Vec::with_capacity(raw.rows());
        for i in 0..raw.rows() {
            let n = tensor::l2_norm(raw.row(i));
            if !(n > T::zero()) || !n.is_finite() {
                return Err(PandError::numeric(
                    "student projection",
                    format!("row {i} has zero or non-finite norm"),
                ));
            }
            projected.row_mut(i).iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let out = StudentOutput {
            features: features.clone(),
            projected: projected.clone(),
            logits,
        };
        Ok((
            out,
            StudentTrace {
                backbone: cache,
                features,
                projected,
                projected_norms: norms,
            },
        ))
    }

    /// Gradients for every parameter (order of [`Self::parameters`]) given
    /// `∂L/∂logits` and `∂L/∂projected`.
    pub fn backward(
        &self,
        trace: &StudentTrace<T, B>,
        grad_logits: &Matrix<T>,
        grad_projected: &Matrix<T>,
    ) -> Result<Vec<Matrix<T>>> {
        let (dw_fc, db_fc, mut d_feat) = self.fc_head.backward(&trace.features, grad_logits)?;
        let mut g_raw = Matrix::zeros(grad_projected.rows(), grad_projected.cols());
        for i in 0..g_raw.rows() {
            let g = tensor::l2_normalize_backward(
                trace.projected.row(i),
                trace.projected_norms[i],
                grad_projected.row(i),
            );
            g_raw.row_mut(i).copy_from_slice(&g);
        }
        let (dw_p, db_p, d_feat_p) = self.projector.backward(&trace.features, &g_raw)?;
        d_feat.add_assign(&d_feat_p)?;
        let mut grads = self.backbone.backward(&trace.backbone, &d_feat)?;
        grads.extend([dw_fc, db_fc, dw_p, db_p]);
        Ok(grads)
    }

    pub fn parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut p = self.backbone.parameters();
        p.push(("fc_head.weight".into(), &self.fc_head.weight));
        p.push(("fc_head.bias".into(), &self.fc_head.bias));
        p.push(("projector.weight".into(), &self.projector.weight));
        p.push(("projector.bias".into(), &self.projector.bias));
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut p = self.backbone.parameters_mut();
        p.push(&mut self.fc_head.weight);
        p.push(&mut self.fc_head.bias);
        p.push(&mut self.projector.weight);
        p.push(&mut self.projector.bias);
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters()
            .iter()
            .map(|(_, m)| m.as_slice().len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|(_, m)| m.is_finite())
    }
}

/// Features, unit-normalized projections, and logits for a batch.
pub fn student_forward<T: Scalar, B: Backbone<T>>(
    model: &StudentModel<T, B>,
    images: &Matrix<T>,
) -> Result<StudentOutput<T>> {
    Ok(model.forward_traced(images)?.0)
}
