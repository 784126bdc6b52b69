//! Stage-PSC training loop: SGD on the context tokens only.

use std::time::Instant;

use super::{
    accuracy_percent, encode_anchors, psc_loss_and_grad, unit_rows, ClassVocabulary, ContextTokens,
    SemanticAnchors,
};
use crate::config::PscConfig;
use crate::data::{epoch_batches, DatasetSplit};
use crate::encoder::EncoderPair;
use crate::error::{PandError, Result};
use crate::metrics::{EpochRecord, MetricsLog, Stage};
use crate::optim::{clip_global_norm, Sgd};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct PscOutcome<T> {
    /// Frozen.
    pub anchors: SemanticAnchors<T>,
    pub context: ContextTokens<T>,
    pub log: MetricsLog,
}

fn unit_image_features<T: Scalar>(
    pair: &EncoderPair<T>,
    split: &DatasetSplit<T>,
) -> Result<Matrix<T>> {
    unit_rows(
        &pair.image().encode_images(&split.all_inputs()?)?,
        "image features",
    )
}

/// Optimize the shared context against the frozen encoders and return the
/// frozen anchors. `held_out`, when given, is scored each epoch.
pub fn run_psc<T: Scalar>(
    config: &PscConfig,
    data: &DatasetSplit<T>,
    pair: &EncoderPair<T>,
    vocab: &ClassVocabulary<T>,
    held_out: Option<&DatasetSplit<T>>,
) -> Result<PscOutcome<T>> {
    if !(config.tau_psc > 0.0) {
        return Err(PandError::Config(format!(
            "tau_psc must be positive, got {}",
            config.tau_psc
        )));
    }
    if data.num_classes() != vocab.len() {
        return Err(PandError::Shape {
            context: "dataset classes vs vocabulary",
            expected: vocab.len(),
            got: data.num_classes(),
        });
    }
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= vocab.len()) {
        return Err(PandError::Index {
            what: "dataset label",
            index: bad,
            len: vocab.len(),
        });
    }
    if data.is_empty() && config.epochs > 0 {
        return Err(PandError::Evaluation(
            "Stage-PSC needs a non-empty training split".into(),
        ));
    }

    let mut ctx = ContextTokens::init(config.n_ctx, pair.text().token_dim(), config.seed)?;
    let tau = T::lit(config.tau_psc);
    let labels = data.labels();
    let feats = if config.epochs > 0 {
        unit_image_features(pair, data)?
    } else {
        Matrix::zeros(0, pair.embed_dim())
    };
    let eval = match held_out {
        Some(split) if !split.is_empty() => {
            Some((unit_image_features(pair, split)?, split.labels()))
        }
        _ => None,
    };

    let mut opt = Sgd::new(
        T::lit(config.lr),
        T::lit(config.momentum),
        T::lit(config.weight_decay),
    );
    let mut log = MetricsLog::default();
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let mut weighted = 0.0f64;
        for (b, idx) in epoch_batches(data.len(), config.batch_size, config.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let bf = feats.select_rows(&idx);
            let by: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grad) =
                psc_loss_and_grad(pair, &ctx, vocab, &bf, &by, tau, config.symmetric).map_err(
                    |e| match e {
                        PandError::Numeric { detail, .. } => PandError::Diverged {
                            epoch,
                            batch: b,
                            detail,
                        },
                        other => other,
                    },
                )?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(PandError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("calibration loss {loss}"),
                });
            }
            weighted += loss.as_f64() * idx.len() as f64;
            let mut grads = [grad];
            clip_global_norm(&mut grads, config.grad_clip);
            opt.step(&mut [ctx.vectors_mut()], &grads);
        }
        let mut rec = EpochRecord::new(Stage::Psc, epoch, config.lr);
        rec.calibration = Some(weighted / data.len() as f64);
        if let Some((ef, ey)) = &eval {
            let anchors = encode_anchors(pair, &ctx, vocab)?;
            rec.top1 = Some(accuracy_percent(&ef.matmul_t(anchors.matrix())?, ey));
        }
        rec.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        log.push(rec);
    }

    let anchors = encode_anchors(pair, &ctx, vocab)?.freeze();
    Ok(PscOutcome {
        anchors,
        context: ctx,
        log,
    })
}
