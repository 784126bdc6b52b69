//! Stage orchestration: calibrate the anchors, freeze them, then distill.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::anchors::{
    self, encode_anchors, read_anchors, run_psc, template_context, write_anchors, ClassVocabulary,
    ContextTokens, SemanticAnchors,
};
use crate::config::{AnchorSource, DataSource, NsdConfig, TrainConfig, WeightSchedule};
use crate::data::{self, epoch_batches, DatasetSplit, SplitName, ToySpec};
use crate::encoder::{EncoderPair, Fingerprint};
use crate::error::{PandError, Result};
use crate::losses::{base_loss_with_grad, nsd_loss_with_grad, total_loss, LossBreakdown};
use crate::metrics::{EpochRecord, MetricsLog, Stage};
use crate::optim::{clip_global_norm, cosine_lr, AdamW};
use crate::scalar::Scalar;
use crate::student::{save_checkpoint, Checkpoint, StudentModel, ToyStudent};
use crate::teacher::{teacher_forward, TeacherOutput};
use crate::tensor::{self, Matrix};
use crate::toy::build_toy_vlm;

/// Environment variable consulted when `data.root` is empty.
pub const DATA_ROOT_ENV: &str = "PAND_DATA_ROOT";

/// Datasets plus the frozen encoder pair and class vocabulary built on them.
#[derive(Debug)]
pub struct World<T: Scalar> {
    pub train: DatasetSplit<T>,
    pub test: DatasetSplit<T>,
    pub vocab: ClassVocabulary<T>,
    pub pair: EncoderPair<T>,
}

/// Load or generate the data named by `cfg.data` and build the toy
/// vision-language teacher over it.
pub fn build_world<T: Scalar>(cfg: &TrainConfig) -> Result<World<T>> {
    let (train, test) = load_data(cfg)?;
    if train.classes() != test.classes() {
        return Err(PandError::Config(
            "train and test splits disagree on the class list".into(),
        ));
    }
    cfg.validate_for_classes(train.num_classes())?;
    let vocab = ClassVocabulary::hashed(train.classes(), cfg.teacher.token_dim, cfg.teacher.seed)?;
    let pair = build_toy_vlm(&train, &vocab, &cfg.teacher)?;
    Ok(World {
        train,
        test,
        vocab,
        pair,
    })
}

fn load_data<T: Scalar>(cfg: &TrainConfig) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Toy => {
            let mut spec = ToySpec::new(d.classes, d.n_per_class, d.dim, d.separation, d.seed);
            spec.noise = d.noise;
            data::make_toy(&spec)
        }
        DataSource::Export => {
            if d.train_file.is_empty() || d.test_file.is_empty() {
                return Err(PandError::Config(
                    "data.source = export needs data.train_file and data.test_file".into(),
                ));
            }
            Ok((
                data::load_split(&d.train_file)?,
                data::load_split(&d.test_file)?,
            ))
        }
        DataSource::Folder => {
            let root = if d.root.is_empty() {
                std::env::var(DATA_ROOT_ENV).map_err(|_| {
                    PandError::Config(format!("data.root is empty and {DATA_ROOT_ENV} is not set"))
                })?
            } else {
                d.root.clone()
            };
            let train = data::load_image_folder(&root, &d.train_split, SplitName::Train)?
                .decode_files(data::decode_vector_file)?;
            let test = data::load_image_folder(&root, &d.test_split, SplitName::Test)?
                .decode_files(data::decode_vector_file)?;
            Ok((train, test))
        }
    }
}

/// Frozen anchors from the hand-crafted template instead of learned context.
pub fn template_anchors<T: Scalar>(
    cfg: &TrainConfig,
    world: &World<T>,
) -> Result<SemanticAnchors<T>> {
    let ctx = template_context(
        &cfg.teacher.template,
        world.vocab.token_dim(),
        cfg.teacher.seed,
    )?;
    Ok(encode_anchors(&world.pair, &ctx, &world.vocab)?.freeze())
}

/// Mean loss breakdown over a whole split, using the same structural-path
/// rules as training.
pub fn evaluate_loss<T: Scalar>(
    student: &ToyStudent<T>,
    teacher: &TeacherOutput<T>,
    anchors: &SemanticAnchors<T>,
    inputs: &Matrix<T>,
    labels: &[usize],
    cfg: &NsdConfig,
    epoch: usize,
) -> Result<LossBreakdown<T>> {
    let weights = epoch_weights(cfg, epoch);
    let out = crate::student::student_forward(student, inputs)?;
    let (base, _) = base_loss_with_grad(&out, teacher, anchors, labels, &weights)?;
    let nsd = if cfg.structural && weights.lambda_nsd != 0.0 {
        Some(crate::losses::nsd_loss(
            &teacher.logits,
            &out.logits,
            labels,
            &weights,
        )?)
    } else {
        None
    };
    Ok(total_loss(base, nsd, &weights))
}

fn epoch_weights(cfg: &NsdConfig, epoch: usize) -> crate::config::LossWeights {
    match cfg.schedule {
        WeightSchedule::Fixed => cfg.weights,
        WeightSchedule::Linear => cfg.weights.interpolate(&cfg.weights_end, epoch, cfg.epochs),
    }
}

#[derive(Debug, Clone)]
pub struct NsdOutcome<T> {
    pub student: ToyStudent<T>,
    pub log: MetricsLog,
    /// Full-split training loss before the first update.
    pub initial_loss: LossBreakdown<T>,
    /// Full-split training loss after the last update.
    pub final_loss: LossBreakdown<T>,
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(PandError) -> PandError {
    move |e| match e {
        PandError::Numeric { component, detail } => PandError::Diverged {
            epoch,
            batch,
            detail: format!("{component}: {detail}"),
        },
        other => other,
    }
}

/// Stage-NSD: AdamW over the student only, cosine-annealed per epoch.
///
/// `checkpoints`, when set, receives `epoch-XXXX.ckpt` files every
/// `checkpoint_every` epochs and `final.ckpt` at the end.
pub fn run_nsd_stage<T: Scalar>(
    cfg: &TrainConfig,
    pair: &EncoderPair<T>,
    anchors: &SemanticAnchors<T>,
    mut student: ToyStudent<T>,
    train: &DatasetSplit<T>,
    held_out: Option<&DatasetSplit<T>>,
    checkpoints: Option<&Path>,
) -> Result<NsdOutcome<T>> {
    anchors.ensure_frozen("Stage-NSD")?;
    let nsd = &cfg.nsd;
    nsd.weights.validate_for_classes(anchors.num_classes())?;
    if nsd.schedule == WeightSchedule::Linear {
        nsd.weights_end
            .validate_for_classes(anchors.num_classes())?;
    }
    if train.num_classes() != anchors.num_classes()
        || student.num_classes() != anchors.num_classes()
    {
        return Err(PandError::Shape {
            context: "classes in data/student vs anchors",
            expected: anchors.num_classes(),
            got: if student.num_classes() != anchors.num_classes() {
                student.num_classes()
            } else {
                train.num_classes()
            },
        });
    }
    if train.is_empty() {
        return Err(PandError::Evaluation(
            "Stage-NSD needs a non-empty training split".into(),
        ));
    }

    let inputs = train.all_inputs()?;
    let labels = train.labels();
    let teacher = teacher_forward(pair, anchors, &inputs)?;
    let eval = match held_out {
        Some(s) if !s.is_empty() => Some((s.all_inputs()?, s.labels())),
        _ => None,
    };
    if let Some(dir) = checkpoints {
        fs::create_dir_all(dir).map_err(|e| PandError::io(dir, e))?;
    }
    let config_echo = cfg.render();

    let initial_loss = evaluate_loss(&student, &teacher, anchors, &inputs, &labels, nsd, 0)?;
    let mut opt = AdamW::new(T::lit(nsd.lr), T::lit(nsd.weight_decay));
    let mut log = MetricsLog::default();
    let started = Instant::now();
    for epoch in 0..nsd.epochs {
        let lr = cosine_lr(nsd.lr, nsd.min_lr, epoch, nsd.epochs);
        opt.lr = T::lit(lr);
        let weights = epoch_weights(nsd, epoch);
        let structural = nsd.structural && weights.lambda_nsd != 0.0;
        let mut sums = [0.0f64; 6];
        for (b, idx) in epoch_batches(train.len(), nsd.batch_size, nsd.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let xb = inputs.select_rows(&idx);
            let tb = teacher.select(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (out, trace) = student.forward_traced(&xb).map_err(diverged(epoch, b))?;
            let (base, grads) = base_loss_with_grad(&out, &tb, anchors, &yb, &weights)
                .map_err(diverged(epoch, b))?;
            let mut g_logits = grads.logits;
            let nsd_value = if structural {
                let (v, g) = nsd_loss_with_grad(&tb.logits, &out.logits, &yb, &weights)
                    .map_err(diverged(epoch, b))?;
                g_logits.add_scaled(T::lit(weights.lambda_nsd), &g)?;
                Some(v)
            } else {
                None
            };
            let parts = total_loss(base, nsd_value, &weights);
            if !parts.total.is_finite() {
                return Err(PandError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("total loss {}", parts.total),
                });
            }
            let mut g = student.backward(&trace, &g_logits, &grads.projected)?;
            if g.iter().any(|m| !m.is_finite()) {
                return Err(PandError::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            clip_global_norm(&mut g, nsd.grad_clip);
            opt.step(&mut student.parameters_mut(), &g);

            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                parts.cls,
                parts.vis,
                parts.txt,
                parts.nsd,
                parts.base,
                parts.total,
            ]) {
                *s += v.as_f64() * w;
            }
        }
        let n = train.len() as f64;
        let mut rec = EpochRecord::new(Stage::Nsd, epoch, lr);
        rec.cls = Some(sums[0] / n);
        rec.vis = Some(sums[1] / n);
        rec.txt = Some(sums[2] / n);
        if structural {
            rec.nsd = Some(sums[3] / n);
        }
        rec.base = Some(sums[4] / n);
        rec.total = Some(sums[5] / n);
        if nsd.structural {
            rec.lambda_nsd = Some(weights.lambda_nsd);
        }
        if let Some((x, y)) = &eval {
            let out = crate::student::student_forward(&student, x)?;
            rec.top1 = Some(anchors::accuracy_percent(&out.logits, y));
        }
        rec.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        log.push(rec);

        if let Some(dir) = checkpoints {
            if nsd.checkpoint_every > 0 && (epoch + 1) % nsd.checkpoint_every == 0 {
                let ckpt = Checkpoint::capture(&student, Some(&opt), epoch + 1, &config_echo);
                save_checkpoint(&ckpt, dir.join(format!("epoch-{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = checkpoints {
        let ckpt = Checkpoint::capture(&student, Some(&opt), nsd.epochs, &config_echo);
        save_checkpoint(&ckpt, dir.join("final.ckpt"))?;
    }
    let final_loss = evaluate_loss(
        &student,
        &teacher,
        anchors,
        &inputs,
        &labels,
        nsd,
        nsd.epochs.saturating_sub(1),
    )?;
    Ok(NsdOutcome {
        student,
        log,
        initial_loss,
        final_loss,
    })
}

/// Seeded student sized for `world`.
pub fn init_student<T: Scalar>(cfg: &TrainConfig, world: &World<T>) -> Result<ToyStudent<T>> {
    let input_dim = world
        .train
        .input_dim()
        .ok_or_else(|| PandError::Config("student needs vector inputs".into()))?;
    Ok(StudentModel::toy(
        input_dim,
        cfg.student.hidden,
        cfg.student.feat_dim,
        world.train.num_classes(),
        world.pair.embed_dim(),
        cfg.student.init_std,
        cfg.student.seed,
    ))
}

/// Hashes taken at the stage boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub encoders_before_psc: Fingerprint,
    pub encoders_after_psc: Fingerprint,
    pub context_before_psc: Fingerprint,
    pub context_after_psc: Fingerprint,
    pub encoders_before_nsd: Fingerprint,
    pub encoders_after_nsd: Fingerprint,
    pub anchors_before_nsd: Fingerprint,
    pub anchors_after_nsd: Fingerprint,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome<T> {
    pub anchors: SemanticAnchors<T>,
    /// Learned context; `None` when template anchors were used.
    pub context: Option<ContextTokens<T>>,
    pub student: ToyStudent<T>,
    pub log: MetricsLog,
    pub initial_loss: LossBreakdown<T>,
    pub final_loss: LossBreakdown<T>,
    pub freeze: FreezeReport,
}

/// Where pipeline artifacts go; paths from the config are resolved against
/// `out_dir`.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub out_dir: Option<PathBuf>,
}

impl Artifacts {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: Some(dir.into()),
        }
    }

    pub fn resolve(&self, path: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(path))
    }
}

fn check_same(what: &str, before: &Fingerprint, after: &Fingerprint) -> Result<()> {
    if before == after {
        Ok(())
    } else {
        Err(PandError::FreezeViolation(format!(
            "{what} changed: {before} -> {after}"
        )))
    }
}

/// Stage-PSC (or template anchors), freeze and persist the anchors, then
/// Stage-NSD on a fresh seeded student.
pub fn run_pipeline<T: Scalar>(
    cfg: &TrainConfig,
    world: &World<T>,
    artifacts: &Artifacts,
) -> Result<PipelineOutcome<T>> {
    cfg.validate_for_classes(world.train.num_classes())?;
    if let Some(dir) = &artifacts.out_dir {
        fs::create_dir_all(dir).map_err(|e| PandError::io(dir, e))?;
    }
    let encoders_before_psc = world.pair.fingerprint();
    let context_before_psc =
        ContextTokens::<T>::init(cfg.psc.n_ctx, world.vocab.token_dim(), cfg.psc.seed)?
            .fingerprint();
    let (anchors, context, mut log) = match cfg.nsd.anchor_source {
        AnchorSource::Learned => {
            let psc = run_psc(
                &cfg.psc,
                &world.train,
                &world.pair,
                &world.vocab,
                Some(&world.test),
            )?;
            (psc.anchors, Some(psc.context), psc.log)
        }
        AnchorSource::Template => (template_anchors(cfg, world)?, None, MetricsLog::default()),
    };
    let encoders_after_psc = world.pair.fingerprint();
    check_same(
        "encoder weights during Stage-PSC",
        &encoders_before_psc,
        &encoders_after_psc,
    )?;
    let context_after_psc = context
        .as_ref()
        .map_or(context_before_psc, ContextTokens::fingerprint);

    // Stage-NSD reads back exactly what was persisted.
    let bytes = write_anchors(&anchors)?;
    if let Some(path) = artifacts.resolve(&cfg.paths.anchors) {
        fs::write(&path, &bytes).map_err(|e| PandError::io(&path, e))?;
    }
    let anchors: SemanticAnchors<T> = read_anchors(&bytes)?;

    let encoders_before_nsd = world.pair.fingerprint();
    let anchors_before_nsd = anchors.fingerprint();
    let student = init_student(cfg, world)?;
    let ckpt_dir = artifacts.resolve(&cfg.paths.checkpoints);
    let nsd = run_nsd_stage(
        cfg,
        &world.pair,
        &anchors,
        student,
        &world.train,
        Some(&world.test),
        ckpt_dir.as_deref(),
    )?;
    let encoders_after_nsd = world.pair.fingerprint();
    let anchors_after_nsd = anchors.fingerprint();
    check_same(
        "encoder weights during Stage-NSD",
        &encoders_before_nsd,
        &encoders_after_nsd,
    )?;
    check_same(
        "anchors during Stage-NSD",
        &anchors_before_nsd,
        &anchors_after_nsd,
    )?;

    log.extend(nsd.log);
    if let Some(path) = artifacts.resolve(&cfg.paths.metrics) {
        log.write(path, cfg.eval.wall_clock)?;
    }
    Ok(PipelineOutcome {
        anchors,
        context,
        student: nsd.student,
        log,
        initial_loss: nsd.initial_loss,
        final_loss: nsd.final_loss,
        freeze: FreezeReport {
            encoders_before_psc,
            encoders_after_psc,
            context_before_psc,
            context_after_psc,
            encoders_before_nsd,
            encoders_after_nsd,
            anchors_before_nsd,
            anchors_after_nsd,
        },
    })
}

/// Teacher top-1 (%) of `anchors` on `split`.
pub fn teacher_accuracy<T: Scalar>(
    pair: &EncoderPair<T>,
    anchors: &SemanticAnchors<T>,
    split: &DatasetSplit<T>,
) -> Result<f64> {
    if split.is_empty() {
        return Err(PandError::Evaluation("empty split".into()));
    }
    let out = teacher_forward(pair, anchors, &split.all_inputs()?)?;
    Ok(anchors::accuracy_percent(&out.logits, &split.labels()))
}

/// Row-wise argmax helper shared by the evaluators.
pub(crate) fn predictions<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    logits.row_iter().map(tensor::argmax).collect()
}
