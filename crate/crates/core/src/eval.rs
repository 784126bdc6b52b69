//! Accuracy, neighborhood consistency, and the sweep / ablation harnesses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use crate::anchors::run_psc;
use crate::anchors::SemanticAnchors;
use crate::config::{AnchorSource, DataSource, LossWeights, TrainConfig};
use crate::data::DatasetSplit;
use crate::encoder::EncoderPair;
use crate::error::{PandError, Result};
use crate::losses::{nsd_loss, LossBreakdown};
use crate::metrics::MetricsLog;
use crate::scalar::Scalar;
use crate::student::{student_forward, Backbone, StudentModel};
use crate::teacher::{teacher_forward, Teacher};
use crate::tensor::Matrix;
use crate::train::{init_student, predictions, run_nsd_stage, template_anchors, World};

/// Anything that maps a batch of inputs to class logits.
pub trait Classifier<T: Scalar> {
    fn logits(&self, inputs: &Matrix<T>) -> Result<Matrix<T>>;
}

impl<T: Scalar, B: Backbone<T>> Classifier<T> for StudentModel<T, B> {
    fn logits(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(student_forward(self, inputs)?.logits)
    }
}

impl<T: Scalar> Classifier<T> for Teacher<'_, T> {
    fn logits(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(inputs)?.logits)
    }
}

/// Percentage of rows whose argmax (lowest index on ties) equals the label.
pub fn top1_from_logits<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(PandError::Evaluation(
            "top-1 accuracy of an empty split".into(),
        ));
    }
    if logits.rows() != labels.len() {
        return Err(PandError::Shape {
            context: "logit rows vs labels",
            expected: labels.len(),
            got: logits.rows(),
        });
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

pub fn top1_accuracy<T: Scalar>(
    model: &impl Classifier<T>,
    split: &DatasetSplit<T>,
) -> Result<f64> {
    if split.is_empty() {
        return Err(PandError::Evaluation(
            "top-1 accuracy of an empty split".into(),
        ));
    }
    top1_from_logits(&model.logits(&split.all_inputs()?)?, &split.labels())
}

/// Mean JS divergence between teacher and student relation distributions
/// over teacher-chosen `k`-neighborhoods; lower means the student ranks its
/// confusable classes more like the teacher does.
pub fn neighborhood_consistency<T: Scalar>(
    teacher: &Teacher<'_, T>,
    student: &impl Classifier<T>,
    split: &DatasetSplit<T>,
    k: usize,
) -> Result<T> {
    if split.is_empty() {
        return Err(PandError::Evaluation(
            "neighborhood consistency of an empty split".into(),
        ));
    }
    let x = split.all_inputs()?;
    let weights = LossWeights {
        k,
        ..LossWeights::default()
    };
    nsd_loss(
        &teacher.forward(&x)?.logits,
        &student.logits(&x)?,
        &split.labels(),
        &weights,
    )
}

/// Identifies a table row. `order` fixes presentation order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub order: usize,
    pub method: String,
    pub dataset: String,
    pub student: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub key: RowKey,
    /// λ_NSD used for the row.
    pub lambda_nsd: f64,
    /// Held-out student top-1 (%), mean over seeds.
    pub accuracy: f64,
    /// Standard deviation over seeds; `None` for single-seed rows.
    pub accuracy_std: Option<f64>,
    /// Held-out neighborhood consistency, mean over seeds.
    pub consistency: f64,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    /// Hash of the configuration the table was derived from.
    pub config_hash: String,
    rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            rows: Vec::new(),
        }
    }

    /// Insert keeping rows sorted by key, so assembly order does not matter.
    pub fn insert(&mut self, row: ResultRow) -> Result<()> {
        if !(0.0..=100.0).contains(&row.accuracy) {
            return Err(PandError::Evaluation(format!(
                "accuracy {} outside [0, 100]",
                row.accuracy
            )));
        }
        match self.rows.binary_search_by(|r| r.key.cmp(&row.key)) {
            Ok(_) => Err(PandError::Evaluation(format!(
                "duplicate row {:?}",
                row.key
            ))),
            Err(pos) => {
                self.rows.insert(pos, row);
                Ok(())
            }
        }
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn cells(&self) -> Vec<[String; 8]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.key.method.clone(),
                    r.key.dataset.clone(),
                    r.key.student.clone(),
                    format!("{}", r.lambda_nsd),
                    match r.accuracy_std {
                        Some(s) => format!("{:.2} ± {:.2}", r.accuracy, s),
                        None => format!("{:.2}", r.accuracy),
                    },
                    format!("{:.6}", r.consistency),
                    r.seed.to_string(),
                    r.config_hash[..16.min(r.config_hash.len())].to_string(),
                ]
            })
            .collect()
    }

    const HEADER: [&'static str; 8] = [
        "method",
        "dataset",
        "student",
        "lambda_nsd",
        "top1",
        "consistency",
        "seed",
        "config",
    ];

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut widths = Self::HEADER.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = format!("# config {}\n", self.config_hash);
        let line = |out: &mut String, cols: Vec<&str>| {
            let parts: Vec<String> = cols
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, Self::HEADER.to_vec());
        for row in &cells {
            line(&mut out, row.iter().map(String::as_str).collect());
        }
        out
    }

    /// Comma-separated with full-precision numbers and full hashes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,dataset,student,lambda_nsd,top1,top1_std,consistency,seed,seeds,config_hash\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.key.method,
                r.key.dataset,
                r.key.student,
                r.lambda_nsd,
                r.accuracy,
                r.accuracy_std.map(|s| s.to_string()).unwrap_or_default(),
                r.consistency,
                r.seed,
                r.seeds,
                r.config_hash
            );
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        for (ext, body) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let path = stem.with_extension(ext);
            fs::write(&path, body).map_err(|e| PandError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Frozen anchors for `cfg.nsd.anchor_source`.
pub fn calibrate<T: Scalar>(
    cfg: &TrainConfig,
    world: &World<T>,
) -> Result<(SemanticAnchors<T>, MetricsLog)> {
    match cfg.nsd.anchor_source {
        AnchorSource::Learned => {
            let out = run_psc(
                &cfg.psc,
                &world.train,
                &world.pair,
                &world.vocab,
                Some(&world.test),
            )?;
            Ok((out.anchors, out.log))
        }
        AnchorSource::Template => Ok((template_anchors(cfg, world)?, MetricsLog::default())),
    }
}

/// One trained cell, single seed.
#[derive(Debug, Clone)]
pub struct CellRun<T> {
    pub accuracy: f64,
    pub consistency: T,
    pub log: MetricsLog,
    pub initial_loss: LossBreakdown<T>,
    pub final_loss: LossBreakdown<T>,
}

/// Stage-NSD from a fresh seeded student against fixed anchors, scored on
/// the held-out split.
pub fn run_cell<T: Scalar>(
    cfg: &TrainConfig,
    world: &World<T>,
    anchors: &SemanticAnchors<T>,
) -> Result<CellRun<T>> {
    let student = init_student(cfg, world)?;
    let out = run_nsd_stage(
        cfg,
        &world.pair,
        anchors,
        student,
        &world.train,
        Some(&world.test),
        None,
    )?;
    let teacher = Teacher::new(&world.pair, anchors)?;
    Ok(CellRun {
        accuracy: top1_accuracy(&out.student, &world.test)?,
        consistency: neighborhood_consistency(
            &teacher,
            &out.student,
            &world.test,
            cfg.nsd.weights.k,
        )?,
        log: out.log,
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
    })
}

fn with_seed(cfg: &TrainConfig, offset: usize) -> TrainConfig {
    let mut c = cfg.clone();
    c.student.seed = cfg.student.seed.wrapping_add(offset as u64);
    c.nsd.seed = cfg.nsd.seed.wrapping_add(offset as u64);
    c
}

/// Run independent jobs on up to `workers` threads; results keep job order.
fn run_jobs<J: Sync, R: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(PandError::Evaluation("worker panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn dataset_name(cfg: &TrainConfig) -> String {
    let stem = |p: &str| {
        Path::new(p)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.to_string())
    };
    match cfg.data.source {
        DataSource::Toy => format!("toy-c{}-d{}", cfg.data.classes, cfg.data.dim),
        DataSource::Folder => {
            let root = if cfg.data.root.is_empty() {
                std::env::var(crate::train::DATA_ROOT_ENV).unwrap_or_default()
            } else {
                cfg.data.root.clone()
            };
            stem(root.trim_end_matches('/'))
        }
        DataSource::Export => stem(&cfg.data.train_file),
    }
}

fn student_name(cfg: &TrainConfig) -> String {
    format!("mlp-{}x{}", cfg.student.hidden, cfg.student.feat_dim)
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

struct Cell {
    order: usize,
    method: String,
    cfg: TrainConfig,
    learned: bool,
}

/// Trained cells in job order, each with its per-seed runs.
fn run_cells<T: Scalar>(
    cells: &[Cell],
    world: &World<T>,
    learned: Option<&SemanticAnchors<T>>,
    template: Option<&SemanticAnchors<T>>,
    seeds: usize,
    workers: usize,
) -> Result<Vec<Vec<CellRun<T>>>> {
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, s)))
        .collect();
    let runs = run_jobs(&jobs, workers, |&(c, s)| {
        let cell = &cells[c];
        let anchors =
            if cell.learned { learned } else { template }.expect("anchors prepared for every cell");
        run_cell(&with_seed(&cell.cfg, s), world, anchors)
    })?;
    let mut grouped: Vec<Vec<CellRun<T>>> = (0..cells.len()).map(|_| Vec::new()).collect();
    for ((c, _), run) in jobs.into_iter().zip(runs) {
        grouped[c].push(run);
    }
    Ok(grouped)
}

fn assemble<T: Scalar>(
    base: &TrainConfig,
    cells: &[Cell],
    runs: &[Vec<CellRun<T>>],
) -> Result<ResultTable> {
    let mut table = ResultTable::new(base.hash());
    for (cell, runs) in cells.iter().zip(runs) {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let cons: Vec<f64> = runs.iter().map(|r| r.consistency.as_f64()).collect();
        let (accuracy, accuracy_std) = mean_std(&acc);
        table.insert(ResultRow {
            key: RowKey {
                order: cell.order,
                method: cell.method.clone(),
                dataset: dataset_name(&cell.cfg),
                student: student_name(&cell.cfg),
            },
            lambda_nsd: cell.cfg.nsd.weights.lambda_nsd,
            accuracy,
            accuracy_std,
            consistency: mean_std(&cons).0,
            config_hash: cell.cfg.hash(),
            seed: cell.cfg.student.seed,
            seeds: runs.len(),
        })?;
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome<T> {
    pub table: ResultTable,
    /// Per grid value, the first seed's run.
    pub runs: Vec<(f64, CellRun<T>)>,
}

/// One Stage-NSD run per λ_NSD in `grid`, all against the same frozen
/// anchors. The λ = 0 row is the plain alignment baseline.
pub fn run_sweep<T: Scalar>(
    base: &TrainConfig,
    world: &World<T>,
    grid: &[f64],
    workers: usize,
) -> Result<SweepOutcome<T>> {
    if grid.is_empty() {
        return Err(PandError::Config("sweep grid must not be empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(PandError::Config(format!(
            "sweep values must be non-negative, got {bad}"
        )));
    }
    base.validate_for_classes(world.train.num_classes())?;
    let (anchors, _) = calibrate(base, world)?;
    let learned = base.nsd.anchor_source == AnchorSource::Learned;
    let cells: Vec<Cell> = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut cfg = base.clone();
            cfg.nsd.weights.lambda_nsd = lambda;
            Cell {
                order: i,
                method: format!("lambda={lambda}"),
                cfg,
                learned,
            }
        })
        .collect();
    let runs = run_cells(
        &cells,
        world,
        Some(&anchors),
        Some(&anchors),
        base.eval.seeds,
        workers,
    )?;
    let table = assemble(base, &cells, &runs)?;
    let firsts = grid
        .iter()
        .zip(runs)
        .map(|(&l, r)| (l, r.into_iter().next().expect("at least one seed")))
        .collect();
    Ok(SweepOutcome {
        table,
        runs: firsts,
    })
}

/// The four-row component ablation: {template, learned} anchors ×
/// {λ_NSD = 0, λ_NSD > 0}. A zero λ_NSD in `base` is replaced by 0.5 for
/// the structural rows.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    world: &World<T>,
    workers: usize,
) -> Result<ResultTable> {
    base.validate_for_classes(world.train.num_classes())?;
    let lambda = if base.nsd.weights.lambda_nsd > 0.0 {
        base.nsd.weights.lambda_nsd
    } else {
        0.5
    };
    let variant = |order: usize, method: &str, learned: bool, lambda: f64| {
        let mut cfg = base.clone();
        cfg.nsd.anchor_source = if learned {
            AnchorSource::Learned
        } else {
            AnchorSource::Template
        };
        cfg.nsd.weights.lambda_nsd = lambda;
        Cell {
            order,
            method: method.into(),
            cfg,
            learned,
        }
    };
    let cells = vec![
        variant(0, "baseline", false, 0.0),
        variant(1, "+PSC", true, 0.0),
        variant(2, "+NSD", false, lambda),
        variant(3, "PSC+NSD", true, lambda),
    ];
    let learned = run_psc(&base.psc, &world.train, &world.pair, &world.vocab, None)?.anchors;
    let template = template_anchors(base, world)?;
    let runs = run_cells(
        &cells,
        world,
        Some(&learned),
        Some(&template),
        base.eval.seeds,
        workers,
    )?;
    assemble(base, &cells, &runs)
}

/// What [`export_embeddings`] writes features for.
pub enum EmbeddingSource<'a, T: Scalar, B: Backbone<T>> {
    /// Student backbone features.
    Student(&'a StudentModel<T, B>),
    /// Unit-normalized teacher image features.
    Teacher(&'a EncoderPair<T>, &'a SemanticAnchors<T>),
}

/// Text export for external visualization: a `N d` header line, then one
/// `id<TAB>label<TAB>v_1 … v_d` line per sample.
pub fn export_embeddings<T: Scalar, B: Backbone<T>>(
    source: EmbeddingSource<'_, T, B>,
    split: &DatasetSplit<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if split.is_empty() {
        return Err(PandError::Evaluation(
            "cannot export embeddings of an empty split".into(),
        ));
    }
    let x = split.all_inputs()?;
    let feats = match source {
        EmbeddingSource::Student(model) => student_forward(model, &x)?.features,
        EmbeddingSource::Teacher(pair, anchors) => teacher_forward(pair, anchors, &x)?.features,
    };
    let mut out = format!("{} {}\n", feats.rows(), feats.cols());
    for ((row, sample), label) in feats.row_iter().zip(split.samples()).zip(split.labels()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}\t{}\t{}", sample.id, label, vals.join(" "));
    }
    fs::write(path, out).map_err(|e| PandError::io(path, e))
}
