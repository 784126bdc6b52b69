//! Command-line surface. Every command loads a config file, applies
//! `--seed` and then `--set` overrides, echoes the resolved config and its
//! hash, and only then runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchors::{load_anchors, run_psc, save_anchors, SemanticAnchors};
use crate::config::{ExportSource, TrainConfig};
use crate::data::{self, ToySpec};
use crate::error::{PandError, Result};
use crate::eval::{
    self, export_embeddings, neighborhood_consistency, top1_accuracy, EmbeddingSource,
};
use crate::student::{load_checkpoint, MlpBackbone};
use crate::teacher::Teacher;
use crate::train::{self, build_world, init_student, run_nsd_stage, Artifacts, World};

#[derive(Debug, Parser)]
#[command(
    name = "pand",
    version,
    about = "Prompt-calibrated, neighborhood-aware distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn the prompt context and write frozen anchors.
    Calibrate(Common),
    /// Distill a student against frozen anchors (calibrating first when
    /// `--anchors` is not given).
    Distill(Common),
    /// Score a trained student and export embeddings.
    Evaluate(EvaluateArgs),
    /// Train one student per λ_NSD in `eval.sweep_grid`.
    Sweep(Common),
    /// Four-row component ablation.
    Ablate(Common),
    /// Write the synthetic dataset as train/test split files.
    GenToy(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`dotted.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file and `--seed`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Anchor file to read (distill, evaluate) or write (calibrate).
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Sets every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel workers for sweep and ablate.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Student checkpoint; defaults to `<out>/<paths.checkpoints>/final.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Load, override, validate, and echo the configuration.
pub fn resolve_config(args: &Common) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.psc.seed = seed;
        cfg.nsd.seed = seed;
        cfg.data.seed = seed;
        cfg.teacher.seed = seed;
        cfg.student.seed = seed;
    }
    for assignment in &args.set {
        cfg.apply_override(assignment)
            .map_err(|e| PandError::Config(format!("--set {assignment}: {}", strip_config(&e))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn strip_config(e: &PandError) -> String {
    match e {
        PandError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn echo(cfg: &TrainConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| PandError::io(out, e))?;
    let text = cfg.render();
    let path = out.join("resolved.cfg");
    fs::write(&path, &text).map_err(|e| PandError::io(&path, e))?;
    eprint!("{text}");
    println!("config hash {}", cfg.hash());
    Ok(())
}

fn world(cfg: &TrainConfig) -> Result<World<f32>> {
    let w = build_world::<f32>(cfg)?;
    for warning in w.train.warnings().iter().chain(w.test.warnings()) {
        eprintln!("warning: {warning}");
    }
    Ok(w)
}

fn anchors_for(cfg: &TrainConfig, args: &Common, w: &World<f32>) -> Result<SemanticAnchors<f32>> {
    match &args.anchors {
        Some(path) => {
            let a: SemanticAnchors<f32> = load_anchors(path)?;
            if a.class_names() != w.train.classes() {
                return Err(PandError::Format(format!(
                    "{} was calibrated for classes {:?}, data has {:?}",
                    path.display(),
                    a.class_names(),
                    w.train.classes()
                )));
            }
            Ok(a)
        }
        None => Ok(eval::calibrate(cfg, w)?.0),
    }
}

fn calibrate(args: &Common) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo(&cfg, &args.out)?;
    let w = world(&cfg)?;
    let out = run_psc(&cfg.psc, &w.train, &w.pair, &w.vocab, Some(&w.test))?;
    let path = args
        .anchors
        .clone()
        .unwrap_or_else(|| args.out.join(&cfg.paths.anchors));
    save_anchors(&out.anchors, &path)?;
    // Distill writes `paths.metrics`; keep the calibration log beside it.
    out.log.write(
        args.out.join(format!("psc-{}", cfg.paths.metrics)),
        cfg.eval.wall_clock,
    )?;
    let acc = train::teacher_accuracy(&w.pair, &out.anchors, &w.test)?;
    println!(
        "anchors {} ({} classes)",
        path.display(),
        out.anchors.num_classes()
    );
    println!("teacher top1 {acc:.2}");
    Ok(())
}

fn distill(args: &Common) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo(&cfg, &args.out)?;
    let w = world(&cfg)?;
    let (student, log) = if args.anchors.is_some() {
        let anchors = anchors_for(&cfg, args, &w)?;
        let before = (w.pair.fingerprint(), anchors.fingerprint());
        let ckpt = args.out.join(&cfg.paths.checkpoints);
        let out = run_nsd_stage(
            &cfg,
            &w.pair,
            &anchors,
            init_student(&cfg, &w)?,
            &w.train,
            Some(&w.test),
            Some(&ckpt),
        )?;
        if before != (w.pair.fingerprint(), anchors.fingerprint()) {
            return Err(PandError::FreezeViolation(
                "encoder or anchor hash changed during Stage-NSD".into(),
            ));
        }
        out.log
            .write(args.out.join(&cfg.paths.metrics), cfg.eval.wall_clock)?;
        (out.student, out.log)
    } else {
        let out = train::run_pipeline(&cfg, &w, &Artifacts::in_dir(&args.out))?;
        (out.student, out.log)
    };
    if let Some(last) = log.records().last() {
        if let Some(total) = last.total {
            println!("final epoch total loss {total:.6}");
        }
    }
    println!("student top1 {:.2}", top1_accuracy(&student, &w.test)?);
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let common = &args.common;
    let cfg = resolve_config(common)?;
    echo(&cfg, &common.out)?;
    let w = world(&cfg)?;
    let anchors = match &common.anchors {
        Some(_) => anchors_for(&cfg, common, &w)?,
        None => load_anchors(common.out.join(&cfg.paths.anchors))?,
    };
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| common.out.join(&cfg.paths.checkpoints).join("final.ckpt"));
    let mut student = init_student(&cfg, &w)?;
    load_checkpoint(&ckpt_path)?.restore_into(&mut student)?;
    let teacher = Teacher::new(&w.pair, &anchors)?;
    println!("teacher top1 {:.2}", top1_accuracy(&teacher, &w.test)?);
    println!("student top1 {:.2}", top1_accuracy(&student, &w.test)?);
    let js = neighborhood_consistency(&teacher, &student, &w.test, cfg.nsd.weights.k)?;
    println!("neighborhood consistency {js:.6}");
    let path = common.out.join("embeddings.tsv");
    let source = match cfg.eval.export {
        ExportSource::Student => EmbeddingSource::<f32, MlpBackbone<f32>>::Student(&student),
        ExportSource::Teacher => EmbeddingSource::Teacher(&w.pair, &anchors),
    };
    export_embeddings(source, &w.test, &path)?;
    println!("embeddings {}", path.display());
    Ok(())
}

fn sweep(args: &Common) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo(&cfg, &args.out)?;
    let w = world(&cfg)?;
    let out = eval::run_sweep(&cfg, &w, &cfg.eval.sweep_grid, args.workers)?;
    out.table.write(args.out.join("sweep"))?;
    print!("{}", out.table.to_text());
    Ok(())
}

fn ablate(args: &Common) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo(&cfg, &args.out)?;
    let w = world(&cfg)?;
    let table = eval::run_ablation(&cfg, &w, args.workers)?;
    table.write(args.out.join("ablation"))?;
    print!("{}", table.to_text());
    Ok(())
}

fn gen_toy(args: &Common) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo(&cfg, &args.out)?;
    let d = &cfg.data;
    let mut spec = ToySpec::new(d.classes, d.n_per_class, d.dim, d.separation, d.seed);
    spec.noise = d.noise;
    let (train, test) = data::make_toy::<f32>(&spec)?;
    for (split, name) in [(&train, "train.bin"), (&test, "test.bin")] {
        let path = args.out.join(name);
        data::save_split(split, &path)?;
        println!("{} samples -> {}", split.len(), path.display());
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Distill(a) => distill(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::GenToy(a) => gen_toy(a),
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn parse_and_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
