//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line
//! straight to stderr, so the verdicts show up even without `--nocapture`.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pand::anchors::{
    load_anchors, psc_loss_and_grad, read_anchors, save_anchors, write_anchors, ClassVocabulary,
    ContextTokens, SemanticAnchors,
};
use pand::config::{LossWeights, TeacherConfig, TrainConfig};
use pand::data::{make_toy, ToySpec};
use pand::eval::{self, run_cell, run_sweep};
use pand::losses::{
    base_loss, base_loss_with_grad, cosine_alignment_with_grad, cross_entropy_with_grad,
    js_divergence, neighborhood_distribution, nsd_loss, nsd_loss_with_grad, select_neighborhood,
    text_alignment_with_grad,
};
use pand::rng;
use pand::student::{read_checkpoint, write_checkpoint, Checkpoint, StudentOutput};
use pand::teacher::TeacherOutput;
use pand::tensor::{self, Matrix};
use pand::toy::build_toy_vlm;
use pand::train::{build_world, init_student, run_pipeline, teacher_accuracy, Artifacts, World};
use pand::PandError;

const LN_2: f64 = std::f64::consts::LN_2;

/// Run one criterion, print its verdict, and fail the test on failure.
fn criterion(n: u32, title: &str, limit: Option<Duration>, body: impl FnOnce() -> String) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let verdict = match &outcome {
        Ok(detail) => match limit {
            Some(l) if elapsed >= l => Err(format!("took {elapsed:.2?}, limit {l:?}; {detail}")),
            _ => Ok(detail.clone()),
        },
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let line = match &verdict {
        Ok(detail) => format!("PASS criterion {n}: {title} [{detail}; {elapsed:.2?}]"),
        Err(why) => format!("FAIL criterion {n}: {title} [{why}]"),
    };
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    if let Err(why) = verdict {
        panic!("criterion {n} failed: {why}");
    }
}

fn toy_config() -> TrainConfig {
    TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.cfg")).unwrap()
}

fn toy_world() -> &'static World<f32> {
    static WORLD: OnceLock<World<f32>> = OnceLock::new();
    WORLD.get_or_init(|| build_world(&toy_config()).unwrap())
}

fn unit(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let u = tensor::l2_normalize(m.row(i)).unwrap();
        out.row_mut(i).copy_from_slice(&u);
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    d / tensor::l2_norm(a).max(tensor::l2_norm(b)).max(1e-300)
}

fn numeric_grad(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Vec<f64> {
    let h = 1e-3;
    (0..x.as_slice().len())
        .map(|i| {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut q = x.clone();
            q.as_mut_slice()[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn logits(seed: u64, n: usize, c: usize, std: f64) -> (Matrix<f64>, Vec<usize>) {
    let z = Matrix::gaussian(n, c, std, &mut rng::derived(seed, "acceptance-logits"));
    (z, (0..n).map(|i| (i * 7 + seed as usize) % c).collect())
}

fn weights(k: usize) -> LossWeights {
    LossWeights {
        k,
        ..LossWeights::default()
    }
}

#[test]
fn criterion_1_loss_math_oracles() {
    criterion(
        1,
        "selection and relation oracles",
        Some(Duration::from_secs(5)),
        || {
            let mut checked = 0;
            for seed in 0..100 {
                let (z, y) = logits(seed, 16, 20, 1.0);
                for k in [1, 3, 19] {
                    let n = select_neighborhood(&z, &y, k).unwrap();
                    for i in 0..16 {
                        let mut order: Vec<usize> = (0..20).filter(|&j| j != y[i]).collect();
                        order.sort_by(|&a, &b| {
                            z[(i, b)].partial_cmp(&z[(i, a)]).unwrap().then(a.cmp(&b))
                        });
                        assert_eq!(n.row(i), &order[..k], "seed {seed} k {k} row {i}");
                        checked += 1;
                    }
                    let rho = neighborhood_distribution(&z, &y, &n).unwrap().rho;
                    for i in 0..16 {
                        let w: Vec<f64> = n
                            .row(i)
                            .iter()
                            .map(|&j| (z[(i, j)] - z[(i, y[i])]).exp())
                            .collect();
                        let s: f64 = w.iter().sum();
                        for (got, wi) in rho.row(i).iter().zip(&w) {
                            assert!((got - wi / s).abs() <= 1e-6, "seed {seed} k {k} row {i}");
                        }
                    }
                }
            }
            let z = Matrix::from_rows(&[vec![5.0, 4.0, 3.0]]).unwrap();
            let n = select_neighborhood(&z, &[0], 2).unwrap();
            let rho: Matrix<f64> = neighborhood_distribution(&z, &[0], &n).unwrap().rho;
            assert!((rho[(0, 0)] - 0.73106).abs() < 1e-5 && (rho[(0, 1)] - 0.26894).abs() < 1e-5);
            format!(
                "{checked} rows vs full sort, worked example {:.5}/{:.5}",
                rho[(0, 0)],
                rho[(0, 1)]
            )
        },
    );
}

struct Instance {
    student: StudentOutput<f64>,
    teacher: TeacherOutput<f64>,
    anchors: SemanticAnchors<f64>,
    labels: Vec<usize>,
}

fn instance(seed: u64) -> Instance {
    let (n, c, d) = (8, 10, 6);
    let mut r = rng::derived(seed, "acceptance-instance");
    let s_logits = Matrix::gaussian(n, c, 2.0, &mut r);
    let projected = unit(&Matrix::gaussian(n, d, 1.0, &mut r));
    let feats = unit(&Matrix::gaussian(n, d, 1.0, &mut r));
    let a = unit(&Matrix::gaussian(c, d, 1.0, &mut r));
    let t_logits = feats.matmul_t(&a).unwrap();
    Instance {
        student: StudentOutput {
            features: Matrix::zeros(n, 1),
            projected,
            logits: s_logits,
        },
        teacher: TeacherOutput {
            features: feats,
            logits: t_logits,
        },
        anchors: SemanticAnchors::new(a, (0..c).map(|i| format!("c{i}")).collect())
            .unwrap()
            .freeze(),
        labels: (0..n).map(|i| (i * 3 + seed as usize) % c).collect(),
    }
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    criterion(
        2,
        "finite-difference gradients",
        Some(Duration::from_secs(30)),
        || {
            let mut worst: f64 = 0.0;
            let mut track = |what: &str, seed: u64, e: f64| {
                assert!(e < 1e-4, "{what} seed {seed}: relative error {e:.3e}");
                worst = worst.max(e);
            };
            let w = weights(3);
            for seed in 0..5 {
                let b = instance(seed);
                let (_, g) = cross_entropy_with_grad(&b.student.logits, &b.labels).unwrap();
                let num = numeric_grad(&b.student.logits, |z| {
                    cross_entropy_with_grad(z, &b.labels).unwrap().0
                });
                track("cls", seed, rel_err(g.as_slice(), &num));

                let (_, g) =
                    cosine_alignment_with_grad(&b.student.projected, &b.teacher.features).unwrap();
                let num = numeric_grad(&b.student.projected, |p| {
                    cosine_alignment_with_grad(p, &b.teacher.features)
                        .unwrap()
                        .0
                });
                track("vis", seed, rel_err(g.as_slice(), &num));

                let a = b.anchors.matrix();
                let (_, g) =
                    text_alignment_with_grad(&b.student.projected, a, &b.labels, w.tau).unwrap();
                let num = numeric_grad(&b.student.projected, |p| {
                    text_alignment_with_grad(p, a, &b.labels, w.tau).unwrap().0
                });
                track("txt", seed, rel_err(g.as_slice(), &num));

                let (_, grads) =
                    base_loss_with_grad(&b.student, &b.teacher, &b.anchors, &b.labels, &w).unwrap();
                let num = numeric_grad(&b.student.logits, |z| {
                    let s = StudentOutput {
                        logits: z.clone(),
                        ..b.student.clone()
                    };
                    base_loss(&s, &b.teacher, &b.anchors, &b.labels, &w)
                        .unwrap()
                        .base
                });
                track("base/logits", seed, rel_err(grads.logits.as_slice(), &num));

                let t = b.teacher.logits.map(|v| 4.0 * v);
                let (_, g) = nsd_loss_with_grad(&t, &b.student.logits, &b.labels, &w).unwrap();
                let num = numeric_grad(&b.student.logits, |z| {
                    nsd_loss(&t, z, &b.labels, &w).unwrap()
                });
                track("nsd", seed, rel_err(g.as_slice(), &num));

                // Calibration loss through the toy text encoder into the context.
                let (train, _) = make_toy::<f64>(&ToySpec::new(10, 4, 8, 1.0, seed)).unwrap();
                let vocab = ClassVocabulary::hashed(train.classes(), 6, seed).unwrap();
                let tcfg = TeacherConfig {
                    embed_dim: 6,
                    token_dim: 6,
                    hidden: 3,
                    seed,
                    ..TeacherConfig::default()
                };
                let pair = build_toy_vlm(&train, &vocab, &tcfg).unwrap();
                let feats = unit(
                    &pair
                        .image()
                        .encode_images(&train.all_inputs().unwrap())
                        .unwrap(),
                );
                let labels = train.labels();
                let ctx = ContextTokens::init(3, 6, seed).unwrap();
                let (_, g) =
                    psc_loss_and_grad(&pair, &ctx, &vocab, &feats, &labels, 0.5, false).unwrap();
                let num = numeric_grad(ctx.vectors(), |v| {
                    let c = ContextTokens::from_matrix(v.clone()).unwrap();
                    psc_loss_and_grad(&pair, &c, &vocab, &feats, &labels, 0.5, false)
                        .unwrap()
                        .0
                });
                track("calibration", seed, rel_err(g.as_slice(), &num));
            }
            format!("5 seeds × 6 gradients, worst relative error {worst:.2e}")
        },
    );
}

#[test]
fn criterion_3_structural_invariants() {
    criterion(3, "structural-loss invariants", None, || {
        let w = weights(3);
        let mut cases = 0;
        for seed in 0..50 {
            let (t, y) = logits(seed, 8, 10, 2.0);
            let (s, _) = logits(seed + 1000, 8, 10, 2.0);
            let v = nsd_loss(&t, &s, &y, &w).unwrap();
            assert!((0.0..=LN_2).contains(&v), "range: {v}");
            assert!(nsd_loss(&t, &t, &y, &w).unwrap().abs() <= 1e-8);

            let mut r = rng::derived(seed, "acceptance-shift");
            let shifts = rng::gaussian_vec::<f64>(&mut r, 16, 5.0);
            let (mut t2, mut s2) = (t.clone(), s.clone());
            for i in 0..8 {
                t2.row_mut(i).iter_mut().for_each(|x| *x += shifts[i]);
                s2.row_mut(i).iter_mut().for_each(|x| *x += shifts[8 + i]);
            }
            assert_eq!(
                select_neighborhood(&t, &y, 3).unwrap(),
                select_neighborhood(&t2, &y, 3).unwrap()
            );
            assert!((nsd_loss(&t2, &s, &y, &w).unwrap() - v).abs() <= 1e-6);
            assert!((nsd_loss(&t, &s2, &y, &w).unwrap() - v).abs() <= 1e-6);

            let n = select_neighborhood(&t, &y, 3).unwrap();
            let mut s3 = s.clone();
            for i in 0..8 {
                let outside: Vec<usize> = (0..10)
                    .filter(|j| *j != y[i] && !n.row(i).contains(j))
                    .collect();
                let mut vals: Vec<f64> = outside.iter().map(|&j| s[(i, j)]).collect();
                vals.reverse();
                for (&j, x) in outside.iter().zip(vals) {
                    s3[(i, j)] = x;
                }
            }
            assert_eq!(nsd_loss(&t, &s3, &y, &w).unwrap(), v);

            let p: Vec<f64> = (0..5).map(|j| ((seed + j) % 7 + 1) as f64).collect();
            let q: Vec<f64> = (0..5).map(|j| ((seed * 3 + j) % 5 + 1) as f64).collect();
            let total = |v: &[f64]| v.iter().sum::<f64>();
            let (p, q): (Vec<f64>, Vec<f64>) = (
                p.iter().map(|x| x / total(&p)).collect(),
                q.iter().map(|x| x / total(&q)).collect(),
            );
            let pq = js_divergence(&p, &q).unwrap();
            assert!((pq - js_divergence(&q, &p).unwrap()).abs() <= 1e-9);
            assert!(js_divergence(&p, &p).unwrap().abs() <= 1e-12);
            cases += 1;
        }
        let disjoint = js_divergence(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - LN_2).abs() < 1e-12);
        format!("{cases} random cases, disjoint JS {disjoint:.5}")
    });
}

#[test]
fn criterion_4_freezing_contract() {
    criterion(
        4,
        "freezing contract over a full toy pipeline",
        None,
        || {
            let cfg = toy_config();
            let world = toy_world();
            let dir = tempfile::tempdir().unwrap();
            let encoders = world.pair.fingerprint();
            let out = run_pipeline(&cfg, world, &Artifacts::in_dir(dir.path())).unwrap();
            let f = &out.freeze;
            assert_eq!(f.encoders_before_psc, f.encoders_after_psc);
            assert_ne!(
                f.context_before_psc, f.context_after_psc,
                "Stage-PSC did not move the context"
            );
            assert_eq!(f.encoders_before_nsd, f.encoders_after_nsd);
            assert_eq!(f.anchors_before_nsd, f.anchors_after_nsd);
            assert_eq!(encoders, world.pair.fingerprint());
            assert_eq!(encoders, f.encoders_before_psc);
            let on_disk: SemanticAnchors<f32> =
                load_anchors(dir.path().join(&cfg.paths.anchors)).unwrap();
            assert_eq!(on_disk.fingerprint(), f.anchors_after_nsd);
            assert_eq!(out.anchors.fingerprint(), f.anchors_after_nsd);
            let init = init_student(&cfg, world).unwrap();
            assert_ne!(init, out.student, "Stage-NSD did not train the student");
            format!(
                "encoders {}, anchors {}",
                short(&encoders),
                short(&f.anchors_after_nsd)
            )
        },
    );
}

fn short(f: &impl std::fmt::Display) -> String {
    f.to_string().chars().take(12).collect()
}

/// Ridge-free least squares `[x, 1] W ≈ onehot(y)` by normal equations.
fn least_squares_accuracy(
    train: &pand::data::DatasetSplit<f32>,
    test: &pand::data::DatasetSplit<f32>,
) -> f64 {
    let c = train.num_classes();
    let x = train.all_inputs().unwrap();
    let d = x.cols() + 1;
    let row = |m: &Matrix<f32>, i: usize| -> Vec<f64> {
        m.row(i)
            .iter()
            .map(|&v| v as f64)
            .chain(std::iter::once(1.0))
            .collect()
    };
    let mut a = vec![vec![0.0; d + c]; d];
    for (i, y) in train.labels().into_iter().enumerate() {
        let xi = row(&x, i);
        for p in 0..d {
            for q in 0..d {
                a[p][q] += xi[p] * xi[q];
            }
            a[p][d + y] += xi[p];
        }
    }
    // Gauss-Jordan with partial pivoting on [XᵀX | XᵀY].
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..d {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                a[r].iter_mut()
                    .zip(&pivot_row)
                    .for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    let xt = test.all_inputs().unwrap();
    let hits = test
        .labels()
        .into_iter()
        .enumerate()
        .filter(|&(i, y)| {
            let xi = row(&xt, i);
            let scores: Vec<f64> = (0..c)
                .map(|k| (0..d).map(|p| xi[p] * a[p][d + k]).sum())
                .collect();
            tensor::argmax(&scores) == y
        })
        .count();
    100.0 * hits as f64 / test.len() as f64
}

#[test]
fn criterion_5_toy_end_to_end() {
    criterion(5, "toy end-to-end", Some(Duration::from_secs(300)), || {
        let cfg = toy_config();
        assert_eq!(
            (cfg.data.classes, cfg.data.n_per_class, cfg.data.dim),
            (10, 50, 16)
        );
        let world = build_world::<f32>(&cfg).unwrap();
        let oracle = least_squares_accuracy(&world.train, &world.test);
        assert!(oracle >= 95.0, "linear oracle only reaches {oracle:.1}%");
        let out = run_pipeline(&cfg, &world, &Artifacts::default()).unwrap();
        let teacher = teacher_accuracy(&world.pair, &out.anchors, &world.test).unwrap();
        assert!(teacher >= 95.0, "teacher top-1 {teacher:.2}%");
        let (initial, last) = (out.initial_loss.total as f64, out.final_loss.total as f64);
        assert!(
            last < initial,
            "final total {last} not below initial {initial}"
        );
        format!("oracle {oracle:.1}%, teacher {teacher:.1}%, total loss {initial:.4} -> {last:.4}")
    });
}

#[test]
fn criterion_6_nsd_improves_neighborhood_consistency() {
    criterion(
        6,
        "NSD lowers neighborhood JS vs the λ=0 student",
        None,
        || {
            let world = toy_world();
            let base = toy_config();
            let (anchors, _) = eval::calibrate(&base, world).unwrap();
            let mut pairs = Vec::new();
            for seed in 0..3u64 {
                let mut with = base.clone();
                with.student.seed = seed;
                with.nsd.seed = seed;
                let mut without = with.clone();
                without.nsd.weights.lambda_nsd = 0.0;
                let js =
                    |cfg: &TrainConfig| run_cell(cfg, world, &anchors).unwrap().consistency as f64;
                let (a, b) = (js(&with), js(&without));
                assert!(a < b, "seed {seed}: NSD {a:.5} not below baseline {b:.5}");
                pairs.push(format!("{a:.4}<{b:.4}"));
            }
            format!("seeds 0..3: {}", pairs.join(", "))
        },
    );
}

#[test]
fn criterion_7_sweep_harness() {
    criterion(
        7,
        "λ sweep table and bit-identical λ=0 baseline",
        None,
        || {
            let world = toy_world();
            let cfg = toy_config();
            let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
            let sweep = run_sweep(&cfg, world, &grid, 2).unwrap();
            assert_eq!(sweep.table.len(), 5);
            let lambdas: Vec<f64> = sweep.table.rows().iter().map(|r| r.lambda_nsd).collect();
            assert_eq!(lambdas, grid);
            let zero = &sweep.runs.iter().find(|(l, _)| *l == 0.0).unwrap().1;

            let mut baseline = cfg.clone();
            baseline.nsd.weights.lambda_nsd = 0.0;
            baseline.nsd.structural = false;
            let (anchors, _) = eval::calibrate(&baseline, world).unwrap();
            let independent = run_cell(&baseline, world, &anchors).unwrap();
            let a = zero.log.records();
            let b = independent.log.records();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                for (f, g) in [
                    (x.total, y.total),
                    (x.base, y.base),
                    (x.cls, y.cls),
                    (x.vis, y.vis),
                    (x.txt, y.txt),
                ] {
                    assert_eq!(
                        f.map(f64::to_bits),
                        g.map(f64::to_bits),
                        "epoch {}",
                        x.epoch
                    );
                }
                assert_eq!((x.lr.to_bits(), x.top1), (y.lr.to_bits(), y.top1));
                assert!(y.nsd.is_none(), "baseline entered the structural path");
            }
            let best = sweep
                .table
                .rows()
                .iter()
                .max_by(|p, q| p.accuracy.total_cmp(&q.accuracy))
                .unwrap();
            format!(
                "5 rows, {} identical epochs at λ=0, best top-1 {:.1}% at λ={}",
                a.len(),
                best.accuracy,
                best.lambda_nsd
            )
        },
    );
}

fn pand(args: &[&str], out: &Path) -> std::process::Output {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.cfg");
    let o = Command::new(env!("CARGO_BIN_EXE_pand"))
        .args(args)
        .args(["--config", config, "--out"])
        .arg(out)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "pand {args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "repeated commands give identical bytes", None, || {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut outputs = Vec::new();
        for d in &dirs {
            let stdout = [
                pand(&["distill"], d.path()).stdout,
                pand(
                    &["sweep", "--set", "eval.sweep_grid=0,0.5", "--workers", "2"],
                    d.path(),
                )
                .stdout,
            ];
            outputs.push(stdout);
        }
        assert_eq!(outputs[0], outputs[1], "stdout differs");
        let files = [
            "metrics.jsonl",
            "anchors.bin",
            "sweep.txt",
            "sweep.csv",
            "resolved.cfg",
            "checkpoints/final.ckpt",
        ];
        for f in files {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
            let b = std::fs::read(dirs[1].path().join(f)).unwrap();
            assert!(a == b, "{f} differs between runs");
        }
        // Library level too, including worker count.
        let world = toy_world();
        let cfg = toy_config();
        let one = run_sweep(&cfg, world, &[0.0, 0.5], 1).unwrap().table;
        let two = run_sweep(&cfg, world, &[0.0, 0.5], 2).unwrap().table;
        assert_eq!(one.to_csv(), two.to_csv());
        format!("{} files byte-identical across two CLI runs", files.len())
    });
}

#[test]
fn criterion_9_format_round_trips() {
    criterion(
        9,
        "anchor and checkpoint round-trips and errors",
        None,
        || {
            let world = toy_world();
            let cfg = toy_config();
            let dir = tempfile::tempdir().unwrap();

            let anchors = eval::calibrate(&cfg, world).unwrap().0;
            let bytes = write_anchors(&anchors).unwrap();
            let path = dir.path().join("a.bin");
            save_anchors(&anchors, &path).unwrap();
            let back: SemanticAnchors<f32> = load_anchors(&path).unwrap();
            assert_eq!(back, anchors);
            assert_eq!(write_anchors(&back).unwrap(), bytes);
            let (c, d) = (anchors.num_classes(), anchors.matrix().cols());
            let err = read_anchors::<f32>(&bytes[..20 + 4 * c * d - 1]).unwrap_err();
            let want = format!(
                "payload short: expected {} floats ({} bytes)",
                c * d,
                4 * c * d
            );
            assert!(err.to_string().contains(&want), "{err}");
            let mut magic = bytes.clone();
            magic[..8].copy_from_slice(b"NOTANCHR");
            assert!(
                matches!(read_anchors::<f32>(&magic), Err(PandError::Format(m)) if m.contains("magic"))
            );
            assert!(matches!(
                write_anchors(
                    &SemanticAnchors::new(anchors.matrix().clone(), anchors.class_names().to_vec())
                        .unwrap()
                ),
                Err(PandError::NotFrozen(_))
            ));

            let student = init_student(&cfg, world).unwrap();
            let ckpt = Checkpoint::capture(&student, None, 7, &cfg.render());
            let raw = write_checkpoint(&ckpt);
            let again = read_checkpoint(&raw).unwrap();
            assert_eq!(again, ckpt);
            assert_eq!(write_checkpoint(&again), raw);
            let mut restored = init_student(&cfg, world).unwrap();
            for p in restored.parameters_mut() {
                p.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            }
            again.restore_into(&mut restored).unwrap();
            assert_eq!(restored, student);
            let mut flipped = raw.clone();
            flipped[raw.len() / 2] ^= 0x40;
            assert!(read_checkpoint(&flipped)
                .unwrap_err()
                .to_string()
                .contains("content hash mismatch"));
            assert!(matches!(
                read_checkpoint(&raw[..raw.len() - 33]),
                Err(PandError::Format(_))
            ));

            format!(
                "{} anchor bytes, {} checkpoint bytes",
                bytes.len(),
                raw.len()
            )
        },
    );
}
